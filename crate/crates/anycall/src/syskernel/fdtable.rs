//! Virtual file-descriptor table over a sandboxed directory tree.
//!
//! All paths resolve chroot-style inside the sandbox root: a leading `/`
//! means the root itself, `..` never climbs above it, and symlinked
//! targets are re-checked against the canonicalized root. Descriptors 0-2
//! are reserved (1 and 2 are the captured output streams).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::errno::{EACCES, EBADF, EINVAL, ENOENT};

pub const O_RDONLY: i64 = 0;
pub const O_WRONLY: i64 = 1;
pub const O_RDWR: i64 = 2;
pub const O_CREAT: i64 = 0o100;
pub const O_TRUNC: i64 = 0o1000;
pub const AT_FDCWD: i64 = -100;

pub const SEEK_SET: i64 = 0;
pub const SEEK_CUR: i64 = 1;
pub const SEEK_END: i64 = 2;

const FIRST_FD: i64 = 3;

#[derive(Debug)]
pub struct OpenFile {
    pub rel_path: String,
    file: File,
    cursor: u64,
    readable: bool,
    writable: bool,
}

#[derive(Debug, Default)]
pub struct FdTable {
    entries: BTreeMap<i64, OpenFile>,
}

impl FdTable {
    pub fn new() -> Self {
        FdTable::default()
    }

    fn alloc_fd(&self) -> i64 {
        let mut fd = FIRST_FD;
        while self.entries.contains_key(&fd) {
            fd += 1;
        }
        fd
    }

    pub fn open(&mut self, root: &Path, path: &[u8], flags: i64) -> i64 {
        let rel = match jail_path(root, path, flags & O_CREAT != 0) {
            Ok(rel) => rel,
            Err(errno) => return errno,
        };
        let accmode = flags & 0o3;
        let (readable, writable) = match accmode {
            O_RDONLY => (true, false),
            O_WRONLY => (false, true),
            O_RDWR => (true, true),
            _ => return -EINVAL,
        };
        let mut options = OpenOptions::new();
        options
            .read(readable)
            .write(writable)
            .create(flags & O_CREAT != 0)
            .truncate(flags & O_TRUNC != 0 && writable);
        let full = root.join(&rel);
        if full.is_dir() {
            return -EACCES;
        }
        match options.open(&full) {
            Ok(file) => {
                let fd = self.alloc_fd();
                self.entries.insert(
                    fd,
                    OpenFile {
                        rel_path: rel,
                        file,
                        cursor: 0,
                        readable,
                        writable,
                    },
                );
                fd
            }
            Err(e) => io_errno(&e),
        }
    }

    pub fn close(&mut self, fd: i64) -> i64 {
        match self.entries.remove(&fd) {
            Some(_) => 0,
            None => -EBADF,
        }
    }

    pub fn lseek(&mut self, fd: i64, offset: i64, whence: i64) -> i64 {
        let Some(entry) = self.entries.get_mut(&fd) else {
            return -EBADF;
        };
        let base = match whence {
            SEEK_SET => 0,
            SEEK_CUR => entry.cursor as i64,
            SEEK_END => match entry.file.metadata() {
                Ok(m) => m.len() as i64,
                Err(e) => return io_errno(&e),
            },
            _ => return -EINVAL,
        };
        let Some(target) = base.checked_add(offset) else {
            return -EINVAL;
        };
        if target < 0 {
            return -EINVAL;
        }
        entry.cursor = target as u64;
        target
    }

    pub fn read(&mut self, fd: i64, buf: &mut [u8]) -> i64 {
        let Some(entry) = self.entries.get_mut(&fd) else {
            return -EBADF;
        };
        if !entry.readable {
            return -EBADF;
        }
        if entry.file.seek(SeekFrom::Start(entry.cursor)).is_err() {
            return -EINVAL;
        }
        match entry.file.read(buf) {
            Ok(n) => {
                entry.cursor += n as u64;
                n as i64
            }
            Err(e) => io_errno(&e),
        }
    }

    pub fn write(&mut self, fd: i64, data: &[u8]) -> i64 {
        let Some(entry) = self.entries.get_mut(&fd) else {
            return -EBADF;
        };
        if !entry.writable {
            return -EBADF;
        }
        if entry.file.seek(SeekFrom::Start(entry.cursor)).is_err() {
            return -EINVAL;
        }
        match entry.file.write(data) {
            Ok(n) => {
                entry.cursor += n as u64;
                n as i64
            }
            Err(e) => io_errno(&e),
        }
    }

    pub fn size_of(&self, fd: i64) -> Result<u64, i64> {
        let entry = self.entries.get(&fd).ok_or(-EBADF)?;
        entry
            .file
            .metadata()
            .map(|m| m.len())
            .map_err(|e| io_errno(&e))
    }

    pub fn path_of(&self, fd: i64) -> Option<&str> {
        self.entries.get(&fd).map(|e| e.rel_path.as_str())
    }

    pub fn contains(&self, fd: i64) -> bool {
        self.entries.contains_key(&fd)
    }
}

pub fn io_errno(e: &std::io::Error) -> i64 {
    match e.kind() {
        std::io::ErrorKind::NotFound => -ENOENT,
        std::io::ErrorKind::PermissionDenied => -EACCES,
        _ => -EINVAL,
    }
}

/// Resolve a path inside the sandbox root, chroot-style. Returns the
/// root-relative path or a negative errno. `-EACCES` flags escape
/// attempts, both lexical (`..` above the root) and via symlinks.
pub fn jail_path(root: &Path, path: &[u8], for_create: bool) -> Result<String, i64> {
    let text = std::str::from_utf8(path).map_err(|_| -EINVAL)?;
    if text.is_empty() {
        return Err(-ENOENT);
    }
    let mut parts: Vec<&str> = Vec::new();
    for comp in text.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(-EACCES);
                }
            }
            c => parts.push(c),
        }
    }
    if parts.is_empty() {
        return Err(-EACCES);
    }
    let rel = parts.join("/");
    let full = root.join(&rel);

    // Defend against symlinks pointing outside the root: validate the
    // canonical form of the target (or of its parent for creations).
    let canonical = if full.exists() {
        Some(full.canonicalize().map_err(|e| io_errno(&e))?)
    } else if for_create {
        let parent: PathBuf = match full.parent() {
            Some(p) if p.exists() => p.canonicalize().map_err(|e| io_errno(&e))?,
            Some(_) => return Err(-ENOENT),
            None => return Err(-EACCES),
        };
        Some(parent)
    } else {
        None
    };
    if let Some(canonical) = canonical {
        if !canonical.starts_with(root) {
            return Err(-EACCES);
        }
    }
    Ok(rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sandbox() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.txt"), b"hello world").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/inner.txt"), b"inner").unwrap();
        dir
    }

    fn canon(dir: &tempfile::TempDir) -> PathBuf {
        dir.path().canonicalize().unwrap()
    }

    #[test]
    fn open_read_close() {
        let dir = sandbox();
        let root = canon(&dir);
        let mut t = FdTable::new();
        let fd = t.open(&root, b"f.txt", O_RDONLY);
        assert!(fd >= 3);
        let mut buf = [0u8; 5];
        assert_eq!(t.read(fd, &mut buf), 5);
        assert_eq!(&buf, b"hello");
        assert_eq!(t.close(fd), 0);
        assert_eq!(t.close(fd), -EBADF);
    }

    #[test]
    fn missing_file_is_enoent() {
        let dir = sandbox();
        let root = canon(&dir);
        let mut t = FdTable::new();
        assert_eq!(t.open(&root, b"missing.txt", O_RDONLY), -ENOENT);
    }

    #[test]
    fn dotdot_escape_is_eacces() {
        let dir = sandbox();
        let root = canon(&dir);
        assert_eq!(jail_path(&root, b"../etc/passwd", false), Err(-EACCES));
        assert_eq!(
            jail_path(&root, b"sub/../../etc/passwd", false),
            Err(-EACCES)
        );
        // Leading slash is the sandbox root itself, not the host root.
        assert_eq!(jail_path(&root, b"/f.txt", false), Ok("f.txt".to_string()));
        // `..` inside the tree is fine.
        assert_eq!(
            jail_path(&root, b"sub/../f.txt", false),
            Ok("f.txt".to_string())
        );
    }

    #[cfg(unix)]
    #[test]
    fn symlink_escape_is_eacces() {
        let dir = sandbox();
        let root = canon(&dir);
        let outside = tempfile::tempdir().unwrap();
        std::fs::write(outside.path().join("secret"), b"s").unwrap();
        std::os::unix::fs::symlink(outside.path().join("secret"), dir.path().join("link")).unwrap();
        assert_eq!(jail_path(&root, b"link", false), Err(-EACCES));
        std::os::unix::fs::symlink(outside.path(), dir.path().join("dirlink")).unwrap();
        assert_eq!(jail_path(&root, b"dirlink/secret", false), Err(-EACCES));
    }

    #[test]
    fn lseek_whence_variants() {
        let dir = sandbox();
        let root = canon(&dir);
        let mut t = FdTable::new();
        let fd = t.open(&root, b"f.txt", O_RDONLY);
        assert_eq!(t.lseek(fd, 6, SEEK_SET), 6);
        assert_eq!(t.lseek(fd, 2, SEEK_CUR), 8);
        assert_eq!(t.lseek(fd, -1, SEEK_END), 10);
        assert_eq!(t.lseek(fd, -100, SEEK_SET), -EINVAL);
        assert_eq!(t.lseek(fd, 0, 9), -EINVAL);
        assert_eq!(t.lseek(99, 0, SEEK_SET), -EBADF);
    }

    #[test]
    fn create_and_truncate() {
        let dir = sandbox();
        let root = canon(&dir);
        let mut t = FdTable::new();
        let fd = t.open(&root, b"new.bin", O_RDWR | O_CREAT);
        assert!(fd >= 3);
        assert_eq!(t.write(fd, b"abcdef"), 6);
        assert_eq!(t.close(fd), 0);
        let fd = t.open(&root, b"new.bin", O_WRONLY | O_TRUNC);
        assert_eq!(t.size_of(fd), Ok(0));
        assert_eq!(t.close(fd), 0);
    }

    #[test]
    fn lowest_free_fd_reused() {
        let dir = sandbox();
        let root = canon(&dir);
        let mut t = FdTable::new();
        let a = t.open(&root, b"f.txt", O_RDONLY);
        let b = t.open(&root, b"sub/inner.txt", O_RDONLY);
        assert_eq!((a, b), (3, 4));
        t.close(a);
        assert_eq!(t.open(&root, b"f.txt", O_RDONLY), 3);
    }
}
