//! The simulated kernel: canonical helper table, syscall implementations
//! over a sandboxed directory tree, the pinned user-memory arena, and
//! transition/kernel-call/iTLB event accounting.
//!
//! A [`SimKernel`] is single-client: exactly one execution context or
//! harness thread drives it at a time. Parallel callers create
//! independent instances over disjoint sandboxes.

mod arena;
mod fdtable;

pub use arena::{
    decode_region_handle, encode_region_handle, PinnedRegion, UserArena, ARENA_BASE,
    DEFAULT_ARENA_SIZE, REGION_TAG,
};
pub use fdtable::{
    jail_path, FdTable, AT_FDCWD, O_CREAT, O_RDONLY, O_RDWR, O_TRUNC, O_WRONLY, SEEK_CUR, SEEK_END,
    SEEK_SET,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::Serialize;

pub mod errno {
    pub const ENOENT: i64 = 2;
    pub const EBADF: i64 = 9;
    pub const EACCES: i64 = 13;
    pub const EFAULT: i64 = 14;
    pub const EINVAL: i64 = 22;
}
use errno::{EACCES, EBADF, EFAULT};

/// Size of the fixed-layout stat record written by `fstat`.
pub const STAT_RECORD_SIZE: u64 = 144;
/// Byte offset of `st_size` (64-bit little-endian) within the record.
pub const STAT_ST_SIZE_OFFSET: u64 = 48;

/// Longest path accepted by `open`/`openat`.
pub const PATH_MAX: u64 = 4096;

/// The simulated process id returned by `getpid`.
pub const SIM_PID: i64 = 4242;

// Stable helper ids. These never change across releases.
pub mod helpers {
    pub const GETPID: u32 = 1;
    pub const OPEN: u32 = 2;
    pub const OPENAT: u32 = 3;
    pub const CLOSE: u32 = 4;
    pub const LSEEK: u32 = 5;
    pub const READ: u32 = 6;
    pub const WRITE: u32 = 7;
    pub const FSTAT: u32 = 8;
    pub const MAP: u32 = 9;
    pub const UNMAP: u32 = 10;
    pub const COPY_FROM_USER: u32 = 11;
    pub const COPY_TO_USER: u32 = 12;
}

/// Argument class in a helper contract. The verifier checks every call
/// site against these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArgSpec {
    /// Any initialized numeric value (plain scalar or user address).
    Scalar,
    /// A user-space address. Plain scalars are accepted too: the kernel
    /// revalidates addresses at runtime, and only direct dereference is
    /// dangerous.
    UserAddr,
    /// A compile-time-known size of at least `min` bytes (1 for `map`,
    /// 0 for the copy helpers, where a zero-length copy is a no-op).
    ConstSize { min: u64 },
    /// A live region handle; `len_arg` names the argument holding the
    /// access length, checked against the handle's remaining capacity.
    Region { len_arg: usize },
    /// A live region handle on its own (`unmap`).
    RegionHandle,
    /// Copy destination: in-frame stack pointer or live region handle,
    /// with `len_arg` bytes of capacity.
    MemDst { len_arg: usize },
    /// Copy source: initialized stack bytes or live region handle.
    MemSrc { len_arg: usize },
}

/// Result class of a helper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetSpec {
    /// Arbitrary scalar (results and negative errno codes).
    Scalar,
    /// Always zero.
    FixedZero,
    /// Fresh region handle or null.
    MaybeNullRegion,
}

#[derive(Clone, Copy, Debug)]
pub struct HelperDesc {
    pub name: &'static str,
    pub id: u32,
    pub args: &'static [ArgSpec],
    pub ret: RetSpec,
    /// True for the simulated system calls (as opposed to the memory
    /// helpers), i.e. the calls that also exist on the traditional path.
    pub is_syscall: bool,
}

pub struct HelperTable {
    entries: Vec<HelperDesc>,
}

impl HelperTable {
    pub fn all(&self) -> &[HelperDesc] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&HelperDesc> {
        self.entries.iter().find(|h| h.name == name)
    }

    pub fn by_id(&self, id: u32) -> Option<&HelperDesc> {
        self.entries.iter().find(|h| h.id == id)
    }
}

/// The canonical helper table. Ids are stable; argument contracts encode
/// which parameters are scalars, user addresses, region handles, or
/// constant sizes.
pub fn helper_table() -> &'static HelperTable {
    static TABLE: OnceLock<HelperTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        use helpers::*;
        use ArgSpec::*;
        #[rustfmt::skip]
        let entries = vec![
            HelperDesc { name: "getpid", id: GETPID, args: &[], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "open", id: OPEN, args: &[UserAddr, Scalar], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "openat", id: OPENAT, args: &[Scalar, UserAddr, Scalar], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "close", id: CLOSE, args: &[Scalar], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "lseek", id: LSEEK, args: &[Scalar, Scalar, Scalar], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "read", id: READ, args: &[Scalar, Region { len_arg: 2 }, Scalar], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "write", id: WRITE, args: &[Scalar, Region { len_arg: 2 }, Scalar], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "fstat", id: FSTAT, args: &[Scalar, UserAddr], ret: RetSpec::Scalar, is_syscall: true },
            HelperDesc { name: "map", id: MAP, args: &[UserAddr, ConstSize { min: 1 }], ret: RetSpec::MaybeNullRegion, is_syscall: false },
            HelperDesc { name: "unmap", id: UNMAP, args: &[RegionHandle], ret: RetSpec::FixedZero, is_syscall: false },
            HelperDesc { name: "copy_from_user", id: COPY_FROM_USER, args: &[MemDst { len_arg: 1 }, ConstSize { min: 0 }, UserAddr], ret: RetSpec::Scalar, is_syscall: false },
            HelperDesc { name: "copy_to_user", id: COPY_TO_USER, args: &[UserAddr, ConstSize { min: 0 }, MemSrc { len_arg: 1 }], ret: RetSpec::Scalar, is_syscall: false },
        ];
        HelperTable { entries }
    })
}

/// Names accepted by [`SimKernel::traditional_syscall`].
pub fn syscall_names() -> impl Iterator<Item = &'static str> {
    helper_table()
        .all()
        .iter()
        .filter(|h| h.is_syscall)
        .map(|h| h.name)
}

/// Transition, kernel-call, iTLB-flush and per-syscall work counters.
///
/// `user_kernel_transitions` counts each direction separately, so one
/// syscall or one aggregated invocation costs two. The iTLB flush is
/// charged once per kernel entry; kernel calls inside an invocation add
/// none.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EventCounters {
    pub user_kernel_transitions: u64,
    pub itlb_flushes: u64,
    pub kernel_calls: BTreeMap<String, u64>,
    pub syscall_work: BTreeMap<String, u64>,
}

impl EventCounters {
    pub fn kernel_calls_total(&self) -> u64 {
        self.kernel_calls.values().sum()
    }

    pub fn work_total(&self) -> u64 {
        self.syscall_work.values().sum()
    }

    /// Flatten to the stable `key -> count` record used for output.
    pub fn to_flat(&self) -> BTreeMap<String, u64> {
        let mut flat = BTreeMap::new();
        flat.insert(
            "user_kernel_transitions".to_string(),
            self.user_kernel_transitions,
        );
        flat.insert("itlb_flushes".to_string(), self.itlb_flushes);
        for (name, count) in &self.kernel_calls {
            flat.insert(format!("kernel_calls.{name}"), *count);
        }
        for (name, count) in &self.syscall_work {
            flat.insert(format!("syscall_work.{name}"), *count);
        }
        flat
    }

    /// Counter-wise difference against an earlier snapshot.
    pub fn since(&self, earlier: &EventCounters) -> EventCounters {
        let mut diff = self.clone();
        diff.user_kernel_transitions -= earlier.user_kernel_transitions;
        diff.itlb_flushes -= earlier.itlb_flushes;
        for (name, count) in &earlier.kernel_calls {
            *diff.kernel_calls.get_mut(name).expect("monotone counters") -= count;
        }
        for (name, count) in &earlier.syscall_work {
            *diff.syscall_work.get_mut(name).expect("monotone counters") -= count;
        }
        diff.kernel_calls.retain(|_, c| *c > 0);
        diff.syscall_work.retain(|_, c| *c > 0);
        diff
    }
}

/// One traced simulator event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: TraceKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceKind {
    EnterKernel,
    ExitKernel,
    KcallEnter { helper: u32 },
    KcallExit { helper: u32, ret: i64 },
    Map { region: u32 },
    Unmap { region: u32 },
}

impl TraceEvent {
    /// Newline-delimited record form: seq, event kind, helper id, payload.
    pub fn to_line(&self) -> String {
        let (kind, helper, payload) = match &self.kind {
            TraceKind::EnterKernel => {
                ("enter-kernel".to_string(), "-".to_string(), "-".to_string())
            }
            TraceKind::ExitKernel => ("exit-kernel".to_string(), "-".to_string(), "-".to_string()),
            TraceKind::KcallEnter { helper } => (
                "kcall-enter".to_string(),
                helper_name(*helper),
                "-".to_string(),
            ),
            TraceKind::KcallExit { helper, ret } => (
                "kcall-exit".to_string(),
                helper_name(*helper),
                ret.to_string(),
            ),
            TraceKind::Map { region } => (
                "map".to_string(),
                helper_name(helpers::MAP),
                region.to_string(),
            ),
            TraceKind::Unmap { region } => (
                "unmap".to_string(),
                helper_name(helpers::UNMAP),
                region.to_string(),
            ),
        };
        format!("{}\t{}\t{}\t{}", self.seq, kind, helper, payload)
    }
}

fn helper_name(id: u32) -> String {
    helper_table()
        .by_id(id)
        .map(|h| h.name.to_string())
        .unwrap_or_else(|| format!("#{id}"))
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("unmap of non-live region id {0}")]
    UnmapNonLive(u32),
    #[error("unknown helper id {0}")]
    UnknownHelper(u32),
    #[error("helper `{0}` needs VM context and cannot be dispatched here")]
    NeedsVmContext(&'static str),
    #[error("unknown syscall `{0}`")]
    UnknownSyscall(String),
}

/// Simulated kernel state: fd table rooted in a sandbox directory, user
/// arena, captured output streams and event counters.
pub struct SimKernel {
    sandbox: Option<PathBuf>,
    arena: UserArena,
    fds: FdTable,
    counters: EventCounters,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
    trace: Option<Vec<TraceEvent>>,
    trace_seq: u64,
}

impl fmt::Debug for SimKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimKernel")
            .field("sandbox", &self.sandbox)
            .field("counters", &self.counters)
            .finish_non_exhaustive()
    }
}

impl SimKernel {
    /// A kernel without filesystem access; only `getpid` and the memory
    /// helpers work. Filesystem calls fail with `-EACCES`.
    pub fn without_sandbox() -> Self {
        Self::build(None, DEFAULT_ARENA_SIZE)
    }

    pub fn new(sandbox_root: &Path) -> std::io::Result<Self> {
        let root = sandbox_root.canonicalize()?;
        Ok(Self::build(Some(root), DEFAULT_ARENA_SIZE))
    }

    pub fn with_arena_size(
        sandbox_root: Option<&Path>,
        arena_size: usize,
    ) -> std::io::Result<Self> {
        let root = match sandbox_root {
            Some(p) => Some(p.canonicalize()?),
            None => None,
        };
        Ok(Self::build(root, arena_size))
    }

    fn build(sandbox: Option<PathBuf>, arena_size: usize) -> Self {
        SimKernel {
            sandbox,
            arena: UserArena::new(arena_size),
            fds: FdTable::new(),
            counters: EventCounters::default(),
            stdout: Vec::new(),
            stderr: Vec::new(),
            trace: None,
            trace_seq: 0,
        }
    }

    pub fn arena(&self) -> &UserArena {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut UserArena {
        &mut self.arena
    }

    pub fn counters(&self) -> &EventCounters {
        &self.counters
    }

    pub fn stdout(&self) -> &[u8] {
        &self.stdout
    }

    pub fn stderr(&self) -> &[u8] {
        &self.stderr
    }

    pub fn take_stdout(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.stdout)
    }

    pub fn take_stderr(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.stderr)
    }

    pub fn set_tracing(&mut self, enabled: bool) {
        self.trace = if enabled { Some(Vec::new()) } else { None };
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn emit(&mut self, kind: TraceKind) {
        if let Some(events) = self.trace.as_mut() {
            events.push(TraceEvent {
                seq: self.trace_seq,
                kind,
            });
            self.trace_seq += 1;
        }
    }

    /// Charge a user-to-kernel mode switch (and its iTLB flush).
    pub fn enter_kernel(&mut self) {
        self.counters.user_kernel_transitions += 1;
        self.counters.itlb_flushes += 1;
        self.emit(TraceKind::EnterKernel);
    }

    /// Charge a kernel-to-user mode switch.
    pub fn exit_kernel(&mut self) {
        self.counters.user_kernel_transitions += 1;
        self.emit(TraceKind::ExitKernel);
    }

    pub(crate) fn begin_kcall(&mut self, helper: u32) {
        let name = helper_name(helper);
        *self.counters.kernel_calls.entry(name.clone()).or_default() += 1;
        if helper_table().by_id(helper).is_some_and(|h| h.is_syscall) {
            *self.counters.syscall_work.entry(name).or_default() += 1;
        }
        self.emit(TraceKind::KcallEnter { helper });
    }

    pub(crate) fn end_kcall(&mut self, helper: u32, ret: i64) {
        self.emit(TraceKind::KcallExit { helper, ret });
    }

    /// Dispatch one kernel call by helper id. Charges one kernel-call
    /// event and no transition. The copy helpers live in the VM (they
    /// touch the bytecode stack) and are rejected here.
    pub fn kcall(&mut self, helper: u32, args: [u64; 5]) -> Result<i64, KernelError> {
        use helpers::*;
        let desc = helper_table()
            .by_id(helper)
            .ok_or(KernelError::UnknownHelper(helper))?;
        self.begin_kcall(helper);
        let ret = match helper {
            GETPID => self.sys_getpid(),
            OPEN => self.sys_open(args[0], args[1] as i64),
            OPENAT => self.sys_openat(args[0] as i64, args[1], args[2] as i64),
            CLOSE => self.sys_close(args[0] as i64),
            LSEEK => self.sys_lseek(args[0] as i64, args[1] as i64, args[2] as i64),
            READ => self.sys_read_region(args[0] as i64, args[1], args[2]),
            WRITE => self.sys_write_region(args[0] as i64, args[1], args[2]),
            FSTAT => self.sys_fstat(args[0] as i64, args[1]),
            MAP => self.do_map(args[0], args[1]),
            UNMAP => {
                let ret = self.do_unmap(args[0]);
                match ret {
                    Ok(v) => v,
                    Err(e) => {
                        self.end_kcall(helper, -1);
                        return Err(e);
                    }
                }
            }
            COPY_FROM_USER | COPY_TO_USER => {
                return Err(KernelError::NeedsVmContext(desc.name));
            }
            _ => return Err(KernelError::UnknownHelper(helper)),
        };
        self.end_kcall(helper, ret);
        Ok(ret)
    }

    /// Execute a syscall on the traditional path: identical filesystem
    /// and arena semantics, but charged one full user/kernel round trip.
    /// Buffer arguments are user addresses into the arena.
    pub fn traditional_syscall(&mut self, name: &str, args: &[i64]) -> Result<i64, KernelError> {
        let desc = helper_table()
            .by_name(name)
            .filter(|h| h.is_syscall)
            .ok_or_else(|| KernelError::UnknownSyscall(name.to_string()))?;
        let arg = |i: usize| -> i64 { args.get(i).copied().unwrap_or(0) };
        self.enter_kernel();
        *self
            .counters
            .syscall_work
            .entry(desc.name.to_string())
            .or_default() += 1;
        let ret = match desc.id {
            helpers::GETPID => self.sys_getpid(),
            helpers::OPEN => self.sys_open(arg(0) as u64, arg(1)),
            helpers::OPENAT => self.sys_openat(arg(0), arg(1) as u64, arg(2)),
            helpers::CLOSE => self.sys_close(arg(0)),
            helpers::LSEEK => self.sys_lseek(arg(0), arg(1), arg(2)),
            helpers::READ => self.sys_read_user(arg(0), arg(1) as u64, arg(2) as u64),
            helpers::WRITE => self.sys_write_user(arg(0), arg(1) as u64, arg(2) as u64),
            helpers::FSTAT => self.sys_fstat(arg(0), arg(1) as u64),
            _ => unreachable!("filtered to syscalls"),
        };
        self.exit_kernel();
        Ok(ret)
    }

    fn sys_getpid(&mut self) -> i64 {
        SIM_PID
    }

    fn sandbox_root(&self) -> Result<&Path, i64> {
        self.sandbox.as_deref().ok_or(-EACCES)
    }

    fn sys_open(&mut self, path_addr: u64, flags: i64) -> i64 {
        let Some(path) = self.arena.read_cstr(path_addr, PATH_MAX) else {
            return -EFAULT;
        };
        let path = path.to_vec();
        let root = match self.sandbox_root() {
            Ok(r) => r.to_path_buf(),
            Err(e) => return e,
        };
        self.fds.open(&root, &path, flags)
    }

    fn sys_openat(&mut self, dirfd: i64, path_addr: u64, flags: i64) -> i64 {
        if dirfd == AT_FDCWD {
            return self.sys_open(path_addr, flags);
        }
        let Some(rel) = self.fds.path_of(dirfd).map(str::to_string) else {
            return -EBADF;
        };
        let Some(path) = self.arena.read_cstr(path_addr, PATH_MAX) else {
            return -EFAULT;
        };
        let dir = match rel.rsplit_once('/') {
            Some((parent, _)) => parent.to_string(),
            None => String::new(),
        };
        let joined = if dir.is_empty() {
            path.to_vec()
        } else {
            let mut j = dir.into_bytes();
            j.push(b'/');
            j.extend_from_slice(path);
            j
        };
        let root = match self.sandbox_root() {
            Ok(r) => r.to_path_buf(),
            Err(e) => return e,
        };
        self.fds.open(&root, &joined, flags)
    }

    fn sys_close(&mut self, fd: i64) -> i64 {
        self.fds.close(fd)
    }

    fn sys_lseek(&mut self, fd: i64, offset: i64, whence: i64) -> i64 {
        self.fds.lseek(fd, offset, whence)
    }

    /// Resolve a (handle, len) pair to an arena byte range.
    fn region_range(&self, handle: u64, len: u64) -> Result<(u64, u64), i64> {
        let (id, off) = decode_region_handle(handle).ok_or(-EFAULT)?;
        let region = self.arena.region(id).ok_or(-EFAULT)?;
        if off.checked_add(len).is_none_or(|end| end > region.size) {
            return Err(-EFAULT);
        }
        Ok((region.offset + off, len))
    }

    fn sys_read_region(&mut self, fd: i64, handle: u64, len: u64) -> i64 {
        match self.region_range(handle, len) {
            Ok((offset, len)) => {
                let mut buf = vec![0u8; len as usize];
                let n = self.fds.read(fd, &mut buf);
                if n > 0 {
                    self.arena
                        .slice_mut(offset, n as u64)
                        .copy_from_slice(&buf[..n as usize]);
                }
                n
            }
            Err(e) => e,
        }
    }

    fn sys_write_region(&mut self, fd: i64, handle: u64, len: u64) -> i64 {
        match self.region_range(handle, len) {
            Ok((offset, len)) => {
                let data = self.arena.slice(offset, len).to_vec();
                self.write_bytes(fd, &data)
            }
            Err(e) => e,
        }
    }

    fn sys_read_user(&mut self, fd: i64, addr: u64, len: u64) -> i64 {
        if self.arena.offset_of(addr, len).is_none() {
            return -EFAULT;
        }
        let mut buf = vec![0u8; len as usize];
        let n = self.fds.read(fd, &mut buf);
        if n > 0 {
            self.arena
                .write(addr, &buf[..n as usize])
                .expect("range checked");
        }
        n
    }

    fn sys_write_user(&mut self, fd: i64, addr: u64, len: u64) -> i64 {
        let Some(data) = self.arena.read(addr, len).map(<[u8]>::to_vec) else {
            return -EFAULT;
        };
        self.write_bytes(fd, &data)
    }

    fn write_bytes(&mut self, fd: i64, data: &[u8]) -> i64 {
        match fd {
            1 => {
                self.stdout.extend_from_slice(data);
                data.len() as i64
            }
            2 => {
                self.stderr.extend_from_slice(data);
                data.len() as i64
            }
            _ => self.fds.write(fd, data),
        }
    }

    fn sys_fstat(&mut self, fd: i64, dst_addr: u64) -> i64 {
        let size = match self.fds.size_of(fd) {
            Ok(s) => s,
            Err(e) => return e,
        };
        let mut record = [0u8; STAT_RECORD_SIZE as usize];
        record[STAT_ST_SIZE_OFFSET as usize..STAT_ST_SIZE_OFFSET as usize + 8]
            .copy_from_slice(&size.to_le_bytes());
        match self.arena.write(dst_addr, &record) {
            Some(()) => 0,
            None => -EFAULT,
        }
    }

    fn do_map(&mut self, addr: u64, size: u64) -> i64 {
        let handle = self.arena.map(addr, size);
        if handle != 0 {
            let (id, _) = decode_region_handle(handle).expect("fresh handle");
            self.emit(TraceKind::Map { region: id });
        }
        handle as i64
    }

    fn do_unmap(&mut self, handle: u64) -> Result<i64, KernelError> {
        let Some((id, _)) = decode_region_handle(handle) else {
            return Err(KernelError::UnmapNonLive(0));
        };
        if self.arena.unmap(id) {
            self.emit(TraceKind::Unmap { region: id });
            Ok(0)
        } else {
            Err(KernelError::UnmapNonLive(id))
        }
    }

    /// Arena copy used by the VM-side copy helpers: user memory into a
    /// caller buffer. `-EFAULT` if the arena range is out of bounds.
    pub(crate) fn copy_in(&self, user_addr: u64, dst: &mut [u8]) -> i64 {
        match self.arena.read(user_addr, dst.len() as u64) {
            Some(src) => {
                dst.copy_from_slice(src);
                0
            }
            None => -EFAULT,
        }
    }

    /// Caller buffer into user memory.
    pub(crate) fn copy_out(&mut self, user_addr: u64, src: &[u8]) -> i64 {
        match self.arena.write(user_addr, src) {
            Some(()) => 0,
            None => -EFAULT,
        }
    }

    /// Live-region arena window for the VM's direct loads and stores.
    pub(crate) fn live_region_window(&self, id: u32) -> Option<PinnedRegion> {
        self.arena.region(id)
    }
}
