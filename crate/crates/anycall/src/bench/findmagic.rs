//! File filtering by magic value, in four variants: one aggregated, three
//! over traditional system calls.
//!
//! The tool reads file paths (one per line), opens each file, seeks to a
//! fixed offset, reads a few bytes, and prints the path when they match
//! the configured magic value. All variants produce byte-identical
//! stdout/stderr; they differ only in how often they cross the
//! user/kernel boundary.
//!
//! The aggregated variant generates its bytecode from a template
//! parameterized by chunk size, magic value and offset. Each chunk of
//! paths is laid out in the arena as fixed-size slots and handed to one
//! invocation, so one user/kernel round trip covers `chunk_size` files.

use std::path::PathBuf;

use thiserror::Error;

use crate::isa::{assemble_named, Program};
use crate::syskernel::{
    EventCounters, SimKernel, ARENA_BASE, DEFAULT_ARENA_SIZE, O_RDONLY, SEEK_SET,
};
use crate::verifier::{verify, Limits, Rule, Verdict};
use crate::vm::{invoke_anycall, DEFAULT_FUEL};

/// Per-path slot in the chunk layout. Each slot holds, at fixed offsets:
/// the printable line length, the warning length, the printable
/// `path\n` line, the pre-rendered warning text, and a NUL-terminated
/// copy of the path for `open`.
pub const SLOT_SIZE: u64 = 8192;
/// Byte offset of the printable `path\n` line (lengths precede it).
const SLOT_PATH_OFFSET: u64 = 16;
/// Byte offset of the pre-rendered warning text.
const SLOT_WARN_OFFSET: u64 = 4096;
/// Byte offset of the NUL-terminated path for `open`.
const SLOT_CSTR_OFFSET: u64 = 6144;
/// Longest accepted input path; longer paths are skipped with a warning.
pub const PATH_LIMIT: usize = 2000;
/// Longest supported magic value (the read buffer size).
pub const MAGIC_MAX: usize = 64;
/// Simulated stdio buffer used by the `libc-style` variant.
const LIBC_BUF: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Anycall,
    SysBurst,
    Sys,
    LibcStyle,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Anycall => "anycall",
            Variant::SysBurst => "sys-burst",
            Variant::Sys => "sys",
            Variant::LibcStyle => "libc-style",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "anycall" => Variant::Anycall,
            "sys-burst" => Variant::SysBurst,
            "sys" => Variant::Sys,
            "libc-style" | "libc" => Variant::LibcStyle,
            _ => return None,
        })
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::Anycall,
            Variant::SysBurst,
            Variant::Sys,
            Variant::LibcStyle,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct FindMagicConfig {
    pub magic: Vec<u8>,
    pub offset: u64,
    pub variant: Variant,
    pub chunk_size: u64,
    pub sandbox: PathBuf,
}

/// One input line: the spelling to echo on a match, and the
/// sandbox-relative path to open. They differ when the input carries
/// host paths (e.g. piped from `find <sandbox-dir> -type f`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputPath {
    pub display: String,
    pub rel: String,
}

impl InputPath {
    /// An already-sandbox-relative path, echoed verbatim.
    pub fn relative(path: impl Into<String>) -> Self {
        let path = path.into();
        InputPath {
            rel: path.clone(),
            display: path,
        }
    }
}

impl From<&str> for InputPath {
    fn from(path: &str) -> Self {
        InputPath::relative(path)
    }
}

#[derive(Debug, Error)]
pub enum FindMagicError {
    #[error("magic value must be 1..={MAGIC_MAX} bytes, got {0}")]
    BadMagic(usize),
    #[error("chunk size must be at least 1")]
    BadChunkSize,
    #[error("magic offset {0} too large")]
    OffsetTooLarge(u64),
    #[error(
        "generated program for chunk size {chunk_size} exceeds verifier limits \
         ({diagnostic}); lower the chunk size"
    )]
    ChunkTooLarge { chunk_size: u64, diagnostic: String },
    #[error("generated program rejected: {0:?}")]
    Rejected(Verdict),
    #[error("sandbox: {0}")]
    Io(#[from] std::io::Error),
    #[error("kernel: {0}")]
    Kernel(#[from] crate::syskernel::KernelError),
    #[error("aggregated invocation faulted: {0}")]
    Faulted(String),
    #[error("assembly: {0}")]
    Asm(#[from] crate::isa::AsmError),
}

/// Result of one variant run.
#[derive(Clone, Debug)]
pub struct FindMagicOutcome {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub counters: EventCounters,
    /// Number of aggregated invocations (0 for traditional variants).
    pub invocations: u64,
}

fn check_config(config: &FindMagicConfig) -> Result<(), FindMagicError> {
    if config.magic.is_empty() || config.magic.len() > MAGIC_MAX {
        return Err(FindMagicError::BadMagic(config.magic.len()));
    }
    if config.chunk_size == 0 {
        return Err(FindMagicError::BadChunkSize);
    }
    if config.offset > i32::MAX as u64 {
        return Err(FindMagicError::OffsetTooLarge(config.offset));
    }
    Ok(())
}

fn warning_line(path: &str) -> Vec<u8> {
    format!("find-magic: cannot open {path}\n").into_bytes()
}

/// Start of the slot area: chunk header (`n`) plus the shared read
/// buffer, rounded up to 8 bytes.
fn slot_base(magic_len: usize) -> u64 {
    8 + ((magic_len as u64 + 7) & !7)
}

/// Render the aggregated program for one configuration.
///
/// Register plan: r7 holds the chunk base address, r6 the slot index, r8
/// the current file descriptor, r9 the current slot's region handle; the
/// control-region handle is spilled to the stack. Scratch registers are
/// zeroed at the bottom of the loop so all per-file paths rejoin in one
/// abstract state per iteration.
pub fn generate_program(chunk_size: u64, magic: &[u8], offset: u64) -> String {
    use std::fmt::Write as _;
    let ctrl_size = slot_base(magic.len());
    let mlen = magic.len() as u64;
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        "; filter a chunk of up to {chunk_size} paths by magic value"
    );
    let _ = writeln!(w, "    mov r7, r1");
    let _ = writeln!(w, "    mov r2, {ctrl_size}");
    let _ = writeln!(w, "    call map");
    let _ = writeln!(w, "    jeq r0, 0, nomem");
    let _ = writeln!(w, "    stxdw [r10-8], r0");
    let _ = writeln!(w, "    mov r6, 0");
    let _ = writeln!(w, "    mov r8, 0");
    let _ = writeln!(w, "    mov r9, 0");
    let _ = writeln!(w, "head:");
    let _ = writeln!(w, "    ldxdw r0, [r10-8]");
    let _ = writeln!(w, "    ldxdw r0, [r0]");
    let _ = writeln!(w, "    jge r6, r0, done");
    let _ = writeln!(w, "    mov r1, r6");
    let _ = writeln!(w, "    mul r1, {SLOT_SIZE}");
    let _ = writeln!(w, "    add r1, {ctrl_size}");
    let _ = writeln!(w, "    add r1, r7");
    let _ = writeln!(w, "    mov r2, {SLOT_SIZE}");
    let _ = writeln!(w, "    call map");
    let _ = writeln!(w, "    jeq r0, 0, cleanup");
    let _ = writeln!(w, "    mov r9, r0");
    let _ = writeln!(w, "    mov r1, r6");
    let _ = writeln!(w, "    mul r1, {SLOT_SIZE}");
    let _ = writeln!(w, "    add r1, {}", ctrl_size + SLOT_CSTR_OFFSET);
    let _ = writeln!(w, "    add r1, r7");
    let _ = writeln!(w, "    mov r2, {O_RDONLY}");
    let _ = writeln!(w, "    call open");
    let _ = writeln!(w, "    jsge r0, 0, opened");
    let _ = writeln!(w, "    ldxdw r3, [r9+8]");
    let _ = writeln!(w, "    jsle r3, 0, next");
    let _ = writeln!(w, "    jsgt r3, {}, next", SLOT_SIZE - SLOT_WARN_OFFSET);
    let _ = writeln!(w, "    mov r1, 2");
    let _ = writeln!(w, "    mov r2, r9");
    let _ = writeln!(w, "    add r2, {SLOT_WARN_OFFSET}");
    let _ = writeln!(w, "    call write");
    let _ = writeln!(w, "    ja next");
    let _ = writeln!(w, "opened:");
    let _ = writeln!(w, "    mov r8, r0");
    let _ = writeln!(w, "    mov r1, r8");
    let _ = writeln!(w, "    mov r2, {offset}");
    let _ = writeln!(w, "    mov r3, {SEEK_SET}");
    let _ = writeln!(w, "    call lseek");
    let _ = writeln!(w, "    jslt r0, 0, close");
    let _ = writeln!(w, "    mov r1, r8");
    let _ = writeln!(w, "    ldxdw r2, [r10-8]");
    let _ = writeln!(w, "    add r2, 8");
    let _ = writeln!(w, "    mov r3, {mlen}");
    let _ = writeln!(w, "    call read");
    let _ = writeln!(w, "    jne r0, {mlen}, close");
    let _ = writeln!(w, "    ldxdw r2, [r10-8]");
    // Compare pairwise (16-bit immediates stay positive), byte tail.
    let mut at = 0usize;
    while at + 2 <= magic.len() {
        let pair = u16::from_le_bytes([magic[at], magic[at + 1]]);
        let _ = writeln!(w, "    ldxh r0, [r2+{}]", 8 + at);
        let _ = writeln!(w, "    jne r0, {pair}, close");
        at += 2;
    }
    if at < magic.len() {
        let _ = writeln!(w, "    ldxb r0, [r2+{}]", 8 + at);
        let _ = writeln!(w, "    jne r0, {}, close", magic[at]);
    }
    let _ = writeln!(w, "    ldxdw r3, [r9]");
    let _ = writeln!(w, "    jsle r3, 0, close");
    let _ = writeln!(w, "    jsgt r3, {}, close", SLOT_SIZE - SLOT_PATH_OFFSET);
    let _ = writeln!(w, "    mov r1, 1");
    let _ = writeln!(w, "    mov r2, r9");
    let _ = writeln!(w, "    add r2, {SLOT_PATH_OFFSET}");
    let _ = writeln!(w, "    call write");
    let _ = writeln!(w, "close:");
    let _ = writeln!(w, "    mov r1, r8");
    let _ = writeln!(w, "    call close");
    let _ = writeln!(w, "next:");
    let _ = writeln!(w, "    mov r1, r9");
    let _ = writeln!(w, "    call unmap");
    let _ = writeln!(w, "    mov r9, 0");
    let _ = writeln!(w, "    mov r8, 0");
    let _ = writeln!(w, "    add r6, 1");
    let _ = writeln!(w, "    jlt r6, {chunk_size}, head");
    let _ = writeln!(w, "done:");
    let _ = writeln!(w, "    ldxdw r1, [r10-8]");
    let _ = writeln!(w, "    call unmap");
    let _ = writeln!(w, "    mov r0, 0");
    let _ = writeln!(w, "    exit");
    let _ = writeln!(w, "cleanup:");
    let _ = writeln!(w, "    ldxdw r1, [r10-8]");
    let _ = writeln!(w, "    call unmap");
    let _ = writeln!(w, "nomem:");
    let _ = writeln!(w, "    mov r0, -1");
    let _ = writeln!(w, "    exit");
    s
}

/// Assemble and verify the aggregated program for a configuration.
pub fn build_program(config: &FindMagicConfig, limits: &Limits) -> Result<Program, FindMagicError> {
    check_config(config)?;
    let source = generate_program(config.chunk_size, &config.magic, config.offset);
    let program = assemble_named(format!("find-magic-{}", config.chunk_size), &source)?;
    let verdict = verify(&program, limits);
    if verdict.accepted {
        return Ok(program);
    }
    if let Some(d) = verdict.diagnostics.iter().find(|d| d.rule == Rule::R8) {
        return Err(FindMagicError::ChunkTooLarge {
            chunk_size: config.chunk_size,
            diagnostic: d.message.clone(),
        });
    }
    Err(FindMagicError::Rejected(verdict))
}

/// Filter `paths`, preserving input order. Unreadable files are skipped
/// with a warning on (captured) stderr; every variant produces identical
/// stdout and stderr bytes.
pub fn run(
    config: &FindMagicConfig,
    paths: &[InputPath],
) -> Result<FindMagicOutcome, FindMagicError> {
    check_config(config)?;
    // Paths beyond the slot capacity are skipped up front, identically in
    // all variants, without touching the kernel.
    let mut skipped: Vec<u8> = Vec::new();
    let admissible: Vec<InputPath> = paths
        .iter()
        .filter(|p| {
            let ok = !p.rel.is_empty()
                && p.rel.len() <= PATH_LIMIT
                && p.display.len() <= PATH_LIMIT
                && !p.rel.contains('\0');
            if !ok {
                skipped.extend_from_slice(&warning_line(&p.display));
            }
            ok
        })
        .cloned()
        .collect();
    let mut outcome = match config.variant {
        Variant::Anycall => run_anycall(config, &admissible)?,
        Variant::Sys => run_traditional(config, &admissible, false)?,
        Variant::SysBurst => run_traditional(config, &admissible, true)?,
        Variant::LibcStyle => run_libc_style(config, &admissible)?,
    };
    outcome.stderr = prepend(skipped, std::mem::take(&mut outcome.stderr));
    Ok(outcome)
}

fn run_anycall(
    config: &FindMagicConfig,
    paths: &[InputPath],
) -> Result<FindMagicOutcome, FindMagicError> {
    let program = build_program(config, &Limits::default())?;
    let ctrl = slot_base(config.magic.len());
    let needed = ctrl + config.chunk_size * SLOT_SIZE;
    let arena_size = DEFAULT_ARENA_SIZE.max(needed as usize + 4096);
    let mut kernel = SimKernel::with_arena_size(Some(&config.sandbox), arena_size)?;

    let mut invocations = 0;
    for chunk in paths.chunks(config.chunk_size as usize) {
        kernel
            .arena_mut()
            .write(ARENA_BASE, &(chunk.len() as u64).to_le_bytes())
            .expect("header");
        for (i, path) in chunk.iter().enumerate() {
            let slot = ARENA_BASE + ctrl + i as u64 * SLOT_SIZE;
            let mut line = path.display.as_bytes().to_vec();
            line.push(b'\n');
            let warn = warning_line(&path.display);
            let mut cstr = path.rel.as_bytes().to_vec();
            cstr.push(0);
            kernel
                .arena_mut()
                .write(slot, &(line.len() as u64).to_le_bytes())
                .expect("slot fits");
            kernel
                .arena_mut()
                .write(slot + 8, &(warn.len() as u64).to_le_bytes())
                .expect("slot fits");
            kernel
                .arena_mut()
                .write(slot + SLOT_PATH_OFFSET, &line)
                .expect("slot fits");
            kernel
                .arena_mut()
                .write(slot + SLOT_WARN_OFFSET, &warn)
                .expect("slot fits");
            kernel
                .arena_mut()
                .write(slot + SLOT_CSTR_OFFSET, &cstr)
                .expect("slot fits");
        }
        let result = invoke_anycall(&program, ARENA_BASE, &mut kernel, DEFAULT_FUEL);
        if let Some(trap) = result.fault {
            return Err(FindMagicError::Faulted(trap.to_string()));
        }
        if result.return_value != 0 {
            return Err(FindMagicError::Faulted(format!(
                "program returned {}",
                result.return_value
            )));
        }
        invocations += 1;
    }
    Ok(FindMagicOutcome {
        stdout: kernel.take_stdout(),
        stderr: kernel.take_stderr(),
        counters: kernel.counters().clone(),
        invocations,
    })
}

fn prepend(mut head: Vec<u8>, tail: Vec<u8>) -> Vec<u8> {
    head.extend_from_slice(&tail);
    head
}

/// Shared scratch addresses for the traditional variants.
const TRAD_PATH_ADDR: u64 = ARENA_BASE;
const TRAD_READ_ADDR: u64 = ARENA_BASE + 4096;
const TRAD_OUT_ADDR: u64 = ARENA_BASE + 8192;

fn run_traditional(
    config: &FindMagicConfig,
    paths: &[InputPath],
    burst: bool,
) -> Result<FindMagicOutcome, FindMagicError> {
    let mut kernel = SimKernel::new(&config.sandbox)?;
    // `sys` consumes one path at a time; `sys-burst` stages a chunk of
    // paths first, then processes the chunk. The per-file system calls
    // are the same; only the user-space staging differs.
    let groups: Vec<&[InputPath]> = if burst {
        paths.chunks(config.chunk_size as usize).collect()
    } else {
        paths.chunks(1).collect()
    };
    for group in groups {
        for path in group {
            process_one_traditional(&mut kernel, config, path, false)?;
        }
    }
    Ok(FindMagicOutcome {
        stdout: kernel.take_stdout(),
        stderr: kernel.take_stderr(),
        counters: kernel.counters().clone(),
        invocations: 0,
    })
}

/// One file on the traditional path. With `buffered` set, behaves like
/// stdio: no explicit seek for offsets within the first buffer, one
/// buffer-sized read, and matches are staged for a buffered flush
/// (the caller provides the staging buffer).
fn process_one_traditional(
    kernel: &mut SimKernel,
    config: &FindMagicConfig,
    path: &InputPath,
    buffered: bool,
) -> Result<Option<Vec<u8>>, FindMagicError> {
    let mut cstr = path.rel.as_bytes().to_vec();
    cstr.push(0);
    kernel
        .arena_mut()
        .write(TRAD_PATH_ADDR, &cstr)
        .expect("path fits");
    let fd = kernel.traditional_syscall("open", &[TRAD_PATH_ADDR as i64, O_RDONLY])?;
    if fd < 0 {
        let warn = warning_line(&path.display);
        kernel
            .arena_mut()
            .write(TRAD_OUT_ADDR, &warn)
            .expect("warning fits");
        kernel.traditional_syscall("write", &[2, TRAD_OUT_ADDR as i64, warn.len() as i64])?;
        return Ok(None);
    }
    let magic_len = config.magic.len() as i64;
    let matched: Option<Vec<u8>> = if buffered {
        // stdio-style: skip the lseek when the window sits in the first
        // buffered read.
        let in_first_buffer = config.offset + config.magic.len() as u64 <= LIBC_BUF;
        if !in_first_buffer {
            let pos = kernel.traditional_syscall("lseek", &[fd, config.offset as i64, SEEK_SET])?;
            if pos < 0 {
                kernel.traditional_syscall("close", &[fd])?;
                return Ok(None);
            }
        }
        let want = if in_first_buffer {
            LIBC_BUF as i64
        } else {
            magic_len
        };
        let n = kernel.traditional_syscall("read", &[fd, TRAD_READ_ADDR as i64, want])?;
        let window_start = if in_first_buffer { config.offset } else { 0 };
        if n >= window_start as i64 + magic_len {
            let bytes = kernel
                .arena()
                .read(TRAD_READ_ADDR + window_start, magic_len as u64)
                .expect("scratch in arena");
            (bytes == config.magic.as_slice()).then(|| {
                let mut line = path.display.as_bytes().to_vec();
                line.push(b'\n');
                line
            })
        } else {
            None
        }
    } else {
        let pos = kernel.traditional_syscall("lseek", &[fd, config.offset as i64, SEEK_SET])?;
        if pos < 0 {
            kernel.traditional_syscall("close", &[fd])?;
            return Ok(None);
        }
        let n = kernel.traditional_syscall("read", &[fd, TRAD_READ_ADDR as i64, magic_len])?;
        if n == magic_len {
            let bytes = kernel
                .arena()
                .read(TRAD_READ_ADDR, magic_len as u64)
                .expect("scratch in arena");
            (bytes == config.magic.as_slice()).then(|| {
                let mut line = path.display.as_bytes().to_vec();
                line.push(b'\n');
                line
            })
        } else {
            None
        }
    };
    if !buffered {
        if let Some(line) = &matched {
            kernel
                .arena_mut()
                .write(TRAD_OUT_ADDR, line)
                .expect("line fits");
            kernel.traditional_syscall("write", &[1, TRAD_OUT_ADDR as i64, line.len() as i64])?;
        }
    }
    kernel.traditional_syscall("close", &[fd])?;
    Ok(matched)
}

fn run_libc_style(
    config: &FindMagicConfig,
    paths: &[InputPath],
) -> Result<FindMagicOutcome, FindMagicError> {
    let mut kernel = SimKernel::new(&config.sandbox)?;
    let mut stdout_buffer: Vec<u8> = Vec::new();
    let flush = |kernel: &mut SimKernel, buffer: &mut Vec<u8>| -> Result<(), FindMagicError> {
        if buffer.is_empty() {
            return Ok(());
        }
        kernel
            .arena_mut()
            .write(TRAD_OUT_ADDR, buffer)
            .expect("buffer fits");
        kernel.traditional_syscall("write", &[1, TRAD_OUT_ADDR as i64, buffer.len() as i64])?;
        buffer.clear();
        Ok(())
    };
    for path in paths {
        if let Some(line) = process_one_traditional(&mut kernel, config, path, true)? {
            stdout_buffer.extend_from_slice(&line);
            if stdout_buffer.len() >= LIBC_BUF as usize {
                flush(&mut kernel, &mut stdout_buffer)?;
            }
        }
    }
    flush(&mut kernel, &mut stdout_buffer)?;
    Ok(FindMagicOutcome {
        stdout: kernel.take_stdout(),
        stderr: kernel.take_stderr(),
        counters: kernel.counters().clone(),
        invocations: 0,
    })
}
