//! Benchmark harness: runs the aggregated and traditional variants of
//! each experiment through the simulator, collects counters, applies the
//! cost model and emits CSV rows.
//!
//! Experiments:
//! * `getpid` — k `getpid` calls per invocation, invoked `invocations`
//!   times, against the same count of traditional calls;
//! * `vector-open-close` — paired invocations that open k scratch files
//!   and close them again, against traditional `open`/`close` loops;
//! * `find-magic` — the file-filtering tool, swept over chunk sizes.
//!
//! Every point runs on its own kernel instance, so points fan out across
//! worker threads; rows come back in input order either way.

pub mod findmagic;
pub mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::costmodel::{breakeven, model_time, BreakEven, CostParams};
use crate::isa::{assemble_named, AsmError, Program};
use crate::par::{map_ordered, ExecMode};
use crate::syskernel::{EventCounters, KernelError, SimKernel, ARENA_BASE, O_CREAT, O_RDWR};
use crate::verifier::{verify, Limits, Verdict};
use crate::vm::{invoke_anycall, DEFAULT_FUEL};

use findmagic::{FindMagicConfig, FindMagicError, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    Getpid,
    VectorOpenClose,
    FindMagic,
}

impl Benchmark {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "getpid" => Benchmark::Getpid,
            "vector-open-close" => Benchmark::VectorOpenClose,
            "find-magic" => Benchmark::FindMagic,
            _ => return None,
        })
    }
}

/// One benchmark request.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub benchmark: Benchmark,
    /// Invocations per point (the calibration runs use 150).
    pub invocations: u64,
    /// Calls-per-invocation points (`k` column).
    pub calls: Vec<u64>,
    /// Chunk sizes for the find-magic benchmark.
    pub chunk_sizes: Vec<u64>,
    pub params: CostParams,
    pub sandbox: Option<PathBuf>,
    pub mode: ExecMode,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("calls-per-invocation range must be non-empty, with every k >= 1")]
    EmptyRange,
    #[error("benchmark requires a sandbox directory (use --sandbox)")]
    SandboxMissing,
    #[error("generated program rejected by the verifier: {0:?}")]
    Rejected(Box<Verdict>),
    #[error("program faulted at runtime: {0}")]
    Faulted(String),
    #[error("assembly: {0}")]
    Asm(#[from] AsmError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    FindMagic(#[from] FindMagicError),
}

/// One CSV row. The canonical column order is fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub k: u64,
    pub modeled_us_traditional: f64,
    pub modeled_us_anycall: f64,
    pub transitions_traditional: u64,
    pub transitions_anycall: u64,
    pub kcalls_anycall: u64,
}

pub const CSV_HEADER: &str =
    "k,modeled_us_traditional,modeled_us_anycall,transitions_traditional,transitions_anycall,kcalls_anycall";

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{},{}",
            r.k,
            r.modeled_us_traditional,
            r.modeled_us_anycall,
            r.transitions_traditional,
            r.transitions_anycall,
            r.kcalls_anycall
        );
    }
    out
}

/// Aggregation program performing `calls` getpid kernel calls.
pub fn getpid_program(calls: u64) -> Result<Program, AsmError> {
    let source = format!(
        "; aggregate {calls} getpid kernel calls\n\
         \x20   mov r6, 0\n\
         head:\n\
         \x20   call getpid\n\
         \x20   add r6, 1\n\
         \x20   jlt r6, {calls}, head\n\
         \x20   exit\n"
    );
    assemble_named(format!("getpid-x{calls}"), &source)
}

/// Arena layout shared by the vector programs: `count` path slots of 64
/// bytes each, then the file-descriptor array.
pub const VECTOR_PATH_SLOT: u64 = 64;

fn vector_fd_array_offset(count: u64) -> u64 {
    count * VECTOR_PATH_SLOT
}

/// Aggregation program opening `count` files whose NUL-terminated paths
/// the harness placed in the arena, storing returned descriptors into the
/// arena fd array.
pub fn vector_open_program(count: u64) -> Result<Program, AsmError> {
    let fd_off = vector_fd_array_offset(count);
    let fd_size = count * 8;
    let flags = O_CREAT | O_RDWR;
    let source = format!(
        "; vector open: {count} files, fds into the arena array\n\
         \x20   mov r7, r1\n\
         \x20   add r1, {fd_off}\n\
         \x20   mov r2, {fd_size}\n\
         \x20   call map\n\
         \x20   jeq r0, 0, fail\n\
         \x20   mov r9, r0\n\
         \x20   mov r6, 0\n\
         head:\n\
         \x20   mov r1, r6\n\
         \x20   mul r1, {VECTOR_PATH_SLOT}\n\
         \x20   add r1, r7\n\
         \x20   mov r2, {flags}\n\
         \x20   call open\n\
         \x20   mov r2, r6\n\
         \x20   mul r2, 8\n\
         \x20   mov r3, r9\n\
         \x20   add r3, r2\n\
         \x20   stxdw [r3], r0\n\
         \x20   add r6, 1\n\
         \x20   jlt r6, {count}, head\n\
         \x20   mov r1, r9\n\
         \x20   call unmap\n\
         \x20   mov r0, 0\n\
         \x20   exit\n\
         fail:\n\
         \x20   mov r0, -1\n\
         \x20   exit\n"
    );
    assemble_named(format!("vector-open-x{count}"), &source)
}

/// Aggregation program closing the `count` descriptors stored in the
/// arena fd array.
pub fn vector_close_program(count: u64) -> Result<Program, AsmError> {
    let fd_off = vector_fd_array_offset(count);
    let fd_size = count * 8;
    let source = format!(
        "; vector close: {count} fds from the arena array\n\
         \x20   add r1, {fd_off}\n\
         \x20   mov r2, {fd_size}\n\
         \x20   call map\n\
         \x20   jeq r0, 0, fail\n\
         \x20   mov r9, r0\n\
         \x20   mov r6, 0\n\
         head:\n\
         \x20   mov r2, r6\n\
         \x20   mul r2, 8\n\
         \x20   mov r3, r9\n\
         \x20   add r3, r2\n\
         \x20   ldxdw r1, [r3]\n\
         \x20   call close\n\
         \x20   add r6, 1\n\
         \x20   jlt r6, {count}, head\n\
         \x20   mov r1, r9\n\
         \x20   call unmap\n\
         \x20   mov r0, 0\n\
         \x20   exit\n\
         fail:\n\
         \x20   mov r0, -1\n\
         \x20   exit\n"
    );
    assemble_named(format!("vector-close-x{count}"), &source)
}

/// Disk-usage style aggregation: walk an fd array prepared in the arena
/// (count at offset 0, descriptors after it), `fstat` each file into a
/// scratch user buffer, copy `st_size` onto the stack, return the total.
/// `max_files` is the compile-time loop bound.
pub fn size_sum_program(max_files: u64) -> Result<Program, AsmError> {
    let header_size = 8 + max_files * 8;
    let stat_off = header_size;
    let size_field = stat_off + crate::syskernel::STAT_ST_SIZE_OFFSET;
    let source = format!(
        "; sum of st_size over an fd array (up to {max_files} files)\n\
         \x20   mov r7, r1\n\
         \x20   mov r2, {header_size}\n\
         \x20   call map\n\
         \x20   jeq r0, 0, fail\n\
         \x20   mov r9, r0\n\
         \x20   mov r6, 0\n\
         \x20   mov r8, 0\n\
         head:\n\
         \x20   ldxdw r0, [r9]\n\
         \x20   jge r6, r0, done\n\
         \x20   mov r2, r6\n\
         \x20   mul r2, 8\n\
         \x20   add r2, 8\n\
         \x20   mov r3, r9\n\
         \x20   add r3, r2\n\
         \x20   ldxdw r1, [r3]\n\
         \x20   mov r2, r7\n\
         \x20   add r2, {stat_off}\n\
         \x20   call fstat\n\
         \x20   jslt r0, 0, next\n\
         \x20   mov r1, r10\n\
         \x20   add r1, -16\n\
         \x20   mov r2, 8\n\
         \x20   mov r3, r7\n\
         \x20   add r3, {size_field}\n\
         \x20   call copy_from_user\n\
         \x20   jslt r0, 0, next\n\
         \x20   ldxdw r0, [r10-16]\n\
         \x20   add r8, r0\n\
         next:\n\
         \x20   add r6, 1\n\
         \x20   jlt r6, {max_files}, head\n\
         done:\n\
         \x20   mov r1, r9\n\
         \x20   call unmap\n\
         \x20   mov r0, r8\n\
         \x20   exit\n\
         fail:\n\
         \x20   mov r0, -1\n\
         \x20   exit\n"
    );
    assemble_named("size-sum", &source)
}

fn verified(program: Program) -> Result<Program, BenchError> {
    let verdict = verify(&program, &Limits::default());
    if verdict.accepted {
        Ok(program)
    } else {
        Err(BenchError::Rejected(Box::new(verdict)))
    }
}

fn invoke_checked(program: &Program, arg: u64, kernel: &mut SimKernel) -> Result<i64, BenchError> {
    let result = invoke_anycall(program, arg, kernel, DEFAULT_FUEL);
    if let Some(trap) = result.fault {
        return Err(BenchError::Faulted(trap.to_string()));
    }
    Ok(result.return_value)
}

/// Counter pair for one benchmark point.
struct PointCounters {
    traditional: EventCounters,
    aggregated: EventCounters,
}

fn getpid_point(invocations: u64, k: u64) -> Result<PointCounters, BenchError> {
    let program = verified(getpid_program(k)?)?;
    let mut kernel = SimKernel::without_sandbox();
    for _ in 0..invocations {
        invoke_checked(&program, 0, &mut kernel)?;
    }
    let aggregated = kernel.counters().clone();

    let mut kernel = SimKernel::without_sandbox();
    for _ in 0..invocations * k {
        kernel.traditional_syscall("getpid", &[])?;
    }
    Ok(PointCounters {
        traditional: kernel.counters().clone(),
        aggregated,
    })
}

/// Write the `count` scratch-file paths into the arena, one 64-byte slot
/// each. Files live under `tmp/` in the sandbox and carry the point's
/// call count in their name, so parallel points never share a file.
fn stage_vector_paths(kernel: &mut SimKernel, count: u64) {
    for i in 0..count {
        let mut path = format!("tmp/v{count}_{i:05}").into_bytes();
        path.push(0);
        kernel
            .arena_mut()
            .write(ARENA_BASE + i * VECTOR_PATH_SLOT, &path)
            .expect("slots in arena");
    }
}

fn vector_point(sandbox: &Path, invocations: u64, k: u64) -> Result<PointCounters, BenchError> {
    std::fs::create_dir_all(sandbox.join("tmp"))?;
    let open_program = verified(vector_open_program(k)?)?;
    let close_program = verified(vector_close_program(k)?)?;

    let mut kernel = SimKernel::new(sandbox)?;
    stage_vector_paths(&mut kernel, k);
    for _ in 0..invocations {
        let opened = invoke_checked(&open_program, ARENA_BASE, &mut kernel)?;
        if opened != 0 {
            return Err(BenchError::Faulted(format!(
                "vector open returned {opened}"
            )));
        }
        let closed = invoke_checked(&close_program, ARENA_BASE, &mut kernel)?;
        if closed != 0 {
            return Err(BenchError::Faulted(format!(
                "vector close returned {closed}"
            )));
        }
    }
    let aggregated = kernel.counters().clone();

    let mut kernel = SimKernel::new(sandbox)?;
    stage_vector_paths(&mut kernel, k);
    for _ in 0..invocations {
        let mut fds = Vec::with_capacity(k as usize);
        for i in 0..k {
            let addr = (ARENA_BASE + i * VECTOR_PATH_SLOT) as i64;
            let fd = kernel.traditional_syscall("open", &[addr, O_CREAT | O_RDWR])?;
            if fd < 0 {
                return Err(BenchError::Faulted(format!(
                    "traditional open returned {fd}"
                )));
            }
            fds.push(fd);
        }
        for fd in fds {
            kernel.traditional_syscall("close", &[fd])?;
        }
    }
    Ok(PointCounters {
        traditional: kernel.counters().clone(),
        aggregated,
    })
}

/// Deterministic recursive listing of a corpus directory (relative
/// paths, sorted).
pub fn list_corpus(root: &Path) -> std::io::Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<Vec<_>, _>>()?;
        entries.sort_by_key(std::fs::DirEntry::file_name);
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push(rel.to_string_lossy().into_owned());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn findmagic_point(sandbox: &Path, chunk_size: u64) -> Result<PointCounters, BenchError> {
    let paths: Vec<findmagic::InputPath> = list_corpus(sandbox)?
        .into_iter()
        .map(findmagic::InputPath::relative)
        .collect();
    let base = FindMagicConfig {
        magic: b"#!/bin/sh".to_vec(),
        offset: 0,
        variant: Variant::Anycall,
        chunk_size,
        sandbox: sandbox.to_path_buf(),
    };
    let aggregated = findmagic::run(&base, &paths)?;
    let sys = findmagic::run(
        &FindMagicConfig {
            variant: Variant::Sys,
            ..base.clone()
        },
        &paths,
    )?;
    Ok(PointCounters {
        traditional: sys.counters,
        aggregated: aggregated.counters,
    })
}

fn row_from_counters(k: u64, counters: &PointCounters, params: &CostParams) -> BenchRow {
    BenchRow {
        k,
        modeled_us_traditional: model_time(&counters.traditional, params, false).total_us,
        modeled_us_anycall: model_time(&counters.aggregated, params, true).total_us,
        transitions_traditional: counters.traditional.user_kernel_transitions,
        transitions_anycall: counters.aggregated.user_kernel_transitions,
        kcalls_anycall: counters.aggregated.kernel_calls_total(),
    }
}

/// Run the sweep described by `spec`. Rows come back in point order;
/// results are bit-identical across execution modes and runs.
pub fn run_sweep(spec: &BenchSpec) -> Result<Vec<BenchRow>, BenchError> {
    match spec.benchmark {
        Benchmark::Getpid => {
            if spec.calls.is_empty() || spec.calls.contains(&0) {
                return Err(BenchError::EmptyRange);
            }
            let invocations = spec.invocations;
            let params = spec.params.clone();
            let results = map_ordered(spec.calls.clone(), spec.mode, move |k| {
                getpid_point(invocations, k).map(|c| row_from_counters(k, &c, &params))
            });
            results.into_iter().collect()
        }
        Benchmark::VectorOpenClose => {
            if spec.calls.is_empty() || spec.calls.contains(&0) {
                return Err(BenchError::EmptyRange);
            }
            let sandbox = spec.sandbox.clone().ok_or(BenchError::SandboxMissing)?;
            let invocations = spec.invocations;
            let params = spec.params.clone();
            // Points share one sandbox but never one kernel; scratch
            // files are per-point names, so parallel points stay safe.
            let results = map_ordered(spec.calls.clone(), spec.mode, move |k| {
                vector_point(&sandbox, invocations, k).map(|c| row_from_counters(k, &c, &params))
            });
            results.into_iter().collect()
        }
        Benchmark::FindMagic => {
            if spec.chunk_sizes.is_empty() || spec.chunk_sizes.contains(&0) {
                return Err(BenchError::EmptyRange);
            }
            let sandbox = spec.sandbox.clone().ok_or(BenchError::SandboxMissing)?;
            let params = spec.params.clone();
            let results = map_ordered(spec.chunk_sizes.clone(), spec.mode, move |chunk| {
                findmagic_point(&sandbox, chunk).map(|c| row_from_counters(chunk, &c, &params))
            });
            results.into_iter().collect()
        }
    }
}

/// Break-even for the sweep's cost preset, echoed under the CSV.
pub fn sweep_breakeven(spec: &BenchSpec) -> BreakEven {
    breakeven(&spec.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::preset;

    fn getpid_spec(calls: Vec<u64>) -> BenchSpec {
        BenchSpec {
            benchmark: Benchmark::Getpid,
            invocations: 10,
            calls,
            chunk_sizes: vec![],
            params: preset("paper-kpti-getpid").unwrap(),
            sandbox: None,
            mode: ExecMode::Sequential,
        }
    }

    #[test]
    fn getpid_sweep_counts_transitions() {
        let rows = run_sweep(&getpid_spec(vec![1, 10, 50])).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert_eq!(row.transitions_anycall, 2 * 10);
            assert_eq!(row.transitions_traditional, 2 * 10 * row.k);
            assert_eq!(row.kcalls_anycall, 10 * row.k);
            assert!(row.transitions_anycall < row.transitions_traditional || row.k == 1);
        }
    }

    #[test]
    fn empty_range_rejected() {
        assert!(matches!(
            run_sweep(&getpid_spec(vec![])),
            Err(BenchError::EmptyRange)
        ));
        assert!(matches!(
            run_sweep(&getpid_spec(vec![0])),
            Err(BenchError::EmptyRange)
        ));
    }

    #[test]
    fn csv_is_deterministic_and_mode_independent() {
        let seq = rows_to_csv(&run_sweep(&getpid_spec(vec![1, 5, 25])).unwrap());
        let mut spec = getpid_spec(vec![1, 5, 25]);
        spec.mode = ExecMode::Parallel;
        let par = rows_to_csv(&run_sweep(&spec).unwrap());
        assert_eq!(seq, par);
        assert!(seq.starts_with(CSV_HEADER));
    }

    #[test]
    fn vector_sweep_opens_and_closes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchSpec {
            benchmark: Benchmark::VectorOpenClose,
            invocations: 3,
            calls: vec![2, 7],
            chunk_sizes: vec![],
            params: preset("paper-kpti-vector").unwrap(),
            sandbox: Some(dir.path().to_path_buf()),
            mode: ExecMode::Sequential,
        };
        let rows = run_sweep(&spec).unwrap();
        // Aggregated: 2 invocations (open + close) per iteration.
        assert_eq!(rows[0].transitions_anycall, 2 * 2 * 3);
        // Traditional: k opens + k closes per iteration, 2 transitions each.
        assert_eq!(rows[0].transitions_traditional, 2 * 2 * 2 * 3);
        assert_eq!(rows[1].kcalls_anycall, 3 * (2 * 7 + 4));
        // Scratch files exist in the sandbox.
        assert!(dir.path().join("tmp/v2_00001").exists());
    }

    #[test]
    fn vector_sweep_requires_sandbox() {
        let spec = BenchSpec {
            benchmark: Benchmark::VectorOpenClose,
            invocations: 1,
            calls: vec![1],
            chunk_sizes: vec![],
            params: preset("paper-kpti-vector").unwrap(),
            sandbox: None,
            mode: ExecMode::Sequential,
        };
        assert!(matches!(run_sweep(&spec), Err(BenchError::SandboxMissing)));
    }

    #[test]
    fn size_sum_program_matches_host_metadata() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), vec![1u8; 123]).unwrap();
        std::fs::write(dir.path().join("b"), vec![2u8; 4567]).unwrap();
        std::fs::write(dir.path().join("c"), b"").unwrap();
        // Oracle: host filesystem metadata, summed independently.
        let expected: u64 = ["a", "b", "c"]
            .iter()
            .map(|n| std::fs::metadata(dir.path().join(n)).unwrap().len())
            .sum();

        let program = verified(size_sum_program(8).unwrap()).unwrap();
        let mut kernel = SimKernel::new(dir.path()).unwrap();
        // Open the three files traditionally; hand the fds to the program.
        let mut fds = Vec::new();
        for name in ["a", "b", "c"] {
            let mut c = name.as_bytes().to_vec();
            c.push(0);
            kernel.arena_mut().write(ARENA_BASE + 4096, &c).unwrap();
            let fd = kernel
                .traditional_syscall("open", &[(ARENA_BASE + 4096) as i64, 0])
                .unwrap();
            assert!(fd >= 3);
            fds.push(fd);
        }
        kernel
            .arena_mut()
            .write(ARENA_BASE, &3u64.to_le_bytes())
            .unwrap();
        for (i, fd) in fds.iter().enumerate() {
            kernel
                .arena_mut()
                .write(ARENA_BASE + 8 + i as u64 * 8, &(*fd as u64).to_le_bytes())
                .unwrap();
        }
        let before = kernel.counters().clone();
        let total = invoke_checked(&program, ARENA_BASE, &mut kernel).unwrap();
        assert_eq!(total as u64, expected);
        let delta = kernel.counters().since(&before);
        assert_eq!(delta.user_kernel_transitions, 2);
        assert_eq!(delta.kernel_calls["fstat"], 3);
        assert_eq!(delta.kernel_calls["copy_from_user"], 3);
    }
}
