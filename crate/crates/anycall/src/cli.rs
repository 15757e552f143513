//! Command-line front end: verify and run programs, reproduce the
//! benchmark experiments, run the find-magic tool, render reports.
//!
//! Exit codes: 0 success, 1 verification rejected, 2 usage/decode error,
//! 3 runtime trap.

use std::io::{IsTerminal, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{
    findmagic::{self, FindMagicConfig, InputPath, Variant},
    report, rows_to_csv, BenchSpec, Benchmark,
};
use crate::costmodel::{self, CostParams};
use crate::isa::{assemble_named, read_program_file, Program, FILE_MAGIC};
use crate::par::ExecMode;
use crate::syskernel::SimKernel;
use crate::verifier::{explain, verify, Limits};
use crate::vm::{invoke_anycall, DEFAULT_FUEL};

pub const EXIT_OK: u8 = 0;
pub const EXIT_REJECTED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_TRAP: u8 = 3;

#[derive(Parser)]
#[command(
    name = "anycall",
    about = "Userspace system-call aggregation: verified bytecode programs, \
             a simulated kernel, and a calibrated transition-cost model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchFormat {
    Csv,
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Statically verify a program file (binary container or assembly).
    Verify {
        program: PathBuf,
        /// Explored-instruction budget.
        #[arg(long)]
        max_insns: Option<u64>,
        /// Pending-state budget.
        #[arg(long)]
        max_states: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Verify and execute a program as one aggregated invocation.
    Run {
        program: PathBuf,
        /// 64-bit scalar argument passed in r1 (often an arena address).
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        arg: i64,
        /// Sandbox root for filesystem kernel calls.
        #[arg(long, env = "ANYCALL_SANDBOX")]
        sandbox: Option<PathBuf>,
        /// Print the event trace after the run.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = DEFAULT_FUEL)]
        fuel: u64,
        /// Execute even if verification fails (testing only).
        #[arg(long)]
        unsafe_skip_verify: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Sweep a benchmark and emit per-point modeled times and counters.
    Bench {
        /// One of: getpid, vector-open-close, find-magic.
        benchmark: String,
        #[arg(long, default_value_t = 150)]
        invocations: u64,
        /// Calls per invocation: comma list and/or A-B[:STEP] ranges.
        #[arg(long, default_value = "1,10,150,300")]
        calls: String,
        /// Chunk sizes for find-magic.
        #[arg(long, default_value = "4,64,512")]
        chunk_sizes: String,
        #[arg(long, default_value = "paper-kpti-getpid")]
        cost_preset: String,
        /// Key=value cost config file (overrides --cost-preset).
        #[arg(long)]
        cost_config: Option<PathBuf>,
        #[arg(long, env = "ANYCALL_SANDBOX")]
        sandbox: Option<PathBuf>,
        /// Run points on one thread instead of fanning out.
        #[arg(long)]
        sequential: bool,
        #[arg(long, value_enum, default_value = "csv")]
        format: BenchFormat,
    },
    /// Filter files by magic value; paths on stdin, matches on stdout.
    FindMagic {
        /// Magic bytes as text.
        #[arg(long, default_value = "#!/bin/sh")]
        magic: String,
        /// Magic bytes as hex (overrides --magic).
        #[arg(long)]
        magic_hex: Option<String>,
        #[arg(long, default_value_t = 0)]
        offset: u64,
        /// One of: anycall, sys-burst, sys, libc-style.
        #[arg(long, default_value = "anycall")]
        variant: String,
        #[arg(long, default_value_t = 512)]
        chunk_size: u64,
        #[arg(long, env = "ANYCALL_SANDBOX")]
        sandbox: PathBuf,
        /// Print event counters to stderr when done.
        #[arg(long)]
        stats: bool,
    },
    /// Summarize bench CSV (file or `-` for stdin), with optional SVG.
    Report {
        csv: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
        /// Annotate with a preset's break-even analysis.
        #[arg(long)]
        cost_preset: Option<String>,
    },
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(dispatch(cli.command))
}

fn fail(message: impl std::fmt::Display) -> u8 {
    eprintln!("anycall: {message}");
    EXIT_USAGE
}

fn dispatch(command: Command) -> u8 {
    match command {
        Command::Verify {
            program,
            max_insns,
            max_states,
            format,
        } => cmd_verify(&program, max_insns, max_states, format),
        Command::Run {
            program,
            arg,
            sandbox,
            trace,
            fuel,
            unsafe_skip_verify,
            format,
        } => cmd_run(
            &program,
            arg,
            sandbox.as_deref(),
            trace,
            fuel,
            unsafe_skip_verify,
            format,
        ),
        Command::Bench {
            benchmark,
            invocations,
            calls,
            chunk_sizes,
            cost_preset,
            cost_config,
            sandbox,
            sequential,
            format,
        } => cmd_bench(
            &benchmark,
            invocations,
            &calls,
            &chunk_sizes,
            &cost_preset,
            cost_config.as_deref(),
            sandbox,
            sequential,
            format,
        ),
        Command::FindMagic {
            magic,
            magic_hex,
            offset,
            variant,
            chunk_size,
            sandbox,
            stats,
        } => cmd_find_magic(
            &magic,
            magic_hex.as_deref(),
            offset,
            &variant,
            chunk_size,
            sandbox,
            stats,
        ),
        Command::Report {
            csv,
            svg,
            cost_preset,
        } => cmd_report(&csv, svg.as_deref(), cost_preset.as_deref()),
    }
}

/// Load a program: binary container when the magic matches, assembly
/// source otherwise.
fn load_program(path: &Path) -> Result<Program, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "program".to_string());
    if bytes.starts_with(&FILE_MAGIC) {
        read_program_file(name, &bytes).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| format!("{}: not a program file", path.display()))?;
        assemble_named(name, &text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn limits_from(max_insns: Option<u64>, max_states: Option<u64>) -> Limits {
    let mut limits = Limits::default();
    if let Some(n) = max_insns {
        limits.max_insns = n;
    }
    if let Some(n) = max_states {
        limits.max_states = n;
    }
    limits
}

fn cmd_verify(path: &Path, max_insns: Option<u64>, max_states: Option<u64>, format: Format) -> u8 {
    let program = match load_program(path) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let verdict = verify(&program, &limits_from(max_insns, max_states));
    match format {
        Format::Text => print!("{}", explain(&program, &verdict)),
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&verdict).expect("serializable")
        ),
    }
    if verdict.accepted {
        EXIT_OK
    } else {
        EXIT_REJECTED
    }
}

fn cmd_run(
    path: &Path,
    arg: i64,
    sandbox: Option<&Path>,
    trace: bool,
    fuel: u64,
    unsafe_skip_verify: bool,
    format: Format,
) -> u8 {
    let program = match load_program(path) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    if !unsafe_skip_verify {
        let verdict = verify(&program, &Limits::default());
        if !verdict.accepted {
            eprint!("{}", explain(&program, &verdict));
            eprintln!("anycall: refusing to run a rejected program");
            return EXIT_REJECTED;
        }
    }
    let mut kernel = match sandbox {
        Some(root) => match SimKernel::new(root) {
            Ok(k) => k,
            Err(e) => return fail(format!("sandbox {}: {e}", root.display())),
        },
        None => SimKernel::without_sandbox(),
    };
    kernel.set_tracing(trace);
    let result = invoke_anycall(&program, arg as u64, &mut kernel, fuel);
    let flat = kernel.counters().to_flat();
    match format {
        Format::Text => {
            println!("return_value: {}", result.return_value);
            println!("executed_insns: {}", result.executed_insns);
            for (key, count) in &flat {
                println!("{key}: {count}");
            }
            if trace {
                for event in kernel.trace() {
                    println!("{}", event.to_line());
                }
            }
        }
        Format::Json => {
            let value = serde_json::json!({
                "return_value": result.return_value,
                "executed_insns": result.executed_insns,
                "counters": flat,
                "fault": result.fault.as_ref().map(ToString::to_string),
                "trace": if trace {
                    Some(kernel.trace().iter().map(|e| e.to_line()).collect::<Vec<_>>())
                } else {
                    None
                },
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("serializable")
            );
        }
    }
    match result.fault {
        Some(trap) => {
            eprintln!("anycall: runtime trap: {trap}");
            EXIT_TRAP
        }
        None => EXIT_OK,
    }
}

/// Parse point lists: `1,10,150` items and `A-B[:STEP]` ranges compose.
fn parse_points(text: &str) -> Result<Vec<u64>, String> {
    let mut points = Vec::new();
    for item in text.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        if let Some((range, step)) = split_range(item)? {
            let (a, b) = range;
            if step == 0 || b < a {
                return Err(format!("bad range `{item}`"));
            }
            let mut k = a;
            while k <= b {
                points.push(k);
                k += step;
            }
        } else {
            points.push(
                item.parse::<u64>()
                    .map_err(|_| format!("bad point `{item}`"))?,
            );
        }
    }
    if points.is_empty() {
        return Err("no points given".to_string());
    }
    Ok(points)
}

#[allow(clippy::type_complexity)]
fn split_range(item: &str) -> Result<Option<((u64, u64), u64)>, String> {
    let Some((bounds, step)) = item
        .split_once(':')
        .map(|(b, s)| (b, Some(s)))
        .or(Some((item, None)))
    else {
        unreachable!()
    };
    let Some((a, b)) = bounds.split_once('-') else {
        return Ok(None);
    };
    let a = a
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("bad range `{item}`"))?;
    let b = b
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("bad range `{item}`"))?;
    let step = match step {
        Some(s) => s
            .trim()
            .parse::<u64>()
            .map_err(|_| format!("bad step in `{item}`"))?,
        None => 1,
    };
    Ok(Some(((a, b), step)))
}

fn load_params(preset_name: &str, config: Option<&Path>) -> Result<CostParams, String> {
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        return CostParams::from_config_str(&text).map_err(|e| e.to_string());
    }
    costmodel::preset(preset_name).map_err(|e| e.to_string())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    benchmark: &str,
    invocations: u64,
    calls: &str,
    chunk_sizes: &str,
    cost_preset: &str,
    cost_config: Option<&Path>,
    sandbox: Option<PathBuf>,
    sequential: bool,
    format: BenchFormat,
) -> u8 {
    let Some(benchmark) = Benchmark::parse(benchmark) else {
        return fail(format!(
            "unknown benchmark `{benchmark}` (available: getpid, vector-open-close, find-magic)"
        ));
    };
    let params = match load_params(cost_preset, cost_config) {
        Ok(p) => p,
        Err(e) => return fail(e),
    };
    let calls = match parse_points(calls) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let chunk_sizes = match parse_points(chunk_sizes) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let spec = BenchSpec {
        benchmark,
        invocations,
        calls,
        chunk_sizes,
        params,
        sandbox,
        mode: if sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        },
    };
    let rows = match crate::bench::run_sweep(&spec) {
        Ok(rows) => rows,
        Err(e) => return fail(e),
    };
    match format {
        BenchFormat::Csv => print!("{}", rows_to_csv(&rows)),
        BenchFormat::Table => print!("{}", report::summarize(&rows, Some(&spec.params))),
        BenchFormat::Json => {
            let value: Vec<_> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "k": r.k,
                        "modeled_us_traditional": r.modeled_us_traditional,
                        "modeled_us_anycall": r.modeled_us_anycall,
                        "transitions_traditional": r.transitions_traditional,
                        "transitions_anycall": r.transitions_anycall,
                        "kcalls_anycall": r.kcalls_anycall,
                    })
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("serializable")
            );
        }
    }
    if format == BenchFormat::Csv {
        eprintln!(
            "break-even ({}): {}",
            spec.params.preset,
            crate::bench::sweep_breakeven(&spec)
        );
    }
    EXIT_OK
}

/// Interpret one input line. Host paths (as emitted by
/// `find <sandbox-dir> -type f`, absolute or relative to the working
/// directory) are mapped into the sandbox; a host path outside the
/// sandbox is an error. Anything that does not resolve on the host is
/// taken as already sandbox-relative.
fn to_input_path(line: &str, sandbox: &Path) -> Result<InputPath, String> {
    if let Ok(canonical) = Path::new(line).canonicalize() {
        return match canonical.strip_prefix(sandbox) {
            Ok(rel) => Ok(InputPath {
                display: line.to_string(),
                rel: rel.to_string_lossy().into_owned(),
            }),
            Err(_) => Err(format!("path outside sandbox: {line}")),
        };
    }
    Ok(InputPath::relative(line))
}

fn parse_hex(text: &str) -> Result<Vec<u8>, String> {
    let clean: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    if !clean.len().is_multiple_of(2) {
        return Err("hex magic must have an even number of digits".to_string());
    }
    (0..clean.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&clean[i..i + 2], 16).map_err(|_| "bad hex digit".to_string()))
        .collect()
}

fn cmd_find_magic(
    magic: &str,
    magic_hex: Option<&str>,
    offset: u64,
    variant: &str,
    chunk_size: u64,
    sandbox: PathBuf,
    stats: bool,
) -> u8 {
    let Some(variant) = Variant::parse(variant) else {
        return fail(format!(
            "unknown variant `{variant}` (available: anycall, sys-burst, sys, libc-style)"
        ));
    };
    let magic = match magic_hex {
        Some(hex) => match parse_hex(hex) {
            Ok(bytes) => bytes,
            Err(e) => return fail(e),
        },
        None => magic.as_bytes().to_vec(),
    };
    let mut input = String::new();
    if std::io::stdin().is_terminal() {
        eprintln!("anycall: reading file list from stdin (one path per line)...");
    }
    if let Err(e) = std::io::stdin().read_to_string(&mut input) {
        return fail(format!("stdin: {e}"));
    }
    let canonical_sandbox = match sandbox.canonicalize() {
        Ok(p) => p,
        Err(e) => return fail(format!("sandbox {}: {e}", sandbox.display())),
    };
    let mut paths = Vec::new();
    for line in input.lines() {
        match to_input_path(line, &canonical_sandbox) {
            Ok(entry) => paths.push(entry),
            Err(e) => return fail(e),
        }
    }
    let config = FindMagicConfig {
        magic,
        offset,
        variant,
        chunk_size,
        sandbox,
    };
    match findmagic::run(&config, &paths) {
        Ok(outcome) => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(&outcome.stdout)
                .and_then(|()| stdout.flush())
                .ok();
            std::io::stderr().write_all(&outcome.stderr).ok();
            if stats {
                for (key, count) in outcome.counters.to_flat() {
                    eprintln!("{key}: {count}");
                }
                eprintln!("invocations: {}", outcome.invocations);
            }
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

fn cmd_report(csv: &Path, svg: Option<&Path>, cost_preset: Option<&str>) -> u8 {
    let text = if csv == Path::new("-") {
        let mut buffer = String::new();
        if let Err(e) = std::io::stdin().read_to_string(&mut buffer) {
            return fail(format!("stdin: {e}"));
        }
        buffer
    } else {
        match std::fs::read_to_string(csv) {
            Ok(t) => t,
            Err(e) => return fail(format!("{}: {e}", csv.display())),
        }
    };
    let rows = match report::parse_csv(&text) {
        Ok(rows) => rows,
        Err(e) => return fail(e),
    };
    let params = match cost_preset {
        Some(name) => match costmodel::preset(name) {
            Ok(p) => Some(p),
            Err(e) => return fail(e),
        },
        None => None,
    };
    print!("{}", report::summarize(&rows, params.as_ref()));
    if let Some(path) = svg {
        if let Err(e) = std::fs::write(path, report::render_svg(&rows)) {
            return fail(format!("{}: {e}", path.display()));
        }
    }
    EXIT_OK
}
