//! Userspace system-call aggregation.
//!
//! Ordinarily every system call pays for a user/kernel mode switch, and
//! mitigation-era switches are expensive. This crate re-creates, entirely
//! in user space, a runtime where a small verified bytecode program runs
//! "inside the kernel" and issues its system calls as cheap helper
//! invocations — kernel calls — so an arbitrary number of calls costs a
//! single simulated transition. A static analyzer proves memory safety
//! and termination before anything runs, a simulated kernel executes
//! filesystem calls inside a sandboxed directory while counting
//! transition/kernel-call/iTLB events, and a calibrated cost model turns
//! those counts into modeled times and break-even analyses.
//!
//! Modules:
//! * [`isa`] — instruction set, binary encoding, assembler;
//! * [`verifier`] — path-sensitive abstract interpretation;
//! * [`vm`] — the interpreter and its helper dispatch;
//! * [`syskernel`] — simulated kernel, arena, fd table, counters;
//! * [`costmodel`] — calibrated costs, modeled times, break-even;
//! * [`bench`] — experiment harness and the find-magic tool;
//! * [`cli`] — the `anycall` command-line front end.

pub mod bench;
pub mod cli;
pub mod costmodel;
pub mod isa;
pub mod par;
pub mod syskernel;
pub mod verifier;
pub mod vm;

pub use isa::Program;
pub use syskernel::SimKernel;
pub use verifier::{verify, Limits, Verdict};
pub use vm::{invoke_anycall, RunResult};
