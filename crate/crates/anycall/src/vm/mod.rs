//! Bytecode interpreter: executes verified programs against a
//! [`SimKernel`], dispatching helper calls as kernel calls.
//!
//! One invocation charges exactly one user-to-kernel and one
//! kernel-to-user transition, no matter how many kernel calls the program
//! makes — that decoupling is the whole point of aggregation.
//!
//! Runtime traps exist as defense in depth: none of them can fire for a
//! verifier-accepted program, and the fuzz suite leans on that.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::isa::{AluOp, Instruction, Operand, Program, Reg, Width, STACK_SIZE};
use crate::syskernel::{
    decode_region_handle, helper_table, helpers, KernelError, SimKernel, REGION_TAG,
};

/// Runtime stack addresses are tagged so they can never collide with
/// region handles or arena addresses; the frame pointer is the one-past-
/// the-end address of the frame.
pub const STACK_TAG: u64 = 1 << 62;
const STACK_TOP: u64 = STACK_TAG + STACK_SIZE as u64;

/// Dynamic instruction budget per invocation. Far above any verified
/// program's bound; a backstop, not a tuning knob.
pub const DEFAULT_FUEL: u64 = 10_000_000;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum Trap {
    #[error("fuel exhausted")]
    FuelExhausted,
    #[error("program counter {0} out of bounds")]
    PcOutOfBounds(usize),
    #[error("division by zero")]
    DivisionByZero,
    #[error("out-of-frame stack access at 0x{addr:x} (width {width})")]
    OutOfFrame { addr: u64, width: u64 },
    #[error("misaligned {width}-byte access at 0x{addr:x}")]
    Misaligned { addr: u64, width: u64 },
    #[error("access through stale or unknown region (id {id})")]
    StaleRegion { id: u32 },
    #[error("out-of-bounds region access (region {id}, offset {offset}, width {width})")]
    RegionOutOfBounds { id: u32, offset: u64, width: u64 },
    #[error("direct dereference of user address 0x{0:x}")]
    UserAddressDereference(u64),
    #[error("access to unmapped address 0x{0:x}")]
    InvalidAddress(u64),
    #[error("call to unknown helper id {0}")]
    UnknownHelper(u32),
    #[error("kernel fault: {0}")]
    Kernel(String),
}

/// Outcome of one invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunResult {
    /// r0 at exit (or at the fault site).
    pub return_value: i64,
    pub executed_insns: u64,
    /// Helper invocations by name, as observed by this run.
    pub helper_calls: BTreeMap<String, u64>,
    /// Absent for any verifier-accepted program.
    pub fault: Option<Trap>,
}

impl RunResult {
    pub fn helper_count(&self, name: &str) -> u64 {
        self.helper_calls.get(name).copied().unwrap_or(0)
    }
}

pub enum StepOutcome {
    Continue,
    Exited(i64),
    Trapped(Trap),
}

/// Live interpreter state for one invocation.
pub struct ExecutionContext<'k> {
    program: &'k Program,
    kernel: &'k mut SimKernel,
    regs: [u64; 11],
    stack: Box<[u8; STACK_SIZE]>,
    pc: usize,
    fuel: u64,
    executed: u64,
    helper_calls: BTreeMap<String, u64>,
}

enum Slot {
    Stack(usize),
    Arena(u64),
}

impl<'k> ExecutionContext<'k> {
    pub fn new(program: &'k Program, arg: u64, kernel: &'k mut SimKernel, fuel: u64) -> Self {
        let mut regs = [0u64; 11];
        regs[1] = arg;
        regs[10] = STACK_TOP;
        ExecutionContext {
            program,
            kernel,
            regs,
            stack: Box::new([0; STACK_SIZE]),
            pc: 0,
            fuel,
            executed: 0,
            helper_calls: BTreeMap::new(),
        }
    }

    pub fn registers(&self) -> &[u64; 11] {
        &self.regs
    }

    fn reg(&self, r: Reg) -> u64 {
        self.regs[r.index()]
    }

    fn operand(&self, op: Operand) -> u64 {
        match op {
            Operand::Reg(r) => self.reg(r),
            Operand::Imm(imm) => i64::from(imm) as u64,
        }
    }

    /// Resolve an address to a memory slot, enforcing bounds and natural
    /// alignment.
    fn resolve(&self, addr: u64, width: u64) -> Result<Slot, Trap> {
        if addr & REGION_TAG != 0 {
            let (id, offset) = decode_region_handle(addr).expect("tagged");
            let Some(region) = self.kernel.live_region_window(id) else {
                return Err(Trap::StaleRegion { id });
            };
            if offset
                .checked_add(width)
                .is_none_or(|end| end > region.size)
            {
                return Err(Trap::RegionOutOfBounds { id, offset, width });
            }
            if offset % width != 0 {
                return Err(Trap::Misaligned { addr, width });
            }
            return Ok(Slot::Arena(region.offset + offset));
        }
        if (STACK_TAG..STACK_TOP).contains(&addr) {
            let index = (addr - STACK_TAG) as usize;
            if index + width as usize > STACK_SIZE {
                return Err(Trap::OutOfFrame { addr, width });
            }
            if !index.is_multiple_of(width as usize) {
                return Err(Trap::Misaligned { addr, width });
            }
            return Ok(Slot::Stack(index));
        }
        if self.kernel.arena().offset_of(addr, width).is_some() {
            return Err(Trap::UserAddressDereference(addr));
        }
        Err(Trap::InvalidAddress(addr))
    }

    fn load(&self, addr: u64, width: Width) -> Result<u64, Trap> {
        let w = width.bytes();
        let mut bytes = [0u8; 8];
        match self.resolve(addr, w)? {
            Slot::Stack(index) => {
                bytes[..w as usize].copy_from_slice(&self.stack[index..index + w as usize]);
            }
            Slot::Arena(offset) => {
                bytes[..w as usize].copy_from_slice(self.kernel.arena().slice(offset, w));
            }
        }
        Ok(u64::from_le_bytes(bytes))
    }

    fn store(&mut self, addr: u64, width: Width, value: u64) -> Result<(), Trap> {
        let w = width.bytes();
        let bytes = value.to_le_bytes();
        match self.resolve(addr, w)? {
            Slot::Stack(index) => {
                self.stack[index..index + w as usize].copy_from_slice(&bytes[..w as usize]);
            }
            Slot::Arena(offset) => {
                self.kernel
                    .arena_mut()
                    .slice_mut(offset, w)
                    .copy_from_slice(&bytes[..w as usize]);
            }
        }
        Ok(())
    }

    fn alu(&mut self, op: AluOp, dst: Reg, src: Operand) -> Result<(), Trap> {
        let a = self.reg(dst);
        let b = self.operand(src);
        let result = match op {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Div => {
                if b == 0 {
                    return Err(Trap::DivisionByZero);
                }
                a / b
            }
            AluOp::Mod => {
                if b == 0 {
                    return Err(Trap::DivisionByZero);
                }
                a % b
            }
            AluOp::And => a & b,
            AluOp::Or => a | b,
            AluOp::Xor => a ^ b,
            AluOp::Lsh => a.wrapping_shl(b as u32 & 63),
            AluOp::Rsh => a.wrapping_shr(b as u32 & 63),
            AluOp::Mov => b,
        };
        self.regs[dst.index()] = result;
        Ok(())
    }

    fn call(&mut self, helper: u32) -> Result<(), Trap> {
        let desc = helper_table()
            .by_id(helper)
            .ok_or(Trap::UnknownHelper(helper))?;
        *self.helper_calls.entry(desc.name.to_string()).or_default() += 1;
        let args = [
            self.regs[1],
            self.regs[2],
            self.regs[3],
            self.regs[4],
            self.regs[5],
        ];
        let ret = match helper {
            helpers::COPY_FROM_USER => self.copy_from_user(args[0], args[1], args[2]),
            helpers::COPY_TO_USER => self.copy_to_user(args[0], args[1], args[2]),
            _ => match self.kernel.kcall(helper, args) {
                Ok(ret) => Ok(ret),
                Err(KernelError::UnknownHelper(id)) => Err(Trap::UnknownHelper(id)),
                Err(e) => Err(Trap::Kernel(e.to_string())),
            },
        }?;
        self.regs[0] = ret as u64;
        Ok(())
    }

    /// `copy_from_user(dst, size, user_addr)`: arena bytes into a stack
    /// or region destination. Returns `0` or `-EFAULT`.
    fn copy_from_user(&mut self, dst: u64, size: u64, user_addr: u64) -> Result<i64, Trap> {
        self.kernel.begin_kcall(helpers::COPY_FROM_USER);
        let ret = (|| -> Result<i64, Trap> {
            if size == 0 {
                return Ok(0);
            }
            let mut buf = vec![0u8; size as usize];
            let status = self.kernel.copy_in(user_addr, &mut buf);
            if status != 0 {
                return Ok(status);
            }
            match self.copy_slot(dst, size)? {
                Slot::Stack(index) => {
                    self.stack[index..index + size as usize].copy_from_slice(&buf);
                }
                Slot::Arena(offset) => {
                    self.kernel
                        .arena_mut()
                        .slice_mut(offset, size)
                        .copy_from_slice(&buf);
                }
            }
            Ok(0)
        })();
        if let Ok(v) = ret {
            self.kernel.end_kcall(helpers::COPY_FROM_USER, v);
        }
        ret
    }

    /// `copy_to_user(user_addr, size, src)`: stack or region source into
    /// arena bytes.
    fn copy_to_user(&mut self, user_addr: u64, size: u64, src: u64) -> Result<i64, Trap> {
        self.kernel.begin_kcall(helpers::COPY_TO_USER);
        let ret = (|| -> Result<i64, Trap> {
            if size == 0 {
                return Ok(0);
            }
            let buf = match self.copy_slot(src, size)? {
                Slot::Stack(index) => self.stack[index..index + size as usize].to_vec(),
                Slot::Arena(offset) => self.kernel.arena().slice(offset, size).to_vec(),
            };
            Ok(self.kernel.copy_out(user_addr, &buf))
        })();
        if let Ok(v) = ret {
            self.kernel.end_kcall(helpers::COPY_TO_USER, v);
        }
        ret
    }

    /// Like [`Self::resolve`] but without alignment (byte-wise copies).
    fn copy_slot(&self, addr: u64, len: u64) -> Result<Slot, Trap> {
        if addr & REGION_TAG != 0 {
            let (id, offset) = decode_region_handle(addr).expect("tagged");
            let Some(region) = self.kernel.live_region_window(id) else {
                return Err(Trap::StaleRegion { id });
            };
            if offset.checked_add(len).is_none_or(|end| end > region.size) {
                return Err(Trap::RegionOutOfBounds {
                    id,
                    offset,
                    width: len,
                });
            }
            return Ok(Slot::Arena(region.offset + offset));
        }
        if (STACK_TAG..STACK_TOP).contains(&addr) {
            let index = (addr - STACK_TAG) as usize;
            if index + len as usize > STACK_SIZE {
                return Err(Trap::OutOfFrame { addr, width: len });
            }
            return Ok(Slot::Stack(index));
        }
        Err(Trap::InvalidAddress(addr))
    }

    /// Execute one instruction.
    pub fn step(&mut self) -> StepOutcome {
        if self.fuel == 0 {
            return StepOutcome::Trapped(Trap::FuelExhausted);
        }
        self.fuel -= 1;
        let Some(insn) = self.program.instructions().get(self.pc).copied() else {
            return StepOutcome::Trapped(Trap::PcOutOfBounds(self.pc));
        };
        self.executed += 1;
        let result: Result<(), Trap> = match insn {
            Instruction::Alu { op, dst, src } => {
                self.pc += 1;
                self.alu(op, dst, src)
            }
            Instruction::Load {
                width,
                dst,
                base,
                offset,
            } => {
                self.pc += 1;
                let addr = self.reg(base).wrapping_add(i64::from(offset) as u64);
                self.load(addr, width).map(|v| self.regs[dst.index()] = v)
            }
            Instruction::Store {
                width,
                base,
                offset,
                value,
            } => {
                self.pc += 1;
                let addr = self.reg(base).wrapping_add(i64::from(offset) as u64);
                let v = self.operand(value);
                self.store(addr, width, v)
            }
            Instruction::Jump { cond, offset } => {
                let taken = match cond {
                    None => true,
                    Some((cond, lhs, rhs)) => cond.eval(self.reg(lhs), self.operand(rhs)),
                };
                self.pc = if taken {
                    (self.pc as i64 + 1 + i64::from(offset)) as usize
                } else {
                    self.pc + 1
                };
                Ok(())
            }
            Instruction::Call { helper } => {
                self.pc += 1;
                self.call(helper)
            }
            Instruction::Exit => return StepOutcome::Exited(self.regs[0] as i64),
        };
        match result {
            Ok(()) => StepOutcome::Continue,
            Err(trap) => StepOutcome::Trapped(trap),
        }
    }

    fn finish(self, return_value: i64, fault: Option<Trap>) -> RunResult {
        RunResult {
            return_value,
            executed_insns: self.executed,
            helper_calls: self.helper_calls,
            fault,
        }
    }
}

/// Invoke a program as one aggregated call: a single user/kernel round
/// trip bracketing the whole execution, `arg` in r1, result from r0.
///
/// The caller is responsible for having verified the program; running an
/// unverified program cannot corrupt the host but may trap.
pub fn invoke_anycall(program: &Program, arg: u64, kernel: &mut SimKernel, fuel: u64) -> RunResult {
    kernel.enter_kernel();
    let mut ctx = ExecutionContext::new(program, arg, kernel, fuel);
    let (ret, fault) = loop {
        match ctx.step() {
            StepOutcome::Continue => {}
            StepOutcome::Exited(r0) => break (r0, None),
            StepOutcome::Trapped(trap) => break (ctx.regs[0] as i64, Some(trap)),
        }
    };
    let result = ctx.finish(ret, fault);
    kernel.exit_kernel();
    result
}
