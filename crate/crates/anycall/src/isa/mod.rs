//! Bytecode instruction set: decoded instruction forms, the immutable
//! [`Program`] container, binary encoding and textual assembly.
//!
//! The instruction layout follows the classic 64-bit register-machine
//! convention: eleven registers `r0`..`r10`, where `r10` is the read-only
//! frame pointer, fixed 8-byte little-endian instruction words, helper
//! calls by numeric id. Only the subset needed by aggregation programs is
//! implemented: 64-bit ALU, 1/2/4/8-byte loads and stores, the full
//! conditional-jump family (signed and unsigned), `call` and `exit`.

mod asm;
mod encode;

pub use asm::{assemble, assemble_named, disassemble, AsmError};
pub use encode::{
    decode_instructions, decode_program, encode_instructions, encode_program, read_program_file,
    write_program_file, EncodeError, FILE_MAGIC, FILE_VERSION,
};

use std::fmt;

use thiserror::Error;

/// Number of addressable registers (`r0`..`r10`).
pub const REGISTER_COUNT: usize = 11;
/// The read-only frame pointer.
pub const FRAME_POINTER: Reg = Reg(10);
/// Per-invocation stack frame, in bytes.
pub const STACK_SIZE: usize = 512;

/// A register index in `0..=10`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Result<Self, ProgramError> {
        if usize::from(index) < REGISTER_COUNT {
            Ok(Reg(index))
        } else {
            Err(ProgramError::BadRegister(index))
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn is_frame_pointer(self) -> bool {
        self == FRAME_POINTER
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// 64-bit ALU operations. Division and modulo are unsigned; shifts mask
/// the amount to six bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Mod,
    And,
    Or,
    Xor,
    Lsh,
    Rsh,
    Mov,
}

impl AluOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Mod => "mod",
            AluOp::And => "and",
            AluOp::Or => "or",
            AluOp::Xor => "xor",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Mov => "mov",
        }
    }
}

/// Memory access width.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Width {
    B,
    H,
    W,
    DW,
}

impl Width {
    pub fn bytes(self) -> u64 {
        match self {
            Width::B => 1,
            Width::H => 2,
            Width::W => 4,
            Width::DW => 8,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Width::B => "b",
            Width::H => "h",
            Width::W => "w",
            Width::DW => "dw",
        }
    }
}

/// Conditional jump predicates. `Lt`/`Le`/`Gt`/`Ge` compare unsigned,
/// the `S*` variants signed.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum JumpCond {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    SLt,
    SLe,
    SGt,
    SGe,
}

impl JumpCond {
    pub fn mnemonic(self) -> &'static str {
        match self {
            JumpCond::Eq => "jeq",
            JumpCond::Ne => "jne",
            JumpCond::Lt => "jlt",
            JumpCond::Le => "jle",
            JumpCond::Gt => "jgt",
            JumpCond::Ge => "jge",
            JumpCond::SLt => "jslt",
            JumpCond::SLe => "jsle",
            JumpCond::SGt => "jsgt",
            JumpCond::SGe => "jsge",
        }
    }

    pub fn eval(self, lhs: u64, rhs: u64) -> bool {
        match self {
            JumpCond::Eq => lhs == rhs,
            JumpCond::Ne => lhs != rhs,
            JumpCond::Lt => lhs < rhs,
            JumpCond::Le => lhs <= rhs,
            JumpCond::Gt => lhs > rhs,
            JumpCond::Ge => lhs >= rhs,
            JumpCond::SLt => (lhs as i64) < rhs as i64,
            JumpCond::SLe => (lhs as i64) <= rhs as i64,
            JumpCond::SGt => (lhs as i64) > rhs as i64,
            JumpCond::SGe => (lhs as i64) >= rhs as i64,
        }
    }
}

/// Second operand of ALU and conditional-jump instructions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
}

/// One decoded instruction.
///
/// Jump offsets count instructions relative to the next instruction, so a
/// jump at index `i` with offset `d` lands on `i + 1 + d`. Memory offsets
/// count bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Instruction {
    Alu {
        op: AluOp,
        dst: Reg,
        src: Operand,
    },
    Load {
        width: Width,
        dst: Reg,
        base: Reg,
        offset: i16,
    },
    Store {
        width: Width,
        base: Reg,
        offset: i16,
        value: Operand,
    },
    Jump {
        cond: Option<(JumpCond, Reg, Operand)>,
        offset: i16,
    },
    Call {
        helper: u32,
    },
    Exit,
}

impl Instruction {
    /// The register this instruction writes, if any. Stores write memory,
    /// not a register; `call` writes `r0` implicitly.
    pub fn written_register(&self) -> Option<Reg> {
        match self {
            Instruction::Alu { dst, .. } | Instruction::Load { dst, .. } => Some(*dst),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("register index {0} out of range (valid: r0..r10)")]
    BadRegister(u8),
    #[error("instruction {index}: write to read-only frame pointer r10")]
    FramePointerWrite { index: usize },
    #[error("instruction {index}: jump target {target} outside program of {len} instructions")]
    JumpOutOfBounds {
        index: usize,
        target: i64,
        len: usize,
    },
}

/// A named, immutable instruction sequence plus the helpers it imports.
///
/// Construction validates structural invariants (no writes to `r10`, jump
/// targets inside the program). Safety and termination are the verifier's
/// job; a `Program` on its own is only well-formed, not trusted.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Program {
    name: String,
    instructions: Vec<Instruction>,
    helper_imports: Vec<(String, u32)>,
    stack_size: usize,
}

impl Program {
    pub fn new(
        name: impl Into<String>,
        instructions: Vec<Instruction>,
        helper_imports: Vec<(String, u32)>,
    ) -> Result<Self, ProgramError> {
        for (index, insn) in instructions.iter().enumerate() {
            if insn.written_register().is_some_and(Reg::is_frame_pointer) {
                return Err(ProgramError::FramePointerWrite { index });
            }
            if let Instruction::Jump { offset, .. } = insn {
                let target = index as i64 + 1 + i64::from(*offset);
                if target < 0 || target as usize >= instructions.len() {
                    return Err(ProgramError::JumpOutOfBounds {
                        index,
                        target,
                        len: instructions.len(),
                    });
                }
            }
        }
        Ok(Program {
            name: name.into(),
            instructions,
            helper_imports,
            stack_size: STACK_SIZE,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Helpers referenced by name, in first-use order.
    pub fn helper_imports(&self) -> &[(String, u32)] {
        &self.helper_imports
    }

    pub fn stack_size(&self) -> usize {
        self.stack_size
    }
}
