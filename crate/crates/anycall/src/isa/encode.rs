//! Fixed 8-byte little-endian instruction encoding and the on-disk
//! program container.
//!
//! Word layout: opcode(1), dst/src register nibbles(1, dst low), offset(2,
//! LE), imm(4, LE). Opcode values keep the classic BPF assignments so that
//! e.g. `exit` encodes as `0x95`. Decoding is strict: unused fields must
//! be zero, which makes `encode`/`decode` exact inverses.

use thiserror::Error;

use super::{AluOp, Instruction, JumpCond, Operand, Program, ProgramError, Reg, Width};
use crate::syskernel::helper_table;

/// Size of one encoded instruction.
pub const INSN_SIZE: usize = 8;
/// Program file magic.
pub const FILE_MAGIC: [u8; 4] = *b"AGGV";
/// Program file format version.
pub const FILE_VERSION: u16 = 1;

// Instruction classes (low three opcode bits).
const CLS_LDX: u8 = 0x01;
const CLS_ST: u8 = 0x02;
const CLS_STX: u8 = 0x03;
const CLS_JMP: u8 = 0x05;
const CLS_ALU64: u8 = 0x07;

// Source modifier for ALU and JMP classes.
const SRC_K: u8 = 0x00;
const SRC_X: u8 = 0x08;

// Memory mode for load/store classes.
const MODE_MEM: u8 = 0x60;

const SIZE_W: u8 = 0x00;
const SIZE_H: u8 = 0x08;
const SIZE_B: u8 = 0x10;
const SIZE_DW: u8 = 0x18;

const ALU_ADD: u8 = 0x00;
const ALU_SUB: u8 = 0x10;
const ALU_MUL: u8 = 0x20;
const ALU_DIV: u8 = 0x30;
const ALU_OR: u8 = 0x40;
const ALU_AND: u8 = 0x50;
const ALU_LSH: u8 = 0x60;
const ALU_RSH: u8 = 0x70;
const ALU_MOD: u8 = 0x90;
const ALU_XOR: u8 = 0xa0;
const ALU_MOV: u8 = 0xb0;

const JMP_JA: u8 = 0x00;
const JMP_JEQ: u8 = 0x10;
const JMP_JGT: u8 = 0x20;
const JMP_JGE: u8 = 0x30;
const JMP_JNE: u8 = 0x50;
const JMP_JSGT: u8 = 0x60;
const JMP_JSGE: u8 = 0x70;
const JMP_CALL: u8 = 0x80;
const JMP_EXIT: u8 = 0x90;
const JMP_JLT: u8 = 0xa0;
const JMP_JLE: u8 = 0xb0;
const JMP_JSLT: u8 = 0xc0;
const JMP_JSLE: u8 = 0xd0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("truncated input: {0} bytes is not a multiple of {INSN_SIZE}")]
    Truncated(usize),
    #[error("instruction {index}: unknown opcode byte 0x{opcode:02x}")]
    UnknownOpcode { index: usize, opcode: u8 },
    #[error("instruction {index}: non-canonical encoding ({reason})")]
    NonCanonical { index: usize, reason: &'static str },
    #[error("instruction {index}: register index {reg} out of range")]
    BadRegister { index: usize, reg: u8 },
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error("bad file magic (expected {:?})", FILE_MAGIC)]
    BadMagic,
    #[error("unsupported file version {0}")]
    BadVersion(u16),
    #[error("file header count {declared} does not match {actual} encoded instructions")]
    CountMismatch { declared: u64, actual: usize },
}

fn alu_code(op: AluOp) -> u8 {
    match op {
        AluOp::Add => ALU_ADD,
        AluOp::Sub => ALU_SUB,
        AluOp::Mul => ALU_MUL,
        AluOp::Div => ALU_DIV,
        AluOp::Or => ALU_OR,
        AluOp::And => ALU_AND,
        AluOp::Lsh => ALU_LSH,
        AluOp::Rsh => ALU_RSH,
        AluOp::Mod => ALU_MOD,
        AluOp::Xor => ALU_XOR,
        AluOp::Mov => ALU_MOV,
    }
}

fn jmp_code(cond: JumpCond) -> u8 {
    match cond {
        JumpCond::Eq => JMP_JEQ,
        JumpCond::Ne => JMP_JNE,
        JumpCond::Lt => JMP_JLT,
        JumpCond::Le => JMP_JLE,
        JumpCond::Gt => JMP_JGT,
        JumpCond::Ge => JMP_JGE,
        JumpCond::SLt => JMP_JSLT,
        JumpCond::SLe => JMP_JSLE,
        JumpCond::SGt => JMP_JSGT,
        JumpCond::SGe => JMP_JSGE,
    }
}

fn size_bits(width: Width) -> u8 {
    match width {
        Width::B => SIZE_B,
        Width::H => SIZE_H,
        Width::W => SIZE_W,
        Width::DW => SIZE_DW,
    }
}

fn width_from_bits(bits: u8) -> Width {
    match bits {
        SIZE_B => Width::B,
        SIZE_H => Width::H,
        SIZE_W => Width::W,
        _ => Width::DW,
    }
}

struct RawInsn {
    opcode: u8,
    dst: u8,
    src: u8,
    offset: i16,
    imm: i32,
}

impl RawInsn {
    fn to_bytes(&self) -> [u8; INSN_SIZE] {
        let mut b = [0u8; INSN_SIZE];
        b[0] = self.opcode;
        b[1] = (self.src << 4) | (self.dst & 0x0f);
        b[2..4].copy_from_slice(&self.offset.to_le_bytes());
        b[4..8].copy_from_slice(&self.imm.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8]) -> Self {
        RawInsn {
            opcode: b[0],
            dst: b[1] & 0x0f,
            src: b[1] >> 4,
            offset: i16::from_le_bytes([b[2], b[3]]),
            imm: i32::from_le_bytes([b[4], b[5], b[6], b[7]]),
        }
    }
}

fn encode_one(insn: &Instruction) -> RawInsn {
    match *insn {
        Instruction::Alu { op, dst, src } => match src {
            Operand::Reg(s) => RawInsn {
                opcode: CLS_ALU64 | SRC_X | alu_code(op),
                dst: dst.index() as u8,
                src: s.index() as u8,
                offset: 0,
                imm: 0,
            },
            Operand::Imm(imm) => RawInsn {
                opcode: CLS_ALU64 | SRC_K | alu_code(op),
                dst: dst.index() as u8,
                src: 0,
                offset: 0,
                imm,
            },
        },
        Instruction::Load {
            width,
            dst,
            base,
            offset,
        } => RawInsn {
            opcode: CLS_LDX | MODE_MEM | size_bits(width),
            dst: dst.index() as u8,
            src: base.index() as u8,
            offset,
            imm: 0,
        },
        Instruction::Store {
            width,
            base,
            offset,
            value,
        } => match value {
            Operand::Reg(s) => RawInsn {
                opcode: CLS_STX | MODE_MEM | size_bits(width),
                dst: base.index() as u8,
                src: s.index() as u8,
                offset,
                imm: 0,
            },
            Operand::Imm(imm) => RawInsn {
                opcode: CLS_ST | MODE_MEM | size_bits(width),
                dst: base.index() as u8,
                src: 0,
                offset,
                imm,
            },
        },
        Instruction::Jump { cond: None, offset } => RawInsn {
            opcode: CLS_JMP | JMP_JA,
            dst: 0,
            src: 0,
            offset,
            imm: 0,
        },
        Instruction::Jump {
            cond: Some((cond, lhs, rhs)),
            offset,
        } => match rhs {
            Operand::Reg(s) => RawInsn {
                opcode: CLS_JMP | SRC_X | jmp_code(cond),
                dst: lhs.index() as u8,
                src: s.index() as u8,
                offset,
                imm: 0,
            },
            Operand::Imm(imm) => RawInsn {
                opcode: CLS_JMP | SRC_K | jmp_code(cond),
                dst: lhs.index() as u8,
                src: 0,
                offset,
                imm,
            },
        },
        Instruction::Call { helper } => RawInsn {
            opcode: CLS_JMP | JMP_CALL,
            dst: 0,
            src: 0,
            offset: 0,
            imm: helper as i32,
        },
        Instruction::Exit => RawInsn {
            opcode: CLS_JMP | JMP_EXIT,
            dst: 0,
            src: 0,
            offset: 0,
            imm: 0,
        },
    }
}

fn require(cond: bool, index: usize, reason: &'static str) -> Result<(), EncodeError> {
    if cond {
        Ok(())
    } else {
        Err(EncodeError::NonCanonical { index, reason })
    }
}

fn reg(index: usize, r: u8) -> Result<Reg, EncodeError> {
    Reg::new(r).map_err(|_| EncodeError::BadRegister { index, reg: r })
}

fn decode_one(index: usize, raw: &RawInsn) -> Result<Instruction, EncodeError> {
    let class = raw.opcode & 0x07;
    match class {
        CLS_ALU64 => {
            let op = match raw.opcode & 0xf0 {
                ALU_ADD => AluOp::Add,
                ALU_SUB => AluOp::Sub,
                ALU_MUL => AluOp::Mul,
                ALU_DIV => AluOp::Div,
                ALU_OR => AluOp::Or,
                ALU_AND => AluOp::And,
                ALU_LSH => AluOp::Lsh,
                ALU_RSH => AluOp::Rsh,
                ALU_MOD => AluOp::Mod,
                ALU_XOR => AluOp::Xor,
                ALU_MOV => AluOp::Mov,
                _ => {
                    return Err(EncodeError::UnknownOpcode {
                        index,
                        opcode: raw.opcode,
                    })
                }
            };
            require(raw.offset == 0, index, "ALU offset must be zero")?;
            let dst = reg(index, raw.dst)?;
            let src = if raw.opcode & 0x08 == SRC_X {
                require(raw.imm == 0, index, "register-source ALU imm must be zero")?;
                Operand::Reg(reg(index, raw.src)?)
            } else {
                require(raw.src == 0, index, "immediate-source ALU src must be zero")?;
                Operand::Imm(raw.imm)
            };
            Ok(Instruction::Alu { op, dst, src })
        }
        CLS_LDX => {
            require(
                raw.opcode & 0xe0 == MODE_MEM,
                index,
                "load mode must be MEM",
            )?;
            require(raw.imm == 0, index, "load imm must be zero")?;
            Ok(Instruction::Load {
                width: width_from_bits(raw.opcode & 0x18),
                dst: reg(index, raw.dst)?,
                base: reg(index, raw.src)?,
                offset: raw.offset,
            })
        }
        CLS_ST | CLS_STX => {
            require(
                raw.opcode & 0xe0 == MODE_MEM,
                index,
                "store mode must be MEM",
            )?;
            let width = width_from_bits(raw.opcode & 0x18);
            let base = reg(index, raw.dst)?;
            let value = if class == CLS_STX {
                require(raw.imm == 0, index, "register store imm must be zero")?;
                Operand::Reg(reg(index, raw.src)?)
            } else {
                require(raw.src == 0, index, "immediate store src must be zero")?;
                Operand::Imm(raw.imm)
            };
            Ok(Instruction::Store {
                width,
                base,
                offset: raw.offset,
                value,
            })
        }
        CLS_JMP => {
            let code = raw.opcode & 0xf0;
            let is_x = raw.opcode & 0x08 == SRC_X;
            match code {
                JMP_JA if !is_x => {
                    require(
                        raw.dst == 0 && raw.src == 0,
                        index,
                        "ja registers must be zero",
                    )?;
                    require(raw.imm == 0, index, "ja imm must be zero")?;
                    Ok(Instruction::Jump {
                        cond: None,
                        offset: raw.offset,
                    })
                }
                JMP_CALL if !is_x => {
                    require(
                        raw.dst == 0 && raw.src == 0,
                        index,
                        "call registers must be zero",
                    )?;
                    require(raw.offset == 0, index, "call offset must be zero")?;
                    Ok(Instruction::Call {
                        helper: raw.imm as u32,
                    })
                }
                JMP_EXIT if !is_x => {
                    require(
                        raw.dst == 0 && raw.src == 0,
                        index,
                        "exit registers must be zero",
                    )?;
                    require(
                        raw.offset == 0 && raw.imm == 0,
                        index,
                        "exit payload must be zero",
                    )?;
                    Ok(Instruction::Exit)
                }
                _ => {
                    let cond = match code {
                        JMP_JEQ => JumpCond::Eq,
                        JMP_JNE => JumpCond::Ne,
                        JMP_JLT => JumpCond::Lt,
                        JMP_JLE => JumpCond::Le,
                        JMP_JGT => JumpCond::Gt,
                        JMP_JGE => JumpCond::Ge,
                        JMP_JSLT => JumpCond::SLt,
                        JMP_JSLE => JumpCond::SLe,
                        JMP_JSGT => JumpCond::SGt,
                        JMP_JSGE => JumpCond::SGe,
                        _ => {
                            return Err(EncodeError::UnknownOpcode {
                                index,
                                opcode: raw.opcode,
                            })
                        }
                    };
                    let lhs = reg(index, raw.dst)?;
                    let rhs = if is_x {
                        require(raw.imm == 0, index, "register-compare imm must be zero")?;
                        Operand::Reg(reg(index, raw.src)?)
                    } else {
                        require(raw.src == 0, index, "immediate-compare src must be zero")?;
                        Operand::Imm(raw.imm)
                    };
                    Ok(Instruction::Jump {
                        cond: Some((cond, lhs, rhs)),
                        offset: raw.offset,
                    })
                }
            }
        }
        _ => Err(EncodeError::UnknownOpcode {
            index,
            opcode: raw.opcode,
        }),
    }
}

/// Encode a raw instruction stream (no container header).
pub fn encode_instructions(instructions: &[Instruction]) -> Vec<u8> {
    let mut out = Vec::with_capacity(instructions.len() * INSN_SIZE);
    for insn in instructions {
        out.extend_from_slice(&encode_one(insn).to_bytes());
    }
    out
}

/// Decode a raw instruction stream. The length must be a multiple of the
/// 8-byte word size; unused fields must be zero.
pub fn decode_instructions(bytes: &[u8]) -> Result<Vec<Instruction>, EncodeError> {
    if !bytes.len().is_multiple_of(INSN_SIZE) {
        return Err(EncodeError::Truncated(bytes.len()));
    }
    bytes
        .chunks_exact(INSN_SIZE)
        .enumerate()
        .map(|(index, chunk)| decode_one(index, &RawInsn::from_bytes(chunk)))
        .collect()
}

/// Encode a whole program as a raw instruction stream.
pub fn encode_program(program: &Program) -> Vec<u8> {
    encode_instructions(program.instructions())
}

/// Decode a raw instruction stream into a [`Program`]. Helper imports are
/// reconstructed from `call` instructions via the canonical helper table.
pub fn decode_program(name: impl Into<String>, bytes: &[u8]) -> Result<Program, EncodeError> {
    let instructions = decode_instructions(bytes)?;
    let imports = collect_imports(&instructions);
    Ok(Program::new(name, instructions, imports)?)
}

fn collect_imports(instructions: &[Instruction]) -> Vec<(String, u32)> {
    let table = helper_table();
    let mut imports: Vec<(String, u32)> = Vec::new();
    for insn in instructions {
        if let Instruction::Call { helper } = insn {
            if imports.iter().any(|(_, id)| id == helper) {
                continue;
            }
            let name = table
                .by_id(*helper)
                .map(|h| h.name.to_string())
                .unwrap_or_else(|| format!("#{helper}"));
            imports.push((name, *helper));
        }
    }
    imports
}

/// Serialize a program to the container format: magic `AGGV`, version
/// u16, instruction count u32, then the 8-byte instruction words, all
/// little-endian.
pub fn write_program_file(program: &Program) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + program.len() * INSN_SIZE);
    out.extend_from_slice(&FILE_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(program.len() as u32).to_le_bytes());
    out.extend_from_slice(&encode_program(program));
    out
}

/// Parse the container format produced by [`write_program_file`].
pub fn read_program_file(name: impl Into<String>, bytes: &[u8]) -> Result<Program, EncodeError> {
    if bytes.len() < 10 {
        return Err(EncodeError::Truncated(bytes.len()));
    }
    if bytes[0..4] != FILE_MAGIC {
        return Err(EncodeError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FILE_VERSION {
        return Err(EncodeError::BadVersion(version));
    }
    let declared = u64::from(u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]));
    let program = decode_program(name, &bytes[10..])?;
    if declared != program.len() as u64 {
        return Err(EncodeError::CountMismatch {
            declared,
            actual: program.len(),
        });
    }
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    #[test]
    fn exit_encodes_to_classic_byte() {
        let bytes = encode_instructions(&[Instruction::Exit]);
        assert_eq!(bytes, vec![0x95, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_stream_decodes_to_empty_program() {
        let p = decode_program("empty", &[]).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn truncated_input_is_rejected() {
        assert_eq!(
            decode_instructions(&[0x95; 9]),
            Err(EncodeError::Truncated(9))
        );
    }

    #[test]
    fn unknown_opcode_is_rejected() {
        let bytes = [0xff, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(
            decode_instructions(&bytes),
            Err(EncodeError::UnknownOpcode {
                index: 0,
                opcode: 0xff
            })
        );
    }

    #[test]
    fn decoder_rejects_frame_pointer_write() {
        // mov r10, 0
        let bytes = [0xb7, 0x0a, 0, 0, 0, 0, 0, 0];
        let err = decode_program("p", &bytes).unwrap_err();
        assert!(matches!(
            err,
            EncodeError::Program(ProgramError::FramePointerWrite { index: 0 })
        ));
    }

    #[test]
    fn roundtrip_through_container() {
        let p = assemble("mov r0, 7\nadd r0, -3\nexit").unwrap();
        let file = write_program_file(&p);
        let back = read_program_file("asm", &file).unwrap();
        assert_eq!(p.instructions(), back.instructions());
    }

    #[test]
    fn container_rejects_bad_magic_and_version() {
        let p = assemble("exit").unwrap();
        let mut file = write_program_file(&p);
        file[0] = b'X';
        assert_eq!(read_program_file("p", &file), Err(EncodeError::BadMagic));
        let mut file = write_program_file(&p);
        file[4] = 9;
        assert_eq!(
            read_program_file("p", &file),
            Err(EncodeError::BadVersion(9))
        );
    }
}
