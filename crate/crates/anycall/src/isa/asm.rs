//! Line-oriented textual assembly.
//!
//! Grammar (one instruction per line):
//!
//! ```text
//! line      := [label ':'] [instruction] [';' comment]
//! alu       := op reg ',' (reg | imm)          op in mov|add|sub|mul|div|mod|and|or|xor|lsh|rsh
//! load      := ldx{b,h,w,dw} reg ',' '[' reg [sign imm] ']'
//! store     := stx{b,h,w,dw} '[' reg [sign imm] ']' ',' reg
//!            | st{b,h,w,dw}  '[' reg [sign imm] ']' ',' imm
//! jump      := ja label | jmp label
//!            | j{eq,ne,lt,le,gt,ge,slt,sle,sgt,sge} reg ',' (reg | imm) ',' label
//! call      := call helper-name | call '#' helper-id
//! exit      := exit
//! ```
//!
//! Immediates are decimal or `0x` hex, optionally negative. Helper names
//! resolve through the canonical helper table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{AluOp, Instruction, JumpCond, Operand, Program, ProgramError, Reg, Width};
use crate::syskernel::helper_table;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}, col {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("line {line}: unknown helper name `{name}`")]
    UnknownHelper { line: usize, name: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: jump displacement does not fit in 16 bits")]
    JumpTooFar { line: usize },
    #[error(transparent)]
    Program(#[from] ProgramError),
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> AsmError {
    AsmError::Syntax {
        line,
        col,
        message: message.into(),
    }
}

/// Operand slot awaiting label resolution.
enum PendingJump {
    None,
    Label(String),
}

struct ParsedLine {
    line_no: usize,
    insn: Instruction,
    jump: PendingJump,
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line_no: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str, line_no: usize) -> Self {
        Cursor {
            text,
            pos: 0,
            line_no,
        }
    }

    fn col(&self) -> usize {
        self.pos + 1
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        while self.rest().starts_with([' ', '\t']) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, token: char) -> Result<(), AsmError> {
        self.skip_ws();
        if self.rest().starts_with(token) {
            self.pos += token.len_utf8();
            Ok(())
        } else {
            Err(syntax(
                self.line_no,
                self.col(),
                format!("expected `{token}`"),
            ))
        }
    }

    fn word(&mut self) -> Result<&'a str, AsmError> {
        self.skip_ws();
        let start = self.pos;
        while self
            .rest()
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == '_' || c == '#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(syntax(self.line_no, self.col(), "expected identifier"));
        }
        Ok(&self.text[start..self.pos])
    }

    fn register(&mut self) -> Result<Reg, AsmError> {
        self.skip_ws();
        let col = self.col();
        let word = self.word()?;
        let idx = word
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| {
                syntax(
                    self.line_no,
                    col,
                    format!("expected register, found `{word}`"),
                )
            })?;
        Reg::new(idx)
            .map_err(|_| syntax(self.line_no, col, format!("register `{word}` out of range")))
    }

    fn integer(&mut self) -> Result<i64, AsmError> {
        self.skip_ws();
        let col = self.col();
        let start = self.pos;
        if self.rest().starts_with(['-', '+']) {
            self.pos += 1;
        }
        while self
            .rest()
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_alphanumeric())
        {
            self.pos += 1;
        }
        let text = &self.text[start..self.pos];
        parse_int(text).ok_or_else(|| {
            syntax(
                self.line_no,
                col,
                format!("expected integer, found `{text}`"),
            )
        })
    }

    fn imm32(&mut self) -> Result<i32, AsmError> {
        let col = self.col();
        let v = self.integer()?;
        i32::try_from(v).map_err(|_| syntax(self.line_no, col, "immediate does not fit in 32 bits"))
    }

    fn operand(&mut self) -> Result<Operand, AsmError> {
        self.skip_ws();
        if self.looks_like_register() {
            Ok(Operand::Reg(self.register()?))
        } else {
            Ok(Operand::Imm(self.imm32()?))
        }
    }

    fn looks_like_register(&self) -> bool {
        let rest = self.rest();
        rest.starts_with('r') && rest[1..].chars().next().is_some_and(|c| c.is_ascii_digit())
    }

    /// `[rN]`, `[rN+K]` or `[rN-K]`.
    fn mem_operand(&mut self) -> Result<(Reg, i16), AsmError> {
        self.eat('[')?;
        let base = self.register()?;
        self.skip_ws();
        let offset = if self.rest().starts_with([']']) {
            0
        } else {
            let col = self.col();
            let v = self.integer()?;
            i16::try_from(v)
                .map_err(|_| syntax(self.line_no, col, "offset does not fit in 16 bits"))?
        };
        self.eat(']')?;
        Ok((base, offset))
    }

    fn expect_end(&mut self) -> Result<(), AsmError> {
        self.skip_ws();
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(syntax(
                self.line_no,
                self.col(),
                format!("trailing input `{}`", self.rest()),
            ))
        }
    }
}

fn parse_int(text: &str) -> Option<i64> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, text.strip_prefix('+').unwrap_or(text)),
    };
    let value = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

fn alu_op(mnemonic: &str) -> Option<AluOp> {
    Some(match mnemonic {
        "mov" => AluOp::Mov,
        "add" => AluOp::Add,
        "sub" => AluOp::Sub,
        "mul" => AluOp::Mul,
        "div" => AluOp::Div,
        "mod" => AluOp::Mod,
        "and" => AluOp::And,
        "or" => AluOp::Or,
        "xor" => AluOp::Xor,
        "lsh" => AluOp::Lsh,
        "rsh" => AluOp::Rsh,
        _ => return None,
    })
}

fn jump_cond(mnemonic: &str) -> Option<JumpCond> {
    Some(match mnemonic {
        "jeq" => JumpCond::Eq,
        "jne" => JumpCond::Ne,
        "jlt" => JumpCond::Lt,
        "jle" => JumpCond::Le,
        "jgt" => JumpCond::Gt,
        "jge" => JumpCond::Ge,
        "jslt" => JumpCond::SLt,
        "jsle" => JumpCond::SLe,
        "jsgt" => JumpCond::SGt,
        "jsge" => JumpCond::SGe,
        _ => return None,
    })
}

fn width_suffix(s: &str) -> Option<Width> {
    Some(match s {
        "b" => Width::B,
        "h" => Width::H,
        "w" => Width::W,
        "dw" => Width::DW,
        _ => return None,
    })
}

/// Assemble source text into a program named `name`.
pub fn assemble_named(name: impl Into<String>, source: &str) -> Result<Program, AsmError> {
    let table = helper_table();
    let mut labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut parsed: Vec<ParsedLine> = Vec::new();
    let mut imports: Vec<(String, u32)> = Vec::new();

    for (idx, raw_line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let without_comment = raw_line.split(';').next().unwrap_or("");
        let mut cur = Cursor::new(without_comment, line_no);
        cur.skip_ws();
        if cur.rest().is_empty() {
            continue;
        }

        // Leading `name:` label definitions, possibly followed by an
        // instruction on the same line.
        loop {
            let mark = cur.pos;
            if let Ok(word) = cur.word() {
                cur.skip_ws();
                if cur.rest().starts_with(':') && !word.starts_with('#') {
                    cur.pos += 1;
                    if labels.insert(word.to_string(), parsed.len()).is_some() {
                        return Err(AsmError::DuplicateLabel {
                            line: line_no,
                            label: word.to_string(),
                        });
                    }
                    cur.skip_ws();
                    if cur.rest().is_empty() {
                        break;
                    }
                    continue;
                }
            }
            cur.pos = mark;
            break;
        }
        cur.skip_ws();
        if cur.rest().is_empty() {
            continue;
        }

        let mnemonic_col = cur.col();
        let mnemonic = cur.word()?;
        let (insn, jump) =
            parse_instruction(&mut cur, mnemonic, mnemonic_col, &mut imports, table)?;
        cur.expect_end()?;
        parsed.push(ParsedLine {
            line_no,
            insn,
            jump,
        });
    }

    let mut instructions = Vec::with_capacity(parsed.len());
    for (index, line) in parsed.iter().enumerate() {
        let insn = match &line.jump {
            PendingJump::None => line.insn,
            PendingJump::Label(label) => {
                let target = *labels.get(label).ok_or_else(|| AsmError::UndefinedLabel {
                    line: line.line_no,
                    label: label.clone(),
                })?;
                let disp = target as i64 - index as i64 - 1;
                let offset =
                    i16::try_from(disp).map_err(|_| AsmError::JumpTooFar { line: line.line_no })?;
                match line.insn {
                    Instruction::Jump { cond, .. } => Instruction::Jump { cond, offset },
                    _ => unreachable!("only jumps carry labels"),
                }
            }
        };
        instructions.push(insn);
    }

    Ok(Program::new(name, instructions, imports)?)
}

/// Assemble with a default program name.
pub fn assemble(source: &str) -> Result<Program, AsmError> {
    assemble_named("asm", source)
}

fn parse_instruction(
    cur: &mut Cursor<'_>,
    mnemonic: &str,
    mnemonic_col: usize,
    imports: &mut Vec<(String, u32)>,
    table: &crate::syskernel::HelperTable,
) -> Result<(Instruction, PendingJump), AsmError> {
    let line = cur.line_no;

    if let Some(op) = alu_op(mnemonic) {
        let dst = cur.register()?;
        cur.eat(',')?;
        let src = cur.operand()?;
        if dst.is_frame_pointer() {
            return Err(syntax(
                line,
                mnemonic_col,
                "write to read-only frame pointer r10",
            ));
        }
        return Ok((Instruction::Alu { op, dst, src }, PendingJump::None));
    }

    if let Some(width) = mnemonic.strip_prefix("ldx").and_then(width_suffix) {
        let dst = cur.register()?;
        cur.eat(',')?;
        let (base, offset) = cur.mem_operand()?;
        if dst.is_frame_pointer() {
            return Err(syntax(
                line,
                mnemonic_col,
                "write to read-only frame pointer r10",
            ));
        }
        return Ok((
            Instruction::Load {
                width,
                dst,
                base,
                offset,
            },
            PendingJump::None,
        ));
    }

    if let Some(width) = mnemonic.strip_prefix("stx").and_then(width_suffix) {
        let (base, offset) = cur.mem_operand()?;
        cur.eat(',')?;
        let value = Operand::Reg(cur.register()?);
        return Ok((
            Instruction::Store {
                width,
                base,
                offset,
                value,
            },
            PendingJump::None,
        ));
    }

    if let Some(width) = mnemonic.strip_prefix("st").and_then(width_suffix) {
        let (base, offset) = cur.mem_operand()?;
        cur.eat(',')?;
        let value = Operand::Imm(cur.imm32()?);
        return Ok((
            Instruction::Store {
                width,
                base,
                offset,
                value,
            },
            PendingJump::None,
        ));
    }

    match mnemonic {
        "ja" | "jmp" => {
            let label = cur.word()?.to_string();
            Ok((
                Instruction::Jump {
                    cond: None,
                    offset: 0,
                },
                PendingJump::Label(label),
            ))
        }
        "call" => {
            cur.skip_ws();
            let col = cur.col();
            let word = cur.word()?;
            let (name, id) = if let Some(num) = word.strip_prefix('#') {
                let id = num
                    .parse::<u32>()
                    .map_err(|_| syntax(line, col, format!("bad helper id `{word}`")))?;
                let name = table
                    .by_id(id)
                    .map(|h| h.name.to_string())
                    .unwrap_or_else(|| format!("#{id}"));
                (name, id)
            } else {
                let helper = table.by_name(word).ok_or_else(|| AsmError::UnknownHelper {
                    line,
                    name: word.to_string(),
                })?;
                (helper.name.to_string(), helper.id)
            };
            if !imports.iter().any(|(_, existing)| *existing == id) {
                imports.push((name, id));
            }
            Ok((Instruction::Call { helper: id }, PendingJump::None))
        }
        "exit" => Ok((Instruction::Exit, PendingJump::None)),
        _ => {
            if let Some(cond) = jump_cond(mnemonic) {
                let lhs = cur.register()?;
                cur.eat(',')?;
                let rhs = cur.operand()?;
                cur.eat(',')?;
                let label = cur.word()?.to_string();
                Ok((
                    Instruction::Jump {
                        cond: Some((cond, lhs, rhs)),
                        offset: 0,
                    },
                    PendingJump::Label(label),
                ))
            } else {
                Err(syntax(
                    line,
                    mnemonic_col,
                    format!("unknown mnemonic `{mnemonic}`"),
                ))
            }
        }
    }
}

/// Render a program back to canonical assembly text. Jump targets get
/// synthetic `L<n>` labels in address order, so
/// `assemble(disassemble(p))` reproduces `p` instruction for instruction.
pub fn disassemble(program: &Program) -> String {
    let table = helper_table();
    let mut targets: Vec<usize> = program
        .instructions()
        .iter()
        .enumerate()
        .filter_map(|(index, insn)| match insn {
            Instruction::Jump { offset, .. } => {
                Some((index as i64 + 1 + i64::from(*offset)) as usize)
            }
            _ => None,
        })
        .collect();
    targets.sort_unstable();
    targets.dedup();
    let label_of = |target: usize| -> String {
        let n = targets
            .binary_search(&target)
            .expect("jump target collected");
        format!("L{n}")
    };

    let mut out = String::new();
    for (index, insn) in program.instructions().iter().enumerate() {
        if targets.binary_search(&index).is_ok() {
            let _ = writeln!(out, "{}:", label_of(index));
        }
        let _ = match insn {
            Instruction::Alu { op, dst, src } => match src {
                Operand::Reg(s) => writeln!(out, "    {} {dst}, {s}", op.mnemonic()),
                Operand::Imm(imm) => writeln!(out, "    {} {dst}, {imm}", op.mnemonic()),
            },
            Instruction::Load {
                width,
                dst,
                base,
                offset,
            } => {
                writeln!(
                    out,
                    "    ldx{} {dst}, [{base}{}]",
                    width.suffix(),
                    fmt_offset(*offset)
                )
            }
            Instruction::Store {
                width,
                base,
                offset,
                value,
            } => match value {
                Operand::Reg(s) => {
                    writeln!(
                        out,
                        "    stx{} [{base}{}], {s}",
                        width.suffix(),
                        fmt_offset(*offset)
                    )
                }
                Operand::Imm(imm) => {
                    writeln!(
                        out,
                        "    st{} [{base}{}], {imm}",
                        width.suffix(),
                        fmt_offset(*offset)
                    )
                }
            },
            Instruction::Jump { cond: None, offset } => {
                writeln!(
                    out,
                    "    ja {}",
                    label_of((index as i64 + 1 + i64::from(*offset)) as usize)
                )
            }
            Instruction::Jump {
                cond: Some((cond, lhs, rhs)),
                offset,
            } => {
                let target = label_of((index as i64 + 1 + i64::from(*offset)) as usize);
                match rhs {
                    Operand::Reg(s) => {
                        writeln!(out, "    {} {lhs}, {s}, {target}", cond.mnemonic())
                    }
                    Operand::Imm(imm) => {
                        writeln!(out, "    {} {lhs}, {imm}, {target}", cond.mnemonic())
                    }
                }
            }
            Instruction::Call { helper } => match table.by_id(*helper) {
                Some(h) => writeln!(out, "    call {}", h.name),
                None => writeln!(out, "    call #{helper}"),
            },
            Instruction::Exit => writeln!(out, "    exit"),
        };
    }
    out
}

fn fmt_offset(offset: i16) -> String {
    match offset {
        0 => String::new(),
        o if o > 0 => format!("+{o}"),
        o => format!("{o}"),
    }
}
