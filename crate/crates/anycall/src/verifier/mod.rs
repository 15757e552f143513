//! Static analyzer: accepts or rejects a program before execution by
//! path-sensitive abstract interpretation.
//!
//! Accepted programs are memory-safe and terminating:
//!
//! * R1 — no read of an uninitialized register or stack byte;
//! * R2 — loads and stores only through the frame pointer (in-frame,
//!   naturally aligned) or a live region handle within bounds;
//! * R3 — a `map` result must pass a null check before use;
//! * R4 — user addresses are never dereferenced directly;
//! * R5 — no access through a handle whose region was unmapped;
//! * R6 — every exit path has unmapped all of its regions;
//! * R7 — helper calls match the declared argument contracts (including
//!   constant `map` sizes and provably nonzero divisors);
//! * R8 — bounded termination: back-edges only with statically decided
//!   conditions, identical-state cycles rejected, exploration budgets.
//!
//! Exploration memoizes exact states per instruction: a state already
//! fully explored is pruned, a state revisited while still on the current
//! path is a provable runtime loop.

mod state;

pub use state::{width_range, AbstractValue, Interval, StackRead, StackState};

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;

use crate::isa::{disassemble, AluOp, Instruction, JumpCond, Operand, Program, Reg, STACK_SIZE};
use crate::syskernel::{helper_table, ArgSpec, RetSpec};

/// Exploration budgets. The defaults comfortably cover ordinary
/// aggregation programs while rejecting degenerate blowups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    /// Abstractly executed instructions across all paths.
    pub max_insns: u64,
    /// Peak number of pending (unexplored) branch states.
    pub max_states: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_insns: 100_000,
            max_states: 10_000,
        }
    }
}

/// Violated rule identifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub insn: usize,
    pub rule: Rule,
    pub message: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VerifyStats {
    pub explored_insns: u64,
    pub peak_pending_states: u64,
}

/// Analysis outcome: accepted iff no diagnostics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub accepted: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub stats: VerifyStats,
}

const MAX_DIAGNOSTICS: usize = 32;

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    regs: [AbstractValue; 11],
    stack: StackState,
    live: BTreeSet<u32>,
}

impl State {
    fn entry() -> Self {
        let mut regs = [AbstractValue::Uninit; 11];
        // r1 carries the invocation argument: a user-space address into
        // the arena (or a plain scalar, which it subsumes).
        regs[1] = AbstractValue::UserAddr;
        regs[10] = AbstractValue::StackPtr {
            off: Interval::singleton(0),
        };
        State {
            regs,
            stack: StackState::default(),
            live: BTreeSet::new(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct Node {
    pc: usize,
    state: State,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Color {
    Gray,
    Black,
}

struct Pending {
    pc: usize,
    state: State,
    path_mark: usize,
}

enum Step {
    Next(usize),
    Branch {
        follow: usize,
        other: usize,
        other_state: Box<State>,
    },
    Exit,
    Fault(Rule, String),
}

struct Explorer<'p> {
    program: &'p Program,
    limits: Limits,
    colors: HashMap<Node, Color>,
    pending: Vec<Pending>,
    path: Vec<Node>,
    diagnostics: Vec<Diagnostic>,
    explored: u64,
    peak_pending: u64,
    next_region: u32,
    aborted: bool,
}

/// Verify a program under the given budgets. Never panics on program
/// content; all failures surface as diagnostics.
pub fn verify(program: &Program, limits: &Limits) -> Verdict {
    let mut explorer = Explorer {
        program,
        limits: *limits,
        colors: HashMap::new(),
        pending: Vec::new(),
        path: Vec::new(),
        diagnostics: Vec::new(),
        explored: 0,
        peak_pending: 0,
        next_region: 1,
        aborted: false,
    };
    if program.is_empty() {
        explorer.diag(0, Rule::R8, "empty program has no exit".to_string());
    } else {
        explorer.run();
    }
    Verdict {
        accepted: explorer.diagnostics.is_empty(),
        diagnostics: explorer.diagnostics,
        stats: VerifyStats {
            explored_insns: explorer.explored,
            peak_pending_states: explorer.peak_pending,
        },
    }
}

/// Render a verdict as a deterministic human-readable report, citing the
/// offending instructions via disassembly.
pub fn explain(program: &Program, verdict: &Verdict) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    if verdict.accepted {
        let _ = writeln!(out, "accepted: `{}`", program.name());
    } else {
        let _ = writeln!(out, "rejected: `{}`", program.name());
    }
    let _ = writeln!(
        out,
        "stats: {} instructions explored, peak {} pending states",
        verdict.stats.explored_insns, verdict.stats.peak_pending_states
    );
    let listing: Vec<String> = disassemble(program)
        .lines()
        .filter(|l| !l.trim_end().ends_with(':'))
        .map(|l| l.trim().to_string())
        .collect();
    let mut diags = verdict.diagnostics.clone();
    diags.sort_by_key(|d| d.insn);
    for d in &diags {
        let source = listing
            .get(d.insn)
            .map(String::as_str)
            .unwrap_or("<out of range>");
        let _ = writeln!(
            out,
            "insn {:>4}  {}  {}: {}",
            d.insn, source, d.rule, d.message
        );
    }
    out
}

impl Explorer<'_> {
    fn diag(&mut self, insn: usize, rule: Rule, message: String) {
        if self.diagnostics.len() < MAX_DIAGNOSTICS
            && !self
                .diagnostics
                .iter()
                .any(|d| d.insn == insn && d.rule == rule && d.message == message)
        {
            self.diagnostics.push(Diagnostic {
                insn,
                rule,
                message,
            });
        }
        if self.diagnostics.len() >= MAX_DIAGNOSTICS {
            self.aborted = true;
        }
    }

    fn run(&mut self) {
        self.pending.push(Pending {
            pc: 0,
            state: State::entry(),
            path_mark: 0,
        });
        self.peak_pending = 1;
        while let Some(next) = self.pending.pop() {
            if self.aborted {
                break;
            }
            // Backtracking past a path entry means its whole subtree has
            // been explored (pending alternates are LIFO).
            while self.path.len() > next.path_mark {
                let node = self.path.pop().expect("non-empty path");
                self.colors.insert(node, Color::Black);
            }
            self.walk(next.pc, next.state);
        }
        // Any leftovers from the final line.
        while let Some(node) = self.path.pop() {
            self.colors.insert(node, Color::Black);
        }
    }

    /// Run one straight-line exploration until the path exits, faults,
    /// is pruned, or the budget trips.
    fn walk(&mut self, mut pc: usize, mut state: State) {
        loop {
            let node = Node {
                pc,
                state: state.clone(),
            };
            match self.colors.get(&node) {
                Some(Color::Black) => return,
                Some(Color::Gray) => {
                    self.diag(
                        pc,
                        Rule::R8,
                        "identical state revisited on this path: the program can loop forever"
                            .to_string(),
                    );
                    return;
                }
                None => {}
            }
            self.colors.insert(node.clone(), Color::Gray);
            self.path.push(node);

            if self.explored >= self.limits.max_insns {
                self.diag(
                    pc,
                    Rule::R8,
                    format!(
                        "explored-instruction budget exhausted ({} instructions)",
                        self.limits.max_insns
                    ),
                );
                self.aborted = true;
                return;
            }
            self.explored += 1;

            match self.exec(pc, &mut state) {
                Step::Next(next_pc) => {
                    if next_pc >= self.program.len() {
                        self.diag(
                            pc,
                            Rule::R8,
                            "control flow falls off the program end".to_string(),
                        );
                        return;
                    }
                    pc = next_pc;
                }
                Step::Branch {
                    follow,
                    other,
                    other_state,
                } => {
                    if follow >= self.program.len() || other >= self.program.len() {
                        self.diag(
                            pc,
                            Rule::R8,
                            "control flow falls off the program end".to_string(),
                        );
                        return;
                    }
                    if self.pending.len() as u64 + 1 > self.limits.max_states {
                        self.diag(
                            pc,
                            Rule::R8,
                            format!(
                                "pending-state budget exhausted ({} states)",
                                self.limits.max_states
                            ),
                        );
                        self.aborted = true;
                        return;
                    }
                    self.pending.push(Pending {
                        pc: other,
                        state: *other_state,
                        path_mark: self.path.len(),
                    });
                    self.peak_pending = self.peak_pending.max(self.pending.len() as u64);
                    pc = follow;
                }
                Step::Exit => return,
                Step::Fault(rule, message) => {
                    self.diag(pc, rule, message);
                    return;
                }
            }
        }
    }

    fn read_reg(&self, state: &State, reg: Reg) -> Result<AbstractValue, (Rule, String)> {
        let v = state.regs[reg.index()];
        if v == AbstractValue::Uninit {
            Err((Rule::R1, format!("read of uninitialized register {reg}")))
        } else {
            Ok(v)
        }
    }

    fn operand_value(&self, state: &State, op: Operand) -> Result<AbstractValue, (Rule, String)> {
        match op {
            Operand::Reg(r) => self.read_reg(state, r),
            Operand::Imm(imm) => Ok(AbstractValue::Scalar(Interval::singleton(i64::from(imm)))),
        }
    }

    fn exec(&mut self, pc: usize, state: &mut State) -> Step {
        let insn = self.program.instructions()[pc];
        let result = match insn {
            Instruction::Alu { op, dst, src } => self.exec_alu(state, op, dst, src),
            Instruction::Load {
                width,
                dst,
                base,
                offset,
            } => self.exec_load(state, width.bytes(), dst, base, offset),
            Instruction::Store {
                width,
                base,
                offset,
                value,
            } => self.exec_store(state, width.bytes(), base, offset, value),
            Instruction::Jump { cond, offset } => return self.exec_jump(pc, state, cond, offset),
            Instruction::Call { helper } => self.exec_call(state, helper),
            Instruction::Exit => return self.exec_exit(state),
        };
        match result {
            Ok(()) => Step::Next(pc + 1),
            Err((rule, message)) => Step::Fault(rule, message),
        }
    }

    fn exec_alu(
        &mut self,
        state: &mut State,
        op: AluOp,
        dst: Reg,
        src: Operand,
    ) -> Result<(), (Rule, String)> {
        use AbstractValue as V;
        let rhs = self.operand_value(state, src)?;
        let value = if op == AluOp::Mov {
            rhs
        } else {
            let lhs = self.read_reg(state, dst)?;
            if matches!(lhs, V::MaybeNullRegion { .. }) || matches!(rhs, V::MaybeNullRegion { .. })
            {
                return Err((
                    Rule::R3,
                    "arithmetic on a maybe-null region handle before its null check".to_string(),
                ));
            }
            match (lhs, rhs, op) {
                (V::Scalar(a), V::Scalar(b), _) => {
                    if matches!(op, AluOp::Div | AluOp::Mod) && b.contains(0) {
                        return Err((Rule::R7, "divisor not provably nonzero".to_string()));
                    }
                    V::Scalar(a.apply(op, b))
                }
                // User-address arithmetic keeps the tag through add/sub
                // with scalars; anything else decays to an opaque scalar.
                (V::UserAddr, V::Scalar(_), AluOp::Add | AluOp::Sub)
                | (V::Scalar(_), V::UserAddr, AluOp::Add) => V::UserAddr,
                (V::UserAddr, V::UserAddr, AluOp::Sub) => V::scalar_top(),
                (V::UserAddr, V::Scalar(b), AluOp::Div | AluOp::Mod) => {
                    if b.contains(0) {
                        return Err((Rule::R7, "divisor not provably nonzero".to_string()));
                    }
                    V::scalar_top()
                }
                (V::UserAddr, V::Scalar(_), _) | (V::Scalar(_), V::UserAddr, _) => V::scalar_top(),
                (V::UserAddr, V::UserAddr, AluOp::Div | AluOp::Mod) => {
                    return Err((Rule::R7, "divisor not provably nonzero".to_string()));
                }
                (V::UserAddr, V::UserAddr, _) => V::scalar_top(),
                (V::StackPtr { off }, V::Scalar(b), AluOp::Add) => V::StackPtr { off: off.add(b) },
                (V::StackPtr { off }, V::Scalar(b), AluOp::Sub) => V::StackPtr { off: off.sub(b) },
                (V::Scalar(b), V::StackPtr { off }, AluOp::Add) => V::StackPtr { off: off.add(b) },
                (V::StackPtr { off: a }, V::StackPtr { off: b }, AluOp::Sub) => V::Scalar(a.sub(b)),
                (V::RegionHandle { id, size, off }, V::Scalar(b), AluOp::Add | AluOp::Sub) => {
                    let off = if op == AluOp::Add {
                        off.add(b)
                    } else {
                        off.sub(b)
                    };
                    if off.lo < 0 || off.hi > size as i64 {
                        return Err((
                            Rule::R2,
                            format!(
                                "pointer arithmetic moves region handle out of bounds \
                                 (offset [{}, {}] of {size}-byte region)",
                                off.lo, off.hi
                            ),
                        ));
                    }
                    V::RegionHandle { id, size, off }
                }
                (V::Scalar(b), V::RegionHandle { id, size, off }, AluOp::Add) => {
                    let off = off.add(b);
                    if off.lo < 0 || off.hi > size as i64 {
                        return Err((
                            Rule::R2,
                            format!(
                                "pointer arithmetic moves region handle out of bounds \
                                 (offset [{}, {}] of {size}-byte region)",
                                off.lo, off.hi
                            ),
                        ));
                    }
                    V::RegionHandle { id, size, off }
                }
                (
                    V::RegionHandle { id: a, off: ao, .. },
                    V::RegionHandle { id: b, off: bo, .. },
                    AluOp::Sub,
                ) if a == b => V::Scalar(ao.sub(bo)),
                (lhs, rhs, op) => {
                    return Err((
                        Rule::R2,
                        format!(
                            "invalid pointer arithmetic: {} {} on {} and {}",
                            op.mnemonic(),
                            "is not defined",
                            lhs.kind_name(),
                            rhs.kind_name()
                        ),
                    ));
                }
            }
        };
        state.regs[dst.index()] = value;
        Ok(())
    }

    /// Classify a memory operand and return the resolved access site.
    fn resolve_access(
        &self,
        state: &State,
        base: Reg,
        offset: i16,
        width: u64,
        is_store: bool,
    ) -> Result<Access, (Rule, String)> {
        use AbstractValue as V;
        let verb = if is_store { "store" } else { "load" };
        match self.read_reg(state, base)? {
            V::StackPtr { off } => {
                let eff = off.add(Interval::singleton(i64::from(offset)));
                if eff.lo < -(STACK_SIZE as i64) || eff.hi + width as i64 > 0 {
                    return Err((
                        Rule::R2,
                        format!(
                            "{verb} outside the {STACK_SIZE}-byte frame \
                             (offset [{}, {}], width {width})",
                            eff.lo, eff.hi
                        ),
                    ));
                }
                match eff.as_singleton() {
                    Some(o) => {
                        if o.rem_euclid(width as i64) != 0 {
                            return Err((
                                Rule::R2,
                                format!("misaligned {width}-byte stack {verb} at frame offset {o}"),
                            ));
                        }
                        Ok(Access::Stack { off: o })
                    }
                    None if width == 1 => Ok(Access::StackRange {
                        lo: eff.lo,
                        hi: eff.hi,
                    }),
                    None => Err((
                        Rule::R2,
                        format!(
                            "{width}-byte stack {verb} at variable offset [{}, {}] \
                             cannot be proven aligned",
                            eff.lo, eff.hi
                        ),
                    )),
                }
            }
            V::RegionHandle { id, size, off } => {
                if !state.live.contains(&id) {
                    return Err((
                        Rule::R5,
                        format!("{verb} through stale handle: region {id} was unmapped"),
                    ));
                }
                let eff = off.add(Interval::singleton(i64::from(offset)));
                if eff.lo < 0 || eff.hi + width as i64 > size as i64 {
                    return Err((
                        Rule::R2,
                        format!(
                            "out-of-bounds: {width}-byte {verb} at offset [{}, {}] \
                             of {size}-byte region",
                            eff.lo, eff.hi
                        ),
                    ));
                }
                match eff.as_singleton() {
                    Some(o) if o.rem_euclid(width as i64) == 0 => Ok(Access::Region),
                    None if width == 1 => Ok(Access::Region),
                    Some(o) => Err((
                        Rule::R2,
                        format!("misaligned {width}-byte region {verb} at offset {o}"),
                    )),
                    None => Err((
                        Rule::R2,
                        format!("{width}-byte region {verb} at variable offset cannot be proven aligned"),
                    )),
                }
            }
            V::MaybeNullRegion { id, .. } => Err((
                Rule::R3,
                format!("region {id} dereferenced before a null check"),
            )),
            V::UserAddr => Err((
                Rule::R4,
                "direct dereference of a user address is not permitted; \
                 map it or use the copy helpers"
                    .to_string(),
            )),
            V::Scalar(_) => Err((
                Rule::R2,
                format!("{verb} through a plain scalar is not permitted"),
            )),
            V::Uninit => unreachable!("read_reg rejects uninitialized"),
        }
    }

    fn exec_load(
        &mut self,
        state: &mut State,
        width: u64,
        dst: Reg,
        base: Reg,
        offset: i16,
    ) -> Result<(), (Rule, String)> {
        let value = match self.resolve_access(state, base, offset, width, false)? {
            Access::Stack { off } => match state.stack.load(off, width) {
                StackRead::Value(v) => v,
                StackRead::UninitByte(at) => {
                    return Err((
                        Rule::R1,
                        format!("read of uninitialized stack byte at frame offset {at}"),
                    ));
                }
            },
            Access::StackRange { lo, hi } => {
                state
                    .stack
                    .check_init_range(lo, (hi - lo + 1) as u64)
                    .map_err(|at| {
                        (
                            Rule::R1,
                            format!("read of uninitialized stack byte at frame offset {at}"),
                        )
                    })?;
                AbstractValue::Scalar(width_range(width))
            }
            Access::Region => AbstractValue::Scalar(width_range(width)),
        };
        state.regs[dst.index()] = value;
        Ok(())
    }

    fn exec_store(
        &mut self,
        state: &mut State,
        width: u64,
        base: Reg,
        offset: i16,
        value: Operand,
    ) -> Result<(), (Rule, String)> {
        let stored = self.operand_value(state, value)?;
        match self.resolve_access(state, base, offset, width, true)? {
            Access::Stack { off } => {
                let exact = match value {
                    Operand::Reg(_) => Some(stored),
                    Operand::Imm(imm) => {
                        Some(AbstractValue::Scalar(Interval::singleton(i64::from(imm))))
                    }
                };
                state.stack.store(off, width, exact);
            }
            Access::StackRange { lo, hi } => state.stack.store_weak(lo, hi, width),
            Access::Region => {}
        }
        Ok(())
    }

    fn exec_jump(
        &mut self,
        pc: usize,
        state: &mut State,
        cond: Option<(JumpCond, Reg, Operand)>,
        offset: i16,
    ) -> Step {
        let target = (pc as i64 + 1 + i64::from(offset)) as usize;
        let fallthrough = pc + 1;
        let Some((cond, lhs_reg, rhs_op)) = cond else {
            if target <= pc {
                return Step::Fault(
                    Rule::R8,
                    "unconditional back-edge: loop bound cannot be established".to_string(),
                );
            }
            return Step::Next(target);
        };

        let lhs = match self.read_reg(state, lhs_reg) {
            Ok(v) => v,
            Err((rule, msg)) => return Step::Fault(rule, msg),
        };
        let rhs = match self.operand_value(state, rhs_op) {
            Ok(v) => v,
            Err((rule, msg)) => return Step::Fault(rule, msg),
        };

        // Null-check recognition: `if rX == 0` / `if rX != 0` on a
        // maybe-null region refines rX on both sides and settles the
        // pin obligation on the null side.
        if let AbstractValue::MaybeNullRegion { id, size } = lhs {
            if matches!(rhs, AbstractValue::Scalar(i) if i.as_singleton() == Some(0))
                && matches!(cond, JumpCond::Eq | JumpCond::Ne)
            {
                let null_state = {
                    let mut s = state.clone();
                    s.regs[lhs_reg.index()] = AbstractValue::Scalar(Interval::singleton(0));
                    s.live.remove(&id);
                    s
                };
                let region_state = {
                    let mut s = state.clone();
                    s.regs[lhs_reg.index()] = AbstractValue::RegionHandle {
                        id,
                        size,
                        off: Interval::singleton(0),
                    };
                    s
                };
                let (taken_state, fall_state) = match cond {
                    JumpCond::Eq => (null_state, region_state),
                    _ => (region_state, null_state),
                };
                if target <= pc {
                    return Step::Fault(
                        Rule::R8,
                        "back-edge guarded by a statically undecidable null check".to_string(),
                    );
                }
                *state = taken_state;
                return Step::Branch {
                    follow: target,
                    other: fallthrough,
                    other_state: Box::new(fall_state),
                };
            }
        }

        let (lhs_int, rhs_int) = (scalar_interval(lhs), scalar_interval(rhs));
        let decision = match (lhs_int, rhs_int) {
            (Some(a), Some(b)) => a.decide(cond, b),
            _ => None,
        };
        match decision {
            Some(true) => Step::Next(target),
            Some(false) => Step::Next(fallthrough),
            None => {
                if target <= pc {
                    // Undecidable back-edge: the tracked interval cannot
                    // bound the loop. Reject the edge and keep exploring
                    // the forward side for further diagnostics.
                    self.diag(
                        pc,
                        Rule::R8,
                        format!(
                            "back-edge with statically undecidable condition `{}`: \
                             only loops with provable bounds are allowed",
                            cond.mnemonic()
                        ),
                    );
                    return Step::Next(fallthrough);
                }
                let mut taken_state = state.clone();
                let mut fall_state = state.clone();
                if let (Some(a), Some(b)) = (lhs_int, rhs_int) {
                    refine_jump(&mut taken_state, lhs_reg, rhs_op, cond, a, b, true);
                    refine_jump(&mut fall_state, lhs_reg, rhs_op, cond, a, b, false);
                }
                *state = taken_state;
                Step::Branch {
                    follow: target,
                    other: fallthrough,
                    other_state: Box::new(fall_state),
                }
            }
        }
    }

    fn exec_call(&mut self, state: &mut State, helper: u32) -> Result<(), (Rule, String)> {
        use AbstractValue as V;
        let Some(desc) = helper_table().by_id(helper) else {
            return Err((Rule::R7, format!("call to unknown helper id {helper}")));
        };

        let mut map_size: u64 = 0;
        let mut unmap_id: Option<u32> = None;
        let mut stack_init: Option<(i64, u64)> = None;

        for (i, spec) in desc.args.iter().enumerate() {
            let reg = Reg::new(1 + i as u8).expect("helpers take at most five arguments");
            let value = self
                .read_reg(state, reg)
                .map_err(|(r, m)| (r, format!("helper `{}` argument {}: {m}", desc.name, i + 1)))?;
            let mismatch = |expected: &str| {
                (
                    Rule::R7,
                    format!(
                        "helper `{}` argument {} must be {expected}, found {}",
                        desc.name,
                        i + 1,
                        value.kind_name()
                    ),
                )
            };
            match *spec {
                ArgSpec::Scalar | ArgSpec::UserAddr => match value {
                    V::Scalar(_) | V::UserAddr => {}
                    _ => {
                        let expected = if matches!(spec, ArgSpec::Scalar) {
                            "a scalar"
                        } else {
                            "a user address"
                        };
                        return Err(mismatch(expected));
                    }
                },
                ArgSpec::ConstSize { min } => match value {
                    V::Scalar(interval) => match interval.as_singleton() {
                        Some(size) if size >= 0 && size as u64 >= min => {
                            if desc.ret == RetSpec::MaybeNullRegion {
                                map_size = size as u64;
                            }
                        }
                        _ => {
                            return Err((
                                Rule::R7,
                                format!(
                                    "helper `{}` argument {} must be a compile-time-known \
                                     size of at least {min}",
                                    desc.name,
                                    i + 1
                                ),
                            ));
                        }
                    },
                    _ => return Err(mismatch("a compile-time-known size")),
                },
                ArgSpec::Region { len_arg }
                | ArgSpec::MemDst { len_arg }
                | ArgSpec::MemSrc { len_arg }
                    if matches!(value, V::RegionHandle { .. }) =>
                {
                    let V::RegionHandle { id, size, off } = value else {
                        unreachable!()
                    };
                    if !state.live.contains(&id) {
                        return Err((
                            Rule::R5,
                            format!(
                                "helper `{}` argument {}: region {id} was already unmapped",
                                desc.name,
                                i + 1
                            ),
                        ));
                    }
                    let len = self.arg_len(state, desc.name, len_arg)?;
                    if off.lo < 0
                        || off
                            .hi
                            .checked_add(len.hi)
                            .is_none_or(|end| end > size as i64)
                    {
                        return Err((
                            Rule::R2,
                            format!(
                                "helper `{}` argument {}: access of up to {} bytes at offset \
                                 [{}, {}] exceeds {size}-byte region",
                                desc.name,
                                i + 1,
                                len.hi,
                                off.lo,
                                off.hi
                            ),
                        ));
                    }
                }
                ArgSpec::MemDst { len_arg } | ArgSpec::MemSrc { len_arg } => match value {
                    V::StackPtr { off } => {
                        let len = self.arg_len(state, desc.name, len_arg)?;
                        let end = off.hi.checked_add(len.hi).filter(|e| *e <= 0);
                        if off.lo < -(STACK_SIZE as i64) || end.is_none() {
                            return Err((
                                Rule::R2,
                                format!(
                                    "helper `{}` argument {}: stack window exceeds the frame",
                                    desc.name,
                                    i + 1
                                ),
                            ));
                        }
                        if matches!(spec, ArgSpec::MemSrc { .. }) {
                            if let Some(o) = off.as_singleton() {
                                state
                                    .stack
                                    .check_init_range(o, len.hi as u64)
                                    .map_err(|at| {
                                        (
                                            Rule::R1,
                                            format!(
                                            "helper `{}` argument {}: uninitialized stack byte \
                                             at frame offset {at}",
                                            desc.name,
                                            i + 1
                                        ),
                                        )
                                    })?;
                            } else {
                                state
                                    .stack
                                    .check_init_range(
                                        off.lo,
                                        (off.hi - off.lo) as u64 + len.hi as u64,
                                    )
                                    .map_err(|at| {
                                        (
                                            Rule::R1,
                                            format!(
                                                "helper `{}` argument {}: uninitialized stack byte \
                                                 at frame offset {at}",
                                                desc.name,
                                                i + 1
                                            ),
                                        )
                                    })?;
                            }
                        } else if let Some(o) = off.as_singleton() {
                            stack_init = Some((o, len.hi as u64));
                        }
                    }
                    V::MaybeNullRegion { id, .. } => {
                        return Err((
                            Rule::R3,
                            format!(
                                "helper `{}` argument {}: region {id} needs a null check first",
                                desc.name,
                                i + 1
                            ),
                        ));
                    }
                    _ => return Err(mismatch("a stack pointer or live region handle")),
                },
                ArgSpec::Region { .. } => match value {
                    V::MaybeNullRegion { id, .. } => {
                        return Err((
                            Rule::R3,
                            format!(
                                "helper `{}` argument {}: region {id} needs a null check first",
                                desc.name,
                                i + 1
                            ),
                        ));
                    }
                    _ => return Err(mismatch("a live region handle")),
                },
                ArgSpec::RegionHandle => match value {
                    V::RegionHandle { id, .. } => {
                        if !state.live.contains(&id) {
                            return Err((
                                Rule::R5,
                                format!("unmap of region {id}, which was already unmapped"),
                            ));
                        }
                        unmap_id = Some(id);
                    }
                    V::MaybeNullRegion { id, .. } => {
                        return Err((
                            Rule::R7,
                            format!("unmap of region {id} before its null check"),
                        ));
                    }
                    _ => return Err(mismatch("a live region handle")),
                },
            }
        }

        // Effects.
        if let Some((off, len)) = stack_init {
            state.stack.mark_init_range(off, len);
        }
        if let Some(id) = unmap_id {
            state.live.remove(&id);
        }
        for clobbered in 1..=5 {
            state.regs[clobbered] = V::Uninit;
        }
        state.regs[0] = match desc.ret {
            RetSpec::Scalar => V::scalar_top(),
            RetSpec::FixedZero => V::Scalar(Interval::singleton(0)),
            RetSpec::MaybeNullRegion => {
                let id = self.next_region;
                self.next_region += 1;
                state.live.insert(id);
                V::MaybeNullRegion { id, size: map_size }
            }
        };
        Ok(())
    }

    fn arg_len(
        &self,
        state: &State,
        helper: &str,
        len_arg: usize,
    ) -> Result<Interval, (Rule, String)> {
        let reg = Reg::new(1 + len_arg as u8).expect("helpers take at most five arguments");
        match self.read_reg(state, reg).map_err(|(r, m)| {
            (
                r,
                format!("helper `{helper}` length argument {}: {m}", len_arg + 1),
            )
        })? {
            AbstractValue::Scalar(interval) => {
                if interval.lo < 0 {
                    Err((
                        Rule::R7,
                        format!(
                            "helper `{helper}` length argument {} may be negative \
                             (range [{}, {}])",
                            len_arg + 1,
                            interval.lo,
                            interval.hi
                        ),
                    ))
                } else {
                    Ok(interval)
                }
            }
            other => Err((
                Rule::R7,
                format!(
                    "helper `{helper}` length argument {} must be a scalar, found {}",
                    len_arg + 1,
                    other.kind_name()
                ),
            )),
        }
    }

    fn exec_exit(&mut self, state: &State) -> Step {
        if state.regs[0] == AbstractValue::Uninit {
            return Step::Fault(
                Rule::R1,
                "r0 (the return value) is uninitialized at exit".to_string(),
            );
        }
        if !state.live.is_empty() {
            let ids: Vec<String> = state.live.iter().map(u32::to_string).collect();
            return Step::Fault(
                Rule::R6,
                format!("exit with live mapped region(s): {}", ids.join(", ")),
            );
        }
        Step::Exit
    }
}

enum Access {
    Stack { off: i64 },
    StackRange { lo: i64, hi: i64 },
    Region,
}

fn scalar_interval(v: AbstractValue) -> Option<Interval> {
    match v {
        AbstractValue::Scalar(i) => Some(i),
        _ => None,
    }
}

/// Narrow the compared registers on one side of a conditional branch.
fn refine_jump(
    state: &mut State,
    lhs_reg: Reg,
    rhs_op: Operand,
    cond: JumpCond,
    lhs: Interval,
    rhs: Interval,
    taken: bool,
) {
    let (lhs_cond, rhs_cond) = if taken {
        (cond, flip(cond))
    } else {
        (negate(cond), flip(negate(cond)))
    };
    if let Some(refined) = lhs.refine(lhs_cond, rhs) {
        state.regs[lhs_reg.index()] = AbstractValue::Scalar(refined);
    }
    if let Operand::Reg(rhs_reg) = rhs_op {
        if let Some(refined) = rhs.refine(rhs_cond, lhs) {
            if matches!(state.regs[rhs_reg.index()], AbstractValue::Scalar(_)) {
                state.regs[rhs_reg.index()] = AbstractValue::Scalar(refined);
            }
        }
    }
}

fn negate(cond: JumpCond) -> JumpCond {
    match cond {
        JumpCond::Eq => JumpCond::Ne,
        JumpCond::Ne => JumpCond::Eq,
        JumpCond::Lt => JumpCond::Ge,
        JumpCond::Le => JumpCond::Gt,
        JumpCond::Gt => JumpCond::Le,
        JumpCond::Ge => JumpCond::Lt,
        JumpCond::SLt => JumpCond::SGe,
        JumpCond::SLe => JumpCond::SGt,
        JumpCond::SGt => JumpCond::SLe,
        JumpCond::SGe => JumpCond::SLt,
    }
}

/// `a cond b` seen from `b`'s side.
fn flip(cond: JumpCond) -> JumpCond {
    match cond {
        JumpCond::Eq => JumpCond::Eq,
        JumpCond::Ne => JumpCond::Ne,
        JumpCond::Lt => JumpCond::Gt,
        JumpCond::Le => JumpCond::Ge,
        JumpCond::Gt => JumpCond::Lt,
        JumpCond::Ge => JumpCond::Le,
        JumpCond::SLt => JumpCond::SGt,
        JumpCond::SLe => JumpCond::SGe,
        JumpCond::SGt => JumpCond::SLt,
        JumpCond::SGe => JumpCond::SLe,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::assemble;

    fn check(src: &str) -> Verdict {
        verify(&assemble(src).unwrap(), &Limits::default())
    }

    fn first_rule(v: &Verdict) -> Option<Rule> {
        v.diagnostics.first().map(|d| d.rule)
    }

    /// The valid map / null-check / in-bounds store / unmap skeleton.
    const MAP_SKELETON: &str = "
        mov r2, 4
        call map
        jne r0, 0, ok
        mov r0, -1
        exit
    ok:
        mov r6, r0
        stw [r6], 4
        mov r1, r6
        call unmap
        mov r0, 0
        exit
    ";

    #[test]
    fn map_skeleton_accepted() {
        let v = check(MAP_SKELETON);
        assert!(v.accepted, "{:?}", v.diagnostics);
    }

    #[test]
    fn oversized_store_rejected_r2() {
        let v = check(
            "
            mov r2, 4
            call map
            jne r0, 0, ok
            mov r0, -1
            exit
        ok:
            mov r6, r0
            stdw [r6], 4
            mov r1, r6
            call unmap
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R2));
        assert!(v.diagnostics[0].message.contains("out-of-bounds"));
    }

    #[test]
    fn use_after_unmap_rejected_r5() {
        let v = check(
            "
            mov r2, 4
            call map
            jne r0, 0, ok
            mov r0, -1
            exit
        ok:
            mov r6, r0
            stw [r6], 4
            mov r1, r6
            call unmap
            stw [r6], 4
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R5));
    }

    #[test]
    fn missing_null_check_rejected_r3() {
        let v = check(
            "
            mov r2, 4
            call map
            mov r6, r0
            stw [r6], 4
            mov r1, r6
            call unmap
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R3));
    }

    #[test]
    fn live_region_at_exit_rejected_r6() {
        let v = check(
            "
            mov r2, 4
            call map
            jne r0, 0, ok
            mov r0, -1
            exit
        ok:
            mov r6, r0
            stw [r6], 4
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R6));
    }

    #[test]
    fn uninitialized_register_read_rejected_r1() {
        let v = check("mov r0, r3\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R1));
        let v = check("exit");
        assert_eq!(first_rule(&v), Some(Rule::R1));
    }

    #[test]
    fn uninitialized_stack_read_rejected_r1() {
        let v = check("ldxdw r0, [r10-8]\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R1));
    }

    #[test]
    fn user_address_dereference_rejected_r4() {
        let v = check("ldxw r0, [r1]\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R4));
    }

    #[test]
    fn scalar_dereference_rejected_r2() {
        let v = check("mov r2, 1000\nldxw r0, [r2]\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R2));
    }

    #[test]
    fn out_of_frame_store_rejected_r2() {
        let v = check("stdw [r10-520], 1\nmov r0, 0\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R2));
        let v = check("stdw [r10+0], 1\nmov r0, 0\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R2));
    }

    #[test]
    fn misaligned_stack_access_rejected_r2() {
        let v = check("stdw [r10-12], 1\nmov r0, 0\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R2));
        let v = check("stw [r10-12], 1\nmov r0, 0\nexit");
        assert!(v.accepted);
    }

    #[test]
    fn division_by_possibly_zero_rejected_r7() {
        let v = check("mov r0, 10\nmov r2, 0\ndiv r0, r2\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R7));
        // Guarded division verifies.
        let v = check(
            "
            mov r0, 10
            mov r2, 3
            div r0, r2
            exit
        ",
        );
        assert!(v.accepted);
    }

    #[test]
    fn map_size_must_be_constant_r7() {
        let v = check(
            "
            mov r6, r1
            call getpid
            mov r2, r0
            mov r1, r6
            call map
            jne r0, 0, ok
            mov r0, 0
            exit
        ok:
            mov r1, r0
            call unmap
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert!(v
            .diagnostics
            .iter()
            .any(|d| d.rule == Rule::R7 && d.message.contains("compile-time-known")));
    }

    #[test]
    fn unknown_helper_rejected_r7() {
        let v = check("call #99\nexit");
        assert_eq!(first_rule(&v), Some(Rule::R7));
    }

    #[test]
    fn empty_program_rejected() {
        let p = Program::new("empty", vec![], vec![]).unwrap();
        let v = verify(&p, &Limits::default());
        assert_eq!(first_rule(&v), Some(Rule::R8));
        assert!(v.diagnostics[0].message.contains("empty"));
    }

    #[test]
    fn zero_size_copy_is_legal_but_zero_size_map_is_not() {
        let v = check(
            "
            mov r3, r1
            mov r1, r10
            add r1, -8
            mov r2, 0
            call copy_from_user
            exit
        ",
        );
        assert!(v.accepted, "{:?}", v.diagnostics);
        let v = check(
            "
            mov r2, 0
            call map
            jne r0, 0, ok
            mov r0, -1
            exit
        ok:
            mov r1, r0
            call unmap
            mov r0, 0
            exit
        ",
        );
        assert_eq!(first_rule(&v), Some(Rule::R7));
    }

    #[test]
    fn bounded_loop_accepted() {
        let v = check(
            "
            mov r6, 0
        head:
            add r6, 1
            jlt r6, 100, head
            mov r0, r6
            exit
        ",
        );
        assert!(v.accepted, "{:?}", v.diagnostics);
        // One abstract execution per iteration.
        assert!(v.stats.explored_insns >= 200);
    }

    #[test]
    fn unconditional_back_edge_rejected_r8() {
        let v = check("mov r0, 0\nhead:\nadd r0, 1\nja head\nexit");
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R8));
    }

    #[test]
    fn undecidable_back_edge_rejected_r8() {
        // Loop until getpid returns zero: no provable bound.
        let v = check(
            "
        head:
            call getpid
            jne r0, 0, head
            exit
        ",
        );
        assert!(!v.accepted);
        assert!(v
            .diagnostics
            .iter()
            .any(|d| d.rule == Rule::R8 && d.message.contains("undecidable")));
    }

    #[test]
    fn stuck_counter_loop_rejected_r8() {
        // i never advances: identical state revisited.
        let v = check(
            "
            mov r6, 0
        head:
            add r6, 0
            jlt r6, 10, head
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert!(v
            .diagnostics
            .iter()
            .any(|d| d.rule == Rule::R8 && d.message.contains("loop forever")));
    }

    #[test]
    fn insn_budget_exhaustion_reported() {
        let small = Limits {
            max_insns: 50,
            max_states: 10_000,
        };
        let p = assemble(
            "
            mov r6, 0
        head:
            add r6, 1
            jlt r6, 1000, head
            mov r0, r6
            exit
        ",
        )
        .unwrap();
        let v = verify(&p, &small);
        assert!(!v.accepted);
        assert!(v
            .diagnostics
            .iter()
            .any(|d| d.rule == Rule::R8 && d.message.contains("budget")));
        assert_eq!(v.stats.explored_insns, 50);
    }

    #[test]
    fn verdict_is_deterministic() {
        let p = assemble(MAP_SKELETON).unwrap();
        let a = verify(&p, &Limits::default());
        let b = verify(&p, &Limits::default());
        assert_eq!(a, b);
    }

    #[test]
    fn monotone_budgets() {
        let p = assemble(
            "
            mov r6, 0
        head:
            add r6, 1
            jlt r6, 64, head
            mov r0, r6
            exit
        ",
        )
        .unwrap();
        let tight = Limits {
            max_insns: 500,
            max_states: 16,
        };
        assert!(verify(&p, &tight).accepted);
        for (insns, states) in [(1_000, 16), (500, 64), (100_000, 10_000)] {
            let looser = Limits {
                max_insns: insns,
                max_states: states,
            };
            assert!(verify(&p, &looser).accepted, "limits {insns}/{states}");
        }
    }

    #[test]
    fn copy_from_user_initializes_stack() {
        let v = check(
            "
            mov r1, r10
            add r1, -16
            mov r2, 8
            mov r3, r1
            mov r1, r10
            add r1, -16
            call copy_from_user
            ldxdw r0, [r10-16]
            exit
        ",
        );
        // r3 must be a user address; a stack pointer is rejected.
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R7));

        let v = check(
            "
            mov r3, r1
            mov r1, r10
            add r1, -16
            mov r2, 8
            call copy_from_user
            ldxdw r0, [r10-16]
            exit
        ",
        );
        assert!(v.accepted, "{:?}", v.diagnostics);
    }

    #[test]
    fn copy_to_user_requires_initialized_source() {
        let v = check(
            "
            mov r3, r10
            add r3, -8
            mov r2, 8
            call copy_to_user
            mov r0, 0
            exit
        ",
        );
        assert!(!v.accepted);
        assert_eq!(first_rule(&v), Some(Rule::R1));
    }

    #[test]
    fn spilled_handle_survives_stack_roundtrip() {
        let v = check(
            "
            mov r2, 16
            call map
            jeq r0, 0, out
            stxdw [r10-8], r0
            ldxdw r1, [r10-8]
            stw [r1+12], 7
            call unmap
        out:
            mov r0, 0
            exit
        ",
        );
        assert!(v.accepted, "{:?}", v.diagnostics);
    }

    #[test]
    fn explain_lists_diagnostics_in_instruction_order() {
        // Two faulting paths at different instructions; the later one is
        // discovered first (taken side explored first).
        let p = assemble(
            "
            mov r7, r1
            call getpid
            jeq r0, 0, second
            ldxw r0, [r7]
            exit
        second:
            ldxdw r0, [r10-8]
            exit
        ",
        )
        .unwrap();
        let v = verify(&p, &Limits::default());
        assert!(!v.accepted);
        assert_eq!(v.diagnostics.len(), 2);
        let report = explain(&p, &v);
        let r4_site = report.find("insn    3").expect("R4 site listed");
        let r1_site = report.find("insn    5").expect("R1 site listed");
        assert!(r4_site < r1_site, "{report}");
    }

    #[test]
    fn verdict_serializes_to_stable_json() {
        let v = check("mov r0, 0\nexit");
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("\"accepted\":true"));
        let v = check("ldxdw r0, [r10-8]\nexit");
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("\"rule\":\"R1\""));
        assert!(json.contains("\"insn\":0"));
    }
}
