//! Abstract domain for the static analyzer: signed 64-bit intervals,
//! per-register abstract values, and the byte-granular stack map.

use std::collections::BTreeMap;

use crate::isa::{AluOp, JumpCond, STACK_SIZE};

/// A signed interval `[lo, hi]`, `lo <= hi`. The full range is "top":
/// nothing is known about the value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Interval {
    pub lo: i64,
    pub hi: i64,
}

impl Interval {
    pub const TOP: Interval = Interval {
        lo: i64::MIN,
        hi: i64::MAX,
    };

    pub fn singleton(v: i64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn new(lo: i64, hi: i64) -> Self {
        debug_assert!(lo <= hi);
        Interval { lo, hi }
    }

    pub fn as_singleton(self) -> Option<i64> {
        (self.lo == self.hi).then_some(self.lo)
    }

    pub fn contains(self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_top(self) -> bool {
        self == Self::TOP
    }

    fn nonneg(self) -> bool {
        self.lo >= 0
    }

    #[allow(clippy::should_implement_trait)] // saturates to top, unlike `ops::Add`
    pub fn add(self, rhs: Interval) -> Interval {
        match (self.lo.checked_add(rhs.lo), self.hi.checked_add(rhs.hi)) {
            (Some(lo), Some(hi)) => Interval { lo, hi },
            _ => Interval::TOP,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Interval) -> Interval {
        match (self.lo.checked_sub(rhs.hi), self.hi.checked_sub(rhs.lo)) {
            (Some(lo), Some(hi)) => Interval { lo, hi },
            _ => Interval::TOP,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Interval) -> Interval {
        let corners = [
            self.lo.checked_mul(rhs.lo),
            self.lo.checked_mul(rhs.hi),
            self.hi.checked_mul(rhs.lo),
            self.hi.checked_mul(rhs.hi),
        ];
        let mut lo = i64::MAX;
        let mut hi = i64::MIN;
        for c in corners {
            match c {
                Some(v) => {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                None => return Interval::TOP,
            }
        }
        Interval { lo, hi }
    }

    /// Unsigned division; the divisor is known to exclude zero.
    pub fn udiv(self, rhs: Interval) -> Interval {
        if self.nonneg() && rhs.lo >= 1 {
            Interval {
                lo: self.lo / rhs.hi,
                hi: self.hi / rhs.lo,
            }
        } else if let (Some(a), Some(b)) = (self.as_singleton(), rhs.as_singleton()) {
            Interval::singleton(((a as u64) / (b as u64)) as i64)
        } else {
            Interval::TOP
        }
    }

    /// Unsigned modulo; the divisor is known to exclude zero.
    pub fn umod(self, rhs: Interval) -> Interval {
        if let (Some(a), Some(b)) = (self.as_singleton(), rhs.as_singleton()) {
            return Interval::singleton(((a as u64) % (b as u64)) as i64);
        }
        if self.nonneg() && rhs.lo >= 1 {
            Interval {
                lo: 0,
                hi: (rhs.hi - 1).min(self.hi),
            }
        } else {
            Interval::TOP
        }
    }

    pub fn bit_and(self, rhs: Interval) -> Interval {
        if let (Some(a), Some(b)) = (self.as_singleton(), rhs.as_singleton()) {
            return Interval::singleton(a & b);
        }
        // Masking with a non-negative constant bounds the result.
        if let Some(mask) = rhs.as_singleton() {
            if mask >= 0 {
                return Interval { lo: 0, hi: mask };
            }
        }
        if let Some(mask) = self.as_singleton() {
            if mask >= 0 {
                return Interval { lo: 0, hi: mask };
            }
        }
        Interval::TOP
    }

    pub fn bit_or(self, rhs: Interval) -> Interval {
        match (self.as_singleton(), rhs.as_singleton()) {
            (Some(a), Some(b)) => Interval::singleton(a | b),
            _ => Interval::TOP,
        }
    }

    pub fn bit_xor(self, rhs: Interval) -> Interval {
        match (self.as_singleton(), rhs.as_singleton()) {
            (Some(a), Some(b)) => Interval::singleton(a ^ b),
            _ => Interval::TOP,
        }
    }

    /// Left shift; the amount is masked to six bits, mirroring the VM.
    pub fn lsh(self, rhs: Interval) -> Interval {
        let Some(shift) = rhs.as_singleton() else {
            return Interval::TOP;
        };
        let shift = (shift as u64 & 63) as u32;
        match (self.lo.checked_shl(shift), self.hi.checked_shl(shift)) {
            (Some(lo), Some(hi))
                if lo >> shift == self.lo && hi >> shift == self.hi && lo <= hi =>
            {
                Interval { lo, hi }
            }
            _ => Interval::TOP,
        }
    }

    /// Logical (unsigned) right shift.
    pub fn rsh(self, rhs: Interval) -> Interval {
        let Some(shift) = rhs.as_singleton() else {
            return Interval::TOP;
        };
        let shift = (shift as u64 & 63) as u32;
        if let Some(v) = self.as_singleton() {
            return Interval::singleton(((v as u64) >> shift) as i64);
        }
        if self.nonneg() {
            Interval {
                lo: ((self.lo as u64) >> shift) as i64,
                hi: ((self.hi as u64) >> shift) as i64,
            }
        } else {
            Interval::TOP
        }
    }

    /// Statically decide `cond(self, rhs)` if possible.
    pub fn decide(self, cond: JumpCond, rhs: Interval) -> Option<bool> {
        if let (Some(a), Some(b)) = (self.as_singleton(), rhs.as_singleton()) {
            return Some(cond.eval(a as u64, b as u64));
        }
        match cond {
            JumpCond::Eq => {
                if self.hi < rhs.lo || rhs.hi < self.lo {
                    Some(false)
                } else {
                    None
                }
            }
            JumpCond::Ne => {
                if self.hi < rhs.lo || rhs.hi < self.lo {
                    Some(true)
                } else {
                    None
                }
            }
            JumpCond::SLt => decide_lt(self, rhs, false),
            JumpCond::SLe => decide_le(self, rhs, false),
            JumpCond::SGt => decide_lt(rhs, self, false),
            JumpCond::SGe => decide_le(rhs, self, false),
            JumpCond::Lt => decide_lt(self, rhs, true),
            JumpCond::Le => decide_le(self, rhs, true),
            JumpCond::Gt => decide_lt(rhs, self, true),
            JumpCond::Ge => decide_le(rhs, self, true),
        }
    }

    /// Refine `self` under the assumption `cond(self, rhs)` holds, where
    /// refinement is supported. `None` means the assumption is infeasible.
    pub fn refine(self, cond: JumpCond, rhs: Interval) -> Option<Interval> {
        match self.decide(cond, rhs) {
            Some(true) => return Some(self),
            Some(false) => return None,
            None => {}
        }
        match cond {
            JumpCond::Eq => {
                let lo = self.lo.max(rhs.lo);
                let hi = self.hi.min(rhs.hi);
                (lo <= hi).then_some(Interval { lo, hi })
            }
            JumpCond::Ne => {
                // Only boundary trimming against a constant is expressible.
                if let Some(v) = rhs.as_singleton() {
                    if self.as_singleton() == Some(v) {
                        return None;
                    }
                    if self.lo == v {
                        return Some(Interval {
                            lo: v + 1,
                            hi: self.hi,
                        });
                    }
                    if self.hi == v {
                        return Some(Interval {
                            lo: self.lo,
                            hi: v - 1,
                        });
                    }
                }
                Some(self)
            }
            JumpCond::SLt => clip_hi(self, rhs.hi.checked_sub(1)?),
            JumpCond::SLe => clip_hi(self, rhs.hi),
            JumpCond::SGt => clip_lo(self, rhs.lo.checked_add(1)?),
            JumpCond::SGe => clip_lo(self, rhs.lo),
            // Unsigned refinement is sound only when both ranges stay in
            // the non-negative half, where the orders coincide. With a
            // mixed-sign left side, a signed-negative value is huge as
            // u64 and would be lost by a signed clip.
            JumpCond::Lt if self.nonneg() && rhs.nonneg() => clip_hi(self, rhs.hi.checked_sub(1)?),
            JumpCond::Le if self.nonneg() && rhs.nonneg() => clip_hi(self, rhs.hi),
            JumpCond::Gt if self.nonneg() && rhs.nonneg() => clip_lo(self, rhs.lo.checked_add(1)?),
            JumpCond::Ge if self.nonneg() && rhs.nonneg() => clip_lo(self, rhs.lo),
            _ => Some(self),
        }
    }

    pub fn apply(self, op: AluOp, rhs: Interval) -> Interval {
        match op {
            AluOp::Add => self.add(rhs),
            AluOp::Sub => self.sub(rhs),
            AluOp::Mul => self.mul(rhs),
            AluOp::Div => self.udiv(rhs),
            AluOp::Mod => self.umod(rhs),
            AluOp::And => self.bit_and(rhs),
            AluOp::Or => self.bit_or(rhs),
            AluOp::Xor => self.bit_xor(rhs),
            AluOp::Lsh => self.lsh(rhs),
            AluOp::Rsh => self.rsh(rhs),
            AluOp::Mov => rhs,
        }
    }
}

fn decide_lt(a: Interval, b: Interval, unsigned: bool) -> Option<bool> {
    if unsigned && !(a.nonneg() && b.nonneg()) {
        // Mixed-sign unsigned comparisons decide only when one side is
        // entirely negative (huge as u64) and the other non-negative.
        let a_neg = a.hi < 0;
        let b_neg = b.hi < 0;
        return match (a_neg, b.nonneg(), a.nonneg(), b_neg) {
            (true, true, _, _) => Some(false), // negative as u64 > non-negative
            (_, _, true, true) => Some(true),
            _ => {
                if a_neg && b_neg {
                    // Both have the top bit set; signed order matches.
                    decide_lt(a, b, false)
                } else {
                    None
                }
            }
        };
    }
    if a.hi < b.lo {
        Some(true)
    } else if a.lo >= b.hi {
        Some(false)
    } else {
        None
    }
}

fn decide_le(a: Interval, b: Interval, unsigned: bool) -> Option<bool> {
    if unsigned && !(a.nonneg() && b.nonneg()) {
        let a_neg = a.hi < 0;
        let b_neg = b.hi < 0;
        return match (a_neg, b.nonneg(), a.nonneg(), b_neg) {
            (true, true, _, _) => Some(false),
            (_, _, true, true) => Some(true),
            _ => {
                if a_neg && b_neg {
                    decide_le(a, b, false)
                } else {
                    None
                }
            }
        };
    }
    if a.hi <= b.lo {
        Some(true)
    } else if a.lo > b.hi {
        Some(false)
    } else {
        None
    }
}

fn clip_hi(a: Interval, hi: i64) -> Option<Interval> {
    if a.lo > hi {
        None
    } else {
        Some(Interval {
            lo: a.lo,
            hi: a.hi.min(hi),
        })
    }
}

fn clip_lo(a: Interval, lo: i64) -> Option<Interval> {
    if a.hi < lo {
        None
    } else {
        Some(Interval {
            lo: a.lo.max(lo),
            hi: a.hi,
        })
    }
}

/// Verifier-side value classification.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum AbstractValue {
    Uninit,
    Scalar(Interval),
    /// Opaque scalar tagged as a user-space address. Arithmetic keeps the
    /// tag through add/sub; direct dereference is forbidden.
    UserAddr,
    /// Verified handle into a pinned region of `size` bytes, positioned
    /// at `off` (one-past-end allowed for arithmetic, not access).
    RegionHandle {
        id: u32,
        size: u64,
        off: Interval,
    },
    /// Result of `map` before its null check.
    MaybeNullRegion {
        id: u32,
        size: u64,
    },
    /// Frame-relative pointer; the frame pointer itself is offset 0, the
    /// valid frame is `[-STACK_SIZE, 0)`.
    StackPtr {
        off: Interval,
    },
}

impl AbstractValue {
    pub fn scalar_top() -> Self {
        AbstractValue::Scalar(Interval::TOP)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            AbstractValue::Uninit => "uninitialized",
            AbstractValue::Scalar(_) => "scalar",
            AbstractValue::UserAddr => "user address",
            AbstractValue::RegionHandle { .. } => "region handle",
            AbstractValue::MaybeNullRegion { .. } => "maybe-null region",
            AbstractValue::StackPtr { .. } => "stack pointer",
        }
    }
}

const STACK_WORDS: usize = STACK_SIZE / 64;

/// Byte-granular stack map. Bytes are uninitialized until written;
/// 8-byte-aligned register stores additionally keep the exact spilled
/// value so pointers survive a round trip through the stack.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct StackState {
    init: [u64; STACK_WORDS],
    spills: BTreeMap<u16, AbstractValue>,
}

/// Outcome of a stack read.
pub enum StackRead {
    Value(AbstractValue),
    UninitByte(i64),
}

impl Default for StackState {
    fn default() -> Self {
        StackState {
            init: [0; STACK_WORDS],
            spills: BTreeMap::new(),
        }
    }
}

impl StackState {
    fn slot(off: i64) -> usize {
        debug_assert!((-(STACK_SIZE as i64)..0).contains(&off));
        (off + STACK_SIZE as i64) as usize
    }

    fn is_init(&self, slot: usize) -> bool {
        self.init[slot / 64] & (1 << (slot % 64)) != 0
    }

    fn set_init(&mut self, slot: usize) {
        self.init[slot / 64] |= 1 << (slot % 64);
    }

    fn drop_spills_overlapping(&mut self, start: usize, len: usize) {
        let keys: Vec<u16> = self
            .spills
            .keys()
            .copied()
            .filter(|k| (*k as usize) < start + len && start < *k as usize + 8)
            .collect();
        for k in keys {
            self.spills.remove(&k);
        }
    }

    /// Record a store of `value` to `[off, off + width)`. Bounds are the
    /// caller's responsibility. A full 8-byte aligned register store is
    /// kept as an exact spill.
    pub fn store(&mut self, off: i64, width: u64, value: Option<AbstractValue>) {
        let start = Self::slot(off);
        let len = width as usize;
        self.drop_spills_overlapping(start, len);
        for s in start..start + len {
            self.set_init(s);
        }
        if width == 8 && start.is_multiple_of(8) {
            if let Some(v) = value {
                self.spills.insert(start as u16, v);
            }
        }
    }

    /// A write whose exact position is unknown within `[lo, hi]` (byte
    /// width): degrade overlapping spills but mark nothing initialized.
    pub fn store_weak(&mut self, lo: i64, hi: i64, width: u64) {
        let start = Self::slot(lo);
        let end = Self::slot(hi) + width as usize;
        self.drop_spills_overlapping(start, end - start);
    }

    pub fn load(&self, off: i64, width: u64) -> StackRead {
        let start = Self::slot(off);
        for s in start..start + width as usize {
            if !self.is_init(s) {
                return StackRead::UninitByte(off + (s - start) as i64);
            }
        }
        if width == 8 && start.is_multiple_of(8) {
            if let Some(v) = self.spills.get(&(start as u16)) {
                return StackRead::Value(*v);
            }
        }
        StackRead::Value(AbstractValue::Scalar(width_range(width)))
    }

    /// Check that every byte of `[off, off + len)` is initialized
    /// (copy-source check). Returns the first uninitialized offset.
    pub fn check_init_range(&self, off: i64, len: u64) -> Result<(), i64> {
        let start = Self::slot(off);
        for s in start..start + len as usize {
            if !self.is_init(s) {
                return Err(off + (s - start) as i64);
            }
        }
        Ok(())
    }

    /// Mark `[off, off + len)` initialized without an exact value
    /// (copy-destination effect).
    pub fn mark_init_range(&mut self, off: i64, len: u64) {
        let start = Self::slot(off);
        self.drop_spills_overlapping(start, len as usize);
        for s in start..start + len as usize {
            self.set_init(s);
        }
    }
}

/// Value range of a zero-extended load of `width` bytes.
pub fn width_range(width: u64) -> Interval {
    match width {
        1 => Interval::new(0, 0xff),
        2 => Interval::new(0, 0xffff),
        4 => Interval::new(0, 0xffff_ffff),
        _ => Interval::TOP,
    }
}
