//! Property tests for the invariants everything else leans on:
//! the abstract interval domain over-approximates the interpreter's
//! concrete arithmetic, branch decisions/refinements never exclude a
//! reachable concrete state, and path jailing never leaves the sandbox.

use proptest::prelude::*;

use anycall::isa::{AluOp, JumpCond};
use anycall::syskernel::jail_path;
use anycall::verifier::Interval;

/// Concrete ALU semantics, bit-for-bit what the interpreter does.
fn concrete(op: AluOp, a: i64, b: i64) -> Option<i64> {
    let (a, b) = (a as u64, b as u64);
    let r = match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Div => {
            if b == 0 {
                return None;
            }
            a / b
        }
        AluOp::Mod => {
            if b == 0 {
                return None;
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
    Some(r as i64)
}

fn interval_and_member() -> impl Strategy<Value = (Interval, i64)> {
    (any::<i64>(), any::<i64>())
        .prop_map(|(x, y)| if x <= y { (x, y) } else { (y, x) })
        .prop_flat_map(|(lo, hi)| (Just(Interval::new(lo, hi)), lo..=hi))
}

/// Small intervals exercise the precise (non-top) arithmetic paths.
fn small_interval_and_member() -> impl Strategy<Value = (Interval, i64)> {
    (-1000i64..1000, 0i64..64)
        .prop_map(|(lo, width)| (lo, lo + width))
        .prop_flat_map(|(lo, hi)| (Just(Interval::new(lo, hi)), lo..=hi))
}

fn alu_op() -> impl Strategy<Value = AluOp> {
    prop_oneof![
        Just(AluOp::Add),
        Just(AluOp::Sub),
        Just(AluOp::Mul),
        Just(AluOp::Div),
        Just(AluOp::Mod),
        Just(AluOp::And),
        Just(AluOp::Or),
        Just(AluOp::Xor),
        Just(AluOp::Lsh),
        Just(AluOp::Rsh),
        Just(AluOp::Mov),
    ]
}

fn jump_cond() -> impl Strategy<Value = JumpCond> {
    prop_oneof![
        Just(JumpCond::Eq),
        Just(JumpCond::Ne),
        Just(JumpCond::Lt),
        Just(JumpCond::Le),
        Just(JumpCond::Gt),
        Just(JumpCond::Ge),
        Just(JumpCond::SLt),
        Just(JumpCond::SLe),
        Just(JumpCond::SGt),
        Just(JumpCond::SGe),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    /// Soundness: the concrete result of any ALU op on members of two
    /// intervals lies inside the abstract result interval.
    #[test]
    fn interval_arithmetic_over_approximates(
        op in alu_op(),
        (ia, a) in interval_and_member(),
        (ib, b) in interval_and_member(),
    ) {
        if matches!(op, AluOp::Div | AluOp::Mod) && ib.contains(0) {
            // The verifier rejects possibly-zero divisors outright.
            return Ok(());
        }
        let abstract_result = ia.apply(op, ib);
        if let Some(c) = concrete(op, a, b) {
            prop_assert!(
                abstract_result.contains(c),
                "{op:?}: {a} in {ia:?}, {b} in {ib:?} gave {c}, outside {abstract_result:?}"
            );
        }
    }

    /// The same soundness claim on the tight intervals where the domain
    /// actually computes non-trivial bounds.
    #[test]
    fn interval_arithmetic_over_approximates_tight(
        op in alu_op(),
        (ia, a) in small_interval_and_member(),
        (ib, b) in small_interval_and_member(),
    ) {
        if matches!(op, AluOp::Div | AluOp::Mod) && ib.contains(0) {
            return Ok(());
        }
        let abstract_result = ia.apply(op, ib);
        if let Some(c) = concrete(op, a, b) {
            prop_assert!(abstract_result.contains(c));
        }
    }

    /// A static branch decision must agree with every concrete pairing.
    #[test]
    fn branch_decisions_are_sound(
        cond in jump_cond(),
        (ia, a) in interval_and_member(),
        (ib, b) in interval_and_member(),
    ) {
        if let Some(decision) = ia.decide(cond, ib) {
            prop_assert_eq!(
                decision,
                cond.eval(a as u64, b as u64),
                "decide({:?}, {:?}, {:?}) contradicts {} vs {}", cond, ia, ib, a, b
            );
        }
    }

    /// Refinement never drops a concrete value that satisfies the branch.
    #[test]
    fn branch_refinement_keeps_satisfying_values(
        cond in jump_cond(),
        (ia, a) in interval_and_member(),
        (ib, b) in interval_and_member(),
    ) {
        if cond.eval(a as u64, b as u64) {
            match ia.refine(cond, ib) {
                Some(refined) => prop_assert!(
                    refined.contains(a),
                    "refine({:?}, {:?}, {:?}) lost {}", cond, ia, ib, a
                ),
                None => prop_assert!(
                    false,
                    "refine({:?}, {:?}, {:?}) claims infeasible but {} / {} satisfies it",
                    cond, ia, ib, a, b
                ),
            }
        }
    }

    /// Lexical jailing: whatever the input, the resolved relative path
    /// never climbs above the root.
    #[test]
    fn jail_never_escapes(path in "[a-z./]{0,40}") {
        let root = std::path::Path::new("/tmp/jail-root-that-does-not-exist");
        match jail_path(root, path.as_bytes(), false) {
            Ok(rel) => {
                prop_assert!(!rel.starts_with('/'));
                let mut depth: i64 = 0;
                for comp in rel.split('/') {
                    match comp {
                        "" | "." => {}
                        ".." => {
                            depth -= 1;
                            prop_assert!(depth >= 0, "escaped via {rel}");
                        }
                        _ => depth += 1,
                    }
                }
            }
            Err(errno) => prop_assert!(errno < 0),
        }
    }
}
