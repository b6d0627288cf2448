//! Canonical keys and symbolic normal forms.
//!
//! [`canonical_key`] is the serialization of the dead-code-eliminated
//! program and is what the search uses to merge states. The symbolic normal
//! form goes further: it removes every instruction that cannot influence the
//! update direction, applies three rewrite families (Gram products pushed
//! into matrix-vector products, multiplications by a known identity dropped,
//! constant scalings folded), then schedules independent instructions in a
//! fixed order and renames cache registers by first use.

use super::dce::eliminate_dead_code;
use super::ops::{Opcode, StageKind};
use super::program::{Instruction, Loc, Operand, Program, Reg, RegClass, ALL_REGS};
use super::text::serialize;

/// Key used for graph-search state merging.
pub fn canonical_key(p: &Program) -> String {
    serialize(&eliminate_dead_code(p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reach {
    Initial,
    Def(Loc),
    Ambiguous,
}

fn at(p: &Program, loc: Loc) -> &Instruction {
    &p.stage(loc.stage)[loc.index]
}

/// The unique definition of `r` visible to a read at `loc`.
fn reaching_def(p: &Program, loc: Loc, r: Reg) -> Reach {
    match loc.stage {
        StageKind::Setup => p.setup[..loc.index]
            .iter()
            .rposition(|i| i.target == r)
            .map(|index| {
                Reach::Def(Loc {
                    stage: StageKind::Setup,
                    index,
                })
            })
            .unwrap_or(Reach::Initial),
        StageKind::Iteration => {
            if let Some(index) = p.iter[..loc.index].iter().rposition(|i| i.target == r) {
                return Reach::Def(Loc {
                    stage: StageKind::Iteration,
                    index,
                });
            }
            if p.iter.iter().any(|i| i.target == r) {
                return Reach::Ambiguous;
            }
            reaching_def(
                p,
                Loc {
                    stage: StageKind::Setup,
                    index: p.setup.len(),
                },
                r,
            )
        }
    }
}

fn all_locs(p: &Program) -> Vec<Loc> {
    let s = (0..p.setup.len()).map(|index| Loc {
        stage: StageKind::Setup,
        index,
    });
    let i = (0..p.iter.len()).map(|index| Loc {
        stage: StageKind::Iteration,
        index,
    });
    s.chain(i).collect()
}

/// Every read of the value defined at `d`, or `None` when some read of the
/// register might see more than one definition.
fn uses_of(p: &Program, d: Loc) -> Option<Vec<Loc>> {
    let g = at(p, d).target;
    let mut out = Vec::new();
    for loc in all_locs(p) {
        if !at(p, loc).reads_reg(g) {
            continue;
        }
        match reaching_def(p, loc, g) {
            Reach::Def(x) if x == d => out.push(loc),
            Reach::Ambiguous => return None,
            _ => {}
        }
    }
    if g == Reg::V1 {
        return None;
    }
    Some(out)
}

/// Strong liveness: keep only instructions that can reach `v1` at the end
/// of an iteration.
pub fn remove_unlive(p: &Program) -> Program {
    let mut live_in: [bool; 12] = [false; 12];
    let mut dead_iter;
    loop {
        let mut live = live_in;
        live[Reg::V1.index()] = true;
        dead_iter = vec![false; p.iter.len()];
        for (k, ins) in p.iter.iter().enumerate().rev() {
            let t = ins.target.index();
            if !live[t] {
                dead_iter[k] = true;
                continue;
            }
            live[t] = false;
            for r in ins.reads() {
                live[r.index()] = true;
            }
        }
        let mut merged = live_in;
        for (m, l) in merged.iter_mut().zip(live) {
            *m |= l;
        }
        if merged == live_in {
            break;
        }
        live_in = merged;
    }
    let mut live = live_in;
    let mut dead_setup = vec![false; p.setup.len()];
    for (k, ins) in p.setup.iter().enumerate().rev() {
        let t = ins.target.index();
        if !live[t] {
            dead_setup[k] = true;
            continue;
        }
        live[t] = false;
        for r in ins.reads() {
            live[r.index()] = true;
        }
    }
    let keep = |v: &[Instruction], dead: &[bool]| -> Vec<Instruction> {
        v.iter()
            .zip(dead)
            .filter(|(_, d)| !**d)
            .map(|(i, _)| *i)
            .collect()
    };
    Program {
        env: p.env,
        setup: keep(&p.setup, &dead_setup),
        iter: keep(&p.iter, &dead_iter),
    }
}

/// Replaces a Gram matrix `G = XᵀX` (or `XXᵀ`) that is only ever applied to
/// vectors by two matrix-vector products with `X`.
fn rewrite_gram(p: &Program) -> Option<Program> {
    for d in all_locs(p) {
        let def = *at(p, d);
        let transposed_left = match def.op {
            Opcode::MatTransMatMul => true,
            Opcode::MatMatTransMul => false,
            _ => continue,
        };
        let (Operand::Reg(x), Some(Operand::Reg(x2))) = (def.a, def.b) else {
            continue;
        };
        if x != x2 {
            continue;
        }
        let g = def.target;
        let Some(uses) = uses_of(p, d) else { continue };
        if uses.is_empty() {
            continue;
        }
        let x_at_def = reaching_def(p, d, x);
        if x_at_def == Reach::Ambiguous {
            continue;
        }
        let ok = uses.iter().all(|&u| {
            let ins = at(p, u);
            let shape_ok = match ins.op {
                Opcode::MatVecMul => ins.a == Operand::Reg(g) && ins.b != Some(Operand::Reg(g)),
                Opcode::VecMatMul => ins.b == Some(Operand::Reg(g)) && ins.a != Operand::Reg(g),
                _ => false,
            };
            shape_ok && (x == g || reaching_def(p, u, x) == x_at_def)
        });
        if !ok {
            continue;
        }
        let mut q = p.clone();
        // Expand later uses first so earlier indices stay valid.
        let mut order = uses.clone();
        order.sort_by(|a, b| b.cmp(a));
        for u in order {
            let ins = *at(p, u);
            let y = if ins.op == Opcode::MatVecMul {
                ins.b.expect("binary")
            } else {
                ins.a
            };
            let t = ins.target;
            let xr = Operand::Reg(x);
            let tr = Operand::Reg(t);
            let pair = if transposed_left {
                [
                    Instruction { target: t, op: Opcode::MatVecMul, a: xr, b: Some(y) },
                    Instruction { target: t, op: Opcode::VecMatMul, a: tr, b: Some(xr) },
                ]
            } else {
                [
                    Instruction { target: t, op: Opcode::VecMatMul, a: y, b: Some(xr) },
                    Instruction { target: t, op: Opcode::MatVecMul, a: xr, b: Some(tr) },
                ]
            };
            let stage = q.stage_mut(u.stage);
            stage.splice(u.index..=u.index, pair);
        }
        q.stage_mut(d.stage).remove(d.index);
        if q.typecheck().is_ok() {
            return Some(q);
        }
    }
    None
}

fn is_identity_at(p: &Program, loc: Loc, r: Reg) -> bool {
    let Reach::Def(d) = reaching_def(p, loc, r) else {
        return false;
    };
    let def = at(p, d);
    if def.op != Opcode::MatMatMul {
        return false;
    }
    let (Operand::Reg(l), Some(Operand::Reg(rr))) = (def.a, def.b) else {
        return false;
    };
    let inverse_of = |inv: Reg, other: Reg| -> bool {
        let Reach::Def(e) = reaching_def(p, d, inv) else {
            return false;
        };
        let ins = at(p, e);
        if ins.op != Opcode::MatInv || ins.a != Operand::Reg(other) || ins.target == other {
            return false;
        }
        let before = reaching_def(p, e, other);
        before != Reach::Ambiguous && before == reaching_def(p, d, other)
    };
    inverse_of(l, rr) || inverse_of(rr, l)
}

/// Drops in-place multiplications by a known identity and by the constant 1.
fn rewrite_identity(p: &Program) -> Option<Program> {
    for loc in all_locs(p) {
        let ins = at(p, loc);
        let t = Operand::Reg(ins.target);
        let removable = match (ins.op, ins.a, ins.b) {
            (Opcode::ScalarVecMul, Operand::Const(c), Some(v)) => c == 1.0 && v == t,
            (Opcode::MatVecMul, Operand::Reg(m), Some(v)) => v == t && is_identity_at(p, loc, m),
            (Opcode::VecMatMul, v, Some(Operand::Reg(m))) => v == t && is_identity_at(p, loc, m),
            (Opcode::MatMatMul, Operand::Reg(l), Some(Operand::Reg(r))) => {
                (Operand::Reg(r) == t && is_identity_at(p, loc, l))
                    || (Operand::Reg(l) == t && is_identity_at(p, loc, r))
            }
            _ => false,
        };
        if removable {
            let mut q = p.clone();
            q.stage_mut(loc.stage).remove(loc.index);
            if q.typecheck().is_ok() {
                return Some(q);
            }
        }
    }
    None
}

/// Folds `t <- c1·y; t <- c2·t` into `t <- (c1·c2)·y`.
fn rewrite_fold(p: &Program) -> Option<Program> {
    for stage in [StageKind::Setup, StageKind::Iteration] {
        let s = p.stage(stage);
        for k in 1..s.len() {
            let (first, second) = (s[k - 1], s[k]);
            if first.op != Opcode::ScalarVecMul || second.op != Opcode::ScalarVecMul {
                continue;
            }
            let (Operand::Const(c1), Operand::Const(c2)) = (first.a, second.a) else {
                continue;
            };
            if first.target != second.target || second.b != Some(Operand::Reg(second.target)) {
                continue;
            }
            let mut q = p.clone();
            let st = q.stage_mut(stage);
            st[k - 1].a = Operand::Const(c1 * c2);
            st.remove(k);
            return Some(q);
        }
    }
    None
}

fn depends(earlier: &Instruction, later: &Instruction) -> bool {
    later.reads_reg(earlier.target)
        || later.target == earlier.target
        || earlier.reads_reg(later.target)
}

/// Dependency-preserving list scheduling with a textual tie-break.
fn schedule(stage: &[Instruction]) -> Vec<Instruction> {
    let n = stage.len();
    let mut done = vec![false; n];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(String, usize)> = None;
        for j in 0..n {
            if done[j] {
                continue;
            }
            let ready = (0..j).all(|i| done[i] || !depends(&stage[i], &stage[j]));
            if !ready {
                continue;
            }
            let key = stage[j].normalized().to_string();
            if best.as_ref().is_none_or(|(k, _)| key < *k) {
                best = Some((key, j));
            }
        }
        let (_, j) = best.expect("a dependency DAG always has a ready instruction");
        done[j] = true;
        out.push(stage[j]);
    }
    out
}

/// Renames cache registers in order of first appearance, keeping `v1`.
fn rename(p: &Program) -> Program {
    let mut map: [Option<Reg>; 12] = [None; 12];
    for r in [Reg::A, Reg::B, Reg::X, Reg::V1] {
        map[r.index()] = Some(r);
    }
    let mut used = [false; 12];
    used[Reg::V1.index()] = true;
    let mut assign = |r: Reg, map: &mut [Option<Reg>; 12]| {
        if map[r.index()].is_some() {
            return;
        }
        let fresh = r
            .class()
            .pool()
            .iter()
            .copied()
            .find(|c| !used[c.index()])
            .expect("bijection within a pool");
        used[fresh.index()] = true;
        map[r.index()] = Some(fresh);
    };
    for ins in p.setup.iter().chain(&p.iter) {
        for r in ins.reads().chain(std::iter::once(ins.target)) {
            assign(r, &mut map);
        }
    }
    let sub = |o: Operand| match o {
        Operand::Reg(r) => Operand::Reg(map[r.index()].unwrap_or(r)),
        c => c,
    };
    let re = |v: &[Instruction]| -> Vec<Instruction> {
        v.iter()
            .map(|i| {
                Instruction {
                    target: map[i.target.index()].unwrap_or(i.target),
                    op: i.op,
                    a: sub(i.a),
                    b: i.b.map(sub),
                }
                .normalized()
            })
            .collect()
    };
    Program {
        env: p.env,
        setup: re(&p.setup),
        iter: re(&p.iter),
    }
}

fn order_and_rename(p: &Program) -> Program {
    let mut cur = p.clone();
    for _ in 0..16 {
        let scheduled = Program {
            env: cur.env,
            setup: schedule(&cur.setup),
            iter: schedule(&cur.iter),
        };
        let next = rename(&scheduled);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Symbolic normal form. Semantics are preserved up to floating-point
/// reassociation of the rewritten products.
pub fn canonicalize_symbolic(p: &Program) -> Program {
    let mut cur = remove_unlive(&eliminate_dead_code(p));
    for _ in 0..64 {
        let next = rewrite_gram(&cur)
            .or_else(|| rewrite_identity(&cur))
            .or_else(|| rewrite_fold(&cur));
        match next {
            Some(q) => cur = remove_unlive(&q),
            None => break,
        }
    }
    order_and_rename(&cur)
}

/// Cache registers of `class` that appear in `p`.
pub fn registers_used(p: &Program, class: RegClass) -> Vec<Reg> {
    ALL_REGS
        .iter()
        .copied()
        .filter(|r| r.class() == class)
        .filter(|r| {
            p.setup
                .iter()
                .chain(&p.iter)
                .any(|i| i.target == *r || i.reads_reg(*r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::text::parse_program;

    fn parse(s: &str) -> Program {
        parse_program(s, None).unwrap()
    }

    #[test]
    fn gram_forms_meet() {
        let a = parse("[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_MAT_MUL(v1, A)\n");
        let b = parse("[SETUP]\nR1 <- MAT_TRANS_MAT_MUL(A, A)\n[ITER]\nv1 <- MAT_VEC_MUL(R1, x)\n");
        assert_eq!(canonicalize_symbolic(&a), canonicalize_symbolic(&b));
    }

    #[test]
    fn precomputed_preconditioner_meets_two_matvecs() {
        let pre = "[SETUP]
R1 <- HHQR(A, NONE)
R1 <- MAT_INV(R1, NONE)
R1 <- MAT_MAT_TRANS_MUL(R1, R1)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R1, v1)
";
        let two = "[SETUP]
R2 <- HHQR(A, NONE)
R2 <- MAT_INV(R2, NONE)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- VEC_MAT_MUL(v1, R2)
v1 <- MAT_VEC_MUL(R2, v1)
";
        assert_eq!(canonicalize_symbolic(&parse(pre)), canonicalize_symbolic(&parse(two)));
    }

    #[test]
    fn scalar_fold() {
        let p = parse("[SETUP]\n[ITER]\nv2 <- MAT_VEC_MUL(A, x)\nv1 <- SCALAR_VEC_MUL(3, v2)\nv1 <- SCALAR_VEC_MUL(2, v1)\n");
        let q = canonicalize_symbolic(&p);
        assert_eq!(q.iter.len(), 2);
        assert_eq!(q.iter[1].a, Operand::Const(6.0));
    }

    #[test]
    fn identity_product_is_dropped() {
        let p = parse("[SETUP]
R1 <- MAT_TRANS_MAT_MUL(A, A)
R2 <- MAT_INV(R1, NONE)
R3 <- MAT_MAT_MUL(R2, R1)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R3, v1)
");
        let q = canonicalize_symbolic(&p);
        assert!(q.setup.is_empty());
        assert_eq!(q.iter.len(), 2);
    }

    #[test]
    fn unrewritable_program_is_fixed() {
        let p = parse("[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_VEC_SUB(v1, b)\n");
        assert_eq!(canonicalize_symbolic(&p), p);
    }

    #[test]
    fn insertion_order_is_forgotten() {
        let a = parse("[SETUP]\n[ITER]\nv2 <- VEC_MAT_MUL(b, A)\nu1 <- MAT_VEC_MUL(A, x)\nu1 <- VEC_MAT_MUL(u1, A)\nv1 <- VEC_VEC_SUB(u1, v2)\n");
        let b = parse("[SETUP]\n[ITER]\nu2 <- MAT_VEC_MUL(A, x)\nv3 <- VEC_MAT_MUL(b, A)\nu2 <- VEC_MAT_MUL(u2, A)\nv1 <- VEC_VEC_SUB(u2, v3)\n");
        assert_eq!(canonicalize_symbolic(&a), canonicalize_symbolic(&b));
    }
}
