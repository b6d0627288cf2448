//! Dead-code elimination.
//!
//! An instruction is dead when the next access to its target is a write.
//! Reads count before writes inside one instruction, so `v1 <- f(v1, b)`
//! reads the old `v1`. Iteration-stage scans wrap around the loop, and `v1`
//! carries an implicit read at the end of every iteration. Setup-stage scans
//! continue into the iteration stage. An instruction with no later access at
//! all is kept.

use super::ops::StageKind;
use super::program::{Instruction, Program, Reg};

#[derive(PartialEq)]
enum Next {
    Read,
    Write,
    None,
}

fn access(ins: &Instruction, r: Reg) -> Option<Next> {
    if ins.reads_reg(r) {
        Some(Next::Read)
    } else if ins.target == r {
        Some(Next::Write)
    } else {
        None
    }
}

fn next_access_setup(p: &Program, i: usize) -> Next {
    let r = p.setup[i].target;
    for ins in p.setup[i + 1..].iter().chain(&p.iter) {
        if let Some(a) = access(ins, r) {
            return a;
        }
    }
    Next::None
}

fn next_access_iter(p: &Program, i: usize) -> Next {
    let r = p.iter[i].target;
    for ins in &p.iter[i + 1..] {
        if let Some(a) = access(ins, r) {
            return a;
        }
    }
    if r == Reg::V1 {
        return Next::Read;
    }
    for ins in &p.iter[..i] {
        if let Some(a) = access(ins, r) {
            return a;
        }
    }
    Next::None
}

/// Finds the first dead instruction, if any.
pub fn first_dead(p: &Program) -> Option<(StageKind, usize)> {
    for i in 0..p.setup.len() {
        if next_access_setup(p, i) == Next::Write {
            return Some((StageKind::Setup, i));
        }
    }
    for i in 0..p.iter.len() {
        if next_access_iter(p, i) == Next::Write {
            return Some((StageKind::Iteration, i));
        }
    }
    None
}

/// Removes dead instructions one at a time until none remain.
pub fn eliminate_dead_code(p: &Program) -> Program {
    let mut q = p.clone();
    while let Some((stage, i)) = first_dead(&q) {
        q.stage_mut(stage).remove(i);
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::ops::{Env, Opcode};

    fn ins(t: Reg, op: Opcode, a: Reg, b: Option<Reg>) -> Instruction {
        Instruction::new(t, op, a, b)
    }

    #[test]
    fn def_use_chain_is_kept() {
        let p = Program {
            env: Env::Linear,
            setup: vec![
                ins(Reg::R1, Opcode::Sketch, Reg::A, None),
                ins(Reg::R1, Opcode::Hhqr, Reg::R1, None),
            ],
            iter: vec![
                ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
                ins(Reg::V1, Opcode::VecMatMul, Reg::V1, Some(Reg::R1)),
            ],
        };
        assert_eq!(eliminate_dead_code(&p), p);
    }

    #[test]
    fn overwritten_pair_dies_together() {
        let p = Program {
            env: Env::Linear,
            setup: vec![],
            iter: vec![
                ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
                ins(Reg::V1, Opcode::VecVecSub, Reg::V1, Some(Reg::B)),
                ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
            ],
        };
        let q = eliminate_dead_code(&p);
        assert_eq!(q.iter, vec![ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X))]);
    }

    #[test]
    fn loop_carried_value_survives() {
        // u1 is written at the end and read at the start of the next pass.
        let p = Program {
            env: Env::Linear,
            setup: vec![ins(Reg::U1, Opcode::MatVecMul, Reg::A, Some(Reg::X))],
            iter: vec![
                ins(Reg::V1, Opcode::VecMatMul, Reg::U1, Some(Reg::A)),
                ins(Reg::U1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
            ],
        };
        assert_eq!(eliminate_dead_code(&p), p);
    }

    #[test]
    fn setup_write_shadowed_by_iteration_is_dead() {
        let p = Program {
            env: Env::Linear,
            setup: vec![ins(Reg::V2, Opcode::MatVecMul, Reg::A, Some(Reg::X))],
            iter: vec![
                ins(Reg::V2, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
                ins(Reg::V1, Opcode::VecMatMul, Reg::V2, Some(Reg::A)),
            ],
        };
        let q = eliminate_dead_code(&p);
        assert!(q.setup.is_empty());
        assert_eq!(q.iter, p.iter);
    }
}
