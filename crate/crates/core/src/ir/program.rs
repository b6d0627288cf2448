//! Registers, instructions, programs and legality.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ops::{Arity, Env, Opcode, StageKind};
use crate::tensor::{Dim, Shape};

/// Default cap on the total number of instructions.
pub const DEFAULT_MAX_LEN: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reg {
    A,
    B,
    X,
    R1,
    R2,
    R3,
    V1,
    V2,
    V3,
    U1,
    U2,
    C1,
}

/// Register class. Writes must land in the class of the produced value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegClass {
    ReadOnly,
    Matrix,
    Vector,
    Scalar,
}

pub const ALL_REGS: [Reg; 12] = [
    Reg::A,
    Reg::B,
    Reg::X,
    Reg::R1,
    Reg::R2,
    Reg::R3,
    Reg::V1,
    Reg::V2,
    Reg::V3,
    Reg::U1,
    Reg::U2,
    Reg::C1,
];

const MATRIX_POOL: [Reg; 3] = [Reg::R1, Reg::R2, Reg::R3];
const VECTOR_POOL: [Reg; 5] = [Reg::V1, Reg::V2, Reg::V3, Reg::U1, Reg::U2];
const SCALAR_POOL: [Reg; 1] = [Reg::C1];

impl Reg {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Reg::A => "A",
            Reg::B => "b",
            Reg::X => "x",
            Reg::R1 => "R1",
            Reg::R2 => "R2",
            Reg::R3 => "R3",
            Reg::V1 => "v1",
            Reg::V2 => "v2",
            Reg::V3 => "v3",
            Reg::U1 => "u1",
            Reg::U2 => "u2",
            Reg::C1 => "c1",
        }
    }

    pub fn class(self) -> RegClass {
        match self {
            Reg::A | Reg::B | Reg::X => RegClass::ReadOnly,
            Reg::R1 | Reg::R2 | Reg::R3 => RegClass::Matrix,
            Reg::V1 | Reg::V2 | Reg::V3 | Reg::U1 | Reg::U2 => RegClass::Vector,
            Reg::C1 => RegClass::Scalar,
        }
    }

    pub fn is_read_only(self) -> bool {
        self.class() == RegClass::ReadOnly
    }
}

impl RegClass {
    /// Cache registers of this class in allocation order.
    pub fn pool(self) -> &'static [Reg] {
        match self {
            RegClass::ReadOnly => &[],
            RegClass::Matrix => &MATRIX_POOL,
            RegClass::Vector => &VECTOR_POOL,
            RegClass::Scalar => &SCALAR_POOL,
        }
    }

    pub fn of_shape(shape: Shape) -> RegClass {
        match shape {
            Shape::Scalar => RegClass::Scalar,
            Shape::Vec(_) => RegClass::Vector,
            Shape::Mat(..) => RegClass::Matrix,
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_REGS
            .iter()
            .find(|r| r.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown register `{s}`"))
    }
}

/// Instruction operand. Constants may only fill scalar slots; the search
/// never generates them, but rewrites and hand-written programs may.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Const(f64),
}

impl Operand {
    pub fn reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            Operand::Const(_) => None,
        }
    }

    fn sort_key(&self) -> String {
        match self {
            Operand::Reg(r) => r.name().to_string(),
            Operand::Const(c) => format!("{c}"),
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Const(c) => write!(f, "{c}"),
        }
    }
}

impl Eq for Operand {}

impl std::hash::Hash for Operand {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        match self {
            Operand::Reg(r) => {
                0u8.hash(state);
                r.hash(state);
            }
            Operand::Const(c) => {
                1u8.hash(state);
                c.to_bits().hash(state);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub target: Reg,
    pub op: Opcode,
    pub a: Operand,
    pub b: Option<Operand>,
}

impl Instruction {
    pub fn new(target: Reg, op: Opcode, a: Reg, b: Option<Reg>) -> Self {
        Self {
            target,
            op,
            a: Operand::Reg(a),
            b: b.map(Operand::Reg),
        }
    }

    /// Registers read by this instruction, in operand order.
    pub fn reads(&self) -> impl Iterator<Item = Reg> + '_ {
        self.a.reg().into_iter().chain(self.b.and_then(|o| o.reg()))
    }

    pub fn reads_reg(&self, r: Reg) -> bool {
        self.reads().any(|x| x == r)
    }

    /// Puts commutative operand pairs into canonical (lexicographic) order.
    pub fn normalized(mut self) -> Self {
        if self.op.is_commutative() {
            if let Some(b) = self.b {
                if b.sort_key() < self.a.sort_key() {
                    self.b = Some(self.a);
                    self.a = b;
                }
            }
        }
        self
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.b {
            Some(b) => write!(f, "{} <- {}({}, {})", self.target, self.op, self.a, b),
            None => write!(f, "{} <- {}({}, NONE)", self.target, self.op, self.a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub env: Env,
    pub setup: Vec<Instruction>,
    pub iter: Vec<Instruction>,
}

/// A position inside a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Loc {
    pub stage: StageKind,
    pub index: usize,
}

impl fmt::Display for Loc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stage {
            StageKind::Setup => "setup",
            StageKind::Iteration => "iteration",
        };
        write!(f, "{s} instruction {}", self.index + 1)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LegalityError {
    #[error("{loc}: write to read-only register {reg}")]
    ReadOnlyTarget { loc: Loc, reg: Reg },
    #[error("{loc}: register {reg} is not available")]
    Unavailable { loc: Loc, reg: Reg },
    #[error("{loc}: operand shapes do not unify with {op}: {detail}")]
    TypeMismatch {
        loc: Loc,
        op: Opcode,
        detail: String,
    },
    #[error("{loc}: {op} is not allowed in this stage")]
    StageRestricted { loc: Loc, op: Opcode },
    #[error("{loc}: {op} is not in the {env} operator library")]
    NotInLibrary { loc: Loc, op: Opcode, env: Env },
    #[error("{loc}: {op} produces {shape}, which cannot be stored in {reg}")]
    TargetClass {
        loc: Loc,
        op: Opcode,
        shape: Shape,
        reg: Reg,
    },
    #[error("{loc}: {op} takes {expected}")]
    Arity {
        loc: Loc,
        op: Opcode,
        expected: &'static str,
    },
    #[error("register {reg} changes shape across iterations ({start} at entry, {end} at exit)")]
    LoopShape { reg: Reg, start: Shape, end: Shape },
    #[error("program has {len} instructions, above the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("action is not legal: {0}")]
    Action(String),
}

/// Shapes of every register at one program point (`None` = unavailable).
pub type RegShapes = [Option<Shape>; 12];

/// An edit applied to a program state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Insert {
        stage: StageKind,
        pos: usize,
        instr: Instruction,
    },
    Terminate,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Terminate => write!(f, "TERMINATE"),
            Action::Insert { stage, pos, instr } => {
                let s = match stage {
                    StageKind::Setup => "SETUP",
                    StageKind::Iteration => "ITER",
                };
                write!(f, "{s}@{pos}: {instr}")
            }
        }
    }
}

impl Program {
    pub fn empty(env: Env) -> Self {
        Self {
            env,
            setup: Vec::new(),
            iter: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.setup.len() + self.iter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stage(&self, s: StageKind) -> &[Instruction] {
        match s {
            StageKind::Setup => &self.setup,
            StageKind::Iteration => &self.iter,
        }
    }

    pub fn stage_mut(&mut self, s: StageKind) -> &mut Vec<Instruction> {
        match s {
            StageKind::Setup => &mut self.setup,
            StageKind::Iteration => &mut self.iter,
        }
    }

    /// Shapes of the read-only registers in this environment.
    pub fn initial_shapes(env: Env) -> RegShapes {
        let mut s: RegShapes = [None; 12];
        match env {
            Env::Linear | Env::Logistic => {
                s[Reg::A.index()] = Some(Shape::Mat(Dim::M, Dim::N));
                s[Reg::B.index()] = Some(Shape::Vec(Dim::M));
            }
            Env::Eigen => {
                s[Reg::A.index()] = Some(Shape::Mat(Dim::N, Dim::N));
            }
        }
        s[Reg::X.index()] = Some(Shape::Vec(Dim::N));
        s
    }

    /// Type-checks one instruction against the shapes in scope and returns
    /// the shape it writes.
    pub fn check_instruction(
        env: Env,
        stage: StageKind,
        index: usize,
        ins: &Instruction,
        shapes: &RegShapes,
    ) -> Result<Shape, LegalityError> {
        let loc = Loc { stage, index };
        if !env.has_op(ins.op) || ins.op == Opcode::DoNothing {
            return Err(LegalityError::NotInLibrary {
                loc,
                op: ins.op,
                env,
            });
        }
        if !env.allows(ins.op, stage) {
            return Err(LegalityError::StageRestricted { loc, op: ins.op });
        }
        if ins.target.is_read_only() {
            return Err(LegalityError::ReadOnlyTarget {
                loc,
                reg: ins.target,
            });
        }
        match (ins.op.arity(), ins.b.is_some()) {
            (Arity::Unary, true) => {
                return Err(LegalityError::Arity {
                    loc,
                    op: ins.op,
                    expected: "one operand and NONE",
                })
            }
            (Arity::Binary, false) => {
                return Err(LegalityError::Arity {
                    loc,
                    op: ins.op,
                    expected: "two operands",
                })
            }
            _ => {}
        }
        let shape_of = |o: Operand| -> Result<Shape, LegalityError> {
            match o {
                Operand::Const(_) => Ok(Shape::Scalar),
                Operand::Reg(r) => shapes[r.index()].ok_or(LegalityError::Unavailable { loc, reg: r }),
            }
        };
        let sa = shape_of(ins.a)?;
        let sb = match ins.b {
            Some(o) => Some(shape_of(o)?),
            None => None,
        };
        let out = ins.op.infer(env, sa, sb).ok_or_else(|| LegalityError::TypeMismatch {
            loc,
            op: ins.op,
            detail: match sb {
                Some(sb) => format!("{sa}, {sb}"),
                None => format!("{sa}"),
            },
        })?;
        if RegClass::of_shape(out) != ins.target.class() {
            return Err(LegalityError::TargetClass {
                loc,
                op: ins.op,
                shape: out,
                reg: ins.target,
            });
        }
        Ok(out)
    }

    /// Full legality check (types, availability, stage rules, loop-carried
    /// shape consistency). Returns the register shapes before every
    /// instruction of both stages, plus the state after each stage.
    pub fn typecheck(&self) -> Result<ShapeTrace, LegalityError> {
        let mut cur = Self::initial_shapes(self.env);
        let mut setup_states = Vec::with_capacity(self.setup.len() + 1);
        for (i, ins) in self.setup.iter().enumerate() {
            setup_states.push(cur);
            let out = Self::check_instruction(self.env, StageKind::Setup, i, ins, &cur)?;
            cur[ins.target.index()] = Some(out);
        }
        setup_states.push(cur);
        let entry = cur;
        let mut iter_states = Vec::with_capacity(self.iter.len() + 1);
        let mut written = [false; 12];
        let mut exposed = [false; 12];
        for (i, ins) in self.iter.iter().enumerate() {
            iter_states.push(cur);
            for r in ins.reads() {
                if !written[r.index()] {
                    exposed[r.index()] = true;
                }
            }
            let out = Self::check_instruction(self.env, StageKind::Iteration, i, ins, &cur)?;
            cur[ins.target.index()] = Some(out);
            written[ins.target.index()] = true;
        }
        iter_states.push(cur);
        for r in ALL_REGS {
            let i = r.index();
            if exposed[i] && written[i] && entry[i] != cur[i] {
                return Err(LegalityError::LoopShape {
                    reg: r,
                    start: entry[i].expect("exposed read of an available register"),
                    end: cur[i].expect("written register"),
                });
            }
        }
        Ok(ShapeTrace {
            setup: setup_states,
            iter: iter_states,
        })
    }

    pub fn check(&self, max_len: usize) -> Result<(), LegalityError> {
        if self.len() > max_len {
            return Err(LegalityError::TooLong {
                len: self.len(),
                max: max_len,
            });
        }
        self.typecheck().map(|_| ())
    }

    /// Registers written anywhere in the program.
    pub fn written(&self) -> [bool; 12] {
        let mut w = [false; 12];
        for ins in self.setup.iter().chain(&self.iter) {
            w[ins.target.index()] = true;
        }
        w
    }

    fn with_inserted(&self, stage: StageKind, pos: usize, instr: Instruction) -> Program {
        let mut p = self.clone();
        p.stage_mut(stage).insert(pos, instr);
        p
    }

    /// Every legal edit of this state, in a fixed order: setup positions
    /// first, then iteration positions, each scanning opcodes in library
    /// order, operands in register order and targets in pool order.
    /// `TERMINATE` comes last when the iteration stage is non-empty.
    pub fn legal_actions(&self, max_len: usize) -> Vec<Action> {
        let mut out = Vec::new();
        let trace = match self.typecheck() {
            Ok(t) => t,
            Err(_) => return out,
        };
        if self.len() >= max_len {
            if !self.iter.is_empty() {
                out.push(Action::Terminate);
            }
            return out;
        }
        let written = self.written();
        for stage in [StageKind::Setup, StageKind::Iteration] {
            let states = match stage {
                StageKind::Setup => &trace.setup,
                StageKind::Iteration => &trace.iter,
            };
            for (pos, shapes) in states.iter().enumerate() {
                self.enumerate_at(stage, pos, shapes, &written, &mut out);
            }
        }
        if !self.iter.is_empty() {
            out.push(Action::Terminate);
        }
        out
    }

    fn enumerate_at(
        &self,
        stage: StageKind,
        pos: usize,
        shapes: &RegShapes,
        written: &[bool; 12],
        out: &mut Vec<Action>,
    ) {
        let env = self.env;
        let avail: Vec<Reg> = ALL_REGS
            .iter()
            .copied()
            .filter(|r| shapes[r.index()].is_some())
            .collect();
        for &op in env.ops() {
            if op == Opcode::DoNothing || !env.allows(op, stage) {
                continue;
            }
            for &a in &avail {
                let sa = shapes[a.index()].unwrap();
                let seconds: Vec<Option<Reg>> = match op.arity() {
                    Arity::Unary => vec![None],
                    Arity::Binary => avail.iter().map(|r| Some(*r)).collect(),
                    Arity::UnaryOrBinary => std::iter::once(None)
                        .chain(avail.iter().map(|r| Some(*r)))
                        .collect(),
                };
                for b in seconds {
                    let sb = b.map(|r| shapes[r.index()].unwrap());
                    let Some(outs) = op.infer(env, sa, sb) else {
                        continue;
                    };
                    if let (true, Some(b)) = (op.is_commutative(), b) {
                        if sb == Some(sa) && b.name() < a.name() {
                            continue;
                        }
                    }
                    let class = RegClass::of_shape(outs);
                    let pool = class.pool();
                    let mut targets: Vec<Reg> =
                        pool.iter().copied().filter(|r| written[r.index()]).collect();
                    if let Some(fresh) = pool.iter().copied().find(|r| !written[r.index()]) {
                        targets.push(fresh);
                    }
                    targets.sort();
                    for t in targets {
                        let instr = Instruction::new(t, op, a, b);
                        let cand = self.with_inserted(stage, pos, instr);
                        if cand.typecheck().is_ok() {
                            out.push(Action::Insert { stage, pos, instr });
                        }
                    }
                }
            }
        }
    }

    /// Applies an action and normalizes the result with dead-code
    /// elimination. Returns the new program and whether it is terminal.
    pub fn apply_action(&self, action: &Action, max_len: usize) -> Result<(Program, bool), LegalityError> {
        match action {
            Action::Terminate => {
                if self.iter.is_empty() {
                    return Err(LegalityError::Action(
                        "TERMINATE needs a non-empty iteration stage".into(),
                    ));
                }
                Ok((self.clone(), true))
            }
            Action::Insert { stage, pos, instr } => {
                if *pos > self.stage(*stage).len() {
                    return Err(LegalityError::Action(format!(
                        "insertion position {pos} is past the end of the stage"
                    )));
                }
                if self.len() >= max_len {
                    return Err(LegalityError::TooLong {
                        len: self.len() + 1,
                        max: max_len,
                    });
                }
                let cand = self.with_inserted(*stage, *pos, *instr);
                cand.typecheck()?;
                Ok((super::dce::eliminate_dead_code(&cand), false))
            }
        }
    }
}

/// Register shapes before each instruction (and after the last one) of both
/// stages.
#[derive(Clone, Debug)]
pub struct ShapeTrace {
    pub setup: Vec<RegShapes>,
    pub iter: Vec<RegShapes>,
}

impl ShapeTrace {
    /// Shapes after the whole iteration stage.
    pub fn exit(&self) -> &RegShapes {
        self.iter.last().expect("at least one state")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ins(t: Reg, op: Opcode, a: Reg, b: Option<Reg>) -> Instruction {
        Instruction::new(t, op, a, b)
    }

    #[test]
    fn empty_linear_contains_first_landweber_step() {
        let p = Program::empty(Env::Linear);
        let acts = p.legal_actions(DEFAULT_MAX_LEN);
        let want = Action::Insert {
            stage: StageKind::Iteration,
            pos: 0,
            instr: ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
        };
        assert!(acts.contains(&want));
        assert!(!acts.contains(&Action::Terminate));
    }

    #[test]
    fn commutative_pairs_appear_once() {
        let p = Program {
            env: Env::Linear,
            setup: vec![],
            iter: vec![
                ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
                ins(Reg::V2, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
            ],
        };
        let acts = p.legal_actions(DEFAULT_MAX_LEN);
        let count = |a: Reg, b: Reg| {
            acts.iter()
                .filter(|act| match act {
                    Action::Insert { instr, pos: 2, stage: StageKind::Iteration } => {
                        instr.op == Opcode::VecVecAdd
                            && instr.a == Operand::Reg(a)
                            && instr.b == Some(Operand::Reg(b))
                            && instr.target == Reg::V3
                    }
                    _ => false,
                })
                .count()
        };
        assert_eq!(count(Reg::V1, Reg::V2) + count(Reg::V2, Reg::V1), 1);
    }

    #[test]
    fn max_length_only_terminates() {
        let mut p = Program::empty(Env::Linear);
        for _ in 0..DEFAULT_MAX_LEN {
            p.iter.push(ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)));
        }
        assert_eq!(p.legal_actions(DEFAULT_MAX_LEN), vec![Action::Terminate]);
    }

    #[test]
    fn read_only_target_is_rejected() {
        let p = Program {
            env: Env::Linear,
            setup: vec![],
            iter: vec![ins(Reg::A, Opcode::Sketch, Reg::A, None)],
        };
        assert!(matches!(
            p.typecheck(),
            Err(LegalityError::StageRestricted { .. }) | Err(LegalityError::ReadOnlyTarget { .. })
        ));
        let p = Program {
            env: Env::Linear,
            setup: vec![ins(Reg::A, Opcode::Sketch, Reg::A, None)],
            iter: vec![],
        };
        assert!(matches!(p.typecheck(), Err(LegalityError::ReadOnlyTarget { .. })));
    }

    #[test]
    fn loop_carried_shape_change_is_illegal() {
        // v1 is read at iteration entry as VEC(n) and leaves as VEC(m).
        let p = Program {
            env: Env::Linear,
            setup: vec![ins(Reg::V1, Opcode::VecMatMul, Reg::B, Some(Reg::A))],
            iter: vec![
                ins(Reg::V2, Opcode::VecVecAdd, Reg::V1, Some(Reg::X)),
                ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X)),
            ],
        };
        assert!(matches!(p.typecheck(), Err(LegalityError::LoopShape { .. })));
    }

    #[test]
    fn terminate_marks_terminal() {
        let p = Program {
            env: Env::Linear,
            setup: vec![],
            iter: vec![ins(Reg::V1, Opcode::MatVecMul, Reg::A, Some(Reg::X))],
        };
        let (q, term) = p.apply_action(&Action::Terminate, DEFAULT_MAX_LEN).unwrap();
        assert!(term);
        assert_eq!(q, p);
    }
}
