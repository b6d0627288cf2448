//! Operator library and shape signatures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Dim, Shape};

/// Problem environment. Selects the operator library and the update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Env {
    Linear,
    Logistic,
    Eigen,
}

impl Env {
    pub fn name(&self) -> &'static str {
        match self {
            Env::Linear => "LINEAR",
            Env::Logistic => "LOGISTIC",
            Env::Eigen => "EIGEN",
        }
    }

    /// Row label of the system matrix.
    pub fn system_rows(&self) -> Dim {
        match self {
            Env::Eigen => Dim::N,
            _ => Dim::M,
        }
    }

    /// Rank of a dimension label in the size order of this environment.
    ///
    /// For least-squares style problems `n <= s <= m`; for eigenproblems the
    /// sketch compresses the only dimension, so `s <= n`. `k` counts sampled
    /// rows and sits just below `m`.
    fn rank(&self, d: Dim) -> u8 {
        match (self, d) {
            (Env::Eigen, Dim::S) => 0,
            (Env::Eigen, Dim::K) => 0,
            (Env::Eigen, Dim::N) => 1,
            (Env::Eigen, Dim::M) => 2,
            (_, Dim::N) => 0,
            (_, Dim::S) => 1,
            (_, Dim::K) => 1,
            (_, Dim::M) => 2,
        }
    }

    /// Whether `a <= b` holds for every instance of this environment.
    pub fn dim_le(&self, a: Dim, b: Dim) -> bool {
        a == b || self.rank(a) < self.rank(b)
    }

    pub fn ops(&self) -> &'static [Opcode] {
        use Opcode::*;
        const LINEAR: &[Opcode] = &[
            VecVecAdd,
            VecVecSub,
            VecVecDot,
            MatVecMul,
            VecMatMul,
            ScalarVecMul,
            ScalarDiv,
            MatMatMul,
            MatMatTransMul,
            MatTransMatMul,
            MatInv,
            TriangularSolve,
            Hhqr,
            Sketch,
            Subsampling,
            LeverageScore,
            DoNothing,
        ];
        const LOGISTIC: &[Opcode] = &[
            VecVecAdd,
            VecVecSub,
            VecVecDot,
            MatVecMul,
            VecMatMul,
            ScalarVecMul,
            ScalarDiv,
            MatMatMul,
            MatMatTransMul,
            MatTransMatMul,
            MatInv,
            TriangularSolve,
            Hhqr,
            Sketch,
            Subsampling,
            LeverageScore,
            DoNothing,
            Sigmoid,
            DiagScale,
            ElemSqrt,
            LinearSolve,
        ];
        const EIGEN: &[Opcode] = &[
            VecVecAdd,
            VecVecSub,
            VecVecDot,
            MatVecMul,
            VecMatMul,
            ScalarVecMul,
            ScalarDiv,
            MatMatMul,
            MatMatTransMul,
            MatTransMatMul,
            MatInv,
            TriangularSolve,
            Hhqr,
            Sketch,
            Subsampling,
            LeverageScore,
            DoNothing,
            VecNormalize,
        ];
        match self {
            Env::Linear => LINEAR,
            Env::Logistic => LOGISTIC,
            Env::Eigen => EIGEN,
        }
    }

    pub fn has_op(&self, op: Opcode) -> bool {
        self.ops().contains(&op)
    }

    /// Whether `op` may appear in the given stage.
    pub fn allows(&self, op: Opcode, stage: StageKind) -> bool {
        if stage == StageKind::Setup {
            return true;
        }
        use Opcode::*;
        match self {
            Env::Linear => !matches!(op, Sketch | Hhqr | MatInv),
            Env::Logistic => true,
            Env::Eigen => !matches!(op, Hhqr | MatInv),
        }
    }
}

impl fmt::Display for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Env {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LINEAR" => Ok(Env::Linear),
            "LOGISTIC" => Ok(Env::Logistic),
            "EIGEN" => Ok(Env::Eigen),
            other => Err(format!("unknown environment `{other}`")),
        }
    }
}

/// Program stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageKind {
    Setup,
    Iteration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    VecVecAdd,
    VecVecSub,
    VecVecDot,
    MatVecMul,
    VecMatMul,
    ScalarVecMul,
    ScalarDiv,
    MatMatMul,
    MatMatTransMul,
    MatTransMatMul,
    MatInv,
    TriangularSolve,
    Hhqr,
    Sketch,
    Subsampling,
    LeverageScore,
    DoNothing,
    Sigmoid,
    DiagScale,
    ElemSqrt,
    LinearSolve,
    VecNormalize,
}

/// How many operands an opcode takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Unary,
    Binary,
    /// Second operand may be `NONE`.
    UnaryOrBinary,
}

/// Operator category.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Arithmetic,
    Factorization,
    Randomized,
    Nonlinear,
    Control,
}

pub const ALL_OPCODES: [Opcode; 22] = [
    Opcode::VecVecAdd,
    Opcode::VecVecSub,
    Opcode::VecVecDot,
    Opcode::MatVecMul,
    Opcode::VecMatMul,
    Opcode::ScalarVecMul,
    Opcode::ScalarDiv,
    Opcode::MatMatMul,
    Opcode::MatMatTransMul,
    Opcode::MatTransMatMul,
    Opcode::MatInv,
    Opcode::TriangularSolve,
    Opcode::Hhqr,
    Opcode::Sketch,
    Opcode::Subsampling,
    Opcode::LeverageScore,
    Opcode::DoNothing,
    Opcode::Sigmoid,
    Opcode::DiagScale,
    Opcode::ElemSqrt,
    Opcode::LinearSolve,
    Opcode::VecNormalize,
];

impl Opcode {
    pub fn name(&self) -> &'static str {
        use Opcode::*;
        match self {
            VecVecAdd => "VEC_VEC_ADD",
            VecVecSub => "VEC_VEC_SUB",
            VecVecDot => "VEC_VEC_DOT",
            MatVecMul => "MAT_VEC_MUL",
            VecMatMul => "VEC_MAT_MUL",
            ScalarVecMul => "SCALAR_VEC_MUL",
            ScalarDiv => "SCALAR_DIV",
            MatMatMul => "MAT_MAT_MUL",
            MatMatTransMul => "MAT_MAT_TRANS_MUL",
            MatTransMatMul => "MAT_TRANS_MAT_MUL",
            MatInv => "MAT_INV",
            TriangularSolve => "TRIANGULAR_SOLVE",
            Hhqr => "HHQR",
            Sketch => "SKETCH",
            Subsampling => "SUBSAMPLING",
            LeverageScore => "LEVERAGE_SCORE",
            DoNothing => "DO_NOTHING",
            Sigmoid => "SIGMOID",
            DiagScale => "DIAG_SCALE",
            ElemSqrt => "ELEM_SQRT",
            LinearSolve => "LINEAR_SOLVE",
            VecNormalize => "VEC_NORMALIZE",
        }
    }

    pub fn arity(&self) -> Arity {
        use Opcode::*;
        match self {
            MatInv | Hhqr | Sketch | LeverageScore | DoNothing | Sigmoid | ElemSqrt => Arity::Unary,
            Subsampling | VecNormalize => Arity::UnaryOrBinary,
            _ => Arity::Binary,
        }
    }

    pub fn category(&self) -> Category {
        use Opcode::*;
        match self {
            MatInv | TriangularSolve | Hhqr | LinearSolve => Category::Factorization,
            Sketch | Subsampling | LeverageScore => Category::Randomized,
            Sigmoid | ElemSqrt | VecNormalize => Category::Nonlinear,
            DoNothing => Category::Control,
            _ => Category::Arithmetic,
        }
    }

    /// Operand order does not matter when both operands share a shape.
    pub fn is_commutative(&self) -> bool {
        matches!(self, Opcode::VecVecAdd | Opcode::VecVecDot | Opcode::DiagScale)
    }

    /// Whether the opcode draws random numbers.
    pub fn is_stochastic(&self) -> bool {
        matches!(self, Opcode::Sketch | Opcode::Subsampling)
    }

    /// Output shape for the given operand shapes, or `None` if they do not
    /// unify with any signature alternative.
    pub fn infer(&self, env: Env, a: Shape, b: Option<Shape>) -> Option<Shape> {
        use Opcode::*;
        use Shape::*;
        let tall = |r: Dim, c: Dim| env.dim_le(c, r);
        match (self, a, b) {
            (VecVecAdd | VecVecSub, Vec(d), Some(Vec(e))) if d == e => Some(Vec(d)),
            (VecVecDot, Vec(d), Some(Vec(e))) if d == e => Some(Scalar),
            (MatVecMul, Mat(r, c), Some(Vec(d))) if c == d => Some(Vec(r)),
            (VecMatMul, Vec(d), Some(Mat(r, c))) if d == r => Some(Vec(c)),
            (ScalarVecMul, Scalar, Some(Vec(d))) => Some(Vec(d)),
            (ScalarDiv, Vec(d), Some(Scalar)) => Some(Vec(d)),
            (ScalarDiv, Scalar, Some(Scalar)) => Some(Scalar),
            (MatMatMul, Mat(r, c), Some(Mat(c2, k))) if c == c2 => Some(Mat(r, k)),
            (MatMatTransMul, Mat(r, c), Some(Mat(k, c2))) if c == c2 => Some(Mat(r, k)),
            (MatTransMatMul, Mat(c, r), Some(Mat(c2, k))) if c == c2 => Some(Mat(r, k)),
            (MatInv, Mat(r, c), None) if r == c => Some(Mat(r, c)),
            (TriangularSolve, Mat(r, c), Some(Vec(d))) if r == c && c == d => Some(Vec(c)),
            (Hhqr, Mat(r, c), None) if tall(r, c) => Some(Mat(c, c)),
            (Sketch, Mat(r, _), None) if env.dim_le(Dim::S, r) && r != Dim::S => {
                Some(Mat(Dim::S, r))
            }
            (Sketch, Vec(r), None) if env.dim_le(Dim::S, r) && r != Dim::S => Some(Vec(Dim::S)),
            (Subsampling, Vec(r), None) if r == env.system_rows() => Some(Vec(r)),
            (Subsampling, Mat(r, c), None) if r == env.system_rows() => Some(Mat(r, c)),
            (Subsampling, Vec(r), Some(Vec(w))) if r == env.system_rows() && w == r => {
                Some(Vec(r))
            }
            (Subsampling, Mat(r, c), Some(Vec(w))) if r == env.system_rows() && w == r => {
                Some(Mat(r, c))
            }
            (LeverageScore, Mat(r, _), None) if r == env.system_rows() => Some(Vec(r)),
            (Sigmoid | ElemSqrt, Vec(d), None) => Some(Vec(d)),
            (DiagScale, Vec(d), Some(Vec(e))) if d == e => Some(Vec(d)),
            (DiagScale, Mat(r, c), Some(Vec(d))) if r == d => Some(Mat(r, c)),
            (LinearSolve, Mat(r, c), Some(Vec(d))) if c == d && tall(r, c) => Some(Vec(c)),
            (VecNormalize, Vec(d), None) => Some(Vec(d)),
            (VecNormalize, Vec(d), Some(Vec(_))) => Some(Vec(d)),
            _ => None,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Opcode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_OPCODES
            .iter()
            .find(|op| op.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown opcode `{s}`"))
    }
}
