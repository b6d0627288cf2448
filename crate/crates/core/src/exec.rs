//! Program execution, step-size selection and per-environment metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::instance::{logistic_loss, ProblemInstance};
use crate::ir::{Env, Instruction, Opcode, Operand, Program, Reg, StageKind};
use crate::rng::SeededStream;
use crate::tensor::{self, DenseValue, FlopCounter, Matrix, StepSamplingContext, TensorError};

/// Default search-time step-size grid.
pub const SEARCH_GRID: [f64; 3] = [0.01, 0.1, 1.0];
/// Seven-point reporting grid.
pub const REPORT_GRID: [f64; 7] = [0.01, 0.03, 0.07, 0.1, 0.3, 0.7, 1.0];

const SETUP_STEP: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Ok,
    Diverged,
    NumericError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    /// Metric per step, starting at `x₀`: relative residual, logistic loss
    /// or Rayleigh quotient.
    pub residuals: Vec<f64>,
    pub flops: u64,
    pub setup_flops: u64,
    pub final_x: Vec<f64>,
    pub status: Status,
    pub eta: f64,
    /// Why the run stopped early, if it did.
    pub message: Option<String>,
}

impl ExecutionTrace {
    pub fn final_metric(&self) -> f64 {
        *self.residuals.last().expect("metric at x0 is always recorded")
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

/// Execution knobs. Sizes left as `None` follow the per-environment
/// defaults in [`ExecConfig::sketch_size`] and [`ExecConfig::subsample_size`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecConfig {
    pub iterations: usize,
    pub sketch_rows: Option<usize>,
    pub subsample_rows: Option<usize>,
    /// Runs predicted to exceed this multiple of the dense-QR cost stop
    /// with a numeric error.
    pub flop_cap_factor: Option<f64>,
    /// Largest register value, in entries.
    pub max_entries: usize,
    pub divergence_factor: f64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            sketch_rows: None,
            subsample_rows: None,
            flop_cap_factor: Some(100.0),
            max_entries: 25_000_000,
            divergence_factor: 1e3,
        }
    }
}

impl ExecConfig {
    pub fn for_env(env: Env) -> Self {
        let iterations = match env {
            Env::Linear => 50,
            Env::Logistic => 20,
            Env::Eigen => 100,
        };
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn with_iterations(mut self, t: usize) -> Self {
        self.iterations = t;
        self
    }

    pub fn sketch_size(&self, env: Env, m: usize, n: usize) -> usize {
        if let Some(s) = self.sketch_rows {
            return s;
        }
        match env {
            Env::Linear => (40 * n).min(m / 2).max(n).min(m),
            Env::Logistic => (4 * n).min(m),
            Env::Eigen => (n / 4).max(1),
        }
    }

    pub fn subsample_size(&self, n: usize) -> usize {
        self.subsample_rows.unwrap_or(4 * n).max(1)
    }
}

/// Dense-QR reference cost `2mn²` (`2n³` for eigen problems).
pub fn base_flops(inst: &ProblemInstance) -> f64 {
    let (m, n) = (inst.m() as f64, inst.n() as f64);
    match inst.env {
        Env::Eigen => 2.0 * n * n * n,
        _ => 2.0 * m * n * n,
    }
}

/// `vᵀAv / vᵀv`.
pub fn rayleigh_quotient(a: &Matrix, v: &[f64]) -> Result<f64, TensorError> {
    let vv: f64 = v.iter().map(|x| x * x).sum();
    if vv == 0.0 || !vv.is_finite() {
        return Err(TensorError::Degenerate("Rayleigh quotient of a zero vector".into()));
    }
    let av = a.apply(v);
    Ok(av.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / vv)
}

/// The environment metric at iterate `x`.
pub fn metric(inst: &ProblemInstance, x: &[f64]) -> Result<f64, TensorError> {
    match inst.env {
        Env::Linear => {
            let r = inst.a.apply(x);
            let num = r
                .iter()
                .zip(&inst.b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(num / tensor::norm2(&inst.b))
        }
        Env::Logistic => Ok(logistic_loss(
            &inst.a,
            inst.labels.as_ref().expect("logistic instance has labels"),
            x,
        )),
        Env::Eigen => rayleigh_quotient(&inst.a, x),
    }
}

/// Starting iterate: zeros, or the normalized all-ones vector for eigen
/// problems.
pub fn initial_x(inst: &ProblemInstance) -> Vec<f64> {
    let n = inst.n();
    match inst.env {
        Env::Eigen => vec![1.0 / (n as f64).sqrt(); n],
        _ => vec![0.0; n],
    }
}

#[derive(Clone, Debug)]
struct Slot {
    value: DenseValue,
    /// Produced by `SKETCH` from a matrix, so products with it are charged
    /// as fast transforms.
    sketch: bool,
}

#[derive(Debug, thiserror::Error)]
enum StepError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("register {0} holds the wrong kind of value")]
    Kind(Reg),
}

/// Register file plus the per-run random state.
#[derive(Clone)]
struct Machine<'a> {
    inst: &'a ProblemInstance,
    regs: Vec<Option<Slot>>,
    flops: FlopCounter,
    ctx: StepSamplingContext,
    rng: SeededStream,
    sketches: HashMap<(u64, usize, usize), Matrix>,
    sketch_rows: usize,
    subsample_rows: usize,
    max_entries: usize,
    op_budget: f64,
}

impl<'a> Machine<'a> {
    fn new(inst: &'a ProblemInstance, cfg: &ExecConfig, rng: SeededStream) -> Self {
        let mut regs: Vec<Option<Slot>> = vec![None; 12];
        regs[Reg::A.index()] = Some(Slot {
            value: DenseValue::Matrix(inst.a.clone()),
            sketch: false,
        });
        if inst.env != Env::Eigen {
            regs[Reg::B.index()] = Some(Slot {
                value: DenseValue::Vector(inst.b.clone()),
                sketch: false,
            });
        }
        let cap = cfg
            .flop_cap_factor
            .map_or(f64::INFINITY, |f| f * base_flops(inst));
        Self {
            inst,
            regs,
            flops: FlopCounter::new(),
            ctx: StepSamplingContext::new(),
            rng,
            sketches: HashMap::new(),
            sketch_rows: cfg.sketch_size(inst.env, inst.m(), inst.n()),
            subsample_rows: cfg.subsample_size(inst.n()),
            max_entries: cfg.max_entries,
            op_budget: cap,
        }
    }

    fn set_x(&mut self, x: &[f64]) {
        self.regs[Reg::X.index()] = Some(Slot {
            value: DenseValue::Vector(x.to_vec()),
            sketch: false,
        });
    }

    fn get(&self, o: Operand) -> Result<(&DenseValue, bool), StepError> {
        match o {
            Operand::Reg(r) => self.regs[r.index()]
                .as_ref()
                .map(|s| (&s.value, s.sketch))
                .ok_or(StepError::Kind(r)),
            Operand::Const(_) => unreachable!("constants are read through scalar()"),
        }
    }

    fn vector(&self, o: Operand) -> Result<&[f64], StepError> {
        let (v, _) = self.get(o)?;
        v.as_vector().ok_or(StepError::Kind(o.reg().expect("register")))
    }

    fn matrix(&self, o: Operand) -> Result<(&Matrix, bool), StepError> {
        let (v, s) = self.get(o)?;
        v.as_matrix()
            .map(|m| (m, s))
            .ok_or(StepError::Kind(o.reg().expect("register")))
    }

    fn scalar(&self, o: Operand) -> Result<f64, StepError> {
        match o {
            Operand::Const(c) => Ok(c),
            Operand::Reg(r) => self.get(o)?.0.as_scalar().ok_or(StepError::Kind(r)),
        }
    }

    fn guard(&self, entries: usize, cost: f64) -> Result<(), StepError> {
        if entries > self.max_entries {
            return Err(StepError::Resource(format!(
                "value with {entries} entries exceeds the {} limit",
                self.max_entries
            )));
        }
        if cost > self.op_budget {
            return Err(StepError::Resource(format!(
                "operation costing {cost:.3e} FLOPs exceeds the budget"
            )));
        }
        Ok(())
    }

    fn sketch_for(&mut self, step: u64, s: usize, r: usize) -> Result<Matrix, StepError> {
        if let Some(m) = self.sketches.get(&(step, s, r)) {
            self.flops.add(r as u64);
            return Ok(m.clone());
        }
        self.guard(s * r, (s * r) as f64)?;
        let stream = self.rng.derive(&[0x5ce7, step, s as u64, r as u64]);
        let m = tensor::sketch_matrix(s, r, &stream, &mut self.flops)?;
        self.sketches.insert((step, s, r), m.clone());
        Ok(m)
    }

    fn run(&mut self, ins: &Instruction, step: u64, passes: f64) -> Result<(), StepError> {
        use Opcode::*;
        let f = &mut FlopCounter::new();
        let mut sketch_out = false;
        let out = match ins.op {
            VecVecAdd | VecVecSub | VecVecDot => {
                let a = self.vector(ins.a)?;
                let b = self.vector(ins.b.expect("binary"))?;
                match ins.op {
                    VecVecAdd => DenseValue::Vector(tensor::vec_add(a, b, f)?),
                    VecVecSub => DenseValue::Vector(tensor::vec_sub(a, b, f)?),
                    _ => DenseValue::Scalar(tensor::dot(a, b, f)?),
                }
            }
            DiagScale => {
                let w = self.vector(ins.b.expect("binary"))?;
                match self.get(ins.a)?.0 {
                    DenseValue::Matrix(m) => DenseValue::Matrix(tensor::diag_scale_mat(m, w, f)?),
                    _ => DenseValue::Vector(tensor::diag_scale_vec(self.vector(ins.a)?, w, f)?),
                }
            }
            MatVecMul => {
                let (m, sk) = self.matrix(ins.a)?;
                let v = self.vector(ins.b.expect("binary"))?;
                self.guard(0, passes * 2.0 * (m.rows() * m.cols()) as f64)?;
                if sk {
                    DenseValue::Vector(tensor::sketch_apply_vec(m, v, f)?)
                } else {
                    DenseValue::Vector(tensor::matvec(m, v, f)?)
                }
            }
            VecMatMul => {
                let v = self.vector(ins.a)?;
                let (m, _) = self.matrix(ins.b.expect("binary"))?;
                self.guard(0, passes * 2.0 * (m.rows() * m.cols()) as f64)?;
                DenseValue::Vector(tensor::vecmat(v, m, f)?)
            }
            ScalarVecMul => {
                let c = self.scalar(ins.a)?;
                let v = self.vector(ins.b.expect("binary"))?;
                DenseValue::Vector(tensor::scalar_vec_mul(c, v, f)?)
            }
            ScalarDiv => {
                let c = self.scalar(ins.b.expect("binary"))?;
                match self.get(ins.a)?.0 {
                    DenseValue::Scalar(x) => {
                        if c == 0.0 {
                            return Err(TensorError::Singular { op: "scalar_div" }.into());
                        }
                        f.add(1);
                        DenseValue::Scalar(x / c)
                    }
                    _ => DenseValue::Vector(tensor::scalar_div(self.vector(ins.a)?, c, f)?),
                }
            }
            MatMatMul | MatMatTransMul | MatTransMatMul => {
                let (a, sk) = self.matrix(ins.a)?;
                let (b, _) = self.matrix(ins.b.expect("binary"))?;
                let (r, inner, c) = match ins.op {
                    MatMatMul => (a.rows(), a.cols(), b.cols()),
                    MatMatTransMul => (a.rows(), a.cols(), b.rows()),
                    _ => (a.cols(), a.rows(), b.cols()),
                };
                let cost = if sk && ins.op == MatMatMul {
                    2.0 * (inner * c) as f64 * (a.rows() as f64).log2().ceil()
                } else {
                    2.0 * (r * inner * c) as f64
                };
                self.guard(r * c, passes * cost)?;
                DenseValue::Matrix(match ins.op {
                    MatMatMul if sk => tensor::sketch_apply(a, b, f)?,
                    MatMatMul => tensor::mat_mat(a, b, f)?,
                    MatMatTransMul => tensor::mat_mat_trans(a, b, f)?,
                    _ => tensor::mat_trans_mat(a, b, f)?,
                })
            }
            MatInv => {
                let (a, _) = self.matrix(ins.a)?;
                self.guard(a.rows() * a.cols(), passes * 2.0 * (a.rows() as f64).powi(3))?;
                DenseValue::Matrix(tensor::inverse(a, f)?)
            }
            TriangularSolve => {
                let (u, _) = self.matrix(ins.a)?;
                let v = self.vector(ins.b.expect("binary"))?;
                DenseValue::Vector(tensor::triangular_solve(u, v, f)?)
            }
            Hhqr => {
                let (a, _) = self.matrix(ins.a)?;
                let (r, c) = (a.rows() as f64, a.cols() as f64);
                self.guard(a.cols() * a.cols(), passes * 2.0 * r * c * c)?;
                DenseValue::Matrix(tensor::hhqr(a, f)?.1)
            }
            Sketch => {
                let s = self.sketch_rows;
                match self.get(ins.a)?.0 {
                    DenseValue::Matrix(a) => {
                        let r = a.rows();
                        sketch_out = true;
                        DenseValue::Matrix(self.sketch_for(step, s, r)?)
                    }
                    DenseValue::Vector(v) => {
                        let v = v.clone();
                        let sk = self.sketch_for(step, s, v.len())?;
                        DenseValue::Vector(tensor::sketch_apply_vec(&sk, &v, f)?)
                    }
                    DenseValue::Scalar(_) => return Err(StepError::Kind(ins.a.reg().expect("register"))),
                }
            }
            Subsampling => {
                let weights = match ins.b {
                    None => None,
                    Some(w) => {
                        let w = self.vector(w)?;
                        let total: f64 = w.iter().map(|x| x.abs()).sum();
                        if total == 0.0 || !total.is_finite() {
                            return Err(TensorError::Degenerate(
                                "sampling weights sum to zero".into(),
                            )
                            .into());
                        }
                        Some(w.iter().map(|x| x.abs() / total).collect::<Vec<f64>>())
                    }
                };
                let (x, _) = self.get(ins.a)?;
                let x = x.clone();
                tensor::subsample_mask(
                    &x,
                    self.subsample_rows,
                    weights.as_deref(),
                    &mut self.ctx,
                    &self.rng,
                    f,
                )?
            }
            LeverageScore => {
                let (a, _) = self.matrix(ins.a)?;
                DenseValue::Vector(tensor::leverage_weights(a, f)?)
            }
            Sigmoid => DenseValue::Vector(tensor::sigmoid(self.vector(ins.a)?, f)?),
            ElemSqrt => DenseValue::Vector(tensor::elem_sqrt(self.vector(ins.a)?, f)?),
            LinearSolve => {
                let (m, _) = self.matrix(ins.a)?;
                let v = self.vector(ins.b.expect("binary"))?;
                let (r, c) = (m.rows() as f64, m.cols() as f64);
                self.guard(0, passes * 2.0 * r * c * c)?;
                DenseValue::Vector(tensor::gram_solve(m, v, f)?)
            }
            VecNormalize => {
                let v = self.vector(ins.a)?;
                match ins.b {
                    None => DenseValue::Vector(tensor::vec_normalize(v, f)?),
                    Some(w) => DenseValue::Vector(tensor::vec_normalize_by(v, self.vector(w)?, f)?),
                }
            }
            DoNothing => return Ok(()),
        };
        let spent = f.total();
        self.flops.add(spent);
        self.regs[ins.target.index()] = Some(Slot {
            value: out,
            sketch: sketch_out,
        });
        Ok(())
    }

    fn run_stage(&mut self, p: &Program, stage: StageKind, step: u64, passes: f64) -> Result<(), StepError> {
        for ins in p.stage(stage) {
            self.run(ins, step, passes)?;
        }
        Ok(())
    }
}

fn truncated(
    residuals: Vec<f64>,
    flops: u64,
    setup_flops: u64,
    x: Vec<f64>,
    status: Status,
    eta: f64,
    message: String,
) -> ExecutionTrace {
    ExecutionTrace {
        residuals,
        flops,
        setup_flops,
        final_x: x,
        status,
        eta,
        message: Some(message),
    }
}

fn iterate(mut m: Machine<'_>, p: &Program, eta: f64, cfg: &ExecConfig) -> ExecutionTrace {
    let inst = m.inst;
    let setup_flops = m.flops.total();
    let mut x = initial_x(inst);
    let r0 = match metric(inst, &x) {
        Ok(r) => r,
        Err(e) => {
            return truncated(vec![f64::NAN], setup_flops, setup_flops, x, Status::NumericError, eta, e.to_string())
        }
    };
    let mut residuals = Vec::with_capacity(cfg.iterations + 1);
    residuals.push(r0);
    let n = inst.n();
    let passes = cfg.iterations as f64;
    for t in 0..cfg.iterations {
        m.ctx.begin_step(t as u64);
        m.set_x(&x);
        if let Err(e) = m.run_stage(p, StageKind::Iteration, t as u64, passes) {
            let status = match e {
                StepError::Tensor(TensorError::NonFinite { .. }) => Status::Diverged,
                _ => Status::NumericError,
            };
            return truncated(residuals, m.flops.total(), setup_flops, x, status, eta, e.to_string());
        }
        let spent_pass = m.flops.total() - setup_flops;
        if t == 0 && setup_flops as f64 + passes * spent_pass as f64 > m.op_budget {
            return truncated(
                residuals,
                m.flops.total(),
                setup_flops,
                x,
                Status::NumericError,
                eta,
                "resource limit: run would exceed the FLOP budget".into(),
            );
        }
        let v1 = m.regs[Reg::V1.index()]
            .as_ref()
            .and_then(|s| s.value.as_vector())
            .filter(|v| v.len() == n);
        if let Some(v1) = v1 {
            match inst.env {
                Env::Eigen => x = v1.to_vec(),
                _ => {
                    for (xi, vi) in x.iter_mut().zip(v1) {
                        *xi -= eta * vi;
                    }
                    m.flops.add(2 * n as u64);
                }
            }
        }
        let r = match metric(inst, &x) {
            Ok(r) => r,
            Err(e) => {
                return truncated(residuals, m.flops.total(), setup_flops, x, Status::NumericError, eta, e.to_string())
            }
        };
        if !r.is_finite() || x.iter().any(|v| !v.is_finite()) {
            residuals.push(r);
            return truncated(residuals, m.flops.total(), setup_flops, x, Status::Diverged, eta, "non-finite iterate".into());
        }
        residuals.push(r);
        if inst.env != Env::Eigen && r > cfg.divergence_factor * r0 {
            return truncated(
                residuals,
                m.flops.total(),
                setup_flops,
                x,
                Status::Diverged,
                eta,
                format!("metric grew past {}x its initial value", cfg.divergence_factor),
            );
        }
    }
    ExecutionTrace {
        residuals,
        flops: m.flops.total(),
        setup_flops,
        final_x: x,
        status: Status::Ok,
        eta,
        message: None,
    }
}

fn setup_machine<'a>(
    p: &Program,
    inst: &'a ProblemInstance,
    cfg: &ExecConfig,
    rng: SeededStream,
) -> Result<Machine<'a>, (u64, String)> {
    let mut m = Machine::new(inst, cfg, rng);
    m.set_x(&initial_x(inst));
    m.ctx.begin_step(SETUP_STEP);
    match m.run_stage(p, StageKind::Setup, SETUP_STEP, 1.0) {
        Ok(()) => Ok(m),
        Err(e) => Err((m.flops.total(), e.to_string())),
    }
}

fn setup_failure(inst: &ProblemInstance, flops: u64, msg: String, eta: f64) -> ExecutionTrace {
    let x = initial_x(inst);
    let r0 = metric(inst, &x).unwrap_or(f64::NAN);
    truncated(vec![r0], flops, flops, x, Status::NumericError, eta, msg)
}

/// Runs setup once and `cfg.iterations` iteration passes.
pub fn execute(
    p: &Program,
    inst: &ProblemInstance,
    eta: f64,
    cfg: &ExecConfig,
    rng: &SeededStream,
) -> ExecutionTrace {
    match setup_machine(p, inst, cfg, *rng) {
        Ok(m) => iterate(m, p, eta, cfg),
        Err((flops, msg)) => setup_failure(inst, flops, msg, eta),
    }
}

/// First square `n x n` cache matrix left behind by the setup stage.
pub fn setup_preconditioner(
    p: &Program,
    inst: &ProblemInstance,
    cfg: &ExecConfig,
    rng: &SeededStream,
) -> Option<Matrix> {
    let m = setup_machine(p, inst, cfg, *rng).ok()?;
    let n = inst.n();
    [Reg::R1, Reg::R2, Reg::R3].iter().find_map(|r| {
        let written = p.setup.iter().any(|i| i.target == *r);
        let value = m.regs[r.index()].as_ref()?.value.as_matrix()?;
        (written && value.rows() == n && value.cols() == n).then(|| value.clone())
    })
}

fn rank(t: &ExecutionTrace) -> u8 {
    match t.status {
        Status::Ok => 0,
        Status::Diverged => 1,
        Status::NumericError => 2,
    }
}

/// Orientation-aware "smaller is better" score of a trace.
fn badness(env: Env, t: &ExecutionTrace) -> f64 {
    let v = t.final_metric();
    let v = if env == Env::Eigen { -v } else { v };
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Picks the best step size from `grid`. Setup runs once and every grid
/// point sees the same random stream. Eigen programs ignore the step size,
/// so they run once with the smallest grid value.
pub fn best_over_grid(
    p: &Program,
    inst: &ProblemInstance,
    grid: &[f64],
    cfg: &ExecConfig,
    rng: &SeededStream,
) -> ExecutionTrace {
    assert!(!grid.is_empty(), "step-size grid must be non-empty");
    let mut etas: Vec<f64> = grid.to_vec();
    etas.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    if inst.env == Env::Eigen || p.iter.is_empty() {
        etas.truncate(1);
    }
    let machine = match setup_machine(p, inst, cfg, *rng) {
        Ok(m) => m,
        Err((flops, msg)) => return setup_failure(inst, flops, msg, etas[0]),
    };
    let mut best: Option<ExecutionTrace> = None;
    for eta in etas {
        let t = iterate(machine.clone(), p, eta, cfg);
        let better = match &best {
            None => true,
            Some(b) => {
                (rank(&t), badness(inst.env, &t)) < (rank(b), badness(inst.env, b))
            }
        };
        if better {
            best = Some(t);
        }
    }
    best.expect("grid is non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{gen_linear, Family, InstanceSpec};
    use crate::ir::parse_program;

    fn landweber() -> Program {
        parse_program("[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_VEC_SUB(v1, b)\n", None).unwrap()
    }

    fn psd() -> ProblemInstance {
        gen_linear(&InstanceSpec::new(Family::Psd, 5, 5).with_kappa(2.0), 7).unwrap()
    }

    #[test]
    fn landweber_decreases() {
        let inst = psd();
        let t = execute(&landweber(), &inst, 0.1, &ExecConfig::default(), &SeededStream::new(1));
        assert_eq!(t.status, Status::Ok);
        assert_eq!(t.residuals.len(), 51);
        assert!(t.residuals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn empty_iteration_is_constant() {
        let inst = psd();
        let p = Program::empty(Env::Linear);
        let t = execute(&p, &inst, 0.1, &ExecConfig::default(), &SeededStream::new(1));
        assert!(t.residuals.iter().all(|r| *r == 1.0));
    }

    #[test]
    fn huge_step_diverges() {
        let inst = gen_linear(&InstanceSpec::new(Family::MidCond, 60, 5), 1).unwrap();
        let gd = parse_program(
            "[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_VEC_SUB(v1, b)\nv1 <- VEC_MAT_MUL(v1, A)\n",
            None,
        )
        .unwrap();
        let t = execute(&gd, &inst, 1e3, &ExecConfig::default(), &SeededStream::new(1));
        assert_eq!(t.status, Status::Diverged);
        assert!(t.residuals.len() < 51);
    }

    #[test]
    fn grid_picks_best_and_ties_small() {
        let inst = psd();
        let cfg = ExecConfig::default();
        let rng = SeededStream::new(3);
        let best = best_over_grid(&landweber(), &inst, &REPORT_GRID, &cfg, &rng);
        for eta in REPORT_GRID {
            let t = execute(&landweber(), &inst, eta, &cfg, &rng);
            assert!(best.final_metric() <= t.final_metric());
        }
        let noop = parse_program("[SETUP]\n[ITER]\nv2 <- MAT_VEC_MUL(A, x)\n", None).unwrap();
        assert_eq!(best_over_grid(&noop, &inst, &REPORT_GRID, &cfg, &rng).eta, 0.01);
    }

    #[test]
    fn rayleigh_cases() {
        let a = Matrix::diag(&[3.0, 1.0]);
        assert_eq!(rayleigh_quotient(&a, &[1.0, 0.0]).unwrap(), 3.0);
        assert_eq!(rayleigh_quotient(&a, &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(rayleigh_quotient(&Matrix::identity(3), &[0.3, -2.0, 5.0]).unwrap(), 1.0);
        assert!(rayleigh_quotient(&a, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn deterministic() {
        let inst = gen_linear(&InstanceSpec::new(Family::LowCond, 200, 10), 2).unwrap();
        let p = parse_program(
            "[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_VEC_SUB(v1, b)\nv1 <- SUBSAMPLING(v1, NONE)\nv1 <- VEC_MAT_MUL(v1, A)\n",
            None,
        )
        .unwrap();
        let cfg = ExecConfig::default();
        let a = execute(&p, &inst, 0.1, &cfg, &SeededStream::new(9));
        let b = execute(&p, &inst, 0.1, &cfg, &SeededStream::new(9));
        assert_eq!(a, b);
        assert_eq!(a.status, Status::Ok);
    }
}
