//! Stage rewards built from execution traces.

use serde::{Deserialize, Serialize};

use crate::exec::{base_flops, best_over_grid, initial_x, metric, ExecConfig, ExecutionTrace, Status, REPORT_GRID};
use crate::instance::{generate, Ensemble, Family, InstanceSpec, ProblemInstance};
use crate::ir::{Env, Program};
use crate::rng::SeededStream;
use crate::tensor::{condition_number, Matrix};

/// Residuals below this are treated as converged when measuring decay.
pub const DECAY_FLOOR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub acc: f64,
    pub decay: f64,
    pub comp: f64,
    #[serde(default)]
    pub cond: f64,
}

impl RewardWeights {
    pub const fn new(acc: f64, decay: f64, comp: f64, cond: f64) -> Self {
        Self {
            acc,
            decay,
            comp,
            cond,
        }
    }

    /// Weights used by curriculum stage `index`.
    pub fn for_stage(index: usize) -> Self {
        if index < 3 {
            Self::new(5.0, 1.0, 1.0, 0.0)
        } else {
            Self::new(5.0, 1.0, 8.0, 0.0)
        }
    }

    pub fn sum(&self) -> f64 {
        self.acc + self.decay + self.comp + self.cond
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.acc, self.decay, self.comp, self.cond];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("reward weights must be finite and nonnegative".into());
        }
        if self.sum() <= 0.0 {
            return Err("at least one reward weight must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_decay: f64,
    pub r_comp: f64,
    pub r_cond: f64,
    pub total: f64,
    pub rho_max: f64,
    pub flops: u64,
}

fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Error sequence whose ratios define the decay component: the residual for
/// linear systems, the excess loss for logistic regression and the
/// eigenvalue gap for eigenproblems.
fn error_sequence(trace: &ExecutionTrace, inst: &ProblemInstance) -> Vec<f64> {
    match inst.env {
        Env::Linear => trace.residuals.iter().map(|r| r.max(DECAY_FLOOR)).collect(),
        Env::Logistic => {
            let star = inst.loss_star.unwrap_or(0.0);
            let scale = trace.residuals[0].abs().max(f64::MIN_POSITIVE);
            trace
                .residuals
                .iter()
                .map(|l| (l - star).max(DECAY_FLOOR * scale))
                .collect()
        }
        Env::Eigen => {
            let top = inst.lambda_max.unwrap_or(1.0);
            trace
                .residuals
                .iter()
                .map(|r| (top - r).max(DECAY_FLOOR * top.abs()))
                .collect()
        }
    }
}

/// `max_t e_{t+1} / e_t`, with ratios out of a zero error taken as 0.
pub fn rho_max(errors: &[f64]) -> f64 {
    errors
        .windows(2)
        .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
        .fold(0.0, f64::max)
}

/// Accuracy component on its own.
pub fn accuracy(trace: &ExecutionTrace, inst: &ProblemInstance) -> f64 {
    let last = trace.final_metric();
    match inst.env {
        Env::Linear => clamp01(-last.max(1e-16).log10() / 16.0),
        Env::Logistic => {
            let star = inst.loss_star.unwrap_or(0.0);
            let l0 = trace.residuals[0];
            let denom = l0 - star;
            let ratio = if denom > 0.0 { (last - star).max(0.0) / denom } else { 0.0 };
            clamp01(-ratio.max(1e-16).log10() / 16.0)
        }
        Env::Eigen => {
            let rho0 = trace.residuals[0];
            let top = inst.lambda_max.unwrap_or(1.0);
            if top - rho0 <= 0.0 {
                1.0
            } else {
                clamp01((last - rho0) / (top - rho0))
            }
        }
    }
}

/// Reward components for a finished trace; the conditioning term is left
/// at zero (see [`conditioning`]).
pub fn reward_components(trace: &ExecutionTrace, inst: &ProblemInstance, w: &RewardWeights) -> RewardBreakdown {
    if trace.status != Status::Ok {
        return RewardBreakdown {
            flops: trace.flops,
            rho_max: f64::INFINITY,
            ..Default::default()
        };
    }
    let rho = rho_max(&error_sequence(trace, inst));
    let r_acc = accuracy(trace, inst);
    let r_decay = clamp01(1.0 - (rho - 1.0).max(0.0));
    let r_comp = if trace.flops == 0 {
        1.0
    } else {
        clamp01(1.0 - (trace.flops as f64 / base_flops(inst)).log10() / 3.0)
    };
    let mut b = RewardBreakdown {
        r_acc,
        r_decay,
        r_comp,
        r_cond: 0.0,
        total: 0.0,
        rho_max: rho,
        flops: trace.flops,
    };
    b.total = weighted_reward(&b, w);
    b
}

pub fn weighted_reward(b: &RewardBreakdown, w: &RewardWeights) -> f64 {
    w.acc * b.r_acc + w.decay * b.r_decay + w.comp * b.r_comp + w.cond * b.r_cond
}

/// `clamp(1 − log10 κ(AM) / log10 κ(A))` for a preconditioner `M`.
pub fn conditioning(a: &Matrix, m: &Matrix) -> f64 {
    if m.rows() != a.cols() || m.rows() != m.cols() {
        return 0.0;
    }
    let (Ok(ka), Ok(kam)) = (condition_number(a), condition_number(&a.matmul(m))) else {
        return 0.0;
    };
    if ka.kappa <= 1.0 {
        return 0.0;
    }
    clamp01(1.0 - kam.kappa.log10() / ka.kappa.log10())
}

/// Best-of-grid execution followed by scoring. The conditioning term is
/// only computed when its weight is positive.
pub fn evaluate(
    p: &Program,
    inst: &ProblemInstance,
    grid: &[f64],
    cfg: &ExecConfig,
    w: &RewardWeights,
    rng: &SeededStream,
) -> (ExecutionTrace, RewardBreakdown) {
    let trace = best_over_grid(p, inst, grid, cfg, rng);
    let mut b = reward_components(&trace, inst, w);
    if w.cond > 0.0 && trace.status == Status::Ok {
        if let Some(m) = crate::exec::setup_preconditioner(p, inst, cfg, rng) {
            b.r_cond = conditioning(&inst.a, &m);
            b.total = weighted_reward(&b, w);
        }
    }
    (trace, b)
}

/// Reporting profile of three linear environments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxProfile {
    Ht,
    NonHt,
}

/// Sizes used to build the auxiliary environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub m: usize,
    pub n: usize,
    pub psd_n: usize,
    pub env_weights: [f64; 3],
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            m: 1000,
            n: 20,
            psd_n: 5,
            env_weights: [1.0, 5.0, 10.0],
        }
    }
}

impl AuxProfile {
    pub fn specs(self, c: &AuxConfig) -> [InstanceSpec; 3] {
        let lev = match self {
            AuxProfile::Ht => Ensemble::HeavyTailed,
            AuxProfile::NonHt => Ensemble::Gaussian,
        };
        [
            InstanceSpec::new(Family::Psd, c.psd_n, c.psd_n),
            InstanceSpec::new(Family::LowCond, c.m, c.n).with_leverage(lev),
            InstanceSpec::new(Family::MidCond, c.m, c.n).with_leverage(lev),
        ]
    }
}

/// Normalized environment-weighted reward over a profile, evaluated on the
/// seven-point grid with weights (5, 1, 8, 0). Used for reporting only.
pub fn aux_weighted_reward(p: &Program, profile: AuxProfile, c: &AuxConfig, seed: u64) -> f64 {
    let w = RewardWeights::new(5.0, 1.0, 8.0, 0.0);
    let total_w: f64 = c.env_weights.iter().sum();
    let stream = SeededStream::new(seed);
    profile
        .specs(c)
        .iter()
        .zip(c.env_weights)
        .enumerate()
        .map(|(i, (spec, ew))| {
            let inst = match generate(spec, seed.wrapping_add(i as u64)) {
                Ok(inst) => inst,
                Err(_) => return 0.0,
            };
            let cfg = ExecConfig::for_env(Env::Linear);
            let (_, b) = evaluate(p, &inst, &REPORT_GRID, &cfg, &w, &stream.derive(&[i as u64]));
            ew / total_w * b.total
        })
        .sum()
}

/// Reward of doing nothing: the score of the initial iterate.
pub fn baseline_metric(inst: &ProblemInstance) -> f64 {
    metric(inst, &initial_x(inst)).unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::gen_linear;

    fn trace(res: Vec<f64>, flops: u64, status: Status) -> ExecutionTrace {
        ExecutionTrace {
            final_x: vec![],
            residuals: res,
            flops,
            setup_flops: 0,
            status,
            eta: 0.1,
            message: None,
        }
    }

    fn inst() -> ProblemInstance {
        gen_linear(&InstanceSpec::new(Family::LowCond, 40, 4), 1).unwrap()
    }

    #[test]
    fn boundary_saturation() {
        let i = inst();
        let f = base_flops(&i) as u64;
        let w = RewardWeights::new(5.0, 1.0, 8.0, 0.0);
        let b = reward_components(&trace(vec![1.0, 1e-16], f, Status::Ok), &i, &w);
        assert_eq!((b.r_acc, b.r_decay, b.r_comp), (1.0, 1.0, 1.0));
        assert_eq!(b.total, 14.0);
    }

    #[test]
    fn half_accuracy_at_1e8() {
        let i = inst();
        let w = RewardWeights::new(1.0, 0.0, 0.0, 0.0);
        let b = reward_components(&trace(vec![1.0, 1e-8], 10, Status::Ok), &i, &w);
        assert!((b.r_acc - 0.5).abs() < 1e-15);
        assert_eq!(b.total, b.r_acc);
    }

    #[test]
    fn failures_score_zero() {
        let i = inst();
        let w = RewardWeights::new(5.0, 1.0, 8.0, 0.0);
        for s in [Status::Diverged, Status::NumericError] {
            let b = reward_components(&trace(vec![1.0, 1e6], 10, s), &i, &w);
            assert_eq!((b.r_acc, b.r_decay, b.r_comp, b.total), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn decay_penalizes_growth() {
        assert_eq!(rho_max(&[1.0, 0.5, 0.75]), 1.5);
        assert_eq!(rho_max(&[0.0, 1.0]), 0.0);
        let i = inst();
        let w = RewardWeights::new(0.0, 1.0, 0.0, 0.0);
        let b = reward_components(&trace(vec![1.0, 0.5, 0.75], 10, Status::Ok), &i, &w);
        assert!((b.r_decay - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(RewardWeights::new(0.0, 0.0, 0.0, 0.0).validate().is_err());
        assert!(RewardWeights::new(-1.0, 1.0, 0.0, 0.0).validate().is_err());
        assert!(RewardWeights::for_stage(4).validate().is_ok());
        assert_eq!(RewardWeights::for_stage(0).comp, 1.0);
    }
}
