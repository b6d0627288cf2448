//! Stage sequencing, promotion and ablations.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::equiv::programs_equivalent;
use crate::exec::{ExecConfig, SEARCH_GRID};
use crate::instance::{Family, InstanceSpec};
use crate::ir::{serialize, Env, Program, DEFAULT_MAX_LEN};
use crate::reward::RewardWeights;
use crate::search::{search_stage, SearchConfig, SearchStats};

/// Reference programs shipped with the library, by name.
pub mod targets {
    use crate::ir::{parse_program, Program};

    macro_rules! programs {
        ($($name:literal),* $(,)?) => {
            pub const ALL: &[(&str, &str)] = &[
                $(($name, include_str!(concat!("../programs/", $name, ".txt")))),*
            ];
        };
    }

    programs!(
        "landweber",
        "ls_gd",
        "subsampled_ls_gd",
        "weighted_subsampled_ls_gd",
        "qr_preconditioner",
        "precond_gd",
        "precond_gd_gram",
        "sketched_precond_gd",
        "subsampled_precond_gd",
        "precond_weighted_sgd",
        "logistic_forward",
        "logistic_gd",
        "full_newton",
        "newton_sketch",
        "power_iteration",
        "sketched_power_iteration",
        "sketched_power_iteration_pre",
    );

    pub fn source(name: &str) -> Option<&'static str> {
        ALL.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
    }

    pub fn try_get(name: &str) -> Option<Program> {
        source(name).map(|src| parse_program(src, None).expect("shipped programs parse"))
    }

    /// Parses a shipped program. Panics on unknown names, which are
    /// programming errors.
    pub fn get(name: &str) -> Program {
        let src = source(name).unwrap_or_else(|| panic!("no shipped program named `{name}`"));
        parse_program(src, None).unwrap_or_else(|e| panic!("shipped program `{name}`: {e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub name: String,
    pub instance: InstanceSpec,
    pub weights: RewardWeights,
    /// Declared starting point. `None` means the previous stage's result
    /// (or the empty program for the first stage).
    pub base: Option<Program>,
    pub targets: Vec<Program>,
    pub budget: usize,
    /// Iteration count override.
    pub iterations: Option<usize>,
    pub grid: Vec<f64>,
    /// Instructions the search may add on top of the base.
    pub max_added: usize,
    /// Reward threshold for open discovery (used when `targets` is empty).
    pub theta: Option<f64>,
    pub sketch_rows: Option<usize>,
    pub subsample_rows: Option<usize>,
}

impl CurriculumStage {
    pub fn new(name: &str, instance: InstanceSpec, targets: Vec<Program>, budget: usize) -> Self {
        Self {
            name: name.to_string(),
            instance,
            weights: RewardWeights::for_stage(0),
            base: None,
            targets,
            budget,
            iterations: None,
            grid: SEARCH_GRID.to_vec(),
            max_added: 3,
            theta: None,
            sketch_rows: None,
            subsample_rows: None,
        }
    }

    pub fn env(&self) -> Env {
        self.instance.env()
    }

    pub fn exec_config(&self) -> ExecConfig {
        let mut cfg = ExecConfig::for_env(self.env());
        if let Some(t) = self.iterations {
            cfg.iterations = t;
        }
        cfg.sketch_rows = self.sketch_rows;
        cfg.subsample_rows = self.subsample_rows;
        cfg
    }

    /// Length cap for programs grown from `base`.
    pub fn max_len(&self, base: &Program) -> usize {
        (base.len() + self.max_added).min(DEFAULT_MAX_LEN)
    }

    pub fn validate(&self, base: &Program) -> Result<(), String> {
        let err = |m: String| Err(format!("stage `{}`: {m}", self.name));
        if base.env != self.env() {
            return err(format!("base is a {} program but the instance is {}", base.env, self.env()));
        }
        if let Err(e) = base.check(DEFAULT_MAX_LEN) {
            return err(format!("base program: {e}"));
        }
        if self.targets.is_empty() && self.theta.is_none() {
            return err("needs targets or a reward threshold".into());
        }
        if self.grid.is_empty() || self.grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return err("step-size grid must be non-empty and positive".into());
        }
        if let Err(e) = self.weights.validate() {
            return err(e);
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.env != self.env() {
                return err(format!("target {i} is a {} program", t.env));
            }
            if let Err(e) = t.check(DEFAULT_MAX_LEN) {
                return err(format!("target {i}: {e}"));
            }
            if t.len() > self.max_len(base) {
                return err(format!(
                    "target {i} has {} instructions but at most {} are reachable from the base",
                    t.len(),
                    self.max_len(base)
                ));
            }
        }
        Ok(())
    }
}

/// What to do when a stage fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    Abort,
    /// Continue with the failed stage's first target as the next base.
    /// Results produced this way are flagged in the report.
    ContinueWithTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub name: String,
    pub stages: Vec<CurriculumStage>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub success: bool,
    pub tau: Option<usize>,
    pub playouts: usize,
    pub seconds: f64,
    pub program: String,
    pub unique_states: usize,
    pub visits: u64,
    pub revisit_rate: f64,
    pub best_reward: f64,
    /// The stage started from a target rather than from a discovery.
    pub forced_base: bool,
    #[serde(skip)]
    pub stats: SearchStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub curriculum: String,
    pub method: String,
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub cumulative_playouts: usize,
    pub success: bool,
}

impl CurriculumReport {
    /// Playouts to finish the whole curriculum, if it finished.
    pub fn tau(&self) -> Option<usize> {
        self.success.then_some(self.cumulative_playouts)
    }
}

/// True iff `candidate` is equivalent to one of the stage targets.
pub fn check_discovery(candidate: &Program, stage: &CurriculumStage, seed: u64) -> bool {
    stage
        .targets
        .iter()
        .any(|t| programs_equivalent(candidate, t, 5, seed).equivalent)
}

/// Checks every stage against its base before any search runs. Stages
/// without a declared base are checked against the first target of the
/// stage before them.
pub fn validate_curriculum(c: &Curriculum) -> Result<(), String> {
    if c.stages.is_empty() {
        return Err(format!("curriculum `{}` has no stages", c.name));
    }
    let mut prev: Option<Program> = None;
    for stage in &c.stages {
        let base = match (&stage.base, &prev) {
            (Some(b), _) => b.clone(),
            (None, Some(p)) => p.clone(),
            (None, None) => Program::empty(stage.env()),
        };
        stage.validate(&base)?;
        prev = stage.targets.first().cloned().or(Some(base));
    }
    Ok(())
}

/// Runs the stages in order, promoting each discovery to the next base.
pub fn run_curriculum(
    c: &Curriculum,
    cfg: &SearchConfig,
    seed: u64,
    policy: FailurePolicy,
) -> Result<CurriculumReport, String> {
    validate_curriculum(c)?;
    let mut reports = Vec::new();
    let mut prev: Option<Program> = None;
    let mut forced = false;
    let mut ok = true;
    for (i, stage) in c.stages.iter().enumerate() {
        let base = match (&stage.base, &prev) {
            (Some(b), _) => b.clone(),
            (None, Some(p)) => p.clone(),
            (None, None) => Program::empty(stage.env()),
        };
        let start = Instant::now();
        let out = search_stage(stage, &base, cfg, seed.wrapping_add(i as u64 * 7919))?;
        log::info!(
            "{} / {}: success={} tau={:?} playouts={}",
            c.name,
            stage.name,
            out.success,
            out.stats.tau,
            out.stats.playouts
        );
        reports.push(StageReport {
            name: stage.name.clone(),
            success: out.success,
            tau: out.stats.tau,
            playouts: out.stats.playouts,
            seconds: start.elapsed().as_secs_f64(),
            program: serialize(&out.best),
            unique_states: out.stats.unique_states,
            visits: out.stats.visits,
            revisit_rate: out.stats.revisit_rate,
            best_reward: out.stats.best_reward,
            forced_base: forced,
            stats: out.stats,
        });
        if out.success {
            prev = Some(out.best);
        } else {
            ok = false;
            match (policy, stage.targets.first()) {
                (FailurePolicy::ContinueWithTarget, Some(t)) => {
                    prev = Some(t.clone());
                    forced = true;
                }
                _ => break,
            }
        }
    }
    let cumulative = reports.iter().map(|r| r.playouts).sum();
    Ok(CurriculumReport {
        curriculum: c.name.clone(),
        method: cfg.mode.to_string(),
        seed,
        stages: reports,
        cumulative_playouts: cumulative,
        success: ok,
    })
}

/// No-curriculum and skip-one-stage variants of `full`. Every variant keeps
/// the full total budget; a skipped stage's budget moves to the stage that
/// absorbs its work.
pub fn ablation_variants(full: &Curriculum) -> Vec<Curriculum> {
    let n = full.stages.len();
    let total: usize = full.stages.iter().map(|s| s.budget).sum();
    let mut out = Vec::new();
    let last = full.stages.last().expect("non-empty curriculum");
    let mut single = last.clone();
    single.name = format!("no-curriculum: {}", last.name);
    single.budget = total;
    single.base = full.stages[0].base.clone();
    single.max_added = full.stages.iter().map(|s| s.max_added).sum::<usize>().min(DEFAULT_MAX_LEN);
    out.push(Curriculum {
        name: format!("{} (no curriculum)", full.name),
        stages: vec![single],
    });
    for skip in 1..n.saturating_sub(1) {
        let mut stages: Vec<CurriculumStage> = Vec::new();
        for (i, s) in full.stages.iter().enumerate() {
            if i == skip {
                continue;
            }
            let mut s = s.clone();
            if i == skip + 1 {
                s.budget += full.stages[skip].budget;
                s.max_added += full.stages[skip].max_added;
                s.name = format!("{} -> {}", full.stages[skip - 1].name, s.name);
            }
            stages.push(s);
        }
        out.push(Curriculum {
            name: format!("{} (skip {})", full.name, full.stages[skip].name),
            stages,
        });
    }
    out
}

fn stage(name: &str, spec: InstanceSpec, target: &str, budget: usize, max_added: usize) -> CurriculumStage {
    let mut s = CurriculumStage::new(name, spec, vec![targets::get(target)], budget);
    s.max_added = max_added;
    s
}

/// Empty program to Landweber to least-squares gradient descent to
/// subsampled gradient descent.
pub fn subsampled_ls_gd(m: usize, n: usize, budget: usize) -> Curriculum {
    let mut s2 = stage(
        "subsampled-ls-gd",
        InstanceSpec::new(Family::LowCond, m, n),
        "subsampled_ls_gd",
        budget,
        4,
    );
    s2.weights = RewardWeights::for_stage(3);
    Curriculum {
        name: "subsampled-ls-gd".into(),
        stages: vec![
            stage("landweber", InstanceSpec::new(Family::Psd, 5, 5), "landweber", budget, 6),
            stage("ls-gd", InstanceSpec::new(Family::LowCond, m, n), "ls_gd", budget, 4),
            s2,
        ],
    }
}

/// Single Landweber to gradient descent transition.
pub fn landweber_to_gd(m: usize, n: usize, budget: usize) -> CurriculumStage {
    let mut s = stage("ls-gd", InstanceSpec::new(Family::LowCond, m, n), "ls_gd", budget, 2);
    s.base = Some(targets::get("landweber"));
    s
}

/// Four logistic stages ending in the Newton sketch.
pub fn newton_sketch(m: usize, n: usize, newton_m: usize, newton_n: usize, budget: usize) -> Curriculum {
    let small = InstanceSpec::new(Family::Logistic, m, n);
    let big = InstanceSpec::new(Family::Logistic, newton_m, newton_n).with_kappa(100.0);
    let mut stages = vec![
        stage("logistic-forward", small.clone(), "logistic_forward", budget, 3),
        stage("logistic-gd", small.clone(), "logistic_gd", budget, 2),
        stage("full-newton", big.clone(), "full_newton", budget, 5),
        stage("newton-sketch", big, "newton_sketch", budget, 2),
    ];
    for (i, s) in stages.iter_mut().enumerate() {
        s.weights = RewardWeights::for_stage(i.max(2));
    }
    Curriculum {
        name: "newton-sketch".into(),
        stages,
    }
}

/// Power iteration at a small and a mid-sized instance, then its sketched
/// variant on the largest one.
pub fn eigen(sizes: [usize; 3], budget: usize) -> Curriculum {
    let spec = |n: usize, kappa: f64| InstanceSpec::new(Family::Eigen, n, n).with_kappa(kappa);
    let mut c2 = CurriculumStage::new(
        "sketched-power-iteration",
        spec(sizes[2], 100.0),
        vec![
            targets::get("sketched_power_iteration"),
            targets::get("sketched_power_iteration_pre"),
        ],
        budget,
    );
    c2.max_added = 2;
    Curriculum {
        name: "eigen".into(),
        stages: vec![
            stage("power-iteration-c0", spec(sizes[0], 2.0), "power_iteration", budget, 3),
            stage("power-iteration-c1", spec(sizes[1], 100.0), "power_iteration", budget, 2),
            c2,
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_programs_parse() {
        for (name, _) in targets::ALL {
            let p = targets::get(name);
            assert!(p.check(DEFAULT_MAX_LEN).is_ok(), "{name}");
            assert!(!p.iter.is_empty(), "{name}");
        }
    }

    #[test]
    fn variants_of_four_stages() {
        let full = newton_sketch(100, 5, 200, 8, 1000);
        let v = ablation_variants(&full);
        assert_eq!(v.len(), 3);
        assert_eq!(v[0].stages.len(), 1);
        for c in &v {
            let total: usize = c.stages.iter().map(|s| s.budget).sum();
            assert_eq!(total, 4000, "{}", c.name);
            assert_eq!(c.stages.last().unwrap().targets, full.stages[3].targets);
        }
    }

    #[test]
    fn two_stage_curriculum_has_only_no_curriculum_variant() {
        let mut c = subsampled_ls_gd(100, 5, 100);
        c.stages.truncate(2);
        assert_eq!(ablation_variants(&c).len(), 1);
    }

    #[test]
    fn discovery_is_modulo_dead_code() {
        let s = landweber_to_gd(60, 6, 10);
        let gd = targets::get("ls_gd");
        assert!(check_discovery(&gd, &s, 3));
        let mut dead = gd.clone();
        dead.setup.push(crate::ir::Instruction::new(
            crate::ir::Reg::R1,
            crate::ir::Opcode::MatTransMatMul,
            crate::ir::Reg::A,
            Some(crate::ir::Reg::A),
        ));
        assert!(check_discovery(&dead, &s, 3));
        let pgd = CurriculumStage::new(
            "pgd",
            InstanceSpec::new(Family::MidCond, 60, 6),
            vec![targets::get("precond_gd")],
            10,
        );
        assert!(!check_discovery(&gd, &pgd, 3));
    }

    #[test]
    fn identity_stage_succeeds_immediately() {
        let mut s = landweber_to_gd(40, 4, 50);
        s.base = Some(targets::get("ls_gd"));
        let c = Curriculum {
            name: "identity".into(),
            stages: vec![s],
        };
        let r = run_curriculum(&c, &SearchConfig::default(), 1, FailurePolicy::Abort).unwrap();
        assert!(r.success);
        assert_eq!(r.stages[0].tau, Some(0));
        assert_eq!(r.cumulative_playouts, 0);
    }
}
