//! Two-step program equivalence: symbolic normal forms, then execution on
//! held-out instances with shared random streams.

use crate::exec::{execute, ExecConfig, Status};
use crate::instance::{generate, Family, InstanceSpec, ProblemInstance};
use crate::ir::{canonicalize_symbolic, Env, Program};
use crate::rng::SeededStream;

/// Relative tolerance on final iterates.
pub const EXEC_RTOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub equivalent: bool,
    pub symbolic: bool,
    pub detail: String,
}

/// Small held-out instances for execution checks.
pub fn held_out_instances(env: Env, trials: usize, seed: u64) -> Vec<ProblemInstance> {
    let spec = match env {
        Env::Linear => InstanceSpec::new(Family::LowCond, 48, 6),
        Env::Logistic => InstanceSpec::new(Family::Logistic, 48, 6),
        Env::Eigen => InstanceSpec::new(Family::Eigen, 12, 12).with_kappa(10.0),
    };
    (0..trials as u64)
        .filter_map(|t| generate(&spec, seed ^ 0xe9u64.wrapping_mul(t + 1)).ok())
        .collect()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = crate::tensor::norm2(a).max(crate::tensor::norm2(b));
    diff <= EXEC_RTOL * scale.max(f64::MIN_POSITIVE)
}

/// Execution half of the check on prepared instances.
pub fn execution_agrees(p1: &Program, p2: &Program, instances: &[ProblemInstance], seed: u64) -> Result<(), String> {
    let cfg = ExecConfig::for_env(p1.env).with_iterations(8);
    for (i, inst) in instances.iter().enumerate() {
        let rng = SeededStream::new(seed).derive(&[i as u64]);
        let t1 = execute(p1, inst, 0.1, &cfg, &rng);
        let t2 = execute(p2, inst, 0.1, &cfg, &rng);
        for (name, t) in [("first", &t1), ("second", &t2)] {
            if t.status != Status::Ok {
                return Err(format!(
                    "{name} program failed on trial {i}: {}",
                    t.message.as_deref().unwrap_or("diverged")
                ));
            }
        }
        if !close(&t1.final_x, &t2.final_x) {
            return Err(format!("final iterates differ on trial {i}"));
        }
    }
    Ok(())
}

/// Both programs must share a symbolic normal form and agree in execution
/// on `trials` random instances.
pub fn programs_equivalent(p1: &Program, p2: &Program, trials: usize, seed: u64) -> Verdict {
    if p1.env != p2.env {
        return Verdict {
            equivalent: false,
            symbolic: false,
            detail: "different environments".into(),
        };
    }
    if canonicalize_symbolic(p1) != canonicalize_symbolic(p2) {
        return Verdict {
            equivalent: false,
            symbolic: false,
            detail: "symbolic normal forms differ".into(),
        };
    }
    let instances = held_out_instances(p1.env, trials, seed);
    match execution_agrees(p1, p2, &instances, seed) {
        Ok(()) => Verdict {
            equivalent: true,
            symbolic: true,
            detail: "equivalent".into(),
        },
        Err(detail) => Verdict {
            equivalent: false,
            symbolic: true,
            detail,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn p(s: &str) -> Program {
        parse_program(s, None).unwrap()
    }

    const LANDWEBER: &str = "[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_VEC_SUB(v1, b)\n";
    const GD: &str = "[SETUP]\n[ITER]\nv1 <- MAT_VEC_MUL(A, x)\nv1 <- VEC_VEC_SUB(v1, b)\nv1 <- VEC_MAT_MUL(v1, A)\n";

    #[test]
    fn reflexive() {
        assert!(programs_equivalent(&p(GD), &p(GD), 3, 1).equivalent);
    }

    #[test]
    fn landweber_is_not_gd() {
        // Landweber's v1 lives in VEC(m); on a rectangular instance the
        // update is skipped, so the iterates differ too.
        let v = programs_equivalent(&p(LANDWEBER), &p(GD), 3, 1);
        assert!(!v.equivalent);
    }

    #[test]
    fn sketched_preconditioner_two_forms() {
        let pre = p("[SETUP]
R2 <- SKETCH(A, NONE)
R2 <- MAT_MAT_MUL(R2, A)
R1 <- HHQR(R2, NONE)
R1 <- MAT_INV(R1, NONE)
R1 <- MAT_MAT_TRANS_MUL(R1, R1)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- MAT_VEC_MUL(R1, v1)
");
        let two = p("[SETUP]
R2 <- SKETCH(A, NONE)
R2 <- MAT_MAT_MUL(R2, A)
R1 <- HHQR(R2, NONE)
R1 <- MAT_INV(R1, NONE)
[ITER]
v1 <- MAT_VEC_MUL(A, x)
v1 <- VEC_VEC_SUB(v1, b)
v1 <- VEC_MAT_MUL(v1, A)
v1 <- VEC_MAT_MUL(v1, R1)
v1 <- MAT_VEC_MUL(R1, v1)
");
        let v = programs_equivalent(&pre, &two, 5, 2);
        assert!(v.equivalent, "{}", v.detail);
    }
}
