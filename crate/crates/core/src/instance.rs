//! Seeded problem instances with a prescribed spectrum.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::ir::Env;
use crate::rng::SeededStream;
use crate::tensor::{condition_number, hhqr, FlopCounter, Matrix, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Family {
    Psd,
    LowCond,
    MidCond,
    HighCond,
    Logistic,
    Eigen,
}

impl Family {
    pub fn env(self) -> Env {
        match self {
            Family::Logistic => Env::Logistic,
            Family::Eigen => Env::Eigen,
            _ => Env::Linear,
        }
    }

    /// Default target condition number for the family.
    pub fn default_kappa(self) -> f64 {
        match self {
            Family::Psd => 2.0,
            Family::LowCond => 5.0,
            Family::MidCond => 100.0,
            Family::HighCond => 1e5,
            Family::Logistic => 10.0,
            Family::Eigen => 2.0,
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "PSD" => Ok(Family::Psd),
            "LOW_COND" => Ok(Family::LowCond),
            "MID_COND" => Ok(Family::MidCond),
            "HIGH_COND" => Ok(Family::HighCond),
            "LOGISTIC" => Ok(Family::Logistic),
            "EIGEN" => Ok(Family::Eigen),
            _ => Err(format!("unknown instance family `{s}`")),
        }
    }
}

/// Distribution of the raw draws that are orthonormalized into singular
/// vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ensemble {
    #[default]
    Gaussian,
    HeavyTailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub family: Family,
    pub m: usize,
    pub n: usize,
    #[serde(default)]
    pub kappa_target: Option<f64>,
    #[serde(default)]
    pub leverage: Ensemble,
    #[serde(default)]
    pub vt_dist: Ensemble,
    /// Label noise, relative to the standard deviation of the clean logits.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_noise() -> f64 {
    0.5
}

impl InstanceSpec {
    pub fn new(family: Family, m: usize, n: usize) -> Self {
        Self {
            family,
            m,
            n,
            kappa_target: None,
            leverage: Ensemble::Gaussian,
            vt_dist: Ensemble::Gaussian,
            noise_sigma: default_noise(),
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa_target = Some(kappa);
        self
    }

    pub fn with_leverage(mut self, e: Ensemble) -> Self {
        self.leverage = e;
        self
    }

    pub fn kappa(&self) -> f64 {
        self.kappa_target.unwrap_or_else(|| self.family.default_kappa())
    }

    pub fn env(&self) -> Env {
        self.family.env()
    }

    fn validate(&self) -> Result<(), TensorError> {
        let square = matches!(self.family, Family::Psd | Family::Eigen);
        if self.n == 0 || self.m < self.n || (square && self.m != self.n) {
            return Err(TensorError::Parameter(format!(
                "invalid dimensions m = {}, n = {} for {:?}",
                self.m, self.n, self.family
            )));
        }
        let k = self.kappa();
        if !(k.is_finite() && k >= 1.0) {
            return Err(TensorError::Parameter(format!("kappa_target {k} must be >= 1")));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(TensorError::Parameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub env: Env,
    pub spec: InstanceSpec,
    pub seed: u64,
    /// System matrix (the design matrix for logistic regression).
    pub a: Matrix,
    /// Contents of register `b`. Logistic instances store the labels as
    /// `(y + 1) / 2` here so that `Aᵀ(σ(Ax) − b)` is the loss gradient.
    /// Eigen instances leave it empty.
    pub b: Vec<f64>,
    /// Labels in `{-1, +1}` (logistic only).
    pub labels: Option<Vec<f64>>,
    pub x_star: Option<Vec<f64>>,
    pub realized_kappa: f64,
    /// Largest eigenvalue (eigen only).
    pub lambda_max: Option<f64>,
    /// Reference optimum of the logistic loss (logistic only).
    pub loss_star: Option<f64>,
}

impl ProblemInstance {
    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }
}

fn gaussian_matrix<R: Rng>(r: usize, c: usize, rng: &mut R) -> Matrix {
    let data = (0..r * c).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(r, c, data).expect("sized")
}

fn draw_matrix<R: Rng>(r: usize, c: usize, e: Ensemble, rng: &mut R) -> Matrix {
    match e {
        Ensemble::Gaussian => gaussian_matrix(r, c, rng),
        Ensemble::HeavyTailed => {
            let t = StudentT::new(2.0).expect("valid degrees of freedom");
            let data = (0..r * c).map(|_| t.sample(rng)).collect();
            Matrix::from_vec(r, c, data).expect("sized")
        }
    }
}

/// Orthonormal columns spanning a random draw; retries on the (measure-zero)
/// rank-deficient case.
fn orthonormal<R: Rng>(r: usize, c: usize, e: Ensemble, rng: &mut R) -> Result<Matrix, TensorError> {
    let mut scratch = FlopCounter::new();
    for _ in 0..10 {
        match hhqr(&draw_matrix(r, c, e, rng), &mut scratch) {
            Ok((q, _)) => return Ok(q),
            Err(TensorError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TensorError::Degenerate("could not draw a full-rank basis".into()))
}

/// `σ_i = κ^{-i/(n-1)}`, from 1 down to `1/κ`.
pub fn log_spaced(n: usize, kappa: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| kappa.powf(-(i as f64) / (n - 1) as f64))
        .collect()
}

/// `U diag(s) Vᵀ`.
fn compose(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
    let mut us = u.clone();
    for i in 0..us.rows() {
        for (j, sj) in s.iter().enumerate() {
            us.set(i, j, us.get(i, j) * sj);
        }
    }
    us.matmul(&v.transpose())
}

fn symmetrize(a: &mut Matrix) {
    let n = a.rows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
}

fn kappa_of(a: &Matrix) -> Result<f64, TensorError> {
    Ok(condition_number(a)?.kappa)
}

/// Generates an instance of any family.
pub fn generate(spec: &InstanceSpec, seed: u64) -> Result<ProblemInstance, TensorError> {
    match spec.family {
        Family::Logistic => gen_logistic(spec, seed),
        Family::Eigen => gen_eigen(spec, seed),
        _ => gen_linear(spec, seed),
    }
}

pub fn gen_linear(spec: &InstanceSpec, seed: u64) -> Result<ProblemInstance, TensorError> {
    if matches!(spec.family, Family::Logistic | Family::Eigen) {
        return Err(TensorError::Parameter("not a linear-system family".into()));
    }
    spec.validate()?;
    let stream = SeededStream::new(seed).derive_str("linear");
    let mut rng = stream.rng();
    let (m, n) = (spec.m, spec.n);
    let sigma = log_spaced(n, spec.kappa());
    let a = if spec.family == Family::Psd {
        let q = orthonormal(n, n, Ensemble::Gaussian, &mut rng)?;
        let mut a = compose(&q, &sigma, &q);
        symmetrize(&mut a);
        a
    } else {
        let u = orthonormal(m, n, spec.leverage, &mut rng)?;
        let v = orthonormal(n, n, spec.vt_dist, &mut rng)?;
        compose(&u, &sigma, &v)
    };
    let x_star: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let b = a.apply(&x_star);
    Ok(ProblemInstance {
        env: Env::Linear,
        spec: spec.clone(),
        seed,
        realized_kappa: kappa_of(&a)?,
        a,
        b,
        labels: None,
        x_star: Some(x_star),
        lambda_max: None,
        loss_star: None,
    })
}

pub fn gen_logistic(spec: &InstanceSpec, seed: u64) -> Result<ProblemInstance, TensorError> {
    if spec.family != Family::Logistic {
        return Err(TensorError::Parameter("not the logistic family".into()));
    }
    spec.validate()?;
    let stream = SeededStream::new(seed).derive_str("logistic");
    let mut rng = stream.rng();
    let (m, n) = (spec.m, spec.n);
    let u = orthonormal(m, n, spec.leverage, &mut rng)?;
    let v = orthonormal(n, n, spec.vt_dist, &mut rng)?;
    let x = compose(&u, &log_spaced(n, spec.kappa()), &v);
    let w_star: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let logits = x.apply(&w_star);
    let scale = (logits.iter().map(|z| z * z).sum::<f64>() / m as f64).sqrt();
    let mut labels = None;
    for attempt in 0..10u64 {
        let mut r = stream.derive(&[attempt]).rng();
        let y: Vec<f64> = logits
            .iter()
            .map(|z| {
                let eps: f64 = StandardNormal.sample(&mut r);
                if z + spec.noise_sigma * scale * eps >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        if y.iter().any(|v| *v > 0.0) && y.iter().any(|v| *v < 0.0) {
            labels = Some(y);
            break;
        }
    }
    let labels = labels.ok_or_else(|| {
        TensorError::Degenerate("every label draw produced a single class".into())
    })?;
    let b = labels.iter().map(|y| (y + 1.0) / 2.0).collect();
    let loss_star = reference_logistic_optimum(&x, &labels);
    Ok(ProblemInstance {
        env: Env::Logistic,
        spec: spec.clone(),
        seed,
        realized_kappa: kappa_of(&x)?,
        a: x,
        b,
        labels: Some(labels),
        x_star: Some(w_star),
        lambda_max: None,
        loss_star: Some(loss_star),
    })
}

pub fn gen_eigen(spec: &InstanceSpec, seed: u64) -> Result<ProblemInstance, TensorError> {
    if spec.family != Family::Eigen {
        return Err(TensorError::Parameter("not the eigen family".into()));
    }
    spec.validate()?;
    let stream = SeededStream::new(seed).derive_str("eigen");
    let mut rng = stream.rng();
    let n = spec.n;
    let kappa = spec.kappa();
    // Endpoints pinned so the realized condition number is exact; interior
    // eigenvalues log-uniform in between.
    let mut lambda: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                1.0
            } else if i == n - 1 {
                1.0 / kappa
            } else {
                let u: f64 = rng.random();
                kappa.powf(-u)
            }
        })
        .collect();
    lambda.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let q = orthonormal(n, n, Ensemble::Gaussian, &mut rng)?;
    let mut a = compose(&q, &lambda, &q);
    symmetrize(&mut a);
    Ok(ProblemInstance {
        env: Env::Eigen,
        spec: spec.clone(),
        seed,
        realized_kappa: kappa_of(&a)?,
        a,
        b: Vec::new(),
        labels: None,
        x_star: Some(q.col(0)),
        lambda_max: Some(lambda[0]),
        loss_star: None,
    })
}

/// `Σ log(1 + exp(-y_i x_iᵀ w))`, overflow-safe.
pub fn logistic_loss(x: &Matrix, labels: &[f64], w: &[f64]) -> f64 {
    x.apply(w)
        .iter()
        .zip(labels)
        .map(|(z, y)| log1p_exp(-y * z))
        .sum()
}

/// `log(1 + e^t)` without overflow.
pub fn log1p_exp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Damped Newton with backtracking; returns the best loss reached.
pub fn reference_logistic_optimum(x: &Matrix, labels: &[f64]) -> f64 {
    let n = x.cols();
    let mut w = vec![0.0; n];
    let mut loss = logistic_loss(x, labels, &w);
    let mut scratch = FlopCounter::new();
    for _ in 0..100 {
        let z = x.apply(&w);
        let mut grad = vec![0.0; n];
        let mut h = Matrix::zeros(n, n);
        for i in 0..x.rows() {
            let p = crate::tensor::sigmoid_scalar(z[i]);
            let t = (labels[i] + 1.0) / 2.0;
            let d = p * (1.0 - p);
            let row = x.row(i);
            for j in 0..n {
                grad[j] += (p - t) * row[j];
                for k in 0..n {
                    h.set(j, k, h.get(j, k) + d * row[j] * row[k]);
                }
            }
        }
        for j in 0..n {
            h.set(j, j, h.get(j, j) + 1e-12);
        }
        let step = match crate::tensor::inverse(&h, &mut scratch) {
            Ok(hinv) => hinv.apply(&grad),
            Err(_) => break,
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = w.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let l = logistic_loss(x, labels, &cand);
            if l < loss {
                w = cand;
                let gain = loss - l;
                loss = l;
                improved = gain > 1e-14 * loss.max(1.0);
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_small_is_symmetric_and_conditioned() {
        let inst = gen_linear(&InstanceSpec::new(Family::Psd, 5, 5).with_kappa(2.0), 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(inst.a.get(i, j), inst.a.get(j, i));
            }
        }
        assert!(inst.realized_kappa >= 1.0 && inst.realized_kappa <= 4.0);
    }

    #[test]
    fn consistent_right_hand_side() {
        let inst = gen_linear(&InstanceSpec::new(Family::MidCond, 200, 10), 4).unwrap();
        let r = inst.a.apply(inst.x_star.as_ref().unwrap());
        let err: f64 = r.iter().zip(&inst.b).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-10 * crate::tensor::norm2(&inst.b));
    }

    #[test]
    fn logistic_losses() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let l = logistic_loss(&x, &[1.0, -1.0], &[0.0]);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-15);
        let one = Matrix::from_rows(&[vec![1.0]]);
        assert!((logistic_loss(&one, &[1.0], &[20.0]) - 2.061_153_6e-9).abs() < 1e-15);
        assert!((logistic_loss(&one, &[-1.0], &[20.0]) - 20.0).abs() < 1e-8);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let s = InstanceSpec::new(Family::Logistic, 100, 5);
        let a = gen_logistic(&s, 3).unwrap();
        assert_eq!(a, gen_logistic(&s, 3).unwrap());
        assert_ne!(a.a, gen_logistic(&s, 4).unwrap().a);
        assert!(a.loss_star.unwrap() <= logistic_loss(&a.a, a.labels.as_ref().unwrap(), &[0.0; 5]));
    }

    #[test]
    fn eigen_top_pair() {
        let inst = gen_eigen(&InstanceSpec::new(Family::Eigen, 20, 20).with_kappa(100.0), 2).unwrap();
        let v = inst.x_star.as_ref().unwrap();
        let av = inst.a.apply(v);
        let rq: f64 = av.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
            / v.iter().map(|x| x * x).sum::<f64>();
        assert!((rq - inst.lambda_max.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&InstanceSpec::new(Family::MidCond, 3, 5), 0).is_err());
        assert!(generate(&InstanceSpec::new(Family::Psd, 5, 5).with_kappa(0.5), 0).is_err());
        assert!(gen_linear(&InstanceSpec::new(Family::Eigen, 5, 5), 0).is_err());
    }
}
