//! Dense kernels with symbolic shapes and FLOP accounting.
//!
//! Every kernel takes a [`FlopCounter`] and charges a fixed cost before doing
//! any work. The cost table is:
//!
//! | kernel | cost |
//! |---|---|
//! | matvec / vecmat, `r x c` | `2r'c`, `r'` = rows that contribute |
//! | mat-mat, `r x c` times `c x k` | `2r'ck`, `r'` = nonzero rows of the left factor |
//! | sketch applied to `r x c` (fast transform) | `2rc ceil(log2 s)` |
//! | Householder QR, `r x c` | `2rc^2 - (2/3)c^3` |
//! | inverse, `c x c` | `2c^3` |
//! | triangular solve, `c x c` | `c^2` |
//! | sketch build, `s x m` | `m` |
//! | dot, length `d` | `2d` |
//! | add / sub / scale / elementwise, length `d` | `d` |
//!
//! Kernels never propagate NaN or infinity: a non-finite result is reported
//! as [`TensorError::NonFinite`].

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::SeededStream;

/// Symbolic dimension label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dim {
    /// System rows.
    M,
    /// Columns / unknowns.
    N,
    /// Sketch rows.
    S,
    /// Subsample rows.
    K,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Dim::M => "m",
            Dim::N => "n",
            Dim::S => "s",
            Dim::K => "k",
        };
        f.write_str(c)
    }
}

/// Symbolic shape of a register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Scalar,
    Vec(Dim),
    Mat(Dim, Dim),
}

impl Shape {
    pub fn is_vec(&self) -> bool {
        matches!(self, Shape::Vec(_))
    }

    pub fn is_mat(&self) -> bool {
        matches!(self, Shape::Mat(..))
    }

    /// Leading dimension (rows for a matrix, length for a vector).
    pub fn leading(&self) -> Option<Dim> {
        match *self {
            Shape::Scalar => None,
            Shape::Vec(d) => Some(d),
            Shape::Mat(r, _) => Some(r),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "SCALAR"),
            Shape::Vec(d) => write!(f, "VEC({d})"),
            Shape::Mat(r, c) => write!(f, "MAT({r},{c})"),
        }
    }
}

/// Concrete sizes bound to the symbolic labels for one instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimBinding {
    pub m: usize,
    pub n: usize,
    pub s: usize,
    pub k: usize,
}

impl DimBinding {
    pub fn get(&self, d: Dim) -> usize {
        match d {
            Dim::M => self.m,
            Dim::N => self.n,
            Dim::S => self.s,
            Dim::K => self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("rank-deficient input to QR at column {column}")]
    RankDeficient { column: usize },
    #[error("singular matrix in {op}")]
    Singular { op: &'static str },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Running count of floating-point operations for one execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    total: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn add(&mut self, flops: u64) {
        self.total = self.total.saturating_add(flops);
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("{} entries for {rows}x{cols}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Uncounted product used by generators and tests.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for p in 0..self.cols {
                let a = self.data[i * self.cols + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * other.cols..(p + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Uncounted matrix-vector product.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot_raw(self.row(i), x)).collect()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// A concrete register value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DenseValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Matrix),
}

impl DenseValue {
    pub fn is_finite(&self) -> bool {
        match self {
            DenseValue::Scalar(v) => v.is_finite(),
            DenseValue::Vector(v) => v.iter().all(|x| x.is_finite()),
            DenseValue::Matrix(m) => m.is_finite(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            DenseValue::Scalar(_) => 1,
            DenseValue::Vector(v) => v.len(),
            DenseValue::Matrix(m) => m.data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DenseValue::Scalar(_) => "scalar",
            DenseValue::Vector(_) => "vector",
            DenseValue::Matrix(_) => "matrix",
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            DenseValue::Vector(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            DenseValue::Matrix(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            DenseValue::Scalar(v) => Some(*v),
            _ => None,
        }
    }
}

pub(crate) fn dot_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot_raw(v, v).sqrt()
}

fn finite_vec(op: &'static str, v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn finite_mat(op: &'static str, m: Matrix) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_finite_vec(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_finite_mat(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Rows holding at least one nonzero entry. Masked subsamples only pay for
/// the rows they keep.
pub fn nonzero_rows(a: &Matrix) -> usize {
    (0..a.rows).filter(|&i| a.row(i).iter().any(|v| *v != 0.0)).count()
}

/// `A x`.
pub fn matvec(a: &Matrix, x: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(shape_err(
            "matvec",
            format!("{}x{} times {}", a.rows, a.cols, x.len()),
        ));
    }
    check_finite_mat("matvec", a)?;
    check_finite_vec("matvec", x)?;
    flops.add(2 * (nonzero_rows(a) * a.cols) as u64);
    finite_vec("matvec", a.apply(x))
}

/// `Aᵀ v`, written as the row vector product `vᵀ A`.
pub fn vecmat(v: &[f64], a: &Matrix, flops: &mut FlopCounter) -> Result<Vec<f64>> {
    if a.rows != v.len() {
        return Err(shape_err(
            "vecmat",
            format!("{} times {}x{}", v.len(), a.rows, a.cols),
        ));
    }
    check_finite_mat("vecmat", a)?;
    check_finite_vec("vecmat", v)?;
    let live = v.iter().filter(|x| **x != 0.0).count();
    flops.add(2 * (live * a.cols) as u64);
    let mut out = vec![0.0; a.cols];
    for (i, vi) in v.iter().enumerate() {
        if *vi == 0.0 {
            continue;
        }
        for (o, aij) in out.iter_mut().zip(a.row(i)) {
            *o += vi * aij;
        }
    }
    finite_vec("vecmat", out)
}

/// `A B`.
pub fn mat_mat(a: &Matrix, b: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err(
            "mat_mat",
            format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    check_finite_mat("mat_mat", a)?;
    check_finite_mat("mat_mat", b)?;
    flops.add(2 * (nonzero_rows(a) * a.cols * b.cols) as u64);
    finite_mat("mat_mat", a.matmul(b))
}

/// `A Bᵀ`.
pub fn mat_mat_trans(a: &Matrix, b: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(shape_err(
            "mat_mat_trans",
            format!("{}x{} times ({}x{})^T", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    check_finite_mat("mat_mat_trans", a)?;
    check_finite_mat("mat_mat_trans", b)?;
    flops.add(2 * (a.rows * a.cols * b.rows) as u64);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot_raw(a.row(i), b.row(j));
        }
    }
    finite_mat("mat_mat_trans", out)
}

/// `Aᵀ B`.
pub fn mat_trans_mat(a: &Matrix, b: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(shape_err(
            "mat_trans_mat",
            format!("({}x{})^T times {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    check_finite_mat("mat_trans_mat", a)?;
    check_finite_mat("mat_trans_mat", b)?;
    let live = (0..a.rows)
        .filter(|&p| a.row(p).iter().any(|v| *v != 0.0) && b.row(p).iter().any(|v| *v != 0.0))
        .count();
    flops.add(2 * (live * a.cols * b.cols) as u64);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, aip) in arow.iter().enumerate() {
            if *aip == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    finite_mat("mat_trans_mat", out)
}

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("{} vs {}", a.len(), b.len())));
    }
    check_finite_vec(op, a)?;
    check_finite_vec(op, b)
}

pub fn vec_add(a: &[f64], b: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    same_len("vec_add", a, b)?;
    flops.add(a.len() as u64);
    finite_vec("vec_add", a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn vec_sub(a: &[f64], b: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    same_len("vec_sub", a, b)?;
    flops.add(a.len() as u64);
    finite_vec("vec_sub", a.iter().zip(b).map(|(x, y)| x - y).collect())
}

pub fn dot(a: &[f64], b: &[f64], flops: &mut FlopCounter) -> Result<f64> {
    same_len("dot", a, b)?;
    flops.add(2 * a.len() as u64);
    let d = dot_raw(a, b);
    if d.is_finite() {
        Ok(d)
    } else {
        Err(TensorError::NonFinite { op: "dot" })
    }
}

pub fn scalar_vec_mul(c: f64, v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_vec("scalar_vec_mul", v)?;
    flops.add(v.len() as u64);
    finite_vec("scalar_vec_mul", v.iter().map(|x| c * x).collect())
}

/// `v / c`.
pub fn scalar_div(v: &[f64], c: f64, flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_vec("scalar_div", v)?;
    if c == 0.0 {
        return Err(TensorError::Singular { op: "scalar_div" });
    }
    flops.add(v.len() as u64);
    finite_vec("scalar_div", v.iter().map(|x| x / c).collect())
}

/// `v / ‖v‖₂`.
pub fn vec_normalize(v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_vec("vec_normalize", v)?;
    flops.add(3 * v.len() as u64);
    let nrm = norm2(v);
    if nrm == 0.0 || !nrm.is_finite() {
        return Err(TensorError::Degenerate("normalizing a zero vector".into()));
    }
    finite_vec("vec_normalize", v.iter().map(|x| x / nrm).collect())
}

/// `v / ‖w‖₂`.
pub fn vec_normalize_by(v: &[f64], w: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_vec("vec_normalize", v)?;
    check_finite_vec("vec_normalize", w)?;
    flops.add((v.len() + 2 * w.len()) as u64);
    let nrm = norm2(w);
    if nrm == 0.0 || !nrm.is_finite() {
        return Err(TensorError::Degenerate("normalizing by a zero vector".into()));
    }
    finite_vec("vec_normalize", v.iter().map(|x| x / nrm).collect())
}

/// Elementwise logistic function, evaluated without overflow.
pub fn sigmoid(v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_vec("sigmoid", v)?;
    flops.add(4 * v.len() as u64);
    Ok(v.iter().map(|&z| sigmoid_scalar(z)).collect())
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise product `w ⊙ v`.
pub fn diag_scale_vec(v: &[f64], w: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    same_len("diag_scale", v, w)?;
    flops.add(v.len() as u64);
    finite_vec("diag_scale", v.iter().zip(w).map(|(x, y)| x * y).collect())
}

/// `diag(w) M`: row `i` of `M` scaled by `w[i]`.
pub fn diag_scale_mat(m: &Matrix, w: &[f64], flops: &mut FlopCounter) -> Result<Matrix> {
    if m.rows != w.len() {
        return Err(shape_err(
            "diag_scale",
            format!("{}x{} rows vs {} weights", m.rows, m.cols, w.len()),
        ));
    }
    check_finite_mat("diag_scale", m)?;
    check_finite_vec("diag_scale", w)?;
    flops.add((m.rows * m.cols) as u64);
    let mut out = m.clone();
    for (i, wi) in w.iter().enumerate() {
        for x in &mut out.data[i * m.cols..(i + 1) * m.cols] {
            *x *= wi;
        }
    }
    finite_mat("diag_scale", out)
}

/// Elementwise `sqrt(|v|)`.
pub fn elem_sqrt(v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_vec("elem_sqrt", v)?;
    flops.add(v.len() as u64);
    Ok(v.iter().map(|x| x.abs().sqrt()).collect())
}

/// Householder QR of a tall matrix, returning the thin factors `(Q, R)` with a
/// nonnegative diagonal on `R`.
pub fn hhqr(a: &Matrix, flops: &mut FlopCounter) -> Result<(Matrix, Matrix)> {
    let (r, c) = (a.rows, a.cols);
    if r < c {
        return Err(shape_err("hhqr", format!("wide input {r}x{c}")));
    }
    check_finite_mat("hhqr", a)?;
    let cost = 2.0 * (r * c * c) as f64 - (2.0 / 3.0) * (c * c * c) as f64;
    flops.add(cost.round().max(0.0) as u64);

    let scale = a.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    // Working copy stored column-major for cache-friendly reflections.
    let mut w: Vec<Vec<f64>> = (0..c).map(|j| a.col(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut signs = vec![1.0; c];
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE) * (r as f64).sqrt();
    for k in 0..c {
        let x = &w[k][k..];
        let alpha_norm = norm2(x);
        if alpha_norm <= tol {
            return Err(TensorError::RankDeficient { column: k + 1 });
        }
        let x0 = x[0];
        let alpha = if x0 >= 0.0 { -alpha_norm } else { alpha_norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm = norm2(&v);
        if vnorm > 0.0 {
            for e in &mut v {
                *e /= vnorm;
            }
        }
        for col in w.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let proj = 2.0 * dot_raw(&v, seg);
            for (s, vi) in seg.iter_mut().zip(&v) {
                *s -= proj * vi;
            }
        }
        signs[k] = if alpha < 0.0 { -1.0 } else { 1.0 };
        reflectors.push(v);
    }
    // R = upper part of the reflected columns, with rows flipped to make the
    // diagonal nonnegative.
    let mut rmat = Matrix::zeros(c, c);
    for j in 0..c {
        for i in 0..=j {
            rmat.data[i * c + j] = w[j][i] * signs[i];
        }
    }
    // Q = H_0 ... H_{c-1} applied to the first c columns of the identity,
    // with columns flipped to match.
    let mut q = Matrix::zeros(r, c);
    for j in 0..c {
        let mut e = vec![0.0; r];
        e[j] = 1.0;
        for k in (0..c).rev() {
            let v = &reflectors[k];
            let seg = &mut e[k..];
            let proj = 2.0 * dot_raw(v, seg);
            for (s, vi) in seg.iter_mut().zip(v) {
                *s -= proj * vi;
            }
        }
        for i in 0..r {
            q.data[i * c + j] = e[i] * signs[j];
        }
    }
    Ok((finite_mat("hhqr", q)?, finite_mat("hhqr", rmat)?))
}

/// Inverse via Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(shape_err("inverse", format!("{}x{}", a.rows, a.cols)));
    }
    check_finite_mat("inverse", a)?;
    let n = a.rows;
    flops.add(2 * (n * n * n) as u64);
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    let scale = a.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|i| (i, m.get(i, col).abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= 1e-14 * scale || pval == 0.0 {
            return Err(TensorError::Singular { op: "inverse" });
        }
        if piv != col {
            for j in 0..n {
                m.data.swap(piv * n + j, col * n + j);
                inv.data.swap(piv * n + j, col * n + j);
            }
        }
        let d = m.get(col, col);
        for j in 0..n {
            m.data[col * n + j] /= d;
            inv.data[col * n + j] /= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m.get(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m.data[i * n + j] -= f * m.data[col * n + j];
                inv.data[i * n + j] -= f * inv.data[col * n + j];
            }
        }
    }
    finite_mat("inverse", inv)
}

/// Solves `U y = v` for the upper triangle `U` of a square matrix.
pub fn triangular_solve(u: &Matrix, v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    if u.rows != u.cols || u.rows != v.len() {
        return Err(shape_err(
            "triangular_solve",
            format!("{}x{} with {}", u.rows, u.cols, v.len()),
        ));
    }
    check_finite_mat("triangular_solve", u)?;
    check_finite_vec("triangular_solve", v)?;
    let n = u.rows;
    flops.add((n * n) as u64);
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = v[i];
        for j in i + 1..n {
            acc -= u.get(i, j) * y[j];
        }
        let d = u.get(i, i);
        if d == 0.0 {
            return Err(TensorError::Singular {
                op: "triangular_solve",
            });
        }
        y[i] = acc / d;
    }
    finite_vec("triangular_solve", y)
}

/// Solves the Gram system `(MᵀM) y = v` through a QR factorization of `M`.
pub fn gram_solve(m: &Matrix, v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(shape_err(
            "linear_solve",
            format!("{}x{} with {}", m.rows, m.cols, v.len()),
        ));
    }
    let (_, r) = hhqr(m, flops).map_err(|e| match e {
        TensorError::RankDeficient { .. } => TensorError::Singular {
            op: "linear_solve",
        },
        other => other,
    })?;
    // RᵀR y = v: forward solve with Rᵀ, then back solve with R.
    let n = r.rows;
    flops.add((n * n) as u64);
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut acc = v[i];
        for j in 0..i {
            acc -= r.get(j, i) * z[j];
        }
        let d = r.get(i, i);
        if d == 0.0 {
            return Err(TensorError::Singular { op: "linear_solve" });
        }
        z[i] = acc / d;
    }
    triangular_solve(&r, &z, flops)
}

/// Gaussian sketch with entries drawn `N(0, 1/s)`.
pub fn sketch_matrix(
    rows_out: usize,
    rows_in: usize,
    rng: &SeededStream,
    flops: &mut FlopCounter,
) -> Result<Matrix> {
    if rows_out == 0 || rows_out > rows_in {
        return Err(TensorError::Parameter(format!(
            "sketch size {rows_out} must lie in 1..={rows_in}"
        )));
    }
    flops.add(rows_in as u64);
    let sd = 1.0 / (rows_out as f64).sqrt();
    let mut r = rng.rng();
    let data = (0..rows_out * rows_in)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            z * sd
        })
        .collect();
    Matrix::from_vec(rows_out, rows_in, data)
}

fn log2_ceil(s: usize) -> u64 {
    (usize::BITS - s.max(1).saturating_sub(1).leading_zeros()) as u64
}

/// `S A` for a sketch produced by [`sketch_matrix`], charged as a fast
/// transform rather than a dense product.
pub fn sketch_apply(s: &Matrix, a: &Matrix, flops: &mut FlopCounter) -> Result<Matrix> {
    if s.cols != a.rows {
        return Err(shape_err(
            "sketch_apply",
            format!("{}x{} times {}x{}", s.rows, s.cols, a.rows, a.cols),
        ));
    }
    check_finite_mat("sketch_apply", a)?;
    flops.add(2 * (a.rows * a.cols) as u64 * log2_ceil(s.rows));
    finite_mat("sketch_apply", s.matmul(a))
}

/// `S v` for a sketch produced by [`sketch_matrix`].
pub fn sketch_apply_vec(s: &Matrix, v: &[f64], flops: &mut FlopCounter) -> Result<Vec<f64>> {
    if s.cols != v.len() {
        return Err(shape_err(
            "sketch_apply_vec",
            format!("{}x{} times {}", s.rows, s.cols, v.len()),
        ));
    }
    check_finite_vec("sketch_apply_vec", v)?;
    flops.add(2 * v.len() as u64 * log2_ceil(s.rows));
    finite_vec("sketch_apply_vec", s.apply(v))
}

/// Row-norm sampling distribution `‖A[i,:]‖² / ‖A‖_F²`.
pub fn leverage_weights(a: &Matrix, flops: &mut FlopCounter) -> Result<Vec<f64>> {
    check_finite_mat("leverage_weights", a)?;
    flops.add(2 * (a.rows * a.cols) as u64);
    let norms: Vec<f64> = (0..a.rows).map(|i| dot_raw(a.row(i), a.row(i))).collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Err(TensorError::Degenerate(
            "row-norm distribution of a zero matrix".into(),
        ));
    }
    Ok(norms.into_iter().map(|v| v / total).collect())
}

/// Per-iteration sampling state shared by every subsampling call in a step.
#[derive(Clone, Debug, Default)]
pub struct StepSamplingContext {
    step: u64,
    cache: Vec<(u64, Vec<usize>)>,
    log: Vec<Vec<usize>>,
}

impl StepSamplingContext {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears the cached index sets and moves to step `t`.
    pub fn begin_step(&mut self, t: u64) {
        self.step = t;
        self.cache.clear();
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Every index set returned so far, one entry per subsampling call.
    pub fn index_log(&self) -> &[Vec<usize>] {
        &self.log
    }
}

/// Low mantissa bits ignored when fingerprinting weights, so that
/// programs differing only in rounding draw the same rows.
const FINGERPRINT_DROP_BITS: u32 = 24;

fn weights_fingerprint(weights: Option<&[f64]>, m: usize, k: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ (m as u64).rotate_left(17) ^ (k as u64);
    if let Some(w) = weights {
        for v in w {
            h ^= v.to_bits() >> FINGERPRINT_DROP_BITS;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    } else {
        h = h.wrapping_mul(31);
    }
    h
}

fn leading_rows(op: &'static str, x: &DenseValue) -> Result<usize> {
    match x {
        DenseValue::Vector(v) => Ok(v.len()),
        DenseValue::Matrix(a) => Ok(a.rows),
        DenseValue::Scalar(_) => Err(shape_err(op, "scalar input".into())),
    }
}

/// Draws (or reuses) the index set for this step and records it in the log.
fn step_indices(
    m: usize,
    k: usize,
    weights: Option<&[f64]>,
    ctx: &mut StepSamplingContext,
    rng: &SeededStream,
) -> Result<Vec<usize>> {
    if k == 0 || m == 0 {
        return Err(TensorError::Parameter(format!(
            "subsample size {k} of {m} rows must be positive"
        )));
    }
    if let Some(w) = weights {
        if w.len() != m {
            return Err(shape_err(
                "subsample_rows",
                format!("{} weights for {m} rows", w.len()),
            ));
        }
        let total: f64 = w.iter().sum();
        if w.iter().any(|p| *p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-8 {
            return Err(TensorError::Parameter(
                "sampling weights are not a probability vector".into(),
            ));
        }
    }
    let fp = weights_fingerprint(weights, m, k);
    let indices = match ctx.cache.iter().find(|(f, _)| *f == fp) {
        Some((_, idx)) => idx.clone(),
        None => {
            let mut r = rng.derive(&[ctx.step, fp]).rng();
            let idx = draw_indices(m, k, weights, &mut r);
            ctx.cache.push((fp, idx.clone()));
            idx
        }
    };
    ctx.log.push(indices.clone());
    Ok(indices)
}

fn inclusion_prob(weights: Option<&[f64]>, m: usize, i: usize) -> f64 {
    weights.map_or(1.0 / m as f64, |w| w[i])
}

/// Subsample `k` rows of a matrix or entries of a vector, i.i.d. with
/// replacement, each rescaled by `1/sqrt(k p_i)`.
pub fn subsample_rows(
    x: &DenseValue,
    k: usize,
    weights: Option<&[f64]>,
    ctx: &mut StepSamplingContext,
    rng: &SeededStream,
    flops: &mut FlopCounter,
) -> Result<DenseValue> {
    let m = leading_rows("subsample_rows", x)?;
    if !x.is_finite() {
        return Err(TensorError::NonFinite {
            op: "subsample_rows",
        });
    }
    let indices = step_indices(m, k, weights, ctx, rng)?;
    let scale = |i: usize| 1.0 / ((k as f64) * inclusion_prob(weights, m, i)).sqrt();
    match x {
        DenseValue::Vector(v) => {
            flops.add(k as u64);
            Ok(DenseValue::Vector(
                indices.iter().map(|&i| v[i] * scale(i)).collect(),
            ))
        }
        DenseValue::Matrix(a) => {
            flops.add((k * a.cols) as u64);
            let mut out = Matrix::zeros(k, a.cols);
            for (r, &i) in indices.iter().enumerate() {
                let s = scale(i);
                for (o, v) in out.data[r * a.cols..(r + 1) * a.cols]
                    .iter_mut()
                    .zip(a.row(i))
                {
                    *o = v * s;
                }
            }
            Ok(DenseValue::Matrix(out))
        }
        DenseValue::Scalar(_) => unreachable!(),
    }
}

/// `SᵀS X` for the same sampler as [`subsample_rows`]: the input keeps its
/// shape, unsampled rows become zero and a row drawn `c` times is scaled by
/// `c / (k p_i)`. Its expectation is `X`.
pub fn subsample_mask(
    x: &DenseValue,
    k: usize,
    weights: Option<&[f64]>,
    ctx: &mut StepSamplingContext,
    rng: &SeededStream,
    flops: &mut FlopCounter,
) -> Result<DenseValue> {
    let m = leading_rows("subsample_mask", x)?;
    if !x.is_finite() {
        return Err(TensorError::NonFinite {
            op: "subsample_mask",
        });
    }
    let indices = step_indices(m, k, weights, ctx, rng)?;
    let mut factor = vec![0.0; m];
    for &i in &indices {
        factor[i] += 1.0 / (k as f64 * inclusion_prob(weights, m, i));
    }
    match x {
        DenseValue::Vector(v) => {
            flops.add(k as u64);
            Ok(DenseValue::Vector(
                v.iter().zip(&factor).map(|(a, f)| a * f).collect(),
            ))
        }
        DenseValue::Matrix(a) => {
            flops.add((k * a.cols) as u64);
            let mut out = Matrix::zeros(a.rows, a.cols);
            for (i, f) in factor.iter().enumerate() {
                if *f == 0.0 {
                    continue;
                }
                for (o, v) in out.data[i * a.cols..(i + 1) * a.cols]
                    .iter_mut()
                    .zip(a.row(i))
                {
                    *o = v * f;
                }
            }
            Ok(DenseValue::Matrix(out))
        }
        DenseValue::Scalar(_) => unreachable!(),
    }
}

fn draw_indices<R: Rng>(m: usize, k: usize, weights: Option<&[f64]>, rng: &mut R) -> Vec<usize> {
    match weights {
        None => (0..k).map(|_| rng.random_range(0..m)).collect(),
        Some(w) => {
            let mut cdf = Vec::with_capacity(m);
            let mut acc = 0.0;
            for p in w {
                acc += p;
                cdf.push(acc);
            }
            (0..k)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() * acc;
                    let pos = cdf.partition_point(|c| *c <= u);
                    // Never land on a zero-probability row.
                    let mut i = pos.min(m - 1);
                    while w[i] == 0.0 && i > 0 {
                        i -= 1;
                    }
                    while w[i] == 0.0 && i + 1 < m {
                        i += 1;
                    }
                    i
                })
                .collect()
        }
    }
}

/// Result of a condition-number estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionEstimate {
    pub kappa: f64,
    pub saturated: bool,
}

/// Sentinel returned for numerically singular inputs.
pub const KAPPA_SATURATED: f64 = 1e14;

/// `σ_max / σ_min` via power iteration on `AᵀA` and inverse power iteration
/// through the R factor of a QR, 100 steps each.
pub fn condition_number(a: &Matrix) -> Result<ConditionEstimate> {
    if a.frobenius() == 0.0 {
        return Err(TensorError::Degenerate("zero matrix".into()));
    }
    // Work with the taller orientation so QR applies.
    let owned;
    let a = if a.rows < a.cols {
        owned = a.transpose();
        &owned
    } else {
        a
    };
    let mut scratch = FlopCounter::new();
    let n = a.cols;
    let start: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (i as f64 + 1.0).sin()).collect();

    let mut v = start.clone();
    let mut smax2 = 0.0;
    for _ in 0..100 {
        let av = a.apply(&v);
        let mut w = vecmat(&av, a, &mut scratch)?;
        let nrm = norm2(&w);
        if nrm == 0.0 {
            break;
        }
        for x in &mut w {
            *x /= nrm;
        }
        let aw = a.apply(&w);
        smax2 = dot_raw(&aw, &aw);
        v = w;
    }
    let smax = smax2.sqrt();
    let r = match hhqr(a, &mut scratch) {
        Ok((_, r)) => r,
        Err(TensorError::RankDeficient { .. }) => {
            return Ok(ConditionEstimate {
                kappa: KAPPA_SATURATED,
                saturated: true,
            })
        }
        Err(e) => return Err(e),
    };
    // Inverse iteration: (AᵀA)^{-1} = R^{-1} R^{-T}.
    let mut v = start;
    let mut inv_lambda = 0.0;
    for _ in 0..100 {
        let mut z = vec![0.0; n];
        for i in 0..n {
            let mut acc = v[i];
            for j in 0..i {
                acc -= r.get(j, i) * z[j];
            }
            z[i] = acc / r.get(i, i);
        }
        let mut w = triangular_solve(&r, &z, &mut scratch)?;
        let nrm = norm2(&w);
        if !nrm.is_finite() || nrm == 0.0 {
            return Ok(ConditionEstimate {
                kappa: KAPPA_SATURATED,
                saturated: true,
            });
        }
        for x in &mut w {
            *x /= nrm;
        }
        v = w;
        // σ_min² = ‖A v‖² at convergence.
        let av = a.apply(&v);
        inv_lambda = dot_raw(&av, &av);
    }
    let smin = inv_lambda.sqrt();
    if smin < 1e-14 * smax || smin == 0.0 {
        return Ok(ConditionEstimate {
            kappa: KAPPA_SATURATED,
            saturated: true,
        });
    }
    Ok(ConditionEstimate {
        kappa: (smax / smin).max(1.0),
        saturated: false,
    })
}
