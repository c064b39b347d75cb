//! Dense numerical kernel: row-major `f64` matrices, analytic backward passes,
//! activations, normalization, the cosine kernel, Adam, and a central-difference
//! gradient checker.
//!
//! There is no autograd graph. Every forward op that participates in training
//! has a matching `*_backward` and callers chain them by hand.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GnolrError, Result};

/// Norms below this are treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Work size (multiply-adds) above which matrix products fan out over rayon.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GnolrError::dim(
                "Matrix::new",
                rows * cols,
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GnolrError::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(GnolrError::dim(
                "add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `A · B`.
pub fn matmul_forward(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(GnolrError::dim("matmul", format!("inner dimension {}", a.cols), b.rows));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// `A · Bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(GnolrError::dim(
            "matmul_nt",
            format!("shared dimension {}", a.cols),
            b.cols,
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return Ok(out);
    }
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data.par_chunks_mut(n).enumerate().for_each(kernel);
    } else {
        out.data.chunks_mut(n).enumerate().for_each(kernel);
    }
    Ok(out)
}

/// `Aᵀ · B`. Each output row is reduced by a single thread in ascending
/// row order of `A`, so results do not depend on the thread count.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(GnolrError::dim(
            "matmul_tn",
            format!("shared dimension {}", a.rows),
            b.rows,
        ));
    }
    matmul_forward(&a.transpose(), b)
}

/// Gradients of `A · B` given the upstream gradient: `(upstream · Bᵀ, Aᵀ · upstream)`.
pub fn matmul_backward(upstream: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    if upstream.rows != a.rows || upstream.cols != b.cols {
        return Err(GnolrError::dim(
            "matmul_backward",
            format!("{}x{}", a.rows, b.cols),
            format!("{}x{}", upstream.rows, upstream.cols),
        ));
    }
    Ok((matmul_nt(upstream, b)?, matmul_tn(a, upstream)?))
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky_relu`] at `x` (the right derivative at 0).
#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn leaky_relu_forward(x: &Matrix, slope: f64) -> Matrix {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = leaky_relu(*v, slope));
    out
}

/// Backward through LeakyReLU given the pre-activation input.
pub fn leaky_relu_backward(upstream: &Matrix, pre: &Matrix, slope: f64) -> Matrix {
    let mut out = upstream.clone();
    for (g, &x) in out.data.iter_mut().zip(&pre.data) {
        *g *= leaky_relu_grad(x, slope);
    }
    out
}

/// Logistic function evaluated without overflow on either tail.
#[inline]
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, stable for large `|x|`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln σ(x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    /// Pre-normalization Euclidean norm.
    pub norm: f64,
    /// Set when the input norm fell below [`NORM_EPS`].
    pub degenerate: bool,
}

/// `v / max(‖v‖, ε)`. A zero vector comes back as zero with `degenerate` set.
pub fn l2_normalize(v: &[f64]) -> Normalized {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(NORM_EPS);
    Normalized {
        values: v.iter().map(|x| x / denom).collect(),
        norm,
        degenerate: norm < NORM_EPS,
    }
}

/// Backward through [`l2_normalize`] from its output and input norm.
pub fn l2_normalize_backward(out: &[f64], norm: f64, upstream: &[f64]) -> Vec<f64> {
    if norm < NORM_EPS {
        return upstream.iter().map(|g| g / NORM_EPS).collect();
    }
    let proj: f64 = out.iter().zip(upstream).map(|(y, g)| y * g).sum();
    out.iter().zip(upstream).map(|(y, g)| (g - y * proj) / norm).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GnolrError::dim("cosine_kernel", a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(GnolrError::Kernel("cosine of a zero-norm vector is undefined".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradients of `upstream · cos(a, b)` with respect to `a` and `b`.
pub fn cosine_kernel_backward(a: &[f64], b: &[f64], upstream: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(GnolrError::dim("cosine_kernel_backward", a.len(), b.len()));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(GnolrError::Kernel("cosine of a zero-norm vector is undefined".into()));
    }
    let k = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| upstream * (y / (na * nb) - k * x / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| upstream * (x / (na * nb) - k * y / (nb * nb)))
        .collect();
    Ok((ga, gb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(GnolrError::Argument(format!("invalid Adam config {self:?}")))
        }
    }
}

/// A trainable matrix with its gradient buffer and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
    /// Row-sparse update: rows whose gradient is exactly zero are left
    /// untouched (value and moments). Used for embedding tables.
    pub sparse_rows: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
            sparse_rows: false,
        }
    }

    pub fn sparse(mut self) -> Self {
        self.sparse_rows = true;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }
}

/// One bias-corrected Adam update. Zeroes the gradient and bumps `step_count`.
pub fn adam_step(param: &mut Parameter, cfg: &AdamConfig) -> Result<()> {
    if !param.grad.is_finite() {
        return Err(GnolrError::Optimizer {
            param: param.name.clone(),
        });
    }
    param.step_count += 1;
    let t = param.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let cols = param.value.cols.max(1);

    let rows = param.value.rows;
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        let g = &param.grad.data[span.clone()];
        if param.sparse_rows && g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let m = &mut param.adam_m.data[span.clone()];
        let v = &mut param.adam_v.data[span.clone()];
        let w = &mut param.value.data[span];
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    param.zero_grad();
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates to probe; raised to at least 100.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged on absolute error.
    pub abs_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            samples: 100,
            seed: 0,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub passed: bool,
}

/// Compares analytic gradients against central differences
/// `(L(θ+h) − L(θ−h)) / 2h` on a seeded sample of coordinates.
pub fn finite_diff_check<F>(mut loss: F, theta: &[f64], analytic: &[f64], cfg: &FdConfig) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(theta.len(), analytic.len(), "gradient length mismatch");
    let want = cfg.samples.max(100);
    let coords: Vec<usize> = if theta.len() <= want {
        (0..theta.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, theta.len(), want).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut probe = theta.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + cfg.h;
        let up = loss(&probe);
        probe[i] = orig - cfg.h;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some(i);
        }
    }
    FdReport {
        checked: coords.len(),
        max_rel_error: max_rel,
        worst_index: worst,
        passed: max_rel < cfg.tolerance,
    }
}
