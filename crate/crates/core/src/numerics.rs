//! Dense primitives: row-major matrices, unit-sphere normalization and its
//! Jacobian, cosine similarity and generalized-mean (GeM) pooling.
//!
//! Everything here works in `f64`. Descriptors are only narrowed to `f32`
//! when written to disk (see [`crate::io`]).

use crate::error::{Error, Result};

/// Largest deviation of a descriptor norm from 1 that is still accepted.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Norms at or below this value cannot be normalized.
pub const NORM_FLOOR: f64 = 1e-12;
/// GeM inputs are clamped below at this value before exponentiation.
pub const GEM_CLAMP: f64 = 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Gram matrix `A A^T` of the rows.
    pub fn gram(&self) -> Matrix {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                out.set(i, j, v);
                out.set(j, i, v);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// `B` unit-norm descriptors of dimension `C`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    inner: Matrix,
}

impl DescriptorMatrix {
    /// Wraps `m`, checking that every row has unit norm within [`UNIT_NORM_TOL`].
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::TooFewItems {
                needed: 1,
                available: 0,
            });
        }
        for r in m.iter_rows() {
            let n = norm(r);
            if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
                return Err(Error::NotUnitNorm { norm: n });
            }
        }
        Ok(Self { inner: m })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Normalizes every row of `m`.
    pub fn normalized(mut m: Matrix) -> Result<Self> {
        for i in 0..m.rows() {
            let d = normalize(m.row(i))?;
            m.row_mut(i).copy_from_slice(&d);
        }
        Self::new(m)
    }

    pub fn count(&self) -> usize {
        self.inner.rows()
    }

    pub fn dim(&self) -> usize {
        self.inner.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inner.row(i)
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.inner.iter_rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix {
        self.inner
    }

    /// Scores of every row against `query`.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.iter_rows().map(|r| clamp_score(dot(query, r))).collect()
    }
}

/// Saved state for [`l2_normalize_backward`].
#[derive(Debug, Clone)]
pub struct NormTape {
    output: Vec<f64>,
    norm: f64,
}

impl NormTape {
    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// `x / ||x||`, without a tape.
pub fn normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n <= NORM_FLOOR || !n.is_finite() {
        return Err(Error::NearZeroNorm { norm: n });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

pub fn l2_normalize(x: &[f64]) -> Result<(Vec<f64>, NormTape)> {
    let d = normalize(x)?;
    let tape = NormTape {
        output: d.clone(),
        norm: norm(x),
    };
    Ok((d, tape))
}

/// Applies the Jacobian `(I - d d^T) / ||x||` of the normalization to `grad_out`.
pub fn l2_normalize_backward(tape: &NormTape, grad_out: &[f64]) -> Vec<f64> {
    let d = &tape.output;
    let radial = dot(d, grad_out);
    grad_out
        .iter()
        .zip(d)
        .map(|(g, di)| (g - radial * di) / tape.norm)
        .collect()
}

/// Clamps a dot product of unit vectors into `[-1, 1]`.
pub(crate) fn clamp_score(s: f64) -> f64 {
    s.clamp(-1.0, 1.0)
}

/// Checks that `x` is within the unit-norm tolerance.
fn check_unit(x: &[f64]) -> Result<()> {
    let n = norm(x);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotUnitNorm { norm: n });
    }
    Ok(())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    check_unit(a)?;
    check_unit(b)?;
    Ok(clamp_score(dot(a, b)))
}

/// `S_ij = d_i . d_j`, with the diagonal set to exactly 1.
pub fn similarity_matrix(d: &DescriptorMatrix) -> Matrix {
    let mut s = d.as_matrix().gram();
    for v in s.as_mut_slice() {
        *v = clamp_score(*v);
    }
    for i in 0..d.count() {
        s.set(i, i, 1.0);
    }
    s
}

/// Saved state for [`gem_pool_backward`].
#[derive(Debug, Clone)]
pub struct GemTape {
    clamped: Matrix,
    active: Vec<bool>,
    power: f64,
    output: Vec<f64>,
}

/// Componentwise generalized mean `((1/N) sum_i x_ic^p)^(1/p)` over the rows of `x`.
pub fn gem_pool(x: &Matrix, p: f64) -> Result<(Vec<f64>, GemTape)> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(Error::InvalidPower(p));
    }
    if x.rows() == 0 {
        return Err(Error::TooFewItems {
            needed: 1,
            available: 0,
        });
    }
    let n = x.rows() as f64;
    let active: Vec<bool> = x.as_slice().iter().map(|&v| v >= GEM_CLAMP).collect();
    let clamped = Matrix::from_vec(
        x.rows(),
        x.cols(),
        x.as_slice().iter().map(|&v| v.max(GEM_CLAMP)).collect(),
    )?;
    let mut output = vec![0.0; x.cols()];
    for (c, out) in output.iter_mut().enumerate() {
        let mean = (0..x.rows()).map(|i| clamped.get(i, c).powf(p)).sum::<f64>() / n;
        *out = mean.powf(1.0 / p);
    }
    let tape = GemTape {
        clamped,
        active,
        power: p,
        output: output.clone(),
    };
    Ok((output, tape))
}

/// Gradients of the pooled vector with respect to the inputs and to the power.
///
/// Inputs that were clamped receive zero gradient.
pub fn gem_pool_backward(tape: &GemTape, grad_out: &[f64]) -> (Matrix, f64) {
    let x = &tape.clamped;
    let p = tape.power;
    let n = x.rows() as f64;
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    let mut grad_p = 0.0;
    for (c, (&g, &go)) in tape.output.iter().zip(grad_out).enumerate() {
        // dg/dx_ic = g^(1-p) x_ic^(p-1) / N
        let scale = g.powf(1.0 - p) / n;
        let mut mean = 0.0;
        let mut mean_log = 0.0;
        for i in 0..x.rows() {
            let v = x.get(i, c);
            let vp = v.powf(p);
            mean += vp;
            mean_log += vp * v.ln();
            if tape.active[i * x.cols() + c] {
                grad_x.set(i, c, go * scale * v.powf(p - 1.0));
            }
        }
        mean /= n;
        mean_log /= n;
        // dg/dp = g * (mean(x^p ln x) / (p mean) - ln(mean) / p^2)
        let dg_dp = g * (mean_log / (p * mean) - mean.ln() / (p * p));
        grad_p += go * dg_dp;
    }
    (grad_x, grad_p)
}
