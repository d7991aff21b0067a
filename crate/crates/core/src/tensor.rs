//! Dense row-major `f32` tensors and the handful of kernels the model needs.
//!
//! Storage is 32-bit; every reduction (matmul inner products, softmax
//! normalisers, layernorm moments) accumulates in 64-bit with a fixed loop
//! order so single-threaded results are bit-reproducible.

use crate::error::{MieError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(MieError::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MieError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(MieError::contract("ragged rows"));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(MieError::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }

    /// Rows of a 2-D tensor. Panics on other ranks.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert!(start < end && end <= n);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Tensor {
            shape: vec![m, w],
            data: out,
        }
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let n = self.cols();
        assert!(start < end && end <= self.rows());
        Tensor {
            shape: vec![end - start, n],
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// Inner product of two `f32` slices accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_2d("matmul")?;
    let (k2, n) = b.require_2d("matmul")?;
    if k != k2 {
        return Err(MieError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-wise softmax with per-row max subtraction. `-inf` entries are
/// treated as masked and come out as exactly zero.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_2d("softmax_rows")?;
    let mut out = a.clone();
    for i in 0..m {
        softmax_in_place(&mut out.data[i * n..(i + 1) * n]).map_err(|_| MieError::DegenerateRow { row: i })?;
    }
    Ok(out)
}

/// Softmax over one slice. Errors when every entry is `-inf`.
pub(crate) fn softmax_in_place(row: &mut [f32]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        return Err(());
    }
    let mut exps = Vec::with_capacity(row.len());
    let mut sum = 0.0f64;
    for &x in row.iter() {
        let e = if x == f32::NEG_INFINITY {
            0.0
        } else {
            ((x - max) as f64).exp()
        };
        sum += e;
        exps.push(e);
    }
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
    Ok(())
}

/// Layer normalisation with population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Vec<f32> {
    layer_norm_with_scale(x, gamma, beta, eps).0
}

/// Layer norm that also returns `sqrt(var + eps)`, the per-vector scale.
pub fn layer_norm_with_scale(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> (Vec<f32>, f64) {
    assert!(!x.is_empty(), "layer_norm on empty vector");
    assert!(x.len() == gamma.len() && x.len() == beta.len());
    let d = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = x
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    let scale = (var + eps as f64).sqrt();
    let out = x
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| ((v as f64 - mean) / scale * g as f64 + b as f64) as f32)
        .collect();
    (out, scale)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximation GELU on a single value.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())) as f32
}

pub fn gelu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| gelu_scalar(v)).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(x: &[f32]) -> Result<usize> {
    if x.is_empty() {
        return Err(MieError::contract("argmax of empty vector"));
    }
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Thin SVD `a = u · diag(s) · vᵀ` with `r = min(m, n)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`, for checking.
    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.rows(), self.u.cols());
        let n = self.v.rows();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..r {
                    acc += self.u.at(i, k) as f64 * self.s[k] * self.v.at(j, k) as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }
}

pub const SVD_TOLERANCE: f64 = 1e-10;
pub const SVD_MAX_SWEEPS: usize = 30;

/// One-sided (Hestenes) Jacobi SVD, computed in `f64`.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    let (m, n) = a.require_2d("svd")?;
    if a.data.iter().any(|x| !x.is_finite()) {
        return Err(MieError::contract("svd input has non-finite entries"));
    }
    if m >= n {
        let cols = columns_f64(a);
        let (u, s, v) = jacobi_tall(cols, m, n)?;
        Ok(SvdResult { u, s, v })
    } else {
        let cols = columns_f64(&a.transpose());
        let (u, s, v) = jacobi_tall(cols, n, m)?;
        Ok(SvdResult { u: v, s, v: u })
    }
}

fn columns_f64(a: &Tensor) -> Vec<Vec<f64>> {
    let (m, n) = (a.rows(), a.cols());
    (0..n)
        .map(|j| (0..m).map(|i| a.data[i * n + j] as f64).collect())
        .collect()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(a: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = a.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Jacobi on the columns of an `m × n` matrix with `m >= n`.
fn jacobi_tall(mut w: Vec<Vec<f64>>, m: usize, n: usize) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let frob = w.iter().map(|c| dot64(c, c)).sum::<f64>().sqrt();
    // Columns below this norm are numerically zero and excluded from rotations.
    let negligible = (frob * 1e-13).powi(2);

    let mut converged = frob == 0.0;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot64(&w[p], &w[p]);
                let beta = dot64(&w[q], &w[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot64(&w[p], &w[q]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = residual <= SVD_TOLERANCE;
    }
    if !converged {
        return Err(MieError::NoConvergence { sweeps, residual });
    }

    let norms: Vec<f64> = w.iter().map(|c| dot64(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let tiny = frob * 1e-12;
    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vcols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut null_slots = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        vcols.push(v[j].clone());
        if norms[j] > tiny {
            s.push(norms[j]);
            ucols.push(w[j].iter().map(|x| x / norms[j]).collect());
        } else {
            s.push(0.0);
            ucols.push(vec![0.0; m]);
            null_slots.push(k);
        }
    }
    for k in null_slots {
        ucols[k] = orthogonal_complement_vector(&ucols, k, m);
    }

    let to_tensor = |cols: &[Vec<f64>], rows: usize| {
        let r = cols.len();
        let mut data = vec![0.0f32; rows * r];
        for (j, c) in cols.iter().enumerate() {
            for i in 0..rows {
                data[i * r + j] = c[i] as f32;
            }
        }
        Tensor {
            shape: vec![rows, r],
            data,
        }
    };
    Ok((to_tensor(&ucols, m), s, to_tensor(&vcols, n)))
}

/// A unit vector orthogonal to every column of `basis` other than `skip`,
/// found by Gram-Schmidt on the standard basis.
fn orthogonal_complement_vector(basis: &[Vec<f64>], skip: usize, m: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..m {
        let mut cand = vec![0.0; m];
        cand[e] = 1.0;
        for _ in 0..2 {
            for (k, b) in basis.iter().enumerate() {
                if k == skip || b.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let proj = dot64(&cand, b);
                for (c, &bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let norm = dot64(&cand, &cand).sqrt();
        if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
            best = Some((norm, cand));
        }
        if norm > 0.5 {
            break;
        }
    }
    let (norm, cand) = best.expect("m >= 1");
    cand.into_iter().map(|x| x / norm).collect()
}
