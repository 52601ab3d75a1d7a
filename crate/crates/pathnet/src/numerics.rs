//! Dense row-major matrices, the layer primitives used by path modules,
//! softmax cross-entropy, plain SGD and seeded random streams.
//!
//! Everything here is a pure function of its inputs. Backprop is written
//! out by hand per primitive; there is no autodiff graph.

use rand::distributions::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `x Wᵀ + b`, with `W` shaped `out × in`, `x` shaped `batch × in`.
pub fn linear_forward(w: &Matrix, b: &[f64], x: &Matrix) -> Result<Matrix> {
    if x.cols != w.cols {
        return Err(Error::dim(
            "linear_forward",
            format!("input with {} columns", w.cols),
            format!("{} columns", x.cols),
        ));
    }
    if b.len() != w.rows {
        return Err(Error::dim(
            "linear_forward",
            format!("bias of length {}", w.rows),
            format!("length {}", b.len()),
        ));
    }
    let mut out = Matrix::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for (o, (wo, bo)) in or.iter_mut().zip((0..w.rows).map(|i| w.row(i)).zip(b)) {
            *o = dot(xr, wo) + bo;
        }
    }
    Ok(out)
}

/// Gradients of [`linear_forward`] given the upstream gradient `dz`
/// (`batch × out`). Returns `(dW, db, dx)`; `dx` is skipped when
/// `want_input_grad` is false.
pub fn linear_backward(
    w: &Matrix,
    x: &Matrix,
    dz: &Matrix,
    want_input_grad: bool,
) -> Result<(Matrix, Vec<f64>, Option<Matrix>)> {
    if dz.rows != x.rows || dz.cols != w.rows || x.cols != w.cols {
        return Err(Error::dim(
            "linear_backward",
            format!("dz {}x{}, x {}x{}", x.rows, w.rows, x.rows, w.cols),
            format!("dz {}x{}, x {}x{}", dz.rows, dz.cols, x.rows, x.cols),
        ));
    }
    let mut dw = Matrix::zeros(w.rows, w.cols);
    let mut db = vec![0.0; w.rows];
    for r in 0..x.rows {
        let xr = x.row(r);
        for (o, &g) in dz.row(r).iter().enumerate() {
            if g != 0.0 {
                axpy(g, xr, dw.row_mut(o));
                db[o] += g;
            }
        }
    }
    let dx = want_input_grad.then(|| input_grad(w, dz));
    Ok((dw, db, dx))
}

/// `dz W`: gradient with respect to the input of a linear map.
pub fn input_grad(w: &Matrix, dz: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(dz.rows, w.cols);
    for r in 0..dz.rows {
        let dxr = dx.row_mut(r);
        for (o, &g) in dz.row(r).iter().enumerate() {
            if g != 0.0 {
                axpy(g, w.row(o), dxr);
            }
        }
    }
    dx
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Masks `upstream` by `pre > 0`, i.e. the ReLU derivative (0 at the kink).
pub fn relu_backward(pre: &Matrix, upstream: &Matrix) -> Matrix {
    debug_assert_eq!(pre.shape(), upstream.shape());
    let mut out = upstream.clone();
    for (g, &z) in out.data.iter_mut().zip(&pre.data) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / batch`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::dim(
            "softmax_xent",
            format!("{} labels", logits.rows),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            logits.cols
        )));
    }
    let n = logits.rows.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(r);
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - log_z).exp() / n;
        }
        g[label] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

/// Index of the largest logit per row (first one on ties).
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// In-place `param -= lr * grad`.
pub fn sgd_step(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::dim(
            "sgd_step",
            format!("{:?}", param.shape()),
            format!("{:?}", grad.shape()),
        ));
    }
    sgd_step_slice(&mut param.data, &grad.data, lr)
}

pub fn sgd_step_slice(param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::dim("sgd_step", param.len(), grad.len()));
    }
    axpy(-lr, grad, param);
    Ok(())
}

/// Glorot/Xavier uniform draw for an `out × in` weight matrix.
pub fn glorot_uniform(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Matrix {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..out_dim * in_dim).map(|_| dist.sample(rng)).collect();
    Matrix {
        rows: out_dim,
        cols: in_dim,
        data,
    }
}

/// A reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose 64-bit stream selector gives independent,
/// platform-stable sequences for each worker or phase of an experiment.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A new stream derived from this one's seed and a tag; does not
    /// advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(mix(self.seed ^ mix(self.stream_id)), tag)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// SplitMix64 finalizer, used to spread small seeds and tags.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
