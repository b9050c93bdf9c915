//! Dense/sparse linear algebra in `f64`, a splittable seeded RNG, softmax,
//! inverted-dropout masks and the Adam update.
//!
//! Everything here is a pure function of explicit state. There is no global
//! RNG: every stochastic routine takes an [`RngState`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Bag-of-features sample: strictly increasing indices with non-negative
/// finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVector {
    pub fn new(dim: usize, entries: Vec<(usize, f64)>) -> Result<Self> {
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for (pos, &(idx, val)) in entries.iter().enumerate() {
            if idx >= dim {
                return Err(Error::Range(format!("index {idx} >= dim {dim}")));
            }
            if let Some(&prev) = indices.last() {
                if idx <= prev {
                    return Err(Error::Domain(format!(
                        "indices must be strictly increasing (entry {pos}: {idx} after {prev})"
                    )));
                }
            }
            if !val.is_finite() || val < 0.0 {
                return Err(Error::Domain(format!(
                    "feature value at index {idx} must be finite and >= 0, got {val}"
                )));
            }
            indices.push(idx);
            values.push(val);
        }
        Ok(Self {
            dim,
            indices,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

/// Borrowed dense-or-sparse input vector.
#[derive(Debug, Clone, Copy)]
pub enum VectorRef<'a> {
    Dense(&'a [f64]),
    Sparse(&'a SparseVector),
}

impl VectorRef<'_> {
    pub fn dim(&self) -> usize {
        match self {
            VectorRef::Dense(v) => v.len(),
            VectorRef::Sparse(s) => s.dim(),
        }
    }
}

impl<'a> From<&'a [f64]> for VectorRef<'a> {
    fn from(v: &'a [f64]) -> Self {
        VectorRef::Dense(v)
    }
}

impl<'a> From<&'a Vec<f64>> for VectorRef<'a> {
    fn from(v: &'a Vec<f64>) -> Self {
        VectorRef::Dense(v.as_slice())
    }
}

impl<'a> From<&'a SparseVector> for VectorRef<'a> {
    fn from(v: &'a SparseVector) -> Self {
        VectorRef::Sparse(v)
    }
}

/// `W·x + b`.
pub fn affine_forward(w: &DenseMatrix, b: &[f64], x: VectorRef<'_>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; w.rows()];
    affine_forward_into(w.values(), w.rows(), w.cols(), b, x, &mut out)?;
    Ok(out)
}

/// `W·x + b` written into `out`, with `W` given as a row-major slice.
///
/// Exact zeros of a dense `x` are skipped, so a sparse vector and its dense
/// expansion accumulate the same terms in the same order and agree bitwise.
pub fn affine_forward_into(
    w: &[f64],
    rows: usize,
    cols: usize,
    b: &[f64],
    x: VectorRef<'_>,
    out: &mut [f64],
) -> Result<()> {
    if w.len() != rows * cols || b.len() != rows || out.len() != rows || x.dim() != cols {
        return Err(Error::Shape(format!(
            "affine: W {}x{} ({} values), b {}, x {}, out {}",
            rows,
            cols,
            w.len(),
            b.len(),
            x.dim(),
            out.len()
        )));
    }
    match x {
        VectorRef::Dense(x) => {
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = b[r];
                for (wv, &xv) in row.iter().zip(x) {
                    if xv != 0.0 {
                        acc += wv * xv;
                    }
                }
                *o = acc;
            }
        }
        VectorRef::Sparse(x) => {
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = b[r];
                for (j, xv) in x.iter() {
                    if xv != 0.0 {
                        acc += row[j] * xv;
                    }
                }
                *o = acc;
            }
        }
    }
    Ok(())
}

/// Reverse pass of [`affine_forward_into`].
///
/// Accumulates `dW += g·xᵀ` and `db += g` when `grad_wb` is given, and writes
/// `dx = Wᵀ·g` when `grad_x` is given (dense inputs only).
pub fn affine_backward(
    w: &[f64],
    rows: usize,
    cols: usize,
    x: VectorRef<'_>,
    grad_out: &[f64],
    grad_wb: Option<(&mut [f64], &mut [f64])>,
    grad_x: Option<&mut [f64]>,
) {
    debug_assert_eq!(grad_out.len(), rows);
    if let Some((gw, gb)) = grad_wb {
        for (r, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[r] += g;
            let row = &mut gw[r * cols..(r + 1) * cols];
            match x {
                VectorRef::Dense(x) => {
                    for (gwv, &xv) in row.iter_mut().zip(x) {
                        *gwv += g * xv;
                    }
                }
                VectorRef::Sparse(x) => {
                    for (j, xv) in x.iter() {
                        row[j] += g * xv;
                    }
                }
            }
        }
    }
    if let Some(gx) = grad_x {
        debug_assert_eq!(gx.len(), cols);
        gx.iter_mut().for_each(|v| *v = 0.0);
        for (r, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[r * cols..(r + 1) * cols];
            for (gxv, &wv) in gx.iter_mut().zip(row) {
                *gxv += g * wv;
            }
        }
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pairwise (cascade) summation. The result depends only on the slice
/// contents and order, never on scheduling.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Locale-independent `%.{sig}g` rendering: `sig` significant digits,
/// trailing zeros dropped, exponent form outside `[1e-4, 10^sig)`.
pub fn format_g(x: f64, sig: usize) -> String {
    let sig = sig.max(1);
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.*e}", sig - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= sig as i32 {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (sig as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a text label into a child-stream key.
pub fn label_key(label: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Splittable deterministic generator.
///
/// The key is the seed, the ChaCha stream id is derived from the path of
/// child labels, so a child stream depends only on `(seed, labels)` and not
/// on how many values were drawn from any other stream.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream keyed by a numeric label.
    pub fn child(&self, label: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    /// Independent child stream keyed by a text label.
    pub fn child_named(&self, label: &str) -> Self {
        self.child(label_key(label))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniformly random sign, `+1.0` or `-1.0`.
    pub fn sign(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(rand_distr::StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Inverted-dropout mask: each entry is `1/keep_prob` with probability
/// `keep_prob`, else `0`.
pub fn bernoulli_mask(rng: &mut RngState, n: usize, keep_prob: f64) -> Result<Vec<f64>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::Config(format!(
            "keep_prob must be in (0, 1], got {keep_prob}"
        )));
    }
    if keep_prob == 1.0 {
        return Ok(vec![1.0; n]);
    }
    let scale = 1.0 / keep_prob;
    Ok((0..n)
        .map(|_| if rng.uniform() < keep_prob { scale } else { 0.0 })
        .collect())
}

/// Moment buffers and hyperparameters of one Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: Self::DEFAULT_BETA1,
            beta2: Self::DEFAULT_BETA2,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam descent step. Gradients are checked before any
/// state is touched, so a failure leaves params and state unchanged.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::Shape(format!(
            "adam: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient at parameter index {i} is {}",
            grads[i]
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
