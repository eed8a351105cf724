//! Deterministic numerics shared by every other module: dense matrices, a
//! small feed-forward network with exact analytic gradients, inverted-dropout
//! uncertainty estimation, the Gaussian CDF, and seeded random streams.
//!
//! All randomness flows through [`Rng`]; there is no global RNG anywhere in
//! the crate. Identical seeds produce identical streams, and independent
//! streams are derived with [`Rng::subrng`].

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec64 = Vec<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch at layer {layer}: expected input of length {expected}, got {actual}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("matrix shape ({rows}, {cols}) does not match data length {len}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("sigma must be strictly positive, got {0}")]
    InvalidSigma(f64),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropout(f64),
    #[error("need at least 2 samples for variance estimation, got {0}")]
    TooFewSamples(usize),
    #[error("finite-difference step must be strictly positive, got {0}")]
    InvalidStep(f64),
    #[error("dropout mask count {got} does not match hidden layer count {expected}")]
    BadMaskCount { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, NumericError>;

// ---------------------------------------------------------------------------
// Dense matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NumericError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (c, a) in row.iter().enumerate() {
                y[c] += a * x[r];
            }
        }
        y
    }
}

// ---------------------------------------------------------------------------
// Seeded RNG
// ---------------------------------------------------------------------------

/// Seeded random stream. One instance must not be shared across concurrent
/// callers; derive independent streams with [`Rng::subrng`] instead.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent stream: the sub-seed is
    /// `splitmix64(seed XOR splitmix64(stream))`, so distinct `stream` ids
    /// give decorrelated generators regardless of the parent seed.
    pub fn subrng(&self, stream: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(stream)))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (deterministic pair consumption).
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Gaussian CDF
// ---------------------------------------------------------------------------

/// Phi((x - mu) / sigma) via erf. Errors on sigma <= 0.
pub fn gaussian_cdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(NumericError::InvalidSigma(sigma));
    }
    let z = (x - mu) / (sigma * std::f64::consts::SQRT_2);
    Ok(0.5 * (1.0 + libm::erf(z)))
}

/// Density of N(mu, sigma^2) at x.
pub fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative; ReLU uses subgradient 0 at z == 0.
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Mat64,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Feed-forward network parameters: ReLU hidden layers, identity output,
/// one dropout rate per hidden layer. Doubles as the gradient container
/// (gradients are "MlpParams-shaped").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
    /// One rate in [0, 1) per hidden layer (layers.len() - 1 entries).
    pub dropout: Vec<f64>,
}

impl MlpParams {
    /// Zero-initialized network with the given layer widths
    /// (`widths[0]` is the input dimension).
    pub fn zeros(widths: &[usize], dropout: &[f64]) -> Result<Self> {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let n_layers = widths.len() - 1;
        assert_eq!(dropout.len(), n_layers - 1, "one dropout rate per hidden layer");
        for &p in dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(NumericError::InvalidDropout(p));
            }
        }
        let layers = (0..n_layers)
            .map(|l| DenseLayer {
                weights: Mat64::zeros(widths[l + 1], widths[l]),
                bias: vec![0.0; widths[l + 1]],
                activation: if l + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            })
            .collect();
        Ok(Self {
            layers,
            dropout: dropout.to_vec(),
        })
    }

    /// Random init: weights and biases ~ N(0, scale^2). Nonzero biases keep
    /// pre-activations off the ReLU kink, which matters for gradient checks.
    pub fn random(widths: &[usize], dropout: &[f64], scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(widths, dropout)?;
        for layer in &mut p.layers {
            for w in &mut layer.weights.data {
                *w = scale * rng.normal();
            }
            for b in &mut layer.bias {
                *b = scale * rng.normal();
            }
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weights.rows()));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data.len() + l.bias.len())
            .sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.weights.data.len() {
                return l.weights.data[idx];
            }
            idx -= l.weights.data.len();
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, v: f64) {
        for l in &mut self.layers {
            if idx < l.weights.data.len() {
                l.weights.data[idx] = v;
                return;
            }
            idx -= l.weights.data.len();
            if idx < l.bias.len() {
                l.bias[idx] = v;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.weights.data.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        z
    }

    /// self += scale * other (elementwise over all parameters).
    pub fn axpy(&mut self, scale: f64, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (w, g) in a.weights.data.iter_mut().zip(&b.weights.data) {
                *w += scale * g;
            }
            for (w, g) in a.bias.iter_mut().zip(&b.bias) {
                *w += scale * g;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.data.iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for l in &self.layers {
            for w in l.weights.data.iter().chain(&l.bias) {
                m = m.max(w.abs());
            }
        }
        m
    }

    /// Euclidean norm over all parameters.
    pub fn l2_norm(&self) -> f64 {
        let mut sum = 0.0;
        for l in &self.layers {
            for w in l.weights.data.iter().chain(&l.bias) {
                sum += w * w;
            }
        }
        sum.sqrt()
    }
}

fn check_masks(params: &MlpParams, masks: Option<&[Vec64]>) -> Result<()> {
    if let Some(ms) = masks {
        if ms.len() != params.hidden_count() {
            return Err(NumericError::BadMaskCount {
                expected: params.hidden_count(),
                got: ms.len(),
            });
        }
        for (l, m) in ms.iter().enumerate() {
            let width = params.layers[l].weights.rows();
            if m.len() != width {
                return Err(NumericError::DimensionMismatch {
                    layer: l,
                    expected: width,
                    actual: m.len(),
                });
            }
        }
    }
    Ok(())
}

struct ForwardCache {
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activation (and post-dropout) outputs per layer.
    post: Vec<Vec<f64>>,
}

fn forward_cached(
    params: &MlpParams,
    input: &[f64],
    masks: Option<&[Vec64]>,
) -> Result<ForwardCache> {
    if input.len() != params.input_dim() {
        return Err(NumericError::DimensionMismatch {
            layer: 0,
            expected: params.input_dim(),
            actual: input.len(),
        });
    }
    check_masks(params, masks)?;
    let n_layers = params.layers.len();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers);
    let mut x = input.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = layer.weights.matvec(&x);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        let mut h: Vec<f64> = z.iter().map(|&zi| layer.activation.apply(zi)).collect();
        if l + 1 < n_layers {
            if let Some(ms) = masks {
                // Inverted dropout: kept units are rescaled by 1/(1-p) so
                // the unmasked forward pass is the inference-mode network.
                let keep = 1.0 - params.dropout[l];
                for (hi, mi) in h.iter_mut().zip(&ms[l]) {
                    *hi *= mi / keep;
                }
            }
        }
        pre.push(z);
        x = h.clone();
        post.push(h);
    }
    Ok(ForwardCache { pre, post })
}

/// Forward pass. Without masks, dropout is disabled (full network).
pub fn mlp_forward(params: &MlpParams, input: &[f64], masks: Option<&[Vec64]>) -> Result<Vec64> {
    let cache = forward_cached(params, input, masks)?;
    Ok(cache.post.last().unwrap().clone())
}

/// Exact reverse-mode gradients of the forward map. Returns gradients in an
/// `MlpParams`-shaped container plus the gradient with respect to the input.
pub fn mlp_gradient(
    params: &MlpParams,
    input: &[f64],
    upstream: &[f64],
    masks: Option<&[Vec64]>,
) -> Result<(MlpParams, Vec64)> {
    let n_layers = params.layers.len();
    if upstream.len() != params.output_dim() {
        return Err(NumericError::DimensionMismatch {
            layer: n_layers - 1,
            expected: params.output_dim(),
            actual: upstream.len(),
        });
    }
    let cache = forward_cached(params, input, masks)?;
    let mut grads = params.zeros_like();
    let mut gh = upstream.to_vec();
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        if l + 1 < n_layers {
            if let Some(ms) = masks {
                let keep = 1.0 - params.dropout[l];
                for (g, m) in gh.iter_mut().zip(&ms[l]) {
                    *g *= m / keep;
                }
            }
        }
        let gz: Vec<f64> = gh
            .iter()
            .zip(&cache.pre[l])
            .map(|(&g, &z)| g * layer.activation.deriv(z))
            .collect();
        let below: &[f64] = if l == 0 { input } else { &cache.post[l - 1] };
        {
            let gl = &mut grads.layers[l];
            let cols = gl.weights.cols();
            for (r, &gzr) in gz.iter().enumerate() {
                let row = &mut gl.weights.data[r * cols..(r + 1) * cols];
                for (w, &x) in row.iter_mut().zip(below) {
                    *w += gzr * x;
                }
                gl.bias[r] += gzr;
            }
        }
        gh = layer.weights.tmatvec(&gz);
    }
    Ok((grads, gh))
}

/// Central finite-difference gradient of a scalar loss over all parameters.
/// Test oracle; independent of [`mlp_gradient`]'s backward pass.
pub fn finite_diff_gradient<F>(loss_fn: F, params: &MlpParams, h: f64) -> Result<MlpParams>
where
    F: Fn(&MlpParams) -> f64,
{
    if !(h > 0.0) {
        return Err(NumericError::InvalidStep(h));
    }
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    for i in 0..params.param_count() {
        let orig = params.get_param(i);
        probe.set_param(i, orig + h);
        let plus = loss_fn(&probe);
        probe.set_param(i, orig - h);
        let minus = loss_fn(&probe);
        probe.set_param(i, orig);
        grads.set_param(i, (plus - minus) / (2.0 * h));
    }
    Ok(grads)
}

/// Sample Bernoulli(1 - p) keep masks for every hidden layer.
pub fn sample_dropout_masks(params: &MlpParams, rng: &mut Rng) -> Vec<Vec64> {
    (0..params.hidden_count())
        .map(|l| {
            let width = params.layers[l].weights.rows();
            let p = params.dropout[l];
            (0..width)
                .map(|_| if rng.bernoulli(1.0 - p) { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Per-output mean and unbiased sample variance across `n_samples` stochastic
/// dropout forward passes.
pub fn mc_dropout_stats(
    params: &MlpParams,
    input: &[f64],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<(Vec64, Vec64)> {
    if n_samples < 2 {
        return Err(NumericError::TooFewSamples(n_samples));
    }
    let out_dim = params.output_dim();
    let mut mean = vec![0.0; out_dim];
    let mut m2 = vec![0.0; out_dim];
    for k in 0..n_samples {
        let masks = sample_dropout_masks(params, rng);
        let y = mlp_forward(params, input, Some(&masks))?;
        // Welford update keeps the reduction deterministic.
        for j in 0..out_dim {
            let delta = y[j] - mean[j];
            mean[j] += delta / (k + 1) as f64;
            m2[j] += delta * (y[j] - mean[j]);
        }
    }
    let var: Vec<f64> = m2.iter().map(|&s| s / (n_samples - 1) as f64).collect();
    Ok((mean, var))
}
