//! Grouped random encoders and FISTA-fitted sparse decoders producing per-view features.

use log::warn;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ViewBatch;
use crate::linalg::power_iteration;

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITER: usize = 100_000;
const FIT_CHUNK_ROWS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("objective diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("empty input matrix")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output `y = f(x)`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn apply_inplace(self, a: &mut Array2<f64>) {
        if self != Activation::Linear {
            a.mapv_inplace(|x| self.apply(x));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub groups: usize,
    pub nodes: usize,
    pub max_iter: usize,
    pub lambda: f64,
    /// Activation of the random mapping fed to the sparse coder.
    pub activation: Activation,
    /// Activation of the re-encoding with the fitted weights.
    pub feature_activation: Activation,
    /// Subtract the fit-batch mean from extracted features.
    pub center: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            groups: 30,
            nodes: 20,
            max_iter: 50,
            lambda: 1e-3,
            activation: Activation::Linear,
            feature_activation: Activation::Tanh,
            center: true,
        }
    }
}

impl EncoderConfig {
    pub fn output_dim(&self) -> usize {
        self.groups * self.nodes
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.groups == 0 || self.nodes == 0 {
            return Err(FeatureError::InvalidConfig("groups and nodes must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(FeatureError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(FeatureError::InvalidConfig(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `n` groups of frozen random affine maps, weights and biases uniform on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEncoder {
    groups: usize,
    nodes: usize,
    /// `[input_dim x groups*nodes]`, group `g` occupying columns `g*nodes..(g+1)*nodes`.
    weights: Array2<f64>,
    biases: Array1<f64>,
    activation: Activation,
    seed: u64,
}

impl RandomEncoder {
    pub fn new(input_dim: usize, groups: usize, nodes: usize, activation: Activation, seed: u64) -> Result<Self, FeatureError> {
        if groups == 0 || nodes == 0 || input_dim == 0 {
            return Err(FeatureError::InvalidConfig("input_dim, groups and nodes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = groups * nodes;
        let weights = Array2::from_shape_simple_fn((input_dim, width), || rng.random_range(-1.0..=1.0));
        let biases = Array1::from_shape_simple_fn(width, || rng.random_range(-1.0..=1.0));
        Ok(RandomEncoder { groups, nodes, weights, biases, activation, seed })
    }

    /// Builds an encoder from explicit weights; `weights` is `[input_dim x groups*nodes]`.
    pub fn from_parts(
        weights: Array2<f64>,
        biases: Array1<f64>,
        groups: usize,
        activation: Activation,
    ) -> Result<Self, FeatureError> {
        if groups == 0 || weights.ncols() % groups != 0 || weights.ncols() == 0 {
            return Err(FeatureError::InvalidConfig("weight columns must split evenly into groups".into()));
        }
        if biases.len() != weights.ncols() {
            return Err(FeatureError::DimensionMismatch { expected: weights.ncols(), found: biases.len() });
        }
        let nodes = weights.ncols() / groups;
        Ok(RandomEncoder { groups, nodes, weights, biases, activation, seed: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.groups * self.nodes
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn biases(&self) -> ArrayView1<'_, f64> {
        self.biases.view()
    }

    fn check_dim(&self, x: ArrayView2<f64>) -> Result<(), FeatureError> {
        if x.ncols() != self.input_dim() {
            return Err(FeatureError::DimensionMismatch { expected: self.input_dim(), found: x.ncols() });
        }
        Ok(())
    }

    /// Concatenated group outputs `activation(X W_g + b_g)`, shape `[N x n*L]`.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        self.check_dim(x)?;
        let mut z = x.dot(&self.weights);
        z += &self.biases;
        self.activation.apply_inplace(&mut z);
        Ok(z)
    }

    /// Fits one sparse decoder per group and returns the re-encoding map.
    pub fn fit_decoder(&self, x: ArrayView2<f64>, config: &EncoderConfig) -> Result<ViewDecoder, FeatureError> {
        let mut acc = GramAccumulator::new(self);
        acc.add(self, x)?;
        self.finish_fit(acc, config)
    }

    /// Same as [`fit_decoder`](Self::fit_decoder) over a sequence of row blocks.
    pub fn fit_decoder_chunks(&self, blocks: &[ArrayView2<f32>], config: &EncoderConfig) -> Result<ViewDecoder, FeatureError> {
        let mut acc = GramAccumulator::new(self);
        for b in blocks {
            for start in (0..b.nrows()).step_by(FIT_CHUNK_ROWS) {
                let end = (start + FIT_CHUNK_ROWS).min(b.nrows());
                let chunk = b.slice(s![start..end, ..]).mapv(f64::from);
                acc.add(self, chunk.view())?;
            }
        }
        let mut decoder = self.finish_fit(acc, config)?;
        if config.center {
            decoder.fit_center(blocks)?;
        }
        Ok(decoder)
    }

    fn finish_fit(&self, acc: GramAccumulator, config: &EncoderConfig) -> Result<ViewDecoder, FeatureError> {
        config.validate()?;
        if acc.rows == 0 {
            return Err(FeatureError::EmptyInput);
        }
        let d = self.input_dim();
        let mut weights = Array2::zeros((d, self.output_dim()));
        let mut zeros = 0usize;
        let mut traces = Vec::with_capacity(self.groups);
        let mut degenerate = 0usize;
        for g in 0..self.groups {
            let sol = fista_fit_gram(acc.gram[g].view(), acc.cross[g].view(), acc.x_sq, config.lambda, config.max_iter)?;
            zeros += sol.theta.iter().filter(|&&v| v == 0.0).count();
            degenerate += usize::from(sol.degenerate);
            weights
                .slice_mut(s![.., g * self.nodes..(g + 1) * self.nodes])
                .assign(&sol.theta.t());
            traces.push(sol.trace);
        }
        Ok(ViewDecoder {
            weights,
            biases: self.biases.clone(),
            activation: config.feature_activation,
            center: None,
            sparsity: zeros as f64 / (d * self.output_dim()) as f64,
            traces,
            degenerate_groups: degenerate,
        })
    }
}

struct GramAccumulator {
    gram: Vec<Array2<f64>>,
    cross: Vec<Array2<f64>>,
    x_sq: f64,
    rows: usize,
}

impl GramAccumulator {
    fn new(enc: &RandomEncoder) -> Self {
        let l = enc.nodes;
        GramAccumulator {
            gram: vec![Array2::zeros((l, l)); enc.groups],
            cross: vec![Array2::zeros((l, enc.input_dim())); enc.groups],
            x_sq: 0.0,
            rows: 0,
        }
    }

    fn add(&mut self, enc: &RandomEncoder, x: ArrayView2<f64>) -> Result<(), FeatureError> {
        let z = enc.encode(x)?;
        for g in 0..enc.groups {
            let zg = z.slice(s![.., g * enc.nodes..(g + 1) * enc.nodes]);
            self.gram[g] += &zg.t().dot(&zg);
            self.cross[g] += &zg.t().dot(&x);
        }
        self.x_sq += x.iter().map(|v| v * v).sum::<f64>();
        self.rows += x.nrows();
        Ok(())
    }
}

/// Re-encoding with the fitted weights: `activation(X theta* + b) - center`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDecoder {
    /// `[input_dim x n*L]`, the transposed fitted decoder weights.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    pub center: Option<Array1<f64>>,
    /// Fraction of exact zeros in the fitted decoder weights.
    pub sparsity: f64,
    /// Objective trace of each group's solve.
    pub traces: Vec<Vec<f64>>,
    pub degenerate_groups: usize,
}

impl ViewDecoder {
    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn raw(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        if x.ncols() != self.input_dim() {
            return Err(FeatureError::DimensionMismatch { expected: self.input_dim(), found: x.ncols() });
        }
        let mut h = x.dot(&self.weights);
        h += &self.biases;
        self.activation.apply_inplace(&mut h);
        Ok(h)
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FeatureError> {
        let mut h = self.raw(x)?;
        if let Some(c) = &self.center {
            h -= c;
        }
        Ok(h)
    }

    pub fn apply_f32(&self, x: ArrayView2<f32>) -> Result<Array2<f64>, FeatureError> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for start in (0..x.nrows()).step_by(FIT_CHUNK_ROWS) {
            let end = (start + FIT_CHUNK_ROWS).min(x.nrows());
            let chunk = x.slice(s![start..end, ..]).mapv(f64::from);
            out.slice_mut(s![start..end, ..]).assign(&self.apply(chunk.view())?);
        }
        Ok(out)
    }

    /// Sets the centering vector to the mean uncentered feature over `blocks`.
    pub fn fit_center(&mut self, blocks: &[ArrayView2<f32>]) -> Result<(), FeatureError> {
        self.center = None;
        let mut sum = Array1::<f64>::zeros(self.output_dim());
        let mut n = 0usize;
        for b in blocks {
            let h = self.apply_f32(*b)?;
            sum += &h.sum_axis(Axis(0));
            n += h.nrows();
        }
        if n == 0 {
            return Err(FeatureError::EmptyInput);
        }
        self.center = Some(sum / n as f64);
        Ok(())
    }
}

/// Extracted features of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeature {
    pub features: Array2<f64>,
    pub class_id: usize,
    pub view_id: usize,
    pub sparsity: f64,
}

/// Fits a decoder on the batch and returns its view-optimal features. The encoder is not modified.
pub fn extract_view_feature(encoder: &RandomEncoder, batch: &ViewBatch, config: &EncoderConfig) -> Result<ViewFeature, FeatureError> {
    let decoder = encoder.fit_decoder_chunks(&[batch.inputs.view()], config)?;
    Ok(ViewFeature {
        features: decoder.apply_f32(batch.inputs.view())?,
        class_id: batch.class_id,
        view_id: batch.view_id,
        sparsity: decoder.sparsity,
    })
}

/// Proximal operator of `tau * |x|`.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    x.signum() * (x.abs() - tau).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lipschitz {
    pub value: f64,
    /// Set when `Z` is all zeros, in which case `value` is 0.
    pub degenerate: bool,
}

/// Lipschitz constant `2 * lambda_max(Z^T Z)` of the reconstruction gradient.
pub fn lipschitz_constant(z: ArrayView2<f64>) -> Result<Lipschitz, FeatureError> {
    if z.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    Ok(lipschitz_from_gram(z.t().dot(&z).view()))
}

pub fn lipschitz_from_gram(gram: ArrayView2<f64>) -> Lipschitz {
    let est = power_iteration(gram, POWER_TOL, POWER_MAX_ITER);
    let value = 2.0 * est.value;
    Lipschitz { value, degenerate: value <= 0.0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FistaSolution {
    /// Decoder weights `theta'`, shape `[L x input_dim]`.
    pub theta: Array2<f64>,
    /// Objective at the start and after each iteration; the last entry is the returned point.
    pub trace: Vec<f64>,
    pub lipschitz: f64,
    pub degenerate: bool,
}

/// Minimizes `||Z theta - X||^2 + lambda ||theta||_1` with `k` FISTA iterations from zero.
pub fn fista_fit(z: ArrayView2<f64>, x: ArrayView2<f64>, lambda: f64, k: usize) -> Result<FistaSolution, FeatureError> {
    if z.nrows() != x.nrows() {
        return Err(FeatureError::DimensionMismatch { expected: z.nrows(), found: x.nrows() });
    }
    if z.is_empty() {
        return Err(FeatureError::EmptyInput);
    }
    let x_sq = x.iter().map(|v| v * v).sum();
    fista_fit_gram(z.t().dot(&z).view(), z.t().dot(&x).view(), x_sq, lambda, k)
}

/// FISTA on the sufficient statistics `G = Z^T Z`, `C = Z^T X` and `||X||^2`.
pub fn fista_fit_gram(
    gram: ArrayView2<f64>,
    cross: ArrayView2<f64>,
    x_sq: f64,
    lambda: f64,
    k: usize,
) -> Result<FistaSolution, FeatureError> {
    if k == 0 {
        return Err(FeatureError::InvalidConfig("max_iter must be at least 1".into()));
    }
    if gram.nrows() != cross.nrows() || gram.ncols() != gram.nrows() {
        return Err(FeatureError::DimensionMismatch { expected: gram.nrows(), found: cross.nrows() });
    }
    let lip = lipschitz_from_gram(gram);
    let xi = if lip.degenerate {
        warn!("zero Lipschitz constant, falling back to a unit step");
        1.0
    } else {
        lip.value
    };
    let objective = |th: &Array2<f64>| -> f64 {
        let gt = gram.dot(th);
        let quad: f64 = Zip::from(th).and(&gt).fold(0.0, |acc, &a, &b| acc + a * b);
        let lin: f64 = Zip::from(th).and(&cross).fold(0.0, |acc, &a, &b| acc + a * b);
        let l1: f64 = th.iter().map(|v| v.abs()).sum();
        quad - 2.0 * lin + x_sq + lambda * l1
    };
    let tau = lambda / xi;
    let mut prev = Array2::<f64>::zeros(cross.raw_dim());
    let mut y = prev.clone();
    let mut t = 1.0f64;
    let mut trace = Vec::with_capacity(k + 1);
    trace.push(objective(&prev));
    for iter in 1..=k {
        let mut grad = gram.dot(&y);
        grad -= &cross;
        grad *= 2.0;
        let mut theta = y;
        theta.scaled_add(-1.0 / xi, &grad);
        theta.mapv_inplace(|v| soft_threshold(v, tau));
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        y = &theta + &((&theta - &prev) * beta);
        if iter < k {
            let obj = objective(&theta);
            if !obj.is_finite() {
                return Err(FeatureError::Divergence { iteration: iter });
            }
            trace.push(obj);
        }
        prev = theta;
        t = t_next;
    }
    let mut obj = objective(&y);
    if !obj.is_finite() {
        return Err(FeatureError::Divergence { iteration: k });
    }
    let theta = if obj > trace[0] {
        obj = objective(&prev);
        prev
    } else {
        y
    };
    trace.push(obj);
    Ok(FistaSolution { theta, trace, lipschitz: lip.value, degenerate: lip.degenerate })
}
