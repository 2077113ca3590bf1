//! Recursive orthogonal projector and projector-modulated fusion layer.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{spd_inverse, spd_solve};
use crate::sparse_features::Activation;

const ABSORB_BLOCK: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("alpha must be finite and positive, got {0}")]
    InvalidAlpha(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("projector update is numerically degenerate")]
    Degenerate,
}

fn check_alpha(alpha: f64) -> Result<(), FusionError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(FusionError::InvalidAlpha(alpha))
    }
}

/// Projector onto the orthogonal complement of the absorbed features, regularized by `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    p: Array2<f64>,
    alpha: f64,
    samples_absorbed: u64,
}

impl Projector {
    pub fn new(dim: usize, alpha: f64) -> Result<Self, FusionError> {
        check_alpha(alpha)?;
        Ok(Projector { p: Array2::eye(dim), alpha, samples_absorbed: 0 })
    }

    pub fn from_parts(p: Array2<f64>, alpha: f64, samples_absorbed: u64) -> Result<Self, FusionError> {
        check_alpha(alpha)?;
        if p.nrows() != p.ncols() {
            return Err(FusionError::DimensionMismatch { expected: p.nrows(), found: p.ncols() });
        }
        Ok(Projector { p, alpha, samples_absorbed })
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn samples_absorbed(&self) -> u64 {
        self.samples_absorbed
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.p.view()
    }

    pub fn reset(&mut self) {
        self.p = Array2::eye(self.dim());
        self.samples_absorbed = 0;
    }

    /// Rank-one update `P <- P - P z z^T P / (alpha + z^T P z)`.
    pub fn absorb_vector(&mut self, z: ArrayView1<f64>) -> Result<(), FusionError> {
        if z.len() != self.dim() {
            return Err(FusionError::DimensionMismatch { expected: self.dim(), found: z.len() });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FusionError::NonFinite("absorbed feature"));
        }
        let pz = self.p.dot(&z);
        let denom = self.alpha + z.dot(&pz);
        if !(denom.is_finite() && denom > 0.0) {
            return Err(FusionError::Degenerate);
        }
        let pz_col = pz.view().insert_axis(Axis(1));
        let outer = pz_col.dot(&pz_col.t());
        self.p.scaled_add(-1.0 / denom, &outer);
        self.samples_absorbed += 1;
        Ok(())
    }

    /// Absorbs every row of `z`. Rows are processed in blocks with the Woodbury
    /// identity, which equals sequential rank-one updates in exact arithmetic.
    pub fn absorb(&mut self, z: ArrayView2<f64>) -> Result<(), FusionError> {
        if z.ncols() != self.dim() {
            return Err(FusionError::DimensionMismatch { expected: self.dim(), found: z.ncols() });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(FusionError::NonFinite("absorbed features"));
        }
        for start in (0..z.nrows()).step_by(ABSORB_BLOCK) {
            let end = (start + ABSORB_BLOCK).min(z.nrows());
            let b = z.slice(s![start..end, ..]);
            let pbt = self.p.dot(&b.t());
            let mut gram = b.dot(&pbt);
            gram.diag_mut().mapv_inplace(|v| v + self.alpha);
            let Some(x) = spd_solve(gram.view(), pbt.t()) else {
                for row in b.rows() {
                    self.absorb_vector(row)?;
                }
                continue;
            };
            self.p -= &pbt.dot(&x);
            // keep P exactly symmetric against round-off drift
            let sym = (&self.p + &self.p.t()) * 0.5;
            self.p = sym;
            self.samples_absorbed += (end - start) as u64;
        }
        Ok(())
    }

    /// `P g` for a gradient `g` with `dim` rows.
    pub fn project(&self, g: ArrayView2<f64>) -> Result<Array2<f64>, FusionError> {
        if g.nrows() != self.dim() {
            return Err(FusionError::DimensionMismatch { expected: self.dim(), found: g.nrows() });
        }
        Ok(self.p.dot(&g))
    }
}

/// Closed form `I - Zt (Zt^T Zt + alpha I)^-1 Zt^T` with `Zt = Z^T`, features as rows of `z`.
pub fn projector_direct(z: ArrayView2<f64>, dim: usize, alpha: f64) -> Result<Array2<f64>, FusionError> {
    check_alpha(alpha)?;
    if z.nrows() == 0 {
        return Ok(Array2::eye(dim));
    }
    if z.ncols() != dim {
        return Err(FusionError::DimensionMismatch { expected: dim, found: z.ncols() });
    }
    let mut inner = z.dot(&z.t());
    inner.diag_mut().mapv_inplace(|v| v + alpha);
    let inv = spd_inverse(inner.view()).ok_or(FusionError::Degenerate)?;
    Ok(Array2::eye(dim) - z.t().dot(&inv).dot(&z))
}

/// Fully connected layer whose weight updates are left-multiplied by its projector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub projector: Projector,
    pub train_bias: bool,
}

impl FusionLayer {
    /// Glorot-uniform weights, zero bias, identity projector.
    pub fn new(
        d_in: usize,
        d_out: usize,
        activation: Activation,
        learning_rate: f64,
        alpha: f64,
        seed: u64,
    ) -> Result<Self, FusionError> {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((d_in, d_out), || rng.random_range(-limit..=limit));
        Ok(FusionLayer {
            weights,
            bias: Array1::zeros(d_out),
            activation,
            learning_rate,
            projector: Projector::new(d_in, alpha)?,
            train_bias: true,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.ncols()
    }

    /// `activation(Z W + b)`.
    pub fn forward(&self, z: ArrayView2<f64>) -> Result<Array2<f64>, FusionError> {
        if z.ncols() != self.d_in() {
            return Err(FusionError::DimensionMismatch { expected: self.d_in(), found: z.ncols() });
        }
        let mut h = z.dot(&self.weights);
        h += &self.bias;
        self.activation.apply_inplace(&mut h);
        Ok(h)
    }

    /// `W <- W - eta P dW`; the bias takes a plain step.
    pub fn orthogonal_step(&mut self, grad_w: ArrayView2<f64>, grad_b: Option<ArrayView1<f64>>) -> Result<(), FusionError> {
        if grad_w.dim() != self.weights.dim() {
            return Err(FusionError::DimensionMismatch { expected: self.weights.len(), found: grad_w.len() });
        }
        let projected = self.projector.project(grad_w)?;
        self.apply_projected_step(projected.view(), grad_b)
    }

    /// Applies a weight gradient that has already been left-multiplied by the projector.
    pub fn apply_projected_step(&mut self, projected_w: ArrayView2<f64>, grad_b: Option<ArrayView1<f64>>) -> Result<(), FusionError> {
        if projected_w.dim() != self.weights.dim() {
            return Err(FusionError::DimensionMismatch { expected: self.weights.len(), found: projected_w.len() });
        }
        if !projected_w.iter().all(|v| v.is_finite()) {
            return Err(FusionError::NonFinite("fusion gradient"));
        }
        self.weights.scaled_add(-self.learning_rate, &projected_w);
        if let (true, Some(gb)) = (self.train_bias, grad_b) {
            if !gb.iter().all(|v| v.is_finite()) {
                return Err(FusionError::NonFinite("fusion bias gradient"));
            }
            self.bias.scaled_add(-self.learning_rate, &gb);
        }
        Ok(())
    }
}
