//! Expandable softmax head with selective weight consolidation.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsolidationError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("class slot {found} arrived out of order, expected {expected}")]
    OutOfOrder { expected: usize, found: usize },
    #[error("label {label} outside the {classes} seen classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class slot {0} was already consolidated")]
    AlreadyConsolidated(usize),
    #[error("head has no classes yet")]
    NoClasses,
    #[error("empty batch")]
    EmptyBatch,
    #[error("mu must be finite and >= 0, got {0}")]
    InvalidMu(f64),
}

/// Diagonal empirical Fisher over the head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherEstimate {
    pub diag: Array2<f64>,
    pub sample_count: usize,
}

/// Loss value and gradients of the consolidated objective on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SwcGradient {
    pub loss: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub grad_w: Array2<f64>,
    pub grad_b: Array1<f64>,
    /// Gradient of the mean cross-entropy with respect to the hidden inputs.
    pub grad_hidden: Array2<f64>,
    /// Gradient of the mean cross-entropy alone with respect to the weights.
    pub grad_w_ce: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionHead {
    weights: Array2<f64>,
    bias: Array1<f64>,
    anchor: Array2<f64>,
    fisher_sum: Array2<f64>,
    mu: f64,
    consolidated: usize,
    pub train_bias: bool,
}

fn softmax_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    a
}

impl DecisionHead {
    pub fn new(hidden: usize, mu: f64) -> Result<Self, ConsolidationError> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(ConsolidationError::InvalidMu(mu));
        }
        Ok(DecisionHead {
            weights: Array2::zeros((hidden, 0)),
            bias: Array1::zeros(0),
            anchor: Array2::zeros((hidden, 0)),
            fisher_sum: Array2::zeros((hidden, 0)),
            mu,
            consolidated: 0,
            train_bias: true,
        })
    }

    pub fn from_parts(
        weights: Array2<f64>,
        bias: Array1<f64>,
        anchor: Array2<f64>,
        fisher_sum: Array2<f64>,
        mu: f64,
    ) -> Result<Self, ConsolidationError> {
        let (h, c) = weights.dim();
        if bias.len() != c || fisher_sum.dim() != (h, c) || anchor.nrows() != h || anchor.ncols() > c {
            return Err(ConsolidationError::DimensionMismatch { expected: c, found: bias.len() });
        }
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(ConsolidationError::InvalidMu(mu));
        }
        let consolidated = anchor.ncols();
        Ok(DecisionHead { weights, bias, anchor, fisher_sum, mu, consolidated, train_bias: true })
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn consolidated_classes(&self) -> usize {
        self.consolidated
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn set_mu(&mut self, mu: f64) -> Result<(), ConsolidationError> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(ConsolidationError::InvalidMu(mu));
        }
        self.mu = mu;
        Ok(())
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn bias(&self) -> ArrayView1<'_, f64> {
        self.bias.view()
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }

    pub fn anchor(&self) -> ArrayView2<'_, f64> {
        self.anchor.view()
    }

    pub fn fisher_sum(&self) -> ArrayView2<'_, f64> {
        self.fisher_sum.view()
    }

    fn check_hidden(&self, h: ArrayView2<f64>) -> Result<(), ConsolidationError> {
        if h.ncols() != self.hidden_dim() {
            return Err(ConsolidationError::DimensionMismatch { expected: self.hidden_dim(), found: h.ncols() });
        }
        if self.num_classes() == 0 {
            return Err(ConsolidationError::NoClasses);
        }
        Ok(())
    }

    pub fn logits(&self, h: ArrayView2<f64>) -> Result<Array2<f64>, ConsolidationError> {
        self.check_hidden(h)?;
        let mut l = h.dot(&self.weights);
        l += &self.bias;
        Ok(l)
    }

    /// Row-wise softmax probabilities over the seen classes.
    pub fn forward(&self, h: ArrayView2<f64>) -> Result<Array2<f64>, ConsolidationError> {
        Ok(softmax_rows(self.logits(h)?))
    }

    /// Appends a zero-initialized output for class slot `new_slot`.
    pub fn expand(&mut self, new_slot: usize) -> Result<(), ConsolidationError> {
        let c = self.num_classes();
        if new_slot != c {
            return Err(ConsolidationError::OutOfOrder { expected: c, found: new_slot });
        }
        let h = self.hidden_dim();
        let grow = |a: &Array2<f64>| {
            let mut out = Array2::zeros((h, c + 1));
            out.slice_mut(s![.., ..c]).assign(a);
            out
        };
        self.weights = grow(&self.weights);
        self.fisher_sum = grow(&self.fisher_sum);
        let mut bias = Array1::zeros(c + 1);
        bias.slice_mut(s![..c]).assign(&self.bias);
        self.bias = bias;
        Ok(())
    }

    fn residuals(&self, h: ArrayView2<f64>, labels: &[usize]) -> Result<(Array2<f64>, f64), ConsolidationError> {
        self.check_hidden(h)?;
        if h.nrows() == 0 {
            return Err(ConsolidationError::EmptyBatch);
        }
        if labels.len() != h.nrows() {
            return Err(ConsolidationError::DimensionMismatch { expected: h.nrows(), found: labels.len() });
        }
        let c = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(ConsolidationError::LabelOutOfRange { label: bad, classes: c });
        }
        let logits = self.logits(h)?;
        let mut ce = 0.0;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce += lse - row[y];
        }
        let mut g = softmax_rows(logits);
        for (mut row, &y) in g.rows_mut().into_iter().zip(labels) {
            row[y] -= 1.0;
        }
        Ok((g, ce / h.nrows() as f64))
    }

    /// Mean over samples of the squared log-likelihood gradient of each weight.
    pub fn fisher_diag(&self, h: ArrayView2<f64>, labels: &[usize]) -> Result<FisherEstimate, ConsolidationError> {
        let (g, _) = self.residuals(h, labels)?;
        let n = h.nrows();
        let diag = h.mapv(|v| v * v).t().dot(&g.mapv(|v| v * v)) / n as f64;
        Ok(FisherEstimate { diag, sample_count: n })
    }

    /// Quadratic consolidation penalty `(mu/2) sum F (theta - anchor)^2` over consolidated columns.
    pub fn penalty(&self) -> f64 {
        let k = self.consolidated;
        let w = self.weights.slice(s![.., ..k]);
        let f = self.fisher_sum.slice(s![.., ..k]);
        let sum = Zip::from(&w).and(&f).and(&self.anchor).fold(0.0, |acc, &w, &f, &a| acc + f * (w - a) * (w - a));
        0.5 * self.mu * sum
    }

    pub fn swc_loss_and_grad(&self, h: ArrayView2<f64>, labels: &[usize]) -> Result<SwcGradient, ConsolidationError> {
        let (mut g, ce) = self.residuals(h, labels)?;
        g /= h.nrows() as f64;
        let grad_w_ce = h.t().dot(&g);
        let mut grad_w = grad_w_ce.clone();
        let k = self.consolidated;
        if self.mu > 0.0 && k > 0 {
            let mut gw = grad_w.slice_mut(s![.., ..k]);
            Zip::from(&mut gw)
                .and(self.weights.slice(s![.., ..k]))
                .and(&self.anchor)
                .and(self.fisher_sum.slice(s![.., ..k]))
                .for_each(|gw, &w, &a, &f| *gw += self.mu * f * (w - a));
        }
        let penalty = self.penalty();
        Ok(SwcGradient {
            loss: ce + penalty,
            cross_entropy: ce,
            penalty,
            grad_b: g.sum_axis(Axis(0)),
            grad_hidden: g.dot(&self.weights.t()),
            grad_w,
            grad_w_ce,
        })
    }

    /// Plain gradient step on the head.
    pub fn step(&mut self, grad_w: ArrayView2<f64>, grad_b: ArrayView1<f64>, lr: f64) -> Result<(), ConsolidationError> {
        if grad_w.dim() != self.weights.dim() {
            return Err(ConsolidationError::DimensionMismatch { expected: self.weights.len(), found: grad_w.len() });
        }
        self.weights.scaled_add(-lr, &grad_w);
        if self.train_bias {
            self.bias.scaled_add(-lr, &grad_b);
        }
        Ok(())
    }

    /// Cross-entropy step followed by the exact proximal map of the consolidation penalty.
    ///
    /// Stays stable when `lr * mu * fisher` is large, where [`DecisionHead::step`] with the
    /// full gradient would diverge.
    pub fn proximal_step(
        &mut self,
        grad_w_ce: ArrayView2<f64>,
        grad_b: ArrayView1<f64>,
        lr: f64,
    ) -> Result<(), ConsolidationError> {
        self.step(grad_w_ce, grad_b, lr)?;
        let k = self.consolidated;
        if self.mu > 0.0 && k > 0 {
            let scale = lr * self.mu;
            Zip::from(self.weights.slice_mut(s![.., ..k]))
                .and(&self.anchor)
                .and(self.fisher_sum.slice(s![.., ..k]))
                .for_each(|w, &a, &f| *w = (*w + scale * f * a) / (1.0 + scale * f));
        }
        Ok(())
    }

    /// Adds `fisher` to the running sum and re-anchors at the current weights.
    pub fn end_of_class(&mut self, slot: usize, fisher: &FisherEstimate) -> Result<(), ConsolidationError> {
        if slot < self.consolidated {
            return Err(ConsolidationError::AlreadyConsolidated(slot));
        }
        let c = self.num_classes();
        if slot + 1 != c || slot != self.consolidated {
            return Err(ConsolidationError::OutOfOrder { expected: self.consolidated, found: slot });
        }
        if fisher.diag.dim() != self.weights.dim() {
            return Err(ConsolidationError::DimensionMismatch { expected: self.weights.len(), found: fisher.diag.len() });
        }
        self.fisher_sum += &fisher.diag;
        self.anchor = self.weights.clone();
        self.consolidated = c;
        Ok(())
    }

    /// Number of stored scalars in the head state.
    pub fn state_len(&self) -> usize {
        self.weights.len() + self.bias.len() + self.anchor.len() + self.fisher_sum.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_with(classes: usize, hidden: usize, mu: f64) -> DecisionHead {
        let mut h = DecisionHead::new(hidden, mu).unwrap();
        for c in 0..classes {
            h.expand(c).unwrap();
        }
        h
    }

    #[test]
    fn uniform_and_degenerate_softmax() {
        let head = head_with(4, 3, 0.0);
        let p = head.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut one = head_with(1, 2, 0.0);
        one.weights_mut().fill(3.0);
        let p = one.forward(array![[5.0, -4.0], [0.1, 0.2]].view()).unwrap();
        assert!(p.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = head_with(5, 4, 0.0);
        head.weights_mut().mapv_inplace(|_| rng.random_range(-5.0..5.0));
        let h = Array2::from_shape_simple_fn((10, 4), || rng.random_range(-3.0..3.0));
        for row in head.forward(h.view()).unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn expand_isolates_old_columns() {
        let mut head = head_with(1, 3, 1.0);
        head.weights_mut().assign(&array![[0.5], [-1.0], [2.0]]);
        let h = array![[1.0, 2.0, 3.0]];
        let before = head.logits(h.view()).unwrap();
        head.expand(1).unwrap();
        assert_eq!(head.weights().column(0), array![0.5, -1.0, 2.0]);
        assert_eq!(head.logits(h.view()).unwrap().column(0), before.column(0));
        assert!(head.fisher_sum().column(1).iter().all(|&v| v == 0.0));
        assert!(matches!(head.expand(5), Err(ConsolidationError::OutOfOrder { expected: 2, found: 5 })));
    }

    #[test]
    fn fisher_hand_value() {
        let head = head_with(2, 2, 0.0);
        let f = head.fisher_diag(array![[1.0, 0.0]].view(), &[0]).unwrap();
        assert_eq!(f.diag, array![[0.25, 0.25], [0.0, 0.0]]);
        assert_eq!(f.sample_count, 1);
    }

    #[test]
    fn fisher_vanishes_when_confident() {
        let mut head = head_with(2, 1, 0.0);
        head.weights_mut().assign(&array![[50.0, -50.0]]);
        let f = head.fisher_diag(array![[1.0]].view(), &[0]).unwrap();
        assert!(f.diag.iter().all(|&v| v < 1e-40));
    }

    #[test]
    fn anchored_penalty_is_zero_and_mu_zero_is_plain_ce() {
        let h = array![[1.0, 0.5], [-0.3, 0.2]];
        let mut head = head_with(1, 2, 5.0);
        let f = head.fisher_diag(h.view(), &[0, 0]).unwrap();
        head.end_of_class(0, &f).unwrap();
        assert_eq!(head.anchor(), head.weights());
        assert_eq!(head.penalty(), 0.0);
        let g = head.swc_loss_and_grad(h.view(), &[0, 0]).unwrap();
        assert_eq!(g.penalty, 0.0);
        assert_eq!(g.grad_w, g.grad_w_ce);

        let mut free = head_with(2, 2, 0.0);
        free.weights_mut().assign(&array![[0.3, -0.2], [0.1, 0.4]]);
        let g = free.swc_loss_and_grad(h.view(), &[0, 1]).unwrap();
        assert_eq!(g.loss, g.cross_entropy);
        assert_eq!(g.grad_w, g.grad_w_ce);
    }

    #[test]
    fn end_of_class_running_sum_and_double_call() {
        let mut head = head_with(1, 2, 1.0);
        let f1 = FisherEstimate { diag: array![[0.1], [0.2]], sample_count: 1 };
        head.end_of_class(0, &f1).unwrap();
        assert!(matches!(head.end_of_class(0, &f1), Err(ConsolidationError::AlreadyConsolidated(0))));
        head.expand(1).unwrap();
        let f2 = FisherEstimate { diag: array![[0.3, 0.4], [0.5, 0.6]], sample_count: 1 };
        head.end_of_class(1, &f2).unwrap();
        assert_eq!(head.fisher_sum(), array![[0.1 + 0.3, 0.4], [0.2 + 0.5, 0.6]]);
        assert!(head.fisher_sum().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn proximal_step_matches_small_steps_and_stays_bounded() {
        let mut head = head_with(1, 2, 10.0);
        head.weights_mut().assign(&array![[1.0], [-1.0]]);
        head.end_of_class(0, &FisherEstimate { diag: array![[0.5], [2.0]], sample_count: 1 }).unwrap();
        head.expand(1).unwrap();
        head.weights_mut()[[0, 0]] = 2.0;
        let h = array![[0.2, 0.1]];
        let g = head.swc_loss_and_grad(h.view(), &[1]).unwrap();

        let mut explicit = head.clone();
        let mut prox = head.clone();
        explicit.step(g.grad_w.view(), g.grad_b.view(), 1e-6).unwrap();
        prox.proximal_step(g.grad_w_ce.view(), g.grad_b.view(), 1e-6).unwrap();
        let diff = (&explicit.weights() - &prox.weights()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff < 1e-10);

        let mut stiff = head.clone();
        stiff.set_mu(1e12).unwrap();
        for _ in 0..10 {
            let g = stiff.swc_loss_and_grad(h.view(), &[1]).unwrap();
            stiff.proximal_step(g.grad_w_ce.view(), g.grad_b.view(), 0.1).unwrap();
        }
        assert!((stiff.weights()[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((stiff.weights()[[1, 0]] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn consolidation_gradient_vanishes_where_fisher_is_zero() {
        let mut head = head_with(1, 2, 100.0);
        head.end_of_class(0, &FisherEstimate { diag: array![[0.0], [1.0]], sample_count: 1 }).unwrap();
        head.expand(1).unwrap();
        head.weights_mut()[[0, 0]] = 3.0;
        head.weights_mut()[[1, 0]] = 3.0;
        let g = head.swc_loss_and_grad(array![[0.2, 0.1]].view(), &[1]).unwrap();
        let extra = &g.grad_w - &g.grad_w_ce;
        assert_eq!(extra[[0, 0]], 0.0);
        assert_eq!(extra[[1, 0]], 300.0);
        assert_eq!(extra.column(1).sum(), 0.0);
    }

    #[test]
    fn label_out_of_range() {
        let head = head_with(2, 1, 0.0);
        assert!(matches!(
            head.swc_loss_and_grad(array![[1.0]].view(), &[2]),
            Err(ConsolidationError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
