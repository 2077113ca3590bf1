//! Stream orchestration: feature extraction, orthogonal fusion, consolidated decision head.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::{ConsolidationError, DecisionHead, FisherEstimate};
use crate::container::{write_atomic, ContainerError, TensorArchive};
use crate::dataset::{
    self, load_feature_views, load_idx_dir, make_permuted_views, make_synthesized_views, partition_test,
    standardize_views, stream_sessions, subsample_train, toy_dataset, DatasetError, SplitDataset, StreamProtocol,
    ToyConfig, ViewBatch,
};
use crate::evaluation::{
    argmax, avg_acc, bwt, emit_report, evaluate_classes, familiar_view_eval, AccuracyMatrix, AccuracyRow, Embedder,
    EvalError, FamiliarReport, Predictor, RunSummary, REPORT_SCHEMA_VERSION,
};
use crate::orthogonal_fusion::{FusionError, FusionLayer, Projector};
use crate::sparse_features::{Activation, EncoderConfig, FeatureError, RandomEncoder, ViewDecoder};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Consolidation(#[from] ConsolidationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("session (class {class_id}, view {view_id}) out of order: {reason}")]
    OutOfOrder { class_id: usize, view_id: usize, reason: String },
    #[error("non-finite loss in session (class {class_id}, view {view_id}), epoch {epoch}")]
    NonFinite { class_id: usize, view_id: usize, epoch: usize },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl TrainError {
    /// True for failures caused by numerical divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Feature(FeatureError::Divergence { .. })
                | TrainError::Fusion(FusionError::NonFinite(_) | FusionError::Degenerate)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Orthogonal fusion plus selective weight consolidation.
    #[default]
    Full,
    /// Orthogonal fusion only.
    #[serde(alias = "net1_orth_only")]
    Net1,
    /// Orthogonal fusion and an orthogonally projected head, no consolidation.
    #[serde(alias = "net2_orth_both")]
    Net2,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Net1 => "net1",
            Mode::Net2 => "net2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalCadence {
    #[default]
    PerClass,
    PerView,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// MNIST with seeded pixel permutations per view.
    #[default]
    Pmnist,
    /// FashionMNIST with seeded pixel permutations per view.
    Pfmnist,
    /// MNIST with views synthesized by independent encoders.
    Smnist,
    /// FashionMNIST with views synthesized by independent encoders.
    Sfmnist,
    /// Gaussian clusters with seeded feature permutations per view.
    Toy,
    /// Pre-extracted feature tables, one file per view.
    Features,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Pmnist => "PMNIST",
            Family::Pfmnist => "PFMNIST",
            Family::Smnist => "SMNIST",
            Family::Sfmnist => "SFMNIST",
            Family::Toy => "TOY",
            Family::Features => "FEATURES",
        }
    }

    fn source_dir(self) -> Option<&'static str> {
        match self {
            Family::Pmnist | Family::Smnist => Some("mnist"),
            Family::Pfmnist | Family::Sfmnist => Some("fashion"),
            Family::Toy | Family::Features => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub family: Family,
    pub num_views: usize,
    /// Fraction of each class's training samples kept.
    pub train_fraction: f64,
    /// Per-view z-score normalization of the inputs.
    pub standardize: bool,
    pub min_std: f64,
    /// `[class, view]` pairs withheld from training.
    pub heldout: Vec<[usize; 2]>,
    pub toy: ToyConfig,
    /// Encoder used to synthesize views for the synthesized families.
    pub synth: EncoderConfig,
    pub feature_files: Vec<PathBuf>,
    pub labels_file: Option<PathBuf>,
    /// Train share of the stratified split for feature tables.
    pub train_ratio: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            family: Family::Pmnist,
            num_views: 3,
            train_fraction: 1.0,
            standardize: true,
            min_std: 0.1,
            heldout: Vec::new(),
            toy: ToyConfig::default(),
            synth: EncoderConfig::default(),
            feature_files: Vec::new(),
            labels_file: None,
            train_ratio: 0.8,
        }
    }
}

impl ProtocolConfig {
    pub fn heldout_set(&self) -> BTreeSet<(usize, usize)> {
        self.heldout.iter().map(|&[c, v]| (c, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub eta: f64,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub projector_reset_per_class: bool,
    /// When false fusion weights take plain gradient steps.
    pub use_projector: bool,
    pub train_bias: bool,
    pub absorb: Absorb,
}

/// Which vectors of a finished session the projectors absorb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Absorb {
    /// Every feature row.
    Rows,
    /// The mean of each consecutive `batch_size` block of rows.
    BatchMeans,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            alpha: 1.0,
            eta: 0.01,
            width: 200,
            depth: 1,
            activation: Activation::Tanh,
            projector_reset_per_class: false,
            use_projector: true,
            train_bias: true,
            absorb: Absorb::Rows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    pub mu: f64,
    pub learning_rate: f64,
    pub epochs_per_session: usize,
    pub batch_size: usize,
    pub train_bias: bool,
    /// Apply the consolidation penalty through its proximal map instead of its gradient.
    pub proximal: bool,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            mu: 1000.0,
            learning_rate: 0.001,
            epochs_per_session: 20,
            batch_size: 64,
            train_bias: false,
            proximal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub checkpoint: bool,
    pub embeddings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub eval_cadence: EvalCadence,
    pub protocol: ProtocolConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub consolidation: ConsolidationConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            mode: Mode::Full,
            eval_cadence: EvalCadence::PerClass,
            protocol: ProtocolConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            consolidation: ConsolidationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), TrainError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(TrainError::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let p = &self.protocol;
        if p.num_views == 0 || p.num_views > dataset::MAX_VIEWS {
            return Err(TrainError::Config(format!("protocol.num_views must be in 1..={}", dataset::MAX_VIEWS)));
        }
        if !(p.train_fraction > 0.0 && p.train_fraction <= 1.0) {
            return Err(TrainError::Config(format!("protocol.train_fraction must be in (0, 1], got {}", p.train_fraction)));
        }
        positive("protocol.min_std", p.min_std)?;
        if p.family == Family::Features && (p.feature_files.is_empty() || p.labels_file.is_none()) {
            return Err(TrainError::Config("features family needs feature_files and labels_file".into()));
        }
        self.encoder.validate()?;
        if matches!(p.family, Family::Smnist | Family::Sfmnist) {
            p.synth.validate()?;
        }
        let f = &self.fusion;
        positive("fusion.alpha", f.alpha)?;
        positive("fusion.eta", f.eta)?;
        if f.width == 0 || f.depth == 0 {
            return Err(TrainError::Config("fusion.width and fusion.depth must be positive".into()));
        }
        let c = &self.consolidation;
        if !(c.mu >= 0.0 && c.mu.is_finite()) {
            return Err(TrainError::Config(format!("consolidation.mu must be >= 0, got {}", c.mu)));
        }
        positive("consolidation.learning_rate", c.learning_rate)?;
        if c.epochs_per_session == 0 || c.batch_size == 0 {
            return Err(TrainError::Config("epochs_per_session and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Consolidation strength after applying the mode.
    pub fn effective_mu(&self) -> f64 {
        match self.mode {
            Mode::Full => self.consolidation.mu,
            Mode::Net1 | Mode::Net2 => 0.0,
        }
    }

    pub fn protocol_name(&self, num_classes: usize) -> String {
        format!("{}-{}({})", self.protocol.family.label(), num_classes, self.protocol.num_views)
    }
}

fn derive_seed(seed: u64, tag: u64, idx: usize) -> u64 {
    dataset::view_seed(seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03), idx)
}

/// Row means of consecutive blocks of `size` rows; the last block may be shorter.
fn block_means(a: ArrayView2<f64>, size: usize) -> Array2<f64> {
    let blocks = a.nrows().div_ceil(size);
    let mut out = Array2::zeros((blocks, a.ncols()));
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        let end = ((b + 1) * size).min(a.nrows());
        row.assign(&a.slice(s![b * size..end, ..]).mean_axis(Axis(0)).expect("nonempty block"));
    }
    out
}

const TAG_ENCODER: u64 = 1;
const TAG_FUSION: u64 = 2;
const TAG_SHUFFLE: u64 = 3;

/// Builds the dataset a configuration describes. `data_root` holds `mnist/` and `fashion/`.
pub fn build_dataset(config: &RunConfig, data_root: &Path) -> Result<SplitDataset, TrainError> {
    config.validate()?;
    let p = &config.protocol;
    let seed = config.seed;
    let mut ds = match p.family {
        Family::Toy => {
            let base = toy_dataset(&p.toy, seed)?;
            let base = subsample_train(&base, p.train_fraction, seed)?;
            make_permuted_views(&base, p.num_views, seed)?
        }
        Family::Features => {
            let labels = p.labels_file.as_ref().expect("validated");
            if p.feature_files.len() != p.num_views {
                return Err(TrainError::Config(format!(
                    "{} feature files for {} views",
                    p.feature_files.len(),
                    p.num_views
                )));
            }
            let ds = load_feature_views(&p.feature_files, labels, p.train_ratio, seed)?;
            subsample_train(&ds, p.train_fraction, seed)?
        }
        fam => {
            let dir = data_root.join(fam.source_dir().expect("image family"));
            let base = load_idx_dir(&dir)?;
            let base = subsample_train(&base, p.train_fraction, seed)?;
            if matches!(fam, Family::Smnist | Family::Sfmnist) {
                make_synthesized_views(&base, p.num_views, &p.synth, seed)?
            } else {
                make_permuted_views(&base, p.num_views, seed)?
            }
        }
    };
    if p.standardize {
        standardize_views(&mut ds, p.min_std);
    }
    Ok(ds)
}

/// Frozen per-view encoder and the decoder fitted on the view's first session.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewExtractor {
    pub encoder: RandomEncoder,
    pub decoder: ViewDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub class_id: usize,
    pub view_id: usize,
    pub samples: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub decoder_sparsity: Option<f64>,
    pub seconds: f64,
}

/// Mutable learner state for one stream.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: RunConfig,
    view_dims: Vec<usize>,
    extractors: BTreeMap<usize, ViewExtractor>,
    fusion: Vec<FusionLayer>,
    head: DecisionHead,
    head_projector: Option<Projector>,
    classes: Vec<usize>,
    last_view: Option<usize>,
    pending_fisher: Option<FisherEstimate>,
    sessions: usize,
    rng: ChaCha8Rng,
}

struct Forward {
    acts: Vec<Array2<f64>>,
}

impl Trainer {
    pub fn new(config: RunConfig, view_dims: Vec<usize>) -> Result<Self, TrainError> {
        config.validate()?;
        let f = &config.fusion;
        let mut fusion = Vec::with_capacity(f.depth);
        let mut d_in = config.encoder.output_dim();
        for l in 0..f.depth {
            let mut layer = FusionLayer::new(d_in, f.width, f.activation, f.eta, f.alpha, derive_seed(config.seed, TAG_FUSION, l))?;
            layer.train_bias = f.train_bias;
            fusion.push(layer);
            d_in = f.width;
        }
        let mut head = DecisionHead::new(f.width, config.effective_mu())?;
        head.train_bias = config.consolidation.train_bias;
        let head_projector = match config.mode {
            Mode::Net2 => Some(Projector::new(f.width, f.alpha)?),
            _ => None,
        };
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_SHUFFLE, 0));
        Ok(Trainer {
            config,
            view_dims,
            extractors: BTreeMap::new(),
            fusion,
            head,
            head_projector,
            classes: Vec::new(),
            last_view: None,
            pending_fisher: None,
            sessions: 0,
            rng,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Class ids in the order they were learned; index is the head slot.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn head(&self) -> &DecisionHead {
        &self.head
    }

    pub fn fusion_layers(&self) -> &[FusionLayer] {
        &self.fusion
    }

    pub fn extractor(&self, view_id: usize) -> Option<&ViewExtractor> {
        self.extractors.get(&view_id)
    }

    pub fn sessions_consumed(&self) -> usize {
        self.sessions
    }

    fn close_class(&mut self) -> Result<(), TrainError> {
        let Some(slot) = self.classes.len().checked_sub(1) else { return Ok(()) };
        if self.head.consolidated_classes() > slot {
            return Ok(());
        }
        let fisher = self
            .pending_fisher
            .take()
            .unwrap_or_else(|| FisherEstimate { diag: Array2::zeros(self.head.weights().raw_dim()), sample_count: 0 });
        self.head.end_of_class(slot, &fisher)?;
        Ok(())
    }

    /// Runs end-of-class bookkeeping for the last class of the stream.
    pub fn finish(&mut self) -> Result<(), TrainError> {
        self.close_class()
    }

    fn begin_session(&mut self, batch: &ViewBatch) -> Result<usize, TrainError> {
        let (c, v) = (batch.class_id, batch.view_id);
        let err = |reason: String| TrainError::OutOfOrder { class_id: c, view_id: v, reason };
        if batch.is_empty() {
            return Err(err("empty session".into()));
        }
        if v >= self.view_dims.len() {
            return Err(err(format!("view id beyond the {} configured views", self.view_dims.len())));
        }
        if batch.input_dim() != self.view_dims[v] {
            return Err(err(format!("input dim {} but view expects {}", batch.input_dim(), self.view_dims[v])));
        }
        if self.classes.last() == Some(&c) {
            if self.last_view.is_some_and(|last| v <= last) {
                return Err(err(format!("view {v} already passed for this class")));
            }
            self.last_view = Some(v);
            return Ok(self.classes.len() - 1);
        }
        if self.classes.contains(&c) {
            return Err(err("class was already completed".into()));
        }
        self.close_class()?;
        if self.config.fusion.projector_reset_per_class && !self.classes.is_empty() {
            for layer in &mut self.fusion {
                layer.projector.reset();
            }
            if let Some(p) = &mut self.head_projector {
                p.reset();
            }
        }
        let slot = self.classes.len();
        self.head.expand(slot)?;
        self.classes.push(c);
        self.last_view = Some(v);
        Ok(slot)
    }

    fn extractor_for(&mut self, batch: &ViewBatch) -> Result<(&ViewExtractor, bool), TrainError> {
        let v = batch.view_id;
        let fresh = !self.extractors.contains_key(&v);
        if fresh {
            let cfg = &self.config.encoder;
            let encoder = RandomEncoder::new(
                self.view_dims[v],
                cfg.groups,
                cfg.nodes,
                cfg.activation,
                derive_seed(self.config.seed, TAG_ENCODER, v),
            )?;
            let decoder = encoder.fit_decoder_chunks(&[batch.inputs.view()], cfg)?;
            debug!("view {v}: decoder sparsity {:.4}", decoder.sparsity);
            self.extractors.insert(v, ViewExtractor { encoder, decoder });
        }
        Ok((&self.extractors[&v], fresh))
    }

    /// View-optimal features of `inputs` under the frozen extractor of `view_id`.
    pub fn features(&self, view_id: usize, inputs: ArrayView2<f32>) -> Result<Array2<f64>, TrainError> {
        let ex = self.extractors.get(&view_id).ok_or(EvalError::UnseenView(view_id))?;
        Ok(ex.decoder.apply_f32(inputs)?)
    }

    fn forward(&self, z: Array2<f64>) -> Result<Forward, TrainError> {
        let mut acts = Vec::with_capacity(self.fusion.len() + 1);
        acts.push(z);
        for layer in &self.fusion {
            let next = layer.forward(acts.last().expect("nonempty").view())?;
            acts.push(next);
        }
        Ok(Forward { acts })
    }

    /// Fusion-layer output for already extracted features.
    pub fn hidden_from_features(&self, z: Array2<f64>) -> Result<Array2<f64>, TrainError> {
        Ok(self.forward(z)?.acts.pop().expect("nonempty"))
    }

    /// Predicted class ids from extracted features; ties go to the earliest learned class.
    pub fn predict_features(&self, z: Array2<f64>) -> Result<Vec<usize>, TrainError> {
        let h = self.hidden_from_features(z)?;
        let logits = self.head.logits(h.view())?;
        Ok(logits.rows().into_iter().map(|r| self.classes[argmax(r.iter().copied())]).collect())
    }

    pub fn predict(&self, view_id: usize, inputs: ArrayView2<f32>) -> Result<Vec<usize>, TrainError> {
        self.predict_features(self.features(view_id, inputs)?)
    }

    /// Consumes one (class, view) session.
    pub fn train_session(&mut self, batch: &ViewBatch) -> Result<SessionRecord, TrainError> {
        let start = Instant::now();
        let slot = self.begin_session(batch)?;
        let (extractor, fresh) = self.extractor_for(batch)?;
        let sparsity = fresh.then_some(extractor.decoder.sparsity);
        let z = extractor.decoder.apply_f32(batch.inputs.view())?;
        let n = z.nrows();
        let labels = vec![slot; n];
        let cfg = self.config.consolidation.clone();
        let use_proj = self.config.fusion.use_projector;
        let lr_head = cfg.learning_rate;

        // P is fixed within the session, so Z P can be formed once for the first layer.
        let zp = if use_proj { Some(z.dot(&self.fusion[0].projector.matrix())) } else { None };

        let mut order: Vec<usize> = (0..n).collect();
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        for epoch in 0..cfg.epochs_per_session {
            order.shuffle(&mut self.rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let zb = z.select(Axis(0), chunk);
                let lb = &labels[..chunk.len()];
                let fw = self.forward(zb)?;
                let top = fw.acts.last().expect("nonempty");
                let g = self.head.swc_loss_and_grad(top.view(), lb)?;
                if !g.loss.is_finite() {
                    return Err(TrainError::NonFinite { class_id: batch.class_id, view_id: batch.view_id, epoch });
                }
                loss_sum += g.loss * chunk.len() as f64;

                let mut delta = g.grad_hidden.clone();
                let mut updates: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.fusion.len());
                for l in (0..self.fusion.len()).rev() {
                    let layer = &self.fusion[l];
                    let out = &fw.acts[l + 1];
                    delta.zip_mut_with(out, |d, &y| *d *= layer.activation.derivative_from_output(y));
                    let input = &fw.acts[l];
                    let gw = match (l, &zp) {
                        (0, Some(zp)) => zp.select(Axis(0), chunk).t().dot(&delta),
                        (_, _) if use_proj => layer.projector.project(input.t().dot(&delta).view())?,
                        _ => input.t().dot(&delta),
                    };
                    let gb = delta.sum_axis(Axis(0));
                    if l > 0 {
                        delta = delta.dot(&layer.weights.t());
                    }
                    updates.push((gw, gb));
                }
                for (l, (gw, gb)) in (0..self.fusion.len()).rev().zip(updates) {
                    self.fusion[l].apply_projected_step(gw.view(), Some(gb.view()))?;
                }
                match &self.head_projector {
                    Some(p) => {
                        let gw = p.project(g.grad_w_ce.view())?;
                        self.head.step(gw.view(), g.grad_b.view(), lr_head)?;
                    }
                    None if cfg.proximal => self.head.proximal_step(g.grad_w_ce.view(), g.grad_b.view(), lr_head)?,
                    None => self.head.step(g.grad_w.view(), g.grad_b.view(), lr_head)?,
                }
            }
            let mean = loss_sum / n as f64;
            if epoch == 0 {
                first_loss = mean;
            }
            last_loss = mean;
        }

        let fw = self.forward(z)?;
        let absorbed = |a: &Array2<f64>| match self.config.fusion.absorb {
            Absorb::Rows => a.clone(),
            Absorb::BatchMeans => block_means(a.view(), cfg.batch_size),
        };
        let absorbed: Vec<Array2<f64>> = fw.acts.iter().map(absorbed).collect();
        if use_proj {
            for (layer, input) in self.fusion.iter_mut().zip(&absorbed) {
                layer.projector.absorb(input.view())?;
            }
        }
        let top = fw.acts.last().expect("nonempty");
        if let Some(p) = &mut self.head_projector {
            p.absorb(absorbed.last().expect("nonempty").view())?;
        }
        self.pending_fisher = Some(self.head.fisher_diag(top.view(), &labels)?);
        self.sessions += 1;
        let seconds = start.elapsed().as_secs_f64();
        debug!(
            "session class {} view {}: loss {first_loss:.4} -> {last_loss:.4} in {seconds:.2}s",
            batch.class_id, batch.view_id
        );
        Ok(SessionRecord {
            class_id: batch.class_id,
            view_id: batch.view_id,
            samples: n,
            first_epoch_loss: first_loss,
            last_epoch_loss: last_loss,
            decoder_sparsity: sparsity,
            seconds,
        })
    }

    /// Number of `f64` scalars held in live state.
    pub fn state_len(&self) -> usize {
        let extractors: usize = self
            .extractors
            .values()
            .map(|e| {
                e.encoder.weights().len()
                    + e.encoder.biases().len()
                    + e.decoder.weights.len()
                    + e.decoder.biases.len()
                    + e.decoder.center.as_ref().map_or(0, |c| c.len())
            })
            .sum();
        let fusion: usize = self.fusion.iter().map(|l| l.weights.len() + l.bias.len() + l.projector.dim().pow(2)).sum();
        let head_proj = self.head_projector.as_ref().map_or(0, |p| p.dim().pow(2));
        let pending = self.pending_fisher.as_ref().map_or(0, |f| f.diag.len());
        extractors + fusion + self.head.state_len() + head_proj + pending + self.classes.len()
    }

    /// Approximate live state size in bytes.
    pub fn state_bytes(&self) -> usize {
        self.state_len() * std::mem::size_of::<f64>()
    }

    pub fn to_archive(&self) -> TensorArchive {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            view_dims: self.view_dims.clone(),
            classes: self.classes.clone(),
            last_view: self.last_view,
            sessions: self.sessions,
            views: self.extractors.keys().copied().collect(),
            decoder_sparsity: self.extractors.values().map(|e| e.decoder.sparsity).collect(),
            samples_absorbed: self.fusion.iter().map(|l| l.projector.samples_absorbed()).collect(),
            head_samples_absorbed: self.head_projector.as_ref().map(|p| p.samples_absorbed()),
            has_pending_fisher: self.pending_fisher.is_some(),
            pending_sample_count: self.pending_fisher.as_ref().map_or(0, |f| f.sample_count),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let mut a = TensorArchive { meta: serde_json::to_string(&meta).expect("meta serializes"), tensors: Vec::new() };
        for (v, e) in &self.extractors {
            a.push2(format!("encoder.{v}.weights"), &e.encoder.weights().to_owned());
            a.push1(format!("encoder.{v}.biases"), &e.encoder.biases().to_owned());
            a.push2(format!("decoder.{v}.weights"), &e.decoder.weights);
            a.push1(format!("decoder.{v}.biases"), &e.decoder.biases);
            if let Some(c) = &e.decoder.center {
                a.push1(format!("decoder.{v}.center"), c);
            }
        }
        for (l, layer) in self.fusion.iter().enumerate() {
            a.push2(format!("fusion.{l}.weights"), &layer.weights);
            a.push1(format!("fusion.{l}.bias"), &layer.bias);
            a.push2(format!("fusion.{l}.projector"), &layer.projector.matrix().to_owned());
        }
        a.push2("head.weights", &self.head.weights().to_owned());
        a.push1("head.bias", &self.head.bias().to_owned());
        a.push2("head.anchor", &self.head.anchor().to_owned());
        a.push2("head.fisher_sum", &self.head.fisher_sum().to_owned());
        if let Some(p) = &self.head_projector {
            a.push2("head.projector", &p.matrix().to_owned());
        }
        if let Some(f) = &self.pending_fisher {
            a.push2("pending.fisher", &f.diag);
        }
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self, TrainError> {
        let meta: CheckpointMeta =
            serde_json::from_str(&a.meta).map_err(|e| ContainerError::Corrupt(format!("checkpoint metadata: {e}")))?;
        let mut t = Trainer::new(meta.config.clone(), meta.view_dims.clone())?;
        let cfg = &meta.config.encoder;
        for (i, &v) in meta.views.iter().enumerate() {
            let encoder = RandomEncoder::from_parts(
                a.get2(&format!("encoder.{v}.weights"))?,
                a.get1(&format!("encoder.{v}.biases"))?,
                cfg.groups,
                cfg.activation,
            )?;
            let center = a.get1(&format!("decoder.{v}.center")).ok();
            let decoder = ViewDecoder {
                weights: a.get2(&format!("decoder.{v}.weights"))?,
                biases: a.get1(&format!("decoder.{v}.biases"))?,
                activation: cfg.feature_activation,
                center,
                sparsity: meta.decoder_sparsity.get(i).copied().unwrap_or(0.0),
                traces: Vec::new(),
                degenerate_groups: 0,
            };
            t.extractors.insert(v, ViewExtractor { encoder, decoder });
        }
        for (l, layer) in t.fusion.iter_mut().enumerate() {
            layer.weights = a.get2(&format!("fusion.{l}.weights"))?;
            layer.bias = a.get1(&format!("fusion.{l}.bias"))?;
            let absorbed = meta.samples_absorbed.get(l).copied().unwrap_or(0);
            layer.projector = Projector::from_parts(a.get2(&format!("fusion.{l}.projector"))?, meta.config.fusion.alpha, absorbed)?;
        }
        let mut head = DecisionHead::from_parts(
            a.get2("head.weights")?,
            a.get1("head.bias")?,
            a.get2("head.anchor")?,
            a.get2("head.fisher_sum")?,
            meta.config.effective_mu(),
        )?;
        head.train_bias = meta.config.consolidation.train_bias;
        t.head = head;
        if t.head_projector.is_some() {
            t.head_projector = Some(Projector::from_parts(
                a.get2("head.projector")?,
                meta.config.fusion.alpha,
                meta.head_samples_absorbed.unwrap_or(0),
            )?);
        }
        if meta.has_pending_fisher {
            t.pending_fisher = Some(FisherEstimate { diag: a.get2("pending.fisher")?, sample_count: meta.pending_sample_count });
        }
        t.classes = meta.classes;
        t.last_view = meta.last_view;
        t.sessions = meta.sessions;
        let pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|_| ContainerError::Corrupt("bad rng position".into()))?;
        t.rng.set_word_pos(pos);
        Ok(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    view_dims: Vec<usize>,
    classes: Vec<usize>,
    last_view: Option<usize>,
    sessions: usize,
    views: Vec<usize>,
    decoder_sparsity: Vec<f64>,
    samples_absorbed: Vec<u64>,
    head_samples_absorbed: Option<u64>,
    has_pending_fisher: bool,
    pending_sample_count: usize,
    rng_word_pos: String,
}

/// Predictor over a frozen trainer that caches extracted test features.
pub struct CachedModel<'a> {
    pub trainer: &'a Trainer,
    cache: &'a mut HashMap<(usize, usize, usize), Array2<f64>>,
}

impl<'a> CachedModel<'a> {
    pub fn new(trainer: &'a Trainer, cache: &'a mut HashMap<(usize, usize, usize), Array2<f64>>) -> Self {
        CachedModel { trainer, cache }
    }

    fn cached(&mut self, batch: &ViewBatch) -> Result<Array2<f64>, EvalError> {
        let key = (batch.class_id, batch.view_id, batch.len());
        if let Some(z) = self.cache.get(&key) {
            return Ok(z.clone());
        }
        let z = self.trainer.features(batch.view_id, batch.inputs.view()).map_err(to_eval)?;
        self.cache.insert(key, z.clone());
        Ok(z)
    }
}

fn to_eval(e: TrainError) -> EvalError {
    match e {
        TrainError::Eval(e) => e,
        other => EvalError::Model(other.to_string()),
    }
}

impl Predictor for CachedModel<'_> {
    fn predict(&mut self, batch: &ViewBatch) -> Result<Vec<usize>, EvalError> {
        let z = self.cached(batch)?;
        self.trainer.predict_features(z).map_err(to_eval)
    }
}

impl Embedder for CachedModel<'_> {
    fn embed(&mut self, batch: &ViewBatch) -> Result<Array2<f64>, EvalError> {
        let z = self.cached(batch)?;
        self.trainer.hidden_from_features(z).map_err(to_eval)
    }
}

impl Predictor for Trainer {
    fn predict(&mut self, batch: &ViewBatch) -> Result<Vec<usize>, EvalError> {
        Trainer::predict(self, batch.view_id, batch.inputs.view()).map_err(to_eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub after_class: usize,
    pub after_view: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub library_version: String,
    pub config: RunConfig,
    pub protocol: StreamProtocol,
    pub sessions: Vec<SessionRecord>,
    pub progress: Vec<ProgressRecord>,
    pub avg_acc: f64,
    pub bwt: Option<f64>,
    pub familiar: Option<FamiliarReport>,
    pub state_bytes: usize,
    pub total_seconds: f64,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub matrix: AccuracyMatrix,
    pub rows: Vec<AccuracyRow>,
    pub trainer: Trainer,
}

impl RunOutcome {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            protocol: self.manifest.protocol.name.clone(),
            mode: self.manifest.config.mode.as_str().to_string(),
            seed: self.manifest.config.seed,
            class_order: self.manifest.protocol.class_order.clone(),
            avg_acc: self.manifest.avg_acc,
            bwt: self.manifest.bwt,
            familiar: self.manifest.familiar.clone(),
        }
    }
}

/// Trains over the full stream, evaluating after every class (and every view with
/// per-view cadence). Writes reports into `config.output.dir` when set.
pub fn run(config: &RunConfig, data: &SplitDataset) -> Result<RunOutcome, TrainError> {
    config.validate()?;
    let total = Instant::now();
    let protocol = StreamProtocol::shuffled(
        config.protocol_name(data.num_classes),
        data,
        config.protocol.heldout_set(),
        config.seed,
    )?;
    let sessions = stream_sessions(&protocol, data);
    let (shared_test, heldout_test) = partition_test(&protocol, data);
    let mut trainer = Trainer::new(config.clone(), data.view_dims.clone())?;
    let mut matrix = AccuracyMatrix::new(data.num_classes);
    let mut rows = Vec::new();
    let mut progress = Vec::new();
    let mut records = Vec::with_capacity(sessions.len());
    let mut cache = HashMap::new();
    for (i, batch) in sessions.iter().enumerate() {
        let rec = trainer.train_session(batch)?;
        records.push(rec);
        let class_done = sessions.get(i + 1).is_none_or(|n| n.class_id != batch.class_id);
        if !class_done && config.eval_cadence == EvalCadence::PerClass {
            continue;
        }
        let slot = trainer.classes().len() - 1;
        let classes = trainer.classes().to_vec();
        let visible: Vec<&ViewBatch> =
            shared_test.iter().copied().filter(|b| trainer.extractor(b.view_id).is_some()).collect();
        let row = evaluate_classes(&mut CachedModel::new(&trainer, &mut cache), &visible, &classes, slot)?;
        let accs: Vec<f64> = row.scores.iter().filter_map(|s| s.accuracy()).collect();
        let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        if class_done {
            info!("after class {} ({}/{}): mean accuracy {mean:.4}", batch.class_id, slot + 1, data.num_classes);
            matrix.record_row(&row)?;
            rows.push(row);
        } else {
            progress.push(ProgressRecord { after_class: slot, after_view: batch.view_id, mean_accuracy: mean });
        }
    }
    trainer.finish()?;
    let avg = avg_acc(&matrix)?;
    let b = bwt(&matrix)?;
    let familiar = if protocol.heldout_views.is_empty() {
        None
    } else {
        let classes = trainer.classes().to_vec();
        Some(familiar_view_eval(&mut CachedModel::new(&trainer, &mut cache), &heldout_test, &classes, avg)?)
    };
    let manifest = RunManifest {
        schema_version: CONFIG_SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        protocol,
        sessions: records,
        progress,
        avg_acc: avg,
        bwt: b,
        familiar,
        state_bytes: trainer.state_bytes(),
        total_seconds: total.elapsed().as_secs_f64(),
    };
    let outcome = RunOutcome { manifest, matrix, rows, trainer };
    if let Some(dir) = &config.output.dir {
        write_run_dir(dir, &outcome, data, &mut cache)?;
    }
    Ok(outcome)
}

fn write_run_dir(
    dir: &Path,
    outcome: &RunOutcome,
    data: &SplitDataset,
    cache: &mut HashMap<(usize, usize, usize), Array2<f64>>,
) -> Result<(), TrainError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    emit_report(dir, &outcome.matrix, &outcome.summary())?;
    let manifest = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&outcome.manifest).expect("manifest serializes");
    write_atomic(&manifest, body.as_bytes()).map_err(io_err(&manifest))?;
    if outcome.manifest.config.output.checkpoint {
        outcome.trainer.to_archive().save(&dir.join("checkpoint.mvck"))?;
    }
    if outcome.manifest.config.output.embeddings {
        let test: Vec<&ViewBatch> = data.test.iter().collect();
        crate::evaluation::emit_embeddings(&mut CachedModel::new(&outcome.trainer, cache), &test, &dir.join("embeddings.tsv"))?;
    }
    Ok(())
}
