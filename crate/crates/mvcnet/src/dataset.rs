//! Raw dataset ingestion, multi-view protocol synthesis and session streaming.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder};
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse_features::{EncoderConfig, FeatureError, RandomEncoder};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
/// Upper bound on the number of views a synthetic protocol may request.
pub const MAX_VIEWS: usize = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{field}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { field: &'static str, expected: u32, found: u32 },
    #[error("{field}: truncated, need {expected} bytes but file has {found}")]
    Truncated { field: &'static str, expected: usize, found: usize },
    #[error("item count mismatch: images has {images}, labels has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: row {row}, column {column}: {message}")]
    Parse { path: PathBuf, row: usize, column: usize, message: String },
    #[error("{path}: file is empty")]
    Empty { path: PathBuf },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// One (class, view) session worth of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub class_id: usize,
    pub view_id: usize,
    pub inputs: Array2<f32>,
    pub labels: Vec<usize>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs_f64(&self) -> Array2<f64> {
        self.inputs.mapv(f64::from)
    }
}

/// Train and test batches of a multi-view dataset, one batch per (class, view).
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<ViewBatch>,
    pub test: Vec<ViewBatch>,
    pub num_classes: usize,
    pub views_per_class: usize,
    /// Input dimension of each view.
    pub view_dims: Vec<usize>,
    pub seed: u64,
}

impl SplitDataset {
    /// Groups flat sample matrices by class into a single-view dataset.
    pub fn from_arrays(
        train_x: &Array2<f32>,
        train_y: &[usize],
        test_x: &Array2<f32>,
        test_y: &[usize],
    ) -> Result<Self, DatasetError> {
        if train_x.ncols() != test_x.ncols() {
            return Err(DatasetError::Inconsistent(format!(
                "train dim {} differs from test dim {}",
                train_x.ncols(),
                test_x.ncols()
            )));
        }
        let num_classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
        let train = group_by_class(train_x, train_y, num_classes, 0);
        let test = group_by_class(test_x, test_y, num_classes, 0);
        let ds = SplitDataset {
            train,
            test,
            num_classes,
            views_per_class: 1,
            view_dims: vec![train_x.ncols()],
            seed: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Input dimension when all views agree, otherwise `None`.
    pub fn input_dim(&self) -> Option<usize> {
        let first = *self.view_dims.first()?;
        self.view_dims.iter().all(|&d| d == first).then_some(first)
    }

    pub fn train_batch(&self, class_id: usize, view_id: usize) -> Option<&ViewBatch> {
        self.train.iter().find(|b| b.class_id == class_id && b.view_id == view_id)
    }

    pub fn test_batch(&self, class_id: usize, view_id: usize) -> Option<&ViewBatch> {
        self.test.iter().find(|b| b.class_id == class_id && b.view_id == view_id)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.view_dims.len() != self.views_per_class {
            return Err(DatasetError::Inconsistent(format!(
                "{} view dims for {} views",
                self.view_dims.len(),
                self.views_per_class
            )));
        }
        let mut seen = BTreeSet::new();
        for b in &self.train {
            if !seen.insert((b.class_id, b.view_id)) {
                return Err(DatasetError::Inconsistent(format!(
                    "duplicate training batch for class {} view {}",
                    b.class_id, b.view_id
                )));
            }
        }
        for b in self.train.iter().chain(&self.test) {
            if b.class_id >= self.num_classes || b.view_id >= self.views_per_class {
                return Err(DatasetError::Inconsistent(format!(
                    "batch (class {}, view {}) outside {} classes x {} views",
                    b.class_id, b.view_id, self.num_classes, self.views_per_class
                )));
            }
            if b.inputs.nrows() != b.labels.len() {
                return Err(DatasetError::Inconsistent(format!(
                    "batch (class {}, view {}) has {} rows but {} labels",
                    b.class_id,
                    b.view_id,
                    b.inputs.nrows(),
                    b.labels.len()
                )));
            }
            if b.inputs.ncols() != self.view_dims[b.view_id] {
                return Err(DatasetError::Inconsistent(format!(
                    "batch (class {}, view {}) has dim {}, expected {}",
                    b.class_id,
                    b.view_id,
                    b.inputs.ncols(),
                    self.view_dims[b.view_id]
                )));
            }
            if b.labels.iter().any(|&l| l != b.class_id) {
                return Err(DatasetError::Inconsistent(format!(
                    "batch (class {}, view {}) carries foreign labels",
                    b.class_id, b.view_id
                )));
            }
        }
        Ok(())
    }
}

fn group_by_class(x: &Array2<f32>, y: &[usize], num_classes: usize, view_id: usize) -> Vec<ViewBatch> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in y.iter().enumerate() {
        rows[c].push(i);
    }
    rows.into_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_empty())
        .map(|(c, r)| ViewBatch {
            class_id: c,
            view_id,
            inputs: x.select(Axis(0), &r),
            labels: vec![c; r.len()],
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn need(field: &'static str, bytes: &[u8], expected: usize) -> Result<(), DatasetError> {
    if bytes.len() < expected {
        Err(DatasetError::Truncated { field, expected, found: bytes.len() })
    } else {
        Ok(())
    }
}

/// Parses an IDX image buffer into a `[count x rows*cols]` matrix scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f32>, DatasetError> {
    need("images", bytes, 16)?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != IMAGE_MAGIC {
        return Err(DatasetError::BadMagic { field: "images", expected: IMAGE_MAGIC, found: magic });
    }
    let n = BigEndian::read_u32(&bytes[4..8]) as usize;
    let rows = BigEndian::read_u32(&bytes[8..12]) as usize;
    let cols = BigEndian::read_u32(&bytes[12..16]) as usize;
    let dim = rows * cols;
    need("images", bytes, 16 + n * dim)?;
    let data: Vec<f32> = bytes[16..16 + n * dim].iter().map(|&p| f32::from(p) / 255.0).collect();
    Ok(Array2::from_shape_vec((n, dim), data).expect("shape checked above"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DatasetError> {
    need("labels", bytes, 8)?;
    let magic = BigEndian::read_u32(&bytes[0..4]);
    if magic != LABEL_MAGIC {
        return Err(DatasetError::BadMagic { field: "labels", expected: LABEL_MAGIC, found: magic });
    }
    let n = BigEndian::read_u32(&bytes[4..8]) as usize;
    need("labels", bytes, 8 + n)?;
    Ok(bytes[8..8 + n].iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Array2<f32>, Vec<usize>), DatasetError> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.nrows() != labels.len() {
        return Err(DatasetError::CountMismatch { images: images.nrows(), labels: labels.len() });
    }
    Ok((images, labels))
}

/// Loads the four standard MNIST-layout files from `dir` into a single-view dataset.
pub fn load_idx_dir(dir: &Path) -> Result<SplitDataset, DatasetError> {
    let (train_x, train_y) = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let (test_x, test_y) = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    SplitDataset::from_arrays(&train_x, &train_y, &test_x, &test_y)
}

fn require_single_view(base: &SplitDataset) -> Result<usize, DatasetError> {
    if base.views_per_class != 1 {
        return Err(DatasetError::Config(format!(
            "base dataset must have one view, found {}",
            base.views_per_class
        )));
    }
    Ok(base.view_dims[0])
}

fn check_num_views(num_views: usize) -> Result<(), DatasetError> {
    if num_views == 0 || num_views > MAX_VIEWS {
        return Err(DatasetError::Config(format!(
            "num_views must be in 1..={MAX_VIEWS}, got {num_views}"
        )));
    }
    Ok(())
}

/// Seeded pixel permutations; the first is always the identity.
pub fn view_permutations(dim: usize, num_views: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perms: Vec<Vec<usize>> = vec![(0..dim).collect()];
    while perms.len() < num_views {
        let mut p: Vec<usize> = (0..dim).collect();
        p.shuffle(&mut rng);
        if !perms.contains(&p) || dim < 2 {
            perms.push(p);
        }
    }
    perms
}

/// Builds the permuted-pixel protocol: view `v` applies the `v`-th seeded permutation.
pub fn make_permuted_views(base: &SplitDataset, num_views: usize, seed: u64) -> Result<SplitDataset, DatasetError> {
    check_num_views(num_views)?;
    let dim = require_single_view(base)?;
    let perms = view_permutations(dim, num_views, seed);
    let permute = |batches: &[ViewBatch]| -> Vec<ViewBatch> {
        let mut out = Vec::with_capacity(batches.len() * num_views);
        for b in batches {
            for (v, p) in perms.iter().enumerate() {
                out.push(ViewBatch {
                    class_id: b.class_id,
                    view_id: v,
                    inputs: b.inputs.select(Axis(1), p),
                    labels: b.labels.clone(),
                });
            }
        }
        out
    };
    Ok(SplitDataset {
        train: permute(&base.train),
        test: permute(&base.test),
        num_classes: base.num_classes,
        views_per_class: num_views,
        view_dims: vec![dim; num_views],
        seed,
    })
}

/// Derives a per-view seed from a run seed.
pub fn view_seed(seed: u64, view_id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(view_id as u64 + 1)
}

/// Builds the synthesized-view protocol: each view is the extracted feature of an
/// independently seeded encoder fitted on all training images.
pub fn make_synthesized_views(
    base: &SplitDataset,
    num_views: usize,
    config: &EncoderConfig,
    seed: u64,
) -> Result<SplitDataset, DatasetError> {
    check_num_views(num_views)?;
    let dim = require_single_view(base)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for v in 0..num_views {
        let encoder = RandomEncoder::new(dim, config.groups, config.nodes, config.activation, view_seed(seed, v))?;
        let fit_inputs: Vec<_> = base.train.iter().map(|b| b.inputs.view()).collect();
        let decoder = encoder.fit_decoder_chunks(&fit_inputs, config)?;
        for (src, dst) in [(&base.train, &mut train), (&base.test, &mut test)] {
            for b in src {
                let feats = decoder.apply_f32(b.inputs.view())?;
                dst.push(ViewBatch {
                    class_id: b.class_id,
                    view_id: v,
                    inputs: feats.mapv(|x| x as f32),
                    labels: b.labels.clone(),
                });
            }
        }
    }
    let order = |a: &ViewBatch, b: &ViewBatch| (a.class_id, a.view_id).cmp(&(b.class_id, b.view_id));
    train.sort_by(order);
    test.sort_by(order);
    Ok(SplitDataset {
        train,
        test,
        num_classes: base.num_classes,
        views_per_class: num_views,
        view_dims: vec![config.output_dim(); num_views],
        seed,
    })
}

fn parse_table(path: &Path) -> Result<Vec<Vec<f64>>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut rows = Vec::new();
    let mut width = None;
    for (r, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|c| !c.is_empty())
            .collect();
        let mut row = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| DatasetError::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: c + 1,
                    message: "non-finite value".into(),
                });
            }
            row.push(value);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: row.len().min(w) + 1,
                    message: format!("ragged row: {} cells, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DatasetError::Empty { path: path.to_path_buf() });
    }
    Ok(rows)
}

/// Loads pre-extracted per-view feature tables and a label column, with a
/// seeded stratified train/test split. Each file becomes one view.
pub fn load_feature_views(
    paths: &[PathBuf],
    labels_path: &Path,
    train_ratio: f64,
    seed: u64,
) -> Result<SplitDataset, DatasetError> {
    if paths.is_empty() {
        return Err(DatasetError::Config("at least one feature file is required".into()));
    }
    check_num_views(paths.len())?;
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(DatasetError::Config(format!("train ratio must be in [0, 1], got {train_ratio}")));
    }
    let raw_labels = parse_table(labels_path)?;
    let mut labels = Vec::with_capacity(raw_labels.len());
    for (r, row) in raw_labels.iter().enumerate() {
        let v = row[0];
        if row.len() != 1 || v < 0.0 || v.fract() != 0.0 {
            return Err(DatasetError::Parse {
                path: labels_path.to_path_buf(),
                row: r + 1,
                column: 1,
                message: "labels must be one non-negative integer per row".into(),
            });
        }
        labels.push(v as i64);
    }
    let mut ids: Vec<i64> = labels.clone();
    ids.sort_unstable();
    ids.dedup();
    let remap: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let labels: Vec<usize> = labels.iter().map(|l| remap[l]).collect();
    let num_classes = ids.len();

    let tables: Vec<Vec<Vec<f64>>> = paths.iter().map(|p| parse_table(p)).collect::<Result<_, _>>()?;
    for (p, t) in paths.iter().zip(&tables) {
        if t.len() != labels.len() {
            return Err(DatasetError::Inconsistent(format!(
                "{} has {} rows but labels have {}",
                p.display(),
                t.len(),
                labels.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_rows = vec![Vec::new(); num_classes];
    let mut test_rows = vec![Vec::new(); num_classes];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64) * train_ratio).round() as usize;
        let n_train = n_train.clamp(1, idx.len());
        test_rows[c] = idx.split_off(n_train);
        train_rows[c] = idx;
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        for (v, table) in tables.iter().enumerate() {
            let dim = table[0].len();
            for (rows, dst) in [(&train_rows[c], &mut train), (&test_rows[c], &mut test)] {
                if rows.is_empty() {
                    continue;
                }
                let inputs = Array2::from_shape_fn((rows.len(), dim), |(i, j)| table[rows[i]][j] as f32);
                dst.push(ViewBatch { class_id: c, view_id: v, inputs, labels: vec![c; rows.len()] });
            }
        }
    }
    let ds = SplitDataset {
        train,
        test,
        num_classes,
        views_per_class: paths.len(),
        view_dims: tables.iter().map(|t| t[0].len()).collect(),
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

/// Keeps a seeded `fraction` of every training batch. Test batches are untouched.
pub fn subsample_train(data: &SplitDataset, fraction: f64, seed: u64) -> Result<SplitDataset, DatasetError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DatasetError::Config(format!("train fraction must be in (0, 1], got {fraction}")));
    }
    let mut out = data.clone();
    if fraction == 1.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    for b in &mut out.train {
        let n = b.len();
        let keep = ((n as f64) * fraction).ceil().max(1.0) as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
        b.inputs = b.inputs.select(Axis(0), &idx);
        b.labels.truncate(keep);
    }
    Ok(out)
}

/// Per-view z-score normalization using statistics of the training batches.
/// Standard deviations are floored at `min_std`.
pub fn standardize_views(data: &mut SplitDataset, min_std: f64) {
    for v in 0..data.views_per_class {
        let dim = data.view_dims[v];
        let mut sum = vec![0.0f64; dim];
        let mut sq = vec![0.0f64; dim];
        let mut n = 0usize;
        for b in data.train.iter().filter(|b| b.view_id == v) {
            for row in b.inputs.rows() {
                for (j, &x) in row.iter().enumerate() {
                    sum[j] += f64::from(x);
                    sq[j] += f64::from(x) * f64::from(x);
                }
            }
            n += b.len();
        }
        if n == 0 {
            continue;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(min_std))
            .collect();
        for b in data.train.iter_mut().chain(data.test.iter_mut()).filter(|b| b.view_id == v) {
            for mut row in b.inputs.rows_mut() {
                for (j, x) in row.iter_mut().enumerate() {
                    *x = ((f64::from(*x) - mean[j]) / std[j]) as f32;
                }
            }
        }
    }
}

/// Parameters of the Gaussian-cluster toy stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the class centroids relative to unit within-class noise.
    pub separation: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { num_classes: 10, input_dim: 64, train_per_class: 200, test_per_class: 100, separation: 1.0 }
    }
}

/// Generates a single-view toy dataset of isotropic Gaussian clusters.
pub fn toy_dataset(config: &ToyConfig, seed: u64) -> Result<SplitDataset, DatasetError> {
    if config.num_classes == 0 || config.input_dim == 0 || config.train_per_class == 0 {
        return Err(DatasetError::Config("toy dataset needs classes, dims and samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = move || -> f64 {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let d = config.input_dim;
    let centers = Array2::from_shape_fn((config.num_classes, d), |_| gauss() * config.separation);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..config.num_classes {
        for (n, dst) in [(config.train_per_class, &mut train), (config.test_per_class, &mut test)] {
            if n == 0 {
                continue;
            }
            let inputs = Array2::from_shape_fn((n, d), |(_, j)| (centers[[c, j]] + gauss()) as f32);
            dst.push(ViewBatch { class_id: c, view_id: 0, inputs, labels: vec![c; n] });
        }
    }
    Ok(SplitDataset {
        train,
        test,
        num_classes: config.num_classes,
        views_per_class: 1,
        view_dims: vec![d],
        seed,
    })
}

/// Ordering of a class-incremental multi-view stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamProtocol {
    pub name: String,
    pub num_classes: usize,
    pub views_per_class: usize,
    pub class_order: Vec<usize>,
    pub seed: u64,
    /// (class, view) pairs withheld from training and scored separately.
    pub heldout_views: BTreeSet<(usize, usize)>,
}

impl StreamProtocol {
    /// Validates a protocol against the dataset it will stream.
    pub fn new(
        name: impl Into<String>,
        data: &SplitDataset,
        class_order: Vec<usize>,
        heldout_views: BTreeSet<(usize, usize)>,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let c = data.num_classes;
        let mut sorted = class_order.clone();
        sorted.sort_unstable();
        if sorted != (0..c).collect::<Vec<_>>() {
            return Err(DatasetError::Config(format!("class order {class_order:?} is not a permutation of 0..{c}")));
        }
        for &(cl, v) in &heldout_views {
            if cl >= c || v >= data.views_per_class {
                return Err(DatasetError::Config(format!("held-out pair ({cl}, {v}) is outside the protocol")));
            }
        }
        for cl in 0..c {
            let trained = (0..data.views_per_class).filter(|&v| !heldout_views.contains(&(cl, v))).count();
            if trained == 0 {
                return Err(DatasetError::Config(format!("class {cl} has every view held out")));
            }
            for v in 0..data.views_per_class {
                if !heldout_views.contains(&(cl, v)) && data.train_batch(cl, v).is_none() {
                    return Err(DatasetError::Inconsistent(format!("no training batch for class {cl} view {v}")));
                }
            }
        }
        Ok(StreamProtocol {
            name: name.into(),
            num_classes: c,
            views_per_class: data.views_per_class,
            class_order,
            seed,
            heldout_views,
        })
    }

    /// Protocol with a class order shuffled by `seed`.
    pub fn shuffled(
        name: impl Into<String>,
        data: &SplitDataset,
        heldout_views: BTreeSet<(usize, usize)>,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let mut order: Vec<usize> = (0..data.num_classes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(name, data, order, heldout_views, seed)
    }

    pub fn num_sessions(&self) -> usize {
        self.num_classes * self.views_per_class - self.heldout_views.len()
    }

    pub fn is_heldout(&self, class_id: usize, view_id: usize) -> bool {
        self.heldout_views.contains(&(class_id, view_id))
    }
}

/// Training sessions in class-major, view-minor order, skipping held-out views.
pub fn stream_sessions<'a>(protocol: &StreamProtocol, data: &'a SplitDataset) -> Vec<&'a ViewBatch> {
    let mut out = Vec::with_capacity(protocol.num_sessions());
    for &c in &protocol.class_order {
        for v in 0..protocol.views_per_class {
            if protocol.is_heldout(c, v) {
                continue;
            }
            if let Some(b) = data.train_batch(c, v) {
                out.push(b);
            }
        }
    }
    out
}

/// Splits the test batches into those scored in the accuracy matrix and the held-out ones.
pub fn partition_test<'a>(protocol: &StreamProtocol, data: &'a SplitDataset) -> (Vec<&'a ViewBatch>, Vec<&'a ViewBatch>) {
    data.test.iter().partition(|b| !protocol.is_heldout(b.class_id, b.view_id))
}

/// Copies rows `range` of a batch, used to chunk work.
pub fn slice_rows(b: &ViewBatch, start: usize, end: usize) -> ViewBatch {
    ViewBatch {
        class_id: b.class_id,
        view_id: b.view_id,
        inputs: b.inputs.slice(s![start..end, ..]).to_owned(),
        labels: b.labels[start..end].to_vec(),
    }
}
