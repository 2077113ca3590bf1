//! Accuracy matrix, Avg Acc / BWT metrics, held-out view scoring and report emission.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::write_atomic;
use crate::dataset::ViewBatch;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "after_class,class,accuracy,n_samples";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("accuracy matrix is empty")]
    EmptyMatrix,
    #[error("row {row} is incomplete at column {column}")]
    IncompleteRow { row: usize, column: usize },
    #[error("cell ({row}, {column}) is outside a {size}x{size} matrix or above the diagonal")]
    OutOfBounds { row: usize, column: usize, size: usize },
    #[error("accuracy {0} is outside [0, 1]")]
    InvalidAccuracy(f64),
    #[error("held-out view set is empty")]
    EmptyHeldout,
    #[error("view {0} has no fitted extractor")]
    UnseenView(usize),
    #[error("model error: {0}")]
    Model(String),
    #[error("report line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub accuracy: f64,
    pub n_samples: usize,
}

/// `R[after][c]`: accuracy on the `c`-th learned class after training through the `after`-th.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    cells: Vec<Vec<Option<Cell>>>,
}

impl AccuracyMatrix {
    pub fn new(num_classes: usize) -> Self {
        AccuracyMatrix { cells: (0..num_classes).map(|r| vec![None; r + 1]).collect() }
    }

    pub fn num_classes(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, row: usize, column: usize, cell: Cell) -> Result<(), EvalError> {
        let size = self.num_classes();
        if row >= size || column > row {
            return Err(EvalError::OutOfBounds { row, column, size });
        }
        if !(0.0..=1.0).contains(&cell.accuracy) {
            return Err(EvalError::InvalidAccuracy(cell.accuracy));
        }
        self.cells[row][column] = Some(cell);
        Ok(())
    }

    pub fn get(&self, row: usize, column: usize) -> Option<Cell> {
        self.cells.get(row)?.get(column).copied().flatten()
    }

    pub fn accuracy(&self, row: usize, column: usize) -> Option<f64> {
        self.get(row, column).map(|c| c.accuracy)
    }

    /// Index of the last row with at least one defined cell.
    pub fn last_filled_row(&self) -> Option<usize> {
        self.cells.iter().rposition(|r| r.iter().any(Option::is_some))
    }

    pub fn record_row(&mut self, row: &AccuracyRow) -> Result<(), EvalError> {
        for (c, s) in row.scores.iter().enumerate() {
            if let Some(acc) = s.accuracy() {
                self.set(row.after, c, Cell { accuracy: acc, n_samples: s.total })?;
            }
        }
        Ok(())
    }

    /// Dense view with NaN for masked or undefined cells.
    pub fn to_dense(&self) -> Array2<f64> {
        let c = self.num_classes();
        Array2::from_shape_fn((c, c), |(r, k)| self.accuracy(r, k).unwrap_or(f64::NAN))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (r, row) in self.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if let Some(cell) = cell {
                    let _ = writeln!(out, "{r},{c},{},{}", cell.accuracy, cell.n_samples);
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, num_classes: usize) -> Result<Self, EvalError> {
        let mut m = AccuracyMatrix::new(num_classes);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(EvalError::Parse { line: 1, message: format!("expected header {CSV_HEADER:?}") }),
        }
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let err = |message: String| EvalError::Parse { line: i + 1, message };
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let row: usize = f[0].parse().map_err(|_| err(format!("bad after_class {:?}", f[0])))?;
            let col: usize = f[1].parse().map_err(|_| err(format!("bad class {:?}", f[1])))?;
            let accuracy: f64 = f[2].parse().map_err(|_| err(format!("bad accuracy {:?}", f[2])))?;
            let n_samples: usize = f[3].parse().map_err(|_| err(format!("bad n_samples {:?}", f[3])))?;
            m.set(row, col, Cell { accuracy, n_samples })?;
        }
        Ok(m)
    }
}

/// Mean accuracy of the final row.
pub fn avg_acc(r: &AccuracyMatrix) -> Result<f64, EvalError> {
    let c = r.num_classes();
    if c == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut sum = 0.0;
    for k in 0..c {
        sum += r.accuracy(c - 1, k).ok_or(EvalError::IncompleteRow { row: c - 1, column: k })?;
    }
    Ok(sum / c as f64)
}

/// Mean of `R[C-1][c] - R[c][c]` over earlier classes; `None` with a single class.
pub fn bwt(r: &AccuracyMatrix) -> Result<Option<f64>, EvalError> {
    let c = r.num_classes();
    if c == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    if c == 1 {
        return Ok(None);
    }
    let mut sum = 0.0;
    for k in 0..c - 1 {
        let last = r.accuracy(c - 1, k).ok_or(EvalError::IncompleteRow { row: c - 1, column: k })?;
        let diag = r.accuracy(k, k).ok_or(EvalError::IncompleteRow { row: k, column: k })?;
        sum += last - diag;
    }
    Ok(Some(sum / (c - 1) as f64))
}

/// Per-class outcome of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: usize,
    pub correct: usize,
    pub total: usize,
    /// Predicted class id for every scored sample, in test-batch order.
    pub predictions: Vec<usize>,
}

impl ClassScore {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub after: usize,
    pub scores: Vec<ClassScore>,
}

/// Something that maps a batch of inputs to predicted class ids.
pub trait Predictor {
    fn predict(&mut self, batch: &ViewBatch) -> Result<Vec<usize>, EvalError>;
}

/// First index of the maximum, so ties go to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Scores every seen class (in learning order) over all of its test views.
pub fn evaluate_classes<P: Predictor + ?Sized>(
    model: &mut P,
    test: &[&ViewBatch],
    classes_seen: &[usize],
    after: usize,
) -> Result<AccuracyRow, EvalError> {
    let mut scores = Vec::with_capacity(classes_seen.len());
    for &class_id in classes_seen {
        let mut score = ClassScore { class_id, correct: 0, total: 0, predictions: Vec::new() };
        for b in test.iter().filter(|b| b.class_id == class_id) {
            let pred = model.predict(b)?;
            score.correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
            score.total += b.len();
            score.predictions.extend(pred);
        }
        if score.total == 0 {
            warn!("class {class_id} has no test samples, its cell is masked");
        }
        scores.push(score);
    }
    Ok(AccuracyRow { after, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamiliarReport {
    pub per_class: Vec<(usize, Option<f64>)>,
    pub heldout_accuracy: f64,
    pub shared_accuracy: f64,
    /// `heldout_accuracy - shared_accuracy`.
    pub gap: f64,
}

/// Accuracy on views never trained for their class, against the shared-view accuracy.
pub fn familiar_view_eval<P: Predictor + ?Sized>(
    model: &mut P,
    heldout: &[&ViewBatch],
    classes_seen: &[usize],
    shared_accuracy: f64,
) -> Result<FamiliarReport, EvalError> {
    if heldout.is_empty() {
        return Err(EvalError::EmptyHeldout);
    }
    let row = evaluate_classes(model, heldout, classes_seen, 0)?;
    let scored: Vec<f64> = row.scores.iter().filter_map(ClassScore::accuracy).collect();
    if scored.is_empty() {
        return Err(EvalError::EmptyHeldout);
    }
    let heldout_accuracy = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(FamiliarReport {
        per_class: row.scores.iter().map(|s| (s.class_id, s.accuracy())).collect(),
        heldout_accuracy,
        shared_accuracy,
        gap: heldout_accuracy - shared_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub protocol: String,
    pub mode: String,
    pub seed: u64,
    pub class_order: Vec<usize>,
    pub avg_acc: f64,
    pub bwt: Option<f64>,
    pub familiar: Option<FamiliarReport>,
}

/// Writes `report.csv` and `summary.json` into `dir`.
pub fn emit_report(dir: &Path, matrix: &AccuracyMatrix, summary: &RunSummary) -> Result<(), EvalError> {
    let csv = dir.join("report.csv");
    write_atomic(&csv, matrix.to_csv().as_bytes()).map_err(|source| EvalError::Io { path: csv.clone(), source })?;
    let json = dir.join("summary.json");
    let body = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_atomic(&json, body.as_bytes()).map_err(|source| EvalError::Io { path: json.clone(), source })?;
    Ok(())
}

/// Something that maps a batch to its fusion-layer representation.
pub trait Embedder {
    fn embed(&mut self, batch: &ViewBatch) -> Result<Array2<f64>, EvalError>;
}

/// Tab-separated dump of `label, view, h_0 .. h_k` per sample. Returns the row count.
pub fn emit_embeddings<E: Embedder + ?Sized>(model: &mut E, batches: &[&ViewBatch], path: &Path) -> Result<usize, EvalError> {
    let mut out = String::new();
    let mut rows = 0;
    for b in batches {
        let h = model.embed(b)?;
        for (row, label) in h.rows().into_iter().zip(&b.labels) {
            let _ = write!(out, "{label}\t{}", b.view_id);
            for v in row {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
            rows += 1;
        }
    }
    write_atomic(path, out.as_bytes()).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new(rows.len());
        for (r, row) in rows.iter().enumerate() {
            for (c, &a) in row.iter().enumerate() {
                m.set(r, c, Cell { accuracy: a, n_samples: 10 }).unwrap();
            }
        }
        m
    }

    #[test]
    fn metric_hand_cases() {
        assert_eq!(avg_acc(&matrix(&[&[1.0], &[1.0, 1.0], &[1.0, 1.0, 1.0]])).unwrap(), 1.0);
        assert!((avg_acc(&matrix(&[&[1.0], &[0.9, 0.8]])).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(bwt(&matrix(&[&[0.7], &[0.7, 0.4]])).unwrap(), Some(0.0));
        let b = bwt(&matrix(&[&[1.0], &[0.8, 1.0]])).unwrap().unwrap();
        assert!((b + 0.2).abs() < 1e-15);
        assert_eq!(bwt(&matrix(&[&[0.6]])).unwrap(), None);
        assert_eq!(avg_acc(&matrix(&[&[0.6]])).unwrap(), 0.6);
    }

    #[test]
    fn incomplete_final_row_is_an_error() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, Cell { accuracy: 1.0, n_samples: 1 }).unwrap();
        assert!(matches!(avg_acc(&m), Err(EvalError::IncompleteRow { row: 1, column: 0 })));
        assert!(m.set(0, 1, Cell { accuracy: 1.0, n_samples: 1 }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut m = matrix(&[&[0.123456789], &[1.0 / 3.0, 0.5]]);
        m.cells[1][0] = None;
        let back = AccuracyMatrix::from_csv(&m.to_csv(), 2).unwrap();
        assert_eq!(back, m);
    }

    struct Constant(usize);

    impl Predictor for Constant {
        fn predict(&mut self, batch: &ViewBatch) -> Result<Vec<usize>, EvalError> {
            Ok(vec![self.0; batch.len()])
        }
    }

    fn batch(class_id: usize, view_id: usize, n: usize) -> ViewBatch {
        ViewBatch { class_id, view_id, inputs: Array2::zeros((n, 2)), labels: vec![class_id; n] }
    }

    #[test]
    fn tie_break_lowest_id() {
        assert_eq!(argmax([0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax([1.0, 3.0, 3.0]), 1);
        let (a, b) = (batch(0, 0, 4), batch(1, 0, 4));
        let row = evaluate_classes(&mut Constant(0), &[&a, &b], &[0, 1], 1).unwrap();
        let accs: Vec<f64> = row.scores.iter().map(|s| s.accuracy().unwrap()).collect();
        assert_eq!(accs, vec![1.0, 0.0]);
        assert_eq!(accs.iter().sum::<f64>() / 2.0, 0.5);
    }

    #[test]
    fn pooled_views_and_masking() {
        let (a0, a1) = (batch(3, 0, 2), batch(3, 1, 6));
        let row = evaluate_classes(&mut Constant(3), &[&a0, &a1], &[3, 4], 1).unwrap();
        assert_eq!(row.scores[0].total, 8);
        assert_eq!(row.scores[1].accuracy(), None);
        let again = evaluate_classes(&mut Constant(3), &[&a0, &a1], &[3, 4], 1).unwrap();
        assert_eq!(row, again);
    }

    #[test]
    fn familiar_guard_and_chance_gap() {
        assert!(matches!(familiar_view_eval(&mut Constant(0), &[], &[0], 0.5), Err(EvalError::EmptyHeldout)));
        let (a, b) = (batch(0, 1, 4), batch(1, 1, 4));
        let rep = familiar_view_eval(&mut Constant(0), &[&a, &b], &[0, 1], 0.5).unwrap();
        assert_eq!(rep.heldout_accuracy, 0.5);
        assert_eq!(rep.gap, 0.0);
    }
}
