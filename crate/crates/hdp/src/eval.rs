//! ACC/AUC computation, the stage-by-task evaluation matrix, and the derived
//! continual-learning summaries.
//!
//! AVG is the final model's mean metric over all tasks. PRE averages, over
//! stages t = 2..T, the mean metric on tasks seen before t; the final-row
//! variant (mean of the last row excluding the last task) is also reported.

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::synthdata::{Image, StageDataset};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Classification accuracy in percent.
pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: labels.len(),
        });
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

/// Rank-based (Mann-Whitney) AUC in percent: P(score_fake > score_real) plus
/// half credit for ties. Exact, and equal to the area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));

    // midranks over tie groups; rank sum of the positive class
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(100.0 * u / (n_pos as f64 * n_neg as f64))
}

/// Scores and evaluates a model on one stage's test split, returning
/// (ACC, AUC) in percent. Scores are P(fake); order is reals then fakes.
pub fn evaluate_model(m: &Detector, stage: &StageDataset) -> Result<(f64, f64)> {
    let images: Vec<Image> = stage
        .test_real
        .iter()
        .chain(stage.test_fake.iter())
        .map(|s| s.image.clone())
        .collect();
    let labels: Vec<u8> = stage
        .test_real
        .iter()
        .chain(stage.test_fake.iter())
        .map(|s| s.label)
        .collect();
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let probs = m.forward_prob(&images)?;
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let scores: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    Ok((accuracy(&preds, &labels)?, auc(&scores, &labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    Acc,
    Auc,
}

/// Stage-by-task matrix: `rows[t-1][j-1]` is the metric of the model after
/// stage t on task j's test set. All tasks are evaluated at every stage for
/// diagnostics; the summaries only consume j <= t entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub kind: MetricKind,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(kind: MetricKind, tasks: usize) -> EvalMatrix {
        EvalMatrix {
            kind,
            rows: Vec::with_capacity(tasks),
        }
    }

    pub fn push_row(&mut self, row: Vec<Option<f64>>) {
        self.rows.push(row);
    }

    pub fn tasks(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows
            .get(stage - 1)
            .and_then(|r| r.get(task - 1))
            .copied()
            .flatten()
    }
}

/// Mean of the final row over all tasks.
pub fn avg_metric(m: &EvalMatrix) -> Result<f64> {
    let last = m
        .rows
        .last()
        .ok_or_else(|| Error::IncompleteMatrix("matrix has no rows".into()))?;
    let tasks = last.len();
    if tasks == 0 {
        return Err(Error::IncompleteMatrix("matrix has no tasks".into()));
    }
    let mut sum = 0.0;
    for (j, v) in last.iter().enumerate() {
        sum += v.ok_or_else(|| {
            Error::IncompleteMatrix(format!("final row missing task {}", j + 1))
        })?;
    }
    Ok(sum / tasks as f64)
}

/// Stage-averaged performance on previously seen tasks:
/// PRE = (1/(T-1)) * sum over t = 2..T of mean over j < t of R[t][j].
pub fn pre_metric(m: &EvalMatrix) -> Result<f64> {
    let t_total = m.rows.len();
    if t_total < 2 {
        return Err(Error::IncompleteMatrix("PRE needs at least 2 stages".into()));
    }
    let mut outer = 0.0;
    for t in 2..=t_total {
        let row = &m.rows[t - 1];
        let mut inner = 0.0;
        for j in 1..t {
            inner += row
                .get(j - 1)
                .copied()
                .flatten()
                .ok_or_else(|| {
                    Error::IncompleteMatrix(format!("missing entry R[{t}][{j}]"))
                })?;
        }
        outer += inner / (t - 1) as f64;
    }
    Ok(outer / (t_total - 1) as f64)
}

/// Final-row variant: mean of the last model's metric over tasks 1..T-1.
pub fn pre_final_metric(m: &EvalMatrix) -> Result<f64> {
    let t_total = m.rows.len();
    if t_total < 2 {
        return Err(Error::IncompleteMatrix("PRE needs at least 2 stages".into()));
    }
    let last = &m.rows[t_total - 1];
    let mut sum = 0.0;
    for j in 1..t_total {
        sum += last
            .get(j - 1)
            .copied()
            .flatten()
            .ok_or_else(|| Error::IncompleteMatrix(format!("missing entry R[T][{j}]")))?;
    }
    Ok(sum / (t_total - 1) as f64)
}

/// Run summary the CLI serializes as `report.json`. Wall-clock seconds are
/// the only nondeterministic fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub method: String,
    pub seed: u64,
    pub beta: f64,
    pub epochs: usize,
    pub config_hash: String,
    pub matrix_acc: EvalMatrix,
    pub matrix_auc: EvalMatrix,
    pub avg_acc: f64,
    pub avg_auc: f64,
    pub pre_acc: Option<f64>,
    pub pre_auc: Option<f64>,
    pub pre_final_acc: Option<f64>,
    pub pre_final_auc: Option<f64>,
    pub per_stage_seconds: Vec<f64>,
}

impl MetricsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MetricsReport> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Recomputes AVG/PRE from the stored matrices; must equal the stored
    /// summaries exactly.
    pub fn recompute_summaries(&self) -> Result<(f64, f64, Option<f64>, Option<f64>)> {
        let avg_acc = avg_metric(&self.matrix_acc)?;
        let avg_auc = avg_metric(&self.matrix_auc)?;
        let pre_acc = pre_metric(&self.matrix_acc).ok();
        let pre_auc = pre_metric(&self.matrix_auc).ok();
        Ok((avg_acc, avg_auc, pre_acc, pre_auc))
    }
}

/// Kind tag for feature dumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Real,
    Fake,
    Pseudo,
}

impl DumpKind {
    pub fn name(&self) -> &'static str {
        match self {
            DumpKind::Real => "real",
            DumpKind::Fake => "fake",
            DumpKind::Pseudo => "pseudo",
        }
    }
}

pub struct FeatureDumpItem {
    pub sample_id: usize,
    pub stage_id: u32,
    pub kind: DumpKind,
    pub image: Image,
}

/// Writes a CSV of extracted features: sample_id, stage_id, kind, then the d
/// feature columns.
pub fn feature_dump(m: &Detector, items: &[FeatureDumpItem], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "sample_id,stage_id,kind")?;
    for i in 0..m.meta.feat_dim {
        write!(f, ",f{i}")?;
    }
    writeln!(f)?;
    for item in items {
        let feats = m.features(std::slice::from_ref(&item.image))?;
        write!(f, "{},{},{}", item.sample_id, item.stage_id, item.kind.name())?;
        for v in &feats[0] {
            // shortest round-trip representation keeps re-reads exact
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// Parses a feature-dump CSV back into (sample_id, stage_id, kind, features).
pub fn read_feature_dump(path: &Path) -> Result<Vec<(usize, u32, String, Vec<f32>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptFile("empty feature dump".into()))?;
    if !header.starts_with("sample_id,stage_id,kind") {
        return Err(Error::CorruptFile("bad feature dump header".into()));
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let sample_id: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptFile("bad sample_id".into()))?;
        let stage_id: u32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::CorruptFile("bad stage_id".into()))?;
        let kind = parts
            .next()
            .ok_or_else(|| Error::CorruptFile("missing kind".into()))?
            .to_string();
        let feats: Vec<f32> = parts
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::CorruptFile("bad feature value".into()))?;
        rows.push((sample_id, stage_id, kind, feats));
    }
    Ok(rows)
}
