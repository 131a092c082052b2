//! Jaccard index, ROC AUC, probability-map binarization and best-epoch
//! selection.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::MaskRaster;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pixel foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || values.is_empty() {
            return Err(Error::shape(format!(
                "probability map {height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        Ok(ProbMap { height, width, values })
    }

    pub fn constant(height: usize, width: usize, v: f64) -> Self {
        ProbMap {
            height,
            width,
            values: vec![v; height * width],
        }
    }
}

/// `|pred ∩ truth| / |pred ∪ truth|`; two empty masks score 1.
pub fn jaccard(pred: &MaskRaster, truth: &MaskRaster) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape(format!(
            "jaccard of {}x{} and {}x{} masks",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.values().iter().zip(truth.values()) {
        inter += usize::from(p != 0 && t != 0);
        union += usize::from(p != 0 || t != 0);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground where `p >= threshold`.
pub fn binarize(map: &ProbMap, threshold: f64) -> MaskRaster {
    let values = map.values.iter().map(|&p| u8::from(p >= threshold)).collect();
    MaskRaster::new(map.height, map.width, values).expect("map dimensions already validated")
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, with
/// average ranks for tied scores.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("labels must be 0 or 1, found {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc needs both positive and negative labels"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg_rank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub metric: f64,
    pub checkpoint: PathBuf,
}

/// Per-epoch validation metrics with strictly increasing epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricHistory {
    records: Vec<MetricRecord>,
}

impl MetricHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::invalid(format!(
                    "epoch {} does not follow epoch {}",
                    record.epoch, last.epoch
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "metric", "checkpoint"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                format!("{:?}", r.metric),
                r.checkpoint.display().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut h = MetricHistory::new();
        for rec in rd.deserialize() {
            h.push(rec?)?;
        }
        Ok(h)
    }
}

/// Record with the largest metric; ties go to the earliest epoch.
pub fn select_best_epoch(history: &MetricHistory) -> Result<&MetricRecord> {
    let mut best: Option<&MetricRecord> = None;
    for r in history.records() {
        if best.is_none_or(|b| r.metric > b.metric) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::invalid("metric history is empty"))
}
