//! Cross-fold averaging of probability outputs and final mask/label output.

use std::path::{Path, PathBuf};

use crate::augment::MaskRaster;
use crate::error::{Error, Result};
use crate::metrics::{binarize, ProbMap};

/// Class order of classification outputs.
pub const CLASS_NAMES: [&str; 3] = ["melanoma", "seborrheic_keratosis", "nevus"];

const ROW_SUM_TOL: f64 = 1e-9;

/// Mean of `values` that does not depend on their order and never leaves
/// `[min, max]`: summed in sorted order, then clamped.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    mean.clamp(values[0], values[values.len() - 1])
}

/// Elementwise mean of equally sized probability maps.
pub fn average_prob_maps(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("no probability maps to average"))?;
    for (i, m) in maps.iter().enumerate() {
        if (m.height, m.width) != (first.height, first.width) || m.values.len() != first.values.len() {
            return Err(Error::shape(format!(
                "map {i} is {}x{}, expected {}x{}",
                m.height, m.width, first.height, first.width
            )));
        }
        if let Some(v) = m.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("map {i} holds {v}, outside [0, 1]")));
        }
    }
    let mut column = vec![0.0; maps.len()];
    let values = (0..first.values.len())
        .map(|p| {
            for (c, m) in column.iter_mut().zip(maps) {
                *c = m.values[p];
            }
            stable_mean(&mut column)
        })
        .collect();
    ProbMap::new(first.height, first.width, values)
}

/// Elementwise mean of per-class distributions; every row must sum to 1.
pub fn average_class_probs(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = rows.first().ok_or_else(|| Error::invalid("no probability rows to average"))?.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(Error::shape(format!("row {i} has {} classes, expected {k}", r.len())));
        }
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || r.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::invalid(format!("row {i} is not a distribution (sum {s})")));
        }
    }
    let mut column = vec![0.0; rows.len()];
    Ok((0..k)
        .map(|c| {
            for (slot, r) in column.iter_mut().zip(rows) {
                *slot = r[c];
            }
            stable_mean(&mut column)
        })
        .collect())
}

/// Averages one map per fold and thresholds the result. `maps` pairs each
/// map with its fold index; every fold in `0..folds` must appear once.
pub fn finalize_segmentation(maps: &[(usize, ProbMap)], folds: usize, threshold: f64) -> Result<(MaskRaster, ProbMap)> {
    let mut seen = vec![false; folds];
    for (f, _) in maps {
        match seen.get_mut(*f) {
            None => {
                return Err(Error::Fold {
                    fold: *f,
                    message: format!("outside the {folds} trained folds"),
                })
            }
            Some(true) => {
                return Err(Error::Fold {
                    fold: *f,
                    message: "more than one output".into(),
                })
            }
            Some(s) => *s = true,
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Fold {
            fold: missing,
            message: "missing output".into(),
        });
    }
    let plain: Vec<ProbMap> = maps.iter().map(|(_, m)| m.clone()).collect();
    let avg = average_prob_maps(&plain)?;
    Ok((binarize(&avg, threshold), avg))
}

pub fn segmentation_mask_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}_segmentation.png"))
}

/// `image_id,melanoma_prob,sk_prob`.
pub fn write_classification_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["image_id", "melanoma_prob", "sk_prob"])?;
    for (id, p) in rows {
        // two-class models score melanoma against the rest, so there is no sk column value
        let sk = if p.len() >= 3 { format!("{:?}", p[1]) } else { String::new() };
        w.write_record([id.clone(), format!("{:?}", p[0]), sk])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `image_id,probability` with the melanoma probability.
pub fn write_predictions_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["image_id", "probability"])?;
    for (id, p) in rows {
        w.write_record([id.clone(), format!("{:?}", p[0])])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}
