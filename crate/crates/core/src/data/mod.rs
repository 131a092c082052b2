//! Manifests, group-aware fold assignment, balanced batches and pixel
//! weight maps.

mod synth;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{MaskRaster, Raster};
use crate::error::{Error, Result};
use crate::image_io;
use crate::rng::seeded;

pub use synth::{
    generate_items, generate_synthetic_dataset, write_items, LeakInjection, LeakKind, SynthConfig, SynthItem, Task,
};

pub const DEFAULT_FOLDS: usize = 10;
pub const SEGMENTATION_BATCH: usize = 20;
pub const CLASSIFICATION_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub item_id: String,
    pub group_id: String,
    pub image_path: PathBuf,
    #[serde(default)]
    pub mask_path: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub is_derived: bool,
}

impl ManifestEntry {
    pub fn original(item_id: impl Into<String>, image_path: impl Into<PathBuf>) -> Self {
        let item_id = item_id.into();
        ManifestEntry {
            group_id: item_id.clone(),
            item_id,
            image_path: image_path.into(),
            mask_path: None,
            label: None,
            is_derived: false,
        }
    }

    pub fn load_image(&self, base: &Path) -> Result<Raster> {
        image_io::load_raster(&resolve(base, &self.image_path))
    }

    pub fn load_mask(&self, base: &Path) -> Result<MaskRaster> {
        let p = self
            .mask_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("item `{}` has no mask", self.item_id)))?;
        image_io::load_mask(&resolve(base, p))
    }
}

/// Relative manifest paths are taken relative to the manifest's directory.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn validate_manifest(entries: &[ManifestEntry]) -> Result<()> {
    let mut ids = std::collections::HashSet::new();
    for e in entries {
        if !ids.insert(e.item_id.as_str()) {
            return Err(Error::invalid(format!("duplicate item id `{}`", e.item_id)));
        }
        if !e.is_derived && e.group_id != e.item_id {
            return Err(Error::invalid(format!(
                "original `{}` must be its own group, found `{}`",
                e.item_id, e.group_id
            )));
        }
    }
    Ok(())
}

pub fn save_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    write_json(entries, path)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = read_json(path)?;
    validate_manifest(&entries)?;
    Ok(entries)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub stratified: bool,
    pub group_to_fold: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, group_id: &str) -> Option<usize> {
        self.group_to_fold.get(group_id).copied()
    }

    /// Fold of an entry; unknown groups are an error.
    pub fn fold_of_entry(&self, e: &ManifestEntry) -> Result<usize> {
        self.fold_of(&e.group_id)
            .ok_or_else(|| Error::invalid(format!("group `{}` has no fold", e.group_id)))
    }

    /// Training items (every entry outside `fold`) and validation originals
    /// (non-derived entries inside it).
    pub fn partition<'a>(
        &self,
        entries: &'a [ManifestEntry],
        fold: usize,
    ) -> Result<(Vec<&'a ManifestEntry>, Vec<&'a ManifestEntry>)> {
        if fold >= self.k {
            return Err(Error::invalid(format!("fold {fold} outside [0, {})", self.k)));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for e in entries {
            if self.fold_of_entry(e)? != fold {
                train.push(e);
            } else if !e.is_derived {
                val.push(e);
            }
        }
        Ok((train, val))
    }

    pub fn groups_per_fold(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        self.group_to_fold.values().for_each(|&f| counts[f] += 1);
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a: FoldAssignment = read_json(path)?;
        if let Some((g, &f)) = a.group_to_fold.iter().find(|(_, &f)| f >= a.k) {
            return Err(Error::invalid(format!("group `{g}` assigned to fold {f} outside [0, {})", a.k)));
        }
        Ok(a)
    }
}

/// Shuffles groups with `seed` and deals them round-robin over `k` folds.
/// Stratified assignment shuffles and deals each label stratum in label
/// order, continuing the dealing cursor from one stratum to the next.
pub fn assign_folds(entries: &[ManifestEntry], k: usize, stratify: bool, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    let mut group_labels: BTreeMap<&str, Option<usize>> = BTreeMap::new();
    for e in entries {
        match group_labels.get(e.group_id.as_str()) {
            None => {
                group_labels.insert(&e.group_id, e.label);
            }
            Some(&prev) if stratify && prev != e.label => {
                return Err(Error::invalid(format!(
                    "group `{}` mixes labels {prev:?} and {:?}",
                    e.group_id, e.label
                )));
            }
            Some(_) => {}
        }
    }

    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (&g, &label) in &group_labels {
        let key = if stratify {
            label.ok_or_else(|| Error::invalid(format!("group `{g}` has no label to stratify on")))?
        } else {
            0
        };
        strata.entry(key).or_default().push(g);
    }

    let mut rng = seeded(seed);
    let mut group_to_fold = BTreeMap::new();
    let mut cursor = 0;
    for groups in strata.values_mut() {
        groups.shuffle(&mut rng);
        for g in groups.iter() {
            group_to_fold.insert(g.to_string(), cursor % k);
            cursor += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        seed,
        stratified: stratify,
        group_to_fold,
    })
}

/// Positions into `labels` forming one batch with `batch_size / num_classes`
/// items per class, drawn without replacement within the batch.
pub fn balanced_indices<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if num_classes == 0 || batch_size == 0 || batch_size % num_classes != 0 {
        return Err(Error::invalid(format!(
            "batch size {batch_size} is not divisible by {num_classes} classes"
        )));
    }
    let per = batch_size / num_classes;
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} outside {num_classes} classes")))?
            .push(i);
    }
    let mut out = Vec::with_capacity(batch_size);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < per {
            return Err(Error::invalid(format!(
                "class {c} has {} items, batch needs {per}",
                members.len()
            )));
        }
        out.extend(index::sample(rng, members.len(), per).into_iter().map(|j| members[j]));
    }
    Ok(out)
}

/// Item ids for one class-balanced batch; the class count is one past the
/// largest label in the pool.
pub fn balanced_batch<R: Rng + ?Sized>(pool: &[ManifestEntry], batch_size: usize, rng: &mut R) -> Result<Vec<String>> {
    let labels = pool
        .iter()
        .map(|e| e.label.ok_or_else(|| Error::invalid(format!("item `{}` has no label", e.item_id))))
        .collect::<Result<Vec<_>>>()?;
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let idx = balanced_indices(&labels, k, batch_size, rng)?;
    Ok(idx.into_iter().map(|i| pool[i].item_id.clone()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

/// Equalizes total foreground and background weight: `N/(2n⁺)` on
/// foreground, `N/(2n⁻)` on background. Single-class masks weigh 1.
pub fn pixel_weight_map(mask: &MaskRaster) -> WeightMap {
    let n = mask.values().len();
    let pos = mask.foreground();
    let neg = n - pos;
    let weights = if pos == 0 || neg == 0 {
        vec![1.0; n]
    } else {
        let wp = n as f64 / (2.0 * pos as f64);
        let wn = n as f64 / (2.0 * neg as f64);
        mask.values().iter().map(|&v| if v != 0 { wp } else { wn }).collect()
    };
    WeightMap {
        height: mask.height(),
        width: mask.width(),
        weights,
    }
}
