use std::path::Path;

use rayon::prelude::*;

use super::config::TrainConfig;
use crate::augment::{
    center_crop_square, crop, offline_expand_classification, offline_expand_segmentation,
    prepare_classification_original, prepare_segmentation_original, CropWindow, MaskRaster, Raster, Resample,
};
use crate::data::{FoldAssignment, ManifestEntry, Task};
use crate::error::{Error, Result};
use crate::rng::{derived, hash_str};

const EXPAND_STREAM: u64 = 0xE7A1;

/// One training-ready item at model (segmentation) or pre-crop
/// (classification) resolution.
#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub item_id: String,
    pub group_id: String,
    pub is_derived: bool,
    pub image: Raster,
    pub mask: Option<MaskRaster>,
    pub label: Option<usize>,
}

/// Decoded, resized and optionally expanded dataset shared by all folds.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub task: Task,
    pub items: Vec<CorpusItem>,
}

impl Corpus {
    /// Loads every manifest item from disk, relative to `base`.
    pub fn load(cfg: &TrainConfig, entries: &[ManifestEntry], base: &Path) -> Result<Self> {
        let raw = entries
            .par_iter()
            .map(|e| {
                let image = e.load_image(base)?;
                let mask = match cfg.task {
                    Task::Segmentation => Some(e.load_mask(base)?),
                    Task::Classification => None,
                };
                Ok((e.clone(), image, mask))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_raw(cfg, raw)
    }

    /// Builds the corpus from already decoded items.
    pub fn from_raw(cfg: &TrainConfig, raw: Vec<(ManifestEntry, Raster, Option<MaskRaster>)>) -> Result<Self> {
        let per_item = raw
            .into_par_iter()
            .map(|(e, img, mask)| prepare_item(cfg, e, img, mask))
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            task: cfg.task,
            items: per_item.into_iter().flatten().collect(),
        })
    }

    /// Indices of training items (all outside `fold`) and validation
    /// originals (inside `fold`).
    pub fn split(&self, assignment: &FoldAssignment, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, it) in self.items.iter().enumerate() {
            let f = assignment
                .fold_of(&it.group_id)
                .ok_or_else(|| Error::invalid(format!("group `{}` has no fold", it.group_id)))?;
            if f != fold {
                train.push(i);
            } else if !it.is_derived {
                val.push(i);
            }
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Fold {
                fold,
                message: format!("{} training and {} validation items", train.len(), val.len()),
            });
        }
        Ok((train, val))
    }
}

fn prepare_item(
    cfg: &TrainConfig,
    e: ManifestEntry,
    img: Raster,
    mask: Option<MaskRaster>,
) -> Result<Vec<CorpusItem>> {
    let mut rng = derived(cfg.seed, &[EXPAND_STREAM, hash_str(&e.item_id)]);
    let expand = cfg.offline_expand && !e.is_derived;
    let mut out = Vec::new();
    match cfg.task {
        Task::Segmentation => {
            let mask = mask.ok_or_else(|| Error::invalid(format!("item `{}` has no mask", e.item_id)))?;
            let s = cfg.input_size();
            let (image, m) = prepare_segmentation_original(&img, &mask, s)?;
            out.push(item(&e, &e.item_id, e.is_derived, image, Some(m)));
            if expand {
                for (k, p) in offline_expand_segmentation(&img, &mask, s, &mut rng)?.into_iter().enumerate() {
                    out.push(item(&e, &format!("{}_aug{k}", e.item_id), true, p.image, Some(p.mask)));
                }
            }
        }
        Task::Classification => {
            if e.label.is_none() {
                return Err(Error::invalid(format!("item `{}` has no label", e.item_id)));
            }
            let side = cfg.resize_side();
            out.push(item(&e, &e.item_id, e.is_derived, prepare_classification_original(&img, side)?, None));
            if expand {
                for (k, r) in offline_expand_classification(&img, side)?.into_iter().enumerate() {
                    out.push(item(&e, &format!("{}_rot{}", e.item_id, 90 + 180 * k), true, r, None));
                }
            }
        }
    }
    Ok(out)
}

fn item(e: &ManifestEntry, id: &str, is_derived: bool, image: Raster, mask: Option<MaskRaster>) -> CorpusItem {
    CorpusItem {
        item_id: id.to_string(),
        group_id: e.group_id.clone(),
        is_derived,
        image,
        mask,
        label: e.label,
    }
}

/// Deterministic classification view: center square, resize, center crop.
pub fn classification_eval_view(img: &Raster, input_size: usize) -> Result<Raster> {
    let side = super::config::resize_side_for(input_size);
    let sq = center_crop_square(img);
    let resized = if sq.height() == side { sq } else { sq.resized(side, side)? };
    center_crop(&resized, input_size)
}

pub(crate) fn center_crop(img: &Raster, size: usize) -> Result<Raster> {
    if img.height() < size || img.width() < size {
        return Err(Error::invalid(format!(
            "cannot center-crop {size} px from {}x{}",
            img.height(),
            img.width()
        )));
    }
    crop(
        img,
        CropWindow {
            x: (img.width() - size) / 2,
            y: (img.height() - size) / 2,
            width: size,
            height: size,
        },
    )
}

/// Segmentation view at model resolution.
pub fn segmentation_eval_view(img: &Raster, input_size: usize) -> Result<Raster> {
    img.resized(input_size, input_size)
}
