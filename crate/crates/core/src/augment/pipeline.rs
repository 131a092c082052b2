use rand::Rng;
use serde::{Deserialize, Serialize};

use super::elastic::{apply_field, elastic_field, DisplacementField, ElasticParams};
use super::{center_crop_square, flip, rot90, zoom, FlipAxis, MaskRaster, Raster, Resample};
use crate::error::{Error, Result};

/// Side of segmentation training inputs.
pub const SEGMENTATION_SIZE: usize = 192;
/// Side classification images are resized to before random cropping.
pub const CLASSIFICATION_RESIZE: usize = 256;

/// One offline-expanded segmentation example with the parameters that made it.
#[derive(Clone, Debug)]
pub struct ExpandedPair {
    pub image: Raster,
    pub mask: MaskRaster,
    /// Elastic field applied at source resolution, after any rotation.
    pub field: Option<DisplacementField>,
    pub rotated: bool,
}

impl ExpandedPair {
    /// Re-derives this pair's mask from the source mask alone.
    pub fn replay_mask(&self, source: &MaskRaster) -> Result<MaskRaster> {
        let mut m = if self.rotated { rot90(source, 1) } else { source.clone() };
        if let Some(f) = &self.field {
            m = apply_field(&m, f)?;
        }
        m.resized(self.mask.height(), self.mask.width())
    }
}

/// Resizes an original image/mask pair to the training side.
pub fn prepare_segmentation_original(img: &Raster, mask: &MaskRaster, out_size: usize) -> Result<(Raster, MaskRaster)> {
    check_pair(img, mask)?;
    Ok((img.resized(out_size, out_size)?, mask.resized(out_size, out_size)?))
}

fn check_pair(img: &Raster, mask: &MaskRaster) -> Result<()> {
    if (img.height(), img.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(format!(
            "image {}x{} and mask {}x{} differ",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Nine extra examples per original: four elastic warps of the original, the
/// 90° rotation, and four elastic warps of the rotation. Fields use the
/// default parameters for the source size.
pub fn offline_expand_segmentation<R: Rng + ?Sized>(
    img: &Raster,
    mask: &MaskRaster,
    out_size: usize,
    rng: &mut R,
) -> Result<Vec<ExpandedPair>> {
    check_pair(img, mask)?;
    let rotated_img = rot90(img, 1);
    let rotated_mask = rot90(mask, 1);
    let mut out = Vec::with_capacity(9);
    for (rotated, base_img, base_mask) in [(false, img, mask), (true, &rotated_img, &rotated_mask)] {
        if rotated {
            out.push(ExpandedPair {
                image: base_img.resized(out_size, out_size)?,
                mask: base_mask.resized(out_size, out_size)?,
                field: None,
                rotated,
            });
        }
        let (h, w) = (base_img.height(), base_img.width());
        let p = ElasticParams::default_for(h, w);
        for _ in 0..4 {
            let field = elastic_field(h, w, p.sigma, p.alpha, rng)?;
            let warped_img = apply_field(base_img, &field)?;
            let warped_mask = apply_field(base_mask, &field)?;
            out.push(ExpandedPair {
                image: warped_img.resized(out_size, out_size)?,
                mask: warped_mask.resized(out_size, out_size)?,
                field: Some(field),
                rotated,
            });
        }
    }
    Ok(out)
}

/// Square-crops an original classification image and resizes it.
pub fn prepare_classification_original(img: &Raster, out_size: usize) -> Result<Raster> {
    center_crop_square(img).resized(out_size, out_size)
}

/// The 90° and 270° rotations of the square-cropped image, each resized.
pub fn offline_expand_classification(img: &Raster, out_size: usize) -> Result<Vec<Raster>> {
    let sq = center_crop_square(img);
    [1, 3].iter().map(|&k| rot90(&sq, k).resized(out_size, out_size)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeAugmentParams {
    pub flip_prob: f64,
    /// Allowed rotations in degrees; each a multiple of 90.
    pub rotation_choices: Vec<u32>,
    pub zoom_range: (f64, f64),
}

impl Default for RuntimeAugmentParams {
    fn default() -> Self {
        RuntimeAugmentParams {
            flip_prob: 0.5,
            rotation_choices: vec![0, 90, 180, 270],
            zoom_range: (0.9, 1.1),
        }
    }
}

impl RuntimeAugmentParams {
    pub fn identity() -> Self {
        RuntimeAugmentParams {
            flip_prob: 0.0,
            rotation_choices: vec![0],
            zoom_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if self.rotation_choices.is_empty() || self.rotation_choices.iter().any(|d| d % 90 != 0) {
            return Err(Error::invalid("rotation choices must be a non-empty set of multiples of 90"));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!("zoom range [{lo}, {hi}] must satisfy 0 < lo <= 1 <= hi")));
        }
        Ok(())
    }
}

/// Sampled runtime transform, replayable on any image or mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeSample {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub quarter_turns: i32,
    pub zoom: f64,
}

impl RuntimeSample {
    /// Draws horizontal flip, vertical flip, rotation and zoom, in that order.
    pub fn draw<R: Rng + ?Sized>(params: &RuntimeAugmentParams, rng: &mut R) -> Result<Self> {
        params.validate()?;
        let flip_horizontal = rng.random_bool(params.flip_prob);
        let flip_vertical = rng.random_bool(params.flip_prob);
        let deg = params.rotation_choices[rng.random_range(0..params.rotation_choices.len())];
        let (lo, hi) = params.zoom_range;
        let zoom = lo + (hi - lo) * rng.random::<f64>();
        Ok(RuntimeSample {
            flip_horizontal,
            flip_vertical,
            quarter_turns: ((deg / 90) % 4) as i32,
            zoom,
        })
    }

    /// Flip, then rotate, then zoom.
    pub fn apply<G: Resample>(&self, img: &G) -> Result<G> {
        let mut out = img.clone();
        if self.flip_horizontal {
            out = flip(&out, FlipAxis::Horizontal);
        }
        if self.flip_vertical {
            out = flip(&out, FlipAxis::Vertical);
        }
        if self.quarter_turns != 0 {
            out = rot90(&out, self.quarter_turns);
        }
        zoom(&out, self.zoom)
    }
}

pub fn runtime_transform<R: Rng + ?Sized>(
    img: &Raster,
    mask: Option<&MaskRaster>,
    params: &RuntimeAugmentParams,
    rng: &mut R,
) -> Result<(Raster, Option<MaskRaster>, RuntimeSample)> {
    if let Some(m) = mask {
        check_pair(img, m)?;
    }
    let sample = RuntimeSample::draw(params, rng)?;
    let out = sample.apply(img)?;
    let mask = mask.map(|m| sample.apply(m)).transpose()?;
    Ok((out, mask, sample))
}
