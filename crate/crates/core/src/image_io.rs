//! PNG reading and writing for rasters and masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::augment::{MaskRaster, Raster};
use crate::error::{Error, Result};

/// Loads an 8-bit PNG. Grayscale stays single-channel; everything else
/// becomes RGB (alpha is dropped).
pub fn load_raster(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| with_path(path, e))?;
    match img {
        DynamicImage::ImageLuma8(g) => Raster::new(g.height() as usize, g.width() as usize, 1, g.into_raw()),
        other => {
            let rgb = other.to_rgb8();
            Raster::new(rgb.height() as usize, rgb.width() as usize, 3, rgb.into_raw())
        }
    }
}

pub fn save_raster(img: &Raster, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let raw = img.pixels().to_vec();
    let res = if img.channels() == 1 {
        GrayImage::from_raw(w, h, raw).map(|b| b.save(path))
    } else {
        RgbImage::from_raw(w, h, raw).map(|b| b.save(path))
    };
    res.expect("raster buffer matches its dimensions")
        .map_err(|e| with_path(path, e))
}

/// Loads a mask PNG; any sample above 127 (first channel) is foreground.
pub fn load_mask(path: &Path) -> Result<MaskRaster> {
    let g = image::open(path).map_err(|e| with_path(path, e))?.to_luma8();
    let values = g.as_raw().iter().map(|&v| u8::from(v > 127)).collect();
    MaskRaster::new(g.height() as usize, g.width() as usize, values)
}

/// Writes a mask as a single-channel PNG with values {0, 255}.
pub fn save_mask(mask: &MaskRaster, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let raw: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    let buf: GrayImage = ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("mask buffer matches its dimensions");
    buf.save(path).map_err(|e| with_path(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn with_path(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
