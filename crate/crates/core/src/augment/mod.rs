//! Image and mask geometry: resampling, crops, lossless rotations and
//! flips, zoom, elastic warps, and the offline/runtime augmentation
//! pipelines built on them.

mod elastic;
mod pipeline;

use rand::Rng;

use crate::error::{Error, Result};

pub use elastic::{apply_field, elastic_field, DisplacementField, ElasticParams};
pub use pipeline::{
    offline_expand_classification, offline_expand_segmentation, prepare_classification_original,
    prepare_segmentation_original, runtime_transform, ExpandedPair, RuntimeAugmentParams, RuntimeSample,
    CLASSIFICATION_RESIZE, SEGMENTATION_SIZE,
};

/// Decoded 8-bit image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::invalid(format!("rasters have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || pixels.len() != height * width * channels {
            return Err(Error::shape(format!(
                "raster {height}x{width}x{channels} cannot hold {} samples",
                pixels.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.pixels[i..i + self.channels]
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }
}

/// Binary mask; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRaster {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl MaskRaster {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(MaskRaster { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let values = (0..height * width).map(|i| u8::from(f(i / width, i % width))).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] != 0
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground() as f64 / self.values.len() as f64
    }
}

/// Row-major sample grid shared by images and masks.
pub trait Grid: Sized {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn channels(&self) -> usize;
    fn samples(&self) -> &[u8];
    /// Rebuilds a grid of the same kind with new dimensions.
    fn with_samples(&self, height: usize, width: usize, samples: Vec<u8>) -> Self;
}

impl Grid for Raster {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn channels(&self) -> usize {
        self.channels
    }
    fn samples(&self) -> &[u8] {
        &self.pixels
    }
    fn with_samples(&self, height: usize, width: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(pixels.len(), height * width * self.channels);
        Raster {
            height,
            width,
            channels: self.channels,
            pixels,
        }
    }
}

impl Grid for MaskRaster {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    fn channels(&self) -> usize {
        1
    }
    fn samples(&self) -> &[u8] {
        &self.values
    }
    fn with_samples(&self, height: usize, width: usize, values: Vec<u8>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        MaskRaster {
            height,
            width,
            values: values.into_iter().map(|v| u8::from(v != 0)).collect(),
        }
    }
}

/// Interpolating resampler: bilinear for images, nearest for masks.
pub trait Resample: Grid + Clone {
    fn resized(&self, out_h: usize, out_w: usize) -> Result<Self>;
    /// Value at fractional source position `(y, x)`, border-clamped.
    fn sample_at(&self, y: f64, x: f64, out: &mut Vec<u8>);
}

impl Resample for Raster {
    fn resized(&self, out_h: usize, out_w: usize) -> Result<Self> {
        resize_bilinear(self, out_h, out_w)
    }

    fn sample_at(&self, y: f64, x: f64, out: &mut Vec<u8>) {
        for c in 0..self.channels {
            out.push(round_u8(bilinear(self, y, x, c)));
        }
    }
}

impl Resample for MaskRaster {
    fn resized(&self, out_h: usize, out_w: usize) -> Result<Self> {
        resize_mask_nearest(self, out_h, out_w)
    }

    fn sample_at(&self, y: f64, x: f64, out: &mut Vec<u8>) {
        let yi = nearest_index(y, self.height);
        let xi = nearest_index(x, self.width);
        out.push(u8::from(self.values[yi * self.width + xi] != 0));
    }
}

/// Round-half-up after clamping to the 8-bit range.
pub fn round_u8(v: f64) -> u8 {
    (v.clamp(0.0, 255.0) + 0.5).floor() as u8
}

fn nearest_index(pos: f64, len: usize) -> usize {
    let i = (pos + 0.5).floor();
    if i <= 0.0 {
        0
    } else {
        (i as usize).min(len - 1)
    }
}

/// Bilinear sample of channel `c` at `(y, x)`, clamped to the border.
fn bilinear(img: &Raster, y: f64, x: f64, c: usize) -> f64 {
    let y = y.clamp(0.0, (img.height - 1) as f64);
    let x = x.clamp(0.0, (img.width - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height - 1), (x0 + 1).min(img.width - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| f64::from(img.get(yy, xx, c));
    let top = (1.0 - fx) * v(y0, x0) + fx * v(y0, x1);
    let bottom = (1.0 - fx) * v(y1, x0) + fx * v(y1, x1);
    (1.0 - fy) * top + fy * bottom
}

/// Source coordinate of output index `dst` under pixel-center alignment.
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

fn check_out_dims(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("cannot resize to {out_h}x{out_w}")));
    }
    Ok(())
}

pub fn resize_bilinear(img: &Raster, out_h: usize, out_w: usize) -> Result<Raster> {
    check_out_dims(out_h, out_w)?;
    if (out_h, out_w) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let mut pixels = Vec::with_capacity(out_h * out_w * img.channels);
    for oy in 0..out_h {
        let sy = source_coord(oy, img.height, out_h);
        for ox in 0..out_w {
            let sx = source_coord(ox, img.width, out_w);
            img.sample_at(sy, sx, &mut pixels);
        }
    }
    Ok(img.with_samples(out_h, out_w, pixels))
}

pub fn resize_mask_nearest(mask: &MaskRaster, out_h: usize, out_w: usize) -> Result<MaskRaster> {
    check_out_dims(out_h, out_w)?;
    let rows: Vec<usize> = (0..out_h)
        .map(|o| ((o * 2 + 1) * mask.height / (2 * out_h)).min(mask.height - 1))
        .collect();
    let cols: Vec<usize> = (0..out_w)
        .map(|o| ((o * 2 + 1) * mask.width / (2 * out_w)).min(mask.width - 1))
        .collect();
    let values = rows
        .iter()
        .flat_map(|&y| cols.iter().map(move |&x| mask.values[y * mask.width + x]))
        .collect();
    Ok(mask.with_samples(out_h, out_w, values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

pub fn crop<G: Grid>(img: &G, win: CropWindow) -> Result<G> {
    if win.width == 0 || win.height == 0 || win.x + win.width > img.width() || win.y + win.height > img.height() {
        return Err(Error::invalid(format!(
            "crop {win:?} outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let c = img.channels();
    let src = img.samples();
    let mut out = Vec::with_capacity(win.width * win.height * c);
    for y in win.y..win.y + win.height {
        let start = (y * img.width() + win.x) * c;
        out.extend_from_slice(&src[start..start + win.width * c]);
    }
    Ok(img.with_samples(win.height, win.width, out))
}

/// Crops the long axis to the short one. Odd trims drop the extra pixel
/// from the bottom/right.
pub fn center_crop_square<G: Grid>(img: &G) -> G {
    let s = img.height().min(img.width());
    let win = CropWindow {
        x: (img.width() - s) / 2,
        y: (img.height() - s) / 2,
        width: s,
        height: s,
    };
    crop(img, win).expect("square window fits")
}

/// Counterclockwise rotation by `90·quarter_turns` degrees.
pub fn rot90<G: Grid>(img: &G, quarter_turns: i32) -> G {
    let k = quarter_turns.rem_euclid(4);
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if k == 0 {
        return img.with_samples(h, w, img.samples().to_vec());
    }
    let src = img.samples();
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = vec![0u8; src.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let (sy, sx) = match k {
                1 => (ox, w - 1 - oy),
                2 => (h - 1 - oy, w - 1 - ox),
                _ => (h - 1 - ox, oy),
            };
            let (di, si) = ((oy * ow + ox) * c, (sy * w + sx) * c);
            out[di..di + c].copy_from_slice(&src[si..si + c]);
        }
    }
    img.with_samples(oh, ow, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
}

pub fn flip<G: Grid>(img: &G, axis: FlipAxis) -> G {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let src = img.samples();
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = match axis {
                FlipAxis::Horizontal => (y, w - 1 - x),
                FlipAxis::Vertical => (h - 1 - y, x),
            };
            let (di, si) = ((y * w + x) * c, (sy * w + sx) * c);
            out[di..di + c].copy_from_slice(&src[si..si + c]);
        }
    }
    img.with_samples(h, w, out)
}

fn pad_edge<G: Grid>(img: &G, out_h: usize, out_w: usize) -> G {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (oy, ox) = ((out_h - h) / 2, (out_w - w) / 2);
    let src = img.samples();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = y.saturating_sub(oy).min(h - 1);
        for x in 0..out_w {
            let sx = x.saturating_sub(ox).min(w - 1);
            let si = (sy * w + sx) * c;
            out.extend_from_slice(&src[si..si + c]);
        }
    }
    img.with_samples(out_h, out_w, out)
}

/// Zoom in (`factor > 1`: center crop of `1/factor` then resize back) or out
/// (`factor < 1`: shrink then pad back with edge replication).
pub fn zoom<G: Resample>(img: &G, factor: f64) -> Result<G> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("zoom factor must be positive, got {factor}")));
    }
    let (h, w) = (img.height(), img.width());
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let scaled = |len: usize, f: f64| ((len as f64 * f).round() as usize).clamp(1, len);
    if factor > 1.0 {
        let (ch, cw) = (scaled(h, 1.0 / factor), scaled(w, 1.0 / factor));
        let win = CropWindow {
            x: (w - cw) / 2,
            y: (h - ch) / 2,
            width: cw,
            height: ch,
        };
        crop(img, win)?.resized(h, w)
    } else {
        let small = img.resized(scaled(h, factor), scaled(w, factor))?;
        Ok(pad_edge(&small, h, w))
    }
}

/// Zooms an image and, when given, its mask with the same factor.
pub fn zoom_pair(img: &Raster, mask: Option<&MaskRaster>, factor: f64) -> Result<(Raster, Option<MaskRaster>)> {
    let out = zoom(img, factor)?;
    let mask = mask.map(|m| zoom(m, factor)).transpose()?;
    Ok((out, mask))
}

/// Uniformly placed crop window; `x` is drawn before `y`.
pub fn random_crop_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    rng: &mut R,
) -> Result<CropWindow> {
    if out_h == 0 || out_w == 0 || out_h > height || out_w > width {
        return Err(Error::invalid(format!(
            "cannot take a {out_h}x{out_w} crop from a {height}x{width} image"
        )));
    }
    let x = rng.random_range(0..=width - out_w);
    let y = rng.random_range(0..=height - out_h);
    Ok(CropWindow {
        x,
        y,
        width: out_w,
        height: out_h,
    })
}

pub fn random_crop<R: Rng + ?Sized>(img: &Raster, out_h: usize, out_w: usize, rng: &mut R) -> Result<Raster> {
    let win = random_crop_window(img.height, img.width, out_h, out_w, rng)?;
    crop(img, win)
}
