use rand::Rng;

use super::Resample;
use crate::error::{Error, Result};

/// Per-pixel displacement in pixels; output `(y, x)` samples the source at
/// `(y + dy, x + dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        DisplacementField {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElasticParams {
    pub sigma: f64,
    pub alpha: f64,
}

impl ElasticParams {
    /// sigma = min(h,w)/20, alpha = min(h,w)/10.
    pub fn default_for(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64;
        ElasticParams {
            sigma: s / 20.0,
            alpha: s / 10.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders.
fn smooth(data: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * data[y * w + clamp(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[clamp(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Random smooth field: uniform noise in [-1,1] per component, Gaussian
/// smoothed, then scaled so the largest displacement has length `alpha`.
pub fn elastic_field<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    sigma: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<DisplacementField> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid("displacement field needs a non-empty grid"));
    }
    let n = height * width;
    let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let dy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let kernel = gaussian_kernel(sigma);
    let mut field = DisplacementField {
        height,
        width,
        dx: smooth(&dx, height, width, &kernel),
        dy: smooth(&dy, height, width, &kernel),
    };
    let peak = field.max_magnitude();
    let scale = if alpha == 0.0 || peak == 0.0 { 0.0 } else { alpha / peak };
    field.dx.iter_mut().chain(field.dy.iter_mut()).for_each(|v| *v *= scale);
    Ok(field)
}

/// Warps an image (bilinear) or mask (nearest) through `field`.
pub fn apply_field<G: Resample>(img: &G, field: &DisplacementField) -> Result<G> {
    let (h, w) = (img.height(), img.width());
    if (field.height, field.width) != (h, w) {
        return Err(Error::shape(format!(
            "field {}x{} does not match image {h}x{w}",
            field.height, field.width
        )));
    }
    let mut out = Vec::with_capacity(img.samples().len());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            img.sample_at(y as f64 + field.dy[i], x as f64 + field.dx[i], &mut out);
        }
    }
    Ok(img.with_samples(h, w, out))
}
