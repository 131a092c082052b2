//! Detectors for label-correlated background artifacts: bright bilateral
//! edges and coloured gauze borders.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Raster;
use crate::data::ManifestEntry;
use crate::error::{Error, Result};

const HUE_BINS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenParams {
    pub strip_frac: f64,
    pub luma_thresh: u8,
    /// Minimum bright fraction in both strips to flag.
    pub bright_trigger: f64,
    pub border_frac: f64,
    pub saturation_cut: f64,
    pub hue_share_cut: f64,
    pub gauze_thresh: f64,
}

impl Default for ScreenParams {
    fn default() -> Self {
        ScreenParams {
            strip_frac: 0.05,
            luma_thresh: 240,
            bright_trigger: 0.6,
            border_frac: 0.12,
            saturation_cut: 0.5,
            hue_share_cut: 0.5,
            gauze_thresh: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub item_id: String,
    pub bright_edge_flag: bool,
    pub bright_edge_score: f64,
    pub gauze_flag: bool,
    pub gauze_score: f64,
    pub suggested_crop: Option<Rect>,
}

impl ScreenReport {
    pub fn flagged(&self) -> bool {
        self.bright_edge_flag || self.gauze_flag
    }
}

/// `round(0.299 R + 0.587 G + 0.114 B)`; single-channel rasters are their own luma.
pub fn luma(px: &[u8]) -> u8 {
    match px {
        [r, g, b, ..] => (0.299 * f64::from(*r) + 0.587 * f64::from(*g) + 0.114 * f64::from(*b))
            .round()
            .min(255.0) as u8,
        [v, ..] => *v,
        [] => 0,
    }
}

/// HSV saturation in [0,1] and hue bin (30° each).
fn sat_hue_bin(px: &[u8]) -> (f64, usize) {
    let [r, g, b] = match px {
        [r, g, b, ..] => [*r, *g, *b].map(f64::from),
        _ => return (0.0, 0),
    };
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if max == 0.0 || delta == 0.0 {
        return (0.0, 0);
    }
    let hue = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let bin = ((hue / (360.0 / HUE_BINS as f64)) as usize).min(HUE_BINS - 1);
    (delta / max, bin)
}

fn check_frac(name: &str, f: f64) -> Result<()> {
    if !(f > 0.0 && f < 0.5) {
        return Err(Error::invalid(format!("{name} {f} outside (0, 0.5)")));
    }
    Ok(())
}

fn band(frac: f64, dim: usize) -> usize {
    ((frac * dim as f64).round() as usize).clamp(1, dim / 2)
}

/// Lower of the bright-pixel fractions in the left and right strips.
pub fn bright_edge_score(img: &Raster, strip_frac: f64, luma_thresh: u8, trigger: f64) -> Result<(f64, bool)> {
    check_frac("strip_frac", strip_frac)?;
    let (h, w) = (img.height(), img.width());
    let sw = band(strip_frac, w);
    let bright = |xs: std::ops::Range<usize>| {
        let mut n = 0usize;
        for y in 0..h {
            for x in xs.clone() {
                n += usize::from(luma(img.pixel(y, x)) > luma_thresh);
            }
        }
        n as f64 / (h * xs.len()) as f64
    };
    let score = bright(0..sw).min(bright(w - sw..w));
    Ok((score, score >= trigger))
}

/// Saturated pixels of the dominant hue over all border-band pixels; zero
/// unless the dominant hue holds at least `hue_share_cut` of the saturated
/// band pixels.
pub fn gauze_score(img: &Raster, border_frac: f64, params: &ScreenParams) -> Result<(f64, bool)> {
    check_frac("border_frac", border_frac)?;
    let (h, w) = (img.height(), img.width());
    let (bh, bw) = (band(border_frac, h), band(border_frac, w));
    let mut bins = [0usize; HUE_BINS];
    let (mut total, mut saturated) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if y >= bh && y < h - bh && x >= bw && x < w - bw {
                continue;
            }
            total += 1;
            let (s, bin) = sat_hue_bin(img.pixel(y, x));
            if s > params.saturation_cut {
                saturated += 1;
                bins[bin] += 1;
            }
        }
    }
    let dominant = *bins.iter().max().expect("fixed bin count");
    let score = if saturated > 0 && dominant as f64 / saturated as f64 >= params.hue_share_cut {
        dominant as f64 / total as f64
    } else {
        0.0
    };
    Ok((score, score >= params.gauze_thresh))
}

/// Count of leading lines (from one side) passing `hit`.
fn run_len(n: usize, hit: impl Fn(usize) -> bool) -> usize {
    (0..n).take_while(|&i| hit(i)).count()
}

/// Smallest centered rectangle excluding flagged strips and bands, never
/// narrower or shorter than half the image.
pub fn suggest_crop(img: &Raster, report: &ScreenReport, params: &ScreenParams) -> Result<Rect> {
    if !report.flagged() {
        return Err(Error::invalid(format!("item `{}` has no flag to crop for", report.item_id)));
    }
    let (h, w) = (img.height(), img.width());
    let (mut inset_x, mut inset_y) = (0, 0);

    if report.bright_edge_flag {
        let col_bright = |x: usize| {
            let n = (0..h).filter(|&y| luma(img.pixel(y, x)) > params.luma_thresh).count();
            n as f64 / h as f64 >= params.bright_trigger
        };
        let left = run_len(w, col_bright);
        let right = run_len(w, |i| col_bright(w - 1 - i));
        let run = left.max(right);
        inset_x = inset_x.max(if run == 0 { band(params.strip_frac, w) } else { run });
    }

    if report.gauze_flag {
        let is_gauze = |px: &[u8]| sat_hue_bin(px).0 > params.saturation_cut;
        let row = |y: usize| (0..w).filter(|&x| is_gauze(img.pixel(y, x))).count() * 2 >= w;
        let col = |x: usize| (0..h).filter(|&y| is_gauze(img.pixel(y, x))).count() * 2 >= h;
        let run = [
            run_len(h, row),
            run_len(h, |i| row(h - 1 - i)),
            run_len(w, col),
            run_len(w, |i| col(w - 1 - i)),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let (gy, gx) = if run == 0 {
            (band(params.border_frac, h), band(params.border_frac, w))
        } else {
            (run, run)
        };
        inset_x = inset_x.max(gx);
        inset_y = inset_y.max(gy);
    }

    let (ix, iy) = (inset_x.min(w / 4), inset_y.min(h / 4));
    Ok(Rect {
        x: ix,
        y: iy,
        w: w - 2 * ix,
        h: h - 2 * iy,
    })
}

pub fn screen_image(item_id: &str, img: &Raster, params: &ScreenParams) -> Result<ScreenReport> {
    let (bright_edge_score, bright_edge_flag) =
        bright_edge_score(img, params.strip_frac, params.luma_thresh, params.bright_trigger)?;
    let (gauze_score, gauze_flag) = gauze_score(img, params.border_frac, params)?;
    let mut report = ScreenReport {
        item_id: item_id.to_string(),
        bright_edge_flag,
        bright_edge_score,
        gauze_flag,
        gauze_score,
        suggested_crop: None,
    };
    if report.flagged() {
        report.suggested_crop = Some(suggest_crop(img, &report, params)?);
    }
    Ok(report)
}

/// Per-flag counts of items by class label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    pub bright_edge: BTreeMap<usize, usize>,
    pub gauze: BTreeMap<usize, usize>,
    pub any: BTreeMap<usize, usize>,
    pub unflagged: BTreeMap<usize, usize>,
}

impl Contingency {
    /// Share of the most common class among items in `counts`.
    pub fn purity(counts: &BTreeMap<usize, usize>) -> Option<f64> {
        let total: usize = counts.values().sum();
        let top = counts.values().max()?;
        (total > 0).then(|| *top as f64 / total as f64)
    }
}

pub fn contingency(reports: &[ScreenReport], labels: &[Option<usize>]) -> Contingency {
    let mut c = Contingency::default();
    for (r, l) in reports.iter().zip(labels) {
        let Some(l) = *l else { continue };
        if r.bright_edge_flag {
            *c.bright_edge.entry(l).or_default() += 1;
        }
        if r.gauze_flag {
            *c.gauze.entry(l).or_default() += 1;
        }
        let bucket = if r.flagged() { &mut c.any } else { &mut c.unflagged };
        *bucket.entry(l).or_default() += 1;
    }
    c
}

/// Screens every manifest item; the contingency covers labelled items.
pub fn screen_dataset(
    entries: &[ManifestEntry],
    base: &Path,
    params: &ScreenParams,
) -> Result<(Vec<ScreenReport>, Contingency)> {
    let reports = entries
        .par_iter()
        .map(|e| screen_image(&e.item_id, &e.load_image(base)?, params))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<_> = entries.iter().map(|e| e.label).collect();
    let table = contingency(&reports, &labels);
    Ok((reports, table))
}

/// `item_id,bright_flag,bright_score,gauze_flag,gauze_score,crop_x,crop_y,crop_w,crop_h`;
/// crop cells are empty for unflagged items.
pub fn write_report_csv(path: &Path, reports: &[ScreenReport]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "item_id",
        "bright_flag",
        "bright_score",
        "gauze_flag",
        "gauze_score",
        "crop_x",
        "crop_y",
        "crop_w",
        "crop_h",
    ])?;
    for r in reports {
        let crop = r.suggested_crop.map_or([String::new(), String::new(), String::new(), String::new()], |c| {
            [c.x, c.y, c.w, c.h].map(|v| v.to_string())
        });
        let mut rec = vec![
            r.item_id.clone(),
            u8::from(r.bright_edge_flag).to_string(),
            format!("{:.6}", r.bright_edge_score),
            u8::from(r.gauze_flag).to_string(),
            format!("{:.6}", r.gauze_score),
        ];
        rec.extend(crop);
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
