//! Synthetic dermoscopy-like corpora for desk-scale runs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{save_manifest, write_json, ManifestEntry};
use crate::augment::{MaskRaster, Raster};
use crate::error::{Error, Result};
use crate::image_io;
use crate::rng::{derived, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakKind {
    /// Near-white columns along both the left and right edges.
    BrightEdges,
    /// Saturated single-hue band along two to four image sides.
    Gauze,
}

/// Injects `kind` into a random `fraction` of the items labelled `class`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakInjection {
    pub kind: LeakKind,
    pub class: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub size: usize,
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub leaks: Vec<LeakInjection>,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "synth_".into()
}

impl SynthConfig {
    pub fn new(n_items: usize, size: usize, task: Task, seed: u64) -> Self {
        SynthConfig {
            n_items,
            size,
            task,
            seed,
            leaks: Vec::new(),
            id_prefix: default_prefix(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthItem {
    pub item_id: String,
    pub image: Raster,
    pub mask: Option<MaskRaster>,
    pub label: Option<usize>,
    pub leaks: Vec<LeakKind>,
}

pub const NUM_SYNTH_CLASSES: usize = 3;
const MIN_FRACTION: f64 = 0.05;
const MAX_FRACTION: f64 = 0.6;

/// Generates the corpus in memory. Item `i` depends only on `(seed, i)`;
/// classification labels cycle `i % 3`.
pub fn generate_items(cfg: &SynthConfig) -> Result<Vec<SynthItem>> {
    if cfg.n_items == 0 {
        return Err(Error::invalid("n_items must be positive"));
    }
    if cfg.size < 16 {
        return Err(Error::invalid(format!("synthetic images need at least 16 px, got {}", cfg.size)));
    }
    for l in &cfg.leaks {
        if !(0.0..=1.0).contains(&l.fraction) {
            return Err(Error::invalid(format!("leak fraction {} outside [0, 1]", l.fraction)));
        }
    }
    (0..cfg.n_items)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect()
}

fn generate_one(cfg: &SynthConfig, i: usize) -> Result<SynthItem> {
    let mut rng = derived(cfg.seed, &[i as u64]);
    let s = cfg.size;
    let mut canvas = Canvas::skin(s, &mut rng);
    let (mask, label) = match cfg.task {
        Task::Segmentation => (Some(draw_segmentation_lesion(&mut canvas, &mut rng)?), None),
        Task::Classification => {
            let label = i % NUM_SYNTH_CLASSES;
            draw_class_lesion(&mut canvas, label, &mut rng);
            (None, Some(label))
        }
    };

    let mut leak_rng = derived(cfg.seed, &[i as u64, 1]);
    let mut leaks = Vec::new();
    for inj in &cfg.leaks {
        let hit = leak_rng.random_bool(inj.fraction);
        // one artifact per item so detectors are scored against a single cue
        if hit && label == Some(inj.class) && leaks.is_empty() {
            match inj.kind {
                LeakKind::BrightEdges => canvas.bright_edges(&mut leak_rng),
                LeakKind::Gauze => canvas.gauze(&mut leak_rng),
            }
            leaks.push(inj.kind);
        }
    }

    Ok(SynthItem {
        item_id: format!("{}{i:05}", cfg.id_prefix),
        image: canvas.into_raster()?,
        mask,
        label,
        leaks,
    })
}

/// Writes `images/<id>.png`, `masks/<id>.png`, `manifest.json` and, when any
/// leak was injected, `leaks.json` under `out_dir`.
pub fn write_items(items: &[SynthItem], out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let entries: Vec<ManifestEntry> = items
        .par_iter()
        .map(|it| {
            let img_rel = Path::new("images").join(format!("{}.png", it.item_id));
            image_io::save_raster(&it.image, &out_dir.join(&img_rel))?;
            let mut e = ManifestEntry::original(&it.item_id, img_rel);
            if let Some(m) = &it.mask {
                let rel = Path::new("masks").join(format!("{}.png", it.item_id));
                image_io::save_mask(m, &out_dir.join(&rel))?;
                e.mask_path = Some(rel);
            }
            e.label = it.label;
            Ok(e)
        })
        .collect::<Result<_>>()?;
    save_manifest(&entries, &out_dir.join("manifest.json"))?;
    let leaks: BTreeMap<&str, &[LeakKind]> = items
        .iter()
        .filter(|it| !it.leaks.is_empty())
        .map(|it| (it.item_id.as_str(), it.leaks.as_slice()))
        .collect();
    if !leaks.is_empty() {
        write_json(&leaks, &out_dir.join("leaks.json"))?;
    }
    Ok(entries)
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    write_items(&generate_items(cfg)?, out_dir)
}

/// Floating-point RGB canvas.
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn skin(size: usize, rng: &mut SeededRng) -> Self {
        let base = [
            rng.random_range(195.0..220.0),
            rng.random_range(150.0..175.0),
            rng.random_range(130.0..155.0),
        ];
        let px = (0..size * size)
            .map(|_| {
                let n = rng.random_range(-8.0..8.0);
                [base[0] + n, base[1] + n, base[2] + n]
            })
            .collect();
        Canvas { size, px }
    }

    fn paint(&mut self, inside: impl Fn(f64, f64) -> bool, color: [f64; 3], texture: f64, rng: &mut SeededRng) {
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(y as f64 + 0.5, x as f64 + 0.5) {
                    let n = rng.random_range(-texture..=texture);
                    self.px[y * self.size + x] = color.map(|c| c + n);
                }
            }
        }
    }

    fn bright_edges(&mut self, rng: &mut SeededRng) {
        let s = self.size;
        let w = ((s as f64 * rng.random_range(0.06..0.10)).round() as usize).max(1);
        for y in 0..s {
            for x in (0..w).chain(s - w..s) {
                let n = rng.random_range(-3.0..3.0);
                self.px[y * s + x] = [251.0 + n, 249.0 + n, 245.0 + n];
            }
        }
    }

    fn gauze(&mut self, rng: &mut SeededRng) {
        let s = self.size;
        let hue = *[135.0, 225.0, 285.0].choose(rng).expect("non-empty");
        let color = hsv_to_rgb(hue, rng.random_range(0.75..0.9), rng.random_range(0.65..0.9));
        let band = (s as f64 * rng.random_range(0.13..0.16)).round() as usize;
        let mut sides = [0, 1, 2, 3];
        sides.shuffle(rng);
        let n_sides = rng.random_range(2..=4);
        let chosen = &sides[..n_sides];
        for y in 0..s {
            for x in 0..s {
                let covered = chosen.iter().any(|&side| match side {
                    0 => y < band,
                    1 => y >= s - band,
                    2 => x < band,
                    _ => x >= s - band,
                });
                if covered {
                    let n = rng.random_range(-3.0..3.0);
                    self.px[y * s + x] = color.map(|c| c + n);
                }
            }
        }
    }

    fn into_raster(self) -> Result<Raster> {
        let pixels = self
            .px
            .iter()
            .flat_map(|p| p.map(|c| c.round().clamp(0.0, 255.0) as u8))
            .collect();
        Raster::new(self.size, self.size, 3, pixels)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m].map(|u| u * 255.0)
}

fn ellipse(cy: f64, cx: f64, a: f64, b: f64, theta: f64) -> impl Fn(f64, f64) -> bool {
    let (sin, cos) = theta.sin_cos();
    move |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        let u = (dx * cos + dy * sin) / a;
        let v = (-dx * sin + dy * cos) / b;
        u * u + v * v <= 1.0
    }
}

fn lesion_color(rng: &mut SeededRng) -> [f64; 3] {
    [
        rng.random_range(95.0..130.0),
        rng.random_range(60.0..85.0),
        rng.random_range(50.0..70.0),
    ]
}

/// Random ellipse covering between 5% and 60% of the image.
fn draw_segmentation_lesion(canvas: &mut Canvas, rng: &mut SeededRng) -> Result<MaskRaster> {
    let s = canvas.size as f64;
    let mut shape = None;
    for _ in 0..100 {
        let (cy, cx) = (rng.random_range(0.3 * s..0.7 * s), rng.random_range(0.3 * s..0.7 * s));
        let (a, b) = (rng.random_range(0.15 * s..0.42 * s), rng.random_range(0.15 * s..0.42 * s));
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let inside = ellipse(cy, cx, a, b, theta);
        let mask = MaskRaster::from_fn(canvas.size, canvas.size, |y, x| inside(y as f64 + 0.5, x as f64 + 0.5))?;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&mask.foreground_fraction()) {
            shape = Some((inside, mask));
            break;
        }
    }
    let (inside, mask) = match shape {
        Some(found) => found,
        None => {
            let inside = ellipse(s / 2.0, s / 2.0, 0.25 * s, 0.25 * s, 0.0);
            let mask = MaskRaster::from_fn(canvas.size, canvas.size, |y, x| inside(y as f64 + 0.5, x as f64 + 0.5))?;
            (inside, mask)
        }
    };
    let color = lesion_color(rng);
    canvas.paint(inside, color, 18.0, rng);
    Ok(mask)
}

/// Lesions stay inside the central 70% of the frame so the border is clean.
fn draw_class_lesion(canvas: &mut Canvas, label: usize, rng: &mut SeededRng) {
    let s = canvas.size as f64;
    let color = lesion_color(rng);
    match label {
        0 => {
            let (a, b) = (rng.random_range(0.14 * s..0.2 * s), rng.random_range(0.14 * s..0.2 * s));
            let r = a.max(b);
            let (cy, cx) = (
                rng.random_range(0.15 * s + r..=0.85 * s - r),
                rng.random_range(0.15 * s + r..=0.85 * s - r),
            );
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            canvas.paint(ellipse(cy, cx, a, b, theta), color, 12.0, rng);
        }
        1 => {
            let r = rng.random_range(0.15 * s..0.2 * s);
            let (cy, cx) = (
                rng.random_range(0.15 * s + r..=0.85 * s - r),
                rng.random_range(0.15 * s + r..=0.85 * s - r),
            );
            let inner = r * rng.random_range(0.5..0.6);
            let ring = move |y: f64, x: f64| {
                let d = (y - cy).hypot(x - cx);
                d <= r && d > inner
            };
            canvas.paint(ring, color, 12.0, rng);
        }
        _ => {
            let blobs = rng.random_range(4..=6);
            for _ in 0..blobs {
                let r = rng.random_range(0.04 * s..0.07 * s);
                let (cy, cx) = (
                    rng.random_range(0.15 * s + r..=0.85 * s - r),
                    rng.random_range(0.15 * s + r..=0.85 * s - r),
                );
                canvas.paint(ellipse(cy, cx, r, r, 0.0), color, 12.0, rng);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_fraction_bounds() {
        let items = generate_items(&SynthConfig::new(100, 32, Task::Segmentation, 3)).unwrap();
        assert_eq!(items.len(), 100);
        for it in &items {
            let f = it.mask.as_ref().unwrap().foreground_fraction();
            assert!((MIN_FRACTION..=MAX_FRACTION).contains(&f), "{f}");
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig::new(90, 24, Task::Classification, 8);
        let a = generate_items(&cfg).unwrap();
        let b = generate_items(&cfg).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.image == y.image && x.label == y.label));
        for c in 0..3 {
            assert_eq!(a.iter().filter(|it| it.label == Some(c)).count(), 30);
        }
    }

    #[test]
    fn leaks_only_on_requested_class() {
        let mut cfg = SynthConfig::new(60, 32, Task::Classification, 1);
        cfg.leaks = vec![
            LeakInjection {
                kind: LeakKind::BrightEdges,
                class: 1,
                fraction: 1.0,
            },
            LeakInjection {
                kind: LeakKind::Gauze,
                class: 1,
                fraction: 0.5,
            },
        ];
        let items = generate_items(&cfg).unwrap();
        for it in &items {
            assert_eq!(it.leaks.contains(&LeakKind::BrightEdges), it.label == Some(1));
            if it.label != Some(1) {
                assert!(it.leaks.is_empty());
            }
        }
    }

    #[test]
    fn written_corpus_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(3, 20, Task::Segmentation, 0);
        let entries = generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        let items = generate_items(&cfg).unwrap();
        for (e, it) in entries.iter().zip(&items) {
            assert_eq!(e.load_image(dir.path()).unwrap(), it.image);
            assert_eq!(&e.load_mask(dir.path()).unwrap(), it.mask.as_ref().unwrap());
        }
        assert!(!dir.path().join("leaks.json").exists());
    }
}
