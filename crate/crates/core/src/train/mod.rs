//! Fold training for both tracks, multi-fold orchestration and inference.

mod config;
mod corpus;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use config::{model_label, resize_side_for, TrainConfig};
pub use corpus::{classification_eval_view, segmentation_eval_view, Corpus, CorpusItem};

use crate::augment::{random_crop, runtime_transform, MaskRaster, Raster};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{assign_folds, balanced_indices, pixel_weight_map, FoldAssignment, ManifestEntry, Task};
use crate::error::{Error, Result};
use crate::metrics::{binarize, jaccard, roc_auc, select_best_epoch, MetricHistory, MetricRecord, ProbMap};
use crate::models::{Model, ModelConfig, Phase};
use crate::optim::{adam_step, AdamState};
use crate::rng::derived;
use crate::tensor::{class_cross_entropy, weighted_pixel_bce, Tensor};

const INIT_STREAM: u64 = 0x1417;
const EPOCH_STREAM: u64 = 0xE90C;
/// Images per forward pass at inference.
const EVAL_CHUNK: usize = 16;

/// Stacks rasters into an `[N,3,S,S]` tensor scaled to `v/255 - 0.5`.
/// Single-channel rasters are replicated across the three channels.
pub fn images_to_tensor(images: &[&Raster], channels: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to stack"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * channels * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        let c_in = img.channels();
        for c in 0..channels {
            let src = if c_in == 1 { 0 } else { c.min(c_in - 1) };
            data.extend(img.pixels().iter().skip(src).step_by(c_in).map(|&v| f64::from(v) / 255.0 - 0.5));
        }
    }
    Tensor::new(&[images.len(), channels, h, w], data)
}

/// Output of one model on one image.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Map(ProbMap),
    Probs(Vec<f64>),
}

/// Evaluation-mode forward over model-ready views, in chunks.
pub fn infer(model: &Model, views: &[&Raster]) -> Result<Vec<Prediction>> {
    let channels = model.config().in_channels();
    let mut out = Vec::with_capacity(views.len());
    for chunk in views.chunks(EVAL_CHUNK) {
        let x = images_to_tensor(chunk, channels)?;
        let y = model.forward(&x, Phase::Eval)?;
        let data = y.data();
        let per = y.numel() / chunk.len();
        for row in data.chunks(per) {
            out.push(match model.config() {
                ModelConfig::Unet(c) => Prediction::Map(ProbMap::new(c.input_size, c.input_size, row.to_vec())?),
                ModelConfig::Alexnet(_) => Prediction::Probs(row.to_vec()),
            });
        }
    }
    Ok(out)
}

/// Runs every checkpoint over every image. Segmentation maps come back at
/// model resolution; classification uses the deterministic center view.
/// Result is indexed `[model][image]`.
pub fn predict(checkpoints: &[Checkpoint], images: &[Raster]) -> Result<Vec<Vec<Prediction>>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("predict needs at least one checkpoint"));
    }
    let first = &checkpoints[0].config;
    if let Some(other) = checkpoints.iter().find(|c| c.config != *first) {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoints disagree on architecture: {first:?} vs {:?}",
            other.config
        )));
    }
    let size = first.input_size();
    let views = images
        .par_iter()
        .map(|img| match first {
            ModelConfig::Unet(_) => segmentation_eval_view(img, size),
            ModelConfig::Alexnet(_) => classification_eval_view(img, size),
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Raster> = views.iter().collect();
    checkpoints
        .iter()
        .map(|ck| infer(&ck.to_model()?, &refs))
        .collect()
}

/// Mean per-image Jaccard of binarized maps against `truth`.
pub fn mean_jaccard(preds: &[Prediction], truth: &[&MaskRaster], threshold: f64) -> Result<f64> {
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        let Prediction::Map(m) = p else {
            return Err(Error::invalid("expected probability maps"));
        };
        total += jaccard(&binarize(m, threshold), t)?;
    }
    Ok(total / preds.len() as f64)
}

/// AUC of class-0 probability against "label is class 0".
pub fn class0_auc(preds: &[Prediction], labels: &[usize]) -> Result<f64> {
    let mut scores = Vec::with_capacity(preds.len());
    for p in preds {
        let Prediction::Probs(row) = p else {
            return Err(Error::invalid("expected class probabilities"));
        };
        scores.push(row[0]);
    }
    let positives: Vec<u8> = labels.iter().map(|&l| u8::from(l == 0)).collect();
    roc_auc(&scores, &positives)
}

/// Validation metric of `model` on the originals of `fold`.
pub fn evaluate_fold(model: &Model, cfg: &TrainConfig, corpus: &Corpus, val: &[usize]) -> Result<f64> {
    let size = cfg.input_size();
    match cfg.task {
        Task::Segmentation => {
            let views: Vec<&Raster> = val.iter().map(|&i| &corpus.items[i].image).collect();
            let truth: Vec<&MaskRaster> = val
                .iter()
                .map(|&i| corpus.items[i].mask.as_ref().expect("segmentation items carry masks"))
                .collect();
            mean_jaccard(&infer(model, &views)?, &truth, cfg.threshold)
        }
        Task::Classification => {
            let views = val
                .iter()
                .map(|&i| corpus::center_crop(&corpus.items[i].image, size))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Raster> = views.iter().collect();
            let labels: Vec<usize> = val.iter().map(|&i| corpus.items[i].label.expect("labelled")).collect();
            class0_auc(&infer(model, &refs)?, &labels)
        }
    }
}

/// Re-scores a stored checkpoint on its fold's validation originals.
pub fn evaluate_checkpoint(ck: &Checkpoint, cfg: &TrainConfig, corpus: &Corpus, assignment: &FoldAssignment) -> Result<f64> {
    let fold = ck.meta.fold.ok_or_else(|| Error::invalid("checkpoint has no fold"))?;
    let (_, val) = corpus.split(assignment, fold)?;
    evaluate_fold(&ck.to_model()?, cfg, corpus, &val)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub best: Checkpoint,
    pub history: MetricHistory,
    /// On-disk location of `best`, when training wrote to a directory.
    pub best_path: Option<PathBuf>,
}

impl FoldResult {
    pub fn best_metric(&self) -> f64 {
        self.best.meta.metric
    }
}

pub fn fold_dir(out_dir: &Path, fold: usize) -> PathBuf {
    out_dir.join(format!("fold_{fold:02}"))
}

fn epoch_checkpoint_name(fold: usize, epoch: usize) -> PathBuf {
    Path::new(&format!("fold_{fold:02}")).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains one fold for `cfg.epochs` epochs, scoring the validation
/// originals after each epoch and keeping the best-scoring checkpoint
/// (earliest on ties). With `out_dir`, the retained checkpoint and
/// `history.csv` are written under `fold_XX/`.
pub fn train_fold(
    cfg: &TrainConfig,
    fold: usize,
    corpus: &Corpus,
    assignment: &FoldAssignment,
    out_dir: Option<&Path>,
) -> Result<FoldResult> {
    cfg.validate()?;
    if fold >= cfg.folds || fold >= assignment.k {
        return Err(Error::Fold {
            fold,
            message: format!("outside [0, {})", cfg.folds.min(assignment.k)),
        });
    }
    if corpus.task != cfg.task {
        return Err(Error::invalid("corpus was prepared for a different task"));
    }
    let (train, val) = corpus.split(assignment, fold)?;

    let model = cfg.model.build(&mut derived(cfg.seed, &[INIT_STREAM, fold as u64]))?;
    let mut adam = AdamState::new(&model, cfg.lr);
    let mut history = MetricHistory::new();
    let mut best: Option<Checkpoint> = None;
    let mut best_path: Option<PathBuf> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = derived(cfg.seed, &[EPOCH_STREAM, fold as u64, epoch as u64]);
        let loss = match cfg.task {
            Task::Segmentation => segmentation_epoch(cfg, &model, &mut adam, corpus, &train, &mut rng)?,
            Task::Classification => classification_epoch(cfg, &model, &mut adam, corpus, &train, &mut rng)?,
        };
        let metric = evaluate_fold(&model, cfg, corpus, &val)?;
        let name = epoch_checkpoint_name(fold, epoch);
        let ck_ref = out_dir.map_or(name.clone(), |d| d.join(&name));
        history.push(MetricRecord {
            epoch,
            metric,
            checkpoint: ck_ref.clone(),
        })?;
        if cfg.verbose {
            eprintln!("fold {fold} epoch {epoch}: loss {loss:.5} metric {metric:.5}");
        }
        if best.as_ref().is_none_or(|b| metric > b.meta.metric) {
            let ck = Checkpoint::from_model(
                &model,
                CheckpointMeta {
                    epoch,
                    metric,
                    fold: Some(fold),
                },
                Some(&adam),
            );
            if out_dir.is_some() {
                ck.save(&ck_ref)?;
                if let Some(old) = best_path.replace(ck_ref) {
                    std::fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
            }
            best = Some(ck);
        }
    }

    if let Some(d) = out_dir {
        history.save_csv(&fold_dir(d, fold).join("history.csv"))?;
    }
    let best = best.expect("at least one epoch ran");
    debug_assert_eq!(select_best_epoch(&history)?.epoch, best.meta.epoch);
    Ok(FoldResult {
        fold,
        best,
        history,
        best_path,
    })
}

fn segmentation_epoch(
    cfg: &TrainConfig,
    model: &Model,
    adam: &mut AdamState,
    corpus: &Corpus,
    train: &[usize],
    rng: &mut crate::rng::SeededRng,
) -> Result<f64> {
    let mut order = train.to_vec();
    order.shuffle(rng);
    let channels = cfg.model.in_channels();
    let mut total = 0.0;
    let mut batches = 0;
    for batch in order.chunks(cfg.batch_size) {
        let mut images = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        for &i in batch {
            let it = &corpus.items[i];
            let (img, mask, _) = runtime_transform(&it.image, it.mask.as_ref(), &cfg.augment, rng)?;
            let mask = mask.expect("segmentation items carry masks");
            targets.extend(mask.values().iter().map(|&v| f64::from(v)));
            weights.extend(pixel_weight_map(&mask).weights);
            images.push(img);
        }
        let refs: Vec<&Raster> = images.iter().collect();
        let x = images_to_tensor(&refs, channels)?;
        let (n, s) = (batch.len(), cfg.input_size());
        let target = Tensor::new(&[n, 1, s, s], targets)?;
        let weight = Tensor::new(&[n, 1, s, s], weights)?;
        let prob = model.forward(&x, Phase::Train(rng))?;
        let loss = weighted_pixel_bce(&prob, &target, &weight)?;
        loss.backward()?;
        adam_step(model, adam)?;
        total += loss.item();
        batches += 1;
    }
    Ok(total / batches as f64)
}

fn classification_epoch(
    cfg: &TrainConfig,
    model: &Model,
    adam: &mut AdamState,
    corpus: &Corpus,
    train: &[usize],
    rng: &mut crate::rng::SeededRng,
) -> Result<f64> {
    let ModelConfig::Alexnet(arch) = &cfg.model else {
        return Err(Error::invalid("classification needs an AlexNet config"));
    };
    let k = arch.num_classes;
    let labels: Vec<usize> = train
        .iter()
        .map(|&i| model_label(corpus.items[i].label.expect("labelled"), k))
        .collect();
    let steps = train.len().div_ceil(cfg.batch_size);
    let size = cfg.input_size();
    let mut total = 0.0;
    for _ in 0..steps {
        let picks = balanced_indices(&labels, k, cfg.batch_size, rng)?;
        let mut images = Vec::with_capacity(picks.len());
        let mut batch_labels = Vec::with_capacity(picks.len());
        for &p in &picks {
            let it = &corpus.items[train[p]];
            let cropped = random_crop(&it.image, size, size, rng)?;
            let (img, _, _) = runtime_transform(&cropped, None, &cfg.augment, rng)?;
            images.push(img);
            batch_labels.push(labels[p]);
        }
        let refs: Vec<&Raster> = images.iter().collect();
        let x = images_to_tensor(&refs, cfg.model.in_channels())?;
        let probs = model.forward(&x, Phase::Train(rng))?;
        let loss = class_cross_entropy(&probs, &batch_labels)?;
        loss.backward()?;
        adam_step(model, adam)?;
        total += loss.item();
    }
    Ok(total / steps as f64)
}

/// Trains every fold. A failing fold is reported in its slot without
/// stopping the others.
pub fn train_all_folds(
    cfg: &TrainConfig,
    corpus: &Corpus,
    assignment: &FoldAssignment,
    out_dir: Option<&Path>,
) -> Vec<Result<FoldResult>> {
    let run = |fold: usize| train_fold(cfg, fold, corpus, assignment, out_dir);
    if cfg.parallel_folds {
        (0..cfg.folds).into_par_iter().map(run).collect()
    } else {
        (0..cfg.folds).map(run).collect()
    }
}

/// Assigns folds for `entries` according to `cfg`.
pub fn assign_for(cfg: &TrainConfig, entries: &[ManifestEntry]) -> Result<FoldAssignment> {
    let stratify = cfg.stratify && cfg.task == Task::Classification;
    assign_folds(entries, cfg.folds, stratify, cfg.seed)
}

/// Per-fold best metrics with their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub rows: Vec<(usize, f64)>,
    pub mean: f64,
}

impl FoldReport {
    pub fn from_results(results: &[FoldResult]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::invalid("no completed folds to report"));
        }
        let rows: Vec<(usize, f64)> = results.iter().map(|r| (r.fold, r.best_metric())).collect();
        let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
        Ok(FoldReport { rows, mean })
    }

    /// Fold column, metric column and a closing mean row.
    pub fn to_table(&self, metric_name: &str) -> String {
        let mut s = format!("fold,{metric_name}\n");
        for (f, m) in &self.rows {
            s.push_str(&format!("{},{m:.6}\n", f + 1));
        }
        s.push_str(&format!("mean,{:.6}\n", self.mean));
        s
    }
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Segmentation => "jaccard",
        Task::Classification => "auc",
    }
}
