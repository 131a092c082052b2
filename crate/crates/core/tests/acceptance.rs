//! End-to-end acceptance run. Prints one line per criterion and fails if
//! any criterion misses its pinned tolerance.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{brute_auc, grad_check, random_mask, set_jaccard, uniform, GRAD_TOL};
use lesion_core::augment::{
    apply_field, elastic_field, offline_expand_classification, offline_expand_segmentation, runtime_transform,
    MaskRaster, Raster, Resample, RuntimeAugmentParams,
};
use lesion_core::checkpoint::Checkpoint;
use lesion_core::data::{
    assign_folds, balanced_indices, generate_items, generate_synthetic_dataset, load_manifest, pixel_weight_map,
    save_manifest, FoldAssignment, LeakInjection, LeakKind, ManifestEntry, SynthConfig, Task,
};
use lesion_core::ensemble::{average_prob_maps, finalize_segmentation};
use lesion_core::metrics::{jaccard, roc_auc, ProbMap};
use lesion_core::optim::{adam_step_params, AdamState, DEFAULT_EPS};
use lesion_core::rng::seeded;
use lesion_core::screen::{screen_dataset, ScreenParams};
use lesion_core::tensor::{
    add, class_cross_entropy, conv2d, dense, maxpool2d, mul, relu, sigmoid, softmax, sum, upsample_nn,
    weighted_pixel_bce,
};
use lesion_core::train::{
    assign_for, class0_auc, evaluate_checkpoint, predict, train_all_folds, train_fold, Corpus,
    FoldResult, Prediction, TrainConfig,
};
use lesion_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

const GRAD_SUITE_BUDGET: Duration = Duration::from_secs(60);
const ADAM_TOL: f64 = 1e-4;
const ADAM_MAX_STEPS: usize = 2000;
const EXACT_TOL: f64 = 1e-12;
const WEIGHT_TOL: f64 = 1e-9;
const SEG_MIN_JACCARD: f64 = 0.85;
const SEG_BUDGET: Duration = Duration::from_secs(15 * 60);
const CLS_MIN_AUC: f64 = 0.95;
const CLS_ENSEMBLE_SLACK: f64 = 0.02;
const CLS_BUDGET: Duration = Duration::from_secs(10 * 60);
const SCREEN_MIN_PR: f64 = 0.95;
const SCREEN_MIN_PURITY: f64 = 0.95;
const SCREEN_MAX_FPR: f64 = 0.05;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// State carried from the segmentation run into the persistence check.
#[derive(Default)]
struct Shared {
    seg: Option<SegRun>,
}

struct SegRun {
    cfg: TrainConfig,
    corpus: Corpus,
    assignment: FoldAssignment,
    results: Vec<FoldResult>,
    dir: tempfile::TempDir,
}

fn project(out: &Tensor, seed: u64) -> Tensor {
    let r = uniform(&mut seeded(seed), out.numel(), -1.0, 1.0);
    sum(&mul(out, &Tensor::new(out.shape(), r).unwrap()).unwrap())
}

fn rand_inputs(rng: &mut impl Rng, shapes: &[Vec<usize>], lo: f64, hi: f64) -> Vec<Vec<f64>> {
    shapes.iter().map(|s| uniform(rng, s.iter().product(), lo, hi)).collect()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = seeded(101);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for op in [
        "conv2d", "dense", "maxpool2d", "upsample_nn", "relu", "sigmoid", "softmax", "weighted_pixel_bce",
        "class_cross_entropy",
    ] {
        let mut op_worst: f64 = 0.0;
        for inst in 0..20u64 {
            let err = match op {
                "conv2d" => {
                    let (c, k, kh) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
                    let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..2));
                    let shapes = vec![vec![2, c, 6, 5], vec![k, c, kh, kh], vec![k]];
                    let x = rand_inputs(&mut rng, &shapes, -1.0, 1.0);
                    grad_check(&shapes, &x, &[true; 3], &|t| {
                        project(&conv2d(&t[0], &t[1], &t[2], stride, pad).unwrap(), inst)
                    })
                }
                "dense" => {
                    let (d, m) = (rng.random_range(1..7), rng.random_range(1..6));
                    let shapes = vec![vec![3, d], vec![d, m], vec![m]];
                    let x = rand_inputs(&mut rng, &shapes, -1.0, 1.0);
                    grad_check(&shapes, &x, &[true; 3], &|t| project(&dense(&t[0], &t[1], &t[2]).unwrap(), inst))
                }
                "maxpool2d" => {
                    let w = rng.random_range(1..4);
                    let len = 2 * 2 * (2 * w) * (3 * w);
                    let mut ranks: Vec<usize> = (0..len).collect();
                    ranks.shuffle(&mut rng);
                    let x = vec![ranks.iter().map(|&r| r as f64 * 0.01).collect()];
                    grad_check(&[vec![2, 2, 2 * w, 3 * w]], &x, &[true], &|t| {
                        project(&maxpool2d(&t[0], w).unwrap(), inst)
                    })
                }
                "upsample_nn" => {
                    let f = rng.random_range(1..4);
                    let shapes = vec![vec![2, 2, 3, 2]];
                    let x = rand_inputs(&mut rng, &shapes, -1.0, 1.0);
                    grad_check(&shapes, &x, &[true], &|t| project(&upsample_nn(&t[0], f).unwrap(), inst))
                }
                "relu" => {
                    let x = vec![(0..30)
                        .map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                        .collect()];
                    grad_check(&[vec![30]], &x, &[true], &|t| project(&relu(&t[0]), inst))
                }
                "sigmoid" => {
                    let x = rand_inputs(&mut rng, &[vec![30]], -6.0, 6.0);
                    grad_check(&[vec![30]], &x, &[true], &|t| project(&sigmoid(&t[0]), inst))
                }
                "softmax" => {
                    let x = rand_inputs(&mut rng, &[vec![4, 5]], -3.0, 3.0);
                    grad_check(&[vec![4, 5]], &x, &[true], &|t| project(&softmax(&t[0]).unwrap(), inst))
                }
                "weighted_pixel_bce" => {
                    let s = vec![2, 1, 4, 4];
                    let p = uniform(&mut rng, 32, 0.05, 0.95);
                    let y: Vec<f64> = (0..32).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
                    let w = uniform(&mut rng, 32, 0.1, 3.0);
                    grad_check(&[s.clone(), s.clone(), s], &[p, y, w], &[true, false, false], &|t| {
                        weighted_pixel_bce(&t[0], &t[1], &t[2]).unwrap()
                    })
                }
                _ => {
                    let p = uniform(&mut rng, 15, 0.05, 0.95);
                    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
                    grad_check(&[vec![5, 3]], &[p], &[true], &|t| class_cross_entropy(&t[0], &labels).unwrap())
                }
            };
            op_worst = op_worst.max(err);
        }
        worst.push((op, op_worst));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = max < GRAD_TOL && elapsed < GRAD_SUITE_BUDGET;
    verdict(pass, format!("9 ops x 20 instances, max rel err {max:.2e} (< {GRAD_TOL:e}), {elapsed:.2?}"))
}

fn criterion_2() -> Verdict {
    let mut rng = seeded(202);
    let c: Vec<f64> = uniform(&mut rng, 8, -3.0, 3.0);
    let theta0: Vec<f64> = uniform(&mut rng, 8, -3.0, 3.0);
    let p = vec![("theta".to_string(), Tensor::parameter(&[8], theta0.clone()).unwrap())];
    let mut st = AdamState::for_params(&p, 0.05);
    let neg_c = Tensor::new(&[8], c.iter().map(|v| -v).collect()).unwrap();
    let mut first_step_err = f64::NAN;
    let mut reached = None;
    for step in 1..=ADAM_MAX_STEPS {
        let d = add(&p[0].1, &neg_c).unwrap();
        sum(&mul(&d, &d).unwrap()).backward().unwrap();
        adam_step_params(&p, &mut st).unwrap();
        let theta = p[0].1.to_vec();
        if step == 1 {
            first_step_err = theta
                .iter()
                .zip(&theta0)
                .zip(&c)
                .map(|((t1, t0), ci)| {
                    let g = 2.0 * (t0 - ci);
                    (t1 - (t0 - 0.05 * g / (g.abs() + DEFAULT_EPS))).abs()
                })
                .fold(0.0, f64::max);
        }
        let dist = theta.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dist < ADAM_TOL {
            reached = Some(step);
            break;
        }
    }
    let pass = reached.is_some() && first_step_err < EXACT_TOL;
    verdict(pass, format!("converged at step {reached:?}, first-step error {first_step_err:.1e}"))
}

fn criterion_3() -> Verdict {
    let mut rng = seeded(303);
    let mut auc_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..50u8)) / 50.0).collect();
        auc_err = auc_err.max((roc_auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs());
    }
    let mut jaccard_mismatch = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..20), rng.random_range(1..20));
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a = random_mask(&mut rng, h, w, pa);
        let b = random_mask(&mut rng, h, w, pb);
        if jaccard(&a, &b).unwrap() != set_jaccard(&a, &b) {
            jaccard_mismatch += 1;
        }
    }
    let worked = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let pass = auc_err < EXACT_TOL && jaccard_mismatch == 0 && worked == 0.75;
    verdict(
        pass,
        format!("auc max err {auc_err:.1e}, jaccard mismatches {jaccard_mismatch}/1000, worked example {worked}"),
    )
}

fn tile(rng: &mut impl Rng, side: usize) -> (Raster, MaskRaster) {
    let img = Raster::new(side, side, 3, (0..side * side * 3).map(|_| rng.random()).collect()).unwrap();
    let (cy, cx, r) = (rng.random_range(4.0..12.0), rng.random_range(4.0..12.0), rng.random_range(3.0..7.0));
    let mask =
        MaskRaster::from_fn(side, side, |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r).unwrap();
    (img, mask)
}

fn criterion_4() -> Verdict {
    let mut rng = seeded(404);
    let (mut seg_total, mut cls_total) = (0, 0);
    for _ in 0..2000 {
        let (img, mask) = tile(&mut rng, 16);
        seg_total += 1 + offline_expand_segmentation(&img, &mask, 16, &mut rng).unwrap().len();
        cls_total += 1 + offline_expand_classification(&img, 16).unwrap().len();
    }
    let mut inconsistent = 0;
    for i in 0..500 {
        let (img, mask) = tile(&mut rng, 16);
        let ok = if i % 2 == 0 {
            let (_, m, s) = runtime_transform(&img, Some(&mask), &RuntimeAugmentParams::default(), &mut rng).unwrap();
            m.unwrap() == s.apply(&mask).unwrap()
        } else {
            let pairs = offline_expand_segmentation(&img, &mask, 16, &mut rng).unwrap();
            pairs.iter().all(|p| p.replay_mask(&mask).unwrap() == p.mask)
        };
        inconsistent += usize::from(!ok);
    }
    let (img, mask) = tile(&mut rng, 16);
    let field = elastic_field(16, 16, 0.8, 0.0, &mut rng).unwrap();
    let identity = apply_field(&img, &field).unwrap() == img && apply_field(&mask, &field).unwrap() == mask;
    let pass = seg_total == 20_000 && cls_total == 6_000 && inconsistent == 0 && identity;
    verdict(
        pass,
        format!(
            "2000 originals -> {seg_total} seg / {cls_total} cls items, {inconsistent}/500 inconsistent pairs, alpha=0 identity {identity}"
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut rng = seeded(505);
    let (mut straddles, mut strat_violations) = (0, 0);
    for m in 0..100 {
        let groups = rng.random_range(10..150);
        let k = rng.random_range(2..11);
        let mut entries = Vec::new();
        for g in 0..groups {
            let label = rng.random_range(0..3);
            let mut e = ManifestEntry::original(format!("g{g}"), format!("g{g}.png"));
            e.label = Some(label);
            for d in 0..rng.random_range(0..4) {
                let mut c = e.clone();
                c.item_id = format!("g{g}_d{d}");
                c.is_derived = true;
                entries.push(c);
            }
            entries.push(e);
        }
        let asg = assign_folds(&entries, k, true, m).unwrap();
        let mut folds_of: std::collections::BTreeMap<&str, BTreeSet<usize>> = Default::default();
        for e in &entries {
            folds_of.entry(&e.group_id).or_default().insert(asg.fold_of_entry(e).unwrap());
        }
        straddles += folds_of.values().filter(|s| s.len() > 1).count();
        for label in 0..3 {
            let mut counts = vec![0usize; k];
            for e in entries.iter().filter(|e| !e.is_derived && e.label == Some(label)) {
                counts[asg.fold_of_entry(e).unwrap()] += 1;
            }
            let exact = counts.iter().sum::<usize>() as f64 / k as f64;
            strat_violations += counts.iter().filter(|&&c| (c as f64 - exact).abs() >= 1.0 + 1e-9).count();
        }
    }
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let mut unbalanced = 0;
    for _ in 0..100 {
        let idx = balanced_indices(&labels, 3, 30, &mut rng).unwrap();
        let mut counts = [0; 3];
        idx.iter().for_each(|&i| counts[labels[i]] += 1);
        unbalanced += usize::from(counts != [10, 10, 10]);
    }
    let pass = straddles == 0 && strat_violations == 0 && unbalanced == 0;
    verdict(
        pass,
        format!("100 manifests: {straddles} straddling groups, {strat_violations} stratum counts off by >1, {unbalanced}/100 unbalanced batches"),
    )
}

fn criterion_6() -> Verdict {
    let mut rng = seeded(606);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(2..40), rng.random_range(2..40));
        let p = rng.random_range(0.01..0.99);
        let mask = random_mask(&mut rng, h, w, p);
        if mask.foreground() == 0 || mask.foreground() == h * w {
            continue;
        }
        let wm = pixel_weight_map(&mask);
        let (mut fg, mut bg) = (0.0, 0.0);
        for (&v, &x) in mask.values().iter().zip(&wm.weights) {
            if v == 1 {
                fg += x
            } else {
                bg += x
            }
        }
        worst = worst.max((fg - bg).abs());
    }
    let half = MaskRaster::from_fn(8, 8, |y, _| y < 4).unwrap();
    let uniform_half = pixel_weight_map(&half).weights.iter().all(|&w| w == 1.0);
    verdict(
        worst < WEIGHT_TOL && uniform_half,
        format!("max |fg - bg| weight sum {worst:.1e} over 1000 masks, half mask uniform {uniform_half}"),
    )
}

fn load_corpus(cfg: &TrainConfig, dir: &Path, synth: &SynthConfig) -> (Vec<ManifestEntry>, Corpus) {
    let entries = generate_synthetic_dataset(synth, dir).unwrap();
    let corpus = Corpus::load(cfg, &entries, dir).unwrap();
    (entries, corpus)
}

fn criterion_7(shared: &mut Shared) -> Verdict {
    let cfg = TrainConfig::desk_segmentation();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (entries, corpus) = load_corpus(&cfg, &dir.path().join("data"), &SynthConfig::new(200, 64, Task::Segmentation, 7));
    let assignment = assign_for(&cfg, &entries).unwrap();
    let results: Vec<FoldResult> = train_all_folds(&cfg, &corpus, &assignment, Some(&dir.path().join("run")))
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
    let elapsed = start.elapsed();
    let per_fold: Vec<f64> = results.iter().map(|r| r.best_metric()).collect();
    let mean = per_fold.iter().sum::<f64>() / per_fold.len() as f64;

    let mut held_cfg = SynthConfig::new(60, 64, Task::Segmentation, 7_007);
    held_cfg.id_prefix = "heldout_".into();
    let held = generate_items(&held_cfg).unwrap();
    let images: Vec<Raster> = held.iter().map(|h| h.image.clone()).collect();
    let checkpoints: Vec<Checkpoint> = results.iter().map(|r| r.best.clone()).collect();
    let per_model = predict(&checkpoints, &images).unwrap();
    let mut ensemble_total = 0.0;
    for (i, item) in held.iter().enumerate() {
        let maps: Vec<(usize, ProbMap)> = per_model
            .iter()
            .zip(&results)
            .map(|(preds, r)| match &preds[i] {
                Prediction::Map(m) => (r.fold, m.clone()),
                Prediction::Probs(_) => unreachable!(),
            })
            .collect();
        let (mask, _) = finalize_segmentation(&maps, cfg.folds, cfg.threshold).unwrap();
        let truth = item.mask.as_ref().unwrap().resized(mask.height(), mask.width()).unwrap();
        ensemble_total += jaccard(&mask, &truth).unwrap();
    }
    let ensemble = ensemble_total / held.len() as f64;

    let rerun = train_fold(&cfg, 0, &corpus, &assignment, None).unwrap();
    let bytes = |ck: &Checkpoint| {
        let mut b = Vec::new();
        ck.write_to(&mut b).unwrap();
        b
    };
    let on_disk = std::fs::read(results[0].best_path.as_ref().unwrap()).unwrap();
    // history rows of the first run carry on-disk paths, so compare the scores
    let scores = |r: &FoldResult| -> Vec<(usize, u64)> {
        r.history.records().iter().map(|m| (m.epoch, m.metric.to_bits())).collect()
    };
    let same_bytes = bytes(&rerun.best) == on_disk;
    let same_scores = scores(&rerun) == scores(&results[0]);
    let identical = same_bytes && same_scores;

    let pass = mean >= SEG_MIN_JACCARD && ensemble >= SEG_MIN_JACCARD && elapsed <= SEG_BUDGET && identical;
    let detail = format!(
        "fold best Jaccard {per_fold:.4?} mean {mean:.4}, held-out ensemble {ensemble:.4} (>= {SEG_MIN_JACCARD}), {:.0?} for 3x{} epochs (<= 15 min), fold 0 rerun checkpoint bytes identical {same_bytes}, metric history identical {same_scores}",
        elapsed, cfg.epochs
    );
    shared.seg = Some(SegRun { cfg, corpus, assignment, results, dir });
    verdict(pass, detail)
}

fn criterion_8() -> Verdict {
    let cfg = TrainConfig::desk_classification();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (entries, corpus) = load_corpus(&cfg, dir.path(), &SynthConfig::new(300, 64, Task::Classification, 8));
    let assignment = assign_for(&cfg, &entries).unwrap();
    let results: Vec<FoldResult> = train_all_folds(&cfg, &corpus, &assignment, None)
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
    let elapsed = start.elapsed();
    let per_fold: Vec<f64> = results.iter().map(|r| r.best_metric()).collect();
    let mean = per_fold.iter().sum::<f64>() / per_fold.len() as f64;

    let mut held_cfg = SynthConfig::new(150, 64, Task::Classification, 8_008);
    held_cfg.id_prefix = "heldout_".into();
    let held = generate_items(&held_cfg).unwrap();
    let images: Vec<Raster> = held.iter().map(|h| h.image.clone()).collect();
    let labels: Vec<usize> = held.iter().map(|h| h.label.unwrap()).collect();
    let checkpoints: Vec<Checkpoint> = results.iter().map(|r| r.best.clone()).collect();
    let per_model = predict(&checkpoints, &images).unwrap();
    let single: Vec<f64> = per_model.iter().map(|p| class0_auc(p, &labels).unwrap()).collect();
    let single_mean = single.iter().sum::<f64>() / single.len() as f64;
    let averaged: Vec<Prediction> = (0..held.len())
        .map(|i| {
            let rows: Vec<Vec<f64>> = per_model
                .iter()
                .map(|m| match &m[i] {
                    Prediction::Probs(r) => r.clone(),
                    Prediction::Map(_) => unreachable!(),
                })
                .collect();
            Prediction::Probs(lesion_core::ensemble::average_class_probs(&rows).unwrap())
        })
        .collect();
    let ensemble = class0_auc(&averaged, &labels).unwrap();
    let pass = mean >= CLS_MIN_AUC && ensemble >= single_mean - CLS_ENSEMBLE_SLACK && elapsed <= CLS_BUDGET;
    verdict(
        pass,
        format!(
            "fold best AUC {per_fold:.4?} mean {mean:.4} (>= {CLS_MIN_AUC}), held-out ensemble {ensemble:.4} vs single-fold mean {single_mean:.4} - {CLS_ENSEMBLE_SLACK}, {elapsed:.0?} (<= 10 min)"
        ),
    )
}

fn criterion_9() -> Verdict {
    let params = ScreenParams::default();
    let dir = tempfile::tempdir().unwrap();
    let mut leaky = SynthConfig::new(300, 64, Task::Classification, 9);
    leaky.leaks = vec![
        LeakInjection { kind: LeakKind::BrightEdges, class: 1, fraction: 1.0 },
        LeakInjection { kind: LeakKind::Gauze, class: 2, fraction: 1.0 },
    ];
    let items = generate_items(&leaky).unwrap();
    let entries = lesion_core::data::write_items(&items, &dir.path().join("leaky")).unwrap();
    let (reports, table) = screen_dataset(&entries, &dir.path().join("leaky"), &params).unwrap();

    let mut worst_pr: f64 = 1.0;
    let mut parts = Vec::new();
    for (kind, name) in [(LeakKind::BrightEdges, "bright"), (LeakKind::Gauze, "gauze")] {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (r, it) in reports.iter().zip(&items) {
            let flagged = if kind == LeakKind::BrightEdges { r.bright_edge_flag } else { r.gauze_flag };
            let truth = it.leaks.contains(&kind);
            match (flagged, truth) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        worst_pr = worst_pr.min(precision).min(recall);
        parts.push(format!("{name} P {precision:.3} R {recall:.3}"));
    }
    let purity = [&table.bright_edge, &table.gauze]
        .iter()
        .map(|c| lesion_core::screen::Contingency::purity(c).unwrap_or(0.0))
        .fold(1.0, f64::min);

    let clean_items = generate_items(&SynthConfig::new(300, 64, Task::Classification, 99)).unwrap();
    let clean_entries = lesion_core::data::write_items(&clean_items, &dir.path().join("clean")).unwrap();
    let (clean, _) = screen_dataset(&clean_entries, &dir.path().join("clean"), &params).unwrap();
    let fpr = clean.iter().filter(|r| r.flagged()).count() as f64 / clean.len() as f64;

    let pass = worst_pr >= SCREEN_MIN_PR && purity >= SCREEN_MIN_PURITY && fpr < SCREEN_MAX_FPR;
    verdict(
        pass,
        format!("{}, min flagged-class purity {:.1}%, clean FPR {:.1}%", parts.join(", "), purity * 100.0, fpr * 100.0),
    )
}

fn criterion_10() -> Verdict {
    let mut rng = seeded(1010);
    let maps: Vec<ProbMap> = (0..5)
        .map(|_| ProbMap::new(4, 4, (0..16).map(|_| rng.random()).collect()).unwrap())
        .collect();
    let avg = average_prob_maps(&maps).unwrap();
    let mut permutation_ok = true;
    for _ in 0..50 {
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rng);
        permutation_ok &= average_prob_maps(&shuffled).unwrap() == avg;
    }
    let idempotent = average_prob_maps(&vec![maps[0].clone(); 7]).unwrap() == maps[0];
    let pair = average_prob_maps(&[ProbMap::constant(3, 3, 0.2), ProbMap::constant(3, 3, 0.6)]).unwrap();
    let constant_case = pair.values.iter().all(|&v| v == 0.4);
    verdict(
        permutation_ok && idempotent && constant_case,
        format!("permutation invariant {permutation_ok}, idempotent {idempotent}, 0.2/0.6 -> 0.4 {constant_case}"),
    )
}

fn criterion_11(shared: &Shared) -> Verdict {
    let Some(seg) = &shared.seg else {
        return verdict(false, "segmentation run unavailable");
    };
    let mut worst: f64 = 0.0;
    for r in &seg.results {
        let loaded = Checkpoint::load(r.best_path.as_ref().unwrap()).unwrap();
        let rescored = evaluate_checkpoint(&loaded, &seg.cfg, &seg.corpus, &seg.assignment).unwrap();
        worst = worst.max((rescored - r.best_metric()).abs()).max((loaded.meta.metric - r.best_metric()).abs());
    }
    let tmp = seg.dir.path();
    let manifest_path = tmp.join("data").join("manifest.json");
    let entries = load_manifest(&manifest_path).unwrap();
    save_manifest(&entries, &tmp.join("copy.json")).unwrap();
    let manifest_ok = load_manifest(&tmp.join("copy.json")).unwrap() == entries
        && std::fs::read(&manifest_path).unwrap() == std::fs::read(tmp.join("copy.json")).unwrap();
    seg.assignment.save(&tmp.join("folds.json")).unwrap();
    let folds_ok = FoldAssignment::load(&tmp.join("folds.json")).unwrap() == seg.assignment;
    verdict(
        worst <= EXACT_TOL && manifest_ok && folds_ok,
        format!("reload re-evaluation max diff {worst:.1e} (<= 1e-12), manifest round-trip {manifest_ok}, folds round-trip {folds_ok}"),
    )
}

/// Writes straight to stderr so the line shows even when the harness
/// captures test output.
fn report(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

#[test]
fn acceptance_criteria() {
    let mut shared = Shared::default();
    let names = [
        "gradient correctness",
        "adam oracle",
        "metric oracles",
        "augmentation cardinality",
        "fold integrity",
        "weight-map equalization",
        "end-to-end segmentation",
        "end-to-end classification",
        "leak screening",
        "ensembling properties",
        "persistence",
    ];
    // LESION_ACCEPTANCE=1,2,9 runs a subset
    let only: Option<BTreeSet<usize>> = std::env::var("LESION_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            report(&format!("criterion {id:>2} SKIP {name}"));
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(&mut shared),
            8 => criterion_8(),
            9 => criterion_9(),
            10 => criterion_10(),
            _ => criterion_11(&shared),
        }))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        report(&format!("criterion {id:>2} {} {name}: {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail));
        if !outcome.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
