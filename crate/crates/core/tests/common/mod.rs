//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use lesion_core::augment::MaskRaster;
use lesion_core::Tensor;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Central-difference gradient of a scalar function of `inputs[which]`.
pub fn numeric_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, inputs: &[Vec<f64>], which: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let x = inputs[which][i];
            work[which][i] = x + FD_STEP;
            let up = f(&work);
            work[which][i] = x - FD_STEP;
            let down = f(&work);
            work[which][i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Max absolute difference over the larger infinity norm of the two.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares autodiff against finite differences for every input flagged in
/// `differentiable`. `build` maps tensors to a scalar loss.
pub fn grad_check(
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    differentiable: &[bool],
    build: &dyn Fn(&[Tensor]) -> Tensor,
) -> f64 {
    let tracked: Vec<Tensor> = shapes
        .iter()
        .zip(inputs)
        .zip(differentiable)
        .map(|((s, d), &g)| {
            if g {
                Tensor::parameter(s, d.clone()).unwrap()
            } else {
                Tensor::new(s, d.clone()).unwrap()
            }
        })
        .collect();
    build(&tracked).backward().unwrap();
    let plain = |vals: &[Vec<f64>]| {
        let ts: Vec<Tensor> = shapes.iter().zip(vals).map(|(s, d)| Tensor::new(s, d.clone()).unwrap()).collect();
        build(&ts).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in tracked.iter().enumerate() {
        if differentiable[i] {
            let numeric = numeric_grad(&plain, inputs, i);
            worst = worst.max(relative_error(&t.grad().unwrap(), &numeric));
        }
    }
    worst
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// AUC by counting every positive/negative pair, ties worth one half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Jaccard from explicit sets of foreground coordinates.
pub fn set_jaccard(a: &MaskRaster, b: &MaskRaster) -> f64 {
    use std::collections::BTreeSet;
    let set = |m: &MaskRaster| -> BTreeSet<(usize, usize)> {
        (0..m.height())
            .flat_map(|y| (0..m.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| m.get(y, x))
            .collect()
    };
    let (sa, sb) = (set(a), set(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> MaskRaster {
    let values = (0..h * w).map(|_| u8::from(rng.random_bool(p))).collect();
    MaskRaster::new(h, w, values).unwrap()
}
