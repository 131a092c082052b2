use rand::Rng;

use super::gemm::gemm;
use super::{check_shape, Op, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, Op::Add, &[a, b]))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, Op::Mul, &[a, b]))
}

pub fn sum(a: &Tensor) -> Tensor {
    let s = a.data().iter().sum();
    Tensor::from_op(vec![1], vec![s], Op::Sum, &[a])
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    check_shape(shape, a.numel())?;
    Ok(Tensor::from_op(shape.to_vec(), a.to_vec(), Op::Reshape, &[a]))
}

/// Concatenates two `[N,C,H,W]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape(format!("concat_channels: incompatible shapes {sa:?} and {sb:?}")));
    }
    let (n, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for s in 0..n {
        out.extend_from_slice(&da[s * ca * hw..(s + 1) * ca * hw]);
        out.extend_from_slice(&db[s * cb * hw..(s + 1) * cb * hw]);
    }
    drop((da, db));
    Ok(Tensor::from_op(
        vec![n, ca + cb, sa[2], sa[3]],
        out,
        Op::ConcatChannels { split: ca },
        &[a, b],
    ))
}

pub(super) fn concat_backward(parents: &[Tensor], split: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let sa = parents[0].shape();
    let (n, hw) = (sa[0], sa[2] * sa[3]);
    let cb = parents[1].shape()[1];
    let mut ga = Vec::with_capacity(n * split * hw);
    let mut gb = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let base = s * (split + cb) * hw;
        ga.extend_from_slice(&g[base..base + split * hw]);
        gb.extend_from_slice(&g[base + split * hw..base + (split + cb) * hw]);
    }
    vec![Some(ga), Some(gb)]
}

/// Affine map `input[N,D] · weight[D,M] + bias[M]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (si, sw) = (input.shape(), weight.shape());
    if si.len() != 2 || sw.len() != 2 || si[1] != sw[0] {
        return Err(Error::shape(format!("dense: input {si:?} incompatible with weight {sw:?}")));
    }
    let (n, d, m) = (si[0], si[1], sw[1]);
    if bias.shape() != [m] {
        return Err(Error::shape(format!(
            "dense: bias {:?} does not match {m} outputs",
            bias.shape()
        )));
    }
    let b = bias.data();
    let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
    gemm(n, d, m, &input.data(), false, &weight.data(), false, 1.0, &mut out);
    drop(b);
    Ok(Tensor::from_op(vec![n, m], out, Op::Dense, &[input, weight, bias]))
}

pub(super) fn dense_backward(parents: &[Tensor], g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (input, weight) = (&parents[0], &parents[1]);
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weight.shape()[1];
    let dx = needs[0].then(|| {
        let mut dx = vec![0.0; n * d];
        gemm(n, m, d, g, false, &weight.data(), true, 0.0, &mut dx);
        dx
    });
    let dw = needs[1].then(|| {
        let mut dw = vec![0.0; d * m];
        gemm(d, n, m, &input.data(), true, g, false, 0.0, &mut dw);
        dw
    });
    let db = needs[2].then(|| {
        let mut db = vec![0.0; m];
        for row in g.chunks(m) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        db
    });
    vec![dx, dw, db]
}

pub fn relu(input: &Tensor) -> Tensor {
    let out = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_op(input.shape().to_vec(), out, Op::Relu, &[input])
}

/// Inverted dropout: survivors are scaled by `1/(1-rate)` so evaluation is
/// the identity.
pub fn dropout<R: Rng + ?Sized>(input: &Tensor, rate: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..input.numel())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = input.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
    Ok(Tensor::from_op(input.shape().to_vec(), out, Op::Dropout { scale }, &[input]))
}

/// Largest double below one; keeps sigmoid outputs strictly inside (0, 1).
const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

pub fn sigmoid(input: &Tensor) -> Tensor {
    let out = input
        .data()
        .iter()
        .map(|&x| {
            let y = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            };
            y.clamp(f64::MIN_POSITIVE, SIGMOID_MAX)
        })
        .collect();
    Tensor::from_op(input.shape().to_vec(), out, Op::Sigmoid, &[input])
}

/// Row-wise softmax over `[N,K]`, shifted by the row maximum.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("softmax expects [N,K], got {s:?}")));
    }
    let k = s[1];
    let mut out = input.to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(Tensor::from_op(s.to_vec(), out, Op::Softmax, &[input]))
}

pub(super) fn softmax_backward(out: &Tensor, g: &[f64]) -> Vec<f64> {
    let k = out.shape()[1];
    let y = out.data();
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    dx
}
