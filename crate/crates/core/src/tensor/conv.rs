use super::gemm::gemm;
use super::{Op, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects input [N,C,H,W] and kernel [K,C,kh,kw], got {input:?} and {kernel:?}"
        )));
    }
    if input[1] != kernel[1] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input {input:?} has {} channels, kernel {kernel:?} expects {}",
            input[1], kernel[1]
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be at least 1"));
    }
    let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvGeom {
        channels: input[1],
        height: h,
        width: w,
        kh,
        kw,
        stride,
        padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

/// 2-D cross-correlation over `[N,C,H,W]` with kernel `[K,C,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = geometry(input.shape(), kernel.shape(), stride, padding)?;
    let (n, k) = (input.shape()[0], kernel.shape()[0]);
    if bias.shape() != [k] {
        return Err(Error::shape(format!(
            "conv2d bias shape {:?} does not match {k} output channels",
            bias.shape()
        )));
    }
    let (rows, p) = (g.col_rows(), g.col_cols());
    let x = input.data();
    let w = kernel.data();
    let b = bias.data();
    let in_stride = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * k * p];
    let mut cols = vec![0.0; rows * p];
    for s in 0..n {
        im2col(&x[s * in_stride..(s + 1) * in_stride], &g, &mut cols);
        let y = &mut out[s * k * p..(s + 1) * k * p];
        for (ch, plane) in y.chunks_mut(p).enumerate() {
            plane.fill(b[ch]);
        }
        gemm(k, rows, p, &w, false, &cols, false, 1.0, y);
    }
    drop((x, w, b));
    Ok(Tensor::from_op(
        vec![n, k, g.out_h, g.out_w],
        out,
        Op::Conv2d { stride, padding },
        &[input, kernel, bias],
    ))
}

pub(super) fn conv2d_backward(
    parents: &[Tensor],
    stride: usize,
    padding: usize,
    out: &Tensor,
    gy: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let (input, kernel) = (&parents[0], &parents[1]);
    let g = geometry(input.shape(), kernel.shape(), stride, padding).expect("validated in forward");
    let n = input.shape()[0];
    let k = out.shape()[1];
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_stride = g.channels * g.height * g.width;
    let x = input.data();
    let w = kernel.data();

    let mut dx = needs[0].then(|| vec![0.0; x.len()]);
    let mut dw = needs[1].then(|| vec![0.0; w.len()]);
    let db = needs[2].then(|| {
        let mut db = vec![0.0; k];
        for s in 0..n {
            for (ch, acc) in db.iter_mut().enumerate() {
                let off = (s * k + ch) * p;
                *acc += gy[off..off + p].iter().sum::<f64>();
            }
        }
        db
    });

    let mut cols = vec![0.0; rows * p];
    for s in 0..n {
        let gys = &gy[s * k * p..(s + 1) * k * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_stride..(s + 1) * in_stride], &g, &mut cols);
            gemm(k, p, rows, gys, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, k, p, &w, true, gys, false, 0.0, &mut cols);
            col2im(&cols, &g, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    vec![dx, dw, db]
}

/// Non-overlapping max pooling with a square window.
pub fn maxpool2d(input: &Tensor, window: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("maxpool2d expects [N,C,H,W], got {shape:?}")));
    }
    if window == 0 {
        return Err(Error::invalid("maxpool2d window must be at least 1"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % window != 0 || w % window != 0 {
        return Err(Error::shape(format!(
            "maxpool2d: spatial dims {h}x{w} are not divisible by window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * window * w + ox * window;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        // strict comparison keeps the first maximum in row-major order
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(vec![n, c, oh, ow], out, Op::MaxPool { argmax }, &[input]))
}

pub(super) fn maxpool_backward(len: usize, argmax: &[usize], gy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; len];
    for (&i, &g) in argmax.iter().zip(gy) {
        dx[i] += g;
    }
    dx
}

/// Nearest-neighbour up-sampling by an integer factor.
pub fn upsample_nn(input: &Tensor, factor: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("upsample_nn expects [N,C,H,W], got {shape:?}")));
    }
    if factor < 1 {
        return Err(Error::invalid("upsample_nn factor must be at least 1"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / factor];
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(vec![n, c, oh, ow], out, Op::Upsample { factor }, &[input]))
}

pub(super) fn upsample_backward(input: &Tensor, factor: usize, gy: &[f64]) -> Vec<f64> {
    let shape = input.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &gy[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let k = t(&[1, 1, 1, 1], vec![1.0]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn sum_kernel() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], vec![1.0; 4]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![10.0]);
    }

    #[test]
    fn output_size_with_stride_and_padding() {
        let x = Tensor::zeros(&[2, 3, 9, 7]).unwrap();
        let k = Tensor::zeros(&[4, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[4]).unwrap();
        let y = conv2d(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        let k = Tensor::zeros(&[2, 2, 3, 3]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        let err = conv2d(&x, &k, &b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 2, 3, 3]"), "{err}");
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let k = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(conv2d(&x, &k, &b, 1, 1).is_err());
        assert!(conv2d(&x, &k, &b, 1, 2).is_ok());
    }

    #[test]
    fn maxpool_single_window_routes_gradient_to_max() {
        let x = Tensor::parameter(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![4.0]);
        super::super::sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_goes_to_first_element() {
        let x = Tensor::parameter(&[1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let y = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![5.0]);
        super::super::sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_constant_and_indivisible() {
        let x = t(&[1, 2, 4, 4], vec![3.5; 32]);
        assert_eq!(maxpool2d(&x, 2).unwrap().to_vec(), vec![3.5; 8]);
        let odd = Tensor::zeros(&[1, 1, 5, 4]).unwrap();
        assert!(maxpool2d(&odd, 2).is_err());
    }

    #[test]
    fn upsample_replicates() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample_nn(&x, 2).unwrap();
        assert_eq!(
            y.to_vec(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(upsample_nn(&x, 1).unwrap().to_vec(), x.to_vec());
        assert!(upsample_nn(&x, 0).is_err());
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = Tensor::parameter(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = upsample_nn(&x, 3).unwrap();
        super::super::sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![9.0, 9.0]);
    }
}
