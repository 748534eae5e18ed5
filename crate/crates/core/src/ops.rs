//! Forward and backward kernels for the differentiable primitives.
//!
//! These work on plain tensors; [`crate::graph::Graph`] records them and
//! wires the backward kernels into reverse-mode evaluation. Convolution and
//! upsampling accept `[C, L]` or batched `[B, C, L]` inputs; dense accepts
//! `[n]` or `[B, n]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Output length of a 1D convolution, or `None` when the kernel does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || len + 2 * padding < kernel {
        return None;
    }
    Some((len + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
    batched: bool,
}

impl ConvGeom {
    fn new(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (batch, c_in, len, batched) = match *input.shape() {
            [c, l] => (1, c, l, false),
            [b, c, l] => (b, c, l, true),
            _ => return Err(invalid("conv1d", "input must be [C, L] or [B, C, L]")),
        };
        let [c_out, k_in, k] = *kernels.shape() else {
            return Err(invalid("conv1d", "kernels must be [C_out, C_in, K]"));
        };
        if k_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: input.shape().to_vec(),
                right: kernels.shape().to_vec(),
            });
        }
        if bias.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv1d bias",
                left: kernels.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv1d", "stride must be at least 1"));
        }
        let out_len = conv_out_len(len, k, stride, padding).ok_or_else(|| {
            invalid(
                "conv1d",
                alloc::format!("kernel {k} longer than padded length {}", len + 2 * padding),
            )
        })?;
        Ok(Self {
            batch,
            c_in,
            len,
            c_out,
            k,
            stride,
            padding,
            out_len,
            batched,
        })
    }

    /// Output positions `t` for which tap `k` reads inside the input.
    fn valid_range(&self, tap: usize) -> core::ops::Range<usize> {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        if self.len + p < tap + 1 {
            return 0..0;
        }
        let hi = ((self.len - 1 + p - tap) / s + 1).min(self.out_len);
        lo.min(hi)..hi
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.batched {
            vec![self.batch, self.c_out, self.out_len]
        } else {
            vec![self.c_out, self.out_len]
        }
    }
}

impl ConvGeom {
    /// Columns of the unfolded input, `[C_in * K, B * out_len]`, zero where a
    /// tap reads padding.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.batch * self.out_len;
        let mut cols = vec![0.0; self.c_in * self.k * n];
        for ci in 0..self.c_in {
            for tap in 0..self.k {
                let r = self.valid_range(tap);
                if r.is_empty() {
                    continue;
                }
                let first = r.start * self.stride + tap - self.padding;
                let row = &mut cols[(ci * self.k + tap) * n..][..n];
                for b in 0..self.batch {
                    let xrow = &x[(b * self.c_in + ci) * self.len..][..self.len];
                    let dst = &mut row[b * self.out_len..][r.clone()];
                    for (d, v) in dst.iter_mut().zip(xrow[first..].iter().step_by(self.stride)) {
                        *d = *v;
                    }
                }
            }
        }
        cols
    }
}

/// Returns `grad . col` and adds `w * grad` into `gcol`, in one pass.
fn dot_axpy(grad: &[f64], col: &[f64], w: f64, gcol: &mut [f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut tail = 0.0;
    let (g4, c4) = (grad.chunks_exact(4), col.chunks_exact(4));
    let (gr, cr) = (g4.remainder(), c4.remainder());
    let split = grad.len() - gr.len();
    let (gc4, gcr) = gcol.split_at_mut(split);
    for ((g, c), d) in g4.zip(c4).zip(gc4.chunks_exact_mut(4)) {
        for l in 0..4 {
            acc[l] += g[l] * c[l];
            d[l] += w * g[l];
        }
    }
    for ((g, c), d) in gr.iter().zip(cr).zip(gcr) {
        tail += g * c;
        *d += w * g;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Cross-correlation with zero padding.
pub fn conv1d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernels, bias, stride, padding)?;
    let w = kernels.data();
    let cols = g.im2col(input.data());
    let n = g.batch * g.out_len;
    let width = g.c_in * g.k;
    let mut out = vec![0.0; g.batch * g.c_out * g.out_len];
    let mut acc = vec![0.0; n];
    for co in 0..g.c_out {
        acc.fill(bias.data()[co]);
        for (p, col) in cols.chunks_exact(n).enumerate() {
            axpy(w[co * width + p], col, &mut acc);
        }
        for b in 0..g.batch {
            out[(b * g.c_out + co) * g.out_len..][..g.out_len].copy_from_slice(&acc[b * g.out_len..][..g.out_len]);
        }
    }
    Tensor::new(g.out_shape(), out)
}

/// Gradients of [`conv1d`] with respect to input, kernels and bias.
pub fn conv1d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernels, bias, stride, padding)?;
    let w = kernels.data();
    let go = grad_out.data();
    let cols = g.im2col(input.data());
    let n = g.batch * g.out_len;
    let width = g.c_in * g.k;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.c_out];
    let mut gcols = vec![0.0; cols.len()];
    let mut grow = vec![0.0; n];
    for co in 0..g.c_out {
        for b in 0..g.batch {
            grow[b * g.out_len..][..g.out_len].copy_from_slice(&go[(b * g.c_out + co) * g.out_len..][..g.out_len]);
        }
        gb[co] = grow.iter().sum();
        for (p, (col, gcol)) in cols.chunks_exact(n).zip(gcols.chunks_exact_mut(n)).enumerate() {
            gw[co * width + p] = dot_axpy(&grow, col, w[co * width + p], gcol);
        }
    }
    let mut gx = vec![0.0; input.len()];
    for ci in 0..g.c_in {
        for tap in 0..g.k {
            let r = g.valid_range(tap);
            if r.is_empty() {
                continue;
            }
            let first = r.start * g.stride + tap - g.padding;
            let row = &gcols[(ci * g.k + tap) * n..][..n];
            for b in 0..g.batch {
                let gxrow = &mut gx[(b * g.c_in + ci) * g.len..][..g.len];
                let src = &row[b * g.out_len..][r.clone()];
                for (d, v) in gxrow[first..].iter_mut().step_by(g.stride).zip(src) {
                    *d += v;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernels.shape().to_vec(), gw)?,
        Tensor::new(bias.shape().to_vec(), gb)?,
    ))
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (batch, n) = match *input.shape() {
        [n] => (1, n),
        [b, n] => (b, n),
        _ => return Err(invalid("dense", "input must be [n] or [B, n]")),
    };
    let [m, wn] = *weights.shape() else {
        return Err(invalid("dense", "weights must be [m, n]"));
    };
    if wn != n {
        return Err(Error::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    if bias.shape() != [m] {
        return Err(Error::ShapeMismatch {
            op: "dense bias",
            left: weights.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    Ok((batch, n, m))
}

/// `out_i = sum_j weights_ij * input_j + bias_i`, per row of a batch.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, n, m) = dense_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(batch * m);
    for b in 0..batch {
        let xrow = &x[b * n..][..n];
        for i in 0..m {
            let wrow = &w[i * n..][..n];
            let dot: f64 = wrow.iter().zip(xrow).map(|(a, b)| a * b).sum();
            out.push(dot + bias.data()[i]);
        }
    }
    let shape = if input.rank() == 1 { vec![m] } else { vec![batch, m] };
    Tensor::new(shape, out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, n, m) = dense_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; m];
    for b in 0..batch {
        let xrow = &x[b * n..][..n];
        for i in 0..m {
            let gi = go[b * m + i];
            gb[i] += gi;
            for j in 0..n {
                gw[i * n + j] += gi * xrow[j];
                gx[b * n + j] += gi * w[i * n + j];
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(bias.shape().to_vec(), gb)?,
    ))
}

/// Repeats every time step `factor` times along the last axis.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(invalid("upsample_nearest", "factor must be at least 1"));
    }
    if input.rank() < 1 {
        return Err(invalid("upsample_nearest", "input needs a time axis"));
    }
    let len = *input.shape().last().unwrap();
    let mut out = Vec::with_capacity(input.len() * factor);
    for row in input.data().chunks(len) {
        for &v in row {
            out.extend(core::iter::repeat_n(v, factor));
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = len * factor;
    Tensor::new(shape, out)
}

pub fn upsample_nearest_backward(input_shape: &[usize], factor: usize, grad_out: &Tensor) -> Result<Tensor> {
    let data = grad_out.data().chunks(factor).map(|c| c.iter().sum()).collect();
    Tensor::new(input_shape.to_vec(), data)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    output.zip_map(grad_out, |y, g| g * y * (1.0 - y))
}

/// Softmax along the last axis.
pub fn softmax(input: &Tensor) -> Tensor {
    let width = input.shape().last().copied().unwrap_or(1);
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let width = output.shape().last().copied().unwrap_or(1);
    let mut gin = grad_out.clone();
    for (grow, yrow) in gin.data_mut().chunks_mut(width).zip(output.data().chunks(width)) {
        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
        for (g, y) in grow.iter_mut().zip(yrow) {
            *g = y * (*g - dot);
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the cross-correlation definition.
    fn naive_conv(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], bias: &[f64], stride: usize, pad: usize) -> Vec<Vec<f64>> {
        let len = x[0].len() as isize;
        let k = w[0][0].len();
        let out_len = (x[0].len() + 2 * pad - k) / stride + 1;
        let mut out = vec![vec![0.0; out_len]; w.len()];
        for (co, wco) in w.iter().enumerate() {
            for (t, o) in out[co].iter_mut().enumerate() {
                let mut acc = bias[co];
                for (ci, wci) in wco.iter().enumerate() {
                    for (tap, wv) in wci.iter().enumerate() {
                        let pos = (t * stride + tap) as isize - pad as isize;
                        if pos >= 0 && pos < len {
                            acc += wv * x[ci][pos as usize];
                        }
                    }
                }
                *o = acc;
            }
        }
        out
    }

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
    }

    #[test]
    fn conv1d_worked_examples() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::vector(vec![0.0]);
        assert_eq!(conv1d(&x, &k, &b, 1, 0).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(conv1d(&x, &k, &b, 2, 0).unwrap().data(), &[3.0, 7.0]);
        let id = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv1d(&x, &id, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv1d_channel_mismatch_names_shapes() {
        let x = Tensor::zeros(&[2, 5]);
        let k = Tensor::zeros(&[1, 3, 2]);
        let b = Tensor::zeros(&[1]);
        match conv1d(&x, &k, &b, 1, 0) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 5]);
                assert_eq!(right, vec![1, 3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv1d_matches_naive_oracle_on_sweep() {
        let mut rng = crate::Rng::new(11);
        for len in 1..=16usize {
            for k in 1..=len {
                for stride in 1..=3 {
                    for pad in 0..=2 {
                        let (ci, co) = (2, 3);
                        let x: Vec<Vec<f64>> = (0..ci)
                            .map(|_| (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect())
                            .collect();
                        let w: Vec<Vec<Vec<f64>>> = (0..co)
                            .map(|_| {
                                (0..ci)
                                    .map(|_| (0..k).map(|_| rng.uniform(-1.0, 1.0)).collect())
                                    .collect()
                            })
                            .collect();
                        let bias: Vec<f64> = (0..co).map(|_| rng.uniform(-1.0, 1.0)).collect();
                        let expect = naive_conv(&x, &w, &bias, stride, pad);
                        let wt = Tensor::new(vec![co, ci, k], w.concat().concat()).unwrap();
                        let got = conv1d(&t2(&x), &wt, &Tensor::vector(bias), stride, pad).unwrap();
                        let out_len = (len + 2 * pad - k) / stride + 1;
                        assert_eq!(got.shape(), &[co, out_len]);
                        assert_eq!(conv_out_len(len, k, stride, pad), Some(out_len));
                        for (a, b) in got.data().iter().zip(expect.concat()) {
                            assert!((a - b).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batched_conv_equals_per_sample() {
        let mut rng = crate::Rng::new(5);
        let x: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..4 * 3 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xb = Tensor::new(vec![2, 3, 9], x.clone()).unwrap();
        let wt = Tensor::new(vec![4, 3, 3], w).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let out = conv1d(&xb, &wt, &b, 2, 1).unwrap();
        for s in 0..2 {
            let xs = Tensor::new(vec![3, 9], x[s * 27..(s + 1) * 27].to_vec()).unwrap();
            let single = conv1d(&xs, &wt, &b, 2, 1).unwrap();
            assert_eq!(single.data(), out.row(s));
        }
    }

    #[test]
    fn dense_worked_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let w = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[3.0, -1.0]);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense(&x, &eye, &b).unwrap().data(), x.data());
        let bias = Tensor::vector(vec![0.3, -0.7]);
        assert_eq!(dense(&Tensor::zeros(&[2]), &w, &bias).unwrap().data(), bias.data());
        assert!(dense(&Tensor::zeros(&[3]), &w, &b).is_err());
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::vector(vec![0.0, 1.0, 3.5]);
        assert_eq!(relu(&pos), pos);
        assert_eq!(relu(&Tensor::vector(vec![-3.0, -0.1])).data(), &[0.0, 0.0]);
        let g = relu_backward(&Tensor::vector(vec![0.0]), &Tensor::vector(vec![1.0]));
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn upsample_cases() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(upsample_nearest(&x, 2).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
        let five = Tensor::new(vec![1, 1], vec![5.0]).unwrap();
        assert_eq!(upsample_nearest(&five, 3).unwrap().data(), &[5.0, 5.0, 5.0]);
        let g =
            upsample_nearest_backward(&[1, 2], 2, &Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 100.0]).unwrap();
        let y = softmax(&x);
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let u = softmax(&Tensor::zeros(&[4]));
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }
}
