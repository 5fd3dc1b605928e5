//! Forward kernels on plain tensors.
//!
//! These are the numeric primitives behind [`crate::graph::Graph`]; they are
//! also usable directly when no gradient is needed. Image tensors are
//! channels-last, either `[H, W, C]` or `[B, H, W, C]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

/// `c = a·b + beta·c` for logically `m×k` by `k×n` operands, optionally
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds row-major (or transposed) layouts of
    // the slices whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        [h, w, c] => Ok([1, h, w, c]),
        ref s => shape_err(format!("{what}: expected H×W×C or B×H×W×C, got {s:?}")),
    }
}

/// Unfolds `[B,H,W,Cin]` into rows of `k·k·Cin` patch values, zero padded so
/// that every output position has a full window.
pub(crate) fn im2col(input: &[f64], dims: [usize; 4], k: usize) -> Vec<f64> {
    let [b, h, w, cin] = dims;
    let pad = k / 2;
    let row_len = k * k * cin;
    let mut cols = vec![0.0; b * h * w * row_len];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h + y) * w + x) * row_len;
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = x + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let src = ((bi * h + iy) * w + ix) * cin;
                        let dst = row + (ky * k + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image, summing
/// overlaps.
pub(crate) fn col2im_add(cols: &[f64], dims: [usize; 4], k: usize, out: &mut [f64]) {
    let [b, h, w, cin] = dims;
    let pad = k / 2;
    let row_len = k * k * cin;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h + y) * w + x) * row_len;
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    for kx in 0..k {
                        let ix = x + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        let ix = ix - pad;
                        let dst = ((bi * h + iy) * w + ix) * cin;
                        let src = row + (ky * k + kx) * cin;
                        for c in 0..cin {
                            out[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// Checks a `k×k×Cin×Cout` kernel against an input with `cin` channels and
/// returns `(k, cout)`.
pub(crate) fn kernel_dims(kernel: &Tensor, cin: usize) -> Result<(usize, usize)> {
    let &[k, k2, kc, cout] = kernel.shape() else {
        return shape_err(format!("kernel must be k×k×Cin×Cout, got {:?}", kernel.shape()));
    };
    if k != k2 || k % 2 == 0 {
        return shape_err(format!("kernel must be square with odd size, got {k}×{k2}"));
    }
    if kc != cin {
        return shape_err(format!("kernel expects {kc} input channels, input has {cin}"));
    }
    Ok((k, cout))
}

/// Stride-1 convolution with zero "same" padding.
///
/// `output[h,w,o] = Σ_{dy,dx,c} input[h+dy-p, w+dx-p, c] · kernel[dy,dx,c,o]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = dims4(input, "conv2d input")?;
    let (k, cout) = kernel_dims(kernel, dims[3])?;
    if let Some(b) = bias {
        if b.len() != cout {
            return shape_err(format!("bias length {} != Cout {cout}", b.len()));
        }
    }
    let cols = im2col(input.data(), dims, k);
    let rows = dims[0] * dims[1] * dims[2];
    let mut out = conv_output(&cols, rows, k * k * dims[3], kernel.data(), cout, bias);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    out = out.reshape(&shape)?;
    Ok(out)
}

pub(crate) fn conv_output(
    cols: &[f64],
    rows: usize,
    inner: usize,
    kernel: &[f64],
    cout: usize,
    bias: Option<&Tensor>,
) -> Tensor {
    let mut out = match bias {
        Some(b) => {
            let mut v = Vec::with_capacity(rows * cout);
            for _ in 0..rows {
                v.extend_from_slice(b.data());
            }
            v
        }
        None => vec![0.0; rows * cout],
    };
    gemm(rows, inner, cout, cols, false, kernel, false, 1.0, &mut out);
    Tensor::from_fn(&[rows, cout], |i| out[i])
}

/// Pools every channel over all spatial positions. Output is `[B,1,1,C]`
/// (or `[1,1,C]` for rank-3 input). Also returns the flat argmax index per
/// output cell for max mode.
pub(crate) fn global_pool_with_arg(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let [b, h, w, c] = dims4(input, "global_pool")?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; b * c];
    let mut arg = Vec::new();
    match mode {
        PoolMode::Avg => {
            for bi in 0..b {
                let o = &mut out[bi * c..(bi + 1) * c];
                for p in 0..hw {
                    let base = (bi * hw + p) * c;
                    for (ch, slot) in o.iter_mut().enumerate() {
                        *slot += x[base + ch];
                    }
                }
                o.iter_mut().for_each(|v| *v /= hw as f64);
            }
        }
        PoolMode::Max => {
            arg = vec![0; b * c];
            for bi in 0..b {
                for ch in 0..c {
                    let mut best = bi * hw * c + ch;
                    for p in 1..hw {
                        let idx = (bi * hw + p) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out[bi * c + ch] = x[best];
                    arg[bi * c + ch] = best;
                }
            }
        }
    }
    let shape: Vec<usize> = if input.rank() == 3 { vec![1, 1, c] } else { vec![b, 1, 1, c] };
    Ok((Tensor::new(&shape, out)?, arg))
}

pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    global_pool_with_arg(input, mode).map(|(t, _)| t)
}

/// Reduces across channels at every spatial position, giving `[..,H,W,1]`.
pub(crate) fn channel_pool_with_arg(input: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let [b, h, w, c] = dims4(input, "channel_pool")?;
    let positions = b * h * w;
    let x = input.data();
    let mut out = vec![0.0; positions];
    let mut arg = Vec::new();
    if mode == PoolMode::Max {
        arg = vec![0; positions];
    }
    for p in 0..positions {
        let cell = &x[p * c..(p + 1) * c];
        match mode {
            PoolMode::Avg => out[p] = cell.iter().sum::<f64>() / c as f64,
            PoolMode::Max => {
                let mut best = 0;
                for (i, &v) in cell.iter().enumerate().skip(1) {
                    if v > cell[best] {
                        best = i;
                    }
                }
                out[p] = cell[best];
                arg[p] = p * c + best;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Ok((Tensor::new(&shape, out)?, arg))
}

pub fn channel_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    channel_pool_with_arg(input, mode).map(|(t, _)| t)
}

/// 2×2 max pooling with stride 2.
pub(crate) fn max_pool2_with_arg(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [b, h, w, c] = dims4(input, "max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("max_pool2 needs even spatial extents, got {h}×{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; b * oh * ow * c];
    let mut arg = vec![0; out.len()];
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let o = ((bi * oh + y) * ow + xx) * c;
                for ch in 0..c {
                    let mut best = ((bi * h + 2 * y) * w + 2 * xx) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out[o + ch] = x[best];
                    arg[o + ch] = best;
                }
            }
        }
    }
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = oh;
    shape[r - 2] = ow;
    Ok((Tensor::new(&shape, out)?, arg))
}

/// Affine map over the last axis: `x·W + b` with `W: D_in×D_out`.
pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[din, dout] = weights.shape() else {
        return shape_err(format!("weights must be D_in×D_out, got {:?}", weights.shape()));
    };
    if input.last_dim() != din {
        return shape_err(format!("input width {} != D_in {din}", input.last_dim()));
    }
    if bias.len() != dout {
        return shape_err(format!("bias length {} != D_out {dout}", bias.len()));
    }
    let rows = input.len() / din;
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm(rows, din, dout, input.data(), false, weights.data(), false, 1.0, &mut out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

/// Numerically stable softmax along the last axis.
pub fn softmax(logits: &Tensor) -> Tensor {
    let n = logits.last_dim();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(logits.shape(), out).expect("same shape")
}

/// Logistic function kept strictly inside (0,1): beyond |x| ≈ 37 the exact
/// value rounds to 1.0 (or underflows to 0.0), so the result is clamped to the
/// nearest representable interior point.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Replicates `attributes` (length A, or `[B, A]`) at every spatial position
/// of `visual` and appends them as extra channels.
pub fn broadcast_concat(visual: &Tensor, attributes: &Tensor) -> Result<Tensor> {
    let [b, h, w, c] = dims4(visual, "broadcast_concat visual")?;
    let a = attributes.last_dim();
    if attributes.len() != b * a {
        return shape_err(format!(
            "attributes {:?} do not match batch {b} of visual {:?}",
            attributes.shape(),
            visual.shape()
        ));
    }
    let v = visual.data();
    let at = attributes.data();
    let mut out = Vec::with_capacity(b * h * w * (c + a));
    for bi in 0..b {
        for p in 0..h * w {
            let base = (bi * h * w + p) * c;
            out.extend_from_slice(&v[base..base + c]);
            out.extend_from_slice(&at[bi * a..(bi + 1) * a]);
        }
    }
    let mut shape = visual.shape().to_vec();
    *shape.last_mut().unwrap() = c + a;
    Tensor::new(&shape, out)
}

/// Keeps channels `start..end` of a channels-last tensor.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let c = x.last_dim();
    if start >= end || end > c {
        return shape_err(format!("channel range {start}..{end} outside 0..{c}"));
    }
    let data: Vec<f64> = x
        .data()
        .chunks(c)
        .flat_map(|cell| cell[start..end].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = end - start;
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Quadruple-loop direct convolution.
    fn conv_oracle(x: &Tensor, k: &Tensor) -> Tensor {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ks, cout) = (k.shape()[0], k.shape()[3]);
        let p = ks as isize / 2;
        Tensor::from_fn(&[h, w, cout], |i| {
            let o = i % cout;
            let xx = (i / cout) % w;
            let y = i / cout / w;
            let mut acc = 0.0;
            for dy in 0..ks {
                for dx in 0..ks {
                    let iy = y as isize + dy as isize - p;
                    let ix = xx as isize + dx as isize - p;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for c in 0..cin {
                        acc += x.at(&[iy as usize, ix as usize, c]) * k.at(&[dy, dx, c, o]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[4, 5, 1], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, None).unwrap(), x);
    }

    #[test]
    fn conv_zero_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[4, 4, 2], &mut rng);
        let k = Tensor::zeros(&[3, 3, 2, 3]);
        let y = conv2d(&x, &k, None).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[4, 4, 3]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (cin, cout, k) in [(1, 1, 3), (2, 3, 3), (3, 2, 5), (2, 1, 7)] {
            let x = random(&[4, 4, cin], &mut rng);
            let kern = random(&[k, k, cin, cout], &mut rng);
            let got = conv2d(&x, &kern, None).unwrap();
            assert!(got.max_abs_diff(&conv_oracle(&x, &kern)) < 1e-12);
        }
    }

    #[test]
    fn conv_same_padding_preserves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 5, 3, 2], &mut rng);
        for k in [1, 3, 5, 7, 9] {
            let kern = random(&[k, k, 2, 1], &mut rng);
            assert_eq!(conv2d(&x, &kern, None).unwrap().shape(), &[2, 5, 3, 1]);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(conv2d(&x, &k, None), Err(crate::Error::Shape(_))));
        let even = Tensor::zeros(&[2, 2, 2, 1]);
        assert!(conv2d(&x, &even, None).is_err());
    }

    #[test]
    fn global_pool_constant_and_degenerate() {
        let x = Tensor::full(&[3, 2, 4], 0.7);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let p = global_pool(&x, mode).unwrap();
            assert_eq!(p.shape(), &[1, 1, 4]);
            assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
        let one = Tensor::new(&[1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert_eq!(global_pool(&one, mode).unwrap(), one);
        }
    }

    #[test]
    fn global_pool_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 3, 2], &mut rng);
        let avg = global_pool(&x, PoolMode::Avg).unwrap();
        let max = global_pool(&x, PoolMode::Max).unwrap();
        for c in 0..2 {
            let mut s = 0.0;
            let mut m = f64::NEG_INFINITY;
            for y in 0..3 {
                for xx in 0..3 {
                    s += x.at(&[y, xx, c]);
                    m = m.max(x.at(&[y, xx, c]));
                }
            }
            assert_eq!(avg.data()[c], s / 9.0);
            assert_eq!(max.data()[c], m);
        }
    }

    #[test]
    fn channel_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let single = random(&[3, 2, 1], &mut rng);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert_eq!(channel_pool(&single, mode).unwrap(), single);
        }
        let pos = random(&[2, 2, 1], &mut rng);
        let sym = Tensor::from_fn(&[2, 2, 2], |i| {
            let v = pos.data()[i / 2];
            if i % 2 == 0 { v } else { -v }
        });
        assert!(channel_pool(&sym, PoolMode::Avg).unwrap().data().iter().all(|&v| v == 0.0));

        let x = random(&[2, 2, 4], &mut rng);
        let avg = channel_pool(&x, PoolMode::Avg).unwrap();
        let max = channel_pool(&x, PoolMode::Max).unwrap();
        for y in 0..2 {
            for xx in 0..2 {
                let vals: Vec<f64> = (0..4).map(|c| x.at(&[y, xx, c])).collect();
                assert_eq!(avg.at(&[y, xx, 0]), vals.iter().sum::<f64>() / 4.0);
                assert_eq!(max.at(&[y, xx, 0]), vals.iter().copied().fold(f64::MIN, f64::max));
            }
        }
    }

    #[test]
    fn linear_cases() {
        let x = Tensor::new(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
        let b = Tensor::new(&[2], vec![0.25, -4.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[3, 2]), &b).unwrap();
        assert_eq!(y.data(), b.data());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 3], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let y = linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        for o in 0..2 {
            let dot: f64 = (0..3).map(|i| x.data()[i] * w.at(&[i, o])).sum();
            assert!((y.data()[o] - dot).abs() < 1e-12);
        }
        assert!(linear(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::full(&[3], 2.5));
        assert!(u.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let d = softmax(&Tensor::new(&[3], vec![100.0, 0.0, 0.0]).unwrap());
        assert!(d.data()[0] > 1.0 - 1e-9);
        let p = softmax(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.data()[i] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_concat_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random(&[2, 2, 2], &mut rng);
        let zero = broadcast_concat(&v, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(slice_channels(&zero, 0, 2).unwrap(), v);
        assert!(slice_channels(&zero, 2, 3).unwrap().data().iter().all(|&x| x == 0.0));

        let flat = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let a = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(broadcast_concat(&flat, &a).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let out = broadcast_concat(&v, &a).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5]);
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..5 {
                    let want = if c < 2 { v.at(&[y, x, c]) } else { a.data()[c - 2] };
                    assert_eq!(out.at(&[y, x, c]), want);
                }
            }
        }
    }
}
