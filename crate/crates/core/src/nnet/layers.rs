//! Layer primitives on `[batch, channels, height, width]` tensors.
//!
//! Samples are processed in parallel; per-sample weight gradients are summed
//! in sample order afterwards so results do not depend on thread count.

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{axpy, dot, Scalar, Tensor};
use crate::error::{Error, Result};

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Shape(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// One output row of a 3×3 correlation, all nine taps fused per pixel.
#[inline]
fn conv_row3<T: Scalar>(dst: &mut [T], rows: [&[T]; 3], kern: &[T]) {
    let n = dst.len();
    let (r0, r1, r2) = (&rows[0][..n + 2], &rows[1][..n + 2], &rows[2][..n + 2]);
    let w: [T; 9] = kern[..9].try_into().expect("3x3 kernel");
    for x in 0..n {
        let a = w[0] * r0[x] + w[1] * r0[x + 1] + w[2] * r0[x + 2];
        let b = w[3] * r1[x] + w[4] * r1[x + 1] + w[5] * r1[x + 2];
        let c = w[6] * r2[x] + w[7] * r2[x + 1] + w[8] * r2[x + 2];
        dst[x] += a + b + c;
    }
}

/// Valid (unpadded) stride-1 convolution. `weight` is `[out, in, k, k]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_rank(input, 4, "conv input")?;
    expect_rank(weight, 4, "conv weight")?;
    let (n, ci, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (co, wci, k) = (weight.dim(0), weight.dim(1), weight.dim(2));
    if wci != ci || weight.dim(3) != k || bias.len() != co {
        return Err(Error::Shape(format!(
            "conv weight {:?} / bias {:?} do not fit input {:?}",
            weight.shape(),
            bias.shape(),
            input.shape()
        )));
    }
    if h < k || w < k {
        return Err(Error::Shape(format!("conv kernel {k} larger than input {h}x{w}")));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let in_sample = ci * h * w;
    let out_sample = co * oh * ow;
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    out.data_mut()
        .par_chunks_mut(out_sample.max(1))
        .enumerate()
        .for_each(|(s, out_s)| {
            let x_s = &x[s * in_sample..(s + 1) * in_sample];
            for o in 0..co {
                let plane = &mut out_s[o * oh * ow..(o + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = b[o]);
                for i in 0..ci {
                    let src = &x_s[i * h * w..(i + 1) * h * w];
                    let kern = &wt[(o * ci + i) * k * k..(o * ci + i + 1) * k * k];
                    for y in 0..oh {
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        if k == 3 {
                            let rows = [
                                &src[y * w..(y + 1) * w],
                                &src[(y + 1) * w..(y + 2) * w],
                                &src[(y + 2) * w..(y + 3) * w],
                            ];
                            conv_row3(dst, rows, kern);
                            continue;
                        }
                        for ky in 0..k {
                            let row = &src[(y + ky) * w..(y + ky) * w + w];
                            for kx in 0..k {
                                axpy(dst, kern[ky * k + kx], &row[kx..kx + ow]);
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`]. The input gradient is skipped when
/// `need_input_grad` is false (first layer).
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, ci, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (co, k) = (weight.dim(0), weight.dim(2));
    let (oh, ow) = (h - k + 1, w - k + 1);
    if grad_out.shape() != [n, co, oh, ow] {
        return Err(Error::Shape(format!(
            "conv grad {:?} does not match output [{n}, {co}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let in_sample = ci * h * w;
    let out_sample = co * oh * ow;
    let (x, wt, g) = (input.data(), weight.data(), grad_out.data());
    let wlen = weight.len();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let x_s = &x[s * in_sample..(s + 1) * in_sample];
            let g_s = &g[s * out_sample..(s + 1) * out_sample];
            let mut gw = vec![T::zero(); wlen];
            let mut gb = vec![T::zero(); co];
            let mut gx = if need_input_grad {
                vec![T::zero(); in_sample]
            } else {
                Vec::new()
            };
            let mut padded = Vec::new();
            for o in 0..co {
                let gplane = &g_s[o * oh * ow..(o + 1) * oh * ow];
                gb[o] = gplane.iter().copied().sum();
                if k == 3 && need_input_grad {
                    pad_rows(gplane, oh, ow, &mut padded);
                }
                for i in 0..ci {
                    let src = &x_s[i * h * w..(i + 1) * h * w];
                    let base = (o * ci + i) * k * k;
                    if k == 3 {
                        weight_grad3(gplane, src, oh, ow, w, &mut gw[base..base + 9]);
                    } else {
                        for ky in 0..k {
                            for kx in 0..k {
                                let mut acc = T::zero();
                                for y in 0..oh {
                                    let row = &src[(y + ky) * w + kx..(y + ky) * w + kx + ow];
                                    acc += dot(&gplane[y * ow..(y + 1) * ow], row);
                                }
                                gw[base + ky * k + kx] = acc;
                            }
                        }
                    }
                    if need_input_grad {
                        let dst = &mut gx[i * h * w..(i + 1) * h * w];
                        if k == 3 {
                            input_grad3(&padded, oh, ow, &wt[base..base + 9], dst, w);
                            continue;
                        }
                        for y in 0..oh {
                            let grow = &gplane[y * ow..(y + 1) * ow];
                            for ky in 0..k {
                                let drow = &mut dst[(y + ky) * w..(y + ky) * w + w];
                                for kx in 0..k {
                                    axpy(&mut drow[kx..kx + ow], wt[base + ky * k + kx], grow);
                                }
                            }
                        }
                    }
                }
            }
            (gx, gw, gb)
        })
        .collect();

    let mut gxs = Vec::with_capacity(if need_input_grad { n * in_sample } else { 0 });
    let mut gws = Vec::with_capacity(n);
    let mut gbs = Vec::with_capacity(n);
    for (gx, gw, gb) in per_sample {
        gxs.extend(gx);
        gws.push(gw);
        gbs.push(gb);
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::new(input.shape(), gxs)?)
        } else {
            None
        },
        weight: Tensor::new(weight.shape(), sum_in_order(gws, wlen))?,
        bias: Tensor::new(&[co], sum_in_order(gbs, co))?,
    })
}

/// Copies each gradient row into `out` with two zeros on either side.
fn pad_rows<T: Scalar>(g: &[T], oh: usize, ow: usize, out: &mut Vec<T>) {
    out.clear();
    out.reserve(oh * (ow + 4));
    for y in 0..oh {
        out.extend_from_slice(&[T::zero(), T::zero()]);
        out.extend_from_slice(&g[y * ow..(y + 1) * ow]);
        out.extend_from_slice(&[T::zero(), T::zero()]);
    }
}

/// `gw[t] = Σ_y Σ_x g[y][x] · src[y+ky][x+kx]` for the nine taps of a 3×3
/// kernel, accumulated in four independent lanes per tap.
fn weight_grad3<T: Scalar>(g: &[T], src: &[T], oh: usize, ow: usize, w: usize, gw: &mut [T]) {
    const L: usize = 4;
    let mut acc = [[T::zero(); L]; 9];
    let mut tail = [T::zero(); 9];
    let body = ow - ow % L;
    for y in 0..oh {
        let grow = &g[y * ow..(y + 1) * ow];
        let r = [
            &src[y * w..y * w + ow + 2],
            &src[(y + 1) * w..(y + 1) * w + ow + 2],
            &src[(y + 2) * w..(y + 2) * w + ow + 2],
        ];
        let mut x = 0;
        while x < body {
            for l in 0..L {
                let gv = grow[x + l];
                for ky in 0..3 {
                    for kx in 0..3 {
                        acc[ky * 3 + kx][l] += gv * r[ky][x + l + kx];
                    }
                }
            }
            x += L;
        }
        for x in body..ow {
            let gv = grow[x];
            for ky in 0..3 {
                for kx in 0..3 {
                    tail[ky * 3 + kx] += gv * r[ky][x + kx];
                }
            }
        }
    }
    for t in 0..9 {
        gw[t] = acc[t].iter().fold(tail[t], |s, &v| s + v);
    }
}

/// Transposed 3×3 correlation of one gradient plane into `dst` (width `w`),
/// reading zero-padded gradient rows of width `ow + 4`.
fn input_grad3<T: Scalar>(padded: &[T], oh: usize, ow: usize, kern: &[T], dst: &mut [T], w: usize) {
    let pw = ow + 4;
    for y in 0..oh {
        let gp = &padded[y * pw..(y + 1) * pw];
        let gp = &gp[..w + 2];
        for ky in 0..3 {
            let (w0, w1, w2) = (kern[ky * 3], kern[ky * 3 + 1], kern[ky * 3 + 2]);
            let drow = &mut dst[(y + ky) * w..(y + ky + 1) * w];
            for (xp, d) in drow.iter_mut().enumerate() {
                *d += w0 * gp[xp + 2] + w1 * gp[xp + 1] + w2 * gp[xp];
            }
        }
    }
}

/// Output extent of a pooling window sliding with `stride` (no padding).
pub fn pool_extent(n: usize, window: usize, stride: usize) -> Option<usize> {
    if n < window || stride == 0 {
        None
    } else {
        Some((n - window) / stride + 1)
    }
}

/// Max pooling. Returns the output and, per output cell, the flat in-plane
/// index of the selected input. Ties go to the first cell in row-major order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    expect_rank(input, 4, "pool input")?;
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (oh, ow) = match (pool_extent(h, window, stride), pool_extent(w, window, stride)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "pool window {window} does not fit input {h}x{w}"
            )))
        }
    };
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let x = input.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (o, a))| {
            let plane = &x[p * h * w..(p + 1) * h * w];
            // Separable: row maxima first, then maxima over rows. Strict `>`
            // in both passes keeps the first maximum in row-major order.
            let mut hmax = vec![T::zero(); h * ow];
            let mut hcol = vec![0u32; h * ow];
            for r in 0..h {
                let row = &plane[r * w..(r + 1) * w];
                for xo in 0..ow {
                    let c0 = xo * stride;
                    let mut m = row[c0];
                    let mut mi = c0;
                    for cc in c0 + 1..c0 + window {
                        let v = row[cc];
                        let up = v > m;
                        m = if up { v } else { m };
                        mi = if up { cc } else { mi };
                    }
                    hmax[r * ow + xo] = m;
                    hcol[r * ow + xo] = mi as u32;
                }
            }
            for y in 0..oh {
                let r0 = y * stride;
                let orow = &mut o[y * ow..(y + 1) * ow];
                let arow = &mut a[y * ow..(y + 1) * ow];
                orow.copy_from_slice(&hmax[r0 * ow..(r0 + 1) * ow]);
                for (xo, ai) in arow.iter_mut().enumerate() {
                    *ai = (r0 * w) as u32 + hcol[r0 * ow + xo];
                }
                for r in r0 + 1..r0 + window {
                    let hm = &hmax[r * ow..(r + 1) * ow];
                    let hc = &hcol[r * ow..(r + 1) * ow];
                    for xo in 0..ow {
                        if hm[xo] > orow[xo] {
                            orow[xo] = hm[xo];
                            arow[xo] = (r * w) as u32 + hc[xo];
                        }
                    }
                }
            }
        });
    Ok((out, arg))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape("pool argmax / gradient length mismatch".into()));
    }
    let plane_in = input_shape[2] * input_shape[3];
    let plane_out = grad_out.dim(2) * grad_out.dim(3);
    let mut gx = Tensor::zeros(input_shape);
    gx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(p, dst)| {
            let g = &grad_out.data()[p * plane_out..(p + 1) * plane_out];
            let a = &argmax[p * plane_out..(p + 1) * plane_out];
            for (&gi, &ai) in g.iter().zip(a) {
                dst[ai as usize] += gi;
            }
        });
    Ok(gx)
}

pub fn relu_inplace<T: Scalar>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Global average pooling `[n, c, h, w] -> [n, c]`.
pub fn gap_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 4, "global pool input")?;
    let (n, c) = (input.dim(0), input.dim(1));
    let hw = input.dim(2) * input.dim(3);
    let inv = T::one() / T::of(hw as f64);
    let data = input
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn gap_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of(hw as f64);
    let mut data = Vec::with_capacity(grad_out.len() * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * inv).take(hw));
    }
    Tensor::new(input_shape, data)
}

/// Fully connected layer: `x [n, in]`, `weight [out, in]`, `bias [out]`.
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    expect_rank(x, 2, "dense input")?;
    let (n, fin) = (x.dim(0), x.dim(1));
    let fout = weight.dim(0);
    if weight.shape() != [fout, fin] || bias.len() != fout {
        return Err(Error::Shape(format!(
            "dense weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, fout]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    out.data_mut()
        .par_chunks_mut(fout)
        .enumerate()
        .for_each(|(s, row)| {
            let xs = &xd[s * fin..(s + 1) * fin];
            for (o, v) in row.iter_mut().enumerate() {
                *v = bd[o] + dot(&wd[o * fin..(o + 1) * fin], xs);
            }
        });
    Ok(out)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, fin) = (x.dim(0), x.dim(1));
    let fout = weight.dim(0);
    if grad_out.shape() != [n, fout] {
        return Err(Error::Shape("dense gradient shape mismatch".into()));
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gx = Tensor::zeros(&[n, fin]);
    gx.data_mut()
        .par_chunks_mut(fin)
        .enumerate()
        .for_each(|(s, dst)| {
            for o in 0..fout {
                axpy(dst, gd[s * fout + o], &wd[o * fin..(o + 1) * fin]);
            }
        });
    let mut gw = Tensor::zeros(&[fout, fin]);
    gw.data_mut()
        .par_chunks_mut(fin)
        .enumerate()
        .for_each(|(o, dst)| {
            for s in 0..n {
                axpy(dst, gd[s * fout + o], &xd[s * fin..(s + 1) * fin]);
            }
        });
    let mut gb = vec![T::zero(); fout];
    for s in 0..n {
        for o in 0..fout {
            gb[o] += gd[s * fout + o];
        }
    }
    Ok(DenseGrads {
        input: gx,
        weight: gw,
        bias: Tensor::new(&[fout], gb)?,
    })
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Returns the
/// multiplicative mask for the backward pass.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    t: &mut Tensor<T>,
    rate: f64,
    rng: &mut R,
) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..t.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    for (v, &m) in t.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

pub fn dropout_backward<T: Scalar>(grad: &mut Tensor<T>, mask: &[T]) {
    for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
        *g *= m;
    }
}

/// Row-wise softmax over `[n, classes]` with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(logits, 2, "softmax input")?;
    let c = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

/// Gradient through softmax given its output `p` and `dL/dp`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_p: &Tensor<T>) -> Tensor<T> {
    let c = probs.dim(1);
    let mut out = grad_p.clone();
    for (g, p) in out.data_mut().chunks_mut(c).zip(probs.data().chunks(c)) {
        let s: T = g.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for (gi, &pi) in g.iter_mut().zip(p) {
            *gi = pi * (*gi - s);
        }
    }
    out
}

/// Mean categorical cross-entropy with the probability clamped at
/// [`PROB_FLOOR`]. Returns the loss and `dL/dp`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    expect_rank(probs, 2, "cross-entropy input")?;
    let (n, c) = (probs.dim(0), probs.dim(1));
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if n == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let floor = T::of(PROB_FLOOR);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[n, c]);
    for (s, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Shape(format!("label {y} out of range for {c} classes")));
        }
        let p = probs.data()[s * c + y];
        if p > floor {
            loss += -p.ln() * inv_n;
            grad.data_mut()[s * c + y] = -inv_n / p;
        } else {
            loss += -floor.ln() * inv_n;
        }
    }
    Ok((loss, grad))
}
