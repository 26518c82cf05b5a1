//! Batched NCHW kernels, generic over the engine scalar.

use rayon::prelude::*;

use super::real::{gemm, Real};
use crate::ir::Dims;

/// Samples per partial weight-gradient accumulator. Fixed so the reduction
/// order does not depend on the thread count.
const GRAD_GROUP: usize = 8;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, s: usize, p: usize, len: usize) -> Option<usize> {
        let i = (o * s + k).checked_sub(p)?;
        (i < len).then_some(i)
    }
}

fn im2col<T: Real>(x: &[T], d: Dims, win: Window, ho: usize, wo: usize, col: &mut [T]) {
    let hw = ho * wo;
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    match Window::src(oy, ky, win.sh, win.ph, d.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match Window::src(ox, kx, win.sw, win.pw, d.w) {
                                    Some(ix) => plane[iy * d.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], d: Dims, win: Window, ho: usize, wo: usize, dx: &mut [T]) {
    let hw = ho * wo;
    for ci in 0..d.c {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let Some(iy) = Window::src(oy, ky, win.sh, win.ph, d.h) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, d.w) {
                            plane[iy * d.w + ix] = plane[iy * d.w + ix] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(
    x: &[T], n: usize, din: Dims, dout: Dims, win: Window, weight: &[T], bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = (dout.h, dout.w);
    let hw = ho * wo;
    let k = din.c * win.kh * win.kw;
    let in_len = din.numel();
    let out_len = dout.numel();
    let mut out = vec![T::zero(); n * out_len];
    let pointwise = win.is_pointwise();
    out.par_chunks_mut(out_len.max(1))
        .enumerate()
        .for_each_init(
            || if pointwise { Vec::new() } else { vec![T::zero(); k * hw] },
            |col, (s, y)| {
                let xs = &x[s * in_len..(s + 1) * in_len];
                let cols: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, din, win, ho, wo, col);
                    col
                };
                gemm(dout.c, k, hw, weight, false, cols, false, y, false);
                if let Some(b) = bias {
                    for (oc, plane) in y.chunks_mut(hw).enumerate() {
                        plane.iter_mut().for_each(|v| *v = *v + b[oc]);
                    }
                }
            },
        );
    out
}

/// Returns (dx, dweight, dbias).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    x: &[T], g: &[T], n: usize, din: Dims, dout: Dims, win: Window, weight: &[T], need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (dout.h, dout.w);
    let hw = ho * wo;
    let k = din.c * win.kh * win.kw;
    let in_len = din.numel();
    let out_len = dout.numel();
    let oc = dout.c;
    let pointwise = win.is_pointwise();
    let mut dx = vec![T::zero(); if need_dx { n * in_len } else { 0 }];
    let groups = n.div_ceil(GRAD_GROUP);

    let work = |gi: usize, dx_chunk: Option<&mut [T]>| -> Vec<T> {
        let mut dw = vec![T::zero(); oc * k];
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * hw] };
        let mut dcol = vec![T::zero(); k * hw];
        let mut dx_chunk = dx_chunk;
        for s in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(n) {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let gs = &g[s * out_len..(s + 1) * out_len];
            let cols: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, din, win, ho, wo, &mut col);
                &col
            };
            // dW += g (oc x hw) * cols^T (hw x k)
            gemm(oc, hw, k, gs, false, cols, true, &mut dw, true);
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                let local = s - gi * GRAD_GROUP;
                let dxs = &mut dxc[local * in_len..(local + 1) * in_len];
                if pointwise {
                    gemm(k, oc, hw, weight, true, gs, false, dxs, false);
                } else {
                    gemm(k, oc, hw, weight, true, gs, false, &mut dcol, false);
                    col2im(&dcol, din, win, ho, wo, dxs);
                }
            }
        }
        dw
    };

    let partials: Vec<Vec<T>> = if need_dx {
        dx.par_chunks_mut(GRAD_GROUP * in_len.max(1))
            .enumerate()
            .map(|(gi, chunk)| work(gi, Some(chunk)))
            .collect()
    } else {
        (0..groups).into_par_iter().map(|gi| work(gi, None)).collect()
    };
    let mut dw = vec![T::zero(); oc * k];
    for p in &partials {
        for (a, b) in dw.iter_mut().zip(p) {
            *a = *a + *b;
        }
    }
    let mut db = vec![T::zero(); oc];
    for s in 0..n {
        for (c, plane) in g[s * out_len..(s + 1) * out_len].chunks(hw.max(1)).enumerate() {
            db[c] = db[c] + plane.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

pub(crate) fn depthwise_forward<T: Real>(
    x: &[T], n: usize, din: Dims, dout: Dims, win: Window, weight: &[T], bias: Option<&[T]>,
) -> Vec<T> {
    let (ho, wo) = (dout.h, dout.w);
    let ksz = win.kh * win.kw;
    let mut out = vec![T::zero(); n * dout.numel()];
    out.par_chunks_mut((ho * wo).max(1)).enumerate().for_each(|(idx, y)| {
        let c = idx % din.c;
        let plane = &x[idx * din.h * din.w..(idx + 1) * din.h * din.w];
        let wk = &weight[c * ksz..(c + 1) * ksz];
        let b = bias.map_or(T::zero(), |b| b[c]);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ky in 0..win.kh {
                    let Some(iy) = Window::src(oy, ky, win.sh, win.ph, din.h) else { continue };
                    for kx in 0..win.kw {
                        if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, din.w) {
                            acc = acc + wk[ky * win.kw + kx] * plane[iy * din.w + ix];
                        }
                    }
                }
                y[oy * wo + ox] = acc;
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward<T: Real>(
    x: &[T], g: &[T], n: usize, din: Dims, dout: Dims, win: Window, weight: &[T], need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (dout.h, dout.w);
    let (pin, pout) = (din.h * din.w, ho * wo);
    let ksz = win.kh * win.kw;
    let c_n = din.c;
    // Per channel: weight and bias grads summed over samples in order.
    let per_channel: Vec<(Vec<T>, T)> = (0..c_n)
        .into_par_iter()
        .map(|c| {
            let mut dw = vec![T::zero(); ksz];
            let mut db = T::zero();
            for s in 0..n {
                let idx = s * c_n + c;
                let plane = &x[idx * pin..(idx + 1) * pin];
                let gp = &g[idx * pout..(idx + 1) * pout];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gp[oy * wo + ox];
                        db = db + gv;
                        for ky in 0..win.kh {
                            let Some(iy) = Window::src(oy, ky, win.sh, win.ph, din.h) else { continue };
                            for kx in 0..win.kw {
                                if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, din.w) {
                                    dw[ky * win.kw + kx] = dw[ky * win.kw + kx] + gv * plane[iy * din.w + ix];
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = Vec::with_capacity(c_n * ksz);
    let mut db = Vec::with_capacity(c_n);
    for (w, b) in per_channel {
        dw.extend(w);
        db.push(b);
    }
    let mut dx = vec![T::zero(); if need_dx { n * din.numel() } else { 0 }];
    if need_dx {
        dx.par_chunks_mut(pin.max(1)).enumerate().for_each(|(idx, dxp)| {
            let c = idx % c_n;
            let wk = &weight[c * ksz..(c + 1) * ksz];
            let gp = &g[idx * pout..(idx + 1) * pout];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gp[oy * wo + ox];
                    for ky in 0..win.kh {
                        let Some(iy) = Window::src(oy, ky, win.sh, win.ph, din.h) else { continue };
                        for kx in 0..win.kw {
                            if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, din.w) {
                                dxp[iy * din.w + ix] = dxp[iy * din.w + ix] + gv * wk[ky * win.kw + kx];
                            }
                        }
                    }
                }
            }
        });
    }
    (dx, dw, db)
}

pub(crate) struct BnTrainOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    /// Biased (population) batch variance.
    pub var: Vec<f64>,
}

/// Per-channel mean and biased variance over batch and space, accumulated in f64.
pub(crate) fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0;
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            s += x[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0;
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            q += x[off..off + hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m;
    }
    (mean, var)
}

pub(crate) fn bn_train_forward<T: Real>(
    x: &[T], n: usize, c: usize, hw: usize, gamma: &[T], beta: &[T], eps: f64,
) -> BnTrainOut<T> {
    let (mean, var) = channel_moments(x, n, c, hw);
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for smp in 0..n {
        for ch in 0..c {
            let off = (smp * c + ch) * hw;
            let mu = T::of(mean[ch]);
            for i in off..off + hw {
                let h = (x[i] - mu) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    BnTrainOut { y, xhat, inv_std, mean, var }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_eval_forward<T: Real>(
    x: &[T], n: usize, c: usize, hw: usize, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: f64,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for ch in 0..c {
        let inv = T::one() / (var[ch] + T::of(eps)).sqrt();
        let scale = gamma[ch] * inv;
        let shift = beta[ch] - mean[ch] * scale;
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            for i in off..off + hw {
                y[i] = x[i] * scale + shift;
            }
        }
    }
    y
}

/// Returns (dx, dgamma, dbeta) for a train-mode batch-norm.
pub(crate) fn bn_backward<T: Real>(
    g: &[T], xhat: &[T], inv_std: &[T], gamma: &[T], n: usize, c: usize, hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for smp in 0..n {
        for ch in 0..c {
            let off = (smp * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for ch in 0..c {
        let k = gamma[ch] * inv_std[ch] / m;
        for smp in 0..n {
            let off = (smp * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Max pooling; also returns the flat input-plane index of each maximum
/// (first one on ties).
pub(crate) fn maxpool_forward<T: Real>(x: &[T], n: usize, din: Dims, dout: Dims, win: Window) -> (Vec<T>, Vec<u32>) {
    let (pin, pout) = (din.h * din.w, dout.h * dout.w);
    let mut y = vec![T::zero(); n * dout.numel()];
    let mut arg = vec![0u32; y.len()];
    for idx in 0..n * din.c {
        let plane = &x[idx * pin..(idx + 1) * pin];
        for oy in 0..dout.h {
            for ox in 0..dout.w {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                let mut found = false;
                for ky in 0..win.kh {
                    let Some(iy) = Window::src(oy, ky, win.sh, win.ph, din.h) else { continue };
                    for kx in 0..win.kw {
                        if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, din.w) {
                            let v = plane[iy * din.w + ix];
                            if !found || v > best {
                                best = v;
                                best_i = iy * din.w + ix;
                                found = true;
                            }
                        }
                    }
                }
                let o = idx * pout + oy * dout.w + ox;
                y[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Real>(g: &[T], arg: &[u32], n: usize, din: Dims, dout: Dims) -> Vec<T> {
    let (pin, pout) = (din.h * din.w, dout.h * dout.w);
    let mut dx = vec![T::zero(); n * din.numel()];
    for idx in 0..n * din.c {
        for o in 0..pout {
            let i = idx * pin + arg[idx * pout + o] as usize;
            dx[i] = dx[i] + g[idx * pout + o];
        }
    }
    dx
}

/// Average pooling; padded taps count toward the divisor.
pub(crate) fn avgpool_forward<T: Real>(x: &[T], n: usize, din: Dims, dout: Dims, win: Window) -> Vec<T> {
    let (pin, pout) = (din.h * din.w, dout.h * dout.w);
    let inv = T::one() / T::of((win.kh * win.kw) as f64);
    let mut y = vec![T::zero(); n * dout.numel()];
    for idx in 0..n * din.c {
        let plane = &x[idx * pin..(idx + 1) * pin];
        for oy in 0..dout.h {
            for ox in 0..dout.w {
                let mut acc = T::zero();
                for ky in 0..win.kh {
                    let Some(iy) = Window::src(oy, ky, win.sh, win.ph, din.h) else { continue };
                    for kx in 0..win.kw {
                        if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, din.w) {
                            acc = acc + plane[iy * din.w + ix];
                        }
                    }
                }
                y[idx * pout + oy * dout.w + ox] = acc * inv;
            }
        }
    }
    y
}

pub(crate) fn avgpool_backward<T: Real>(g: &[T], n: usize, din: Dims, dout: Dims, win: Window) -> Vec<T> {
    let (pin, pout) = (din.h * din.w, dout.h * dout.w);
    let inv = T::one() / T::of((win.kh * win.kw) as f64);
    let mut dx = vec![T::zero(); n * din.numel()];
    for idx in 0..n * din.c {
        let dxp = &mut dx[idx * pin..(idx + 1) * pin];
        for oy in 0..dout.h {
            for ox in 0..dout.w {
                let gv = g[idx * pout + oy * dout.w + ox] * inv;
                for ky in 0..win.kh {
                    let Some(iy) = Window::src(oy, ky, win.sh, win.ph, din.h) else { continue };
                    for kx in 0..win.kw {
                        if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, din.w) {
                            dxp[iy * din.w + ix] = dxp[iy * din.w + ix] + gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn gap_forward<T: Real>(x: &[T], n: usize, din: Dims) -> Vec<T> {
    let p = din.h * din.w;
    let inv = T::one() / T::of(p as f64);
    x.chunks(p).take(n * din.c).map(|pl| pl.iter().copied().sum::<T>() * inv).collect()
}

pub(crate) fn gap_backward<T: Real>(g: &[T], n: usize, din: Dims) -> Vec<T> {
    let p = din.h * din.w;
    let inv = T::one() / T::of(p as f64);
    let mut dx = Vec::with_capacity(n * din.numel());
    for &gv in &g[..n * din.c] {
        dx.extend(std::iter::repeat_n(gv * inv, p));
    }
    dx
}

/// `y (n x out) = x (n x in) * W^T + b`, W stored out x in.
pub(crate) fn fc_forward<T: Real>(x: &[T], n: usize, fin: usize, fout: usize, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); n * fout];
    gemm(n, fin, fout, x, false, weight, true, &mut y, false);
    if let Some(b) = bias {
        for row in y.chunks_mut(fout) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v = *v + *bb;
            }
        }
    }
    y
}

/// Returns (dx, dweight, dbias).
pub(crate) fn fc_backward<T: Real>(
    x: &[T], g: &[T], n: usize, fin: usize, fout: usize, weight: &[T], need_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); fout * fin];
    gemm(fout, n, fin, g, true, x, false, &mut dw, false);
    let mut db = vec![T::zero(); fout];
    for row in g.chunks(fout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d = *d + *v;
        }
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = vec![T::zero(); n * fin];
        gemm(n, fout, fin, g, false, weight, false, &mut dx, false);
    }
    (dx, dw, db)
}
