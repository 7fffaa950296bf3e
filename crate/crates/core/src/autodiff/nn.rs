//! Image-shaped operations. All spatial tensors are NHWC.

use super::tensor::gemm;
use super::{Tensor, Var};

fn nhwc(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NHWC tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (n, h, w, c) = nhwc(x);
    let p = k / 2;
    let kc = k * k * c;
    let xd = x.data();
    let mut cols = vec![0.0; n * h * w * kc];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kc;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - p as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], shape: (usize, usize, usize, usize), k: usize) -> Tensor {
    let (n, h, w, c) = shape;
    let p = k / 2;
    let kc = k * k * c;
    let mut out = Tensor::zeros(&[n, h, w, c]);
    let od = out.data_mut();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kc;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - p as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for j in 0..c {
                            od[dst + j] += cols[src + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear source taps for resizing an axis of length `src` to `dst`
/// (half-pixel centers, edge clamped).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a plain NHWC tensor (no graph).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, h, w, c) = nhwc(x);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let xd = x.data();
    let mut out = vec![0.0; n * out_h * out_w * c];
    for b in 0..n {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let o = ((b * out_h + oy) * out_w + ox) * c;
                let taps = [
                    (y0, x0, (1.0 - ly) * (1.0 - lx)),
                    (y0, x1, (1.0 - ly) * lx),
                    (y1, x0, ly * (1.0 - lx)),
                    (y1, x1, ly * lx),
                ];
                for (yy, xx, wgt) in taps {
                    if wgt == 0.0 {
                        continue;
                    }
                    let s = ((b * h + yy) * w + xx) * c;
                    for j in 0..c {
                        out[o + j] += wgt * xd[s + j];
                    }
                }
            }
        }
    }
    Tensor::new(&[n, out_h, out_w, c], out)
}

impl<'t> Var<'t> {
    /// Stride-1 "same" convolution. `w: [k*k*c_in, c_out]` laid out as
    /// `(ky, kx, c_in)` rows, `b: [c_out]`.
    pub fn conv2d(&self, w: &Var<'t>, b: &Var<'t>, k: usize) -> Var<'t> {
        assert!(k % 2 == 1, "odd kernel sizes only");
        let x = self.value();
        let (n, h, wd, c) = nhwc(&x);
        let wv = w.value();
        let kc = k * k * c;
        assert_eq!(wv.shape()[0], kc, "conv weight rows must be k*k*c_in");
        let o = wv.shape()[1];
        let bv = b.value();
        let cols = im2col(&x, k);
        let m = n * h * wd;
        let mut out = Vec::with_capacity(m * o);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        gemm(m, kc, o, &cols, false, wv.data(), false, &mut out, 1.0);
        let (x_needs, w_needs, b_needs) = (self.requires_grad(), w.requires_grad(), b.requires_grad());
        self.op(
            Tensor::new(&[n, h, wd, o], out),
            &[*self, *w, *b],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let gw = w_needs.then(|| {
                    let mut gw = vec![0.0; kc * o];
                    gemm(kc, m, o, &cols, true, gd, false, &mut gw, 0.0);
                    Tensor::new(&[kc, o], gw)
                });
                let gb = b_needs.then(|| {
                    let mut gb = vec![0.0; o];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *acc += v;
                        }
                    }
                    Tensor::new(&[o], gb)
                });
                let gx = x_needs.then(|| {
                    let mut gcols = vec![0.0; m * kc];
                    gemm(m, o, kc, gd, false, p[1].data(), true, &mut gcols, 0.0);
                    col2im(&gcols, (n, h, wd, c), k)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn max_pool2(&self) -> Var<'t> {
        let x = self.value();
        let (n, h, w, c) = nhwc(&x);
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut arg = vec![0usize; out.len()];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    for j in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + j;
                            if xd[s] > best {
                                best = xd[s];
                                bi = s;
                            }
                        }
                        let o = ((b * oh + y) * ow + xx) * c + j;
                        out[o] = best;
                        arg[o] = bi;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.op(
            Tensor::new(&[n, oh, ow, c], out),
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for (o, &s) in arg.iter().enumerate() {
                    gd[s] += g.data()[o];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Averages over a `grid x grid` partition of the spatial extent.
    pub fn adaptive_avg_pool(&self, grid: usize) -> Var<'t> {
        let x = self.value();
        let (n, h, w, c) = nhwc(&x);
        let ranges = |len: usize| -> Vec<(usize, usize)> {
            (0..grid)
                .map(|i| (i * len / grid, ((i + 1) * len).div_ceil(grid).max(i * len / grid + 1)))
                .collect()
        };
        let (ry, rx) = (ranges(h), ranges(w));
        let xd = x.data();
        let mut out = vec![0.0; n * grid * grid * c];
        for b in 0..n {
            for (gy, &(y0, y1)) in ry.iter().enumerate() {
                for (gx, &(x0, x1)) in rx.iter().enumerate() {
                    let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                    let o = ((b * grid + gy) * grid + gx) * c;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let s = ((b * h + y) * w + xx) * c;
                            for j in 0..c {
                                out[o + j] += xd[s + j] * inv;
                            }
                        }
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.op(
            Tensor::new(&[n, grid, grid, c], out),
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for b in 0..n {
                    for (gy, &(y0, y1)) in ry.iter().enumerate() {
                        for (gxi, &(x0, x1)) in rx.iter().enumerate() {
                            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                            let o = ((b * grid + gy) * grid + gxi) * c;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let s = ((b * h + y) * w + xx) * c;
                                    for j in 0..c {
                                        gd[s + j] += g.data()[o + j] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Per-channel normalization over N, H, W.
    ///
    /// With `running = None` the batch statistics are used and returned so the
    /// caller can update its running averages; otherwise the given
    /// `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> (Var<'t>, Option<(Vec<f64>, Vec<f64>)>) {
        let x = self.value();
        let c = x.cols();
        let m = x.rows();
        let xd = x.data();
        let (mean, var, batch) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                for r in 0..m {
                    for j in 0..c {
                        mean[j] += xd[r * c + j];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; c];
                for r in 0..m {
                    for j in 0..c {
                        let d = xd[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * c];
        for r in 0..m {
            for j in 0..c {
                xhat[r * c + j] = (xd[r * c + j] - mean[j]) * inv_std[j];
            }
        }
        let (gv, bv) = (gamma.value(), beta.value());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv.data()[i % c] + bv.data()[i % c])
            .collect();
        let shape = x.shape().to_vec();
        let stats = batch.then(|| (mean.clone(), var.clone()));
        let y = self.op(
            Tensor::new(&shape, out),
            &[*self, *gamma, *beta],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let gam = p[1].data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for r in 0..m {
                    for j in 0..c {
                        ggamma[j] += gd[r * c + j] * xhat[r * c + j];
                        gbeta[j] += gd[r * c + j];
                    }
                }
                let mut gx = vec![0.0; m * c];
                if batch {
                    let mf = m as f64;
                    for r in 0..m {
                        for j in 0..c {
                            let dxhat = gd[r * c + j] * gam[j];
                            gx[r * c + j] = inv_std[j] / mf
                                * (mf * dxhat
                                    - gbeta[j] * gam[j]
                                    - xhat[r * c + j] * ggamma[j] * gam[j]);
                        }
                    }
                } else {
                    for r in 0..m {
                        for j in 0..c {
                            gx[r * c + j] = gd[r * c + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&shape, gx)),
                    Some(Tensor::new(&[c], ggamma)),
                    Some(Tensor::new(&[c], gbeta)),
                ]
            }),
        );
        (y, stats)
    }

    /// Bilinear resize to `out_h x out_w`.
    pub fn upsample_bilinear(&self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (n, h, w, c) = nhwc(&x);
        if (h, w) == (out_h, out_w) {
            return *self;
        }
        let out = resize_bilinear(&x, out_h, out_w);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let in_shape = x.shape().to_vec();
        self.op(
            out,
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for b in 0..n {
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let o = ((b * out_h + oy) * out_w + ox) * c;
                            let taps = [
                                (y0, x0, (1.0 - ly) * (1.0 - lx)),
                                (y0, x1, (1.0 - ly) * lx),
                                (y1, x0, ly * (1.0 - lx)),
                                (y1, x1, ly * lx),
                            ];
                            for (yy, xx, wgt) in taps {
                                if wgt == 0.0 {
                                    continue;
                                }
                                let s = ((b * h + yy) * w + xx) * c;
                                for j in 0..c {
                                    gd[s + j] += wgt * g.data()[o + j];
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
