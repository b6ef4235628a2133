//! Spatial operators on channel-last `[H, W, C]` feature maps.

use super::ops::mm;
use super::Var;
use crate::{Scalar, Tensor};

/// Geometry of a dense 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            pad: kernel / 2,
            dilation: 1,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: kernel / 2,
            dilation: 1,
        }
    }

    pub fn out_dim(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, g: ConvGeom) -> (Tensor<T>, usize, usize) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let k = g.kernel;
    let width = k * k * c;
    let mut col = vec![T::zero(); ho * wo * width];
    let src = x.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * width;
            for ky in 0..k {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * c;
                    let d = base + (ky * k + kx) * c;
                    col[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    (Tensor::from_vec(&[ho * wo, width], col), ho, wo)
}

fn col2im<T: Scalar>(col: &Tensor<T>, shape: &[usize], g: ConvGeom, ho: usize, wo: usize) -> Tensor<T> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let k = g.kernel;
    let width = k * k * c;
    let mut x = vec![T::zero(); h * w * c];
    let src = col.data();
    for oy in 0..ho {
        for ox in 0..wo {
            let base = (oy * wo + ox) * width;
            for ky in 0..k {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    let s = base + (ky * k + kx) * c;
                    for j in 0..c {
                        x[d + j] += src[s + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, x)
}

/// Per-axis linear interpolation taps for 2× bilinear upsampling
/// (half-pixel centers, edge clamped).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let f = s - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Dense convolution with zero padding. `self: [H, W, Cin]`,
    /// `w: [k, k, Cin, Cout]`, `b: [Cout]`.
    pub fn conv2d(self, w: Var<'t, T>, b: Option<Var<'t, T>>, g: ConvGeom) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        assert_eq!(x.shape().len(), 3, "conv2d expects [H, W, C]");
        let (cin, cout) = (wv.shape()[2], wv.shape()[3]);
        assert_eq!(x.shape()[2], cin, "conv2d channel mismatch");
        assert_eq!(wv.shape()[0], g.kernel);
        let wmat = (*wv).clone().reshape(&[g.kernel * g.kernel * cin, cout]);
        let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
        let (y, ho, wo) = if pointwise {
            let (h, wd) = (x.shape()[0], x.shape()[1]);
            let xm = (*x).clone().reshape(&[h * wd, cin]);
            (mm(&xm, &wmat, false, false), h, wd)
        } else {
            let (col, ho, wo) = im2col(&x, g);
            (mm(&col, &wmat, false, false), ho, wo)
        };
        let y = y.reshape(&[ho, wo, cout]);
        let xshape = x.shape().to_vec();
        let wshape = wv.shape().to_vec();
        let out = self.derive(
            y,
            &[self, w],
            Box::new(move |gy| {
                let gy2 = gy.clone().reshape(&[ho * wo, cout]);
                let (gx, gw) = if pointwise {
                    let xm = (*x).clone().reshape(&[ho * wo, cin]);
                    let gx = mm(&gy2, &wmat, false, true).reshape(&xshape);
                    (gx, mm(&xm, &gy2, true, false))
                } else {
                    let (col, _, _) = im2col(&x, g);
                    let gcol = mm(&gy2, &wmat, false, true);
                    (col2im(&gcol, &xshape, g, ho, wo), mm(&col, &gy2, true, false))
                };
                vec![Some(gx), Some(gw.reshape(&wshape))]
            }),
        );
        match b {
            Some(b) => out.add_row(b),
            None => out,
        }
    }

    /// Depthwise "same" convolution with edge-replicate padding.
    /// `self: [H, W, C]`, `w: [k, k, C]`, `b: [C]`.
    pub fn depthwise_conv2d(self, w: Var<'t, T>, b: Var<'t, T>, dilation: usize) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = wv.shape()[0];
        assert_eq!(wv.shape(), &[k, k, c], "depthwise weight must be [k, k, C]");
        let half = (dilation * (k - 1) / 2) as isize;
        // tap source coordinate per output coordinate, clamped to the map
        let taps = move |o: usize, t: usize, n: usize| -> usize {
            (o as isize - half + (t * dilation) as isize).clamp(0, n as isize - 1) as usize
        };
        let mut y = vec![T::zero(); h * wd * c];
        let (xs, ws) = (x.data(), wv.data());
        for oy in 0..h {
            for ky in 0..k {
                let iy = taps(oy, ky, h);
                for ox in 0..wd {
                    let yo = (oy * wd + ox) * c;
                    for kx in 0..k {
                        let ix = taps(ox, kx, wd);
                        let xo = (iy * wd + ix) * c;
                        let wo = (ky * k + kx) * c;
                        for ch in 0..c {
                            y[yo + ch] += ws[wo + ch] * xs[xo + ch];
                        }
                    }
                }
            }
        }
        let xshape = x.shape().to_vec();
        let out = self.derive(
            Tensor::from_vec(&xshape, y),
            &[self, w],
            Box::new(move |gy| {
                let mut gx = vec![T::zero(); h * wd * c];
                let mut gw = vec![T::zero(); k * k * c];
                let (xs, ws, gs) = (x.data(), wv.data(), gy.data());
                for oy in 0..h {
                    for ky in 0..k {
                        let iy = taps(oy, ky, h);
                        for ox in 0..wd {
                            let yo = (oy * wd + ox) * c;
                            for kx in 0..k {
                                let ix = taps(ox, kx, wd);
                                let xo = (iy * wd + ix) * c;
                                let wo = (ky * k + kx) * c;
                                for ch in 0..c {
                                    gx[xo + ch] += ws[wo + ch] * gs[yo + ch];
                                    gw[wo + ch] += xs[xo + ch] * gs[yo + ch];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&xshape, gx)),
                    Some(Tensor::from_vec(&[k, k, c], gw)),
                ]
            }),
        );
        out.add_row(b)
    }

    /// 2× bilinear upsampling of `[H, W, C]`.
    pub fn upsample2x(self) -> Var<'t, T> {
        let x = self.value();
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let mut y = vec![T::zero(); 4 * h * w * c];
        let xs = x.data();
        for (oy, &(y0, y1, a0, a1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, b0, b1)) in tx.iter().enumerate() {
                let o = (oy * 2 * w + ox) * c;
                let corners = [
                    ((y0 * w + x0) * c, a0 * b0),
                    ((y0 * w + x1) * c, a0 * b1),
                    ((y1 * w + x0) * c, a1 * b0),
                    ((y1 * w + x1) * c, a1 * b1),
                ];
                for (s, wt) in corners {
                    if wt == 0.0 {
                        continue;
                    }
                    let wt = T::of(wt);
                    for ch in 0..c {
                        y[o + ch] += wt * xs[s + ch];
                    }
                }
            }
        }
        self.derive(
            Tensor::from_vec(&[2 * h, 2 * w, c], y),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); h * w * c];
                let gs = g.data();
                for (oy, &(y0, y1, a0, a1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, b0, b1)) in tx.iter().enumerate() {
                        let o = (oy * 2 * w + ox) * c;
                        let corners = [
                            ((y0 * w + x0) * c, a0 * b0),
                            ((y0 * w + x1) * c, a0 * b1),
                            ((y1 * w + x0) * c, a1 * b0),
                            ((y1 * w + x1) * c, a1 * b1),
                        ];
                        for (s, wt) in corners {
                            if wt == 0.0 {
                                continue;
                            }
                            let wt = T::of(wt);
                            for ch in 0..c {
                                gx[s + ch] += wt * gs[o + ch];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[h, w, c], gx))]
            }),
        )
    }

    /// Non-overlapping `r×r` average pooling; partial border windows average
    /// the cells they contain.
    pub fn avg_pool(self, r: usize) -> Var<'t, T> {
        let x = self.value();
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (h.div_ceil(r), w.div_ceil(r));
        let count = move |o: usize, n: usize| (n.min((o + 1) * r) - o * r) as f64;
        let mut y = vec![T::zero(); ho * wo * c];
        let xs = x.data();
        for iy in 0..h {
            for ix in 0..w {
                let (oy, ox) = (iy / r, ix / r);
                let inv = T::of(1.0 / (count(oy, h) * count(ox, w)));
                let (s, d) = ((iy * w + ix) * c, (oy * wo + ox) * c);
                for ch in 0..c {
                    y[d + ch] += inv * xs[s + ch];
                }
            }
        }
        self.derive(
            Tensor::from_vec(&[ho, wo, c], y),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); h * w * c];
                let gs = g.data();
                for iy in 0..h {
                    for ix in 0..w {
                        let (oy, ox) = (iy / r, ix / r);
                        let inv = T::of(1.0 / (count(oy, h) * count(ox, w)));
                        let (s, d) = ((iy * w + ix) * c, (oy * wo + ox) * c);
                        for ch in 0..c {
                            gx[s + ch] = inv * gs[d + ch];
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&[h, w, c], gx))]
            }),
        )
    }
}
