use std::sync::Arc;

use super::Var;
use crate::{Scalar, Tensor};

/// Sentinel row index for [`Var::gather_rows`]: produces a zero row.
pub const NO_ROW: usize = usize::MAX;

/// Pointwise functions with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    /// tanh approximation
    Gelu,
    /// `elu(x) + 1`, the positive feature map of kernelized attention
    EluPlusOne,
    Exp,
    Ln,
    Square,
    Sigmoid,
    Neg,
    Recip,
    /// `max(x, floor)`; gradient is zero where clamped
    ClampMin(f64),
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Relu => x.max(T::zero()),
            Unary::Gelu => {
                let c = T::of(GELU_C);
                let inner = c * (x + T::of(0.044715) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
            Unary::EluPlusOne => {
                if x > T::zero() {
                    x + T::one()
                } else {
                    x.exp()
                }
            }
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Neg => -x,
            Unary::Recip => T::one() / x,
            Unary::ClampMin(f) => x.max(T::of(f)),
        }
    }

    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => {
                let c = T::of(GELU_C);
                let a = T::of(0.044715);
                let inner = c * (x + a * x * x * x);
                let th = inner.tanh();
                let dinner = c * (T::one() + T::of(3.0) * a * x * x);
                T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * dinner
            }
            Unary::EluPlusOne => {
                if x > T::zero() {
                    T::one()
                } else {
                    y
                }
            }
            Unary::Exp => y,
            Unary::Ln => T::one() / x,
            Unary::Square => T::of(2.0) * x,
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Neg => -T::one(),
            Unary::Recip => -y * y,
            Unary::ClampMin(f) => {
                if x > T::of(f) {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// `op(a)·op(b)` for 2-D tensors; `ta`/`tb` read the operand transposed.
pub(crate) fn mm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "matmul inner dimension mismatch: {:?} {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), rsa, csa, b.data(), rsb, csb, T::zero(), &mut out, n as isize, 1);
    Tensor::from_vec(&[m, n], out)
}

/// Batched [`mm`] over the leading axis of 3-D tensors.
pub(crate) fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (batch, ar, ac) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (batch2, br, bc) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(batch, batch2, "bmm batch mismatch");
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "bmm inner dimension mismatch");
    let mut out = vec![T::zero(); batch * m * n];
    let (sa, sb) = (ar * ac, br * bc);
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[i * sa..(i + 1) * sa],
            rsa,
            csa,
            &b.data()[i * sb..(i + 1) * sb],
            rsb,
            csb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            n as isize,
            1,
        );
    }
    Tensor::from_vec(&[batch, m, n], out)
}

fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let nd = shape.len();
    assert_eq!(axes.len(), nd, "permutation rank mismatch");
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let src = x.data();
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Tensor<T> {
    let (n, k) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = x.row(i);
        let valid = |j: usize| mask.map_or(true, |m| m[i * k + j]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut s = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) {
                let e = (v - mx).exp();
                out[i * k + j] = e;
                s += e;
            }
        }
        for o in &mut out[i * k..(i + 1) * k] {
            *o /= s;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn unary(self, f: Unary) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(|v| f.apply(v));
        let yv = Arc::new(y.clone());
        self.derive(
            y,
            &[self],
            Box::new(move |g| {
                let d: Vec<T> = x
                    .data()
                    .iter()
                    .zip(yv.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * f.derivative(xi, yi))
                    .collect();
                vec![Some(Tensor::from_vec(x.shape(), d))]
            }),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Unary::Relu)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(Unary::Ln)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Unary::Square)
    }

    pub fn add(self, o: Var<'t, T>) -> Var<'t, T> {
        let y = self.value().zip_map(&o.value(), |a, b| a + b);
        self.derive(y, &[self, o], Box::new(|g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, o: Var<'t, T>) -> Var<'t, T> {
        let y = self.value().zip_map(&o.value(), |a, b| a - b);
        self.derive(
            y,
            &[self, o],
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(self, o: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let y = a.zip_map(&b, |x, y| x * y);
        self.derive(
            y,
            &[self, o],
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |gi, bi| gi * bi)),
                    Some(g.zip_map(&a, |gi, ai| gi * ai)),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let y = self.value().scale(s);
        self.derive(y, &[self], Box::new(move |g| vec![Some(g.scale(s))]))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let y = self.value().map(|v| v + s);
        self.derive(y, &[self], Box::new(|g| vec![Some(g.clone())]))
    }

    /// Adds `b` (shape `[C]`) to every row of `self` (shape `[.., C]`).
    pub fn add_row(self, b: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(b.value().len(), c, "row bias length mismatch");
        let bv = b.value();
        let mut y = (*x).clone();
        for r in 0..y.rows() {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.derive(
            y,
            &[self, b],
            Box::new(move |g| {
                let mut gb = vec![T::zero(); c];
                for r in 0..g.rows() {
                    for (acc, &gv) in gb.iter_mut().zip(g.row(r)) {
                        *acc += gv;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(&bshape, gb))]
            }),
        )
    }

    /// Multiplies every row of `self` elementwise by `s` (shape `[C]`).
    pub fn mul_row(self, s: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let sv = s.value();
        let c = x.cols();
        assert_eq!(sv.len(), c, "row scale length mismatch");
        let mut y = (*x).clone();
        for r in 0..y.rows() {
            for (v, &sc) in y.row_mut(r).iter_mut().zip(sv.data()) {
                *v *= sc;
            }
        }
        let sshape = sv.shape().to_vec();
        self.derive(
            y,
            &[self, s],
            Box::new(move |g| {
                let mut gx = g.clone();
                let mut gs = vec![T::zero(); c];
                for r in 0..g.rows() {
                    let xr = x.row(r);
                    for (j, (gv, &gi)) in gx.row_mut(r).iter_mut().zip(g.row(r)).enumerate() {
                        *gv = gi * sv.data()[j];
                        gs[j] += gi * xr[j];
                    }
                }
                vec![Some(gx), Some(Tensor::from_vec(&sshape, gs))]
            }),
        )
    }

    /// Scales row `i` of `self` (`[N, C]`) by `s[i]` (`s` has `N` elements).
    pub fn mul_col(self, s: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let sv = s.value();
        let n = x.rows();
        assert_eq!(sv.len(), n, "column scale length mismatch");
        let mut y = (*x).clone();
        for r in 0..n {
            let f = sv.data()[r];
            for v in y.row_mut(r) {
                *v *= f;
            }
        }
        let sshape = sv.shape().to_vec();
        self.derive(
            y,
            &[self, s],
            Box::new(move |g| {
                let mut gx = g.clone();
                let mut gs = vec![T::zero(); n];
                for r in 0..n {
                    let f = sv.data()[r];
                    let xr = x.row(r);
                    let mut acc = T::zero();
                    for (j, v) in gx.row_mut(r).iter_mut().enumerate() {
                        acc += *v * xr[j];
                        *v *= f;
                    }
                    gs[r] = acc;
                }
                vec![Some(gx), Some(Tensor::from_vec(&sshape, gs))]
            }),
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.derive(
            Tensor::scalar(x.sum()),
            &[self],
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Sum over the last axis: `[.., C] → [..]`.
    pub fn sum_rows(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c) = (x.rows(), x.cols());
        let y: Vec<T> = (0..n).map(|r| x.row(r).iter().copied().sum()).collect();
        let out_shape = x.shape()[..x.shape().len().saturating_sub(1)].to_vec();
        let in_shape = x.shape().to_vec();
        self.derive(
            Tensor::from_vec(&out_shape, y),
            &[self],
            Box::new(move |g| {
                let mut d = Vec::with_capacity(n * c);
                for r in 0..n {
                    d.extend(std::iter::repeat(g.data()[r]).take(c));
                }
                vec![Some(Tensor::from_vec(&in_shape, d))]
            }),
        )
    }

    /// 2-D matrix product with optional transposed operands.
    pub fn matmul_ex(self, o: Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let y = mm(&a, &b, ta, tb);
        self.derive(
            y,
            &[self, o],
            Box::new(move |g| {
                let ga = if ta { mm(&b, g, tb, true) } else { mm(g, &b, false, !tb) };
                let gb = if tb { mm(g, &a, true, ta) } else { mm(&a, g, !ta, false) };
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn matmul(self, o: Var<'t, T>) -> Var<'t, T> {
        self.matmul_ex(o, false, false)
    }

    /// Batched matrix product on `[B, m, k]` operands.
    pub fn bmm(self, o: Var<'t, T>, ta: bool, tb: bool) -> Var<'t, T> {
        let (a, b) = (self.value(), o.value());
        let y = bmm(&a, &b, ta, tb);
        self.derive(
            y,
            &[self, o],
            Box::new(move |g| {
                let ga = if ta { bmm(&b, g, tb, true) } else { bmm(g, &b, false, !tb) };
                let gb = if tb { bmm(g, &a, true, ta) } else { bmm(&a, g, !ta, false) };
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `x·W + b` for `x: [N, Cin]`, `W: [Cin, Cout]`, `b: [Cout]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        self.derive(
            y,
            &[self],
            Box::new(move |g| vec![Some(g.clone().reshape(&old))]),
        )
    }

    /// Axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let y = permute_tensor(&x, axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.derive(
            y,
            &[self],
            Box::new(move |g| vec![Some(permute_tensor(g, &inv))]),
        )
    }

    pub fn transpose(self) -> Var<'t, T> {
        self.permute(&[1, 0])
    }

    /// Row gather on `[N, C]`: output row `m` is input row `idx[m]`,
    /// or zeros when `idx[m] == NO_ROW`.
    pub fn gather_rows(self, idx: Arc<Vec<usize>>) -> Var<'t, T> {
        let x = self.value();
        let (n, c) = (x.rows(), x.cols());
        let mut y = vec![T::zero(); idx.len() * c];
        for (m, &r) in idx.iter().enumerate() {
            if r != NO_ROW {
                assert!(r < n, "gather index {r} out of range {n}");
                y[m * c..(m + 1) * c].copy_from_slice(x.row(r));
            }
        }
        let in_shape = x.shape().to_vec();
        let out = Tensor::from_vec(&[idx.len(), c], y);
        self.derive(
            out,
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&in_shape);
                for (m, &r) in idx.iter().enumerate() {
                    if r != NO_ROW {
                        for (a, &b) in gx.row_mut(r).iter_mut().zip(g.row(m)) {
                            *a += b;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Adjoint of [`Var::gather_rows`]: an `[n, C]` var whose row `idx[m]`
    /// accumulates input row `m`; `NO_ROW` entries are dropped.
    pub fn scatter_rows(self, idx: Arc<Vec<usize>>, n: usize) -> Var<'t, T> {
        let x = self.value();
        let c = x.cols();
        assert_eq!(idx.len(), x.rows(), "scatter index length mismatch");
        let mut y = Tensor::zeros(&[n, c]);
        for (m, &r) in idx.iter().enumerate() {
            if r != NO_ROW {
                assert!(r < n, "scatter index {r} out of range {n}");
                for (a, &b) in y.row_mut(r).iter_mut().zip(x.row(m)) {
                    *a += b;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.derive(
            y,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![T::zero(); idx.len() * c];
                for (m, &r) in idx.iter().enumerate() {
                    if r != NO_ROW {
                        gx[m * c..(m + 1) * c].copy_from_slice(g.row(r));
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx))]
            }),
        )
    }

    /// Picks one element per `(row, col)` pair of a 2-D var → `[M]`.
    pub fn pick(self, at: Arc<Vec<(usize, usize)>>) -> Var<'t, T> {
        let x = self.value();
        let c = x.cols();
        let y: Vec<T> = at.iter().map(|&(r, j)| x.data()[r * c + j]).collect();
        let in_shape = x.shape().to_vec();
        self.derive(
            Tensor::from_vec(&[at.len()], y),
            &[self],
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&in_shape);
                for (m, &(r, j)) in at.iter().enumerate() {
                    gx.data_mut()[r * c + j] += g.data()[m];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenation along the last axis of equally-many-row vars.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].rows();
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut y = vec![T::zero(); n * total];
        for r in 0..n {
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.rows(), n, "concat_cols row mismatch");
                let w = v.cols();
                y[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
                off += w;
            }
        }
        let mut out_shape = vals[0].shape().to_vec();
        *out_shape.last_mut().unwrap() = total;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].derive(
            Tensor::from_vec(&out_shape, y),
            parts,
            Box::new(move |g| {
                let mut off = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (w, shape) in widths.iter().zip(&shapes) {
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    grads.push(Some(Tensor::from_vec(shape, d)));
                    off += w;
                }
                grads
            }),
        )
    }

    /// Concatenation along the first axis of `[Ni, C]` vars.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let c = vals[0].cols();
        let mut y = Vec::new();
        let mut lens = Vec::new();
        for v in &vals {
            assert_eq!(v.cols(), c, "concat_rows width mismatch");
            y.extend_from_slice(v.data());
            lens.push(v.len());
        }
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        let rows = y.len() / c.max(1);
        parts[0].derive(
            Tensor::from_vec(&[rows, c], y),
            parts,
            Box::new(move |g| {
                let mut off = 0;
                lens.iter()
                    .zip(&shapes)
                    .map(|(&l, s)| {
                        let t = Tensor::from_vec(s, g.data()[off..off + l].to_vec());
                        off += l;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Softmax over the last axis. Masked-out entries get probability 0;
    /// rows with no valid entry are all zero.
    pub fn softmax_rows(self, mask: Option<Arc<Vec<bool>>>) -> Var<'t, T> {
        let x = self.value();
        if let Some(m) = &mask {
            assert_eq!(m.len(), x.len(), "softmax mask size mismatch");
        }
        let y = softmax_forward(&x, mask.as_deref().map(|m| m.as_slice()));
        let yv = Arc::new(y.clone());
        self.derive(
            y,
            &[self],
            Box::new(move |g| {
                let (n, k) = (yv.rows(), yv.cols());
                let mut d = vec![T::zero(); n * k];
                for i in 0..n {
                    let p = yv.row(i);
                    let gr = g.row(i);
                    let dot: T = p.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        d[i * k + j] = p[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_vec(yv.shape(), d))]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c) = (x.rows(), x.cols());
        let (gv, bv) = (gamma.value(), beta.value());
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut y = vec![T::zero(); n * c];
        let cf = T::of(c as f64);
        for r in 0..n {
            let row = x.row(r);
            let mu = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let is = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        self.derive(
            Tensor::from_vec(&shape, y),
            &[self, gamma, beta],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); n * c];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..n {
                    let gr = g.row(r);
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..c {
                        let h = xhat[r * c + j];
                        let dh = gr[j] * gv.data()[j];
                        dg[j] += gr[j] * h;
                        db[j] += gr[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h;
                    }
                    for j in 0..c {
                        let h = xhat[r * c + j];
                        let dh = gr[j] * gv.data()[j];
                        dx[r * c + j] = inv_std[r] * (dh - sum_dh / cf - h * sum_dh_h / cf);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&shape, dx)),
                    Some(Tensor::from_vec(&gshape, dg)),
                    Some(Tensor::from_vec(&bshape, db)),
                ]
            }),
        )
    }
}
