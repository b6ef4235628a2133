//! Dense attention kernels over whole token sets.

use crate::autograd::{Unary, Var};
use crate::{Scalar, Tensor};

fn split_heads<'t, T: Scalar>(x: Var<'t, T>, heads: usize) -> Var<'t, T> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    x.reshape(&[n, heads, c / heads]).permute(&[1, 0, 2])
}

fn merge_heads<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let s = x.shape();
    let (h, n, d) = (s[0], s[1], s[2]);
    x.permute(&[1, 0, 2]).reshape(&[n, h * d])
}

/// Softmax attention of every query over every key, `1/sqrt(d)` scaling.
/// `q: [N, C]`, `k, v: [M, C]` → `[N, C]`.
pub fn global_attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Var<'t, T> {
    let c = q.shape()[1];
    assert_eq!(c % heads, 0, "channels not divisible by heads");
    let d = c / heads;
    let (qh, kh, vh) = (split_heads(q, heads), split_heads(k, heads), split_heads(v, heads));
    let p = qh
        .bmm(kh, false, true)
        .scale(T::one() / T::of(d as f64).sqrt())
        .softmax_rows(None);
    merge_heads(p.bmm(vh, false, false))
}

/// Kernelized attention with the `elu + 1` feature map:
/// `φ(q)·(φ(K)ᵀV) / (φ(q)·Σφ(K))`.
pub fn linear_attention<'t, T: Scalar>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Var<'t, T> {
    let n = q.shape()[0];
    let m = k.shape()[0];
    let c = q.shape()[1];
    let d = c / heads;
    let fq = split_heads(q.unary(Unary::EluPlusOne), heads);
    let fk = split_heads(k.unary(Unary::EluPlusOne), heads);
    let vh = split_heads(v, heads);
    let kv = fk.bmm(vh, true, false);
    let num = fq.bmm(kv, false, false);
    let ones = q.tape().constant(Tensor::full(&[heads, 1, m], T::one()));
    let ksum = ones.bmm(fk, false, false);
    let den = fq.bmm(ksum, false, true).reshape(&[heads * n]).unary(Unary::Recip);
    let out = num.reshape(&[heads * n, d]).mul_col(den).reshape(&[heads, n, d]);
    merge_heads(out)
}
