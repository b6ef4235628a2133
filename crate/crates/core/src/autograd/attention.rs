//! Gather-based sparse attention kernels: every query attends only to the
//! key rows listed in its candidate slots.

use std::sync::Arc;

use super::Var;
use crate::attention::CandidateSet;
use crate::{Scalar, Tensor};

/// Learned additive bias looked up per (query, slot): `table: [entries, heads]`,
/// `index[q * k + s]` selects the table row.
pub struct SlotBias<'t, T: Scalar> {
    pub table: Var<'t, T>,
    pub index: Arc<Vec<usize>>,
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Multi-head attention of `self` (queries, `[Q, C]`) over candidate rows
    /// of `keys`/`values` (`[N, C]`). Heads split channels evenly; scores are
    /// scaled by `1/sqrt(C/heads)`. Invalid slots are excluded from the softmax;
    /// queries without any valid slot produce a zero row.
    pub fn candidate_attention(
        self,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        cand: Arc<CandidateSet>,
        heads: usize,
        bias: Option<SlotBias<'t, T>>,
    ) -> Var<'t, T> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let (nq, c) = (q.rows(), q.cols());
        assert_eq!(cand.queries(), nq, "candidate set / query count mismatch");
        assert_eq!(k.cols(), c, "key width mismatch");
        assert_eq!(v.cols(), c, "value width mismatch");
        assert_eq!(k.rows(), v.rows(), "keys and values differ in length");
        assert!(cand.target_len() <= k.rows(), "candidate indices exceed key rows");
        assert_eq!(c % heads, 0, "channels not divisible by heads");
        let d = c / heads;
        let kk = cand.k();
        let scale = T::one() / T::of(d as f64).sqrt();
        let bias_val = bias.as_ref().map(|b| (b.table.value(), Arc::clone(&b.index)));
        if let Some((t, idx)) = &bias_val {
            assert_eq!(t.cols(), heads, "bias table must have one column per head");
            assert_eq!(idx.len(), nq * kk, "bias index size mismatch");
        }

        // probs laid out [Q, heads, k]
        let mut probs = vec![T::zero(); nq * heads * kk];
        let mut out = vec![T::zero(); nq * c];
        let (qs, ks, vs) = (q.data(), k.data(), v.data());
        let mut scores = vec![T::zero(); kk];
        for i in 0..nq {
            let slots = cand.slots(i);
            let valid = cand.valid_row(i);
            if !valid.iter().any(|&b| b) {
                continue;
            }
            for h in 0..heads {
                let qh = &qs[i * c + h * d..i * c + (h + 1) * d];
                let mut mx = T::neg_infinity();
                for s in 0..kk {
                    if !valid[s] {
                        continue;
                    }
                    let j = slots[s];
                    let kh = &ks[j * c + h * d..j * c + (h + 1) * d];
                    let mut dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
                    dot *= scale;
                    if let Some((t, idx)) = &bias_val {
                        dot += t.data()[idx[i * kk + s] * heads + h];
                    }
                    scores[s] = dot;
                    if dot > mx {
                        mx = dot;
                    }
                }
                let p = &mut probs[(i * heads + h) * kk..(i * heads + h + 1) * kk];
                let mut sum = T::zero();
                for s in 0..kk {
                    if valid[s] {
                        let e = (scores[s] - mx).exp();
                        p[s] = e;
                        sum += e;
                    }
                }
                let o = &mut out[i * c + h * d..i * c + (h + 1) * d];
                for s in 0..kk {
                    if !valid[s] {
                        continue;
                    }
                    p[s] /= sum;
                    let j = slots[s];
                    let vh = &vs[j * c + h * d..j * c + (h + 1) * d];
                    for (oo, &vv) in o.iter_mut().zip(vh) {
                        *oo += p[s] * vv;
                    }
                }
            }
        }

        let mut parents = vec![self, keys, values];
        if let Some(b) = &bias {
            parents.push(b.table);
        }
        let has_bias = bias.is_some();
        let (kshape, vshape) = (k.shape().to_vec(), v.shape().to_vec());
        self.derive(
            Tensor::from_vec(&[nq, c], out),
            &parents,
            Box::new(move |g| {
                let (qs, ks, vs, gs) = (q.data(), k.data(), v.data(), g.data());
                let mut gq = vec![T::zero(); nq * c];
                let mut gk = vec![T::zero(); k.len()];
                let mut gv = vec![T::zero(); v.len()];
                let mut gb = bias_val.as_ref().map(|(t, _)| vec![T::zero(); t.len()]);
                let mut ds = vec![T::zero(); kk];
                for i in 0..nq {
                    let slots = cand.slots(i);
                    let valid = cand.valid_row(i);
                    for h in 0..heads {
                        let p = &probs[(i * heads + h) * kk..(i * heads + h + 1) * kk];
                        let go = &gs[i * c + h * d..i * c + (h + 1) * d];
                        let mut dot_pd = T::zero();
                        for s in 0..kk {
                            if !valid[s] {
                                continue;
                            }
                            let j = slots[s];
                            let vh = &vs[j * c + h * d..j * c + (h + 1) * d];
                            let dp: T = go.iter().zip(vh).map(|(&a, &b)| a * b).sum();
                            ds[s] = dp;
                            dot_pd += p[s] * dp;
                            let gvh = &mut gv[j * c + h * d..j * c + (h + 1) * d];
                            for (a, &b) in gvh.iter_mut().zip(go) {
                                *a += p[s] * b;
                            }
                        }
                        for s in 0..kk {
                            if !valid[s] {
                                continue;
                            }
                            let dsc = p[s] * (ds[s] - dot_pd);
                            if let (Some(gb), Some((_, idx))) = (gb.as_mut(), bias_val.as_ref()) {
                                gb[idx[i * kk + s] * heads + h] += dsc;
                            }
                            let j = slots[s];
                            let f = dsc * scale;
                            for e in 0..d {
                                gq[i * c + h * d + e] += f * ks[j * c + h * d + e];
                                gk[j * c + h * d + e] += f * qs[i * c + h * d + e];
                            }
                        }
                    }
                }
                let mut res = vec![
                    Some(Tensor::from_vec(&[nq, c], gq)),
                    Some(Tensor::from_vec(&kshape, gk)),
                    Some(Tensor::from_vec(&vshape, gv)),
                ];
                if has_bias {
                    let (t, _) = bias_val.as_ref().unwrap();
                    res.push(Some(Tensor::from_vec(t.shape(), gb.unwrap())));
                }
                res
            }),
        )
    }

    /// Scaled dot products of each query row against its candidate rows of
    /// `targets`: `[Q, k]`, invalid slots hold 0.
    pub fn candidate_scores(self, targets: Var<'t, T>, cand: Arc<CandidateSet>, scale: T) -> Var<'t, T> {
        let (a, b) = (self.value(), targets.value());
        let (nq, c) = (a.rows(), a.cols());
        assert_eq!(cand.queries(), nq, "candidate set / query count mismatch");
        assert_eq!(b.cols(), c, "feature width mismatch");
        let kk = cand.k();
        let mut out = vec![T::zero(); nq * kk];
        for i in 0..nq {
            let ar = a.row(i);
            for (s, (&j, &ok)) in cand.slots(i).iter().zip(cand.valid_row(i)).enumerate() {
                if ok {
                    let dot: T = ar.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
                    out[i * kk + s] = dot * scale;
                }
            }
        }
        let bshape = b.shape().to_vec();
        self.derive(
            Tensor::from_vec(&[nq, kk], out),
            &[self, targets],
            Box::new(move |g| {
                let mut ga = vec![T::zero(); nq * c];
                let mut gb = vec![T::zero(); b.len()];
                for i in 0..nq {
                    let ar = a.row(i);
                    for (s, (&j, &ok)) in cand.slots(i).iter().zip(cand.valid_row(i)).enumerate() {
                        if !ok {
                            continue;
                        }
                        let f = g.data()[i * kk + s] * scale;
                        let br = b.row(j);
                        for e in 0..c {
                            ga[i * c + e] += f * br[e];
                            gb[j * c + e] += f * ar[e];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[nq, c], ga)),
                    Some(Tensor::from_vec(&bshape, gb)),
                ]
            }),
        )
    }
}
