//! Multi-head scaled dot-product attention as a single tape node.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayD, Ix3};

use crate::fused::softmax_in_place;
use crate::{Real, Tensor};

/// Output of [`Tensor::attention`].
pub struct Attention<'g, T: Real> {
    /// `[batch, tq, channels]`
    pub out: Tensor<'g, T>,
    /// Row-stochastic weights `[batch, heads, tq, tk]`.
    pub probs: Arc<Array4<T>>,
}

impl<'g, T: Real> Tensor<'g, T> {
    /// Attention of `self` (queries, `[b, tq, c]`) over `keys`/`values`
    /// (`[b, tk, c]`) with `heads` heads of width `c / heads`.
    ///
    /// `mask` is an additive constant of shape `[1 | b, tq, tk]`; `-inf`
    /// entries receive exactly zero weight. `bias` is a learnable additive
    /// term of shape `[heads, tq, tk]` shared across the batch.
    pub fn attention(
        self,
        keys: Tensor<'g, T>,
        values: Tensor<'g, T>,
        heads: usize,
        mask: Option<Arc<Array3<T>>>,
        bias: Option<Tensor<'g, T>>,
    ) -> Attention<'g, T> {
        let (qv, kv, vv) = (self.value(), keys.value(), values.value());
        let q3 = qv.view().into_dimensionality::<Ix3>().expect("q [b,tq,c]");
        let k3 = kv.view().into_dimensionality::<Ix3>().expect("k [b,tk,c]");
        let v3 = vv.view().into_dimensionality::<Ix3>().expect("v [b,tk,c]");
        let (b, tq, c) = q3.dim();
        let tk = k3.shape()[1];
        assert_eq!(k3.shape(), &[b, tk, c]);
        assert_eq!(v3.shape(), &[b, tk, c]);
        assert!(heads > 0 && c % heads == 0, "heads must divide channels");
        let hd = c / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        if let Some(m) = &mask {
            assert!(m.shape()[0] == 1 || m.shape()[0] == b);
            assert_eq!(&m.shape()[1..], &[tq, tk]);
        }
        let bias_v = bias.map(|t| t.value());
        if let Some(bv) = &bias_v {
            assert_eq!(bv.shape(), &[heads, tq, tk]);
        }

        let mut probs = Array4::<T>::zeros((b, heads, tq, tk));
        let mut out = Array3::<T>::zeros((b, tq, c));
        let mut scores = Array2::<T>::zeros((tq, tk));
        for bi in 0..b {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let qh = q3.slice(s![bi, .., cols.clone()]);
                let kh = k3.slice(s![bi, .., cols.clone()]);
                general_mat_mul(scale, &qh, &kh.t(), T::zero(), &mut scores);
                if let Some(m) = &mask {
                    let mi = if m.shape()[0] == 1 { 0 } else { bi };
                    scores += &m.slice(s![mi, .., ..]);
                }
                if let Some(bv) = &bias_v {
                    let bv = bv.view().into_dimensionality::<Ix3>().unwrap();
                    scores += &bv.slice(s![h, .., ..]);
                }
                softmax_in_place(scores.as_slice_mut().unwrap(), tk);
                probs.slice_mut(s![bi, h, .., ..]).assign(&scores);
                let vh = v3.slice(s![bi, .., cols.clone()]);
                general_mat_mul(T::one(), &scores, &vh, T::zero(), &mut out.slice_mut(s![bi, .., cols]));
            }
        }
        let probs = Arc::new(probs);
        let saved = probs.clone();
        let mut inputs = vec![self, keys, values];
        if let Some(bt) = bias {
            inputs.push(bt);
        }
        let has_bias = bias.is_some();
        let out = self.g.op(
            out.into_dyn(),
            &inputs,
            Box::new(move |ctx| {
                let q3 = ctx.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
                let k3 = ctx.inputs[1].view().into_dimensionality::<Ix3>().unwrap();
                let v3 = ctx.inputs[2].view().into_dimensionality::<Ix3>().unwrap();
                let g3 = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let mut dq = Array3::<T>::zeros((b, tq, c));
                let mut dk = Array3::<T>::zeros((b, tk, c));
                let mut dv = Array3::<T>::zeros((b, tk, c));
                let mut dbias = has_bias.then(|| Array3::<T>::zeros((heads, tq, tk)));
                let mut dp = Array2::<T>::zeros((tq, tk));
                for bi in 0..b {
                    for h in 0..heads {
                        let cols = h * hd..(h + 1) * hd;
                        let p = saved.slice(s![bi, h, .., ..]);
                        let go = g3.slice(s![bi, .., cols.clone()]);
                        let vh = v3.slice(s![bi, .., cols.clone()]);
                        general_mat_mul(
                            T::one(),
                            &p.t(),
                            &go,
                            T::zero(),
                            &mut dv.slice_mut(s![bi, .., cols.clone()]),
                        );
                        general_mat_mul(T::one(), &go, &vh.t(), T::zero(), &mut dp);
                        // dS = P * (dP - rowsum(dP * P))
                        for (mut dr, pr) in dp.rows_mut().into_iter().zip(p.rows()) {
                            let dot: T = dr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum();
                            dr.iter_mut()
                                .zip(pr.iter())
                                .for_each(|(d, &pv)| *d = pv * (*d - dot));
                        }
                        if let Some(db) = dbias.as_mut() {
                            let mut slot = db.slice_mut(s![h, .., ..]);
                            slot += &dp;
                        }
                        let qh = q3.slice(s![bi, .., cols.clone()]);
                        let kh = k3.slice(s![bi, .., cols.clone()]);
                        general_mat_mul(
                            scale,
                            &dp,
                            &kh,
                            T::zero(),
                            &mut dq.slice_mut(s![bi, .., cols.clone()]),
                        );
                        general_mat_mul(
                            scale,
                            &dp.t(),
                            &qh,
                            T::zero(),
                            &mut dk.slice_mut(s![bi, .., cols]),
                        );
                    }
                }
                let mut grads = vec![
                    Some(dq.into_dyn()),
                    Some(dk.into_dyn()),
                    Some(dv.into_dyn()),
                ];
                if let Some(db) = dbias {
                    grads.push(Some(db.into_dyn()));
                }
                grads
            }),
        );
        Attention { out, probs }
    }
}

/// Convenience: additive mask from a boolean "blocked" matrix.
pub fn additive_mask<T: Real>(blocked: &ArrayD<bool>) -> Array3<T> {
    let shape = blocked.shape();
    let (tq, tk) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let b = blocked.len() / (tq * tk);
    let data: Vec<T> = blocked
        .iter()
        .map(|&x| if x { T::neg_infinity() } else { T::zero() })
        .collect();
    Array3::from_shape_vec((b, tq, tk), data).expect("mask shape")
}
