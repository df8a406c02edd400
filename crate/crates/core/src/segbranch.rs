//! Pixel embedding map, mask prediction by query dot products, and the
//! one-to-one class/box/mask instance outputs.

use docseg_autograd::{Graph, Real, Tensor};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{conv2d, linear, mlp, upsample2x, Init};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Width `D_m` of mask embeddings and of the pixel embedding map.
    pub mask_dim: usize,
    /// Sigmoid threshold for binary masks.
    pub mask_threshold: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            mask_dim: 64,
            mask_threshold: 0.5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_dim == 0 {
            return Err(Error::Config("segmentation.mask_dim must be positive".into()));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config("segmentation.mask_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `c4`: backbone stride-4 channels, `d`: encoder width.
pub fn init_segbranch(init: &mut Init, c4: usize, d: usize, d_mask: usize, num_classes: usize) {
    init.conv("seg.gamma", 1, c4, d);
    init.conv("seg.ethm.0", 3, d, d_mask);
    init.conv("seg.ethm.1", 3, d_mask, d_mask);
    init.conv("seg.ethm.2", 1, d_mask, d_mask);
    init.linear("seg.class", d, num_classes + 1);
    init.mlp("seg.mask_embed", &[d, d, d, d_mask]);
}

/// Per-pixel embeddings at a quarter of the input resolution.
#[derive(Clone, Copy, Debug)]
pub struct PixelEmbeddingMap<'g, T: Real> {
    /// `[h * w, D_m]`
    pub pem: Tensor<'g, T>,
    pub h: usize,
    pub w: usize,
}

impl<'g, T: Real> PixelEmbeddingMap<'g, T> {
    pub fn to_chw(&self) -> Array3<T> {
        FeatureMap { tokens: self.pem, h: self.h, w: self.w }.to_chw()
    }
}

/// `gamma(S_b) + psi(T_e8)`: channel-mapped stride-4 backbone features plus
/// the upsampled stride-8 encoder tokens.
pub fn fuse<'g, T: Real>(g: &'g Graph<T>, s_b: &FeatureMap<'g, T>, t_e8: &FeatureMap<'g, T>) -> Result<FeatureMap<'g, T>> {
    if (2 * t_e8.h, 2 * t_e8.w) != (s_b.h, s_b.w) {
        return Err(Error::Shape(format!(
            "upsampled {}x{} encoder map does not match {}x{} backbone map",
            2 * t_e8.h,
            2 * t_e8.w,
            s_b.h,
            s_b.w
        )));
    }
    let mapped = conv2d(g, "seg.gamma", s_b.tokens, s_b.h, s_b.w, 1);
    if mapped.dim(1) != t_e8.channels() {
        return Err(Error::Shape(format!("channel mismatch {} vs {}", mapped.dim(1), t_e8.channels())));
    }
    Ok(FeatureMap {
        tokens: mapped + upsample2x(t_e8.tokens, t_e8.h, t_e8.w),
        h: s_b.h,
        w: s_b.w,
    })
}

/// Segmentation head: two 3x3 convolutions with GELU, then a 1x1 projection.
pub fn ethm<'g, T: Real>(g: &'g Graph<T>, x: &FeatureMap<'g, T>) -> FeatureMap<'g, T> {
    let (h, w) = (x.h, x.w);
    let t = conv2d(g, "seg.ethm.0", x.tokens, h, w, 3).gelu();
    let t = conv2d(g, "seg.ethm.1", t, h, w, 3).gelu();
    FeatureMap { tokens: conv2d(g, "seg.ethm.2", t, h, w, 1), h, w }
}

pub fn build_pem<'g, T: Real>(g: &'g Graph<T>, s_b: &FeatureMap<'g, T>, t_e8: &FeatureMap<'g, T>) -> Result<PixelEmbeddingMap<'g, T>> {
    let out = ethm(g, &fuse(g, s_b, t_e8)?);
    Ok(PixelEmbeddingMap { pem: out.tokens, h: out.h, w: out.w })
}

/// `mask[q, p] = sum_d Q_e[q, d] pem[p, d]`, flattened to `[Q, h * w]`.
pub fn predict_masks<'g, T: Real>(q_e: Tensor<'g, T>, pem: &PixelEmbeddingMap<'g, T>) -> Result<Tensor<'g, T>> {
    if q_e.ndim() != 2 || q_e.dim(1) != pem.pem.dim(1) {
        return Err(Error::Shape(format!(
            "query embeddings {:?} do not match pixel embedding width {}",
            q_e.shape(),
            pem.pem.dim(1)
        )));
    }
    Ok(q_e.matmul_t(false, pem.pem, true))
}

/// Class logits (background last), boxes and mask logits for every query.
pub struct InstancePrediction<'g, T: Real> {
    /// `[Q, C + 1]`
    pub class_logits: Tensor<'g, T>,
    /// `[Q, 4]`
    pub boxes: Tensor<'g, T>,
    /// `[Q, h * w]`
    pub mask_logits: Tensor<'g, T>,
    pub h: usize,
    pub w: usize,
}

impl<'g, T: Real> InstancePrediction<'g, T> {
    pub fn len(&self) -> usize {
        self.class_logits.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mask_logits_3d(&self) -> Array3<T> {
        let v = self.mask_logits.value();
        Array3::from_shape_fn((self.len(), self.h, self.w), |(q, y, x)| v[[q, y * self.w + x]])
    }

    /// Outputs of the given queries only.
    pub fn select(&self, idx: &[usize]) -> InstancePrediction<'g, T> {
        InstancePrediction {
            class_logits: self.class_logits.index_rows(idx),
            boxes: self.boxes.index_rows(idx),
            mask_logits: self.mask_logits.index_rows(idx),
            h: self.h,
            w: self.w,
        }
    }
}

/// Maps each decoder embedding to exactly one (class, box, mask) triple.
pub fn class_instance_map<'g, T: Real>(
    g: &'g Graph<T>,
    hidden: Tensor<'g, T>,
    boxes: Tensor<'g, T>,
    pem: &PixelEmbeddingMap<'g, T>,
) -> Result<InstancePrediction<'g, T>> {
    if hidden.dim(0) != boxes.dim(0) {
        return Err(Error::Shape("one box per query embedding required".into()));
    }
    let class_logits = linear(g, "seg.class", hidden);
    let q_e = mlp(g, "seg.mask_embed", hidden, 3);
    Ok(InstancePrediction {
        class_logits,
        boxes,
        mask_logits: predict_masks(q_e, pem)?,
        h: pem.h,
        w: pem.w,
    })
}

/// One kept instance at full image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Array2<bool>,
}

/// Bilinear resize of a logit map by an integer factor (half-pixel centres,
/// edge clamping).
pub fn upsample_logits(src: ArrayView2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let tap = |i: usize, n: usize| {
        let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    Array2::from_shape_fn((h * factor, w * factor), |(y, x)| {
        let (y0, y1, fy) = tap(y, h);
        let (x0, x1, fx) = tap(x, w);
        (1.0 - fy) * ((1.0 - fx) * src[[y0, x0]] + fx * src[[y0, x1]]) + fy * ((1.0 - fx) * src[[y1, x0]] + fx * src[[y1, x1]])
    })
}

/// Inference filter: drops queries whose best class is background, scores
/// the rest by the sigmoid of their best foreground logit, and keeps those
/// at or above `score_threshold`, best first.
pub fn filter_instances<T: Real>(
    pred: &InstancePrediction<'_, T>,
    mask_threshold: f64,
    score_threshold: f64,
    upsample: usize,
) -> Vec<Detection> {
    let logits = pred.class_logits.value();
    let boxes = pred.boxes.value();
    let masks = pred.mask_logits_3d();
    let bg = logits.shape()[1] - 1;
    let cut = (mask_threshold / (1.0 - mask_threshold)).ln();
    let mut out = Vec::new();
    for q in 0..pred.len() {
        let row: Vec<f64> = (0..=bg).map(|c| logits[[q, c]].f64()).collect();
        let (best, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
        if best == bg {
            continue;
        }
        let score = 1.0 / (1.0 + (-row[best]).exp());
        if score < score_threshold {
            continue;
        }
        let m = masks.index_axis(ndarray::Axis(0), q).mapv(|v| v.f64());
        let mask = upsample_logits(m.view(), upsample).mapv(|v| v > cut);
        out.push(Detection {
            class_id: best,
            score,
            bbox: BBox::new(boxes[[q, 0]].f64(), boxes[[q, 1]].f64(), boxes[[q, 2]].f64(), boxes[[q, 3]].f64()),
            mask,
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use docseg_autograd::gradcheck::{central_difference, relative_error};
    use docseg_autograd::ParamStore;
    use ndarray::{arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, scale: f64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
    }

    fn params(c4: usize, d: usize, dm: usize, seed: u64) -> ParamStore<f64> {
        let mut init = Init::new(seed);
        init_segbranch(&mut init, c4, d, dm, 3);
        init.finish()
    }

    #[test]
    fn identity_gamma_and_zero_encoder_map_pass_backbone_features_through() {
        let mut ps = params(4, 4, 4, 0);
        let mut eye = ArrayD::zeros(IxDyn(&[4, 4]));
        for i in 0..4 {
            eye[[i, i]] = 1.0;
        }
        ps.insert("seg.gamma.w", eye);
        ps.insert("seg.gamma.b", ArrayD::zeros(IxDyn(&[4])));
        let g = Graph::inference(&ps);
        let sb = random(&[24, 4], 1, 1.0);
        let s_b = FeatureMap { tokens: g.constant(sb.clone()), h: 4, w: 6 };
        let t = FeatureMap { tokens: g.constant(ArrayD::zeros(IxDyn(&[6, 4]))), h: 2, w: 3 };
        let fused = fuse(&g, &s_b, &t).unwrap();
        assert_eq!(fused.tokens.to_vec(), sb.iter().copied().collect::<Vec<_>>());
        let pem = build_pem(&g, &s_b, &t).unwrap();
        assert_eq!((pem.h, pem.w, pem.pem.dim(1)), (4, 6, 4));
        assert_eq!(pem.to_chw().dim(), (4, 4, 6));
    }

    #[test]
    fn constant_encoder_map_upsamples_to_a_constant() {
        let mut ps = params(2, 3, 4, 0);
        ps.insert("seg.gamma.w", ArrayD::zeros(IxDyn(&[2, 3])));
        ps.insert("seg.gamma.b", ArrayD::zeros(IxDyn(&[3])));
        let g = Graph::inference(&ps);
        let s_b = FeatureMap { tokens: g.constant(random(&[40, 2], 1, 1.0)), h: 4, w: 10 };
        let t = FeatureMap { tokens: g.constant(ArrayD::from_elem(IxDyn(&[10, 3]), 0.7)), h: 2, w: 5 };
        assert!(fuse(&g, &s_b, &t).unwrap().tokens.to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let bad = FeatureMap { tokens: g.constant(ArrayD::zeros(IxDyn(&[12, 3]))), h: 3, w: 4 };
        assert!(matches!(fuse(&g, &s_b, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pem_gradient() {
        let mut ps = params(3, 4, 2, 5);
        ps.insert("sb", random(&[16, 3], 6, 1.0));
        ps.insert("te", random(&[4, 4], 7, 1.0));
        let w = random(&[16, 2], 8, 1.0);
        fn run<'g>(g: &'g Graph<f64>, w: &ArrayD<f64>) -> Tensor<'g, f64> {
            let s_b = FeatureMap { tokens: g.param("sb"), h: 4, w: 4 };
            let t = FeatureMap { tokens: g.param("te"), h: 2, w: 2 };
            (build_pem(g, &s_b, &t).unwrap().pem * g.constant(w.clone())).sum_all()
        }
        let g = Graph::new(&ps);
        let grads = g.backward(run(&g, &w));
        for name in ["sb", "te", "seg.gamma.w", "seg.gamma.b", "seg.ethm.0.w", "seg.ethm.1.w", "seg.ethm.2.w", "seg.ethm.2.b"] {
            let a: Vec<f64> = grads.param(name).unwrap().iter().copied().collect();
            for i in (0..a.len()).step_by(3) {
                let n = central_difference(&ps, name, i, 1e-5, |p| run(&Graph::inference(p), &w).item());
                assert!(relative_error(a[i], n) < 1e-4, "{name}[{i}]");
            }
        }
    }

    fn mask_oracle(q: &ArrayD<f64>, pem: &ArrayD<f64>, h: usize, w: usize) -> Array3<f64> {
        let (nq, dm) = (q.shape()[0], q.shape()[1]);
        let mut out = Array3::zeros((nq, h, w));
        for qi in 0..nq {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for d in 0..dm {
                        s += q[[qi, d]] * pem[[y * w + x, d]];
                    }
                    out[[qi, y, x]] = s;
                }
            }
        }
        out
    }

    #[test]
    fn predict_masks_examples() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        let pemv = random(&[25, 4], 1, 1.0);
        let pem = PixelEmbeddingMap { pem: g.constant(pemv.clone()), h: 5, w: 5 };
        let mut e2 = ArrayD::zeros(IxDyn(&[1, 4]));
        e2[[0, 2]] = 1.0;
        let m = predict_masks(g.constant(e2), &pem).unwrap().to_vec();
        assert_eq!(m, pemv.index_axis(ndarray::Axis(1), 2).iter().copied().collect::<Vec<_>>());
        let z = predict_masks(g.constant(ArrayD::zeros(IxDyn(&[2, 4]))), &pem).unwrap().to_vec();
        assert!(z.iter().all(|&v| v == 0.0));
        let q = random(&[3, 4], 2, 1.0);
        let pred = InstancePrediction {
            class_logits: g.constant(ArrayD::zeros(IxDyn(&[3, 2]))),
            boxes: g.constant(ArrayD::zeros(IxDyn(&[3, 4]))),
            mask_logits: predict_masks(g.constant(q.clone()), &pem).unwrap(),
            h: 5,
            w: 5,
        };
        let diff = (&pred.mask_logits_3d() - &mask_oracle(&q, &pemv, 5, 5)).mapv(f64::abs);
        assert!(diff.iter().all(|&v| v < 1e-12));
        assert!(matches!(predict_masks(g.constant(ArrayD::zeros(IxDyn(&[2, 3]))), &pem), Err(Error::Shape(_))));
    }

    #[test]
    fn class_instance_map_is_one_to_one() {
        let ps = params(2, 6, 4, 3);
        let g = Graph::inference(&ps);
        let pem = PixelEmbeddingMap { pem: g.constant(random(&[12, 4], 1, 1.0)), h: 3, w: 4 };
        let row = random(&[1, 6], 2, 1.0);
        let mut hidden = random(&[5, 6], 3, 1.0);
        for r in [3, 4] {
            hidden.index_axis_mut(ndarray::Axis(0), r).assign(&row.index_axis(ndarray::Axis(0), 0));
        }
        let boxes = g.constant(ArrayD::from_elem(IxDyn(&[5, 4]), 0.5));
        let out = class_instance_map(&g, g.constant(hidden), boxes, &pem).unwrap();
        assert_eq!((out.len(), out.class_logits.dim(1), out.mask_logits.dim(1)), (5, 4, 12));
        let (c, m) = (out.class_logits.value(), out.mask_logits.value());
        let row = |a: &ArrayD<f64>, r: usize| a.index_axis(ndarray::Axis(0), r).to_owned();
        assert_eq!(row(&c, 3), row(&c, 4));
        assert_eq!(row(&m, 3), row(&m, 4));
    }

    #[test]
    fn filter_drops_background_and_respects_score_threshold() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        // 2 classes + background
        let logits = arr2(&[[3.0, -1.0, 0.0], [0.0, 1.0, 4.0], [-2.0, 0.5, -3.0]]).into_dyn();
        let pred = InstancePrediction {
            class_logits: g.constant(logits),
            boxes: g.constant(ArrayD::from_elem(IxDyn(&[3, 4]), 0.25)),
            mask_logits: g.constant(random(&[3, 4], 4, 1.0)),
            h: 2,
            w: 2,
        };
        assert_eq!(pred.len(), 3);
        let kept = filter_instances(&pred, 0.5, 0.0, 4);
        assert_eq!(kept.iter().map(|d| d.class_id).collect::<Vec<_>>(), vec![0, 1]);
        assert!((kept[0].score - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
        assert_eq!(kept[0].mask.dim(), (8, 8));
        assert!(filter_instances(&pred, 0.5, 1.01, 4).is_empty());
    }

    #[test]
    fn bilinearity() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        let (q1, q2, p1, p2) = (random(&[3, 4], 1, 1.0), random(&[3, 4], 2, 1.0), random(&[9, 4], 3, 1.0), random(&[9, 4], 4, 1.0));
        let m = |q: &ArrayD<f64>, p: &ArrayD<f64>| {
            let pem = PixelEmbeddingMap { pem: g.constant(p.clone()), h: 3, w: 3 };
            predict_masks(g.constant(q.clone()), &pem).unwrap().value().as_ref().clone()
        };
        let (a, b) = (1.7, -0.3);
        let lhs = m(&(&q1 * a + &q2 * b), &p1);
        let rhs = m(&q1, &p1) * a + m(&q2, &p1) * b;
        assert!((&lhs - &rhs).iter().all(|v| v.abs() <= 1e-12 * (1.0 + rhs.iter().map(|x| x.abs()).fold(0.0, f64::max))));
        let lhs = m(&q1, &(&p1 * a + &p2 * b));
        let rhs = m(&q1, &p1) * a + m(&q1, &p2) * b;
        assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn upsampled_constant_and_ramp() {
        let c = Array2::from_elem((2, 3), 1.5);
        assert!(upsample_logits(c.view(), 4).iter().all(|&v| v == 1.5));
        let r = arr2(&[[0.0, 4.0]]);
        let u = upsample_logits(r.view(), 2);
        assert_eq!(u.row(0).to_vec(), vec![0.0, 1.0, 3.0, 4.0]);
    }
}
