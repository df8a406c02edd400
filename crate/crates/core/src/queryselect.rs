//! Encoder-output heads, top-k query selection, the low- and high-level
//! contrastive projections with their objectives, and mask-derived anchors.

use docseg_autograd::{Graph, Real, Tensor};
use ndarray::{Array2, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{tight_box, BBox};
use crate::error::{Error, Result};
use crate::nn::{linear, mlp, Init};
use crate::transformer::TokenSequence;

/// Named dataset presets. They only select the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Publaynet,
    Prima,
    Hj,
    Tablebank,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Publaynet, Preset::Prima, Preset::Hj, Preset::Tablebank];

    pub fn tau(self) -> f64 {
        match self {
            Preset::Publaynet => 0.02,
            Preset::Prima => 0.6,
            Preset::Hj => 0.1,
            Preset::Tablebank => 0.2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Publaynet => "publaynet",
            Preset::Prima => "prima",
            Preset::Hj => "hj",
            Preset::Tablebank => "tablebank",
        }
    }
}

/// Temperature given either as a number or as a preset name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tau {
    Value(f64),
    Preset(Preset),
}

impl Tau {
    pub fn value(self) -> f64 {
        match self {
            Tau::Value(v) => v,
            Tau::Preset(p) => p.tau(),
        }
    }
}

/// Which (detection, segmentation) embedding pairs count as positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowPairs {
    /// Embeddings of the same selected token.
    #[default]
    SameToken,
    /// Every detection embedding against every segmentation embedding.
    AllPairs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Overrides the temperature implied by the dataset preset.
    pub tau: Option<Tau>,
    pub low_dim: usize,
    pub low_pairs: LowPairs,
    pub w_low: f64,
    pub w_high: f64,
    /// Probability threshold for mask-derived anchors.
    pub anchor_threshold: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: None,
            low_dim: 32,
            low_pairs: LowPairs::SameToken,
            w_low: 1.0,
            w_high: 1.0,
            anchor_threshold: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn tau_for(&self, preset: Preset) -> f64 {
        self.tau.map_or(preset.tau(), Tau::value)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.tau {
            if !(t.value() > 0.0) {
                return Err(Error::Config(format!("contrastive.tau must be positive, got {}", t.value())));
            }
        }
        if self.low_dim == 0 {
            return Err(Error::Config("contrastive.low_dim must be positive".into()));
        }
        if self.w_low < 0.0 || self.w_high < 0.0 {
            return Err(Error::Config("contrastive weights must be non-negative".into()));
        }
        if !(self.anchor_threshold > 0.0 && self.anchor_threshold < 1.0) {
            return Err(Error::Config("contrastive.anchor_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrototypeConfig {
    pub m: usize,
    pub momentum: f64,
    pub phi_floor: f64,
    pub phi_ceil: f64,
    pub alpha: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            m: 16,
            momentum: 0.99,
            phi_floor: 0.05,
            phi_ceil: 2.0,
            alpha: 10.0,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("prototypes.m must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("prototypes.momentum must lie in [0, 1)".into()));
        }
        if !(self.phi_floor > 0.0 && self.phi_floor <= self.phi_ceil) {
            return Err(Error::Config("prototypes need 0 < phi_floor <= phi_ceil".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("prototypes.alpha must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_encoder_heads(init: &mut Init, d: usize, num_classes: usize, d_mask: usize) {
    init.linear("enc_head.class", d, num_classes);
    init.mlp("enc_head.box", &[d, d, 4]);
    init.constant("enc_head.box.1.w", &[d, 4], 0.0);
    init.mlp("enc_head.seg", &[d, d, d_mask]);
}

pub fn init_projections(init: &mut Init, d: usize, d_mask: usize, low_dim: usize) {
    init.mlp("proj.low", &[d, d, low_dim]);
    init.mlp("proj.high", &[d_mask, d, d, d, d_mask]);
}

/// Per-token outputs of the encoder heads.
pub struct EncoderHeadOutput<'g, T: Real> {
    /// `[N, C]`
    pub class_logits: Tensor<'g, T>,
    /// `[N, 4]` in `(0, 1)`.
    pub boxes: Tensor<'g, T>,
    /// `[N, D_m]`
    pub mask_embed: Tensor<'g, T>,
    /// Hidden layer of the box head, `[N, D]`.
    pub box_hidden: Tensor<'g, T>,
    /// Hidden layer of the segmentation head, `[N, D]`.
    pub seg_hidden: Tensor<'g, T>,
}

impl<'g, T: Real> EncoderHeadOutput<'g, T> {
    /// Rows of every output for the given tokens.
    pub fn select(&self, idx: &[usize]) -> EncoderHeadOutput<'g, T> {
        EncoderHeadOutput {
            class_logits: self.class_logits.index_rows(idx),
            boxes: self.boxes.index_rows(idx),
            mask_embed: self.mask_embed.index_rows(idx),
            box_hidden: self.box_hidden.index_rows(idx),
            seg_hidden: self.seg_hidden.index_rows(idx),
        }
    }
}

/// Box logits each token starts from: its cell centre and a size that
/// doubles with every coarser level.
pub fn grid_priors<T: Real>(seq: &TokenSequence<'_, T>) -> ArrayD<T> {
    let refs = seq.reference_points();
    let mut rank: Vec<usize> = seq.levels.iter().map(|l| l.stride).collect();
    rank.sort_unstable();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[seq.len(), 4]));
    for (i, li) in seq.level_index().into_iter().enumerate() {
        let r = rank.iter().position(|&s| s == seq.levels[li].stride).unwrap_or(0);
        let size = 0.05 * 2f64.powi(r as i32);
        out[[i, 0]] = T::of(logit(refs[[i, 0]].f64()));
        out[[i, 1]] = T::of(logit(refs[[i, 1]].f64()));
        out[[i, 2]] = T::of(logit(size));
        out[[i, 3]] = T::of(logit(size));
    }
    out
}

pub fn encoder_heads<'g, T: Real>(g: &'g Graph<T>, memory: &TokenSequence<'g, T>) -> EncoderHeadOutput<'g, T> {
    let m = memory.tokens;
    let class_logits = linear(g, "enc_head.class", m);
    let box_hidden = linear(g, "enc_head.box.0", m).gelu();
    let boxes = (linear(g, "enc_head.box.1", box_hidden) + g.constant(grid_priors(memory))).sigmoid();
    let seg_hidden = linear(g, "enc_head.seg.0", m).gelu();
    let mask_embed = linear(g, "enc_head.seg.1", seg_hidden);
    EncoderHeadOutput {
        class_logits,
        boxes,
        mask_embed,
        box_hidden,
        seg_hidden,
    }
}

/// Indices of the `k` tokens with the highest max-over-classes sigmoid score,
/// best first; ties go to the lower index.
pub fn select_topk<T: Real>(class_logits: &ArrayD<T>, k: usize) -> Result<Vec<usize>> {
    if class_logits.ndim() != 2 {
        return Err(Error::Shape("class logits must be [N, C]".into()));
    }
    let n = class_logits.shape()[0];
    if k > n {
        return Err(Error::Config(format!("cannot select {k} queries from {n} tokens")));
    }
    let score: Vec<f64> = class_logits
        .axis_iter(Axis(0))
        .map(|row| {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            1.0 / (1.0 + (-m).exp())
        })
        .collect();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Shallow projection onto the unit sphere.
pub fn low_projection<'g, T: Real>(g: &'g Graph<T>, x: Tensor<'g, T>) -> Tensor<'g, T> {
    mlp(g, "proj.low", x, 2).l2_normalize(1e-12)
}

/// Deep projection onto the unit sphere.
pub fn high_projection<'g, T: Real>(g: &'g Graph<T>, x: Tensor<'g, T>) -> Tensor<'g, T> {
    mlp(g, "proj.high", x, 4).l2_normalize(1e-12)
}

/// Unit-norm embeddings for the low-level objective.
pub struct LowEmbeddings<'g, T: Real> {
    /// From the detection head, `[n, D_low]`.
    pub det: Tensor<'g, T>,
    /// From the segmentation head, `[n', D_low]`.
    pub seg: Tensor<'g, T>,
    /// Classification-ranked candidates, `[k, D_low]`.
    pub cand: Tensor<'g, T>,
    pub tau: f64,
}

/// `-log(exp(f_i.f_j / tau) / sum_c exp(f_c.f_j / tau))` averaged over the
/// positive pairs.
pub fn loss_low<'g, T: Real>(emb: &LowEmbeddings<'g, T>, pairs: LowPairs) -> Result<Tensor<'g, T>> {
    if !(emb.tau > 0.0) {
        return Err(Error::Config(format!("contrastive temperature must be positive, got {}", emb.tau)));
    }
    let (n, n2, k) = (emb.det.dim(0), emb.seg.dim(0), emb.cand.dim(0));
    if n == 0 || n2 == 0 || k == 0 {
        return Err(Error::Shape("low-level contrast needs non-empty embedding sets".into()));
    }
    let inv = 1.0 / emb.tau;
    // [n', k] -> [n']
    let lse = emb.seg.matmul_t(false, emb.cand, true).scale(inv).logsumexp();
    let terms = match pairs {
        LowPairs::AllPairs => {
            let pos = emb.det.matmul_t(false, emb.seg, true).scale(inv);
            lse.reshape(&[1, n2]) - pos
        }
        LowPairs::SameToken => {
            if n != n2 {
                return Err(Error::Shape(format!("same-token pairs need equal set sizes, got {n} and {n2}")));
            }
            lse - (emb.det * emb.seg).sum_axis(1, false).scale(inv)
        }
    };
    Ok(terms.mean_all())
}

/// Prototypes `p_j` on the unit sphere with concentrations `phi_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `[m, D_high]`
    pub protos: Array2<f64>,
    /// `[m]`
    pub phi: Vec<f64>,
}

fn normalize_rows(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
}

impl PrototypeBank {
    pub fn new(m: usize, dim: usize, seed: u64, phi: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut protos = Array2::from_shape_fn((m, dim), |_| rng.random_range(-1.0..1.0));
        normalize_rows(&mut protos);
        Self { protos, phi: vec![phi; m] }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.protos.ncols()
    }

    /// Nearest prototype by cosine similarity, ties to the lower index.
    pub fn assign(&self, features: ArrayView2<f64>) -> Vec<usize> {
        features
            .rows()
            .into_iter()
            .map(|f| {
                let fnorm = f.dot(&f).sqrt().max(1e-12);
                let mut best = (0, f64::NEG_INFINITY);
                for (j, p) in self.protos.rows().into_iter().enumerate() {
                    let c = f.dot(&p) / (fnorm * p.dot(&p).sqrt().max(1e-12));
                    if c > best.1 {
                        best = (j, c);
                    }
                }
                best.0
            })
            .collect()
    }

    /// Moves every prototype toward the mean of its assigned features, then
    /// re-estimates the concentrations.
    pub fn update(&mut self, features: ArrayView2<f64>, assignment: &[usize], cfg: &PrototypeConfig) {
        for j in 0..self.len() {
            let members: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == j).collect();
            if members.is_empty() {
                continue;
            }
            let mean = features.select(Axis(0), &members).mean_axis(Axis(0)).expect("non-empty");
            let mut p = self.protos.row_mut(j);
            p *= cfg.momentum;
            p.scaled_add(1.0 - cfg.momentum, &mean);
        }
        normalize_rows(&mut self.protos);
        self.phi = estimate_concentration(features, self, assignment, cfg);
    }
}

/// `phi_j = sum ||z - p_j|| / (|A_j| log(|A_j| + alpha))`, clamped; empty
/// clusters keep their previous value.
pub fn estimate_concentration(
    features: ArrayView2<f64>,
    bank: &PrototypeBank,
    assignment: &[usize],
    cfg: &PrototypeConfig,
) -> Vec<f64> {
    (0..bank.len())
        .map(|j| {
            let p = bank.protos.row(j);
            let dists: Vec<f64> = assignment
                .iter()
                .zip(features.rows())
                .filter(|(&a, _)| a == j)
                .map(|(_, z)| (&z - &p).mapv(|v| v * v).sum().sqrt())
                .collect();
            if dists.is_empty() {
                return bank.phi[j];
            }
            let a = dists.len() as f64;
            (dists.iter().sum::<f64>() / (a * (a + cfg.alpha).ln())).clamp(cfg.phi_floor, cfg.phi_ceil)
        })
        .collect()
}

/// `-log(exp(f_i.p_a(i) / phi) / sum_c exp(f_c.p_a(i) / phi))` averaged over
/// features, with all features as candidates.
pub fn loss_high<'g, T: Real>(emb: Tensor<'g, T>, bank: &PrototypeBank, assignment: &[usize]) -> Result<Tensor<'g, T>> {
    if bank.is_empty() {
        return Err(Error::Config("prototype bank is empty".into()));
    }
    let n = emb.dim(0);
    if assignment.len() != n || n == 0 {
        return Err(Error::Shape(format!("{} assignments for {n} features", assignment.len())));
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= bank.len()) {
        return Err(Error::Input(format!("prototype index {bad} out of range for {} prototypes", bank.len())));
    }
    if emb.dim(1) != bank.dim() {
        return Err(Error::Shape(format!("embedding width {} vs prototype width {}", emb.dim(1), bank.dim())));
    }
    let g = emb.graph();
    let d = bank.dim();
    let p = ArrayD::from_shape_fn(IxDyn(&[n, d]), |ix| T::of(bank.protos[[assignment[ix[0]], ix[1]]] / bank.phi[assignment[ix[0]]]));
    // [n_i, n_c]: row i holds f_c . p_a(i) / phi_a(i)
    let logits = g.constant(p).matmul_t(false, emb, true);
    let diag: Vec<usize> = (0..n).collect();
    Ok((logits.logsumexp() - logits.pick(&diag)).mean_all())
}

/// Tight normalized box of each thresholded mask, or the full image when a
/// mask is empty.
pub fn init_anchors_from_masks<T: Real>(masks: ArrayView3<T>, threshold: f64) -> Vec<BBox> {
    let th = T::of(threshold);
    masks
        .outer_iter()
        .map(|m| tight_box(m, |p| p >= th).unwrap_or(BBox::FULL))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdoc::{rasterize_instance, Style};
    use crate::transformer::SeqLevel;
    use docseg_autograd::gradcheck::{central_difference, relative_error};
    use docseg_autograd::ParamStore;
    use ndarray::{arr2, Array3};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn random(shape: &[usize], seed: u64, scale: f64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
    }

    fn unit_rows(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut a = random(shape, seed, 1.0).into_dimensionality::<ndarray::Ix2>().unwrap();
        normalize_rows(&mut a);
        a.into_dyn()
    }

    fn seq<'g>(g: &'g Graph<f64>, d: usize, seed: u64) -> TokenSequence<'g, f64> {
        TokenSequence {
            tokens: g.constant(random(&[20, d], seed, 1.0)),
            pos: g.constant(ArrayD::zeros(IxDyn(&[20, d]))),
            levels: vec![SeqLevel { stride: 8, h: 4, w: 4, start: 0 }, SeqLevel { stride: 16, h: 2, w: 2, start: 16 }],
        }
    }

    #[test]
    fn zero_heads_give_uniform_logits_and_prior_boxes() {
        let mut init = Init::new(0);
        init_encoder_heads(&mut init, 8, 3, 6);
        let mut ps: ParamStore<f64> = init.finish();
        let names: Vec<String> = ps.names().map(String::from).collect();
        for n in names {
            let z = ArrayD::zeros(ps.get(&n).unwrap().raw_dim());
            ps.insert(n, z);
        }
        let g = Graph::inference(&ps);
        let s = seq(&g, 8, 1);
        let out = encoder_heads(&g, &s);
        assert_eq!(out.class_logits.shape(), [20, 3]);
        assert_eq!(out.boxes.shape(), [20, 4]);
        assert_eq!(out.mask_embed.shape(), [20, 6]);
        assert!(out.class_logits.to_vec().iter().all(|&v| v == 0.0));
        let priors = grid_priors(&s);
        let b = out.boxes.value();
        for (x, p) in b.iter().zip(priors.iter()) {
            assert!((x - 1.0 / (1.0 + (-p).exp())).abs() < 1e-12);
        }
        assert!((b[[0, 0]] - 0.125).abs() < 1e-12 && (b[[0, 2]] - 0.05).abs() < 1e-12);
        assert!((b[[16, 2]] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn encoder_heads_gradient() {
        let mut init = Init::new(2);
        init_encoder_heads(&mut init, 6, 3, 4);
        init.uniform("enc_head.box.1.w", &[6, 4], 0.5);
        let mut ps: ParamStore<f64> = init.finish();
        ps.insert("mem", random(&[20, 6], 3, 1.0));
        let w = [random(&[20, 3], 4, 1.0), random(&[20, 4], 5, 1.0), random(&[20, 4], 6, 1.0)];
        fn run<'g>(g: &'g Graph<f64>, w: &[ArrayD<f64>; 3]) -> Tensor<'g, f64> {
            let s = TokenSequence {
                tokens: g.param("mem"),
                pos: g.param("mem"),
                levels: vec![SeqLevel { stride: 8, h: 4, w: 4, start: 0 }, SeqLevel { stride: 16, h: 2, w: 2, start: 16 }],
            };
            let o = encoder_heads(g, &s);
            (o.class_logits * g.constant(w[0].clone())).sum_all()
                + (o.boxes * g.constant(w[1].clone())).sum_all()
                + (o.mask_embed * g.constant(w[2].clone())).sum_all()
        }
        let g = Graph::new(&ps);
        let grads = g.backward(run(&g, &w));
        let names: Vec<String> = ps.names().map(String::from).collect();
        for name in &names {
            let a: Vec<f64> = grads.param(name).unwrap().iter().copied().collect();
            for i in (0..a.len()).step_by(5) {
                let n = central_difference(&ps, name, i, 1e-5, |p| run(&Graph::inference(p), &w).item());
                assert!(relative_error(a[i], n) < 1e-4, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn topk_examples() {
        let l = arr2(&[[0.0, 1.0], [5.0, -1.0], [2.0, 2.0]]).into_dyn();
        assert_eq!(select_topk(&l, 1).unwrap(), vec![1]);
        let eq = ArrayD::<f64>::zeros(IxDyn(&[6, 3]));
        assert_eq!(select_topk(&eq, 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(select_topk(&eq, 7), Err(Error::Config(_))));
    }

    fn sort_oracle(l: &ArrayD<f64>, k: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = l
            .outer_iter()
            .enumerate()
            .map(|(i, r)| (r.iter().cloned().fold(f64::NEG_INFINITY, f64::max), i))
            .collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        pairs.into_iter().take(k).map(|p| p.1).collect()
    }

    proptest! {
        #[test]
        fn topk_matches_sort_oracle(seed in 0u64..10_000, n in 1usize..40, c in 1usize..5, kf in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values force ties
            let l = ArrayD::from_shape_fn(IxDyn(&[n, c]), |_| f64::from(rng.random_range(-4i32..4)) * 0.5);
            let k = ((n as f64) * kf) as usize;
            prop_assert_eq!(select_topk(&l, k).unwrap(), sort_oracle(&l, k));
        }

        #[test]
        fn contrastive_losses_are_permutation_invariant(seed in 0u64..1000, n in 1usize..6) {
            let ps = ParamStore::<f64>::new();
            let g = Graph::inference(&ps);
            let det = unit_rows(&[n, 4], seed);
            let seg = unit_rows(&[n, 4], seed + 1);
            let cand = unit_rows(&[n + 2, 4], seed + 2);
            let mut perm: Vec<usize> = (0..n + 2).collect();
            perm.reverse();
            let permuted = cand.select(Axis(0), &perm);
            for pairs in [LowPairs::SameToken, LowPairs::AllPairs] {
                let a = loss_low(&LowEmbeddings { det: g.constant(det.clone()), seg: g.constant(seg.clone()), cand: g.constant(cand.clone()), tau: 0.3 }, pairs).unwrap().item();
                let b = loss_low(&LowEmbeddings { det: g.constant(det.clone()), seg: g.constant(seg.clone()), cand: g.constant(permuted.clone()), tau: 0.3 }, pairs).unwrap().item();
                prop_assert!((a - b).abs() < 1e-12);
            }
            let bank = PrototypeBank::new(3, 4, seed, 0.5);
            let f = unit_rows(&[n + 2, 4], seed + 3);
            let asg = bank.assign(f.view().into_dimensionality().unwrap());
            let fp = f.select(Axis(0), &perm);
            let asgp: Vec<usize> = perm.iter().map(|&i| asg[i]).collect();
            let a = loss_high(g.constant(f), &bank, &asg).unwrap().item();
            let b = loss_high(g.constant(fp), &bank, &asgp).unwrap().item();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0 && a.is_finite());
        }
    }

    #[test]
    fn projections_are_unit_norm_and_scale_invariant() {
        let mut init = Init::new(3);
        init_projections(&mut init, 8, 6, 5);
        init.linear("single", 8, 5);
        init.constant("single.b", &[5], 0.0);
        let ps: ParamStore<f64> = init.finish();
        let g = Graph::inference(&ps);
        let x = random(&[4, 8], 1, 2.0);
        for out in [low_projection(&g, g.constant(x.clone())), high_projection(&g, g.constant(random(&[4, 6], 2, 2.0)))] {
            for row in out.value().outer_iter() {
                assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let a = linear(&g, "single", g.constant(x.clone())).l2_normalize(1e-12).to_vec();
        let b = linear(&g, "single", g.constant(x.mapv(|v| 2.0 * v))).l2_normalize(1e-12).to_vec();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_gradients() {
        let mut init = Init::new(4);
        init_projections(&mut init, 5, 4, 3);
        let mut ps: ParamStore<f64> = init.finish();
        ps.insert("x", random(&[3, 5], 5, 1.0));
        ps.insert("y", random(&[3, 4], 6, 1.0));
        let w = (random(&[3, 3], 7, 1.0), random(&[3, 4], 8, 1.0));
        fn run<'g>(g: &'g Graph<f64>, w: &(ArrayD<f64>, ArrayD<f64>)) -> Tensor<'g, f64> {
            (low_projection(g, g.param("x")) * g.constant(w.0.clone())).sum_all()
                + (high_projection(g, g.param("y")) * g.constant(w.1.clone())).sum_all()
        }
        let g = Graph::new(&ps);
        let grads = g.backward(run(&g, &w));
        let names: Vec<String> = ps.names().map(String::from).collect();
        for name in &names {
            let a: Vec<f64> = grads.param(name).unwrap().iter().copied().collect();
            for i in (0..a.len()).step_by(3) {
                let n = central_difference(&ps, name, i, 1e-5, |p| run(&Graph::inference(p), &w).item());
                assert!(relative_error(a[i], n) < 1e-4, "{name}[{i}]");
            }
        }
    }

    fn low(g: &Graph<f64>, det: &[f64], seg: &[f64], cand: &[f64], dim: usize, tau: f64, pairs: LowPairs) -> Result<f64> {
        let m = |v: &[f64]| g.constant(ArrayD::from_shape_vec(IxDyn(&[v.len() / dim, dim]), v.to_vec()).unwrap());
        loss_low(&LowEmbeddings { det: m(det), seg: m(seg), cand: m(cand), tau }, pairs).map(|t| t.item())
    }

    #[test]
    fn low_loss_hand_values() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        // f_1 = f_1' = e_x, candidates e_x and e_y
        let v = low(&g, &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0, 0.0, 1.0], 2, 1.0, LowPairs::SameToken).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 1.0)).ln())).abs() < 1e-9);
        assert!((v - 0.31326).abs() < 1e-5);
        let zero = low(&g, &[0.6, 0.8], &[0.0, 1.0], &[0.6, 0.8], 2, 0.5, LowPairs::AllPairs).unwrap();
        assert_eq!(zero, 0.0);
        assert!(matches!(low(&g, &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], 2, 0.0, LowPairs::SameToken), Err(Error::Config(_))));
    }

    #[test]
    fn lower_temperature_sharpens_a_dominant_positive() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        let (c, s) = (0.6f64, 0.8f64);
        let det = [1.0, 0.0];
        let seg = [1.0, 0.0];
        let cand = [1.0, 0.0, c, s, 0.0, 1.0];
        let vals: Vec<f64> = [1.0, 0.5, 0.1].iter().map(|&t| low(&g, &det, &seg, &cand, 2, t, LowPairs::SameToken).unwrap()).collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    fn high_oracle(f: &ArrayD<f64>, bank: &PrototypeBank, asg: &[usize]) -> f64 {
        let n = f.shape()[0];
        let dot = |i: usize, j: usize| (0..bank.dim()).map(|d| f[[i, d]] * bank.protos[[j, d]]).sum::<f64>();
        let mut total = 0.0;
        for i in 0..n {
            let j = asg[i];
            let denom: f64 = (0..n).map(|c| (dot(c, j) / bank.phi[j]).exp()).sum();
            total += -((dot(i, j) / bank.phi[j]).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn high_loss_examples() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        let bank = PrototypeBank { protos: arr2(&[[0.6, 0.8]]), phi: vec![0.3] };
        let one = loss_high(g.constant(arr2(&[[0.0, 1.0]]).into_dyn()), &bank, &[0]).unwrap().item();
        assert_eq!(one, 0.0);
        // flattening limit
        let flat = PrototypeBank { protos: arr2(&[[1.0, 0.0], [0.0, 1.0]]), phi: vec![1e12; 2] };
        let f = unit_rows(&[5, 2], 1);
        let v = loss_high(g.constant(f), &flat, &[0, 1, 0, 1, 1]).unwrap().item();
        assert!((v - 5f64.ln()).abs() < 1e-9);
        // three features, two prototypes, hand-set dot products
        let bank = PrototypeBank { protos: arr2(&[[1.0, 0.0], [0.0, 1.0]]), phi: vec![1.0, 1.0] };
        let f = arr2(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).into_dyn();
        let got = loss_high(g.constant(f.clone()), &bank, &[0, 1, 1]).unwrap().item();
        let e = |x: f64| x.exp();
        let l0 = -(e(1.0) / (e(1.0) + e(0.0) + e(0.6))).ln();
        let l1 = -(e(1.0) / (e(0.0) + e(1.0) + e(0.8))).ln();
        let l2 = -(e(0.8) / (e(0.0) + e(1.0) + e(0.8))).ln();
        assert!((got - (l0 + l1 + l2) / 3.0).abs() < 1e-12);
        assert!((got - high_oracle(&f, &bank, &[0, 1, 1])).abs() < 1e-12);
        let empty = PrototypeBank { protos: Array2::zeros((0, 2)), phi: vec![] };
        assert!(matches!(loss_high(g.constant(f), &empty, &[0, 0, 0]), Err(Error::Config(_))));
    }

    #[test]
    fn high_loss_gradient() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("f", unit_rows(&[4, 3], 9));
        let bank = PrototypeBank { protos: unit_rows(&[2, 3], 10).into_dimensionality().unwrap(), phi: vec![0.4, 0.9] };
        let asg = [0, 1, 1, 0];
        let g = Graph::new(&ps);
        let grads = g.backward(loss_high(g.param("f"), &bank, &asg).unwrap());
        let a: Vec<f64> = grads.param("f").unwrap().iter().copied().collect();
        for (i, &ai) in a.iter().enumerate() {
            let n = central_difference(&ps, "f", i, 1e-6, |p| {
                let g = Graph::inference(p);
                loss_high(g.param("f"), &bank, &asg).unwrap().item()
            });
            assert!(relative_error(ai, n) < 1e-6);
        }
    }

    #[test]
    fn concentration_examples() {
        let cfg = PrototypeConfig::default();
        let bank = PrototypeBank { protos: arr2(&[[1.0, 0.0], [0.0, 1.0]]), phi: vec![0.7, 0.9] };
        let same = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        let phi = estimate_concentration(same.view(), &bank, &[0, 0], &cfg);
        assert_eq!(phi, vec![cfg.phi_floor, 0.9]);

        let wide = PrototypeConfig { phi_floor: 1e-9, phi_ceil: 1e9, ..cfg.clone() };
        let near = arr2(&[[1.0, 0.1], [1.1, 0.0]]);
        let far = arr2(&[[1.0, 0.2], [1.2, 0.0]]);
        let a = estimate_concentration(near.view(), &bank, &[0, 0], &wide)[0];
        let b = estimate_concentration(far.view(), &bank, &[0, 0], &wide)[0];
        assert!((b - 2.0 * a).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Array2::from_shape_fn((10, 2), |(_, c)| if c == 0 { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3));
        let phi = estimate_concentration(pts.view(), &bank, &[0; 10], &wide)[0];
        let sum: f64 = pts.rows().into_iter().map(|r| ((r[0] - 1.0).powi(2) + r[1].powi(2)).sqrt()).sum();
        assert!((phi - sum / (10.0 * 20f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn bank_update_keeps_unit_prototypes_and_pulls_toward_members() {
        let cfg = PrototypeConfig { momentum: 0.5, ..Default::default() };
        let mut bank = PrototypeBank { protos: arr2(&[[1.0, 0.0], [0.0, 1.0]]), phi: vec![1.0, 1.0] };
        let f = arr2(&[[0.8, 0.6], [0.6, 0.8]]);
        let asg = bank.assign(f.view());
        assert_eq!(asg, vec![0, 1]);
        bank.update(f.view(), &asg, &cfg);
        for row in bank.protos.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert!(bank.protos[[0, 1]] > 0.0 && bank.protos[[1, 0]] > 0.0);
        assert!(bank.phi.iter().all(|&p| p >= cfg.phi_floor && p <= cfg.phi_ceil));
    }

    #[test]
    fn anchor_examples() {
        let ones = Array3::<f64>::ones((1, 8, 8));
        assert_eq!(init_anchors_from_masks(ones.view(), 0.5), vec![BBox::FULL]);
        assert_eq!(init_anchors_from_masks(Array3::<f64>::zeros((1, 8, 8)).view(), 0.5), vec![BBox::FULL]);
        let mut m = Array3::<f32>::zeros((1, 64, 64));
        m.slice_mut(ndarray::s![0, 16..32, 32..64]).fill(1.0);
        let b = init_anchors_from_masks(m.view(), 0.5)[0];
        let want = BBox::from_xyxy(32.0 / 64.0, 16.0 / 64.0, 1.0, 32.0 / 64.0);
        assert!(b.max_edge_error_px(&want, 64, 64) <= 1.0);
    }

    #[test]
    fn anchors_roundtrip_rasterized_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let (x0, y0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
            let (x1, y1) = (rng.random_range(x0 + 0.05..1.0), rng.random_range(y0 + 0.05..1.0));
            let b = BBox::from_xyxy(x0, y0, x1, y1);
            let mask = rasterize_instance(&b, (64, 64), Style::Solid).unwrap();
            let probs = mask.mapv(|v| if v { 0.9 } else { 0.1 }).insert_axis(Axis(0));
            let got = init_anchors_from_masks(probs.view(), 0.5)[0];
            assert!(got.max_edge_error_px(&b, 64, 64) <= 1.0);
        }
    }
}
