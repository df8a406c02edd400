//! Deformable-attention encoder over multi-scale tokens, denoising query
//! groups, and the anchor-refining decoder.

use std::f64::consts::PI;

use docseg_autograd::{additive_mask, Graph, LevelLayout, Real, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, FeaturePyramid};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::{conv2d, layer_norm, linear, mlp, Init};

/// Pyramid strides consumed by the encoder; stride 4 feeds the pixel embedding map.
pub const ENCODER_STRIDES: [usize; 3] = [8, 16, 32];

/// Logit clamp for refined anchors.
pub const ANCHOR_LOGIT_CLAMP: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Sampling points per head and level.
    pub points: usize,
    pub ffn_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 8,
            points: 4,
            ffn_dim: 256,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::Config("transformer.d_model must be a positive multiple of 4".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config("transformer.heads must divide d_model".into()));
        }
        if self.points == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("transformer.points and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Matching queries, also the number of selected encoder tokens.
    pub queries: usize,
    pub look_forward_twice: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            queries: 20,
            look_forward_twice: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.queries == 0 {
            return Err(Error::Config("decoder.layers and decoder.queries must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdnConfig {
    /// Positive queries carry relative noise below this bound.
    pub lambda_p: f64,
    /// Negative queries carry relative noise in `(lambda_p, lambda_e)`.
    pub lambda_e: f64,
    pub groups: usize,
    pub label_flip_prob: f64,
    pub enabled: bool,
}

impl Default for CdnConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.02,
            lambda_e: 0.1,
            groups: 2,
            label_flip_prob: 0.2,
            enabled: true,
        }
    }
}

impl CdnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p > 0.0 && self.lambda_p < self.lambda_e) {
            return Err(Error::Config(format!(
                "cdn noise bounds need 0 < lambda_p < lambda_e, got {} and {}",
                self.lambda_p, self.lambda_e
            )));
        }
        if self.groups == 0 {
            return Err(Error::Config("cdn.groups must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return Err(Error::Config("cdn.label_flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLevel {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// First token row of this level.
    pub start: usize,
}

/// Flattened multi-scale tokens with their positional embeddings.
#[derive(Clone, Debug)]
pub struct TokenSequence<'g, T: Real> {
    /// `[N, D]`
    pub tokens: Tensor<'g, T>,
    /// `[N, D]`
    pub pos: Tensor<'g, T>,
    pub levels: Vec<SeqLevel>,
}

impl<'g, T: Real> TokenSequence<'g, T> {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of each token's level in `levels`.
    pub fn level_index(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (i, l) in self.levels.iter().enumerate() {
            out[l.start..l.start + l.h * l.w].fill(i);
        }
        out
    }

    /// Levels ordered by stride: the slot order used by sampling heads.
    pub fn canonical_levels(&self) -> Vec<SeqLevel> {
        let mut v = self.levels.clone();
        v.sort_by_key(|l| l.stride);
        v
    }

    /// Normalized centre `(x, y)` of every token.
    pub fn reference_points(&self) -> ArrayD<T> {
        let mut r = ArrayD::<T>::zeros(IxDyn(&[self.len(), 2]));
        for l in &self.levels {
            for y in 0..l.h {
                for x in 0..l.w {
                    let i = l.start + y * l.w + x;
                    r[[i, 0]] = T::of((x as f64 + 0.5) / l.w as f64);
                    r[[i, 1]] = T::of((y as f64 + 0.5) / l.h as f64);
                }
            }
        }
        r
    }

    /// One level's tokens as a map.
    pub fn level_map(&self, stride: usize) -> Option<FeatureMap<'g, T>> {
        let l = self.levels.iter().find(|l| l.stride == stride)?;
        Some(FeatureMap {
            tokens: self.tokens.narrow(0, l.start, l.h * l.w),
            h: l.h,
            w: l.w,
        })
    }
}

fn layouts(levels: &[SeqLevel]) -> Vec<LevelLayout> {
    levels
        .iter()
        .map(|l| LevelLayout {
            start: l.start,
            height: l.h,
            width: l.w,
        })
        .collect()
}

/// Two 3x3 convolutions with a GELU between them.
pub fn positional_embedding<'g, T: Real>(g: &'g Graph<T>, name: &str, map: &FeatureMap<'g, T>) -> FeatureMap<'g, T> {
    let h = conv2d(g, &format!("{name}.0"), map.tokens, map.h, map.w, 3).gelu();
    FeatureMap {
        tokens: conv2d(g, &format!("{name}.1"), h, map.h, map.w, 3),
        h: map.h,
        w: map.w,
    }
}

/// Bilinear reads of a map at normalized points `[P, 2]` with zero padding.
pub fn bilinear_sample<'g, T: Real>(map: &FeatureMap<'g, T>, points: Tensor<'g, T>) -> Tensor<'g, T> {
    let g = map.tokens.graph();
    let p = points.dim(0);
    let loc = points.reshape(&[p, 1, 1, 1, 2]);
    let attn = g.constant(ArrayD::from_elem(IxDyn(&[p, 1, 1, 1]), T::one()));
    let lvl = [LevelLayout {
        start: 0,
        height: map.h,
        width: map.w,
    }];
    map.tokens.deform_sample(loc, attn, &lvl, 1)
}

/// Reference geometry for deformable attention.
pub enum Reference<T: Real> {
    /// `[Q, 2]` normalized points; offsets are in pixels of each level.
    Points(ArrayD<T>),
    /// `[Q, 4]` normalized boxes; offsets scale with half the box size.
    Boxes(ArrayD<T>),
}

pub fn init_deformable(init: &mut Init, name: &str, cfg: &TransformerConfig, levels: usize) {
    let (d, h, k) = (cfg.d_model, cfg.heads, cfg.points);
    init.linear(&format!("{name}.value"), d, d);
    init.linear(&format!("{name}.out"), d, d);
    init.constant(&format!("{name}.offsets.w"), &[d, h * levels * k * 2], 0.0);
    init.constant(&format!("{name}.weights.w"), &[d, h * levels * k], 0.0);
    init.constant(&format!("{name}.weights.b"), &[h * levels * k], 0.0);
    // initial sampling points fan out from the reference along one ray per head
    let mut bias = ArrayD::<f64>::zeros(IxDyn(&[h * levels * k * 2]));
    for hi in 0..h {
        let theta = 2.0 * PI * hi as f64 / h as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let norm = c.abs().max(s.abs());
        for l in 0..levels {
            for p in 0..k {
                let i = ((hi * levels + l) * k + p) * 2;
                bias[i] = c / norm * (p + 1) as f64;
                bias[i + 1] = s / norm * (p + 1) as f64;
            }
        }
    }
    init.set(&format!("{name}.offsets.b"), bias);
}

/// Multi-scale deformable attention of `query` over `value_in`.
///
/// `levels` must be in slot order (see [`TokenSequence::canonical_levels`]).
#[allow(clippy::too_many_arguments)]
pub fn deformable_attention<'g, T: Real>(
    g: &'g Graph<T>,
    name: &str,
    query: Tensor<'g, T>,
    reference: &Reference<T>,
    value_in: Tensor<'g, T>,
    levels: &[SeqLevel],
    heads: usize,
    points: usize,
) -> Result<Tensor<'g, T>> {
    if levels.is_empty() {
        return Err(Error::Config("deformable attention needs at least one value level".into()));
    }
    let q = query.dim(0);
    let nl = levels.len();
    let value = linear(g, &format!("{name}.value"), value_in);
    let off = linear(g, &format!("{name}.offsets"), query).reshape(&[q, heads, nl, points, 2]);
    let aw = linear(g, &format!("{name}.weights"), query)
        .reshape(&[q * heads, nl * points])
        .softmax()
        .reshape(&[q, heads, nl, points]);
    let loc = match reference {
        Reference::Points(r) => {
            let r = g.constant(r.clone().into_shape_with_order(IxDyn(&[q, 1, 1, 1, 2])).expect("points [Q, 2]"));
            let mut scale = ArrayD::<T>::zeros(IxDyn(&[1, 1, nl, 1, 2]));
            for (i, l) in levels.iter().enumerate() {
                scale[[0, 0, i, 0, 0]] = T::of(1.0 / l.w as f64);
                scale[[0, 0, i, 0, 1]] = T::of(1.0 / l.h as f64);
            }
            r + off * g.constant(scale)
        }
        Reference::Boxes(b) => {
            let mut xy = ArrayD::<T>::zeros(IxDyn(&[q, 1, 1, 1, 2]));
            let mut wh = ArrayD::<T>::zeros(IxDyn(&[q, 1, 1, 1, 2]));
            let half = T::of(0.5 / points as f64);
            for i in 0..q {
                xy[[i, 0, 0, 0, 0]] = b[[i, 0]];
                xy[[i, 0, 0, 0, 1]] = b[[i, 1]];
                wh[[i, 0, 0, 0, 0]] = b[[i, 2]] * half;
                wh[[i, 0, 0, 0, 1]] = b[[i, 3]] * half;
            }
            g.constant(xy) + off * g.constant(wh)
        }
    };
    let sampled = value.deform_sample(loc, aw, &layouts(levels), heads);
    Ok(linear(g, &format!("{name}.out"), sampled))
}

pub fn init_encoder(init: &mut Init, cfg: &TransformerConfig, enc: &EncoderConfig, level_dims: &[(usize, usize)]) {
    let d = cfg.d_model;
    for &(stride, c) in level_dims {
        init.linear(&format!("encoder.input{stride}"), c, d);
        init.layer_norm(&format!("encoder.input{stride}.norm"), d);
        init.conv(&format!("encoder.pos{stride}.0"), 3, c, d);
        init.conv(&format!("encoder.pos{stride}.1"), 3, d, d);
        init.uniform(&format!("encoder.level{stride}"), &[d], 0.1);
    }
    for i in 0..enc.layers {
        let p = format!("encoder.l{i}");
        init_deformable(init, &format!("{p}.attn"), cfg, level_dims.len());
        init.layer_norm(&format!("{p}.norm1"), d);
        init.mlp(&format!("{p}.ffn"), &[d, cfg.ffn_dim, d]);
        init.layer_norm(&format!("{p}.norm2"), d);
    }
}

/// Projects the chosen pyramid levels to `d_model` tokens in the given order.
pub fn build_tokens<'g, T: Real>(
    g: &'g Graph<T>,
    pyramid: &FeaturePyramid<'g, T>,
    strides: &[usize],
) -> Result<TokenSequence<'g, T>> {
    let mut toks = Vec::with_capacity(strides.len());
    let mut pos = Vec::with_capacity(strides.len());
    let mut levels = Vec::with_capacity(strides.len());
    let mut start = 0;
    for &s in strides {
        let map = pyramid
            .level(s)
            .ok_or_else(|| Error::Shape(format!("pyramid has no stride-{s} level")))?;
        let t = linear(g, &format!("encoder.input{s}"), map.tokens);
        toks.push(layer_norm(g, &format!("encoder.input{s}.norm"), t));
        pos.push(positional_embedding(g, &format!("encoder.pos{s}"), map).tokens + g.param(&format!("encoder.level{s}")));
        levels.push(SeqLevel {
            stride: s,
            h: map.h,
            w: map.w,
            start,
        });
        start += map.h * map.w;
    }
    Ok(TokenSequence {
        tokens: Tensor::concat(&toks, 0),
        pos: Tensor::concat(&pos, 0),
        levels,
    })
}

/// `layers` rounds of deformable self-attention and feed-forward.
pub fn encoder_forward<'g, T: Real>(
    g: &'g Graph<T>,
    cfg: &TransformerConfig,
    seq: &TokenSequence<'g, T>,
    layers: usize,
) -> Result<TokenSequence<'g, T>> {
    let refs = Reference::Points(seq.reference_points());
    let levels = seq.canonical_levels();
    let mut x = seq.tokens;
    for i in 0..layers {
        let p = format!("encoder.l{i}");
        let a = deformable_attention(g, &format!("{p}.attn"), x + seq.pos, &refs, x, &levels, cfg.heads, cfg.points)?;
        x = layer_norm(g, &format!("{p}.norm1"), x + a);
        x = layer_norm(g, &format!("{p}.norm2"), x + mlp(g, &format!("{p}.ffn"), x, 2));
    }
    Ok(TokenSequence {
        tokens: x,
        pos: seq.pos,
        levels: seq.levels.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Denoising queries, ordered group by group and, within a group, as
/// (positive, negative) pairs following the ground-truth order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CdnQueries {
    pub groups: usize,
    pub per_group: usize,
    /// Label fed to the content embedding (possibly flipped).
    pub labels: Vec<usize>,
    /// Noised boxes, not clamped to the unit square.
    pub anchors: Vec<BBox>,
    pub polarity: Vec<Polarity>,
    pub group: Vec<usize>,
    pub gt_index: Vec<usize>,
    /// Relative noise drawn for `(cx, cy, w, h)`.
    pub noise: Vec<[f64; 4]>,
}

impl CdnQueries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise stream for one ground-truth object, independent of its list position.
fn object_stream(key: u64, class_id: usize, b: &BBox, group: usize) -> ChaCha8Rng {
    let mut h = mix(key ^ class_id as u64);
    for v in b.to_array() {
        h = mix(h ^ v.to_bits());
    }
    ChaCha8Rng::seed_from_u64(mix(h ^ group as u64))
}

/// Draws strictly inside `(lo, hi)`.
fn band(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(1e-6, 1.0 - 1e-6);
    lo + (hi - lo) * u
}

fn noised(b: &BBox, delta: [f64; 4], sign: [f64; 4]) -> BBox {
    BBox {
        cx: b.cx + sign[0] * delta[0] * b.w / 2.0,
        cy: b.cy + sign[1] * delta[1] * b.h / 2.0,
        w: b.w * (1.0 + sign[2] * delta[2]),
        h: b.h * (1.0 + sign[3] * delta[3]),
    }
}

/// Relative perturbation per coordinate: centre shifts in half-sizes,
/// size changes as fractions.
pub fn relative_noise(gt: &BBox, n: &BBox) -> [f64; 4] {
    [
        (n.cx - gt.cx).abs() / (gt.w / 2.0),
        (n.cy - gt.cy).abs() / (gt.h / 2.0),
        (n.w - gt.w).abs() / gt.w,
        (n.h - gt.h).abs() / gt.h,
    ]
}

/// Positive and negative noised queries for every ground-truth object in
/// each of `cfg.groups` groups.
pub fn build_cdn_groups(
    gt: &[(usize, BBox)],
    cfg: &CdnConfig,
    num_classes: usize,
    rng: &mut impl RngCore,
) -> Result<CdnQueries> {
    cfg.validate()?;
    let q = gt.len();
    if q == 0 {
        return Ok(CdnQueries::default());
    }
    let key = rng.next_u64();
    let mut out = CdnQueries {
        groups: cfg.groups,
        per_group: 2 * q,
        ..Default::default()
    };
    for group in 0..cfg.groups {
        for (gi, (class_id, b)) in gt.iter().enumerate() {
            let mut r = object_stream(key, *class_id, b, group);
            for polarity in [Polarity::Positive, Polarity::Negative] {
                let (lo, hi) = match polarity {
                    Polarity::Positive => (0.0, cfg.lambda_p),
                    Polarity::Negative => (cfg.lambda_p, cfg.lambda_e),
                };
                let delta = [0; 4].map(|_| band(&mut r, lo, hi));
                let sign = [0; 4].map(|_| if r.random::<bool>() { 1.0 } else { -1.0 });
                let flip = polarity == Polarity::Positive && r.random::<f64>() < cfg.label_flip_prob;
                let label = if flip { r.random_range(0..num_classes) } else { *class_id };
                out.labels.push(label);
                out.anchors.push(noised(b, delta, sign));
                out.polarity.push(polarity);
                out.group.push(group);
                out.gt_index.push(gi);
                out.noise.push(delta);
            }
        }
    }
    Ok(out)
}

/// `true` marks a blocked (query, key) pair. Denoising groups come first,
/// matching queries last; every group sees only itself.
pub fn cdn_attention_mask(groups: usize, per_group: usize, matching: usize) -> Array2<bool> {
    let n = groups * per_group + matching;
    let block = |i: usize| if i < groups * per_group { i / per_group } else { groups };
    Array2::from_shape_fn((n, n), |(i, j)| block(i) != block(j))
}

/// Checks the exact block structure produced by [`cdn_attention_mask`].
pub fn validate_cdn_mask(mask: &Array2<bool>, groups: usize, per_group: usize, matching: usize) -> std::result::Result<(), String> {
    let n = groups * per_group + matching;
    if mask.dim() != (n, n) {
        return Err(format!("mask is {:?}, expected {n}x{n}", mask.dim()));
    }
    let block = |i: usize| if i < groups * per_group { i / per_group } else { groups };
    for ((i, j), &blocked) in mask.indexed_iter() {
        let same = block(i) == block(j);
        if blocked == same {
            return Err(format!("entry ({i}, {j}) is {} but should be {}", blocked, !same));
        }
    }
    Ok(())
}

/// Decoder input: content embeddings and anchor boxes, denoising queries first.
pub struct QuerySet<'g, T: Real> {
    /// `[Q, D]`
    pub content: Tensor<'g, T>,
    /// `[Q, 4]` in `(0, 1)`.
    pub anchors: ArrayD<T>,
    pub cdn: CdnQueries,
    pub matching: usize,
}

impl<'g, T: Real> QuerySet<'g, T> {
    pub fn len(&self) -> usize {
        self.cdn.len() + self.matching
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub fn init_decoder(init: &mut Init, cfg: &TransformerConfig, dec: &DecoderConfig, levels: usize, num_classes: usize) {
    let d = cfg.d_model;
    init.uniform("decoder.label_embed", &[num_classes, d], 1.0);
    init.mlp("decoder.query_pos", &[2 * d, d, d]);
    init.layer_norm("decoder.norm", d);
    for i in 0..dec.layers {
        let p = format!("decoder.l{i}");
        for k in ["q", "k", "v", "out"] {
            init.linear(&format!("{p}.sa.{k}"), d, d);
        }
        init.layer_norm(&format!("{p}.norm1"), d);
        init_deformable(init, &format!("{p}.ca"), cfg, levels);
        init.layer_norm(&format!("{p}.norm2"), d);
        init.mlp(&format!("{p}.ffn"), &[d, cfg.ffn_dim, d]);
        init.layer_norm(&format!("{p}.norm3"), d);
        init.mlp(&format!("{p}.box"), &[d, d, d, 4]);
        // start every refinement as the identity
        init.constant(&format!("{p}.box.2.w"), &[d, 4], 0.0);
    }
}

/// Sinusoidal features of each box coordinate, `[Q, 2 * d]`.
pub fn sine_embed<T: Real>(boxes: &ArrayD<T>, d: usize) -> ArrayD<T> {
    let q = boxes.shape()[0];
    let f = d / 2;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[q, 4 * f]));
    for i in 0..q {
        for c in 0..4 {
            let x = boxes[[i, c]].f64();
            for k in 0..f / 2 {
                let freq = 2.0 * PI / 10000f64.powf(2.0 * k as f64 / f as f64);
                out[[i, c * f + 2 * k]] = T::of((x * freq).sin());
                out[[i, c * f + 2 * k + 1]] = T::of((x * freq).cos());
            }
        }
    }
    out
}

/// Outputs of one decoder layer.
pub struct DecoderLayerOutput<'g, T: Real> {
    /// Normalized embeddings `[Q, D]`.
    pub hidden: Tensor<'g, T>,
    /// Refined anchors `[Q, 4]` used for this layer's losses.
    pub boxes: Tensor<'g, T>,
    /// Detached anchors the layer attended from.
    pub reference: ArrayD<T>,
}

/// Runs every decoder layer, refining anchors in logit space.
///
/// With look-forward-twice, the boxes reported by layer `i` are built on
/// the undetached boxes of layer `i - 1`, so a layer's box loss also trains
/// the previous refinement head; the attention inputs are always detached.
pub fn decoder_forward<'g, T: Real>(
    g: &'g Graph<T>,
    cfg: &TransformerConfig,
    dec: &DecoderConfig,
    queries: &QuerySet<'g, T>,
    memory: &TokenSequence<'g, T>,
    mode: Mode,
) -> Result<Vec<DecoderLayerOutput<'g, T>>> {
    if mode == Mode::Infer && !queries.cdn.is_empty() {
        return Err(Error::Contract("denoising queries are not allowed at inference".into()));
    }
    let q = queries.len();
    if queries.content.shape() != [q, cfg.d_model] || queries.anchors.shape() != [q, 4] {
        return Err(Error::Shape("query content or anchors do not match the query count".into()));
    }
    let mask = (!queries.cdn.is_empty()).then(|| {
        let blocked = cdn_attention_mask(queries.cdn.groups, queries.cdn.per_group, queries.matching);
        std::sync::Arc::new(additive_mask::<T>(&blocked.into_dyn()))
    });
    let levels = memory.canonical_levels();
    let d = cfg.d_model;
    let mut tgt = queries.content;
    let mut reference = queries.anchors.clone();
    let mut prev_boxes: Option<Tensor<'g, T>> = None;
    let mut outs = Vec::with_capacity(dec.layers);
    for i in 0..dec.layers {
        let p = format!("decoder.l{i}");
        let pos = mlp(g, "decoder.query_pos", g.constant(sine_embed(&reference, d)), 2);
        let qk = tgt + pos;
        let sq = linear(g, &format!("{p}.sa.q"), qk).reshape(&[1, q, d]);
        let sk = linear(g, &format!("{p}.sa.k"), qk).reshape(&[1, q, d]);
        let sv = linear(g, &format!("{p}.sa.v"), tgt).reshape(&[1, q, d]);
        let sa = sq.attention(sk, sv, cfg.heads, mask.clone(), None).out.reshape(&[q, d]);
        tgt = layer_norm(g, &format!("{p}.norm1"), tgt + linear(g, &format!("{p}.sa.out"), sa));
        let refs = Reference::Boxes(reference.clone());
        let ca = deformable_attention(g, &format!("{p}.ca"), tgt + pos, &refs, memory.tokens, &levels, cfg.heads, cfg.points)?;
        tgt = layer_norm(g, &format!("{p}.norm2"), tgt + ca);
        tgt = layer_norm(g, &format!("{p}.norm3"), tgt + mlp(g, &format!("{p}.ffn"), tgt, 2));
        let hidden = layer_norm(g, "decoder.norm", tgt);
        let delta = mlp(g, &format!("{p}.box"), hidden, 3);
        let base = match prev_boxes {
            Some(b) if dec.look_forward_twice => b,
            _ => g.constant(reference.clone()),
        };
        let boxes = (base.inverse_sigmoid(1e-5) + delta)
            .clamp(-ANCHOR_LOGIT_CLAMP, ANCHOR_LOGIT_CLAMP)
            .sigmoid();
        outs.push(DecoderLayerOutput {
            hidden,
            boxes,
            reference: reference.clone(),
        });
        reference = (*boxes.value()).clone();
        prev_boxes = Some(boxes);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{forward_pyramid, BackboneConfig};
    use docseg_autograd::gradcheck::{central_difference, relative_error};
    use docseg_autograd::ParamStore;
    use ndarray::Array3;

    fn small_cfg() -> TransformerConfig {
        TransformerConfig {
            d_model: 16,
            heads: 2,
            points: 2,
            ffn_dim: 32,
        }
    }

    fn random(shape: &[usize], seed: u64, scale: f64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn positional_embedding_is_zero_for_zero_input() {
        let mut init = Init::new(0);
        init.conv("p.0", 3, 4, 8);
        init.conv("p.1", 3, 8, 8);
        let ps = init.finish::<f64>();
        let g = Graph::inference(&ps);
        let map = FeatureMap { tokens: g.constant(ArrayD::zeros(IxDyn(&[20, 4]))), h: 4, w: 5 };
        let out = positional_embedding(&g, "p", &map);
        assert_eq!((out.h, out.w, out.channels()), (4, 5, 8));
        assert!(out.tokens.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_embedding_gradient() {
        let mut init = Init::new(1);
        init.conv("p.0", 3, 2, 3);
        init.conv("p.1", 3, 3, 3);
        init.uniform("p.0.b", &[3], 0.5);
        let ps = init.finish::<f64>();
        let x = random(&[12, 2], 2, 1.0);
        let w = random(&[12, 3], 3, 1.0);
        let f = |p: &ParamStore<f64>| {
            let g = Graph::inference(p);
            let map = FeatureMap { tokens: g.constant(x.clone()), h: 3, w: 4 };
            (positional_embedding(&g, "p", &map).tokens * g.constant(w.clone())).sum_all().item()
        };
        let g = Graph::new(&ps);
        let map = FeatureMap { tokens: g.constant(x.clone()), h: 3, w: 4 };
        let l = (positional_embedding(&g, "p", &map).tokens * g.constant(w.clone())).sum_all();
        let grads = g.backward(l);
        for name in ["p.0.w", "p.0.b", "p.1.w", "p.1.b"] {
            let a: Vec<f64> = grads.param(name).unwrap().iter().copied().collect();
            for i in 0..a.len() {
                let n = central_difference(&ps, name, i, 1e-5, f);
                assert!(relative_error(a[i], n) < 1e-4, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn bilinear_sample_centres_midpoints_and_padding() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::inference(&ps);
        // 2x3 map, one channel: [[1, 2, 3], [4, 5, 6]]
        let map = FeatureMap {
            tokens: g.constant(ArrayD::from_shape_vec(IxDyn(&[6, 1]), (1..=6).map(f64::from).collect()).unwrap()),
            h: 2,
            w: 3,
        };
        let pts = vec![
            0.5 / 3.0, 0.25, // centre of (0, 0)
            2.5 / 3.0, 0.75, // centre of (1, 2)
            1.0 / 3.0, 0.25, // midpoint of (0, 0) and (0, 1)
            1.5, 0.5, // outside
        ];
        let p = g.constant(ArrayD::from_shape_vec(IxDyn(&[4, 2]), pts).unwrap());
        let out = bilinear_sample(&map, p).to_vec();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 6.0).abs() < 1e-12);
        assert!((out[2] - 1.5).abs() < 1e-12);
        assert_eq!(out[3], 0.0);
    }

    #[test]
    fn bilinear_sample_point_gradient() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("map", random(&[20, 3], 4, 1.0));
        ps.insert("pts", random(&[5, 2], 5, 0.45).mapv(|v| v + 0.5));
        let w = random(&[5, 3], 6, 1.0);
        let f = |p: &ParamStore<f64>| {
            let g = Graph::inference(p);
            let map = FeatureMap { tokens: g.param("map"), h: 4, w: 5 };
            (bilinear_sample(&map, g.param("pts")) * g.constant(w.clone())).sum_all().item()
        };
        let g = Graph::new(&ps);
        let map = FeatureMap { tokens: g.param("map"), h: 4, w: 5 };
        let l = (bilinear_sample(&map, g.param("pts")) * g.constant(w.clone())).sum_all();
        let grads = g.backward(l);
        let a: Vec<f64> = grads.param("pts").unwrap().iter().copied().collect();
        for i in 0..a.len() {
            let n = central_difference(&ps, "pts", i, 1e-6, f);
            assert!(relative_error(a[i], n) < 1e-4, "pts[{i}] {} vs {n}", a[i]);
        }
    }

    fn deform_params(cfg: &TransformerConfig, levels: usize, seed: u64) -> ParamStore<f64> {
        let mut init = Init::new(seed);
        init_deformable(&mut init, "da", cfg, levels);
        init.finish()
    }

    #[test]
    fn degenerate_deformable_attention_is_a_projected_sample() {
        let cfg = TransformerConfig { d_model: 4, heads: 1, points: 1, ffn_dim: 4 };
        let mut ps = deform_params(&cfg, 1, 0);
        ps.insert("da.offsets.b", ArrayD::zeros(IxDyn(&[2])));
        let values = random(&[16, 4], 1, 1.0);
        let query = random(&[3, 4], 2, 1.0);
        let refs = random(&[3, 2], 3, 0.4).mapv(|v| v + 0.5);
        let g = Graph::inference(&ps);
        let lv = [SeqLevel { stride: 8, h: 4, w: 4, start: 0 }];
        let out = deformable_attention(&g, "da", g.constant(query), &Reference::Points(refs.clone()), g.constant(values.clone()), &lv, 1, 1).unwrap();
        let v = linear(&g, "da.value", g.constant(values));
        let s = bilinear_sample(&FeatureMap { tokens: v, h: 4, w: 4 }, g.constant(refs));
        let expect = linear(&g, "da.out", s);
        for (a, b) in out.to_vec().iter().zip(expect.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(deformable_attention(&g, "da", g.constant(random(&[1, 4], 0, 1.0)), &Reference::Points(random(&[1, 2], 0, 1.0)), v, &[], 1, 1).is_err());
    }

    #[test]
    fn deformable_attention_gradient_on_two_queries() {
        let cfg = TransformerConfig { d_model: 4, heads: 2, points: 2, ffn_dim: 4 };
        let mut ps = deform_params(&cfg, 1, 7);
        // non-zero sampling nets so every path carries gradient
        ps.insert("da.offsets.w", random(&[4, 8], 8, 0.5));
        ps.insert("da.weights.w", random(&[4, 4], 9, 0.5));
        ps.insert("query", random(&[2, 4], 10, 1.0));
        ps.insert("values", random(&[64, 4], 11, 1.0));
        let refs = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.31, 0.42, 0.63, 0.57]).unwrap();
        let w = random(&[2, 4], 12, 1.0);
        let lv = [SeqLevel { stride: 8, h: 8, w: 8, start: 0 }];
        let run = |g: &Graph<f64>| -> f64 {
            let out = deformable_attention(g, "da", g.param("query"), &Reference::Points(refs.clone()), g.param("values"), &lv, 2, 2).unwrap();
            (out * g.constant(w.clone())).sum_all().item()
        };
        let g = Graph::new(&ps);
        let out = deformable_attention(&g, "da", g.param("query"), &Reference::Points(refs.clone()), g.param("values"), &lv, 2, 2).unwrap();
        let grads = g.backward((out * g.constant(w.clone())).sum_all());
        let names: Vec<String> = ps.names().map(String::from).collect();
        for name in &names {
            let a: Vec<f64> = grads.param(name).unwrap().iter().copied().collect();
            for i in (0..a.len()).step_by(3) {
                let n = central_difference(&ps, name, i, 1e-6, |p| run(&Graph::inference(p)));
                assert!(relative_error(a[i], n) < 1e-4, "{name}[{i}] {} vs {n}", a[i]);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_head() {
        let cfg = TransformerConfig { d_model: 8, heads: 2, points: 3, ffn_dim: 8 };
        let mut ps = deform_params(&cfg, 2, 1);
        ps.insert("da.weights.w", random(&[8, 12], 2, 2.0));
        let g = Graph::inference(&ps);
        let q = g.constant(random(&[5, 8], 3, 1.0));
        let aw = linear(&g, "da.weights", q).reshape(&[10, 6]).softmax().value();
        for row in aw.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    fn encoder_setup(seed: u64) -> (ParamStore<f64>, BackboneConfig, TransformerConfig) {
        let bb = BackboneConfig {
            embed_dim: 8,
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 2, 4],
            window_size: 4,
            ..Default::default()
        };
        let cfg = small_cfg();
        let mut init = Init::new(seed);
        bb.init(&mut init);
        let dims = bb.dims();
        let lv: Vec<_> = ENCODER_STRIDES.iter().enumerate().map(|(i, &s)| (s, dims[i + 1])).collect();
        init_encoder(&mut init, &cfg, &EncoderConfig { layers: 2 }, &lv);
        (init.finish(), bb, cfg)
    }

    #[test]
    fn empty_encoder_is_identity_and_outputs_are_finite() {
        let (ps, bb, cfg) = encoder_setup(0);
        let g = Graph::inference(&ps);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<f32>());
        let pyr = forward_pyramid(&g, &bb, &image).unwrap();
        let seq = build_tokens(&g, &pyr, &ENCODER_STRIDES).unwrap();
        assert_eq!(seq.len(), 64 + 16 + 4);
        let same = encoder_forward(&g, &cfg, &seq, 0).unwrap();
        assert_eq!(same.tokens.to_vec(), seq.tokens.to_vec());
        let out = encoder_forward(&g, &cfg, &seq, 2).unwrap();
        assert!(out.tokens.to_vec().iter().all(|v| v.is_finite()));
        let li = seq.level_index();
        assert_eq!((li[0], li[63], li[64], li[83]), (0, 0, 1, 2));
    }

    #[test]
    fn level_order_does_not_change_token_outputs() {
        let (ps, bb, cfg) = encoder_setup(3);
        let g = Graph::inference(&ps);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image = Array3::from_shape_fn((3, 64, 64), |_| rng.random::<f32>());
        let pyr = forward_pyramid(&g, &bb, &image).unwrap();
        let a = encoder_forward(&g, &cfg, &build_tokens(&g, &pyr, &[8, 16, 32]).unwrap(), 2).unwrap();
        let b = encoder_forward(&g, &cfg, &build_tokens(&g, &pyr, &[32, 8, 16]).unwrap(), 2).unwrap();
        for s in ENCODER_STRIDES {
            let (x, y) = (a.level_map(s).unwrap().tokens.to_vec(), b.level_map(s).unwrap().tokens.to_vec());
            for (u, v) in x.iter().zip(&y) {
                assert!((u - v).abs() < 1e-12, "stride {s}");
            }
        }
    }

    fn gts(n: usize) -> Vec<(usize, BBox)> {
        (0..n)
            .map(|i| (i % 3, BBox::new(0.2 + 0.15 * i as f64, 0.3 + 0.1 * i as f64, 0.1 + 0.02 * i as f64, 0.2)))
            .collect()
    }

    #[test]
    fn cdn_group_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CdnConfig { groups: 2, ..Default::default() };
        let c = build_cdn_groups(&gts(3), &cfg, 5, &mut rng).unwrap();
        assert_eq!((c.len(), c.per_group, c.groups), (12, 6, 2));
        assert_eq!(c.polarity[..2], [Polarity::Positive, Polarity::Negative]);
        assert!(build_cdn_groups(&[], &cfg, 5, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn zero_noise_positives_reproduce_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CdnConfig { lambda_p: 1e-300, label_flip_prob: 0.0, ..Default::default() };
        let g = gts(4);
        let c = build_cdn_groups(&g, &cfg, 5, &mut rng).unwrap();
        for i in 0..c.len() {
            if c.polarity[i] == Polarity::Positive {
                assert_eq!(c.anchors[i], g[c.gt_index[i]].1);
                assert_eq!(c.labels[i], g[c.gt_index[i]].0);
            }
        }
    }

    #[test]
    fn cdn_noise_stays_in_its_band() {
        let cfg = CdnConfig::default();
        let g = gts(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut count = 0;
        while count < 10_000 {
            let c = build_cdn_groups(&g, &cfg, 5, &mut rng).unwrap();
            for i in 0..c.len() {
                let r = relative_noise(&g[c.gt_index[i]].1, &c.anchors[i]);
                for v in r {
                    match c.polarity[i] {
                        Polarity::Positive => assert!(v < cfg.lambda_p),
                        Polarity::Negative => assert!(v > cfg.lambda_p && v < cfg.lambda_e),
                    }
                }
                count += 1;
            }
        }
    }

    #[test]
    fn inverted_noise_bounds_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = CdnConfig { lambda_p: 0.1, lambda_e: 0.02, ..Default::default() };
        assert!(matches!(build_cdn_groups(&gts(1), &cfg, 5, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn mask_blocks_and_validator() {
        let none = cdn_attention_mask(0, 0, 4);
        assert!(none.iter().all(|&b| !b));
        let m = cdn_attention_mask(2, 6, 20);
        assert_eq!(m.dim(), (32, 32));
        assert!(!m[[0, 5]] && m[[0, 6]] && m[[6, 0]] && !m[[11, 6]] && m[[11, 12]] && !m[[12, 31]] && m[[31, 11]]);
        assert!(validate_cdn_mask(&m, 2, 6, 20).is_ok());
        let mut leaked = m.clone();
        leaked[[3, 8]] = false;
        assert!(validate_cdn_mask(&leaked, 2, 6, 20).is_err());
        let mut leaked = m;
        leaked[[20, 1]] = false;
        assert!(validate_cdn_mask(&leaked, 2, 6, 20).is_err());
    }

    fn decoder_setup(layers: usize, lft: bool, seed: u64) -> (ParamStore<f64>, TransformerConfig, DecoderConfig) {
        let cfg = small_cfg();
        let dec = DecoderConfig { layers, queries: 3, look_forward_twice: lft };
        let mut init = Init::new(seed);
        init_decoder(&mut init, &cfg, &dec, 1, 4);
        (init.finish(), cfg, dec)
    }

    fn memory<'g>(g: &'g Graph<f64>) -> TokenSequence<'g, f64> {
        TokenSequence {
            tokens: g.constant(random(&[16, 16], 20, 1.0)),
            pos: g.constant(ArrayD::zeros(IxDyn(&[16, 16]))),
            levels: vec![SeqLevel { stride: 8, h: 4, w: 4, start: 0 }],
        }
    }

    fn anchors() -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&[3, 4]), vec![0.3, 0.3, 0.2, 0.1, 0.6, 0.5, 0.3, 0.3, 0.5, 0.8, 0.6, 0.2]).unwrap()
    }

    #[test]
    fn zero_delta_keeps_anchors() {
        let (ps, cfg, dec) = decoder_setup(1, true, 0);
        let g = Graph::inference(&ps);
        let qs = QuerySet { content: g.constant(random(&[3, 16], 30, 1.0)), anchors: anchors(), cdn: CdnQueries::default(), matching: 3 };
        let out = decoder_forward(&g, &cfg, &dec, &qs, &memory(&g), Mode::Infer).unwrap();
        for (a, b) in out[0].boxes.to_vec().iter().zip(anchors().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn anchors_stay_inside_the_unit_square() {
        let (mut ps, cfg, dec) = decoder_setup(3, true, 1);
        for i in 0..3 {
            ps.insert(format!("decoder.l{i}.box.2.w"), random(&[16, 4], i, 50.0));
        }
        let g = Graph::inference(&ps);
        let qs = QuerySet { content: g.constant(random(&[3, 16], 30, 1.0)), anchors: anchors(), cdn: CdnQueries::default(), matching: 3 };
        for layer in decoder_forward(&g, &cfg, &dec, &qs, &memory(&g), Mode::Infer).unwrap() {
            assert!(layer.boxes.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn denoising_queries_are_refused_at_inference() {
        let (ps, cfg, dec) = decoder_setup(1, true, 0);
        let g = Graph::inference(&ps);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cdn = build_cdn_groups(&gts(1), &CdnConfig { groups: 1, ..Default::default() }, 4, &mut rng).unwrap();
        let content = Tensor::concat(&[g.param("decoder.label_embed").index_rows(&cdn.labels), g.constant(random(&[3, 16], 30, 1.0))], 0);
        let mut a = ArrayD::zeros(IxDyn(&[5, 4]));
        for i in 0..5 {
            for c in 0..4 {
                a[[i, c]] = anchors()[[i.min(2), c]];
            }
        }
        let qs = QuerySet { content, anchors: a, cdn, matching: 3 };
        assert!(matches!(decoder_forward(&g, &cfg, &dec, &qs, &memory(&g), Mode::Infer), Err(Error::Contract(_))));
        assert!(decoder_forward(&g, &cfg, &dec, &qs, &memory(&g), Mode::Train).is_ok());
    }

    fn second_layer_box_grad(lft: bool) -> Option<ArrayD<f64>> {
        let (mut ps, cfg, dec) = decoder_setup(2, lft, 4);
        ps.insert("decoder.l0.box.2.w", random(&[16, 4], 1, 0.5));
        let g = Graph::new(&ps);
        let qs = QuerySet { content: g.constant(random(&[3, 16], 30, 1.0)), anchors: anchors(), cdn: CdnQueries::default(), matching: 3 };
        let out = decoder_forward(&g, &cfg, &dec, &qs, &memory(&g), Mode::Train).unwrap();
        let target = g.constant(ArrayD::from_elem(IxDyn(&[3, 4]), 0.5));
        let loss = (out[1].boxes - target).abs().mean_all();
        g.backward(loss).param("decoder.l0.box.2.w").cloned()
    }

    #[test]
    fn look_forward_twice_routes_gradient_to_the_previous_layer() {
        let on = second_layer_box_grad(true).expect("gradient with the scheme on");
        assert!(on.iter().any(|&v| v != 0.0));
        let off = second_layer_box_grad(false);
        assert!(off.is_none_or(|a| a.iter().all(|&v| v == 0.0)));
    }
}
