//! The assembled segmenter: backbone, encoder, query selection, decoder and
//! mask branch, plus its supervised outputs.

use docseg_autograd::{Graph, ParamStore, Real, Tensor};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_pyramid, BackboneConfig};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::matchloss::{CdnStage, GroundTruth, LossInputs, StageOutput};
use crate::nn::{linear, Init};
use crate::queryselect::{
    encoder_heads, high_projection, init_anchors_from_masks, init_encoder_heads, init_projections, loss_high, loss_low,
    low_projection, select_topk, ContrastiveConfig, LowEmbeddings, PrototypeBank, PrototypeConfig,
};
use crate::segbranch::{build_pem, class_instance_map, init_segbranch, predict_masks, InstancePrediction, SegConfig};
use crate::synthdoc::LayoutSample;
use crate::transformer::{
    build_tokens, decoder_forward, encoder_forward, init_decoder, init_encoder, CdnConfig, CdnQueries, DecoderConfig,
    EncoderConfig, Mode, QuerySet, TransformerConfig, ENCODER_STRIDES,
};

/// Stride of the pixel embedding map.
pub const MASK_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub cdn: CdnConfig,
    pub segmentation: SegConfig,
    pub contrastive: ContrastiveConfig,
    pub prototypes: PrototypeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        self.backbone.validate()?;
        self.transformer.validate()?;
        self.decoder.validate()?;
        self.cdn.validate()?;
        self.segmentation.validate()?;
        self.contrastive.validate()?;
        self.prototypes.validate()
    }

    pub fn init_params(&self, seed: u64) -> ParamStore<f64> {
        let mut init = Init::new(seed);
        self.backbone.init(&mut init);
        let dims = self.backbone.dims();
        let d = self.transformer.d_model;
        let dm = self.segmentation.mask_dim;
        let levels: Vec<(usize, usize)> = ENCODER_STRIDES.iter().enumerate().map(|(i, &s)| (s, dims[i + 1])).collect();
        init_encoder(&mut init, &self.transformer, &self.encoder, &levels);
        init_encoder_heads(&mut init, d, self.num_classes, dm);
        init_projections(&mut init, d, dm, self.contrastive.low_dim);
        init_decoder(&mut init, &self.transformer, &self.decoder, levels.len(), self.num_classes);
        init_segbranch(&mut init, dims[0], d, dm, self.num_classes);
        init.finish()
    }

    pub fn init_bank(&self, seed: u64) -> PrototypeBank {
        PrototypeBank::new(self.prototypes.m, self.segmentation.mask_dim, seed ^ 0x5eed_ba4c, 1.0)
    }

    /// Checks that a parameter store has exactly this model's shapes.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        let want = self.init_params(0);
        for (name, v) in want.iter() {
            match params.get(name) {
                None => return Err(Error::Shape(format!("parameter `{name}` is missing"))),
                Some(p) if p.shape() != v.shape() => {
                    return Err(Error::Shape(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        v.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.names().find(|n| want.get(n).is_none()) {
            return Err(Error::Shape(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Every differentiable output of one forward pass.
pub struct ModelOutput<'g, T: Real> {
    /// Per decoder layer, matching queries only.
    pub decoder: Vec<InstancePrediction<'g, T>>,
    /// Per decoder layer, denoising queries only.
    pub cdn_stages: Vec<CdnStage<'g, T>>,
    /// Selected encoder tokens with their mask logits.
    pub encoder: StageOutput<'g, T>,
    pub topk: Vec<usize>,
    /// Mask-derived anchors of the selected tokens.
    pub anchors: Vec<BBox>,
    pub low_con: Tensor<'g, T>,
    pub high_con: Tensor<'g, T>,
    /// High-level embeddings `[K, D_m]` and their prototype assignment.
    pub high_features: Array2<f64>,
    pub assignment: Vec<usize>,
    pub mask_h: usize,
    pub mask_w: usize,
}

impl<'g, T: Real> ModelOutput<'g, T> {
    pub fn final_prediction(&self) -> &InstancePrediction<'g, T> {
        self.decoder.last().expect("at least one decoder layer")
    }

    pub fn loss_inputs<'a>(&'a self, cdn: Option<&'a CdnQueries>) -> LossInputs<'a, 'g, T> {
        LossInputs {
            encoder: Some(StageOutput { ..self.encoder.clone_handles() }),
            decoder: self
                .decoder
                .iter()
                .map(|p| StageOutput {
                    class_logits: p.class_logits,
                    boxes: p.boxes,
                    mask_logits: Some(p.mask_logits),
                    background: true,
                })
                .collect(),
            cdn: self
                .cdn_stages
                .iter()
                .map(|c| CdnStage { class_logits: c.class_logits, boxes: c.boxes })
                .collect(),
            cdn_queries: cdn,
            low_con: Some(self.low_con),
            high_con: Some(self.high_con),
        }
    }
}

impl<'g, T: Real> StageOutput<'g, T> {
    pub fn clone_handles(&self) -> StageOutput<'g, T> {
        StageOutput {
            class_logits: self.class_logits,
            boxes: self.boxes,
            mask_logits: self.mask_logits,
            background: self.background,
        }
    }
}

fn bbox_rows<T: Real>(boxes: &[BBox]) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(&[boxes.len(), 4]), |ix| T::of(boxes[ix[0]].to_array()[ix[1]].clamp(0.0, 1.0)))
}

/// Runs the model on one `[3, H, W]` image. With `cdn` the denoising queries
/// join the decoder (training); without, the inference path is used.
pub fn forward<'g, T: Real>(
    g: &'g Graph<T>,
    cfg: &ModelConfig,
    image: &Array3<f32>,
    bank: &PrototypeBank,
    tau: f64,
    cdn: Option<&CdnQueries>,
) -> Result<ModelOutput<'g, T>> {
    let pyramid = forward_pyramid(g, &cfg.backbone, image)?;
    let seq = build_tokens(g, &pyramid, &ENCODER_STRIDES)?;
    let memory = encoder_forward(g, &cfg.transformer, &seq, cfg.encoder.layers)?;

    let heads = encoder_heads(g, &memory);
    let topk = select_topk(&heads.class_logits.value(), cfg.decoder.queries)?;
    let sel = heads.select(&topk);

    let s_b = pyramid.level(MASK_STRIDE).ok_or_else(|| Error::Shape("missing stride-4 level".into()))?;
    let t_e8 = memory.level_map(8).ok_or_else(|| Error::Shape("missing stride-8 tokens".into()))?;
    let pem = build_pem(g, s_b, &t_e8)?;

    let high = high_projection(g, sel.mask_embed);
    let enc_masks = predict_masks(high, &pem)?;
    let k = topk.len();
    let probs = enc_masks.value().mapv(|v| 1.0 / (1.0 + (-v.f64()).exp()));
    let probs = probs.into_shape_with_order((k, pem.h, pem.w)).map_err(|e| Error::Shape(e.to_string()))?;
    let anchors = init_anchors_from_masks(probs.view(), cfg.contrastive.anchor_threshold);

    let matching_content = memory.tokens.index_rows(&topk).detach();
    let (content, anchor_rows, cdn_q, mode) = match cdn.filter(|c| !c.is_empty()) {
        Some(c) => {
            let labels = g.param("decoder.label_embed").index_rows(&c.labels);
            let mut all = c.anchors.clone();
            all.extend_from_slice(&anchors);
            (Tensor::concat(&[labels, matching_content], 0), bbox_rows::<T>(&all), c.clone(), Mode::Train)
        }
        None => (matching_content, bbox_rows::<T>(&anchors), CdnQueries::default(), Mode::Infer),
    };
    let ncdn = cdn_q.len();
    let queries = QuerySet { content, anchors: anchor_rows, cdn: cdn_q, matching: k };
    let layers = decoder_forward(g, &cfg.transformer, &cfg.decoder, &queries, &memory, mode)?;

    let mut decoder = Vec::with_capacity(layers.len());
    let mut cdn_stages = Vec::new();
    for layer in &layers {
        let hm = layer.hidden.narrow(0, ncdn, k);
        let bm = layer.boxes.narrow(0, ncdn, k);
        decoder.push(class_instance_map(g, hm, bm, &pem)?);
        if ncdn > 0 {
            let hc = layer.hidden.narrow(0, 0, ncdn);
            cdn_stages.push(CdnStage {
                class_logits: linear(g, "seg.class", hc),
                boxes: layer.boxes.narrow(0, 0, ncdn),
            });
        }
    }

    let det = low_projection(g, sel.box_hidden);
    let low = LowEmbeddings {
        det,
        seg: low_projection(g, sel.seg_hidden),
        cand: det,
        tau,
    };
    let low_con = loss_low(&low, cfg.contrastive.low_pairs)?;
    let hv = high.value();
    let high_features = Array2::from_shape_fn((hv.shape()[0], hv.shape()[1]), |(i, j)| hv[[i, j]].f64());
    let assignment = bank.assign(high_features.view());
    let high_con = loss_high(high, bank, &assignment)?;

    Ok(ModelOutput {
        decoder,
        cdn_stages,
        encoder: StageOutput {
            class_logits: sel.class_logits,
            boxes: sel.boxes,
            mask_logits: Some(enc_masks),
            background: false,
        },
        topk,
        anchors,
        low_con,
        high_con,
        high_features,
        assignment,
        mask_h: pem.h,
        mask_w: pem.w,
    })
}

/// Ground truth of a sample at mask-logit resolution (area-averaged masks).
pub fn ground_truth(sample: &LayoutSample) -> GroundTruth {
    let (h, w) = (sample.height() / MASK_STRIDE, sample.width() / MASK_STRIDE);
    let area = (MASK_STRIDE * MASK_STRIDE) as f64;
    let mut masks = Array2::zeros((sample.instances.len(), h * w));
    for (i, inst) in sample.instances.iter().enumerate() {
        for ((y, x), &on) in inst.mask.indexed_iter() {
            if on {
                masks[[i, (y / MASK_STRIDE) * w + x / MASK_STRIDE]] += 1.0 / area;
            }
        }
    }
    GroundTruth {
        classes: sample.instances.iter().map(|i| i.class_id).collect(),
        boxes: sample.instances.iter().map(|i| i.bbox).collect(),
        masks,
    }
}

/// `(class, box)` pairs in instance order, as used for denoising groups.
pub fn gt_pairs(gt: &GroundTruth) -> Vec<(usize, BBox)> {
    gt.classes.iter().copied().zip(gt.boxes.iter().copied()).collect()
}

/// Mask logits of one prediction as `[Q, h, w]` in `f64`.
pub fn mask_logits_f64<T: Real>(pred: &InstancePrediction<'_, T>) -> Array3<f64> {
    pred.mask_logits_3d().mapv(|v| v.f64())
}

/// Sum of per-row values along the first axis; used by tests and reports.
pub fn column_sums(a: &Array2<f64>) -> Vec<f64> {
    a.sum_axis(Axis(0)).to_vec()
}
