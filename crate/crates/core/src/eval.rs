//! COCO-style average precision on binarized masks and boxes.

use std::path::Path;

use docseg_autograd::Real;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::predict::{detect, Weights};
use crate::segbranch::Detection;
use crate::synthdoc::{read_dataset, Instance, LayoutSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouKind {
    Mask,
    Box,
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug, Default)]
pub struct ImageEval {
    pub gt: Vec<Instance>,
    pub preds: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub name: String,
    pub num_gt: usize,
    pub num_pred: usize,
    pub mask_ap50: f64,
    pub mask_ap75: f64,
    pub box_ap50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mask_ap50: f64,
    pub mask_ap75: f64,
    pub box_ap50: f64,
    /// Classes with at least one ground-truth instance; the means above
    /// average over exactly these.
    pub per_class: Vec<ClassAp>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_pred: usize,
}

pub fn mask_iou(a: &ndarray::Array2<bool>, b: &ndarray::Array2<bool>) -> f64 {
    if a.dim() != b.dim() {
        return 0.0;
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn iou(kind: IouKind, p: &Detection, g: &Instance) -> f64 {
    match kind {
        IouKind::Mask => mask_iou(&p.mask, &g.mask),
        IouKind::Box => p.bbox.iou(&g.bbox),
    }
}

/// Area under the 101-point interpolated precision/recall curve given
/// per-detection true-positive flags in descending score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&rc| rc >= r - 1e-12) {
            sum += precision[i];
        }
    }
    sum / 101.0
}

/// AP of one class at one IoU threshold, or `None` when it has no ground truth.
///
/// Detections are ranked by score across all images (ties keep image then
/// detection order); each one greedily takes the unmatched ground truth of
/// its class with the highest IoU at or above `threshold`.
pub fn class_ap(images: &[ImageEval], class_id: usize, threshold: f64, kind: IouKind) -> Option<f64> {
    let num_gt: usize = images
        .iter()
        .map(|im| im.gt.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (i, im) in images.iter().enumerate() {
        for (j, p) in im.preds.iter().enumerate() {
            if p.class_id == class_id {
                ranked.push((i, j, p.score));
            }
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gt.len()]).collect();
    let tp: Vec<bool> = ranked
        .iter()
        .map(|&(i, j, _)| {
            let p = &images[i].preds[j];
            let mut best: Option<(usize, f64)> = None;
            for (k, g) in images[i].gt.iter().enumerate() {
                if g.class_id != class_id || taken[i][k] {
                    continue;
                }
                let v = iou(kind, p, g);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, _)) => {
                    taken[i][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    Some(interpolated_ap(&tp, num_gt))
}

pub fn evaluate_predictions(images: &[ImageEval], class_names: &[String]) -> EvalReport {
    let mut per_class = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let Some(mask_ap50) = class_ap(images, c, 0.5, IouKind::Mask) else { continue };
        per_class.push(ClassAp {
            class_id: c,
            name: name.clone(),
            num_gt: images.iter().map(|im| im.gt.iter().filter(|g| g.class_id == c).count()).sum(),
            num_pred: images.iter().map(|im| im.preds.iter().filter(|p| p.class_id == c).count()).sum(),
            mask_ap50,
            mask_ap75: class_ap(images, c, 0.75, IouKind::Mask).unwrap_or(0.0),
            box_ap50: class_ap(images, c, 0.5, IouKind::Box).unwrap_or(0.0),
        });
    }
    let mean = |f: fn(&ClassAp) -> f64| {
        if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
        }
    };
    EvalReport {
        mask_ap50: mean(|c| c.mask_ap50),
        mask_ap75: mean(|c| c.mask_ap75),
        box_ap50: mean(|c| c.box_ap50),
        num_images: images.len(),
        num_gt: images.iter().map(|im| im.gt.len()).sum(),
        num_pred: images.iter().map(|im| im.preds.len()).sum(),
        per_class,
    }
}

/// Runs the model on every sample and scores its detections.
pub fn evaluate_samples<T: Real>(
    weights: Weights<'_, T>,
    samples: &[LayoutSample],
    class_names: &[String],
    score_threshold: f64,
) -> Result<EvalReport> {
    let images = samples
        .iter()
        .map(|s| {
            Ok(ImageEval {
                gt: s.instances.clone(),
                preds: detect(weights, &s.image, score_threshold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_predictions(&images, class_names))
}

/// Scores a checkpoint on a dataset directory.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path) -> Result<EvalReport> {
    let ck = Checkpoint::<f64>::load(ckpt)?;
    let (manifest, samples) = read_dataset(data)?;
    let model = ck.config.model();
    if manifest.categories.len() != model.num_classes {
        return Err(Error::Shape(format!(
            "dataset has {} categories, checkpoint expects {} (parameter `seg.class.w`)",
            manifest.categories.len(),
            model.num_classes
        )));
    }
    let weights = Weights { model: &model, params: &ck.params, bank: &ck.bank, tau: ck.config.tau() };
    evaluate_samples(weights, &samples, &manifest.class_names(), ck.config.eval.score_threshold)
}
