//! Hybrid bipartite matching and the training losses.

use std::f64::consts::PI;

use docseg_autograd::{Real, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::transformer::{CdnQueries, Polarity};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    #[default]
    Cosine,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_l1: f64,
    /// Weight of the mask term (dice and BCE each) in matching and loss.
    pub w_mask: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub schedule: ScheduleShape,
    /// Domain-shift fine-tuning starts at `shift_factor * w_mask`.
    pub shift_factor: f64,
    /// Fraction of fine-tuning steps over which the mask weight decays.
    pub shift_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_cls: 2.0,
            w_l1: 5.0,
            w_mask: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            schedule: ScheduleShape::Cosine,
            shift_factor: 3.0,
            shift_fraction: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_cls < 0.0 || self.w_l1 < 0.0 || self.w_mask < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("loss.focal_alpha must lie in [0, 1]".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::Config("loss.focal_gamma must be non-negative".into()));
        }
        if self.shift_factor < 1.0 {
            return Err(Error::Config("loss.shift_factor must be at least 1".into()));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 1.0) {
            return Err(Error::Config("loss.shift_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn cost_weights(&self, w_mask_eff: f64) -> CostWeights {
        CostWeights {
            w_cls: self.w_cls,
            w_l1: self.w_l1,
            w_mask: w_mask_eff,
            alpha: self.focal_alpha,
            gamma: self.focal_gamma,
        }
    }

    /// Mask-weight schedule for fine-tuning over `steps` steps.
    pub fn domain_shift(&self, steps: usize) -> DomainShiftSchedule {
        DomainShiftSchedule {
            w_start: self.shift_factor * self.w_mask,
            w_end: self.w_mask,
            total_steps: ((steps as f64) * self.shift_fraction).round() as usize,
            shape: self.schedule,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_mask: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShiftSchedule {
    pub w_start: f64,
    pub w_end: f64,
    pub total_steps: usize,
    pub shape: ScheduleShape,
}

/// Mask weight at `step`: decays from `w_start` to `w_end`, then stays.
pub fn hybrid_weight(step: usize, sched: &DomainShiftSchedule) -> f64 {
    if sched.total_steps == 0 {
        return sched.w_end;
    }
    if step > sched.total_steps {
        log::warn!("schedule step {step} clamped to {}", sched.total_steps);
    }
    let t = step.min(sched.total_steps) as f64 / sched.total_steps as f64;
    let f = match sched.shape {
        ScheduleShape::Cosine => 0.5 * (1.0 + (PI * t).cos()),
        ScheduleShape::Linear => 1.0 - t,
    };
    sched.w_end + (sched.w_start - sched.w_end) * f
}

fn one_hot<T: Real>(targets: &[Option<usize>], k: usize) -> Result<ArrayD<T>> {
    let mut t = ArrayD::<T>::zeros(IxDyn(&[targets.len(), k]));
    for (i, c) in targets.iter().enumerate() {
        if let Some(c) = *c {
            if c >= k {
                return Err(Error::Input(format!("target class {c} out of range for {k} logits")));
            }
            t[[i, c]] = T::one();
        }
    }
    Ok(t)
}

/// Elementwise sigmoid focal loss; `None` targets are negatives in every column.
fn focal_elements<'g, T: Real>(logits: Tensor<'g, T>, targets: &[Option<usize>], alpha: f64, gamma: f64) -> Result<Tensor<'g, T>> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("focal gamma must be non-negative, got {gamma}")));
    }
    if logits.ndim() != 2 || logits.dim(0) != targets.len() {
        return Err(Error::Shape(format!("logits {:?} for {} targets", logits.shape(), targets.len())));
    }
    let g = logits.graph();
    let t = one_hot::<T>(targets, logits.dim(1))?;
    let at = t.mapv(|v| if v > T::zero() { T::of(alpha) } else { T::of(1.0 - alpha) });
    let tt = g.constant(t);
    // -log p_t
    let ce = logits.softplus() - logits * tt;
    let loss = if gamma == 0.0 {
        ce
    } else {
        let p = logits.sigmoid();
        // 1 - p_t = p + t - 2 p t
        let q = p + tt - (p * tt).scale(2.0);
        let m = if gamma == 2.0 { q.square() } else { q.powf(gamma) };
        m * ce
    };
    Ok(loss * g.constant(at))
}

/// Mean sigmoid focal loss over all logits.
pub fn focal_loss<'g, T: Real>(logits: Tensor<'g, T>, targets: &[Option<usize>], alpha: f64, gamma: f64) -> Result<Tensor<'g, T>> {
    Ok(focal_elements(logits, targets, alpha, gamma)?.mean_all())
}

fn check_same(a: &Tensor<'_, impl Real>, b: &Tensor<'_, impl Real>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute coordinate difference.
pub fn l1_box_loss<'g, T: Real>(pred: Tensor<'g, T>, gt: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    check_same(&pred, &gt, "box shapes")?;
    Ok((pred - gt).abs().mean_all())
}

fn dice_rows<'g, T: Real>(prob: Tensor<'g, T>, gt: Tensor<'g, T>) -> Tensor<'g, T> {
    let num = (prob * gt).sum_axis(1, false).scale(2.0).add_scalar(1.0);
    let den = (prob.sum_axis(1, false) + gt.sum_axis(1, false)).add_scalar(1.0);
    (num / den).scale(-1.0).add_scalar(1.0)
}

/// `1 - (2|X.Y| + 1) / (|X| + |Y| + 1)` per row `[N, P]`, averaged over rows.
pub fn dice_loss<'g, T: Real>(prob: Tensor<'g, T>, gt: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    check_same(&prob, &gt, "mask shapes")?;
    Ok(dice_rows(prob, gt).mean_all())
}

fn bce_elements<'g, T: Real>(logits: Tensor<'g, T>, gt: Tensor<'g, T>) -> Tensor<'g, T> {
    logits.softplus() - logits * gt
}

/// Binary cross-entropy on mask logits, averaged over pixels.
pub fn mask_bce<'g, T: Real>(logits: Tensor<'g, T>, gt: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    check_same(&logits, &gt, "mask shapes")?;
    Ok(bce_elements(logits, gt).mean_all())
}

/// Ground truth of one image at mask-logit resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub classes: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// Soft masks `[q, h * w]` in `[0, 1]`.
    pub masks: Array2<f64>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    fn box_array<T: Real>(&self, idx: &[usize]) -> ArrayD<T> {
        ArrayD::from_shape_fn(IxDyn(&[idx.len(), 4]), |ix| T::of(self.boxes[idx[ix[0]]].to_array()[ix[1]]))
    }

    fn mask_array<T: Real>(&self, idx: &[usize]) -> ArrayD<T> {
        let p = self.masks.ncols();
        ArrayD::from_shape_fn(IxDyn(&[idx.len(), p]), |ix| T::of(self.masks[[idx[ix[0]], ix[1]]]))
    }
}

/// Cost matrix `[Q, q]` and its weighted terms.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub total: Array2<f64>,
    pub cls: Array2<f64>,
    pub l1: Array2<f64>,
    pub mask: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Positive minus negative focal term at the target logit.
pub fn focal_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    let pos = alpha * (1.0 - p).powf(gamma) * softplus(-logit);
    let neg = (1.0 - alpha) * p.powf(gamma) * softplus(logit);
    pos - neg
}

/// Dice plus BCE between one mask-logit row and one soft target row.
pub fn mask_pair_cost(logits: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut ps, mut gs, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(gt) {
        let p = sigmoid(x);
        inter += p * t;
        ps += p;
        gs += t;
        bce += softplus(x) - x * t;
    }
    let dice = 1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0);
    dice + bce / logits.len().max(1) as f64
}

/// Per-query and per-target sums that reduce [`mask_pair_cost`] to two dot products per pair.
struct MaskCostTerms {
    probs: Array2<f64>,
    logits: Array2<f64>,
    targets: Array2<f64>,
    prob_sums: Vec<f64>,
    softplus_sums: Vec<f64>,
    target_sums: Vec<f64>,
    pixels: f64,
}

impl MaskCostTerms {
    fn new(logits: &Array2<f64>, targets: &Array2<f64>) -> Self {
        let probs = logits.mapv(sigmoid);
        Self {
            prob_sums: probs.rows().into_iter().map(|r| r.sum()).collect(),
            softplus_sums: logits.rows().into_iter().map(|r| r.iter().map(|&x| softplus(x)).sum()).collect(),
            target_sums: targets.rows().into_iter().map(|r| r.sum()).collect(),
            pixels: logits.ncols().max(1) as f64,
            probs,
            logits: logits.to_owned(),
            targets: targets.to_owned(),
        }
    }

    fn cost(&self, q: usize, g: usize) -> f64 {
        let t = self.targets.row(g);
        let inter = self.probs.row(q).dot(&t);
        let xt = self.logits.row(q).dot(&t);
        let dice = 1.0 - (2.0 * inter + 1.0) / (self.prob_sums[q] + self.target_sums[g] + 1.0);
        dice + (self.softplus_sums[q] - xt) / self.pixels
    }
}

/// Matching costs of predictions against ground truth.
///
/// `mask_logits` is `[Q, P]`; pass `None` to skip the mask term.
pub fn cost_matrix(
    class_logits: &Array2<f64>,
    boxes: &Array2<f64>,
    mask_logits: Option<&Array2<f64>>,
    gt: &GroundTruth,
    w: &CostWeights,
) -> Result<CostMatrix> {
    let (nq, ng) = (class_logits.nrows(), gt.len());
    if boxes.dim() != (nq, 4) {
        return Err(Error::Shape(format!("boxes {:?} for {nq} queries", boxes.dim())));
    }
    if let Some(&c) = gt.classes.iter().find(|&&c| c >= class_logits.ncols()) {
        return Err(Error::Input(format!("ground-truth class {c} has no logit column")));
    }
    let mut cm = CostMatrix {
        total: Array2::zeros((nq, ng)),
        cls: Array2::zeros((nq, ng)),
        l1: Array2::zeros((nq, ng)),
        mask: Array2::zeros((nq, ng)),
    };
    if let Some(m) = mask_logits {
        if m.nrows() != nq || m.ncols() != gt.masks.ncols() {
            return Err(Error::Shape(format!("mask logits {:?} vs targets {:?}", m.dim(), gt.masks.dim())));
        }
    }
    let mask_terms = match mask_logits {
        Some(m) if w.w_mask != 0.0 => Some(MaskCostTerms::new(m, &gt.masks)),
        _ => None,
    };
    for q in 0..nq {
        for g in 0..ng {
            let c = w.w_cls * focal_cost(class_logits[[q, gt.classes[g]]], w.alpha, w.gamma);
            let b = gt.boxes[g].to_array();
            let l = w.w_l1 * (0..4).map(|k| (boxes[[q, k]] - b[k]).abs()).sum::<f64>() / 4.0;
            let m = mask_terms.as_ref().map_or(0.0, |t| w.w_mask * t.cost(q, g));
            cm.cls[[q, g]] = c;
            cm.l1[[q, g]] = l;
            cm.mask[[q, g]] = m;
            cm.total[[q, g]] = c + l + m;
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(query, gt)` pairs in ground-truth order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
    /// Summed class, box and mask costs of the pairs.
    pub term_costs: [f64; 3],
}

/// Minimum-cost assignment of `rows` to distinct `cols` (all rows matched,
/// `rows.len() <= cols.len()`), shortest augmenting paths with potentials.
fn assign(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    let a = |i: usize, j: usize| cost[[rows[i - 1], cols[j - 1]]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    out
}

/// Minimum total over matchings of `min(|gts|, |queries|)` pairs; `cost` is `[Q, q]`.
fn min_cost(cost: &Array2<f64>, queries: &[usize], gts: &[usize]) -> f64 {
    if queries.is_empty() || gts.is_empty() {
        return 0.0;
    }
    if gts.len() <= queries.len() {
        let t = cost.t().to_owned();
        let a = assign(&t, gts, queries);
        gts.iter().zip(&a).map(|(&g, &q)| cost[[q, g]]).sum()
    } else {
        let a = assign(cost, queries, gts);
        queries.iter().zip(&a).map(|(&q, &g)| cost[[q, g]]).sum()
    }
}

/// Minimum-cost injective matching of ground truths (columns) to queries
/// (rows). Among optimal matchings the lexicographically smallest in
/// (gt index, query index) is returned.
pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    if let Some(((q, g), v)) = cost.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Input(format!("cost entry ({q}, {g}) is {v}")));
    }
    let (nq, ng) = cost.dim();
    let all_q: Vec<usize> = (0..nq).collect();
    let all_g: Vec<usize> = (0..ng).collect();
    let best = min_cost(cost, &all_q, &all_g);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut free: Vec<usize> = all_q.clone();
    let mut fixed = 0.0;
    let mut pairs = Vec::new();
    for g in 0..ng {
        let rest: Vec<usize> = (g + 1..ng).collect();
        let mut chosen = None;
        for (k, &q) in free.iter().enumerate() {
            let mut remaining = free.clone();
            remaining.remove(k);
            let total = fixed + cost[[q, g]] + min_cost(cost, &remaining, &rest);
            if total <= best + tol {
                chosen = Some(k);
                break;
            }
        }
        match chosen {
            Some(k) => {
                let q = free.remove(k);
                fixed += cost[[q, g]];
                pairs.push((q, g));
            }
            // more ground truths than queries: this one stays unmatched
            None => {}
        }
    }
    let total_cost = pairs.iter().map(|&(q, g)| cost[[q, g]]).sum();
    Ok(MatchResult {
        pairs,
        unmatched_queries: free,
        total_cost,
        term_costs: [0.0; 3],
    })
}

/// Hungarian matching on a weighted cost matrix, with per-term totals.
pub fn match_costs(cm: &CostMatrix) -> Result<MatchResult> {
    let mut r = hungarian(&cm.total)?;
    for &(q, g) in &r.pairs {
        r.term_costs[0] += cm.cls[[q, g]];
        r.term_costs[1] += cm.l1[[q, g]];
        r.term_costs[2] += cm.mask[[q, g]];
    }
    Ok(r)
}

/// Predictions of one supervised stage (encoder selection or a decoder layer).
pub struct StageOutput<'g, T: Real> {
    /// `[N, K]`; with `background` the last column is the no-object class.
    pub class_logits: Tensor<'g, T>,
    /// `[N, 4]`
    pub boxes: Tensor<'g, T>,
    /// `[N, P]`
    pub mask_logits: Option<Tensor<'g, T>>,
    pub background: bool,
}

/// Denoising-query predictions of one decoder layer.
pub struct CdnStage<'g, T: Real> {
    pub class_logits: Tensor<'g, T>,
    pub boxes: Tensor<'g, T>,
}

pub struct LossInputs<'a, 'g, T: Real> {
    pub encoder: Option<StageOutput<'g, T>>,
    pub decoder: Vec<StageOutput<'g, T>>,
    pub cdn: Vec<CdnStage<'g, T>>,
    pub cdn_queries: Option<&'a CdnQueries>,
    pub low_con: Option<Tensor<'g, T>>,
    pub high_con: Option<Tensor<'g, T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_mask_eff: f64,
    pub w_low: f64,
    pub w_high: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn cost(&self) -> CostWeights {
        CostWeights {
            w_cls: self.w_cls,
            w_l1: self.w_l1,
            w_mask: self.w_mask_eff,
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }
}

/// Weighted per-term values; `total` is their sum in field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub mask_dice: f64,
    pub mask_bce: f64,
    pub cdn_pos: f64,
    pub cdn_neg: f64,
    pub low_con: f64,
    pub high_con: f64,
    pub w_mask_eff: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("cls", self.cls),
            ("l1", self.l1),
            ("mask_dice", self.mask_dice),
            ("mask_bce", self.mask_bce),
            ("low_con", self.low_con),
            ("high_con", self.high_con),
            ("cdn_pos", self.cdn_pos),
            ("cdn_neg", self.cdn_neg),
        ]
    }
}

pub struct TotalLoss<'g, T: Real> {
    pub total: Tensor<'g, T>,
    /// Sum of the matching and contrastive terms, before denoising terms.
    pub matching_total: Tensor<'g, T>,
    pub breakdown: LossBreakdown,
    /// Matching of every stage, encoder first.
    pub matches: Vec<MatchResult>,
}

fn to_array2<T: Real>(t: &Tensor<'_, T>) -> Array2<f64> {
    let v = t.value();
    let s = v.shape();
    Array2::from_shape_fn((s[0], s[1]), |(i, j)| v[[i, j]].f64())
}

struct StageTerms<'g, T: Real> {
    cls: Tensor<'g, T>,
    l1: Option<Tensor<'g, T>>,
    dice: Option<Tensor<'g, T>>,
    bce: Option<Tensor<'g, T>>,
}

fn stage_terms<'g, T: Real>(
    s: &StageOutput<'g, T>,
    gt: &GroundTruth,
    w: &LossWeights,
    norm: f64,
) -> Result<(StageTerms<'g, T>, MatchResult)> {
    let g = s.class_logits.graph();
    let logits = to_array2(&s.class_logits);
    let boxes = to_array2(&s.boxes);
    let masks = s.mask_logits.as_ref().map(to_array2);
    let cm = cost_matrix(&logits, &boxes, masks.as_ref(), gt, &w.cost())?;
    let m = match_costs(&cm)?;
    let n = s.class_logits.dim(0);
    let k = s.class_logits.dim(1);
    let mut targets: Vec<Option<usize>> = vec![if s.background { Some(k - 1) } else { None }; n];
    for &(q, gi) in &m.pairs {
        targets[q] = Some(gt.classes[gi]);
    }
    let cls = focal_elements(s.class_logits, &targets, w.alpha, w.gamma)?.sum_all().scale(w.w_cls / norm);
    let mut out = StageTerms { cls, l1: None, dice: None, bce: None };
    if !m.pairs.is_empty() {
        let qi: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        let gi: Vec<usize> = m.pairs.iter().map(|p| p.1).collect();
        let pb = s.boxes.index_rows(&qi);
        out.l1 = Some((pb - g.constant(gt.box_array(&gi))).abs().sum_all().scale(w.w_l1 / (4.0 * norm)));
        if let Some(ml) = s.mask_logits {
            let pm = ml.index_rows(&qi);
            let tm = g.constant(gt.mask_array(&gi));
            let p = gt.masks.ncols().max(1) as f64;
            out.dice = Some(dice_rows(pm.sigmoid(), tm).sum_all().scale(w.w_mask_eff / norm));
            out.bce = Some(bce_elements(pm, tm).sum_all().scale(w.w_mask_eff / (p * norm)));
        }
    }
    Ok((out, m))
}

fn add_opt<'g, T: Real>(acc: Option<Tensor<'g, T>>, t: Option<Tensor<'g, T>>) -> Option<Tensor<'g, T>> {
    match (acc, t) {
        (Some(a), Some(b)) => Some(a + b),
        (a, None) => a,
        (None, b) => b,
    }
}

fn value_of<T: Real>(t: &Option<Tensor<'_, T>>) -> f64 {
    t.map_or(0.0, |t| t.item().f64())
}

/// Weighted training loss over all stages.
///
/// Every stage is matched independently. Focal terms are normalized by the
/// number of ground-truth objects; denoising positives use their known
/// ground-truth pairing and negatives only learn the background class.
pub fn total_loss<'g, T: Real>(inputs: &LossInputs<'_, 'g, T>, gt: &GroundTruth, w: &LossWeights) -> Result<TotalLoss<'g, T>> {
    let norm = gt.len().max(1) as f64;
    let mut stages: Vec<&StageOutput<'g, T>> = Vec::new();
    stages.extend(inputs.encoder.as_ref());
    stages.extend(inputs.decoder.iter());
    if stages.is_empty() {
        return Err(Error::Contract("no predictions to supervise".into()));
    }
    let (mut cls, mut l1, mut dice, mut bce) = (None, None, None, None);
    let mut matches = Vec::new();
    for s in stages {
        let (t, m) = stage_terms(s, gt, w, norm)?;
        cls = add_opt(cls, Some(t.cls));
        l1 = add_opt(l1, t.l1);
        dice = add_opt(dice, t.dice);
        bce = add_opt(bce, t.bce);
        matches.push(m);
    }
    let low = inputs.low_con.map(|t| t.scale(w.w_low));
    let high = inputs.high_con.map(|t| t.scale(w.w_high));

    let (mut cdn_pos, mut cdn_neg) = (None, None);
    if let Some(cq) = inputs.cdn_queries.filter(|c| !c.is_empty()) {
        if inputs.cdn.is_empty() {
            return Err(Error::Contract("denoising queries without denoising outputs".into()));
        }
        let pos: Vec<usize> = (0..cq.len()).filter(|&i| cq.polarity[i] == Polarity::Positive).collect();
        let neg: Vec<usize> = (0..cq.len()).filter(|&i| cq.polarity[i] == Polarity::Negative).collect();
        let pos_targets: Vec<Option<usize>> = pos.iter().map(|&i| Some(gt.classes[cq.gt_index[i]])).collect();
        let pos_gt: Vec<usize> = pos.iter().map(|&i| cq.gt_index[i]).collect();
        for st in &inputs.cdn {
            if st.class_logits.dim(0) != cq.len() {
                return Err(Error::Shape("denoising outputs do not match the denoising queries".into()));
            }
            let g = st.class_logits.graph();
            let k = st.class_logits.dim(1);
            let np = pos.len().max(1) as f64;
            let pc = focal_elements(st.class_logits.index_rows(&pos), &pos_targets, w.alpha, w.gamma)?.sum_all().scale(w.w_cls / np);
            let pb = (st.boxes.index_rows(&pos) - g.constant(gt.box_array(&pos_gt))).abs().sum_all().scale(w.w_l1 / (4.0 * np));
            cdn_pos = add_opt(cdn_pos, Some(pc + pb));
            let neg_targets = vec![Some(k - 1); neg.len()];
            let nn = neg.len().max(1) as f64;
            let nc = focal_elements(st.class_logits.index_rows(&neg), &neg_targets, w.alpha, w.gamma)?.sum_all().scale(w.w_cls / nn);
            cdn_neg = add_opt(cdn_neg, Some(nc));
        }
    }

    let mut breakdown = LossBreakdown {
        total: 0.0,
        cls: value_of(&cls),
        l1: value_of(&l1),
        mask_dice: value_of(&dice),
        mask_bce: value_of(&bce),
        cdn_pos: value_of(&cdn_pos),
        cdn_neg: value_of(&cdn_neg),
        low_con: value_of(&low),
        high_con: value_of(&high),
        w_mask_eff: w.w_mask_eff,
    };
    for (name, v) in breakdown.terms() {
        if !v.is_finite() {
            return Err(Error::Training(format!("loss term `{name}` is {v}")));
        }
    }
    let mut matching = cls.expect("at least one stage");
    for t in [l1, dice, bce, low, high].into_iter().flatten() {
        matching = matching + t;
    }
    let mut total = matching;
    for t in [cdn_pos, cdn_neg].into_iter().flatten() {
        total = total + t;
    }
    breakdown.total = total.item().f64();
    Ok(TotalLoss {
        total,
        matching_total: matching,
        breakdown,
        matches,
    })
}
