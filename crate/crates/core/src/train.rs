//! Training and domain-shift fine-tuning loops with JSON-lines metrics,
//! periodic checkpoints and optional early stopping on training-set AP.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use docseg_autograd::{Graph, ParamStore, Real};
use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, EvalReport};
use crate::matchloss::{hybrid_weight, total_loss, DomainShiftSchedule, GroundTruth, LossBreakdown};
use crate::model::{forward, ground_truth, gt_pairs, ModelConfig};
use crate::optim::{grad_norm, Adam};
use crate::predict::Weights;
use crate::queryselect::PrototypeBank;
use crate::synthdoc::{generate_dataset, read_dataset, LayoutSample};
use crate::transformer::{build_cdn_groups, CdnQueries};

/// Training pages with their class names and mask-resolution targets.
pub struct Dataset {
    pub samples: Vec<LayoutSample>,
    pub class_names: Vec<String>,
    pub targets: Vec<GroundTruth>,
}

impl Dataset {
    pub fn new(samples: Vec<LayoutSample>, class_names: Vec<String>) -> Self {
        let targets = samples.iter().map(ground_truth).collect();
        Self { samples, class_names, targets }
    }

    /// `data.path` when set, otherwise `data.synth_n` generated pages.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let (samples, names) = match &cfg.data.path {
            Some(dir) => {
                let (manifest, samples) = read_dataset(dir)?;
                if manifest.categories.len() != cfg.synth.num_classes {
                    return Err(Error::Config(format!(
                        "{} has {} categories but synth.num_classes is {}",
                        dir.display(),
                        manifest.categories.len(),
                        cfg.synth.num_classes
                    )));
                }
                (samples, manifest.class_names())
            }
            None => (generate_dataset(cfg.data.synth_n, cfg.data.synth_seed, &cfg.synth)?, cfg.synth.class_names()),
        };
        if samples.is_empty() {
            return Err(Error::Input("the training set is empty".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.height() % 32 != 0 || s.width() % 32 != 0) {
            return Err(Error::Input(format!(
                "sample {} is {}x{}, sides must be multiples of 32",
                s.sample_id,
                s.height(),
                s.width()
            )));
        }
        Ok(Self::new(samples, names))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One JSON line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub dataset_loss: f64,
    pub loss_ratio: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Steps completed when the run ended.
    pub steps: usize,
    pub stopped_early: bool,
    /// Mean total loss over the training set before the first and after the last step.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub eval: Option<EvalReport>,
    /// Mask-weight schedule of a domain-shift run.
    pub domain_shift: Option<(f64, f64)>,
    pub seconds: f64,
}

impl TrainSummary {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Mixes run seed, step and batch slot into one stream seed.
fn stream_seed(seed: u64, step: usize, slot: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (slot as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sample indices of a step: consecutive slices of one shuffled order per epoch.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let order = |epoch: usize| {
        let mut o: Vec<usize> = (0..n).collect();
        o.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch, usize::MAX)));
        o
    };
    let mut cached: Option<(usize, Vec<usize>)> = None;
    let mut out = Vec::with_capacity(batch);
    for pos in step * batch..(step + 1) * batch {
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, order(epoch)));
        }
        if let Some((_, o)) = &cached {
            out.push(o[pos % n]);
        }
    }
    out
}

fn add_scaled(acc: &mut LossBreakdown, b: &LossBreakdown, s: f64) {
    acc.total += s * b.total;
    acc.cls += s * b.cls;
    acc.l1 += s * b.l1;
    acc.mask_dice += s * b.mask_dice;
    acc.mask_bce += s * b.mask_bce;
    acc.cdn_pos += s * b.cdn_pos;
    acc.cdn_neg += s * b.cdn_neg;
    acc.low_con += s * b.low_con;
    acc.high_con += s * b.high_con;
    acc.w_mask_eff += s * b.w_mask_eff;
}

struct SampleResult<T: Real> {
    breakdown: LossBreakdown,
    grads: BTreeMap<String, ArrayD<T>>,
    features: Array2<f64>,
    assignment: Vec<usize>,
}

fn cdn_for(cfg: &RunConfig, model: &ModelConfig, gt: &GroundTruth, seed: u64) -> Result<Option<CdnQueries>> {
    if !cfg.cdn.enabled {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Some(build_cdn_groups(&gt_pairs(gt), &cfg.cdn, model.num_classes, &mut rng)?))
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: &'a ModelConfig,
    data: &'a Dataset,
}

/// Loss, gradients and high-level features of sample `idx`.
fn sample_step<T: Real>(
    ctx: &Ctx<'_>,
    params: &ParamStore<T>,
    bank: &PrototypeBank,
    idx: usize,
    w_mask_eff: f64,
    seed: u64,
) -> Result<SampleResult<T>> {
    let (cfg, model) = (ctx.cfg, ctx.model);
    let (sample, gt) = (&ctx.data.samples[idx], &ctx.data.targets[idx]);
    let cdn = cdn_for(cfg, model, gt, seed)?;
    let g = Graph::new(params);
    let out = forward(&g, model, &sample.image, bank, cfg.tau(), cdn.as_ref())?;
    let finite = |t: docseg_autograd::Tensor<'_, T>| t.value().iter().all(|v| v.f64().is_finite());
    if !out.decoder.iter().all(|p| finite(p.class_logits) && finite(p.boxes) && finite(p.mask_logits)) {
        return Err(Error::Training(format!("non-finite model outputs on sample {idx}")));
    }
    let loss = total_loss(&out.loss_inputs(cdn.as_ref()), gt, &cfg.loss_weights(w_mask_eff))?;
    let grads = g.backward(loss.total).into_params();
    Ok(SampleResult {
        breakdown: loss.breakdown,
        grads,
        features: out.high_features,
        assignment: out.assignment,
    })
}

/// Mean total loss over the dataset with fixed denoising draws.
pub fn dataset_loss<T: Real>(
    cfg: &RunConfig,
    params: &ParamStore<T>,
    bank: &PrototypeBank,
    data: &Dataset,
    w_mask_eff: f64,
) -> Result<f64> {
    let model = cfg.model();
    let mut sum = 0.0;
    for (i, (s, gt)) in data.samples.iter().zip(&data.targets).enumerate() {
        let cdn = cdn_for(cfg, &model, gt, stream_seed(cfg.train.seed, i, usize::MAX - 1))?;
        let g = Graph::inference(params);
        let out = forward(&g, &model, &s.image, bank, cfg.tau(), cdn.as_ref())?;
        sum += total_loss(&out.loss_inputs(cdn.as_ref()), gt, &cfg.loss_weights(w_mask_eff))?.breakdown.total;
    }
    Ok(sum / data.len() as f64)
}

/// Where a run starts from.
pub enum Start<T: Real> {
    Fresh,
    /// Continue a run: parameters, moments, bank and step counter.
    Resume(Checkpoint<T>),
    /// Domain-shift fine-tuning: parameters and bank only, step 0.
    Finetune(Checkpoint<T>),
}

struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    fn write<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs the optimization described by `cfg` at precision `T`.
pub fn run<T: Real>(cfg: &RunConfig, data: &Dataset, start: Start<T>) -> Result<TrainSummary> {
    cfg.validate()?;
    let model = cfg.model();
    let t0 = Instant::now();
    let out_dir = &cfg.train.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut params, mut adam, mut bank, first_step, shift) = match start {
        Start::Fresh => (model.init_params(cfg.train.seed).cast::<T>(), Adam::default(), model.init_bank(cfg.train.seed), 0, None),
        Start::Resume(ck) => {
            model.check_params(&ck.params)?;
            (ck.params, ck.adam, ck.bank, ck.step, None)
        }
        Start::Finetune(ck) => {
            model.check_params(&ck.params)?;
            if ck.preset == cfg.data.preset {
                log::warn!("fine-tuning within preset {}; applying the domain-shift schedule anyway", cfg.data.preset.name());
            }
            log::info!("domain shift {} -> {}", ck.preset.name(), cfg.data.preset.name());
            (ck.params, Adam::default(), ck.bank, 0, Some(cfg.loss.domain_shift(cfg.train.steps)))
        }
    };
    if bank.len() != cfg.prototypes.m || bank.dim() != model.segmentation.mask_dim {
        return Err(Error::Shape(format!(
            "prototype bank is {}x{}, config wants {}x{}",
            bank.len(),
            bank.dim(),
            cfg.prototypes.m,
            model.segmentation.mask_dim
        )));
    }
    let w_mask = |step: usize| match &shift {
        Some(s) => hybrid_weight(step.min(s.total_steps), s),
        None => cfg.loss.w_mask,
    };

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsLog::open(&metrics_path, first_step > 0)?;
    let mut evals = MetricsLog::open(&out_dir.join("eval.jsonl"), first_step > 0)?;
    let initial_loss = dataset_loss(cfg, &params, &bank, data, w_mask(first_step))?;
    log::info!("start at step {first_step}: dataset loss {initial_loss:.4}");

    let mut last_good: Option<PathBuf> = None;
    let save = |step: usize, params: &ParamStore<T>, adam: &Adam<T>, bank: &PrototypeBank, name: &str| -> Result<PathBuf> {
        let path = out_dir.join(name);
        Checkpoint {
            config: cfg.clone(),
            step,
            preset: cfg.data.preset,
            params: params.clone(),
            adam: adam.clone(),
            bank: bank.clone(),
        }
        .save(&path)?;
        Ok(path)
    };
    let fail = |msg: String, last_good: &Option<PathBuf>| {
        let ck = last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        Error::Training(format!("{msg}; last good checkpoint: {ck}"))
    };

    let ctx = Ctx { cfg, model: &model, data };
    let batch = cfg.train.batch;
    let inv = 1.0 / batch as f64;
    let mut step = first_step;
    let mut stopped_early = false;
    let mut last_eval = None;
    while step < cfg.train.steps {
        let wm = w_mask(step);
        let mut record = LossBreakdown::default();
        let mut grads: BTreeMap<String, ArrayD<T>> = BTreeMap::new();
        let mut bank_inputs = Vec::with_capacity(batch);
        for (slot, idx) in batch_indices(cfg.train.seed, step, batch, data.len()).into_iter().enumerate() {
            let r = sample_step(&ctx, &params, &bank, idx, wm, stream_seed(cfg.train.seed, step, slot))
            .map_err(|e| match e {
                Error::Training(m) => fail(format!("step {step}: {m}"), &last_good),
                other => other,
            })?;
            add_scaled(&mut record, &r.breakdown, inv);
            for (name, g) in r.grads {
                let g = g.mapv(|v| v * T::of(inv));
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
            bank_inputs.push((r.features, r.assignment));
        }
        if !record.total.is_finite() || !grad_norm(&grads).is_finite() {
            return Err(fail(format!("non-finite loss or gradient at step {step}"), &last_good));
        }
        metrics.write(&StepRecord { step, loss: record })?;
        if step % cfg.train.log_every == 0 {
            log::info!("step {step} loss {:.4} w_mask {:.3}", record.total, record.w_mask_eff);
        }
        adam.step(&mut params, &grads, &cfg.optimizer);
        for (features, assignment) in &bank_inputs {
            bank.update(features.view(), assignment, &cfg.prototypes);
        }
        step += 1;

        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 && step < cfg.train.steps {
            last_good = Some(save(step, &params, &adam, &bank, &format!("ckpt_{step:06}.safetensors"))?);
        }
        if cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0 && step < cfg.train.steps {
            let weights = Weights { model: &model, params: &params, bank: &bank, tau: cfg.tau() };
            let report = evaluate_samples(weights, &data.samples, &data.class_names, cfg.eval.score_threshold)?;
            let loss = dataset_loss(cfg, &params, &bank, data, w_mask(step))?;
            let ratio = loss / initial_loss;
            log::info!(
                "eval at step {step}: mask AP50 {:.3} box AP50 {:.3} loss ratio {ratio:.3}",
                report.mask_ap50,
                report.box_ap50
            );
            evals.write(&EvalRecord { step, dataset_loss: loss, loss_ratio: ratio, report: report.clone() })?;
            // a decaying mask weight must reach its floor before stopping
            let schedule_done = shift.as_ref().is_none_or(|s| step >= s.total_steps);
            let reached = cfg.train.stop_ap > 0.0
                && schedule_done
                && report.mask_ap50 >= cfg.train.stop_ap
                && report.box_ap50 >= cfg.train.stop_ap
                && ratio < cfg.train.stop_loss_ratio;
            last_eval = Some(report);
            if reached {
                stopped_early = true;
                break;
            }
        }
    }

    let final_checkpoint = save(step, &params, &adam, &bank, "final.safetensors")?;
    let final_loss = dataset_loss(cfg, &params, &bank, data, w_mask(step))?;
    let eval = if cfg.train.eval_every > 0 {
        let weights = Weights { model: &model, params: &params, bank: &bank, tau: cfg.tau() };
        match (stopped_early, last_eval) {
            (true, Some(r)) => Some(r),
            _ => Some(evaluate_samples(weights, &data.samples, &data.class_names, cfg.eval.score_threshold)?),
        }
    } else {
        None
    };
    if let Some(report) = &eval {
        evals.write(&EvalRecord { step, dataset_loss: final_loss, loss_ratio: final_loss / initial_loss, report: report.clone() })?;
    }
    Ok(TrainSummary {
        steps: step,
        stopped_early,
        initial_loss,
        final_loss,
        final_checkpoint,
        metrics: metrics_path,
        eval,
        domain_shift: shift.map(|s: DomainShiftSchedule| (s.w_start, s.w_end)),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn dispatch(cfg: &RunConfig, ckpt: Option<&Path>, finetune: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = Dataset::from_config(cfg)?;
    fn go<T: Real>(cfg: &RunConfig, data: &Dataset, ckpt: Option<&Path>, finetune: bool) -> Result<TrainSummary> {
        let start = match ckpt {
            None => Start::Fresh,
            Some(p) if finetune => Start::Finetune(Checkpoint::<T>::load(p)?),
            Some(p) => Start::Resume(Checkpoint::<T>::load(p)?),
        };
        run::<T>(cfg, data, start)
    }
    match cfg.train.precision {
        Precision::F32 => go::<f32>(cfg, &data, ckpt, finetune),
        Precision::F64 => go::<f64>(cfg, &data, ckpt, finetune),
    }
}

/// `train --config FILE [--resume CKPT]`
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    dispatch(cfg, resume, false)
}

/// `finetune --config FILE --from CKPT`: new optimizer state, mask weight
/// decaying from `shift_factor * w_mask` to `w_mask`.
pub fn finetune(cfg: &RunConfig, from: &Path) -> Result<TrainSummary> {
    dispatch(cfg, Some(from), true)
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::TINY_TOML;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn tiny(dir: &Path, steps: usize, extra: &str) -> RunConfig {
        let text = format!(
            "{}\n[data]\nsynth_n = 3\n\n[train]\nsteps = {steps}\nbatch = 2\nprecision = \"f64\"\ncheckpoint_every = 2\nout_dir = {:?}\n{extra}",
            TINY_TOML.replace("[synth]\n", "[synth]\nimage_size = 64\n"),
            dir.to_str().unwrap()
        );
        RunConfig::from_toml(&text).unwrap()
    }

    proptest! {
        #[test]
        fn each_epoch_visits_every_sample_once(seed in 0u64..1000, n in 1usize..12, batch in 1usize..5) {
            let epochs = 3;
            let steps = (epochs * n).div_ceil(batch);
            let all: Vec<usize> = (0..steps).flat_map(|s| batch_indices(seed, s, batch, n)).collect();
            for e in 0..epochs {
                let mut chunk = all[e * n..(e + 1) * n].to_vec();
                chunk.sort_unstable();
                prop_assert_eq!(chunk, (0..n).collect::<Vec<_>>());
            }
            prop_assert!(all.iter().all(|&i| i < n));
            prop_assert_eq!(batch_indices(seed, 5, batch, n), batch_indices(seed, 5, batch, n));
        }
    }

    #[test]
    fn short_run_logs_every_step_and_writes_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path(), 4, "");
        let s = train(&cfg, None).unwrap();
        assert_eq!((s.steps, s.stopped_early, s.domain_shift), (4, false, None));
        assert!(s.initial_loss.is_finite() && s.final_loss.is_finite());
        let records = read_metrics(&s.metrics).unwrap();
        assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(records.iter().all(|r| r.loss.w_mask_eff == cfg.loss.w_mask && r.loss.total.is_finite()));
        let line = fs::read_to_string(&s.metrics).unwrap();
        let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
        for key in ["step", "total", "cls", "l1", "mask_dice", "mask_bce", "cdn_pos", "cdn_neg", "low_con", "high_con", "w_mask_eff"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert!(dir.path().join("ckpt_000002.safetensors").exists());
        assert_eq!(Checkpoint::<f64>::load(&s.final_checkpoint).unwrap().step, 4);
    }

    #[test]
    fn resumed_run_reproduces_the_uninterrupted_one() {
        let a = tempfile::tempdir().unwrap();
        let full = train(&tiny(a.path(), 4, ""), None).unwrap();
        let b = tempfile::tempdir().unwrap();
        let resumed = train(&tiny(b.path(), 4, ""), Some(&a.path().join("ckpt_000002.safetensors"))).unwrap();
        let (x, y) = (read_metrics(&full.metrics).unwrap(), read_metrics(&resumed.metrics).unwrap());
        assert_eq!(y.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(&x[2..], &y[..]);
        let (p, q) = (Checkpoint::<f64>::load(&full.final_checkpoint).unwrap(), Checkpoint::<f64>::load(&resumed.final_checkpoint).unwrap());
        assert!(p.params.bit_eq(&q.params));
        assert_eq!(p.bank, q.bank);
    }

    #[test]
    fn finetune_decays_the_mask_weight() {
        let a = tempfile::tempdir().unwrap();
        let base = train(&tiny(a.path(), 2, ""), None).unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut cfg = tiny(b.path(), 6, "");
        cfg.data.preset = crate::queryselect::Preset::Hj;
        cfg.loss.shift_fraction = 0.5;
        let s = finetune(&cfg, &base.final_checkpoint).unwrap();
        let w: Vec<f64> = read_metrics(&s.metrics).unwrap().iter().map(|r| r.loss.w_mask_eff).collect();
        let (start, end) = s.domain_shift.unwrap();
        assert_eq!((start, end), (cfg.loss.shift_factor * cfg.loss.w_mask, cfg.loss.w_mask));
        assert_eq!(w.len(), 6);
        assert!((w[0] - start).abs() < 1e-9);
        assert!(w.windows(2).all(|p| p[1] <= p[0]), "{w:?}");
        assert!((w[5] - end).abs() < 1e-9 && (w[3] - end).abs() < 1e-9);
        assert!(w[1] < start && w[1] > end);
        assert_eq!(Checkpoint::<f64>::load(&s.final_checkpoint).unwrap().preset, crate::queryselect::Preset::Hj);
    }

    #[test]
    fn divergence_names_the_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path(), 6, "");
        cfg.optimizer.lr = 1e300;
        let err = train(&cfg, None).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Training(_)), "{msg}");
        assert!(msg.contains("last good checkpoint"), "{msg}");
    }

    #[test]
    fn category_count_must_match_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(1, 0, &crate::synthdoc::SynthConfig { image_size: 64, ..Default::default() }).unwrap();
        crate::synthdoc::write_dataset(&samples, &crate::synthdoc::SynthConfig::default().class_names(), dir.path()).unwrap();
        let mut cfg = tiny(dir.path(), 1, "");
        cfg.data.path = Some(dir.path().to_path_buf());
        assert!(matches!(Dataset::from_config(&cfg), Err(Error::Config(_))));
    }
}
