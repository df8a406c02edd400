//! Finite-difference verification of the full training loss against
//! reverse-mode gradients, at `f64` and at `f32`.
//!
//! Differences are taken with the forward pass replaying the base point's
//! constant and detached leaves, so stop-gradient inputs stay fixed exactly
//! as reverse mode treats them.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use docseg_autograd::gradcheck::{central_difference, relative_error};
use docseg_autograd::{Graph, ParamStore, Real};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::matchloss::{total_loss, GroundTruth, LossBreakdown};
use crate::model::{forward, ground_truth, gt_pairs, ModelConfig};
use crate::queryselect::PrototypeBank;
use crate::synthdoc::{generate_sample, LayoutSample, SynthConfig};
use crate::transformer::{build_cdn_groups, CdnQueries};

/// Parameter groups every report covers, as name prefixes.
pub const GROUPS: [(&str, &[&str]); 7] = [
    ("backbone", &["backbone."]),
    ("encoder", &["encoder."]),
    ("encoder_heads", &["enc_head."]),
    ("projections", &["proj."]),
    ("decoder", &["decoder."]),
    ("pem", &["seg.gamma", "seg.ethm"]),
    ("instance_heads", &["seg.class", "seg.mask_embed"]),
];

/// Relative-error limits.
pub const TOL_F64: f64 = 1e-4;
pub const TOL_F32: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub group: String,
    pub name: String,
    pub index: usize,
    pub numeric: f64,
    pub analytic_f64: f64,
    pub analytic_f32: f64,
    pub rel_error_f64: f64,
    pub rel_error_f32: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub loss: f64,
    /// Every term of the checked loss at the base point.
    pub terms: LossBreakdown,
    pub probes: Vec<ProbeReport>,
    pub max_rel_error_f64: f64,
    pub max_rel_error_f32: f64,
    /// `(eps, relative error)` of the first probe; recorded, not asserted.
    pub eps_sweep: Vec<(f64, f64)>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error_f64 < TOL_F64 && self.max_rel_error_f32 < TOL_F32
    }
}

/// A fixed loss problem: one small page, fixed denoising draws, fixed bank.
pub struct Problem {
    pub cfg: RunConfig,
    pub model: ModelConfig,
    pub sample: LayoutSample,
    pub gt: GroundTruth,
    pub cdn: Option<CdnQueries>,
    pub bank: PrototypeBank,
}

impl Problem {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model();
        let synth = SynthConfig { image_size: cfg.gradcheck.image_size, ..cfg.synth.clone() };
        let sample = generate_sample(cfg.gradcheck.seed, &synth)?;
        let gt = ground_truth(&sample);
        let cdn = if cfg.cdn.enabled {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.gradcheck.seed);
            Some(build_cdn_groups(&gt_pairs(&gt), &cfg.cdn, model.num_classes, &mut rng)?)
        } else {
            None
        };
        let bank = model.init_bank(cfg.gradcheck.seed);
        Ok(Self { cfg: cfg.clone(), model, sample, gt, cdn, bank })
    }

    /// Initial parameters with a small jitter so zero-initialized layers pass gradient.
    pub fn params(&self) -> ParamStore<f64> {
        let mut ps = self.model.init_params(self.cfg.gradcheck.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.gradcheck.seed ^ 0x6a09_e667);
        let names: Vec<String> = ps.names().map(str::to_string).collect();
        for n in names {
            let a = ps.get_mut(&n).expect("name");
            a.mapv_inplace(|v| v + rng.random_range(-0.02..0.02));
        }
        ps
    }

    /// Loss with every constant and detached leaf held at the recorded values.
    pub fn loss<T: Real>(&self, params: &ParamStore<T>, leaves: &[Arc<ArrayD<T>>]) -> Result<f64> {
        let g = Graph::replaying(params, leaves.to_vec());
        let out = forward(&g, &self.model, &self.sample.image, &self.bank, self.cfg.tau(), self.cdn.as_ref())?;
        let l = total_loss(&out.loss_inputs(self.cdn.as_ref()), &self.gt, &self.cfg.loss_weights(self.cfg.loss.w_mask))?;
        Ok(l.total.item().f64())
    }

    /// Loss terms, parameter gradients and the frozen leaves of the base point.
    #[allow(clippy::type_complexity)]
    pub fn gradients<T: Real>(
        &self,
        params: &ParamStore<T>,
    ) -> Result<(LossBreakdown, BTreeMap<String, ArrayD<T>>, Vec<Arc<ArrayD<T>>>)> {
        let g = Graph::new(params);
        let out = forward(&g, &self.model, &self.sample.image, &self.bank, self.cfg.tau(), self.cdn.as_ref())?;
        let l = total_loss(&out.loss_inputs(self.cdn.as_ref()), &self.gt, &self.cfg.loss_weights(self.cfg.loss.w_mask))?;
        let leaves = g.frozen_leaves();
        Ok((l.breakdown, g.backward(l.total).into_params(), leaves))
    }
}

fn in_group(name: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

/// Checks `cfg.gradcheck.probes` coordinates spread round-robin over [`GROUPS`].
pub fn gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    let t0 = Instant::now();
    let problem = Problem::new(cfg)?;
    let params = problem.params();
    let (terms, grads, leaves) = problem.gradients(&params)?;
    let params32 = params.cast::<f32>();
    let (_, grads32, _) = problem.gradients(&params32)?;
    let eps = cfg.gradcheck.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gradcheck.seed ^ 0xbb67_ae85);
    let f = |p: &ParamStore<f64>| problem.loss(p, &leaves).unwrap_or(f64::NAN);

    let mut probes = Vec::with_capacity(cfg.gradcheck.probes);
    for i in 0..cfg.gradcheck.probes {
        let (group, prefixes) = GROUPS[i % GROUPS.len()];
        let names: Vec<&str> = params.names().filter(|n| in_group(n, prefixes)).collect();
        if names.is_empty() {
            return Err(Error::Config(format!("no parameters in group {group}")));
        }
        let name = names[rng.random_range(0..names.len())];
        let g = grads[name].as_slice().expect("contiguous");
        // among a few random coordinates take the one with the largest gradient
        let index = (0..16)
            .map(|_| rng.random_range(0..g.len()))
            .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()).then(b.cmp(&a)))
            .expect("non-empty");
        let analytic_f64 = g[index];
        let analytic_f32 = grads32[name].as_slice().expect("contiguous")[index] as f64;
        let numeric = central_difference(&params, name, index, eps, f);
        if !numeric.is_finite() {
            return Err(Error::Training(format!("loss is not finite around {name}[{index}]")));
        }
        probes.push(ProbeReport {
            group: group.to_string(),
            name: name.to_string(),
            index,
            numeric,
            analytic_f64,
            analytic_f32,
            rel_error_f64: relative_error(analytic_f64, numeric),
            rel_error_f32: relative_error(analytic_f32, numeric),
        });
    }
    let eps_sweep = match probes.first() {
        Some(p) => [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&e| (e, relative_error(p.analytic_f64, central_difference(&params, &p.name, p.index, e, f))))
            .collect(),
        None => Vec::new(),
    };
    let max = |sel: fn(&ProbeReport) -> f64| probes.iter().map(sel).fold(0.0, f64::max);
    Ok(GradcheckReport {
        eps,
        loss: terms.total,
        terms,
        max_rel_error_f64: max(|p| p.rel_error_f64),
        max_rel_error_f32: max(|p| p.rel_error_f32),
        probes,
        eps_sweep,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Configuration of the tiny gradient-check model.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY_TOML).expect("tiny config is valid")
}

pub const TINY_TOML: &str = r#"
[synth]
num_classes = 3
max_instances = 3

[backbone]
embed_dim = 8
depths = [1, 1, 1, 1]
heads = [1, 1, 2, 2]
window_size = 4
mlp_ratio = 2

[transformer]
d_model = 16
heads = 2
points = 2
ffn_dim = 16

[encoder]
layers = 1

[decoder]
layers = 1
queries = 4

[segmentation]
mask_dim = 8

[contrastive]
low_dim = 8
tau = 0.5

[prototypes]
m = 3

[gradcheck]
probes = 14
image_size = 64
"#;
