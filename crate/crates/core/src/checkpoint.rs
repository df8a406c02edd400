//! Safetensors checkpoints: parameters, optimizer moments, prototype bank,
//! step counter and a snapshot of the run configuration.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use docseg_autograd::{ParamStore, Real};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::queryselect::{Preset, PrototypeBank};

pub const CHECKPOINT_FORMAT: &str = "docseg-ckpt/1";
const META_KEY: &str = "docseg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: String,
    step: usize,
    preset: Preset,
    dtype: String,
    adam_t: u64,
    config: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Real> {
    pub config: RunConfig,
    /// Number of completed optimizer steps.
    pub step: usize,
    /// Dataset preset the weights were trained under.
    pub preset: Preset,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub bank: PrototypeBank,
}

fn to_bytes<T: Real>(a: &ArrayD<T>) -> (Dtype, Vec<u8>) {
    let f64_mode = T::NAME == "f64";
    let mut out = Vec::with_capacity(a.len() * if f64_mode { 8 } else { 4 });
    for &v in a.iter() {
        if f64_mode {
            out.extend_from_slice(&v.f64().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    (if f64_mode { Dtype::F64 } else { Dtype::F32 }, out)
}

fn from_view<T: Real>(path: &Path, name: &str, view: &TensorView<'_>) -> Result<ArrayD<T>> {
    let data = view.data();
    let values: Vec<T> = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        other => return Err(Error::format(path, format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))
}

impl<T: Real> Checkpoint<T> {
    /// Serialized bytes; identical state gives identical bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore<T>| {
            for (name, a) in store.iter() {
                let (dt, bytes) = to_bytes(a);
                owned.push((format!("{prefix}{name}"), dt, a.shape().to_vec(), bytes));
            }
        };
        push("param.", &self.params);
        push("adam.m.", &self.adam.m);
        push("adam.v.", &self.adam.v);
        let protos = self.bank.protos.clone().into_dyn();
        let (dt, bytes) = to_bytes(&protos);
        owned.push(("bank.protos".into(), dt, protos.shape().to_vec(), bytes));
        let phi = Array1::from(self.bank.phi.clone()).into_dyn();
        let (dt, bytes) = to_bytes(&phi);
        owned.push(("bank.phi".into(), dt, phi.shape().to_vec(), bytes));

        let views = owned
            .iter()
            .map(|(n, dt, shape, bytes)| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Input(format!("checkpoint tensor: {e}")))?;
        let meta = Meta {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            preset: self.preset,
            dtype: T::NAME.into(),
            adam_t: self.adam.t,
            config: self.config.to_toml(),
        };
        // a single key keeps the header byte-stable
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).expect("meta serializes"))]);
        safetensors::serialize(views, &Some(info)).map_err(|e| Error::Input(format!("checkpoint: {e}")))
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written at either precision, converting to `T`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        let meta_text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::format(path, "not a docseg checkpoint (no metadata)"))?;
        let meta: Meta = serde_json::from_str(meta_text).map_err(|e| Error::format(path, e.to_string()))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("checkpoint format `{}`, expected `{CHECKPOINT_FORMAT}`", meta.format)));
        }
        let config = RunConfig::from_toml(&meta.config)
            .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;

        let mut params = ParamStore::new();
        let mut adam = Adam::<T>::default();
        adam.t = meta.adam_t;
        let mut protos = None;
        let mut phi = None;
        let mut names: Vec<&String> = st.names();
        names.sort();
        for name in names {
            let view = st.tensor(name).map_err(|e| Error::format(path, e.to_string()))?;
            if let Some(p) = name.strip_prefix("param.") {
                params.insert(p, from_view(path, name, &view)?);
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                adam.m.insert(p, from_view(path, name, &view)?);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.v.insert(p, from_view(path, name, &view)?);
            } else if name == "bank.protos" {
                protos = Some(from_view::<f64>(path, name, &view)?);
            } else if name == "bank.phi" {
                phi = Some(from_view::<f64>(path, name, &view)?);
            } else {
                return Err(Error::format(path, format!("unexpected tensor `{name}`")));
            }
        }
        let (Some(protos), Some(phi)) = (protos, phi) else {
            return Err(Error::format(path, "prototype bank is missing"));
        };
        let protos: Array2<f64> = protos
            .into_dimensionality()
            .map_err(|e| Error::format(path, format!("bank.protos: {e}")))?;
        if phi.len() != protos.nrows() {
            return Err(Error::format(path, "bank.phi length differs from the prototype count"));
        }
        config
            .model()
            .check_params(&params)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            config,
            step: meta.step,
            preset: meta.preset,
            params,
            adam,
            bank: PrototypeBank { protos, phi: phi.iter().copied().collect() },
        })
    }
}
