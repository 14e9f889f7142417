//! Single-file checkpoints: safetensors arrays plus one JSON metadata entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::GmmPrior;
use crate::hvae::ModelConfig;
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "eps-seg-ckpt-v1";
const META_KEY: &str = "eps_seg";
const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    version: String,
    model: ModelConfig,
    step: u64,
    adam_steps: Option<u64>,
    best_dice: Option<f64>,
    prior: GmmPrior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub prior: GmmPrior,
    pub step: u64,
    pub best_dice: Option<f64>,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState>,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(view: &TensorView<'_>, name: &str) -> Result<Tensor<f32>> {
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!("{name} is {:?}, expected F32", view.dtype())));
    }
    let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(Tensor::new(view.shape().to_vec(), data))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            version: CHECKPOINT_VERSION.into(),
            model: self.model.clone(),
            step: self.step,
            adam_steps: self.adam.as_ref().map(|a| a.t),
            best_dice: self.best_dice,
            prior: self.prior.clone(),
        };
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, t) in self.params.iter() {
            buffers.push((format!("{PARAM}{name}"), t.shape().to_vec(), le_bytes(t)));
        }
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [(MOMENT1, &adam.m), (MOMENT2, &adam.v)] {
                for (name, t) in moments {
                    buffers.push((format!("{prefix}{name}"), t.shape().to_vec(), le_bytes(t)));
                }
            }
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta)?)]);
        safetensors::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing metadata entry".into()))?;
        let meta: Meta = serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {:?}", meta.version)));
        }
        meta.model.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut names: Vec<&str> = st.names();
        names.sort_unstable();
        for name in names {
            let view = st.tensor(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let t = from_view(&view, name)?;
            if let Some(rest) = name.strip_prefix(PARAM) {
                params.insert(rest, t);
            } else if let Some(rest) = name.strip_prefix(MOMENT1) {
                m.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(MOMENT2) {
                v.insert(rest.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected entry {name}")));
            }
        }
        let adam = meta.adam_steps.map(|t| AdamState { m, v, t });
        Ok(Self { model: meta.model, prior: meta.prior, step: meta.step, best_dice: meta.best_dice, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(Error::io(path))?))
}
