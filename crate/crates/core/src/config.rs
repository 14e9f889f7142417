//! One run configuration document (TOML or JSON) and dataset resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::image::load_manifest;
use crate::data::patch::check_patch_side;
use crate::data::synth::write_synth_dataset;
use crate::data::{sample_sparse_labels, synth_generate, LabeledImage, SparseLabelSet, SynthSpec};
use crate::error::{Error, Result};
use crate::hvae::ModelConfig;
use crate::inference::InferenceConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the cache directory for materialised data.
pub const CACHE_ENV: &str = "EPS_SEG_CACHE";
const TEST_SEED_OFFSET: u64 = 10_000;

/// Generated train/test images; image seeds derive from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub image_side: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub noise_std: f32,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { image_side: 256, train_images: 8, test_images: 2, noise_std: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Used when no training manifest is given.
    pub synthetic: Option<SyntheticData>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Sparse label CSV. Without it labels are sampled from the dense maps.
    pub labels: Option<PathBuf>,
    pub label_fraction: f64,
    pub stratified: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticData::default()),
            train_manifest: None,
            test_manifest: None,
            labels: None,
            label_fraction: 0.0005,
            stratified: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    /// Parses by extension (`.toml` or `.json`), resolves relative data paths
    /// against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut config: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => return Err(Error::Config(format!("{}: expected a .toml or .json file", path.display()))),
        };
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.train_manifest, &mut config.data.test_manifest, &mut config.data.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate(self.model.patch_side)?;
        check_patch_side(self.model.patch_side, &self.train.mask)?;
        let d = &self.data;
        if !(d.label_fraction > 0.0 && d.label_fraction <= 1.0) {
            return Err(Error::Config(format!("label_fraction must lie in (0, 1], got {}", d.label_fraction)));
        }
        if d.train_manifest.is_none() && d.synthetic.is_none() {
            return Err(Error::Config("data needs either a train_manifest or a synthetic section".into()));
        }
        if let Some(s) = &d.synthetic {
            if s.train_images == 0 || s.test_images == 0 {
                return Err(Error::Config("synthetic data needs at least one train and one test image".into()));
            }
            if !(s.noise_std >= 0.0) {
                return Err(Error::Config(format!("noise_std must be non-negative, got {}", s.noise_std)));
            }
        }
        Ok(())
    }
}

/// Cache root: `$EPS_SEG_CACHE`, else a directory under the system temp dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("eps-seg-cache"))
}

/// Writes the generated images once under the cache and always reads them
/// back from disk, so fresh and cached runs see identical pixels.
pub fn materialize_synthetic(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    let key = hex::encode(&Sha256::digest(serde_json::to_vec(spec)?)[..8]);
    let dir = cache_dir().join(format!("synth-{key}"));
    let manifest = dir.join("manifest.tsv");
    if !manifest.exists() {
        let images = synth_generate(spec)?;
        let staging = cache_dir().join(format!(".synth-{key}-{}", std::process::id()));
        if staging.exists() {
            std::fs::remove_dir_all(&staging).map_err(Error::io(&staging))?;
        }
        write_synth_dataset(&staging, spec, &images)?;
        if let Err(e) = std::fs::rename(&staging, &dir) {
            // another process got there first
            let _ = std::fs::remove_dir_all(&staging);
            if !manifest.exists() {
                return Err(Error::Io { path: dir, source: e });
            }
        }
    }
    load_manifest(&manifest, spec.num_classes)
}

pub struct Dataset {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub labels: SparseLabelSet,
}

/// Resolves the data section for run seed `seed`.
pub fn load_dataset(config: &RunConfig, seed: u64) -> Result<Dataset> {
    let d = &config.data;
    let c = config.model.num_classes;
    let (train, test) = match (&d.train_manifest, &d.synthetic) {
        (Some(train), _) => {
            let test = d.test_manifest.as_deref().map(|p| load_manifest(p, c)).transpose()?.unwrap_or_default();
            (load_manifest(train, c)?, test)
        }
        (None, Some(s)) => {
            let spec = |n: usize, seed: u64| SynthSpec { num_classes: c, image_side: s.image_side, num_images: n, noise_std: s.noise_std, seed };
            (materialize_synthetic(&spec(s.train_images, seed))?, materialize_synthetic(&spec(s.test_images, seed + TEST_SEED_OFFSET))?)
        }
        (None, None) => return Err(Error::Config("no training data configured".into())),
    };
    let labels = match &d.labels {
        Some(path) => {
            let set = SparseLabelSet::read_csv(path, d.label_fraction)?;
            set.validate(&train)?;
            set
        }
        None => sample_sparse_labels(&train, c, d.label_fraction, seed, d.stratified, config.train.mask.side)?,
    };
    Ok(Dataset { train, test, labels })
}
