//! Training loop: one Adam update per batch, periodic validation, CSV log and
//! checkpoints.
//!
//! Every random draw of step `t` comes from a generator seeded by
//! `(seed, t)`, and batch `t` is a pure function of the batch seed, so a run
//! resumed from a checkpoint at step `k` replays steps `k + 1..` exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, BatchConfig, LabeledImage, MaskSpec, SparseLabelSet};
use crate::error::{Error, Result};
use crate::head::{anneal_temperature, TemperatureSchedule};
use crate::inference::{evaluate, segment_image, EvalReport, InferenceConfig};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::model::{EpsSeg, ObjectiveConfig, TrainBatch};
use crate::nn::ParamStore;
use crate::optim::{cosine_lr, AdamConfig, AdamState};

pub const LOG_HEADER: &str = "step,inpaint,ce,kl,cl,entropy,total,tau,lr";
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0000;
/// Consecutive non-finite steps tolerated before the run is abandoned.
const MAX_ABORTS: u32 = 10;

/// Optional extra phase that switches the entropy term on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyPhase {
    pub steps: u64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub unlabeled_fraction: f64,
    pub mask: MaskSpec,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// `time_scale` left empty means the total number of steps.
    pub temperature: TemperatureSchedule,
    pub objective: ObjectiveConfig,
    /// Linear KL warm-up over the first `kl_ramp_fraction` of the steps.
    pub kl_ramp: bool,
    pub kl_ramp_fraction: f64,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_interval: u64,
    /// Zero disables validation.
    pub validation_interval: u64,
    pub validation: InferenceConfig,
    pub entropy_phase: Option<EntropyPhase>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            unlabeled_fraction: 0.5,
            mask: MaskSpec::default(),
            adam: AdamConfig { lr: 3e-3, min_lr_fraction: 0.05, ..AdamConfig::default() },
            seed: 0,
            weights: LossWeights::default(),
            temperature: TemperatureSchedule::default(),
            objective: ObjectiveConfig::default(),
            kl_ramp: true,
            kl_ramp_fraction: 0.1,
            checkpoint_interval: 0,
            validation_interval: 0,
            validation: InferenceConfig { stride: 4, ..InferenceConfig::default() },
            entropy_phase: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::Config(format!("unlabeled fraction must lie in [0, 1], got {}", self.unlabeled_fraction)));
        }
        if !(0.0..=1.0).contains(&self.kl_ramp_fraction) {
            return Err(Error::Config(format!("kl_ramp_fraction must lie in [0, 1], got {}", self.kl_ramp_fraction)));
        }
        if let Some(phase) = &self.entropy_phase {
            if !(phase.weight >= 0.0 && phase.weight.is_finite()) {
                return Err(Error::Config(format!("entropy phase weight must be non-negative, got {}", phase.weight)));
            }
        }
        self.mask.validate()?;
        self.adam.validate()?;
        self.weights.validate()?;
        self.temperature.validate()?;
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.steps + self.entropy_phase.map_or(0, |p| p.steps)
    }

    fn batch_config(&self, patch_side: usize) -> BatchConfig {
        BatchConfig { batch_size: self.batch_size, unlabeled_fraction: self.unlabeled_fraction, patch_side, mask: self.mask, seed: self.seed }
    }

    /// Weights in force for the update that completes step `t` (1-based).
    pub fn weights_at(&self, t: u64) -> LossWeights {
        let mut w = self.weights;
        if self.kl_ramp {
            let ramp = (self.kl_ramp_fraction * self.steps as f64).round();
            if ramp > 0.0 {
                w.alpha2 *= (t as f64 / ramp).min(1.0);
            }
        }
        if let Some(phase) = &self.entropy_phase {
            if t > self.steps {
                w.entropy_weight = phase.weight;
            }
        }
        w
    }

    pub fn tau_at(&self, t: u64) -> f64 {
        let schedule = TemperatureSchedule {
            time_scale: Some(self.temperature.time_scale.unwrap_or(self.total_steps().max(1) as f64)),
            ..self.temperature
        };
        anneal_temperature(&schedule, t.saturating_sub(1))
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed updates.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState,
    pub best_dice: Option<f64>,
}

impl TrainState {
    pub fn new(model: &EpsSeg, seed: u64) -> Self {
        let params = model.init_params(seed);
        let adam = AdamState::new(&params);
        Self { step: 0, params, adam, best_dice: None }
    }

    pub fn to_checkpoint(&self, model: &EpsSeg) -> Checkpoint {
        Checkpoint {
            model: model.config().clone(),
            prior: model.prior().clone(),
            step: self.step,
            best_dice: self.best_dice,
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let adam = ckpt.adam.ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        Ok(Self { step: ckpt.step, params: ckpt.params, adam, best_dice: ckpt.best_dice })
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub tau: f64,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{},{},{},{}", self.step, l.inpaint, l.ce, l.kl, l.cl, l.entropy, l.total, self.tau, self.lr)
    }
}

/// Runs the update that completes step `state.step + 1`. On a non-finite loss
/// or gradient the state is left untouched and an error returned.
pub fn train_step(model: &EpsSeg, state: &mut TrainState, batch: &TrainBatch<f32>, config: &TrainConfig) -> Result<StepRecord> {
    let t = state.step + 1;
    let weights = config.weights_at(t);
    let tau = config.tau_at(t);
    let lr = cosine_lr(&config.adam, state.step, config.total_steps());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ NOISE_STREAM);
    rng.set_stream(t);
    let noise = model.draw_noise(batch.len(), &mut rng);

    let graph = Graph::new();
    let p = state.params.bind(&graph, true);
    let w = &config.weights;
    let forward = model.forward(&p, batch, &noise, tau as f32, &config.objective, w.margin as f32, w.lambda as f32)?;
    let loss = total_loss(&forward.terms.parts(), &weights)?;
    let total = forward.terms.total(&weights);
    if !total.value().is_finite() {
        return Err(Error::NonFinite(format!("total loss at step {t}")));
    }
    let mut grads = graph.backward(total);
    let mut collected = BTreeMap::new();
    for (name, var) in p.iter() {
        if let Some(g) = grads.take(*var) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name} at step {t}")));
            }
            collected.insert(name.clone(), g);
        }
    }
    drop(p);
    state.adam.step(&config.adam, lr, &mut state.params, &collected);
    state.step = t;
    Ok(StepRecord { step: t, loss, tau, lr })
}

/// Where `fit` writes its artefacts. Without a directory nothing touches disk.
#[derive(Clone, Debug, Default)]
pub struct FitOutput {
    pub dir: Option<PathBuf>,
}

impl FitOutput {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("train_log.csv"))
    }

    pub fn final_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.safetensors"))
    }

    pub fn best_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.safetensors"))
    }

    pub fn step_checkpoint(&self, step: u64) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("step_{step:06}.safetensors")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub step: u64,
    pub mean_dice: f64,
}

pub struct FitResult {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    pub validation: Vec<ValidationPoint>,
    /// Steps skipped because of non-finite values.
    pub aborted_steps: Vec<u64>,
}

/// Pooled Dice of the model over labelled images.
pub fn validate(model: &EpsSeg, params: &ParamStore<f32>, images: &[LabeledImage], config: &InferenceConfig) -> Result<EvalReport> {
    let reports = images
        .iter()
        .map(|img| {
            let seg = segment_image(model, params, &img.pixels, config)?;
            evaluate(&seg.labels, &img.labels, model.config().num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::pooled(&reports)
}

fn save(state: &TrainState, model: &EpsSeg, path: Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) => state.to_checkpoint(model).save(&p),
        None => Ok(()),
    }
}

fn open_log(path: &Path, resume_at: u64) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    if resume_at == 0 || !path.exists() {
        let mut f = BufWriter::new(File::create(path).map_err(Error::io(path))?);
        writeln!(f, "{LOG_HEADER}").map_err(Error::io(path))?;
        return Ok(f);
    }
    // keep rows up to the resume point so the file matches an uninterrupted run
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut kept = String::new();
    for line in text.lines() {
        let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
        if step.is_none_or(|s| s <= resume_at) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    let mut f = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    f.write_all(kept.as_bytes()).map_err(Error::io(path))?;
    Ok(f)
}

/// Trains from `state` until `config.total_steps()` updates are done.
pub fn fit_from(
    model: &EpsSeg,
    mut state: TrainState,
    config: &TrainConfig,
    train: &[LabeledImage],
    labels: &SparseLabelSet,
    validation: &[LabeledImage],
    output: &FitOutput,
) -> Result<FitResult> {
    config.validate()?;
    let total = config.total_steps();
    let stream = make_batches(train, labels, config.batch_config(model.config().patch_side))?;
    let mut log_file = output.log_path().map(|p| open_log(&p, state.step).map(|f| (p, f))).transpose()?;
    let mut log = Vec::new();
    let mut points = Vec::new();
    let mut aborted = Vec::new();
    let mut consecutive = 0;
    while state.step < total {
        let batch = TrainBatch::from_samples(&stream.batch_at(state.step))?;
        let record = match train_step(model, &mut state, &batch, config) {
            Ok(r) => {
                consecutive = 0;
                r
            }
            Err(Error::NonFinite(what)) => {
                consecutive += 1;
                log::warn!("step {} aborted: non-finite {what}; parameters unchanged", state.step + 1);
                aborted.push(state.step + 1);
                if consecutive >= MAX_ABORTS {
                    return Err(Error::Numeric(format!("{consecutive} consecutive steps produced non-finite values, last: {what}")));
                }
                state.step += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        if let Some((path, f)) = log_file.as_mut() {
            writeln!(f, "{}", record.csv_line()).map_err(Error::io(&*path))?;
        }
        log.push(record);
        let t = state.step;
        if config.validation_interval > 0 && !validation.is_empty() && (t % config.validation_interval == 0 || t == total) {
            let dice = validate(model, &state.params, validation, &config.validation)?.mean_dice;
            log::info!("step {t}: validation mean Dice {dice:.4}");
            points.push(ValidationPoint { step: t, mean_dice: dice });
            if state.best_dice.is_none_or(|b| dice > b) {
                state.best_dice = Some(dice);
                save(&state, model, output.best_checkpoint())?;
            }
        }
        if config.checkpoint_interval > 0 && t % config.checkpoint_interval == 0 {
            if let Some((path, f)) = log_file.as_mut() {
                f.flush().map_err(Error::io(&*path))?;
            }
            save(&state, model, output.step_checkpoint(t))?;
        }
    }
    if let Some((path, mut f)) = log_file {
        f.flush().map_err(Error::io(&path))?;
    }
    save(&state, model, output.final_checkpoint())?;
    Ok(FitResult { state, log, validation: points, aborted_steps: aborted })
}

/// Trains a freshly initialised model.
pub fn fit(
    model: &EpsSeg,
    config: &TrainConfig,
    train: &[LabeledImage],
    labels: &SparseLabelSet,
    validation: &[LabeledImage],
    output: &FitOutput,
) -> Result<FitResult> {
    fit_from(model, TrainState::new(model, config.seed), config, train, labels, validation, output)
}
