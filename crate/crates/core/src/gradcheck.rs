//! Central finite differences against tape gradients, in double precision.
//!
//! Probes whose perturbation changes a discrete choice of the forward pass
//! (the selected mixture component or which negative pairs sit inside the
//! margin) are not differentiable there and are skipped and counted.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{extract_patch, synth_generate, ClassId, MaskSpec, PatchSample, SynthSpec};
use crate::error::{Error, Result};
use crate::hvae::ModelConfig;
use crate::losses::{pair_distances, pair_matrices};
use crate::model::{EpsSeg, Forward, ObjectiveConfig, StepNoise, TrainBatch};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Inpaint,
    Ce,
    Kl,
    Cl,
    Entropy,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Inpaint, LossTerm::Ce, LossTerm::Kl, LossTerm::Cl, LossTerm::Entropy];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Inpaint => "inpaint",
            LossTerm::Ce => "ce",
            LossTerm::Kl => "kl",
            LossTerm::Cl => "cl",
            LossTerm::Entropy => "entropy",
        }
    }

    fn pick<'g>(self, f: &Forward<'g, f64>) -> Var<'g, f64> {
        match self {
            LossTerm::Inpaint => f.terms.inpaint,
            LossTerm::Ce => f.terms.ce,
            LossTerm::Kl => f.terms.kl,
            LossTerm::Cl => f.terms.cl,
            LossTerm::Entropy => f.terms.entropy,
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss term {s:?}; expected one of inpaint, ce, kl, cl, entropy")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates compared per term.
    pub probes: usize,
    pub tolerance: f64,
    /// Denominator floor, relative to `max(1, |f|)`, so coordinates with
    /// vanishing gradients are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, probes: 200, tolerance: 1e-4, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub term: LossTerm,
    pub value: f64,
    pub probes: Vec<Probe>,
    /// Probes skipped because the perturbation crossed a non-smooth point.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Probes at or above the tolerance.
    pub fn failures(&self, tolerance: f64) -> Vec<&Probe> {
        self.probes.iter().filter(|p| p.rel_err >= tolerance).collect()
    }
}

/// A small model, batch and noise draw to check gradients on.
pub struct Instance {
    pub model: EpsSeg,
    pub params: ParamStore<f64>,
    pub batch: TrainBatch<f64>,
    pub noise: StepNoise<f64>,
    pub tau: f64,
    pub margin: f64,
    pub lambda: f64,
    pub objective: ObjectiveConfig,
}

/// Two-level model with 8 channels on 9x9 patches: four labeled patches from
/// two classes and four unlabeled ones.
pub fn small_instance(seed: u64) -> Result<Instance> {
    let config = ModelConfig {
        num_levels: 2,
        channels: vec![8, 8],
        top_latent_dim: 6,
        num_classes: 3,
        patch_side: 9,
        latent_channels: 2,
        classifier_hidden: 8,
        ..ModelConfig::default()
    };
    let model = EpsSeg::new(&config)?;
    let params = model.init_params::<f64>(seed);
    let images = synth_generate(&SynthSpec { image_side: 48, num_images: 1, noise_std: 0.05, seed, ..SynthSpec::default() })?;
    let mask = MaskSpec::default();
    let image = &images[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<(usize, usize)> = (0..48).flat_map(|r| (0..48).map(move |c| (r, c))).collect();
    positions.shuffle(&mut rng);
    // two labeled patches from each of two classes
    let mut labeled: Vec<PatchSample> = Vec::new();
    let mut classes: Vec<ClassId> = Vec::new();
    for &c in &positions {
        let s = extract_patch(image, 0, c, 9, &mask)?;
        if let Some(l) = s.label {
            let known = classes.contains(&l);
            if (known || classes.len() < 2) && labeled.iter().filter(|x| x.label == Some(l)).count() < 2 {
                if !known {
                    classes.push(l);
                }
                labeled.push(s);
            }
        }
        if labeled.len() == 4 {
            break;
        }
    }
    let unlabeled = positions.iter().rev().take(4).map(|&c| extract_patch(image, 0, c, 9, &mask).map(PatchSample::into_unlabeled));
    let samples: Vec<PatchSample> = labeled.into_iter().map(Ok).chain(unlabeled).collect::<Result<_>>()?;
    let batch = TrainBatch::from_samples(&samples)?;
    let noise = model.draw_noise(batch.len(), &mut rng);
    Ok(Instance { model, params, batch, noise, tau: 0.7, margin: 5.0, lambda: 0.5, objective: ObjectiveConfig::default() })
}

/// Discrete choices made by one forward pass.
#[derive(Clone, Debug, PartialEq)]
struct Signature {
    components: Vec<usize>,
    inside_margin: Vec<bool>,
    /// A pair distance sits on a kink (`d = 0` for positives, `d = m` for
    /// negatives).
    kinked: bool,
}

const KINK: f64 = 1e-7;

fn signature_of(components: Vec<usize>, embeddings: &[Tensor<f64>], labels: &[Option<ClassId>], margin: f64) -> Signature {
    let d: Array2<f64> = pair_distances(embeddings);
    let pairs = pair_matrices(labels);
    let mut inside = Vec::new();
    let mut kinked = false;
    for ((&dv, &pos), &neg) in d.iter().zip(&pairs.positive).zip(&pairs.negative) {
        if neg {
            inside.push(dv < margin);
            kinked |= (dv - margin).abs() < KINK;
        }
        if pos {
            kinked |= dv < KINK;
        }
    }
    Signature { components, inside_margin: inside, kinked }
}

fn evaluate(inst: &Instance, params: &ParamStore<f64>, term: LossTerm) -> Result<(f64, Signature)> {
    let graph = Graph::new();
    let p = params.bind(&graph, false);
    let f = inst.model.forward(&p, &inst.batch, &inst.noise, inst.tau, &inst.objective, inst.margin, inst.lambda)?;
    let value = term.pick(&f).value().data()[0];
    let embeddings: Vec<Tensor<f64>> = f.embeddings.iter().map(|e| (*e.value()).clone()).collect();
    Ok((value, signature_of(f.components.clone(), &embeddings, &inst.batch.labels, inst.margin)))
}

/// Compares tape and finite-difference gradients of `term` on randomly chosen
/// parameter coordinates the term depends on.
pub fn grad_check(inst: &Instance, term: LossTerm, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let graph = Graph::new();
    let p = inst.params.bind(&graph, true);
    let f = inst.model.forward(&p, &inst.batch, &inst.noise, inst.tau, &inst.objective, inst.margin, inst.lambda)?;
    let root = term.pick(&f);
    let value = root.value().data()[0];
    let mut grads = graph.backward(root);
    let mut analytic: Vec<(String, Tensor<f64>)> = p.iter().filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g))).collect();
    analytic.sort_by(|a, b| a.0.cmp(&b.0));
    drop(p);
    let (_, base) = evaluate(inst, &inst.params, term)?;
    if base.kinked {
        return Err(Error::Numeric(format!("{term}: the unperturbed instance sits on a non-differentiable point")));
    }

    let mut coords: Vec<(usize, usize)> = analytic.iter().enumerate().flat_map(|(k, (_, g))| (0..g.len()).map(move |i| (k, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    coords.shuffle(&mut rng);
    let floor = config.floor * value.abs().max(1.0);
    let mut params = inst.params.clone();
    let mut probes = Vec::new();
    let mut excluded = 0;
    for (k, i) in coords {
        if probes.len() == config.probes {
            break;
        }
        let (name, g) = &analytic[k];
        let original = params.get(name).unwrap().data()[i];
        let mut at = |delta: f64| -> Result<(f64, Signature)> {
            params.get_mut(name).unwrap().data_mut()[i] = original + delta;
            evaluate(inst, &params, term)
        };
        let (plus, sp) = at(config.step)?;
        let (minus, sm) = at(-config.step)?;
        params.get_mut(name).unwrap().data_mut()[i] = original;
        if sp != base || sm != base {
            excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = g.data()[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        probes.push(Probe { param: name.clone(), index: i, analytic: a, numeric, rel_err });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    let passed = !probes.is_empty() && max_rel_err < config.tolerance;
    Ok(GradCheckReport { term, value, probes, excluded, max_rel_err, passed })
}
