//! The full segmentation model: backbone, head and the training forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{ClassId, MaskSpec, PatchSample};
use crate::error::{Error, Result};
use crate::head::{build_prior, features_to_posterior, gumbel_noise, select_component, softmax_var, GmmPrior, Head};
use crate::hvae::{standard_normal, Hvae, LatentLevel, LatentState, ModelConfig, TopDown};
use crate::losses::{contrastive_var, cross_entropy_var, entropy_var, inpainting_var, kl_hierarchy_loss, kl_with_top_prior, ContrastiveValue, LossTerms};
use crate::nn::{ParamStore, Params};
use crate::tensor::{Float, Tensor};

/// Which parts of the objective are wired in. The defaults give the full
/// model; the ablation rows switch pieces off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Top posterior conditioned by FiLM and scored against the class mixture.
    /// When off the top posterior is read straight from the features and
    /// scored against a standard normal.
    pub gmm_prior: bool,
    /// Cross-entropy gradients reach the encoder. When off the classifier
    /// trains on detached features.
    pub ce_through_encoder: bool,
    /// Cross-entropy on the plain softmax instead of the relaxed sample.
    pub ce_on_softmax: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { gmm_prior: true, ce_through_encoder: true, ce_on_softmax: false }
    }
}

/// Tensors of one training batch.
#[derive(Clone, Debug)]
pub struct TrainBatch<T: Float> {
    /// Masked patches `[B, 1, P, P]`.
    pub input: Tensor<T>,
    /// Unmasked patches `[B, 1, P, P]`.
    pub target: Tensor<T>,
    pub labels: Vec<Option<ClassId>>,
    pub mask: MaskSpec,
}

impl<T: Float> TrainBatch<T> {
    pub fn from_samples(samples: &[PatchSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let p = first.patch.nrows();
        let mut input = Vec::with_capacity(samples.len() * p * p);
        let mut target = Vec::with_capacity(samples.len() * p * p);
        for s in samples {
            if s.patch.dim() != (p, p) || s.mask != first.mask {
                return Err(Error::Data("batch mixes patch geometries".into()));
            }
            input.extend(s.masked_patch.iter().map(|&v| T::from_f64_lossy(v as f64)));
            target.extend(s.patch.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let shape = [samples.len(), 1, p, p];
        Ok(Self {
            input: Tensor::new(shape, input),
            target: Tensor::new(shape, target),
            labels: samples.iter().map(|s| s.label).collect(),
            mask: first.mask,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// All random draws of one forward pass, so the pass is a pure function of
/// parameters and noise.
#[derive(Clone, Debug)]
pub struct StepNoise<T: Float> {
    pub gumbel: Tensor<T>,
    pub top: Tensor<T>,
    pub levels: Vec<Tensor<T>>,
}

/// Training-time forward pass results.
pub struct Forward<'g, T: Float> {
    pub terms: LossTerms<'g, T>,
    pub logits: Var<'g, T>,
    pub relaxed: Var<'g, T>,
    pub components: Vec<usize>,
    pub latents: LatentState<'g, T>,
    pub prediction: Var<'g, T>,
    pub labeled: usize,
    /// Per-level embeddings fed to the contrastive term.
    pub embeddings: Vec<Var<'g, T>>,
    pub contrastive: ContrastiveValue<T>,
}

#[derive(Clone, Debug)]
pub struct EpsSeg {
    hvae: Hvae,
    head: Head,
    prior: GmmPrior,
}

impl EpsSeg {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let hvae = Hvae::new(config)?;
        let head = Head::new(config.num_classes, config.top_latent_dim, config.classifier_hidden);
        let prior = build_prior(config.num_classes, config.top_latent_dim, config.prior_scale)?;
        Ok(Self { hvae, head, prior })
    }

    pub fn config(&self) -> &ModelConfig {
        self.hvae.config()
    }

    pub fn hvae(&self) -> &Hvae {
        &self.hvae
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.hvae.init(&mut store, &mut rng);
        self.head.init(&mut store, &mut rng);
        store
    }

    pub fn draw_noise<T: Float>(&self, batch: usize, rng: &mut impl Rng) -> StepNoise<T> {
        let c = self.config();
        StepNoise {
            gumbel: Tensor::new([batch, c.num_classes], gumbel_noise(batch * c.num_classes, rng)),
            top: standard_normal(&[batch, c.top_latent_dim], rng),
            levels: self.hvae.latent_shapes(batch).iter().map(|s| standard_normal(s, rng)).collect(),
        }
    }

    /// Builds every loss term for one batch at temperature `tau`.
    pub fn forward<'g, T: Float>(
        &self,
        p: &Params<'g, T>,
        batch: &TrainBatch<T>,
        noise: &StepNoise<T>,
        tau: T,
        objective: &ObjectiveConfig,
        margin: T,
        lambda: T,
    ) -> Result<Forward<'g, T>> {
        let graph = p.var(&self.head.classifier.hidden.weight_name()).graph();
        let b = batch.len();
        let features = self.hvae.encode_bottom_up(p, graph.constant(batch.input.clone()))?;
        let h = features.h;
        let head_input = if objective.ce_through_encoder { h } else { h.detach() };
        let logits = self.head.classify_logits(p, head_input);
        let relaxed = softmax_var(logits, Some(&noise.gumbel), tau);
        let yv = relaxed.value();
        let components: Vec<usize> = (0..b).map(|i| select_component(yv.row(i), batch.labels[i])).collect();

        let top_posterior = if objective.gmm_prior { self.head.film_modulate(p, h, logits).0 } else { features_to_posterior(h) };
        let z_top = top_posterior.sample_with(&noise.top);
        let (mut levels, prediction) = self.hvae.top_down(p, z_top, TopDown::Posterior { features: &features, noise: &noise.levels })?;
        levels.push(LatentLevel { posterior: top_posterior, prior: None, z: z_top });
        let latents = LatentState { levels };

        let inpaint = inpainting_var(prediction, &batch.target, &batch.mask)?;
        let ce_input = if objective.ce_on_softmax { softmax_var(logits, None, T::one()) } else { relaxed };
        let (ce, labeled) = cross_entropy_var(ce_input, &batch.labels)?;
        let kl = if objective.gmm_prior {
            kl_hierarchy_loss(&latents, &components, &self.prior)?
        } else {
            let d = self.config().top_latent_dim;
            kl_with_top_prior(&latents, Tensor::zeros([b, d]), Tensor::full([b, d], T::one()))?
        };
        let embeddings: Vec<Var<'g, T>> = latents
            .levels
            .iter()
            .map(|l| if l.posterior.mean.shape().len() == 4 { l.posterior.mean.global_avg_pool() } else { l.posterior.mean })
            .collect();
        let (cl, contrastive) = contrastive_var(&embeddings, &batch.labels, margin, lambda)?;
        let (entropy, _) = entropy_var(relaxed, &batch.labels);
        Ok(Forward {
            terms: LossTerms { inpaint, ce, kl, cl, entropy },
            logits,
            relaxed,
            components,
            latents,
            prediction,
            labeled,
            embeddings,
            contrastive,
        })
    }

    /// Classifier logits `[B, C]` for `[B, 1, P, P]` patches, without a tape.
    pub fn predict_logits<T: Float>(&self, store: &ParamStore<T>, patches: Tensor<T>) -> Result<Tensor<T>> {
        let graph = Graph::new();
        let p = store.bind(&graph, false);
        let features = self.hvae.encode_bottom_up(&p, graph.constant(patches))?;
        Ok((*self.head.classify_logits(&p, features.h).value()).clone())
    }
}
