//! Hierarchical VAE backbone: a residual bottom-up encoder and a top-down
//! decoder with one diagonal Gaussian latent per level.
//!
//! Level `i` in `1..L` is a feature grid of side `ceil(P / 2^i)`; level `L`
//! is a flat vector obtained by pooling the coarsest grid.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::head::STD_FLOOR;
use crate::nn::{Conv2d, Linear, ParamStore, Params, ResBlock};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_levels: usize,
    /// Feature channels of levels `1..=L`.
    pub channels: Vec<usize>,
    pub top_latent_dim: usize,
    pub num_classes: usize,
    pub patch_side: usize,
    pub blocks_per_level: usize,
    /// Latent channels of every spatial level.
    pub latent_channels: usize,
    pub classifier_hidden: usize,
    /// Distance of the mixture means from the origin.
    pub prior_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_levels: 3,
            channels: vec![16, 32, 64],
            top_latent_dim: 64,
            num_classes: 3,
            patch_side: 33,
            blocks_per_level: 1,
            latent_channels: 4,
            classifier_hidden: 64,
            prior_scale: 3.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_levels < 2 {
            return fail(format!("need at least 2 latent levels, got {}", self.num_levels));
        }
        if self.channels.len() != self.num_levels {
            return fail(format!("{} channel widths given for {} levels", self.channels.len(), self.num_levels));
        }
        if self.channels.contains(&0) || self.latent_channels == 0 || self.classifier_hidden == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.top_latent_dim < self.num_classes {
            return fail(format!("top latent dimension {} is smaller than the class count {}", self.top_latent_dim, self.num_classes));
        }
        if self.patch_side < 3 {
            return fail(format!("patch side {} is too small", self.patch_side));
        }
        if !(self.prior_scale > 0.0) {
            return fail(format!("prior scale must be positive, got {}", self.prior_scale));
        }
        Ok(())
    }

    /// Sides of the spatial levels `1..L`.
    pub fn level_sides(&self) -> Vec<usize> {
        let mut side = self.patch_side;
        (1..self.num_levels)
            .map(|_| {
                side = side.div_ceil(2);
                side
            })
            .collect()
    }

    /// Side of the grid pooled into the top level.
    pub fn top_grid_side(&self) -> usize {
        self.level_sides().last().expect("at least one spatial level").div_ceil(2)
    }
}

/// Diagonal Gaussian over a level, both fields shaped `[B, ...]`.
#[derive(Clone, Copy)]
pub struct LevelDistribution<'g, T: Float> {
    pub mean: Var<'g, T>,
    pub std: Var<'g, T>,
}

impl<'g, T: Float> LevelDistribution<'g, T> {
    /// `std = softplus(raw) + 1e-3`.
    pub fn from_raw(mean: Var<'g, T>, raw: Var<'g, T>) -> Self {
        Self { mean, std: raw.softplus().add_scalar(T::from_f64_lossy(STD_FLOOR)) }
    }

    fn from_channels(stacked: Var<'g, T>) -> Self {
        let k = stacked.shape()[1] / 2;
        Self::from_raw(stacked.narrow1(0, k), stacked.narrow1(k, k))
    }

    /// `mean + std * eps` with caller-supplied standard normal noise.
    pub fn sample_with(&self, eps: &Tensor<T>) -> Var<'g, T> {
        let eps = self.mean.graph().constant(eps.clone());
        self.mean.add(self.std.mul(eps))
    }
}

pub fn standard_normal<T: Float>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::from_f64_lossy(StandardNormal.sample(rng))).collect())
}

/// Reparameterized draw `mean + std * eps`, `eps ~ N(0, I)` from `rng`.
pub fn reparameterize<'g, T: Float>(dist: &LevelDistribution<'g, T>, rng: &mut impl Rng) -> Var<'g, T> {
    dist.sample_with(&standard_normal(&dist.mean.shape(), rng))
}

pub struct EncoderFeatures<'g, T: Float> {
    /// Grids of levels `1..L`, finest first.
    pub levels: Vec<Var<'g, T>>,
    /// `[B, 2 * D_L]`.
    pub h: Var<'g, T>,
}

pub struct LatentLevel<'g, T: Float> {
    pub posterior: LevelDistribution<'g, T>,
    /// Learned conditional prior; `None` at the top, where the mixture applies.
    pub prior: Option<LevelDistribution<'g, T>>,
    pub z: Var<'g, T>,
}

/// One entry per level, level 1 first.
pub struct LatentState<'g, T: Float> {
    pub levels: Vec<LatentLevel<'g, T>>,
}

impl<'g, T: Float> LatentState<'g, T> {
    pub fn top(&self) -> &LatentLevel<'g, T> {
        self.levels.last().expect("non-empty latent state")
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Conv2d,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Option<Conv2d>,
    prior: Conv2d,
    posterior: Conv2d,
    inject: Conv2d,
    blocks: Vec<ResBlock>,
}

/// How the top-down pass obtains the spatial latents.
pub enum TopDown<'a, 'g, T: Float> {
    /// Sample posteriors built from encoder features, with per-level noise.
    Posterior { features: &'a EncoderFeatures<'g, T>, noise: &'a [Tensor<T>] },
    /// Use the given `z_1..z_{L-1}`; posteriors are not evaluated.
    Given(&'a [Var<'g, T>]),
}

#[derive(Clone, Debug)]
pub struct Hvae {
    config: ModelConfig,
    stem: Conv2d,
    encoder: Vec<EncoderLevel>,
    top_conv: Conv2d,
    top_linear: Linear,
    dec_in: Linear,
    decoder: Vec<DecoderLevel>,
    out: Conv2d,
}

impl Hvae {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config.channels;
        let l = config.num_levels;
        let k = config.latent_channels;
        let blocks = |name: &str, ch: usize| (0..config.blocks_per_level).map(|b| ResBlock::new(&format!("{name}.block{b}"), ch)).collect();
        let stem = Conv2d::new("encoder.stem", 1, c[0], 3, 1);
        let encoder = (1..l)
            .map(|i| {
                let in_ch = if i == 1 { c[0] } else { c[i - 2] };
                EncoderLevel { down: Conv2d::new(format!("encoder.level{i}.down"), in_ch, c[i - 1], 3, 2), blocks: blocks(&format!("encoder.level{i}"), c[i - 1]) }
            })
            .collect();
        let top_conv = Conv2d::new("encoder.top.conv", c[l - 2], c[l - 1], 3, 2);
        let top_linear = Linear::new("encoder.top.linear", 2 * c[l - 1], 2 * config.top_latent_dim);
        let coarsest = *config.level_sides().last().unwrap();
        let dec_in = Linear::new("decoder.top.linear", config.top_latent_dim, c[l - 2] * coarsest * coarsest);
        let decoder = (1..l)
            .map(|i| {
                let ch = c[i - 1];
                DecoderLevel {
                    up: (i < l - 1).then(|| Conv2d::new(format!("decoder.level{i}.up"), c[i], ch, 3, 1)),
                    prior: Conv2d::new(format!("decoder.level{i}.prior"), ch, 2 * k, 3, 1),
                    posterior: Conv2d::new(format!("decoder.level{i}.posterior"), 2 * ch, 2 * k, 3, 1),
                    inject: Conv2d::new(format!("decoder.level{i}.inject"), k, ch, 1, 1),
                    blocks: blocks(&format!("decoder.level{i}"), ch),
                }
            })
            .collect();
        let out = Conv2d::new("decoder.out", c[0], 1, 3, 1);
        Ok(Self { config: config.clone(), stem, encoder, top_conv, top_linear, dec_in, decoder, out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.stem.init(store, 1.0, rng);
        for level in &self.encoder {
            level.down.init(store, 1.0, rng);
            level.blocks.iter().for_each(|b| b.init(store, rng));
        }
        self.top_conv.init(store, 1.0, rng);
        self.top_linear.init(store, 1.0, rng);
        self.dec_in.init(store, 1.0, rng);
        for level in &self.decoder {
            if let Some(up) = &level.up {
                up.init(store, 1.0, rng);
            }
            level.prior.init(store, 0.1, rng);
            level.posterior.init(store, 0.1, rng);
            level.inject.init(store, 1.0, rng);
            level.blocks.iter().for_each(|b| b.init(store, rng));
        }
        self.out.init(store, 1.0, rng);
    }

    /// Final prior convolution of spatial level `level`.
    pub fn prior_layer(&self, level: usize) -> &Conv2d {
        &self.decoder[level - 1].prior
    }

    /// Shapes of the spatial-level latents for a batch.
    pub fn latent_shapes(&self, batch: usize) -> Vec<[usize; 4]> {
        self.config.level_sides().iter().map(|&s| [batch, self.config.latent_channels, s, s]).collect()
    }

    /// `[B, 1, P, P]` patches to per-level features and the top vector `h`.
    pub fn encode_bottom_up<'g, T: Float>(&self, p: &Params<'g, T>, x: Var<'g, T>) -> Result<EncoderFeatures<'g, T>> {
        let shape = x.shape();
        let side = self.config.patch_side;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != side || shape[3] != side {
            return Err(Error::Config(format!("expected input [B, 1, {side}, {side}], got {shape:?}")));
        }
        let mut a = self.stem.forward(p, x);
        let mut levels = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            a = level.down.forward(p, a.silu());
            for block in &level.blocks {
                a = block.forward(p, a);
            }
            levels.push(a);
        }
        let t = self.top_conv.forward(p, a.silu()).silu();
        let s = t.shape()[2];
        let centre = t.crop2d(s / 2, s / 2, 1, 1).reshape([shape[0], t.shape()[1]]);
        let pooled = Var::concat1(&[t.global_avg_pool(), centre]);
        Ok(EncoderFeatures { levels, h: self.top_linear.forward(p, pooled) })
    }

    fn initial_state<'g, T: Float>(&self, p: &Params<'g, T>, z_top: Var<'g, T>) -> Var<'g, T> {
        let b = z_top.shape()[0];
        let side = *self.config.level_sides().last().unwrap();
        let ch = self.config.channels[self.config.num_levels - 2];
        self.dec_in.forward(p, z_top).reshape([b, ch, side, side])
    }

    /// Conditional prior of spatial level `i` given the top-down state, which
    /// summarises every latent above `i`.
    pub fn level_prior<'g, T: Float>(&self, p: &Params<'g, T>, level: usize, state: Var<'g, T>) -> Result<LevelDistribution<'g, T>> {
        if level == 0 || level >= self.config.num_levels {
            return Err(Error::Config(format!(
                "level {level} has no learned prior; spatial levels are 1..{}",
                self.config.num_levels - 1
            )));
        }
        Ok(LevelDistribution::from_channels(self.decoder[level - 1].prior.forward(p, state)))
    }

    /// Runs the decoder from `z_L` down to the patch-sized prediction.
    /// Returns the spatial levels (level 1 first) and the prediction.
    pub fn top_down<'g, T: Float>(
        &self,
        p: &Params<'g, T>,
        z_top: Var<'g, T>,
        mode: TopDown<'_, 'g, T>,
    ) -> Result<(Vec<LatentLevel<'g, T>>, Var<'g, T>)> {
        let spatial = self.config.num_levels - 1;
        match &mode {
            TopDown::Posterior { features, noise } => {
                if features.levels.len() != spatial || noise.len() != spatial {
                    return Err(Error::Config(format!("expected {spatial} spatial levels of features and noise")));
                }
            }
            TopDown::Given(z) => {
                if z.len() != spatial {
                    return Err(Error::Config(format!("latent state has {} spatial levels, expected {spatial}", z.len())));
                }
            }
        }
        let sides = self.config.level_sides();
        let mut s = self.initial_state(p, z_top);
        let mut out = Vec::with_capacity(spatial);
        for i in (1..=spatial).rev() {
            let level = &self.decoder[i - 1];
            if let Some(up) = &level.up {
                s = up.forward(p, s.upsample_nearest(sides[i - 1], sides[i - 1]).silu());
            }
            let prior = self.level_prior(p, i, s)?;
            let (posterior, z) = match &mode {
                TopDown::Posterior { features, noise } => {
                    let q = LevelDistribution::from_channels(level.posterior.forward(p, Var::concat1(&[s, features.levels[i - 1]])));
                    let z = q.sample_with(&noise[i - 1]);
                    (q, z)
                }
                TopDown::Given(zs) => (prior, zs[i - 1]),
            };
            s = s.add(level.inject.forward(p, z));
            for block in &level.blocks {
                s = block.forward(p, s);
            }
            out.push(LatentLevel { posterior, prior: Some(prior), z });
        }
        out.reverse();
        let side = self.config.patch_side;
        let prediction = self.out.forward(p, s.upsample_nearest(side, side).silu());
        Ok((out, prediction))
    }

    /// Decodes a complete latent state. Only the samples are read.
    pub fn decode_top_down<'g, T: Float>(&self, p: &Params<'g, T>, latents: &LatentState<'g, T>) -> Result<Var<'g, T>> {
        if latents.levels.len() != self.config.num_levels {
            return Err(Error::Config(format!(
                "latent state has {} levels, expected {}",
                latents.levels.len(),
                self.config.num_levels
            )));
        }
        let spatial: Vec<Var<'g, T>> = latents.levels[..self.config.num_levels - 1].iter().map(|l| l.z).collect();
        let (_, prediction) = self.top_down(p, latents.top().z, TopDown::Given(&spatial))?;
        Ok(prediction)
    }

    /// Multiply-accumulates of one encoder pass over one patch.
    pub fn encoder_macs(&self) -> usize {
        let sides = self.config.level_sides();
        let mut total = self.stem.macs(self.config.patch_side);
        let mut input = self.config.patch_side;
        for (level, &side) in self.encoder.iter().zip(&sides) {
            total += level.down.macs(input) + level.blocks.iter().map(|b| b.macs(side)).sum::<usize>();
            input = side;
        }
        total + self.top_conv.macs(input)
    }
}
