//! Top-level head: classifier logits, FiLM conditioning of the top posterior,
//! the fixed per-class mixture prior and relaxed categorical sampling.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Var};
use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::hvae::LevelDistribution;
use crate::nn::{Mlp, ParamStore, Params};
use crate::tensor::{Float, Tensor};

/// Lower bound added to every softplus standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

/// One fixed Gaussian per class on the top latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl GmmPrior {
    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Per-item component mean and std stacked into `[B, D]` tensors.
    pub fn selected<T: Float>(&self, components: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let d = self.dim();
        let gather = |rows: &Vec<Vec<f64>>| {
            let data = components.iter().flat_map(|&c| rows[c].iter().map(|&v| T::from_f64_lossy(v))).collect();
            Tensor::new([components.len(), d], data)
        };
        (gather(&self.means), gather(&self.stds))
    }
}

/// Scaled one-hot means `scale * e_c`, unit stds, uniform weights.
pub fn build_prior(num_classes: usize, latent_dim: usize, scale: f64) -> Result<GmmPrior> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if latent_dim < num_classes {
        return Err(Error::Config(format!("top latent dimension {latent_dim} is smaller than the class count {num_classes}")));
    }
    if !(scale > 0.0) {
        return Err(Error::Config(format!("prior mean scale must be positive, got {scale}")));
    }
    let means = (0..num_classes)
        .map(|c| (0..latent_dim).map(|k| if k == c { scale } else { 0.0 }).collect())
        .collect();
    Ok(GmmPrior {
        means,
        stds: vec![vec![1.0; latent_dim]; num_classes],
        weights: vec![1.0 / num_classes as f64; num_classes],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemperatureSchedule {
    pub tau_min: f64,
    pub rate: f64,
    /// Steps per unit of schedule time. `None` in a run config means the
    /// total step count.
    pub time_scale: Option<f64>,
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= 1.0) {
            return Err(Error::Config(format!("tau_min must lie in (0, 1], got {}", self.tau_min)));
        }
        if !(self.rate >= 0.0 && self.rate.is_finite()) {
            return Err(Error::Config(format!("temperature rate must be non-negative, got {}", self.rate)));
        }
        if self.time_scale.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("temperature time_scale must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { tau_min: 0.5, rate: 0.999, time_scale: None }
    }
}

/// `max(tau_min, exp(-rate * t / time_scale))`, with `time_scale` 1 when unset.
pub fn anneal_temperature(schedule: &TemperatureSchedule, t: u64) -> f64 {
    let scale = schedule.time_scale.unwrap_or(1.0);
    schedule.tau_min.max((-schedule.rate * t as f64 / scale).exp())
}

/// Softmax of `(logits + shift) / tau`, max-subtracted.
pub fn tempered_softmax<T: Float>(logits: &[T], shift: Option<&[T]>, tau: T) -> Vec<T> {
    let z: Vec<T> = match shift {
        Some(g) => logits.iter().zip(g).map(|(&f, &g)| (f + g) / tau).collect(),
        None => logits.iter().map(|&f| f / tau).collect(),
    };
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn gumbel_noise<T: Float>(n: usize, rng: &mut impl Rng) -> Vec<T> {
    let g = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    (0..n).map(|_| T::from_f64_lossy(g.sample(rng))).collect()
}

/// One relaxed categorical draw.
pub fn gumbel_softmax_sample<T: Float>(logits: &[T], tau: T, rng: &mut impl Rng) -> Result<Vec<T>> {
    if !(tau > T::zero()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let g = gumbel_noise::<T>(logits.len(), rng);
    Ok(tempered_softmax(logits, Some(&g), tau))
}

/// First index of the maximum.
pub fn argmax<T: Float>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Noise-free assignment used at inference.
pub fn infer_assignment<T: Float>(logits: &[T]) -> (Vec<T>, usize) {
    let y = tempered_softmax(logits, None, T::one());
    let k = argmax(&y);
    (y, k)
}

/// The label when present, otherwise the argmax with ties to the lowest index.
pub fn select_component<T: Float>(y: &[T], label: Option<ClassId>) -> usize {
    match label {
        Some(l) => l as usize,
        None => argmax(y),
    }
}

/// Row-wise softmax of `(logits + shift) / tau` on the tape.
pub fn softmax_var<'g, T: Float>(logits: Var<'g, T>, shift: Option<&Tensor<T>>, tau: T) -> Var<'g, T> {
    let f = logits.value();
    let (b, c) = f.dims2();
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        out.extend(tempered_softmax(f.row(i), shift.map(|s| s.row(i)), tau));
    }
    let y = Tensor::new([b, c], out);
    let saved = y.clone();
    logits.graph().custom(&[logits], y, move |g, _| {
        let mut d = Vec::with_capacity(b * c);
        for i in 0..b {
            let (yr, gr) = (saved.row(i), g.row(i));
            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            d.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - dot) / tau));
        }
        vec![Some(Tensor::new([b, c], d))]
    })
}

/// FiLM scale and shift.
#[derive(Clone, Copy)]
pub struct FilmParams<'g, T: Float> {
    pub gamma: Var<'g, T>,
    pub beta: Var<'g, T>,
}

/// Splits `[B, 2D]` features into a mean and a floored softplus std.
pub fn features_to_posterior<'g, T: Float>(h: Var<'g, T>) -> LevelDistribution<'g, T> {
    let d = h.shape()[1] / 2;
    LevelDistribution::from_raw(h.narrow1(0, d), h.narrow1(d, d))
}

/// `gamma * h + beta`, chunked into the top posterior.
pub fn film_apply<'g, T: Float>(h: Var<'g, T>, film: FilmParams<'g, T>) -> LevelDistribution<'g, T> {
    features_to_posterior(film.gamma.mul(h).add(film.beta))
}

pub fn std_from_raw<T: Float>(raw: T) -> T {
    softplus(raw) + T::from_f64_lossy(STD_FLOOR)
}

/// Classifier plus the two FiLM generators, all reading `[B, 2D]` features.
#[derive(Clone, Debug)]
pub struct Head {
    pub classifier: Mlp,
    pub gamma: Mlp,
    pub beta: Mlp,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Head {
    pub fn new(num_classes: usize, top_latent_dim: usize, classifier_hidden: usize) -> Self {
        let feature_dim = 2 * top_latent_dim;
        Self {
            classifier: Mlp::new("head.classifier", feature_dim, classifier_hidden, num_classes),
            gamma: Mlp::new("head.film_gamma", num_classes, 2 * num_classes, feature_dim),
            beta: Mlp::new("head.film_beta", num_classes, 2 * num_classes, feature_dim),
            num_classes,
            feature_dim,
        }
    }

    /// The gamma generator starts near the identity: small output weights and unit bias.
    pub fn init<T: Float>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.classifier.init(store, 1.0, rng);
        self.gamma.init(store, 0.1, rng);
        self.beta.init(store, 0.1, rng);
        let bias = store.get_mut(&self.gamma.out.bias_name()).expect("just inserted");
        bias.data_mut().iter_mut().for_each(|b| *b = T::one());
    }

    pub fn classify_logits<'g, T: Float>(&self, p: &Params<'g, T>, h: Var<'g, T>) -> Var<'g, T> {
        self.classifier.forward(p, h)
    }

    pub fn film_params<'g, T: Float>(&self, p: &Params<'g, T>, logits: Var<'g, T>) -> FilmParams<'g, T> {
        FilmParams { gamma: self.gamma.forward(p, logits), beta: self.beta.forward(p, logits) }
    }

    pub fn film_modulate<'g, T: Float>(
        &self,
        p: &Params<'g, T>,
        h: Var<'g, T>,
        logits: Var<'g, T>,
    ) -> (LevelDistribution<'g, T>, FilmParams<'g, T>) {
        let film = self.film_params(p, logits);
        (film_apply(h, film), film)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn prior_construction() {
        let p = build_prior(3, 4, 3.0).unwrap();
        assert_eq!(p.means, vec![vec![3.0, 0.0, 0.0, 0.0], vec![0.0, 3.0, 0.0, 0.0], vec![0.0, 0.0, 3.0, 0.0]]);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for a in 0..3 {
            for b in 0..a {
                let d: f64 = p.means[a].iter().zip(&p.means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                assert!((d - 3.0 * 2f64.sqrt()).abs() < 1e-12);
            }
        }
        assert!(build_prior(5, 4, 3.0).is_err());
    }

    #[test]
    fn temperature_schedule() {
        let s = TemperatureSchedule { tau_min: 0.5, rate: 0.999, time_scale: Some(1.0) };
        assert_eq!(anneal_temperature(&s, 0), 1.0);
        assert_eq!(anneal_temperature(&s, 1), 0.5);
        assert_eq!(anneal_temperature(&s, 1_000_000), 0.5);
        let slow = TemperatureSchedule { time_scale: Some(1000.0), ..s };
        let taus: Vec<f64> = (0..3000).map(|t| anneal_temperature(&slow, t)).collect();
        assert!(taus.windows(2).all(|w| w[1] <= w[0]));
        assert!(taus.iter().all(|&t| (0.5..=1.0).contains(&t)));
        assert!((taus[100] - (-0.0999f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gumbel_softmax_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let y = gumbel_softmax_sample(&[0.3f64, -1.0, 2.0, 0.0], 0.7, &mut rng).unwrap();
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(y.iter().all(|&v| v >= 0.0));
        }
        let uniform = tempered_softmax(&[1.5f64; 4], Some(&[0.0; 4]), 0.5);
        assert!(uniform.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(gumbel_softmax_sample(&[1.0f64], 0.0, &mut rng).is_err());
        let a = gumbel_softmax_sample(&[1.0f64, 2.0], 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gumbel_softmax_sample(&[1.0f64, 2.0], 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_assignment_and_selection() {
        let (y, k) = infer_assignment(&[1.0f64; 5]);
        assert!(y.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert_eq!(k, 0);
        assert_eq!(infer_assignment(&[0.0f64, 4.0, 1.0]).1, 1);
        let (a, _) = infer_assignment(&[0.2f64, -1.0, 3.0]);
        let (b, _) = infer_assignment(&[10.2f64, 9.0, 13.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(select_component(&[0.9f64, 0.05, 0.05], Some(2)), 2);
        assert_eq!(select_component(&[0.1f64, 0.7, 0.2], None), 1);
        assert_eq!(select_component(&[0.5f64, 0.5], None), 0);
    }

    #[test]
    fn softmax_var_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::new([2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let shift = Tensor::new([2, 3], gumbel_noise::<f64>(6, &mut rng));
        let probe = Tensor::new([2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
        let tau = 0.6;
        let eval = |l: &Tensor<f64>| {
            let g = Graph::new();
            softmax_var(g.constant(l.clone()), Some(&shift), tau).mul(g.constant(probe.clone())).sum_all().value().data()[0]
        };
        let g = Graph::new();
        let x = g.param(Arc::new(logits.clone()));
        let out = softmax_var(x, Some(&shift), tau).mul(g.constant(probe.clone())).sum_all();
        let grads = g.backward(out);
        for j in 0..6 {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[j] += 1e-6;
            m.data_mut()[j] -= 1e-6;
            let numeric = (eval(&p) - eval(&m)) / 2e-6;
            assert!((grads.get(x).unwrap().data()[j] - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn film_identity_and_override() {
        let g = Graph::<f64>::new();
        let h = g.constant(Tensor::from_f64([2, 4], &[0.3, -1.2, 0.5, 2.0, -0.7, 0.0, 1.5, -3.0]));
        let plain = features_to_posterior(h);
        let identity = film_apply(h, FilmParams { gamma: g.constant(Tensor::full([2, 4], 1.0)), beta: g.constant(Tensor::zeros([2, 4])) });
        assert_eq!(plain.mean.value(), identity.mean.value());
        assert_eq!(plain.std.value(), identity.std.value());
        let beta = Tensor::from_f64([2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let over = film_apply(h, FilmParams { gamma: g.constant(Tensor::zeros([2, 4])), beta: g.constant(beta) });
        assert_eq!(over.mean.value().data(), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(over.mean.shape(), vec![2, 2]);
        assert!(over.std.value().data().iter().all(|&s| s >= STD_FLOOR));
    }

    #[test]
    fn zeroed_classifier_emits_bias() {
        let head = Head::new(3, 4, 8);
        let mut store = ParamStore::<f64>::new();
        head.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        store.get_mut(&head.classifier.out.weight_name()).unwrap().data_mut().fill(0.0);
        store.get_mut(&head.classifier.out.bias_name()).unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let g = Graph::new();
        let p = store.bind(&g, false);
        let h = g.constant(Tensor::from_f64([1, 8], &[1.0, -2.0, 0.3, 4.0, 0.0, 1.0, 2.0, -1.0]));
        let logits = head.classify_logits(&p, h).value();
        assert_eq!(logits.data(), &[0.5, -1.0, 2.0]);
    }
}
