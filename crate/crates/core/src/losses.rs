//! The five training objectives and their weighted sum.
//!
//! Each term has a plain function on tensors (value and analytic gradient)
//! and a tape adaptor used by the model. Reductions: inpainting sums over
//! mask pixels and averages over the batch; cross-entropy averages over
//! labeled items; KL sums over latent dimensions and averages over the batch;
//! the contrastive negative term sums over ordered negative pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{ClassId, MaskSpec};
use crate::error::{Error, Result};
use crate::head::GmmPrior;
use crate::hvae::{LatentState, LevelDistribution};
use crate::tensor::{Float, Tensor};

/// Probabilities are clipped here before taking logs.
pub const LOG_CLIP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Cross-entropy.
    pub alpha1: f64,
    /// KL over the hierarchy.
    pub alpha2: f64,
    /// Contrastive.
    pub alpha3: f64,
    /// Balance of positive against negative pairs.
    pub lambda: f64,
    pub margin: f64,
    /// Zero disables the entropy term.
    pub entropy_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 0.1, alpha3: 0.1, lambda: 0.5, margin: 5.0, entropy_weight: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3), ("entropy_weight", self.entropy_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub inpaint: f64,
    pub ce: f64,
    pub kl: f64,
    pub cl: f64,
    pub entropy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inpaint: f64,
    pub ce: f64,
    pub kl: f64,
    pub cl: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Weighted sum; any non-finite part is an error naming that part.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("inpaint", parts.inpaint), ("ce", parts.ce), ("kl", parts.kl), ("cl", parts.cl), ("entropy", parts.entropy)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss ({v})")));
        }
    }
    let total = parts.inpaint + w.alpha1 * parts.ce + w.alpha2 * parts.kl + w.alpha3 * parts.cl + w.entropy_weight * parts.entropy;
    Ok(LossBreakdown { inpaint: parts.inpaint, ce: parts.ce, kl: parts.kl, cl: parts.cl, entropy: parts.entropy, total })
}

/// A mean over some subset of the batch; `count == 0` flags an empty subset,
/// in which case `value` is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reduced<T> {
    pub value: T,
    pub count: usize,
}

fn batch_of<T: Float>(t: &Tensor<T>) -> Result<usize> {
    match t.shape().first() {
        Some(&b) if b > 0 => Ok(b),
        _ => Err(Error::Data("empty batch".into())),
    }
}

/// `(1/B) * sum of squared errors`, where both tensors hold only the masked
/// values with the batch on the leading axis.
pub fn inpainting_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::Data(format!("prediction {:?} and target {:?} differ in shape", pred.shape(), target.shape())));
    }
    let b = batch_of(pred)?;
    let sse: T = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok(sse / T::from_usize(b).unwrap())
}

pub fn inpainting_loss_grad<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let scale = T::from_f64_lossy(2.0) / T::from_usize(pred.shape()[0]).unwrap();
    pred.zip_map(target, |p, t| scale * (p - t))
}

/// The central mask window of `[B, 1, P, P]` patches as `[B, 1, m, m]`.
pub fn mask_region<T: Float>(patches: &Tensor<T>, mask: &MaskSpec) -> Tensor<T> {
    let (b, c, p, _) = patches.dims4();
    let (o, m) = (mask.offset(p), mask.side);
    let mut out = Vec::with_capacity(b * c * m * m);
    for plane in patches.data().chunks(p * p) {
        for r in o..o + m {
            out.extend_from_slice(&plane[r * p + o..r * p + o + m]);
        }
    }
    Tensor::new([b, c, m, m], out)
}

/// Inpainting loss of full-patch predictions; only the mask window is read.
pub fn masked_inpainting_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, mask: &MaskSpec) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::Data(format!("prediction {:?} and target {:?} differ in shape", pred.shape(), target.shape())));
    }
    inpainting_loss(&mask_region(pred, mask), &mask_region(target, mask))
}

fn clip<T: Float>(p: T) -> T {
    p.max(T::from_f64_lossy(LOG_CLIP))
}

/// `-mean log y[l]` over labeled rows of `y [B, C]`.
pub fn cross_entropy_loss<T: Float>(y: &Tensor<T>, labels: &[Option<ClassId>]) -> Result<Reduced<T>> {
    let (b, c) = y.dims2();
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut sum = T::zero();
    let mut count = 0;
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            if l as usize >= c {
                return Err(Error::Data(format!("label {l} outside {c} classes")));
            }
            sum -= clip(y.row(i)[l as usize]).ln();
            count += 1;
        }
    }
    let value = if count == 0 { T::zero() } else { sum / T::from_usize(count).unwrap() };
    Ok(Reduced { value, count })
}

pub fn cross_entropy_grad<T: Float>(y: &Tensor<T>, labels: &[Option<ClassId>]) -> Tensor<T> {
    let (_, c) = y.dims2();
    let count = labels.iter().flatten().count();
    let mut d = Tensor::zeros(y.shape().to_vec());
    if count == 0 {
        return d;
    }
    let n = T::from_usize(count).unwrap();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            let v = y.row(i)[l as usize];
            if v > T::from_f64_lossy(LOG_CLIP) {
                d.data_mut()[i * c + l as usize] = -T::one() / (n * v);
            }
        }
    }
    d
}

fn check_positive<T: Float>(s: &[T], what: &str) -> Result<()> {
    match s.iter().find(|&&v| !(v > T::zero())) {
        Some(v) if !v.is_finite() => Err(Error::NonFinite(format!("{what} standard deviation ({v})"))),
        Some(v) => Err(Error::Numeric(format!("{what} standard deviation {v} is not positive"))),
        None => Ok(()),
    }
}

fn kl_term<T: Float>(mq: T, sq: T, mp: T, sp: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let d = mq - mp;
    (sp / sq).ln() + (sq * sq + d * d) / (T::from_f64_lossy(2.0) * sp * sp) - half
}

/// `KL(N(mq, sq) || N(mp, sp))` summed over dimensions.
pub fn gaussian_kl<T: Float>(mq: &[T], sq: &[T], mp: &[T], sp: &[T]) -> Result<T> {
    let n = mq.len();
    if sq.len() != n || mp.len() != n || sp.len() != n {
        return Err(Error::Data("gaussian_kl arguments differ in length".into()));
    }
    check_positive(sq, "posterior")?;
    check_positive(sp, "prior")?;
    Ok((0..n).map(|i| kl_term(mq[i], sq[i], mp[i], sp[i])).sum())
}

/// Partial derivatives of [`gaussian_kl`] with respect to `(mq, sq, mp, sp)`.
pub fn gaussian_kl_grads<T: Float>(mq: &[T], sq: &[T], mp: &[T], sp: &[T]) -> [Vec<T>; 4] {
    let n = mq.len();
    let mut out: [Vec<T>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
    for i in 0..n {
        let d = mq[i] - mp[i];
        let vp = sp[i] * sp[i];
        out[0].push(d / vp);
        out[1].push(-T::one() / sq[i] + sq[i] / vp);
        out[2].push(-d / vp);
        out[3].push(T::one() / sp[i] - (sq[i] * sq[i] + d * d) / (vp * sp[i]));
    }
    out
}

/// Boolean same-class and different-class matrices over labeled items.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatrices {
    pub positive: Array2<bool>,
    pub negative: Array2<bool>,
}

impl PairMatrices {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&v| v).count()
    }

    pub fn num_negative(&self) -> usize {
        self.negative.iter().filter(|&&v| v).count()
    }
}

pub fn pair_matrices(labels: &[Option<ClassId>]) -> PairMatrices {
    let b = labels.len();
    let positive = Array2::from_shape_fn((b, b), |(i, j)| i != j && labels[i].is_some() && labels[i] == labels[j]);
    let negative = Array2::from_shape_fn((b, b), |(i, j)| matches!((labels[i], labels[j]), (Some(a), Some(c)) if a != c));
    PairMatrices { positive, negative }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastiveValue<T> {
    pub value: T,
    /// Ordered positive pairs; zero means the positive term was skipped.
    pub positives: usize,
    /// Ordered negative pairs; zero means the negative term was skipped.
    pub negatives: usize,
}

/// `(m - d)^2` below the margin, zero above.
pub fn negative_penalty<T: Float>(d: T, margin: T) -> T {
    if d < margin {
        (margin - d) * (margin - d)
    } else {
        T::zero()
    }
}

fn check_embeddings<T: Float>(levels: &[Tensor<T>], b: usize) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Data("contrastive loss needs at least one level".into()));
    }
    for l in levels {
        if l.shape().len() != 2 || l.shape()[0] != b {
            return Err(Error::Data(format!("embedding {:?} does not match a batch of {b}", l.shape())));
        }
    }
    Ok(())
}

fn row_distance<T: Float>(e: &Tensor<T>, i: usize, j: usize) -> T {
    e.row(i).iter().zip(e.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt()
}

/// Sum over levels of per-level Euclidean distances, as a `B x B` matrix.
pub fn pair_distances<T: Float>(levels: &[Tensor<T>]) -> Array2<T> {
    let b = levels[0].shape()[0];
    Array2::from_shape_fn((b, b), |(i, j)| levels.iter().map(|e| row_distance(e, i, j)).sum())
}

/// `lambda * mean_P D + (1 - lambda) * sum_N (m - D)_+^2`, with `D` the
/// level-summed distance between per-level embeddings `[B, d_l]`.
pub fn contrastive_loss<T: Float>(
    levels: &[Tensor<T>],
    labels: &[Option<ClassId>],
    margin: T,
    lambda: T,
) -> Result<ContrastiveValue<T>> {
    check_embeddings(levels, labels.len())?;
    let pairs = pair_matrices(labels);
    let d = pair_distances(levels);
    let (np, nn) = (pairs.num_positive(), pairs.num_negative());
    let mut pos = T::zero();
    let mut neg = T::zero();
    for ((&dv, &p), &n) in d.iter().zip(&pairs.positive).zip(&pairs.negative) {
        if p {
            pos += dv;
        }
        if n {
            neg += negative_penalty(dv, margin);
        }
    }
    let pos = if np == 0 { T::zero() } else { pos / T::from_usize(np).unwrap() };
    Ok(ContrastiveValue { value: lambda * pos + (T::one() - lambda) * neg, positives: np, negatives: nn })
}

/// Gradients of [`contrastive_loss`] per level. Coincident embeddings get a
/// zero subgradient.
pub fn contrastive_grads<T: Float>(levels: &[Tensor<T>], labels: &[Option<ClassId>], margin: T, lambda: T) -> Vec<Tensor<T>> {
    let b = labels.len();
    let pairs = pair_matrices(labels);
    let np = pairs.num_positive();
    let d = pair_distances(levels);
    let mut grads: Vec<Tensor<T>> = levels.iter().map(|l| Tensor::zeros(l.shape().to_vec())).collect();
    for i in 0..b {
        for j in 0..b {
            let mut coef = T::zero();
            if pairs.positive[[i, j]] {
                coef += lambda / T::from_usize(np).unwrap();
            }
            if pairs.negative[[i, j]] && d[[i, j]] < margin {
                coef -= (T::one() - lambda) * T::from_f64_lossy(2.0) * (margin - d[[i, j]]);
            }
            if coef == T::zero() {
                continue;
            }
            for (e, g) in levels.iter().zip(grads.iter_mut()) {
                let dist = row_distance(e, i, j);
                if dist == T::zero() {
                    continue;
                }
                let dim = e.shape()[1];
                for k in 0..dim {
                    let u = coef * (e.row(i)[k] - e.row(j)[k]) / dist;
                    g.data_mut()[i * dim + k] += u;
                    g.data_mut()[j * dim + k] -= u;
                }
            }
        }
    }
    grads
}

/// Mean entropy of unlabeled rows of `y [B, C]`.
pub fn entropy_loss<T: Float>(y: &Tensor<T>, labels: &[Option<ClassId>]) -> Reduced<T> {
    let mut sum = T::zero();
    let mut count = 0;
    for (i, l) in labels.iter().enumerate() {
        if l.is_none() {
            sum -= y.row(i).iter().map(|&p| p * clip(p).ln()).sum::<T>();
            count += 1;
        }
    }
    let value = if count == 0 { T::zero() } else { sum / T::from_usize(count).unwrap() };
    Reduced { value, count }
}

pub fn entropy_grad<T: Float>(y: &Tensor<T>, labels: &[Option<ClassId>]) -> Tensor<T> {
    let (_, c) = y.dims2();
    let count = labels.iter().filter(|l| l.is_none()).count();
    let mut d = Tensor::zeros(y.shape().to_vec());
    if count == 0 {
        return d;
    }
    let n = T::from_usize(count).unwrap();
    let floor = T::from_f64_lossy(LOG_CLIP);
    for (i, l) in labels.iter().enumerate() {
        if l.is_none() {
            for k in 0..c {
                let p = y.row(i)[k];
                let g = if p > floor { -(p.ln() + T::one()) } else { -floor.ln() };
                d.data_mut()[i * c + k] = g / n;
            }
        }
    }
    d
}


// Tape adaptors. Each computes its gradient eagerly and scales it by the
// incoming scalar on the backward sweep.

fn scalar_node<'g, T: Float>(parents: &[Var<'g, T>], value: T, grads: Vec<Tensor<T>>) -> Var<'g, T> {
    parents[0].graph().custom(parents, Tensor::scalar(value), move |g, needs| {
        let s = g.data()[0];
        grads.iter().zip(needs).map(|(d, &need)| need.then(|| d.map(|v| v * s))).collect()
    })
}

/// Inpainting loss of `[B, 1, P, P]` predictions against full target patches.
pub fn inpainting_var<'g, T: Float>(pred: Var<'g, T>, target: &Tensor<T>, mask: &MaskSpec) -> Result<Var<'g, T>> {
    let shape = pred.shape();
    if shape != target.shape() {
        return Err(Error::Data(format!("prediction {shape:?} and target {:?} differ in shape", target.shape())));
    }
    let o = mask.offset(shape[2]);
    let region = pred.crop2d(o, o, mask.side, mask.side);
    let got = region.value();
    let want = mask_region(target, mask);
    let value = inpainting_loss(&got, &want)?;
    Ok(scalar_node(&[region], value, vec![inpainting_loss_grad(&got, &want)]))
}

pub fn cross_entropy_var<'g, T: Float>(y: Var<'g, T>, labels: &[Option<ClassId>]) -> Result<(Var<'g, T>, usize)> {
    let yv = y.value();
    let r = cross_entropy_loss(&yv, labels)?;
    Ok((scalar_node(&[y], r.value, vec![cross_entropy_grad(&yv, labels)]), r.count))
}

pub fn entropy_var<'g, T: Float>(y: Var<'g, T>, labels: &[Option<ClassId>]) -> (Var<'g, T>, usize) {
    let yv = y.value();
    let r = entropy_loss(&yv, labels);
    (scalar_node(&[y], r.value, vec![entropy_grad(&yv, labels)]), r.count)
}

/// Batch mean of per-item KL divergences; all four inputs are `[B, ...]`.
pub fn gaussian_kl_var<'g, T: Float>(q: &LevelDistribution<'g, T>, p_mean: Var<'g, T>, p_std: Var<'g, T>) -> Result<Var<'g, T>> {
    let vals = [q.mean.value(), q.std.value(), p_mean.value(), p_std.value()];
    let shape = vals[0].shape().to_vec();
    if vals.iter().any(|v| v.shape() != shape.as_slice()) {
        return Err(Error::Data("posterior and prior shapes differ".into()));
    }
    let b = batch_of(&vals[0])?;
    let value = gaussian_kl(vals[0].data(), vals[1].data(), vals[2].data(), vals[3].data())? / T::from_usize(b).unwrap();
    let inv = T::one() / T::from_usize(b).unwrap();
    let grads = gaussian_kl_grads(vals[0].data(), vals[1].data(), vals[2].data(), vals[3].data())
        .into_iter()
        .map(|g| Tensor::new(shape.clone(), g.into_iter().map(|v| v * inv).collect()))
        .collect();
    Ok(scalar_node(&[q.mean, q.std, p_mean, p_std], value, grads))
}

/// KL summed over levels: learned conditional priors below the top, and the
/// given per-item Gaussian `[B, D_L]` at the top.
pub fn kl_with_top_prior<'g, T: Float>(latents: &LatentState<'g, T>, top_mean: Tensor<T>, top_std: Tensor<T>) -> Result<Var<'g, T>> {
    let (top, lower) = latents.levels.split_last().ok_or_else(|| Error::Data("empty latent state".into()))?;
    let graph = top.z.graph();
    let mut total = gaussian_kl_var(&top.posterior, graph.constant(top_mean), graph.constant(top_std))?;
    for (i, level) in lower.iter().enumerate() {
        let prior = level.prior.ok_or_else(|| Error::Data(format!("level {} has no prior", i + 1)))?;
        total = total.add(gaussian_kl_var(&level.posterior, prior.mean, prior.std)?);
    }
    Ok(total)
}

/// Hierarchy KL with the top level scored against mixture component
/// `components[b]` for item `b`.
pub fn kl_hierarchy_loss<'g, T: Float>(latents: &LatentState<'g, T>, components: &[usize], prior: &GmmPrior) -> Result<Var<'g, T>> {
    if let Some(&c) = components.iter().find(|&&c| c >= prior.num_components()) {
        return Err(Error::Data(format!("component {c} outside {} mixture components", prior.num_components())));
    }
    let (mean, std) = prior.selected(components);
    kl_with_top_prior(latents, mean, std)
}

/// Contrastive loss over per-level embeddings `[B, d_l]`.
pub fn contrastive_var<'g, T: Float>(
    levels: &[Var<'g, T>],
    labels: &[Option<ClassId>],
    margin: T,
    lambda: T,
) -> Result<(Var<'g, T>, ContrastiveValue<T>)> {
    let vals: Vec<Tensor<T>> = levels.iter().map(|v| (*v.value()).clone()).collect();
    let r = contrastive_loss(&vals, labels, margin, lambda)?;
    let grads = contrastive_grads(&vals, labels, margin, lambda);
    Ok((scalar_node(levels, r.value, grads), r))
}

/// Individual terms on the tape.
pub struct LossTerms<'g, T: Float> {
    pub inpaint: Var<'g, T>,
    pub ce: Var<'g, T>,
    pub kl: Var<'g, T>,
    pub cl: Var<'g, T>,
    pub entropy: Var<'g, T>,
}

impl<'g, T: Float> LossTerms<'g, T> {
    pub fn parts(&self) -> LossParts {
        let v = |x: &Var<'g, T>| x.value().data()[0].as_f64();
        LossParts { inpaint: v(&self.inpaint), ce: v(&self.ce), kl: v(&self.kl), cl: v(&self.cl), entropy: v(&self.entropy) }
    }

    /// The weighted sum as a tape node; zero-weighted terms are left out.
    pub fn total(&self, w: &LossWeights) -> Var<'g, T> {
        let mut total = self.inpaint;
        for (term, weight) in [(self.ce, w.alpha1), (self.kl, w.alpha2), (self.cl, w.alpha3), (self.entropy, w.entropy_weight)] {
            if weight != 0.0 {
                total = total.add(term.scale(T::from_f64_lossy(weight)));
            }
        }
        total
    }
}
