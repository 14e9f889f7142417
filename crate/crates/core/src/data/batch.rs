//! Seed-deterministic mixed labeled/unlabeled patch batches.
//!
//! Batch `t` is a pure function of `(seed, t)`: the labeled part walks an
//! epoch-wise shuffled order of the sparse label set, the unlabeled part is
//! drawn uniformly over all pixels. Readers can therefore shard by step.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{ClassId, LabeledImage};
use super::patch::{check_patch_side, extract_patch, MaskSpec, PatchSample};
use super::sparse::SparseLabelSet;
use crate::error::{Error, Result};

const UNLABELED_STREAM: u64 = 0x5eed_0f_u64 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub unlabeled_fraction: f64,
    pub patch_side: usize,
    pub mask: MaskSpec,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct LabeledCenter {
    image: usize,
    row: usize,
    col: usize,
    class: ClassId,
}

pub struct BatchStream<'a> {
    images: &'a [LabeledImage],
    labeled: Vec<LabeledCenter>,
    distinct_classes: usize,
    config: BatchConfig,
    next_step: u64,
}

pub fn make_batches<'a>(
    images: &'a [LabeledImage],
    labels: &SparseLabelSet,
    config: BatchConfig,
) -> Result<BatchStream<'a>> {
    BatchStream::new(images, labels, config)
}

impl<'a> BatchStream<'a> {
    pub fn new(images: &'a [LabeledImage], labels: &SparseLabelSet, config: BatchConfig) -> Result<Self> {
        if config.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", config.batch_size)));
        }
        if !(0.0..=1.0).contains(&config.unlabeled_fraction) {
            return Err(Error::Config(format!("unlabeled fraction must lie in [0, 1], got {}", config.unlabeled_fraction)));
        }
        check_patch_side(config.patch_side, &config.mask)?;
        if images.is_empty() {
            return Err(Error::Data("no training images".into()));
        }
        let index: BTreeMap<&str, usize> = images.iter().enumerate().map(|(i, img)| (img.id.as_str(), i)).collect();
        let labeled = labels
            .entries
            .iter()
            .map(|e| {
                let image = *index
                    .get(e.image_id.as_str())
                    .ok_or_else(|| Error::Data(format!("label refers to unknown image {:?}", e.image_id)))?;
                Ok(LabeledCenter { image, row: e.row, col: e.col, class: e.class })
            })
            .collect::<Result<Vec<_>>>()?;
        if labeled.is_empty() && config.unlabeled_fraction < 1.0 {
            return Err(Error::Data("labeled patches requested but the sparse label set is empty".into()));
        }
        let mut classes: Vec<ClassId> = labeled.iter().map(|c| c.class).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 && config.unlabeled_fraction < 1.0 {
            log::warn!("only {} labeled class(es) available: contrastive negative pairs are impossible", classes.len());
        }
        Ok(Self { images, labeled, distinct_classes: classes.len(), config, next_step: 0 })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    /// Unlabeled count of batch `step`; the running total tracks the
    /// configured fraction exactly.
    pub fn unlabeled_count(&self, step: u64) -> usize {
        let per = self.config.batch_size as f64 * self.config.unlabeled_fraction;
        let upto = |t: u64| (t as f64 * per).floor() as u64;
        (upto(step + 1) - upto(step)) as usize
    }

    fn labeled_start(&self, step: u64) -> u64 {
        let per = self.config.batch_size as f64 * self.config.unlabeled_fraction;
        step * self.config.batch_size as u64 - (step as f64 * per).floor() as u64
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.labeled.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    fn labeled_indices(&self, step: u64, count: usize) -> Vec<usize> {
        let n = self.labeled.len() as u64;
        let start = self.labeled_start(step);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        let mut at = |pos: u64| -> usize {
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            cached.as_ref().unwrap().1[(pos % n) as usize]
        };
        let mut picked: Vec<usize> = (0..count as u64).map(|k| at(start + k)).collect();
        // keep at least two classes in the batch for the contrastive negatives
        if count >= 2 && self.distinct_classes >= 2 {
            let first = self.labeled[picked[0]].class;
            if picked.iter().all(|&i| self.labeled[i].class == first) {
                let replacement = (count as u64..count as u64 + n)
                    .map(|k| at(start + k))
                    .find(|&i| self.labeled[i].class != first)
                    .expect("another class exists");
                *picked.last_mut().unwrap() = replacement;
            }
        }
        picked
    }

    pub fn batch_at(&self, step: u64) -> Vec<PatchSample> {
        let b = self.config.batch_size;
        let n_unlabeled = if self.labeled.is_empty() { b } else { self.unlabeled_count(step) };
        let n_labeled = b - n_unlabeled;
        let mut batch = Vec::with_capacity(b);
        for i in self.labeled_indices(step, n_labeled) {
            let c = self.labeled[i];
            let mut sample = extract_patch(&self.images[c.image], c.image, (c.row, c.col), self.config.patch_side, &self.config.mask)
                .expect("validated patch geometry");
            sample.label = Some(c.class);
            batch.push(sample);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ UNLABELED_STREAM);
        rng.set_stream(step);
        for _ in 0..n_unlabeled {
            let image = rng.random_range(0..self.images.len());
            let img = &self.images[image];
            let center = (rng.random_range(0..img.height()), rng.random_range(0..img.width()));
            let sample = extract_patch(img, image, center, self.config.patch_side, &self.config.mask)
                .expect("validated patch geometry");
            batch.push(sample.into_unlabeled());
        }
        batch
    }

    /// Repositions the stream so the next batch is `step`.
    pub fn seek(&mut self, step: u64) {
        self.next_step = step;
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Vec<PatchSample>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch = self.batch_at(self.next_step);
        self.next_step += 1;
        Some(batch)
    }
}
