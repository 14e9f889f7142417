use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{ClassId, LabeledImage};
use super::patch::pure_window_class;
use crate::error::{Error, Result};

/// One labeled pixel. Serialized as a CSV row `image_id,row,col,class`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SparseLabel {
    pub image_id: String,
    pub row: usize,
    pub col: usize,
    pub class: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseLabelSet {
    pub entries: Vec<SparseLabel>,
    pub budget_fraction: f64,
}

impl SparseLabelSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for e in &self.entries {
            counts[e.class as usize] += 1;
        }
        counts
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        if self.entries.is_empty() {
            w.write_record(["image_id", "row", "col", "class"])?;
        }
        w.flush().map_err(Error::io(path))?;
        Ok(())
    }

    /// Reads a label CSV. The budget fraction is not stored in the file.
    pub fn read_csv(path: &Path, budget_fraction: f64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["image_id", "row", "col", "class"] {
            return Err(Error::Data(format!("{}: expected header image_id,row,col,class", path.display())));
        }
        let entries = r.deserialize().collect::<std::result::Result<Vec<SparseLabel>, _>>()?;
        Ok(Self { entries, budget_fraction })
    }

    /// Checks every entry against the dense ground truth.
    pub fn validate(&self, images: &[LabeledImage]) -> Result<()> {
        let by_id: BTreeMap<&str, &LabeledImage> = images.iter().map(|i| (i.id.as_str(), i)).collect();
        for e in &self.entries {
            let img = by_id
                .get(e.image_id.as_str())
                .ok_or_else(|| Error::Data(format!("label refers to unknown image {:?}", e.image_id)))?;
            let truth = img.labels.get([e.row, e.col]).ok_or_else(|| {
                Error::Data(format!("label ({}, {}) outside image {:?}", e.row, e.col, e.image_id))
            })?;
            if *truth != e.class {
                return Err(Error::Data(format!(
                    "label ({}, {}) in {:?} says class {} but ground truth is {truth}",
                    e.row, e.col, e.image_id, e.class
                )));
            }
        }
        Ok(())
    }
}

/// Largest label count allowed for `fraction` of `total_pixels`.
pub fn label_budget(fraction: f64, total_pixels: usize) -> usize {
    (fraction * total_pixels as f64).floor() as usize
}

/// Pixels whose `window`-sided neighbourhood carries a single class, grouped by class.
fn eligible_pixels(images: &[LabeledImage], num_classes: usize, window: usize) -> Vec<Vec<(u32, u32, u32)>> {
    let mut pools = vec![Vec::new(); num_classes];
    for (i, img) in images.iter().enumerate() {
        for r in 0..img.height() {
            for c in 0..img.width() {
                if let Some(class) = pure_window_class(&img.labels, (r, c), window) {
                    pools[class as usize].push((i as u32, r as u32, c as u32));
                }
            }
        }
    }
    pools
}

/// Per-class quotas as equal as availability permits.
fn stratified_quotas(available: &[usize], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..available.len()).filter(|&c| available[c] > 0).collect();
    order.sort_by_key(|&c| (available[c], c));
    let mut quotas = vec![0; available.len()];
    let mut remaining = budget;
    for (k, &c) in order.iter().enumerate() {
        let share = remaining / (order.len() - k);
        quotas[c] = share.min(available[c]);
        remaining -= quotas[c];
    }
    quotas
}

/// Draws a sparse label set under a pixel budget. Only centres whose
/// `window`-sided neighbourhood is class-pure are eligible, so every labeled
/// training patch has a single-class mask region.
pub fn sample_sparse_labels(
    images: &[LabeledImage],
    num_classes: usize,
    budget_fraction: f64,
    seed: u64,
    stratified: bool,
    window: usize,
) -> Result<SparseLabelSet> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::Config(format!("label budget fraction must lie in (0, 1], got {budget_fraction}")));
    }
    let total: usize = images.iter().map(LabeledImage::num_pixels).sum();
    let budget = label_budget(budget_fraction, total);
    let pools = eligible_pixels(images, num_classes, window);
    for (c, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            log::warn!("class {c} has no pixel with a class-pure {window}x{window} window; skipping it");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(u32, u32, u32, ClassId)> = Vec::new();
    if stratified {
        let available: Vec<usize> = pools.iter().map(Vec::len).collect();
        for (c, quota) in stratified_quotas(&available, budget).into_iter().enumerate() {
            for i in index::sample(&mut rng, pools[c].len(), quota) {
                let (img, r, col) = pools[c][i];
                picked.push((img, r, col, c as ClassId));
            }
        }
    } else {
        let flat: Vec<(u32, u32, u32, ClassId)> = pools
            .iter()
            .enumerate()
            .flat_map(|(c, pool)| pool.iter().map(move |&(i, r, col)| (i, r, col, c as ClassId)))
            .collect();
        let k = budget.min(flat.len());
        picked.extend(index::sample(&mut rng, flat.len(), k).into_iter().map(|i| flat[i]));
    }
    if picked.is_empty() {
        return Err(Error::Data(format!(
            "label budget {budget_fraction} of {total} pixels yields no eligible labeled pixel"
        )));
    }
    picked.sort_unstable();
    let entries = picked
        .into_iter()
        .map(|(i, r, c, class)| SparseLabel { image_id: images[i as usize].id.clone(), row: r as usize, col: c as usize, class })
        .collect();
    Ok(SparseLabelSet { entries, budget_fraction })
}
