//! Synthetic textured datasets with dense labels.
//!
//! Each image is a Voronoi partition whose cells are painted with one texture
//! family per class: flat gray, oriented sinusoidal stripes, or a field of
//! bright blobs. Classes beyond the third reuse a family with shifted
//! parameters.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{save_dataset, ClassId, LabeledImage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub image_side: usize,
    pub num_images: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { num_classes: 3, image_side: 256, num_images: 8, noise_std: 0.05, seed: 0 }
    }
}

fn texture_value(class: usize, r: usize, c: usize, phase: f32, blobs: &Array2<f32>) -> f32 {
    let variant = (class / 3) as f32;
    match class % 3 {
        0 => 0.5 - 0.15 * variant,
        1 => {
            let angle = PI / 4.0 + variant * PI / 3.0;
            let period = 6.0 + 2.0 * variant;
            let t = (c as f32 * angle.cos() + r as f32 * angle.sin()) / period;
            0.5 + 0.4 * (2.0 * PI * t + phase).sin()
        }
        _ => blobs[[r, c]],
    }
}

/// Background 0.15 with Gaussian bumps peaking at 0.85.
fn blob_field(side: usize, radius: f32, density: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut bump = Array2::<f32>::zeros((side, side));
    let count = (density * (side * side) as f32).round() as usize;
    let reach = (3.0 * radius).ceil() as isize;
    for _ in 0..count {
        let (by, bx) = (rng.random_range(0.0..side as f32), rng.random_range(0.0..side as f32));
        let (cy, cx) = (by as isize, bx as isize);
        for y in (cy - reach).max(0)..(cy + reach + 1).min(side as isize) {
            for x in (cx - reach).max(0)..(cx + reach + 1).min(side as isize) {
                let d2 = (y as f32 - by).powi(2) + (x as f32 - bx).powi(2);
                let v = (-d2 / (2.0 * radius * radius)).exp();
                let cell = &mut bump[[y as usize, x as usize]];
                *cell = cell.max(v);
            }
        }
    }
    bump.mapv_into(|v| 0.15 + 0.7 * v)
}

fn generate_one(spec: &SynthSpec, index: usize) -> LabeledImage {
    let side = spec.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let extra = rng.random_range(0..=3usize);
    let cells = spec.num_classes + extra;
    // distinct integer sites: each site pixel lies in its own cell
    let mut sites: Vec<(f32, f32)> = Vec::with_capacity(cells);
    while sites.len() < cells {
        let site = (rng.random_range(0..side) as f32, rng.random_range(0..side) as f32);
        if !sites.contains(&site) {
            sites.push(site);
        }
    }
    // every class owns at least one cell
    let mut classes: Vec<usize> = (0..spec.num_classes).collect();
    classes.extend((0..extra).map(|_| rng.random_range(0..spec.num_classes)));
    for i in (1..classes.len()).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }

    let phase = rng.random_range(0.0..2.0 * PI);
    let blobs = blob_field(side, 2.5, 1.0 / 90.0, &mut rng);
    let labels = Array2::from_shape_fn((side, side), |(r, c)| {
        let nearest = sites
            .iter()
            .enumerate()
            .map(|(k, &(sy, sx))| ((r as f32 - sy).powi(2) + (c as f32 - sx).powi(2), k))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, k)| k)
            .expect("at least one site");
        classes[nearest] as ClassId
    });
    let noise = Normal::new(0.0f32, spec.noise_std.max(f32::MIN_POSITIVE)).expect("valid normal");
    let pixels = Array2::from_shape_fn((side, side), |(r, c)| {
        let clean = texture_value(labels[[r, c]] as usize, r, c, phase, &blobs);
        let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        (clean + n).clamp(0.0, 1.0)
    });
    LabeledImage { id: format!("synth_{index:03}"), pixels, labels }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<LabeledImage>> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {}", spec.num_classes)));
    }
    if spec.num_classes > 255 {
        return Err(Error::Config("at most 255 classes are supported".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be non-negative, got {}", spec.noise_std)));
    }
    if spec.image_side < 8 {
        return Err(Error::Config(format!("image side {} is too small", spec.image_side)));
    }
    Ok((0..spec.num_images).map(|i| generate_one(spec, i)).collect())
}

/// Writes PNG pairs, a manifest and a `synth.json` sidecar recording the spec.
pub fn write_synth_dataset(dir: &Path, spec: &SynthSpec, images: &[LabeledImage]) -> Result<std::path::PathBuf> {
    let manifest = save_dataset(dir, "manifest.tsv", images)?;
    let sidecar = dir.join("synth.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(spec)?).map_err(Error::io(&sidecar))?;
    Ok(manifest)
}
