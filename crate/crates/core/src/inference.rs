//! Whole-image segmentation by classifying the centre of a sliding patch, and
//! Dice-based evaluation.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::patch::reflect_window;
use crate::data::{ClassId, MaskSpec};
use crate::error::{Error, Result};
use crate::head::{argmax, tempered_softmax};
use crate::model::EpsSeg;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Distance between evaluated centres; skipped pixels copy the nearest one.
    pub stride: usize,
    /// Patches per forward pass.
    pub batch_size: usize,
    /// Blank the centre window as during training. Off by default.
    pub mask: Option<MaskSpec>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { stride: 1, batch_size: 256, mask: None }
    }
}

impl InferenceConfig {
    pub fn validate(&self, patch_side: usize) -> Result<()> {
        if self.stride == 0 || self.stride > patch_side {
            return Err(Error::Config(format!("stride must lie in 1..={patch_side}, got {}", self.stride)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("inference batch size must be positive".into()));
        }
        if let Some(mask) = &self.mask {
            crate::data::patch::check_patch_side(patch_side, mask)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub labels: Array2<ClassId>,
    /// Largest softmax probability at each pixel.
    pub confidence: Array2<f32>,
}

/// Index of the evaluated centre nearest to `i` on a grid of `n` centres
/// spaced `stride` apart; ties go to the later centre.
fn nearest_center(i: usize, stride: usize, n: usize) -> usize {
    ((2 * i + stride) / (2 * stride)).min(n - 1)
}

fn patch_tensor(pixels: &Array2<f32>, centers: &[(usize, usize)], side: usize, mask: Option<&MaskSpec>) -> Tensor<f32> {
    let mut data = Vec::with_capacity(centers.len() * side * side);
    for &c in centers {
        let mut window = reflect_window(pixels, c, side);
        if let Some(m) = mask {
            let o = m.offset(side);
            window.slice_mut(ndarray::s![o..o + m.side, o..o + m.side]).fill(m.fill_value);
        }
        data.extend(window.iter().copied());
    }
    Tensor::new([centers.len(), 1, side, side], data)
}

/// Labels every pixel of `pixels` (intensities in `[0, 1]`).
pub fn segment_image(model: &EpsSeg, params: &ParamStore<f32>, pixels: &Array2<f32>, config: &InferenceConfig) -> Result<SegmentationMap> {
    let side = model.config().patch_side;
    config.validate(side)?;
    let (h, w) = pixels.dim();
    if h <= side / 2 || w <= side / 2 {
        return Err(Error::Data(format!("{h}x{w} image too small for reflect-padded patch side {side}")));
    }
    let s = config.stride;
    let (ny, nx) = (h.div_ceil(s), w.div_ceil(s));
    let centers: Vec<(usize, usize)> = (0..ny).flat_map(|y| (0..nx).map(move |x| (y * s, x * s))).collect();
    let scored: Vec<Vec<(ClassId, f32)>> = centers
        .par_chunks(config.batch_size)
        .map(|chunk| {
            let logits = model.predict_logits(params, patch_tensor(pixels, chunk, side, config.mask.as_ref()))?;
            Ok((0..chunk.len())
                .map(|i| {
                    let probs = tempered_softmax(logits.row(i), None, 1.0f32);
                    let k = argmax(&probs);
                    (k as ClassId, probs[k])
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let grid: Vec<(ClassId, f32)> = scored.into_iter().flatten().collect();
    let at = |r: usize, c: usize| grid[nearest_center(r, s, ny) * nx + nearest_center(c, s, nx)];
    Ok(SegmentationMap {
        labels: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).0),
        confidence: Array2::from_shape_fn((h, w), |(r, c)| at(r, c).1),
    })
}

/// `2|A n B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice_score(a: &Array2<bool>, b: &Array2<bool>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Data(format!("dice of {:?} against {:?} masks", a.dim(), b.dim())));
    }
    let (mut both, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        both += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(dice_from_counts(both, total))
}

fn dice_from_counts(intersection: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when the class occurs in neither prediction nor truth.
    pub per_class_dice: Vec<Option<f64>>,
    /// Mean over the classes present in the truth.
    pub mean_dice: f64,
    pub truth_pixels: Vec<usize>,
    pub predicted_pixels: Vec<usize>,
    pub intersection_pixels: Vec<usize>,
}

impl EvalReport {
    fn from_counts(truth: Vec<usize>, predicted: Vec<usize>, intersection: Vec<usize>) -> Self {
        let per_class: Vec<Option<f64>> = (0..truth.len())
            .map(|c| (truth[c] + predicted[c] > 0).then(|| dice_from_counts(intersection[c], truth[c] + predicted[c])))
            .collect();
        let present: Vec<f64> = (0..truth.len()).filter(|&c| truth[c] > 0).map(|c| per_class[c].unwrap()).collect();
        let mean_dice = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        Self { per_class_dice: per_class, mean_dice, truth_pixels: truth, predicted_pixels: predicted, intersection_pixels: intersection }
    }

    /// Dataset-level report: pixel counts are summed before scoring.
    pub fn pooled(reports: &[EvalReport]) -> Result<Self> {
        let c = reports.first().ok_or_else(|| Error::Data("no reports to pool".into()))?.truth_pixels.len();
        if reports.iter().any(|r| r.truth_pixels.len() != c) {
            return Err(Error::Data("reports disagree on the number of classes".into()));
        }
        let sum = |f: fn(&EvalReport) -> &Vec<usize>| (0..c).map(|k| reports.iter().map(|r| f(r)[k]).sum()).collect::<Vec<usize>>();
        Ok(Self::from_counts(sum(|r| &r.truth_pixels), sum(|r| &r.predicted_pixels), sum(|r| &r.intersection_pixels)))
    }
}

/// One-vs-rest Dice per class.
pub fn evaluate(predicted: &Array2<ClassId>, truth: &Array2<ClassId>, num_classes: usize) -> Result<EvalReport> {
    if predicted.dim() != truth.dim() {
        return Err(Error::Data(format!("prediction {:?} and truth {:?} differ in shape", predicted.dim(), truth.dim())));
    }
    let mut t = vec![0usize; num_classes];
    let mut p = vec![0usize; num_classes];
    let mut both = vec![0usize; num_classes];
    for (&a, &b) in predicted.iter().zip(truth) {
        let (a, b) = (a as usize, b as usize);
        if a >= num_classes || b >= num_classes {
            return Err(Error::Data(format!("class id {} outside 0..{num_classes}", a.max(b))));
        }
        p[a] += 1;
        t[b] += 1;
        if a == b {
            both[a] += 1;
        }
    }
    Ok(EvalReport::from_counts(t, p, both))
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
];

/// Intensities blended with one colour per class.
pub fn save_overlay_png(path: &Path, pixels: &Array2<f32>, labels: &Array2<ClassId>) -> Result<()> {
    if pixels.dim() != labels.dim() {
        return Err(Error::Data(format!("overlay of {:?} image with {:?} labels", pixels.dim(), labels.dim())));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let (h, w) = pixels.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let gray = pixels[[r, c]].clamp(0.0, 1.0) * 255.0;
        let colour = PALETTE[labels[[r, c]] as usize % PALETTE.len()];
        Rgb(colour.map(|v| (0.6 * gray + 0.4 * v as f32).round() as u8))
    });
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvae::ModelConfig;
    use proptest::prelude::*;

    fn tiny() -> (EpsSeg, ParamStore<f32>) {
        let config = ModelConfig { channels: vec![4, 4, 8], top_latent_dim: 4, patch_side: 9, latent_channels: 2, classifier_hidden: 8, ..ModelConfig::default() };
        let model = EpsSeg::new(&config).unwrap();
        let params = model.init_params(5);
        (model, params)
    }

    fn brute_dice(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
        let mut inter = 0;
        let mut na = 0;
        let mut nb = 0;
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                if a[[r, c]] {
                    na += 1;
                }
                if b[[r, c]] {
                    nb += 1;
                }
                if a[[r, c]] && b[[r, c]] {
                    inter += 1;
                }
            }
        }
        if na + nb == 0 {
            1.0
        } else {
            2.0 * inter as f64 / (na + nb) as f64
        }
    }

    #[test]
    fn dice_examples() {
        let a = Array2::from_shape_fn((4, 4), |(r, _)| r == 0);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = Array2::from_shape_fn((4, 4), |(r, _)| r == 3);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let c = Array2::from_shape_fn((4, 4), |(r, c)| r < 2 && c < 2);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.5);
        let empty = Array2::from_elem((4, 4), false);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
        assert_eq!(dice_score(&empty, &a).unwrap(), 0.0);
        assert!(dice_score(&a, &Array2::from_elem((3, 4), false)).is_err());
    }

    #[test]
    fn evaluate_conventions() {
        let truth = Array2::from_shape_fn((6, 6), |(r, _)| if r < 3 { 0 } else { 1 });
        let perfect = evaluate(&truth, &truth, 3).unwrap();
        assert_eq!(perfect.per_class_dice, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(perfect.mean_dice, 1.0);
        // a class only in the prediction is scored but not averaged
        let mut pred = truth.clone();
        pred[[0, 0]] = 2;
        let r = evaluate(&pred, &truth, 3).unwrap();
        assert_eq!(r.per_class_dice[2], Some(0.0));
        assert!((r.mean_dice - (2.0 * 17.0 / 35.0 + 1.0) / 2.0).abs() < 1e-12);
        assert!(evaluate(&pred, &Array2::zeros((5, 6)), 3).is_err());
    }

    #[test]
    fn shifted_checkerboard_matches_counting_oracle() {
        let truth = Array2::from_shape_fn((9, 11), |(r, c)| ((r / 2 + c / 3) % 2) as ClassId);
        let pred = Array2::from_shape_fn((9, 11), |(r, c)| truth[[r, (c + 1) % 11]]);
        let report = evaluate(&pred, &truth, 2).unwrap();
        for k in 0..2 {
            let a = pred.mapv(|v| v == k as ClassId);
            let b = truth.mapv(|v| v == k as ClassId);
            assert!((report.per_class_dice[k].unwrap() - brute_dice(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn pooled_sums_counts() {
        let t1 = Array2::from_shape_fn((4, 4), |(r, _)| (r % 2) as ClassId);
        let p1 = Array2::zeros((4, 4));
        let t2 = Array2::from_elem((4, 4), 1 as ClassId);
        let a = evaluate(&p1, &t1, 2).unwrap();
        let b = evaluate(&t2, &t2, 2).unwrap();
        let pooled = EvalReport::pooled(&[a, b]).unwrap();
        let t = ndarray::concatenate![ndarray::Axis(0), t1, t2];
        let p = ndarray::concatenate![ndarray::Axis(0), p1, t2];
        assert_eq!(pooled, evaluate(&p, &t, 2).unwrap());
    }

    #[test]
    fn nearest_center_fill() {
        // centres at 0, 4, 8 for 10 pixels
        let got: Vec<usize> = (0..10).map(|i| nearest_center(i, 4, 3)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert!((0..17).all(|i| nearest_center(i, 1, 17) == i));
    }

    #[test]
    fn biased_classifier_labels_everything() {
        let (model, mut params) = tiny();
        let head = model.head().classifier.clone();
        params.get_mut(&head.out.weight_name()).unwrap().data_mut().fill(0.0);
        params.get_mut(&head.out.bias_name()).unwrap().data_mut().copy_from_slice(&[-1.0, 4.0, 0.0]);
        let img = Array2::from_elem((12, 13), 0.4f32);
        let seg = segment_image(&model, &params, &img, &InferenceConfig { batch_size: 7, ..Default::default() }).unwrap();
        assert!(seg.labels.iter().all(|&l| l == 1));
        assert!(seg.confidence.iter().all(|&p| p >= 1.0 / 3.0 && p <= 1.0));
    }

    #[test]
    fn stride_checks_and_fill() {
        let (model, params) = tiny();
        let img = Array2::from_shape_fn((14, 10), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0);
        for stride in [0, 10] {
            let err = segment_image(&model, &params, &img, &InferenceConfig { stride, ..Default::default() }).unwrap_err();
            assert!(matches!(err, Error::Config(_)));
        }
        let dense = segment_image(&model, &params, &img, &InferenceConfig::default()).unwrap();
        let sparse = segment_image(&model, &params, &img, &InferenceConfig { stride: 3, batch_size: 5, mask: None }).unwrap();
        for r in 0..14 {
            for c in 0..10 {
                let (nr, nc) = (nearest_center(r, 3, 5) * 3, nearest_center(c, 3, 4) * 3);
                assert_eq!(sparse.labels[[r, c]], dense.labels[[nr, nc]]);
                assert_eq!(sparse.confidence[[r, c]], dense.confidence[[nr, nc]]);
            }
        }
        let again = segment_image(&model, &params, &img, &InferenceConfig { batch_size: 3, ..Default::default() }).unwrap();
        assert_eq!(again, dense);
    }

    #[test]
    fn constant_logit_shift_keeps_the_map() {
        let (model, mut params) = tiny();
        let img = Array2::from_shape_fn((10, 10), |(r, c)| ((r * c) % 7) as f32 / 6.0);
        let before = segment_image(&model, &params, &img, &InferenceConfig::default()).unwrap();
        let bias = model.head().classifier.out.bias_name();
        params.get_mut(&bias).unwrap().data_mut().iter_mut().for_each(|b| *b += 3.0);
        let after = segment_image(&model, &params, &img, &InferenceConfig::default()).unwrap();
        assert_eq!(before.labels, after.labels);
        assert!(before.confidence.iter().zip(&after.confidence).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn overlay_writes_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o/overlay.png");
        let img = Array2::from_elem((5, 6), 0.5f32);
        save_overlay_png(&path, &img, &Array2::zeros((5, 6))).unwrap();
        let back = image::open(&path).unwrap().into_rgb8();
        assert_eq!(back.dimensions(), (6, 5));
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_reflexive(bits in proptest::collection::vec(any::<(bool, bool)>(), 30)) {
            let a = Array2::from_shape_vec((5, 6), bits.iter().map(|b| b.0).collect()).unwrap();
            let b = Array2::from_shape_vec((5, 6), bits.iter().map(|b| b.1).collect()).unwrap();
            let ab = dice_score(&a, &b).unwrap();
            prop_assert_eq!(ab, dice_score(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - brute_dice(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        }
    }
}
