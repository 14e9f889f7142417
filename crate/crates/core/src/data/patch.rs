use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::image::{ClassId, LabeledImage};
use crate::error::{Error, Result};

/// Square zero-mask centred on the patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub side: usize,
    pub fill_value: f32,
}

impl MaskSpec {
    pub fn new(side: usize) -> Result<Self> {
        let spec = Self { side, fill_value: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.side % 2 == 0 {
            return Err(Error::Config(format!("mask side must be odd and positive, got {}", self.side)));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.side / 2
    }

    /// First row/col of the mask window inside a patch of `patch_side`.
    pub fn offset(&self, patch_side: usize) -> usize {
        patch_side / 2 - self.half()
    }
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { side: 3, fill_value: 0.0 }
    }
}

/// A patch around a centre pixel, before and after center masking.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub patch: Array2<f32>,
    pub masked_patch: Array2<f32>,
    /// Original values of the masked window.
    pub mask_target: Array2<f32>,
    pub mask: MaskSpec,
    pub label: Option<ClassId>,
    pub image_index: usize,
    pub center: (usize, usize),
}

impl PatchSample {
    /// Drops the label, for patches drawn from the unlabeled pool.
    pub fn into_unlabeled(mut self) -> Self {
        self.label = None;
        self
    }

    /// `masked_patch` with `mask_target` written back.
    pub fn restored(&self) -> Array2<f32> {
        let o = self.mask.offset(self.patch.nrows());
        let mut out = self.masked_patch.clone();
        out.slice_mut(s![o..o + self.mask.side, o..o + self.mask.side]).assign(&self.mask_target);
        out
    }
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Square window of `side` centred on `center`, reflect-padded at borders.
pub fn reflect_window<T: Copy>(grid: &Array2<T>, center: (usize, usize), side: usize) -> Array2<T> {
    let (h, w) = grid.dim();
    let half = (side / 2) as isize;
    let (cy, cx) = (center.0 as isize, center.1 as isize);
    Array2::from_shape_fn((side, side), |(r, c)| {
        grid[[reflect(cy - half + r as isize, h), reflect(cx - half + c as isize, w)]]
    })
}

/// Class of the window around `center` if every pixel in it agrees.
pub fn pure_window_class(labels: &Array2<ClassId>, center: (usize, usize), side: usize) -> Option<ClassId> {
    let (h, w) = labels.dim();
    let half = (side / 2) as isize;
    let want = labels[[center.0, center.1]];
    for dy in -half..=half {
        let row = reflect(center.0 as isize + dy, h);
        for dx in -half..=half {
            if labels[[row, reflect(center.1 as isize + dx, w)]] != want {
                return None;
            }
        }
    }
    Some(want)
}

pub fn check_patch_side(patch_side: usize, mask: &MaskSpec) -> Result<()> {
    if patch_side == 0 || patch_side % 2 == 0 {
        return Err(Error::Config(format!("patch side must be odd so the centre pixel is unique, got {patch_side}")));
    }
    mask.validate()?;
    if mask.side > patch_side {
        return Err(Error::Config(format!("mask side {} exceeds patch side {patch_side}", mask.side)));
    }
    Ok(())
}

/// Cuts the patch around `center` and zeroes its central mask window. The
/// label is the ground-truth class when the mask window is class-pure.
pub fn extract_patch(
    image: &LabeledImage,
    image_index: usize,
    center: (usize, usize),
    patch_side: usize,
    mask: &MaskSpec,
) -> Result<PatchSample> {
    check_patch_side(patch_side, mask)?;
    let (h, w) = image.pixels.dim();
    if center.0 >= h || center.1 >= w {
        return Err(Error::Data(format!("centre {center:?} outside {}x{} image {}", h, w, image.id)));
    }
    if h <= patch_side / 2 || w <= patch_side / 2 {
        return Err(Error::Data(format!("image {} ({h}x{w}) too small for reflect-padded patch side {patch_side}", image.id)));
    }
    let patch = reflect_window(&image.pixels, center, patch_side);
    let o = mask.offset(patch_side);
    let window = s![o..o + mask.side, o..o + mask.side];
    let mask_target = patch.slice(window).to_owned();
    let mut masked_patch = patch.clone();
    masked_patch.slice_mut(window).fill(mask.fill_value);
    let label = pure_window_class(&image.labels, center, mask.side);
    Ok(PatchSample { patch, masked_patch, mask_target, mask: *mask, label, image_index, center })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(h: usize, w: usize) -> LabeledImage {
        let pixels = Array2::from_shape_fn((h, w), |(r, c)| ((r * 31 + c * 17) % 97) as f32 / 96.0 + 0.01);
        let labels = Array2::from_shape_fn((h, w), |(_, c)| u8::from(c >= w / 2));
        LabeledImage::new("t", pixels, labels, 2).unwrap()
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn minimal_mask_zeroes_one_pixel() {
        let img = image(20, 20);
        let p = extract_patch(&img, 0, (10, 5), 9, &MaskSpec::new(1).unwrap()).unwrap();
        let zeroed = p.masked_patch.iter().zip(&p.patch).filter(|(m, o)| m != o).count();
        assert_eq!(zeroed, 1);
        assert_eq!(p.masked_patch[[4, 4]], 0.0);
    }

    #[test]
    fn mask_of_patch_minus_two_leaves_border() {
        let img = image(20, 20);
        let p = extract_patch(&img, 0, (10, 10), 9, &MaskSpec::new(7).unwrap()).unwrap();
        let zeroed = p.masked_patch.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 7 * 7);
        assert!(p.masked_patch.row(0).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn pure_region_sets_label_and_mixed_does_not() {
        let img = image(20, 20);
        let mask = MaskSpec::new(3).unwrap();
        assert_eq!(extract_patch(&img, 0, (5, 3), 9, &mask).unwrap().label, Some(0));
        assert_eq!(extract_patch(&img, 0, (5, 15), 9, &mask).unwrap().label, Some(1));
        // window straddles the vertical boundary at column 10
        assert_eq!(extract_patch(&img, 0, (5, 10), 9, &mask).unwrap().label, None);
    }

    #[test]
    fn even_patch_side_rejected() {
        let img = image(20, 20);
        assert!(extract_patch(&img, 0, (5, 5), 8, &MaskSpec::default()).is_err());
        assert!(MaskSpec::new(4).is_err());
    }

    #[test]
    fn border_patch_uses_reflection() {
        let img = image(20, 20);
        let p = extract_patch(&img, 0, (0, 0), 5, &MaskSpec::new(1).unwrap()).unwrap();
        assert_eq!(p.patch[[0, 0]], img.pixels[[2, 2]]);
        assert_eq!(p.patch[[1, 3]], img.pixels[[1, 1]]);
    }

    proptest! {
        #[test]
        fn masking_invariants(cy in 0usize..24, cx in 0usize..24, half in 0usize..4) {
            let img = image(24, 24);
            let mask = MaskSpec::new(2 * half + 1).unwrap();
            let p = extract_patch(&img, 0, (cy, cx), 11, &mask).unwrap();
            prop_assert_eq!(p.restored(), p.patch.clone());
            let o = mask.offset(11);
            for r in 0..11 {
                for c in 0..11 {
                    let inside = (o..o + mask.side).contains(&r) && (o..o + mask.side).contains(&c);
                    if inside {
                        prop_assert_eq!(p.masked_patch[[r, c]], 0.0);
                    } else {
                        prop_assert_eq!(p.masked_patch[[r, c]], p.patch[[r, c]]);
                    }
                }
            }
            if let Some(l) = p.label {
                let win = reflect_window(&img.labels, (cy, cx), mask.side);
                prop_assert!(win.iter().all(|&v| v == l));
            }
        }
    }
}
