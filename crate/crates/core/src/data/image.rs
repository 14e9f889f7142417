use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};

pub type ClassId = u8;

/// A grayscale image with its dense ground-truth label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// Intensities in `[0, 1]`, indexed `[row, col]`.
    pub pixels: Array2<f32>,
    pub labels: Array2<ClassId>,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, pixels: Array2<f32>, labels: Array2<ClassId>, num_classes: usize) -> Result<Self> {
        let id = id.into();
        if pixels.dim() != labels.dim() {
            return Err(Error::ShapeMismatch { path: PathBuf::from(&id), image_shape: pixels.dim(), label_shape: labels.dim() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange { path: PathBuf::from(&id), value: bad as u32, num_classes });
        }
        Ok(Self { id, pixels, labels })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn num_pixels(&self) -> usize {
        self.pixels.len()
    }
}

/// Per-image min-max scaling to `[0, 1]`; a constant image maps to zeros.
pub fn normalize_min_max(raw: &Array2<f32>) -> Array2<f32> {
    let (lo, hi) = raw.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(raw.dim());
    }
    raw.mapv(|v| (v - lo) / range)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_intensities(path: &Path) -> Result<Array2<f32>> {
    let img = decode(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(f32::from).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).expect("decoded buffer matches dimensions"))
}

fn read_label_values(path: &Path) -> Result<Array2<u32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLumaA8(b) => b.into_raw().chunks(2).map(|p| u32::from(p[0])).collect(),
        DynamicImage::ImageLumaA16(b) => b.into_raw().chunks(2).map(|p| u32::from(p[0])).collect(),
        other => {
            return Err(Error::Data(format!("{}: label map must be single-channel, got {:?}", path.display(), other.color())));
        }
    };
    Ok(Array2::from_shape_vec((h, w), data).expect("decoded buffer matches dimensions"))
}

/// Reads a grayscale image and min-max scales it to `[0, 1]`.
pub fn load_intensity(path: &Path) -> Result<Array2<f32>> {
    Ok(normalize_min_max(&read_intensities(path)?))
}

/// Reads a single-channel class-id map, rejecting values `>= num_classes`.
pub fn load_label_map(path: &Path, num_classes: usize) -> Result<Array2<ClassId>> {
    let labels = read_label_values(path)?;
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { path: path.to_path_buf(), value: bad, num_classes });
    }
    Ok(labels.mapv(|v| v as ClassId))
}

/// Reads one image/label pair.
pub fn load_pair(image_path: &Path, label_path: &Path, num_classes: usize) -> Result<LabeledImage> {
    let raw = read_intensities(image_path)?;
    let labels = read_label_values(label_path)?;
    if raw.dim() != labels.dim() {
        return Err(Error::ShapeMismatch { path: label_path.to_path_buf(), image_shape: raw.dim(), label_shape: labels.dim() });
    }
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::LabelOutOfRange { path: label_path.to_path_buf(), value: bad, num_classes });
    }
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(LabeledImage { id, pixels: normalize_min_max(&raw), labels: labels.mapv(|v| v as u8) })
}

/// Parses a manifest of `image_path<TAB>label_path` lines. Relative paths
/// resolve against `dir`. Blank lines and `#` comments are skipped.
pub fn read_manifest(dir: &Path, manifest: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(manifest).map_err(Error::io(manifest))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(img), Some(lbl), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Data(format!(
                "{}:{}: expected `image_path<TAB>label_path`",
                manifest.display(),
                lineno + 1
            )));
        };
        pairs.push((dir.join(img.trim()), dir.join(lbl.trim())));
    }
    Ok(pairs)
}

pub fn load_images(dir: &Path, manifest: &Path, num_classes: usize) -> Result<Vec<LabeledImage>> {
    read_manifest(dir, manifest)?.iter().map(|(img, lbl)| load_pair(img, lbl, num_classes)).collect()
}

/// Loads images listed in a manifest, resolving paths next to the manifest.
pub fn load_manifest(manifest: &Path, num_classes: usize) -> Result<Vec<LabeledImage>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    load_images(dir, manifest, num_classes)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    Ok(())
}

/// Writes `[0, 1]` intensities as a 16-bit grayscale PNG.
pub fn save_intensity_png(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = pixels.dim();
    let data: Vec<u16> = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer size");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes class ids verbatim as an 8-bit grayscale PNG.
pub fn save_label_png(path: &Path, labels: &Array2<ClassId>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = labels.dim();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, labels.iter().copied().collect()).expect("buffer size");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Saves every image as `<id>.png` / `<id>_labels.png` under `dir` and writes
/// `dir/<manifest_name>` listing them.
pub fn save_dataset(dir: &Path, manifest_name: &str, images: &[LabeledImage]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let manifest = dir.join(manifest_name);
    let mut out = fs::File::create(&manifest).map_err(Error::io(&manifest))?;
    for img in images {
        let image_name = format!("{}.png", img.id);
        let label_name = format!("{}_labels.png", img.id);
        save_intensity_png(&dir.join(&image_name), &img.pixels)?;
        save_label_png(&dir.join(&label_name), &img.labels)?;
        writeln!(out, "{image_name}\t{label_name}").map_err(Error::io(&manifest))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_image_normalizes_to_zero() {
        let raw = Array2::from_elem((4, 5), 17.0f32);
        assert!(normalize_min_max(&raw).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_max_spans_unit_interval() {
        let n = normalize_min_max(&array![[2.0f32, 4.0], [6.0, 10.0]]);
        assert_eq!(n, array![[0.0f32, 0.25], [0.5, 1.0]]);
    }

    #[test]
    fn manifest_of_three_pairs_loads_three_images() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<LabeledImage> = (0..3)
            .map(|i| {
                let pixels = Array2::from_shape_fn((6, 7), |(r, c)| ((r * 7 + c + i) % 11) as f32 / 10.0);
                let labels = Array2::from_shape_fn((6, 7), |(r, _)| (r % 2) as u8);
                LabeledImage::new(format!("img{i}"), pixels, labels, 2).unwrap()
            })
            .collect();
        let manifest = save_dataset(dir.path(), "manifest.tsv", &images).unwrap();
        let loaded = load_images(dir.path(), &manifest, 2).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in loaded.iter().zip(&images) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.id, b.id);
        }
    }

    #[test]
    fn label_value_at_num_classes_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        let lbl = dir.path().join("a_labels.png");
        save_intensity_png(&img, &Array2::from_elem((3, 3), 0.5)).unwrap();
        save_label_png(&lbl, &Array2::from_elem((3, 3), 3u8)).unwrap();
        let err = load_pair(&img, &lbl, 3).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { value: 3, .. }));
        assert!(err.to_string().contains("a_labels.png"), "{err}");
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("b.png");
        let lbl = dir.path().join("b_labels.png");
        save_intensity_png(&img, &Array2::from_elem((3, 4), 0.5)).unwrap();
        save_label_png(&lbl, &Array2::from_elem((4, 4), 0u8)).unwrap();
        let msg = load_pair(&img, &lbl, 2).unwrap_err().to_string();
        assert!(msg.contains("(3, 4)") && msg.contains("(4, 4)"), "{msg}");
    }

    #[test]
    fn manifest_rejects_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "only_one_field.png\n").unwrap();
        assert!(read_manifest(dir.path(), &m).is_err());
    }
}
