//! Dataset manifests, normalization and batch loading.
//!
//! On-disk layout: `root/images/*.png|jpg` plus `root/masks/*.png` for
//! segmentation, or `root/images` plus a `labels.csv` with header
//! `image_id,class` for classification. Manifests serialize to JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// The seven HAM10000 lesion classes, in fixed alphabetical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum LesionClass {
    Akiec,
    Bcc,
    Bkl,
    Df,
    Mel,
    Nv,
    Vasc,
}

impl LesionClass {
    pub const ALL: [LesionClass; 7] = [
        LesionClass::Akiec,
        LesionClass::Bcc,
        LesionClass::Bkl,
        LesionClass::Df,
        LesionClass::Mel,
        LesionClass::Nv,
        LesionClass::Vasc,
    ];

    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<LesionClass> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LesionClass::Akiec => "AKIEC",
            LesionClass::Bcc => "BCC",
            LesionClass::Bkl => "BKL",
            LesionClass::Df => "DF",
            LesionClass::Mel => "MEL",
            LesionClass::Nv => "NV",
            LesionClass::Vasc => "VASC",
        }
    }

    pub fn parse(s: &str) -> Result<LesionClass> {
        Self::ALL
            .iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegSample {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: SplitTag,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledSample {
    pub image_path: PathBuf,
    pub label: LesionClass,
    pub split: SplitTag,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ManifestSamples {
    Seg(Vec<SegSample>),
    Cls(Vec<LabeledSample>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub samples: ManifestSamples,
    pub class_counts: BTreeMap<String, usize>,
    pub seed: u64,
    pub split_fraction: Option<f64>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        match &self.samples {
            ManifestSamples::Seg(v) => v.len(),
            ManifestSamples::Cls(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seg_samples(&self) -> Result<&[SegSample]> {
        match &self.samples {
            ManifestSamples::Seg(v) => Ok(v),
            ManifestSamples::Cls(_) => Err(Error::Other(
                "expected a segmentation manifest, got classification".into(),
            )),
        }
    }

    pub fn cls_samples(&self) -> Result<&[LabeledSample]> {
        match &self.samples {
            ManifestSamples::Cls(v) => Ok(v),
            ManifestSamples::Seg(_) => Err(Error::Other(
                "expected a classification manifest, got segmentation".into(),
            )),
        }
    }

    pub fn filter_split(&self, tag: SplitTag) -> DatasetManifest {
        let samples = match &self.samples {
            ManifestSamples::Seg(v) => {
                ManifestSamples::Seg(v.iter().filter(|s| s.split == tag).cloned().collect())
            }
            ManifestSamples::Cls(v) => {
                ManifestSamples::Cls(v.iter().filter(|s| s.split == tag).cloned().collect())
            }
        };
        let mut out = DatasetManifest {
            samples,
            class_counts: BTreeMap::new(),
            seed: self.seed,
            split_fraction: self.split_fraction,
        };
        out.recount();
        out
    }

    pub fn recount(&mut self) {
        self.class_counts.clear();
        if let ManifestSamples::Cls(v) = &self.samples {
            for s in v {
                *self
                    .class_counts
                    .entry(s.label.as_str().to_string())
                    .or_insert(0) += 1;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Other(format!("serialize manifest: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Other(format!("parse manifest: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Pixels scaled onto [0, 1].
    UnitInterval,
    /// Pixels scaled onto [-1, 1].
    SymmetricUnit,
}

impl NormalizationMode {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            NormalizationMode::UnitInterval => (0.0, 1.0),
            NormalizationMode::SymmetricUnit => (-1.0, 1.0),
        }
    }

    pub fn apply(&self, byte: u8) -> f64 {
        let unit = byte as f64 / 255.0;
        match self {
            NormalizationMode::UnitInterval => unit,
            NormalizationMode::SymmetricUnit => unit * 2.0 - 1.0,
        }
    }

    /// Inverse of [`apply`](Self::apply), rounded and clamped to u8.
    pub fn to_byte(&self, value: f64) -> u8 {
        let unit = match self {
            NormalizationMode::UnitInterval => value,
            NormalizationMode::SymmetricUnit => (value + 1.0) / 2.0,
        };
        (unit * 255.0).round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationPolicy {
    pub mode: NormalizationMode,
    /// (height, width) every image is resized to.
    pub target_size: (usize, usize),
}

impl NormalizationPolicy {
    pub fn unit(height: usize, width: usize) -> Self {
        NormalizationPolicy {
            mode: NormalizationMode::UnitInterval,
            target_size: (height, width),
        }
    }

    pub fn describe(&self) -> String {
        format!("{:?}@{}x{}", self.mode, self.target_size.0, self.target_size.1)
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if let Some(ext) = ext {
            if IMAGE_EXTENSIONS.contains(&ext.as_str()) {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                out.insert(stem, path);
            }
        }
    }
    Ok(out)
}

/// Build a segmentation manifest from `root/images` + `root/masks`,
/// pairing files by stem, ordered lexicographically.
pub fn load_seg_manifest(root_dir: &Path) -> Result<DatasetManifest> {
    let images = list_stems(&root_dir.join("images"))?;
    let masks = list_stems(&root_dir.join("masks"))?;
    if images.is_empty() {
        return Err(Error::NoSamples(root_dir.to_path_buf()));
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            return Err(Error::MissingMask(format!("{stem} (mask without image)")));
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = masks
            .get(stem)
            .ok_or_else(|| Error::MissingMask(stem.clone()))?;
        let (iw, ih) = image::image_dimensions(image_path).map_err(|e| Error::Decode {
            path: image_path.clone(),
            reason: e.to_string(),
        })?;
        let (mw, mh) = image::image_dimensions(mask_path).map_err(|e| Error::Decode {
            path: mask_path.clone(),
            reason: e.to_string(),
        })?;
        if (iw, ih) != (mw, mh) {
            return Err(Error::shape(
                format!("mask size {iw}x{ih} for stem {stem}"),
                format!("{mw}x{mh}"),
            ));
        }
        samples.push(SegSample {
            image_path: image_path.clone(),
            mask_path: mask_path.clone(),
            split: SplitTag::Train,
        });
    }
    Ok(DatasetManifest {
        samples: ManifestSamples::Seg(samples),
        class_counts: BTreeMap::new(),
        seed: 0,
        split_fraction: None,
    })
}

/// Build a classification manifest from an image directory plus a
/// `image_id,class` CSV.
pub fn load_cls_manifest(root_dir: &Path, labels_csv: &Path) -> Result<DatasetManifest> {
    let images = list_stems(&root_dir.join("images"))?;
    let mut reader = csv::Reader::from_path(labels_csv).map_err(|e| Error::Decode {
        path: labels_csv.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Decode {
            path: labels_csv.to_path_buf(),
            reason: e.to_string(),
        })?;
        let image_id = record.get(0).unwrap_or_default().trim().to_string();
        let class = record.get(1).unwrap_or_default().trim();
        let label = LesionClass::parse(class)?;
        let image_path = images
            .get(&image_id)
            .cloned()
            .ok_or_else(|| Error::MissingImage(root_dir.join("images").join(&image_id)))?;
        samples.push(LabeledSample {
            image_path,
            label,
            split: SplitTag::Train,
        });
    }
    if samples.is_empty() {
        return Err(Error::NoSamples(root_dir.to_path_buf()));
    }
    samples.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    let mut manifest = DatasetManifest {
        samples: ManifestSamples::Cls(samples),
        class_counts: BTreeMap::new(),
        seed: 0,
        split_fraction: None,
    };
    manifest.recount();
    Ok(manifest)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Assign train/test tags. Segmentation manifests split uniformly at
/// random; classification manifests split stratified by class so rare
/// classes keep their proportion. Train count is exactly
/// `floor(N × train_fraction)`.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = manifest.len();
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let mut out = manifest.clone();
    out.seed = seed;
    out.split_fraction = Some(train_fraction);

    match &mut out.samples {
        ManifestSamples::Seg(samples) => {
            samples.sort_by_key(|s| stem_of(&s.image_path));
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            for s in samples.iter_mut() {
                s.split = SplitTag::Test;
            }
            for &i in order.iter().take(n_train) {
                samples[i].split = SplitTag::Train;
            }
        }
        ManifestSamples::Cls(samples) => {
            samples.sort_by_key(|s| stem_of(&s.image_path));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // per-class floors first, then hand out the remaining train
            // slots by largest fractional remainder
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); LesionClass::ALL.len()];
            for (i, s) in samples.iter().enumerate() {
                per_class[s.label.index()].push(i);
            }
            let mut takes = Vec::new();
            let mut assigned = 0;
            for indices in &mut per_class {
                indices.shuffle(&mut rng);
                let exact = indices.len() as f64 * train_fraction;
                let take = exact.floor() as usize;
                assigned += take;
                takes.push((exact - take as f64, take));
            }
            let mut order: Vec<usize> = (0..per_class.len()).collect();
            order.sort_by(|a, b| {
                takes[*b]
                    .0
                    .partial_cmp(&takes[*a].0)
                    .unwrap()
                    .then(a.cmp(b))
            });
            for &ci in &order {
                if assigned >= n_train {
                    break;
                }
                if takes[ci].1 < per_class[ci].len() {
                    takes[ci].1 += 1;
                    assigned += 1;
                }
            }
            for s in samples.iter_mut() {
                s.split = SplitTag::Test;
            }
            for (ci, indices) in per_class.iter().enumerate() {
                for &i in indices.iter().take(takes[ci].1) {
                    samples[i].split = SplitTag::Train;
                }
            }
        }
    }
    out.recount();
    Ok(out)
}

fn decode_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

fn decode_gray(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_luma8())
}

/// Decode, bilinear-resize and normalize one image to `(1, H, W, 3)`.
pub fn load_image(path: &Path, policy: &NormalizationPolicy) -> Result<Tensor4> {
    let (h, w) = policy.target_size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidConfig("target_size must be positive".into()));
    }
    let img = decode_rgb(path)?;
    let resized = image::imageops::resize(
        &img,
        w as u32,
        h as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array4::<f64>::zeros((1, h, w, 3));
    for (x, y, pixel) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[(0, y as usize, x as usize, c)] = policy.mode.apply(pixel.0[c]);
        }
    }
    Ok(out)
}

/// Decode a mask, binarize at 127.5 on the 8-bit values, then
/// nearest-neighbor resize to `(1, H, W, 1)` with values in {0, 1}.
pub fn load_mask(path: &Path, policy: &NormalizationPolicy) -> Result<Tensor4> {
    let (h, w) = policy.target_size;
    let img = decode_gray(path)?;
    let mut binary = img;
    for p in binary.pixels_mut() {
        p.0[0] = if f64::from(p.0[0]) > 127.5 { 255 } else { 0 };
    }
    let resized = image::imageops::resize(
        &binary,
        w as u32,
        h as u32,
        image::imageops::FilterType::Nearest,
    );
    let mut out = Array4::<f64>::zeros((1, h, w, 1));
    for (x, y, pixel) in resized.enumerate_pixels() {
        out[(0, y as usize, x as usize, 0)] = if pixel.0[0] > 127 { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Write sample `n` of an RGB tensor as a PNG, denormalizing per `mode`.
pub fn save_image(path: &Path, tensor: &Tensor4, n: usize, mode: NormalizationMode) -> Result<()> {
    let (_, h, w, c) = tensor.dim();
    if c != 3 {
        return Err(Error::shape("3 channels", crate::tensor::shape_str(tensor)));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch| mode.to_byte(tensor[(n, y as usize, x as usize, ch)]);
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Write sample `n` of a single-channel binary mask as an 8-bit PNG
/// (0 or 255).
pub fn save_mask(path: &Path, tensor: &Tensor4, n: usize) -> Result<()> {
    let (_, h, w, c) = tensor.dim();
    if c != 1 {
        return Err(Error::shape("1 channel", crate::tensor::shape_str(tensor)));
    }
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if tensor[(n, y as usize, x as usize, 0)] > 0.5 {
            255
        } else {
            0
        }])
    });
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn stack_batch(items: Vec<Tensor4>) -> Tensor4 {
    let (_, h, w, c) = items[0].dim();
    let mut out = Array4::<f64>::zeros((items.len(), h, w, c));
    for (i, item) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&item.index_axis(ndarray::Axis(0), 0));
    }
    out
}

/// Load a segmentation batch; sample order is manifest order regardless
/// of loader scheduling.
pub fn load_seg_batch(
    samples: &[SegSample],
    policy: &NormalizationPolicy,
) -> Result<(Tensor4, Tensor4)> {
    if samples.is_empty() {
        return Err(Error::Other("empty batch".into()));
    }
    let load_one = |s: &SegSample| -> Result<(Tensor4, Tensor4)> {
        Ok((load_image(&s.image_path, policy)?, load_mask(&s.mask_path, policy)?))
    };

    #[cfg(feature = "parallel")]
    let loaded: Vec<(Tensor4, Tensor4)> = if crate::parallel::parallel_enabled() {
        samples.par_iter().map(load_one).collect::<Result<_>>()?
    } else {
        samples.iter().map(load_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let loaded: Vec<(Tensor4, Tensor4)> = samples.iter().map(load_one).collect::<Result<_>>()?;

    let (images, masks): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
    Ok((stack_batch(images), stack_batch(masks)))
}

/// Load a classification batch with labels in manifest order.
pub fn load_cls_batch(
    samples: &[LabeledSample],
    policy: &NormalizationPolicy,
) -> Result<(Tensor4, Vec<LesionClass>)> {
    if samples.is_empty() {
        return Err(Error::Other("empty batch".into()));
    }
    let load_one = |s: &LabeledSample| load_image(&s.image_path, policy);

    #[cfg(feature = "parallel")]
    let images: Vec<Tensor4> = if crate::parallel::parallel_enabled() {
        samples.par_iter().map(load_one).collect::<Result<_>>()?
    } else {
        samples.iter().map(load_one).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let images: Vec<Tensor4> = samples.iter().map(load_one).collect::<Result<_>>()?;

    let labels = samples.iter().map(|s| s.label).collect();
    Ok((stack_batch(images), labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_rgb(path: &Path, w: u32, h: u32, value: u8) {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([value, value, value]));
        img.save(path).unwrap();
    }

    fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let img = image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]));
        img.save(path).unwrap();
    }

    fn seg_fixture(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        for i in 0..n {
            let stem = format!("img_{i:03}");
            write_rgb(&dir.path().join("images").join(format!("{stem}.png")), 8, 8, 128);
            write_gray(&dir.path().join("masks").join(format!("{stem}.png")), 8, 8, |x, _| {
                if x < 4 { 255 } else { 0 }
            });
        }
        dir
    }

    fn cls_fixture(labels: &[(&str, &str)]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        let mut csv = String::from("image_id,class\n");
        for (stem, class) in labels {
            write_rgb(&dir.path().join("images").join(format!("{stem}.png")), 8, 8, 100);
            csv.push_str(&format!("{stem},{class}\n"));
        }
        let csv_path = dir.path().join("labels.csv");
        fs::write(&csv_path, csv).unwrap();
        (dir, csv_path)
    }

    #[test]
    fn class_order_and_parsing() {
        assert_eq!(LesionClass::Akiec.index(), 0);
        assert_eq!(LesionClass::Vasc.index(), 6);
        assert_eq!(LesionClass::parse("mel").unwrap(), LesionClass::Mel);
        assert_eq!(LesionClass::parse("NV").unwrap(), LesionClass::Nv);
        assert!(LesionClass::parse("xyz").is_err());
        assert_eq!(LesionClass::from_index(3), Some(LesionClass::Df));
        assert_eq!(LesionClass::from_index(7), None);
    }

    #[test]
    fn seg_manifest_pairs_by_stem_in_order() {
        let dir = seg_fixture(5);
        let manifest = load_seg_manifest(dir.path()).unwrap();
        let samples = manifest.seg_samples().unwrap();
        assert_eq!(samples.len(), 5);
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("img_{i:03}");
            assert!(s.image_path.to_str().unwrap().contains(&stem));
            assert!(s.mask_path.to_str().unwrap().contains(&stem));
        }
    }

    #[test]
    fn seg_manifest_missing_mask_detected() {
        let dir = seg_fixture(3);
        fs::remove_file(dir.path().join("masks/img_001.png")).unwrap();
        match load_seg_manifest(dir.path()) {
            Err(Error::MissingMask(stem)) => assert!(stem.contains("img_001")),
            other => panic!("expected MissingMask, got {other:?}"),
        }
    }

    #[test]
    fn seg_manifest_orphan_mask_detected() {
        let dir = seg_fixture(2);
        write_gray(&dir.path().join("masks/extra.png"), 8, 8, |_, _| 255);
        assert!(matches!(
            load_seg_manifest(dir.path()),
            Err(Error::MissingMask(_))
        ));
    }

    #[test]
    fn seg_manifest_size_mismatch_detected() {
        let dir = seg_fixture(2);
        write_gray(&dir.path().join("masks/img_000.png"), 16, 16, |_, _| 255);
        assert!(matches!(
            load_seg_manifest(dir.path()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        assert!(matches!(
            load_seg_manifest(dir.path()),
            Err(Error::NoSamples(_))
        ));
    }

    #[test]
    fn cls_manifest_counts_classes() {
        let (dir, csv) = cls_fixture(&[
            ("a", "MEL"),
            ("b", "NV"),
            ("c", "NV"),
            ("d", "AKIEC"),
        ]);
        let manifest = load_cls_manifest(dir.path(), &csv).unwrap();
        assert_eq!(manifest.len(), 4);
        assert_eq!(manifest.class_counts["NV"], 2);
        assert_eq!(manifest.class_counts["MEL"], 1);
        assert_eq!(manifest.class_counts["AKIEC"], 1);
    }

    #[test]
    fn cls_manifest_unknown_class_rejected() {
        let (dir, csv) = cls_fixture(&[("a", "BOGUS")]);
        assert!(matches!(
            load_cls_manifest(dir.path(), &csv),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn cls_manifest_missing_image_rejected() {
        let (dir, csv) = cls_fixture(&[("a", "MEL")]);
        fs::write(&csv, "image_id,class\na,MEL\nghost,NV\n").unwrap();
        assert!(matches!(
            load_cls_manifest(dir.path(), &csv),
            Err(Error::MissingImage(_))
        ));
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = seg_fixture(3);
        let manifest = load_seg_manifest(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        manifest.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), manifest);
    }

    #[test]
    fn split_train_count_is_exact_floor() {
        let dir = seg_fixture(10);
        let manifest = load_seg_manifest(dir.path()).unwrap();
        for (fraction, expect) in [(0.8, 8), (0.75, 7), (0.5, 5)] {
            let split_manifest = split(&manifest, fraction, 3).unwrap();
            let train = split_manifest.filter_split(SplitTag::Train);
            assert_eq!(train.len(), expect);
            assert_eq!(split_manifest.len() - train.len(), 10 - expect);
        }
        assert!(split(&manifest, 0.0, 3).is_err());
        assert!(split(&manifest, 1.0, 3).is_err());
    }

    #[test]
    fn split_deterministic_per_seed() {
        let dir = seg_fixture(12);
        let manifest = load_seg_manifest(dir.path()).unwrap();
        let a = split(&manifest, 0.8, 1).unwrap();
        let b = split(&manifest, 0.8, 1).unwrap();
        let c = split(&manifest, 0.8, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stratified_split_keeps_class_proportions() {
        let mut labels = Vec::new();
        let names: Vec<String> = (0..30).map(|i| format!("s{i:02}")).collect();
        for (i, name) in names.iter().enumerate() {
            let class = if i < 20 { "NV" } else if i < 28 { "MEL" } else { "DF" };
            labels.push((name.as_str(), class));
        }
        let (dir, csv) = cls_fixture(&labels);
        let manifest = load_cls_manifest(dir.path(), &csv).unwrap();
        let split_manifest = split(&manifest, 0.8, 7).unwrap();
        let train = split_manifest.filter_split(SplitTag::Train);
        assert_eq!(train.len(), 24);
        // 20 NV -> 16, 8 MEL -> 6.4, 2 DF -> 1.6; floors 16+6+1=23,
        // the remaining slot goes to the largest remainder (DF, 0.6)
        assert_eq!(train.class_counts["NV"], 16);
        assert_eq!(train.class_counts["MEL"], 6);
        assert_eq!(train.class_counts["DF"], 2);
    }

    #[test]
    fn normalization_modes_and_bytes() {
        assert_eq!(NormalizationMode::UnitInterval.apply(0), 0.0);
        assert_eq!(NormalizationMode::UnitInterval.apply(255), 1.0);
        assert_eq!(NormalizationMode::SymmetricUnit.apply(0), -1.0);
        assert_eq!(NormalizationMode::SymmetricUnit.apply(255), 1.0);
        for mode in [NormalizationMode::UnitInterval, NormalizationMode::SymmetricUnit] {
            for byte in [0u8, 1, 127, 128, 200, 255] {
                assert_eq!(mode.to_byte(mode.apply(byte)), byte);
            }
        }
    }

    #[test]
    fn load_image_resizes_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        write_rgb(&path, 16, 12, 51);
        let policy = NormalizationPolicy::unit(6, 8);
        let tensor = load_image(&path, &policy).unwrap();
        assert_eq!(tensor.dim(), (1, 6, 8, 3));
        assert!(tensor.iter().all(|&v| (v - 0.2).abs() < 1e-9));
    }

    #[test]
    fn load_mask_binarizes_then_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        // grays straddling the 127.5 threshold
        write_gray(&path, 8, 8, |x, _| if x < 4 { 200 } else { 100 });
        let policy = NormalizationPolicy::unit(4, 4);
        let mask = load_mask(&path, &policy).unwrap();
        assert_eq!(mask.dim(), (1, 4, 4, 1));
        assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
        for y in 0..4 {
            assert_eq!(mask[(0, y, 0, 0)], 1.0);
            assert_eq!(mask[(0, y, 3, 0)], 0.0);
        }
    }

    #[test]
    fn batches_follow_manifest_order() {
        let dir = seg_fixture(4);
        let manifest = load_seg_manifest(dir.path()).unwrap();
        let policy = NormalizationPolicy::unit(8, 8);
        let (images, masks) = load_seg_batch(manifest.seg_samples().unwrap(), &policy).unwrap();
        assert_eq!(images.dim(), (4, 8, 8, 3));
        assert_eq!(masks.dim(), (4, 8, 8, 1));
        assert!(load_seg_batch(&[], &policy).is_err());
    }

    #[test]
    fn image_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let tensor = Array4::from_shape_fn((1, 6, 6, 3), |(_, h, w, c)| {
            ((h * 40 + w * 9 + c * 17) % 256) as f64 / 255.0
        });
        save_image(&path, &tensor, 0, NormalizationMode::UnitInterval).unwrap();
        let policy = NormalizationPolicy::unit(6, 6);
        let loaded = load_image(&path, &policy).unwrap();
        let max_err = tensor
            .iter()
            .zip(loaded.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1.0 / 255.0, "max error {max_err}");
    }
}
