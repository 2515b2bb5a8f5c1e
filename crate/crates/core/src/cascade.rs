//! Two-step pipeline glue: segment, extract the region of interest by
//! mask multiplication, classify the masked image.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clsmodel::{argmax_class, ClsModel};
use crate::dataio::{
    load_image, save_image, DatasetManifest, LabeledSample, LesionClass, ManifestSamples,
    NormalizationPolicy,
};
use crate::error::{Error, Result};
use crate::kernels::{resize_bilinear, resize_nearest};
use crate::segmodel::SegModel;
use crate::tensor::{shape_str, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RoiConfig {
    /// Crop to the mask's bounding box before resizing instead of keeping
    /// the full-frame masked image.
    pub crop_to_bbox: bool,
}

#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub mask: Tensor4,
    /// image ⊙ mask at segmenter resolution, before classifier resize.
    pub roi_image: Tensor4,
    pub label: LesionClass,
    pub probs: Vec<f64>,
}

/// Keep image pixels where mask = 1, zero elsewhere. The single-channel
/// mask broadcasts over image channels.
pub fn extract_roi(image: &Tensor4, mask: &Tensor4) -> Result<Tensor4> {
    let (n, h, w, c) = image.dim();
    if mask.dim() != (n, h, w, 1) {
        return Err(Error::shape(
            format!("mask ({n}, {h}, {w}, 1)"),
            shape_str(mask),
        ));
    }
    let mut out = image.clone();
    for ni in 0..n {
        for r in 0..h {
            for col in 0..w {
                if mask[(ni, r, col, 0)] == 0.0 {
                    for ch in 0..c {
                        out[(ni, r, col, ch)] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bounding box (row0, row1, col0, col1) of mask = 1 pixels in sample
/// `n`, inclusive-exclusive; None when the mask is empty.
fn mask_bbox(mask: &Tensor4, n: usize) -> Option<(usize, usize, usize, usize)> {
    let (_, h, w, _) = mask.dim();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask[(n, r, c, 0)] == 1.0 {
                bounds = Some(match bounds {
                    None => (r, r + 1, c, c + 1),
                    Some((r0, r1, c0, c1)) => {
                        (r0.min(r), r1.max(r + 1), c0.min(c), c1.max(c + 1))
                    }
                });
            }
        }
    }
    bounds
}

/// ROI prepared for the classifier: masked (optionally bbox-cropped),
/// then bilinear-resized to `target` (h, w). An empty mask falls back to
/// the full frame.
pub fn roi_for_classifier(
    roi: &Tensor4,
    mask: &Tensor4,
    config: &RoiConfig,
    target: (usize, usize),
) -> Result<Tensor4> {
    let cropped = if config.crop_to_bbox {
        if roi.dim().0 != 1 {
            return Err(Error::Other("bbox crop expects a single-sample batch".into()));
        }
        match mask_bbox(mask, 0) {
            Some((r0, r1, c0, c1)) => roi
                .slice(ndarray::s![.., r0..r1, c0..c1, ..])
                .to_owned()
                .as_standard_layout()
                .to_owned(),
            None => roi.clone(),
        }
    } else {
        roi.clone()
    };
    Ok(resize_bilinear(&cropped, target.0, target.1))
}

/// Run the full pipeline on one segmenter-sized image batch of size 1.
pub fn cascade_infer(
    seg: &SegModel,
    cls: &ClsModel,
    image: &Tensor4,
    roi_config: &RoiConfig,
) -> Result<CascadeResult> {
    let mask = seg.predict_mask(image, 0.5)?;
    let roi_image = extract_roi(image, &mask)?;
    let (th, tw, _) = cls.config.input_size;
    let cls_input = roi_for_classifier(&roi_image, &mask, roi_config, (th, tw))?;
    let probs_t = cls.predict_probs(&cls_input)?;
    let k = probs_t.dim().3;
    let probs: Vec<f64> = (0..k).map(|c| probs_t[(0, 0, 0, c)]).collect();
    let label = LesionClass::from_index(argmax_class(&probs_t, 0))
        .ok_or_else(|| Error::Other("class index outside the lesion taxonomy".into()))?;
    Ok(CascadeResult {
        mask,
        roi_image,
        label,
        probs,
    })
}

/// Anything that can produce a binary mask for an image; lets tests feed
/// ground-truth masks through the same batch path as a trained segmenter.
pub trait MaskSource {
    fn mask_for(&self, image: &Tensor4, image_path: &Path) -> Result<Tensor4>;
}

impl MaskSource for SegModel {
    fn mask_for(&self, image: &Tensor4, _image_path: &Path) -> Result<Tensor4> {
        self.predict_mask(image, 0.5)
    }
}

/// Mask source that reads ground-truth masks from a directory by stem.
pub struct OracleMasks {
    pub mask_dir: PathBuf,
}

impl MaskSource for OracleMasks {
    fn mask_for(&self, image: &Tensor4, image_path: &Path) -> Result<Tensor4> {
        let stem = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let path = self.mask_dir.join(format!("{stem}.png"));
        let (_, h, w, _) = image.dim();
        let mask = crate::dataio::load_mask(&path, &NormalizationPolicy::unit(h, w))?;
        Ok(resize_nearest(&mask, h, w))
    }
}

/// Extract ROI images for every sample of a classification manifest,
/// writing the dataio classification layout (`images/` + `labels.csv`)
/// under `out_dir`. Output order and labels match the input manifest.
pub fn batch_extract_roi(
    masks: &dyn MaskSource,
    manifest: &DatasetManifest,
    policy: &NormalizationPolicy,
    roi_config: &RoiConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let samples = manifest.cls_samples()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut out_samples = Vec::with_capacity(samples.len());
    let mut csv_rows = String::from("image_id,class\n");
    for sample in samples {
        let image = load_image(&sample.image_path, policy)?;
        let mask = masks.mask_for(&image, &sample.image_path)?;
        let mut roi = extract_roi(&image, &mask)?;
        if roi_config.crop_to_bbox {
            let (_, h, w, _) = roi.dim();
            roi = roi_for_classifier(&roi, &mask, roi_config, (h, w))?;
        }
        let stem = sample
            .image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let out_path = images_dir.join(format!("{stem}.png"));
        save_image(&out_path, &roi, 0, policy.mode)?;
        csv_rows.push_str(&format!("{stem},{}\n", sample.label));
        out_samples.push(LabeledSample {
            image_path: out_path,
            label: sample.label,
            split: sample.split,
        });
    }
    let csv_path = out_dir.join("labels.csv");
    fs::write(&csv_path, csv_rows).map_err(|e| Error::io(&csv_path, e))?;

    let mut out = DatasetManifest {
        samples: ManifestSamples::Cls(out_samples),
        class_counts: Default::default(),
        seed: manifest.seed,
        split_fraction: manifest.split_fraction,
    };
    out.recount();
    Ok(out)
}
