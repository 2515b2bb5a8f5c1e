//! Deterministic synthetic dermoscopy-style datasets with exact ground
//! truth: one bright lesion per image on a darker background, class
//! signal encoded only inside the lesion, label-independent background
//! clutter (hair strokes, vignette) of configurable strength.

use std::fs;
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::sample_seed;
use crate::dataio::{
    load_cls_manifest, load_seg_manifest, save_image, save_mask, DatasetManifest, LesionClass,
    NormalizationMode,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionShape {
    Disk,
    Ellipse,
}

fn default_image_size() -> (usize, usize) {
    (64, 64)
}

fn default_texture_classes() -> usize {
    7
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    #[serde(default = "SynthConfig::default_shape")]
    pub lesion_shape: LesionShape,
    #[serde(default = "default_texture_classes")]
    pub texture_classes: usize,
    #[serde(default)]
    pub background_noise: f64,
    #[serde(default)]
    pub distractor_strength: f64,
    #[serde(default)]
    pub seed: u64,
    /// Per-class sample counts; must sum to n_samples when given.
    /// Defaults to a round-robin split.
    #[serde(default)]
    pub class_counts: Option<Vec<usize>>,
}

impl SynthConfig {
    fn default_shape() -> LesionShape {
        LesionShape::Disk
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::InvalidConfig(
                "image_size must be at least 16x16 so the lesion fits".into(),
            ));
        }
        if self.texture_classes == 0 || self.texture_classes > 7 {
            return Err(Error::InvalidConfig(
                "texture_classes must be between 1 and 7".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.background_noise)
            || !(0.0..=1.0).contains(&self.distractor_strength)
        {
            return Err(Error::InvalidConfig(
                "background_noise and distractor_strength must be in [0, 1]".into(),
            ));
        }
        if let Some(counts) = &self.class_counts {
            if counts.len() != self.texture_classes {
                return Err(Error::InvalidConfig(format!(
                    "class_counts has {} entries for {} classes",
                    counts.len(),
                    self.texture_classes
                )));
            }
            if counts.iter().sum::<usize>() != self.n_samples {
                return Err(Error::InvalidConfig(
                    "class_counts must sum to n_samples".into(),
                ));
            }
        }
        Ok(())
    }

    fn label_of(&self, index: usize) -> usize {
        match &self.class_counts {
            Some(counts) => {
                let mut cum = 0;
                for (k, c) in counts.iter().enumerate() {
                    cum += c;
                    if index < cum {
                        return k;
                    }
                }
                counts.len() - 1
            }
            None => index % self.texture_classes,
        }
    }
}

/// Distinct mean-color signature per class; the sinusoidal texture on top
/// is zero-mean, so lesion mean color alone separates the classes.
const CLASS_COLORS: [[f64; 3]; 7] = [
    [0.85, 0.35, 0.30],
    [0.35, 0.80, 0.35],
    [0.35, 0.40, 0.85],
    [0.80, 0.75, 0.30],
    [0.75, 0.35, 0.80],
    [0.30, 0.75, 0.75],
    [0.60, 0.55, 0.40],
];

struct Geometry {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Geometry {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / self.ax;
        let dy = (y as f64 - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

fn draw_geometry(rng: &mut ChaCha8Rng, config: &SynthConfig) -> Geometry {
    let (h, w) = config.image_size;
    let min_side = h.min(w) as f64;
    let cx = w as f64 * rng.gen_range(0.35..0.65);
    let cy = h as f64 * rng.gen_range(0.35..0.65);
    let ax = min_side * rng.gen_range(0.15..0.28);
    let ay = match config.lesion_shape {
        LesionShape::Disk => ax,
        LesionShape::Ellipse => min_side * rng.gen_range(0.15..0.28),
    };
    Geometry { cx, cy, ax, ay }
}

/// Analytic rasterization of the lesion region.
fn analytic_mask(geometry: &Geometry, h: usize, w: usize) -> Tensor4 {
    Array4::from_shape_fn((1, h, w, 1), |(_, y, x, _)| {
        f64::from(geometry.contains(x, y))
    })
}

fn render(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    geometry: &Geometry,
    class: Option<usize>,
) -> (Tensor4, Tensor4) {
    let (h, w) = config.image_size;
    let mask = analytic_mask(geometry, h, w);

    // background and lesion intensity bands are disjoint by construction:
    // background stays below 0.3 (plus noise), lesion above 0.55
    let bg_base = rng.gen_range(0.12..0.22);
    let lesion_level = rng.gen_range(0.75..0.9);
    let color = class.map(|k| CLASS_COLORS[k]).unwrap_or([1.0, 1.0, 1.0]);
    let freq = class.map(|k| (k + 2) as f64).unwrap_or(3.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut image = Array4::<f64>::zeros((1, h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let inside = mask[(0, y, x, 0)] == 1.0;
            let noise = if config.background_noise > 0.0 {
                rng.gen_range(-config.background_noise..config.background_noise) * 0.08
            } else {
                // keep rng consumption independent of the noise setting
                let _ = rng.gen::<f64>();
                0.0
            };
            for c in 0..3 {
                let v = if inside {
                    let texture = 0.12
                        * (std::f64::consts::TAU * freq * x as f64 / w as f64 + phase).sin();
                    (lesion_level + texture) * color[c]
                } else {
                    bg_base + noise
                };
                image[(0, y, x, c)] = v.clamp(0.0, 1.0);
            }
        }
    }

    if config.distractor_strength > 0.0 {
        apply_distractors(rng, config, &mask, &mut image);
    }
    (image, mask)
}

/// Label-independent clutter: dark hair-like strokes plus a corner
/// vignette, applied to background pixels only.
fn apply_distractors(
    rng: &mut ChaCha8Rng,
    config: &SynthConfig,
    mask: &Tensor4,
    image: &mut Tensor4,
) {
    let (h, w) = config.image_size;
    let strength = config.distractor_strength;

    let n_strokes = rng.gen_range(2..5usize);
    for _ in 0..n_strokes {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        let x1 = rng.gen_range(0.0..w as f64);
        let y1 = rng.gen_range(0.0..h as f64);
        let level = rng.gen_range(0.5..0.95);
        let steps = (w + h) * 2;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * t).round() as isize;
            let y = (y0 + (y1 - y0) * t).round() as isize;
            if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            if mask[(0, y, x, 0)] == 1.0 {
                continue;
            }
            for c in 0..3 {
                let v = image[(0, y, x, c)];
                image[(0, y, x, c)] = v + strength * (level - v);
            }
        }
    }

    let corner_x = if rng.gen_bool(0.5) { 0.0 } else { (w - 1) as f64 };
    let corner_y = if rng.gen_bool(0.5) { 0.0 } else { (h - 1) as f64 };
    let max_d = ((w * w + h * h) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            if mask[(0, y, x, 0)] == 1.0 {
                continue;
            }
            let d = ((x as f64 - corner_x).powi(2) + (y as f64 - corner_y).powi(2)).sqrt();
            let gain = strength * 0.4 * (1.0 - d / max_d);
            for c in 0..3 {
                image[(0, y, x, c)] = (image[(0, y, x, c)] + gain).clamp(0.0, 1.0);
            }
        }
    }
}

fn write_sidecar(config: &SynthConfig, out_dir: &Path) -> Result<()> {
    let path = out_dir.join("synth_config.json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Other(format!("serialize synth config: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Write a segmentation dataset (`images/` + `masks/`) under `out_dir`
/// and return its manifest.
pub fn generate_seg_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    for i in 0..config.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, 0, i));
        let geometry = draw_geometry(&mut rng, config);
        let (image, mask) = render(&mut rng, config, &geometry, None);
        let stem = format!("sample_{i:04}");
        save_image(
            &images_dir.join(format!("{stem}.png")),
            &image,
            0,
            NormalizationMode::UnitInterval,
        )?;
        save_mask(&masks_dir.join(format!("{stem}.png")), &mask, 0)?;
    }
    write_sidecar(config, out_dir)?;
    load_seg_manifest(out_dir)
}

/// Write a classification dataset (`images/` + `labels.csv`) under
/// `out_dir`, with ground-truth masks in `masks/` for oracle use, and
/// return its manifest.
pub fn generate_cls_dataset(config: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;

    let mut csv = String::from("image_id,class\n");
    for i in 0..config.n_samples {
        let class = config.label_of(i);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, 1, i));
        let geometry = draw_geometry(&mut rng, config);
        let (image, mask) = render(&mut rng, config, &geometry, Some(class));
        let stem = format!("sample_{i:04}");
        save_image(
            &images_dir.join(format!("{stem}.png")),
            &image,
            0,
            NormalizationMode::UnitInterval,
        )?;
        save_mask(&masks_dir.join(format!("{stem}.png")), &mask, 0)?;
        let label = LesionClass::from_index(class)
            .ok_or_else(|| Error::Other("class index outside the lesion taxonomy".into()))?;
        csv.push_str(&format!("{stem},{label}\n"));
    }
    let csv_path = out_dir.join("labels.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_sidecar(config, out_dir)?;
    load_cls_manifest(out_dir, &csv_path)
}
