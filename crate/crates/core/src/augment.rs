//! Stochastic training-time augmentation: rotation, shear, zoom,
//! brightness and flips. The same geometric transform is applied to image
//! and mask; brightness touches the image only. Everything is a pure
//! function of (config, sample_seed).

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_degrees: (f64, f64),
    pub shear_degrees: (f64, f64),
    pub zoom_factor: (f64, f64),
    pub brightness_delta: (f64, f64),
    pub horizontal_flip: f64,
    pub vertical_flip: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: (-25.0, 25.0),
            shear_degrees: (-10.0, 10.0),
            zoom_factor: (0.9, 1.1),
            brightness_delta: (-0.1, 0.1),
            horizontal_flip: 0.5,
            vertical_flip: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Config under which augmentation is exactly the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_degrees: (0.0, 0.0),
            shear_degrees: (0.0, 0.0),
            zoom_factor: (1.0, 1.0),
            brightness_delta: (0.0, 0.0),
            horizontal_flip: 0.0,
            vertical_flip: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.zoom_factor.0 <= 0.0 || self.zoom_factor.1 <= 0.0 {
            return Err(crate::Error::InvalidConfig(
                "zoom range must exclude 0".into(),
            ));
        }
        for p in [self.horizontal_flip, self.vertical_flip] {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::Error::InvalidConfig(format!(
                    "flip probability {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// splitmix64, used to derive per-sample seeds from (global seed, epoch,
/// sample index) without platform-dependent hashing.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn sample_seed(global_seed: u64, epoch: usize, sample_index: usize) -> u64 {
    splitmix64(
        splitmix64(global_seed)
            ^ splitmix64(epoch as u64).rotate_left(17)
            ^ splitmix64(sample_index as u64).rotate_left(39),
    )
}

struct DrawnParams {
    /// Inverse affine (output centered coords -> input centered coords),
    /// row-major 2×2.
    inv: [f64; 4],
    brightness: f64,
}

fn draw(config: &AugmentConfig, seed: u64) -> DrawnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed) ^ seed);
    let range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| -> f64 {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    // fixed draw order keeps the function deterministic per seed
    let rotation = range(&mut rng, config.rotation_degrees).to_radians();
    let shear = range(&mut rng, config.shear_degrees).to_radians();
    let zoom = range(&mut rng, config.zoom_factor);
    let brightness = range(&mut rng, config.brightness_delta);
    let hflip = rng.gen_bool(config.horizontal_flip);
    let vflip = rng.gen_bool(config.vertical_flip);

    // forward transform M = R(rotation) · Shear(x) · Scale(zoom) · Flip
    let (sin, cos) = rotation.sin_cos();
    let sh = shear.tan();
    let fx = if hflip { -1.0 } else { 1.0 };
    let fy = if vflip { -1.0 } else { 1.0 };
    // R·Sh: [cos, cos*sh - sin; sin, sin*sh + cos], then ·diag(z*fx, z*fy)
    let m = [
        cos * zoom * fx,
        (cos * sh - sin) * zoom * fy,
        sin * zoom * fx,
        (sin * sh + cos) * zoom * fy,
    ];
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    DrawnParams { inv, brightness }
}

/// Reflect an index into [0, n-1] without repeating the edge sample.
fn reflect(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn warp(
    src: &Tensor4,
    inv: &[f64; 4],
    nearest: bool,
) -> Tensor4 {
    let (n, h, w, c) = src.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array4::<f64>::zeros((n, h, w, c));
    for ni in 0..n {
        for r in 0..h {
            for col in 0..w {
                let xo = col as f64 - cx;
                let yo = r as f64 - cy;
                let xi = inv[0] * xo + inv[1] * yo + cx;
                let yi = inv[2] * xo + inv[3] * yo + cy;
                if nearest {
                    let rr = reflect(yi.round() as i64, h as i64);
                    let cc = reflect(xi.round() as i64, w as i64);
                    for ch in 0..c {
                        out[(ni, r, col, ch)] = src[(ni, rr, cc, ch)];
                    }
                } else {
                    let y0 = yi.floor();
                    let x0 = xi.floor();
                    let fy = yi - y0;
                    let fx = xi - x0;
                    let r0 = reflect(y0 as i64, h as i64);
                    let r1 = reflect(y0 as i64 + 1, h as i64);
                    let c0 = reflect(x0 as i64, w as i64);
                    let c1 = reflect(x0 as i64 + 1, w as i64);
                    for ch in 0..c {
                        let v = (1.0 - fy)
                            * ((1.0 - fx) * src[(ni, r0, c0, ch)] + fx * src[(ni, r0, c1, ch)])
                            + fy * ((1.0 - fx) * src[(ni, r1, c0, ch)]
                                + fx * src[(ni, r1, c1, ch)]);
                        out[(ni, r, col, ch)] = v;
                    }
                }
            }
        }
    }
    out
}

/// Augment an image/mask pair with one shared geometric transform.
/// `range` is the normalization range images are clipped to.
pub fn augment_pair(
    image: &Tensor4,
    mask: &Tensor4,
    config: &AugmentConfig,
    sample_seed: u64,
    range: (f64, f64),
) -> (Tensor4, Tensor4) {
    let params = draw(config, sample_seed);
    let mut out_img = warp(image, &params.inv, false);
    let out_mask = warp(mask, &params.inv, true).mapv(|v| f64::from(v > 0.5));
    out_img.mapv_inplace(|v| (v + params.brightness).clamp(range.0, range.1));
    (out_img, out_mask)
}

/// Image-only augmentation (classification path).
pub fn augment_image(
    image: &Tensor4,
    config: &AugmentConfig,
    sample_seed: u64,
    range: (f64, f64),
) -> Tensor4 {
    let params = draw(config, sample_seed);
    let mut out = warp(image, &params.inv, false);
    out.mapv_inplace(|v| (v + params.brightness).clamp(range.0, range.1));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    const UNIT: (f64, f64) = (0.0, 1.0);

    fn test_image() -> Tensor4 {
        Array4::from_shape_fn((1, 9, 9, 3), |(_, h, w, c)| {
            ((h * 13 + w * 5 + c * 3) % 17) as f64 / 17.0
        })
    }

    fn test_mask() -> Tensor4 {
        Array4::from_shape_fn((1, 9, 9, 1), |(_, h, w, _)| {
            f64::from((3..6).contains(&h) && (3..6).contains(&w))
        })
    }

    #[test]
    fn identity_config_is_identity() {
        let img = test_image();
        let mask = test_mask();
        let (oi, om) = augment_pair(&img, &mask, &AugmentConfig::identity(), 42, UNIT);
        assert_eq!(oi, img);
        assert_eq!(om, mask);
        assert_eq!(augment_image(&img, &AugmentConfig::identity(), 7, UNIT), img);
    }

    #[test]
    fn double_horizontal_flip_restores() {
        let mut config = AugmentConfig::identity();
        config.horizontal_flip = 1.0;
        let img = test_image();
        let once = augment_image(&img, &config, 1, UNIT);
        let twice = augment_image(&once, &config, 2, UNIT);
        assert_ne!(once, img);
        assert_eq!(twice, img);
    }

    #[test]
    fn rotation_90_moves_single_pixel_to_rotated_coordinate() {
        let mut config = AugmentConfig::identity();
        config.rotation_degrees = (90.0, 90.0);
        let mut mask = Array4::<f64>::zeros((1, 9, 9, 1));
        mask[(0, 2, 6, 0)] = 1.0; // centered (x, y) = (2, -2)
        let (_, out) = augment_pair(&mask.clone(), &mask, &config, 5, UNIT);
        // forward 90°: (x, y) -> (-y, x); centered (2, -2) -> (2, 2) -> (r 6, c 6)
        let mut expected = Array4::<f64>::zeros((1, 9, 9, 1));
        expected[(0, 6, 6, 0)] = 1.0;
        assert_eq!(out, expected);
    }

    #[test]
    fn brightness_addition_and_clipping() {
        let img = Array4::from_elem((1, 4, 4, 3), 0.5);
        let mut config = AugmentConfig::identity();
        config.brightness_delta = (0.1, 0.1);
        let out = augment_image(&img, &config, 0, UNIT);
        assert!(out.iter().all(|&v| (v - 0.6).abs() < 1e-12));

        config.brightness_delta = (0.9, 0.9);
        let out = augment_image(&img, &config, 0, UNIT);
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mask_stays_binary_and_deterministic() {
        let config = AugmentConfig::default();
        let img = test_image();
        let mask = test_mask();
        for seed in 0..20 {
            let (a_img, a_mask) = augment_pair(&img, &mask, &config, seed, UNIT);
            assert!(a_mask.iter().all(|&v| v == 0.0 || v == 1.0));
            let (b_img, b_mask) = augment_pair(&img, &mask, &config, seed, UNIT);
            assert_eq!(a_img, b_img);
            assert_eq!(a_mask, b_mask);
        }
    }

    #[test]
    fn geometric_transform_shared_between_image_and_mask() {
        let mut config = AugmentConfig::default();
        config.brightness_delta = (0.0, 0.0);
        let mask = test_mask();
        for seed in 0..10 {
            let (_, from_image_call) = augment_pair(&test_image(), &mask, &config, seed, UNIT);
            let (_, from_mask_call) = augment_pair(&mask, &mask, &config, seed, UNIT);
            assert_eq!(from_image_call, from_mask_call);
        }
    }

    #[test]
    fn output_stays_in_range() {
        let config = AugmentConfig::default();
        let img = test_image();
        for seed in 0..20 {
            let out = augment_image(&img, &config, seed, UNIT);
            assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sample_seed_varies_with_all_inputs() {
        let base = sample_seed(1, 2, 3);
        assert_ne!(base, sample_seed(2, 2, 3));
        assert_ne!(base, sample_seed(1, 3, 3));
        assert_ne!(base, sample_seed(1, 2, 4));
        assert_eq!(base, sample_seed(1, 2, 3));
    }
}
