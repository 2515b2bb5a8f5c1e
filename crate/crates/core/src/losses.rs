//! Training objectives: dice + binary cross-entropy for segmentation,
//! categorical cross-entropy for classification. Each loss also exposes
//! its analytic gradient w.r.t. the prediction, which seeds the tape's
//! backward pass.

use std::collections::BTreeMap;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor4};

pub const DICE_EPSILON: f64 = 1.0;
const LOG_CLIP: f64 = 1e-7;

/// Loss total with its named components; total = sum of components.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

fn check_shapes(p: &Tensor4, g: &Tensor4) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::shape(shape_str(g), shape_str(p)));
    }
    Ok(())
}

/// 1 − (2·Σ(P·G) + ε) / (ΣP + ΣG + ε).
pub fn dice_loss(p: &Tensor4, g: &Tensor4, epsilon: f64) -> Result<f64> {
    check_shapes(p, g)?;
    let inter: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let denom = p.sum() + g.sum() + epsilon;
    Ok(1.0 - (2.0 * inter + epsilon) / denom)
}

/// d dice_loss / dP. With N = 2·Σ(P·G) + ε and D = ΣP + ΣG + ε the
/// per-pixel derivative is (N − 2·G·D) / D².
pub fn dice_loss_grad(p: &Tensor4, g: &Tensor4, epsilon: f64) -> Result<Tensor4> {
    check_shapes(p, g)?;
    let inter: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let num = 2.0 * inter + epsilon;
    let denom = p.sum() + g.sum() + epsilon;
    let d2 = denom * denom;
    Ok(Array4::from_shape_vec(
        p.dim(),
        g.iter().map(|gi| (num - 2.0 * gi * denom) / d2).collect(),
    )
    .expect("grad shape"))
}

/// Mean over pixels of −[G·ln P + (1−G)·ln(1−P)], P clipped away from 0/1.
pub fn binary_cross_entropy(p: &Tensor4, g: &Tensor4) -> Result<f64> {
    check_shapes(p, g)?;
    let n = p.len() as f64;
    let sum: f64 = p
        .iter()
        .zip(g.iter())
        .map(|(pi, gi)| {
            let pc = pi.clamp(LOG_CLIP, 1.0 - LOG_CLIP);
            -(gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln())
        })
        .sum();
    Ok(sum / n)
}

/// d BCE / dP; zero where P sits outside the clip range.
pub fn binary_cross_entropy_grad(p: &Tensor4, g: &Tensor4) -> Result<Tensor4> {
    check_shapes(p, g)?;
    let n = p.len() as f64;
    Ok(Array4::from_shape_vec(
        p.dim(),
        p.iter()
            .zip(g.iter())
            .map(|(pi, gi)| {
                if *pi < LOG_CLIP || *pi > 1.0 - LOG_CLIP {
                    return 0.0;
                }
                (-(gi / pi) + (1.0 - gi) / (1.0 - pi)) / n
            })
            .collect(),
    )
    .expect("grad shape"))
}

/// Segmentation objective: binary cross-entropy + dice.
pub fn seg_loss(p: &Tensor4, g: &Tensor4) -> Result<LossValue> {
    let bce = binary_cross_entropy(p, g)?;
    let dice = dice_loss(p, g, DICE_EPSILON)?;
    let mut components = BTreeMap::new();
    components.insert("bce".to_string(), bce);
    components.insert("dice".to_string(), dice);
    Ok(LossValue {
        total: bce + dice,
        components,
    })
}

pub fn seg_loss_grad(p: &Tensor4, g: &Tensor4) -> Result<Tensor4> {
    let mut grad = binary_cross_entropy_grad(p, g)?;
    grad += &dice_loss_grad(p, g, DICE_EPSILON)?;
    Ok(grad)
}

/// −ln probs[label], probs clipped before the log.
pub fn categorical_cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::shape(
            format!("label < {}", probs.len()),
            format!("label {label}"),
        ));
    }
    Ok(-probs[label].clamp(LOG_CLIP, 1.0 - LOG_CLIP).ln())
}
