//! Evaluation metrics: Dice similarity, IoU, mean IoU over an evaluation
//! set, classification accuracy and confusion counts.

use serde::{Deserialize, Serialize};

use crate::dataio::LesionClass;
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor4};

/// Structured evaluation record. Segmentation runs fill `dice`/`miou`,
/// classification runs fill `accuracy`/`confusion`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub dice: Option<f64>,
    pub miou: Option<f64>,
    pub accuracy: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
    pub n_samples: usize,
    pub config_digest: String,
}

impl MetricsReport {
    /// Report convention: value × 100 to two decimals.
    pub fn percent(value: f64) -> String {
        format!("{:.2}", value * 100.0)
    }
}

fn check_binary_pair(p: &Tensor4, g: &Tensor4) -> Result<()> {
    if p.dim() != g.dim() {
        return Err(Error::shape(shape_str(g), shape_str(p)));
    }
    for v in p.iter().chain(g.iter()) {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Other(format!("non-binary mask value {v}")));
        }
    }
    Ok(())
}

fn counts(p: &Tensor4, g: &Tensor4) -> (usize, usize, usize) {
    let mut np = 0;
    let mut ng = 0;
    let mut inter = 0;
    for (a, b) in p.iter().zip(g.iter()) {
        if *a == 1.0 {
            np += 1;
        }
        if *b == 1.0 {
            ng += 1;
        }
        if *a == 1.0 && *b == 1.0 {
            inter += 1;
        }
    }
    (np, ng, inter)
}

/// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
pub fn dice_score(p: &Tensor4, g: &Tensor4) -> Result<f64> {
    check_binary_pair(p, g)?;
    let (np, ng, inter) = counts(p, g);
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + ng) as f64)
}

/// |P∩G| / |P∪G|; 1.0 when both masks are empty.
pub fn iou(p: &Tensor4, g: &Tensor4) -> Result<f64> {
    check_binary_pair(p, g)?;
    let (np, ng, inter) = counts(p, g);
    let union = np + ng - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Arithmetic mean of per-image foreground IoU.
pub fn mean_iou(pairs: &[(Tensor4, Tensor4)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Other("no samples".into()));
    }
    let mut total = 0.0;
    for (p, g) in pairs {
        total += iou(p, g)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Accuracy and confusion matrix; rows are ground truth, columns are
/// predictions.
pub fn classification_report(
    preds: &[LesionClass],
    truths: &[LesionClass],
    config_digest: &str,
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Other("no samples".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::shape(
            format!("{} predictions", truths.len()),
            format!("{}", preds.len()),
        ));
    }
    let k = LesionClass::ALL.len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut correct = 0;
    for (p, t) in preds.iter().zip(truths) {
        confusion[t.index()][p.index()] += 1;
        if p == t {
            correct += 1;
        }
    }
    Ok(MetricsReport {
        dice: None,
        miou: None,
        accuracy: Some(correct as f64 / preds.len() as f64),
        confusion: Some(confusion),
        n_samples: preds.len(),
        config_digest: config_digest.to_string(),
    })
}
