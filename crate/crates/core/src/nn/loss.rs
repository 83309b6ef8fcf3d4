use crate::error::{config, Result};
use crate::tensor::Tensor2;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Binary cross-entropy of one probability/label pair.
#[inline]
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1.0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Checks that `mask` is a non-empty set of distinct column indices.
pub fn validate_mask(mask: &[usize], cols: usize) -> Result<()> {
    if mask.is_empty() {
        return config("loss mask must contain at least one class");
    }
    let mut seen = vec![false; cols];
    for &c in mask {
        if c >= cols {
            return config(format!("mask column {c} out of range for {cols} columns"));
        }
        if std::mem::replace(&mut seen[c], true) {
            return config(format!("mask column {c} listed twice"));
        }
    }
    Ok(())
}

/// Mean over samples of the BCE summed over `mask`, divided by `|mask|`.
///
/// Columns outside `mask` do not contribute. With a full mask this is the
/// ordinary mean BCE.
pub fn masked_bce_loss(p: &Tensor2, y: &Tensor2, mask: &[usize]) -> Result<f64> {
    if p.shape() != y.shape() {
        return config(format!(
            "prediction shape {:?} differs from label shape {:?}",
            p.shape(),
            y.shape()
        ));
    }
    validate_mask(mask, p.cols())?;
    if p.rows() == 0 {
        return config("loss over an empty batch");
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return config("labels must be 0 or 1");
    }
    let mut total = 0.0;
    for r in 0..p.rows() {
        let (pr, yr) = (p.row(r), y.row(r));
        let mut sample = 0.0;
        for &c in mask {
            sample += bce_term(pr[c], yr[c]);
        }
        total += sample;
    }
    Ok(total / p.rows() as f64 / mask.len() as f64)
}
