use crate::error::{dim_err, param_err, Result};

/// Sum of per-class binary hinge losses `Σ_k max(0, 1 − y_k·s_k)` and its
/// gradient with respect to the scores. Labels must be ±1.
pub fn hinge_loss(scores: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(param_err!("hinge labels must be -1 or +1, got {bad}"));
    }
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let margin = y * s;
            // NaN scores count as violations so divergence surfaces in the loss.
            if margin >= 1.0 {
                0.0
            } else {
                loss += 1.0 - margin;
                -y
            }
        })
        .collect();
    Ok((loss, grad))
}
