use super::activation::sigmoid;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Mean binary cross-entropy of `sigmoid(logits)` against `targets`, computed
/// on the logits as `max(z, 0) - z·y + ln(1 + e^-|z|)`.
///
/// Returns the loss and its gradient w.r.t. each logit, `(p - y) / batch`.
pub fn bce_with_logits<T: Real>(logits: &[T], targets: &[T]) -> Result<(T, Vec<T>)> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = T::from_f64(logits.len() as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        total = total + bce_term(z, y);
        grad.push((sigmoid(z) - y) / n);
    }
    Ok((total / n, grad))
}

/// Per-sample loss on one logit.
#[inline]
pub fn bce_term<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean BCE on probabilities; used for reporting and the tests. Callers
/// training a network use [`bce_with_logits`].
pub fn bce_on_probabilities(p: &[f64], y: &[f64]) -> f64 {
    let eps = 1e-12;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / p.len() as f64
}
