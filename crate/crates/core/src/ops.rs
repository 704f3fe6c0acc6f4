//! Value-level probability and normalization primitives.
//!
//! These are the kernels behind the corresponding [`crate::Graph`] nodes,
//! exposed for evaluation code that does not need gradients.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Floor applied to norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

/// Row-wise softmax of `logits / temperature` over the last axis,
/// max-subtracted for stability.
pub fn softmax(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain(format!("temperature must be positive, got {temperature}")));
    }
    logits.ensure_finite("softmax logits")?;
    let m = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Batch sum of `-Σ_j target_j · ln(max(pred_j, eps))`.
pub fn cross_entropy_eps(target: &Tensor, pred: &Tensor, eps: f64) -> Result<f64> {
    check_pair(target, pred, "cross_entropy")?;
    Ok(-target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * p.max(eps).ln() })
        .sum::<f64>())
}

/// Batch sum of the cross-entropy between probability rows.
pub fn cross_entropy(target: &Tensor, pred: &Tensor) -> Result<f64> {
    cross_entropy_eps(target, pred, LOG_EPS)
}

/// Batch sum of row entropies `-Σ p ln p` (with `0 ln 0 = 0`).
pub fn entropy(p: &Tensor) -> f64 {
    -p.data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.max(LOG_EPS).ln())
        .sum::<f64>()
}

/// Per-row KL divergences `KL(target ‖ pred)`.
pub fn kl_rows(target: &Tensor, pred: &Tensor) -> Result<Vec<f64>> {
    check_pair(target, pred, "kl")?;
    let m = target.last_dim();
    Ok(target
        .data()
        .chunks_exact(m)
        .zip(pred.data().chunks_exact(m))
        .map(|(t, p)| {
            t.iter()
                .zip(p)
                .filter(|(&ti, _)| ti > 0.0)
                .map(|(&ti, &pi)| ti * (ti.max(LOG_EPS).ln() - pi.max(LOG_EPS).ln()))
                .sum()
        })
        .collect())
}

/// Mean row KL divergence.
pub fn mean_kl(target: &Tensor, pred: &Tensor) -> Result<f64> {
    let rows = kl_rows(target, pred)?;
    Ok(rows.iter().sum::<f64>() / rows.len().max(1) as f64)
}

/// `x / max(‖x‖₂, eps)` along the last axis.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Tensor {
    let k = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let n = kernels::norm2(row).max(eps);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Rescales every column of a `[k, m]` matrix to unit norm.
pub fn weight_normalize(v: &Tensor) -> Result<Tensor> {
    let mut g = crate::Graph::new();
    let x = g.constant(v.clone());
    let y = g.normalize_columns(x, NORM_EPS)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_hand_values() {
        let p = softmax(&row(&[7.5; 4]), 1.0).unwrap();
        for v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let p = softmax(&row(&[0.0, 3f64.ln()]), 1.0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
        let a = softmax(&row(&[2.0, 4.0]), 2.0).unwrap();
        let b = softmax(&row(&[1.0, 2.0]), 1.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(softmax(&row(&[0.0, 1.0]), 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax(&row(&[0.0, 1.0]), -1.0), Err(Error::Domain(_))));
        assert!(matches!(
            softmax(&row(&[0.0, f64::INFINITY]), 1.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cross_entropy_hand_values() {
        let one_hot = row(&[0.0, 1.0, 0.0]);
        assert_eq!(cross_entropy(&one_hot, &one_hot).unwrap(), 0.0);
        let half = row(&[0.5, 0.5]);
        let ce = cross_entropy(&half, &half).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ce - entropy(&half)).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&half, &one_hot),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn l2_normalize_hand_values() {
        let y = l2_normalize(&row(&[3.0, 4.0]), NORM_EPS);
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        let u = row(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&u, NORM_EPS), u);
        let z = l2_normalize(&row(&[0.0, 0.0]), NORM_EPS);
        assert_eq!(z.data(), &[0.0, 0.0]);
    }

    #[test]
    fn weight_normalize_columns() {
        let v = Tensor::new(vec![2, 2], vec![2.0, 0.6, 0.0, 0.8]).unwrap();
        let w = weight_normalize(&v).unwrap();
        assert_eq!(w.data(), &[1.0, 0.6, 0.0, 0.8]);
        let again = weight_normalize(&w).unwrap();
        assert!(again.max_abs_diff(&w) < 1e-15);
    }
}
