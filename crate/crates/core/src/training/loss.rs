use ndarray::{Array4, ArrayView3, ArrayView4};

use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("quantile level {tau} outside (0, 1)")))
    }
}

/// `(y_hat - y) * (1[y <= y_hat] - tau)`
pub fn pinball_loss(y: f64, y_hat: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(pinball(y, y_hat, tau))
}

#[inline]
fn pinball(y: f64, y_hat: f64, tau: f64) -> f64 {
    let ind = if y <= y_hat { 1.0 } else { 0.0 };
    (y_hat - y) * (ind - tau)
}

/// Subgradient of [`pinball_loss`] with respect to `y_hat`; at the kink the
/// right derivative `1 - tau` is returned.
pub fn pinball_gradient(y: f64, y_hat: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(if y <= y_hat { 1.0 - tau } else { -tau })
}

/// Mean pinball loss of a sample, vectorized form of [`pinball_loss`].
pub fn mean_pinball_loss(y: &[f64], y_hat: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::Data(format!(
            "pinball loss needs equal nonempty samples, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| pinball(*a, *b, tau)).sum::<f64>() / y.len() as f64)
}

fn check_shapes(pred: &ArrayView4<f32>, truth: &ArrayView3<f32>, mask: &[bool], taus: &[f64]) -> Result<usize> {
    let (b, l, m, q) = pred.dim();
    if truth.dim() != (b, l, m) || mask.len() != l || taus.len() != q {
        return Err(Error::Layout(format!(
            "prediction {:?}, truth {:?}, mask {} and {} quantile levels are inconsistent",
            pred.dim(),
            truth.dim(),
            mask.len(),
            taus.len()
        )));
    }
    for &t in taus {
        check_tau(t)?;
    }
    let masked = mask.iter().filter(|m| **m).count();
    if masked == 0 {
        return Err(Error::Data("mask selects no steps".into()));
    }
    Ok(masked)
}

/// Mean over masked steps, batch and variables of the pinball loss summed
/// over quantile levels. Unmasked steps contribute nothing.
pub fn masked_quantile_loss(
    pred: ArrayView4<f32>,
    truth: ArrayView3<f32>,
    mask: &[bool],
    taus: &[f64],
) -> Result<f64> {
    let masked = check_shapes(&pred, &truth, mask, taus)?;
    let (b, l, m, _) = pred.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for t in (0..l).filter(|&t| mask[t]) {
            for j in 0..m {
                let y = truth[[bi, t, j]] as f64;
                for (qi, &tau) in taus.iter().enumerate() {
                    total += pinball(y, pred[[bi, t, j, qi]] as f64, tau);
                }
            }
        }
    }
    Ok(total / (b * masked * m) as f64)
}

/// [`masked_quantile_loss`] together with its gradient with respect to `pred`.
pub fn masked_quantile_loss_grad(
    pred: ArrayView4<f32>,
    truth: ArrayView3<f32>,
    mask: &[bool],
    taus: &[f64],
) -> Result<(f64, Array4<f32>)> {
    let masked = check_shapes(&pred, &truth, mask, taus)?;
    let (b, l, m, q) = pred.dim();
    let denom = (b * masked * m) as f64;
    let mut grad = Array4::zeros((b, l, m, q));
    let mut total = 0.0;
    for bi in 0..b {
        for t in (0..l).filter(|&t| mask[t]) {
            for j in 0..m {
                let y = truth[[bi, t, j]] as f64;
                for (qi, &tau) in taus.iter().enumerate() {
                    let yh = pred[[bi, t, j, qi]] as f64;
                    total += pinball(y, yh, tau);
                    let g = if y <= yh { 1.0 - tau } else { -tau };
                    grad[[bi, t, j, qi]] = (g / denom) as f32;
                }
            }
        }
    }
    Ok((total / denom, grad))
}
