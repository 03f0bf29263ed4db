use crate::error::{Error, Result};

/// Compares an analytic gradient with central differences of `f` at `point`.
///
/// Returns the largest per-coordinate relative error
/// `|fd - analytic| / max(1, |fd|, |analytic|)`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::shape(format!(
            "analytic gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x = point[i];
        probe[i] = x + step;
        let plus = f(&probe);
        probe[i] = x - step;
        let minus = f(&probe);
        probe[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "function not finite around coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        let fd = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (fd - a).abs() / 1f64.max(fd.abs()).max(a.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let err = grad_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn linear_sum() {
        let p = [0.3, -1.2, 4.0, 7.5];
        let err = grad_check(|x| x.iter().sum(), &[1.0; 4], &p, 1e-5).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn quadratic_probe() {
        // f(x) = sum_i (i+1) x_i^2, gradient 2 (i+1) x_i
        let p: Vec<f64> = (0..6).map(|i| i as f64 * 0.7 - 1.5).collect();
        let g: Vec<f64> = p.iter().enumerate().map(|(i, x)| 2.0 * (i + 1) as f64 * x).collect();
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v * v)
                .sum()
        };
        assert!(grad_check(f, &g, &p, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = grad_check(|x| x[0] * x[0], &[5.0], &[3.0], 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_is_error() {
        let r = grad_check(|x| (x[0] - 1.0).ln(), &[1.0], &[1.0], 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn bad_step() {
        assert!(grad_check(|x| x[0], &[1.0], &[1.0], 0.0).is_err());
    }
}
