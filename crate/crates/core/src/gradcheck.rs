//! Central finite-difference check of autodiff gradients, in double precision.

use tch::{Kind, Tensor};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` in the L2 norm.
    pub relative_error: f64,
}

impl GradientReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.analytic_norm > 0.0 && self.relative_error <= tol
    }
}

/// Compares `d f / d x` at `x0` (shape `shape`) with central differences of step `h`.
/// `f` must return a scalar.
pub fn check(f: impl Fn(&Tensor) -> Tensor, x0: &[f64], shape: &[i64], h: f64) -> Result<GradientReport> {
    let x = Tensor::from_slice(x0).view(shape).set_requires_grad(true);
    let out = f(&x);
    let grad = if out.requires_grad() {
        Tensor::f_run_backward(&[&out], &[&x], false, false)?.remove(0)
    } else {
        x.zeros_like()
    };
    let analytic = Vec::<f64>::try_from(&grad.to_kind(Kind::Double).view([-1]))?;
    let mut numeric = vec![0.0; x0.len()];
    tch::no_grad(|| {
        let mut probe = x0.to_vec();
        for (i, g) in numeric.iter_mut().enumerate() {
            probe[i] = x0[i] + h;
            let fp = f(&Tensor::from_slice(&probe).view(shape)).double_value(&[]);
            probe[i] = x0[i] - h;
            let fm = f(&Tensor::from_slice(&probe).view(shape)).double_value(&[]);
            probe[i] = x0[i];
            *g = (fp - fm) / (2.0 * h);
        }
    });
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let (na, nn) = (norm(&analytic), norm(&numeric));
    Ok(GradientReport {
        analytic_norm: na,
        numeric_norm: nn,
        relative_error: norm(&diff) / na.max(nn).max(1e-300),
    })
}
