use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

/// Per-component sign restriction on `β`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConstraint {
    #[default]
    Free,
    NonNegative,
    NonPositive,
}

/// Soft thresholding of a scalar.
#[inline]
pub fn soft_threshold(z: f64, tau: f64) -> f64 {
    if z > tau {
        z - tau
    } else if z < -tau {
        z + tau
    } else {
        0.0
    }
}

#[inline]
pub fn soft_threshold_signed(z: f64, tau: f64, sign: SignConstraint) -> f64 {
    let s = soft_threshold(z, tau);
    match sign {
        SignConstraint::Free => s,
        SignConstraint::NonNegative => s.max(0.0),
        SignConstraint::NonPositive => s.min(0.0),
    }
}

/// Proximal map of `τ |·|₁`.
pub fn prox_l1(z: ArrayView1<'_, f64>, tau: f64) -> Array1<f64> {
    debug_assert!(tau >= 0.0);
    z.mapv(|x| soft_threshold(x, tau))
}

/// Proximal map of `τ |·|₁` plus the indicator of the sign constraints.
pub fn prox_l1_signed(z: ArrayView1<'_, f64>, tau: f64, signs: &[SignConstraint]) -> Array1<f64> {
    debug_assert_eq!(z.len(), signs.len());
    z.iter()
        .zip(signs)
        .map(|(&x, &s)| soft_threshold_signed(x, tau, s))
        .collect()
}
