//! Losses `l(z, y)` and their derivatives in the prediction `z`.

use serde::{Deserialize, Serialize};

use crate::error::{PdaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `0.5 (z - y)^2`
    Squared,
    /// `log(1 + exp(-y z))`
    Logistic,
    /// Piecewise quadratic hinge, `C^1` and 4-Lipschitz.
    SmoothedHinge,
}

impl LossKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, LossKind::Squared)
    }

    fn check_label(self, y: f64) -> Result<()> {
        if self.is_classification() && y != 1.0 && y != -1.0 {
            return Err(PdaError::InvalidLabel(y));
        }
        Ok(())
    }

    pub fn value(self, z: f64, y: f64) -> Result<f64> {
        self.check_label(y)?;
        Ok(match self {
            LossKind::Squared => 0.5 * (z - y) * (z - y),
            LossKind::Logistic => {
                // log1p(exp(-|m|)) + max(0, -m) with margin m = y z
                let m = y * z;
                (-m.abs()).exp().ln_1p() + (-m).max(0.0)
            }
            LossKind::SmoothedHinge => {
                let m = z * y;
                if m >= 0.5 {
                    0.0
                } else if m >= 0.0 {
                    (1.0 - 2.0 * m) * (1.0 - 2.0 * m)
                } else {
                    1.0 - 4.0 * m
                }
            }
        })
    }

    pub fn dz(self, z: f64, y: f64) -> Result<f64> {
        self.check_label(y)?;
        Ok(match self {
            LossKind::Squared => z - y,
            LossKind::Logistic => {
                let m = y * z;
                // -y / (1 + exp(m)), written to avoid overflow for large |m|
                if m >= 0.0 {
                    let e = (-m).exp();
                    -y * e / (1.0 + e)
                } else {
                    -y / (1.0 + m.exp())
                }
            }
            LossKind::SmoothedHinge => {
                let m = z * y;
                if m >= 0.5 {
                    0.0
                } else if m >= 0.0 {
                    -4.0 * y * (1.0 - 2.0 * m)
                } else {
                    -4.0 * y
                }
            }
        })
    }
}

/// `l(z, y)`.
pub fn loss_value(kind: LossKind, z: f64, y: f64) -> Result<f64> {
    kind.value(z, y)
}

/// `d l(z, y) / dz`.
pub fn loss_dz(kind: LossKind, z: f64, y: f64) -> Result<f64> {
    kind.dz(z, y)
}

/// Misclassification indicator. A prediction of exactly zero counts as an
/// error (the strict indicator `zy < 0` would count it as correct).
pub fn zero_one(z: f64, y: f64) -> f64 {
    if z * y > 0.0 {
        0.0
    } else {
        1.0
    }
}
