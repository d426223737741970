use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-variable transform applied to raw survey estimates before modeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    #[default]
    Identity,
    Logit,
    Log,
}

impl TransformKind {
    /// Maps a modeled value back to the raw scale.
    pub fn inverse(self, z: f64) -> f64 {
        match self {
            TransformKind::Identity => z,
            TransformKind::Logit => 1.0 / (1.0 + (-z).exp()),
            TransformKind::Log => z.exp(),
        }
    }

    pub fn is_identity(self) -> bool {
        self == TransformKind::Identity
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "logit" => Ok(TransformKind::Logit),
            "log" => Ok(TransformKind::Log),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

/// Transforms a raw estimate and propagates its variance with the first-order delta method.
///
/// logit: `z = log(w / (1 - w))`, `v = raw_variance / (w (1 - w))^2`;
/// log: `z = log(w)`, `v = raw_variance / w^2`.
pub fn apply_transform(raw_value: f64, raw_variance: f64, kind: TransformKind) -> Result<(f64, f64)> {
    if !raw_value.is_finite() || !raw_variance.is_finite() {
        return Err(Error::NonFinite(format!(
            "transform input ({raw_value}, {raw_variance})"
        )));
    }
    match kind {
        TransformKind::Identity => Ok((raw_value, raw_variance)),
        TransformKind::Logit => {
            if !(raw_value > 0.0 && raw_value < 1.0) {
                return Err(Error::Validation(format!(
                    "logit transform requires a value in (0, 1), got {raw_value}"
                )));
            }
            let w = raw_value;
            let slope = w * (1.0 - w);
            Ok(((w / (1.0 - w)).ln(), raw_variance / (slope * slope)))
        }
        TransformKind::Log => {
            if raw_value <= 0.0 {
                return Err(Error::Validation(format!(
                    "log transform requires a positive value, got {raw_value}"
                )));
            }
            Ok((raw_value.ln(), raw_variance / (raw_value * raw_value)))
        }
    }
}
