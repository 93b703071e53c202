use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use super::mask::TargetMask;
use crate::error::{Error, Result};
use crate::pointcloud::ScenePair;

/// Step size of the iterative attack.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum StepSize {
    /// `2.5 * eps / iters`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Auto => s.serialize_str("auto"),
            StepSize::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = StepSize;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"auto\"")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<StepSize, E> {
                match v {
                    "auto" => Ok(StepSize::Auto),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<StepSize, E> {
                Ok(StepSize::Fixed(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<StepSize, E> {
                Ok(StepSize::Fixed(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<StepSize, E> {
                Ok(StepSize::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

/// Distribution of the random baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomMode {
    /// Uniform in `[-eps, eps]`.
    #[default]
    Uniform,
    /// `+eps` or `-eps` with equal probability.
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Random,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Random => "random",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "random" => Ok(AttackKind::Random),
            _ => Err(Error::Parse(format!("unknown attack '{s}'"))),
        }
    }
}

fn default_iters() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// L-infinity attack settings; `eps` is in raw stored units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Missing in JSON reads as 0, which only the `none` attack accepts.
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub alpha: StepSize,
    #[serde(rename = "target", default)]
    pub mask: TargetMask,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_true")]
    pub clamp_colors: bool,
    #[serde(default)]
    pub random_mode: RandomMode,
}

impl AttackConfig {
    pub fn new(eps: f64, iters: usize, mask: TargetMask) -> Self {
        AttackConfig {
            eps,
            iters,
            alpha: StepSize::Auto,
            mask,
            random_start: false,
            clamp_colors: true,
            random_mode: RandomMode::Uniform,
        }
    }

    pub fn resolved_alpha(&self) -> f64 {
        match self.alpha {
            StepSize::Auto => 2.5 * self.eps / self.iters as f64,
            StepSize::Fixed(a) => a,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Validation(format!("eps must be positive, got {}", self.eps)));
        }
        if self.iters == 0 {
            return Err(Error::Validation("iters must be at least 1".into()));
        }
        let a = self.resolved_alpha();
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Validation(format!("alpha must be positive, got {a}")));
        }
        Ok(())
    }

    /// Settings and mask are valid, and the mask fits the pair.
    pub fn check(&self, pair: &ScenePair) -> Result<()> {
        self.validate()?;
        self.mask.check(pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Domain;

    #[test]
    fn auto_alpha() {
        let cfg = AttackConfig::new(2.0, 10, TargetMask::all(Domain::Positions));
        assert_eq!(cfg.resolved_alpha(), 0.5);
    }

    #[test]
    fn json_forms() {
        let cfg: AttackConfig = serde_json::from_str(r#"{"eps":0.1,"target":"dim=2"}"#).unwrap();
        assert_eq!((cfg.iters, cfg.alpha, cfg.clamp_colors), (1, StepSize::Auto, true));
        let cfg: AttackConfig =
            serde_json::from_str(r#"{"eps":1,"iters":3,"alpha":0.25,"target":"all-channels"}"#).unwrap();
        assert_eq!(cfg.alpha, StepSize::Fixed(0.25));
        let back: AttackConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<AttackConfig>(r#"{"eps":1,"target":"dim=7"}"#).is_err());
        assert!(serde_json::from_str::<AttackConfig>(r#"{"eps":1,"alpha":"big","target":"dim=0"}"#).is_err());
    }

    #[test]
    fn invalid_settings() {
        let m = TargetMask::all(Domain::Positions);
        assert!(AttackConfig::new(0.0, 1, m).validate().is_err());
        assert!(AttackConfig::new(f64::NAN, 1, m).validate().is_err());
        assert!(AttackConfig::new(0.1, 0, m).validate().is_err());
        let mut cfg = AttackConfig::new(0.1, 1, m);
        cfg.alpha = StepSize::Fixed(-1.0);
        assert!(cfg.validate().is_err());
    }
}
