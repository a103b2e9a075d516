use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projector::{ProjectionMode, RefreshSchedule, SubspacePolicy};

/// Compression applied to stored activations; `None` keeps them raw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressionMode {
    None,
    Pac,
    Rac,
    Prac,
}

impl CompressionMode {
    pub fn projection(self) -> Option<ProjectionMode> {
        match self {
            Self::None => None,
            Self::Pac => Some(ProjectionMode::Pac),
            Self::Rac => Some(ProjectionMode::Rac),
            Self::Prac => Some(ProjectionMode::Prac),
        }
    }
}

impl fmt::Display for CompressionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.projection() {
            None => f.write_str("none"),
            Some(p) => write!(f, "{}", p.to_string().to_ascii_lowercase()),
        }
    }
}

impl FromStr for CompressionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::None);
        }
        Ok(match s.parse::<ProjectionMode>()? {
            ProjectionMode::Pac => Self::Pac,
            ProjectionMode::Rac => Self::Rac,
            ProjectionMode::Prac => Self::Prac,
        })
    }
}

/// Whether an activation feeds a linear map or a pointwise/normalising one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Nonlinear,
}

/// Per-model compression settings.
///
/// Ranks are derived per activation width `w` from `base = floor(fraction * w)`:
/// PRAC uses `r1 = r2 = base`, while PAC and RAC put the whole budget
/// `2 * base` into their single subspace so all modes store the same number
/// of scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionPolicy {
    pub mode: CompressionMode,
    pub linear_rank_fraction: f64,
    pub nonlinear_rank_fraction: f64,
    pub principal_interval: u64,
    pub random_interval: u64,
    pub scale_multiplier: f64,
    pub seed: u64,
}

impl Default for CompressionPolicy {
    fn default() -> Self {
        Self {
            mode: CompressionMode::Prac,
            linear_rank_fraction: 0.3,
            nonlinear_rank_fraction: 0.2,
            principal_interval: 500,
            random_interval: 500,
            scale_multiplier: 1.0,
            seed: 0,
        }
    }
}

impl CompressionPolicy {
    pub fn uncompressed() -> Self {
        Self {
            mode: CompressionMode::None,
            ..Self::default()
        }
    }

    pub fn with_mode(mode: CompressionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("linear_rank_fraction", self.linear_rank_fraction),
            ("nonlinear_rank_fraction", self.nonlinear_rank_fraction),
        ] {
            if !(f > 0.0 && f <= 0.5) {
                return Err(Error::Parameter(format!(
                    "{name} must lie in (0, 0.5], got {f}"
                )));
            }
        }
        RefreshSchedule::new(self.principal_interval, self.random_interval)?;
        if !(self.scale_multiplier.is_finite() && self.scale_multiplier > 0.0) {
            return Err(Error::Parameter(format!(
                "scale_multiplier must be positive, got {}",
                self.scale_multiplier
            )));
        }
        Ok(())
    }

    pub fn fraction(&self, kind: LayerKind) -> f64 {
        match kind {
            LayerKind::Linear => self.linear_rank_fraction,
            LayerKind::Nonlinear => self.nonlinear_rank_fraction,
        }
    }

    /// `(r1, r2)` for an activation of width `width`, or `None` when uncompressed.
    pub fn ranks(&self, width: usize, kind: LayerKind) -> Result<Option<(usize, usize)>> {
        let Some(mode) = self.mode.projection() else {
            return Ok(None);
        };
        let fraction = self.fraction(kind);
        let base = (fraction * width as f64).floor() as usize;
        if base == 0 {
            return Err(Error::Parameter(format!(
                "rank fraction {fraction} gives rank 0 at width {width}"
            )));
        }
        Ok(Some(match mode {
            ProjectionMode::Prac => (base, base),
            ProjectionMode::Pac => (2 * base, 0),
            ProjectionMode::Rac => (0, 2 * base),
        }))
    }

    /// Projector settings for one activation key.
    pub fn subspace_policy(&self, width: usize, kind: LayerKind) -> Result<Option<SubspacePolicy>> {
        let Some((r1, r2)) = self.ranks(width, kind)? else {
            return Ok(None);
        };
        Ok(Some(SubspacePolicy {
            mode: self
                .mode
                .projection()
                .expect("ranks are only returned for projection modes"),
            r1,
            r2,
            schedule: RefreshSchedule::new(self.principal_interval, self.random_interval)?,
            scale_multiplier: self.scale_multiplier,
            seed: self.seed,
        }))
    }

    /// Scalars stored for an `rows x width` activation under this policy.
    pub fn stored_scalars(&self, rows: u64, width: usize, kind: LayerKind) -> Result<u64> {
        Ok(match self.ranks(width, kind)? {
            None => rows * width as u64,
            Some((r1, r2)) => rows * (r1 + r2) as u64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_total_rank_across_modes() {
        for mode in [
            CompressionMode::Pac,
            CompressionMode::Rac,
            CompressionMode::Prac,
        ] {
            let p = CompressionPolicy::with_mode(mode);
            let (r1, r2) = p.ranks(768, LayerKind::Linear).unwrap().unwrap();
            assert_eq!(r1 + r2, 460, "{mode}");
        }
        let p = CompressionPolicy::default();
        assert_eq!(p.ranks(768, LayerKind::Linear).unwrap(), Some((230, 230)));
        assert_eq!(p.ranks(100, LayerKind::Nonlinear).unwrap(), Some((20, 20)));
        assert_eq!(
            CompressionPolicy::uncompressed()
                .ranks(8, LayerKind::Linear)
                .unwrap(),
            None
        );
    }

    #[test]
    fn validation() {
        assert!(CompressionPolicy::default().validate().is_ok());
        let bad = CompressionPolicy {
            linear_rank_fraction: 0.6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CompressionPolicy {
            principal_interval: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(CompressionPolicy::default()
            .ranks(3, LayerKind::Linear)
            .is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "none".parse::<CompressionMode>().unwrap(),
            CompressionMode::None
        );
        assert_eq!(
            "PRAC".parse::<CompressionMode>().unwrap(),
            CompressionMode::Prac
        );
        assert!("galore".parse::<CompressionMode>().is_err());
        assert_eq!(CompressionMode::Rac.to_string(), "rac");
    }
}
