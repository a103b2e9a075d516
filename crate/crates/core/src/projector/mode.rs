use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which subspaces a projection basis carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Principal subspace only (top right singular vectors). Biased.
    Pac,
    /// Random subspace only, scaled by `n / r2`.
    Rac,
    /// Principal plus random complement, random part scaled by `(n - r1) / r2`.
    Prac,
}

impl ProjectionMode {
    pub const ALL: [ProjectionMode; 3] = [Self::Pac, Self::Rac, Self::Prac];

    /// Checks the rank pattern each mode requires and that `r1 + r2 <= n`.
    pub fn validate_ranks(self, n: usize, r1: usize, r2: usize) -> Result<()> {
        let ok = match self {
            Self::Pac => r1 >= 1 && r2 == 0,
            Self::Rac => r1 == 0 && r2 >= 1,
            Self::Prac => r1 >= 1 && r2 >= 1,
        };
        if !ok {
            let need = match self {
                Self::Pac => "r1 >= 1 and r2 = 0",
                Self::Rac => "r1 = 0 and r2 >= 1",
                Self::Prac => "r1 >= 1 and r2 >= 1",
            };
            return Err(Error::Parameter(format!(
                "{self} requires {need}, got r1 = {r1}, r2 = {r2}"
            )));
        }
        if r1 + r2 > n {
            return Err(Error::Parameter(format!(
                "r1 + r2 = {} exceeds the activation width {n}",
                r1 + r2
            )));
        }
        Ok(())
    }

    /// Unbiasing scale applied to the random component, times `multiplier`.
    ///
    /// PAC has no random component; its scale is reported as 1.
    pub fn scaling(self, n: usize, r1: usize, r2: usize, multiplier: f64) -> f64 {
        match self {
            Self::Pac => 1.0,
            Self::Rac => multiplier * n as f64 / r2 as f64,
            Self::Prac => multiplier * (n - r1) as f64 / r2 as f64,
        }
    }
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pac => "PAC",
            Self::Rac => "RAC",
            Self::Prac => "PRAC",
        })
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pac" => Ok(Self::Pac),
            "rac" => Ok(Self::Rac),
            "prac" => Ok(Self::Prac),
            other => Err(Error::Parameter(format!(
                "unknown projection mode `{other}`"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_patterns() {
        assert!(ProjectionMode::Pac.validate_ranks(8, 3, 0).is_ok());
        assert!(ProjectionMode::Pac.validate_ranks(8, 3, 1).is_err());
        assert!(ProjectionMode::Rac.validate_ranks(8, 0, 3).is_ok());
        assert!(ProjectionMode::Rac.validate_ranks(8, 1, 3).is_err());
        assert!(ProjectionMode::Prac.validate_ranks(8, 3, 5).is_ok());
        // k would be undefined, so PRAC never degrades to PAC.
        assert!(ProjectionMode::Prac.validate_ranks(8, 3, 0).is_err());
        assert!(ProjectionMode::Prac.validate_ranks(8, 4, 5).is_err());
    }

    #[test]
    fn scaling_factors() {
        assert_eq!(
            ProjectionMode::Prac.scaling(768, 230, 230, 1.0),
            538.0 / 230.0
        );
        assert_eq!(ProjectionMode::Prac.scaling(8, 3, 5, 1.0), 1.0);
        assert_eq!(ProjectionMode::Rac.scaling(10, 0, 5, 1.0), 2.0);
        assert_eq!(ProjectionMode::Prac.scaling(4, 1, 1, 0.5), 1.5);
    }
}
