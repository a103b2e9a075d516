//! Experiment configuration: one JSON document with a section per command.

use std::path::{Path, PathBuf};

use prac_core::estimator::matrix_with_spectrum;
use prac_core::ledger::ArchSpec;
use prac_core::linalg::sample_gaussian;
use prac_core::projector::ProjectionMode;
use prac_core::train::demos::BoundedVarianceParams;
use prac_core::train::{CompressionPolicy, TrainConfig};
use prac_core::Matrix;
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUTPUT_DIR: &str = "prac-out";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every random stream in a run is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Monte Carlo trials for `estimator-test` and `projector-moment`.
    pub trials: usize,
    /// Optimizer steps for `train` and `k-sweep`.
    pub steps: u64,
    pub policy: CompressionPolicy,
    pub train: TrainConfig,
    pub arch: ArchSpec,
    /// Bytes per scalar for the byte view of `memory-report`; 0 disables it.
    pub element_bytes: u64,
    pub profile: ProfileSection,
    pub estimator: EstimatorSection,
    pub projector_moment: ProjectorMomentSection,
    pub counterexample: CounterexampleSection,
    pub sgd_bound: SgdBoundSection,
    pub k_sweep: KSweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from(DEFAULT_OUTPUT_DIR),
            trials: 20_000,
            steps: 2000,
            policy: CompressionPolicy::default(),
            train: TrainConfig::default(),
            arch: ArchSpec {
                batch: 8,
                seq_len: 8,
                width: 20,
                hidden: 40,
                heads: 4,
                layers: 1,
            },
            element_bytes: 2,
            profile: ProfileSection::default(),
            estimator: EstimatorSection::default(),
            projector_moment: ProjectorMomentSection::default(),
            counterexample: CounterexampleSection::default(),
            sgd_bound: SgdBoundSection::default(),
            k_sweep: KSweepSection::default(),
        }
    }
}

/// A matrix to analyse, described inline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MatrixFixture {
    Diag {
        values: Vec<f64>,
    },
    Dense {
        rows: Vec<Vec<f64>>,
    },
    Gaussian {
        rows: usize,
        cols: usize,
        seed: u64,
    },
    /// `A diag(sigma) B^T` with random orthonormal `A`, `B`.
    Spectrum {
        rows: usize,
        cols: usize,
        sigma: Vec<f64>,
        seed: u64,
    },
}

impl MatrixFixture {
    pub fn build(&self) -> Result<Matrix, String> {
        match self {
            Self::Diag { values } => Ok(Matrix::diag(values)),
            Self::Dense { rows } => Matrix::from_rows(rows).map_err(|e| e.to_string()),
            Self::Gaussian { rows, cols, seed } => Ok(sample_gaussian(*rows, *cols, *seed)),
            Self::Spectrum {
                rows,
                cols,
                sigma,
                seed,
            } => {
                if sigma.len() > (*rows).min(*cols) {
                    return Err("spectrum is longer than min(rows, cols)".into());
                }
                Ok(matrix_with_spectrum(*rows, *cols, sigma, *seed))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Diag { values } => format!("diag{values:?}"),
            Self::Dense { rows } => {
                format!("dense{}x{}", rows.len(), rows.first().map_or(0, Vec::len))
            }
            Self::Gaussian { rows, cols, seed } => format!("gaussian{rows}x{cols}#{seed}"),
            Self::Spectrum {
                rows, cols, seed, ..
            } => format!("spectrum{rows}x{cols}#{seed}"),
        }
    }
}

fn diag_fixture() -> MatrixFixture {
    MatrixFixture::Diag {
        values: vec![10.0, 1.0, 1.0, 1.0],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub matrix: MatrixFixture,
    /// Head count `s`.
    pub head: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let mut sigma = vec![100.0, 50.0];
        sigma.extend(std::iter::repeat_n(1.0, 62));
        Self {
            matrix: MatrixFixture::Spectrum {
                rows: 64,
                cols: 64,
                sigma,
                seed: 1,
            },
            head: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorCell {
    pub matrix: MatrixFixture,
    pub mode: ProjectionMode,
    pub r1: usize,
    pub r2: usize,
    /// Columns of a random output gradient; enables the gradient check.
    #[serde(default)]
    pub gradient_cols: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub cells: Vec<EstimatorCell>,
    /// Standard errors allowed for entrywise means.
    pub entry_z: f64,
    /// Standard errors allowed between empirical and closed-form mse.
    pub mse_z: f64,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let cell = |matrix: MatrixFixture, mode, r1, r2, gradient_cols| EstimatorCell {
            matrix,
            mode,
            r1,
            r2,
            gradient_cols,
        };
        Self {
            cells: vec![
                cell(diag_fixture(), ProjectionMode::Prac, 1, 1, Some(2)),
                cell(diag_fixture(), ProjectionMode::Rac, 0, 2, Some(2)),
                cell(diag_fixture(), ProjectionMode::Pac, 2, 0, None),
                cell(
                    MatrixFixture::Gaussian {
                        rows: 16,
                        cols: 16,
                        seed: 3,
                    },
                    ProjectionMode::Prac,
                    2,
                    4,
                    Some(3),
                ),
            ],
            entry_z: 5.0,
            mse_z: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentCase {
    pub dim: usize,
    pub r1: usize,
    pub r2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorMomentSection {
    pub cases: Vec<MomentCase>,
    pub entry_z: f64,
}

impl Default for ProjectorMomentSection {
    fn default() -> Self {
        Self {
            cases: vec![
                MomentCase {
                    dim: 4,
                    r1: 1,
                    r2: 1,
                },
                MomentCase {
                    dim: 16,
                    r1: 4,
                    r2: 6,
                },
            ],
            entry_z: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterexampleSection {
    /// Steps of the biased and maximum-selection runs.
    pub steps: u64,
    /// Step sizes are `lr_scale / (t + 1)`.
    pub lr_scale: f64,
    pub start: [f64; 2],
    pub max_selection_start: [f64; 2],
    pub unbiased_steps: u64,
    pub unbiased_lr_scale: f64,
    /// Gradient-norm level the unbiased run must reach.
    pub threshold: f64,
}

impl Default for CounterexampleSection {
    fn default() -> Self {
        Self {
            steps: 100_000,
            lr_scale: 0.1,
            start: [1.0, 1.0],
            max_selection_start: [0.0, 1.0],
            unbiased_steps: 10_000,
            unbiased_lr_scale: 0.5,
            threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdBoundSection {
    pub grid: Vec<BoundedVarianceParams>,
    /// Seeded runs per grid point.
    pub runs: u64,
}

impl Default for SgdBoundSection {
    fn default() -> Self {
        let p = |smoothness, initial_gap, noise, steps| BoundedVarianceParams {
            smoothness,
            initial_gap,
            noise,
            steps,
            dim: 8,
        };
        Self {
            grid: vec![
                p(1.0, 1.0, 0.0, 100),
                p(1.0, 1.0, 0.5, 200),
                p(4.0, 2.0, 1.0, 500),
                p(0.5, 10.0, 2.0, 1000),
                p(10.0, 0.5, 0.1, 400),
            ],
            runs: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KSweepSection {
    pub multipliers: Vec<f64>,
}

impl Default for KSweepSection {
    fn default() -> Self {
        Self {
            multipliers: vec![1.0, 0.5, 0.2, 1.2],
        }
    }
}

/// A configuration problem reported with the line it refers to.
#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Raw text of the config file, kept to attribute errors to lines.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub source: Option<(PathBuf, String)>,
}

pub fn load(path: Option<&Path>) -> Result<LoadedConfig, ConfigError> {
    let Some(path) = path else {
        return Ok(LoadedConfig {
            config: ExperimentConfig::default(),
            source: None,
        });
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        message: format!("{}: cannot read config: {e}", path.display()),
    })?;
    let config = serde_json::from_str(&text).map_err(|e| ConfigError {
        message: format!(
            "{}:{}:{}: {}",
            path.display(),
            e.line(),
            e.column(),
            strip_position(&e.to_string())
        ),
    })?;
    Ok(LoadedConfig {
        config,
        source: Some((path.to_path_buf(), text)),
    })
}

fn strip_position(message: &str) -> &str {
    message
        .rsplit_once(" at line ")
        .map_or(message, |(head, _)| head)
}

impl LoadedConfig {
    /// A semantic error inside `section`, located at the most specific key
    /// the message names (falling back to the section key itself).
    pub fn error_in(&self, section: &str, message: impl std::fmt::Display) -> ConfigError {
        let message = message.to_string();
        let location = match &self.source {
            Some((path, text)) => {
                let from = key_line(text, section, 0);
                let line = from
                    .and_then(|start| {
                        identifiers(&message).find_map(|word| key_line(text, word, start - 1))
                    })
                    .or(from);
                match line {
                    Some(line) => format!("{}:{line}", path.display()),
                    None => format!("{} (default `{section}`)", path.display()),
                }
            }
            None => format!("<defaults> (`{section}`)"),
        };
        ConfigError {
            message: format!("{location}: {message}"),
        }
    }
}

fn identifiers(message: &str) -> impl Iterator<Item = &str> {
    message
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
}

/// 1-based line of the first `"key":` at or after 0-based line `from`.
fn key_line(text: &str, key: &str, from: usize) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().enumerate().skip(from).find_map(|(i, line)| {
        let at = line.find(&needle)?;
        line[at + needle.len()..]
            .trim_start()
            .starts_with(':')
            .then_some(i + 1)
    })
}
