//! Experiment configuration files (TOML, or JSON by extension).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_csv, CirclesParams, DataSource, TeacherSpec};
use crate::error::{PdaError, Result};
use crate::pda::{RunConfig, RunData};
use crate::potential::RiskMode;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Pda,
    NoisySgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Teacher,
    Circles,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Training-set size. Without it, generators stream fresh samples.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub circles: CirclesParams,
    /// Dataset file for `kind = "csv"`.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateFitConfig {
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_margin")]
    pub floor_margin: f64,
}

fn default_burn_in() -> f64 {
    0.2
}

fn default_margin() -> f64 {
    1e-6
}

impl Default for RateFitConfig {
    fn default() -> Self {
        RateFitConfig {
            burn_in: default_burn_in(),
            floor_margin: default_margin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub algorithm: Algorithm,
    /// Explicit replicate seeds; overrides `replicates`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Number of replicates seeded `run.seed, run.seed + 1, ...`.
    #[serde(default = "one")]
    pub replicates: usize,
    /// Held-out examples for test metrics (0 disables them).
    #[serde(default)]
    pub test_size: usize,
    /// Write `ensemble_t<k>.csv` for every kept snapshot.
    #[serde(default)]
    pub write_snapshots: bool,
    #[serde(default)]
    pub rate_fit: Option<RateFitConfig>,
    pub run: RunConfig,
    pub data: DataConfig,
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| PdaError::InvalidConfig(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| PdaError::InvalidConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(PdaError::InvalidConfig(format!(
                "name must be a non-empty single path component, got {:?}",
                self.name
            )));
        }
        if self.replicates == 0 {
            return Err(PdaError::InvalidConfig("replicates must be >= 1".into()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(PdaError::InvalidConfig("seeds must not be empty".into()));
            }
        }
        if let Some(rf) = &self.rate_fit {
            if !(0.0..1.0).contains(&rf.burn_in) {
                return Err(PdaError::InvalidConfig(
                    "rate_fit.burn_in must lie in [0, 1)".into(),
                ));
            }
        }
        match self.data.kind {
            DataKind::Csv if self.data.path.is_none() => {
                return Err(PdaError::InvalidConfig(
                    "data.path is required for kind = \"csv\"".into(),
                ))
            }
            DataKind::Teacher => self.data.teacher.validate(self.run.model.input_dim)?,
            DataKind::Circles => {
                self.data.circles.validate()?;
                if self.run.model.input_dim != 2 {
                    return Err(PdaError::InvalidConfig(
                        "circles data needs model.input_dim = 2".into(),
                    ));
                }
            }
            DataKind::Csv => {}
        }
        self.run.validate()
    }

    /// Seeds of all replicates.
    pub fn replicate_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.replicates as u64)
                .map(|i| self.run.seed + i)
                .collect(),
        }
    }

    /// Build the training source and test set for a run seeded with `data_seed`.
    ///
    /// Relative CSV paths resolve against `base_dir`.
    pub fn build_data(&self, data_seed: u64, base_dir: &Path) -> Result<RunData> {
        let d = self.run.model.input_dim;
        let mut teacher_rng = rng::stream(data_seed, Domain::Teacher, 0, 0);
        let mut eval_rng = rng::stream(data_seed, Domain::Eval, 1, 0);
        let generator = match self.data.kind {
            DataKind::Teacher => Some(DataSource::Teacher(
                self.data.teacher.instantiate(d, &mut teacher_rng)?,
            )),
            DataKind::Circles => Some(DataSource::Circles(self.data.circles)),
            DataKind::Csv => None,
        };
        let (source, test) = match generator {
            Some(gen) => {
                let test = (self.test_size > 0).then(|| {
                    gen.generate(self.test_size, &mut eval_rng)
                        .expect("generator")
                });
                let source = match self.data.n {
                    Some(n) => {
                        let mut train_rng = rng::stream(data_seed, Domain::Data, 0, 1);
                        DataSource::Finite(gen.generate(n, &mut train_rng).expect("generator"))
                    }
                    None => gen,
                };
                (source, test)
            }
            None => {
                let rel = self.data.path.as_ref().expect("validated");
                let path = if rel.is_absolute() {
                    rel.clone()
                } else {
                    base_dir.join(rel)
                };
                let full = load_csv(&path)?;
                if full.dim() != d {
                    return Err(PdaError::DimensionMismatch {
                        expected: d,
                        got: full.dim(),
                    });
                }
                if self.test_size > 0 {
                    let (train, test) = full.split(self.test_size, &mut eval_rng)?;
                    (DataSource::Finite(train), Some(test))
                } else {
                    (DataSource::Finite(full), None)
                }
            }
        };
        if self.run.risk_mode == RiskMode::Empirical && !matches!(source, DataSource::Finite(_)) {
            return Err(PdaError::InvalidConfig(
                "risk_mode = \"empirical\" needs data.n (or a csv dataset)".into(),
            ));
        }
        Ok(RunData { source, test })
    }
}
