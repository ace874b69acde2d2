//! Experiment configuration: a single TOML file describing the mixture,
//! schedule, integrator, pool, trainer, prediction and filter settings.
//! The config digest is the SHA-256 of the canonicalized (re-serialized)
//! config, so formatting and comments do not affect identity.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{IntegrationMethod, IntegratorSpec};
use crate::gmm::{MixtureModel, NoiseSchedule};
use crate::learn::MlpHyper;
use crate::pool::Sampler;
use crate::presets;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub mixture: MixtureConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub predict: PredictConfig,
    #[serde(default)]
    pub filter: FilterConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub dim: usize,
    pub classes: usize,
    pub components: Vec<ComponentConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Full matrix or scalar·I shorthand.
    pub covariance: CovarianceConfig,
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceConfig {
    Scalar(f64),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// "constant" (uses `beta`) or "linear" (uses `beta_start`/`beta_end`).
    pub form: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: String,
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: "rk4".into(),
            steps: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    pub size: usize,
    pub levels: usize,
    pub test_fraction: f64,
    pub sampler: String,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            size: 20_000,
            levels: 10,
            test_fraction: 0.2,
            sampler: "ddim".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictConfig {
    pub fresh_seeds: usize,
    pub bins: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            fresh_seeds: 5_100,
            bins: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterConfig {
    pub target_class: usize,
    /// None: use the pool's level-1/level-2 confidence boundary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub max_draws: usize,
    pub requested: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            target_class: 0,
            threshold: None,
            max_draws: 200_000,
            requested: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialization failed: {e}")))
    }

    /// SHA-256 hex digest of the canonicalized config.
    pub fn digest(&self) -> Result<String> {
        let canonical = self.to_toml()?;
        let hash = Sha256::digest(canonical.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn build_mixture(&self) -> Result<MixtureModel> {
        let d = self.mixture.dim;
        let mut components = Vec::with_capacity(self.mixture.components.len());
        let mut class_of = Vec::with_capacity(self.mixture.components.len());
        for (k, c) in self.mixture.components.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::Config(format!(
                    "component {k}: mean has {} entries, mixture dim is {d}",
                    c.mean.len()
                )));
            }
            let cov = match &c.covariance {
                CovarianceConfig::Scalar(s) => DMatrix::identity(d, d) * *s,
                CovarianceConfig::Full(rows) => {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        return Err(Error::Config(format!(
                            "component {k}: covariance is not {d}×{d}"
                        )));
                    }
                    DMatrix::from_fn(d, d, |i, j| rows[i][j])
                }
            };
            components.push((c.weight, DVector::from_vec(c.mean.clone()), cov));
            class_of.push(c.class);
        }
        MixtureModel::new(components, class_of, self.mixture.classes)
            .map_err(|e| Error::Config(format!("mixture: {e}")))
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        match s.form.as_str() {
            "constant" => {
                let beta = s.beta.ok_or_else(|| {
                    Error::Config("constant schedule needs `beta`".into())
                })?;
                NoiseSchedule::constant(beta, s.horizon)
            }
            "linear" => {
                let (b0, b1) = (
                    s.beta_start
                        .ok_or_else(|| Error::Config("linear schedule needs `beta_start`".into()))?,
                    s.beta_end
                        .ok_or_else(|| Error::Config("linear schedule needs `beta_end`".into()))?,
                );
                NoiseSchedule::linear(b0, b1, s.horizon)
            }
            other => Err(Error::Config(format!(
                "unknown schedule form {other:?} (expected constant|linear)"
            ))),
        }
    }

    pub fn build_integrator(&self) -> Result<IntegratorSpec> {
        let method = match self.integrator.method.as_str() {
            "rk4" => IntegrationMethod::Rk4,
            "euler" => IntegrationMethod::Euler,
            other => {
                return Err(Error::Config(format!(
                    "unknown integrator method {other:?} (expected rk4|euler)"
                )))
            }
        };
        IntegratorSpec::new(method, self.integrator.steps)
    }

    pub fn sampler(&self) -> Result<Sampler> {
        match self.pool.sampler.as_str() {
            "ddim" => Ok(Sampler::Ddim),
            // the DDPM noise stream derives from the master seed; its
            // substreams are domain-separated from the seed draws
            "ddpm" => Ok(Sampler::Ddpm {
                noise_seed: self.master_seed,
            }),
            other => Err(Error::Config(format!(
                "unknown sampler {other:?} (expected ddim|ddpm)"
            ))),
        }
    }

    pub fn mlp_hyper(&self) -> Result<MlpHyper> {
        if self.trainer.hidden.len() != 2 {
            return Err(Error::Config(format!(
                "trainer.hidden must list 2 widths, got {}",
                self.trainer.hidden.len()
            )));
        }
        Ok(MlpHyper {
            hidden: (self.trainer.hidden[0], self.trainer.hidden[1]),
            batch_size: self.trainer.batch_size,
            learning_rate: self.trainer.learning_rate,
            epochs: self.trainer.epochs,
        })
    }

    /// The stock reference experiment: 5 classes, 8 dimensions, means on the
    /// radius-2.5 sphere, master seed 42.
    pub fn reference() -> Self {
        let mixture = presets::reference_mixture();
        let components = mixture
            .components()
            .iter()
            .enumerate()
            .map(|(k, c)| ComponentConfig {
                weight: c.weight(),
                mean: c.mean().iter().copied().collect(),
                covariance: CovarianceConfig::Scalar(1.0),
                class: mixture.class_of(k),
            })
            .collect();
        Self {
            master_seed: presets::REFERENCE_SEED,
            mixture: MixtureConfig {
                dim: mixture.dim(),
                classes: mixture.num_classes(),
                components,
            },
            schedule: ScheduleConfig {
                form: "linear".into(),
                beta: None,
                beta_start: Some(0.1),
                beta_end: Some(20.0),
                horizon: 1.0,
            },
            integrator: IntegratorConfig::default(),
            pool: PoolConfig::default(),
            trainer: TrainerConfig::default(),
            predict: PredictConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}
