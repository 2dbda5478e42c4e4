use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, CrossMode, Variant};
use crate::error::{Error, Result};
use crate::netmodel::NetDims;
use crate::numkernel::Precision;
use crate::training::{OptimizerConfig, TaskSpec, TrainConfig};

/// Everything a run depends on. Unknown keys are rejected; missing keys
/// take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Defaults to `task_centric` for moka and `none` otherwise.
    pub cross_mode: Option<CrossMode>,
    pub rank: usize,
    pub lambdas: BTreeMap<String, f64>,
    pub extra_lambda: f64,
    pub text_lambda: f64,
    pub task: TaskSpec,
    pub network: NetDims,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub seeds: Vec<u64>,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            variant: Variant::Moka,
            cross_mode: None,
            rank: 4,
            lambdas: BTreeMap::new(),
            extra_lambda: 1.0,
            text_lambda: 1.0,
            task: TaskSpec::default(),
            network: NetDims::default(),
            optimizer: train.optimizer,
            steps: train.steps,
            batch_size: train.batch_size,
            eval_interval: train.eval_interval,
            eval_samples: train.eval_samples,
            seeds: vec![0, 1, 2],
            precision: Precision::F32,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn cross_mode(&self) -> CrossMode {
        self.cross_mode.clone().unwrap_or(if self.variant == Variant::Moka {
            CrossMode::TaskCentric
        } else {
            CrossMode::None
        })
    }

    /// Adapter spec of the run with the given seed.
    pub fn adapter_spec(&self, seed: u64) -> AdapterSpec {
        AdapterSpec {
            variant: self.variant,
            rank: self.rank,
            lambdas: self.lambdas.clone(),
            cross_mode: self.cross_mode(),
            extra_lambda: self.extra_lambda,
            text_lambda: self.text_lambda,
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            eval_interval: self.eval_interval,
            eval_samples: self.eval_samples,
            optimizer: self.optimizer,
        }
    }

    /// Same config with another adapter.
    pub fn with_adapter(&self, variant: Variant, cross_mode: CrossMode) -> Self {
        Self {
            variant,
            cross_mode: Some(cross_mode),
            ..self.clone()
        }
    }

    /// Directory name of the run, e.g. `lora` or `moka_task_centric`.
    pub fn run_name(&self) -> String {
        if self.variant == Variant::Moka {
            format!("moka_{}", self.cross_mode().label().replace(':', "-"))
        } else {
            self.variant.to_string()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.k != self.task.k {
            return Err(Error::Config(format!(
                "network.k = {} but task.k = {}",
                self.network.k, self.task.k
            )));
        }
        if self.network.classes != self.task.classes {
            return Err(Error::Config(format!(
                "network.classes = {} but task.classes = {}",
                self.network.classes, self.task.classes
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        let task = crate::training::Task::new(self.task.clone())?;
        for l in 0..self.network.depth {
            self.adapter_spec(0)
                .validate(self.network.layer_in(l), self.network.d, task.modalities())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_defaulted() {
        let cfg = RunConfig::parse(r#"{"variant": "moka"}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.cross_mode(), CrossMode::TaskCentric);
        assert_eq!(cfg.rank, 4);
        assert_eq!(cfg.steps, 2000);
    }

    #[test]
    fn misspelled_key_is_named() {
        let err = RunConfig::parse(r#"{"variant": "moka", "lamda": 0.5}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        let nested = RunConfig::parse(r#"{"task": {"nosie": 0.5}}"#).unwrap_err();
        assert!(nested.to_string().contains("nosie"), "{nested}");
    }

    #[test]
    fn emit_parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.variant = Variant::Moka;
        cfg.cross_mode = Some(CrossMode::ExtraPair {
            query: "visual".into(),
            key: None,
        });
        cfg.lambdas.insert("audio".into(), 0.5);
        cfg.precision = Precision::F64;
        assert_eq!(RunConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn inconsistent_dims_rejected() {
        assert!(RunConfig::parse(r#"{"network": {"k": 16}}"#).is_err());
        assert!(RunConfig::parse(r#"{"variant": "lora", "cross_mode": "naive"}"#).is_err());
        assert!(RunConfig::parse(r#"{"rank": 17}"#).is_err());
    }

    #[test]
    fn run_names() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.run_name(), "moka_task_centric");
        assert_eq!(cfg.with_adapter(Variant::Lora, CrossMode::None).run_name(), "lora");
    }
}
