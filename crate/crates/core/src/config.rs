//! Run configuration documents and the bundled `desk` / `paper` profiles.
//!
//! A config file is a JSON object with an optional `"profile"` key (default
//! `"desk"`) and any subset of the sections below. Keys missing from the file
//! fall back to the profile; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evolution::EsConfig;
use crate::innerloop::{ClassifierKind, InnerConfig, OptimizerConfig, OptimizerKind};
use crate::loss::LossName;
use crate::taskgen::{DataConfig, GroundTruthKind, TaskConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linear,
    Mlp3,
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear" => Ok(Family::Linear),
            "mlp3" => Ok(Family::Mlp3),
            other => Err(format!("unknown family '{other}' (expected linear or mlp3)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskgenSection {
    pub pool_size: usize,
    pub pool_range: [f64; 2],
    pub dim: usize,
    pub master_train: usize,
    pub master_val: usize,
    pub task_train: usize,
    pub task_val: usize,
    pub balance_min: f64,
    pub max_attempts: usize,
    pub ground_truth: Family,
    pub mlp3_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSection {
    pub classifier: Family,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsSection {
    pub mu: usize,
    pub lambda: usize,
    pub sigma_init: f64,
    /// No default in the `paper` profile; must be set for training.
    pub generations: Option<usize>,
    pub sigma_floor: f64,
    pub eq5_literal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistSection {
    pub train_subset: usize,
    pub test_subset: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub optimizer: OptimizerKind,
    pub lr_mln: f64,
    pub lr_ce: f64,
    pub lr_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub family: Family,
    /// Classifier trained on meta-testing tasks; `None` matches the task
    /// family.
    pub learner: Option<Family>,
    pub num_tasks: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_mln: f64,
    pub lr_ce: f64,
    pub lr_mse: f64,
    pub record_every: usize,
    pub mnist: MnistSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    /// Keys the distribution pool, the master datasets and the evolution run.
    pub master: u64,
    /// Keys meta-testing task draws and evaluation runs.
    pub eval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub taskgen: TaskgenSection,
    pub inner: InnerSection,
    pub es: EsSection,
    pub eval: EvalSection,
    pub seeds: SeedsSection,
}

impl RunConfig {
    /// Shrunk settings for a single machine.
    pub fn desk() -> Self {
        Self {
            taskgen: TaskgenSection {
                pool_size: 50,
                pool_range: [0.0, 5.0],
                dim: 5,
                master_train: 40_000,
                master_val: 10_000,
                task_train: 4_000,
                task_val: 1_000,
                balance_min: 0.4,
                max_attempts: 1000,
                ground_truth: Family::Linear,
                mlp3_hidden: 32,
            },
            inner: InnerSection {
                classifier: Family::Linear,
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.1,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                batch_size: 100,
                steps: 200,
            },
            es: EsSection {
                mu: 8,
                lambda: 8,
                sigma_init: 0.05,
                generations: Some(40),
                sigma_floor: 1e-6,
                eq5_literal: false,
            },
            eval: EvalSection {
                family: Family::Linear,
                learner: None,
                num_tasks: 20,
                optimizer: OptimizerKind::Sgd,
                batch_size: 100,
                steps: 200,
                lr_mln: 0.1,
                lr_ce: 0.1,
                lr_mse: 0.1,
                record_every: 1,
                mnist: MnistSection {
                    train_subset: 10_000,
                    test_subset: 2_000,
                    epochs: 5,
                    batch_size: 100,
                    hidden: 128,
                    optimizer: OptimizerKind::Adam,
                    lr_mln: 1e-3,
                    lr_ce: 1e-3,
                    lr_mse: 1e-3,
                },
            },
            seeds: SeedsSection { master: 1, eval: 1001 },
        }
    }

    /// Full-scale settings.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            taskgen: TaskgenSection {
                master_train: 500_000,
                master_val: 500_000,
                task_train: 50_000,
                task_val: 10_000,
                ..desk.taskgen
            },
            inner: InnerSection {
                batch_size: 500,
                steps: 1000,
                ..desk.inner
            },
            es: EsSection {
                mu: 25,
                lambda: 25,
                generations: None,
                ..desk.es
            },
            eval: EvalSection {
                family: Family::Linear,
                learner: None,
                num_tasks: 10,
                optimizer: OptimizerKind::Adam,
                batch_size: 500,
                steps: 1000,
                lr_mln: 1e-4,
                lr_ce: 1e-3,
                lr_mse: 1e-3,
                record_every: 1,
                mnist: MnistSection {
                    train_subset: 60_000,
                    test_subset: 10_000,
                    epochs: 100,
                    batch_size: 500,
                    hidden: 128,
                    optimizer: OptimizerKind::Adam,
                    lr_mln: 1e-4,
                    lr_ce: 1e-3,
                    lr_mse: 1e-3,
                },
            },
            seeds: desk.seeds,
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!("unknown profile '{other}'"))),
        }
    }

    /// Parses a config document, filling missing keys from its profile.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(format!("config is not valid JSON: {e}")))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
        let profile = match obj.remove("profile") {
            None => "desk".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => return Err(Error::InvalidConfig(format!("profile must be a string, got {other}"))),
        };
        let mut base = serde_json::to_value(Self::profile(&profile)?)?;
        merge(&mut base, doc);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `source` is a profile name (`desk`, `paper`) or a path to a JSON file.
    pub fn load(source: &str) -> Result<Self> {
        if let Ok(cfg) = Self::profile(source) {
            return Ok(cfg);
        }
        let text = fs::read_to_string(Path::new(source))
            .map_err(|e| Error::InvalidConfig(format!("cannot read config '{source}': {e}")))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.taskgen;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if t.pool_size == 0 || t.dim == 0 || t.mlp3_hidden == 0 {
            return bad("taskgen sizes must be >= 1");
        }
        if t.pool_range.iter().any(|v| v.is_nan()) || t.pool_range[0] > t.pool_range[1] {
            return bad("taskgen.pool_range must be [lo, hi] with lo <= hi");
        }
        if t.task_train == 0 || t.task_val == 0 || t.task_train > t.master_train || t.task_val > t.master_val {
            return bad("task sizes must be >= 1 and fit in the master sets");
        }
        if !(0.0..=0.5).contains(&t.balance_min) {
            return bad("taskgen.balance_min must be in [0, 0.5]");
        }
        if self.inner.steps == 0 || self.inner.batch_size == 0 || self.inner.batch_size > t.task_train {
            return bad("inner.steps >= 1 and 1 <= inner.batch_size <= taskgen.task_train required");
        }
        if !positive(self.inner.learning_rate) {
            return bad("inner.learning_rate must be > 0");
        }
        if self.es.mu == 0 || self.es.lambda == 0 {
            return bad("es.mu and es.lambda must be >= 1");
        }
        let e = &self.eval;
        if e.num_tasks == 0 || e.steps == 0 || e.batch_size == 0 || e.batch_size > t.task_train {
            return bad("eval.num_tasks, eval.steps >= 1 and 1 <= eval.batch_size <= taskgen.task_train required");
        }
        if [
            e.lr_mln,
            e.lr_ce,
            e.lr_mse,
            e.mnist.lr_mln,
            e.mnist.lr_ce,
            e.mnist.lr_mse,
        ]
        .iter()
        .any(|&lr| !positive(lr))
        {
            return bad("learning rates must be > 0");
        }
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        let t = &self.taskgen;
        DataConfig {
            pool_size: t.pool_size,
            pool_range: (t.pool_range[0], t.pool_range[1]),
            dim: t.dim,
            master_train: t.master_train,
            master_val: t.master_val,
        }
    }

    pub fn ground_truth(&self, family: Family) -> GroundTruthKind {
        match family {
            Family::Linear => GroundTruthKind::Linear,
            Family::Mlp3 => GroundTruthKind::Mlp3 {
                hidden: self.taskgen.mlp3_hidden,
            },
        }
    }

    pub fn classifier(&self, family: Family) -> ClassifierKind {
        match family {
            Family::Linear => ClassifierKind::Linear,
            Family::Mlp3 => ClassifierKind::Mlp3 {
                hidden: self.taskgen.mlp3_hidden,
            },
        }
    }

    pub fn task_config(&self, family: Family) -> TaskConfig {
        TaskConfig {
            n_train: self.taskgen.task_train,
            n_val: self.taskgen.task_val,
            ground_truth: self.ground_truth(family),
            balance_min: self.taskgen.balance_min,
            max_attempts: self.taskgen.max_attempts,
        }
    }

    fn optimizer(&self, kind: OptimizerKind, lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            learning_rate: lr,
            adam_beta1: self.inner.adam_beta1,
            adam_beta2: self.inner.adam_beta2,
            adam_eps: self.inner.adam_eps,
        }
    }

    pub fn es_config(&self) -> Result<EsConfig> {
        let generations = self
            .es
            .generations
            .ok_or_else(|| Error::InvalidConfig("es.generations must be set".into()))?;
        Ok(EsConfig {
            mu: self.es.mu,
            lambda: self.es.lambda,
            sigma_init: self.es.sigma_init,
            generations,
            sigma_floor: self.es.sigma_floor,
            eq5_literal: self.es.eq5_literal,
            master_seed: self.seeds.master,
            inner: InnerConfig {
                classifier: self.classifier(self.inner.classifier),
                optimizer: self.optimizer(self.inner.optimizer, self.inner.learning_rate),
                batch_size: self.inner.batch_size,
                steps: self.inner.steps,
                seed: 0,
                record_every: 0,
            },
            task: self.task_config(self.taskgen.ground_truth),
            data: self.data_config(),
        })
    }

    pub fn eval_learning_rate(&self, loss: LossName) -> f64 {
        match loss {
            LossName::Mln => self.eval.lr_mln,
            LossName::Ce => self.eval.lr_ce,
            LossName::Mse => self.eval.lr_mse,
        }
    }

    /// Inner-loop settings for meta-testing one loss kind on `family` tasks.
    pub fn eval_inner(&self, family: Family, loss: LossName, seed: u64) -> InnerConfig {
        InnerConfig {
            classifier: self.classifier(self.eval.learner.unwrap_or(family)),
            optimizer: self.optimizer(self.eval.optimizer, self.eval_learning_rate(loss)),
            batch_size: self.eval.batch_size,
            steps: self.eval.steps,
            seed,
            record_every: self.eval.record_every,
        }
    }

    pub fn mnist_optimizer(&self, loss: LossName) -> OptimizerConfig {
        let m = &self.eval.mnist;
        let lr = match loss {
            LossName::Mln => m.lr_mln,
            LossName::Ce => m.lr_ce,
            LossName::Mse => m.lr_mse,
        };
        self.optimizer(m.optimizer, lr)
    }
}

fn positive(v: f64) -> bool {
    v.partial_cmp(&0.0) == Some(std::cmp::Ordering::Greater)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
