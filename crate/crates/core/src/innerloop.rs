//! Training a classifier on one task under a given loss.
//!
//! Predictions are softmax outputs; the loss gradient with respect to the
//! predictions flows back through the softmax into the classifier
//! parameters, and the optimizer applies `theta <- theta - optimizer(grad)`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{multiclass_batch_loss, LossKind};
use crate::nn::{self, FlatParams, HiddenActivation, Matrix, MlpSpec, OutputActivation};
use crate::seeds::{rng_for, tag, Rng};
use crate::taskgen::{argmax, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        cfg: OptimizerConfig,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, len: usize) -> Self {
        match cfg.kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: cfg.learning_rate },
            OptimizerKind::Adam => Optimizer::Adam {
                cfg: *cfg,
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { cfg, m, v, t } => {
                *t += 1;
                let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for i in 0..params.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// `[dim, 2]` softmax classifier.
    Linear,
    /// `[dim, H, H, 2]`, ReLU hidden layers, softmax head.
    Mlp3 { hidden: usize },
}

impl ClassifierKind {
    pub fn spec(self, dim: usize, classes: usize) -> MlpSpec {
        match self {
            ClassifierKind::Linear => MlpSpec::new(
                vec![dim, classes],
                HiddenActivation::Identity,
                OutputActivation::Softmax,
                false,
            ),
            ClassifierKind::Mlp3 { hidden } => MlpSpec::new(
                vec![dim, hidden, hidden, classes],
                HiddenActivation::Relu,
                OutputActivation::Softmax,
                false,
            ),
        }
        .expect("classifier dims are positive")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerConfig {
    pub classifier: ClassifierKind,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Row cadence of the [`TrainRecord`]; 0 records nothing.
    pub record_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub train_loss: f64,
    pub meta_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    pub rows: Vec<TrainRow>,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "step,train_loss,meta_loss,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.train_loss, r.meta_loss, r.val_accuracy
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&TrainRow> {
        self.rows.last()
    }
}

/// Cycles through shuffled epochs of `0..n`, reshuffling at each epoch
/// boundary. Batches never straddle two epochs.
#[derive(Clone, Debug)]
pub struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchCycler {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        };
        c.reshuffle_if_needed();
        c
    }

    fn reshuffle_if_needed(&mut self) {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
    }

    pub fn next_batch(&mut self) -> &[usize] {
        self.reshuffle_if_needed();
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..start + self.batch]
    }
}

/// Loss value and its gradient with respect to the classifier parameters for
/// one batch. Works for any head; with an identity head the raw outputs are
/// fed to the loss as predictions.
pub fn classifier_loss_gradient(
    spec: &MlpSpec,
    params: &[f64],
    features: &Matrix,
    labels: &[usize],
    loss: &LossKind<'_>,
) -> Result<(f64, Vec<f64>)> {
    let (pred, trace) = nn::forward(spec, params, features)?;
    let (value, dpred) = multiclass_batch_loss(&pred, labels, loss)?;
    let (grad, _) = nn::backward(spec, params, &trace, &dpred)?;
    Ok((value, grad))
}

/// Mean over validation points and output components of the squared
/// difference between the classifier's and the ground truth's softmax
/// outputs.
pub fn meta_loss(params: &[f64], spec: &MlpSpec, task: &Task) -> Result<f64> {
    let (pred, _) = nn::forward(spec, params, &task.val_features)?;
    mean_squared_difference(&pred, &task.val_truth)
}

pub fn mean_squared_difference(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dims(
            "compared output shape",
            b.rows() * b.cols(),
            a.rows() * a.cols(),
        ));
    }
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n as f64)
}

pub fn validation_accuracy(params: &[f64], spec: &MlpSpec, task: &Task) -> Result<f64> {
    let (pred, _) = nn::forward(spec, params, &task.val_features)?;
    Ok(accuracy(&pred, &task.val_labels))
}

pub fn accuracy(pred: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = pred.iter_rows().zip(labels).filter(|(r, &y)| argmax(r) == y).count();
    correct as f64 / labels.len() as f64
}

/// Xavier-initialized classifier for `cfg`; the same seed gives the same
/// initialization regardless of the loss it will be trained with.
pub fn init_classifier(spec: &MlpSpec, seed: u64) -> FlatParams {
    nn::xavier_init(spec, &mut rng_for(seed, &[tag::CLASSIFIER_INIT]))
}

pub fn train_classifier(task: &Task, cfg: &InnerConfig, loss: &LossKind<'_>) -> Result<(FlatParams, TrainRecord)> {
    let n_train = task.train_features.rows();
    if cfg.batch_size == 0 || cfg.batch_size > n_train {
        return Err(Error::InvalidConfig(format!(
            "batch size {} must be in 1..={n_train}",
            cfg.batch_size
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    if cfg.optimizer.learning_rate.is_nan() || cfg.optimizer.learning_rate <= 0.0 {
        return Err(Error::InvalidConfig("learning rate must be > 0".into()));
    }

    let spec = cfg.classifier.spec(task.dim(), 2);
    let mut params = init_classifier(&spec, cfg.seed);
    let mut optimizer = Optimizer::new(&cfg.optimizer, params.len());
    let mut batches = BatchCycler::new(n_train, cfg.batch_size, rng_for(cfg.seed, &[tag::BATCH_ORDER]));
    let mut record = TrainRecord::default();

    let records = |step: usize| cfg.record_every > 0 && (step.is_multiple_of(cfg.record_every) || step == cfg.steps);

    for step in 0..=cfg.steps {
        if step == cfg.steps && !records(step) {
            break;
        }
        let idx = batches.next_batch();
        let x = task.train_features.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| task.train_labels[i]).collect();
        let (value, grad) = classifier_loss_gradient(&spec, &params, &x, &y, loss)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, what: "loss" });
        }
        if records(step) {
            record.rows.push(TrainRow {
                step,
                train_loss: value,
                meta_loss: meta_loss(&params, &spec, task)?,
                val_accuracy: validation_accuracy(&params, &spec, task)?,
            });
        }
        if step == cfg.steps {
            break;
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged { step, what: "gradient" });
        }
        optimizer.step(&mut params, &grad);
        if !params.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "parameters",
            });
        }
    }
    Ok((params, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::MetaLossNet;
    use crate::taskgen::{build_pool, generate_task, GroundTruthKind, MasterSplit, Provenance, TaskConfig};

    fn task(seed: u64) -> Task {
        let mut rng = rng_for(seed, &[]);
        let pool = build_pool(&mut rng, 50, (0.0, 5.0)).unwrap();
        let master = MasterSplit::materialize(&pool, 8000, 2000, 5, Provenance::MetaTrain, &mut rng).unwrap();
        let cfg = TaskConfig {
            n_train: 4000,
            n_val: 1000,
            ground_truth: GroundTruthKind::Linear,
            ..TaskConfig::default()
        };
        generate_task(&cfg, &master, &mut rng).unwrap()
    }

    fn inner(steps: usize) -> InnerConfig {
        InnerConfig {
            classifier: ClassifierKind::Linear,
            optimizer: OptimizerConfig::sgd(0.1),
            batch_size: 100,
            steps,
            seed: 17,
            record_every: 1,
        }
    }

    #[test]
    fn sgd_step_is_theta_minus_lr_grad() {
        let mut opt = Optimizer::new(&OptimizerConfig::sgd(0.1), 1);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]);
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(&OptimizerConfig::adam(0.001), 2);
        let mut p = [0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] + 0.001).abs() < 1e-9);
        assert!((p[1] - 0.001).abs() < 1e-9);
    }

    #[test]
    fn batch_cycler_covers_each_epoch() {
        let mut c = BatchCycler::new(10, 5, rng_for(1, &[]));
        let mut seen: Vec<usize> = c.next_batch().to_vec();
        seen.extend_from_slice(c.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(c.next_batch().len(), 5);
    }

    #[test]
    fn meta_loss_examples() {
        let t = task(1);
        let gt = &t.ground_truth;
        assert_eq!(meta_loss(&gt.params, &gt.spec, &t).unwrap(), 0.0);
        assert_eq!(validation_accuracy(&gt.params, &gt.spec, &t).unwrap(), 1.0);

        let a = Matrix::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.6, 0.4]]).unwrap();
        assert!((mean_squared_difference(&a, &b).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn constant_classifier_accuracy_within_balance() {
        let t = task(2);
        let spec = ClassifierKind::Linear.spec(5, 2);
        let zeros = vec![0.0; spec.genome_length()];
        let acc = validation_accuracy(&zeros, &spec, &t).unwrap();
        assert!((0.4..=0.6).contains(&acc), "accuracy {acc}");
        let ml = meta_loss(&zeros, &spec, &t).unwrap();
        assert!((0.0..1.0).contains(&ml));
    }

    #[test]
    fn record_rows_and_first_row() {
        let t = task(3);
        let cfg = InnerConfig {
            record_every: 10,
            ..inner(50)
        };
        let (_, rec) = train_classifier(&t, &cfg, &LossKind::CrossEntropy).unwrap();
        let steps: Vec<usize> = rec.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40, 50]);
        let spec = cfg.classifier.spec(5, 2);
        let init = init_classifier(&spec, cfg.seed);
        assert_eq!(rec.rows[0].meta_loss, meta_loss(&init, &spec, &t).unwrap());
        assert!(rec.to_csv().starts_with("step,train_loss,meta_loss,val_accuracy\n0,"));
    }

    #[test]
    fn training_is_deterministic() {
        let t = task(4);
        let (a, ra) = train_classifier(&t, &inner(30), &LossKind::MeanSquaredError).unwrap();
        let (b, rb) = train_classifier(&t, &inner(30), &LossKind::MeanSquaredError).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn constant_mln_is_a_fixed_point() {
        let t = task(5);
        let spec = MlpSpec::canonical_mln();
        let mut p = nn::xavier_init(&spec, &mut rng_for(9, &[]));
        let first = spec.layout()[0].weights.clone();
        p[first].fill(0.0);
        let net = MetaLossNet::new(spec, p).unwrap();
        let cfg = InnerConfig {
            record_every: 0,
            ..inner(5)
        };
        let (trained, _) = train_classifier(&t, &cfg, &LossKind::Mln(&net)).unwrap();
        let init = init_classifier(&cfg.classifier.spec(5, 2), cfg.seed);
        assert!(trained.iter().zip(init.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn invalid_configs() {
        let t = task(6);
        let mut cfg = inner(5);
        cfg.batch_size = 5000;
        assert!(train_classifier(&t, &cfg, &LossKind::CrossEntropy).is_err());
        let mut cfg = inner(0);
        assert!(train_classifier(&t, &cfg, &LossKind::CrossEntropy).is_err());
        cfg = inner(5);
        cfg.optimizer.learning_rate = 0.0;
        assert!(train_classifier(&t, &cfg, &LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let t = task(7);
        let mut cfg = inner(20);
        cfg.optimizer.learning_rate = 1e308;
        let err = train_classifier(&t, &cfg, &LossKind::MeanSquaredError).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
