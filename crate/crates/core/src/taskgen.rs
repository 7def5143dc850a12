//! Random generation of binary classifier-learning tasks.
//!
//! Points come from a pool of normal distributions: each point picks one pool
//! entry uniformly and draws all of its features from that entry. A master
//! training set and a master validation set are materialized once per split
//! (meta-train or meta-test); a task subsamples both without replacement and
//! labels them with a freshly initialized ground-truth classifier, redrawing
//! the ground truth until both splits are class-balanced.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, FlatParams, HiddenActivation, Matrix, MlpSpec, OutputActivation};
use crate::seeds::{rng_for, tag};

/// `(mean, std)` pairs of normal distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionPool {
    entries: Vec<(f64, f64)>,
}

impl DistributionPool {
    pub fn from_entries(entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean of a point drawn from the pool (mixture of the entries).
    pub fn mixture_mean(&self) -> f64 {
        self.entries.iter().map(|e| e.0).sum::<f64>() / self.entries.len() as f64
    }
}

pub fn build_pool<R: Rng + ?Sized>(rng: &mut R, size: usize, range: (f64, f64)) -> Result<DistributionPool> {
    let (lo, hi) = range;
    if size == 0 {
        return Err(Error::InvalidConfig("pool size must be >= 1".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidConfig(format!("invalid pool range [{lo}, {hi}]")));
    }
    let entries = (0..size)
        .map(|_| (rng.random_range(lo..=hi), rng.random_range(lo..=hi)))
        .collect();
    Ok(DistributionPool { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    MetaTrain,
    MetaTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Training,
    Validation,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub provenance: Provenance,
    pub split: Split,
}

pub fn sample_dataset<R: Rng + ?Sized>(
    pool: &DistributionPool,
    n: usize,
    dim: usize,
    provenance: Provenance,
    split: Split,
    rng: &mut R,
) -> Result<Dataset> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if n == 0 || dim == 0 {
        return Err(Error::InvalidConfig("dataset size and dim must be >= 1".into()));
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let (mean, std) = pool.entries[rng.random_range(0..pool.len())];
        for _ in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            data.push(mean + std * z);
        }
    }
    Ok(Dataset {
        features: Matrix::from_vec(n, dim, data)?,
        provenance,
        split,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruthKind {
    /// Single-layer perceptron `[dim, 2]`.
    Linear,
    /// `[dim, H, H, 2]` with ReLU hidden layers.
    Mlp3 { hidden: usize },
}

impl GroundTruthKind {
    pub fn spec(self, dim: usize) -> MlpSpec {
        match self {
            GroundTruthKind::Linear => MlpSpec::new(
                vec![dim, 2],
                HiddenActivation::Identity,
                OutputActivation::Softmax,
                false,
            ),
            GroundTruthKind::Mlp3 { hidden } => MlpSpec::new(
                vec![dim, hidden, hidden, 2],
                HiddenActivation::Relu,
                OutputActivation::Softmax,
                false,
            ),
        }
        .expect("ground-truth spec dims are positive")
    }
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub kind: GroundTruthKind,
    pub spec: MlpSpec,
    pub params: FlatParams,
}

impl GroundTruth {
    /// Softmax outputs of the ground truth for each row of `features`.
    pub fn probabilities(&self, features: &Matrix) -> Result<Matrix> {
        Ok(nn::forward(&self.spec, &self.params, features)?.0)
    }
}

pub fn make_ground_truth<R: Rng + ?Sized>(kind: GroundTruthKind, dim: usize, rng: &mut R) -> GroundTruth {
    let spec = kind.spec(dim);
    let params = nn::xavier_init(&spec, rng);
    GroundTruth { kind, spec, params }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn label(gt: &GroundTruth, features: &Matrix) -> Result<Vec<usize>> {
    let probs = gt.probabilities(features)?;
    Ok(probs.iter_rows().map(argmax).collect())
}

/// Fraction of the least frequent of the two classes.
pub fn minority_fraction(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    let minority = ones.min(labels.len() - ones);
    minority as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub ground_truth: GroundTruthKind,
    pub balance_min: f64,
    pub max_attempts: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_train: 50_000,
            n_val: 10_000,
            ground_truth: GroundTruthKind::Linear,
            balance_min: 0.4,
            max_attempts: 1000,
        }
    }
}

/// Master training and validation sets for one provenance.
#[derive(Clone, Debug)]
pub struct MasterSplit {
    pub train: Dataset,
    pub val: Dataset,
}

impl MasterSplit {
    pub fn materialize<R: Rng + ?Sized>(
        pool: &DistributionPool,
        n_train: usize,
        n_val: usize,
        dim: usize,
        provenance: Provenance,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            train: sample_dataset(pool, n_train, dim, provenance, Split::Training, rng)?,
            val: sample_dataset(pool, n_val, dim, provenance, Split::Validation, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.features.cols()
    }

    pub fn provenance(&self) -> Provenance {
        self.train.provenance
    }
}

/// Sizes of the distribution pool and of the master datasets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub pool_size: usize,
    pub pool_range: (f64, f64),
    pub dim: usize,
    pub master_train: usize,
    pub master_val: usize,
}

impl DataConfig {
    /// The one pool shared by meta-training and meta-testing data.
    pub fn pool(&self, master_seed: u64) -> Result<DistributionPool> {
        build_pool(&mut rng_for(master_seed, &[tag::POOL]), self.pool_size, self.pool_range)
    }

    /// Master sets for one provenance; the two provenances use disjoint
    /// random streams.
    pub fn master_split(&self, master_seed: u64, provenance: Provenance) -> Result<MasterSplit> {
        let pool = self.pool(master_seed)?;
        let stream = match provenance {
            Provenance::MetaTrain => tag::META_TRAIN_DATA,
            Provenance::MetaTest => tag::META_TEST_DATA,
        };
        MasterSplit::materialize(
            &pool,
            self.master_train,
            self.master_val,
            self.dim,
            provenance,
            &mut rng_for(master_seed, &[stream]),
        )
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub train_features: Matrix,
    pub train_labels: Vec<usize>,
    pub val_features: Matrix,
    pub val_labels: Vec<usize>,
    pub ground_truth: GroundTruth,
    /// Ground-truth softmax outputs on the validation features.
    pub val_truth: Matrix,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.train_features.cols()
    }

    /// CSV with columns `f0..f{dim-1},label`.
    pub fn to_csv(features: &Matrix, labels: &[usize]) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..features.cols()).map(|i| format!("f{i}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, l) in features.iter_rows().zip(labels) {
            for v in row {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{l}\n"));
        }
        out
    }
}

pub fn generate_task<R: Rng + ?Sized>(cfg: &TaskConfig, master: &MasterSplit, rng: &mut R) -> Result<Task> {
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(Error::InvalidConfig("task sizes must be >= 1".into()));
    }
    let available_train = master.train.features.rows();
    let available_val = master.val.features.rows();
    if cfg.n_train > available_train || cfg.n_val > available_val {
        return Err(Error::InvalidConfig(format!(
            "task needs {}/{} points but master sets hold {available_train}/{available_val}",
            cfg.n_train, cfg.n_val
        )));
    }
    let train_idx = index::sample(rng, available_train, cfg.n_train).into_vec();
    let val_idx = index::sample(rng, available_val, cfg.n_val).into_vec();
    let train_features = master.train.features.select_rows(&train_idx);
    let val_features = master.val.features.select_rows(&val_idx);

    for _ in 0..cfg.max_attempts {
        let gt = make_ground_truth(cfg.ground_truth, master.dim(), rng);
        let train_labels = label(&gt, &train_features)?;
        if minority_fraction(&train_labels) < cfg.balance_min {
            continue;
        }
        let val_truth = gt.probabilities(&val_features)?;
        let val_labels: Vec<usize> = val_truth.iter_rows().map(argmax).collect();
        if minority_fraction(&val_labels) < cfg.balance_min {
            continue;
        }
        return Ok(Task {
            train_features,
            train_labels,
            val_features,
            val_labels,
            ground_truth: gt,
            val_truth,
        });
    }
    Err(Error::BalanceUnattainable {
        balance_min: cfg.balance_min,
        attempts: cfg.max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_master(seed: u64) -> MasterSplit {
        let mut rng = rng_for(seed, &[0]);
        let pool = build_pool(&mut rng, 50, (0.0, 5.0)).unwrap();
        MasterSplit::materialize(&pool, 3000, 1000, 5, Provenance::MetaTrain, &mut rng).unwrap()
    }

    #[test]
    fn pool_defaults_and_determinism() {
        let a = build_pool(&mut rng_for(1, &[]), 50, (0.0, 5.0)).unwrap();
        let b = build_pool(&mut rng_for(1, &[]), 50, (0.0, 5.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a
            .entries()
            .iter()
            .all(|&(m, s)| (0.0..=5.0).contains(&m) && (0.0..=5.0).contains(&s)));
    }

    #[test]
    fn degenerate_pool() {
        let pool = build_pool(&mut rng_for(1, &[]), 1, (2.0, 2.0)).unwrap();
        assert_eq!(pool.entries(), &[(2.0, 2.0)]);
        assert!(build_pool(&mut rng_for(1, &[]), 0, (0.0, 1.0)).is_err());
        assert!(build_pool(&mut rng_for(1, &[]), 3, (2.0, 1.0)).is_err());
    }

    #[test]
    fn dataset_shape_and_zero_variance() {
        let pool = build_pool(&mut rng_for(2, &[]), 50, (0.0, 5.0)).unwrap();
        let d = sample_dataset(
            &pool,
            1000,
            5,
            Provenance::MetaTrain,
            Split::Training,
            &mut rng_for(3, &[]),
        )
        .unwrap();
        assert_eq!((d.features.rows(), d.features.cols()), (1000, 5));

        let flat = DistributionPool::from_entries(vec![(2.0, 0.0)]).unwrap();
        let d = sample_dataset(
            &flat,
            100,
            5,
            Provenance::MetaTest,
            Split::Validation,
            &mut rng_for(3, &[]),
        )
        .unwrap();
        assert!(d.features.data().iter().all(|&v| v == 2.0));
        assert!(DistributionPool::from_entries(vec![]).is_err());
    }

    #[test]
    fn feature_means_match_mixture() {
        let pool = build_pool(&mut rng_for(4, &[]), 50, (0.0, 5.0)).unwrap();
        let n = 200_000;
        let d = sample_dataset(
            &pool,
            n,
            5,
            Provenance::MetaTrain,
            Split::Training,
            &mut rng_for(5, &[]),
        )
        .unwrap();
        // Mixture variance: E[std^2] + Var(mean).
        let mu = pool.mixture_mean();
        let e = pool.entries();
        let var = e.iter().map(|(m, s)| s * s + (m - mu) * (m - mu)).sum::<f64>() / e.len() as f64;
        let se = (var / n as f64).sqrt();
        for c in 0..5 {
            let mean = d.features.iter_rows().map(|r| r[c]).sum::<f64>() / n as f64;
            assert!((mean - mu).abs() < 3.0 * se, "feature {c}: {mean} vs {mu} (se {se})");
        }
    }

    #[test]
    fn ground_truth_shapes() {
        let gt = make_ground_truth(GroundTruthKind::Linear, 5, &mut rng_for(6, &[]));
        assert_eq!(gt.params.len(), 12);
        let gt3 = make_ground_truth(GroundTruthKind::Mlp3 { hidden: 32 }, 5, &mut rng_for(6, &[]));
        assert_eq!(gt3.params.len(), 1314);
        for layer in gt3.spec.layout() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            assert!(gt3.params[layer.weights].iter().all(|w| w.abs() <= limit));
        }
    }

    #[test]
    fn argmax_ties_to_zero() {
        assert_eq!(argmax(&[0.3, -0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.1]), 0);
        assert_eq!(argmax(&[-1.0, 2.0]), 1);
    }

    #[test]
    fn label_rejects_wrong_width() {
        let gt = make_ground_truth(GroundTruthKind::Linear, 5, &mut rng_for(6, &[]));
        let x = Matrix::zeros(3, 4);
        assert!(label(&gt, &x).is_err());
    }

    #[test]
    fn tasks_are_balanced_consistent_and_deterministic() {
        let master = small_master(9);
        let cfg = TaskConfig {
            n_train: 1000,
            n_val: 300,
            ..TaskConfig::default()
        };
        for seed in 0..10 {
            let task = generate_task(&cfg, &master, &mut rng_for(seed, &[1])).unwrap();
            assert_eq!(task.train_features.rows(), 1000);
            assert_eq!(task.val_features.rows(), 300);
            assert!(minority_fraction(&task.train_labels) >= 0.4);
            assert!(minority_fraction(&task.val_labels) >= 0.4);
            assert_eq!(
                label(&task.ground_truth, &task.train_features).unwrap(),
                task.train_labels
            );
            assert_eq!(label(&task.ground_truth, &task.val_features).unwrap(), task.val_labels);
            let again = generate_task(&cfg, &master, &mut rng_for(seed, &[1])).unwrap();
            assert_eq!(again.train_features, task.train_features);
            assert_eq!(again.ground_truth.params, task.ground_truth.params);
        }
    }

    #[test]
    fn unreachable_balance_is_an_error() {
        let master = small_master(10);
        let cfg = TaskConfig {
            n_train: 100,
            n_val: 100,
            balance_min: 0.51,
            max_attempts: 20,
            ..TaskConfig::default()
        };
        let err = generate_task(&cfg, &master, &mut rng_for(0, &[])).unwrap_err();
        assert!(matches!(err, Error::BalanceUnattainable { attempts: 20, .. }));
    }

    #[test]
    fn csv_dump() {
        let x = Matrix::from_rows(&[vec![1.0, 2.5]]).unwrap();
        assert_eq!(Task::to_csv(&x, &[1]), "f0,f1,label\n1,2.5,1\n");
    }
}
