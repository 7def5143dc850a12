//! Meta-testing against the baseline losses, function-curve sweeps,
//! training trajectories and the digit-classification check.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Family, RunConfig};
use crate::error::{Error, Result};
use crate::evolution::thread_pool;
use crate::idx::Digits;
use crate::innerloop::{
    accuracy, classifier_loss_gradient, init_classifier, meta_loss, train_classifier, BatchCycler, InnerConfig,
    Optimizer, OptimizerConfig, TrainRecord,
};
use crate::loss::{LossKind, LossName, MetaLossNet};
use crate::nn::{self, HiddenActivation, MlpSpec, OutputActivation};
use crate::persist::write_text;
use crate::seeds::{derive_seed, rng_for, tag};
use crate::taskgen::{generate_task, Provenance, Task};

pub const LOSS_ORDER: [LossName; 3] = [LossName::Mln, LossName::Ce, LossName::Mse];

pub const TASKS_CSV_HEADER: &str = "task,task_seed,loss,final_accuracy,final_meta_loss,steps_to_95";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: usize,
    pub task_seed: u64,
    pub loss: LossName,
    /// `None` when training diverged.
    pub final_accuracy: Option<f64>,
    pub final_meta_loss: Option<f64>,
    /// First recorded step whose validation accuracy reaches 95% of the
    /// final accuracy.
    pub steps_to_95: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub loss: LossName,
    pub tasks: usize,
    pub diverged: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub meta_loss_mean: f64,
    pub meta_loss_std: f64,
    pub steps_to_95_mean: Option<f64>,
    pub steps_to_95_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: Family,
    pub num_tasks: usize,
    pub seed: u64,
    pub aggregates: Vec<Aggregate>,
    pub rows: Vec<TaskRow>,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn aggregate(&self, loss: LossName) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.loss == loss)
    }

    pub fn tasks_csv(&self) -> String {
        fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from(TASKS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.task,
                r.task_seed,
                r.loss,
                opt(r.final_accuracy),
                opt(r.final_meta_loss),
                opt(r.steps_to_95)
            );
        }
        out
    }

    /// Writes `report.json` and `report_tasks.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(self)? + "\n"))?;
        write_text(&dir.join("report_tasks.csv"), &self.tasks_csv())
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn steps_to_fraction(record: &TrainRecord, final_accuracy: f64, fraction: f64) -> Option<usize> {
    let target = fraction * final_accuracy;
    record.rows.iter().find(|r| r.val_accuracy >= target).map(|r| r.step)
}

/// Seed that keys the `index`-th meta-testing task.
pub fn task_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[tag::TEST_TASK, index as u64])
}

/// Meta-testing tasks come from the meta-test master split, which shares the
/// distribution pool with meta-training but not its samples.
pub struct MetaTestSet {
    cfg: RunConfig,
    master: crate::taskgen::MasterSplit,
}

impl MetaTestSet {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let master = cfg.data_config().master_split(cfg.seeds.master, Provenance::MetaTest)?;
        Ok(Self {
            cfg: cfg.clone(),
            master,
        })
    }

    pub fn task(&self, family: Family, seed: u64, index: usize) -> Result<Task> {
        let mut rng = rng_for(task_seed(seed, index), &[]);
        generate_task(&self.cfg.task_config(family), &self.master, &mut rng)
    }

    /// Shared by every loss kind on task `index`, so the classifier
    /// initialization and batch order are paired.
    pub fn inner_seed(seed: u64, index: usize) -> u64 {
        derive_seed(seed, &[tag::INNER, index as u64])
    }
}

fn evaluate_loss(
    task: &Task,
    inner: &InnerConfig,
    loss: &LossKind<'_>,
) -> Result<(Option<f64>, Option<f64>, Option<usize>)> {
    match train_classifier(task, inner, loss) {
        Ok((params, record)) => {
            let spec = inner.classifier.spec(task.dim(), 2);
            let (pred, _) = nn::forward(&spec, &params, &task.val_features)?;
            let acc = accuracy(&pred, &task.val_labels);
            let ml = meta_loss(&params, &spec, task)?;
            Ok((Some(acc), Some(ml), steps_to_fraction(&record, acc, 0.95)))
        }
        Err(Error::Diverged { .. }) => Ok((None, None, None)),
        Err(e) => Err(e),
    }
}

/// Trains one classifier per requested loss kind on each of `num_tasks`
/// meta-testing tasks and aggregates the paired results. `net` may be
/// omitted only when `losses` excludes [`LossName::Mln`].
pub fn compare_on_generated(
    net: Option<&MetaLossNet>,
    cfg: &RunConfig,
    family: Family,
    num_tasks: usize,
    seed: u64,
    losses: &[LossName],
    threads: usize,
) -> Result<EvalReport> {
    if num_tasks == 0 {
        return Err(Error::InvalidConfig("num_tasks must be >= 1".into()));
    }
    if losses.contains(&LossName::Mln) && net.is_none() {
        return Err(Error::InvalidConfig("evaluating the mln loss needs a genome".into()));
    }
    let set = MetaTestSet::new(cfg)?;
    let pool = thread_pool(threads)?;
    let per_task: Vec<Result<Vec<TaskRow>>> = pool.install(|| {
        (0..num_tasks)
            .into_par_iter()
            .map(|i| {
                let task = set.task(family, seed, i)?;
                let mut rows = Vec::with_capacity(losses.len());
                for &name in losses {
                    let kind = match name {
                        LossName::Mln => LossKind::Mln(net.expect("checked above")),
                        LossName::Ce => LossKind::CrossEntropy,
                        LossName::Mse => LossKind::MeanSquaredError,
                    };
                    let inner = cfg.eval_inner(family, name, MetaTestSet::inner_seed(seed, i));
                    let (final_accuracy, final_meta_loss, steps_to_95) = evaluate_loss(&task, &inner, &kind)?;
                    rows.push(TaskRow {
                        task: i,
                        task_seed: task_seed(seed, i),
                        loss: name,
                        final_accuracy,
                        final_meta_loss,
                        steps_to_95,
                    });
                }
                Ok(rows)
            })
            .collect()
    });
    let mut rows = Vec::with_capacity(num_tasks * losses.len());
    for r in per_task {
        rows.extend(r?);
    }
    rows.sort_by_key(|r| (losses.iter().position(|&l| l == r.loss), r.task));

    let aggregates = losses
        .iter()
        .map(|&loss| {
            let mine: Vec<&TaskRow> = rows.iter().filter(|r| r.loss == loss).collect();
            let acc: Vec<f64> = mine.iter().filter_map(|r| r.final_accuracy).collect();
            let ml: Vec<f64> = mine.iter().filter_map(|r| r.final_meta_loss).collect();
            let steps: Vec<f64> = mine.iter().filter_map(|r| r.steps_to_95.map(|s| s as f64)).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (meta_loss_mean, meta_loss_std) = mean_std(&ml);
            let (s_mean, s_std) = mean_std(&steps);
            Aggregate {
                loss,
                tasks: mine.len(),
                diverged: mine.len() - acc.len(),
                accuracy_mean,
                accuracy_std,
                meta_loss_mean,
                meta_loss_std,
                steps_to_95_mean: (!steps.is_empty()).then_some(s_mean),
                steps_to_95_std: (!steps.is_empty()).then_some(s_std),
            }
        })
        .collect();

    Ok(EvalReport {
        family,
        num_tasks,
        seed,
        aggregates,
        rows,
        config: cfg.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p_true: f64,
    pub loss: f64,
}

/// The grid `0, step, 2 step, ...` with 1 always included as the last point.
pub fn sweep_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::InvalidConfig(format!("sweep step {step} must be in (0, 0.5]")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(1.0)).collect();
    let last = grid.last_mut().expect("grid holds 0");
    if 1.0 - *last <= 1e-9 {
        *last = 1.0;
    } else {
        grid.push(1.0);
    }
    Ok(grid)
}

/// `mln(p, 1 - p)` along the sweep grid.
pub fn sweep_curve(net: &MetaLossNet, step: f64) -> Result<Vec<CurvePoint>> {
    let grid = sweep_grid(step)?;
    let pairs: Vec<(f64, f64)> = grid.iter().map(|&p| (p, 1.0 - p)).collect();
    Ok(grid
        .into_iter()
        .zip(net.values(&pairs))
        .map(|(p_true, loss)| CurvePoint { p_true, loss })
        .collect())
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("p,loss\n");
    for c in curve {
        let _ = writeln!(out, "{},{}", c.p_true, c.loss);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub argmin_p: f64,
    pub min_loss: f64,
    pub max_loss: f64,
}

/// Location of the smallest loss (first on ties) and the value range.
pub fn summarize_curve(curve: &[CurvePoint]) -> Option<CurveSummary> {
    let first = curve.first()?;
    let mut s = CurveSummary {
        argmin_p: first.p_true,
        min_loss: first.loss,
        max_loss: first.loss,
    };
    for c in &curve[1..] {
        if c.loss < s.min_loss {
            s.min_loss = c.loss;
            s.argmin_p = c.p_true;
        }
        s.max_loss = s.max_loss.max(c.loss);
    }
    Some(s)
}

/// Per-step training record for one loss kind on one task.
pub fn trajectory(loss: &LossKind<'_>, task: &Task, inner: &InnerConfig) -> Result<TrainRecord> {
    let inner = InnerConfig {
        record_every: inner.record_every.max(1),
        ..*inner
    };
    train_classifier(task, &inner, loss).map(|(_, record)| record)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistSettings {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistReport {
    pub loss: LossName,
    pub train_examples: usize,
    pub test_examples: usize,
    pub epochs: usize,
    pub steps: usize,
    pub final_train_loss: f64,
    pub test_accuracy: f64,
}

/// Dense digit classifier `[784, hidden, 10]` with ReLU and a softmax head.
pub fn mnist_spec(inputs: usize, hidden: usize) -> Result<MlpSpec> {
    MlpSpec::new(
        vec![inputs, hidden, 10],
        HiddenActivation::Relu,
        OutputActivation::Softmax,
        false,
    )
}

/// Trains the digit classifier under `loss` and reports test accuracy. The
/// initialization and batch order depend only on `settings.seed`.
pub fn mnist_eval(loss: &LossKind<'_>, train: &Digits, test: &Digits, settings: &MnistSettings) -> Result<MnistReport> {
    if settings.batch_size == 0 || settings.batch_size > train.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} must be in 1..={}",
            settings.batch_size,
            train.len()
        )));
    }
    if settings.epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be >= 1".into()));
    }
    let spec = mnist_spec(train.images.cols(), settings.hidden)?;
    let mut params = init_classifier(&spec, settings.seed);
    let mut optimizer = Optimizer::new(&settings.optimizer, params.len());
    let mut batches = BatchCycler::new(
        train.len(),
        settings.batch_size,
        rng_for(settings.seed, &[tag::BATCH_ORDER]),
    );
    let steps = settings.epochs * (train.len() / settings.batch_size);
    let mut last_loss = f64::NAN;
    for step in 0..steps {
        let idx = batches.next_batch();
        let x = train.images.select_rows(idx);
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let (value, grad) = classifier_loss_gradient(&spec, &params, &x, &y, loss)?;
        if !value.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged { step, what: "loss" });
        }
        optimizer.step(&mut params, &grad);
        last_loss = value;
    }
    let (pred, _) = nn::forward(&spec, &params, &test.images)?;
    Ok(MnistReport {
        loss: loss.name(),
        train_examples: train.len(),
        test_examples: test.len(),
        epochs: settings.epochs,
        steps,
        final_train_loss: last_loss,
        test_accuracy: accuracy(&pred, &test.labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FlatParams;

    /// `[4, 1]` SoftPlus net computing `softplus(2 p_true - 1)` when fed
    /// `(p, 1 - p)`: weights `(1, -1, 0, 0)`, bias 0.
    fn toy() -> MetaLossNet {
        let spec = MlpSpec::new(vec![4, 1], HiddenActivation::PRelu, OutputActivation::SoftPlus, true).unwrap();
        MetaLossNet::new(spec, FlatParams::new(vec![1.0, -1.0, 0.0, 0.0, 0.0])).unwrap()
    }

    #[test]
    fn grid_sizes_and_endpoints() {
        assert_eq!(sweep_grid(0.001).unwrap().len(), 1001);
        assert_eq!(sweep_grid(0.5).unwrap(), vec![0.0, 0.5, 1.0]);
        let g = sweep_grid(0.3).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(sweep_grid(0.0).is_err());
        assert!(sweep_grid(0.6).is_err());
    }

    #[test]
    fn toy_curve_matches_closed_form() {
        let curve = sweep_curve(&toy(), 0.01).unwrap();
        for c in &curve {
            let expect = (1.0 + (2.0 * c.p_true - 1.0).exp()).ln();
            assert!((c.loss - expect).abs() < 1e-12);
            assert!(c.loss > 0.0);
        }
        let s = summarize_curve(&curve).unwrap();
        assert_eq!(s.argmin_p, 0.0);
        assert!(curve_csv(&curve).starts_with("p,loss\n0,"));
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn steps_to_95_finds_first_crossing() {
        use crate::innerloop::TrainRow;
        let row = |step, val_accuracy| TrainRow {
            step,
            train_loss: 0.0,
            meta_loss: 0.0,
            val_accuracy,
        };
        let rec = TrainRecord {
            rows: vec![row(0, 0.5), row(1, 0.9), row(2, 0.96), row(3, 1.0)],
        };
        assert_eq!(steps_to_fraction(&rec, 1.0, 0.95), Some(2));
        assert_eq!(steps_to_fraction(&rec, 0.9, 0.95), Some(1));
    }

    #[test]
    fn small_comparison_is_paired_and_reproducible() {
        let mut cfg = RunConfig::desk();
        cfg.taskgen.master_train = 2000;
        cfg.taskgen.master_val = 500;
        cfg.taskgen.task_train = 400;
        cfg.taskgen.task_val = 100;
        cfg.eval.steps = 20;
        cfg.eval.record_every = 5;
        let losses = [LossName::Ce, LossName::Mse];
        let a = compare_on_generated(None, &cfg, Family::Linear, 3, 5, &losses, 1).unwrap();
        let b = compare_on_generated(None, &cfg, Family::Linear, 3, 5, &losses, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6);
        for i in 0..3 {
            assert_eq!(a.rows[i].task_seed, a.rows[3 + i].task_seed);
        }
        assert!(compare_on_generated(None, &cfg, Family::Linear, 1, 5, &[LossName::Mln], 1).is_err());
        assert!(compare_on_generated(None, &cfg, Family::Linear, 0, 5, &losses, 1).is_err());
    }
}
