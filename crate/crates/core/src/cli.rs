//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Family, RunConfig};
use crate::error::{Error, Result};
use crate::evalreport::{
    compare_on_generated, curve_csv, mnist_eval, summarize_curve, sweep_curve, trajectory, MetaTestSet, MnistSettings,
    LOSS_ORDER,
};
use crate::evolution::{history_csv, run_es, tau0, tau1, RunOptions};
use crate::idx::load_mnist;
use crate::loss::{LossKind, LossName, MetaLossNet};
use crate::nn::FlatParams;
use crate::persist::{load_genome, write_text, GenomeFile};
use crate::seeds::derive_seed;
use crate::taskgen::Task;

pub const THREADS_ENV: &str = "EVOLOSS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "evoloss", version, about = "Evolve and evaluate meta-loss networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evolve a meta-loss network.
    Train(TrainArgs),
    /// Compare a genome against cross-entropy and squared error on held-out tasks.
    Eval(EvalArgs),
    /// Write the genome's loss curve mln(p, 1 - p) to curve.csv.
    Sweep(SweepArgs),
    /// Record per-step training of one loss kind on a held-out task.
    Trajectory(TrajectoryArgs),
    /// Train a dense digit classifier with each loss kind.
    Mnist(MnistArgs),
    /// Print a genome's layout, mutation constants and step-size statistics.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Profile name (desk, paper) or path to a JSON config.
    #[arg(long, default_value = "desk")]
    pub config: String,
    /// Worker threads; falls back to EVOLOSS_THREADS, then all cores.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Profile name (desk, paper) or path to a JSON config.
    #[arg(long)]
    pub config: String,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's generation count.
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub genome: PathBuf,
    #[arg(long)]
    pub family: Option<Family>,
    /// Classifier family trained on the tasks; defaults to --family.
    #[arg(long)]
    pub learner: Option<Family>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Overrides the config's evaluation seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub genome: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    pub step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    /// Genome for the mln loss.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    /// Loss kind; defaults to mln when --genome is given.
    #[arg(long)]
    pub loss: Option<LossName>,
    #[arg(long)]
    pub family: Option<Family>,
    /// Index of the held-out task.
    #[arg(long, default_value_t = 0)]
    pub task: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MnistArgs {
    /// Genome for the mln loss.
    #[arg(long)]
    pub genome: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Loss kinds to train with; defaults to all three (ce and mse only without --genome).
    #[arg(long, value_delimiter = ',')]
    pub loss: Vec<LossName>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub genome: PathBuf,
    /// Also write the first held-out task's splits as CSV into this directory.
    #[arg(long)]
    pub dump_task: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub config: String,
}

fn threads(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{THREADS_ENV}='{v}' is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn load_net(path: &Path) -> Result<(GenomeFile, MetaLossNet)> {
    let file = load_genome(path)?;
    let net = MetaLossNet::new(file.spec.clone(), FlatParams::new(file.params.clone()))?;
    Ok((file, net))
}

fn loss_kind<'a>(name: LossName, net: Option<&'a MetaLossNet>) -> Result<LossKind<'a>> {
    Ok(match name {
        LossName::Mln => LossKind::Mln(net.ok_or_else(|| Error::InvalidConfig("the mln loss needs --genome".into()))?),
        LossName::Ce => LossKind::CrossEntropy,
        LossName::Mse => LossKind::MeanSquaredError,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seeds.master = seed;
    }
    if let Some(g) = a.generations {
        cfg.es.generations = Some(g);
    }
    let es = cfg.es_config()?;
    std::fs::create_dir_all(&a.out)?;
    write_text(
        &a.out.join("config.json"),
        &(serde_json::to_string_pretty(&cfg)? + "\n"),
    )?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        threads: threads(a.threads)?,
        resume: a.resume,
    };
    let outcome = run_es(&es, &opts, |s| {
        eprintln!(
            "generation {:>4}  best {:.6e}  median {:.6e}  sigma_med {:.3e}  {:.1}s",
            s.generation, s.best, s.median, s.sigma_med, s.seconds
        );
    })?;
    debug_assert_eq!(
        std::fs::read_to_string(a.out.join("history.csv")).ok(),
        Some(history_csv(&outcome.history))
    );
    println!(
        "best fitness {:.6e} (generation {}), written to {}",
        outcome.best_ref.fitness,
        outcome.best_ref.generation,
        a.out.join("best.mln").display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.common.config)?;
    if a.learner.is_some() {
        cfg.eval.learner = a.learner;
    }
    let (_, net) = load_net(&a.genome)?;
    let family = a.family.unwrap_or(cfg.eval.family);
    let tasks = a.tasks.unwrap_or(cfg.eval.num_tasks);
    let seed = a.seed.unwrap_or(cfg.seeds.eval);
    let report = compare_on_generated(
        Some(&net),
        &cfg,
        family,
        tasks,
        seed,
        &LOSS_ORDER,
        threads(a.common.threads)?,
    )?;
    report.write(&a.out)?;
    for g in &report.aggregates {
        println!(
            "{:<4} accuracy {:.4} ± {:.4}  meta-loss {:.6e} ± {:.3e}  diverged {}",
            g.loss.as_str(),
            g.accuracy_mean,
            g.accuracy_std,
            g.meta_loss_mean,
            g.meta_loss_std,
            g.diverged
        );
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let (_, net) = load_net(&a.genome)?;
    let curve = sweep_curve(&net, a.step)?;
    std::fs::create_dir_all(&a.out)?;
    write_text(&a.out.join("curve.csv"), &curve_csv(&curve))?;
    if let Some(s) = summarize_curve(&curve) {
        println!(
            "argmin p={} loss={:.6}  range [{:.6}, {:.6}]",
            s.argmin_p, s.min_loss, s.min_loss, s.max_loss
        );
    }
    Ok(())
}

fn cmd_trajectory(a: &TrajectoryArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.common.config)?;
    let name = match (a.loss, &a.genome) {
        (Some(l), _) => l,
        (None, Some(_)) => LossName::Mln,
        (None, None) => return Err(Error::InvalidConfig("give --genome or --loss".into())),
    };
    let net = match &a.genome {
        Some(p) => Some(load_net(p)?.1),
        None => None,
    };
    let kind = loss_kind(name, net.as_ref())?;
    let family = a.family.unwrap_or(cfg.eval.family);
    let seed = a.seed.unwrap_or(cfg.seeds.eval);
    let task = MetaTestSet::new(&cfg)?.task(family, seed, a.task)?;
    let inner = cfg.eval_inner(family, name, MetaTestSet::inner_seed(seed, a.task));
    let record = trajectory(&kind, &task, &inner)?;
    std::fs::create_dir_all(&a.out)?;
    write_text(&a.out.join(format!("traj_{name}.csv")), &record.to_csv())?;
    if let Some(r) = record.last() {
        println!(
            "{name}: step {} meta-loss {:.6e} accuracy {:.4}",
            r.step, r.meta_loss, r.val_accuracy
        );
    }
    Ok(())
}

fn cmd_mnist(a: &MnistArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.common.config)?;
    let net = match &a.genome {
        Some(p) => Some(load_net(p)?.1),
        None => None,
    };
    let losses: Vec<LossName> = if !a.loss.is_empty() {
        a.loss.clone()
    } else if net.is_some() {
        LOSS_ORDER.to_vec()
    } else {
        vec![LossName::Ce, LossName::Mse]
    };
    let m = &cfg.eval.mnist;
    let (train, test) = load_mnist(&a.data_dir)?;
    let train = train.truncate(m.train_subset);
    let test = test.truncate(m.test_subset);
    let seed = derive_seed(a.seed.unwrap_or(cfg.seeds.eval), &[crate::seeds::tag::INNER]);
    let pool = crate::evolution::thread_pool(threads(a.common.threads)?)?;
    let mut reports = Vec::new();
    for name in losses {
        let kind = loss_kind(name, net.as_ref())?;
        let settings = MnistSettings {
            hidden: m.hidden,
            epochs: m.epochs,
            batch_size: m.batch_size,
            optimizer: cfg.mnist_optimizer(name),
            seed,
        };
        let r = pool.install(|| mnist_eval(&kind, &train, &test, &settings))?;
        println!("{name}: test accuracy {:.4}", r.test_accuracy);
        reports.push(r);
    }
    std::fs::create_dir_all(&a.out)?;
    write_text(
        &a.out.join("mnist.json"),
        &(serde_json::to_string_pretty(&reports)? + "\n"),
    )
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let file = load_genome(&a.genome)?;
    let n = file.params.len();
    let spec = &file.spec;
    println!("spec: {:?}", spec.layer_dims());
    println!(
        "activations: hidden={:?} output={:?} prelu_per_layer={}",
        spec.hidden_activation(),
        spec.output_activation(),
        spec.prelu_per_layer()
    );
    println!("N_w={}", group_thousands(n));
    println!("tau0={:.6}", tau0(n));
    println!("tau1={:.6}", tau1(n));
    match &file.sigma {
        Some(s) if !s.is_empty() => {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            println!(
                "sigma: min={:.6e} median={:.6e} mean={:.6e} max={:.6e}",
                sorted[0],
                sorted[sorted.len() / 2],
                mean,
                sorted[sorted.len() - 1]
            );
        }
        _ => println!("sigma: none stored"),
    }
    if let Some(dir) = &a.dump_task {
        let cfg = RunConfig::load(&a.config)?;
        let task = MetaTestSet::new(&cfg)?.task(cfg.eval.family, cfg.seeds.eval, 0)?;
        std::fs::create_dir_all(dir)?;
        write_text(
            &dir.join("task_train.csv"),
            &Task::to_csv(&task.train_features, &task.train_labels),
        )?;
        write_text(
            &dir.join("task_val.csv"),
            &Task::to_csv(&task.val_features, &task.val_labels),
        )?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Trajectory(a) => cmd_trajectory(a),
        Command::Mnist(a) => cmd_mnist(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidSpec(_) => 2,
        _ => 1,
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
