//! Self-adaptive `(mu + lambda)` evolution strategy over meta-loss genomes.
//!
//! Each generation clones uniformly random parents into `lambda` children,
//! mutates the per-gene step sizes log-normally and then the parameters with
//! those step sizes, scores all `mu + lambda` individuals on freshly sampled
//! meta-training tasks, and keeps the best `mu`.
//!
//! Every random draw is keyed by `(master_seed, generation, index)`, and
//! fitness results are gathered in worker order, so a run is bit-identical
//! for any thread count. Genomes are rounded to `f32` when created, which
//! makes the `f32` checkpoint files lossless and resumed runs identical to
//! uninterrupted ones.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::innerloop::{meta_loss, train_classifier, InnerConfig};
use crate::loss::{LossKind, MetaLossNet};
use crate::nn::{self, FlatParams, MlpSpec};
use crate::persist::{self, to_stored_precision};
use crate::seeds::{derive_seed, rng_for, tag};
use crate::taskgen::{generate_task, DataConfig, MasterSplit, Provenance, Task, TaskConfig};

/// Fitness assigned when the inner loop diverges; below any attainable
/// negated meta-loss.
pub const DIVERGED_FITNESS: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Genome {
    pub params: FlatParams,
    pub sigma: Vec<f64>,
}

impl Genome {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Rounds parameters and step sizes to the stored `f32` precision.
    pub fn quantize(&mut self) {
        self.params.iter_mut().for_each(|v| *v = to_stored_precision(*v));
        self.sigma.iter_mut().for_each(|v| *v = to_stored_precision(*v));
    }

    pub fn meta_loss_net(&self) -> Result<MetaLossNet> {
        MetaLossNet::canonical(self.params.clone())
    }
}

/// `1 / sqrt(2 sqrt(n))`, the per-gene learning rate of the step sizes.
pub fn tau0(genome_length: usize) -> f64 {
    1.0 / (2.0 * (genome_length as f64).sqrt()).sqrt()
}

/// `1 / sqrt(2 n)`, the learning rate of the shared step-size factor.
pub fn tau1(genome_length: usize) -> f64 {
    1.0 / (2.0 * genome_length as f64).sqrt()
}

/// Source of standard normal draws; lets tests force the noise.
pub trait NormalSource {
    fn standard_normal(&mut self) -> f64;
}

pub struct Gaussian<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> NormalSource for Gaussian<'_, R> {
    fn standard_normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }
}

/// Every draw is zero.
pub struct ZeroNoise;

impl NormalSource for ZeroNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MutationParams {
    pub tau0: f64,
    pub tau1: f64,
    pub sigma_floor: f64,
    /// Draw the `tau1` term per gene instead of once per child.
    pub per_gene_global: bool,
}

impl MutationParams {
    pub fn for_length(genome_length: usize, sigma_floor: f64, per_gene_global: bool) -> Self {
        Self {
            tau0: tau0(genome_length),
            tau1: tau1(genome_length),
            sigma_floor,
            per_gene_global,
        }
    }
}

/// `sigma'_j = max(floor, sigma_j exp(tau0 n_j + tau1 g))`, then
/// `params'_j = params_j + sigma'_j m_j`.
pub fn mutate(parent: &Genome, m: &MutationParams, noise: &mut impl NormalSource) -> Genome {
    let shared = noise.standard_normal();
    let sigma: Vec<f64> = parent
        .sigma
        .iter()
        .map(|&s| {
            let local = noise.standard_normal();
            let global = if m.per_gene_global {
                noise.standard_normal()
            } else {
                shared
            };
            (s * (m.tau0 * local + m.tau1 * global).exp()).max(m.sigma_floor)
        })
        .collect();
    let params: Vec<f64> = parent
        .params
        .iter()
        .zip(&sigma)
        .map(|(&p, &s)| p + s * noise.standard_normal())
        .collect();
    Genome {
        params: params.into(),
        sigma,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub mu: usize,
    pub lambda: usize,
    pub sigma_init: f64,
    pub generations: usize,
    pub sigma_floor: f64,
    pub eq5_literal: bool,
    pub master_seed: u64,
    /// Inner-loop settings; the seed is replaced per evaluation.
    pub inner: InnerConfig,
    pub task: TaskConfig,
    pub data: DataConfig,
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu == 0 || self.lambda == 0 {
            return Err(Error::InvalidConfig("mu and lambda must be >= 1".into()));
        }
        if !(self.sigma_init > 0.0 && self.sigma_floor > 0.0) {
            return Err(Error::InvalidConfig("sigma_init and sigma_floor must be > 0".into()));
        }
        if self.inner.batch_size > self.task.n_train {
            return Err(Error::InvalidConfig("batch size exceeds task training size".into()));
        }
        Ok(())
    }

    pub fn mutation(&self) -> MutationParams {
        MutationParams::for_length(
            MlpSpec::canonical_mln().genome_length(),
            self.sigma_floor,
            self.eq5_literal,
        )
    }
}

pub fn init_population<R: Rng + ?Sized>(cfg: &EsConfig, rng: &mut R) -> Vec<Genome> {
    let spec = MlpSpec::canonical_mln();
    (0..cfg.mu)
        .map(|_| {
            let params = nn::xavier_init(&spec, rng);
            Genome {
                sigma: vec![cfg.sigma_init; params.len()],
                params,
            }
        })
        .collect()
}

/// Scores genomes on meta-training tasks drawn from one materialized master
/// split.
pub struct FitnessContext {
    cfg: EsConfig,
    master: MasterSplit,
}

impl FitnessContext {
    pub fn new(cfg: &EsConfig) -> Result<Self> {
        cfg.validate()?;
        let master = cfg.data.master_split(cfg.master_seed, Provenance::MetaTrain)?;
        Ok(Self { cfg: *cfg, master })
    }

    pub fn config(&self) -> &EsConfig {
        &self.cfg
    }

    pub fn task(&self, generation: usize, worker: usize) -> Result<Task> {
        let mut rng = rng_for(
            self.cfg.master_seed,
            &[tag::TRAIN_TASK, generation as u64, worker as u64],
        );
        generate_task(&self.cfg.task, &self.master, &mut rng)
    }

    pub fn inner_config(&self, generation: usize, worker: usize) -> InnerConfig {
        InnerConfig {
            seed: derive_seed(self.cfg.master_seed, &[tag::INNER, generation as u64, worker as u64]),
            record_every: 0,
            ..self.cfg.inner
        }
    }

    /// Negated meta-loss after training with `genome` as the loss, or
    /// [`DIVERGED_FITNESS`] when training diverges.
    pub fn evaluate(&self, genome: &Genome, generation: usize, worker: usize) -> Result<f64> {
        let net = genome.meta_loss_net()?;
        let task = self.task(generation, worker)?;
        let inner = self.inner_config(generation, worker);
        match train_classifier(&task, &inner, &LossKind::Mln(&net)) {
            Ok((params, _)) => {
                let spec = inner.classifier.spec(task.dim(), 2);
                Ok(-meta_loss(&params, &spec, &task)?)
            }
            Err(Error::Diverged { .. }) => Ok(DIVERGED_FITNESS),
            Err(e) => Err(e),
        }
    }
}

/// The `mu` fittest individuals, best first; equal fitness keeps the lower
/// index first.
pub fn select<T>(scored: Vec<(T, f64)>, mu: usize) -> Vec<(T, f64)> {
    let mut order: Vec<(usize, (T, f64))> = scored.into_iter().enumerate().collect();
    order.sort_by(|a, b| b.1 .1.total_cmp(&a.1 .1).then(a.0.cmp(&b.0)));
    order.into_iter().take(mu).map(|(_, s)| s).collect()
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    /// Fitness of every individual evaluated this generation, in worker order.
    pub fitness: Vec<f64>,
    pub best: f64,
    pub median: f64,
    pub mean: f64,
    pub sigma_min: f64,
    pub sigma_med: f64,
    pub sigma_max: f64,
    pub seconds: f64,
}

impl GenerationStats {
    fn new(generation: usize, fitness: Vec<f64>, population: &[Genome], seconds: f64) -> Self {
        let best = fitness.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = fitness.iter().sum::<f64>() / fitness.len() as f64;
        let med = median(&mut fitness.clone());
        let mut sigmas: Vec<f64> = population.iter().flat_map(|g| g.sigma.iter().copied()).collect();
        let sigma_min = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
        let sigma_max = sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sigma_med = median(&mut sigmas);
        Self {
            generation,
            fitness,
            best,
            median: med,
            mean,
            sigma_min,
            sigma_med,
            sigma_max,
            seconds,
        }
    }
}

pub const HISTORY_HEADER: &str = "generation,best,median,mean,sigma_min,sigma_med,sigma_max";

/// History as CSV. Wall time lives in `timing.csv` so this file is
/// reproducible byte for byte.
pub fn history_csv(history: &[GenerationStats]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for s in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.generation, s.best, s.median, s.mean, s.sigma_min, s.sigma_med, s.sigma_max
        ));
    }
    out
}

pub fn timing_csv(history: &[GenerationStats]) -> String {
    let mut out = String::from("generation,seconds\n");
    for s in history {
        out.push_str(&format!("{},{:.3}\n", s.generation, s.seconds));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRef {
    pub fitness: f64,
    pub generation: usize,
    pub worker: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointState {
    generation: usize,
    best: BestRef,
    history: Vec<GenerationStats>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: EsConfig,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint directory; `None` runs in memory only.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
    /// Continue from the checkpoint in `out_dir` when one exists.
    pub resume: bool,
}

#[derive(Clone, Debug)]
pub struct EsOutcome {
    pub best: Genome,
    pub best_ref: BestRef,
    pub history: Vec<GenerationStats>,
    /// Survivors of the final generation, best first.
    pub population: Vec<Genome>,
}

fn population_path(dir: &Path, generation: usize) -> PathBuf {
    dir.join(format!("population_{generation:04}.mln"))
}

pub fn generation_path(dir: &Path, generation: usize) -> PathBuf {
    dir.join(format!("gen_{generation:04}.mln"))
}

struct Checkpointer<'a> {
    dir: &'a Path,
    spec: MlpSpec,
}

impl Checkpointer<'_> {
    fn write(&self, state: &CheckpointState, parents: &[Genome], gen_best: &Genome, best: &Genome) -> Result<()> {
        let g = state.generation;
        persist::save_genome(
            &generation_path(self.dir, g),
            &self.spec,
            &gen_best.params,
            Some(&gen_best.sigma),
        )?;
        let members: Vec<(&[f64], &[f64])> = parents.iter().map(|p| (&p.params[..], &p.sigma[..])).collect();
        persist::save_population(&population_path(self.dir, g), &self.spec, &members)?;
        persist::save_genome(&self.dir.join("best.mln"), &self.spec, &best.params, Some(&best.sigma))?;
        persist::write_text(&self.dir.join("history.csv"), &history_csv(&state.history))?;
        persist::write_text(&self.dir.join("timing.csv"), &timing_csv(&state.history))?;
        // state.json is the commit point of a generation.
        persist::write_text(&self.dir.join("state.json"), &serde_json::to_string(state)?)?;
        if g > 0 {
            let stale = population_path(self.dir, g - 1);
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
        Ok(())
    }

    fn load(&self) -> Result<Option<(CheckpointState, Vec<Genome>, Genome)>> {
        let state_path = self.dir.join("state.json");
        if !state_path.exists() {
            return Ok(None);
        }
        let state: CheckpointState = serde_json::from_str(&fs::read_to_string(state_path)?)?;
        let to_genome = |f: persist::GenomeFile| -> Result<Genome> {
            if f.spec != self.spec {
                return Err(Error::Checkpoint("genome spec differs from the meta-loss spec".into()));
            }
            let sigma = f
                .sigma
                .ok_or_else(|| Error::Checkpoint("genome without sigma".into()))?;
            Ok(Genome {
                params: f.params.into(),
                sigma,
            })
        };
        let parents = persist::load_population(&population_path(self.dir, state.generation))?
            .into_iter()
            .map(to_genome)
            .collect::<Result<Vec<_>>>()?;
        let best = to_genome(persist::load_genome(&self.dir.join("best.mln"))?)?;
        Ok(Some((state, parents, best)))
    }
}

/// Runs the strategy for `cfg.generations` generations after generation 0.
/// A rayon pool with `threads` workers; 0 uses rayon's default.
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        builder = builder.num_threads(threads);
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

pub fn run_es(cfg: &EsConfig, opts: &RunOptions, mut progress: impl FnMut(&GenerationStats)) -> Result<EsOutcome> {
    let ctx = FitnessContext::new(cfg)?;
    let mutation = cfg.mutation();
    let spec = MlpSpec::canonical_mln();
    let pool = thread_pool(opts.threads)?;

    let checkpointer = opts.out_dir.as_deref().map(|dir| Checkpointer {
        dir,
        spec: spec.clone(),
    });
    if let Some(dir) = opts.out_dir.as_deref() {
        fs::create_dir_all(dir)?;
        let manifest_path = dir.join("manifest.json");
        if opts.resume && manifest_path.exists() {
            let old: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
            let mut comparable = old.config;
            comparable.generations = cfg.generations;
            if comparable != *cfg {
                return Err(Error::Checkpoint(
                    "configuration differs from the checkpointed run (only generations may change)".into(),
                ));
            }
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: *cfg,
        };
        persist::write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    }

    let evaluate_all = |population: &[Genome], generation: usize| -> Result<Vec<f64>> {
        pool.install(|| {
            population
                .par_iter()
                .enumerate()
                .map(|(worker, g)| ctx.evaluate(g, generation, worker))
                .collect()
        })
    };

    let resumed = match (&checkpointer, opts.resume) {
        (Some(c), true) => c.load()?,
        _ => None,
    };

    let (mut parents, mut history, mut best, mut best_ref, start) = match resumed {
        Some((state, parents, best)) => {
            if parents.len() != cfg.mu {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds {} parents, config wants {}",
                    parents.len(),
                    cfg.mu
                )));
            }
            (parents, state.history, best, state.best, state.generation + 1)
        }
        None => {
            let started = Instant::now();
            let mut initial = init_population(cfg, &mut rng_for(cfg.master_seed, &[tag::POPULATION_INIT]));
            initial.iter_mut().for_each(Genome::quantize);
            let fitness = evaluate_all(&initial, 0)?;
            let stats = GenerationStats::new(0, fitness.clone(), &initial, started.elapsed().as_secs_f64());
            let (best_worker, &best_fit) = fitness
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("mu >= 1");
            let best = initial[best_worker].clone();
            let best_ref = BestRef {
                fitness: best_fit,
                generation: 0,
                worker: best_worker,
            };
            let survivors: Vec<Genome> = select(initial.into_iter().zip(fitness).collect(), cfg.mu)
                .into_iter()
                .map(|(g, _)| g)
                .collect();
            progress(&stats);
            let history = vec![stats];
            if let Some(c) = &checkpointer {
                let state = CheckpointState {
                    generation: 0,
                    best: best_ref,
                    history,
                };
                c.write(&state, &survivors, &survivors[0], &best)?;
                (survivors, state.history, best, best_ref, 1)
            } else {
                (survivors, history, best, best_ref, 1)
            }
        }
    };

    for generation in start..=cfg.generations {
        let started = Instant::now();
        let mut breed = rng_for(cfg.master_seed, &[tag::BREED, generation as u64]);
        let parent_picks: Vec<usize> = (0..cfg.lambda).map(|_| breed.random_range(0..parents.len())).collect();
        let children: Vec<Genome> = pool.install(|| {
            parent_picks
                .par_iter()
                .enumerate()
                .map(|(c, &p)| {
                    let mut rng = rng_for(cfg.master_seed, &[tag::MUTATE, generation as u64, c as u64]);
                    let mut child = mutate(&parents[p], &mutation, &mut Gaussian(&mut rng));
                    child.quantize();
                    child
                })
                .collect()
        });

        let mut population = std::mem::take(&mut parents);
        population.extend(children);
        let fitness = evaluate_all(&population, generation)?;
        let stats = GenerationStats::new(
            generation,
            fitness.clone(),
            &population,
            started.elapsed().as_secs_f64(),
        );

        for (worker, &f) in fitness.iter().enumerate() {
            if f > best_ref.fitness {
                best_ref = BestRef {
                    fitness: f,
                    generation,
                    worker,
                };
                best = population[worker].clone();
            }
        }

        parents = select(population.into_iter().zip(fitness).collect(), cfg.mu)
            .into_iter()
            .map(|(g, _)| g)
            .collect();
        progress(&stats);
        history.push(stats);

        if let Some(c) = &checkpointer {
            let state = CheckpointState {
                generation,
                best: best_ref,
                history,
            };
            c.write(&state, &parents, &parents[0], &best)?;
            history = state.history;
        }
    }

    Ok(EsOutcome {
        best,
        best_ref,
        history,
        population: parents,
    })
}
