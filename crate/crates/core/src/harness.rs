//! Synchronous parameter-server simulation.
//!
//! Every round, all `m` workers read the same parameter snapshot, take
//! `local_steps` SGD steps on their own minibatches and report the resulting
//! parameters together with a gradient evaluated there on a fresh minibatch.
//! The server waits for all `m` reports, then either averages the parameters
//! or applies the quasi-Newton update, and broadcasts the result.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{self, shard, worker_batch_sizes, Dataset, ShardPlan};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Vector};
use crate::objectives::{
    Activation, Batch, Mlp, MlpSpec, Objective, Quadratic, QuadraticSpec, Rosenbrock,
};
use crate::operator::{
    build_operator, center_reports, lr_cap, newton_update, WorkerReport, DEFAULT_LAMBDA,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregator {
    /// Quasi-Newton update from the centered reports.
    DistNewton,
    /// Plain parameter averaging.
    SgdAverage,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::DistNewton => "distnewton",
            Aggregator::SgdAverage => "sgd_average",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distnewton" => Ok(Aggregator::DistNewton),
            "sgd_average" => Ok(Aggregator::SgdAverage),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregator `{other}`"
            ))),
        }
    }
}

/// Where the reported gradient is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportGradient {
    /// A fresh minibatch from the worker's shard.
    Fresh,
    /// The union of every worker's fresh report batch for the round, so
    /// all reports in a round see the same samples.
    Shared,
    /// The whole training set, giving exact gradients.
    Full,
}

impl fmt::Display for ReportGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportGradient::Fresh => "fresh",
            ReportGradient::Shared => "shared",
            ReportGradient::Full => "full",
        })
    }
}

impl FromStr for ReportGradient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(ReportGradient::Fresh),
            "shared" => Ok(ReportGradient::Shared),
            "full" => Ok(ReportGradient::Full),
            other => Err(Error::InvalidArgument(format!(
                "unknown report gradient `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectiveConfig {
    Quadratic {
        dim: usize,
        condition: f64,
        init_scale: f64,
    },
    Rosenbrock {
        dim: usize,
    },
    Mlp {
        layers: Vec<usize>,
        activation: Activation,
        init_scale: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataConfig {
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        limit: usize,
    },
    Blobs {
        features: usize,
        classes: usize,
        samples: usize,
    },
    /// Zero-mean per-sample gradient perturbations for the analytic objectives.
    Noise { samples: usize, scale: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub objective: ObjectiveConfig,
    pub data: DataConfig,
    /// Worker count `m`.
    pub workers: usize,
    pub local_steps: usize,
    pub local_lr: f64,
    pub server_tau: f64,
    pub lambda: f64,
    pub use_lr_cap: bool,
    pub global_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub aggregator: Aggregator,
    pub report_gradient: ReportGradient,
    /// Rayon threads for the worker phase; 0 uses the ambient pool.
    pub threads: usize,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            objective: ObjectiveConfig::Mlp {
                layers: vec![784, 32, 10],
                activation: Activation::Tanh,
                init_scale: 1.0,
            },
            data: DataConfig::Mnist {
                images: PathBuf::from("data/mnist/train-images-idx3-ubyte"),
                labels: PathBuf::from("data/mnist/train-labels-idx1-ubyte"),
                limit: 5000,
            },
            workers: 4,
            local_steps: 1,
            local_lr: 0.01,
            server_tau: 0.01,
            lambda: DEFAULT_LAMBDA,
            use_lr_cap: false,
            global_batch: 256,
            epochs: 50,
            seed: 0,
            aggregator: Aggregator::DistNewton,
            report_gradient: ReportGradient::Fresh,
            threads: 0,
            record_wall_time: false,
        }
    }
}

impl ExperimentConfig {
    /// Checks every field that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        if self.workers == 0 {
            return Err(Error::config("harness.m", "must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("harness.local_steps", "must be at least 1"));
        }
        positive("harness.local_lr", self.local_lr)?;
        positive("operator.tau", self.server_tau)?;
        positive("operator.lambda", self.lambda)?;
        if self.global_batch < self.workers {
            return Err(Error::config(
                "harness.global_batch",
                format!("must be at least harness.m = {}", self.workers),
            ));
        }
        match &self.objective {
            ObjectiveConfig::Quadratic {
                dim,
                condition,
                init_scale,
            } => {
                if *dim == 0 || *dim > 64 {
                    return Err(Error::config("objective.dim", "must be in 1..=64"));
                }
                if !(*condition >= 1.0) {
                    return Err(Error::config("objective.condition", "must be >= 1"));
                }
                if !(*init_scale >= 0.0) {
                    return Err(Error::config("objective.init_scale", "must be >= 0"));
                }
            }
            ObjectiveConfig::Rosenbrock { dim } => {
                if *dim < 2 || dim % 2 != 0 {
                    return Err(Error::config("objective.dim", "must be even and >= 2"));
                }
            }
            ObjectiveConfig::Mlp {
                layers, init_scale, ..
            } => {
                if layers.len() < 2 || layers.contains(&0) {
                    return Err(Error::config(
                        "objective.layers",
                        "needs at least two positive sizes",
                    ));
                }
                if !(*init_scale >= 0.0) {
                    return Err(Error::config("objective.init_scale", "must be >= 0"));
                }
            }
        }
        match (&self.objective, &self.data) {
            (ObjectiveConfig::Mlp { .. }, DataConfig::Noise { .. }) => {
                return Err(Error::config(
                    "data.kind",
                    "an MLP needs mnist or blobs data",
                ));
            }
            (ObjectiveConfig::Quadratic { .. } | ObjectiveConfig::Rosenbrock { .. }, d)
                if !matches!(d, DataConfig::Noise { .. }) =>
            {
                return Err(Error::config(
                    "data.kind",
                    "analytic objectives take noise data",
                ));
            }
            (ObjectiveConfig::Mlp { layers, .. }, DataConfig::Blobs { features, .. })
                if layers[0] != *features =>
            {
                return Err(Error::config(
                    "objective.layers",
                    format!("input layer {} != data.features {features}", layers[0]),
                ));
            }
            _ => {}
        }
        let samples = match &self.data {
            DataConfig::Mnist { limit, .. } => *limit,
            DataConfig::Blobs {
                samples,
                features,
                classes,
            } => {
                if *features == 0 || *classes == 0 {
                    return Err(Error::config(
                        "data.features",
                        "blobs need features and classes",
                    ));
                }
                *samples
            }
            DataConfig::Noise { samples, scale } => {
                if !(*scale >= 0.0) {
                    return Err(Error::config("data.noise_scale", "must be >= 0"));
                }
                *samples
            }
        };
        if samples < self.workers {
            return Err(Error::config(
                "data.samples",
                format!("need at least one sample per worker ({})", self.workers),
            ));
        }
        Ok(())
    }

    /// Loads or generates the data and instantiates the objective and
    /// starting point.
    pub fn build_problem(&self) -> Result<Problem> {
        self.validate()?;
        let dataset = match &self.data {
            DataConfig::Mnist {
                images,
                labels,
                limit,
            } => data::load_idx(images, labels)?.truncated(*limit),
            DataConfig::Blobs {
                features,
                classes,
                samples,
            } => data::synthetic_blobs(*features, *classes, *samples, derive_seed(self.seed, 1))?,
            DataConfig::Noise { samples, scale } => {
                let dim = match self.objective {
                    ObjectiveConfig::Quadratic { dim, .. }
                    | ObjectiveConfig::Rosenbrock { dim } => dim,
                    ObjectiveConfig::Mlp { .. } => unreachable!("rejected by validate"),
                };
                data::noise_dataset(dim, *samples, *scale, derive_seed(self.seed, 1))?
            }
        };
        if dataset.len() < self.workers {
            return Err(Error::config(
                "data.limit",
                format!("{} samples for {} workers", dataset.len(), self.workers),
            ));
        }

        let init_seed = derive_seed(self.seed, 3);
        let (objective, initial): (Box<dyn Objective>, Vector) = match &self.objective {
            ObjectiveConfig::Quadratic {
                dim,
                condition,
                init_scale,
            } => {
                let spec = QuadraticSpec::generate(*dim, *condition, derive_seed(self.seed, 2))?;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(init_seed);
                let initial = spec
                    .minimizer()
                    .iter()
                    .map(|s| s + init_scale * data::gaussian(&mut rng))
                    .collect();
                (Box::new(Quadratic::perturbed(spec)), initial)
            }
            ObjectiveConfig::Rosenbrock { dim } => {
                let obj = Rosenbrock::perturbed(*dim)?;
                let initial = obj.standard_start();
                (Box::new(obj), initial)
            }
            ObjectiveConfig::Mlp {
                layers,
                activation,
                init_scale,
            } => {
                let spec = MlpSpec::new(layers.clone(), *activation)?;
                if spec.inputs() != dataset.features() {
                    return Err(Error::config(
                        "objective.layers",
                        format!(
                            "input layer {} != dataset features {}",
                            spec.inputs(),
                            dataset.features()
                        ),
                    ));
                }
                if spec.classes() < dataset.classes() {
                    return Err(Error::config(
                        "objective.layers",
                        format!(
                            "output layer {} < dataset classes {}",
                            spec.classes(),
                            dataset.classes()
                        ),
                    ));
                }
                let initial = spec.init(init_seed, *init_scale);
                (Box::new(Mlp::new(spec)), initial)
            }
        };
        Ok(Problem {
            objective,
            dataset,
            initial,
        })
    }

    pub fn server_params(&self) -> ServerParams {
        ServerParams {
            aggregator: self.aggregator,
            lambda: self.lambda,
            tau: self.server_tau,
            use_lr_cap: self.use_lr_cap,
        }
    }
}

use rand::SeedableRng;

/// Mixes a run seed with a stream tag (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, 100 + epoch as u64)
}

/// Everything a run needs besides the hyperparameters.
pub struct Problem {
    pub objective: Box<dyn Objective>,
    pub dataset: Dataset,
    pub initial: Vector,
}

/// Hands out each worker's minibatches for one epoch.
///
/// A worker walks through its shard in order, wrapping around, drawing
/// `local_steps + 1` minibatches per round. The number of rounds is chosen so
/// that the whole training set is consumed once per epoch, whatever `m` is.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    plan: ShardPlan,
    sizes: Vec<usize>,
    cursors: Vec<usize>,
    draws_per_round: usize,
}

impl BatchSchedule {
    pub fn new(
        sample_count: usize,
        workers: usize,
        global_batch: usize,
        local_steps: usize,
        epoch_seed: u64,
    ) -> Result<Self> {
        let plan = shard(sample_count, workers, epoch_seed)?;
        if plan.shard_sizes().contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "{sample_count} samples cannot feed {workers} workers"
            )));
        }
        Ok(BatchSchedule {
            plan,
            sizes: worker_batch_sizes(global_batch, workers),
            cursors: vec![0; workers],
            draws_per_round: local_steps + 1,
        })
    }

    pub fn rounds_per_epoch(sample_count: usize, global_batch: usize, local_steps: usize) -> usize {
        sample_count
            .div_ceil(global_batch * (local_steps + 1))
            .max(1)
    }

    pub fn plan(&self) -> &ShardPlan {
        &self.plan
    }

    /// For each worker, `local_steps + 1` index lists: the step batches then
    /// the report batch.
    pub fn next_round(&mut self) -> Vec<Vec<Vec<usize>>> {
        (0..self.plan.m)
            .map(|k| {
                let shard = self.plan.shard(k);
                (0..self.draws_per_round)
                    .map(|_| {
                        let batch = (0..self.sizes[k])
                            .map(|i| shard[(self.cursors[k] + i) % shard.len()])
                            .collect();
                        self.cursors[k] = (self.cursors[k] + self.sizes[k]) % shard.len();
                        batch
                    })
                    .collect()
            })
            .collect()
    }
}

/// `s` local SGD steps from `theta_read`, then the gradient at the result.
pub fn worker_round(
    theta_read: &[f64],
    objective: &dyn Objective,
    step_batches: &[Option<Batch<'_>>],
    report_batch: Option<Batch<'_>>,
    local_lr: f64,
) -> Result<WorkerReport> {
    if step_batches.is_empty() {
        return Err(Error::InvalidArgument(
            "a worker needs at least one local step".into(),
        ));
    }
    let mut theta = Vector::from_slice(theta_read);
    for &batch in step_batches {
        let (_, grad) = objective.value_grad(&theta, batch)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite { what: "gradient" });
        }
        axpy(-local_lr, &grad, &mut theta);
    }
    let (_, grad) = objective.value_grad(&theta, report_batch)?;
    WorkerReport::new(theta, grad)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ServerParams {
    pub aggregator: Aggregator,
    pub lambda: f64,
    pub tau: f64,
    pub use_lr_cap: bool,
}

/// Diagnostics from one aggregation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundStats {
    /// Singular values of the centered gradients, empty for averaging.
    pub sigma: Vector,
    pub retained: usize,
    /// Step size actually used.
    pub tau: f64,
}

impl RoundStats {
    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }
}

pub fn server_round(
    reports: &[WorkerReport],
    params: &ServerParams,
) -> Result<(Vector, RoundStats)> {
    match params.aggregator {
        Aggregator::SgdAverage => {
            let first = reports.first().ok_or(Error::EmptyReports)?;
            let mut mean = Vector::zeros(first.dim());
            for r in reports {
                crate::error::check_len("server_round parameters", mean.len(), r.theta.len())?;
                axpy(1.0, &r.theta, &mut mean);
            }
            let inv = 1.0 / reports.len() as f64;
            mean.iter_mut().for_each(|v| *v *= inv);
            Ok((mean, RoundStats::default()))
        }
        Aggregator::DistNewton => {
            let batch = center_reports(reports)?;
            let op = build_operator(&batch, params.lambda)?;
            let tau = if params.use_lr_cap {
                lr_cap(params.tau, &op)
            } else {
                params.tau
            };
            let theta = newton_update(&op, batch.theta_bar(), batch.g_bar(), tau)?;
            let stats = RoundStats {
                sigma: op.sigma_full().clone(),
                retained: op.rank(),
                tau,
            };
            Ok((theta, stats))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_nll: f64,
    /// Mean over the epoch's rounds of the largest singular value.
    pub sigma_max: f64,
    /// Mean over the epoch's rounds of the retained rank.
    pub retained_j: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub config: ExperimentConfig,
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
    /// Training objective at the starting point.
    pub initial_nll: f64,
    /// Parameters after the last completed round.
    pub final_theta: Vector,
}

impl RunHistory {
    pub fn final_nll(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_nll)
    }
}

/// Hooks into the round loop, for instrumentation and tests.
///
/// `worker_reported` may be called concurrently from several threads.
pub trait Observer: Sync {
    /// Worker `worker` finished round `round` after reading snapshot
    /// `snapshot` and consuming `samples` training samples.
    fn worker_reported(&self, _round: usize, _worker: usize, _snapshot: usize, _samples: usize) {}

    /// The server aggregated round `round` into `theta`.
    fn round_completed(
        &self,
        _round: usize,
        _reports: &[WorkerReport],
        _theta: &Vector,
        _stats: &RoundStats,
    ) {
    }
}

struct NoObserver;

impl Observer for NoObserver {}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunHistory> {
    run_experiment_observed(config, &NoObserver)
}

pub fn run_experiment_observed(
    config: &ExperimentConfig,
    observer: &dyn Observer,
) -> Result<RunHistory> {
    let problem = config.build_problem()?;
    run_problem(config, &problem, observer)
}

/// Runs with an already built problem, which lets callers share one dataset
/// between several runs.
pub fn run_problem(
    config: &ExperimentConfig,
    problem: &Problem,
    observer: &dyn Observer,
) -> Result<RunHistory> {
    config.validate()?;
    if config.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| simulate(config, problem, observer))
    } else {
        simulate(config, problem, observer)
    }
}

fn simulate(
    config: &ExperimentConfig,
    problem: &Problem,
    observer: &dyn Observer,
) -> Result<RunHistory> {
    let dataset = &problem.dataset;
    let objective = problem.objective.as_ref();
    let full = Batch::full(dataset);
    let params = config.server_params();
    let rounds =
        BatchSchedule::rounds_per_epoch(dataset.len(), config.global_batch, config.local_steps);

    let mut history = RunHistory {
        config: config.clone(),
        records: Vec::new(),
        status: RunStatus::Completed,
        initial_nll: objective.value(&problem.initial, Some(full))?,
        final_theta: problem.initial.clone(),
    };
    let mut theta = problem.initial.clone();
    let mut round = 0;

    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut schedule = BatchSchedule::new(
            dataset.len(),
            config.workers,
            config.global_batch,
            config.local_steps,
            epoch_seed(config.seed, epoch),
        )?;
        let (mut sigma_sum, mut rank_sum) = (0.0, 0.0);

        for _ in 0..rounds {
            let assignments = schedule.next_round();
            let shared: Vec<usize> = match config.report_gradient {
                ReportGradient::Shared => assignments
                    .iter()
                    .flat_map(|draws| draws[config.local_steps].iter().copied())
                    .collect(),
                _ => Vec::new(),
            };
            let snapshot = &theta;
            let outcomes: Vec<Result<WorkerReport>> = assignments
                .par_iter()
                .enumerate()
                .map(|(k, draws)| {
                    let (steps, report) = draws.split_at(config.local_steps);
                    let step_batches = steps
                        .iter()
                        .map(|idx| Batch::subset(dataset, idx).map(Some))
                        .collect::<Result<Vec<_>>>()?;
                    let report_batch = match config.report_gradient {
                        ReportGradient::Fresh => Batch::subset(dataset, &report[0])?,
                        ReportGradient::Shared => Batch::subset(dataset, &shared)?,
                        ReportGradient::Full => full,
                    };
                    let out = worker_round(
                        snapshot,
                        objective,
                        &step_batches,
                        Some(report_batch),
                        config.local_lr,
                    );
                    let samples = draws.iter().map(Vec::len).sum();
                    observer.worker_reported(round, k, round, samples);
                    out
                })
                .collect();

            let mut reports = Vec::with_capacity(outcomes.len());
            for outcome in outcomes {
                match outcome {
                    Ok(r) => reports.push(r),
                    Err(e) if e.is_divergence() => {
                        history.status = RunStatus::Diverged;
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }

            let (next, stats) = server_round(&reports, &params)?;
            if !next.is_finite() {
                history.status = RunStatus::Diverged;
                break 'epochs;
            }
            observer.round_completed(round, &reports, &next, &stats);
            sigma_sum += stats.sigma_max();
            rank_sum += stats.retained as f64;
            theta = next;
            history.final_theta = theta.clone();
            round += 1;
        }

        let train_nll = objective.value(&theta, Some(full))?;
        if !train_nll.is_finite() {
            history.status = RunStatus::Diverged;
            break;
        }
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_nll,
            sigma_max: sigma_sum / rounds as f64,
            retained_j: rank_sum / rounds as f64,
            wall_time_s: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(history)
}
