//! Experiment commands: `run`, `sweep` and `grad-check`.
//!
//! Each command is a plain function returning a typed outcome; [`main_with`]
//! wraps them with argument parsing, printing and exit codes for the
//! `distnewton` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, FileConfig};
use crate::data::gaussian;
use crate::error::{Error, Result};
use crate::harness::{
    derive_seed, run_problem, Aggregator, EpochRecord, ExperimentConfig, ObjectiveConfig, Observer,
    Problem, RunHistory, RunStatus,
};
use crate::linalg::Vector;
use crate::objectives::{check_gradient, Activation, Batch, Objective};

pub const CSV_HEADER: [&str; 5] = [
    "epoch",
    "train_nll",
    "sigma_max",
    "retained_j",
    "wall_time_s",
];

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    ConfigError = 1,
    Diverged = 2,
    Internal = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn from_error(e: &Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidArgument(_) | Error::Io { .. } | Error::Idx(_) => {
                ExitStatus::ConfigError
            }
            _ => ExitStatus::Internal,
        }
    }
}

/// File stem for one curve, e.g. `distnewton-m8`.
pub fn curve_label(config: &ExperimentConfig) -> String {
    format!("{}-m{}", config.aggregator, config.workers)
}

fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV text for a history: header, one row per epoch, then a `#status=`
/// comment row.
pub fn history_csv(history: &RunHistory) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in &history.records {
        w.write_record([
            r.epoch.to_string(),
            fmt_num(r.train_nll),
            fmt_num(r.sigma_max),
            fmt_num(r.retained_j),
            fmt_num(r.wall_time_s),
        ])?;
    }
    let mut text = String::from_utf8(
        w.into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?,
    )
    .expect("csv output is ascii");
    writeln!(
        text,
        "#status={},epochs={}",
        history.status,
        history.records.len()
    )
    .unwrap();
    Ok(text)
}

/// What a CSV history file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvHistory {
    pub records: Vec<EpochRecord>,
    pub status: RunStatus,
}

pub fn parse_history_csv(text: &str) -> Result<CsvHistory> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "unexpected csv header {header:?}"
        )));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::InvalidArgument(format!("bad number `{s}`: {e}")))
    };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        records.push(EpochRecord {
            epoch: row[0]
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad epoch `{}`: {e}", &row[0])))?,
            train_nll: num(&row[1])?,
            sigma_max: num(&row[2])?,
            retained_j: num(&row[3])?,
            wall_time_s: num(&row[4])?,
        });
    }
    let status = text
        .lines()
        .filter_map(|l| l.strip_prefix("#status="))
        .next_back()
        .map(|s| match s.split(',').next() {
            Some("diverged") => Ok(RunStatus::Diverged),
            Some("completed") => Ok(RunStatus::Completed),
            other => Err(Error::InvalidArgument(format!("unknown status {other:?}"))),
        })
        .transpose()?
        .unwrap_or(RunStatus::Completed);
    Ok(CsvHistory { records, status })
}

pub fn read_history_csv(path: &Path) -> Result<CsvHistory> {
    parse_history_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// One line of a summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSummary {
    pub label: String,
    pub final_nll: Option<f64>,
    pub epochs: usize,
    pub status: String,
}

impl CurveSummary {
    fn of(label: String, history: &RunHistory) -> Self {
        CurveSummary {
            label,
            final_nll: history.final_nll(),
            epochs: history.records.len(),
            status: history.status.to_string(),
        }
    }
}

/// Ascending final NLL; diverged, failed and empty curves go last.
pub fn summary_table(curves: &[CurveSummary]) -> String {
    let mut sorted: Vec<&CurveSummary> = curves.iter().collect();
    sorted.sort_by(|a, b| {
        let key = |c: &CurveSummary| {
            (
                c.status != "completed" || c.final_nll.is_none(),
                c.final_nll,
            )
        };
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then_with(|| {
            ka.1.unwrap_or(f64::INFINITY)
                .total_cmp(&kb.1.unwrap_or(f64::INFINITY))
        })
    });
    let mut out = format!(
        "{:<20} {:>24} {:>7}  {}\n",
        "curve", "final_train_nll", "epochs", "status"
    );
    for c in sorted {
        let nll = c.final_nll.map_or_else(|| "-".to_string(), fmt_num);
        writeln!(
            out,
            "{:<20} {:>24} {:>7}  {}",
            c.label, nll, c.epochs, c.status
        )
        .unwrap();
    }
    out
}

/// Writes files into `dir`, deleting everything it wrote if a later write
/// fails.
struct OutputDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        match fs::write(&path, contents) {
            Ok(()) => {
                self.written.push(path.clone());
                Ok(path)
            }
            Err(e) => {
                self.discard();
                Err(Error::io(path, e))
            }
        }
    }

    fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(p);
        }
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub history: RunHistory,
    pub csv_path: PathBuf,
    pub summary: String,
}

impl RunOutcome {
    pub fn exit_status(&self) -> ExitStatus {
        match self.history.status {
            RunStatus::Completed => ExitStatus::Success,
            RunStatus::Diverged => ExitStatus::Diverged,
        }
    }
}

struct Quiet;

impl Observer for Quiet {}

/// Runs one experiment and writes `<curve>.csv`, `summary.txt` and
/// `config.resolved` into `out`.
pub fn run(config: &FileConfig, out: &Path) -> Result<RunOutcome> {
    let problem = config.experiment.build_problem()?;
    let history = run_problem(&config.experiment, &problem, &Quiet)?;
    let label = curve_label(&config.experiment);
    let summary = summary_table(&[CurveSummary::of(label.clone(), &history)]);

    let mut dir = OutputDir::create(out)?;
    let csv_path = dir.write(&format!("{label}.csv"), &history_csv(&history)?)?;
    dir.write("summary.txt", &summary)?;
    dir.write("config.resolved", &config::render(config))?;
    Ok(RunOutcome {
        history,
        csv_path,
        summary,
    })
}

#[derive(Debug)]
pub struct SweepCell {
    pub label: String,
    pub result: Result<RunHistory>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    pub summary: String,
}

impl SweepOutcome {
    pub fn exit_status(&self) -> ExitStatus {
        let mut status = ExitStatus::Success;
        for c in &self.cells {
            match &c.result {
                Err(_) => return ExitStatus::Internal,
                Ok(h) if h.status == RunStatus::Diverged => status = ExitStatus::Diverged,
                Ok(_) => {}
            }
        }
        status
    }
}

/// Default worker counts for a sweep.
pub const SWEEP_WORKERS: [usize; 4] = [1, 2, 4, 8];

/// DistNewton at every worker count plus one averaging baseline at `m = 1`.
/// With a fixed global batch the baseline curve does not depend on `m`.
pub fn sweep(config: &FileConfig, workers: &[usize], out: &Path) -> Result<SweepOutcome> {
    if workers.is_empty() || workers.contains(&0) {
        return Err(Error::config("--workers", "worker counts must be >= 1"));
    }
    let cells_cfg: Vec<ExperimentConfig> = workers
        .iter()
        .map(|&m| ExperimentConfig {
            workers: m,
            aggregator: Aggregator::DistNewton,
            ..config.experiment.clone()
        })
        .chain(std::iter::once(ExperimentConfig {
            workers: 1,
            aggregator: Aggregator::SgdAverage,
            ..config.experiment.clone()
        }))
        .collect();
    for c in &cells_cfg {
        c.validate()?;
    }
    let base = ExperimentConfig {
        workers: 1,
        ..config.experiment.clone()
    };
    let problem: Problem = base.build_problem()?;

    let mut dir = OutputDir::create(out)?;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for cfg in cells_cfg {
        let label = curve_label(&cfg);
        let result = run_problem(&cfg, &problem, &Quiet);
        match &result {
            Ok(h) => {
                dir.write(&format!("{label}.csv"), &history_csv(h)?)?;
                rows.push(CurveSummary::of(label.clone(), h));
            }
            Err(e) => rows.push(CurveSummary {
                label: label.clone(),
                final_nll: None,
                epochs: 0,
                status: format!("failed: {e}"),
            }),
        }
        cells.push(SweepCell { label, result });
    }
    let summary = summary_table(&rows);
    dir.write("summary.txt", &summary)?;
    dir.write("config.resolved", &config::render(config))?;
    Ok(SweepOutcome { cells, summary })
}

/// Adds `1e-3 · max(1, |g|)` to every gradient entry.
struct Corrupted<'a>(&'a dyn Objective);

impl Objective for Corrupted<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn is_stochastic(&self) -> bool {
        self.0.is_stochastic()
    }

    fn value(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<f64> {
        self.0.value(theta, batch)
    }

    fn value_grad(&self, theta: &[f64], batch: Option<Batch<'_>>) -> Result<(f64, Vector)> {
        let (v, mut g) = self.0.value_grad(theta, batch)?;
        g.iter_mut().for_each(|x| *x += 1e-3 * x.abs().max(1.0));
        Ok((v, g))
    }

    fn smooth_along(
        &self,
        theta: &[f64],
        batch: Option<Batch<'_>>,
        coord: usize,
        h: f64,
    ) -> Result<bool> {
        self.0.smooth_along(theta, batch, coord, h)
    }
}

/// Default `(step, threshold)` for an objective.
pub fn grad_check_defaults(objective: &ObjectiveConfig) -> (f64, f64) {
    match objective {
        ObjectiveConfig::Quadratic { .. } => (1e-4, 1e-8),
        ObjectiveConfig::Rosenbrock { .. } => (1e-5, 1e-6),
        ObjectiveConfig::Mlp {
            activation: Activation::Tanh,
            ..
        } => (1e-5, 1e-6),
        ObjectiveConfig::Mlp {
            activation: Activation::Relu,
            ..
        } => (1e-5, 1e-5),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOutcome {
    pub max_error: f64,
    pub worst_point: usize,
    pub worst_coord: usize,
    pub threshold: f64,
    pub step: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_error <= self.threshold
    }
}

/// Seeded evaluation point `index` for a grad check.
fn check_point(config: &ExperimentConfig, problem: &Problem, index: usize) -> Vector {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1000 + index as u64));
    match &config.objective {
        ObjectiveConfig::Rosenbrock { .. } => {
            use rand::Rng;
            (0..problem.initial.len())
                .map(|_| rng.random_range(-1.5..1.5))
                .collect()
        }
        // Spread around the starting point so the biases are nonzero too.
        _ => problem
            .initial
            .iter()
            .map(|t| t + 0.1 * gaussian(&mut rng))
            .collect(),
    }
}

/// Compares analytic and central-difference gradients at `points` seeded
/// points, each on its own seeded minibatch.
pub fn grad_check(config: &FileConfig) -> Result<GradCheckOutcome> {
    let x = &config.experiment;
    let g = &config.grad_check;
    let problem = x.build_problem()?;
    let (default_step, default_threshold) = grad_check_defaults(&x.objective);
    let step = g.step.unwrap_or(default_step);
    let threshold = g.threshold.unwrap_or(default_threshold);
    let corrupted = Corrupted(problem.objective.as_ref());
    let objective: &dyn Objective = if g.corrupt {
        &corrupted
    } else {
        problem.objective.as_ref()
    };

    let dim = objective.dim();
    let n = problem.dataset.len();
    let mut outcome = GradCheckOutcome {
        max_error: 0.0,
        worst_point: 0,
        worst_coord: 0,
        threshold,
        step,
        checked: 0,
        skipped: 0,
    };
    for p in 0..g.points {
        let theta = check_point(x, &problem, p);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(x.seed, 2000 + p as u64));
        let batch_idx = sample(&mut rng, n, g.batch.min(n)).into_vec();
        let coords = if dim <= g.coords {
            (0..dim).collect()
        } else {
            let mut c = sample(&mut rng, dim, g.coords).into_vec();
            c.sort_unstable();
            c
        };
        let batch = Batch::subset(&problem.dataset, &batch_idx)?;
        let r = check_gradient(objective, &theta, Some(batch), step, Some(&coords))?;
        outcome.checked += r.checked;
        outcome.skipped += r.skipped;
        if r.max_error > outcome.max_error || r.max_error.is_nan() {
            outcome.max_error = r.max_error;
            outcome.worst_point = p;
            outcome.worst_coord = r.worst_coord;
        }
    }
    Ok(outcome)
}

#[derive(Parser, Debug)]
#[command(
    name = "distnewton",
    version,
    about = "Distributed quasi-Newton experiments against parameter-averaging SGD"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "DISTNEWTON_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// Overrides the run file's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker counts; a list for `sweep`, a single value for `run`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub workers: Option<Vec<usize>>,
    /// Worker-phase threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// One experiment.
    Run,
    /// DistNewton across worker counts plus the averaging baseline.
    Sweep,
    /// Finite-difference check of the configured objective's gradient.
    #[command(name = "grad-check")]
    GradCheck,
}

impl Cli {
    /// The run file with command-line overrides applied.
    pub fn resolve(&self) -> Result<FileConfig> {
        let mut cfg = match &self.config {
            Some(p) => config::load(p)?,
            None => FileConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
        }
        if let Some(t) = self.threads {
            cfg.experiment.threads = t;
        }
        if let (Command::Run, Some(w)) = (self.command, &self.workers) {
            match w.as_slice() {
                [m] => cfg.experiment.workers = *m,
                _ => {
                    return Err(Error::config(
                        "--workers",
                        "run takes a single worker count",
                    ))
                }
            }
        }
        cfg.experiment.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), executes and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitStatus::ConfigError.code()
            } else {
                ExitStatus::Success.code()
            };
        }
    };
    match execute(&cli) {
        Ok(status) => status.code(),
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::from_error(&e).code()
        }
    }
}

fn execute(cli: &Cli) -> Result<ExitStatus> {
    let cfg = cli.resolve()?;
    match cli.command {
        Command::Run => {
            let outcome = run(&cfg, &cli.out)?;
            print!("{}", outcome.summary);
            println!("wrote {}", outcome.csv_path.display());
            Ok(outcome.exit_status())
        }
        Command::Sweep => {
            let workers = cli
                .workers
                .clone()
                .unwrap_or_else(|| SWEEP_WORKERS.to_vec());
            let outcome = sweep(&cfg, &workers, &cli.out)?;
            print!("{}", outcome.summary);
            for c in &outcome.cells {
                if let Err(e) = &c.result {
                    eprintln!("{}: {e}", c.label);
                }
            }
            Ok(outcome.exit_status())
        }
        Command::GradCheck => {
            let r = grad_check(&cfg)?;
            println!(
                "max mixed error {:.3e} (threshold {:.1e}, h {:.1e}) over {} coordinates, {} skipped at kinks",
                r.max_error, r.threshold, r.step, r.checked, r.skipped
            );
            if r.passed() {
                Ok(ExitStatus::Success)
            } else {
                eprintln!(
                    "gradient check failed: worst coordinate {} at point {}",
                    r.worst_coord, r.worst_point
                );
                Ok(ExitStatus::Internal)
            }
        }
    }
}
