//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Criteria one through eight run once on a single-thread pool and again on a
//! four-thread pool; criterion nine compares the two passes bit for bit.

#![allow(clippy::needless_range_loop)]

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use distnewton::cli::{self, read_history_csv, CSV_HEADER};
use distnewton::config::{self, FileConfig};
use distnewton::harness::{
    derive_seed, run_experiment_observed, run_problem, server_round, worker_round, Aggregator,
    BatchSchedule, DataConfig, ExperimentConfig, ObjectiveConfig, Observer, RoundStats, RunStatus,
    ServerParams,
};
use distnewton::linalg::{thin_svd_via_gram, Matrix, Vector, DEFAULT_RANK_TOLERANCE};
use distnewton::objectives::{Activation, Batch, Objective, QuadraticSpec};
use distnewton::operator::{build_operator, center_reports, WorkerReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// ---------------------------------------------------------------------------
// Allocation tracking

struct Tracking;

static TRACKING: AtomicBool = AtomicBool::new(false);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Tracking {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

fn note(size: usize) {
    if TRACKING.load(Ordering::Relaxed) {
        LARGEST.fetch_max(size, Ordering::Relaxed);
    }
}

#[global_allocator]
static GLOBAL: Tracking = Tracking;

/// Largest single allocation, in bytes, made while `f` runs.
fn largest_allocation<T>(f: impl FnOnce() -> T) -> (T, usize) {
    LARGEST.store(0, Ordering::SeqCst);
    TRACKING.store(true, Ordering::SeqCst);
    let out = f();
    TRACKING.store(false, Ordering::SeqCst);
    (out, LARGEST.load(Ordering::SeqCst))
}

// ---------------------------------------------------------------------------
// Shared helpers

struct Outcome {
    pass: bool,
    detail: String,
    /// Bit patterns of every number the criterion produced.
    fingerprint: Vec<u64>,
}

fn bits(values: &[f64]) -> impl Iterator<Item = u64> + '_ {
    values.iter().map(|v| v.to_bits())
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn preset(name: &str) -> FileConfig {
    config::load(&repo().join("configs").join(name)).expect("preset loads")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| gaussian(rng)).collect()
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `Σ_i v[i] · col_i(m)` with plain loops.
fn combine_columns(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.rows()];
    for (i, &c) in v.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(m.column(i)) {
            *o += c * x;
        }
    }
    out
}

fn mean_of(vectors: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let m = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= m);
    out
}

/// Gaussian elimination with partial pivoting on a dense copy of `a`.
fn solve(a: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j)).chain([b[i]]).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - tail) / m[row][row];
    }
    x
}

fn newton_params(lambda: f64, tau: f64) -> ServerParams {
    ServerParams {
        aggregator: Aggregator::DistNewton,
        lambda,
        tau,
        use_lr_cap: false,
    }
}

// ---------------------------------------------------------------------------
// 1. One Newton step on an exact quadratic

fn exact_quadratic() -> Outcome {
    let started = Instant::now();
    let (n, m) = (8, 9);
    let mut worst: f64 = 0.0;
    let mut fp = Vec::new();
    for seed in 0..5 {
        let spec = QuadraticSpec::generate(n, 100.0, seed).unwrap();
        let a = spec.hessian();
        let star = spec.minimizer();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let center = gaussian_vec(&mut rng, n);
        let reports: Vec<WorkerReport> = (0..m)
            .map(|_| {
                let theta: Vec<f64> = center.iter().map(|c| c + gaussian(&mut rng)).collect();
                let offset: Vec<f64> = theta.iter().zip(star.iter()).map(|(t, s)| t - s).collect();
                let grad = combine_columns(a, &offset);
                WorkerReport::new(theta.into(), grad.into()).unwrap()
            })
            .collect();
        let (theta, stats) = server_round(&reports, &newton_params(1e-6, 1.0)).unwrap();

        let thetas: Vec<&[f64]> = reports.iter().map(|r| r.theta.as_slice()).collect();
        let grads: Vec<&[f64]> = reports.iter().map(|r| r.grad.as_slice()).collect();
        let (t_bar, g_bar) = (mean_of(&thetas), mean_of(&grads));
        let step = solve(a, &g_bar);
        let oracle: Vec<f64> = t_bar.iter().zip(&step).map(|(t, s)| t - s).collect();
        let err = l2_diff(&theta, &oracle) / (l2_diff(&t_bar, &oracle) + 1.0);
        worst = worst.max(err);
        if stats.retained != n {
            return fail(format!("seed {seed}: retained {} of {n}", stats.retained));
        }
        fp.extend(bits(&theta));
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: worst <= 1e-8 && elapsed < Duration::from_secs(1),
        detail: format!("worst error {worst:.2e} (bound 1e-8), {elapsed:.2?} (bound 1s)"),
        fingerprint: fp,
    }
}

fn fail(detail: String) -> Outcome {
    Outcome {
        pass: false,
        detail,
        fingerprint: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// 2. Large λ reduces to averaged gradient steps

#[derive(Default)]
struct Trajectory(Mutex<Vec<(usize, Vec<f64>, usize)>>);

impl Observer for Trajectory {
    fn round_completed(
        &self,
        round: usize,
        _reports: &[WorkerReport],
        theta: &Vector,
        stats: &RoundStats,
    ) {
        self.0
            .lock()
            .unwrap()
            .push((round, theta.to_vec(), stats.retained));
    }
}

fn sgd_equivalence() -> Outcome {
    let started = Instant::now();
    let config = ExperimentConfig {
        objective: ObjectiveConfig::Mlp {
            layers: vec![10, 16, 4],
            activation: Activation::Tanh,
            init_scale: 1.0,
        },
        data: DataConfig::Blobs {
            features: 10,
            classes: 4,
            samples: 960,
        },
        workers: 4,
        global_batch: 48,
        epochs: 10,
        local_lr: 0.05,
        server_tau: 0.1,
        lambda: 2.0,
        seed: 21,
        ..Default::default()
    };
    let trajectory = Trajectory::default();
    run_experiment_observed(&config, &trajectory).unwrap();
    let recorded = trajectory.0.into_inner().unwrap();

    // Reference loop: same workers, server replaced by θ̄ − τḡ.
    let problem = config.build_problem().unwrap();
    let ds = &problem.dataset;
    let rounds = BatchSchedule::rounds_per_epoch(ds.len(), config.global_batch, 1);
    let mut theta = problem.initial.to_vec();
    let mut worst: f64 = 0.0;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let seed = derive_seed(config.seed, 100 + epoch as u64);
        let mut schedule =
            BatchSchedule::new(ds.len(), config.workers, config.global_batch, 1, seed).unwrap();
        for _ in 0..rounds {
            let draws = schedule.next_round();
            let reports: Vec<WorkerReport> = draws
                .iter()
                .map(|d| {
                    let steps = [Some(Batch::subset(ds, &d[0]).unwrap())];
                    let report = Some(Batch::subset(ds, &d[1]).unwrap());
                    let obj = problem.objective.as_ref();
                    worker_round(&theta, obj, &steps, report, config.local_lr).unwrap()
                })
                .collect();
            let thetas: Vec<&[f64]> = reports.iter().map(|r| r.theta.as_slice()).collect();
            let grads: Vec<&[f64]> = reports.iter().map(|r| r.grad.as_slice()).collect();
            let (t_bar, g_bar) = (mean_of(&thetas), mean_of(&grads));
            theta = t_bar
                .iter()
                .zip(&g_bar)
                .map(|(t, g)| t - config.server_tau * g)
                .collect();

            let (round, got, retained) = &recorded[step];
            assert_eq!(*round, step);
            assert_eq!(*retained, 0, "λ > 1 must retain nothing");
            let scale = theta.iter().fold(1.0f64, |a, t| a.max(t.abs()));
            let diff = got
                .iter()
                .zip(&theta)
                .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            worst = worst.max(diff / scale);
            step += 1;
        }
    }
    let elapsed = started.elapsed();
    let fp = recorded
        .iter()
        .flat_map(|(_, t, _)| bits(t).collect::<Vec<_>>())
        .collect();
    Outcome {
        pass: step == 100 && recorded.len() == 100 && worst <= 1e-12 && elapsed.as_secs() < 5,
        detail: format!(
            "{step} rounds, worst per-step deviation {worst:.2e} (bound 1e-12), {elapsed:.2?}"
        ),
        fingerprint: fp,
    }
}

// ---------------------------------------------------------------------------
// 3. Secant subspace and identity on the complement

fn secant_suite() -> Outcome {
    let started = Instant::now();
    let (mut worst_secant, mut worst_identity) = (0.0f64, 0.0f64);
    let mut fp = Vec::new();
    let mut directions = 0;
    for b in 0..50u64 {
        let n = [20, 100][b as usize % 2];
        let m = [2, 4, 8][(b as usize / 2) % 3];
        let lambda = if b % 5 == 0 { 0.1 } else { 1e-6 };
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + b);
        let reports: Vec<WorkerReport> = (0..m)
            .map(|_| {
                let t = gaussian_vec(&mut rng, n);
                let g = gaussian_vec(&mut rng, n);
                WorkerReport::new(t.into(), g.into()).unwrap()
            })
            .collect();
        let batch = center_reports(&reports).unwrap();
        let op = build_operator(&batch, lambda).unwrap();
        let svd = thin_svd_via_gram(batch.big_g(), DEFAULT_RANK_TOLERANCE).unwrap();
        for k in 0..op.rank() {
            let v = svd.right_vector(k);
            let gv = combine_columns(batch.big_g(), v);
            let tv = combine_columns(batch.big_theta(), v);
            let got = op.apply(&gv).unwrap();
            worst_secant = worst_secant.max(l2_diff(&got, &tv) / l2(&tv));
            directions += 1;
            fp.extend(bits(&got));
        }
        for _ in 0..5 {
            let mut z = gaussian_vec(&mut rng, n);
            for _ in 0..2 {
                for k in 0..op.rank() {
                    let u = op.left_vector(k);
                    let c: f64 = z.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                    z.iter_mut()
                        .zip(u.iter())
                        .for_each(|(zi, ui)| *zi -= c * ui);
                }
            }
            let got = op.apply(&z).unwrap();
            worst_identity = worst_identity.max(l2_diff(&got, &z) / l2(&z));
            fp.extend(bits(&got));
        }
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: worst_secant <= 1e-8 && worst_identity <= 1e-12 && elapsed.as_secs() < 5,
        detail: format!(
            "{directions} retained directions, secant {worst_secant:.2e} (1e-8), complement {worst_identity:.2e} (1e-12), {elapsed:.2?}"
        ),
        fingerprint: fp,
    }
}

// ---------------------------------------------------------------------------
// 4. Thin SVD against power iteration with deflation

/// Singular values of `g` by power iteration on `GᵀG` (applied as two
/// matrix-vector products) with explicit rank-one deflation of `G`.
fn power_singular_values(g: &Matrix, count: usize) -> Vec<f64> {
    let (n, m) = (g.rows(), g.cols());
    let mut work: Vec<Vec<f64>> = g.columns().map(<[f64]>::to_vec).collect();
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut sigma = Vec::new();
    let apply = |work: &[Vec<f64>], v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (col, &c) in work.iter().zip(v) {
            out.iter_mut().zip(col).for_each(|(o, x)| *o += c * x);
        }
        out
    };
    let orthogonalize = |v: &mut Vec<f64>, found: &[Vec<f64>]| {
        for f in found {
            let c: f64 = v.iter().zip(f).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(f).for_each(|(x, y)| *x -= c * y);
        }
        let len = l2(v);
        v.iter_mut().for_each(|x| *x /= len);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..count {
        let mut v = gaussian_vec(&mut rng, m);
        orthogonalize(&mut v, &found);
        let mut estimate = 0.0;
        let mut quiet = 0;
        for _ in 0..200_000 {
            let w = apply(&work, &v);
            let next_estimate = l2(&w);
            let mut z: Vec<f64> = work
                .iter()
                .map(|col| col.iter().zip(&w).map(|(a, b)| a * b).sum())
                .collect();
            if l2(&z) == 0.0 {
                break;
            }
            orthogonalize(&mut z, &found);
            v = z;
            let change = (next_estimate - estimate).abs();
            estimate = next_estimate;
            quiet = if change <= 1e-15 * estimate {
                quiet + 1
            } else {
                0
            };
            if quiet >= 20 {
                break;
            }
        }
        let w = apply(&work, &v);
        let s = l2(&w);
        if s > 0.0 {
            for (col, &c) in work.iter_mut().zip(&v) {
                col.iter_mut().zip(&w).for_each(|(x, wi)| *x -= c * wi);
            }
        }
        sigma.push(s);
        found.push(v);
    }
    sigma
}

fn svd_oracle() -> Outcome {
    let started = Instant::now();
    let (mut worst_recon, mut worst_sigma, mut worst_zero) = (0.0f64, 0.0f64, 0.0f64);
    let mut fp = Vec::new();
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + case);
        let n = rng.random_range(1..=200usize);
        let m = rng.random_range(1..=16usize);
        let g = Matrix::from_col_major(n, m, gaussian_vec(&mut rng, n * m)).unwrap();
        let svd = thin_svd_via_gram(&g, DEFAULT_RANK_TOLERANCE).unwrap();

        let mut err = 0.0;
        for i in 0..m {
            let mut col = vec![0.0; n];
            for (k, u) in svd.left_vectors.iter().enumerate() {
                let c = svd.sigma[k] * svd.right_vector(k)[i];
                col.iter_mut().zip(u.iter()).for_each(|(d, x)| *d += c * x);
            }
            err += l2_diff(g.column(i), &col).powi(2);
        }
        worst_recon = worst_recon.max(err.sqrt() / g.frobenius_norm());

        // Columns beyond the row count are dependent: those singular values
        // are exactly zero and only an absolute comparison means anything.
        let rank = n.min(m);
        let oracle = power_singular_values(&g, rank);
        for k in 0..rank {
            worst_sigma = worst_sigma.max((svd.sigma[k] - oracle[k]).abs() / oracle[k]);
        }
        for k in rank..m {
            worst_zero = worst_zero.max(svd.sigma[k] / oracle[0]);
        }
        fp.extend(bits(&svd.sigma));
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: worst_recon <= 1e-10
            && worst_sigma <= 1e-8
            && worst_zero <= 1e-8
            && elapsed.as_secs() < 10,
        detail: format!(
            "reconstruction {worst_recon:.2e} (1e-10), singular values {worst_sigma:.2e} relative (1e-8), structural zeros {worst_zero:.2e}·σ₁, {elapsed:.2?}"
        ),
        fingerprint: fp,
    }
}

// ---------------------------------------------------------------------------
// 5. Gradient checks

fn central(obj: &dyn Objective, theta: &[f64], batch: Option<Batch<'_>>, i: usize, h: f64) -> f64 {
    let mut p = theta.to_vec();
    p[i] += h;
    let plus = obj.value(&p, batch).unwrap();
    p[i] = theta[i] - h;
    let minus = obj.value(&p, batch).unwrap();
    (plus - minus) / (2.0 * h)
}

/// (worst mixed error, coordinates checked, coordinates skipped at kinks)
fn check_objective(cfg: &FileConfig, h: f64, full_points: bool) -> (f64, usize, usize, Vec<u64>) {
    let x = &cfg.experiment;
    let problem = x.build_problem().unwrap();
    let obj = problem.objective.as_ref();
    let dim = obj.dim();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut fp = Vec::new();
    for p in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + p);
        let theta: Vec<f64> = match x.objective {
            ObjectiveConfig::Rosenbrock { .. } => {
                (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()
            }
            _ => problem
                .initial
                .iter()
                .map(|t| t + 0.1 * gaussian(&mut rng))
                .collect(),
        };
        let idx: Vec<usize> = (0..32)
            .map(|_| rng.random_range(0..problem.dataset.len()))
            .collect();
        let batch = Some(Batch::subset(&problem.dataset, &idx).unwrap());
        let coords: Vec<usize> = if full_points || dim <= 200 {
            (0..dim).collect()
        } else {
            (0..200).map(|_| rng.random_range(0..dim)).collect()
        };
        let (_, grad) = obj.value_grad(&theta, batch).unwrap();
        for &i in &coords {
            if !obj.smooth_along(&theta, batch, i, h).unwrap() {
                skipped += 1;
                continue;
            }
            let f = central(obj, &theta, batch, i, h);
            let err = (grad[i] - f).abs() / grad[i].abs().max(f.abs()).max(1.0);
            worst = worst.max(err);
            checked += 1;
            fp.push(f.to_bits());
        }
    }
    (worst, checked, skipped, fp)
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let mut relu_small = preset("mnist_tanh.conf");
    if let ObjectiveConfig::Mlp { activation, .. } = &mut relu_small.experiment.objective {
        *activation = Activation::Relu;
    }
    let cases: Vec<(&str, FileConfig, f64, f64)> = vec![
        ("quadratic", preset("quadratic.conf"), 1e-4, 1e-8),
        ("rosenbrock", preset("rosenbrock.conf"), 1e-5, 1e-6),
        ("tanh 784-32-10", preset("mnist_tanh.conf"), 1e-5, 1e-6),
        ("relu 784-32-10", relu_small, 1e-5, 1e-5),
        (
            "relu 784-128-128-128-10",
            preset("relu_divergence.conf"),
            1e-5,
            1e-5,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    let mut fp = Vec::new();
    for (name, cfg, h, threshold) in cases {
        let (worst, checked, skipped, f) = check_objective(&cfg, h, false);
        // Screening may not hollow out the check.
        let ok = worst <= threshold && checked > 0 && skipped * 2 < checked + skipped;
        pass &= ok;
        parts.push(format!(
            "{name} {worst:.1e}/{threshold:.0e} ({checked} coords, {skipped} at kinks)"
        ));
        fp.extend(f);

        // The command-line check over the same objective must agree.
        let via_cli = cli::grad_check(&cfg).unwrap();
        pass &= via_cli.passed();
    }
    let elapsed = started.elapsed();
    Outcome {
        pass: pass && elapsed.as_secs() < 30,
        detail: format!("{}; {elapsed:.2?}", parts.join("; ")),
        fingerprint: fp,
    }
}

// ---------------------------------------------------------------------------
// 6. Storage stays O(mn)

fn space_claim() -> Outcome {
    let (n, m) = (100_000usize, 8usize);
    let limit = 4 * m * n * std::mem::size_of::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let reports: Vec<WorkerReport> = (0..m)
        .map(|_| {
            WorkerReport::new(
                gaussian_vec(&mut rng, n).into(),
                gaussian_vec(&mut rng, n).into(),
            )
            .unwrap()
        })
        .collect();
    let params = newton_params(1e-3, 0.01);
    let mut slowest = Duration::ZERO;
    let mut server_peak = 0;
    let mut fp = Vec::new();
    for _ in 0..5 {
        let t = Instant::now();
        let ((theta, _), peak) = largest_allocation(|| server_round(&reports, &params).unwrap());
        slowest = slowest.max(t.elapsed());
        server_peak = server_peak.max(peak);
        fp = bits(&theta).collect();
    }

    // A whole epoch of the loop with about 1e5 parameters.
    let mut cfg = preset("mnist_tanh.conf").experiment;
    cfg.objective = ObjectiveConfig::Mlp {
        layers: vec![784, 128, 10],
        activation: Activation::Tanh,
        init_scale: 1.0,
    };
    if let DataConfig::Mnist { limit, .. } = &mut cfg.data {
        *limit = 2000;
    }
    cfg.workers = m;
    cfg.epochs = 1;
    let problem = cfg.build_problem().unwrap();
    let dim = problem.initial.len();
    let loop_limit = 4 * m * dim * std::mem::size_of::<f64>();
    let (history, loop_peak) =
        largest_allocation(|| run_problem(&cfg, &problem, &NoHooks).unwrap());
    fp.extend(bits(&history.final_theta));

    let pass =
        server_peak <= limit && loop_peak <= loop_limit && slowest < Duration::from_millis(250);
    Outcome {
        pass,
        detail: format!(
            "server round n={n} m={m}: largest buffer {:.1} MB (limit {:.1} MB), slowest {slowest:.2?} (250ms); training epoch n={dim}: largest buffer {:.1} MB (limit {:.1} MB)",
            server_peak as f64 / 1e6,
            limit as f64 / 1e6,
            loop_peak as f64 / 1e6,
            loop_limit as f64 / 1e6
        ),
        fingerprint: fp,
    }
}

struct NoHooks;

impl Observer for NoHooks {}

// ---------------------------------------------------------------------------
// 7. More workers, lower training loss on MNIST

const LAMBDAS: [f64; 4] = [0.1, 0.01, 0.05, 0.3];

fn mnist_ordering() -> Outcome {
    let started = Instant::now();
    let base = preset("mnist_tanh.conf").experiment;
    let default_lambda = base.lambda;
    assert_eq!(default_lambda, LAMBDAS[0]);
    // finals[seed] = (sgd, [(dn4, dn8) per λ])
    let mut finals: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    let mut fp = Vec::new();
    for seed in 0..5u64 {
        let seeded = ExperimentConfig {
            seed,
            ..base.clone()
        };
        let problem = seeded.build_problem().unwrap();
        let final_nll = |cfg: &ExperimentConfig| {
            let h = run_problem(cfg, &problem, &NoHooks).unwrap();
            assert_eq!(h.status, RunStatus::Completed);
            h.final_nll().unwrap()
        };
        let sgd = final_nll(&ExperimentConfig {
            workers: 1,
            aggregator: Aggregator::SgdAverage,
            ..seeded.clone()
        });
        let mut per_lambda = Vec::new();
        for &lambda in &LAMBDAS {
            let at = |m| {
                final_nll(&ExperimentConfig {
                    workers: m,
                    lambda,
                    ..seeded.clone()
                })
            };
            per_lambda.push((at(4), at(8)));
        }
        fp.push(sgd.to_bits());
        fp.extend(
            per_lambda
                .iter()
                .flat_map(|&(a, b)| [a.to_bits(), b.to_bits()]),
        );
        finals.push((sgd, per_lambda));
    }

    let mut lines = Vec::new();
    let mut passing = None;
    for (li, &lambda) in LAMBDAS.iter().enumerate() {
        let ordered = finals
            .iter()
            .filter(|(sgd, pl)| pl[li].1 < pl[li].0 && pl[li].0 < *sgd)
            .count();
        let mut gaps: Vec<f64> = finals
            .iter()
            .map(|(sgd, pl)| (sgd - pl[li].1) / sgd)
            .collect();
        gaps.sort_by(f64::total_cmp);
        let median_gap = gaps[gaps.len() / 2];
        let ok = ordered >= 4 && median_gap >= 0.05;
        if ok && passing.is_none() {
            passing = Some(lambda);
        }
        lines.push(format!(
            "λ={lambda}: ordered on {ordered}/5 seeds, median gap {:.1}%",
            100.0 * median_gap
        ));
    }
    for (seed, (sgd, pl)) in finals.iter().enumerate() {
        lines.push(format!(
            "seed {seed}: sgd {sgd:.4}, dn4 {:.4}, dn8 {:.4}",
            pl[0].0, pl[0].1
        ));
    }
    let elapsed = started.elapsed();
    // A passing sweep value only counts if it is the shipped default.
    let pass = passing == Some(default_lambda) && elapsed.as_secs() < 600;
    let verdict = match passing {
        Some(l) if l == default_lambda => "default λ passes".to_string(),
        Some(l) => format!("λ={l} passes but is not the shipped default"),
        None => "no λ in the sweep passes".to_string(),
    };
    Outcome {
        pass,
        detail: format!("{verdict}; {}; {elapsed:.2?}", lines.join("; ")),
        fingerprint: fp,
    }
}

// ---------------------------------------------------------------------------
// 8. Divergence is an outcome, not a crash

fn divergence() -> Outcome {
    let cfg = preset("relu_divergence.conf");
    let dir = tempfile::tempdir().unwrap();
    let outcome = cli::run(&cfg, dir.path()).unwrap();
    let history = &outcome.history;
    let text = std::fs::read_to_string(&outcome.csv_path).unwrap();
    let file = read_history_csv(&outcome.csv_path).unwrap();
    let header_ok = text.lines().next() == Some(CSV_HEADER.join(",").as_str());
    let status_row = format!("#status=diverged,epochs={}", history.records.len());
    let well_formed = header_ok
        && text.lines().last() == Some(status_row.as_str())
        && file.records == history.records
        && file.status == RunStatus::Diverged
        && file.records.iter().all(|r| r.train_nll.is_finite());
    let pass = history.status == RunStatus::Diverged
        && outcome.exit_status() == cli::ExitStatus::Diverged
        && history.records.len() < cfg.experiment.epochs
        && well_formed;

    let baseline = run_problem(
        &ExperimentConfig {
            aggregator: Aggregator::SgdAverage,
            ..cfg.experiment.clone()
        },
        &cfg.experiment.build_problem().unwrap(),
        &NoHooks,
    )
    .unwrap();
    let fp = history
        .records
        .iter()
        .flat_map(|r| [r.train_nll.to_bits(), r.sigma_max.to_bits()])
        .chain(text.bytes().map(u64::from))
        .collect();
    Outcome {
        pass,
        detail: format!(
            "status {} after {} of {} epochs, exit code {}, csv well-formed: {well_formed}; averaging baseline at the same rates: {}",
            history.status,
            history.records.len(),
            cfg.experiment.epochs,
            outcome.exit_status().code(),
            baseline.status
        ),
        fingerprint: fp,
    }
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    ("exact quadratic newton step", exact_quadratic),
    ("large-lambda sgd equivalence", sgd_equivalence),
    ("secant subspace suite", secant_suite),
    ("thin svd against power iteration", svd_oracle),
    ("gradient checks", gradient_checks),
    ("space and server time", space_claim),
    ("mnist worker-count ordering", mnist_ordering),
    ("divergence handling", divergence),
];

fn run_guarded(f: fn() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            fail(format!("panicked: {msg}"))
        }
    }
}

fn run_all(threads: usize) -> Vec<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| CRITERIA.iter().map(|(_, f)| run_guarded(*f)).collect())
}

fn main() {
    let first = run_all(1);
    let mut failures = 0;
    for (i, ((name, _), o)) in CRITERIA.iter().zip(&first).enumerate() {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failures += usize::from(!o.pass);
        println!("{verdict} [{}] {name}: {}", i + 1, o.detail);
    }

    let second = run_all(4);
    let differing: Vec<String> = first
        .iter()
        .zip(&second)
        .enumerate()
        .filter(|(_, (a, b))| a.fingerprint.is_empty() || a.fingerprint != b.fingerprint)
        .map(|(i, _)| (i + 1).to_string())
        .collect();
    let values: usize = first.iter().map(|o| o.fingerprint.len()).sum();
    if differing.is_empty() {
        println!("PASS [9] determinism: {values} values bit-identical across a 1-thread and a 4-thread rerun");
    } else {
        failures += 1;
        println!(
            "FAIL [9] determinism: criteria {} differ or produced nothing to compare",
            differing.join(", ")
        );
    }

    println!("\nacceptance: {} passed, {failures} failed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
