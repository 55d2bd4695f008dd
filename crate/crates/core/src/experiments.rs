//! Experiment harnesses: the random inner-loop benchmark, the convergence
//! range sweep over deformed checkerboards, robustness to corruption, and
//! end-to-end speed on the texture corpus.
//!
//! Every harness is deterministic given its seed; sweeps fan out over a
//! worker pool and merge rows back in input order.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{background, CorpusEntry};
use crate::error::Result;
use crate::imaging::{corrupt, deform_about, gen_checkerboard, CorruptionSpec};
use crate::inner::{solve_adm, solve_ladmap, InnerProblem, SolverKind, SolverOptions};
use crate::linalg::Matrix;
use crate::outer::{relative_error, run_tilt, Method, OuterOptions, TiltResult};
use crate::projector::{JacobianMatrix, Projector};
use crate::transform::{rotation_shear, TransformKind, TransformParams, WindowSpec};

/// Mixes `tags` into `base` with SplitMix64 steps, so that every
/// `(experiment, item)` pair gets its own reproducible stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(t);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Maps `f` over `items` on up to `jobs` threads; output order matches input.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked").push((i, r));
            });
        }
    });
    let mut out = out.into_inner().expect("worker panicked");
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

// ---------------------------------------------------------------------------
// Inner-loop benchmark

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// Columns of the random Jacobian.
    pub num_params: usize,
    pub lambda_scale: f64,
    pub adm: SolverOptions,
    pub ladmap: SolverOptions,
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![10, 50, 100],
            trials: 10,
            seed: 0,
            num_params: 8,
            lambda_scale: 1.0,
            adm: SolverOptions::with_kind(SolverKind::Adm),
            ladmap: bench_ladmap_options(),
            jobs: 1,
        }
    }
}

/// LADMAP parameters used by the benchmark; the SVD warm-start variant
/// shares them.
pub fn bench_ladmap_options() -> SolverOptions {
    SolverOptions { rho0: 1.3, eps2: 0.1, eps_svd: 1e-4, ..SolverOptions::default() }
}

pub const BENCH_SOLVERS: [SolverKind; 3] = [SolverKind::Adm, SolverKind::Ladmap, SolverKind::LadmapSvdws];

/// Random `n×n` instance: `D` uniform on `[0, 1)`, `J` standard normal.
pub fn bench_problem(size: usize, num_params: usize, lambda_scale: f64, seed: u64) -> Result<InnerProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Matrix::from_fn(size, size, |_, _| rng.gen::<f64>());
    let j = Matrix::from_fn(size * size, num_params, |_, _| rng.sample(StandardNormal));
    let projector = Projector::build(JacobianMatrix::new(j, size, size)?, None)?;
    InnerProblem::new(d, projector, lambda_scale / (size as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub size: usize,
    pub trial: usize,
    pub solver: SolverKind,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub solver: SolverKind,
    pub mean_time_s: f64,
    pub mean_iters: f64,
    pub mean_objective: f64,
    pub trials: usize,
}

pub fn run_bench(cfg: &BenchConfig) -> Result<(Vec<BenchRecord>, Vec<BenchRow>)> {
    cfg.adm.validate()?;
    cfg.ladmap.validate()?;
    let items: Vec<(usize, usize)> = cfg
        .sizes
        .iter()
        .flat_map(|&s| (0..cfg.trials).map(move |t| (s, t)))
        .collect();
    let per_item = parallel_map(&items, cfg.jobs, |&(size, trial)| -> Result<Vec<BenchRecord>> {
        let seed = derive_seed(cfg.seed, &[size as u64, trial as u64]);
        let problem = bench_problem(size, cfg.num_params, cfg.lambda_scale, seed)?;
        let mut out = Vec::with_capacity(BENCH_SOLVERS.len());
        for kind in BENCH_SOLVERS {
            let report = match kind {
                SolverKind::Adm => solve_adm(&problem, &cfg.adm)?.report,
                k => solve_ladmap(&problem, None, &SolverOptions { kind: k, ..cfg.ladmap.clone() })?.report,
            };
            out.push(BenchRecord {
                size,
                trial,
                solver: kind,
                iterations: report.iterations,
                objective: report.final_objective().unwrap_or(0.0),
                converged: report.converged(),
                time_s: report.wall_time,
            });
        }
        Ok(out)
    });
    let mut records = Vec::with_capacity(items.len() * BENCH_SOLVERS.len());
    for r in per_item {
        records.extend(r?);
    }
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        for kind in BENCH_SOLVERS {
            let sel: Vec<&BenchRecord> = records.iter().filter(|r| r.size == size && r.solver == kind).collect();
            let n = sel.len().max(1) as f64;
            rows.push(BenchRow {
                size,
                solver: kind,
                mean_time_s: sel.iter().map(|r| r.time_s).sum::<f64>() / n,
                mean_iters: sel.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
                mean_objective: sel.iter().map(|r| r.objective).sum::<f64>() / n,
                trials: sel.len(),
            });
        }
    }
    Ok((records, rows))
}

// ---------------------------------------------------------------------------
// Shared outer-loop plumbing

/// Outcome of one rectification inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub success: bool,
    /// Missing when the run failed before producing a transform.
    pub rel_err: Option<f64>,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub converged: bool,
    pub time_s: f64,
    pub error: Option<String>,
}

fn outcome(res: std::result::Result<TiltResult, crate::outer::TiltFailure>, truth: Option<[[f64; 2]; 2]>, tol: f64) -> RunOutcome {
    match res {
        Ok(r) => {
            let rel_err = truth.map(|t| relative_error(&r.tau_star, t));
            RunOutcome {
                success: rel_err.is_some_and(|e| e < tol),
                rel_err,
                outer_iters: r.outer_iters,
                inner_iters: r.inner_iterations(),
                converged: r.converged,
                time_s: r.total_time,
                error: None,
            }
        }
        Err(f) => RunOutcome {
            success: false,
            rel_err: truth.map(|t| relative_error(&f.partial.tau_star, t)),
            outer_iters: f.partial.outer_iters,
            inner_iters: f.partial.inner_iterations(),
            converged: false,
            time_s: f.partial.total_time,
            error: Some(f.error.to_string()),
        },
    }
}

/// Outer-loop options used by the sweeps; `method` picks the solver and
/// warm-start configuration on top of them.
pub fn experiment_outer_options() -> OuterOptions {
    OuterOptions {
        blur_sigma: 1.5,
        inner: SolverOptions { rho0: 1.3, eps2: 1e9, eps_svd: 1e-4, ..SolverOptions::default() },
        ..OuterOptions::default()
    }
}

// ---------------------------------------------------------------------------
// Range of convergence

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoardSpec {
    pub cells: usize,
    pub cell_px: usize,
    pub window: usize,
}

impl Default for BoardSpec {
    fn default() -> Self {
        Self { cells: 10, cell_px: 8, window: 40 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeConfig {
    pub thetas: Vec<f64>,
    pub shears: Vec<f64>,
    pub methods: Vec<Method>,
    pub board: BoardSpec,
    pub outer: OuterOptions,
    pub rel_err_tol: f64,
    pub jobs: usize,
}

impl Default for RangeConfig {
    fn default() -> Self {
        Self {
            thetas: linear_grid(0.0, PI / 60.0, 11),
            shears: linear_grid(0.0, 0.05, 21),
            methods: vec![Method::Adm, Method::Ladmap],
            board: BoardSpec::default(),
            outer: experiment_outer_options(),
            rel_err_tol: 0.05,
            jobs: 1,
        }
    }
}

impl RangeConfig {
    /// The 6×6 sub-grid taking every other point of the full sweep in θ
    /// and every fourth in t.
    pub fn reduced() -> Self {
        Self {
            thetas: linear_grid(0.0, PI / 30.0, 6),
            shears: linear_grid(0.0, 0.2, 6),
            ..Self::default()
        }
    }
}

pub fn linear_grid(start: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| start + step * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeRow {
    pub theta: f64,
    pub t: f64,
    pub solver: Method,
    pub outcome: RunOutcome,
}

pub fn run_range(cfg: &RangeConfig) -> Result<Vec<RangeRow>> {
    cfg.outer.validate()?;
    let cells: Vec<(f64, f64)> = cfg
        .thetas
        .iter()
        .flat_map(|&th| cfg.shears.iter().map(move |&t| (th, t)))
        .collect();
    let rows = parallel_map(&cells, cfg.jobs, |&(theta, t)| {
        let board = gen_checkerboard(cfg.board.cells, cfg.board.cell_px, theta, t);
        let w = cfg.board.window;
        let window = WindowSpec::centered(board.center.0, board.center.1, w, w).expect("window size is positive");
        let tau0 = TransformParams::identity(TransformKind::Affine, &window);
        cfg.methods
            .iter()
            .map(|&m| RangeRow {
                theta,
                t,
                solver: m,
                outcome: outcome(
                    run_tilt(&board.image, &window, &tau0, &cfg.outer.clone().with_method(m)),
                    Some(board.linear),
                    cfg.rel_err_tol,
                ),
            })
            .collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Robustness to corruption

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionConfig {
    pub levels: Vec<f64>,
    pub methods: Vec<Method>,
    /// Rotation applied to every corpus texture, in radians.
    pub rotation: f64,
    pub outer: OuterOptions,
    pub rel_err_tol: f64,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            levels: linear_grid(0.0, 0.1, 11),
            methods: vec![Method::Adm, Method::Ladmap],
            rotation: 10f64.to_radians(),
            outer: experiment_outer_options(),
            rel_err_tol: 0.05,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionRecord {
    pub case: String,
    pub level: f64,
    pub solver: Method,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionRow {
    pub level: f64,
    pub solver: Method,
    pub success_rate: f64,
    pub successes: usize,
    pub trials: usize,
}

pub fn run_corruption(cfg: &CorruptionConfig, corpus: &[CorpusEntry]) -> Result<(Vec<CorruptionRecord>, Vec<CorruptionRow>)> {
    cfg.outer.validate()?;
    let truth = rotation_shear(cfg.rotation, 0.0);
    let items: Vec<(usize, usize)> = (0..corpus.len())
        .flat_map(|i| (0..cfg.levels.len()).map(move |l| (i, l)))
        .collect();
    let per_item = parallel_map(&items, cfg.jobs, |&(i, l)| -> Result<Vec<CorruptionRecord>> {
        let entry = &corpus[i];
        let level = cfg.levels[l];
        let window = entry.sidecar.window;
        let rotated = deform_about(&entry.image, truth, window.center(), background(&entry.image));
        let seed = derive_seed(cfg.seed, &[i as u64, level.to_bits()]);
        let img = corrupt(&rotated, CorruptionSpec { fraction: level, seed })?;
        let tau0 = TransformParams::identity(TransformKind::Affine, &window);
        Ok(cfg
            .methods
            .iter()
            .map(|&m| CorruptionRecord {
                case: entry.sidecar.name.clone(),
                level,
                solver: m,
                outcome: outcome(run_tilt(&img, &window, &tau0, &cfg.outer.clone().with_method(m)), Some(truth), cfg.rel_err_tol),
            })
            .collect())
    });
    let mut records = Vec::new();
    for r in per_item {
        records.extend(r?);
    }
    let mut rows = Vec::new();
    for &level in &cfg.levels {
        for &m in &cfg.methods {
            let sel: Vec<&CorruptionRecord> = records.iter().filter(|r| r.level == level && r.solver == m).collect();
            let successes = sel.iter().filter(|r| r.outcome.success).count();
            rows.push(CorruptionRow {
                level,
                solver: m,
                success_rate: successes as f64 / sel.len().max(1) as f64,
                successes,
                trials: sel.len(),
            });
        }
    }
    Ok((records, rows))
}

// ---------------------------------------------------------------------------
// End-to-end speed

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedConfig {
    pub methods: Vec<Method>,
    pub outer: OuterOptions,
    pub rel_err_tol: f64,
    /// Repetitions per case and method; the median wall time is reported.
    pub repeats: usize,
    pub jobs: usize,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            outer: experiment_outer_options(),
            rel_err_tol: 0.05,
            repeats: 1,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedRow {
    pub case: String,
    pub width: usize,
    pub height: usize,
    pub solver: Method,
    pub outcome: RunOutcome,
    /// ADM wall time over this row's, when ADM ran on the same case.
    pub speedup_vs_adm: Option<f64>,
}

pub fn run_speed(cfg: &SpeedConfig, corpus: &[CorpusEntry]) -> Result<Vec<SpeedRow>> {
    cfg.outer.validate()?;
    let repeats = cfg.repeats.max(1);
    let per_case = parallel_map(corpus, cfg.jobs, |entry| {
        let window = entry.sidecar.window;
        let (img, truth) = entry.deformed();
        let tau0 = TransformParams::identity(TransformKind::Affine, &window);
        let mut rows: Vec<SpeedRow> = cfg
            .methods
            .iter()
            .map(|&m| {
                let opts = cfg.outer.clone().with_method(m);
                let mut runs: Vec<RunOutcome> =
                    (0..repeats).map(|_| outcome(run_tilt(&img, &window, &tau0, &opts), truth, cfg.rel_err_tol)).collect();
                runs.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
                SpeedRow {
                    case: entry.sidecar.name.clone(),
                    width: window.width,
                    height: window.height,
                    solver: m,
                    outcome: runs.swap_remove(repeats / 2),
                    speedup_vs_adm: None,
                }
            })
            .collect();
        if let Some(adm) = rows.iter().find(|r| r.solver == Method::Adm).map(|r| r.outcome.time_s) {
            for r in &mut rows {
                r.speedup_vs_adm = Some(adm / r.outcome.time_s);
            }
        }
        rows
    });
    Ok(per_case.into_iter().flatten().collect())
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
