use std::path::{Path, PathBuf};

use serde::Serialize;
use tilt_core::corpus::{background, load_corpus, procedural_corpus, write_corpus, CorpusEntry, Deformation, Sidecar};
use tilt_core::experiments::{
    median, run_bench, run_corruption, run_range, run_speed, BenchConfig, CorruptionConfig, RangeConfig, RunOutcome,
    SpeedConfig,
};
use tilt_core::imaging::{deform_about, gen_checkerboard, GrayImage};
use tilt_core::inner::{SolverKind, StopReason};
use tilt_core::outer::{relative_error, run_tilt, Method};
use tilt_core::transform::{TransformKind, TransformParams, WindowSpec};

use crate::config::{Grid, RunConfig};
use crate::output::{io_err, OutDir, SCHEMA_VERSION};
use crate::{CliError, GenBoardArgs};

const PARAM_NAMES: [&str; 8] = ["a11", "a12", "a21", "a22", "tx", "ty", "h31", "h32"];

fn core_err(e: tilt_core::TiltError) -> CliError {
    match e {
        tilt_core::TiltError::Io(e) => CliError::Io(e.to_string()),
        tilt_core::TiltError::InvalidArgument(m) => CliError::Usage(m),
        other => CliError::Solver(other.to_string()),
    }
}

fn prepare(cfg: &RunConfig, command: &'static str) -> Result<OutDir, CliError> {
    let out = OutDir::create(&cfg.out, command, cfg.seed)?;
    out.write_text("config.toml", &cfg.to_toml())?;
    Ok(out)
}

fn load_corpus_checked(dir: &Path) -> Result<Vec<CorpusEntry>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("corpus directory {} does not exist", dir.display())));
    }
    load_corpus(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

/// Row type made of the given key columns followed by the outcome columns.
/// Wall time is left out so the tables are reproducible byte for byte.
macro_rules! outcome_row {
    ($name:ident { $($key:ident: $ty:ty),* $(,)? }) => {
        #[derive(Serialize)]
        struct $name<'a> {
            $($key: $ty,)*
            success: bool,
            rel_err: Option<f64>,
            outer_iters: usize,
            inner_iters: usize,
            converged: bool,
            error: Option<&'a str>,
        }

        impl<'a> $name<'a> {
            fn new($($key: $ty,)* o: &'a RunOutcome) -> Self {
                Self {
                    $($key,)*
                    success: o.success,
                    rel_err: o.rel_err,
                    outer_iters: o.outer_iters,
                    inner_iters: o.inner_iters,
                    converged: o.converged,
                    error: o.error.as_deref(),
                }
            }
        }
    };
}

// ---------------------------------------------------------------------------
// rectify

#[derive(Serialize)]
struct TauJson<'a> {
    schema_version: u32,
    kind: TransformKind,
    param_names: &'a [&'a str],
    params: &'a [f64],
    method: Method,
    window: WindowSpec,
    converged: bool,
    outer_iters: usize,
    inner_iters: usize,
    /// Only when the sidecar carries a deformation.
    rel_err: Option<f64>,
    timings: Timings,
}

#[derive(Serialize)]
struct Timings {
    total_s: f64,
    inner_s: Vec<f64>,
}

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    inner_iters: Option<usize>,
    stop_reason: Option<StopReason>,
    objective: Option<f64>,
    a11: f64,
    a12: f64,
    a21: f64,
    a22: f64,
    tx: f64,
    ty: f64,
    h31: Option<f64>,
    h32: Option<f64>,
}

fn read_sidecar(path: &Path) -> Result<Sidecar, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn rectify(cfg: &RunConfig) -> Result<(), CliError> {
    let r = &cfg.rectify;
    let input = r.input.as_ref().ok_or_else(|| CliError::Usage("rectify needs --input".into()))?;
    if !input.is_file() {
        return Err(CliError::Usage(format!("input {} does not exist", input.display())));
    }
    let sidecar_path: Option<PathBuf> = match &r.sidecar {
        Some(p) if !p.is_file() => return Err(CliError::Usage(format!("sidecar {} does not exist", p.display()))),
        Some(p) => Some(p.clone()),
        None => Some(input.with_extension("json")).filter(|p| p.is_file()),
    };
    let sidecar = sidecar_path.as_deref().map(read_sidecar).transpose()?;
    let window = match (r.window, &sidecar) {
        (Some([x0, y0, w, h]), _) => WindowSpec::new(x0, y0, w as usize, h as usize).map_err(core_err)?,
        (None, Some(s)) => s.window,
        (None, None) => return Err(CliError::Usage("rectify needs --window or a sidecar".into())),
    };
    let image = GrayImage::load_png(input).map_err(|e| CliError::Usage(format!("{}: {e}", input.display())))?;
    let deformation = sidecar.as_ref().and_then(|s| s.deformation);
    let image = match deformation {
        Some(d) => deform_about(&image, d.linear(), window.center(), background(&image)),
        None => image,
    };

    let tau0 = TransformParams::identity(TransformKind::Affine, &window);
    let opts = cfg.outer.clone().with_method(r.solver);
    let res = run_tilt(&image, &window, &tau0, &opts).map_err(|f| CliError::Solver(f.to_string()))?;

    let out = prepare(cfg, "rectify")?;
    let norm = res.patch_norm;
    let save = |name: &str, m: &tilt_core::linalg::Matrix| -> Result<(), CliError> {
        let p = out.path(name);
        GrayImage::from_matrix(m).and_then(|img| img.save_png(&p)).map_err(|e| io_err(&p, e))
    };
    save("rectified.png", &((&res.a_star + &res.e_star) * norm))?;
    save("A.png", &(&res.a_star * norm))?;
    save("E.png", &res.e_star.map(|v| v * norm + 0.5))?;

    let rel_err = deformation.map(|d| relative_error(&res.tau_star, d.linear()));
    let tau = TauJson {
        schema_version: SCHEMA_VERSION,
        kind: res.tau_star.kind,
        param_names: &PARAM_NAMES[..res.tau_star.num_params()],
        params: &res.tau_star.params,
        method: r.solver,
        window,
        converged: res.converged,
        outer_iters: res.outer_iters,
        inner_iters: res.inner_iterations(),
        rel_err,
        timings: Timings { total_s: res.total_time, inner_s: res.inner_reports.iter().map(|r| r.wall_time).collect() },
    };
    let json = serde_json::to_string_pretty(&tau).expect("transform record serializes") + "\n";
    out.write_text("tau.json", &json)?;

    let trace: Vec<TraceRow> = res
        .tau_trace
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let report = k.checked_sub(1).and_then(|i| res.inner_reports.get(i));
            let p = &t.params;
            TraceRow {
                iter: k,
                inner_iters: report.map(|r| r.iterations),
                stop_reason: report.map(|r| r.stop_reason),
                objective: k.checked_sub(1).and_then(|i| res.objective_trace.get(i).copied()),
                a11: p[0],
                a12: p[1],
                a21: p[2],
                a22: p[3],
                tx: p[4],
                ty: p[5],
                h31: p.get(6).copied(),
                h32: p.get(7).copied(),
            }
        })
        .collect();
    out.write_csv("trace.csv", &trace)?;

    println!(
        "{}: {} outer / {} inner iterations, converged={}{}",
        r.solver,
        res.outer_iters,
        res.inner_iterations(),
        res.converged,
        rel_err.map(|e| format!(", rel_err={e:.4}")).unwrap_or_default()
    );
    println!("wrote {}", cfg.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-inner

#[derive(Serialize)]
struct BenchRunRow {
    size: usize,
    trial: usize,
    solver: SolverKind,
    iterations: usize,
    objective: f64,
    converged: bool,
}

#[derive(Serialize)]
struct BenchSummaryRow {
    size: usize,
    solver: SolverKind,
    mean_iters: f64,
    mean_objective: f64,
    trials: usize,
}

#[derive(Serialize)]
struct BenchTimingRow {
    size: usize,
    solver: SolverKind,
    mean_time_s: f64,
    speedup_vs_adm: f64,
}

pub fn bench_inner(cfg: &RunConfig) -> Result<(), CliError> {
    let b = &cfg.bench;
    let bench = BenchConfig {
        sizes: b.sizes.clone(),
        trials: b.trials,
        seed: cfg.seed,
        num_params: b.num_params,
        lambda_scale: b.lambda_scale,
        adm: b.adm.clone(),
        ladmap: b.ladmap.clone(),
        jobs: cfg.jobs,
    };
    let out = prepare(cfg, "bench-inner")?;
    let (records, rows) = run_bench(&bench).map_err(core_err)?;
    let runs: Vec<BenchRunRow> = records
        .iter()
        .map(|r| BenchRunRow {
            size: r.size,
            trial: r.trial,
            solver: r.solver,
            iterations: r.iterations,
            objective: r.objective,
            converged: r.converged,
        })
        .collect();
    out.write_csv("bench_runs.csv", &runs)?;
    let summary: Vec<BenchSummaryRow> = rows
        .iter()
        .map(|r| BenchSummaryRow {
            size: r.size,
            solver: r.solver,
            mean_iters: r.mean_iters,
            mean_objective: r.mean_objective,
            trials: r.trials,
        })
        .collect();
    out.write_csv("bench.csv", &summary)?;
    let timing: Vec<BenchTimingRow> = rows
        .iter()
        .map(|r| {
            let adm = rows.iter().find(|a| a.size == r.size && a.solver == SolverKind::Adm).map(|a| a.mean_time_s);
            BenchTimingRow {
                size: r.size,
                solver: r.solver,
                mean_time_s: r.mean_time_s,
                speedup_vs_adm: adm.map_or(f64::NAN, |a| a / r.mean_time_s),
            }
        })
        .collect();
    out.write_csv("timing.csv", &timing)?;

    println!("{:>6} {:>14} {:>12} {:>12} {:>10}", "size", "solver", "mean_iters", "mean_time_s", "speedup");
    for t in &timing {
        let iters = rows.iter().find(|r| r.size == t.size && r.solver == t.solver).map_or(0.0, |r| r.mean_iters);
        println!("{:>6} {:>14} {:>12.1} {:>12.4} {:>10.2}", t.size, t.solver.name(), iters, t.mean_time_s, t.speedup_vs_adm);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// range

outcome_row!(RangeCsvRow { theta: f64, t: f64, solver: Method });

#[derive(Serialize)]
struct RangeTimingRow {
    theta: f64,
    t: f64,
    solver: Method,
    time_s: f64,
}

pub fn range(cfg: &RunConfig) -> Result<(), CliError> {
    let base = match cfg.range.grid {
        Grid::Full => RangeConfig::default(),
        Grid::Reduced => RangeConfig::reduced(),
    };
    let rc = RangeConfig {
        methods: cfg.range.methods.clone(),
        board: cfg.range.board,
        outer: cfg.outer.clone(),
        rel_err_tol: cfg.rel_err_tol,
        jobs: cfg.jobs,
        ..base
    };
    let out = prepare(cfg, "range")?;
    let rows = run_range(&rc).map_err(core_err)?;
    let table: Vec<RangeCsvRow> =
        rows.iter().map(|r| RangeCsvRow::new(r.theta, r.t, r.solver, &r.outcome)).collect();
    out.write_csv("range.csv", &table)?;
    let timing: Vec<RangeTimingRow> =
        rows.iter().map(|r| RangeTimingRow { theta: r.theta, t: r.t, solver: r.solver, time_s: r.outcome.time_s }).collect();
    out.write_csv("timing.csv", &timing)?;

    for &m in &rc.methods {
        let sel: Vec<_> = rows.iter().filter(|r| r.solver == m).collect();
        let ok = sel.iter().filter(|r| r.outcome.success).count();
        println!("{m}: {ok}/{} grid points recovered", sel.len());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// corruption

outcome_row!(CorruptionRunRow { case: &'a str, level: f64, solver: Method });

#[derive(Serialize)]
struct CorruptionTimingRow<'a> {
    case: &'a str,
    level: f64,
    solver: Method,
    time_s: f64,
}

pub fn corruption(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.corruption;
    let corpus = load_corpus_checked(&c.corpus)?;
    let cc = CorruptionConfig {
        levels: c.levels.clone(),
        methods: c.methods.clone(),
        rotation: c.rotation_deg.to_radians(),
        outer: cfg.outer.clone(),
        rel_err_tol: cfg.rel_err_tol,
        seed: cfg.seed,
        jobs: cfg.jobs,
    };
    let out = prepare(cfg, "corruption")?;
    let (records, rows) = run_corruption(&cc, &corpus).map_err(core_err)?;
    out.write_csv("corruption.csv", &rows)?;
    let runs: Vec<CorruptionRunRow> = records
        .iter()
        .map(|r| CorruptionRunRow::new(&r.case, r.level, r.solver, &r.outcome))
        .collect();
    out.write_csv("corruption_runs.csv", &runs)?;
    let timing: Vec<CorruptionTimingRow> = records
        .iter()
        .map(|r| CorruptionTimingRow { case: &r.case, level: r.level, solver: r.solver, time_s: r.outcome.time_s })
        .collect();
    out.write_csv("timing.csv", &timing)?;

    println!("{:>6} {:>18} {:>8}", "level", "solver", "success");
    for r in &rows {
        println!("{:>6.2} {:>18} {:>5}/{}", r.level, r.solver.to_string(), r.successes, r.trials);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// speed

outcome_row!(SpeedCsvRow { case: &'a str, width: usize, height: usize, solver: Method });

#[derive(Serialize)]
struct SpeedTimingRow<'a> {
    case: &'a str,
    solver: Method,
    time_s: f64,
    speedup_vs_adm: Option<f64>,
}

pub fn speed(cfg: &RunConfig) -> Result<(), CliError> {
    let s = &cfg.speed;
    let mut corpus = load_corpus_checked(&s.corpus)?;
    if !s.cases.is_empty() {
        if let Some(missing) = s.cases.iter().find(|c| !corpus.iter().any(|e| &e.sidecar.name == *c)) {
            return Err(CliError::Usage(format!("case `{missing}` is not in {}", s.corpus.display())));
        }
        corpus.retain(|e| s.cases.contains(&e.sidecar.name));
    }
    let sc = SpeedConfig {
        methods: s.methods.clone(),
        outer: cfg.outer.clone(),
        rel_err_tol: cfg.rel_err_tol,
        repeats: s.repeats,
        jobs: cfg.jobs,
    };
    let out = prepare(cfg, "speed")?;
    let rows = run_speed(&sc, &corpus).map_err(core_err)?;
    let table: Vec<SpeedCsvRow> = rows
        .iter()
        .map(|r| SpeedCsvRow::new(&r.case, r.width, r.height, r.solver, &r.outcome))
        .collect();
    out.write_csv("speed.csv", &table)?;
    let timing: Vec<SpeedTimingRow> = rows
        .iter()
        .map(|r| SpeedTimingRow { case: &r.case, solver: r.solver, time_s: r.outcome.time_s, speedup_vs_adm: r.speedup_vs_adm })
        .collect();
    out.write_csv("timing.csv", &timing)?;

    println!("{:>18} {:>14} {:>16} {:>8}", "solver", "median_time_s", "median_speedup", "success");
    for &m in &sc.methods {
        let sel: Vec<_> = rows.iter().filter(|r| r.solver == m).collect();
        let mut times: Vec<f64> = sel.iter().map(|r| r.outcome.time_s).collect();
        let mut speedups: Vec<f64> = sel.iter().filter_map(|r| r.speedup_vs_adm).collect();
        let ok = sel.iter().filter(|r| r.outcome.success).count();
        println!(
            "{:>18} {:>14.4} {:>16.3} {:>5}/{}",
            m.to_string(),
            median(&mut times),
            median(&mut speedups),
            ok,
            sel.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// generators

pub fn gen_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let entries = procedural_corpus();
    write_corpus(&cfg.out, &entries).map_err(|e| io_err(&cfg.out, e))?;
    println!("wrote {} textures to {}", entries.len(), cfg.out.display());
    Ok(())
}

pub fn gen_board(cfg: &RunConfig, a: &GenBoardArgs) -> Result<(), CliError> {
    if a.cells == 0 || a.cell_px == 0 || a.window < 2 || a.window > a.cells * a.cell_px {
        return Err(CliError::Usage("gen-board needs cells, cell_px >= 1 and 2 <= window <= cells*cell_px".into()));
    }
    if !(a.theta_deg.is_finite() && a.shear.is_finite()) {
        return Err(CliError::Usage("gen-board deformation must be finite".into()));
    }
    let board = gen_checkerboard(a.cells, a.cell_px, 0.0, 0.0);
    let window = WindowSpec::centered(board.center.0, board.center.1, a.window, a.window).map_err(core_err)?;
    let sidecar = Sidecar {
        name: "board".into(),
        window,
        deformation: Some(Deformation { theta: a.theta_deg.to_radians(), shear: a.shear }),
    };
    write_corpus(&cfg.out, &[CorpusEntry { sidecar, image: board.image }]).map_err(|e| io_err(&cfg.out, e))?;
    println!("wrote {}", cfg.out.join("board.png").display());
    Ok(())
}
