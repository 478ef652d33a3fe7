//! Method dispatch and artifact layout.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path as FsPath, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use sdg_core::bsde::{BasisSpec, TreeSpec};
use sdg_core::calculus::{verify_functional_ito_refinement, FnFunctional, PathTriple, Smoothness, StepConfig};
use sdg_core::catalog::{self, LqParams, RiccatiSolution};
use sdg_core::dynamics::{BatchSpec, BrownianBatch, GameCoefficients, IncrementLaw};
use sdg_core::game::{check_dpp, value_lsmc, value_tree, Enumeration, GameGrids, Side, StrategyFamily};
use sdg_core::hji::{isaacs_report, residual_sweep, sweep_point, write_residual_csv, HamiltonianInput, Minimax, SweepSpec};
use sdg_core::path::{CadlagPath, HolderBall, Path, TimePath};
use sdg_core::rng::stream_rng;

use crate::config::{ConfigError, ExperimentConfig, ItoFunctional, Method, SideChoice};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] sdg_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        use sdg_core::Error as E;
        match self {
            RunError::Config(_) => 2,
            RunError::Core(e) => match e {
                E::BudgetExceeded { .. } => 3,
                E::NonFinite { .. }
                | E::NonContraction { .. }
                | E::NoConvergence { .. }
                | E::Derivative { .. }
                | E::SamplerExhausted { .. } => 4,
                E::Io(_) | E::Csv(_) | E::Json(_) => 1,
                _ => 2,
            },
            RunError::Io { .. } => 1,
        }
    }
}

fn io_err(path: &FsPath) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One row of the cross-run ledger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    pub gap: Option<f64>,
}

/// Everything a method produces before it touches the disk.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub summary: String,
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub results: serde_json::Value,
    pub ledger: Vec<LedgerRow>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub directory: PathBuf,
    pub instance_hash: String,
    pub output: MethodOutput,
}

fn sides(choice: SideChoice) -> Vec<Side> {
    match choice {
        SideChoice::Lower => vec![Side::Lower],
        SideChoice::Upper => vec![Side::Upper],
        SideChoice::Both => vec![Side::Lower, Side::Upper],
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Lower => "lower",
        Side::Upper => "upper",
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, RunError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_core = |e: csv::Error| RunError::Core(e.into());
    w.write_record(header).map_err(to_core)?;
    for r in rows {
        w.write_record(r).map_err(to_core)?;
    }
    w.into_inner().map_err(|e| RunError::Core(sdg_core::Error::Io(e.into_error())))
}

fn field_err(field: &str, reason: impl std::fmt::Display) -> RunError {
    RunError::Config(ConfigError::Field {
        field: field.into(),
        reason: reason.to_string(),
    })
}

struct Setup {
    c: GameCoefficients,
    initial: Path,
    z0: CadlagPath,
    w0: CadlagPath,
    grids: GameGrids,
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, RunError> {
    let n = &cfg.numerics;
    let c = catalog::build(&cfg.instance.name, &cfg.instance.params).map_err(|e| field_err("instance.params", e))?;
    if n.t0 >= c.horizon {
        return Err(field_err("numerics.t0", format!("must be below the horizon {}", c.horizon)));
    }
    let initial = Path::constant(&vec![n.initial_state; c.dims.n], n.t0, c.horizon)?;
    let z0 = CadlagPath::constant(&c.u_set.project(&vec![0.0; c.dims.m]), 0.0, n.t0, c.horizon)?;
    let w0 = CadlagPath::constant(&c.v_set.project(&vec![0.0; c.dims.l]), 0.0, n.t0, c.horizon)?;
    let defaults = GameGrids::from_sets(&c, n.grid_points);
    let axis = |g: &Option<Vec<f64>>, dim: usize, name: &str, fallback: Vec<Vec<f64>>| match g {
        None => Ok(fallback),
        Some(_) if dim != 1 => Err(field_err(name, "explicit grids need scalar controls")),
        Some(g) => Ok(g.iter().map(|&x| vec![x]).collect()),
    };
    let grids = GameGrids::new(
        axis(&n.u_grid, c.dims.m, "numerics.u_grid", defaults.u)?,
        axis(&n.v_grid, c.dims.l, "numerics.v_grid", defaults.v)?,
    );
    grids.validate(&c).map_err(|e| field_err("numerics.u_grid/v_grid", e))?;
    Ok(Setup { c, initial, z0, w0, grids })
}

fn tree_spec(cfg: &ExperimentConfig, s: &Setup) -> TreeSpec {
    TreeSpec::new(cfg.numerics.n_steps, cfg.numerics.branching, cfg.numerics.t0, s.c.horizon)
}

fn minimax(cfg: &ExperimentConfig, s: &Setup) -> Minimax {
    let mm = Minimax::grid(s.grids.clone());
    if cfg.numerics.refine_points > 1 {
        mm.refined(cfg.numerics.refine_points)
    } else {
        mm
    }
}

fn sweep(cfg: &ExperimentConfig, s: &Setup) -> Result<SweepSpec, RunError> {
    let [kappa, mu, mu0] = cfg.numerics.ball;
    Ok(SweepSpec {
        ball: HolderBall::new(kappa, mu, mu0).map_err(|e| field_err("numerics.ball", e))?,
        grid_size: cfg.numerics.path_grid,
        t_min: cfg.numerics.t0,
        t_max: s.c.horizon,
        samples: cfg.numerics.samples,
        seed: cfg.seed,
    })
}

fn side_gap(ledger: &[LedgerRow]) -> Option<f64> {
    match ledger {
        [lo, hi] => Some(hi.value? - lo.value?),
        _ => None,
    }
}

fn run_tree(cfg: &ExperimentConfig, s: &Setup) -> Result<MethodOutput, RunError> {
    let spec = tree_spec(cfg, s);
    let mut rows = Vec::new();
    let mut ledger = Vec::new();
    let mut summary = String::new();
    let mut results = Vec::new();
    for side in sides(cfg.numerics.side) {
        let v = value_tree(&s.c, &s.initial, &s.z0, &s.w0, spec, &s.grids, side, Enumeration::BackwardInduction)?;
        writeln!(summary, "{} value: {}", side_name(side), v.value).unwrap();
        rows.push(vec![
            side_name(side).into(),
            v.value.to_string(),
            v.metadata.evaluations.to_string(),
        ]);
        ledger.push(LedgerRow {
            value: Some(v.value),
            stderr: None,
            gap: None,
        });
        results.push(json!(v));
    }
    if let Some(g) = side_gap(&ledger) {
        writeln!(summary, "upper - lower: {g}").unwrap();
        ledger.iter_mut().for_each(|r| r.gap = Some(g));
    }
    Ok(MethodOutput {
        summary,
        artifacts: vec![("values.csv".into(), csv_bytes(&["side", "value", "evaluations"], &rows)?)],
        results: json!(results),
        ledger,
    })
}

fn run_lsmc(cfg: &ExperimentConfig, s: &Setup) -> Result<MethodOutput, RunError> {
    let n = &cfg.numerics;
    let bb = BrownianBatch::new(BatchSpec {
        seed: cfg.seed,
        n_paths: n.n_paths,
        n_steps: n.n_steps,
        t0: n.t0,
        horizon: s.c.horizon,
        p: s.c.dims.p,
        law: IncrementLaw::Gaussian,
    })?;
    let st = &n.strategies;
    let mut rows = Vec::new();
    let mut trace_rows = Vec::new();
    let mut ledger = Vec::new();
    let mut summary = String::new();
    let mut results = Vec::new();
    for side in sides(n.side) {
        let family = StrategyFamily::linear(
            &s.c,
            side,
            &st.response,
            &st.state,
            &st.offset,
            &st.opponent_state,
            &st.opponent_offset,
        );
        let (v, trace) = value_lsmc(&s.c, &s.initial, &s.z0, &s.w0, &bb, &family, side, &BasisSpec::default())?;
        let se = v.stderr.unwrap_or(f64::NAN);
        writeln!(
            summary,
            "{} value: {} (stderr {se}, chosen strategy {})",
            side_name(side),
            v.value,
            trace.chosen_strategy
        )
        .unwrap();
        rows.push(vec![side_name(side).into(), v.value.to_string(), se.to_string()]);
        for o in &trace.outer {
            trace_rows.push(vec![
                side_name(side).into(),
                o.strategy.clone(),
                o.best_opponent.clone(),
                o.value.to_string(),
                o.stderr.to_string(),
            ]);
        }
        ledger.push(LedgerRow {
            value: Some(v.value),
            stderr: v.stderr,
            gap: None,
        });
        results.push(json!({ "estimate": v, "trace": trace }));
    }
    if let Some(g) = side_gap(&ledger) {
        writeln!(summary, "upper - lower: {g}").unwrap();
        ledger.iter_mut().for_each(|r| r.gap = Some(g));
    }
    Ok(MethodOutput {
        summary,
        artifacts: vec![
            ("values.csv".into(), csv_bytes(&["side", "value", "stderr"], &rows)?),
            (
                "strategies.csv".into(),
                csv_bytes(&["side", "strategy", "best_opponent", "value", "stderr"], &trace_rows)?,
            ),
        ],
        results: json!(results),
        ledger,
    })
}

fn run_residual(cfg: &ExperimentConfig, s: &Setup) -> Result<MethodOutput, RunError> {
    let ps = catalog::resolve_params("lq", &cfg.instance.params)?;
    let ric = RiccatiSolution::solve(LqParams::from_map(&ps)?, RiccatiSolution::DEFAULT_STEPS)?;
    let cand = ric.candidate("riccati", cfg.numerics.candidate_offset);
    let spec = sweep(cfg, s)?;
    let mm = minimax(cfg, s);
    let mut all = Vec::new();
    let mut summary = String::new();
    let mut ledger = Vec::new();
    let mut results = Vec::new();
    let value = cand.eval(&PathTriple::new(s.initial.clone(), s.z0.clone(), s.w0.clone()));
    for side in sides(cfg.numerics.side) {
        let reps = residual_sweep(&s.c, &cand, &spec, side, &mm)?;
        let max_res = reps.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
        let max_term = reps.iter().map(|r| r.terminal_gap.abs()).fold(0.0, f64::max);
        writeln!(
            summary,
            "{}: max |residual| {max_res:e}, max |terminal gap| {max_term:e} over {} paths",
            side_name(side),
            reps.len()
        )
        .unwrap();
        ledger.push(LedgerRow {
            value: Some(value),
            stderr: None,
            gap: Some(max_res),
        });
        results.push(json!({ "side": side, "max_abs_residual": max_res, "max_abs_terminal_gap": max_term }));
        all.extend(reps);
    }
    writeln!(summary, "candidate value at the start: {value}").unwrap();
    let mut bytes = Vec::new();
    write_residual_csv(&all, &mut bytes)?;
    Ok(MethodOutput {
        summary,
        artifacts: vec![("residuals.csv".into(), bytes)],
        results: json!(results),
        ledger,
    })
}

fn run_dpp(cfg: &ExperimentConfig, s: &Setup) -> Result<MethodOutput, RunError> {
    let spec = tree_spec(cfg, s);
    let mut rows = Vec::new();
    let mut summary = String::new();
    let mut ledger = Vec::new();
    let mut results = Vec::new();
    for side in sides(cfg.numerics.side) {
        let r = check_dpp(&s.c, &s.initial, &s.z0, &s.w0, spec, cfg.numerics.split_step, &s.grids, side)?;
        writeln!(
            summary,
            "{}: split at step {} (t = {}), lhs {}, rhs {}, gap {:e} ({} 1e-12)",
            side_name(side),
            r.split_step,
            r.split_time,
            r.lhs,
            r.rhs,
            r.abs_gap,
            if r.abs_gap <= 1e-12 { "<=" } else { ">" }
        )
        .unwrap();
        rows.push(vec![
            side_name(side).into(),
            r.split_step.to_string(),
            r.split_time.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.abs_gap.to_string(),
            serde_json::to_value(r.outer).unwrap().as_str().unwrap_or_default().to_string(),
        ]);
        ledger.push(LedgerRow {
            value: Some(r.lhs),
            stderr: None,
            gap: Some(r.abs_gap),
        });
        results.push(json!(r));
    }
    Ok(MethodOutput {
        summary,
        artifacts: vec![(
            "dpp.csv".into(),
            csv_bytes(&["side", "split_step", "split_time", "lhs", "rhs", "abs_gap", "outer"], &rows)?,
        )],
        results: json!(results),
        ledger,
    })
}

fn run_isaacs(cfg: &ExperimentConfig, s: &Setup) -> Result<MethodOutput, RunError> {
    let spec = sweep(cfg, s)?;
    let mm = minimax(cfg, s);
    let dim = s.c.dims.n;
    let zero = |_: &[f64], _: &[f64]| Ok(0.0);
    let mut rows = Vec::new();
    let mut max_gap = 0.0f64;
    for i in 0..spec.samples {
        let at = sweep_point(&s.c, &spec, i)?;
        let mut rng = stream_rng(cfg.seed, i as u64);
        let y = rng.random_range(-1.0..1.0);
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pm = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-2.0..2.0));
        let t = at.t();
        let inp = HamiltonianInput::new(at, y, p, pm)?;
        let r = isaacs_report(&s.c, &inp, &zero, &mm)?;
        max_gap = max_gap.max(r.gap);
        rows.push(vec![
            i.to_string(),
            t.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.gap.to_string(),
        ]);
    }
    let summary = format!("max Isaacs gap {max_gap:e} over {} sampled inputs\n", spec.samples);
    Ok(MethodOutput {
        summary,
        artifacts: vec![("isaacs.csv".into(), csv_bytes(&["sample", "t", "lower", "upper", "gap"], &rows)?)],
        results: json!({ "samples": spec.samples, "max_gap": max_gap }),
        ledger: vec![LedgerRow {
            value: None,
            stderr: None,
            gap: Some(max_gap),
        }],
    })
}

fn run_ito(cfg: &ExperimentConfig, s: &Setup) -> Result<MethodOutput, RunError> {
    let n = &cfg.numerics;
    let fine = *n.levels.iter().max().expect("validated nonempty");
    let bb = BrownianBatch::new(BatchSpec {
        seed: cfg.seed,
        n_paths: n.n_paths,
        n_steps: fine,
        t0: n.t0,
        horizon: s.c.horizon,
        p: s.c.dims.p,
        law: IncrementLaw::Gaussian,
    })?;
    let f = match n.functional {
        ItoFunctional::Identity => FnFunctional::of_state(|a| a.terminal()[0]),
        ItoFunctional::Square => FnFunctional::of_state(|a| a.terminal().iter().map(|x| x * x).sum()),
        ItoFunctional::Integral => FnFunctional::of_state(|a| a.integral()[0]),
    }
    .smooth(Smoothness::C12);
    let u = s.z0.extend_to(s.c.horizon)?;
    let v = s.w0.extend_to(s.c.horizon)?;
    let mut levels = n.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let reps = verify_functional_ito_refinement(&f, &s.c, &s.initial, &u, &v, &bb, &levels, &StepConfig::default())?;
    let errs: Vec<f64> = reps.iter().map(|r| r.max_err).collect();
    // round-off level errors count as converged
    let nonincreasing = errs.windows(2).all(|w| w[1] <= w[0] || w[1] <= 1e-9);
    let mut summary = String::new();
    for r in &reps {
        writeln!(
            summary,
            "n_steps {}: max_err {:e}, relative {:e}",
            r.n_steps, r.max_err, r.relative_err
        )
        .unwrap();
    }
    writeln!(summary, "max_err nonincreasing under refinement: {nonincreasing}").unwrap();
    let rows: Vec<Vec<String>> = reps
        .iter()
        .map(|r| {
            vec![
                r.n_steps.to_string(),
                r.n_paths.to_string(),
                r.max_err.to_string(),
                r.p50_err.to_string(),
                r.p95_err.to_string(),
                r.relative_err.to_string(),
            ]
        })
        .collect();
    let last = reps.last().expect("nonempty levels");
    Ok(MethodOutput {
        summary,
        artifacts: vec![(
            "ito.csv".into(),
            csv_bytes(&["n_steps", "n_paths", "max_err", "p50_err", "p95_err", "relative_err"], &rows)?,
        )],
        results: json!({ "reports": reps, "nonincreasing": nonincreasing }),
        ledger: vec![LedgerRow {
            value: Some(last.max_err),
            stderr: None,
            gap: Some(last.relative_err),
        }],
    })
}

/// Runs the configured method without touching the disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<MethodOutput, RunError> {
    let steps = cfg.sample_steps();
    if steps > ExperimentConfig::sample_budget() {
        return Err(RunError::Core(sdg_core::Error::BudgetExceeded {
            what: "simulated path steps",
            required: steps,
            budget: ExperimentConfig::sample_budget(),
            hint: "reduce numerics.n_paths or the number of steps",
        }));
    }
    let s = setup(cfg)?;
    match cfg.method {
        Method::Tree => run_tree(cfg, &s),
        Method::Lsmc => run_lsmc(cfg, &s),
        Method::Residual => run_residual(cfg, &s),
        Method::DppCheck => run_dpp(cfg, &s),
        Method::Isaacs => run_isaacs(cfg, &s),
        Method::ItoVerify => run_ito(cfg, &s),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn append_ledger(root: &FsPath, cfg: &ExperimentConfig, hash: &str, rows: &[LedgerRow], timestamp: &str) -> Result<(), RunError> {
    let path = root.join("ledger.csv");
    let fresh = !path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    let mut w = csv::Writer::from_writer(file);
    let to_core = |e: csv::Error| RunError::Core(e.into());
    if fresh {
        w.write_record(["instance_hash", "method", "value", "stderr", "gap", "seed", "timestamp"])
            .map_err(to_core)?;
    }
    for r in rows {
        w.write_record([
            hash,
            cfg.method.name(),
            &fmt_opt(r.value),
            &fmt_opt(r.stderr),
            &fmt_opt(r.gap),
            &cfg.seed.to_string(),
            timestamp,
        ])
        .map_err(to_core)?;
    }
    w.flush().map_err(io_err(&path))
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<(), RunError> {
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(bytes).map_err(io_err(&path))
}

/// Runs `cfg` and writes its artifacts to `<root>/<hash>/`, appending to
/// `<root>/ledger.csv`. Everything except `metadata.json` and the ledger is
/// a pure function of the config.
pub fn run_to_dir(cfg: &ExperimentConfig, root: &FsPath, threads: usize) -> Result<RunOutcome, RunError> {
    let started = chrono::Utc::now();
    let clock = std::time::Instant::now();
    let output = execute(cfg)?;
    let hash = cfg.content_hash();
    let dir = root.join(&hash[..16]);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (name, bytes) in &output.artifacts {
        write_file(dir.join(name), bytes)?;
    }
    let resolved = catalog::resolve_params(&cfg.instance.name, &cfg.instance.params)?;
    let report = json!({
        "instance_hash": hash,
        "config": cfg,
        "resolved_params": resolved,
        "results": output.results,
    });
    write_file(dir.join("report.json"), serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    let config_toml = toml::to_string(cfg).expect("config serializes");
    write_file(dir.join("config.toml"), config_toml.as_bytes())?;
    let summary = format!(
        "method: {}\ninstance: {} {:?}\nseed: {}\ninstance hash: {hash}\n{}",
        cfg.method.name(),
        cfg.instance.name,
        resolved,
        cfg.seed,
        output.summary
    );
    write_file(dir.join("summary.txt"), summary.as_bytes())?;
    let finished = chrono::Utc::now();
    let secs = chrono::SecondsFormat::Secs;
    let metadata = json!({
        "started": started.to_rfc3339_opts(secs, true),
        "finished": finished.to_rfc3339_opts(secs, true),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
        "threads": threads,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_file(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&metadata).unwrap().as_bytes(),
    )?;
    append_ledger(root, cfg, &hash, &output.ledger, &finished.to_rfc3339_opts(secs, true))?;
    Ok(RunOutcome {
        directory: dir,
        instance_hash: hash,
        output: MethodOutput { summary, ..output },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(text).unwrap()
    }

    #[test]
    fn dpp_on_sum_squared_game_is_exact() {
        let c = cfg("seed = 1\nmethod = \"dpp_check\"\n[instance]\nname = \"linear\"\n\
             [numerics]\nn_steps = 2\nbranching = 2\nu_grid = [-1.0, 1.0]\nv_grid = [-1.0, 1.0]\nside = \"both\"\n");
        let out = execute(&c).unwrap();
        assert_eq!(out.ledger.len(), 2);
        assert!(out.ledger.iter().all(|r| r.gap.unwrap() <= 1e-12));
    }

    #[test]
    fn tree_values_match_hand_computation() {
        // one step, sigma = 0, x0 = 0, grids {-1, 0, 1}:
        // lower = max_v min_u (u+v)^2 = 0, upper = min_u max_v (u+v)^2 = 1
        let c = cfg("seed = 1\nmethod = \"tree\"\n[instance]\nname = \"linear\"\n[numerics]\nn_steps = 1\nside = \"both\"\n");
        let out = execute(&c).unwrap();
        assert_eq!(out.ledger[0].value, Some(0.0));
        assert_eq!(out.ledger[1].value, Some(1.0));
        assert_eq!(out.ledger[0].gap, Some(1.0));
    }

    #[test]
    fn tree_budget_maps_to_exit_3() {
        let c = cfg("seed = 1\nmethod = \"tree\"\n[instance]\nname = \"linear\"\n[numerics]\nn_steps = 12\nbranching = 3\n");
        assert_eq!(execute(&c).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn sample_budget_maps_to_exit_3() {
        let c = cfg("seed = 1\nmethod = \"lsmc\"\n[instance]\nname = \"lq\"\n[numerics]\nn_paths = 10000000\nn_steps = 50\n");
        assert_eq!(execute(&c).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn explicit_grid_outside_control_set_is_config_error() {
        let c = cfg("seed = 1\nmethod = \"tree\"\n[instance]\nname = \"linear\"\n[numerics]\nu_grid = [-5.0, 1.0]\n");
        let e = execute(&c).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("u_grid"), "{e}");
    }
}
