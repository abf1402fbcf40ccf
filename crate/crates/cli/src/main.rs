use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use mmpinv::diffusivity::DiffusivityModel;
use mmpinv::homog::CellProblem;
use mmpinv::invasion::{ModelParams, Preset, DEFAULT_D_REF};
use mmpinv::io::{load_config, read_homog_csv, write_homog_csv, HomogRow, ModeConfig, SimulationConfig};
use mmpinv::mesh::{generate_perforated_cell, import_mesh, CellFamily};
use mmpinv::pipeline::{fit_rows_scalar, fit_rows_tensor, homogenize_member, run_config, DEFAULT_H_REL};
use mmpinv::verify::{check_bounds, dilute_limit_check, homogeneous_reduction_error, ode_oracle, OracleReport};

/// Homogenized MMP diffusivity and tissue-invasion simulation.
#[derive(Debug, Parser)]
#[command(name = "mmpinv", version)]
struct Cli {
    /// Default output directory.
    #[arg(long, global = true, env = "MMPINV_OUT", default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve cell problems and write one tensor row per geometry.
    Homogenize(HomogenizeArgs),
    /// Fit a diffusivity model to homogenization rows.
    Fit(FitArgs),
    /// Run invasion simulations from config files.
    Simulate(SimulateArgs),
    /// Run the oracle checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Family {
    Circles,
    Squares,
    Ellipses,
}

impl From<Family> for CellFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Circles => CellFamily::Circles,
            Family::Squares => CellFamily::Squares,
            Family::Ellipses => CellFamily::Ellipses,
        }
    }
}

#[derive(Debug, Args)]
struct HomogenizeArgs {
    /// Built-in cell family; repeatable.
    #[arg(long = "family", value_enum)]
    families: Vec<Family>,
    /// Periodic cell mesh file; repeatable.
    #[arg(long = "mesh")]
    meshes: Vec<PathBuf>,
    /// Mesh size relative to the cell side for built-in families.
    #[arg(long, default_value_t = DEFAULT_H_REL)]
    h_rel: f64,
    /// Base diffusivity of the fluid phase.
    #[arg(long, default_value_t = 1.0)]
    d_bar: f64,
    /// Also homogenize the inclusion-free cell of each family.
    #[arg(long)]
    include_reference: bool,
    /// Output CSV; defaults to `<out>/homogenize.csv`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FitMode {
    Scalar,
    Tensor,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// CSV written by `homogenize`.
    points: PathBuf,
    #[arg(long, value_enum, default_value = "scalar")]
    mode: FitMode,
    /// Diffusivity of the intact matrix, `D(1)`.
    #[arg(long, default_value_t = DEFAULT_D_REF)]
    d_ref: f64,
    /// Do not add the inclusion-free value at `φ = 1`.
    #[arg(long)]
    no_unit_anchor: bool,
    /// Model file; defaults to `<out>/model.toml`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation config; repeatable, runs are independent.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    /// Clip invariant violations instead of aborting.
    #[arg(long)]
    permissive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    All,
    Ode,
    Homog,
    Bounds,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    scope: Scope,
    /// Mesh size for the dilute-limit cells.
    #[arg(long, default_value_t = DEFAULT_H_REL)]
    h_rel: f64,
}

/// Bad invocation; exits with status 2 like argument errors.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build();
    let result = pool.context("building thread pool").and_then(|p| p.install(|| run(&cli)));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Homogenize(a) => homogenize(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Simulate(a) => simulate(cli, a),
        Command::Verify(a) => verify(a),
    }
}

fn output_path(cli: &Cli, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let path = explicit.clone().unwrap_or_else(|| cli.out.join(default_name));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(path)
}

enum Job {
    Member(CellFamily, usize),
    File(PathBuf),
}

fn homogenize(cli: &Cli, a: &HomogenizeArgs) -> Result<bool> {
    if a.families.is_empty() && a.meshes.is_empty() {
        return Err(UsageError("no geometry given; pass --family or --mesh".into()).into());
    }
    let mut jobs = Vec::new();
    for &f in &a.families {
        let f = CellFamily::from(f);
        if a.include_reference {
            jobs.push(Job::Member(f, 0));
        }
        jobs.extend(f.members().map(|n| Job::Member(f, n)));
    }
    jobs.extend(a.meshes.iter().cloned().map(Job::File));
    let rows = jobs
        .par_iter()
        .map(|job| match job {
            Job::Member(f, n) => homogenize_member(*f, *n, a.h_rel, a.d_bar)
                .with_context(|| format!("homogenizing {} member {n}", f.name())),
            Job::File(path) => {
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let t = import_mesh(path)
                    .and_then(CellProblem::new)
                    .and_then(|p| p.effective_tensor(a.d_bar))
                    .with_context(|| format!("homogenizing {}", path.display()))?;
                Ok(HomogRow::new(&name, 0, &t))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    for r in &rows {
        println!("{:<10} {:>2}  phi {:.4}  D/D_bar {:.5}", r.geometry, r.member, r.phi, r.diagonal_mean_ratio());
    }
    let path = output_path(cli, &a.output, "homogenize.csv")?;
    write_homog_csv(&rows, &path)?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn fit(cli: &Cli, a: &FitArgs) -> Result<bool> {
    let rows = read_homog_csv(&a.points).with_context(|| format!("reading {}", a.points.display()))?;
    let anchor = !a.no_unit_anchor;
    let model = match a.mode {
        FitMode::Scalar => {
            if rows.len() < 3 {
                return Err(UsageError(format!("scalar fit needs at least 3 rows, got {}", rows.len())).into());
            }
            let f = fit_rows_scalar(&rows, a.d_ref, anchor)?;
            let c = f.model.coeffs();
            println!("D(phi)/D(1) = {:.4} phi + {:.4} phi^2 + {:.4} phi^3  (residual {:.3e})", c[0], c[1], c[2], f.residual_norm);
            if let Some((alt, res)) = f.alternative {
                println!("with intercept: {:.4} + {:.4} phi + {:.4} phi^2 + {:.4} phi^3  (residual {res:.3e})", alt[0], alt[1], alt[2], alt[3]);
            }
            f.model.check_positive()?;
            DiffusivityModel::Scalar(f.model)
        }
        FitMode::Tensor => {
            let t = fit_rows_tensor(&rows, a.d_ref, anchor)?;
            t.check_spd_grid()?;
            println!("{} SPD knots; interpolant SPD on the 1e-3 grid", t.knots().count());
            DiffusivityModel::Tensor(t)
        }
    };
    let path = output_path(cli, &a.output, "model.toml")?;
    model.save(&path)?;
    println!("wrote {}", path.display());
    Ok(true)
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> Result<bool> {
    let mut cfgs = Vec::new();
    for path in &a.configs {
        if !path.is_file() {
            return Err(UsageError(format!("config file {} not found", path.display())).into());
        }
        let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
        if a.permissive {
            cfg.mode = ModeConfig::Permissive;
        }
        cfgs.push((path, cfg));
    }
    let results: Vec<Result<String>> = cfgs
        .par_iter()
        .map(|(path, cfg)| {
            let dir = job_dir(cli, path, cfg);
            let out = run_config(cfg, Some(&dir)).with_context(|| format!("simulating {}", path.display()))?;
            let last = out.metrics.last().expect("metrics include the initial state");
            for w in &out.warnings {
                eprintln!("warning [{}]: {w}", path.display());
            }
            Ok(format!(
                "{}: t = {}, invaded fraction {:.4} -> {:.4}, {} warnings, output in {}",
                path.display(),
                last.t,
                out.metrics[0].invaded_fraction,
                last.invaded_fraction,
                out.warnings.len(),
                dir.display()
            ))
        })
        .collect();
    let mut ok = true;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(e) => {
                eprintln!("error: {e:#}");
                ok = false;
            }
        }
    }
    Ok(ok)
}

/// The config's `output_dir` unless it is left at the default, in which
/// case runs go to `<out>/<config stem>`.
fn job_dir(cli: &Cli, path: &Path, cfg: &SimulationConfig) -> PathBuf {
    if cfg.output_dir == Path::new("out") {
        cli.out.join(path.file_stem().unwrap_or_default())
    } else {
        cfg.output_path()
    }
}

fn verify(a: &VerifyArgs) -> Result<bool> {
    let mut reports = Vec::new();
    if matches!(a.scope, Scope::All | Scope::Ode) {
        reports.extend(ode_reports()?);
    }
    if matches!(a.scope, Scope::All | Scope::Homog) {
        let mesh = generate_perforated_cell(&CellFamily::Circles.spec(1, a.h_rel))?;
        let t = CellProblem::new(mesh)?.effective_tensor(1.0)?;
        reports.push(dilute_limit_check(&t, 1.0 - t.volume_fraction, 2)?);
    }
    if matches!(a.scope, Scope::All | Scope::Bounds) {
        for preset in [Preset::LowSuit2d, Preset::Deakin2d] {
            let mut cfg = SimulationConfig::for_preset(preset);
            cfg.domain.resolution = Some(vec![40, 40]);
            cfg.t_end = 1.0;
            let space = mmpinv::fem::P1Space::standard(cfg.build_mesh()?);
            let initial = cfg.initial_state(&space)?;
            let out = run_config(&cfg, None)?;
            let mut r = check_bounds(&out.final_state, &initial, &cfg.model_params()?);
            r.scenario = format!("bounds, {} to t = 1", preset.name());
            reports.push(r);
        }
    }
    for r in &reports {
        println!("{r}");
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn ode_reports() -> Result<Vec<OracleReport>> {
    let mut reports = Vec::new();
    let decay = ModelParams {
        kappa_s: 0.0,
        kappa_b: 0.0,
        mu_s: 0.0,
        mu_b: 0.0,
        delta_s: 0.0,
        ..Default::default()
    };
    let traj = ode_oracle(&decay, [0.5, 1.0, 1.0, 0.0], 1.0, 1e-8)?;
    let y = traj.final_state();
    let exact = (-0.1f64).exp();
    let dev = (y[1] - exact).abs().max((y[2] - exact).abs());
    reports.push(OracleReport {
        scenario: "oracle vs exp(-0.1 t)".into(),
        max_abs_dev: dev,
        max_rel_dev: dev / exact,
        tolerance: 1e-8,
        passed: dev / exact <= 1e-8,
        detail: format!("{} RK4 steps", traj.steps),
    });
    let p = ModelParams { suitability_enabled: true, ..Default::default() };
    let y0 = [0.9, 1.0, 2.0, 0.5];
    let e1 = homogeneous_reduction_error(&p, y0, 1.0, 1e-2)?;
    let e2 = homogeneous_reduction_error(&p, y0, 1.0, 5e-3)?;
    let ratio = e1 / e2;
    reports.push(OracleReport {
        scenario: "IMEX order on homogeneous state".into(),
        max_abs_dev: (ratio - 2.0).abs(),
        max_rel_dev: (ratio - 2.0).abs() / 2.0,
        tolerance: 0.3,
        passed: (ratio - 2.0).abs() <= 0.3,
        detail: format!("errors {e1:.3e}, {e2:.3e}, ratio {ratio:.3}"),
    });
    let y = ode_oracle(&p, [1.0, 0.0, 0.0, 0.0], 5.0, 1e-8)?.final_state();
    let dev = (y[0] - 1.0).abs() + y[1].abs() + y[2].abs() + y[3].abs();
    reports.push(OracleReport {
        scenario: "intact matrix fixed point".into(),
        max_abs_dev: dev,
        max_rel_dev: dev,
        tolerance: 0.0,
        passed: dev == 0.0,
        detail: String::new(),
    });
    Ok(reports)
}
