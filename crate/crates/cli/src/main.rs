use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curveflow::config::parse_config;
use curveflow::monitor::{convergence_study, CheckName, ResidualReport};
use curveflow::output::RunFiles;
use curveflow::presets::{Preset, PRESET_NAMES};
use curveflow::{
    evolve_with, CurveError, FlowConfig, FlowVariant, PresetSpec, StepMode, Trajectory,
};

const DEFAULT_OUT: &str = "curveflow_out";
const OUT_ENV: &str = "CURVEFLOW_OUT";

/// Elastic flows of closed curves with runtime identity checks.
#[derive(Parser, Debug)]
#[command(name = "curveflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evolve a curve and write snapshots, diagnostics and optional SVG frames.
    Run(RunArgs),
    /// Run residual refinement checks over N/2, N and 2N grid points.
    Check(CheckArgs),
    /// Run one residual check over an explicit list of grid sizes.
    Convergence(ConvergenceArgs),
    /// List or describe the initial-curve presets.
    Presets {
        #[command(subcommand)]
        action: Option<PresetsAction>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// JSON config file; the flags below override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Initial curve preset with default parameters.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Weight of the length term (must be positive).
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<f64>,
    /// Number of grid points N (even, >= 8).
    #[arg(long)]
    nodes: Option<usize>,
    /// Final time.
    #[arg(long, allow_hyphen_values = true)]
    t_end: Option<f64>,
    /// Flow variant.
    #[arg(long, value_name = "d-lambda|e-lambda")]
    flow: Option<String>,
    /// Fixed time step.
    #[arg(long, conflicts_with = "cfl")]
    dt: Option<f64>,
    /// Adaptive step factor in (0, 1]: dt = cfl * (min|f_x| * h)^4.
    #[arg(long)]
    cfl: Option<f64>,
    /// Weight of the odd-even damping term (0 disables it) [default: 0.5].
    #[arg(long, value_name = "NU")]
    damping: Option<f64>,
    /// Output directory [default: config value, then $CURVEFLOW_OUT, then ./curveflow_out].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Write an SVG frame for every K-th snapshot (into <out>/svg unless configured).
    #[arg(long, value_name = "K")]
    svg_every: Option<usize>,
    /// Seed for randomized presets.
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// Keep every K-th diagnostics row.
    #[arg(long, value_name = "K")]
    diag_every: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Check name, or "all".
    name: String,
    #[arg(long, default_value = "ellipse", value_name = "NAME")]
    preset: String,
    /// Middle grid size N.
    #[arg(long, default_value_t = 128)]
    nodes: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
}

#[derive(Args, Debug)]
struct ConvergenceArgs {
    check: String,
    #[arg(long, default_value = "ellipse", value_name = "NAME")]
    preset: String,
    /// Comma-separated increasing grid sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
    grids: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
}

#[derive(Subcommand, Debug)]
enum PresetsAction {
    /// List preset names.
    List,
    /// Show a preset's parameters and defaults.
    Describe { name: String },
}

enum Failure {
    Error(CurveError),
    ChecksFailed,
    RunAborted,
}

impl From<CurveError> for Failure {
    fn from(e: CurveError) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Check(args) => check(args),
        Command::Convergence(args) => convergence(args),
        Command::Presets { action } => presets(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::ChecksFailed) => ExitCode::from(2),
        Err(Failure::RunAborted) => ExitCode::from(3),
    }
}

fn config_error(path: &str, reason: impl Into<String>) -> CurveError {
    CurveError::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

fn preset_spec(name: &str) -> Result<PresetSpec, CurveError> {
    Preset::default_for(name).map(PresetSpec::new)
}

fn build_config(args: &RunArgs) -> Result<FlowConfig, CurveError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CurveError::Io {
                path: path.clone(),
                source: e,
            })?;
            parse_config(&text)?
        }
        None => {
            let missing = |flag: &str| config_error(flag, format!("--{flag} is required without --config"));
            FlowConfig::new(
                preset_spec(args.preset.as_deref().ok_or_else(|| missing("preset"))?)?,
                args.lambda.ok_or_else(|| missing("lambda"))?,
                args.nodes.ok_or_else(|| missing("nodes"))?,
                args.t_end.ok_or_else(|| missing("t-end"))?,
            )
        }
    };
    if let Some(name) = &args.preset {
        config.preset = preset_spec(name)?;
    }
    if let Some(l) = args.lambda {
        config.lambda = l;
    }
    if let Some(n) = args.nodes {
        config.nodes = n;
    }
    if let Some(t) = args.t_end {
        config.t_end = t;
    }
    if let Some(f) = &args.flow {
        config.variant = FlowVariant::parse(f)
            .ok_or_else(|| config_error("flow", format!("unknown flow `{f}`")))?;
    }
    if let Some(dt) = args.dt {
        config.policy.mode = StepMode::FixedDt(dt);
    }
    if let Some(cfl) = args.cfl {
        config.policy.mode = StepMode::AdaptiveCfl(cfl);
    }
    if let Some(nu) = args.damping {
        config.policy.damping = nu;
    }
    if let Some(k) = args.svg_every {
        config.output.svg_every = k;
        if config.output.svg_dir.is_none() {
            config.output.svg_dir = Some("svg".into());
        }
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(k) = args.diag_every {
        config.diagnostics_every = k;
    }
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let dir = args
        .out
        .clone()
        .or_else(|| config.output.dir.clone())
        .or(env_out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    config.output.dir = Some(dir);
    config.validate()?;
    Ok(config)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let config = build_config(&args)?;
    let base = config.output.dir.clone().unwrap_or_default();
    let out = &config.output;
    let diagnostics_path = out.diagnostics_path(&base);
    let mut files = RunFiles::create(
        &out.snapshots_path(&base),
        &diagnostics_path,
        out.svg_path(&base).as_deref(),
        out.svg_every,
    )?;
    let traj = evolve_with(&config, &mut files)?;
    files.finish()?;
    println!("{}", summary_line(&traj, &diagnostics_path));
    if traj.termination.is_success() {
        Ok(())
    } else {
        Err(Failure::RunAborted)
    }
}

fn summary_line(traj: &Trajectory, diagnostics: &Path) -> String {
    let s = &traj.summary;
    format!(
        "termination={} t={} steps={} D_lambda={:.9} E_lambda={:.9} mesh_ratio={:.6} min_fx={:.6e} diagnostics={}",
        traj.termination,
        traj.final_state.t,
        traj.steps,
        traj.final_energy.d_lambda,
        traj.final_energy.e_lambda,
        s.final_mesh_ratio,
        s.min_fx,
        diagnostics.display()
    )
}

fn print_table(reports: &[ResidualReport]) {
    println!(
        "{:<12} {:<40} {:<40} {:>8} {:>12} {}",
        "check", "preset", "residuals", "order", "window", "result"
    );
    for r in reports {
        let residuals: Vec<String> = r
            .grids
            .iter()
            .zip(&r.residuals)
            .map(|(n, v)| format!("{n}:{v:.2e}"))
            .collect();
        let window = match r.order_window {
            Some((lo, hi)) => format!("[{lo}, {hi}]"),
            None => "decreasing".to_string(),
        };
        println!(
            "{:<12} {:<40} {:<40} {:>8.3} {:>12} {}",
            r.check.name(),
            r.preset,
            residuals.join(" "),
            r.observed_order,
            window,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
}

fn finish_checks(reports: &[ResidualReport]) -> Result<(), Failure> {
    print_table(reports);
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", reports.len() - failed, reports.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::ChecksFailed)
    }
}

fn check(args: CheckArgs) -> Result<(), Failure> {
    let names: Vec<String> = if args.name == "all" {
        CheckName::ALL.iter().map(|c| c.name().to_string()).collect()
    } else {
        vec![args.name.clone()]
    };
    if args.nodes < 16 || args.nodes % 4 != 0 {
        return Err(config_error(
            "nodes",
            format!("N must be a multiple of 4 and >= 16 so that N/2 is a valid grid, got {}", args.nodes),
        )
        .into());
    }
    let spec = preset_spec(&args.preset)?;
    let grids = [args.nodes / 2, args.nodes, 2 * args.nodes];
    let reports = names
        .iter()
        .map(|n| convergence_study(n, &spec, &grids, args.lambda))
        .collect::<Result<Vec<_>, _>>()?;
    finish_checks(&reports)
}

fn convergence(args: ConvergenceArgs) -> Result<(), Failure> {
    let spec = preset_spec(&args.preset)?;
    let report = convergence_study(&args.check, &spec, &args.grids, args.lambda)?;
    finish_checks(&[report])
}

fn presets(action: Option<PresetsAction>) -> Result<(), Failure> {
    match action.unwrap_or(PresetsAction::List) {
        PresetsAction::List => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
        PresetsAction::Describe { name } => {
            let text = Preset::describe(&name).ok_or_else(|| {
                config_error(
                    "preset",
                    format!("unknown preset `{name}` (known: {})", PRESET_NAMES.join(", ")),
                )
            })?;
            println!("{text}");
        }
    }
    Ok(())
}
