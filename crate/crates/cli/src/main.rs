use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lmcf_core::analysis;
use lmcf_core::config::{ConfigError, ExperimentConfig, Pipeline};
use lmcf_core::expander::{self, ExpanderSolution, RadialExpanderProblem};
use lmcf_core::experiment::{self, ExperimentError, ExperimentOutcome};
use lmcf_core::flow::Snapshot;
use lmcf_core::grid::Point;
use lmcf_core::legendre;
use lmcf_core::mcf;
use lmcf_core::snapshot::{self, SnapshotFile};

#[derive(Parser)]
#[command(name = "lmcf", version, about = "Logarithmic gradient flow laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Flow experiments.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Heat-equation oracle (the τ = 0 limit).
    #[command(subcommand)]
    Heat(HeatCmd),
    /// Self-expander profiles and grid solutions.
    #[command(subcommand)]
    Expander(ExpanderCmd),
    /// Legendre duality.
    #[command(subcommand)]
    Legendre(LegendreCmd),
    /// Lagrangian mean curvature flow reconstruction.
    #[command(subcommand)]
    Mcf(McfCmd),
    /// Asymptotic analysis of trajectories.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Write plotdata.csv for a finished run.
    Emit {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML or JSON experiment config.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (defaults to the config's `output`).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Exit with status 4 if any `[check]` bound fails.
    #[arg(long)]
    check: bool,
}

#[derive(Subcommand)]
enum FlowCmd {
    /// Run the pipeline named in the config.
    Run(ConfigArgs),
}

#[derive(Subcommand)]
enum HeatCmd {
    Solve(ConfigArgs),
}

#[derive(Subcommand)]
enum ExpanderCmd {
    /// Integrate the radial profile ODE and print or write its CSV.
    Shoot {
        #[arg(long)]
        n: usize,
        #[arg(long, allow_hyphen_values = true)]
        a: f64,
        #[arg(long)]
        rmax: f64,
        /// Initial slope (only meaningful for n = 1).
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        slope: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Grid Newton solve with the shot profile as Dirichlet data.
    Newton(ConfigArgs),
    /// Certify a snapshot as a self-expander.
    Certify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LegendreCmd {
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Residual of the dual equation along a trajectory.
    CheckDual {
        #[arg(long)]
        trajectory: PathBuf,
    },
}

#[derive(Subcommand)]
enum McfCmd {
    Reconstruct {
        #[arg(long)]
        trajectory: PathBuf,
        /// One seed per line, coordinates separated by commas or spaces.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, default_value_t = 4)]
        substeps: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    Blowdown(ConfigArgs),
    Decay {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long, default_value_t = analysis::DEFAULT_EPS0)]
        eps0: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    Plane {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        window: f64,
        #[arg(long, default_value_t = 0.02)]
        tolerance: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    Condition {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "lambda")]
        lambda: f64,
        #[arg(long = "Lambda")]
        big_lambda: f64,
        #[arg(long, default_value_t = 0.0)]
        c_h2: f64,
    },
}

enum Failure {
    Config(String),
    Numerical(String),
    Check(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Check(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Check(m) | Failure::Other(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => c.into(),
            ExperimentError::Numerical(m) => Failure::Numerical(m),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<snapshot::SnapshotError> for Failure {
    fn from(e: snapshot::SnapshotError) -> Self {
        Failure::Other(e.to_string())
    }
}

fn numerical(e: impl Display) -> Failure {
    Failure::Numerical(e.to_string())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

fn emit_text(output: Option<&Path>, text: &str) -> Result<(), Failure> {
    match output {
        Some(p) => fs::write(p, text).map_err(io(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: serde::Serialize>(output: Option<&Path>, v: &T) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    emit_text(output, &s)
}

fn load_config(args: &ConfigArgs, forced: Option<Pipeline>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::from_preset(name)?,
        (None, None) => return Err(Failure::Config("either --config or --preset is required".into())),
    };
    if let Some(p) = forced {
        cfg.pipeline = p;
    }
    cfg.validate()
        .map_err(|(key, message)| Failure::Config(format!("{key}: {message}")))?;
    Ok(cfg)
}

fn run_config(args: &ConfigArgs, forced: Option<Pipeline>) -> Result<(), Failure> {
    let cfg = load_config(args, forced)?;
    let outcome = experiment::run_experiment(&cfg, args.output.as_deref())?;
    report_outcome(&outcome, args.check)
}

fn report_outcome(o: &ExperimentOutcome, check: bool) -> Result<(), Failure> {
    println!("{}: {} ({})", format!("{:?}", o.summary.pipeline).to_lowercase(), o.summary.status, o.dir.display());
    for (k, v) in &o.summary.metrics {
        println!("  {k} = {v:.6e}");
    }
    for n in &o.summary.notes {
        println!("  note: {n}");
    }
    for c in &o.checks {
        let v = c.value.map_or("missing".to_string(), |v| format!("{v:.6e}"));
        println!(
            "  check {}: {} in [{}, {}] -> {}",
            c.metric,
            v,
            c.min.map_or("-inf".into(), |x| x.to_string()),
            c.max.map_or("inf".into(), |x| x.to_string()),
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(msg) = &o.aborted {
        return Err(Failure::Numerical(msg.clone()));
    }
    if check && !o.checks_passed() {
        let failed: Vec<&str> = o.checks.iter().filter(|c| !c.passed).map(|c| c.metric.as_str()).collect();
        return Err(Failure::Check(format!("checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn load_trajectory(dir: &Path) -> Result<Vec<Snapshot>, Failure> {
    Ok(snapshot::read_trajectory(dir)?
        .into_iter()
        .map(SnapshotFile::into_snapshot)
        .collect())
}

fn read_seeds(path: &Path) -> Result<Vec<Point>, Failure> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut seeds = vec![];
    for (k, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut p = [0.0; 3];
        let fields: Vec<&str> = l.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if fields.len() > 3 {
            return Err(Failure::Config(format!("{}: line {}: at most 3 coordinates", path.display(), k + 1)));
        }
        for (i, f) in fields.iter().enumerate() {
            p[i] = f
                .parse()
                .map_err(|e| Failure::Config(format!("{}: line {}: {e}", path.display(), k + 1)))?;
        }
        seeds.push(p);
    }
    Ok(seeds)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Flow(FlowCmd::Run(a)) => run_config(&a, None),
        Command::Heat(HeatCmd::Solve(a)) => run_config(&a, Some(Pipeline::Heat)),
        Command::Expander(ExpanderCmd::Newton(a)) => run_config(&a, Some(Pipeline::Expander)),
        Command::Analyze(AnalyzeCmd::Blowdown(a)) => run_config(&a, Some(Pipeline::Blowdown)),
        Command::Expander(ExpanderCmd::Shoot { n, a, rmax, slope, output }) => {
            if !(1..=3).contains(&n) {
                return Err(Failure::Config(format!("n must be 1, 2 or 3 (got {n})")));
            }
            let problem = RadialExpanderProblem::new(n, a, rmax).with_slope(slope);
            let profile = expander::radial_shoot(&problem).map_err(numerical)?;
            emit_text(output.as_deref(), &profile.to_csv())
        }
        Command::Expander(ExpanderCmd::Certify { input, output }) => {
            let s = snapshot::read(&input)?;
            let sol = ExpanderSolution::from_grid(s.u, None).map_err(numerical)?;
            let rep = expander::certify(&sol);
            emit_json(output.as_deref(), &rep)?;
            if rep.certified {
                Ok(())
            } else {
                Err(Failure::Check("snapshot is not certified as a self-expander".into()))
            }
        }
        Command::Legendre(LegendreCmd::Transform { input, output }) => {
            let s = snapshot::read(&input)?;
            let y = legendre::auto_y_grid(&s.u).map_err(numerical)?;
            let star = legendre::legendre_transform(&s.u, &y).map_err(numerical)?;
            let mut f = SnapshotFile::new(star, s.header.t, s.header.tau);
            f.u.set_label(format!("legendre({})", s.header.label));
            f.header.label = f.u.label().to_string();
            snapshot::write(&output, &f)?;
            Ok(())
        }
        Command::Legendre(LegendreCmd::CheckDual { trajectory }) => {
            let snaps = load_trajectory(&trajectory)?;
            let r = legendre::dual_flow_check(&snaps).map_err(numerical)?;
            emit_json(None, &serde_json::json!({ "dual_flow_residual": r, "snapshots": snaps.len() }))
        }
        Command::Mcf(McfCmd::Reconstruct {
            trajectory,
            seeds,
            substeps,
            output,
        }) => {
            let snaps = load_trajectory(&trajectory)?;
            let seeds = read_seeds(&seeds)?;
            let paths = mcf::integrate_particles(&snaps, &seeds, substeps).map_err(numerical)?;
            let report = mcf::verify_mcf(&paths, &snaps).map_err(numerical)?;
            let n = snaps[0].u.domain().dim();
            emit_text(output.as_deref(), &mcf::paths_csv(&paths, Some(&report), n))?;
            eprintln!("max |dF/dt - H| = {:.6e} over {} samples", report.max_deviation, report.samples);
            Ok(())
        }
        Command::Analyze(AnalyzeCmd::Decay {
            trajectory,
            order,
            eps0,
            output,
        }) => {
            let snaps = load_trajectory(&trajectory)?;
            let samples = analysis::derivative_norm_samples(&snaps, order).map_err(numerical)?;
            let fit = analysis::fit_decay(&samples, &analysis::quantity_name(order), eps0).map_err(numerical)?;
            emit_json(output.as_deref(), &vec![fit])
        }
        Command::Analyze(AnalyzeCmd::Plane {
            trajectory,
            window,
            tolerance,
            output,
        }) => {
            let snaps = load_trajectory(&trajectory)?;
            let rep = analysis::plane_convergence(&snaps, window, tolerance);
            emit_json(output.as_deref(), &rep)
        }
        Command::Analyze(AnalyzeCmd::Condition {
            input,
            lambda,
            big_lambda,
            c_h2,
        }) => {
            let s = snapshot::read(&input)?;
            let rep = analysis::check_condition_b(&s.u, lambda, big_lambda, c_h2);
            emit_json(None, &rep)?;
            if rep.passed {
                Ok(())
            } else {
                Err(Failure::Check("condition B violated".into()))
            }
        }
        Command::Emit { dir } => {
            let out = experiment::emit_plotdata(&dir)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(threads) = std::env::var("LMCF_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("LMCF_THREADS ignored: {e}");
        }
    }
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
