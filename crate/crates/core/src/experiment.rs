//! Runs a configured pipeline and writes its artifact directory:
//!
//! ```text
//! config.toml         resolved configuration
//! snapshots/          snap_NNNN.bin (and .csv copies when requested)
//! monitors.csv        one MonitorRecord per accepted step
//! summary.json        pipeline, status and scalar metrics
//! report.json         pipeline-specific report
//! ratefit.json        rate fits (decay and blow-down pipelines)
//! manifest.json       every file with its SHA-256 and the run timestamp
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{self, RateFit};
use crate::config::{BoundaryKind, ConfigError, ExperimentConfig, InitialData, Pipeline};
use crate::expander::{self, NewtonOptions, RadialExpanderProblem};
use crate::flow::{self, BoundaryModel, FlowError, FlowRun, MonitorRecord, ReferenceSolution, Snapshot};
use crate::grid::{hessian, GridFunction};
use crate::heat;
use crate::legendre;
use crate::mcf;
use crate::snapshot::{self, SnapshotError, SnapshotFile};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io(path))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), ExperimentError> {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    write_file(path, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pipeline: Pipeline,
    pub preset: Option<String>,
    /// "ok" or "aborted".
    pub status: String,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub metric: String,
    pub value: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub checks: Vec<CheckResult>,
    /// Set when the flow stopped early on loss of convexity.
    pub aborted: Option<String>,
}

impl ExperimentOutcome {
    pub fn checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Artifacts {
    dir: PathBuf,
    summary: Summary,
    report: serde_json::Value,
    ratefits: Option<Vec<RateFit>>,
    aborted: Option<String>,
}

impl Artifacts {
    fn metric(&mut self, name: &str, v: f64) {
        self.summary.metrics.insert(name.to_string(), v);
    }

    fn flag(&mut self, name: &str, v: bool) {
        self.metric(name, if v { 1.0 } else { 0.0 });
    }
}

/// Initial grid function of the config (closed-form data or a shot expander profile),
/// plus seeded noise on interior nodes.
pub fn initial_grid(cfg: &ExperimentConfig) -> Result<GridFunction, ExperimentError> {
    let d = cfg.domain();
    let n = d.dim();
    let u = match &cfg.initial {
        InitialData::Expander { a, slope } => {
            let profile = shoot_profile(cfg, *a, *slope)?;
            profile
                .to_grid(d)
                .ok_or_else(|| ExperimentError::Numerical("expander profile does not cover the grid".into()))?
        }
        data => {
            let data = data.clone();
            GridFunction::from_fn(d, data.kind(), move |x| data.value(x, n).expect("closed-form initial data"))
        }
    };
    add_noise(cfg, u)
}

/// Seeded uniform noise of amplitude `cfg.noise` on interior nodes.
fn add_noise(cfg: &ExperimentConfig, u: GridFunction) -> Result<GridFunction, ExperimentError> {
    if cfg.noise <= 0.0 {
        return Ok(u);
    }
    let d = *u.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = u.values().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        let r: f64 = rng.gen_range(-1.0..=1.0);
        if d.boundary_distance(i) > 0 {
            *v += cfg.noise * r;
        }
    }
    GridFunction::new(d, values, format!("{} + noise", u.label())).map_err(|e| ExperimentError::Numerical(e.to_string()))
}

fn shoot_profile(cfg: &ExperimentConfig, a: f64, slope: f64) -> Result<expander::RadialProfile, ExperimentError> {
    let d = cfg.domain();
    let r_max = cfg
        .analysis
        .expander_r_max
        .unwrap_or(d.half_width() * (d.dim() as f64).sqrt() * 1.05);
    let problem = RadialExpanderProblem::new(d.dim(), a, r_max).with_slope(slope);
    expander::radial_shoot(&problem).map_err(|e| ExperimentError::Numerical(e.to_string()))
}

fn boundary_model(cfg: &ExperimentConfig) -> BoundaryModel {
    match (cfg.boundary, cfg.initial.far_field()) {
        (BoundaryKind::FarField, Some(q)) => BoundaryModel::QuadraticFarField(q),
        _ => BoundaryModel::Frozen,
    }
}

/// Runs the flow; an abort on lost convexity returns the last good run and the message.
fn run_flow(cfg: &ExperimentConfig) -> Result<(FlowRun, Option<String>), ExperimentError> {
    let u0 = initial_grid(cfg)?;
    match flow::run(u0, &cfg.flow, boundary_model(cfg)) {
        Ok(run) => Ok((run, None)),
        Err(FlowError::AbortedNonConvex {
            t,
            halvings,
            source,
            last_good,
        }) => Ok((
            *last_good,
            Some(format!("flow aborted at t = {t} after {halvings} dt halvings: {source}")),
        )),
        Err(e) => Err(ExperimentError::Numerical(e.to_string())),
    }
}

fn write_snapshots(dir: &Path, sub: &str, snaps: &[Snapshot], tau: f64, csv: bool) -> Result<(), ExperimentError> {
    let sd = dir.join(sub);
    fs::create_dir_all(&sd).map_err(io(&sd))?;
    for (k, s) in snaps.iter().enumerate() {
        let f = SnapshotFile::new(s.u.clone(), s.t, tau);
        let name = snapshot::snapshot_name(k);
        snapshot::write_binary(&sd.join(&name), &f)?;
        if csv {
            snapshot::write_csv(&sd.join(name.replace(".bin", ".csv")), &f)?;
        }
    }
    Ok(())
}

pub fn write_monitors(path: &Path, log: &[MonitorRecord]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ExperimentError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    if log.is_empty() {
        w.write_record(MONITOR_COLUMNS).map_err(|e| ExperimentError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    for r in log {
        w.serialize(r).map_err(|e| ExperimentError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(io(path))
}

const MONITOR_COLUMNS: [&str; 7] = ["t", "lambda_min", "lambda_max", "grad_sq_sup", "d3_norm", "dt", "residual"];

fn flow_metrics(art: &mut Artifacts, cfg: &ExperimentConfig, run: &FlowRun) {
    let log = &run.state.monitor_log;
    let lmin = log.iter().map(|r| r.lambda_min).fold(f64::INFINITY, f64::min);
    let lmax = log.iter().map(|r| r.lambda_max).fold(f64::NEG_INFINITY, f64::max);
    art.metric("t_final", run.state.t);
    art.metric("steps", run.state.step_count as f64);
    art.metric("lambda_min", lmin);
    art.metric("lambda_max", lmax);
    let res = log.iter().skip(1).map(|r| r.residual).fold(0.0, f64::max);
    art.metric("residual_max", res);
    if let Some(first) = log.first() {
        let over = log
            .iter()
            .map(|r| (first.lambda_min - r.lambda_min).max(r.lambda_max - first.lambda_max).max(0.0))
            .fold(0.0, f64::max);
        art.metric("bound_overshoot", over);
    }
    if let (InitialData::Quadratic { .. }, Some(q), true) = (&cfg.initial, cfg.initial.far_field(), cfg.noise == 0.0) {
        let d = cfg.domain();
        let tau = cfg.flow.tau;
        let err = run
            .snapshots
            .iter()
            .map(|s| {
                let exact = GridFunction::from_fn(d, "exact", |x| q.value(x, s.t, tau));
                s.u.sup_diff(&exact, 1)
            })
            .fold(0.0, f64::max);
        art.metric("sup_error", err);
    }
}

fn pipeline_flow(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Option<FlowRun>, ExperimentError> {
    let (run, aborted) = run_flow(cfg)?;
    write_snapshots(&art.dir, "snapshots", &run.snapshots, cfg.flow.tau, cfg.snapshot_csv)?;
    write_monitors(&art.dir.join("monitors.csv"), &run.state.monitor_log)?;
    flow_metrics(art, cfg, &run);
    if let Some(msg) = aborted {
        art.summary.notes.push(msg.clone());
        art.aborted = Some(msg);
    }
    Ok(Some(run))
}

fn pipeline_heat(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let run = pipeline_flow(cfg, art)?.expect("flow run");
    let q = cfg.initial.far_field().expect("validated quadratic data");
    let u0 = &run.snapshots[0].u;
    let mut oracle = vec![run.snapshots[0].clone()];
    let mut worst = 0.0f64;
    let mut rows = vec![];
    for s in run.snapshots.iter().skip(1) {
        let h = heat::heat_solve(u0, s.t, &q).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
        let diff = s.u.sup_diff(&h, u0.domain().monitored_margin());
        worst = worst.max(diff);
        rows.push(serde_json::json!({"t": s.t, "sup_difference": diff}));
        oracle.push(Snapshot { t: s.t, u: h });
    }
    write_snapshots(&art.dir, "oracle", &oracle, 0.0, cfg.snapshot_csv)?;
    if cfg.flow.tau != 0.0 {
        art.summary
            .notes
            .push(format!("flow run at τ = {}; the heat oracle solves τ = 0", cfg.flow.tau));
    }
    art.metric("oracle_sup_difference", worst);
    art.report = serde_json::json!({ "comparisons": rows });
    Ok(())
}

/// Depth of the boundary-vanishing bump subtracted from the profile for the Newton start.
const NEWTON_GUESS_DEPTH: f64 = 0.2;

fn pipeline_expander(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let (a, slope) = match cfg.initial {
        InitialData::Expander { a, slope } => (a, slope),
        _ => unreachable!("validated"),
    };
    let profile = shoot_profile(cfg, a, slope)?;
    write_file(&art.dir.join("profile.csv"), profile.to_csv())?;
    let d = cfg.domain();
    let n = d.dim();
    let exact_at = |x: &crate::grid::Point| profile.value_at(x).unwrap_or(f64::NAN);
    let exact = profile
        .to_grid(d)
        .ok_or_else(|| ExperimentError::Numerical("expander profile does not cover the grid".into()))?;
    // Newton starts from the profile pushed down by a convex bump that vanishes on the boundary
    let half = d.half_width();
    let guess = GridFunction::from_fn(d, "newton guess", |x| {
        let bump: f64 = (0..n).map(|i| (std::f64::consts::FRAC_PI_2 * x[i] / half).cos()).product();
        exact_at(x) - NEWTON_GUESS_DEPTH * bump
    });
    let u_init = add_noise(cfg, guess)?;
    let p = profile.clone();
    let boundary = BoundaryModel::ReferenceSolution(ReferenceSolution::new(move |x, t| {
        let s = t.sqrt();
        let mut y = [0.0; 3];
        for i in 0..n {
            y[i] = x[i] / s;
        }
        t * p.value_at(&y).unwrap_or(f64::NAN)
    }));
    let sol = expander::newton_solve(&u_init, &boundary, &NewtonOptions::default()).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    let rep = expander::certify(&sol);
    write_snapshots(&art.dir, "snapshots", &[Snapshot { t: 1.0, u: sol.u.clone() }], 1.0, cfg.snapshot_csv)?;
    write_json(&art.dir.join("certification.json"), &rep)?;
    art.metric("residual_norm", sol.residual_norm);
    art.metric("iterations", sol.iterations as f64);
    art.metric("profile_agreement", sol.u.sup_diff(&exact, 0));
    art.flag("certified", rep.certified);
    art.metric("bernstein_residual", rep.bernstein_residual);
    art.metric("condition_a_defect", rep.condition_a_defect);
    art.metric("lambda_min", rep.lambda_min);
    art.metric("lambda_max", rep.lambda_max);
    art.metric("w_oscillation", rep.w_oscillation);
    art.report = serde_json::json!({
        "certification": rep,
        "residual_history": sol.residual_history,
    });
    Ok(())
}

fn pipeline_legendre(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let run = pipeline_flow(cfg, art)?.expect("flow run");
    let lerr = |e: legendre::LegendreError| ExperimentError::Numerical(e.to_string());
    let dual = legendre::transform_trajectory(&run.snapshots).map_err(lerr)?;
    write_snapshots(&art.dir, "dual", &dual, cfg.flow.tau, cfg.snapshot_csv)?;
    let residual = if dual.len() >= 3 {
        Some(legendre::dual_flow_residual(&dual).map_err(lerr)?)
    } else {
        art.summary.notes.push("fewer than 3 snapshots: dual flow residual skipped".into());
        None
    };
    let swaps: Vec<legendre::EigenSwap> = run
        .snapshots
        .iter()
        .zip(&dual)
        .map(|(s, ds)| legendre::eigen_swap(&s.u, &ds.u, cfg.analysis.swap_slack))
        .collect();
    let involution = legendre::involution_defect(&run.snapshots[0].u, &dual[0].u).map_err(lerr)?;
    let gap = legendre::young_equality_gap(&run.snapshots[0].u, &dual[0].u);
    if let Some(r) = residual {
        art.metric("dual_flow_residual", r);
    }
    art.flag("eigen_swap_holds", swaps.iter().all(|s| s.holds));
    art.metric("involution_defect", involution);
    art.metric("duality_gap", gap);
    art.report = serde_json::json!({
        "dual_flow_residual": residual,
        "eigen_swap": swaps.iter().zip(&run.snapshots).map(|(s, snap)| serde_json::json!({"t": snap.t, "swap": s})).collect::<Vec<_>>(),
        "involution_defect": involution,
        "duality_gap": gap,
    });
    Ok(())
}

fn pipeline_mcf(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let run = pipeline_flow(cfg, art)?.expect("flow run");
    let snaps: Vec<Snapshot> = run.snapshots.iter().filter(|s| s.t >= cfg.analysis.t_min - 1e-12).cloned().collect();
    let n = cfg.domain().dim();
    let seeds = mcf::seed_lattice(n, cfg.analysis.seeds_per_axis, cfg.analysis.seed_half_width);
    let merr = |e: mcf::McfError| ExperimentError::Numerical(e.to_string());
    let paths = mcf::integrate_particles(&snaps, &seeds, cfg.analysis.particle_substeps).map_err(merr)?;
    let report = mcf::verify_mcf(&paths, &snaps).map_err(merr)?;
    write_file(&art.dir.join("paths.csv"), mcf::paths_csv(&paths, Some(&report), n))?;
    art.metric("max_deviation", report.max_deviation);
    art.metric("max_tangential", report.max_tangential);
    art.metric("max_normal", report.max_normal);
    art.metric("max_curvature", report.max_curvature);
    art.metric("samples", report.samples as f64);
    if paths.len() > 1 {
        let last = paths[0].positions.len() - 1;
        art.metric(
            "min_distance_ratio",
            mcf::min_pairwise_distance(&paths, last) / mcf::min_pairwise_distance(&paths, 0),
        );
    }
    let mut summary = report.clone();
    summary.rows.clear();
    art.report = serde_json::json!({ "verification": summary, "paths": paths });
    Ok(())
}

fn pipeline_decay(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let run = pipeline_flow(cfg, art)?.expect("flow run");
    let mut fits = vec![];
    for &order in &cfg.analysis.orders {
        let name = analysis::quantity_name(order);
        let samples = analysis::derivative_norm_samples(&run.snapshots, order).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
        match analysis::fit_decay(&samples, &name, cfg.analysis.eps0) {
            Ok(fit) => {
                match fit.exponent {
                    Some(p) => {
                        art.metric(&format!("exponent_{name}"), p);
                        art.flag(&format!("exponent_bound_ok_{name}"), p <= analysis::decay_exponent_bound(order));
                    }
                    None => art.summary.notes.push(format!("{name}: identically zero, fit skipped")),
                }
                fits.push(fit);
            }
            Err(e) => art.summary.notes.push(format!("{name}: {e}")),
        }
    }
    art.report = serde_json::to_value(&fits).expect("fits serialize");
    art.ratefits = Some(fits);
    Ok(())
}

fn pipeline_blowdown(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let run = pipeline_flow(cfg, art)?.expect("flow run");
    let q = cfg
        .initial
        .far_field()
        .ok_or_else(|| ExperimentError::Numerical("blow-down needs a quadratic far field".into()))?;
    let d = cfg.domain();
    let w = crate::grid::BoxDomain::new(d.dim(), cfg.analysis.window, cfg.analysis.window_points)
        .map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    // self-similar solution from the homogeneous part ½xᵀAx, evaluated at t = 1
    let hom = flow::QuadraticFarField::new(q.a, [0.0; 3], 0.0).expect("SPD far field");
    let tau = cfg.flow.tau;
    let u1 = GridFunction::from_fn(w, "U1", move |x| hom.value(x, 1.0, tau));
    let rep = analysis::blowdown_convergence(&run.snapshots, &u1, cfg.analysis.t_min).map_err(|e| ExperimentError::Numerical(e.to_string()))?;
    art.metric("final_error", rep.final_error);
    art.flag("nonincreasing", rep.nonincreasing);
    art.flag("strictly_decreasing_from_2", rep.strictly_decreasing_from_2);
    art.flag("passed", rep.nonincreasing && rep.final_error <= cfg.analysis.tolerance);
    if let Some(p) = rep.fit.as_ref().and_then(|f| f.exponent) {
        art.metric("error_exponent", p);
    }
    let fit = rep.fit.clone().unwrap_or_else(|| RateFit {
        quantity: "blowdown_error".into(),
        samples: rep.times.iter().copied().zip(rep.errors.iter().copied()).collect(),
        exponent: None,
        constant: None,
        residual: f64::NAN,
        identically_zero: false,
    });
    art.ratefits = Some(vec![fit]);
    art.report = serde_json::to_value(&rep).expect("report serializes");
    Ok(())
}

fn pipeline_plane(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(), ExperimentError> {
    let run = pipeline_flow(cfg, art)?.expect("flow run");
    let rep = analysis::plane_convergence(&run.snapshots, cfg.analysis.window, cfg.analysis.tolerance);
    art.flag("hypothesis_violated", rep.hypothesis_violated);
    if let Some(p) = rep.passed {
        art.flag("passed", p && art.aborted.is_none());
    }
    if let Some(v) = rep.max_gradient.last() {
        art.metric("final_max_gradient", *v);
    }
    if let Some(v) = rep.affine_deviation.last() {
        art.metric("final_affine_deviation", *v);
    }
    if let Some(t) = rep.times.last() {
        art.metric("final_time", *t);
    }
    if art.aborted.is_some() && art.summary.metrics.get("lambda_min").is_some_and(|&l| l <= 0.0) {
        art.summary
            .notes
            .push("initial data is not strictly convex, so ln det D²u₀ is undefined and the flow cannot start".into());
    }
    art.summary.notes.push(format!("interpretation: {}", rep.interpretation));
    art.report = serde_json::to_value(&rep).expect("report serializes");
    Ok(())
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(io(path))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created: String,
    pub files: Vec<ManifestEntry>,
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let p = entry.map_err(io(dir))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if p.file_name().is_some_and(|f| f != "manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

pub fn write_manifest(dir: &Path) -> Result<Manifest, ExperimentError> {
    let mut files = vec![];
    collect_files(dir, &mut files)?;
    files.sort();
    let entries = files
        .iter()
        .map(|p| {
            Ok(ManifestEntry {
                path: p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                bytes: fs::metadata(p).map_err(io(p))?.len(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let manifest = Manifest {
        created: chrono::Utc::now().to_rfc3339(),
        files: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Evaluates the config's `[check]` bounds against the summary metrics.
pub fn evaluate_checks(cfg: &ExperimentConfig, summary: &Summary) -> Vec<CheckResult> {
    cfg.check
        .iter()
        .map(|(metric, b)| {
            let value = summary.metrics.get(metric).copied();
            CheckResult {
                metric: metric.clone(),
                value,
                min: b.min,
                max: b.max,
                passed: value.is_some_and(|v| b.holds(v)),
            }
        })
        .collect()
}

/// Runs the configured pipeline into `out_dir` (or the config's `output`).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate().map_err(|(key, message)| ConfigError::InvalidUnlocated { key, message })?;
    let dir = out_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    let mut art = Artifacts {
        dir: dir.clone(),
        summary: Summary {
            pipeline: cfg.pipeline,
            preset: cfg.preset.as_ref().map(|p| p.to_string()),
            status: "ok".into(),
            metrics: BTreeMap::new(),
            notes: vec![],
        },
        report: serde_json::Value::Null,
        ratefits: None,
        aborted: None,
    };
    match cfg.pipeline {
        Pipeline::Flow => {
            let run = pipeline_flow(cfg, &mut art)?.expect("flow run");
            let (lo, hi) = hessian(&run.state.u).bounds();
            art.report = serde_json::json!({
                "snapshot_times": run.snapshots.iter().map(|s| s.t).collect::<Vec<_>>(),
                "final_hessian_bounds": [lo, hi],
            });
        }
        Pipeline::Heat => pipeline_heat(cfg, &mut art)?,
        Pipeline::Expander => pipeline_expander(cfg, &mut art)?,
        Pipeline::Legendre => pipeline_legendre(cfg, &mut art)?,
        Pipeline::Mcf => pipeline_mcf(cfg, &mut art)?,
        Pipeline::Decay => pipeline_decay(cfg, &mut art)?,
        Pipeline::Blowdown => pipeline_blowdown(cfg, &mut art)?,
        Pipeline::Plane => pipeline_plane(cfg, &mut art)?,
    }
    if art.aborted.is_some() {
        art.summary.status = "aborted".into();
    }
    write_json(&dir.join("summary.json"), &art.summary)?;
    write_json(&dir.join("report.json"), &art.report)?;
    if let Some(fits) = &art.ratefits {
        write_json(&dir.join("ratefit.json"), fits)?;
    }
    write_manifest(&dir)?;
    let checks = evaluate_checks(cfg, &art.summary);
    Ok(ExperimentOutcome {
        dir,
        summary: art.summary,
        checks,
        aborted: art.aborted,
    })
}

/// Writes `plotdata.csv` (quantity, t, value) from the monitors and rate fits of a run.
pub fn emit_plotdata(dir: &Path) -> Result<PathBuf, ExperimentError> {
    let summary = dir.join("summary.json");
    if !summary.is_file() {
        return Err(ExperimentError::MissingArtifact(summary));
    }
    let out = dir.join("plotdata.csv");
    let map_csv = |e: csv::Error| ExperimentError::Io {
        path: out.clone(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(&out).map_err(map_csv)?;
    w.write_record(["quantity", "t", "value"]).map_err(map_csv)?;
    let monitors = dir.join("monitors.csv");
    if monitors.is_file() {
        let mut r = csv::Reader::from_path(&monitors).map_err(|e| ExperimentError::Io {
            path: monitors.clone(),
            source: e.into(),
        })?;
        for rec in r.deserialize::<MonitorRecord>() {
            let rec = rec.map_err(|e| ExperimentError::Io {
                path: monitors.clone(),
                source: e.into(),
            })?;
            let t = rec.t.to_string();
            for (q, v) in [
                ("lambda_min", rec.lambda_min),
                ("lambda_max", rec.lambda_max),
                ("grad_sq_sup", rec.grad_sq_sup),
                ("d3_norm", rec.d3_norm),
                ("dt", rec.dt),
                ("residual", rec.residual),
            ] {
                w.write_record([q, &t, &v.to_string()]).map_err(map_csv)?;
            }
        }
    }
    let rates = dir.join("ratefit.json");
    if rates.is_file() {
        let text = fs::read_to_string(&rates).map_err(io(&rates))?;
        let fits: Vec<RateFit> = serde_json::from_str(&text).map_err(|e| ExperimentError::Io {
            path: rates.clone(),
            source: e.into(),
        })?;
        for f in fits {
            for (t, v) in f.samples {
                w.write_record([f.quantity.as_str(), &t.to_string(), &v.to_string()]).map_err(map_csv)?;
            }
        }
    }
    w.flush().map_err(io(&out))?;
    Ok(out)
}
