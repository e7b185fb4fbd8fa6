//! Explicit time integration of the continuity family
//!
//! ```text
//! ∂u/∂t = (τ/n) ln det D²u + (1 − τ) Δu,   τ ∈ [0, 1]
//! ```
//!
//! which is the heat equation at τ = 0 and the logarithmic gradient flow at τ = 1.
//! The box is truncated; boundary nodes are overwritten from a [`BoundaryModel`]
//! after every stage.

use std::fmt;
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{
    gradient_at, hessian_values_at, third_derivative_norm, BoxDomain, GridFunction, HessianField,
    NonConvexityError, Point,
};
use crate::linalg::SymMat;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    NonConvex(#[from] NonConvexityError),
    #[error("step at t = {t} rejected after {halvings} dt halvings: {source}")]
    AbortedNonConvex {
        t: f64,
        halvings: u32,
        source: NonConvexityError,
        /// Last accepted state and the snapshots written up to it.
        last_good: Box<FlowRun>,
    },
    #[error("reference boundary disagrees with the initial data by {relative:.3} (relative sup-norm)")]
    BoundaryInconsistency { relative: f64 },
    #[error("τ must lie in [0, 1] (got {0})")]
    InvalidTau(f64),
    #[error("invalid time parameter: {0}")]
    InvalidTime(String),
    #[error("far-field matrix must be symmetric positive definite (λ_min = {0})")]
    FarFieldNotSpd(f64),
}

/// F_τ(A) = (τ/n) ln det A + (1 − τ) tr A.
pub fn operator_value(a: &SymMat, tau: f64) -> f64 {
    let n = a.dim() as f64;
    let mut v = (1.0 - tau) * a.trace();
    if tau != 0.0 {
        v += tau / n * a.det().ln();
    }
    v
}

/// Far-field quadratic ½xᵀAx + b·x + c and its exact evolution under the flow.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticFarField {
    pub a: SymMat,
    pub b: Point,
    pub c: f64,
}

impl QuadraticFarField {
    pub fn new(a: SymMat, b: Point, c: f64) -> Result<Self, FlowError> {
        let lambda_min = a.eigen_bounds().0;
        if !(lambda_min > 0.0) {
            return Err(FlowError::FarFieldNotSpd(lambda_min));
        }
        Ok(Self { a, b, c })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// The quadratic at t = 0.
    pub fn initial_value(&self, x: &Point) -> f64 {
        let n = self.a.dim();
        0.5 * self.a.quad_form(x) + (0..n).map(|i| self.b[i] * x[i]).sum::<f64>() + self.c
    }

    /// Exact solution at time t: the quadratic shifted by t·F_τ(A).
    pub fn value(&self, x: &Point, t: f64, tau: f64) -> f64 {
        self.initial_value(x) + t * operator_value(&self.a, tau)
    }

    /// Tangent quadratic of `u0` at the first corner node (one-sided derivatives).
    pub fn from_corner(u0: &GridFunction) -> Result<Self, FlowError> {
        let d = u0.domain();
        let n = d.dim();
        let a = hessian_values_at(d, u0.values(), 0);
        let g = gradient_at(u0, 0);
        let x = d.point(0);
        let ax = a.mul_vec(&x);
        let mut b = [0.0; 3];
        for i in 0..n {
            b[i] = g[i] - ax[i];
        }
        let c = u0.value(0) - 0.5 * a.quad_form(&x) - (0..n).map(|i| b[i] * x[i]).sum::<f64>();
        Self::new(a, b, c)
    }
}

type SolutionFn = dyn Fn(&Point, f64) -> f64 + Send + Sync;

/// Closed-form u_ref(x, t) used as Dirichlet data.
#[derive(Clone)]
pub struct ReferenceSolution(Arc<SolutionFn>);

impl ReferenceSolution {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&Point, f64) -> f64 + Send + Sync + 'static,
    {
        Self(Arc::new(f))
    }

    pub fn value(&self, x: &Point, t: f64) -> f64 {
        (self.0)(x, t)
    }
}

impl fmt::Debug for ReferenceSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ReferenceSolution(<closure>)")
    }
}

#[derive(Clone, Debug)]
pub enum BoundaryModel {
    QuadraticFarField(QuadraticFarField),
    ReferenceSolution(ReferenceSolution),
    /// Boundary nodes keep their initial values.
    Frozen,
}

impl BoundaryModel {
    pub fn kind(&self) -> &'static str {
        match self {
            BoundaryModel::QuadraticFarField(_) => "quadratic_far_field",
            BoundaryModel::ReferenceSolution(_) => "reference_solution",
            BoundaryModel::Frozen => "frozen",
        }
    }

    /// Boundary value at x and time t; `previous` is the current node value (for `Frozen`).
    pub fn value(&self, x: &Point, t: f64, tau: f64, previous: f64) -> f64 {
        match self {
            BoundaryModel::QuadraticFarField(q) => q.value(x, t, tau),
            BoundaryModel::ReferenceSolution(r) => r.value(x, t),
            BoundaryModel::Frozen => previous,
        }
    }

    fn apply(&self, values: &mut [f64], d: &BoxDomain, t: f64, tau: f64) {
        for (i, v) in values.iter_mut().enumerate() {
            if d.boundary_distance(i) == 0 {
                *v = self.value(&d.point(i), t, tau, *v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stepper {
    Euler,
    #[default]
    Midpoint,
}

/// What the integrator records after each accepted step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Half width of the centred window for sup |Du|²; `None` uses every node.
    pub gradient_window: Option<f64>,
    pub third_derivative: bool,
    pub residual: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            gradient_window: None,
            third_derivative: true,
            residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    pub t: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub grad_sq_sup: f64,
    pub d3_norm: f64,
    pub dt: f64,
    pub residual: f64,
}

impl MonitorRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.lambda_min,
            self.lambda_max,
            self.grad_sq_sup,
            self.d3_norm,
            self.dt,
            self.residual,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One trajectory of the flow.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub u: GridFunction,
    pub t: f64,
    pub tau: f64,
    pub boundary: BoundaryModel,
    pub step_count: usize,
    pub monitor_log: Vec<MonitorRecord>,
    hessian: Option<Arc<HessianField>>,
}

impl FlowState {
    pub fn new(u: GridFunction, tau: f64, boundary: BoundaryModel) -> Result<Self, FlowError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(FlowError::InvalidTau(tau));
        }
        Ok(Self {
            u,
            t: 0.0,
            tau,
            boundary,
            step_count: 0,
            monitor_log: Vec::new(),
            hessian: None,
        })
    }

    pub fn hessian(&self) -> Arc<HessianField> {
        match &self.hessian {
            Some(h) => Arc::clone(h),
            None => Arc::new(crate::grid::hessian(&self.u)),
        }
    }

    fn cache_hessian(&mut self) -> Arc<HessianField> {
        let h = self.hessian();
        self.hessian = Some(Arc::clone(&h));
        h
    }
}

fn rhs_from_hessian(u: &GridFunction, hf: &HessianField, tau: f64) -> Result<GridFunction, NonConvexityError> {
    let d = *u.domain();
    let values: Result<Vec<f64>, NonConvexityError> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            if d.boundary_distance(i) == 0 {
                return Ok(0.0);
            }
            let hm = hf.at(i);
            if tau > 0.0 {
                let det = hm.det();
                let lambda_min = hf.eigen_at(i).0;
                if !(det > 0.0 && lambda_min > 0.0) {
                    return Err(NonConvexityError {
                        node: i,
                        point: d.point(i),
                        det,
                        lambda_min,
                    });
                }
            }
            Ok(operator_value(hm, tau))
        })
        .collect();
    Ok(GridFunction::from_raw(d, values?, "rhs"))
}

/// F_τ(D²u) on interior nodes; boundary nodes are zero (the stepper overwrites them).
pub fn rhs(u: &GridFunction, tau: f64) -> Result<GridFunction, NonConvexityError> {
    let hf = crate::grid::hessian(u);
    rhs_from_hessian(u, &hf, tau)
}

pub const DEFAULT_SAFETY: f64 = 0.5;

fn dt_stable_from(hf: &HessianField, tau: f64, safety: f64) -> f64 {
    let d = hf.domain();
    let n = d.dim() as f64;
    let h = d.spacing();
    let mut mu_max = 0.0f64;
    for i in d.nodes_with_margin(1) {
        let lambda_min = hf.eigen_at(i).0;
        let mu = if tau > 0.0 {
            if lambda_min <= 0.0 {
                return 0.0;
            }
            tau / (n * lambda_min) + (1.0 - tau)
        } else {
            1.0
        };
        mu_max = mu_max.max(mu);
    }
    safety * h * h / (2.0 * n * mu_max)
}

/// safety · h² / (2n · μ_max), μ_max = max (τ/(n λ_min(D²u)) + (1 − τ)).
pub fn dt_stable(state: &FlowState, safety: f64) -> f64 {
    dt_stable_from(&state.hessian(), state.tau, safety)
}

fn axpy(base: &GridFunction, dt: f64, k: &GridFunction) -> Vec<f64> {
    base.values()
        .iter()
        .zip(k.values())
        .map(|(u, r)| u + dt * r)
        .collect()
}

/// One attempt; no retry.
fn try_step(state: &mut FlowState, dt: f64, stepper: Stepper) -> Result<(GridFunction, Arc<HessianField>), NonConvexityError> {
    let d = *state.u.domain();
    let tau = state.tau;
    let h0 = state.cache_hessian();
    let k1 = rhs_from_hessian(&state.u, &h0, tau)?;
    let mut next = match stepper {
        Stepper::Euler => axpy(&state.u, dt, &k1),
        Stepper::Midpoint => {
            let mut mid = axpy(&state.u, 0.5 * dt, &k1);
            state.boundary.apply(&mut mid, &d, state.t + 0.5 * dt, tau);
            let mid = GridFunction::from_raw(d, mid, "mid");
            let hm = crate::grid::hessian(&mid);
            let k2 = rhs_from_hessian(&mid, &hm, tau)?;
            axpy(&state.u, dt, &k2)
        }
    };
    state.boundary.apply(&mut next, &d, state.t + dt, tau);
    let next = GridFunction::from_raw(d, next, state.u.label().to_string());
    let hn = Arc::new(crate::grid::hessian(&next));
    if tau > 0.0 {
        // the accepted state itself must stay strictly convex
        for i in d.nodes_with_margin(1) {
            let (lo, _) = hn.eigen_at(i);
            let det = hn.at(i).det();
            if !(lo > 0.0 && det > 0.0) {
                return Err(NonConvexityError {
                    node: i,
                    point: d.point(i),
                    det,
                    lambda_min: lo,
                });
            }
        }
    }
    Ok((next, hn))
}

pub const MAX_HALVINGS: u32 = 20;

/// Advances by `dt` (halving on loss of convexity, at most 20 times) and appends a
/// monitor record. Returns the dt actually used.
pub fn step_explicit(
    state: &mut FlowState,
    dt: f64,
    stepper: Stepper,
    monitors: &MonitorConfig,
) -> Result<f64, (u32, NonConvexityError)> {
    let mut dt_try = dt;
    let mut halvings = 0;
    loop {
        match try_step(state, dt_try, stepper) {
            Ok((next, hn)) => {
                let prev = std::mem::replace(&mut state.u, next);
                state.hessian = Some(hn);
                state.t += dt_try;
                state.step_count += 1;
                let record = monitor_record(state, &prev, dt_try, monitors);
                state.monitor_log.push(record);
                return Ok(dt_try);
            }
            Err(e) => {
                if halvings >= MAX_HALVINGS {
                    return Err((halvings, e));
                }
                debug!("step rejected at t = {}: {e}; halving dt", state.t);
                halvings += 1;
                dt_try *= 0.5;
            }
        }
    }
}

fn grad_sq_sup(u: &GridFunction, window: Option<f64>) -> f64 {
    let d = u.domain();
    let n = d.dim();
    (0..d.len())
        .filter(|&i| match window {
            None => true,
            Some(w) => {
                let x = d.point(i);
                (0..n).all(|a| x[a].abs() <= w + 1e-12)
            }
        })
        .map(|i| {
            let g = gradient_at(u, i);
            (0..n).map(|a| g[a] * g[a]).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn monitor_record(state: &FlowState, prev: &GridFunction, dt: f64, cfg: &MonitorConfig) -> MonitorRecord {
    let (lambda_min, lambda_max) = state.hessian().bounds();
    let residual = if cfg.residual && dt > 0.0 {
        pde_residual(prev, &state.u, dt, state.tau).unwrap_or(f64::MAX)
    } else {
        0.0
    };
    MonitorRecord {
        t: state.t,
        lambda_min,
        lambda_max,
        grad_sq_sup: grad_sq_sup(&state.u, cfg.gradient_window),
        d3_norm: if cfg.third_derivative {
            third_derivative_norm(&state.u)
        } else {
            0.0
        },
        dt,
        residual,
    }
}

/// Initial record (t = 0, dt = 0).
pub fn initial_monitor(state: &FlowState, cfg: &MonitorConfig) -> MonitorRecord {
    let mut r = monitor_record(state, &state.u, 0.0, cfg);
    r.residual = 0.0;
    r
}

/// ‖(u_next − u_prev)/dt − F_τ(D²((u_prev + u_next)/2))‖∞ over monitored nodes.
pub fn pde_residual(prev: &GridFunction, next: &GridFunction, dt: f64, tau: f64) -> Result<f64, NonConvexityError> {
    let d = *prev.domain();
    let avg: Vec<f64> = prev
        .values()
        .iter()
        .zip(next.values())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let avg = GridFunction::from_raw(d, avg, "avg");
    let margin = d.monitored_margin();
    let nodes: Vec<usize> = d.nodes_with_margin(margin).collect();
    let res: Result<Vec<f64>, NonConvexityError> = nodes
        .par_iter()
        .map(|&i| {
            let hm = hessian_values_at(&d, avg.values(), i);
            if tau > 0.0 && !(hm.det() > 0.0 && hm.eigen_bounds().0 > 0.0) {
                return Err(NonConvexityError {
                    node: i,
                    point: d.point(i),
                    det: hm.det(),
                    lambda_min: hm.eigen_bounds().0,
                });
            }
            let dudt = (next.value(i) - prev.value(i)) / dt;
            Ok((dudt - operator_value(&hm, tau)).abs())
        })
        .collect();
    Ok(res?.into_iter().fold(0.0, f64::max))
}

/// When snapshots are taken (the initial state is always recorded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnapshotSchedule {
    /// Only the initial and final states.
    Endpoints,
    /// t₀·factor^k for k = 0, 1, … while ≤ t_end.
    Geometric { t0: f64, factor: f64 },
    /// Every `interval` time units.
    Uniform { interval: f64 },
    Times { times: Vec<f64> },
}

impl Default for SnapshotSchedule {
    fn default() -> Self {
        SnapshotSchedule::Geometric { t0: 0.25, factor: 2.0 }
    }
}

impl SnapshotSchedule {
    /// Strictly increasing times in (0, t_end], always ending at t_end.
    pub fn times(&self, t_end: f64) -> Result<Vec<f64>, FlowError> {
        let mut out = match self {
            SnapshotSchedule::Endpoints => vec![],
            SnapshotSchedule::Geometric { t0, factor } => {
                if !(*t0 > 0.0 && *factor > 1.0) {
                    return Err(FlowError::InvalidTime(format!(
                        "geometric schedule needs t0 > 0 and factor > 1 (t0 = {t0}, factor = {factor})"
                    )));
                }
                let mut v = vec![];
                let mut t = *t0;
                while t <= t_end * (1.0 + 1e-12) {
                    v.push(t.min(t_end));
                    t *= factor;
                }
                v
            }
            SnapshotSchedule::Uniform { interval } => {
                if !(*interval > 0.0) {
                    return Err(FlowError::InvalidTime(format!("uniform interval must be positive ({interval})")));
                }
                let k = (t_end / interval + 1e-9).floor() as usize;
                (1..=k).map(|j| (j as f64 * interval).min(t_end)).collect()
            }
            SnapshotSchedule::Times { times } => times.iter().copied().filter(|&t| t > 0.0 && t <= t_end).collect(),
        };
        out.push(t_end);
        out.sort_by(|a, b| a.total_cmp(b));
        out.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub tau: f64,
    pub t_end: f64,
    pub stepper: Stepper,
    pub safety: f64,
    /// Upper bound on dt in addition to the stability limit.
    pub dt_max: Option<f64>,
    pub snapshots: SnapshotSchedule,
    pub monitors: MonitorConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            t_end: 1.0,
            stepper: Stepper::Midpoint,
            safety: DEFAULT_SAFETY,
            dt_max: None,
            snapshots: SnapshotSchedule::default(),
            monitors: MonitorConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub t: f64,
    pub u: GridFunction,
}

#[derive(Clone, Debug)]
pub struct FlowRun {
    pub state: FlowState,
    pub snapshots: Vec<Snapshot>,
}

/// Integrates from u0 to `t_end`, landing exactly on every scheduled snapshot time.
pub fn run(u0: GridFunction, cfg: &FlowConfig, boundary: BoundaryModel) -> Result<FlowRun, FlowError> {
    if !(cfg.t_end > 0.0 && cfg.t_end.is_finite()) {
        return Err(FlowError::InvalidTime(format!("t_end must be positive ({})", cfg.t_end)));
    }
    if !(cfg.safety > 0.0) {
        return Err(FlowError::InvalidTime(format!("safety factor must be positive ({})", cfg.safety)));
    }
    let d = *u0.domain();
    if let BoundaryModel::ReferenceSolution(r) = &boundary {
        let scale = u0.sup_norm(0).max(1e-300);
        let diff = (0..d.len())
            .map(|i| (r.value(&d.point(i), 0.0) - u0.value(i)).abs())
            .fold(0.0, f64::max);
        if diff > 0.1 * scale {
            return Err(FlowError::BoundaryInconsistency { relative: diff / scale });
        }
    }
    let mut state = FlowState::new(u0, cfg.tau, boundary)?;
    let (lo, _) = state.cache_hessian().bounds();
    if lo <= 1e-10 {
        warn!("initial data violates Condition B on the grid: λ_min* = {lo:e}");
    }
    let times = cfg.snapshots.times(cfg.t_end)?;
    let record0 = initial_monitor(&state, &cfg.monitors);
    state.monitor_log.push(record0);
    let mut snapshots = vec![Snapshot {
        t: 0.0,
        u: state.u.clone(),
    }];
    for &target in &times {
        while state.t < target * (1.0 - 1e-13) {
            let mut dt = dt_stable(&state, cfg.safety);
            if let Some(cap) = cfg.dt_max {
                dt = dt.min(cap);
            }
            let remaining = target - state.t;
            if !(dt > 0.0) {
                // degenerate convexity; let the retry loop report it
                dt = remaining;
            }
            // avoid a sliver step just before the target
            let dt = if dt >= remaining {
                remaining
            } else if dt > 0.5 * remaining {
                0.5 * remaining
            } else {
                dt
            };
            if let Err((halvings, source)) = step_explicit(&mut state, dt, cfg.stepper, &cfg.monitors) {
                let t = state.t;
                return Err(FlowError::AbortedNonConvex {
                    t,
                    halvings,
                    source,
                    last_good: Box::new(FlowRun { state, snapshots }),
                });
            }
        }
        state.t = target;
        if let Some(last) = state.monitor_log.last_mut() {
            last.t = target;
        }
        snapshots.push(Snapshot {
            t: target,
            u: state.u.clone(),
        });
    }
    Ok(FlowRun { state, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BoxDomain;

    fn quad(d: BoxDomain, a: &SymMat) -> GridFunction {
        let a = *a;
        GridFunction::from_fn(d, "q", move |x| 0.5 * a.quad_form(x))
    }

    #[test]
    fn rhs_examples() {
        let d = BoxDomain::new(2, 1.0, 9).unwrap();
        let id = quad(d, &SymMat::identity(2));
        assert!(rhs(&id, 1.0).unwrap().values().iter().all(|v| v.abs() < 1e-12));
        let r0 = rhs(&id, 0.0).unwrap();
        for i in d.nodes_with_margin(1) {
            assert!((r0.value(i) - 2.0).abs() < 1e-12);
        }
        let two = quad(d, &SymMat::scaled_identity(2, 2.0));
        let r = rhs(&two, 0.5).unwrap();
        for i in d.nodes_with_margin(1) {
            assert!((r.value(i) - 2.346_573_590_279_972_7).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_flags_nonconvexity() {
        let d = BoxDomain::new(1, 1.0, 9).unwrap();
        let u = GridFunction::from_fn(d, "concave", |x| -x[0] * x[0]);
        assert!(rhs(&u, 1.0).is_err());
        assert!(rhs(&u, 0.0).is_ok());
    }

    #[test]
    fn dt_stable_examples() {
        let d = BoxDomain::new(2, 1.0, 21).unwrap(); // h = 0.1
        let s = FlowState::new(quad(d, &SymMat::identity(2)), 1.0, BoundaryModel::Frozen).unwrap();
        assert!((dt_stable(&s, 0.5) - 0.0025).abs() < 1e-15);

        let d1 = BoxDomain::new(1, 1.0, 21).unwrap();
        let s = FlowState::new(quad(d1, &SymMat::identity(1)), 0.0, BoundaryModel::Frozen).unwrap();
        assert!((dt_stable(&s, 0.5) - 0.0025).abs() < 1e-15);

        // near-degenerate convexity drives dt to zero
        let flat = quad(d1, &SymMat::scaled_identity(1, 1e-9));
        let s = FlowState::new(flat, 1.0, BoundaryModel::Frozen).unwrap();
        assert!(dt_stable(&s, 0.5) < 1e-10);
    }

    #[test]
    fn quadratic_evolution_is_exact_for_any_dt() {
        let d = BoxDomain::new(2, 2.0, 17).unwrap();
        let a = SymMat::diag(&[2.0, 0.7]);
        let q = QuadraticFarField::new(a, [0.1, -0.2, 0.0], 0.3).unwrap();
        let u0 = GridFunction::from_fn(d, "u0", |x| q.initial_value(x));
        let mut s = FlowState::new(u0, 1.0, BoundaryModel::QuadraticFarField(q.clone())).unwrap();
        for stepper in [Stepper::Euler, Stepper::Midpoint] {
            step_explicit(&mut s, 0.37, stepper, &MonitorConfig::default()).unwrap();
        }
        let rate = (1.4f64).ln() / 2.0;
        for i in 0..d.len() {
            let x = d.point(i);
            assert!((s.u.value(i) - (q.initial_value(&x) + s.t * rate)).abs() < 1e-12);
        }
        assert_eq!(s.step_count, 2);
        assert!(s.monitor_log.iter().all(|r| r.residual < 1e-9), "{:?}", s.monitor_log);
    }

    #[test]
    fn heat_step_on_quadratic() {
        let d = BoxDomain::new(2, 1.0, 11).unwrap();
        let q = QuadraticFarField::new(SymMat::identity(2), [0.0; 3], 0.0).unwrap();
        let u0 = GridFunction::from_fn(d, "u0", |x| q.initial_value(x));
        let cfg = FlowConfig {
            tau: 0.0,
            t_end: 0.3,
            snapshots: SnapshotSchedule::Endpoints,
            ..FlowConfig::default()
        };
        let out = run(u0, &cfg, BoundaryModel::QuadraticFarField(q.clone())).unwrap();
        for i in 0..d.len() {
            let x = d.point(i);
            assert!((out.state.u.value(i) - (q.initial_value(&x) + 2.0 * 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_identity_quadratic() {
        let d = BoxDomain::new(2, 1.0, 11).unwrap();
        let u0 = quad(d, &SymMat::identity(2));
        let cfg = FlowConfig {
            t_end: 0.2,
            ..FlowConfig::default()
        };
        let out = run(u0.clone(), &cfg, BoundaryModel::Frozen).unwrap();
        assert!(out.state.u.sup_diff(&u0, 0) < 1e-13);
        for r in &out.state.monitor_log {
            assert!((r.lambda_min - 1.0).abs() < 1e-12 && (r.lambda_max - 1.0).abs() < 1e-12);
            assert!(r.residual < 1e-12);
        }
    }

    #[test]
    fn snapshot_schedules() {
        let g = SnapshotSchedule::Geometric { t0: 0.25, factor: 2.0 };
        assert_eq!(g.times(8.0).unwrap(), vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0]);
        let u = SnapshotSchedule::Uniform { interval: 0.1 };
        assert_eq!(u.times(0.3).unwrap().len(), 3);
        assert_eq!(SnapshotSchedule::Endpoints.times(2.0).unwrap(), vec![2.0]);
    }

    #[test]
    fn reference_boundary_consistency_checked() {
        let d = BoxDomain::new(1, 1.0, 9).unwrap();
        let u0 = quad(d, &SymMat::identity(1));
        let bad = BoundaryModel::ReferenceSolution(ReferenceSolution::new(|x, _| x[0] * x[0] + 5.0));
        assert!(matches!(
            run(u0, &FlowConfig::default(), bad),
            Err(FlowError::BoundaryInconsistency { .. })
        ));
    }

    #[test]
    fn nonconvex_data_aborts_with_last_state() {
        let d = BoxDomain::new(1, 1.0, 9).unwrap();
        let u0 = GridFunction::from_fn(d, "bad", |x| 0.1 * (-x[0] * x[0]).exp());
        let err = run(u0, &FlowConfig::default(), BoundaryModel::Frozen).unwrap_err();
        match err {
            FlowError::AbortedNonConvex { last_good, halvings, .. } => {
                assert_eq!(halvings, MAX_HALVINGS);
                assert_eq!(last_good.state.step_count, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn far_field_from_corner_recovers_quadratic() {
        let d = BoxDomain::new(2, 1.0, 9).unwrap();
        let a = SymMat::from_rows(&[[2.0, 0.3], [0.3, 1.0]]).unwrap();
        let q = QuadraticFarField::new(a, [0.5, -1.0, 0.0], 2.0).unwrap();
        let u0 = GridFunction::from_fn(d, "u0", |x| q.initial_value(x));
        let got = QuadraticFarField::from_corner(&u0).unwrap();
        for i in 0..2 {
            assert!((got.b[i] - q.b[i]).abs() < 1e-10);
            for j in 0..2 {
                assert!((got.a.get(i, j) - a.get(i, j)).abs() < 1e-10);
            }
        }
        assert!((got.c - 2.0).abs() < 1e-10);
        assert!(QuadraticFarField::new(SymMat::diag(&[1.0, -1.0]), [0.0; 3], 0.0).is_err());
    }
}
