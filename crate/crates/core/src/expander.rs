//! Self-expanders: solutions of
//!
//! ```text
//! det D²u = exp{ n (u − ½⟨x, Du⟩) }
//! ```
//!
//! solved two independent ways (ODE shooting on profiles, damped Newton on the
//! grid) and certified against the Hessian bounds, parabolic homogeneity of the
//! blow-down, and the Bernstein identity u^{ij} w_ij = ½⟨x, Dw⟩ for
//! w = u − ½⟨x, Du⟩.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::flow::BoundaryModel;
use crate::grid::{gradient_at, hessian, hessian_at, hessian_values_at, partial_values_at, BoxDomain, GridFunction, NonConvexityError, Point};
use crate::linalg::{BandMatrix, SymMat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpanderError {
    #[error(transparent)]
    NonConvex(#[from] NonConvexityError),
    #[error("profile blew up at r = {r}: u'' = {second:e} left (0, 1e6)")]
    Blowup { r: f64, second: f64 },
    #[error("inconsistent series start: {0}")]
    SingularStart(String),
    #[error("step size underflow at r = {0}")]
    StepUnderflow(f64),
    #[error("Newton stalled after {iterations} iterations at residual {residual:e}")]
    NewtonStall { iterations: usize, residual: f64 },
    #[error("linearized system is singular")]
    SingularJacobian,
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

// ---------------------------------------------------------------------------
// Profile ODEs

/// Radial reduction u(x) = U(|x|) started from the regular series at r = 0,
/// or (n = 1 only) the full-line problem with a prescribed slope u'(0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialExpanderProblem {
    pub n: usize,
    /// Central value u(0).
    pub a: f64,
    pub r_max: f64,
    pub tolerance: f64,
    /// u'(0); must be zero unless n = 1.
    #[serde(default)]
    pub slope: f64,
}

impl RadialExpanderProblem {
    pub fn new(n: usize, a: f64, r_max: f64) -> Self {
        Self {
            n,
            a,
            r_max,
            tolerance: 1e-12,
            slope: 0.0,
        }
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.slope = slope;
        self
    }
}

/// Radius where the series start hands over to the integrator.
pub const SERIES_START: f64 = 1e-4;

const MAX_SECOND: f64 = 1e6;

/// u'' from the profile equation; for n ≥ 2 it uses (u'/r)^{1−n}.
#[inline]
pub fn profile_second_derivative(n: usize, r: f64, u: f64, du: f64) -> f64 {
    let w = u - 0.5 * r * du;
    let e = (n as f64 * w).exp();
    if n == 1 {
        e
    } else {
        (du / r).powi(1 - n as i32) * e
    }
}

/// Samples (r, u, u', u'') along one branch, r increasing from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileBranch {
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub du: Vec<f64>,
    pub ddu: Vec<f64>,
}

impl ProfileBranch {
    fn push(&mut self, r: f64, u: f64, du: f64, ddu: f64) {
        self.r.push(r);
        self.u.push(u);
        self.du.push(du);
        self.ddu.push(ddu);
    }

    /// Quintic Hermite interpolation of (u, u'); `None` beyond the last sample.
    fn eval(&self, s: f64) -> Option<(f64, f64)> {
        let last = *self.r.last()?;
        if s > last * (1.0 + 1e-12) || s < self.r[0] {
            return None;
        }
        let k = match self.r.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(k) => return Some((self.u[k], self.du[k])),
            Err(k) => k.clamp(1, self.r.len() - 1) - 1,
        };
        let (r0, r1) = (self.r[k], self.r[k + 1]);
        let hh = r1 - r0;
        let t = (s - r0) / hh;
        let (t2, t3, t4, t5) = (t * t, t * t * t, t.powi(4), t.powi(5));
        let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h2 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
        let h3 = 0.5 * t3 - t4 + 0.5 * t5;
        let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let h5 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
        let d0 = -30.0 * t2 + 60.0 * t3 - 30.0 * t4;
        let d1 = 1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4;
        let d2 = t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4;
        let d3 = 1.5 * t2 - 4.0 * t3 + 2.5 * t4;
        let d4 = -12.0 * t2 + 28.0 * t3 - 15.0 * t4;
        let d5 = 30.0 * t2 - 60.0 * t3 + 30.0 * t4;
        let (f0, g0, c0) = (self.u[k], self.du[k], self.ddu[k]);
        let (f1, g1, c1) = (self.u[k + 1], self.du[k + 1], self.ddu[k + 1]);
        let u = h0 * f0 + h1 * hh * g0 + h2 * hh * hh * c0 + h3 * hh * hh * c1 + h4 * hh * g1 + h5 * f1;
        let du = (d0 * f0 + d1 * hh * g0 + d2 * hh * hh * c0 + d3 * hh * hh * c1 + d4 * hh * g1 + d5 * f1) / hh;
        Some((u, du))
    }
}

/// Profile of an expander. For radial problems `negative` is `None` and the
/// profile is evaluated at |x|; for the n = 1 line problem it carries x < 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub problem: RadialExpanderProblem,
    pub positive: ProfileBranch,
    /// Branch for x ≤ 0 stored in the reflected variable s = −x.
    pub negative: Option<ProfileBranch>,
}

impl RadialProfile {
    /// (u, u', u'') at signed coordinate s (radius for radial profiles).
    pub fn eval(&self, s: f64) -> Option<(f64, f64, f64)> {
        let n = self.problem.n;
        let (u, du) = match (&self.negative, s < 0.0) {
            (Some(neg), true) => {
                let (u, du) = neg.eval(-s)?;
                (u, -du)
            }
            _ => {
                let r = s.abs();
                if self.negative.is_none() && r < SERIES_START {
                    let c = self.problem.a.exp();
                    return Some((self.problem.a + 0.5 * c * r * r, c * r, c));
                }
                self.positive.eval(r)?
            }
        };
        let r = if self.negative.is_some() { s } else { s.abs() };
        Some((u, du, profile_second_derivative(n, r, u, du)))
    }

    /// u at a point of ℝⁿ.
    pub fn value_at(&self, x: &Point) -> Option<f64> {
        let n = self.problem.n;
        let s = if n == 1 && self.negative.is_some() {
            x[0]
        } else {
            (0..n).map(|i| x[i] * x[i]).sum::<f64>().sqrt()
        };
        self.eval(s).map(|v| v.0)
    }

    /// Samples the profile onto a grid; `None` if the grid reaches past r_max.
    pub fn to_grid(&self, d: BoxDomain) -> Option<GridFunction> {
        let values: Option<Vec<f64>> = (0..d.len()).map(|i| self.value_at(&d.point(i))).collect();
        GridFunction::new(d, values?, "expander_profile").ok()
    }

    /// CSV rows (r, u, u', u'') of the stored samples, negative branch first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,u,du,ddu\n");
        if let Some(neg) = &self.negative {
            for k in (1..neg.r.len()).rev() {
                out.push_str(&format!(
                    "{:.17e},{:.17e},{:.17e},{:.17e}\n",
                    -neg.r[k], neg.u[k], -neg.du[k], neg.ddu[k]
                ));
            }
        }
        let b = &self.positive;
        for k in 0..b.r.len() {
            out.push_str(&format!("{:.17e},{:.17e},{:.17e},{:.17e}\n", b.r[k], b.u[k], b.du[k], b.ddu[k]));
        }
        out
    }
}

// Dormand–Prince 5(4) coefficients
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates y = (u, u') of u'' = f(r, u, u') from `r0` to `r_end` with an adaptive
/// DP5(4) pair. `sign` = −1 integrates the reflected branch of the n = 1 line problem.
fn integrate_branch(
    n: usize,
    r0: f64,
    y0: [f64; 2],
    r_end: f64,
    tol: f64,
    sign: f64,
) -> Result<ProfileBranch, ExpanderError> {
    // reflected variable s = −x: v(s) = u(−s), v' = −u', v'' = u''; the equation in s
    // reads v'' = exp(v − ½ s v'), identical in form.
    let _ = sign;
    let f = |r: f64, y: &[f64; 2]| -> Result<[f64; 2], ExpanderError> {
        let second = profile_second_derivative(n, r, y[0], y[1]);
        if !(second > 0.0 && second < MAX_SECOND) || !second.is_finite() {
            return Err(ExpanderError::Blowup { r, second });
        }
        Ok([y[1], second])
    };
    let mut branch = ProfileBranch {
        r: vec![],
        u: vec![],
        du: vec![],
        ddu: vec![],
    };
    let mut r = r0;
    let mut y = y0;
    let k0 = f(r, &y)?;
    branch.push(r, y[0], y[1], k0[1]);
    let h_max = (r_end - r0) / 400.0;
    let mut h = h_max.min(1e-3);
    let mut k_first = k0;
    while r < r_end {
        if r + h > r_end {
            h = r_end - r;
        }
        if h < 1e-14 * r_end.max(1.0) {
            return Err(ExpanderError::StepUnderflow(r));
        }
        let mut k = [[0.0; 2]; 7];
        k[0] = k_first;
        let mut stage_err = None;
        for s in 1..7 {
            let mut ys = y;
            for (j, kj) in k.iter().enumerate().take(s) {
                ys[0] += h * A[s][j] * kj[0];
                ys[1] += h * A[s][j] * kj[1];
            }
            match f(r + C[s] * h, &ys) {
                Ok(v) => k[s] = v,
                Err(e) => {
                    stage_err = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = stage_err {
            // a stage left the admissible region: shrink before giving up
            if h > 1e-10 {
                h *= 0.25;
                continue;
            }
            return Err(e);
        }
        let mut y5 = y;
        let mut err = 0.0f64;
        for c in 0..2 {
            let mut d5 = 0.0;
            let mut d4 = 0.0;
            for s in 0..7 {
                d5 += B5[s] * k[s][c];
                d4 += B4[s] * k[s][c];
            }
            y5[c] += h * d5;
            let scale = tol * (1.0 + y[c].abs().max(y5[c].abs()));
            err = err.max((h * (d5 - d4)).abs() / scale);
        }
        if err <= 1.0 {
            r += h;
            y = y5;
            k_first = k[6];
            branch.push(r, y[0], y[1], k[6][1]);
            let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * grow).min(h_max);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(branch)
}

/// Shoots the expander profile from r = 0 to `r_max`.
pub fn radial_shoot(problem: &RadialExpanderProblem) -> Result<RadialProfile, ExpanderError> {
    let n = problem.n;
    if !(1..=3).contains(&n) {
        return Err(ExpanderError::SingularStart(format!("dimension {n} not in 1..=3")));
    }
    if !problem.a.is_finite() || !problem.slope.is_finite() {
        return Err(ExpanderError::SingularStart("central value and slope must be finite".into()));
    }
    if !(problem.r_max > SERIES_START) || !(problem.tolerance > 0.0) {
        return Err(ExpanderError::SingularStart(format!(
            "r_max must exceed the series start {SERIES_START} and the tolerance must be positive"
        )));
    }
    if problem.slope != 0.0 && n != 1 {
        return Err(ExpanderError::SingularStart(
            "a nonzero slope u'(0) is only regular for n = 1".into(),
        ));
    }
    let a = problem.a;
    if problem.slope == 0.0 {
        // regular series: (u'/r) → u''(0) so u''(0)ⁿ = e^{na}
        let c = a.exp();
        let r0 = SERIES_START;
        let y0 = [a + 0.5 * c * r0 * r0, c * r0];
        let positive = integrate_branch(n, r0, y0, problem.r_max, problem.tolerance, 1.0)?;
        Ok(RadialProfile {
            problem: problem.clone(),
            positive,
            negative: None,
        })
    } else {
        let p = problem.slope;
        let positive = integrate_branch(1, 0.0, [a, p], problem.r_max, problem.tolerance, 1.0)?;
        let negative = integrate_branch(1, 0.0, [a, -p], problem.r_max, problem.tolerance, -1.0)?;
        Ok(RadialProfile {
            problem: problem.clone(),
            positive,
            negative: Some(negative),
        })
    }
}

// ---------------------------------------------------------------------------
// Grid residual and Newton solve

/// w = u − ½⟨x, Du⟩ at every node.
pub fn bernstein_w(u: &GridFunction) -> GridFunction {
    let d = *u.domain();
    let n = d.dim();
    let values: Vec<f64> = (0..d.len())
        .map(|i| {
            let x = d.point(i);
            let g = gradient_at(u, i);
            u.value(i) - 0.5 * (0..n).map(|a| x[a] * g[a]).sum::<f64>()
        })
        .collect();
    GridFunction::from_raw(d, values, "w")
}

fn residual_at(d: &BoxDomain, values: &[f64], i: usize) -> Result<f64, NonConvexityError> {
    let n = d.dim();
    let hm = hessian_values_at(d, values, i);
    let det = hm.det();
    let lambda_min = hm.eigen_bounds().0;
    if !(det > 0.0 && lambda_min > 0.0) {
        return Err(NonConvexityError {
            node: i,
            point: d.point(i),
            det,
            lambda_min,
        });
    }
    let x = d.point(i);
    let xdu: f64 = (0..n).map(|a| x[a] * partial_values_at(d, values, i, a)).sum();
    let w = values[i] - 0.5 * xdu;
    Ok(det - (n as f64 * w).exp())
}

/// det D²u − exp{n(u − ½⟨x, Du⟩)} on interior nodes (zero on the boundary).
pub fn expander_residual(u: &GridFunction) -> Result<GridFunction, NonConvexityError> {
    let d = *u.domain();
    let values: Result<Vec<f64>, NonConvexityError> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            if d.boundary_distance(i) == 0 {
                Ok(0.0)
            } else {
                residual_at(&d, u.values(), i)
            }
        })
        .collect();
    Ok(GridFunction::from_raw(d, values?, "expander_residual"))
}

fn residual_norm(u: &GridFunction) -> Result<f64, NonConvexityError> {
    Ok(expander_residual(u)?.sup_norm(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Smallest line-search step, 2⁻²⁰ by default.
    pub min_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 50,
            min_step: 2f64.powi(-20),
        }
    }
}

/// A grid solution with its certification data.
#[derive(Clone, Debug)]
pub struct ExpanderSolution {
    pub u: GridFunction,
    pub residual_norm: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub condition_b: (f64, f64),
    pub condition_a_defect: f64,
    pub bernstein_residual: f64,
    /// Homogeneous part ½xᵀAx of the far-field quadratic (candidate blow-down U₀).
    pub far_field: SymMat,
}

impl ExpanderSolution {
    /// Wraps an arbitrary strictly convex grid function (e.g. a loaded snapshot).
    pub fn from_grid(u: GridFunction, far_field: Option<SymMat>) -> Result<Self, ExpanderError> {
        let residual_norm = residual_norm(&u)?;
        Self::assemble(u, residual_norm, 0, vec![residual_norm], far_field)
    }

    fn assemble(
        u: GridFunction,
        residual_norm: f64,
        iterations: usize,
        residual_history: Vec<f64>,
        far_field: Option<SymMat>,
    ) -> Result<Self, ExpanderError> {
        let condition_b = hessian(&u).bounds();
        let far_field = match far_field {
            Some(a) => a,
            None => analysis::fit_far_field(&u).a,
        };
        let a = far_field;
        let candidate = GridFunction::from_fn(*u.domain(), "U0", move |x| 0.5 * a.quad_form(x));
        let condition_a_defect = analysis::blowdown_defect(&u, &candidate, &[2.0, 4.0])?;
        let bernstein_residual = bernstein_residual(&u);
        Ok(Self {
            u,
            residual_norm,
            iterations,
            residual_history,
            condition_b,
            condition_a_defect,
            bernstein_residual,
            far_field,
        })
    }
}

/// sup |u^{ij} w_ij − ½⟨x, Dw⟩| over nodes at least two layers inside.
pub fn bernstein_residual(u: &GridFunction) -> f64 {
    let d = *u.domain();
    let n = d.dim();
    let w = bernstein_w(u);
    let margin = d.monitored_margin().max(2);
    let nodes: Vec<usize> = d.nodes_with_margin(margin).collect();
    nodes
        .par_iter()
        .map(|&i| {
            let hu = hessian_at(u, i);
            let Some(inv) = hu.inverse() else {
                return f64::INFINITY;
            };
            let hw = hessian_at(&w, i);
            let mut lhs = 0.0;
            for a in 0..n {
                for b in 0..n {
                    lhs += inv.get(a, b) * hw.get(a, b);
                }
            }
            let x = d.point(i);
            let gw = gradient_at(&w, i);
            let rhs = 0.5 * (0..n).map(|a| x[a] * gw[a]).sum::<f64>();
            (lhs - rhs).abs()
        })
        .reduce(|| 0.0, f64::max)
}

struct InteriorIndex {
    map: Vec<Option<usize>>,
    nodes: Vec<usize>,
    band: usize,
}

impl InteriorIndex {
    fn new(d: &BoxDomain) -> Self {
        let mut map = vec![None; d.len()];
        let mut nodes = Vec::new();
        for i in d.nodes_with_margin(1) {
            map[i] = Some(nodes.len());
            nodes.push(i);
        }
        let mi = d.points_per_axis() - 2;
        let band = (0..d.dim()).map(|a| mi.pow((d.dim() - 1 - a) as u32)).sum();
        Self { map, nodes, band }
    }
}

fn assemble_jacobian(d: &BoxDomain, values: &[f64], idx: &InteriorIndex) -> BandMatrix {
    let n = d.dim();
    let h = d.spacing();
    let mut jac = BandMatrix::zeros(idx.nodes.len(), idx.band, idx.band);
    for (row, &i) in idx.nodes.iter().enumerate() {
        let hm = hessian_values_at(d, values, i);
        let adj = hm.adjugate();
        let x = d.point(i);
        let xdu: f64 = (0..n).map(|a| x[a] * partial_values_at(d, values, i, a)).sum();
        let e = (n as f64 * (values[i] - 0.5 * xdu)).exp();
        let nf = n as f64;
        let mut put = |node: usize, v: f64| {
            if let Some(col) = idx.map[node] {
                jac.add(row, col, v);
            }
        };
        // δ(det D²u) = Σ adj_ab ∂_ab δ
        for a in 0..n {
            let s = d.stride(a);
            let c = adj.get(a, a) / (h * h);
            put(i - s, c);
            put(i, -2.0 * c);
            put(i + s, c);
            for b in a + 1..n {
                let sb = d.stride(b);
                let c = 2.0 * adj.get(a, b) / (4.0 * h * h);
                put(i + s + sb, c);
                put(i + s - sb, -c);
                put(i - s + sb, -c);
                put(i - s - sb, c);
            }
            // −e·n·(−½ x_a ∂_a δ)
            let c = e * nf * 0.5 * x[a] / (2.0 * h);
            put(i + s, c);
            put(i - s, -c);
        }
        put(i, -e * nf);
    }
    jac
}

/// Damped Newton on the discretized expander equation with Dirichlet data from
/// `boundary` evaluated at t = 1 (the self-similar time slice).
pub fn newton_solve(u_init: &GridFunction, boundary: &BoundaryModel, opts: &NewtonOptions) -> Result<ExpanderSolution, ExpanderError> {
    let d = *u_init.domain();
    let mut values = u_init.values().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        if d.boundary_distance(i) == 0 {
            *v = boundary.value(&d.point(i), 1.0, 1.0, *v);
        }
    }
    let idx = InteriorIndex::new(&d);
    let eval = |vals: &[f64]| -> Result<Vec<f64>, NonConvexityError> {
        idx.nodes.par_iter().map(|&i| residual_at(&d, vals, i)).collect()
    };
    let sup = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut res = eval(&values)?;
    let mut norm = sup(&res);
    let mut history = vec![norm];
    let mut iterations = 0;
    while norm > opts.tolerance {
        if iterations >= opts.max_iterations {
            return Err(ExpanderError::NewtonStall {
                iterations,
                residual: norm,
            });
        }
        iterations += 1;
        let jac = assemble_jacobian(&d, &values, &idx);
        let rhs: Vec<f64> = res.iter().map(|r| -r).collect();
        let delta = jac.solve(&rhs).ok_or(ExpanderError::SingularJacobian)?;
        let mut step = 1.0;
        let mut last_nonconvex = None;
        loop {
            let mut trial = values.clone();
            for (k, &i) in idx.nodes.iter().enumerate() {
                trial[i] += step * delta[k];
            }
            match eval(&trial) {
                Ok(r) => {
                    let nr = sup(&r);
                    if nr < (1.0 - 1e-4 * step) * norm || nr <= opts.tolerance {
                        values = trial;
                        res = r;
                        norm = nr;
                        break;
                    }
                }
                Err(e) => last_nonconvex = Some(e),
            }
            step *= 0.5;
            if step < opts.min_step {
                return Err(match last_nonconvex {
                    Some(e) => ExpanderError::NonConvex(e),
                    None => ExpanderError::NewtonStall {
                        iterations,
                        residual: norm,
                    },
                });
            }
        }
        history.push(norm);
    }
    let far_field = match boundary {
        BoundaryModel::QuadraticFarField(q) => Some(q.a),
        _ => None,
    };
    let u = GridFunction::new(d, values, "expander").map_err(|_| ExpanderError::SingularJacobian)?;
    ExpanderSolution::assemble(u, norm, iterations, history, far_field)
}

// ---------------------------------------------------------------------------
// Certification

pub const CERTIFY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub certified: bool,
    pub residual_norm: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub condition_a_defect: f64,
    pub bernstein_residual: f64,
    /// max w − min w over interior nodes.
    pub w_oscillation: f64,
    pub quadratic_case: bool,
    /// w attains its max or min away from the outer layers (non-constant w only).
    pub w_interior_extremum: bool,
    pub far_field: Vec<Vec<f64>>,
}

/// Certifies a solution; refuses (certified = false) when the expander residual
/// exceeds `CERTIFY_TOLERANCE` or convexity fails.
pub fn certify(solution: &ExpanderSolution) -> CertificationReport {
    let u = &solution.u;
    let d = *u.domain();
    let w = bernstein_w(u);
    let inner: Vec<usize> = d.nodes_with_margin(1).collect();
    let (mut wmin, mut wmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut imin, mut imax) = (0, 0);
    for &i in &inner {
        let v = w.value(i);
        if v < wmin {
            wmin = v;
            imin = i;
        }
        if v > wmax {
            wmax = v;
            imax = i;
        }
    }
    let osc = wmax - wmin;
    let quadratic_case = osc <= 1e-8;
    let interior = |i: usize| d.boundary_distance(i) >= 3;
    let (lambda_min, lambda_max) = solution.condition_b;
    CertificationReport {
        certified: solution.residual_norm <= CERTIFY_TOLERANCE && lambda_min > 0.0,
        residual_norm: solution.residual_norm,
        lambda_min,
        lambda_max,
        condition_a_defect: solution.condition_a_defect,
        bernstein_residual: solution.bernstein_residual,
        w_oscillation: osc,
        quadratic_case,
        w_interior_extremum: !quadratic_case && (interior(imin) || interior(imax)),
        far_field: solution.far_field.rows(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{QuadraticFarField, ReferenceSolution};

    #[test]
    fn residual_examples() {
        for n in 1..=3 {
            let d = BoxDomain::new(n, 1.0, 7).unwrap();
            let u = GridFunction::from_fn(d, "id", move |x| 0.5 * (0..n).map(|a| x[a] * x[a]).sum::<f64>());
            assert!(expander_residual(&u).unwrap().sup_norm(0) < 1e-12);
        }
        let d = BoxDomain::new(2, 1.0, 9).unwrap();
        let u = GridFunction::from_fn(d, "2I", |x| x[0] * x[0] + x[1] * x[1]);
        let r = expander_residual(&u).unwrap();
        let origin = d.flat_index(&[4, 4, 0]);
        assert!((r.value(origin) - 3.0).abs() < 1e-12);

        let d1 = BoxDomain::new(1, 1.0, 9).unwrap();
        let u = GridFunction::from_fn(d1, "0.6x²", |x| 0.6 * x[0] * x[0]);
        assert!((expander_residual(&u).unwrap().value(4) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn radial_shoot_trivial_profiles() {
        for n in 1..=3 {
            let p = radial_shoot(&RadialExpanderProblem::new(n, 0.0, 3.0)).unwrap();
            for k in 0..=30 {
                let r = 0.1 * k as f64;
                let (u, du, ddu) = p.eval(r).unwrap();
                assert!((u - 0.5 * r * r).abs() < 1e-9, "n={n} r={r} u={u}");
                assert!((du - r).abs() < 1e-9);
                assert!((ddu - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn radial_profiles_are_quadratic() {
        // the regular radial branch is a + ½e^a r² for every a
        let a = -0.1f64;
        for n in 1..=2 {
            let p = radial_shoot(&RadialExpanderProblem::new(n, a, 2.5)).unwrap();
            for k in 0..=25 {
                let r = 0.1 * k as f64;
                let (u, _, _) = p.eval(r).unwrap();
                assert!((u - (a + 0.5 * a.exp() * r * r)).abs() < 1e-9);
            }
        }
    }

    /// Fixed-step RK4 oracle for u'' = exp(u − ½ x u') on [0, x_end].
    fn rk4_line(a: f64, p: f64, x_end: f64, steps: usize) -> (f64, f64) {
        let f = |x: f64, y: [f64; 2]| [y[1], (y[0] - 0.5 * x * y[1]).exp()];
        let h = x_end / steps as f64;
        let mut y = [a, p];
        for k in 0..steps {
            let x = k as f64 * h;
            let k1 = f(x, y);
            let k2 = f(x + 0.5 * h, [y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1]]);
            let k3 = f(x + 0.5 * h, [y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1]]);
            let k4 = f(x + h, [y[0] + h * k3[0], y[1] + h * k3[1]]);
            for c in 0..2 {
                y[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
            }
        }
        (y[0], y[1])
    }

    #[test]
    fn shooting_matches_rk4_oracle() {
        // radial, a = −0.1, n = 1 (regular start at 0 for n = 1 is exact)
        let p = radial_shoot(&RadialExpanderProblem::new(1, -0.1, 1.5)).unwrap();
        let (u_ref, _) = rk4_line(-0.1, 0.0, 1.0, 20_000);
        assert!((p.eval(1.0).unwrap().0 - u_ref).abs() < 1e-8);

        // full-line problem with slope: both branches
        let p = radial_shoot(&RadialExpanderProblem::new(1, -0.1, 1.5).with_slope(0.4)).unwrap();
        let (u_pos, du_pos) = rk4_line(-0.1, 0.4, 1.0, 20_000);
        let (u_neg, du_neg) = rk4_line(-0.1, -0.4, 1.0, 20_000);
        let (u, du, _) = p.eval(1.0).unwrap();
        assert!((u - u_pos).abs() < 1e-8 && (du - du_pos).abs() < 1e-8);
        let (u, du, _) = p.eval(-1.0).unwrap();
        assert!((u - u_neg).abs() < 1e-8 && (du + du_neg).abs() < 1e-8);
    }

    #[test]
    fn shooting_errors() {
        assert!(matches!(
            radial_shoot(&RadialExpanderProblem::new(2, 0.0, 1.0).with_slope(0.1)),
            Err(ExpanderError::SingularStart(_))
        ));
        assert!(matches!(
            radial_shoot(&RadialExpanderProblem::new(1, f64::NAN, 1.0)),
            Err(ExpanderError::SingularStart(_))
        ));
        // a large central value makes u'' = e^{a} exceed the blow-up bound
        assert!(matches!(
            radial_shoot(&RadialExpanderProblem::new(1, 14.0, 1.0)),
            Err(ExpanderError::Blowup { .. })
        ));
    }

    #[test]
    fn newton_recovers_identity_quadratic() {
        let d = BoxDomain::new(2, 1.0, 17).unwrap();
        let q = QuadraticFarField::new(SymMat::identity(2), [0.0; 3], 0.0).unwrap();
        let u0 = GridFunction::from_fn(d, "noisy", |x| {
            0.5 * (x[0] * x[0] + x[1] * x[1]) + 1e-3 * (3.0 * x[0]).sin() * (2.0 * x[1] + 0.3).cos()
        });
        let sol = newton_solve(&u0, &BoundaryModel::QuadraticFarField(q), &NewtonOptions::default()).unwrap();
        assert!(sol.residual_norm <= 1e-10);
        assert!(sol.iterations <= 6, "iterations {}", sol.iterations);
        let exact = GridFunction::from_fn(d, "q", |x| 0.5 * (x[0] * x[0] + x[1] * x[1]));
        assert!(sol.u.sup_diff(&exact, 0) < 1e-10);
        let rep = certify(&sol);
        assert!(rep.certified && rep.quadratic_case);
        assert!(rep.condition_a_defect < 1e-10);
        assert!(rep.bernstein_residual < 1e-8);
    }

    #[test]
    fn newton_matches_profile_with_profile_boundary() {
        let prof = radial_shoot(&RadialExpanderProblem::new(1, -0.1, 2.5)).unwrap();
        let d = BoxDomain::new(1, 2.0, 65).unwrap();
        let u_init = prof.to_grid(d).unwrap();
        let pc = prof.clone();
        let bc = BoundaryModel::ReferenceSolution(ReferenceSolution::new(move |x, t| {
            t * pc.value_at(&[x[0] / t.sqrt(), 0.0, 0.0]).unwrap()
        }));
        let sol = newton_solve(&u_init, &bc, &NewtonOptions::default()).unwrap();
        assert!(sol.residual_norm <= 1e-10);
        assert!(sol.u.sup_diff(&u_init, 0) < 1e-8);
    }

    #[test]
    fn newton_refuses_incompatible_data() {
        // concave initial guess: no convex direction to move in
        let d = BoxDomain::new(1, 1.0, 17).unwrap();
        let u0 = GridFunction::from_fn(d, "concave", |x| -x[0] * x[0]);
        assert!(newton_solve(&u0, &BoundaryModel::Frozen, &NewtonOptions::default()).is_err());
    }

    #[test]
    fn certification_refuses_non_expander() {
        let d = BoxDomain::new(2, 1.0, 9).unwrap();
        let u = GridFunction::from_fn(d, "2I", |x| x[0] * x[0] + x[1] * x[1]);
        let sol = ExpanderSolution::from_grid(u, None).unwrap();
        let rep = certify(&sol);
        assert!(!rep.certified);
        assert!(rep.residual_norm > 1.0);
    }

    #[test]
    fn profile_csv_has_header_and_rows() {
        let p = radial_shoot(&RadialExpanderProblem::new(1, 0.0, 1.0)).unwrap();
        let csv = p.to_csv();
        assert!(csv.starts_with("r,u,du,ddu\n"));
        assert_eq!(csv.lines().count(), p.positive.r.len() + 1);
    }
}
