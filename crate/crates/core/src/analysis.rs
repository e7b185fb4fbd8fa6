//! Asymptotic diagnostics: Conditions A and B, blow-down rescaling,
//! derivative decay rates and convergence of the graph to a plane.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Snapshot;
use crate::grid::{derivative_norm, gradient_at, hessian, BoxDomain, GridError, GridFunction, Point};
use crate::linalg::{least_squares, SymMat};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no grid node x has R·x on the grid for R = {0}")]
    EmptyCoincidence(f64),
    #[error("window rescaled to t = {t} reaches {reach}, beyond the usable box half width {half_width}")]
    WindowEscape { t: f64, reach: f64, half_width: f64 },
    #[error("rate fit needs at least {need} samples with t ≥ {eps0} (got {have})")]
    InsufficientSamples { have: usize, need: usize, eps0: f64 },
    #[error("scale factor must be a positive finite number (got {0})")]
    BadScale(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

// ---------------------------------------------------------------------------
// Condition A

/// Pairs (i, j) of node indices with point(j) = R·point(i).
pub fn coincident_nodes(d: &BoxDomain, r: f64) -> Result<Vec<(usize, usize)>, AnalysisError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(AnalysisError::BadScale(r));
    }
    let m = d.points_per_axis() as f64;
    let c = (m - 1.0) / 2.0;
    let pairs: Vec<(usize, usize)> = (0..d.len())
        .filter_map(|i| {
            let mi = d.multi_index(i);
            let mut mj = [0usize; 3];
            for a in 0..d.dim() {
                let target = c + r * (mi[a] as f64 - c);
                let k = target.round();
                if (target - k).abs() > 1e-9 || k < 0.0 || k > m - 1.0 {
                    return None;
                }
                mj[a] = k as usize;
            }
            Some((i, d.flat_index(&mj)))
        })
        .collect();
    if pairs.is_empty() {
        return Err(AnalysisError::EmptyCoincidence(r));
    }
    Ok(pairs)
}

/// max over R and coincident nodes of |u(x) − R⁻²u(Rx)|.
pub fn check_condition_a(u: &GridFunction, scales: &[f64]) -> Result<f64, AnalysisError> {
    blowdown_defect(u, u, scales)
}

/// max over R and coincident nodes of |R⁻²u(Rx) − target(x)|.
pub fn blowdown_defect(u: &GridFunction, target: &GridFunction, scales: &[f64]) -> Result<f64, AnalysisError> {
    let d = *u.domain();
    if target.domain() != &d {
        return Err(AnalysisError::DimensionMismatch(d.len(), target.domain().len()));
    }
    let mut worst = 0.0f64;
    for &r in scales {
        for (i, j) in coincident_nodes(&d, r)? {
            worst = worst.max((u.value(j) / (r * r) - target.value(i)).abs());
        }
    }
    Ok(worst)
}

/// u_R(x) = R⁻²u(Rx) on the coarse grid of nodes x with Rx on the source grid.
#[derive(Clone, Debug)]
pub struct RescaledView {
    pub r: usize,
    /// Source time divided by R².
    pub t: f64,
    pub u: GridFunction,
}

impl RescaledView {
    /// Coincident-node sampling only: (m − 1) must be divisible by R.
    pub fn new(source: &Snapshot, r: usize) -> Result<Self, AnalysisError> {
        let d = *source.u.domain();
        if r == 0 || !(d.points_per_axis() - 1).is_multiple_of(r) {
            return Err(AnalysisError::EmptyCoincidence(r as f64));
        }
        let m = (d.points_per_axis() - 1) / r + 1;
        let coarse = BoxDomain::new(d.dim(), d.half_width() / r as f64, m)?.with_interior_margin(d.interior_margin());
        let rr = (r * r) as f64;
        let c = (d.points_per_axis() - 1) / 2;
        let cc = (m - 1) / 2;
        let values: Vec<f64> = (0..coarse.len())
            .map(|i| {
                let mi = coarse.multi_index(i);
                let mut mj = [0usize; 3];
                for a in 0..d.dim() {
                    mj[a] = c + r * mi[a] - r * cc;
                }
                source.u.value(d.flat_index(&mj)) / rr
            })
            .collect();
        Ok(Self {
            r,
            t: source.t / rr,
            u: GridFunction::new(coarse, values, format!("rescaled R={r}"))?,
        })
    }
}

/// Least-squares quadratic ½xᵀAx + b·x + c.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: SymMat,
    pub b: Point,
    pub c: f64,
    /// Max absolute misfit over the fitted nodes.
    pub misfit: f64,
}

impl QuadraticFit {
    pub fn value(&self, x: &Point) -> f64 {
        let n = self.a.dim();
        0.5 * self.a.quad_form(x) + (0..n).map(|i| self.b[i] * x[i]).sum::<f64>() + self.c
    }
}

fn quadratic_basis(n: usize, x: &Point) -> Vec<f64> {
    let mut row = Vec::new();
    for i in 0..n {
        for j in i..n {
            row.push(if i == j { 0.5 * x[i] * x[i] } else { x[i] * x[j] });
        }
    }
    row.extend((0..n).map(|i| x[i]));
    row.push(1.0);
    row
}

/// Fits a quadratic on the three outermost node layers (the far-field proxy).
pub fn fit_far_field(u: &GridFunction) -> QuadraticFit {
    let d = *u.domain();
    let nodes: Vec<usize> = (0..d.len()).filter(|&i| d.boundary_distance(i) <= 2).collect();
    fit_quadratic(u, &nodes)
}

/// Least-squares quadratic over the given nodes.
pub fn fit_quadratic(u: &GridFunction, nodes: &[usize]) -> QuadraticFit {
    let d = *u.domain();
    let n = d.dim();
    let basis: Vec<Vec<f64>> = nodes.iter().map(|&i| quadratic_basis(n, &d.point(i))).collect();
    let target: Vec<f64> = nodes.iter().map(|&i| u.value(i)).collect();
    let coef = least_squares(&basis, &target).unwrap_or_else(|| vec![0.0; basis[0].len()]);
    let mut a = SymMat::zeros(n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            a.set_sym(i, j, coef[k]);
            k += 1;
        }
    }
    let mut b = [0.0; 3];
    b[..n].copy_from_slice(&coef[k..k + n]);
    let mut fit = QuadraticFit {
        a,
        b,
        c: coef[k + n],
        misfit: 0.0,
    };
    fit.misfit = nodes
        .iter()
        .map(|&i| (fit.value(&d.point(i)) - u.value(i)).abs())
        .fold(0.0, f64::max);
    fit
}

// ---------------------------------------------------------------------------
// Condition B

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionBReport {
    pub passed: bool,
    pub lambda: f64,
    pub big_lambda: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub tolerance: f64,
}

/// λ − tol ≤ λ_min*, λ_max* ≤ Λ + tol with tol = 1e−8 + c_h2·h².
pub fn check_condition_b(u: &GridFunction, lambda: f64, big_lambda: f64, c_h2: f64) -> ConditionBReport {
    let h = u.domain().spacing();
    let tolerance = 1e-8 + c_h2 * h * h;
    let (lambda_min, lambda_max) = hessian(u).bounds();
    ConditionBReport {
        passed: lambda <= big_lambda && lambda - tolerance <= lambda_min && lambda_max <= big_lambda + tolerance,
        lambda,
        big_lambda,
        lambda_min,
        lambda_max,
        tolerance,
    }
}

// ---------------------------------------------------------------------------
// Rate fits

pub const DEFAULT_EPS0: f64 = 0.25;
pub const MIN_FIT_SAMPLES: usize = 5;
/// Squared norms at or below this count as identically zero.
pub const ZERO_FLOOR: f64 = 1e-12;

/// q ≈ C·t^p by least squares in log-log coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub quantity: String,
    pub samples: Vec<(f64, f64)>,
    /// `None` when every sample is identically zero.
    pub exponent: Option<f64>,
    pub constant: Option<f64>,
    /// RMS residual of the log-log regression.
    pub residual: f64,
    pub identically_zero: bool,
}

/// Fits samples with t ≥ eps0; at least five are required.
pub fn fit_decay(samples: &[(f64, f64)], quantity: &str, eps0: f64) -> Result<RateFit, AnalysisError> {
    let used: Vec<(f64, f64)> = samples.iter().copied().filter(|&(t, _)| t >= eps0 && t > 0.0).collect();
    if used.len() < MIN_FIT_SAMPLES {
        return Err(AnalysisError::InsufficientSamples {
            have: used.len(),
            need: MIN_FIT_SAMPLES,
            eps0,
        });
    }
    if used.iter().all(|&(_, q)| q.abs() <= ZERO_FLOOR) {
        return Ok(RateFit {
            quantity: quantity.into(),
            samples: used,
            exponent: None,
            constant: None,
            residual: 0.0,
            identically_zero: true,
        });
    }
    let pts: Vec<(f64, f64)> = used.iter().map(|&(t, q)| (t.ln(), q.max(f64::MIN_POSITIVE).ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let p = sxy / sxx;
    let logc = my - p * mx;
    let residual = (pts.iter().map(|q| (q.1 - logc - p * q.0).powi(2)).sum::<f64>() / k).sqrt();
    Ok(RateFit {
        quantity: quantity.into(),
        samples: used,
        exponent: Some(p),
        constant: Some(logc.exp()),
        residual,
        identically_zero: false,
    })
}

/// Upper bound on the fitted exponent of ‖Dˡu‖² allowed by the decay estimate.
pub fn decay_exponent_bound(order: usize) -> f64 {
    -(order as f64 - 2.0) + 0.3
}

/// (t, ‖Dˡu(·, t)‖²) for every snapshot.
pub fn derivative_norm_samples(snapshots: &[Snapshot], order: usize) -> Result<Vec<(f64, f64)>, AnalysisError> {
    snapshots
        .iter()
        .map(|s| Ok((s.t, derivative_norm(&s.u, order)?.powi(2))))
        .collect()
}

pub fn quantity_name(order: usize) -> String {
    format!("D{order}norm2")
}

// ---------------------------------------------------------------------------
// Blow-down

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowdownReport {
    pub times: Vec<f64>,
    pub errors: Vec<f64>,
    pub nonincreasing: bool,
    /// e_{k+1} < e_k for every k ≥ 2 (0-based over the used snapshots).
    pub strictly_decreasing_from_2: bool,
    pub final_error: f64,
    pub fit: Option<RateFit>,
}

/// e_k = max over the window of |t⁻¹u(√t x, t) − U₁(x)| for each snapshot with t ≥ t_min.
/// `u1` lives on the window grid.
pub fn blowdown_convergence(snapshots: &[Snapshot], u1: &GridFunction, t_min: f64) -> Result<BlowdownReport, AnalysisError> {
    let w = *u1.domain();
    let mut times = Vec::new();
    let mut errors = Vec::new();
    for s in snapshots.iter().filter(|s| s.t >= t_min && s.t > 0.0) {
        let d = s.u.domain();
        if d.dim() != w.dim() {
            return Err(AnalysisError::DimensionMismatch(d.dim(), w.dim()));
        }
        let st = s.t.sqrt();
        let reach = st * w.half_width();
        // cubic stencils need one cell of slack inside the box
        if reach > d.half_width() - d.spacing() {
            return Err(AnalysisError::WindowEscape {
                t: s.t,
                reach,
                half_width: d.half_width(),
            });
        }
        let e = (0..w.len())
            .into_par_iter()
            .map(|i| {
                let x = w.point(i);
                let y = [x[0] * st, x[1] * st, x[2] * st];
                let v = s.u.sample(&y).unwrap_or(f64::INFINITY);
                (v / s.t - u1.value(i)).abs()
            })
            .reduce(|| 0.0, f64::max);
        times.push(s.t);
        errors.push(e);
    }
    let nonincreasing = errors.windows(2).all(|p| p[1] <= p[0]);
    let strictly = errors.iter().skip(2).collect::<Vec<_>>().windows(2).all(|p| p[1] < p[0]);
    let samples: Vec<(f64, f64)> = times.iter().copied().zip(errors.iter().copied()).collect();
    let fit = fit_decay(&samples, "blowdown_error", 0.0).ok();
    Ok(BlowdownReport {
        final_error: errors.last().copied().unwrap_or(f64::NAN),
        times,
        errors,
        nonincreasing,
        strictly_decreasing_from_2: strictly,
        fit,
    })
}

// ---------------------------------------------------------------------------
// Plane convergence

/// Hessian eigenvalues above this in the outer half of the box mean the data is
/// not a compact perturbation of a linear function.
pub const PLANE_GATE: f64 = 1e-3;

pub const PLANE_INTERPRETATION: &str =
    "initial data read as a linear function plus a compactly supported (rapidly decaying) perturbation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneReport {
    pub interpretation: String,
    pub hypothesis_violated: bool,
    pub times: Vec<f64>,
    /// max over the window of |Du − affine fit of Du|.
    pub affine_deviation: Vec<f64>,
    /// max over the window of |Du|.
    pub max_gradient: Vec<f64>,
    /// `None` when the hypothesis gate fails.
    pub passed: Option<bool>,
}

fn outer_half_lambda_max(u: &GridFunction) -> f64 {
    let d = *u.domain();
    let h = hessian(u);
    let half = 0.5 * d.half_width();
    d.monitored_nodes()
        .into_iter()
        .filter(|&i| {
            let x = d.point(i);
            (0..d.dim()).any(|a| x[a].abs() >= half)
        })
        .map(|i| h.eigen_at(i).1.abs().max(h.eigen_at(i).0.abs()))
        .fold(0.0, f64::max)
}

/// Tracks max |Du − affine| and max |Du| over the window |x_i| ≤ `window` for snapshots.
/// Passes when both are nonincreasing for t ≥ 1 and the final values are ≤ `tolerance`.
pub fn plane_convergence(snapshots: &[Snapshot], window: f64, tolerance: f64) -> PlaneReport {
    let mut report = PlaneReport {
        interpretation: PLANE_INTERPRETATION.into(),
        hypothesis_violated: false,
        times: vec![],
        affine_deviation: vec![],
        max_gradient: vec![],
        passed: None,
    };
    let Some(first) = snapshots.first() else {
        return report;
    };
    if outer_half_lambda_max(&first.u) > PLANE_GATE {
        report.hypothesis_violated = true;
        return report;
    }
    for s in snapshots {
        let d = *s.u.domain();
        let n = d.dim();
        let nodes: Vec<usize> = d
            .nodes_with_margin(1)
            .filter(|&i| {
                let x = d.point(i);
                (0..n).all(|a| x[a].abs() <= window + 1e-12)
            })
            .collect();
        if nodes.is_empty() {
            continue;
        }
        let grads: Vec<Point> = nodes.iter().map(|&i| gradient_at(&s.u, i)).collect();
        let basis: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&i| {
                let x = d.point(i);
                let mut row: Vec<f64> = (0..n).map(|a| x[a]).collect();
                row.push(1.0);
                row
            })
            .collect();
        let mut dev = 0.0f64;
        for c in 0..n {
            let target: Vec<f64> = grads.iter().map(|g| g[c]).collect();
            let coef = least_squares(&basis, &target).unwrap_or_else(|| vec![0.0; n + 1]);
            for (row, y) in basis.iter().zip(&target) {
                let fit: f64 = row.iter().zip(&coef).map(|(a, b)| a * b).sum();
                dev = dev.max((y - fit).abs());
            }
        }
        let gmax = grads
            .iter()
            .map(|g| (0..n).map(|a| g[a] * g[a]).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        report.times.push(s.t);
        report.affine_deviation.push(dev);
        report.max_gradient.push(gmax);
    }
    let late = |v: &[f64]| -> bool {
        let tail: Vec<f64> = report.times.iter().zip(v).filter(|(t, _)| **t >= 1.0).map(|(_, x)| *x).collect();
        tail.windows(2).all(|p| p[1] <= p[0])
    };
    let monotone = late(&report.affine_deviation) && late(&report.max_gradient);
    let final_ok = report.affine_deviation.last().is_some_and(|v| *v <= tolerance)
        && report.max_gradient.last().is_some_and(|v| *v <= tolerance);
    report.passed = Some(monotone && final_ok);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dom(n: usize, l: f64, m: usize) -> BoxDomain {
        BoxDomain::new(n, l, m).unwrap()
    }

    #[test]
    fn condition_a_examples() {
        let d = dom(2, 2.0, 17);
        let q = GridFunction::from_fn(d, "q", |x| 0.5 * (x[0] * x[0] + x[1] * x[1]));
        assert!(check_condition_a(&q, &[2.0, 4.0]).unwrap() < 1e-14);
        let q1 = GridFunction::from_fn(d, "q+1", |x| 0.5 * (x[0] * x[0] + x[1] * x[1]) + 1.0);
        assert!((check_condition_a(&q1, &[2.0]).unwrap() - 0.75).abs() < 1e-14);
        let c = GridFunction::from_fn(d, "3q", |x| 3.0 * (x[0] * x[0] + x[1] * x[1]));
        assert!(check_condition_a(&c, &[2.0, 4.0]).unwrap() < 1e-12);
        assert!(matches!(coincident_nodes(&d, -1.0), Err(AnalysisError::BadScale(_))));
        // R larger than the grid: only the centre coincides
        assert_eq!(coincident_nodes(&d, 100.0).unwrap().len(), 1);
        // even m has no centre node
        assert!(matches!(coincident_nodes(&dom(1, 1.0, 6), 100.0), Err(AnalysisError::EmptyCoincidence(_))));
    }

    #[test]
    fn condition_a_scale_covariance() {
        let d = dom(1, 2.0, 33);
        let u = GridFunction::from_fn(d, "u", |x| 0.5 * x[0] * x[0] + 0.3);
        let cu = GridFunction::from_fn(d, "cu", |x| 2.5 * (0.5 * x[0] * x[0] + 0.3));
        let a = check_condition_a(&u, &[2.0, 4.0]).unwrap();
        let b = check_condition_a(&cu, &[2.0, 4.0]).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-13);
    }

    #[test]
    fn condition_b_examples() {
        let d = dom(2, 1.0, 17);
        let id = GridFunction::from_fn(d, "q", |x| 0.5 * (x[0] * x[0] + x[1] * x[1]));
        assert!(check_condition_b(&id, 1.0, 1.0, 0.0).passed);
        let an = GridFunction::from_fn(d, "an", |x| x[0] * x[0] + 0.25 * x[1] * x[1]);
        assert!(check_condition_b(&an, 0.5, 2.0, 0.0).passed);
        assert!(!check_condition_b(&an, 1.0, 2.0, 0.0).passed);
        let d1 = dom(1, 1.0, 33);
        let quartic = GridFunction::from_fn(d1, "x4", |x| x[0].powi(4) / 4.0);
        assert!(!check_condition_b(&quartic, 0.01, 10.0, 0.0).passed);
    }

    #[test]
    fn far_field_fit_recovers_quadratic() {
        let d = dom(2, 2.0, 17);
        let u = GridFunction::from_fn(d, "q", |x| x[0] * x[0] + 0.3 * x[0] * x[1] + 0.4 * x[1] * x[1] - x[1] + 2.0);
        let f = fit_far_field(&u);
        assert!((f.a.get(0, 0) - 2.0).abs() < 1e-10);
        assert!((f.a.get(0, 1) - 0.3).abs() < 1e-10);
        assert!((f.a.get(1, 1) - 0.8).abs() < 1e-10);
        assert!((f.b[1] + 1.0).abs() < 1e-10 && (f.c - 2.0).abs() < 1e-10);
        assert!(f.misfit < 1e-10);
    }

    #[test]
    fn rate_fit_exact_power_law() {
        let s: Vec<(f64, f64)> = (0..6).map(|k| {
            let t = 0.25 * 2f64.powi(k);
            (t, 3.0 * t.powf(-1.5))
        }).collect();
        let f = fit_decay(&s, "q", DEFAULT_EPS0).unwrap();
        assert!((f.exponent.unwrap() + 1.5).abs() < 1e-12);
        assert!((f.constant.unwrap() - 3.0).abs() < 1e-12);
        assert!(f.residual < 1e-12);

        let z: Vec<(f64, f64)> = s.iter().map(|&(t, _)| (t, 0.0)).collect();
        assert!(fit_decay(&z, "q", DEFAULT_EPS0).unwrap().identically_zero);
        assert!(matches!(
            fit_decay(&s[..4], "q", DEFAULT_EPS0),
            Err(AnalysisError::InsufficientSamples { have: 4, .. })
        ));
    }

    #[test]
    fn blowdown_of_stationary_expander_is_zero() {
        let d = dom(1, 8.0, 129);
        let w = dom(1, 1.0, 21);
        let snaps: Vec<Snapshot> = [1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&t| Snapshot {
                t,
                u: GridFunction::from_fn(d, "q", |x| 0.5 * x[0] * x[0]),
            })
            .collect();
        let u1 = GridFunction::from_fn(w, "U1", |x| 0.5 * x[0] * x[0]);
        let r = blowdown_convergence(&snaps, &u1, 1.0).unwrap();
        assert!(r.errors.iter().all(|e| *e < 1e-12));
        assert!(r.fit.unwrap().identically_zero);

        let far = vec![Snapshot {
            t: 100.0,
            u: GridFunction::from_fn(d, "q", |x| 0.5 * x[0] * x[0]),
        }];
        assert!(matches!(blowdown_convergence(&far, &u1, 1.0), Err(AnalysisError::WindowEscape { .. })));
    }

    #[test]
    fn rescaled_view_on_coincident_nodes() {
        let d = dom(2, 2.0, 17);
        let s = Snapshot {
            t: 4.0,
            u: GridFunction::from_fn(d, "q", |x| x[0] * x[0] + 0.5 * x[1] * x[1] + 1.0),
        };
        let v = RescaledView::new(&s, 2).unwrap();
        assert_eq!(v.u.domain().points_per_axis(), 9);
        assert!((v.t - 1.0).abs() < 1e-15);
        for i in 0..v.u.domain().len() {
            let x = v.u.domain().point(i);
            let exact = x[0] * x[0] + 0.5 * x[1] * x[1] + 0.25;
            assert!((v.u.value(i) - exact).abs() < 1e-13);
        }
        assert!(RescaledView::new(&s, 3).is_err());
    }

    #[test]
    fn plane_gate_and_linear_data() {
        let d = dom(1, 4.0, 65);
        let lin: Vec<Snapshot> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&t| Snapshot {
                t,
                u: GridFunction::from_fn(d, "lin", |x| 0.3 * x[0] + 1.0),
            })
            .collect();
        let r = plane_convergence(&lin, 1.0, 0.02);
        assert!(!r.hypothesis_violated);
        assert!(r.affine_deviation.iter().all(|v| *v < 1e-12));
        // |Du| = 0.3 > tolerance, so the gradient part fails while the plane part holds
        assert_eq!(r.passed, Some(false));

        let q = vec![Snapshot {
            t: 0.0,
            u: GridFunction::from_fn(d, "q", |x| 0.5 * x[0] * x[0]),
        }];
        let r = plane_convergence(&q, 1.0, 0.02);
        assert!(r.hypothesis_violated && r.passed.is_none());
    }
}
