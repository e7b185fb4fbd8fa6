//! Discrete Legendre transform u*(y) = max_x (⟨x, y⟩ − u(x)) and the checks that the
//! log flow is self-dual under it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Snapshot;
use crate::grid::{gradient, gradient_at, hessian, hessian_at, interpolate_cubic, BoxDomain, GridError, GridFunction, NonConvexityError, Point};
use crate::linalg::SymMat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LegendreError {
    #[error("y = {y:?} lies outside the range of sampled gradients")]
    Range { y: Point },
    #[error("gradient range does not contain a centred box (lo = {lo:?}, hi = {hi:?})")]
    UncentredRange { lo: Point, hi: Point },
    #[error(transparent)]
    NonConvex(#[from] NonConvexityError),
    #[error("dual flow check needs at least 3 snapshots (got {0})")]
    TooFewSnapshots(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Fraction of the centred gradient range used for the automatic y-grid.
pub const Y_RANGE_FRACTION: f64 = 0.8;

fn require_convex(u: &GridFunction) -> Result<(), NonConvexityError> {
    let d = *u.domain();
    let h = hessian(u);
    for i in d.nodes_with_margin(1) {
        let (lo, _) = h.eigen_at(i);
        if !(lo > 0.0) {
            return Err(NonConvexityError {
                node: i,
                point: d.point(i),
                det: h.at(i).det(),
                lambda_min: lo,
            });
        }
    }
    Ok(())
}

/// Per-axis (min, max) of the central gradient over interior nodes.
pub fn gradient_range(u: &GridFunction) -> (Point, Point) {
    let d = *u.domain();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for i in d.nodes_with_margin(1) {
        let g = gradient_at(u, i);
        for a in 0..d.dim() {
            lo[a] = lo[a].min(g[a]);
            hi[a] = hi[a].max(g[a]);
        }
    }
    for a in d.dim()..3 {
        lo[a] = 0.0;
        hi[a] = 0.0;
    }
    (lo, hi)
}

/// Half width of the centred y-box covering the inner 80% of the gradient range.
pub fn auto_y_half_width(u: &GridFunction) -> Result<f64, LegendreError> {
    let (lo, hi) = gradient_range(u);
    let half = (0..u.domain().dim()).map(|a| (-lo[a]).min(hi[a])).fold(f64::INFINITY, f64::min);
    if !(half > 0.0 && half.is_finite()) {
        return Err(LegendreError::UncentredRange { lo, hi });
    }
    Ok(Y_RANGE_FRACTION * half)
}

/// Centred y-grid with the same resolution as the x-grid.
pub fn auto_y_grid(u: &GridFunction) -> Result<BoxDomain, LegendreError> {
    let d = u.domain();
    Ok(BoxDomain::new(d.dim(), auto_y_half_width(u)?, d.points_per_axis())?.with_interior_margin(d.interior_margin()))
}

/// Newton iterations on Du(x) = y after the brute-force search.
const REFINE_ITERATIONS: usize = 8;

/// u*(y) at every node of `y_grid`: brute-force maximum over x nodes, then Newton on
/// Du(x) = y with cubic interpolation of the nodal gradient, and u*(y) = ⟨x, y⟩ − u(x)
/// with u interpolated the same way. The maximizer error enters the value quadratically,
/// so the transform keeps the fourth-order interpolation accuracy.
pub fn legendre_transform(u: &GridFunction, y_grid: &BoxDomain) -> Result<GridFunction, LegendreError> {
    require_convex(u)?;
    let d = *u.domain();
    let n = d.dim();
    let (lo, hi) = gradient_range(u);
    let points: Vec<Point> = (0..d.len()).map(|i| d.point(i)).collect();
    let grad = gradient(u);
    let grad_components: Vec<Vec<f64>> = (0..n).map(|a| grad.component(a)).collect();
    let values: Result<Vec<f64>, LegendreError> = (0..y_grid.len())
        .into_par_iter()
        .map(|j| {
            let y = y_grid.point(j);
            if (0..n).any(|a| y[a] < lo[a] - 1e-12 || y[a] > hi[a] + 1e-12) {
                return Err(LegendreError::Range { y });
            }
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for (k, x) in points.iter().enumerate() {
                let phi = (0..n).map(|a| x[a] * y[a]).sum::<f64>() - u.value(k);
                if phi > best {
                    best = phi;
                    arg = k;
                }
            }
            if d.boundary_distance(arg) == 0 {
                return Err(LegendreError::Range { y });
            }
            let inv = hessian_at(u, arg).inverse().ok_or(LegendreError::Range { y })?;
            let mut x = points[arg];
            for _ in 0..REFINE_ITERATIONS {
                let mut g = [0.0; 3];
                for a in 0..n {
                    g[a] = y[a] - interpolate_cubic(&d, &grad_components[a], &x).ok_or(LegendreError::Range { y })?;
                }
                let step = inv.mul_vec(&g);
                for a in 0..n {
                    x[a] += step[a];
                }
                if (0..n).all(|a| step[a].abs() <= 1e-14 * (1.0 + x[a].abs())) {
                    break;
                }
            }
            let ux = interpolate_cubic(&d, u.values(), &x).ok_or(LegendreError::Range { y })?;
            let value = (0..n).map(|a| x[a] * y[a]).sum::<f64>() - ux;
            Ok(if value.is_finite() { value } else { best })
        })
        .collect();
    Ok(GridFunction::new(*y_grid, values?, format!("legendre({})", u.label()))?)
}

/// u together with its transform and the Fenchel–Young equality gap.
#[derive(Clone, Debug)]
pub struct LegendrePair {
    pub u: GridFunction,
    pub u_star: GridFunction,
    /// max over sampled x of |u(x) + u*(Du(x)) − ⟨x, Du(x)⟩|.
    pub duality_gap: f64,
}

impl LegendrePair {
    pub fn new(u: GridFunction) -> Result<Self, LegendreError> {
        let y = auto_y_grid(&u)?;
        let u_star = legendre_transform(&u, &y)?;
        let duality_gap = young_equality_gap(&u, &u_star);
        Ok(Self { u, u_star, duality_gap })
    }
}

/// Interior x nodes whose gradient lands inside the y-grid with two layers to spare.
fn dual_sample_nodes(u: &GridFunction, y: &BoxDomain) -> Vec<(usize, Point)> {
    let d = *u.domain();
    let lim = y.half_width() - 2.0 * y.spacing();
    d.nodes_with_margin(d.monitored_margin().max(2))
        .filter_map(|i| {
            let g = gradient_at(u, i);
            (0..d.dim()).all(|a| g[a].abs() <= lim).then_some((i, g))
        })
        .collect()
}

/// max |u(x) + u*(Du(x)) − ⟨x, Du(x)⟩| over x whose gradient lies well inside the y-grid.
pub fn young_equality_gap(u: &GridFunction, u_star: &GridFunction) -> f64 {
    let d = *u.domain();
    dual_sample_nodes(u, u_star.domain())
        .into_iter()
        .map(|(i, g)| {
            let x = d.point(i);
            let us = u_star.sample(&g).unwrap_or(f64::INFINITY);
            (u.value(i) + us - (0..d.dim()).map(|a| x[a] * g[a]).sum::<f64>()).abs()
        })
        .fold(0.0, f64::max)
}

/// min over all sampled pairs of u(x) + u*(y) − ⟨x, y⟩ (nonnegative up to rounding).
pub fn young_inequality_min(u: &GridFunction, u_star: &GridFunction) -> f64 {
    let d = *u.domain();
    let dy = *u_star.domain();
    let n = d.dim();
    (0..dy.len())
        .into_par_iter()
        .map(|j| {
            let y = dy.point(j);
            (0..d.len())
                .map(|i| {
                    let x = d.point(i);
                    u.value(i) + u_star.value(j) - (0..n).map(|a| x[a] * y[a]).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Hessian of u* interpolated at y (cubic per entry).
fn dual_hessian_at(u_star: &GridFunction, hs: &[SymMat], y: &Point) -> Option<SymMat> {
    let dy = *u_star.domain();
    let n = dy.dim();
    let mut m = SymMat::zeros(n);
    for a in 0..n {
        for b in a..n {
            let comp: Vec<f64> = hs.iter().map(|h| h.get(a, b)).collect();
            m.set_sym(a, b, interpolate_cubic(&dy, &comp, y)?);
        }
    }
    Some(m)
}

fn frobenius_defect(p: [[f64; 3]; 3], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let e = p[i][j] - if i == j { 1.0 } else { 0.0 };
            s += e * e;
        }
    }
    s.sqrt()
}

/// max over interior x of ‖D²u*(Du(x))·D²u(x) − I‖ (Frobenius), u* on the automatic y-grid.
pub fn duality_involution_check(u: &GridFunction) -> Result<f64, LegendreError> {
    let y = auto_y_grid(u)?;
    let u_star = legendre_transform(u, &y)?;
    involution_defect(u, &u_star)
}

/// The same defect for a precomputed transform.
pub fn involution_defect(u: &GridFunction, u_star: &GridFunction) -> Result<f64, LegendreError> {
    let n = u.domain().dim();
    let hs = hessian(u_star);
    let nodes = dual_sample_nodes(u, u_star.domain());
    let worst = nodes
        .par_iter()
        .map(|(i, g)| match dual_hessian_at(u_star, hs.matrices(), g) {
            Some(hstar) => frobenius_defect(hstar.mat_mul(&hessian_at(u, *i)), n),
            None => f64::INFINITY,
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigenSwap {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_min_star: f64,
    pub lambda_max_star: f64,
    pub slack: f64,
    pub holds: bool,
}

/// λ_min*(D²u*) ≥ 1/λ_max*(D²u) − C·h and λ_max*(D²u*) ≤ 1/λ_min*(D²u) + C·h.
pub fn eigen_swap(u: &GridFunction, u_star: &GridFunction, c: f64) -> EigenSwap {
    let (lambda_min, lambda_max) = hessian(u).bounds();
    let (lambda_min_star, lambda_max_star) = hessian(u_star).bounds();
    let slack = c * u.domain().spacing().max(u_star.domain().spacing());
    EigenSwap {
        lambda_min,
        lambda_max,
        lambda_min_star,
        lambda_max_star,
        slack,
        holds: lambda_min_star >= 1.0 / lambda_max - slack && lambda_max_star <= 1.0 / lambda_min + slack,
    }
}

/// Transforms each snapshot onto one common centred y-grid.
pub fn transform_trajectory(snapshots: &[Snapshot]) -> Result<Vec<Snapshot>, LegendreError> {
    let first = snapshots.first().ok_or(LegendreError::TooFewSnapshots(0))?;
    let mut half = f64::INFINITY;
    for s in snapshots {
        half = half.min(auto_y_half_width(&s.u)?);
    }
    let d = first.u.domain();
    let y = BoxDomain::new(d.dim(), half, d.points_per_axis())?.with_interior_margin(d.interior_margin());
    snapshots
        .iter()
        .map(|s| {
            Ok(Snapshot {
                t: s.t,
                u: legendre_transform(&s.u, &y)?,
            })
        })
        .collect()
}

/// Interior sup of ∂u*/∂t − (1/n) ln det D²u* over the transformed trajectory, at
/// every snapshot except the first and last.
pub fn dual_flow_check(snapshots: &[Snapshot]) -> Result<f64, LegendreError> {
    if snapshots.len() < 3 {
        return Err(LegendreError::TooFewSnapshots(snapshots.len()));
    }
    let dual = transform_trajectory(snapshots)?;
    dual_flow_residual(&dual)
}

/// Weights of the first derivative at `t0` of the Lagrange polynomial through `ts`.
pub fn derivative_weights(ts: &[f64], t0: f64) -> Vec<f64> {
    (0..ts.len())
        .map(|j| {
            (0..ts.len())
                .filter(|&m| m != j)
                .map(|m| {
                    let prod: f64 = (0..ts.len())
                        .filter(|&l| l != j && l != m)
                        .map(|l| (t0 - ts[l]) / (ts[j] - ts[l]))
                        .product();
                    prod / (ts[j] - ts[m])
                })
                .sum()
        })
        .collect()
}

/// Time levels used for the derivative at snapshot k: the five nearest when available.
fn stencil(len: usize, k: usize) -> std::ops::Range<usize> {
    let width = len.min(5);
    let start = k.saturating_sub(width / 2).min(len - width);
    start..start + width
}

/// The same residual for an already transformed trajectory. ∂u*/∂t is the derivative
/// of the interpolating polynomial through (up to) five neighbouring time levels, so
/// snapshot spacing contributes O(Δt⁴) and the spatial error dominates.
pub fn dual_flow_residual(dual: &[Snapshot]) -> Result<f64, LegendreError> {
    if dual.len() < 3 {
        return Err(LegendreError::TooFewSnapshots(dual.len()));
    }
    let mut worst = 0.0f64;
    for k in 1..dual.len() - 1 {
        let b = &dual[k];
        let levels = stencil(dual.len(), k);
        let ts: Vec<f64> = levels.clone().map(|j| dual[j].t).collect();
        let w = derivative_weights(&ts, b.t);
        let d = *b.u.domain();
        let n = d.dim() as f64;
        let nodes = d.monitored_nodes();
        let r = nodes
            .par_iter()
            .map(|&i| -> Result<f64, LegendreError> {
                let dt: f64 = levels.clone().zip(&w).map(|(j, wj)| wj * dual[j].u.value(i)).sum();
                let hm = hessian_at(&b.u, i);
                let det = hm.det();
                if !(det > 0.0) {
                    return Err(NonConvexityError {
                        node: i,
                        point: d.point(i),
                        det,
                        lambda_min: hm.eigen_bounds().0,
                    }
                    .into());
                }
                Ok((dt - det.ln() / n).abs())
            })
            .collect::<Result<Vec<f64>, _>>()?;
        worst = r.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(n: usize, l: f64, m: usize, a: SymMat) -> GridFunction {
        GridFunction::from_fn(BoxDomain::new(n, l, m).unwrap(), "q", move |x| 0.5 * a.quad_form(x))
    }

    #[test]
    fn derivative_weights_are_exact_for_quartics() {
        let ts = [0.0, 0.1, 0.25, 0.3, 0.5];
        let f = |t: f64| 1.0 - 2.0 * t + 3.0 * t.powi(2) + t.powi(3) - 4.0 * t.powi(4);
        let df = |t: f64| -2.0 + 6.0 * t + 3.0 * t * t - 16.0 * t.powi(3);
        for &t0 in &[0.1, 0.25, 0.3] {
            let w = derivative_weights(&ts, t0);
            let approx: f64 = ts.iter().zip(&w).map(|(t, w)| w * f(*t)).sum();
            assert!((approx - df(t0)).abs() < 1e-10, "{approx} vs {}", df(t0));
        }
        let w = derivative_weights(&[0.0, 1.0, 2.0], 1.0);
        assert!((w[0] + 0.5).abs() < 1e-15 && w[1].abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_is_self_dual() {
        let u = quad(2, 2.0, 21, SymMat::identity(2));
        let y = BoxDomain::new(2, 1.5, 21).unwrap();
        let us = legendre_transform(&u, &y).unwrap();
        for j in 0..y.len() {
            let p = y.point(j);
            assert!((us.value(j) - 0.5 * (p[0] * p[0] + p[1] * p[1])).abs() < 1e-13);
        }
        assert!(duality_involution_check(&u).unwrap() < 1e-10);
    }

    #[test]
    fn anisotropic_quadratic_conjugate() {
        let a = SymMat::diag(&[2.0, 0.5]);
        let u = quad(2, 2.0, 33, a);
        let y = auto_y_grid(&u).unwrap();
        let us = legendre_transform(&u, &y).unwrap();
        for j in 0..y.len() {
            let p = y.point(j);
            assert!((us.value(j) - 0.5 * (0.5 * p[0] * p[0] + 2.0 * p[1] * p[1])).abs() < 1e-12);
        }
        assert!(duality_involution_check(&u).unwrap() < 1e-8);
        let sw = eigen_swap(&u, &us, 1.0);
        assert!(sw.holds, "{sw:?}");
    }

    #[test]
    fn quartic_conjugate_converges_at_order_two() {
        // u = x⁴/4 + x²/2 keeps strict convexity; conjugate from x³ + x = y
        let exact = |y: f64| {
            // Newton on x³ + x − y = 0
            let mut x = y;
            for _ in 0..60 {
                x -= (x * x * x + x - y) / (3.0 * x * x + 1.0);
            }
            x * y - x.powi(4) / 4.0 - x * x / 2.0
        };
        let mut errs = vec![];
        for m in [41, 81, 161] {
            let d = BoxDomain::new(1, 1.0, m).unwrap();
            let u = GridFunction::from_fn(d, "x4", |x| x[0].powi(4) / 4.0 + 0.5 * x[0] * x[0]);
            let y = BoxDomain::new(1, 1.0, 21).unwrap();
            let us = legendre_transform(&u, &y).unwrap();
            errs.push((0..y.len()).map(|j| (us.value(j) - exact(y.point(j)[0])).abs()).fold(0.0, f64::max));
        }
        assert!(errs[0] < 1e-4, "{errs:?}");
        assert!(errs[0] / errs[1] > 3.0 && errs[1] / errs[2] > 3.0, "{errs:?}");
    }

    #[test]
    fn pure_quartic_matches_closed_form() {
        // u = x⁴/4 is convex but degenerate at 0; y grid away from the kink of |y|^{4/3}
        let d = BoxDomain::new(1, 1.0, 401).unwrap();
        let u = GridFunction::from_fn(d, "x4", |x| x[0].powi(4) / 4.0 + 1e-9 * x[0] * x[0]);
        let y = BoxDomain::new(1, 0.9, 19).unwrap();
        let us = legendre_transform(&u, &y).unwrap();
        for j in 0..y.len() {
            let yy = y.point(j)[0];
            assert!((us.value(j) - 0.75 * yy.abs().powf(4.0 / 3.0)).abs() < 1e-4, "y = {yy}");
        }
    }

    #[test]
    fn range_and_convexity_errors() {
        let u = quad(1, 1.0, 21, SymMat::identity(1));
        let y = BoxDomain::new(1, 2.0, 21).unwrap();
        assert!(matches!(legendre_transform(&u, &y), Err(LegendreError::Range { .. })));
        let d = BoxDomain::new(1, 1.0, 21).unwrap();
        let c = GridFunction::from_fn(d, "c", |x| -x[0] * x[0]);
        assert!(matches!(legendre_transform(&c, &d), Err(LegendreError::NonConvex(_))));
    }

    #[test]
    fn involution_and_young() {
        let d = BoxDomain::new(1, 2.0, 161).unwrap();
        let u = GridFunction::from_fn(d, "b", |x| 0.5 * x[0] * x[0] + 0.05 * (-x[0] * x[0]).exp());
        let pair = LegendrePair::new(u.clone()).unwrap();
        assert!(pair.duality_gap < 1e-5, "gap {}", pair.duality_gap);
        assert!(young_inequality_min(&u, &pair.u_star) > -1e-12);
        // transform back onto an x-grid inside the dual gradient range
        let back_grid = auto_y_grid(&pair.u_star).unwrap();
        let back = legendre_transform(&pair.u_star, &back_grid).unwrap();
        let err = (0..back_grid.len())
            .filter(|&j| back_grid.boundary_distance(j) >= 1)
            .map(|j| (back.value(j) - u.sample(&back_grid.point(j)).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-4, "involution error {err}");
        assert!(duality_involution_check(&u).unwrap() < 0.05);
    }

    #[test]
    fn dual_flow_of_quadratic_trajectory() {
        let a = SymMat::diag(&[2.0, 0.5]);
        let d = BoxDomain::new(2, 2.0, 25).unwrap();
        let snaps: Vec<Snapshot> = [0.0, 0.3, 0.5, 1.0]
            .iter()
            .map(|&t| Snapshot {
                t,
                u: GridFunction::from_fn(d, "q", move |x| 0.5 * a.quad_form(x) + t * 0.5 * a.det().ln() + 0.1 * x[0]),
            })
            .collect();
        assert!(dual_flow_check(&snaps).unwrap() < 1e-10);
        assert!(matches!(dual_flow_check(&snaps[..2]), Err(LegendreError::TooFewSnapshots(2))));
    }
}
