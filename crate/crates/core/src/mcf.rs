//! Lagrangian mean curvature flow of the gradient graph {(x, Du(x, t))} in ℝ²ⁿ with the
//! indefinite metric written in null coordinates (x, y).
//!
//! The pairing is ⟨(a, b), (c, d)⟩ = ½(a·d + b·c), the polarization of the symmetrized
//! tensor ½Σ(dxⁱ⊗dyⁱ + dyⁱ⊗dxⁱ). With it ⟨e_i, e_j⟩ = u_ij, ⟨η_i, η_j⟩ = −u_ij and
//! ⟨e_i, η_j⟩ = 0. [`to_signature`] maps null coordinates to p = (x + y)/2,
//! q = (x − y)/2, in which the pairing reads Σ p p' − Σ q q'.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::Snapshot;
use crate::grid::{gradient, hessian, interpolate_cubic, interpolate_linear, BoxDomain, GridFunction, HessianField, NonConvexityError, Point};
use crate::linalg::SymMat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McfError {
    #[error(transparent)]
    NonConvex(#[from] NonConvexityError),
    #[error("node {0} is closer than two layers to the boundary")]
    Margin(usize),
    #[error("particle seeded at {seed:?} left the interior at t = {t} (position {position:?})")]
    Escape { seed: Point, t: f64, position: Point },
    #[error("trajectory needs at least {need} snapshots (got {have})")]
    TooFewSnapshots { have: usize, need: usize },
}

/// Vector of ℝ²ⁿ in null coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullVector {
    pub x: Point,
    pub y: Point,
}

impl NullVector {
    pub fn zero() -> Self {
        Self { x: [0.0; 3], y: [0.0; 3] }
    }

    pub fn sub(&self, o: &NullVector) -> NullVector {
        let mut r = *self;
        for a in 0..3 {
            r.x[a] -= o.x[a];
            r.y[a] -= o.y[a];
        }
        r
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.x.iter().chain(self.y.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// ⟨v, w⟩ = ½(v_x·w_y + v_y·w_x).
pub fn null_pairing(v: &NullVector, w: &NullVector, n: usize) -> f64 {
    0.5 * (0..n).map(|a| v.x[a] * w.y[a] + v.y[a] * w.x[a]).sum::<f64>()
}

/// (p, q) = ((x + y)/2, (x − y)/2); the pairing becomes Σ p p' − Σ q q'.
pub fn to_signature(v: &NullVector) -> (Point, Point) {
    let mut p = [0.0; 3];
    let mut q = [0.0; 3];
    for a in 0..3 {
        p[a] = 0.5 * (v.x[a] + v.y[a]);
        q[a] = 0.5 * (v.x[a] - v.y[a]);
    }
    (p, q)
}

/// e_i = (∂_i, u_ij ∂_{y_j}) and η_i = (∂_i, −u_ij ∂_{y_j}).
pub fn frames(hess: &SymMat) -> (Vec<NullVector>, Vec<NullVector>) {
    let n = hess.dim();
    let mut e = Vec::with_capacity(n);
    let mut eta = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = NullVector::zero();
        a.x[i] = 1.0;
        let mut b = a;
        for j in 0..n {
            a.y[j] = hess.get(i, j);
            b.y[j] = -hess.get(i, j);
        }
        e.push(a);
        eta.push(b);
    }
    (e, eta)
}

/// Geometry of the graph at one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImmersionFrame {
    pub x: Point,
    pub embedding: NullVector,
    pub tangent: Vec<NullVector>,
    pub normal: Vec<NullVector>,
    pub metric: SymMat,
    pub g: f64,
    pub mean_curvature: NullVector,
}

struct Geometry {
    hess: HessianField,
    det: Vec<f64>,
}

impl Geometry {
    fn new(u: &GridFunction) -> Self {
        let hess = hessian(u);
        let det = hess.matrices().iter().map(|m| m.det()).collect();
        Self { hess, det }
    }

    fn mean_curvature(&self, d: &BoxDomain, idx: usize) -> Result<NullVector, McfError> {
        if d.boundary_distance(idx) < 2 {
            return Err(McfError::Margin(idx));
        }
        let n = d.dim();
        let hm = self.hess.at(idx);
        let g = self.det[idx];
        let lambda_min = hm.eigen_bounds().0;
        if !(g > 0.0 && lambda_min > 0.0) {
            return Err(NonConvexityError {
                node: idx,
                point: d.point(idx),
                det: g,
                lambda_min,
            }
            .into());
        }
        let h = d.spacing();
        let mut dg = [0.0; 3];
        for l in 0..n {
            let s = d.stride(l);
            dg[l] = (self.det[idx + s] - self.det[idx - s]) / (2.0 * h);
        }
        let inv = hm.inverse().ok_or(McfError::Margin(idx))?;
        // H = −(1/(2ng)) ∂_l g g^{lk} η_k; x-part v = −(1/(2ng)) g⁻¹∇g, y-part −D²u·v
        let w = inv.mul_vec(&dg);
        let c = -1.0 / (2.0 * n as f64 * g);
        let mut v = [0.0; 3];
        for k in 0..n {
            v[k] = c * w[k];
        }
        let hv = hm.mul_vec(&v);
        let mut y = [0.0; 3];
        for k in 0..n {
            y[k] = -hv[k];
        }
        Ok(NullVector { x: v, y })
    }
}

/// H⃗ at a node with at least two layers to the boundary.
pub fn mean_curvature(u: &GridFunction, idx: usize) -> Result<NullVector, McfError> {
    Geometry::new(u).mean_curvature(u.domain(), idx)
}

/// Full frame data at a node.
pub fn immersion_frame(u: &GridFunction, idx: usize) -> Result<ImmersionFrame, McfError> {
    let geo = Geometry::new(u);
    let d = u.domain();
    let h = geo.mean_curvature(d, idx)?;
    let metric = *geo.hess.at(idx);
    let (tangent, normal) = frames(&metric);
    let du = crate::grid::gradient_at(u, idx);
    Ok(ImmersionFrame {
        x: d.point(idx),
        embedding: NullVector { x: d.point(idx), y: du },
        tangent,
        normal,
        metric,
        g: geo.det[idx],
        mean_curvature: h,
    })
}

/// H⃗ at every node with margin ≥ 2 (zero elsewhere); the x-part is the particle velocity.
#[derive(Clone, Debug)]
pub struct CurvatureField {
    pub domain: BoxDomain,
    pub h: Vec<NullVector>,
    /// Central gradient Du per node.
    pub du: Vec<Point>,
    pub hess: Vec<SymMat>,
}

impl CurvatureField {
    pub fn new(u: &GridFunction) -> Result<Self, McfError> {
        let d = *u.domain();
        let geo = Geometry::new(u);
        let h: Result<Vec<NullVector>, McfError> = (0..d.len())
            .into_par_iter()
            .map(|i| {
                if d.boundary_distance(i) < 2 {
                    Ok(NullVector::zero())
                } else {
                    geo.mean_curvature(&d, i)
                }
            })
            .collect();
        Ok(Self {
            domain: d,
            h: h?,
            du: gradient(u).components,
            hess: geo.hess.matrices().to_vec(),
        })
    }

    /// Largest |x_a| at which linear interpolation uses only nodes with margin ≥ 2.
    pub fn reach(&self) -> f64 {
        self.domain.half_width() - 2.0 * self.domain.spacing()
    }

    fn component(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        (0..self.domain.len()).map(f).collect()
    }

    fn inside(&self, p: &Point) -> bool {
        let r = self.reach() + 1e-12;
        (0..self.domain.dim()).all(|a| p[a].abs() <= r)
    }
}

/// Per-snapshot fields as component arrays, ready for interpolation.
struct FieldSet {
    field: CurvatureField,
    vel: Vec<Vec<f64>>,
    hy: Vec<Vec<f64>>,
    du: Vec<Vec<f64>>,
    hess: Vec<Vec<f64>>,
}

impl FieldSet {
    fn new(u: &GridFunction) -> Result<Self, McfError> {
        let field = CurvatureField::new(u)?;
        let n = field.domain.dim();
        let vel = (0..n).map(|a| field.component(|i| field.h[i].x[a])).collect();
        let hy = (0..n).map(|a| field.component(|i| field.h[i].y[a])).collect();
        let du = (0..n).map(|a| field.component(|i| field.du[i][a])).collect();
        let mut hess = vec![];
        for a in 0..n {
            for b in a..n {
                hess.push(field.component(|i| field.hess[i].get(a, b)));
            }
        }
        Ok(Self { field, vel, hy, du, hess })
    }

    fn lin(&self, comps: &[Vec<f64>], p: &Point) -> Point {
        let mut out = [0.0; 3];
        for (a, c) in comps.iter().enumerate() {
            out[a] = interpolate_linear(&self.field.domain, c, p).unwrap_or(f64::NAN);
        }
        out
    }

    fn velocity(&self, p: &Point) -> Point {
        self.lin(&self.vel, p)
    }

    fn curvature(&self, p: &Point) -> NullVector {
        NullVector {
            x: self.velocity(p),
            y: self.lin(&self.hy, p),
        }
    }

    fn gradient(&self, p: &Point) -> Point {
        let mut out = [0.0; 3];
        for (a, c) in self.du.iter().enumerate() {
            out[a] = interpolate_cubic(&self.field.domain, c, p).unwrap_or(f64::NAN);
        }
        out
    }

    fn hessian(&self, p: &Point) -> SymMat {
        let n = self.field.domain.dim();
        let mut m = SymMat::zeros(n);
        let mut k = 0;
        for a in 0..n {
            for b in a..n {
                m.set_sym(a, b, interpolate_linear(&self.field.domain, &self.hess[k], p).unwrap_or(f64::NAN));
                k += 1;
            }
        }
        m
    }
}

/// One particle r(x₀, t) with its image F = (r, Du(r, t)) at every snapshot time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticlePath {
    pub seed: Point,
    pub times: Vec<f64>,
    pub positions: Vec<Point>,
    pub embedding: Vec<NullVector>,
}

/// Integrates dr/dt = −(1/(2ng)) g⁻¹∇g through the snapshot sequence with RK2
/// (midpoint), `substeps` steps per snapshot interval, velocity linear in time
/// between snapshots and bi/trilinear in space.
pub fn integrate_particles(snapshots: &[Snapshot], seeds: &[Point], substeps: usize) -> Result<Vec<ParticlePath>, McfError> {
    if snapshots.len() < 2 {
        return Err(McfError::TooFewSnapshots {
            have: snapshots.len(),
            need: 2,
        });
    }
    let fields: Vec<FieldSet> = snapshots
        .par_iter()
        .map(|s| FieldSet::new(&s.u))
        .collect::<Result<_, _>>()?;
    integrate_with_fields(snapshots, &fields, seeds, substeps.max(1))
}

fn integrate_with_fields(snapshots: &[Snapshot], fields: &[FieldSet], seeds: &[Point], substeps: usize) -> Result<Vec<ParticlePath>, McfError> {
    let n = fields[0].field.domain.dim();
    seeds
        .par_iter()
        .map(|seed| {
            let mut r = *seed;
            let escape = |t: f64, r: Point| McfError::Escape {
                seed: *seed,
                t,
                position: r,
            };
            if !fields[0].field.inside(&r) {
                return Err(escape(snapshots[0].t, r));
            }
            let mut path = ParticlePath {
                seed: *seed,
                times: vec![snapshots[0].t],
                positions: vec![r],
                embedding: vec![NullVector {
                    x: r,
                    y: fields[0].gradient(&r),
                }],
            };
            for k in 0..snapshots.len() - 1 {
                let (t0, t1) = (snapshots[k].t, snapshots[k + 1].t);
                let (f0, f1) = (&fields[k], &fields[k + 1]);
                let vel = |s: f64, p: &Point| -> Point {
                    let (a, b) = (f0.velocity(p), f1.velocity(p));
                    let mut v = [0.0; 3];
                    for c in 0..n {
                        v[c] = (1.0 - s) * a[c] + s * b[c];
                    }
                    v
                };
                let dt = (t1 - t0) / substeps as f64;
                for j in 0..substeps {
                    let s0 = j as f64 / substeps as f64;
                    let sm = (j as f64 + 0.5) / substeps as f64;
                    let k1 = vel(s0, &r);
                    let mut mid = r;
                    for c in 0..n {
                        mid[c] += 0.5 * dt * k1[c];
                    }
                    if !f0.field.inside(&mid) {
                        return Err(escape(t0 + j as f64 * dt, mid));
                    }
                    let k2 = vel(sm, &mid);
                    for c in 0..n {
                        r[c] += dt * k2[c];
                    }
                    if !f0.field.inside(&r) || r.iter().any(|v| !v.is_finite()) {
                        return Err(escape(t0 + (j + 1) as f64 * dt, r));
                    }
                }
                path.times.push(t1);
                path.positions.push(r);
                path.embedding.push(NullVector { x: r, y: f1.gradient(&r) });
            }
            Ok(path)
        })
        .collect()
}

/// Comparison of the finite-difference velocity dF/dt with H⃗ along paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McfReport {
    /// max over paths and interior times of max-abs component of dF/dt − H⃗.
    pub max_deviation: f64,
    /// Largest tangential part Σaᵢeᵢ of dF/dt (max-abs component).
    pub max_tangential: f64,
    /// Largest normal part Σbᵢηᵢ of dF/dt.
    pub max_normal: f64,
    /// Largest |H⃗| seen (max-abs component).
    pub max_curvature: f64,
    pub samples: usize,
    /// (path index, t, deviation) for every sample.
    pub rows: Vec<(usize, f64, f64)>,
}

/// Splits v into Σ aᵢeᵢ + Σ bᵢηᵢ for the frames of `hess`; returns the two parts.
pub fn split_tangent_normal(v: &NullVector, hess: &SymMat) -> Option<(NullVector, NullVector)> {
    let n = hess.dim();
    let inv = hess.inverse()?;
    // x-part = a + b, y-part = D²u (a − b)
    let amb = inv.mul_vec(&v.y);
    let mut a = [0.0; 3];
    let mut b = [0.0; 3];
    for i in 0..n {
        a[i] = 0.5 * (v.x[i] + amb[i]);
        b[i] = 0.5 * (v.x[i] - amb[i]);
    }
    let ha = hess.mul_vec(&a);
    let hb = hess.mul_vec(&b);
    let mut t = NullVector { x: a, y: ha };
    let mut nn = NullVector { x: b, y: [0.0; 3] };
    for i in 0..n {
        nn.y[i] = -hb[i];
    }
    for i in n..3 {
        t.y[i] = 0.0;
    }
    Some((t, nn))
}

/// Compares dF/dt (three-point difference in time) against H⃗ at r(x₀, t_k) for every
/// path and every snapshot with two neighbours.
pub fn verify_mcf(paths: &[ParticlePath], snapshots: &[Snapshot]) -> Result<McfReport, McfError> {
    if snapshots.len() < 3 {
        return Err(McfError::TooFewSnapshots {
            have: snapshots.len(),
            need: 3,
        });
    }
    let fields: Vec<FieldSet> = snapshots[1..snapshots.len() - 1]
        .par_iter()
        .map(|s| FieldSet::new(&s.u))
        .collect::<Result<_, _>>()?;
    Ok(verify_with_fields(paths, snapshots, &fields))
}

fn verify_with_fields(paths: &[ParticlePath], snapshots: &[Snapshot], inner: &[FieldSet]) -> McfReport {
    let mut report = McfReport {
        max_deviation: 0.0,
        max_tangential: 0.0,
        max_normal: 0.0,
        max_curvature: 0.0,
        samples: 0,
        rows: vec![],
    };
    for (p, path) in paths.iter().enumerate() {
        for k in 1..path.times.len().min(snapshots.len()) - 1 {
            let (ta, tb, tc) = (path.times[k - 1], path.times[k], path.times[k + 1]);
            let (h1, h2) = (tb - ta, tc - tb);
            let wa = -h2 / (h1 * (h1 + h2));
            let wb = (h2 - h1) / (h1 * h2);
            let wc = h1 / (h2 * (h1 + h2));
            let (fa, fb, fc) = (&path.embedding[k - 1], &path.embedding[k], &path.embedding[k + 1]);
            let mut dfdt = NullVector::zero();
            for a in 0..3 {
                dfdt.x[a] = wa * fa.x[a] + wb * fb.x[a] + wc * fc.x[a];
                dfdt.y[a] = wa * fa.y[a] + wb * fb.y[a] + wc * fc.y[a];
            }
            let f = &inner[k - 1];
            let r = path.positions[k];
            let h = f.curvature(&r);
            let dev = dfdt.sub(&h).max_abs();
            if let Some((t, nrm)) = split_tangent_normal(&dfdt, &f.hessian(&r)) {
                report.max_tangential = report.max_tangential.max(t.max_abs());
                report.max_normal = report.max_normal.max(nrm.max_abs());
            }
            report.max_curvature = report.max_curvature.max(h.max_abs());
            report.max_deviation = report.max_deviation.max(dev);
            report.samples += 1;
            report.rows.push((p, tb, dev));
        }
    }
    report
}

/// Smallest distance between two paths at snapshot index `k`.
pub fn min_pairwise_distance(paths: &[ParticlePath], k: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..paths.len() {
        for j in i + 1..paths.len() {
            let (a, b) = (paths[i].positions[k], paths[j].positions[k]);
            let d = (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Seeds on a regular s×…×s lattice filling the centred cube of half width `half`.
pub fn seed_lattice(n: usize, per_axis: usize, half: f64) -> Vec<Point> {
    let coords: Vec<f64> = if per_axis == 1 {
        vec![0.0]
    } else {
        (0..per_axis)
            .map(|k| -half + 2.0 * half * k as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut k| {
            let mut p = [0.0; 3];
            for a in (0..n).rev() {
                p[a] = coords[k % per_axis];
                k /= per_axis;
            }
            p
        })
        .collect()
}

/// Path rows as CSV: path, t, r…, F_x…, F_y…, deviation (empty where undefined).
pub fn paths_csv(paths: &[ParticlePath], report: Option<&McfReport>, n: usize) -> String {
    let mut out = String::from("path,t");
    for a in 0..n {
        out.push_str(&format!(",r{a}"));
    }
    for a in 0..n {
        out.push_str(&format!(",Fx{a}"));
    }
    for a in 0..n {
        out.push_str(&format!(",Fy{a}"));
    }
    out.push_str(",deviation\n");
    for (p, path) in paths.iter().enumerate() {
        for k in 0..path.times.len() {
            out.push_str(&format!("{p},{:.17e}", path.times[k]));
            for a in 0..n {
                out.push_str(&format!(",{:.17e}", path.positions[k][a]));
            }
            for a in 0..n {
                out.push_str(&format!(",{:.17e}", path.embedding[k].x[a]));
            }
            for a in 0..n {
                out.push_str(&format!(",{:.17e}", path.embedding[k].y[a]));
            }
            let dev = report.and_then(|r| r.rows.iter().find(|row| row.0 == p && row.1 == path.times[k]).map(|row| row.2));
            match dev {
                Some(v) => out.push_str(&format!(",{v:.17e}\n")),
                None => out.push_str(",\n"),
            }
        }
    }
    out
}
