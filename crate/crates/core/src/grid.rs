//! Uniform box grids in ℝⁿ (n ≤ 3), sampled scalar fields, and the
//! finite-difference operators every other module builds on.
//!
//! Node values are stored row-major: the last axis varies fastest. Derivative
//! stencils are second-order central in the interior and second-order one-sided
//! on the outermost layer. Monitored norms skip the outer layer plus
//! `interior_margin` further layers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::SymMat;

/// A point in ℝⁿ padded with zeros to three components.
pub type Point = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    BadDimension(usize),
    #[error("points per axis must be at least 5 (got {0})")]
    TooFewPoints(usize),
    #[error("half width must be positive and finite (got {0})")]
    BadHalfWidth(f64),
    #[error("expected {expected} node values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value {value} at node {node}")]
    NonFinite { node: usize, value: f64 },
    #[error("derivative order {0} is not supported (1..=4)")]
    UnsupportedOrder(usize),
}

/// Loss of strict convexity detected while evaluating ln det D²u.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("strict convexity lost at node {node} (x = {point:?}): det = {det:e}, λ_min = {lambda_min:e}")]
pub struct NonConvexityError {
    pub node: usize,
    pub point: Point,
    pub det: f64,
    pub lambda_min: f64,
}

/// The box [−L, L]ⁿ sampled with m points per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    n: usize,
    half_width: f64,
    points_per_axis: usize,
    interior_margin: usize,
}

impl BoxDomain {
    pub fn new(n: usize, half_width: f64, points_per_axis: usize) -> Result<Self, GridError> {
        if !(1..=3).contains(&n) {
            return Err(GridError::BadDimension(n));
        }
        if points_per_axis < 5 {
            return Err(GridError::TooFewPoints(points_per_axis));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(GridError::BadHalfWidth(half_width));
        }
        Ok(Self {
            n,
            half_width,
            points_per_axis,
            interior_margin: 0,
        })
    }

    pub fn with_interior_margin(mut self, layers: usize) -> Self {
        self.interior_margin = layers;
        self
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    #[inline]
    pub fn points_per_axis(&self) -> usize {
        self.points_per_axis
    }

    #[inline]
    pub fn interior_margin(&self) -> usize {
        self.interior_margin
    }

    #[inline]
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.points_per_axis - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.points_per_axis.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.points_per_axis.pow((self.n - 1 - axis) as u32)
    }

    #[inline]
    pub fn multi_index(&self, mut idx: usize) -> [usize; 3] {
        let m = self.points_per_axis;
        let mut out = [0; 3];
        for axis in (0..self.n).rev() {
            out[axis] = idx % m;
            idx /= m;
        }
        out
    }

    #[inline]
    pub fn flat_index(&self, multi: &[usize; 3]) -> usize {
        (0..self.n).fold(0, |acc, a| acc * self.points_per_axis + multi[a])
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    #[inline]
    pub fn point(&self, idx: usize) -> Point {
        let mi = self.multi_index(idx);
        let mut p = [0.0; 3];
        for a in 0..self.n {
            p[a] = self.coord(mi[a]);
        }
        p
    }

    /// Number of layers between a node and the nearest face (0 on the boundary).
    #[inline]
    pub fn boundary_distance(&self, idx: usize) -> usize {
        let mi = self.multi_index(idx);
        (0..self.n)
            .map(|a| mi[a].min(self.points_per_axis - 1 - mi[a]))
            .min()
            .unwrap_or(0)
    }

    /// Layers excluded from monitored norms: the boundary plus `interior_margin`.
    #[inline]
    pub fn monitored_margin(&self) -> usize {
        1 + self.interior_margin
    }

    pub fn nodes_with_margin(&self, margin: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.boundary_distance(i) >= margin)
    }

    pub fn monitored_nodes(&self) -> Vec<usize> {
        self.nodes_with_margin(self.monitored_margin()).collect()
    }

    pub fn contains(&self, p: &Point) -> bool {
        let tol = 1e-12 * self.half_width;
        (0..self.n).all(|a| p[a].abs() <= self.half_width + tol)
    }

    /// Continuous grid coordinate of `x` along an axis (node i sits at i).
    #[inline]
    pub fn fractional_index(&self, x: f64) -> f64 {
        (x + self.half_width) / self.spacing()
    }
}

/// Scalar field sampled at every node of a `BoxDomain`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    domain: BoxDomain,
    values: Vec<f64>,
    label: String,
}

impl GridFunction {
    pub fn new(domain: BoxDomain, values: Vec<f64>, label: impl Into<String>) -> Result<Self, GridError> {
        if values.len() != domain.len() {
            return Err(GridError::LengthMismatch {
                expected: domain.len(),
                got: values.len(),
            });
        }
        if let Some((node, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(GridError::NonFinite { node, value });
        }
        Ok(Self {
            domain,
            values,
            label: label.into(),
        })
    }

    /// Samples `f` at every node. Panics if `f` returns a non-finite value.
    pub fn from_fn<F>(domain: BoxDomain, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&Point) -> f64 + Sync,
    {
        let values: Vec<f64> = (0..domain.len())
            .into_par_iter()
            .map(|i| f(&domain.point(i)))
            .collect();
        Self::new(domain, values, label).expect("sampled function must be finite")
    }

    pub(crate) fn from_raw(domain: BoxDomain, values: Vec<f64>, label: impl Into<String>) -> Self {
        debug_assert_eq!(values.len(), domain.len());
        Self {
            domain,
            values,
            label: label.into(),
        }
    }

    #[inline]
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Sup-norm of `self − other` over nodes at least `margin` layers inside.
    pub fn sup_diff(&self, other: &GridFunction, margin: usize) -> f64 {
        assert_eq!(self.domain.len(), other.domain.len());
        self.domain
            .nodes_with_margin(margin)
            .map(|i| (self.values[i] - other.values[i]).abs())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self, margin: usize) -> f64 {
        self.domain
            .nodes_with_margin(margin)
            .map(|i| self.values[i].abs())
            .fold(0.0, f64::max)
    }

    /// Tensor-product cubic interpolation; `None` outside the box.
    pub fn sample(&self, p: &Point) -> Option<f64> {
        interpolate_cubic(&self.domain, &self.values, p)
    }
}

/// Vector field (one `Point` per node).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub domain: BoxDomain,
    pub components: Vec<Point>,
}

impl VectorField {
    pub fn at(&self, idx: usize) -> Point {
        self.components[idx]
    }

    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.components.iter().map(|c| c[axis]).collect()
    }
}

// ---------------------------------------------------------------------------
// 1D stencils

/// Second-order first-derivative weights at position `i` of an axis with `m` points.
#[inline]
fn first_diff_weights(i: usize, m: usize, h: f64) -> [(isize, f64); 3] {
    let c = 1.0 / (2.0 * h);
    if i == 0 {
        [(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
    } else if i == m - 1 {
        [(0, 3.0 * c), (-1, -4.0 * c), (-2, c)]
    } else {
        [(-1, -c), (0, 0.0), (1, c)]
    }
}

/// Second-order second-derivative weights.
#[inline]
fn second_diff_weights(i: usize, m: usize, h: f64) -> [(isize, f64); 4] {
    let c = 1.0 / (h * h);
    if i == 0 {
        [(0, 2.0 * c), (1, -5.0 * c), (2, 4.0 * c), (3, -c)]
    } else if i == m - 1 {
        [(0, 2.0 * c), (-1, -5.0 * c), (-2, 4.0 * c), (-3, -c)]
    } else {
        [(-1, c), (0, -2.0 * c), (1, c), (0, 0.0)]
    }
}

/// Central stencil of order `k` (1..=4), second-order accurate. Offsets are symmetric.
fn central_weights(k: usize, h: f64) -> Vec<(isize, f64)> {
    match k {
        0 => vec![(0, 1.0)],
        1 => vec![(-1, -0.5 / h), (1, 0.5 / h)],
        2 => {
            let c = 1.0 / (h * h);
            vec![(-1, c), (0, -2.0 * c), (1, c)]
        }
        3 => {
            let c = 1.0 / (h * h * h);
            vec![(-2, -0.5 * c), (-1, c), (1, -c), (2, 0.5 * c)]
        }
        4 => {
            let c = 1.0 / (h * h * h * h);
            vec![(-2, c), (-1, -4.0 * c), (0, 6.0 * c), (1, -4.0 * c), (2, c)]
        }
        _ => unreachable!("order checked by caller"),
    }
}

#[inline]
fn offset(idx: usize, stride: usize, k: isize) -> usize {
    (idx as isize + k * stride as isize) as usize
}

// ---------------------------------------------------------------------------
// Derivatives

/// ∂u/∂x_axis at one node.
#[inline]
pub fn partial_at(u: &GridFunction, idx: usize, axis: usize) -> f64 {
    partial_values_at(&u.domain, &u.values, idx, axis)
}

#[inline]
pub(crate) fn partial_values_at(d: &BoxDomain, values: &[f64], idx: usize, axis: usize) -> f64 {
    let m = d.points_per_axis;
    let i = d.multi_index(idx)[axis];
    let s = d.stride(axis);
    first_diff_weights(i, m, d.spacing())
        .iter()
        .map(|&(k, w)| w * values[offset(idx, s, k)])
        .sum()
}

/// Du at one node.
pub fn gradient_at(u: &GridFunction, idx: usize) -> Point {
    let mut g = [0.0; 3];
    for (a, ga) in g.iter_mut().enumerate().take(u.domain.n) {
        *ga = partial_at(u, idx, a);
    }
    g
}

/// Du at every node: central differences inside, one-sided second order on the boundary.
pub fn gradient(u: &GridFunction) -> VectorField {
    let components = (0..u.domain.len())
        .into_par_iter()
        .map(|i| gradient_at(u, i))
        .collect();
    VectorField {
        domain: u.domain,
        components,
    }
}

/// D²u at one node. Mixed entries are computed once and mirrored, so the result is
/// bit-symmetric.
pub fn hessian_at(u: &GridFunction, idx: usize) -> SymMat {
    hessian_values_at(&u.domain, &u.values, idx)
}

pub(crate) fn hessian_values_at(d: &BoxDomain, values: &[f64], idx: usize) -> SymMat {
    let n = d.n;
    let m = d.points_per_axis;
    let h = d.spacing();
    let mi = d.multi_index(idx);
    let mut hm = SymMat::zeros(n);
    for a in 0..n {
        let s = d.stride(a);
        let v: f64 = second_diff_weights(mi[a], m, h)
            .iter()
            .map(|&(k, w)| w * values[offset(idx, s, k)])
            .sum();
        hm.set_sym(a, a, v);
        for b in a + 1..n {
            let sb = d.stride(b);
            let wa = first_diff_weights(mi[a], m, h);
            let wb = first_diff_weights(mi[b], m, h);
            let mut acc = 0.0;
            for &(ka, ca) in &wa {
                if ca == 0.0 {
                    continue;
                }
                let ia = offset(idx, s, ka);
                for &(kb, cb) in &wb {
                    if cb == 0.0 {
                        continue;
                    }
                    acc += ca * cb * values[offset(ia, sb, kb)];
                }
            }
            hm.set_sym(a, b, acc);
        }
    }
    hm
}

/// Per-node Hessians with eigenvalue bounds.
#[derive(Clone, Debug)]
pub struct HessianField {
    domain: BoxDomain,
    matrices: Vec<SymMat>,
    eigen: Vec<(f64, f64)>,
    bounds: (f64, f64),
}

impl HessianField {
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn at(&self, idx: usize) -> &SymMat {
        &self.matrices[idx]
    }

    pub fn matrices(&self) -> &[SymMat] {
        &self.matrices
    }

    /// (λ_min, λ_max) at one node.
    pub fn eigen_at(&self, idx: usize) -> (f64, f64) {
        self.eigen[idx]
    }

    /// Global (λ_min*, λ_max*) over monitored nodes.
    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// Builds a field from explicit matrices (all nodes), computing eigen data.
    pub fn from_matrices(domain: BoxDomain, matrices: Vec<SymMat>) -> Self {
        assert_eq!(matrices.len(), domain.len());
        let eigen: Vec<(f64, f64)> = matrices.par_iter().map(|m| m.eigen_bounds()).collect();
        let bounds = domain
            .nodes_with_margin(domain.monitored_margin())
            .map(|i| eigen[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            });
        Self {
            domain,
            matrices,
            eigen,
            bounds,
        }
    }
}

pub fn hessian(u: &GridFunction) -> HessianField {
    let matrices: Vec<SymMat> = (0..u.domain.len())
        .into_par_iter()
        .map(|i| hessian_at(u, i))
        .collect();
    HessianField::from_matrices(u.domain, matrices)
}

/// Global extremal eigenvalues over the monitored interior.
pub fn hessian_eigen_bounds(h: &HessianField) -> (f64, f64) {
    h.bounds()
}

fn multi_indices(n: usize, order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..=order {
        for b in 0..=order - a {
            let c = order - a - b;
            let alpha = [a, b, c];
            if (n < 3 && c != 0) || (n < 2 && b != 0) {
                continue;
            }
            out.push(alpha);
        }
    }
    out
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// ∂^α u at `idx` by tensor products of central stencils.
fn mixed_partial(u: &GridFunction, idx: usize, alpha: &[usize; 3]) -> f64 {
    let d = &u.domain;
    let h = d.spacing();
    let mut terms: Vec<(usize, f64)> = vec![(idx, 1.0)];
    for a in 0..d.n {
        if alpha[a] == 0 {
            continue;
        }
        let s = d.stride(a);
        let w = central_weights(alpha[a], h);
        terms = terms
            .iter()
            .flat_map(|&(i, c)| w.iter().map(move |&(k, wk)| (offset(i, s, k), c * wk)))
            .collect();
    }
    terms.iter().map(|&(i, c)| c * u.values[i]).sum()
}

/// Frobenius norm of the order-`l` derivative tensor at one node.
pub fn derivative_tensor_norm_at(u: &GridFunction, idx: usize, order: usize) -> f64 {
    let n = u.domain.n;
    let lf = factorial(order);
    multi_indices(n, order)
        .iter()
        .map(|alpha| {
            let mult = lf / alpha.iter().map(|&k| factorial(k)).product::<f64>();
            let v = mixed_partial(u, idx, alpha);
            mult * v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// sup over monitored nodes of |Dˡu| (Frobenius), for l in 1..=4.
pub fn derivative_norm(u: &GridFunction, order: usize) -> Result<f64, GridError> {
    if !(1..=4).contains(&order) {
        return Err(GridError::UnsupportedOrder(order));
    }
    let margin = u.domain.monitored_margin().max(order.div_ceil(2));
    let nodes: Vec<usize> = u.domain.nodes_with_margin(margin).collect();
    Ok(nodes
        .par_iter()
        .map(|&i| derivative_tensor_norm_at(u, i, order))
        .reduce(|| 0.0, f64::max))
}

/// sup over monitored nodes of the Frobenius norm of D³u.
pub fn third_derivative_norm(u: &GridFunction) -> f64 {
    derivative_norm(u, 3).expect("order 3 supported")
}

/// Nodewise (1/n) ln det D²u on interior nodes; boundary nodes are left at zero
/// for the caller's boundary model to fill.
pub fn log_det_hessian(u: &GridFunction) -> Result<GridFunction, NonConvexityError> {
    let d = u.domain;
    let n = d.n as f64;
    let values: Result<Vec<f64>, NonConvexityError> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            if d.boundary_distance(i) == 0 {
                return Ok(0.0);
            }
            let hm = hessian_at(u, i);
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
            Ok(det.ln() / n)
        })
        .collect();
    Ok(GridFunction::from_raw(d, values?, format!("logdet({})", u.label)))
}

// ---------------------------------------------------------------------------
// Interpolation

/// 4-point Lagrange weights at fractional position `s ∈ [0, 1]` relative to the second node.
#[inline]
fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

/// Tensor-product cubic interpolation of node values; `None` outside the box.
pub fn interpolate_cubic(d: &BoxDomain, values: &[f64], p: &Point) -> Option<f64> {
    if !d.contains(p) {
        return None;
    }
    let m = d.points_per_axis;
    let mut base = [0usize; 3];
    let mut weights = [[0.0; 4]; 3];
    for a in 0..d.n {
        let f = d.fractional_index(p[a]).clamp(0.0, (m - 1) as f64);
        let cell = (f.floor() as usize).clamp(1, m - 3);
        base[a] = cell - 1;
        weights[a] = cubic_weights(f - cell as f64);
    }
    Some(tensor_sum(d, values, &base, &weights, 4))
}

/// Multilinear interpolation; `None` outside the box.
pub fn interpolate_linear(d: &BoxDomain, values: &[f64], p: &Point) -> Option<f64> {
    if !d.contains(p) {
        return None;
    }
    let m = d.points_per_axis;
    let mut base = [0usize; 3];
    let mut weights = [[0.0; 4]; 3];
    for a in 0..d.n {
        let f = d.fractional_index(p[a]).clamp(0.0, (m - 1) as f64);
        let cell = (f.floor() as usize).min(m - 2);
        let s = f - cell as f64;
        base[a] = cell;
        weights[a] = [1.0 - s, s, 0.0, 0.0];
    }
    Some(tensor_sum(d, values, &base, &weights, 2))
}

fn tensor_sum(d: &BoxDomain, values: &[f64], base: &[usize; 3], w: &[[f64; 4]; 3], k: usize) -> f64 {
    let n = d.n;
    let kk = [k, if n > 1 { k } else { 1 }, if n > 2 { k } else { 1 }];
    let mut acc = 0.0;
    for i0 in 0..kk[0] {
        for i1 in 0..kk[1] {
            for i2 in 0..kk[2] {
                let offs = [i0, i1, i2];
                let mut mi = [0usize; 3];
                let mut wt = 1.0;
                for a in 0..n {
                    mi[a] = base[a] + offs[a];
                    wt *= w[a][offs[a]];
                }
                acc += wt * values[d.flat_index(&mi)];
            }
        }
    }
    acc
}
