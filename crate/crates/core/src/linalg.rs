//! Small dense symmetric matrices (n ≤ 3) and a banded LU factorization.
//!
//! Every Hessian in this crate lives in `SymMat`: a fixed 3×3 buffer of which
//! only the leading `n × n` block is meaningful.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Symmetric matrix of dimension 1, 2 or 3. Serializes as a list of rows.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct SymMat {
    n: usize,
    a: [[f64; 3]; 3],
}

impl fmt::Debug for SymMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.n).map(|i| &self.a[i][..self.n]).collect();
        f.debug_tuple("SymMat").field(&rows).finish()
    }
}

impl From<SymMat> for Vec<Vec<f64>> {
    fn from(m: SymMat) -> Self {
        m.rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SymMat {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, String> {
        SymMat::from_rows(&rows).ok_or_else(|| "expected a symmetric 1×1, 2×2 or 3×3 matrix".to_string())
    }
}

impl SymMat {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=3).contains(&n), "SymMat dimension must be 1..=3, got {n}");
        Self { n, a: [[0.0; 3]; 3] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i][i] = s;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            m.a[i][i] = v;
        }
        m
    }

    /// Builds from row slices; returns `None` unless the rows form a symmetric square matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Option<Self> {
        let n = rows.len();
        if !(1..=3).contains(&n) || rows.iter().any(|r| r.as_ref().len() != n) {
            return None;
        }
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let (aij, aji) = (rows[i].as_ref()[j], rows[j].as_ref()[i]);
                let scale = aij.abs().max(aji.abs()).max(1.0);
                if (aij - aji).abs() > 1e-12 * scale {
                    return None;
                }
                m.a[i][j] = aij;
            }
        }
        Some(m)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i][j]
    }

    /// Sets entries (i, j) and (j, i) to the same bits.
    #[inline]
    pub fn set_sym(&mut self, i: usize, j: usize, v: f64) {
        self.a[i][j] = v;
        self.a[j][i] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.a[i][..self.n].to_vec()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i][i]).sum()
    }

    pub fn det(&self) -> f64 {
        let a = &self.a;
        match self.n {
            1 => a[0][0],
            2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
            _ => {
                a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                    - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                    + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
            }
        }
    }

    /// Adjugate (transpose of the cofactor matrix). Symmetric for symmetric input.
    pub fn adjugate(&self) -> SymMat {
        let a = &self.a;
        let mut m = SymMat::zeros(self.n);
        match self.n {
            1 => m.a[0][0] = 1.0,
            2 => {
                m.a[0][0] = a[1][1];
                m.a[1][1] = a[0][0];
                m.set_sym(0, 1, -a[0][1]);
            }
            _ => {
                m.a[0][0] = a[1][1] * a[2][2] - a[1][2] * a[1][2];
                m.a[1][1] = a[0][0] * a[2][2] - a[0][2] * a[0][2];
                m.a[2][2] = a[0][0] * a[1][1] - a[0][1] * a[0][1];
                m.set_sym(0, 1, a[0][2] * a[1][2] - a[0][1] * a[2][2]);
                m.set_sym(0, 2, a[0][1] * a[1][2] - a[0][2] * a[1][1]);
                m.set_sym(1, 2, a[0][1] * a[0][2] - a[0][0] * a[1][2]);
            }
        }
        m
    }

    pub fn inverse(&self) -> Option<SymMat> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        let mut adj = self.adjugate();
        for i in 0..self.n {
            for j in 0..self.n {
                adj.a[i][j] /= d;
            }
        }
        Some(adj)
    }

    pub fn mul_vec(&self, x: &[f64; 3]) -> [f64; 3] {
        let mut y = [0.0; 3];
        for i in 0..self.n {
            y[i] = (0..self.n).map(|j| self.a[i][j] * x[j]).sum();
        }
        y
    }

    pub fn quad_form(&self, x: &[f64; 3]) -> f64 {
        let y = self.mul_vec(x);
        (0..self.n).map(|i| x[i] * y[i]).sum()
    }

    /// General (not necessarily symmetric) product, returned as a raw 3×3 block.
    pub fn mat_mul(&self, other: &SymMat) -> [[f64; 3]; 3] {
        let n = self.n;
        let mut c = [[0.0; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                c[i][j] = (0..n).map(|k| self.a[i][k] * other.a[k][j]).sum();
            }
        }
        c
    }

    pub fn scale(&self, s: f64) -> SymMat {
        let mut m = *self;
        for row in m.a.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        m
    }

    pub fn add(&self, other: &SymMat) -> SymMat {
        assert_eq!(self.n, other.n);
        let mut m = *self;
        for i in 0..3 {
            for j in 0..3 {
                m.a[i][j] += other.a[i][j];
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().flatten().all(|v| v.is_finite())
    }

    /// Eigenvalues in ascending order; entries past `dim()` are zero.
    pub fn eigenvalues(&self) -> [f64; 3] {
        let a = &self.a;
        match self.n {
            1 => [a[0][0], 0.0, 0.0],
            2 => {
                let mean = 0.5 * (a[0][0] + a[1][1]);
                let half_diff = 0.5 * (a[0][0] - a[1][1]);
                let r = half_diff.hypot(a[0][1]);
                [mean - r, mean + r, 0.0]
            }
            _ => {
                let mut ev = jacobi_eigenvalues(a);
                ev.sort_by(|x, y| x.total_cmp(y));
                ev
            }
        }
    }

    /// (λ_min, λ_max).
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let ev = self.eigenvalues();
        (ev[0], ev[self.n - 1])
    }
}

/// Cyclic Jacobi rotations on a symmetric 3×3 matrix.
fn jacobi_eigenvalues(input: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut a = *input;
    let norm: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return [0.0; 3];
    }
    for _sweep in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off.sqrt() <= 1e-17 * norm {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
        }
    }
    [a[0][0], a[1][1], a[2][2]]
}

/// Square band matrix stored by diagonals, with room for pivoting fill-in.
///
/// Entry (i, j) is nonzero only for `i - lower <= j <= i + upper`.
#[derive(Clone, Debug)]
pub struct BandMatrix {
    size: usize,
    lower: usize,
    upper: usize,
    /// Row-major: row i holds columns i-lower ..= i+lower+upper (extra `lower` for fill).
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(size: usize, lower: usize, upper: usize) -> Self {
        let width = 2 * lower + upper + 1;
        Self {
            size,
            lower,
            upper,
            data: vec![0.0; size * width],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    fn width(&self) -> usize {
        2 * self.lower + self.upper + 1
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        // column j sits at offset j + lower - i within row i
        i * self.width() + (j + self.lower - i)
    }

    /// Accumulates `v` into (i, j). Panics if (i, j) lies outside the declared band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.lower >= i && j <= i + self.upper,
            "entry ({i}, {j}) outside band (lower {}, upper {})",
            self.lower,
            self.upper
        );
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.lower < i || j > i + self.lower + self.upper {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|i| {
                let lo = i.saturating_sub(self.lower);
                let hi = (i + self.upper).min(self.size - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting, consuming the matrix.
    /// Returns `None` if a zero pivot is met.
    pub fn solve(mut self, b: &[f64]) -> Option<Vec<f64>> {
        let n = self.size;
        assert_eq!(b.len(), n);
        let mut rhs = b.to_vec();
        let kl = self.lower;
        let ku_fill = self.lower + self.upper;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut piv = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            let last_col = (k + ku_fill).min(n - 1);
            if piv != k {
                for j in k..=last_col {
                    let (sa, sb) = (self.slot(k, j), self.slot(piv, j));
                    self.data.swap(sa, sb);
                }
                rhs.swap(k, piv);
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let si = self.slot(i, k);
                let f = self.data[si] / pivot;
                if f == 0.0 {
                    continue;
                }
                self.data[si] = 0.0;
                for j in k + 1..=last_col {
                    let skj = self.slot(k, j);
                    let sij = self.slot(i, j);
                    self.data[sij] -= f * self.data[skj];
                }
                rhs[i] -= f * rhs[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let last_col = (k + ku_fill).min(n - 1);
            let mut acc = rhs[k];
            for j in k + 1..=last_col {
                acc -= self.get(k, j) * x[j];
            }
            x[k] = acc / self.get(k, k);
        }
        Some(x)
    }
}

/// Dense Gaussian elimination with partial pivoting for small systems.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k] == 0.0 || !a[piv][k].is_finite() {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

/// Least-squares coefficients for rows of `basis` against `target` (normal equations).
pub fn least_squares(basis: &[Vec<f64>], target: &[f64]) -> Option<Vec<f64>> {
    let k = basis.first()?.len();
    let mut ata = vec![vec![0.0; k]; k];
    let mut atb = vec![0.0; k];
    for (row, &y) in basis.iter().zip(target) {
        for i in 0..k {
            atb[i] += row[i] * y;
            for j in 0..k {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    solve_dense(ata, atb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_and_inverse_of_2x2() {
        let m = SymMat::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(m.det(), 3.0);
        let inv = m.inverse().unwrap();
        let p = m.mat_mul(&inv);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((p[i][j] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn eigen_bounds_small_cases() {
        assert_eq!(SymMat::identity(2).eigen_bounds(), (1.0, 1.0));
        assert_eq!(SymMat::diag(&[2.0, 0.5]).eigen_bounds(), (0.5, 2.0));
        let m = SymMat::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let (lo, hi) = m.eigen_bounds();
        assert!((lo - 1.0).abs() < 1e-15 && (hi - 3.0).abs() < 1e-15);
    }

    #[test]
    fn jacobi_on_known_3x3() {
        // eigenvalues 2 - √2, 2, 2 + √2
        let m = SymMat::from_rows(&[[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]]).unwrap();
        let ev = m.eigenvalues();
        let s = 2f64.sqrt();
        assert!((ev[0] - (2.0 - s)).abs() < 1e-14);
        assert!((ev[1] - 2.0).abs() < 1e-14);
        assert!((ev[2] - (2.0 + s)).abs() < 1e-14);
    }

    #[test]
    fn from_rows_rejects_asymmetric() {
        assert!(SymMat::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).is_none());
    }

    #[test]
    fn band_solve_matches_dense_tridiagonal() {
        let n = 7;
        let mut a = BandMatrix::zeros(n, 1, 1);
        for i in 0..n {
            a.add(i, i, 2.0 + i as f64 * 0.1);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                a.add(i, i + 1, -0.7);
            }
        }
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.mul_vec(&x_true);
        let x = a.solve(&b).unwrap();
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn band_solve_needs_pivoting() {
        // zero on the diagonal forces a row swap
        let mut a = BandMatrix::zeros(3, 1, 1);
        a.add(0, 1, 1.0);
        a.add(1, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 2, 1.0);
        a.add(2, 1, 1.0);
        a.add(2, 2, 3.0);
        let x_true = [1.0, -2.0, 0.5];
        let b = a.mul_vec(&x_true);
        let x = a.solve(&b).unwrap();
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}
