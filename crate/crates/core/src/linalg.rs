//! Sparse complex linear systems: CSR storage, a banded LU for the
//! structured-grid operators, and Jacobi-preconditioned BiCGSTAB for systems
//! whose band is too wide to factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{C64, ZERO};

#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<C64>,
}

impl CsrMatrix {
    /// Builds a matrix from per-row `(col, value)` lists; duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, C64)>>) -> CsrMatrix {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in row {
                if cols.len() > start && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, C64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.cols[k], self.vals[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.row(i).find(|e| e.0 == j).map(|e| e.1).unwrap_or(ZERO)
    }

    pub fn mul_vec(&self, x: &[C64]) -> Vec<C64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// Largest distance of a stored entry from the diagonal.
    pub fn half_bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    pub fn max_row_sum(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// True if the sparsity pattern is structurally symmetric.
    pub fn pattern_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.row(i)
                .all(|(j, _)| self.row(j).any(|(k, _)| k == i))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    #[default]
    Auto,
    Direct,
    Krylov,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub method: SolverMethod,
    /// Absolute tolerance on the Jacobi-preconditioned residual.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest band storage (in complex entries) handed to the direct solver
    /// when `method` is `auto`.
    pub direct_band_limit: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            method: SolverMethod::Auto,
            tolerance: 1e-12,
            max_iterations: 20_000,
            direct_band_limit: 16_000_000,
        }
    }
}

/// LU factors of a band matrix, computed without pivoting.
///
/// The grid operators handled here have a positive-definite Hermitian part
/// (or close to it), for which elimination without pivoting is stable. A
/// vanishing pivot is reported as a singular operator.
#[derive(Clone, Debug)]
pub struct BandLu {
    n: usize,
    bw: usize,
    // row i holds columns i-bw ..= i+bw at offsets 0..=2bw
    data: Vec<C64>,
}

impl BandLu {
    pub fn factor(a: &CsrMatrix) -> Result<BandLu> {
        let n = a.n;
        let bw = a.half_bandwidth();
        let width = 2 * bw + 1;
        let mut data = vec![ZERO; n * width];
        let mut row_scale = vec![0.0f64; n];
        for i in 0..n {
            for (j, v) in a.row(i) {
                data[i * width + (j + bw - i)] = v;
                row_scale[i] = row_scale[i].max(v.norm());
            }
        }
        for k in 0..n {
            let pivot = data[k * width + bw];
            if pivot.norm() <= 1e-12 * row_scale[k].max(f64::MIN_POSITIVE) {
                return Err(Error::Singular {
                    row: k,
                    pivot: pivot.norm(),
                });
            }
            let inv = pivot.inv();
            let last = (k + bw).min(n - 1);
            for i in k + 1..=last {
                let off_ik = k + bw - i;
                let l = data[i * width + off_ik];
                if l == ZERO {
                    continue;
                }
                let l = l * inv;
                data[i * width + off_ik] = l;
                for j in k + 1..=last {
                    let u = data[k * width + (j + bw - k)];
                    if u != ZERO {
                        data[i * width + (j + bw - i)] -= l * u;
                    }
                }
            }
        }
        Ok(BandLu { n, bw, data })
    }

    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let (n, bw) = (self.n, self.bw);
        let width = 2 * bw + 1;
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for j in lo..i {
                s -= self.data[i * width + (j + bw - i)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= self.data[i * width + (j + bw - i)] * x[j];
            }
            x[i] = s / self.data[i * width + bw];
        }
        x
    }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm_inf(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Jacobi-preconditioned BiCGSTAB. Returns the solution and iteration count.
pub fn bicgstab(a: &CsrMatrix, b: &[C64], settings: &SolverSettings) -> Result<(Vec<C64>, usize)> {
    let n = a.n;
    let dinv: Vec<C64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d == ZERO {
                C64::new(1.0, 0.0)
            } else {
                d.inv()
            }
        })
        .collect();
    let precond = |v: &[C64]| -> Vec<C64> { v.iter().zip(&dinv).map(|(x, d)| x * d).collect() };
    let mut x = vec![ZERO; n];
    let mut r = b.to_vec();
    if norm_inf(&precond(&r)) <= settings.tolerance {
        return Ok((x, 0));
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (C64::new(1.0, 0.0), C64::new(1.0, 0.0), C64::new(1.0, 0.0));
    let mut v = vec![ZERO; n];
    let mut p = vec![ZERO; n];
    for it in 1..=settings.max_iterations {
        let rho_new = dot(&r0, &r);
        if rho_new.norm() == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        v = a.mul_vec(&ph);
        alpha = rho / dot(&r0, &v);
        let s: Vec<C64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let sh = precond(&s);
        if norm_inf(&sh) <= settings.tolerance {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            return Ok((x, it));
        }
        let t = a.mul_vec(&sh);
        let tt = dot(&t, &t);
        omega = if tt.norm() == 0.0 { ZERO } else { dot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm_inf(&precond(&r)) <= settings.tolerance {
            return Ok((x, it));
        }
        if omega.norm() == 0.0 {
            break;
        }
    }
    let res = norm_inf(&precond(&r));
    Err(Error::SolverFailure {
        iterations: settings.max_iterations,
        residual: res / norm_inf(&precond(b)).max(f64::MIN_POSITIVE),
    })
}

/// A reusable solver for one sparse matrix.
#[derive(Clone, Debug)]
pub enum Factorization {
    Direct(BandLu),
    Krylov,
}

#[derive(Clone, Debug)]
pub struct SparseSolver {
    pub matrix: CsrMatrix,
    factor: Factorization,
    settings: SolverSettings,
}

impl SparseSolver {
    pub fn new(matrix: CsrMatrix, settings: &SolverSettings) -> Result<SparseSolver> {
        let band = matrix.n * (2 * matrix.half_bandwidth() + 1);
        let direct = match settings.method {
            SolverMethod::Direct => true,
            SolverMethod::Krylov => false,
            SolverMethod::Auto => band <= settings.direct_band_limit,
        };
        let factor = if direct {
            Factorization::Direct(BandLu::factor(&matrix)?)
        } else {
            Factorization::Krylov
        };
        Ok(SparseSolver {
            matrix,
            factor,
            settings: settings.clone(),
        })
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.factor, Factorization::Direct(_))
    }

    pub fn solve(&self, b: &[C64]) -> Result<Vec<C64>> {
        match &self.factor {
            Factorization::Direct(lu) => {
                let mut x = lu.solve(b);
                // two rounds of iterative refinement tighten the residual
                for _ in 0..2 {
                    let ax = self.matrix.mul_vec(&x);
                    let r: Vec<C64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
                    let dx = lu.solve(&r);
                    for (xi, d) in x.iter_mut().zip(dx) {
                        *xi += d;
                    }
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Singular { row: 0, pivot: 0.0 });
                }
                Ok(x)
            }
            Factorization::Krylov => bicgstab(&self.matrix, b, &self.settings).map(|r| r.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize, shift: f64) -> CsrMatrix {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![(i, C64::new(2.0 + shift, 0.5))];
                if i > 0 {
                    r.push((i - 1, C64::new(-1.0, 0.0)));
                }
                if i + 1 < n {
                    r.push((i + 1, C64::new(-1.2, 0.0)));
                }
                r
            })
            .collect();
        CsrMatrix::from_rows(rows)
    }

    #[test]
    fn direct_and_krylov_agree() {
        let a = tridiag(50, 0.1);
        let b: Vec<C64> = (0..50).map(|i| C64::new((i as f64).sin(), 1.0)).collect();
        let lu = SparseSolver::new(a.clone(), &SolverSettings { method: SolverMethod::Direct, ..Default::default() }).unwrap();
        let kr = SparseSolver::new(a.clone(), &SolverSettings { method: SolverMethod::Krylov, ..Default::default() }).unwrap();
        let (x1, x2) = (lu.solve(&b).unwrap(), kr.solve(&b).unwrap());
        let r = a.mul_vec(&x1);
        for i in 0..50 {
            assert!((r[i] - b[i]).norm() < 1e-12);
            assert!((x1[i] - x2[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn duplicate_entries_summed() {
        let a = CsrMatrix::from_rows(vec![vec![(0, C64::new(1.0, 0.0)), (0, C64::new(2.0, 0.0))]]);
        assert_eq!(a.get(0, 0), C64::new(3.0, 0.0));
    }

    #[test]
    fn singular_detected() {
        let a = CsrMatrix::from_rows(vec![
            vec![(0, C64::new(1.0, 0.0)), (1, C64::new(1.0, 0.0))],
            vec![(0, C64::new(1.0, 0.0)), (1, C64::new(1.0, 0.0))],
        ]);
        assert!(matches!(BandLu::factor(&a), Err(Error::Singular { .. })));
    }
}
