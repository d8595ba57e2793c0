//! Complex-valued sampled fields on a [`Grid`].
//!
//! Vector and symmetric-tensor fields store their components point-major:
//! all components of point 0, then point 1, and so on. Symmetric tensors keep
//! `n(n+1)/2` entries in the order `(11, 22, 12)` for `n = 2` and
//! `(11, 22, 33, 23, 13, 12)` for `n = 3`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Number of independent entries of a symmetric `dim × dim` matrix.
pub const fn sym_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// `(row, col)` pairs of the symmetric storage layout.
pub fn sym_pairs(dim: usize) -> &'static [(usize, usize)] {
    match dim {
        2 => &[(0, 0), (1, 1), (0, 1)],
        3 => &[(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)],
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Storage slot of entry `(i, j)`.
pub fn sym_slot(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    sym_pairs(dim)
        .iter()
        .position(|&(a, b)| a == i && b == j)
        .expect("index within dimension")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<C64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub values: Vec<C64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField {
    pub grid: Grid,
    pub values: Vec<C64>,
}

fn check_len(kind: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Config(format!(
            "{kind} field needs {expected} values, got {got}"
        )));
    }
    Ok(())
}

impl ScalarField {
    pub fn new(grid: &Grid, values: Vec<C64>) -> Result<Self> {
        check_len("scalar", grid.len(), values.len())?;
        Ok(ScalarField { grid: *grid, values })
    }

    pub fn constant(grid: &Grid, value: C64) -> Self {
        ScalarField {
            grid: *grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> C64) -> Self {
        let values = (0..grid.len()).map(|p| f(grid.coords(p))).collect();
        ScalarField { grid: *grid, values }
    }

    pub fn from_real(grid: &Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        Self::from_fn(grid, |x| C64::new(f(x), 0.0))
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(C64, C64) -> C64) -> Self {
        debug_assert_eq!(self.values.len(), other.values.len());
        ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Largest modulus over the whole grid.
    pub fn sup(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn restrict(&self, margin: usize) -> Result<Self> {
        let sub = self.grid.shrink(margin)?;
        let values = (0..sub.len())
            .map(|q| self.values[self.grid.parent_index(margin, &sub, q)])
            .collect();
        Ok(ScalarField { grid: sub, values })
    }

    pub fn is_real(&self) -> bool {
        self.values.iter().all(|v| v.im == 0.0)
    }
}

impl VectorField {
    pub fn new(grid: &Grid, values: Vec<C64>) -> Result<Self> {
        check_len("vector", grid.len() * grid.dim(), values.len())?;
        Ok(VectorField { grid: *grid, values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        VectorField {
            grid: *grid,
            values: vec![ZERO; grid.len() * grid.dim()],
        }
    }

    pub fn constant(grid: &Grid, v: &[C64]) -> Result<Self> {
        check_len("vector constant", grid.dim(), v.len())?;
        let values = (0..grid.len()).flat_map(|_| v.iter().copied()).collect();
        Ok(VectorField { grid: *grid, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> Vec<C64>) -> Self {
        let n = grid.dim();
        let mut values = Vec::with_capacity(grid.len() * n);
        for p in 0..grid.len() {
            let v = f(grid.coords(p));
            assert_eq!(v.len(), n);
            values.extend(v);
        }
        VectorField { grid: *grid, values }
    }

    /// Builds a vector field from per-component scalar fields.
    pub fn from_components(comps: &[ScalarField]) -> Result<Self> {
        let grid = comps
            .first()
            .map(|c| c.grid)
            .ok_or_else(|| Error::Config("empty component list".into()))?;
        check_len("vector component", grid.dim(), comps.len())?;
        let mut values = Vec::with_capacity(grid.len() * comps.len());
        for p in 0..grid.len() {
            values.extend(comps.iter().map(|c| c.values[p]));
        }
        Ok(VectorField { grid, values })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn at(&self, p: usize) -> &[C64] {
        let n = self.dim();
        &self.values[p * n..(p + 1) * n]
    }

    pub fn at_mut(&mut self, p: usize) -> &mut [C64] {
        let n = self.dim();
        &mut self.values[p * n..(p + 1) * n]
    }

    pub fn vector_at(&self, p: usize) -> DVector<C64> {
        DVector::from_column_slice(self.at(p))
    }

    pub fn component(&self, k: usize) -> ScalarField {
        let n = self.dim();
        ScalarField {
            grid: self.grid,
            values: (0..self.grid.len()).map(|p| self.values[p * n + k]).collect(),
        }
    }

    pub fn restrict(&self, margin: usize) -> Result<Self> {
        let sub = self.grid.shrink(margin)?;
        let mut values = Vec::with_capacity(sub.len() * self.dim());
        for q in 0..sub.len() {
            values.extend_from_slice(self.at(self.grid.parent_index(margin, &sub, q)));
        }
        Ok(VectorField { grid: sub, values })
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == ZERO)
    }
}

impl SymTensorField {
    pub fn new(grid: &Grid, values: Vec<C64>) -> Result<Self> {
        check_len("symmetric tensor", grid.len() * sym_len(grid.dim()), values.len())?;
        Ok(SymTensorField { grid: *grid, values })
    }

    /// `s · I` at every point.
    pub fn scaled_identity(grid: &Grid, s: &ScalarField) -> Self {
        let n = grid.dim();
        let m = sym_len(n);
        let mut values = vec![ZERO; grid.len() * m];
        for p in 0..grid.len() {
            for k in 0..n {
                values[p * m + k] = s.values[p];
            }
        }
        SymTensorField { grid: *grid, values }
    }

    pub fn identity(grid: &Grid) -> Self {
        Self::scaled_identity(grid, &ScalarField::constant(grid, ONE))
    }

    /// Builds a field from per-slot scalar fields in storage order.
    pub fn from_slots(slots: &[ScalarField]) -> Result<Self> {
        let grid = slots
            .first()
            .map(|c| c.grid)
            .ok_or_else(|| Error::Config("empty slot list".into()))?;
        let m = sym_len(grid.dim());
        check_len("symmetric tensor slot", m, slots.len())?;
        let mut values = Vec::with_capacity(grid.len() * m);
        for p in 0..grid.len() {
            values.extend(slots.iter().map(|c| c.values[p]));
        }
        Ok(SymTensorField { grid, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> Vec<C64>) -> Self {
        let m = sym_len(grid.dim());
        let mut values = Vec::with_capacity(grid.len() * m);
        for p in 0..grid.len() {
            let v = f(grid.coords(p));
            assert_eq!(v.len(), m);
            values.extend(v);
        }
        SymTensorField { grid: *grid, values }
    }

    /// Builds a field from full matrices, one per point.
    pub fn from_matrices(grid: &Grid, mats: &[DMatrix<C64>]) -> Self {
        let pairs = sym_pairs(grid.dim());
        let mut values = Vec::with_capacity(grid.len() * pairs.len());
        for m in mats {
            values.extend(pairs.iter().map(|&(i, j)| m[(i, j)]));
        }
        SymTensorField { grid: *grid, values }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn at(&self, p: usize) -> &[C64] {
        let m = sym_len(self.dim());
        &self.values[p * m..(p + 1) * m]
    }

    pub fn entry(&self, p: usize, i: usize, j: usize) -> C64 {
        self.at(p)[sym_slot(self.dim(), i, j)]
    }

    pub fn matrix_at(&self, p: usize) -> DMatrix<C64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (&(i, j), &v) in sym_pairs(n).iter().zip(self.at(p)) {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    pub fn slot(&self, k: usize) -> ScalarField {
        let m = sym_len(self.dim());
        ScalarField {
            grid: self.grid,
            values: (0..self.grid.len()).map(|p| self.values[p * m + k]).collect(),
        }
    }

    /// Trace at every point.
    pub fn trace(&self) -> ScalarField {
        let n = self.dim();
        let m = sym_len(n);
        ScalarField {
            grid: self.grid,
            values: (0..self.grid.len())
                .map(|p| self.values[p * m..p * m + n].iter().sum())
                .collect(),
        }
    }

    pub fn restrict(&self, margin: usize) -> Result<Self> {
        let sub = self.grid.shrink(margin)?;
        let mut values = Vec::with_capacity(sub.len() * sym_len(self.dim()));
        for q in 0..sub.len() {
            values.extend_from_slice(self.at(self.grid.parent_index(margin, &sub, q)));
        }
        Ok(SymTensorField { grid: sub, values })
    }

    /// Pointwise `s · A`.
    pub fn scale(&self, s: &ScalarField) -> Self {
        let m = sym_len(self.dim());
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| v * s.values[k / m])
            .collect();
        SymTensorField {
            grid: self.grid,
            values,
        }
    }
}

/// `A : B = Tr(A B)` for symmetric matrices stored in slot order.
pub fn sym_contract(dim: usize, a: &[C64], b: &[C64]) -> C64 {
    sym_pairs(dim)
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&(i, j), (&x, &y))| if i == j { x * y } else { 2.0 * x * y })
        .sum()
}

/// Pointwise matrix-vector product `A v`.
pub fn sym_apply(dim: usize, a: &[C64], v: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; dim];
    for (&(i, j), &x) in sym_pairs(dim).iter().zip(a) {
        out[i] += x * v[j];
        if i != j {
            out[j] += x * v[i];
        }
    }
    out
}
