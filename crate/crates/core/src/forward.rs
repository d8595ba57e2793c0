//! Dirichlet solver for `div(a grad u) + b . grad u + c u = s`.
//!
//! The divergence term is discretised in flux form with arithmetic face
//! averages of the diagonal of `a` and central cross differences for its
//! off-diagonal entries; advection uses central differences. The stencil has
//! at most 9 points in 2-D and 19 in 3-D.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{sym_pairs, ScalarField, SymTensorField, VectorField, C64, ZERO};
use crate::grid::Grid;
use crate::linalg::{CsrMatrix, SolverSettings, SparseSolver};

/// The coefficients `(a, b, c)` sharing one grid.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    pub a: SymTensorField,
    pub b: VectorField,
    pub c: ScalarField,
}

impl CoefficientSet {
    pub fn new(a: SymTensorField, b: VectorField, c: ScalarField) -> Result<Self> {
        if !(a.grid.compatible(&b.grid) && a.grid.compatible(&c.grid)) {
            return Err(Error::Config("coefficients live on different grids".into()));
        }
        Ok(CoefficientSet { a, b, c })
    }

    /// `a = s I`, `b = 0`, `c` as given.
    pub fn isotropic(s: &ScalarField, c: &ScalarField) -> Self {
        CoefficientSet {
            a: SymTensorField::scaled_identity(&s.grid, s),
            b: VectorField::zeros(&s.grid),
            c: c.clone(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.a.grid
    }

    /// Checks that `a` is real symmetric positive-definite at every point.
    pub fn check_elliptic(&self) -> Result<()> {
        let g = self.grid();
        let n = g.dim();
        for p in 0..g.len() {
            let m = self.a.matrix_at(p);
            let fail = |reason: &str| Error::Assembly {
                index: p,
                coords: g.coords(p)[..n].to_vec(),
                reason: reason.to_string(),
            };
            let scale = m.iter().map(|v| v.norm()).fold(0.0, f64::max);
            if m.iter().any(|v| v.im.abs() > 1e-14 * scale || !v.re.is_finite()) {
                return Err(fail("coefficient a must be real"));
            }
            let re = m.map(|v| v.re);
            if scale == 0.0 || re.cholesky().is_none() {
                return Err(fail("coefficient a is not positive-definite"));
            }
        }
        Ok(())
    }

    /// Restriction of every coefficient to `grid.shrink(margin)`.
    pub fn restrict(&self, margin: usize) -> Result<Self> {
        Ok(CoefficientSet {
            a: self.a.restrict(margin)?,
            b: self.b.restrict(margin)?,
            c: self.c.restrict(margin)?,
        })
    }
}

/// Dirichlet data on the boundary points of a grid, in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTrace {
    pub grid: Grid,
    pub values: Vec<C64>,
    /// Expression the trace was sampled from, if any.
    pub label: Option<String>,
}

impl BoundaryTrace {
    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> C64) -> Self {
        let values = grid.boundary_points().into_iter().map(|p| f(grid.coords(p))).collect();
        BoundaryTrace {
            grid: *grid,
            values,
            label: None,
        }
    }

    pub fn from_expr(grid: &Grid, text: &str) -> Result<Self> {
        let e = crate::dsl::parse(text)?;
        let n = grid.dim();
        let values = grid
            .boundary_points()
            .into_iter()
            .map(|p| e.eval(&grid.coords(p)[..n]))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundaryTrace {
            grid: *grid,
            values,
            label: Some(text.to_string()),
        })
    }

    /// Boundary values of a full-grid field.
    pub fn from_field(f: &ScalarField) -> Self {
        let values = f.grid.boundary_points().into_iter().map(|p| f.values[p]).collect();
        BoundaryTrace {
            grid: f.grid,
            values,
            label: None,
        }
    }

    /// Full-grid field equal to the trace on the boundary and zero inside.
    pub fn to_field(&self) -> ScalarField {
        let mut out = ScalarField::constant(&self.grid, ZERO);
        for (p, v) in self.grid.boundary_points().into_iter().zip(&self.values) {
            out.values[p] = *v;
        }
        out
    }
}

/// Stencil `(point, weight)` of the discrete operator at interior point `p`.
fn stencil(co: &CoefficientSet, p: usize) -> Vec<(usize, C64)> {
    let g = co.grid();
    let n = g.dim();
    let h = g.spacing();
    let mut st: Vec<(usize, C64)> = Vec::with_capacity(19);
    let mut add = |q: usize, w: C64| {
        if let Some(e) = st.iter_mut().find(|e| e.0 == q) {
            e.1 += w;
        } else {
            st.push((q, w));
        }
    };
    for (slot, &(i, j)) in sym_pairs(n).iter().enumerate() {
        let a = |q: usize| co.a.at(q)[slot];
        if i == j {
            let s = g.stride(i);
            let h2 = h[i] * h[i];
            let ap = 0.5 * (a(p) + a(p + s));
            let am = 0.5 * (a(p) + a(p - s));
            add(p + s, ap / h2);
            add(p - s, am / h2);
            add(p, -(ap + am) / h2);
        } else {
            let (si, sj) = (g.stride(i), g.stride(j));
            let w = 1.0 / (4.0 * h[i] * h[j]);
            // d_i (a_ij d_j u)
            add(p + si + sj, a(p + si) * w);
            add(p + si - sj, -a(p + si) * w);
            add(p - si + sj, -a(p - si) * w);
            add(p - si - sj, a(p - si) * w);
            // d_j (a_ij d_i u)
            add(p + sj + si, a(p + sj) * w);
            add(p + sj - si, -a(p + sj) * w);
            add(p - sj + si, -a(p - sj) * w);
            add(p - sj - si, a(p - sj) * w);
        }
    }
    let b = co.b.at(p);
    for k in 0..n {
        if b[k] != ZERO {
            let s = g.stride(k);
            add(p + s, b[k] / (2.0 * h[k]));
            add(p - s, -b[k] / (2.0 * h[k]));
        }
    }
    add(p, co.c.values[p]);
    st
}

/// The discrete operator restricted to interior unknowns, with the couplings
/// to boundary points kept aside for building right-hand sides.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub grid: Grid,
    /// Grid point of each unknown.
    pub unknowns: Vec<usize>,
    /// Unknown index of each grid point (`usize::MAX` on the boundary).
    pub index: Vec<usize>,
    pub matrix: CsrMatrix,
    coupling: Vec<Vec<(usize, C64)>>,
}

impl DiscreteOperator {
    pub fn new(co: &CoefficientSet) -> Result<Self> {
        co.check_elliptic()?;
        let g = *co.grid();
        let mut index = vec![usize::MAX; g.len()];
        let unknowns: Vec<usize> = (0..g.len()).filter(|&p| !g.is_boundary(p)).collect();
        for (k, &p) in unknowns.iter().enumerate() {
            index[p] = k;
        }
        let (rows, coupling): (Vec<_>, Vec<_>) = unknowns
            .par_iter()
            .map(|&p| {
                let mut row = Vec::new();
                let mut bnd = Vec::new();
                for (q, w) in stencil(co, p) {
                    if index[q] == usize::MAX {
                        bnd.push((q, w));
                    } else {
                        row.push((index[q], w));
                    }
                }
                (row, bnd)
            })
            .unzip();
        Ok(DiscreteOperator {
            grid: g,
            unknowns,
            index,
            matrix: CsrMatrix::from_rows(rows),
            coupling,
        })
    }

    /// Right-hand side for Dirichlet data `f` and optional interior source.
    pub fn rhs(&self, f: &BoundaryTrace, source: Option<&ScalarField>) -> Result<Vec<C64>> {
        if !f.grid.compatible(&self.grid) {
            return Err(Error::Config("boundary trace grid does not match coefficients".into()));
        }
        let full = f.to_field();
        Ok(self
            .unknowns
            .iter()
            .zip(&self.coupling)
            .map(|(&p, bnd)| {
                let s = source.map_or(ZERO, |s| s.values[p]);
                s - bnd.iter().map(|&(q, w)| w * full.values[q]).sum::<C64>()
            })
            .collect())
    }
}

/// An assembled Dirichlet problem over the interior unknowns.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub operator: DiscreteOperator,
    pub rhs: Vec<C64>,
}

pub fn assemble(co: &CoefficientSet, f: &BoundaryTrace) -> Result<LinearSystem> {
    let operator = DiscreteOperator::new(co)?;
    let rhs = operator.rhs(f, None)?;
    Ok(LinearSystem { operator, rhs })
}

/// Applies the discrete operator at interior points; boundary entries are zero.
pub fn apply_operator(co: &CoefficientSet, u: &ScalarField) -> ScalarField {
    let g = *co.grid();
    let values = (0..g.len())
        .into_par_iter()
        .map(|p| {
            if g.is_boundary(p) {
                ZERO
            } else {
                stencil(co, p).into_iter().map(|(q, w)| w * u.values[q]).sum()
            }
        })
        .collect();
    ScalarField { grid: g, values }
}

/// Relative residual of `u` against the discrete problem with data `f` and
/// optional source: interior equation residual scaled by the operator's
/// magnitude, plus the relative boundary mismatch.
pub fn residual_with_source(
    co: &CoefficientSet,
    u: &ScalarField,
    f: &BoundaryTrace,
    source: Option<&ScalarField>,
) -> f64 {
    let g = co.grid();
    let len = g.extent();
    let a_max = co.a.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let b_max = co.b.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let c_max = co.c.sup();
    let u_max = u.sup().max(f64::MIN_POSITIVE);
    let scale = u_max * (a_max / (len * len) + b_max / len + c_max);
    let lu = apply_operator(co, u);
    let interior = (0..g.len())
        .filter(|&p| !g.is_boundary(p))
        .map(|p| (lu.values[p] - source.map_or(ZERO, |s| s.values[p])).norm())
        .fold(0.0, f64::max);
    let boundary = g
        .boundary_points()
        .into_iter()
        .zip(&f.values)
        .map(|(p, v)| (u.values[p] - v).norm())
        .fold(0.0, f64::max);
    interior / scale.max(f64::MIN_POSITIVE) + boundary / u_max
}

pub fn residual(co: &CoefficientSet, u: &ScalarField, f: &BoundaryTrace) -> f64 {
    residual_with_source(co, u, f, None)
}

/// Acceptance threshold on [`residual`] for every solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

/// A factored operator reused across boundary conditions.
#[derive(Debug)]
pub struct ForwardSolver {
    coeffs: CoefficientSet,
    operator: DiscreteOperator,
    solver: SparseSolver,
}

impl ForwardSolver {
    pub fn new(co: &CoefficientSet, settings: &SolverSettings) -> Result<Self> {
        let operator = DiscreteOperator::new(co)?;
        let solver = SparseSolver::new(operator.matrix.clone(), settings)?;
        Ok(ForwardSolver {
            coeffs: co.clone(),
            operator,
            solver,
        })
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coeffs
    }

    pub fn solve(&self, f: &BoundaryTrace) -> Result<ScalarField> {
        self.solve_with_source(f, None)
    }

    pub fn solve_with_source(&self, f: &BoundaryTrace, source: Option<&ScalarField>) -> Result<ScalarField> {
        let rhs = self.operator.rhs(f, source)?;
        let x = self.solver.solve(&rhs)?;
        let mut u = f.to_field();
        for (k, &p) in self.operator.unknowns.iter().enumerate() {
            u.values[p] = x[k];
        }
        let r = residual_with_source(&self.coeffs, &u, f, source);
        if !(r <= RESIDUAL_TOLERANCE) {
            return Err(Error::SolverFailure {
                iterations: 0,
                residual: r,
            });
        }
        Ok(u)
    }

    /// Solves for every trace; the factorization is shared.
    pub fn solve_many(&self, traces: &[BoundaryTrace]) -> Result<Vec<ScalarField>> {
        traces.par_iter().map(|f| self.solve(f)).collect()
    }
}

pub fn solve_dirichlet(co: &CoefficientSet, f: &BoundaryTrace, settings: &SolverSettings) -> Result<ScalarField> {
    ForwardSolver::new(co, settings)?.solve(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ONE;
    use crate::linalg::SolverMethod;
    use std::f64::consts::PI;

    fn laplace(g: &Grid, s: f64) -> CoefficientSet {
        CoefficientSet::isotropic(
            &ScalarField::constant(g, C64::new(s, 0.0)),
            &ScalarField::constant(g, ZERO),
        )
    }

    #[test]
    fn five_point_rows() {
        let g = Grid::unit(2, 5).unwrap();
        let f = BoundaryTrace::from_fn(&g, |_| ZERO);
        let sys = assemble(&laplace(&g, 1.0), &f).unwrap();
        let op = &sys.operator;
        let centre = op.index[g.index(&[2, 2])];
        let row: Vec<_> = op.matrix.row(centre).filter(|e| e.1 != ZERO).collect();
        assert_eq!(row.len(), 5);
        assert_eq!(op.matrix.get(centre, centre), C64::new(-64.0, 0.0));
        for (j, v) in row {
            if j != centre {
                assert_eq!(v, C64::new(16.0, 0.0));
            }
        }
        assert!(op.matrix.pattern_symmetric());
        let scaled = assemble(&laplace(&g, 2.0), &f).unwrap();
        for (x, y) in scaled.operator.matrix.vals.iter().zip(&op.matrix.vals) {
            assert_eq!(*x, 2.0 * y);
        }
    }

    #[test]
    fn advection_perturbs_x_neighbours() {
        let g = Grid::unit(2, 5).unwrap();
        let mut co = laplace(&g, 1.0);
        co.b = VectorField::constant(&g, &[ONE, ZERO]).unwrap();
        let f = BoundaryTrace::from_fn(&g, |_| ZERO);
        let sys = assemble(&co, &f).unwrap();
        let op = &sys.operator;
        let c = op.index[g.index(&[2, 2])];
        assert_eq!(op.matrix.get(c, op.index[g.index(&[3, 2])]), C64::new(18.0, 0.0));
        assert_eq!(op.matrix.get(c, op.index[g.index(&[1, 2])]), C64::new(14.0, 0.0));
        assert_eq!(op.matrix.get(c, op.index[g.index(&[2, 3])]), C64::new(16.0, 0.0));
    }

    #[test]
    fn non_spd_rejected_with_point() {
        let g = Grid::unit(2, 5).unwrap();
        let mut co = laplace(&g, 1.0);
        let p = g.index(&[1, 3]);
        co.a.values[p * 3] = C64::new(-1.0, 0.0);
        match DiscreteOperator::new(&co) {
            Err(Error::Assembly { index, .. }) => assert_eq!(index, p),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reproduces_linear_and_constant() {
        let g = Grid::unit(2, 17).unwrap();
        let co = laplace(&g, 1.0);
        let s = SolverSettings::default();
        let u = solve_dirichlet(&co, &BoundaryTrace::from_fn(&g, |x| C64::new(x[0], 0.0)), &s).unwrap();
        for p in 0..g.len() {
            assert!((u.values[p].re - g.coords(p)[0]).abs() < 1e-12);
        }
        let u = solve_dirichlet(&co, &BoundaryTrace::from_fn(&g, |_| ONE), &s).unwrap();
        assert!(u.values.iter().all(|v| (v - ONE).norm() < 1e-12));
    }

    #[test]
    fn singular_operator_reported() {
        // c equal to the first Dirichlet eigenvalue of the 5x5 discrete Laplacian
        let g = Grid::unit(2, 5).unwrap();
        let lam = 2.0 * 64.0 * (PI / 8.0).sin().powi(2);
        let co = CoefficientSet::isotropic(
            &ScalarField::constant(&g, ONE),
            &ScalarField::constant(&g, C64::new(lam, 0.0)),
        );
        let err = solve_dirichlet(&co, &BoundaryTrace::from_fn(&g, |_| ONE), &SolverSettings::default());
        assert!(matches!(err, Err(Error::Singular { .. })), "{err:?}");
    }

    fn manufactured(n: usize) -> (f64, f64) {
        let g = Grid::unit(2, n).unwrap();
        let exact = |x: [f64; 3]| 2.0 + (PI * x[0]).sin() * (PI * x[1]).sin();
        let (bx, by) = (0.3, -0.1);
        let c = ScalarField::from_real(&g, |x| {
            let (sx, cx, sy, cy) = ((PI * x[0]).sin(), (PI * x[0]).cos(), (PI * x[1]).sin(), (PI * x[1]).cos());
            let lap = -2.0 * PI * PI * sx * sy;
            let adv = bx * PI * cx * sy + by * PI * sx * cy;
            -(lap + adv) / exact(x)
        });
        let mut co = CoefficientSet::isotropic(&ScalarField::constant(&g, ONE), &c);
        co.b = VectorField::constant(&g, &[C64::new(bx, 0.0), C64::new(by, 0.0)]).unwrap();
        let ustar = ScalarField::from_real(&g, exact);
        let f = BoundaryTrace::from_field(&ustar);
        let u = solve_dirichlet(&co, &f, &SolverSettings::default()).unwrap();
        let err = u.values.iter().zip(&ustar.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        (err, residual(&co, &ustar, &f))
    }

    #[test]
    fn manufactured_solution_second_order() {
        let runs: Vec<(f64, f64)> = [17, 33, 65].iter().map(|&n| manufactured(n)).collect();
        for w in runs.windows(2) {
            assert!((w[0].0 / w[1].0).log2() >= 1.9, "{runs:?}");
            assert!((w[0].1 / w[1].1).log2() >= 1.9, "{runs:?}");
        }
    }

    #[test]
    fn residual_detects_perturbation() {
        let g = Grid::unit(2, 9).unwrap();
        let co = laplace(&g, 1.0);
        let f = BoundaryTrace::from_fn(&g, |x| C64::new(x[0] + x[1], 0.0));
        let u = solve_dirichlet(&co, &f, &SolverSettings::default()).unwrap();
        assert!(residual(&co, &u, &f) <= 1e-10);
        let mut prev = 0.0;
        for bump in [0.1, 1.0, 10.0] {
            let mut v = u.clone();
            v.values[g.index(&[4, 4])] += bump;
            let r = residual(&co, &v, &f);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn maximum_principle_and_linearity() {
        let g = Grid::unit(2, 21).unwrap();
        let mut co = CoefficientSet::isotropic(
            &ScalarField::from_real(&g, |x| 1.0 + 0.5 * (3.0 * x[0]).sin() * x[1]),
            &ScalarField::constant(&g, ZERO),
        );
        co.b = VectorField::from_fn(&g, |x| vec![C64::new(0.4 * x[1], 0.0), C64::new(-0.2, 0.0)]);
        let solver = ForwardSolver::new(&co, &SolverSettings::default()).unwrap();
        let f1 = BoundaryTrace::from_fn(&g, |x| C64::new((5.0 * x[0]).cos() + x[1], 0.0));
        let f2 = BoundaryTrace::from_fn(&g, |x| C64::new(x[0] * x[1], 0.3));
        let u1 = solver.solve(&f1).unwrap();
        let (lo, hi) = f1.values.iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(v.re), h.max(v.re)));
        assert!(u1.values.iter().all(|v| v.re >= lo - 1e-12 && v.re <= hi + 1e-12));
        let u2 = solver.solve(&f2).unwrap();
        let sum = BoundaryTrace {
            grid: g,
            values: f1.values.iter().zip(&f2.values).map(|(a, b)| a + b).collect(),
            label: None,
        };
        let u12 = solver.solve(&sum).unwrap();
        for p in 0..g.len() {
            assert!((u12.values[p] - u1.values[p] - u2.values[p]).norm() < 1e-11);
        }
    }

    #[test]
    fn complex_c_and_krylov_path() {
        let g = Grid::unit(2, 17).unwrap();
        let co = CoefficientSet::isotropic(
            &ScalarField::from_real(&g, |x| 1.0 + 0.2 * x[0]),
            &ScalarField::constant(&g, C64::new(1.0, 1.0)),
        );
        let f = BoundaryTrace::from_fn(&g, |x| C64::new(1.0 + x[1], 0.0));
        let direct = solve_dirichlet(&co, &f, &SolverSettings::default()).unwrap();
        assert!(residual(&co, &direct, &f) <= 1e-10);
        let krylov = solve_dirichlet(
            &co,
            &f,
            &SolverSettings {
                method: SolverMethod::Krylov,
                tolerance: 1e-14,
                ..Default::default()
            },
        )
        .unwrap();
        for p in 0..g.len() {
            assert!((direct.values[p] - krylov.values[p]).norm() < 1e-10);
        }
    }

    #[test]
    fn anisotropic_3d_solve() {
        let g = Grid::unit(3, 9).unwrap();
        let a = SymTensorField::from_fn(&g, |x| {
            let r = |v: f64| C64::new(v, 0.0);
            vec![r(2.0), r(1.0 + x[0]), r(1.5), r(0.1), r(0.2 * x[1]), r(-0.3)]
        });
        let co = CoefficientSet::new(a, VectorField::zeros(&g), ScalarField::constant(&g, ZERO)).unwrap();
        let f = BoundaryTrace::from_fn(&g, |x| C64::new(x[0] - 2.0 * x[2] + 0.5, 0.0));
        let u = solve_dirichlet(&co, &f, &SolverSettings::default()).unwrap();
        // linear data are reproduced only when a is constant; here check the residual
        assert!(residual(&co, &u, &f) <= 1e-10);
    }
}
