//! Second-order finite differences on a [`Grid`].
//!
//! Interior points use central stencils; boundary points fall back to
//! one-sided second-order stencils. All operators reproduce polynomials of
//! per-axis degree two exactly.

use rayon::prelude::*;

use crate::field::{sym_len, sym_pairs, ScalarField, SymTensorField, VectorField, C64};
use crate::grid::Grid;

/// First derivative along `axis` of point-major data with `ncomp` components,
/// taking component `comp`.
fn d1_strided(grid: &Grid, data: &[C64], ncomp: usize, comp: usize, axis: usize) -> Vec<C64> {
    let s = grid.stride(axis);
    let n = grid.shape()[axis];
    let h = grid.spacing()[axis];
    let at = |p: usize| data[p * ncomp + comp];
    (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let i = grid.multi_index(p)[axis];
            if i == 0 {
                (-3.0 * at(p) + 4.0 * at(p + s) - at(p + 2 * s)) / (2.0 * h)
            } else if i == n - 1 {
                (3.0 * at(p) - 4.0 * at(p - s) + at(p - 2 * s)) / (2.0 * h)
            } else {
                (at(p + s) - at(p - s)) / (2.0 * h)
            }
        })
        .collect()
}

/// Pure second derivative along `axis`.
fn d2_axis(grid: &Grid, data: &[C64], axis: usize) -> Vec<C64> {
    let s = grid.stride(axis);
    let n = grid.shape()[axis];
    let h2 = grid.spacing()[axis].powi(2);
    (0..grid.len())
        .into_par_iter()
        .map(|p| {
            let i = grid.multi_index(p)[axis];
            if i == 0 {
                (2.0 * data[p] - 5.0 * data[p + s] + 4.0 * data[p + 2 * s] - data[p + 3 * s]) / h2
            } else if i == n - 1 {
                (2.0 * data[p] - 5.0 * data[p - s] + 4.0 * data[p - 2 * s] - data[p - 3 * s]) / h2
            } else {
                (data[p + s] - 2.0 * data[p] + data[p - s]) / h2
            }
        })
        .collect()
}

/// Partial derivative of a scalar field along one axis.
pub fn partial(f: &ScalarField, axis: usize) -> ScalarField {
    ScalarField {
        grid: f.grid,
        values: d1_strided(&f.grid, &f.values, 1, 0, axis),
    }
}

pub fn gradient(f: &ScalarField) -> VectorField {
    let g = f.grid;
    let n = g.dim();
    let parts: Vec<Vec<C64>> = (0..n).map(|k| d1_strided(&g, &f.values, 1, 0, k)).collect();
    let mut values = Vec::with_capacity(g.len() * n);
    for p in 0..g.len() {
        values.extend(parts.iter().map(|d| d[p]));
    }
    VectorField { grid: g, values }
}

pub fn hessian(f: &ScalarField) -> SymTensorField {
    let g = f.grid;
    let n = g.dim();
    let pairs = sym_pairs(n);
    let first: Vec<Vec<C64>> = (0..n).map(|k| d1_strided(&g, &f.values, 1, 0, k)).collect();
    let slots: Vec<Vec<C64>> = pairs
        .iter()
        .map(|&(i, j)| {
            if i == j {
                d2_axis(&g, &f.values, i)
            } else {
                d1_strided(&g, &first[j], 1, 0, i)
            }
        })
        .collect();
    let mut values = Vec::with_capacity(g.len() * pairs.len());
    for p in 0..g.len() {
        values.extend(slots.iter().map(|s| s[p]));
    }
    SymTensorField { grid: g, values }
}

/// Sum of pure second differences (the standard `2n+1`-point Laplacian).
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let mut out = vec![C64::new(0.0, 0.0); g.len()];
    for k in 0..g.dim() {
        for (o, d) in out.iter_mut().zip(d2_axis(&g, &f.values, k)) {
            *o += d;
        }
    }
    ScalarField { grid: g, values: out }
}

pub fn divergence(f: &VectorField) -> ScalarField {
    let g = f.grid;
    let n = g.dim();
    let mut out = vec![C64::new(0.0, 0.0); g.len()];
    for k in 0..n {
        for (o, d) in out.iter_mut().zip(d1_strided(&g, &f.values, n, k, k)) {
            *o += d;
        }
    }
    ScalarField { grid: g, values: out }
}

/// Row-wise divergence: entry `i` is `sum_j d_j F_ij`.
pub fn divergence_tensor(f: &SymTensorField) -> VectorField {
    let g = f.grid;
    let n = g.dim();
    let m = sym_len(n);
    let mut values = vec![C64::new(0.0, 0.0); g.len() * n];
    for (slot, &(i, j)) in sym_pairs(n).iter().enumerate() {
        // d_j F_ij contributes to row i; for i != j the mirrored entry adds d_i F_ji to row j
        let dj = d1_strided(&g, &f.values, m, slot, j);
        for p in 0..g.len() {
            values[p * n + i] += dj[p];
        }
        if i != j {
            let di = d1_strided(&g, &f.values, m, slot, i);
            for p in 0..g.len() {
                values[p * n + j] += di[p];
            }
        }
    }
    VectorField { grid: g, values }
}

/// Jacobian of a vector field: `J[p][i][k] = d_k F_i` stored row-major per point.
pub fn jacobian(f: &VectorField) -> Vec<C64> {
    let g = f.grid;
    let n = g.dim();
    let mut out = vec![C64::new(0.0, 0.0); g.len() * n * n];
    for i in 0..n {
        for k in 0..n {
            let d = d1_strided(&g, &f.values, n, i, k);
            for p in 0..g.len() {
                out[p * n * n + i * n + k] = d[p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{interior_mask, Grid};

    fn re(f: impl Fn(f64, f64) -> f64 + Sync, g: &Grid) -> ScalarField {
        ScalarField::from_real(g, |x| f(x[0], x[1]))
    }

    #[test]
    fn gradient_of_linear_and_quadratic() {
        let g = Grid::unit(2, 9).unwrap();
        let gx = gradient(&re(|x, _| x, &g));
        for p in 0..g.len() {
            assert!((gx.at(p)[0].re - 1.0).abs() < 1e-13);
            assert!(gx.at(p)[1].norm() < 1e-13);
        }
        let gq = gradient(&re(|x, _| x * x, &g));
        let mid = g.index(&[4, 4]);
        assert_eq!(gq.at(mid)[0].re, 1.0);
        // one-sided stencils are exact on quadratics too
        for p in 0..g.len() {
            let x = g.coords(p)[0];
            assert!((gq.at(p)[0].re - 2.0 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_exact_on_quadratics() {
        let g = Grid::unit(2, 7).unwrap();
        let hxy = hessian(&re(|x, y| x * y, &g));
        let hxx = hessian(&re(|x, _| x * x, &g));
        for p in 0..g.len() {
            let a = hxy.matrix_at(p);
            assert!(a[(0, 0)].norm() < 1e-10 && a[(1, 1)].norm() < 1e-10);
            assert!((a[(0, 1)].re - 1.0).abs() < 1e-10);
            let b = hxx.matrix_at(p);
            assert!((b[(0, 0)].re - 2.0).abs() < 1e-10);
            assert!(b[(1, 1)].norm() < 1e-10 && b[(0, 1)].norm() < 1e-10);
        }
    }

    #[test]
    fn divergence_examples() {
        let g = Grid::unit(2, 9).unwrap();
        let f = VectorField::from_fn(&g, |x| vec![C64::new(x[0], 0.0), C64::new(x[1], 0.0)]);
        assert!(divergence(&f).values.iter().all(|v| (v.re - 2.0).abs() < 1e-12));
        let id = SymTensorField::identity(&g);
        assert!(divergence_tensor(&id).values.iter().all(|v| v.norm() < 1e-12));
        let t = SymTensorField::from_fn(&g, |x| {
            vec![
                C64::new(x[0] * x[0], 0.0),
                C64::new(x[1] * x[1], 0.0),
                C64::new(x[0] * x[1], 0.0),
            ]
        });
        let dv = divergence_tensor(&t);
        let mask = interior_mask(&g, 1).unwrap();
        for p in mask.points() {
            let x = g.coords(p);
            assert!((dv.at(p)[0].re - 3.0 * x[0]).abs() < 1e-12);
            assert!((dv.at(p)[1].re - 3.0 * x[1]).abs() < 1e-12);
        }
    }

    fn interior_error(n: usize, which: usize) -> f64 {
        let g = Grid::unit(2, n).unwrap();
        let mask = interior_mask(&g, 1).unwrap();
        if which == 0 {
            let f = re(|x, y| x.sin() * y.cos(), &g);
            let gr = gradient(&f);
            mask.points()
                .map(|p| {
                    let [x, y, _] = g.coords(p);
                    (gr.at(p)[0].re - x.cos() * y.cos())
                        .abs()
                        .max((gr.at(p)[1].re + x.sin() * y.sin()).abs())
                })
                .fold(0.0, f64::max)
        } else {
            let f = re(|x, y| (x + y).exp(), &g);
            let h = hessian(&f);
            mask.points()
                .map(|p| {
                    let [x, y, _] = g.coords(p);
                    let e = (x + y).exp();
                    h.at(p).iter().map(|v| (v.re - e).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        }
    }

    #[test]
    fn second_order_convergence() {
        for which in 0..2 {
            let errs: Vec<f64> = [17, 33, 65, 129].iter().map(|&n| interior_error(n, which)).collect();
            for w in errs.windows(2) {
                let order = (w[0] / w[1]).log2();
                assert!(order >= 1.9, "order {order} for operator {which}: {errs:?}");
            }
        }
    }

    #[test]
    fn operators_are_linear() {
        let g = Grid::unit(3, 6).unwrap();
        let f = ScalarField::from_real(&g, |x| (x[0] * 3.0).sin() + x[1] * x[2]);
        let h = ScalarField::from_real(&g, |x| (x[2] - x[0]).exp());
        let (a, b) = (C64::new(0.7, -0.2), C64::new(-1.3, 0.5));
        let comb = f.zip_with(&h, |u, v| a * u + b * v);
        let (hf, hh, hc) = (hessian(&f), hessian(&h), hessian(&comb));
        for k in 0..hc.values.len() {
            let expect = a * hf.values[k] + b * hh.values[k];
            assert!((hc.values[k] - expect).norm() <= 1e-9 * (1.0 + expect.norm()));
        }
    }
}
