//! Recovery of the ratio-field equation `alpha : D²v + beta . Dv = 0` from the
//! internal functionals alone.
//!
//! The pipeline is: ratio fields `v_j = H_{j+1} / H_1` and their derivatives,
//! the Gram matrix of the first `n` gradients, null combinations `theta^m`
//! of the gradients, the symmetric matrices `M^m` they induce, the
//! one-dimensional trace-orthogonal complement of the `M^m` (which fixes
//! `alpha` up to a scalar), and finally `beta`.
//!
//! `alpha` is normalized to unit determinant with a real positive trace, so
//! for a real positive-definite `a = B² â` it equals `â`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff;
use crate::error::{Error, Result};
use crate::field::{sym_contract, sym_len, sym_pairs, ScalarField, SymTensorField, VectorField, C64, ZERO};
use crate::grid::{interior_mask, Grid, InteriorMask};
use crate::synthesis::{constraint_count, tensor_count, MeasurementSet, H1_RELATIVE_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconSettings {
    /// Width of the boundary ring excluded from reconstructed fields.
    pub margin: usize,
    /// `|H_1|` must exceed this fraction of `sup |H_1|`.
    pub h1_threshold: f64,
    /// `|det H| >= gram_tolerance * (max |Dv|²)^n`.
    pub gram_tolerance: f64,
    /// Minimum normalized independence margin of the `M^m`.
    pub null_gap_tolerance: f64,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            margin: 2,
            h1_threshold: H1_RELATIVE_THRESHOLD,
            gram_tolerance: 1e-6,
            null_gap_tolerance: 1e-6,
        }
    }
}

/// Ratio fields and their first and second derivatives.
#[derive(Clone, Debug)]
pub struct RatioSet {
    pub grid: Grid,
    /// Points where per-point algebra is evaluated (every non-boundary point).
    pub mask: InteriorMask,
    pub v: Vec<ScalarField>,
    pub gradients: Vec<VectorField>,
    pub hessians: Vec<SymTensorField>,
    /// Largest relative deviation of boundary ratios from `f_{j+1}/f_1`.
    pub boundary_mismatch: f64,
}

impl RatioSet {
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

pub fn ratios(ms: &MeasurementSet, settings: &ReconSettings) -> Result<RatioSet> {
    let g = ms.grid;
    if ms.len() < 2 {
        return Err(Error::TooFewFunctionals {
            mode: "ratio",
            dim: g.dim(),
            required: 2,
            given: ms.len(),
        });
    }
    let h1 = &ms.functionals[0];
    let threshold = settings.h1_threshold * h1.sup();
    let bad: Vec<usize> = (0..g.len()).filter(|&p| !(h1.values[p].norm() > threshold)).collect();
    if !bad.is_empty() {
        return Err(Error::NonVanishing { threshold, points: bad });
    }
    ratios_unchecked(ms)
}

/// Ratio fields without the `H_1` threshold check; values near zeros of
/// `H_1` are unreliable or non-finite.
pub fn ratios_unchecked(ms: &MeasurementSet) -> Result<RatioSet> {
    let g = ms.grid;
    let h1 = &ms.functionals[0];
    let v: Vec<ScalarField> = ms.functionals[1..]
        .iter()
        .map(|h| h.zip_with(h1, |a, b| a / b))
        .collect();
    let boundary = g.boundary_points();
    let mut mismatch = 0.0f64;
    for (j, vj) in v.iter().enumerate() {
        let (f1, fj) = (&ms.traces[0].values, &ms.traces[j + 1].values);
        for (k, &p) in boundary.iter().enumerate() {
            if f1[k].norm() > 0.0 {
                let expect = fj[k] / f1[k];
                let dev = (vj.values[p] - expect).norm() / expect.norm().max(1.0);
                mismatch = mismatch.max(dev);
            }
        }
    }
    let gradients = v.par_iter().map(diff::gradient).collect();
    let hessians = v.par_iter().map(diff::hessian).collect();
    Ok(RatioSet {
        grid: g,
        mask: interior_mask(&g, 1)?,
        v,
        gradients,
        hessians,
        boundary_mismatch: mismatch,
    })
}

/// Gram matrix `H_ij = Dv_i . Dv_j` of the first `n` ratio gradients.
#[derive(Clone, Debug)]
pub struct GramData {
    pub h: SymTensorField,
    pub hinv: SymTensorField,
    pub det: ScalarField,
    pub threshold: f64,
}

fn gram_at(rs: &RatioSet, p: usize) -> DMatrix<C64> {
    let n = rs.dim();
    DMatrix::from_fn(n, n, |i, j| {
        let (a, b) = (rs.gradients[i].at(p), rs.gradients[j].at(p));
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    })
}

pub fn gram(rs: &RatioSet, settings: &ReconSettings) -> Result<GramData> {
    let (gd, bad) = gram_unchecked(rs, settings)?;
    if !bad.is_empty() {
        return Err(Error::Degenerate {
            what: "gradient basis (Gram determinant)".into(),
            points: bad,
        });
    }
    Ok(gd)
}

/// Gram data without the degeneracy check; returns the interior points where
/// `|det H|` falls below the threshold (their inverse entries may be NaN).
pub fn gram_unchecked(rs: &RatioSet, settings: &ReconSettings) -> Result<(GramData, Vec<usize>)> {
    let n = rs.dim();
    if rs.len() < n {
        return Err(Error::TooFewFunctionals {
            mode: "gradient basis",
            dim: n,
            required: n + 1,
            given: rs.len() + 1,
        });
    }
    let g = rs.grid;
    let nan = C64::new(f64::NAN, f64::NAN);
    let per_point: Vec<(DMatrix<C64>, DMatrix<C64>, C64)> = (0..g.len())
        .into_par_iter()
        .map(|p| {
            let h = gram_at(rs, p);
            let det = h.determinant();
            let inv = h.clone().try_inverse().unwrap_or_else(|| DMatrix::from_element(n, n, nan));
            (h, inv, det)
        })
        .collect();
    let grad_max = rs.mask.points()
        .flat_map(|p| (0..n).map(move |i| (p, i)))
        .map(|(p, i)| rs.gradients[i].at(p).iter().map(|v| v.norm_sqr()).sum::<f64>())
        .fold(0.0, f64::max);
    let threshold = settings.gram_tolerance * grad_max.powi(n as i32);
    let bad: Vec<usize> = rs.mask.points().filter(|&p| !(per_point[p].2.norm() >= threshold) || threshold == 0.0).collect();
    let (hs, rest): (Vec<_>, Vec<_>) = per_point.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
    let (invs, dets): (Vec<_>, Vec<_>) = rest.into_iter().unzip();
    let gd = GramData {
        h: SymTensorField::from_matrices(&g, &hs),
        hinv: SymTensorField::from_matrices(&g, &invs),
        det: ScalarField::new(&g, dets)?,
        threshold,
    };
    Ok((gd, bad))
}

/// `a^{-1} b = -H^{ij} Δv_j Dv_i` for scalar `a` (sum over the first `n` ratios).
pub fn reconstruct_ab_scalar(rs: &RatioSet, gd: &GramData) -> VectorField {
    let n = rs.dim();
    let g = rs.grid;
    let laps: Vec<ScalarField> = rs.hessians[..n].iter().map(|h| h.trace()).collect();
    let mut out = VectorField::zeros(&g);
    for p in 0..g.len() {
        let hinv = gd.hinv.matrix_at(p);
        let o = out.at_mut(p);
        for i in 0..n {
            let gi = rs.gradients[i].at(p);
            let w: C64 = (0..n).map(|j| hinv[(i, j)] * laps[j].values[p]).sum();
            for k in 0..n {
                o[k] -= w * gi[k];
            }
        }
    }
    out
}

/// Null combinations `theta^m` and the matrices `M^m` they induce.
#[derive(Clone, Debug)]
pub struct ThetaMData {
    /// Number of ratio fields each `theta^m` combines.
    pub width: usize,
    /// `theta[m-1]` holds `width` coefficients per point, point-major.
    pub theta: Vec<Vec<C64>>,
    pub m: Vec<SymTensorField>,
}

fn require_tensor_count(rs: &RatioSet) -> Result<()> {
    let n = rs.dim();
    if rs.len() + 1 < tensor_count(n) {
        return Err(Error::TooFewFunctionals {
            mode: "tensor",
            dim: n,
            required: tensor_count(n),
            given: rs.len() + 1,
        });
    }
    Ok(())
}

/// `theta^m_j = -H^{jk} Dv_{n+m} . Dv_k` for `j <= n`, `theta^m_{n+m} = 1`,
/// zero otherwise (`m` is 1-based). Verifies `sum_j theta^m_j Dv_j = 0`.
pub fn theta_coefficients(rs: &RatioSet, gd: &GramData, m: usize) -> Result<Vec<C64>> {
    require_tensor_count(rs)?;
    let n = rs.dim();
    if m == 0 || m > constraint_count(n) {
        return Err(Error::Config(format!("constraint index {m} outside 1..={}", constraint_count(n))));
    }
    let g = rs.grid;
    let width = rs.len();
    let extra = n + m - 1;
    let mut theta = vec![ZERO; g.len() * width];
    let mut worst: Option<(usize, f64)> = None;
    for p in 0..g.len() {
        let t = &mut theta[p * width..(p + 1) * width];
        let hinv = gd.hinv.matrix_at(p);
        let ge = rs.gradients[extra].at(p);
        let dots: Vec<C64> = (0..n)
            .map(|k| rs.gradients[k].at(p).iter().zip(ge).map(|(a, b)| a * b).sum())
            .collect();
        for j in 0..n {
            t[j] = -(0..n).map(|k| hinv[(j, k)] * dots[k]).sum::<C64>();
        }
        t[extra] = C64::new(1.0, 0.0);
        if rs.mask.contains(p) && t.iter().all(|v| v.is_finite()) {
            let mut res = 0.0f64;
            let mut scale = 0.0f64;
            for c in 0..n {
                let mut s = ZERO;
                for (j, tj) in t.iter().enumerate() {
                    if *tj != ZERO {
                        let gj = rs.gradients[j].at(p)[c];
                        s += tj * gj;
                        scale = scale.max((tj * gj).norm());
                    }
                }
                res = res.max(s.norm());
            }
            if !(res <= 1e-10 * scale.max(f64::MIN_POSITIVE)) && worst.is_none_or(|w| res > w.1) {
                worst = Some((p, res));
            }
        }
    }
    if let Some((p, res)) = worst {
        return Err(Error::Consistency(format!(
            "null combination theta^{m} leaves residual {res:.3e} at point {p}"
        )));
    }
    Ok(theta)
}

/// `M^m = sum_j theta^m_j D²v_j`.
pub fn m_matrices(rs: &RatioSet, thetas: &[Vec<C64>]) -> Vec<SymTensorField> {
    let g = rs.grid;
    let width = rs.len();
    let k = sym_len(g.dim());
    thetas
        .iter()
        .map(|theta| {
            let mut values = vec![ZERO; g.len() * k];
            for p in 0..g.len() {
                let out = &mut values[p * k..(p + 1) * k];
                for (j, &t) in theta[p * width..(p + 1) * width].iter().enumerate() {
                    if t != ZERO {
                        for (o, h) in out.iter_mut().zip(rs.hessians[j].at(p)) {
                            *o += t * h;
                        }
                    }
                }
            }
            SymTensorField { grid: g, values }
        })
        .collect()
}

pub fn theta_m(rs: &RatioSet, gd: &GramData) -> Result<ThetaMData> {
    require_tensor_count(rs)?;
    let theta = (1..=constraint_count(rs.dim()))
        .map(|m| theta_coefficients(rs, gd, m))
        .collect::<Result<Vec<_>>>()?;
    let m = m_matrices(rs, &theta);
    Ok(ThetaMData {
        width: rs.len(),
        theta,
        m,
    })
}

/// Flattening of symmetric storage under which the plain bilinear dot
/// product equals `A : B = Tr(A B)`: off-diagonal slots carry a factor √2.
pub fn weighted_flatten(dim: usize, a: &[C64]) -> Vec<C64> {
    sym_pairs(dim)
        .iter()
        .zip(a)
        .map(|(&(i, j), &v)| if i == j { v } else { v * std::f64::consts::SQRT_2 })
        .collect()
}

fn unflatten(dim: usize, v: &[C64]) -> Vec<C64> {
    sym_pairs(dim)
        .iter()
        .zip(v)
        .map(|(&(i, j), &x)| if i == j { x } else { x / std::f64::consts::SQRT_2 })
        .collect()
}

/// Stacked, row-normalized constraint operator at one point.
fn constraint_matrix(dim: usize, ms: &[&[C64]]) -> DMatrix<C64> {
    let k = sym_len(dim);
    let mut c = DMatrix::zeros(k, k);
    for (r, m) in ms.iter().enumerate() {
        let row = weighted_flatten(dim, m);
        let norm = row.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        for (col, v) in row.into_iter().enumerate() {
            c[(r, col)] = if norm > 0.0 { v / norm } else { ZERO };
        }
    }
    c
}

/// Null-space gap of the `M^m` constraint operator and its null vector.
pub fn null_space(dim: usize, ms: &[&[C64]]) -> (f64, DVector<C64>) {
    let k = sym_len(dim);
    let c = constraint_matrix(dim, ms);
    let svd = c.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let largest = svd.singular_values[order[0]];
    // gap between the two smallest singular values, relative to the largest
    let margin = if largest > 0.0 && k > 1 {
        (svd.singular_values[order[k - 2]] - svd.singular_values[order[k - 1]]) / largest
    } else {
        0.0
    };
    let null_row = order[k - 1];
    let v = DVector::from_iterator(k, vt.row(null_row).iter().map(|x| x.conj()));
    (margin, v)
}

fn normalize_alpha(dim: usize, raw: &[C64]) -> Option<Vec<C64>> {
    let mut m = DMatrix::zeros(dim, dim);
    for (&(i, j), &v) in sym_pairs(dim).iter().zip(raw) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    let det = m.determinant();
    let scale = raw.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(det.norm() > 1e-12 * scale.powi(dim as i32)) {
        return None;
    }
    let base = det.powf(-1.0 / dim as f64);
    let trace: C64 = (0..dim).map(|i| m[(i, i)]).sum();
    // pick the n-th root of unity making the trace closest to the positive real axis
    let root = (0..dim)
        .map(|r| base * C64::from_polar(1.0, 2.0 * std::f64::consts::PI * r as f64 / dim as f64))
        .max_by(|a, b| {
            let (ta, tb) = (*a * trace, *b * trace);
            (ta.re / ta.norm()).total_cmp(&(tb.re / tb.norm()))
        })?;
    Some(raw.iter().map(|v| v * root).collect())
}

/// The normalized ratio-equation coefficients.
#[derive(Clone, Debug)]
pub struct AlphaBeta {
    pub alpha: SymTensorField,
    pub beta: VectorField,
    /// Null-space gap of the constraint matrices at every point; zero where
    /// no unit-determinant normalization exists.
    pub quality: ScalarField,
    /// Interior points whose null space is not one-dimensional.
    pub degenerate: Vec<usize>,
}

/// Per point, `alpha` spans the trace-orthogonal complement of the `M^m`.
pub fn alpha_from_nullspace(ms: &[SymTensorField], tolerance: f64) -> Result<(SymTensorField, ScalarField, Vec<usize>)> {
    let first = ms.first().ok_or_else(|| Error::Config("no constraint matrices".into()))?;
    let g = first.grid;
    let n = g.dim();
    if ms.len() < constraint_count(n) {
        return Err(Error::TooFewFunctionals {
            mode: "tensor",
            dim: n,
            required: tensor_count(n),
            given: ms.len() + n + 1,
        });
    }
    let k = sym_len(n);
    let nan = C64::new(f64::NAN, f64::NAN);
    let results: Vec<(f64, Option<Vec<C64>>)> = (0..g.len())
        .into_par_iter()
        .map(|p| {
            let rows: Vec<&[C64]> = ms.iter().map(|m| m.at(p)).collect();
            if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
                return (0.0, None);
            }
            let (margin, v) = null_space(n, &rows);
            if !(margin >= tolerance) {
                return (margin, None);
            }
            match normalize_alpha(n, &unflatten(n, v.as_slice())) {
                Some(a) => (margin, Some(a)),
                None => (0.0, None),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(g.len() * k);
    let mut quality = Vec::with_capacity(g.len());
    let mut degenerate = Vec::new();
    for (p, (margin, alpha)) in results.into_iter().enumerate() {
        quality.push(C64::new(margin, 0.0));
        match alpha {
            Some(a) => values.extend(a),
            None => {
                values.extend(std::iter::repeat_n(nan, k));
                if !g.is_boundary(p) {
                    degenerate.push(p);
                }
            }
        }
    }
    Ok((
        SymTensorField { grid: g, values },
        ScalarField::new(&g, quality)?,
        degenerate,
    ))
}

/// `beta = -H^{ij} (alpha : D²v_j) Dv_i`, with `i, j` over the Gram basis.
pub fn beta_from_alpha(rs: &RatioSet, gd: &GramData, alpha: &SymTensorField) -> VectorField {
    let n = rs.dim();
    let g = rs.grid;
    let mut out = VectorField::zeros(&g);
    for p in 0..g.len() {
        let hinv = gd.hinv.matrix_at(p);
        let a = alpha.at(p);
        let contr: Vec<C64> = (0..n).map(|j| sym_contract(n, a, rs.hessians[j].at(p))).collect();
        let o = out.at_mut(p);
        for i in 0..n {
            let w: C64 = (0..n).map(|j| hinv[(i, j)] * contr[j]).sum();
            for (k, gk) in rs.gradients[i].at(p).iter().enumerate() {
                o[k] -= w * gk;
            }
        }
    }
    out
}

/// Intermediate products of the tensor reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub ratios: RatioSet,
    pub gram: GramData,
    pub theta_m: ThetaMData,
    pub alpha_beta: AlphaBeta,
}

/// Runs the tensor pipeline on the first `I_n` functionals.
pub fn reconstruct(ms: &MeasurementSet, settings: &ReconSettings) -> Result<Reconstruction> {
    let n = ms.grid.dim();
    if ms.len() < tensor_count(n) {
        return Err(Error::TooFewFunctionals {
            mode: "tensor",
            dim: n,
            required: tensor_count(n),
            given: ms.len(),
        });
    }
    let rs = ratios(ms, settings)?;
    let gd = gram(&rs, settings)?;
    let tm = theta_m(&rs, &gd)?;
    let (alpha, quality, degenerate) = alpha_from_nullspace(&tm.m, settings.null_gap_tolerance)?;
    let beta = beta_from_alpha(&rs, &gd, &alpha);
    Ok(Reconstruction {
        ratios: rs,
        gram: gd,
        theta_m: tm,
        alpha_beta: AlphaBeta {
            alpha,
            beta,
            quality,
            degenerate,
        },
    })
}

/// Runs the scalar-`a` pipeline (`J >= n + 1`) and returns `a^{-1} b`.
pub fn reconstruct_scalar(ms: &MeasurementSet, settings: &ReconSettings) -> Result<(RatioSet, VectorField)> {
    let n = ms.grid.dim();
    if ms.len() < n + 1 {
        return Err(Error::TooFewFunctionals {
            mode: "scalar",
            dim: n,
            required: n + 1,
            given: ms.len(),
        });
    }
    let rs = ratios(ms, settings)?;
    let gd = gram(&rs, settings)?;
    let ab = reconstruct_ab_scalar(&rs, &gd);
    Ok((rs, ab))
}

/// Relative residual of `alpha : D²v + beta . Dv` for ratio field `v`
/// (with derivatives), maximized over `mask`.
pub fn equation_residual(ab: &AlphaBeta, grad: &VectorField, hess: &SymTensorField, mask: &InteriorMask) -> f64 {
    let n = grad.dim();
    let mut worst = 0.0f64;
    for p in mask.points() {
        let second = sym_contract(n, ab.alpha.at(p), hess.at(p));
        let first: C64 = ab.beta.at(p).iter().zip(grad.at(p)).map(|(a, b)| a * b).sum();
        let scale = second.norm() + first.norm() + hess.at(p).iter().map(|v| v.norm()).fold(0.0, f64::max);
        worst = worst.max((second + first).norm() / scale.max(f64::MIN_POSITIVE));
    }
    worst
}
