//! Gauge-invariant data and per-modality coefficient recovery.
//!
//! Writing `a = B² â` with `det â = 1`, everything the functionals determine
//! is the triple
//!
//! * `â`,
//! * `G = b/B² + 2 â ∇ln(B/d)`,
//! * `q = -(∇·â∇v + (b/B²)·∇v) / v = c/B² - ∇·â∇B/B - (b/B²)·∇B/B`, with `v = H_1 B/d`.
//!
//! `G` comes straight from `(α̂, β)`: `G = β - ∇·α̂ - 2 α̂ ∇H_1/H_1`. The
//! resolvers add the modality's prior knowledge to close the remaining two
//! degrees of freedom. Integration constants are taken from coefficient
//! values on the boundary ring of the reconstruction box.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff;
use crate::error::{Error, Result};
use crate::field::{ScalarField, SymTensorField, VectorField, C64, ONE, ZERO};
use crate::forward::{apply_operator, BoundaryTrace, CoefficientSet, ForwardSolver};
use crate::grid::{interior_mask, Grid, InteriorMask};
use crate::linalg::{CsrMatrix, SolverSettings, SparseSolver};
use crate::recon::AlphaBeta;
use crate::synthesis::{constraint_count, tensor_count};

const NAN: C64 = C64::new(f64::NAN, f64::NAN);

/// Reconstructions abort when more than this fraction of the box is masked.
pub const MAX_MASKED_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaugeSettings {
    /// Width of the ring excluded around the reconstruction box.
    pub margin: usize,
    /// Relative curl level above which the transport data are flagged.
    pub curl_tolerance: f64,
    /// `|Im q|` below this fraction of its maximum blocks the Γ division.
    pub gamma_threshold: f64,
    #[serde(skip)]
    pub solver: SolverSettings,
}

impl Default for GaugeSettings {
    fn default() -> Self {
        GaugeSettings {
            margin: 2,
            curl_tolerance: 1e-2,
            gamma_threshold: 1e-2,
            solver: SolverSettings::default(),
        }
    }
}

/// Unknown counts behind the gauge freedom.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionAudit {
    pub dim: usize,
    /// Scalar unknowns in the invariant triple, `n(n+3)/2`.
    pub invariant_unknowns: usize,
    /// Scalar unknowns in `(a, b, c, d)`.
    pub coefficient_unknowns: usize,
    pub gauge_parameters: usize,
    pub statement: String,
}

impl DimensionAudit {
    pub fn new(dim: usize) -> DimensionAudit {
        let triple = constraint_count(dim) + dim + 1;
        let coeffs = dim * (dim + 1) / 2 + dim + 2;
        debug_assert_eq!(triple, tensor_count(dim));
        DimensionAudit {
            dim,
            invariant_unknowns: triple,
            coefficient_unknowns: coeffs,
            gauge_parameters: coeffs - triple,
            statement: format!(
                "{triple} reconstructed quantities (I_{dim}) for {coeffs} unknowns in (a, b, c, d) (I_{dim} + 2): \
                 two gauge parameters remain undetermined"
            ),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaugeReport {
    pub schema_version: u32,
    pub modality: String,
    pub residual_gauge: String,
    pub anchoring: String,
    /// Relative curl of the integrated gradient field.
    pub curl_residual: f64,
    pub curl_tolerance: f64,
    pub masked_fraction: f64,
    pub audit: DimensionAudit,
    pub warnings: Vec<String>,
}

/// The gauge-invariant payload recovered from the functionals.
#[derive(Clone, Debug)]
pub struct InvariantTriple {
    pub ahat: SymTensorField,
    pub g: VectorField,
    /// Available once `B/d` is fixed by a resolver.
    pub q: Option<ScalarField>,
    /// Points of the reconstruction box where `G` is defined.
    pub region: InteriorMask,
    pub masked_fraction: f64,
}

/// Ground-truth values supplying integration constants on the box boundary.
#[derive(Clone, Debug)]
pub struct GaugeAnchor {
    pub big_b: ScalarField,
    pub d: ScalarField,
}

impl GaugeAnchor {
    pub fn from_coefficients(co: &CoefficientSet, d: &ScalarField) -> GaugeAnchor {
        let (_, big_b) = decompose(&co.a);
        GaugeAnchor { big_b, d: d.clone() }
    }
}

/// Known scalar information on `a⁻¹b` for the generic resolver.
#[derive(Clone, Debug)]
pub enum BConstraint {
    Divergence(ScalarField),
    Component { axis: usize, values: ScalarField },
}

/// Coefficients recovered by one resolver.
#[derive(Clone, Debug)]
pub struct ResolvedCoefficients {
    pub a: SymTensorField,
    pub b: VectorField,
    pub c: ScalarField,
    pub d: ScalarField,
    pub big_b: ScalarField,
    pub a_inv_b: VectorField,
    pub gamma: Option<ScalarField>,
    /// Points where the Γ division was refused.
    pub gamma_flags: Vec<usize>,
    pub triple: InvariantTriple,
    /// Points where every returned field is defined.
    pub mask: InteriorMask,
    pub report: GaugeReport,
}

/// `a = B² â` with `det â = 1`, using principal roots.
pub fn decompose(a: &SymTensorField) -> (SymTensorField, ScalarField) {
    let g = a.grid;
    let n = g.dim();
    let k = a.values.len() / g.len();
    let mut ahat = Vec::with_capacity(a.values.len());
    let mut big_b = Vec::with_capacity(g.len());
    for p in 0..g.len() {
        let s = a.matrix_at(p).determinant().powf(1.0 / n as f64);
        ahat.extend(a.values[p * k..(p + 1) * k].iter().map(|v| v / s));
        big_b.push(s.sqrt());
    }
    (SymTensorField { grid: g, values: ahat }, ScalarField { grid: g, values: big_b })
}

fn flux(ahat: &SymTensorField) -> CoefficientSet {
    let g = ahat.grid;
    CoefficientSet {
        a: ahat.clone(),
        b: VectorField::zeros(&g),
        c: ScalarField::constant(&g, ZERO),
    }
}

fn solve_small(m: DMatrix<C64>, v: &[C64]) -> Vec<C64> {
    match m.try_inverse() {
        Some(inv) => (0..v.len()).map(|i| (0..v.len()).map(|j| inv[(i, j)] * v[j]).sum()).collect(),
        None => vec![NAN; v.len()],
    }
}

/// `â⁻¹ F` pointwise.
fn apply_inverse(ahat: &SymTensorField, f: &VectorField) -> VectorField {
    let g = f.grid;
    let values = (0..g.len())
        .into_par_iter()
        .flat_map_iter(|p| solve_small(ahat.matrix_at(p), f.at(p)))
        .collect();
    VectorField { grid: g, values }
}

/// `â F` pointwise.
fn apply_tensor(ahat: &SymTensorField, f: &VectorField) -> VectorField {
    let g = f.grid;
    let n = g.dim();
    let values = (0..g.len())
        .flat_map(|p| {
            let m = ahat.matrix_at(p);
            let v = f.at(p);
            (0..n).map(move |i| (0..n).map(|j| m[(i, j)] * v[j]).sum::<C64>()).collect::<Vec<_>>()
        })
        .collect();
    VectorField { grid: g, values }
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `∇f/f`, avoiding branch cuts of the complex logarithm.
fn log_gradient(f: &ScalarField) -> VectorField {
    let mut grad = diff::gradient(f);
    let n = f.grid.dim();
    for p in 0..f.grid.len() {
        for k in 0..n {
            grad.values[p * n + k] /= f.values[p];
        }
    }
    grad
}

fn blank_outside<T: Clone>(values: &mut [T], ncomp: usize, keep: impl Fn(usize) -> bool, fill: T) {
    for (p, chunk) in values.chunks_mut(ncomp).enumerate() {
        if !keep(p) {
            chunk.iter_mut().for_each(|v| *v = fill.clone());
        }
    }
}

fn finite(v: &[C64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Assembles `(â, G)` on the reconstruction box `margin` steps inside the grid.
pub fn invariant_triple(ab: &AlphaBeta, h1: &ScalarField, margin: usize) -> Result<InvariantTriple> {
    let g = ab.alpha.grid;
    let n = g.dim();
    let boxed = interior_mask(&g, margin)?;
    let div_alpha = diff::divergence_tensor(&ab.alpha);
    let dlog = log_gradient(h1);
    let two_a_dlog = apply_tensor(&ab.alpha, &dlog);
    let mut gvals = vec![NAN; g.len() * n];
    let mut flags = vec![false; g.len()];
    let mut masked = 0usize;
    for p in boxed.points() {
        let out: Vec<C64> = (0..n)
            .map(|k| ab.beta.at(p)[k] - div_alpha.at(p)[k] - 2.0 * two_a_dlog.at(p)[k])
            .collect();
        if finite(&out) && finite(ab.alpha.at(p)) {
            gvals[p * n..(p + 1) * n].copy_from_slice(&out);
            flags[p] = true;
        } else {
            masked += 1;
        }
    }
    let masked_fraction = masked as f64 / boxed.count() as f64;
    if masked_fraction > MAX_MASKED_FRACTION {
        return Err(Error::Aborted { masked: masked_fraction });
    }
    Ok(InvariantTriple {
        ahat: ab.alpha.clone(),
        g: VectorField { grid: g, values: gvals },
        q: None,
        region: InteriorMask::from_flags(&g, margin, flags),
        masked_fraction,
    })
}

/// Result of a least-squares gradient integration.
#[derive(Clone, Debug)]
pub struct Integration {
    /// Potential on the region; NaN elsewhere.
    pub psi: ScalarField,
    pub curl_residual: f64,
}

/// Relative curl of `f` over the interior of `region`.
pub fn curl_residual(f: &VectorField, region: &InteriorMask) -> f64 {
    let g = f.grid;
    let n = g.dim();
    let jac = diff::jacobian(f);
    let inner = region.erode();
    let (mut curl, mut grad, mut mag) = (0.0f64, 0.0f64, 0.0f64);
    for p in inner.points() {
        let j = &jac[p * n * n..(p + 1) * n * n];
        if !finite(j) {
            continue;
        }
        for i in 0..n {
            for k in 0..n {
                grad = grad.max(j[i * n + k].norm());
                if i < k {
                    curl = curl.max((j[i * n + k] - j[k * n + i]).norm());
                }
            }
        }
        mag = f.at(p).iter().map(|v| v.norm()).fold(mag, f64::max);
    }
    let len = g.extent();
    curl / (grad + mag / len + 1.0 / (len * len))
}

/// Least-squares potential of `f` over `region`: `ψ_q - ψ_p` matches the
/// edge-averaged `f` along every grid edge inside the region, with `ψ` fixed to
/// `anchor` on the region's outer ring. `source` is added to the discrete
/// divergence.
pub fn integrate_gradient(
    f: &VectorField,
    source: Option<&ScalarField>,
    region: &InteriorMask,
    anchor: &ScalarField,
    settings: &SolverSettings,
) -> Result<Integration> {
    let g = f.grid;
    let n = g.dim();
    let ring = region.margin;
    let valid = |p: usize| region.contains(p) && finite(f.at(p));
    let mut index = vec![usize::MAX; g.len()];
    let mut unknowns = Vec::new();
    for p in 0..g.len() {
        if valid(p) && g.margin_of(p) > ring {
            index[p] = unknowns.len();
            unknowns.push(p);
        }
    }
    let mut rows = Vec::with_capacity(unknowns.len());
    let mut rhs = Vec::with_capacity(unknowns.len());
    for &p in &unknowns {
        let mut row = Vec::with_capacity(2 * n + 1);
        let mut diag = ZERO;
        let mut r = source.map_or(ZERO, |s| s.values[p]);
        for k in 0..n {
            let (s, h) = (g.stride(k), g.spacing()[k]);
            let w = 1.0 / (h * h);
            for (q, sign) in [(p + s, 1.0), (p - s, -1.0)] {
                if !valid(q) {
                    continue;
                }
                diag -= w;
                r += sign * 0.5 * (f.at(p)[k] + f.at(q)[k]) / h;
                if index[q] != usize::MAX {
                    row.push((index[q], C64::new(w, 0.0)));
                } else {
                    let a = anchor.values[q];
                    if !a.is_finite() {
                        return Err(Error::Resolution(format!("anchor undefined at point {q}")));
                    }
                    r -= w * a;
                }
            }
        }
        row.push((index[p], diag));
        rows.push(row);
        rhs.push(r);
    }
    let solver = SparseSolver::new(CsrMatrix::from_rows(rows), settings).map_err(|e| match e {
        Error::Singular { row, .. } => Error::Resolution(format!(
            "gradient integration has a region without boundary anchor (unknown {row})"
        )),
        other => other,
    })?;
    let x = solver.solve(&rhs)?;
    let mut psi = vec![NAN; g.len()];
    for p in 0..g.len() {
        if valid(p) && g.margin_of(p) == ring {
            psi[p] = anchor.values[p];
        }
    }
    for (k, &p) in unknowns.iter().enumerate() {
        psi[p] = x[k];
    }
    Ok(Integration {
        psi: ScalarField { grid: g, values: psi },
        curl_residual: curl_residual(f, region),
    })
}

/// Trapezoid integration of `∂_axis ψ = gk` along grid lines of the region,
/// starting from the anchor on the low face. Returns the potential and the
/// relative mismatch against the anchor on the high face.
fn integrate_along(gk: &ScalarField, axis: usize, region: &InteriorMask, anchor: &ScalarField) -> (ScalarField, f64) {
    let g = gk.grid;
    let ring = region.margin;
    let (s, h) = (g.stride(axis), g.spacing()[axis]);
    let last = g.shape()[axis] - 1 - ring;
    let mut psi = vec![NAN; g.len()];
    let (mut mismatch, mut scale) = (0.0f64, 0.0f64);
    for start in 0..g.len() {
        if g.multi_index(start)[axis] != ring || g.margin_of(start) < ring {
            continue;
        }
        let mut p = start;
        psi[p] = anchor.values[p];
        for _ in ring..last {
            let q = p + s;
            psi[q] = psi[p] + 0.5 * h * (gk.values[p] + gk.values[q]);
            p = q;
        }
        if region.contains(p) {
            mismatch = mismatch.max((psi[p] - anchor.values[p]).norm());
            scale = scale.max(anchor.values[p].norm());
        }
    }
    blank_outside(&mut psi, 1, |p| region.contains(p), NAN);
    (ScalarField { grid: g, values: psi }, mismatch / scale.max(1.0))
}

fn log_field(f: &ScalarField) -> ScalarField {
    f.map(|v| v.ln())
}

/// `q = -(∇·â∇v + w·∇v)/v` at points `margin + 1` inside, NaN elsewhere.
fn q_slot(ahat: &SymTensorField, v: &ScalarField, drift: Option<&VectorField>, margin: usize) -> ScalarField {
    let g = v.grid;
    let lv = apply_operator(&flux(ahat), v);
    let grad = drift.map(|_| diff::gradient(v));
    let values = (0..g.len())
        .map(|p| {
            if g.margin_of(p) <= margin {
                return NAN;
            }
            let extra = match (drift, &grad) {
                (Some(w), Some(gv)) => dot(w.at(p), gv.at(p)),
                _ => ZERO,
            };
            -(lv.values[p] + extra) / v.values[p]
        })
        .collect();
    ScalarField { grid: g, values }
}

/// Solves `∇·â∇B + qB = source` on the box `margin` inside with Dirichlet data
/// from `boundary`; NaN outside the box.
fn solve_inner(
    ahat: &SymTensorField,
    q: Option<&ScalarField>,
    source: Option<&ScalarField>,
    boundary: &ScalarField,
    margin: usize,
    settings: &SolverSettings,
) -> Result<ScalarField> {
    let g = ahat.grid;
    let sub = g.shrink(margin)?;
    let a = ahat.restrict(margin)?;
    let c = match q {
        Some(q) => q.restrict(margin)?,
        None => ScalarField::constant(&sub, ZERO),
    };
    let src = source.map(|s| s.restrict(margin)).transpose()?;
    let bnd = boundary.restrict(margin)?;
    let defined = finite(&a.values)
        && finite(&c.values)
        && src.as_ref().is_none_or(|s| finite(&s.values))
        && sub.boundary_points().iter().all(|&p| bnd.values[p].is_finite());
    if !defined {
        return Err(Error::Resolution("masked points inside the amplitude solve region".into()));
    }
    let co = CoefficientSet {
        a,
        b: VectorField::zeros(&sub),
        c,
    };
    let solver = ForwardSolver::new(&co, settings).map_err(|e| match e {
        Error::Singular { row, pivot } => Error::Resolution(format!(
            "amplitude equation is singular (row {row}, pivot {pivot:.3e})"
        )),
        other => other,
    })?;
    let u = solver.solve_with_source(&BoundaryTrace::from_field(&bnd), src.as_ref())?;
    let mut out = vec![NAN; g.len()];
    for (k, v) in u.values.into_iter().enumerate() {
        out[g.parent_index(margin, &sub, k)] = v;
    }
    Ok(ScalarField { grid: g, values: out })
}

fn half_inverse_g(tri: &InvariantTriple) -> VectorField {
    let mut f = apply_inverse(&tri.ahat, &tri.g);
    f.values.iter_mut().for_each(|v| *v *= 0.5);
    let n = f.grid.dim();
    blank_outside(&mut f.values, n, |p| tri.region.contains(p), NAN);
    f
}

fn ratio_anchor(anchor: &GaugeAnchor) -> ScalarField {
    log_field(&anchor.big_b.zip_with(&anchor.d, |b, d| b / d))
}

fn scale_tensor(ahat: &SymTensorField, s: &ScalarField) -> SymTensorField {
    ahat.scale(s)
}

fn result_mask(g: &Grid, margin: usize, fields: &[&[C64]], ncomp: &[usize]) -> InteriorMask {
    let flags = (0..g.len())
        .map(|p| {
            g.margin_of(p) > margin
                && fields.iter().zip(ncomp).all(|(f, &k)| finite(&f[p * k..(p + 1) * k]))
        })
        .collect();
    InteriorMask::from_flags(g, margin + 1, flags)
}

fn check_real_positive(b: &ScalarField, mask_margin: usize) -> Result<()> {
    let g = b.grid;
    for p in 0..g.len() {
        if g.margin_of(p) >= mask_margin {
            let v = b.values[p];
            if v.is_finite() && !(v.re > 0.0) {
                return Err(Error::Resolution(format!("recovered amplitude B is not positive at point {p}")));
            }
        }
    }
    Ok(())
}

fn report(
    modality: &str,
    residual_gauge: &str,
    anchoring: &str,
    curl: f64,
    tri: &InvariantTriple,
    settings: &GaugeSettings,
    mut warnings: Vec<String>,
) -> GaugeReport {
    if curl > settings.curl_tolerance {
        warnings.push(format!(
            "curl residual {curl:.3e} exceeds {:.1e}: data may not come from the model class",
            settings.curl_tolerance
        ));
    }
    GaugeReport {
        schema_version: 1,
        modality: modality.into(),
        residual_gauge: residual_gauge.into(),
        anchoring: anchoring.into(),
        curl_residual: curl,
        curl_tolerance: settings.curl_tolerance,
        masked_fraction: tri.masked_fraction,
        audit: DimensionAudit::new(tri.ahat.grid.dim()),
        warnings,
    }
}

/// Elastography: `d = 1`, `b = 0`.
pub fn resolve_elastography(
    tri: &InvariantTriple,
    h1: &ScalarField,
    anchor: &GaugeAnchor,
    settings: &GaugeSettings,
) -> Result<ResolvedCoefficients> {
    let g = h1.grid;
    let m = tri.region.margin;
    let f = half_inverse_g(tri);
    let integ = integrate_gradient(&f, None, &tri.region, &log_field(&anchor.big_b), &settings.solver)?;
    let big_b = integ.psi.map(|v| v.exp());
    let v = big_b.zip_with(h1, |b, h| b * h);
    let q = q_slot(&tri.ahat, &v, None, m);
    let lb = apply_operator(&flux(&tri.ahat), &big_b);
    let c = ScalarField {
        grid: g,
        values: (0..g.len())
            .map(|p| {
                let b = big_b.values[p];
                if g.margin_of(p) > m {
                    b * b * q.values[p] + b * lb.values[p]
                } else {
                    NAN
                }
            })
            .collect(),
    };
    let a = scale_tensor(&tri.ahat, &big_b.map(|b| b * b));
    let k = a.values.len() / g.len();
    let mask = result_mask(&g, m, &[&a.values, &c.values], &[k, 1]);
    let mut triple = tri.clone();
    triple.q = Some(q);
    let rep = report(
        "elastography",
        "none: (a, c) are determined once d = 1 and b = 0",
        "ln B fixed to its boundary values on the reconstruction box",
        integ.curl_residual,
        tri,
        settings,
        Vec::new(),
    );
    Ok(ResolvedCoefficients {
        a,
        b: VectorField::zeros(&g),
        c,
        d: ScalarField::constant(&g, ONE),
        big_b,
        a_inv_b: VectorField::zeros(&g),
        gamma: None,
        gamma_flags: Vec::new(),
        triple,
        mask,
        report: rep,
    })
}

/// QPAT with known Γ: `b = 0`, `d = Γc`.
pub fn resolve_qpat(
    tri: &InvariantTriple,
    h1: &ScalarField,
    gamma: &ScalarField,
    anchor: &GaugeAnchor,
    settings: &GaugeSettings,
) -> Result<ResolvedCoefficients> {
    let g = h1.grid;
    let m = tri.region.margin;
    let f = half_inverse_g(tri);
    let integ = integrate_gradient(&f, None, &tri.region, &ratio_anchor(anchor), &settings.solver)?;
    let rho = integ.psi.map(|v| v.exp());
    let v = rho.zip_with(h1, |r, h| r * h);
    let q = q_slot(&tri.ahat, &v, None, m);
    let source = ScalarField {
        grid: g,
        values: (0..g.len()).map(|p| 1.0 / (gamma.values[p] * rho.values[p])).collect(),
    };
    let big_b = solve_inner(&tri.ahat, Some(&q), Some(&source), &anchor.big_b, m + 1, &settings.solver)?;
    check_real_positive(&big_b, m + 1)?;
    let c = big_b.zip_with(&source, |b, s| b * s);
    let d = gamma.zip_with(&c, |a, b| a * b);
    let a = scale_tensor(&tri.ahat, &big_b.map(|b| b * b));
    let k = a.values.len() / g.len();
    let mask = result_mask(&g, m, &[&a.values, &c.values], &[k, 1]);
    let mut triple = tri.clone();
    triple.q = Some(q);
    let rep = report(
        "qpat",
        "none: (B, c) are determined for the given Grüneisen field",
        "ln(B/d) and B fixed to their boundary values on the reconstruction box",
        integ.curl_residual,
        tri,
        settings,
        Vec::new(),
    );
    Ok(ResolvedCoefficients {
        a,
        b: VectorField::zeros(&g),
        c,
        d,
        big_b,
        a_inv_b: VectorField::zeros(&g),
        gamma: Some(gamma.clone()),
        gamma_flags: Vec::new(),
        triple,
        mask,
        report: rep,
    })
}

/// `Γ = κ / Im q` on `mask`, refusing points with `|Im q|` below
/// `threshold * max |Im q|`.
pub fn qtat_gamma(kappa: &ScalarField, q: &ScalarField, mask: &InteriorMask, threshold: f64) -> (ScalarField, Vec<usize>) {
    let g = q.grid;
    let im_max = mask
        .points()
        .map(|p| q.values[p].im.abs())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let mut flags = Vec::new();
    let values = (0..g.len())
        .map(|p| {
            if !mask.contains(p) {
                return NAN;
            }
            let im = q.values[p].im;
            if !(im.abs() >= threshold * im_max) || im_max == 0.0 {
                flags.push(p);
                NAN
            } else {
                kappa.values[p] / im
            }
        })
        .collect();
    (ScalarField { grid: g, values }, flags)
}

/// QTAT with real `a`: `b = 0`, `d = Γ Im(c) conj(u_1)`.
pub fn resolve_qtat(
    tri: &InvariantTriple,
    h1: &ScalarField,
    anchor: &GaugeAnchor,
    a_real: bool,
    settings: &GaugeSettings,
) -> Result<ResolvedCoefficients> {
    if !a_real {
        return Err(Error::Resolution(
            "Γ separation needs a real-valued a; only the invariant pair is available".into(),
        ));
    }
    let g = h1.grid;
    let m = tri.region.margin;
    let mut real = tri.clone();
    real.ahat.values.iter_mut().for_each(|v| v.im = 0.0);
    let tri = &real;
    let f = half_inverse_g(tri);
    let integ = integrate_gradient(&f, None, &tri.region, &ratio_anchor(anchor), &settings.solver)?;
    let rho = integ.psi.map(|v| v.exp());
    let v = rho.zip_with(h1, |r, h| r * h);
    let q = q_slot(&tri.ahat, &v, None, m);
    let kappa = h1.zip_with(&v, |h, v| h / v.norm_sqr());
    let inner = InteriorMask::from_flags(&g, m + 1, (0..g.len()).map(|p| g.margin_of(p) > m && q.values[p].is_finite()).collect());
    let (gamma, flags) = qtat_gamma(&kappa, &q, &inner, settings.gamma_threshold);
    // representative amplitude: â-harmonic extension of its boundary values
    let big_b = solve_inner(&tri.ahat, None, None, &anchor.big_b, m + 1, &settings.solver)?;
    check_real_positive(&big_b, m + 1)?;
    let lb = apply_operator(&flux(&tri.ahat), &big_b);
    let c = ScalarField {
        grid: g,
        values: (0..g.len())
            .map(|p| {
                let b = big_b.values[p];
                if g.margin_of(p) > m { b * b * q.values[p] + b * lb.values[p] } else { NAN }
            })
            .collect(),
    };
    let d = big_b.zip_with(&rho, |b, r| b / r);
    let a = scale_tensor(&tri.ahat, &big_b.map(|b| b * b));
    let k = a.values.len() / g.len();
    let mask = result_mask(&g, m, &[&a.values, &c.values], &[k, 1]);
    let mut warnings = Vec::new();
    if !flags.is_empty() {
        warnings.push(format!("Γ undetermined at {} points where Im q vanishes", flags.len()));
    }
    let mut triple = tri.clone();
    triple.q = Some(q);
    let rep = report(
        "qtat",
        "Γ determined; (B, c) only up to transforms preserving c/B² - ∇·â∇B/B \
         (returned B is the â-harmonic extension of its boundary values)",
        "ln(B/d) and B fixed to their boundary values on the reconstruction box",
        integ.curl_residual,
        tri,
        settings,
        warnings,
    );
    Ok(ResolvedCoefficients {
        a,
        b: VectorField::zeros(&g),
        c,
        d,
        big_b,
        a_inv_b: VectorField::zeros(&g),
        gamma: Some(gamma),
        gamma_flags: flags,
        triple,
        mask,
        report: rep,
    })
}

/// One scalar condition on `a⁻¹b` fixes `B/d`, and with it `a⁻¹b` and `q`.
pub fn resolve_generic_b(
    tri: &InvariantTriple,
    h1: &ScalarField,
    constraint: &BConstraint,
    anchor: &GaugeAnchor,
    settings: &GaugeSettings,
) -> Result<ResolvedCoefficients> {
    let g = h1.grid;
    let n = g.dim();
    let m = tri.region.margin;
    let f = half_inverse_g(tri);
    let log_anchor = ratio_anchor(anchor);
    let mut warnings = Vec::new();
    let (psi, curl) = match constraint {
        BConstraint::Divergence(s) => {
            let src = s.map(|v| -0.5 * v);
            let integ = integrate_gradient(&f, Some(&src), &tri.region, &log_anchor, &settings.solver)?;
            (integ.psi, integ.curl_residual)
        }
        BConstraint::Component { axis, values } => {
            if *axis >= n {
                return Err(Error::Config(format!("constraint axis {axis} outside dimension {n}")));
            }
            let gk = ScalarField {
                grid: g,
                values: (0..g.len()).map(|p| f.at(p)[*axis] - 0.5 * values.values[p]).collect(),
            };
            let (psi, mismatch) = integrate_along(&gk, *axis, &tri.region, &log_anchor);
            if mismatch > settings.curl_tolerance {
                warnings.push(format!(
                    "constraint disagrees with boundary data: end-of-line mismatch {mismatch:.3e}"
                ));
            }
            (psi, curl_residual(&f, &tri.region))
        }
    };
    let grad_psi = diff::gradient(&psi);
    let ainv_g = apply_inverse(&tri.ahat, &tri.g);
    let mut w = VectorField {
        grid: g,
        values: (0..g.len() * n).map(|i| ainv_g.values[i] - 2.0 * grad_psi.values[i]).collect(),
    };
    blank_outside(&mut w.values, n, |p| g.margin_of(p) > m, NAN);
    if let BConstraint::Divergence(s) = constraint {
        let div = diff::divergence(&w);
        let inner = interior_mask(&g, m + 2)?;
        let (mut err, mut scale) = (0.0f64, 1.0f64);
        for p in inner.points() {
            if div.values[p].is_finite() {
                err = err.max((div.values[p] - s.values[p]).norm());
                scale = scale.max(s.values[p].norm());
            }
        }
        if err / scale > settings.curl_tolerance {
            warnings.push(format!("recovered divergence of a⁻¹b misses the constraint by {:.3e}", err / scale));
        }
    }
    let rho = psi.map(|v| v.exp());
    let v = rho.zip_with(h1, |r, h| r * h);
    let drift = apply_tensor(&tri.ahat, &w);
    let q = q_slot(&tri.ahat, &v, Some(&drift), m);
    let big_b = solve_inner(&tri.ahat, None, None, &anchor.big_b, m + 1, &settings.solver)?;
    let lb = apply_operator(&flux(&tri.ahat), &big_b);
    let grad_b = diff::gradient(&big_b);
    let c = ScalarField {
        grid: g,
        values: (0..g.len())
            .map(|p| {
                let bb = big_b.values[p];
                if g.margin_of(p) > m {
                    bb * bb * q.values[p] + bb * lb.values[p] + bb * dot(drift.at(p), grad_b.at(p))
                } else {
                    NAN
                }
            })
            .collect(),
    };
    let b2 = big_b.map(|b| b * b);
    let a = scale_tensor(&tri.ahat, &b2);
    let b = VectorField {
        grid: g,
        values: (0..g.len() * n).map(|i| drift.values[i] * b2.values[i / n]).collect(),
    };
    let d = big_b.zip_with(&rho, |b, r| b / r);
    let k = a.values.len() / g.len();
    let mask = result_mask(&g, m, &[&a.values, &c.values, &w.values], &[k, 1, n]);
    let mut triple = tri.clone();
    triple.q = Some(q);
    let rep = report(
        "generic",
        "a⁻¹b and B/d determined; (B, c, d) only up to transforms preserving B/d and \
         c/B² - ∇·â∇B/B - (b/B²)·∇B/B (returned B is the â-harmonic extension of its boundary values)",
        "ln(B/d) and B fixed to their boundary values on the reconstruction box",
        curl,
        tri,
        settings,
        warnings,
    );
    Ok(ResolvedCoefficients {
        a,
        b,
        c,
        d,
        big_b,
        a_inv_b: w,
        gamma: None,
        gamma_flags: Vec::new(),
        triple,
        mask,
        report: rep,
    })
}

/// The invariant triple computed directly from ground-truth coefficients.
pub fn triple_from_coefficients(co: &CoefficientSet, d: &ScalarField) -> Result<InvariantTriple> {
    let g = *co.grid();
    let n = g.dim();
    let (ahat, big_b) = decompose(&co.a);
    let b2 = big_b.map(|b| b * b);
    let ratio = big_b.zip_with(d, |b, d| b / d);
    let dlog = log_gradient(&ratio);
    let a_dlog = apply_tensor(&ahat, &dlog);
    let drift = VectorField {
        grid: g,
        values: (0..g.len() * n).map(|i| co.b.values[i] / b2.values[i / n]).collect(),
    };
    let gvec = VectorField {
        grid: g,
        values: (0..g.len() * n).map(|i| drift.values[i] + 2.0 * a_dlog.values[i]).collect(),
    };
    let lb = apply_operator(&flux(&ahat), &big_b);
    let grad_b = diff::gradient(&big_b);
    let q = ScalarField {
        grid: g,
        values: (0..g.len())
            .map(|p| {
                if g.is_boundary(p) {
                    return NAN;
                }
                let bb = big_b.values[p];
                co.c.values[p] / b2.values[p] - lb.values[p] / bb - dot(drift.at(p), grad_b.at(p)) / bb
            })
            .collect(),
    };
    let region = interior_mask(&g, 1)?;
    Ok(InvariantTriple {
        ahat,
        g: gvec,
        q: Some(q),
        region,
        masked_fraction: 0.0,
    })
}

/// Slot-wise comparison of two coefficient sets through their invariant triples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaugeComparison {
    pub equivalent: bool,
    /// Residuals for `(â, G, q)`, each `max |x1 - x2| / max(1, sup |x1|, sup |x2|)`.
    pub residuals: [f64; 3],
    pub audit: DimensionAudit,
}

fn slot_residual(x: &[C64], y: &[C64], ncomp: usize, mask: &InteriorMask) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 1.0f64);
    for p in mask.points() {
        for k in 0..ncomp {
            let (a, b) = (x[p * ncomp + k], y[p * ncomp + k]);
            diff = diff.max((a - b).norm());
            scale = scale.max(a.norm()).max(b.norm());
        }
    }
    diff / scale
}

pub fn gauge_equivalent(
    first: (&CoefficientSet, &ScalarField),
    second: (&CoefficientSet, &ScalarField),
    tol: f64,
) -> Result<GaugeComparison> {
    let g = *first.0.grid();
    if !g.compatible(second.0.grid()) {
        return Err(Error::Config("coefficient sets live on different grids".into()));
    }
    let t1 = triple_from_coefficients(first.0, first.1)?;
    let t2 = triple_from_coefficients(second.0, second.1)?;
    let mask = interior_mask(&g, 1)?;
    let n = g.dim();
    let k = t1.ahat.values.len() / g.len();
    let q1 = t1.q.as_ref().map(|q| q.values.as_slice()).unwrap_or_default();
    let q2 = t2.q.as_ref().map(|q| q.values.as_slice()).unwrap_or_default();
    let residuals = [
        slot_residual(&t1.ahat.values, &t2.ahat.values, k, &mask),
        slot_residual(&t1.g.values, &t2.g.values, n, &mask),
        slot_residual(q1, q2, 1, &mask),
    ];
    Ok(GaugeComparison {
        equivalent: residuals.iter().all(|&r| r <= tol),
        residuals,
        audit: DimensionAudit::new(n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::{reconstruct, ReconSettings};
    use crate::synthesis::{default_traces, synthesize, Modality};

    fn sup_on(f: &[C64], ncomp: usize, mask: &InteriorMask) -> f64 {
        mask.points()
            .flat_map(|p| (0..ncomp).map(move |k| p * ncomp + k))
            .map(|i| f[i].norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn audit_counts() {
        let a2 = DimensionAudit::new(2);
        assert_eq!((a2.invariant_unknowns, a2.coefficient_unknowns, a2.gauge_parameters), (5, 7, 2));
        let a3 = DimensionAudit::new(3);
        assert_eq!((a3.invariant_unknowns, a3.coefficient_unknowns, a3.gauge_parameters), (9, 11, 2));
    }

    #[test]
    fn decompose_unit_determinant() {
        let g = Grid::unit(2, 5).unwrap();
        let a = SymTensorField::from_fn(&g, |x| vec![C64::new(2.0 + x[0], 0.0), C64::new(1.0, 0.0), C64::new(0.3, 0.0)]);
        let (ahat, b) = decompose(&a);
        for p in 0..g.len() {
            assert!((ahat.matrix_at(p).determinant() - ONE).norm() < 1e-14);
            let back = ahat.matrix_at(p) * (b.values[p] * b.values[p]);
            assert!((back - a.matrix_at(p)).norm() < 1e-13);
        }
    }

    #[test]
    fn integration_recovers_quadratic_potential() {
        let g = Grid::unit(2, 17).unwrap();
        let psi = ScalarField::from_real(&g, |x| x[0] * x[0] + 0.5 * x[0] * x[1] - x[1]);
        let f = diff::gradient(&psi);
        let region = interior_mask(&g, 2).unwrap();
        let out = integrate_gradient(&f, None, &region, &psi, &SolverSettings::default()).unwrap();
        for p in region.points() {
            assert!((out.psi.values[p] - psi.values[p]).norm() < 1e-12);
        }
        assert!(out.curl_residual < 1e-12);
    }

    #[test]
    fn curl_warning_fires() {
        let g = Grid::unit(2, 17).unwrap();
        let f = VectorField::from_fn(&g, |x| vec![C64::new(-x[1], 0.0), C64::new(x[0], 0.0)]);
        let region = interior_mask(&g, 2).unwrap();
        assert!(curl_residual(&f, &region) > 0.1);
    }

    #[test]
    fn gauge_equivalence_examples() {
        let g = Grid::unit(2, 9).unwrap();
        let a = ScalarField::from_real(&g, |x| 1.0 + 0.2 * x[0] * x[1]);
        let c = ScalarField::from_real(&g, |x| 1.0 + x[1]);
        let co = CoefficientSet::isotropic(&a, &c);
        let d = ScalarField::constant(&g, ONE);
        let same = gauge_equivalent((&co, &d), (&co, &d), 1e-12).unwrap();
        assert!(same.equivalent && same.residuals == [0.0; 3]);
        let lam = 1.7;
        let scaled = CoefficientSet {
            a: co.a.scale(&ScalarField::constant(&g, C64::new(lam * lam, 0.0))),
            b: co.b.clone(),
            c: co.c.map(|v| v * lam * lam),
        };
        let dl = d.map(|v| v * lam);
        let eq = gauge_equivalent((&co, &d), (&scaled, &dl), 1e-12).unwrap();
        assert!(eq.equivalent, "{:?}", eq.residuals);
        let mut other = co.clone();
        other.c = c.map(|v| v * 1.1);
        let ne = gauge_equivalent((&co, &d), (&other, &d), 1e-12).unwrap();
        assert!(!ne.equivalent && ne.residuals[2] > 1e-3 && ne.residuals[0] == 0.0);
    }

    #[test]
    fn qtat_gamma_flags_zero_locus() {
        let g = Grid::unit(2, 65).unwrap();
        let q = ScalarField::from_fn(&g, |x| C64::new(0.3, x[0] - 0.5));
        let kappa = q.map(|v| C64::new(2.0 * v.im, 0.0));
        let mask = interior_mask(&g, 3).unwrap();
        let (gamma, flags) = qtat_gamma(&kappa, &q, &mask, 1e-2);
        for &p in &flags {
            assert_eq!(g.coords(p)[0], 0.5);
        }
        assert_eq!(flags.len(), 65 - 6);
        for p in mask.points().filter(|p| !flags.contains(p)) {
            assert!((gamma.values[p] - 2.0).norm() < 1e-14);
        }
    }

    fn pipeline(co: &CoefficientSet, modality: &Modality) -> (crate::synthesis::Synthesis, InvariantTriple) {
        let g = *co.grid();
        let syn = synthesize(co, modality, &default_traces(&g, 5).unwrap(), &SolverSettings::default()).unwrap();
        let rec = reconstruct(&syn.measurements, &ReconSettings::default()).unwrap();
        let tri = invariant_triple(&rec.alpha_beta, &syn.measurements.functionals[0], 2).unwrap();
        (syn, tri)
    }

    #[test]
    fn harmonic_triple_is_trivial() {
        let g = Grid::unit(2, 17).unwrap();
        let co = CoefficientSet::isotropic(&ScalarField::constant(&g, ONE), &ScalarField::constant(&g, ZERO));
        let (syn, tri) = pipeline(&co, &Modality::Elastography);
        assert!(sup_on(&tri.g.values, 2, &tri.region) < 1e-8);
        let anchor = GaugeAnchor::from_coefficients(&co, &syn.d);
        let res = resolve_elastography(&tri, &syn.measurements.functionals[0], &anchor, &GaugeSettings::default()).unwrap();
        let q = res.triple.q.as_ref().unwrap();
        assert!(sup_on(&q.values, 1, &res.mask) < 1e-8);
        for p in res.mask.points() {
            assert!((res.big_b.values[p] - ONE).norm() < 1e-10);
            assert!(res.c.values[p].norm() < 1e-8);
        }
        assert_eq!(res.report.audit.gauge_parameters, 2);
    }

    #[test]
    fn exponential_amplitude_gives_constant_g() {
        let g = Grid::unit(2, 33).unwrap();
        let a = ScalarField::from_real(&g, |x| (2.0 * x[0]).exp());
        let co = CoefficientSet::isotropic(&a, &ScalarField::constant(&g, C64::new(1.0, 0.0)));
        let (_, tri) = pipeline(&co, &Modality::Elastography);
        for p in tri.region.points() {
            assert!((tri.g.at(p)[0] - 2.0).norm() < 2e-2, "{}", tri.g.at(p)[0]);
            assert!(tri.g.at(p)[1].norm() < 2e-2);
        }
    }

    #[test]
    fn qpat_constant_coefficients() {
        let g = Grid::unit(2, 17).unwrap();
        let co = CoefficientSet::isotropic(&ScalarField::constant(&g, ONE), &ScalarField::constant(&g, ONE));
        let gamma = ScalarField::constant(&g, ONE);
        let (syn, tri) = pipeline(&co, &Modality::Qpat { gamma: gamma.clone() });
        let anchor = GaugeAnchor::from_coefficients(&co, &syn.d);
        let res = resolve_qpat(&tri, &syn.measurements.functionals[0], &gamma, &anchor, &GaugeSettings::default()).unwrap();
        for p in res.mask.points() {
            // the solutions are not polynomial, so only discretization accuracy is available
            assert!((res.big_b.values[p] - ONE).norm() < 1e-3);
            assert!((res.c.values[p] - ONE).norm() < 1e-3);
        }
    }

    #[test]
    fn qtat_constant_coefficients() {
        let g = Grid::unit(2, 17).unwrap();
        let c = ScalarField::constant(&g, C64::new(1.0, 1.0));
        let co = CoefficientSet::isotropic(&ScalarField::constant(&g, ONE), &c);
        let gamma = ScalarField::constant(&g, ONE);
        let (syn, tri) = pipeline(&co, &Modality::Qtat { gamma });
        let anchor = GaugeAnchor::from_coefficients(&co, &syn.d);
        let res = resolve_qtat(&tri, &syn.measurements.functionals[0], &anchor, true, &GaugeSettings::default()).unwrap();
        assert!(res.gamma_flags.is_empty());
        let gm = res.gamma.as_ref().unwrap();
        for p in res.mask.points() {
            assert!((gm.values[p] - ONE).norm() < 1e-2, "{}", gm.values[p]);
        }
        assert!(resolve_qtat(&tri, &syn.measurements.functionals[0], &anchor, false, &GaugeSettings::default()).is_err());
    }

    #[test]
    fn generic_zero_divergence_matches_elastography() {
        let g = Grid::unit(2, 33).unwrap();
        let a = ScalarField::from_real(&g, |x| 1.0 + 0.2 * x[0] * x[1]);
        let co = CoefficientSet::isotropic(&a, &ScalarField::constant(&g, ONE));
        let (syn, tri) = pipeline(&co, &Modality::Elastography);
        let anchor = GaugeAnchor::from_coefficients(&co, &syn.d);
        let h1 = &syn.measurements.functionals[0];
        let s = GaugeSettings::default();
        let el = resolve_elastography(&tri, h1, &anchor, &s).unwrap();
        let ge = resolve_generic_b(&tri, h1, &BConstraint::Divergence(ScalarField::constant(&g, ZERO)), &anchor, &s).unwrap();
        let mask = el.mask.and(&ge.mask);
        let (qe, qg) = (el.triple.q.as_ref().unwrap(), ge.triple.q.as_ref().unwrap());
        for p in mask.points() {
            let rho = ge.big_b.values[p] / ge.d.values[p];
            assert!((el.big_b.values[p] - rho).norm() < 1e-10);
            let dq = (qe.values[p] - qg.values[p]).norm() / (1.0 + qe.values[p].norm());
            assert!(dq < 1e-2, "{dq}");
            assert!(ge.a_inv_b.at(p).iter().all(|v| v.norm() < 1e-2));
        }
    }
}
