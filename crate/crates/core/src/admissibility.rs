//! Margins for the sufficient reconstruction conditions: a non-vanishing
//! first solution, a gradient basis among the ratio fields, and independent
//! constraint matrices.
//!
//! All margins are relative and lie in `[0, 1]`. Points where a margin cannot
//! be evaluated count as zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, C64};
use crate::grid::{Grid, InteriorMask};
use crate::recon::{alpha_from_nullspace, gram_unchecked, m_matrices, ratios_unchecked, theta_coefficients, RatioSet, ReconSettings};
use crate::synthesis::{constraint_count, tensor_count, MeasurementSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub u1: f64,
    pub det: f64,
    pub independence: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            u1: 1e-6,
            det: 1e-6,
            independence: 1e-6,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("u1", self.u1), ("det", self.det), ("independence", self.independence)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("admissibility threshold {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Validated thresholds; `None` selects the defaults.
pub fn thresholds(config: Option<&Thresholds>) -> Result<Thresholds> {
    let t = config.copied().unwrap_or_default();
    t.validate()?;
    Ok(t)
}

/// A sub-box of a covering, optionally with its own functional group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub bounds: Vec<[f64; 2]>,
    /// Indices into the measurement set, first entry playing the role of `H_1`.
    #[serde(default)]
    pub functionals: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub margin: f64,
    pub threshold: f64,
    pub pass: bool,
    pub worst_point: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub label: String,
    pub bounds: Vec<[f64; 2]>,
    pub functionals: Vec<usize>,
    pub points: usize,
    pub conditions: Vec<ConditionResult>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub schema_version: u32,
    pub note: String,
    pub thresholds: Thresholds,
    pub global: RegionReport,
    pub patches: Vec<RegionReport>,
    pub pass: bool,
}

/// Per-point margins for one functional group.
#[derive(Clone, Debug)]
pub struct MarginFields {
    pub u1: Vec<f64>,
    pub det: Vec<f64>,
    pub independence: Vec<f64>,
}

fn clean(v: f64) -> f64 {
    if v.is_finite() { v.max(0.0) } else { 0.0 }
}

fn det_margin(rs: &RatioSet, p: usize) -> f64 {
    let n = rs.dim();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, k| rs.gradients[k].at(p)[i]);
    let norms: f64 = (0..n)
        .map(|k| rs.gradients[k].at(p).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
        .product();
    clean(m.determinant().norm() / norms)
}

/// Margins at every point. Near zeros of `H_1` the ratios are unusable and
/// every margin is reported as zero there.
pub fn margin_fields(ms: &MeasurementSet) -> Result<MarginFields> {
    let g = ms.grid;
    let n = g.dim();
    if ms.len() < n + 1 {
        return Err(Error::TooFewFunctionals {
            mode: "admissibility",
            dim: n,
            required: tensor_count(n),
            given: ms.len(),
        });
    }
    let h1 = &ms.functionals[0];
    let sup = h1.sup();
    let u1: Vec<f64> = h1.values.iter().map(|v| clean(v.norm() / sup)).collect();
    let rs = ratios_unchecked(ms)?;
    let det: Vec<f64> = (0..g.len()).map(|p| det_margin(&rs, p)).collect();
    let independence = if ms.len() >= tensor_count(n) {
        let settings = ReconSettings::default();
        let (gd, _) = gram_unchecked(&rs, &settings)?;
        let thetas = (1..=constraint_count(n))
            .map(|m| theta_coefficients(&rs, &gd, m))
            .collect::<Result<Vec<_>>>()?;
        let ms_fields = m_matrices(&rs, &thetas);
        let (_, quality, _) = alpha_from_nullspace(&ms_fields, settings.null_gap_tolerance)?;
        quality.values.iter().map(|v| clean(v.re)).collect()
    } else {
        vec![0.0; g.len()]
    };
    Ok(MarginFields { u1, det, independence })
}

fn patch_points(g: &Grid, bounds: &[[f64; 2]]) -> Result<Vec<usize>> {
    if bounds.len() != g.dim() {
        return Err(Error::Config(format!(
            "patch has {} bounds for a {}-dimensional grid",
            bounds.len(),
            g.dim()
        )));
    }
    let tol: Vec<f64> = g.spacing().iter().map(|h| 1e-9 * h).collect();
    Ok((0..g.len())
        .filter(|&p| !g.is_boundary(p))
        .filter(|&p| {
            let x = g.coords(p);
            bounds.iter().enumerate().all(|(k, b)| x[k] >= b[0] - tol[k] && x[k] <= b[1] + tol[k])
        })
        .collect())
}

fn condition(name: &str, values: &[f64], points: &[usize], threshold: f64) -> ConditionResult {
    let worst = points.iter().copied().min_by(|&a, &b| values[a].total_cmp(&values[b]));
    let margin = worst.map_or(0.0, |p| values[p]);
    ConditionResult {
        name: name.into(),
        margin,
        threshold,
        pass: margin >= threshold,
        worst_point: worst,
    }
}

fn region_report(
    label: String,
    bounds: Vec<[f64; 2]>,
    functionals: Vec<usize>,
    fields: &MarginFields,
    points: &[usize],
    t: &Thresholds,
) -> RegionReport {
    // the first-solution proxy is relative to the largest |H_1| inside the region
    let local_max = points.iter().map(|&p| fields.u1[p]).fold(0.0, f64::max);
    let u1: Vec<f64> = fields.u1.iter().map(|v| if local_max > 0.0 { v / local_max } else { 0.0 }).collect();
    let conditions = vec![
        condition("u1 non-vanishing", &u1, points, t.u1),
        condition("gradient basis", &fields.det, points, t.det),
        condition("M independence", &fields.independence, points, t.independence),
    ];
    RegionReport {
        label,
        bounds,
        functionals,
        points: points.len(),
        pass: !points.is_empty() && conditions.iter().all(|c| c.pass),
        conditions,
    }
}

/// Evaluates every margin globally and on each patch of an optional covering.
pub fn check(ms: &MeasurementSet, covering: &[Patch], t: &Thresholds) -> Result<AdmissibilityReport> {
    t.validate()?;
    let g = ms.grid;
    let n = g.dim();
    let group = |k: usize| (0..k.min(ms.len())).collect::<Vec<_>>();
    let default_group = group(tensor_count(n));
    let base = ms.select(&default_group)?;
    let fields = margin_fields(&base)?;
    let interior: Vec<usize> = (0..g.len()).filter(|&p| !g.is_boundary(p)).collect();
    let global = region_report("global".into(), g.bounds(), default_group.clone(), &fields, &interior, t);
    let mut patches = Vec::with_capacity(covering.len());
    for (i, patch) in covering.iter().enumerate() {
        let pts = patch_points(&g, &patch.bounds)?;
        let idx = patch.functionals.clone().unwrap_or_else(|| default_group.clone());
        let local = if idx == default_group {
            fields.clone()
        } else {
            margin_fields(&ms.select(&idx)?)?
        };
        patches.push(region_report(format!("patch {}", i + 1), patch.bounds.clone(), idx, &local, &pts, t));
    }
    Ok(AdmissibilityReport {
        schema_version: 1,
        note: "conditions are stated on the closed domain; margins here are minima over interior grid points".into(),
        thresholds: *t,
        pass: global.pass,
        global,
        patches,
    })
}

impl AdmissibilityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Whether every patch of the covering passes.
    pub fn covering_pass(&self) -> bool {
        !self.patches.is_empty() && self.patches.iter().all(|p| p.pass)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.note);
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>12} {:>12} {:>12}  result",
            "region", "points", "u1", "det", "M-indep"
        );
        for r in std::iter::once(&self.global).chain(&self.patches) {
            let m: Vec<String> = r
                .conditions
                .iter()
                .map(|c| format!("{:>11.3e}{}", c.margin, if c.pass { ' ' } else { '*' }))
                .collect();
            let _ = writeln!(
                out,
                "{:<10} {:>7} {} {} {}  {}",
                r.label,
                r.points,
                m[0],
                m[1],
                m[2],
                if r.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(
            out,
            "thresholds: u1 {:.1e}, det {:.1e}, M-indep {:.1e} (* marks a failing margin)",
            self.thresholds.u1, self.thresholds.det, self.thresholds.independence
        );
        out
    }
}

/// Margin field as a scalar field, for dumping.
pub fn margin_field(grid: &Grid, values: &[f64]) -> ScalarField {
    ScalarField {
        grid: *grid,
        values: values.iter().map(|&v| C64::new(v, 0.0)).collect(),
    }
}

/// Points of `mask` whose margin is below `threshold`.
pub fn failing_points(values: &[f64], mask: &InteriorMask, threshold: f64) -> Vec<usize> {
    mask.points().filter(|&p| values[p] < threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::BoundaryTrace;
    use crate::synthesis::ModalityTag;

    fn analytic(grid: &Grid, exprs: &[&str]) -> MeasurementSet {
        MeasurementSet {
            grid: *grid,
            modality: ModalityTag::Elastography,
            traces: exprs.iter().map(|e| BoundaryTrace::from_expr(grid, e).unwrap()).collect(),
            functionals: exprs
                .iter()
                .map(|e| crate::dsl::materialize_scalar(&crate::dsl::parse(e).unwrap(), grid).unwrap())
                .collect(),
            min_h1: 1.0,
            noise: None,
        }
    }

    #[test]
    fn threshold_defaults_and_validation() {
        let t = thresholds(None).unwrap();
        assert_eq!((t.u1, t.det, t.independence), (1e-6, 1e-6, 1e-6));
        let bad = Thresholds { det: 0.0, ..t };
        assert!(matches!(thresholds(Some(&bad)), Err(Error::Config(_))));
    }

    #[test]
    fn harmonic_quintet_passes() {
        let g = Grid::unit(2, 17).unwrap();
        let ms = analytic(&g, &["1", "x", "y", "x*y", "x^2-y^2"]);
        let r = check(&ms, &[], &Thresholds::default()).unwrap();
        assert!(r.pass);
        assert!((r.global.conditions[1].margin - 1.0).abs() < 1e-12);
        assert!(r.global.conditions[2].margin > 0.1);
        assert!(r.table().contains("pass"));
    }

    #[test]
    fn parallel_gradients_fail_basis() {
        let g = Grid::unit(2, 17).unwrap();
        let ms = analytic(&g, &["1", "x", "2*x", "x*y", "x^2-y^2"]);
        let r = check(&ms, &[], &Thresholds::default()).unwrap();
        assert!(!r.pass);
        assert!(!r.global.conditions[1].pass);
        assert!(r.global.conditions[1].margin < 1e-12);
    }

    #[test]
    fn stricter_threshold_flips_result() {
        let g = Grid::unit(2, 17).unwrap();
        let ms = analytic(&g, &["1", "x", "x+0.001*y", "x*y", "x^2-y^2"]);
        let lax = check(&ms, &[], &Thresholds::default()).unwrap();
        let strict = check(&ms, &[], &Thresholds { det: 1e-2, ..Thresholds::default() }).unwrap();
        assert!(lax.global.conditions[1].pass && !strict.global.conditions[1].pass);
    }

    #[test]
    fn sub_box_margins_do_not_decrease() {
        let g = Grid::unit(2, 17).unwrap();
        let ms = analytic(&g, &["2+x", "x", "y+x*x", "x*y", "x^2-y^2"]);
        let patch = Patch {
            bounds: vec![[0.25, 0.75], [0.0, 0.5]],
            functionals: None,
        };
        let r = check(&ms, std::slice::from_ref(&patch), &Thresholds::default()).unwrap();
        for (a, b) in r.global.conditions.iter().zip(&r.patches[0].conditions) {
            assert!(b.margin >= a.margin);
        }
    }
}
