//! Declarative experiments: synthesis, reconstruction, resolution and error
//! metrics, plus refinement and noise studies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admissibility::{check, AdmissibilityReport, Patch, Thresholds};
use crate::diff;
use crate::dsl::{materialize_scalar, materialize_tensor, materialize_vector, parse};
use crate::error::{Error, Result};
use crate::field::{sym_len, ScalarField, SymTensorField, VectorField, C64, ZERO};
use crate::forward::{BoundaryTrace, CoefficientSet, ForwardSolver};
use crate::gauge::{
    decompose, invariant_triple, resolve_elastography, resolve_generic_b, resolve_qpat, resolve_qtat,
    triple_from_coefficients, BConstraint, GaugeAnchor, GaugeReport, GaugeSettings, ResolvedCoefficients,
};
use crate::grid::{interior_mask, make_grid, Grid, InteriorMask};
use crate::io;
use crate::linalg::SolverSettings;
use crate::recon::{reconstruct, reconstruct_scalar, ReconSettings, Reconstruction};
use crate::synthesis::{
    add_noise, default_trace_exprs, synthesize, tensor_count, MeasurementSet, Modality, NoiseSpec, Synthesis,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    #[default]
    Single,
    Convergence,
    NoiseSweep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconMode {
    #[default]
    Tensor,
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorExpr {
    /// Isotropic `a = s I`.
    Scalar(String),
    /// Symmetric storage slots.
    Slots(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientConfig {
    pub a: TensorExpr,
    #[serde(default)]
    pub b: Option<Vec<String>>,
    #[serde(default = "zero_expr")]
    pub c: String,
}

fn zero_expr() -> String {
    "0".into()
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
pub enum ConstraintConfig {
    /// `∇·(a⁻¹b)`; `null` takes it from the ground truth.
    Divergence(Option<String>),
    /// One component of `a⁻¹b`; `value: null` takes it from the ground truth.
    Component { axis: usize, value: Option<String> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModalityConfig {
    #[default]
    Elastography,
    Qpat {
        gamma: String,
    },
    Qtat {
        gamma: String,
        #[serde(default = "yes")]
        a_real: bool,
    },
    Generic {
        d: String,
        constraint: ConstraintConfig,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceConfig {
    Keyword(String),
    List(Vec<String>),
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig::Keyword("default".into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub epsilon: f64,
    pub correlation_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub study: Study,
    pub grid: GridConfig,
    pub coefficients: CoefficientConfig,
    #[serde(default)]
    pub modality: ModalityConfig,
    #[serde(default)]
    pub traces: TraceConfig,
    /// Number of functionals used; defaults to the minimum for `mode`.
    #[serde(default)]
    pub functionals: Option<usize>,
    #[serde(default)]
    pub mode: ReconMode,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub recon: ReconSettings,
    #[serde(default)]
    pub gauge: GaugeSettings,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub covering: Vec<Patch>,
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.grid.bounds.len()
    }

    /// Functionals used by the reconstruction.
    pub fn functional_count(&self) -> usize {
        let n = self.dim();
        self.functionals.unwrap_or(match self.mode {
            ReconMode::Tensor => tensor_count(n),
            ReconMode::Scalar => n + 1,
        })
    }

    pub fn trace_exprs(&self) -> Result<Vec<String>> {
        match &self.traces {
            TraceConfig::Keyword(k) if k == "default" => default_trace_exprs(self.dim(), self.functional_count()),
            TraceConfig::Keyword(k) => Err(Error::Config(format!("unknown trace keyword {k:?}"))),
            TraceConfig::List(list) => Ok(list.clone()),
        }
    }

    /// Schema checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let grid = make_grid(&self.grid.bounds, &self.grid.shape)?;
        let n = grid.dim();
        let mut exprs: Vec<&str> = vec![&self.coefficients.c];
        match &self.coefficients.a {
            TensorExpr::Scalar(s) => exprs.push(s),
            TensorExpr::Slots(v) => {
                if v.len() != sym_len(n) {
                    return Err(Error::Config(format!("a needs {} slot expressions, got {}", sym_len(n), v.len())));
                }
                exprs.extend(v.iter().map(String::as_str));
            }
        }
        if let Some(b) = &self.coefficients.b {
            if b.len() != n {
                return Err(Error::Config(format!("b needs {n} components, got {}", b.len())));
            }
            exprs.extend(b.iter().map(String::as_str));
        }
        match &self.modality {
            ModalityConfig::Elastography => {}
            ModalityConfig::Qpat { gamma } | ModalityConfig::Qtat { gamma, .. } => exprs.push(gamma),
            ModalityConfig::Generic { d, constraint } => {
                exprs.push(d);
                match constraint {
                    ConstraintConfig::Divergence(Some(e)) => exprs.push(e),
                    ConstraintConfig::Component { axis, value } => {
                        if *axis >= n {
                            return Err(Error::Config(format!("constraint axis {axis} outside dimension {n}")));
                        }
                        if let Some(e) = value {
                            exprs.push(e);
                        }
                    }
                    ConstraintConfig::Divergence(None) => {}
                }
            }
        }
        if self.coefficients.b.is_some() && !matches!(self.modality, ModalityConfig::Generic { .. }) {
            return Err(Error::Config("a nonzero b is only supported by the generic modality".into()));
        }
        let j = self.functional_count();
        let required = match self.mode {
            ReconMode::Tensor => tensor_count(n),
            ReconMode::Scalar => n + 1,
        };
        if j < required {
            return Err(Error::TooFewFunctionals {
                mode: match self.mode {
                    ReconMode::Tensor => "tensor",
                    ReconMode::Scalar => "scalar",
                },
                dim: n,
                required,
                given: j,
            });
        }
        let traces = self.trace_exprs()?;
        exprs.extend(traces.iter().map(String::as_str));
        for e in exprs {
            parse(e)?;
        }
        if traces.len() < j {
            return Err(Error::Config(format!("{j} functionals requested but only {} traces given", traces.len())));
        }
        self.thresholds.validate()?;
        if let Some(nc) = &self.noise {
            if !(nc.correlation_length > 0.0) || !(nc.epsilon >= 0.0) {
                return Err(Error::Config("noise needs epsilon >= 0 and a positive correlation length".into()));
            }
        }
        match self.study {
            Study::Single => {}
            Study::Convergence => {
                if self.levels.len() < 3 {
                    return Err(Error::Config(format!(
                        "convergence study needs at least 3 refinement levels, got {}",
                        self.levels.len()
                    )));
                }
                if self.levels.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("refinement levels must increase".into()));
                }
            }
            Study::NoiseSweep => {
                if self.epsilons.len() < 3 || !self.epsilons.contains(&0.0) {
                    return Err(Error::Config("noise sweep needs at least 3 amplitudes including 0".into()));
                }
                if self.epsilons.iter().any(|e| !(*e >= 0.0)) {
                    return Err(Error::Config("noise amplitudes must be non-negative".into()));
                }
                if self.noise.is_none() {
                    return Err(Error::Config("noise sweep needs a noise section with correlation_length".into()));
                }
            }
        }
        Ok(())
    }
}

/// A fully materialized experiment at one resolution.
#[derive(Clone, Debug)]
pub struct Problem {
    pub grid: Grid,
    pub coefficients: CoefficientSet,
    pub modality: Modality,
    pub traces: Vec<BoundaryTrace>,
    pub constraint: Option<BConstraint>,
    pub a_real: bool,
    pub functionals: usize,
    pub mode: ReconMode,
}

fn scalar(text: &str, grid: &Grid) -> Result<ScalarField> {
    materialize_scalar(&parse(text)?, grid)
}

/// Materializes `cfg` on its grid, or with `points` per axis when given.
pub fn build_problem(cfg: &ExperimentConfig, points: Option<usize>) -> Result<Problem> {
    let shape = match points {
        Some(k) => vec![k; cfg.dim()],
        None => cfg.grid.shape.clone(),
    };
    let grid = make_grid(&cfg.grid.bounds, &shape)?;
    let a = match &cfg.coefficients.a {
        TensorExpr::Scalar(s) => SymTensorField::scaled_identity(&grid, &scalar(s, &grid)?),
        TensorExpr::Slots(v) => {
            let parsed = v.iter().map(|e| parse(e)).collect::<Result<Vec<_>>>()?;
            materialize_tensor(&parsed, &grid)?
        }
    };
    let b = match &cfg.coefficients.b {
        Some(v) => {
            let parsed = v.iter().map(|e| parse(e)).collect::<Result<Vec<_>>>()?;
            materialize_vector(&parsed, &grid)?
        }
        None => VectorField::zeros(&grid),
    };
    let coefficients = CoefficientSet::new(a, b, scalar(&cfg.coefficients.c, &grid)?)?;
    let (modality, constraint, a_real) = match &cfg.modality {
        ModalityConfig::Elastography => (Modality::Elastography, None, true),
        ModalityConfig::Qpat { gamma } => (Modality::Qpat { gamma: scalar(gamma, &grid)? }, None, true),
        ModalityConfig::Qtat { gamma, a_real } => (Modality::Qtat { gamma: scalar(gamma, &grid)? }, None, *a_real),
        ModalityConfig::Generic { d, constraint } => {
            let truth = true_a_inv_b(&coefficients);
            let c = match constraint {
                ConstraintConfig::Divergence(Some(e)) => BConstraint::Divergence(scalar(e, &grid)?),
                ConstraintConfig::Divergence(None) => BConstraint::Divergence(diff::divergence(&truth)),
                ConstraintConfig::Component { axis, value } => BConstraint::Component {
                    axis: *axis,
                    values: match value {
                        Some(e) => scalar(e, &grid)?,
                        None => truth.component(*axis),
                    },
                },
            };
            (Modality::Generic { d: scalar(d, &grid)? }, Some(c), true)
        }
    };
    let traces = cfg
        .trace_exprs()?
        .iter()
        .map(|e| BoundaryTrace::from_expr(&grid, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Problem {
        grid,
        coefficients,
        modality,
        traces,
        constraint,
        a_real,
        functionals: cfg.functional_count(),
        mode: cfg.mode,
    })
}

/// `a⁻¹b` of ground-truth coefficients.
pub fn true_a_inv_b(co: &CoefficientSet) -> VectorField {
    let g = *co.grid();
    let n = g.dim();
    let values = (0..g.len())
        .flat_map(|p| {
            let m = co.a.matrix_at(p);
            let v = nalgebra::DVector::from_column_slice(co.b.at(p));
            m.lu().solve(&v).map(|x| x.as_slice().to_vec()).unwrap_or_else(|| vec![C64::new(f64::NAN, 0.0); n])
        })
        .collect();
    VectorField { grid: g, values }
}

/// What the scalar-`a` formula recovers: `a⁻¹b + ∇ln(a u_1²)`, which is
/// `a⁻¹b` exactly when `a u_1²` is constant.
pub fn true_transport(co: &CoefficientSet, u1: &ScalarField) -> Result<VectorField> {
    let g = *co.grid();
    let n = g.dim();
    let a = co.a.slot(0);
    let w = a.zip_with(u1, |a, u| a * u * u);
    let gw = diff::gradient(&w);
    let base = true_a_inv_b(co);
    let values = (0..g.len())
        .flat_map(|p| {
            let (b, d, w) = (base.at(p), gw.at(p), w.values[p]);
            (0..n).map(move |k| b[k] + d[k] / w).collect::<Vec<_>>()
        })
        .collect();
    VectorField::new(&g, values)
}

/// Discrete `C^0`, `C^1`, `C^2` distances on a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Divided by the reference's own norms (absolute when those vanish).
    pub rel_c0: f64,
    pub rel_c1: f64,
    pub rel_c2: f64,
    /// Fraction of mask points where either argument is undefined.
    pub masked_fraction: f64,
}

/// Scalar components of a field, for component-wise norms.
pub trait Components {
    fn components(&self) -> Vec<ScalarField>;
}

impl Components for ScalarField {
    fn components(&self) -> Vec<ScalarField> {
        vec![self.clone()]
    }
}

impl Components for VectorField {
    fn components(&self) -> Vec<ScalarField> {
        (0..self.dim()).map(|k| self.component(k)).collect()
    }
}

impl Components for SymTensorField {
    fn components(&self) -> Vec<ScalarField> {
        (0..sym_len(self.dim())).map(|k| self.slot(k)).collect()
    }
}

/// `[sup |f|, max(sup |f|, sup |∇f|), max(.., sup |∇²f|)]` over defined mask points.
fn ck_norms(f: &ScalarField, mask: &InteriorMask) -> [f64; 3] {
    let n = f.grid.dim();
    let grad = diff::gradient(f);
    let hess = diff::hessian(f);
    let k = sym_len(n);
    let (mut s0, mut s1, mut s2) = (0.0f64, 0.0f64, 0.0f64);
    for p in mask.points() {
        let v = f.values[p].norm();
        if v.is_finite() {
            s0 = s0.max(v);
        }
        let gn = grad.at(p).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if gn.is_finite() {
            s1 = s1.max(gn);
        }
        let hn = hess.values[p * k..(p + 1) * k].iter().map(|v| v.norm()).fold(0.0, f64::max);
        if hn.is_finite() {
            s2 = s2.max(hn);
        }
    }
    let c1 = s0.max(s1);
    [s0, c1, c1.max(s2)]
}

pub fn error_norms<F: Components>(field: &F, reference: &F, mask: &InteriorMask) -> Result<ErrorMetrics> {
    let fc = field.components();
    let rc = reference.components();
    if fc.len() != rc.len() || fc.iter().zip(&rc).any(|(a, b)| !a.grid.compatible(&b.grid) || !a.grid.compatible(&mask.grid)) {
        return Err(Error::Config("error norms need fields on a shared grid".into()));
    }
    let total = mask.count();
    if total == 0 {
        return Err(Error::Config("error norms over an empty mask".into()));
    }
    let undefined = mask
        .points()
        .filter(|&p| fc.iter().chain(&rc).any(|f| !f.values[p].is_finite()))
        .count();
    let (mut abs, mut rel) = ([0.0f64; 3], [0.0f64; 3]);
    for (f, r) in fc.iter().zip(&rc) {
        let e = f.zip_with(r, |a, b| a - b);
        let ne = ck_norms(&e, mask);
        let nr = ck_norms(r, mask);
        for k in 0..3 {
            abs[k] = abs[k].max(ne[k]);
            rel[k] = rel[k].max(nr[k]);
        }
    }
    let relative = |k: usize| if rel[k] > 0.0 { abs[k] / rel[k] } else { abs[k] };
    Ok(ErrorMetrics {
        c0: abs[0],
        c1: abs[1],
        c2: abs[2],
        rel_c0: relative(0),
        rel_c1: relative(1),
        rel_c2: relative(2),
        masked_fraction: undefined as f64 / total as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityMetrics {
    pub quantity: String,
    pub metrics: ErrorMetrics,
}

/// Everything computed by one pass through the pipeline.
#[derive(Debug)]
pub struct Outcome {
    pub problem: Problem,
    pub synthesis: Synthesis,
    pub measurements: MeasurementSet,
    pub reconstruction: Option<Reconstruction>,
    pub scalar_transport: Option<VectorField>,
    pub resolved: Option<ResolvedCoefficients>,
    pub metrics: Vec<QuantityMetrics>,
    pub admissibility: Option<AdmissibilityReport>,
    pub warnings: Vec<String>,
}

/// Reconstruction products compared across runs and against the truth.
#[derive(Clone, Debug)]
pub struct Recovered {
    pub fields: Vec<(String, Vec<ScalarField>)>,
    pub mask: InteriorMask,
}

fn named<F: Components>(name: &str, f: &F) -> (String, Vec<ScalarField>) {
    (name.to_string(), f.components())
}

/// Quantities a modality recovers, with the mask they are compared on.
fn recovered_fields(problem: &Problem, rec: Option<&Reconstruction>, transport: Option<&VectorField>, res: Option<&ResolvedCoefficients>) -> Result<Recovered> {
    let g = problem.grid;
    if let Some(t) = transport {
        let mask = interior_mask(&g, 2)?;
        return Ok(Recovered {
            fields: vec![named("transport", t)],
            mask,
        });
    }
    let (rec, res) = match (rec, res) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Config("nothing reconstructed".into())),
    };
    let mask = res.mask.clone();
    let mut fields = vec![named("ahat", &rec.alpha_beta.alpha)];
    match &problem.modality {
        Modality::Elastography => {
            fields.push(named("a", &res.a));
            fields.push(named("c", &res.c));
            fields.push(named("B", &res.big_b));
            fields.push(named("div_a", &diff::divergence_tensor(&res.a)));
        }
        Modality::Qpat { .. } => {
            fields.push(named("a", &res.a));
            fields.push(named("c", &res.c));
            fields.push(named("B", &res.big_b));
        }
        Modality::Qtat { .. } => {
            if let Some(gm) = &res.gamma {
                fields.push(named("gamma", gm));
            }
            if let Some(q) = &res.triple.q {
                fields.push(named("q", q));
            }
        }
        Modality::Generic { .. } => {
            fields.push(named("ainvb", &res.a_inv_b));
            fields.push(named("ratio", &res.big_b.zip_with(&res.d, |b, d| b / d)));
        }
    }
    Ok(Recovered { fields, mask })
}

fn truth_fields(problem: &Problem, synthesis: &Synthesis, names: &[String]) -> Result<Vec<Vec<ScalarField>>> {
    let co = &problem.coefficients;
    let g = problem.grid;
    let (ahat, big_b) = decompose(&co.a);
    names
        .iter()
        .map(|name| {
            Ok(match name.as_str() {
                "ahat" => ahat.components(),
                "a" => co.a.components(),
                "c" => co.c.components(),
                "B" => big_b.components(),
                "div_a" => diff::divergence_tensor(&co.a).components(),
                "ainvb" => true_a_inv_b(co).components(),
                "transport" => true_transport(co, &synthesis.solutions[0])?.components(),
                "ratio" => big_b.zip_with(&synthesis.d, |b, d| b / d).components(),
                "gamma" => match &problem.modality {
                    Modality::Qtat { gamma } => gamma.components(),
                    _ => return Err(Error::Config("gamma reference needs the qtat modality".into())),
                },
                "q" => triple_from_coefficients(co, &synthesis.d)?
                    .q
                    .unwrap_or_else(|| ScalarField::constant(&g, ZERO))
                    .components(),
                other => return Err(Error::Config(format!("no reference for quantity {other}"))),
            })
        })
        .collect()
}

/// Component-list wrapper so recovered fields can be compared generically.
struct List(Vec<ScalarField>);

impl Components for List {
    fn components(&self) -> Vec<ScalarField> {
        self.0.clone()
    }
}

fn compare(a: &Recovered, b_fields: &[Vec<ScalarField>], extra_mask: Option<&InteriorMask>) -> Result<Vec<QuantityMetrics>> {
    a.fields
        .iter()
        .zip(b_fields)
        .map(|((name, f), r)| {
            let mut mask = match extra_mask {
                Some(m) => a.mask.and(m),
                None => a.mask.clone(),
            };
            if name == "div_a" {
                mask = mask.erode();
            }
            if name == "gamma" {
                // points whose Γ division was refused are reported, not scored
                let flags = mask.flags().iter().zip(&f[0].values).map(|(&m, v)| m && v.is_finite()).collect();
                mask = InteriorMask::from_flags(&mask.grid, mask.margin, flags);
            }
            Ok(QuantityMetrics {
                quantity: name.clone(),
                metrics: error_norms(&List(f.clone()), &List(r.clone()), &mask)?,
            })
        })
        .collect()
}

/// Reconstructs and resolves from a measurement set.
pub fn reconstruct_and_resolve(
    problem: &Problem,
    synthesis: &Synthesis,
    ms: &MeasurementSet,
    recon: &ReconSettings,
    gauge: &GaugeSettings,
) -> Result<(Option<Reconstruction>, Option<VectorField>, Option<ResolvedCoefficients>)> {
    let used = ms.select(&(0..problem.functionals).collect::<Vec<_>>())?;
    if problem.mode == ReconMode::Scalar {
        let (_, t) = reconstruct_scalar(&used, recon)?;
        return Ok((None, Some(t), None));
    }
    let rec = reconstruct(&used, recon)?;
    if !rec.alpha_beta.degenerate.is_empty() && rec.alpha_beta.degenerate.len() * 2 > interior_mask(&problem.grid, 1)?.count() {
        return Err(Error::Degenerate {
            what: "constraint matrices (null space not one-dimensional)".into(),
            points: rec.alpha_beta.degenerate.clone(),
        });
    }
    let h1 = &used.functionals[0];
    let tri = invariant_triple(&rec.alpha_beta, h1, recon.margin.max(2))?;
    let anchor = GaugeAnchor::from_coefficients(&problem.coefficients, &synthesis.d);
    let res = match &problem.modality {
        Modality::Elastography => resolve_elastography(&tri, h1, &anchor, gauge)?,
        Modality::Qpat { gamma } => resolve_qpat(&tri, h1, gamma, &anchor, gauge)?,
        Modality::Qtat { .. } => resolve_qtat(&tri, h1, &anchor, problem.a_real, gauge)?,
        Modality::Generic { .. } => {
            let c = problem
                .constraint
                .as_ref()
                .ok_or_else(|| Error::Config("generic modality needs a constraint on a⁻¹b".into()))?;
            resolve_generic_b(&tri, h1, c, &anchor, gauge)?
        }
    };
    Ok((Some(rec), None, Some(res)))
}

fn gauge_settings(cfg: &ExperimentConfig) -> GaugeSettings {
    let mut g = cfg.gauge.clone();
    g.solver = cfg.solver.clone();
    g
}

fn noise_spec(cfg: &ExperimentConfig, epsilon: f64) -> Option<NoiseSpec> {
    cfg.noise.map(|nc| NoiseSpec {
        epsilon,
        correlation_length: nc.correlation_length,
        seed: cfg.seed,
    })
}

/// Synthesizes clean data for a problem.
pub fn synthesize_problem(problem: &Problem, solver: &SolverSettings) -> Result<Synthesis> {
    synthesize(&problem.coefficients, &problem.modality, &problem.traces, solver)
}

/// One pass of the pipeline at one resolution.
pub fn execute(cfg: &ExperimentConfig, points: Option<usize>, noise: Option<NoiseSpec>) -> Result<Outcome> {
    execute_with(cfg, points, noise, None)
}

/// As [`execute`], reconstructing from `measured` instead of the synthesized
/// data when given; the configuration still supplies anchors and references.
pub fn execute_with(
    cfg: &ExperimentConfig,
    points: Option<usize>,
    noise: Option<NoiseSpec>,
    measured: Option<MeasurementSet>,
) -> Result<Outcome> {
    let problem = build_problem(cfg, points)?;
    let synthesis = synthesize_problem(&problem, &cfg.solver)?;
    let measurements = match (measured, noise) {
        (Some(ms), _) => {
            if !ms.grid.compatible(&problem.grid) {
                return Err(Error::Config("measurements live on a different grid than the configuration".into()));
            }
            ms
        }
        (None, Some(spec)) if spec.epsilon > 0.0 => add_noise(&synthesis.measurements, &spec)?,
        (None, _) => synthesis.measurements.clone(),
    };
    let admissibility = if problem.mode == ReconMode::Tensor {
        Some(check(&measurements, &cfg.covering, &cfg.thresholds)?)
    } else {
        None
    };
    let (rec, transport, res) = reconstruct_and_resolve(&problem, &synthesis, &measurements, &cfg.recon, &gauge_settings(cfg))?;
    let recovered = recovered_fields(&problem, rec.as_ref(), transport.as_ref(), res.as_ref())?;
    let names: Vec<String> = recovered.fields.iter().map(|(n, _)| n.clone()).collect();
    let truth = truth_fields(&problem, &synthesis, &names)?;
    let metrics = compare(&recovered, &truth, None)?;
    let mut warnings = Vec::new();
    if let Some(r) = &res {
        warnings.extend(r.report.warnings.iter().cloned());
    }
    Ok(Outcome {
        problem,
        synthesis,
        measurements,
        reconstruction: rec,
        scalar_transport: transport,
        resolved: res,
        metrics,
        admissibility,
        warnings,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub study: Study,
    pub modality: String,
    pub mode: ReconMode,
    pub shape: Vec<usize>,
    pub functionals: usize,
    pub seed: u64,
    pub noise: Option<NoiseSpec>,
    pub metrics: Vec<QuantityMetrics>,
    pub gauge: Option<GaugeReport>,
    pub admissibility: Option<AdmissibilityReport>,
    pub warnings: Vec<String>,
}

pub const METRICS_HEADER: &str = "quantity,c0,c1,c2,rel_c0,rel_c1,rel_c2,masked_fraction";

fn metrics_row(q: &QuantityMetrics) -> String {
    let m = &q.metrics;
    format!(
        "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6}",
        q.quantity, m.c0, m.c1, m.c2, m.rel_c0, m.rel_c1, m.rel_c2, m.masked_fraction
    )
}

fn modality_name(m: &Modality) -> &'static str {
    match m {
        Modality::Elastography => "elastography",
        Modality::Qpat { .. } => "qpat",
        Modality::Qtat { .. } => "qtat",
        Modality::Generic { .. } => "generic",
    }
}

fn output_dir(cfg: &ExperimentConfig) -> Option<&Path> {
    cfg.output.as_deref()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Writes reconstructed and resolved fields under `dir/fields`, and the
/// intermediate products under `dir/intermediates` when asked.
pub fn write_fields(dir: &Path, out: &Outcome, intermediates: bool) -> Result<()> {
    let f = dir.join("fields");
    if let Some(t) = &out.scalar_transport {
        io::write_vector(&f.join("ainvb"), t)?;
    }
    if let Some(r) = &out.resolved {
        io::write_tensor(&f.join("a"), &r.a)?;
        io::write_vector(&f.join("b"), &r.b)?;
        io::write_scalar(&f.join("c"), &r.c)?;
        io::write_scalar(&f.join("d"), &r.d)?;
        io::write_scalar(&f.join("B"), &r.big_b)?;
        io::write_vector(&f.join("ainvb"), &r.a_inv_b)?;
        if let Some(gm) = &r.gamma {
            io::write_scalar(&f.join("gamma"), gm)?;
        }
        io::write_tensor(&f.join("ahat"), &r.triple.ahat)?;
        io::write_vector(&f.join("G"), &r.triple.g)?;
        if let Some(q) = &r.triple.q {
            io::write_scalar(&f.join("q"), q)?;
        }
    }
    if intermediates {
        let i = dir.join("intermediates");
        if let Some(rec) = &out.reconstruction {
            for (j, v) in rec.ratios.v.iter().enumerate() {
                io::write_scalar(&i.join(format!("v_{}", j + 1)), v)?;
            }
            io::write_tensor(&i.join("alpha"), &rec.alpha_beta.alpha)?;
            io::write_vector(&i.join("beta"), &rec.alpha_beta.beta)?;
            io::write_scalar(&i.join("quality"), &rec.alpha_beta.quality)?;
            for (m, mm) in rec.theta_m.m.iter().enumerate() {
                io::write_tensor(&i.join(format!("M_{}", m + 1)), mm)?;
            }
        }
        io::write_measurements(&i.join("measurements"), &out.measurements)?;
    }
    Ok(())
}

pub fn run_report(cfg: &ExperimentConfig, out: &Outcome, noise: Option<NoiseSpec>) -> RunReport {
    RunReport {
        schema_version: SCHEMA_VERSION,
        study: Study::Single,
        modality: modality_name(&out.problem.modality).into(),
        mode: cfg.mode,
        shape: out.problem.grid.shape().to_vec(),
        functionals: out.problem.functionals,
        seed: cfg.seed,
        noise,
        metrics: out.metrics.clone(),
        gauge: out.resolved.as_ref().map(|r| r.report.clone()),
        admissibility: out.admissibility.clone(),
        warnings: out.warnings.clone(),
    }
}

pub fn metrics_csv(metrics: &[QuantityMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for q in metrics {
        s.push_str(&metrics_row(q));
        s.push('\n');
    }
    s
}

/// Synthesize, reconstruct, resolve and score one configuration.
pub fn run_single(cfg: &ExperimentConfig, intermediates: bool) -> Result<(RunReport, Outcome)> {
    run_single_with(cfg, intermediates, None)
}

pub fn run_single_with(cfg: &ExperimentConfig, intermediates: bool, measured: Option<MeasurementSet>) -> Result<(RunReport, Outcome)> {
    let noise = cfg.noise.and_then(|nc| noise_spec(cfg, nc.epsilon)).filter(|n| n.epsilon > 0.0);
    let noise = if measured.is_some() { measured.as_ref().and_then(|m| m.noise) } else { noise };
    let out = execute_with(cfg, None, noise, measured)?;
    let report = run_report(cfg, &out, noise);
    if let Some(dir) = output_dir(cfg) {
        write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("metrics.csv"), &metrics_csv(&report.metrics))?;
        write_fields(dir, &out, intermediates)?;
    }
    Ok((report, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub points: usize,
    pub h: f64,
    pub metrics: Vec<QuantityMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub quantity: String,
    /// Least-squares slope of `log rel_c0` against `log h`; NaN when unfit.
    pub order: f64,
    pub errors: Vec<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub modality: String,
    pub levels: Vec<LevelMetrics>,
    pub orders: Vec<OrderFit>,
    pub warnings: Vec<String>,
}

impl ConvergenceReport {
    pub fn order(&self, quantity: &str) -> Option<f64> {
        self.orders.iter().find(|o| o.quantity == quantity).map(|o| o.order)
    }
}

/// Errors at or below this level carry no discretization signal.
pub const ROUNDING_FLOOR: f64 = 1e-9;

/// Log-log least-squares slope of `errors` against `h`.
pub fn fit_order(h: &[f64], errors: &[f64]) -> (f64, Option<String>) {
    if errors.iter().all(|&e| e <= ROUNDING_FLOOR) {
        return (f64::NAN, Some("errors at rounding level; no discretization error to fit".into()));
    }
    if errors.windows(2).any(|w| !(w[1] < w[0])) || errors.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return (f64::NAN, Some("error sequence is not monotonically decreasing".into()));
    }
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let k = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxy / sxx, None)
}

pub const CONVERGENCE_HEADER: &str = "quantity,points,h,c0,c1,c2,rel_c0,rel_c1,rel_c2,masked_fraction";
pub const ORDERS_HEADER: &str = "quantity,order,note";

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    if cfg.levels.len() < 3 {
        return Err(Error::Config(format!(
            "convergence study needs at least 3 refinement levels, got {}",
            cfg.levels.len()
        )));
    }
    let mut warnings = Vec::new();
    if cfg.noise.is_some_and(|n| n.epsilon > 0.0) {
        warnings.push("noise is ignored by the convergence study".into());
    }
    let runs = cfg
        .levels
        .par_iter()
        .map(|&k| execute(cfg, Some(k), None).map(|o| (k, o)))
        .collect::<Result<Vec<_>>>()?;
    let modality = modality_name(&runs[0].1.problem.modality).to_string();
    let levels: Vec<LevelMetrics> = runs
        .iter()
        .map(|(k, o)| LevelMetrics {
            points: *k,
            h: o.problem.grid.spacing().iter().copied().fold(0.0, f64::max),
            metrics: o.metrics.clone(),
        })
        .collect();
    for (_, o) in &runs {
        warnings.extend(o.warnings.iter().cloned());
    }
    let h: Vec<f64> = levels.iter().map(|l| l.h).collect();
    let orders: Vec<OrderFit> = levels[0]
        .metrics
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let errors: Vec<f64> = levels.iter().map(|l| l.metrics[i].metrics.rel_c0).collect();
            let (order, note) = fit_order(&h, &errors);
            if let Some(n) = &note {
                warnings.push(format!("{}: order not fitted ({n})", q.quantity));
            }
            OrderFit {
                quantity: q.quantity.clone(),
                order,
                errors,
                note,
            }
        })
        .collect();
    let report = ConvergenceReport {
        schema_version: SCHEMA_VERSION,
        modality,
        levels,
        orders,
        warnings,
    };
    if let Some(dir) = output_dir(cfg) {
        write_text(&dir.join("convergence.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("convergence.csv"), &convergence_csv(&report))?;
        write_text(&dir.join("orders.csv"), &orders_csv(&report))?;
    }
    Ok(report)
}

pub fn convergence_csv(r: &ConvergenceReport) -> String {
    let mut s = format!("{CONVERGENCE_HEADER}\n");
    for l in &r.levels {
        for q in &l.metrics {
            let m = &q.metrics;
            let _ = writeln!(
                s,
                "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.6}",
                q.quantity, l.points, l.h, m.c0, m.c1, m.c2, m.rel_c0, m.rel_c1, m.rel_c2, m.masked_fraction
            );
        }
    }
    s
}

pub fn orders_csv(r: &ConvergenceReport) -> String {
    let mut s = format!("{ORDERS_HEADER}\n");
    for o in &r.orders {
        let _ = writeln!(s, "{},{:.6},{}", o.quantity, o.order, o.note.as_deref().unwrap_or(""));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// `max_j` discrete `C^2` norm of the injected perturbation of `H_j`.
    pub delta_h_c2: f64,
    pub quantity: String,
    pub c0: f64,
    pub c1: f64,
    /// `c0 / delta_h_c2`; NaN for the unperturbed row.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpread {
    pub quantity: String,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `max_ratio / min_ratio` over the nonzero amplitudes.
    pub spread: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub schema_version: u32,
    pub modality: String,
    pub correlation_length: f64,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub spreads: Vec<SweepSpread>,
    pub warnings: Vec<String>,
}

pub const SWEEP_HEADER: &str = "epsilon,delta_h_c2,quantity,c0,c1,ratio";

/// Perturbs the functionals at each amplitude and measures the change of the
/// reconstruction against the unperturbed one.
pub fn run_noise_sweep(cfg: &ExperimentConfig) -> Result<NoiseSweepReport> {
    let nc = cfg
        .noise
        .ok_or_else(|| Error::Config("noise sweep needs a noise section with correlation_length".into()))?;
    if cfg.epsilons.len() < 3 || !cfg.epsilons.contains(&0.0) {
        return Err(Error::Config("noise sweep needs at least 3 amplitudes including 0".into()));
    }
    let problem = build_problem(cfg, None)?;
    let synthesis = synthesize_problem(&problem, &cfg.solver)?;
    let gauge = gauge_settings(cfg);
    let clean = &synthesis.measurements;
    let (rec0, t0, res0) = reconstruct_and_resolve(&problem, &synthesis, clean, &cfg.recon, &gauge)?;
    let base = recovered_fields(&problem, rec0.as_ref(), t0.as_ref(), res0.as_ref())?;
    let base_fields: Vec<Vec<ScalarField>> = base.fields.iter().map(|(_, f)| f.clone()).collect();
    let interior = interior_mask(&problem.grid, 1)?;
    let per_eps = cfg
        .epsilons
        .par_iter()
        .map(|&eps| -> Result<(f64, f64, Vec<QuantityMetrics>, Vec<String>)> {
            let spec = NoiseSpec {
                epsilon: eps,
                correlation_length: nc.correlation_length,
                seed: cfg.seed,
            };
            let noisy = add_noise(clean, &spec)?;
            let mut dh = 0.0f64;
            for (a, b) in noisy.functionals.iter().zip(&clean.functionals) {
                dh = dh.max(error_norms(a, b, &interior)?.c2);
            }
            let (rec, t, res) = reconstruct_and_resolve(&problem, &synthesis, &noisy, &cfg.recon, &gauge)?;
            let warnings = res.as_ref().map(|r| r.report.warnings.clone()).unwrap_or_default();
            let rf = recovered_fields(&problem, rec.as_ref(), t.as_ref(), res.as_ref())?;
            let metrics = compare(&rf, &base_fields, Some(&base.mask))?;
            Ok((eps, dh, metrics, warnings))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (eps, dh, metrics, w) in &per_eps {
        warnings.extend(w.iter().map(|s| format!("epsilon {eps:e}: {s}")));
        for q in metrics {
            rows.push(SweepRow {
                epsilon: *eps,
                delta_h_c2: *dh,
                quantity: q.quantity.clone(),
                c0: q.metrics.c0,
                c1: q.metrics.c1,
                ratio: if *dh > 0.0 { q.metrics.c0 / dh } else { f64::NAN },
            });
        }
    }
    let spreads = base
        .fields
        .iter()
        .map(|(name, _)| {
            let ratios: Vec<f64> = rows
                .iter()
                .filter(|r| &r.quantity == name && r.epsilon > 0.0)
                .map(|r| r.ratio)
                .collect();
            let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let max = ratios.iter().copied().fold(0.0, f64::max);
            SweepSpread {
                quantity: name.clone(),
                min_ratio: min,
                max_ratio: max,
                spread: max / min,
            }
        })
        .collect();
    let report = NoiseSweepReport {
        schema_version: SCHEMA_VERSION,
        modality: modality_name(&problem.modality).into(),
        correlation_length: nc.correlation_length,
        seed: cfg.seed,
        rows,
        spreads,
        warnings,
    };
    if let Some(dir) = output_dir(cfg) {
        write_text(&dir.join("noise_sweep.json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&dir.join("noise_sweep.csv"), &sweep_csv(&report))?;
    }
    Ok(report)
}

pub fn sweep_csv(r: &NoiseSweepReport) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "{:e},{:.12e},{},{:.12e},{:.12e},{:.12e}",
            row.epsilon, row.delta_h_c2, row.quantity, row.c0, row.c1, row.ratio
        );
    }
    s
}

/// Solves the forward problem for every trace of the configuration.
pub fn run_forward(cfg: &ExperimentConfig) -> Result<Vec<ScalarField>> {
    let problem = build_problem(cfg, None)?;
    let solver = ForwardSolver::new(&problem.coefficients, &cfg.solver)?;
    let us = solver.solve_many(&problem.traces)?;
    if let Some(dir) = output_dir(cfg) {
        for (j, u) in us.iter().enumerate() {
            io::write_scalar(&dir.join(format!("u_{}", j + 1)), u)?;
        }
    }
    Ok(us)
}

/// Synthesizes (and perturbs, if configured) the measurement set.
pub fn run_synth(cfg: &ExperimentConfig) -> Result<MeasurementSet> {
    let problem = build_problem(cfg, None)?;
    let synthesis = synthesize_problem(&problem, &cfg.solver)?;
    let ms = match cfg.noise.and_then(|nc| noise_spec(cfg, nc.epsilon)) {
        Some(spec) if spec.epsilon > 0.0 => add_noise(&synthesis.measurements, &spec)?,
        _ => synthesis.measurements,
    };
    if let Some(dir) = output_dir(cfg) {
        io::write_measurements(&dir.join("measurements"), &ms)?;
    }
    Ok(ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "grid": {"bounds": [[0, 1], [0, 1]], "shape": [17, 17]},
            "coefficients": {"a": "1", "c": "0"}
        })
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v = base_json();
        v["colour"] = serde_json::json!("red");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let mut v = base_json();
        v["coefficients"]["e"] = serde_json::json!("1");
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn two_levels_rejected() {
        let mut v = base_json();
        v["study"] = serde_json::json!("convergence");
        v["levels"] = serde_json::json!([17, 33]);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_needs_zero_amplitude() {
        let mut v = base_json();
        v["study"] = serde_json::json!("noise-sweep");
        v["noise"] = serde_json::json!({"correlation_length": 0.1});
        v["epsilons"] = serde_json::json!([1e-4, 2e-4, 4e-4]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        v["epsilons"] = serde_json::json!([0.0, 1e-4, 2e-4]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_ok());
    }

    #[test]
    fn modality_parsing() {
        let mut v = base_json();
        v["modality"] = serde_json::json!({"kind": "qtat", "gamma": "1"});
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        assert_eq!(cfg.modality, ModalityConfig::Qtat { gamma: "1".into(), a_real: true });
        v["modality"] = serde_json::json!({"kind": "generic", "d": "1", "constraint": {"divergence": null}});
        v["coefficients"]["b"] = serde_json::json!(["0.1", "0"]);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_ok());
        v["modality"] = serde_json::json!({"kind": "generic", "d": "1", "constraint": {"component": {"axis": 1, "value": "0"}}});
        assert!(ExperimentConfig::from_json(&v.to_string()).is_ok());
    }

    #[test]
    fn functional_shortfall_is_typed() {
        let mut v = base_json();
        v["functionals"] = serde_json::json!(4);
        assert!(matches!(
            ExperimentConfig::from_json(&v.to_string()),
            Err(Error::TooFewFunctionals { required: 5, given: 4, .. })
        ));
    }

    #[test]
    fn error_norm_examples() {
        let g = Grid::unit(2, 65).unwrap();
        let mask = interior_mask(&g, 3).unwrap();
        let r = ScalarField::from_real(&g, |x| x[0] * x[1] + x[0]);
        let same = error_norms(&r, &r, &mask).unwrap();
        assert_eq!((same.c0, same.c1, same.c2), (0.0, 0.0, 0.0));
        let shifted = r.map(|v| v + 1.0);
        let m = error_norms(&shifted, &r, &mask).unwrap();
        assert!((m.c0 - 1.0).abs() < 1e-12 && (m.c1 - 1.0).abs() < 1e-9 && (m.c2 - 1.0).abs() < 1e-6);
        let delta = 1e-3;
        let wavy = ScalarField::from_real(&g, |x| x[0] * x[1] + x[0] + delta * (10.0 * x[0]).sin());
        let m = error_norms(&wavy, &r, &mask).unwrap();
        assert!(m.c0 <= m.c1 && m.c1 <= m.c2);
        assert!((m.c2 / (100.0 * delta) - 1.0).abs() < 0.05, "{}", m.c2);
        let empty = InteriorMask::from_flags(&g, 1, vec![false; g.len()]);
        assert!(error_norms(&r, &r, &empty).is_err());
    }

    #[test]
    fn order_fit() {
        let h = [0.1, 0.05, 0.025];
        let (o, note) = fit_order(&h, &[1e-2, 2.5e-3, 6.25e-4]);
        assert!((o - 2.0).abs() < 1e-12 && note.is_none());
        assert!(fit_order(&h, &[1e-2, 2e-2, 1e-3]).0.is_nan());
        let (o, note) = fit_order(&h, &[1e-15, 2e-15, 1e-15]);
        assert!(o.is_nan() && note.unwrap().contains("rounding"));
    }

    #[test]
    fn harmonic_single_run() {
        let mut v = base_json();
        v["traces"] = serde_json::json!(["1", "x", "y", "x*y", "x^2-y^2"]);
        let cfg = ExperimentConfig::from_json(&v.to_string()).unwrap();
        let (report, _) = run_single(&cfg, false).unwrap();
        for q in &report.metrics {
            assert!(q.metrics.rel_c0 <= 1e-8, "{} {}", q.quantity, q.metrics.rel_c0);
        }
        assert!(report.admissibility.unwrap().pass);
    }
}
