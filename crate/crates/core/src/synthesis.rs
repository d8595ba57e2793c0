//! Internal functionals `H_j = d u_j` for each imaging modality, and smooth
//! random perturbations of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, C64, ONE};
use crate::forward::{BoundaryTrace, CoefficientSet, ForwardSolver};
use crate::grid::Grid;
use crate::linalg::SolverSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityTag {
    Elastography,
    Qpat,
    Qtat,
    Generic,
}

/// How the weight `d` is formed from the coefficients.
#[derive(Clone, Debug)]
pub enum Modality {
    /// `d = 1`, `b = 0`.
    Elastography,
    /// `d = Γ c`, `b = 0`.
    Qpat { gamma: ScalarField },
    /// `d = Γ (Im c) conj(u_1)`, `b = 0`.
    Qtat { gamma: ScalarField },
    /// Any non-vanishing `d`.
    Generic { d: ScalarField },
}

impl Modality {
    pub fn tag(&self) -> ModalityTag {
        match self {
            Modality::Elastography => ModalityTag::Elastography,
            Modality::Qpat { .. } => ModalityTag::Qpat,
            Modality::Qtat { .. } => ModalityTag::Qtat,
            Modality::Generic { .. } => ModalityTag::Generic,
        }
    }
}

/// Smooth noise: white noise blurred by a Gaussian of width
/// `correlation_length`, rescaled to unit sup norm, then multiplied by
/// `epsilon * sup|H_j|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub correlation_length: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            epsilon: 0.0,
            correlation_length: 0.1,
            seed: 0,
        }
    }
}

/// The data visible to the reconstruction side.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub grid: Grid,
    pub modality: ModalityTag,
    pub traces: Vec<BoundaryTrace>,
    pub functionals: Vec<ScalarField>,
    /// `min |H_1|` over interior points.
    pub min_h1: f64,
    pub noise: Option<NoiseSpec>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.functionals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functionals.is_empty()
    }

    /// Keeps only the functionals at `indices` (in that order).
    pub fn select(&self, indices: &[usize]) -> Result<MeasurementSet> {
        let mut out = self.clone();
        out.traces = Vec::with_capacity(indices.len());
        out.functionals = Vec::with_capacity(indices.len());
        for &k in indices {
            if k >= self.len() {
                return Err(Error::Config(format!("functional index {k} out of range")));
            }
            out.traces.push(self.traces[k].clone());
            out.functionals.push(self.functionals[k].clone());
        }
        out.min_h1 = interior_min_abs(&out.functionals[0]);
        Ok(out)
    }
}

/// Everything produced while synthesizing, including hidden quantities.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub measurements: MeasurementSet,
    pub solutions: Vec<ScalarField>,
    /// The realized weight; depends on `u_1` for QTAT.
    pub d: ScalarField,
    pub d_depends_on_solution: bool,
}

/// Default relative threshold for `|H_1|`.
pub const H1_RELATIVE_THRESHOLD: f64 = 1e-8;

/// `I_n = n(n+3)/2`, the functional count for tensor-valued `a`.
pub const fn tensor_count(dim: usize) -> usize {
    dim * (dim + 3) / 2
}

/// `M_n = n(n+1)/2 - 1`, the number of constraint matrices.
pub const fn constraint_count(dim: usize) -> usize {
    dim * (dim + 1) / 2 - 1
}

/// Low-degree harmonic polynomials used as boundary conditions.
pub fn default_trace_exprs(dim: usize, count: usize) -> Result<Vec<String>> {
    let all: &[&str] = match dim {
        2 => &["1", "x", "y", "x*y", "x^2-y^2"],
        3 => &["1", "x", "y", "z", "x*y", "x*z", "y*z", "x^2-y^2", "x^2-z^2"],
        _ => return Err(Error::Config(format!("unsupported dimension {dim}"))),
    };
    if count != dim + 1 && count != tensor_count(dim) {
        return Err(Error::Config(format!(
            "default traces exist for J = {} or J = {} in {dim}-D, not {count}",
            dim + 1,
            tensor_count(dim)
        )));
    }
    Ok(all[..count].iter().map(|s| s.to_string()).collect())
}

pub fn traces_from_exprs<S: AsRef<str>>(grid: &Grid, exprs: &[S]) -> Result<Vec<BoundaryTrace>> {
    exprs.iter().map(|e| BoundaryTrace::from_expr(grid, e.as_ref())).collect()
}

pub fn default_traces(grid: &Grid, count: usize) -> Result<Vec<BoundaryTrace>> {
    traces_from_exprs(grid, &default_trace_exprs(grid.dim(), count)?)
}

fn interior_min_abs(f: &ScalarField) -> f64 {
    (0..f.grid.len())
        .filter(|&p| !f.grid.is_boundary(p))
        .map(|p| f.values[p].norm())
        .fold(f64::INFINITY, f64::min)
}

/// Interior points where `|H_1|` is below `rel * sup|H_1|`.
pub fn vanishing_points(h1: &ScalarField, rel: f64) -> (f64, Vec<usize>) {
    let threshold = rel * h1.sup();
    let pts = (0..h1.grid.len())
        .filter(|&p| !h1.grid.is_boundary(p) && !(h1.values[p].norm() > threshold))
        .collect();
    (threshold, pts)
}

fn check_modality(co: &CoefficientSet, modality: &Modality) -> Result<()> {
    let needs_b_zero = !matches!(modality, Modality::Generic { .. });
    if needs_b_zero && !co.b.is_zero() {
        return Err(Error::Config(format!("{:?} requires b = 0", modality.tag())));
    }
    let same_grid = |f: &ScalarField| {
        if f.grid.compatible(co.grid()) {
            Ok(())
        } else {
            Err(Error::Config("modality field grid does not match coefficients".into()))
        }
    };
    match modality {
        Modality::Qpat { gamma } => {
            same_grid(gamma)?;
            if co.c.values.iter().any(|v| v.im != 0.0 || v.re <= 0.0) {
                return Err(Error::Config("QPAT requires a real positive absorption c".into()));
            }
        }
        Modality::Qtat { gamma } => same_grid(gamma)?,
        Modality::Generic { d } => same_grid(d)?,
        Modality::Elastography => {}
    }
    Ok(())
}

pub fn synthesize(
    co: &CoefficientSet,
    modality: &Modality,
    traces: &[BoundaryTrace],
    settings: &SolverSettings,
) -> Result<Synthesis> {
    if traces.is_empty() {
        return Err(Error::Config("at least one boundary trace is required".into()));
    }
    check_modality(co, modality)?;
    let g = *co.grid();
    let solver = ForwardSolver::new(co, settings)?;
    let solutions = solver.solve_many(traces)?;
    let u1 = &solutions[0];
    let (d, dependent) = match modality {
        Modality::Elastography => (ScalarField::constant(&g, ONE), false),
        Modality::Qpat { gamma } => (gamma.zip_with(&co.c, |a, b| a * b), false),
        Modality::Qtat { gamma } => {
            let w = gamma.zip_with(&co.c, |a, c| a * c.im);
            (w.zip_with(u1, |a, u| a * u.conj()), true)
        }
        Modality::Generic { d } => (d.clone(), false),
    };
    let functionals: Vec<ScalarField> = solutions.iter().map(|u| d.zip_with(u, |a, b| a * b)).collect();
    let (threshold, bad) = vanishing_points(&functionals[0], H1_RELATIVE_THRESHOLD);
    if !bad.is_empty() {
        return Err(Error::NonVanishing { threshold, points: bad });
    }
    let min_h1 = interior_min_abs(&functionals[0]);
    Ok(Synthesis {
        measurements: MeasurementSet {
            grid: g,
            modality: modality.tag(),
            traces: traces.to_vec(),
            functionals,
            min_h1,
            noise: None,
        },
        solutions,
        d,
        d_depends_on_solution: dependent,
    })
}

/// Unit-sup smooth random field for functional `j`.
pub fn smooth_noise(grid: &Grid, spec: &NoiseSpec, j: usize) -> Result<ScalarField> {
    if !(spec.correlation_length > 0.0) {
        return Err(Error::Config("noise correlation length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(j as u64));
    let mut data: Vec<f64> = (0..grid.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    for axis in 0..grid.dim() {
        let h = grid.spacing()[axis];
        let radius = ((4.0 * spec.correlation_length) / h).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| {
                let r = k as f64 * h / spec.correlation_length;
                (-0.5 * r * r).exp()
            })
            .collect();
        let s = grid.stride(axis);
        let n = grid.shape()[axis] as isize;
        let src = data.clone();
        for (p, out) in data.iter_mut().enumerate() {
            let i = grid.multi_index(p)[axis] as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let t = i + k as isize - radius;
                if (0..n).contains(&t) {
                    let q = (p as isize + (t - i) * s as isize) as usize;
                    acc += w * src[q];
                }
            }
            *out = acc;
        }
    }
    let peak = data.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let values = data.iter().map(|v| C64::new(v / peak, 0.0)).collect();
    ScalarField::new(grid, values)
}

pub fn add_noise(ms: &MeasurementSet, spec: &NoiseSpec) -> Result<MeasurementSet> {
    if !(spec.epsilon >= 0.0) {
        return Err(Error::Config("noise amplitude must be non-negative".into()));
    }
    let mut out = ms.clone();
    out.noise = Some(*spec);
    if spec.epsilon == 0.0 {
        return Ok(out);
    }
    for (j, h) in out.functionals.iter_mut().enumerate() {
        let eta = smooth_noise(&ms.grid, spec, j)?;
        let amp = spec.epsilon * h.sup();
        for (v, e) in h.values.iter_mut().zip(&eta.values) {
            *v += amp * e;
        }
    }
    out.min_h1 = interior_min_abs(&out.functionals[0]);
    Ok(out)
}
