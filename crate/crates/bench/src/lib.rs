//! Fixtures shared by the benchmarks.

use hyrec_core::forward::CoefficientSet;
use hyrec_core::synthesis::{default_traces, synthesize, MeasurementSet, Modality};
use hyrec_core::{Grid, ScalarField};

pub fn bump_coefficients(n: usize) -> CoefficientSet {
    let g = Grid::unit(2, n).expect("grid");
    let a = ScalarField::from_real(&g, |x| 1.0 + 0.3 * (-20.0 * ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2))).exp());
    let c = ScalarField::from_real(&g, |x| 0.5 + 0.2 * x[0] * x[1]);
    CoefficientSet::isotropic(&a, &c)
}

pub fn bump_measurements(n: usize) -> MeasurementSet {
    let co = bump_coefficients(n);
    let traces = default_traces(co.grid(), 5).expect("traces");
    synthesize(&co, &Modality::Elastography, &traces, &Default::default())
        .expect("synthesis")
        .measurements
}
