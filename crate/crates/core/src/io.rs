//! Field files and measurement manifests.
//!
//! A field is stored as `<stem>.bin` (little-endian `f64` pairs `re, im`,
//! point-major, components interleaved) next to `<stem>.json` describing the
//! grid and the field kind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{sym_len, ScalarField, SymTensorField, VectorField, C64};
use crate::forward::BoundaryTrace;
use crate::grid::{make_grid, Grid};
use crate::synthesis::{MeasurementSet, ModalityTag, NoiseSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Scalar,
    Vector,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub dim: usize,
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
    pub kind: FieldKind,
}

#[derive(Clone, Debug)]
pub enum AnyField {
    Scalar(ScalarField),
    Vector(VectorField),
    Tensor(SymTensorField),
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_raw(stem: &Path, grid: &Grid, kind: FieldKind, values: &[C64]) -> Result<()> {
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = FieldHeader {
        dim: grid.dim(),
        bounds: grid.bounds(),
        shape: grid.shape().to_vec(),
        kind,
    };
    let mut bytes = Vec::with_capacity(values.len() * 16);
    for v in values {
        bytes.extend_from_slice(&v.re.to_le_bytes());
        bytes.extend_from_slice(&v.im.to_le_bytes());
    }
    fs::write(with_ext(stem, "bin"), bytes)?;
    fs::write(with_ext(stem, "json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn write_scalar(stem: &Path, f: &ScalarField) -> Result<()> {
    write_raw(stem, &f.grid, FieldKind::Scalar, &f.values)
}

pub fn write_vector(stem: &Path, f: &VectorField) -> Result<()> {
    write_raw(stem, &f.grid, FieldKind::Vector, &f.values)
}

pub fn write_tensor(stem: &Path, f: &SymTensorField) -> Result<()> {
    write_raw(stem, &f.grid, FieldKind::Tensor, &f.values)
}

pub fn read_field(stem: &Path) -> Result<AnyField> {
    let header: FieldHeader = serde_json::from_str(&fs::read_to_string(with_ext(stem, "json"))?)?;
    let grid = make_grid(&header.bounds, &header.shape)?;
    if grid.dim() != header.dim {
        return Err(Error::Config(format!("field header dimension {} disagrees with bounds", header.dim)));
    }
    let bytes = fs::read(with_ext(stem, "bin"))?;
    let ncomp = match header.kind {
        FieldKind::Scalar => 1,
        FieldKind::Vector => grid.dim(),
        FieldKind::Tensor => sym_len(grid.dim()),
    };
    if bytes.len() != grid.len() * ncomp * 16 {
        return Err(Error::Config(format!(
            "field data has {} bytes, expected {}",
            bytes.len(),
            grid.len() * ncomp * 16
        )));
    }
    let f = |i: usize| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8-byte chunk"));
    let values: Vec<C64> = (0..grid.len() * ncomp).map(|k| C64::new(f(2 * k), f(2 * k + 1))).collect();
    Ok(match header.kind {
        FieldKind::Scalar => AnyField::Scalar(ScalarField::new(&grid, values)?),
        FieldKind::Vector => AnyField::Vector(VectorField::new(&grid, values)?),
        FieldKind::Tensor => AnyField::Tensor(SymTensorField::new(&grid, values)?),
    })
}

pub fn read_scalar(stem: &Path) -> Result<ScalarField> {
    match read_field(stem)? {
        AnyField::Scalar(f) => Ok(f),
        _ => Err(Error::Config(format!("{} is not a scalar field", stem.display()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementManifest {
    pub schema_version: u32,
    pub modality: ModalityTag,
    #[serde(rename = "J")]
    pub count: usize,
    /// Expression of each boundary trace, when it came from one.
    pub traces: Vec<Option<String>>,
    pub noise: Option<NoiseSpec>,
    pub min_h1: f64,
    /// Field stems of the functionals, relative to the manifest.
    pub functionals: Vec<String>,
    /// Field stems of the boundary traces (full grid, zero inside).
    pub trace_fields: Vec<String>,
}

pub const MANIFEST_NAME: &str = "measurements.json";

pub fn write_measurements(dir: &Path, ms: &MeasurementSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut functionals = Vec::new();
    let mut trace_fields = Vec::new();
    for (j, (h, t)) in ms.functionals.iter().zip(&ms.traces).enumerate() {
        let (hs, ts) = (format!("H_{}", j + 1), format!("f_{}", j + 1));
        write_scalar(&dir.join(&hs), h)?;
        write_scalar(&dir.join(&ts), &t.to_field())?;
        functionals.push(hs);
        trace_fields.push(ts);
    }
    let manifest = MeasurementManifest {
        schema_version: SCHEMA_VERSION,
        modality: ms.modality,
        count: ms.len(),
        traces: ms.traces.iter().map(|t| t.label.clone()).collect(),
        noise: ms.noise,
        min_h1: ms.min_h1,
        functionals,
        trace_fields,
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_measurements(dir: &Path) -> Result<MeasurementSet> {
    let manifest: MeasurementManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_NAME))?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported manifest schema {}", manifest.schema_version)));
    }
    if manifest.functionals.len() != manifest.count || manifest.trace_fields.len() != manifest.count {
        return Err(Error::Config("manifest lists inconsistent functional counts".into()));
    }
    let functionals = manifest
        .functionals
        .iter()
        .map(|s| read_scalar(&dir.join(s)))
        .collect::<Result<Vec<_>>>()?;
    let grid = functionals
        .first()
        .map(|f| f.grid)
        .ok_or_else(|| Error::Config("manifest lists no functionals".into()))?;
    let mut traces = Vec::with_capacity(manifest.count);
    for (s, label) in manifest.trace_fields.iter().zip(&manifest.traces) {
        let mut t = BoundaryTrace::from_field(&read_scalar(&dir.join(s))?);
        t.label = label.clone();
        traces.push(t);
    }
    if functionals.iter().any(|f| !f.grid.compatible(&grid)) {
        return Err(Error::Config("functionals live on different grids".into()));
    }
    Ok(MeasurementSet {
        grid,
        modality: manifest.modality,
        traces,
        functionals,
        min_h1: manifest.min_h1,
        noise: manifest.noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = make_grid(&[[0.0, 1.0], [-1.0, 2.0]], &[5, 7]).unwrap();
        let s = ScalarField::from_fn(&g, |x| C64::new(x[0], x[1] * x[0]));
        write_scalar(&dir.path().join("s"), &s).unwrap();
        let back = read_scalar(&dir.path().join("s")).unwrap();
        assert_eq!(back.values, s.values);
        assert!(back.grid.compatible(&g));
        let t = SymTensorField::from_fn(&g, |x| vec![C64::new(x[0], 0.0), C64::new(1.0, -x[1]), C64::new(0.5, 0.0)]);
        write_tensor(&dir.path().join("sub/t"), &t).unwrap();
        match read_field(&dir.path().join("sub/t")).unwrap() {
            AnyField::Tensor(b) => assert_eq!(b.values, t.values),
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_scalar(&dir.path().join("sub/t")).is_err());
    }

    #[test]
    fn truncated_data_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::unit(2, 5).unwrap();
        write_scalar(&dir.path().join("s"), &ScalarField::constant(&g, C64::new(1.0, 0.0))).unwrap();
        fs::write(dir.path().join("s.bin"), [0u8; 8]).unwrap();
        assert!(matches!(read_field(&dir.path().join("s")), Err(Error::Config(_))));
    }
}
