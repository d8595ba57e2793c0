//! Vertex-centred tensor-product grids over a box.
//!
//! Points are ordered lexicographically with the last axis fastest. Boundary
//! points are part of the grid so Dirichlet data can be imposed directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_AXIS_POINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    dim: usize,
    lo: [f64; 3],
    hi: [f64; 3],
    shape: [usize; 3],
    spacing: [f64; 3],
    strides: [usize; 3],
}

/// Serialized form of a grid: per-axis bounds and point counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: Vec<[f64; 2]>,
    pub shape: Vec<usize>,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;
    fn try_from(spec: GridSpec) -> Result<Grid> {
        make_grid(&spec.bounds, &spec.shape)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> GridSpec {
        GridSpec {
            bounds: (0..g.dim).map(|k| [g.lo[k], g.hi[k]]).collect(),
            shape: g.shape[..g.dim].to_vec(),
        }
    }
}

/// Builds a grid from per-axis `[lo, hi]` intervals and point counts.
pub fn make_grid(bounds: &[[f64; 2]], shape: &[usize]) -> Result<Grid> {
    let dim = bounds.len();
    if !(2..=3).contains(&dim) {
        return Err(Error::Config(format!("grid dimension must be 2 or 3, got {dim}")));
    }
    if shape.len() != dim {
        return Err(Error::Config(format!(
            "grid has {dim} bounds but {} shape entries",
            shape.len()
        )));
    }
    let mut g = Grid {
        dim,
        lo: [0.0; 3],
        hi: [0.0; 3],
        shape: [1; 3],
        spacing: [0.0; 3],
        strides: [1; 3],
    };
    for k in 0..dim {
        let [lo, hi] = bounds[k];
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::Config(format!("axis {k}: degenerate interval [{lo}, {hi}]")));
        }
        if shape[k] < MIN_AXIS_POINTS {
            return Err(Error::Config(format!(
                "axis {k}: {} points, need at least {MIN_AXIS_POINTS}",
                shape[k]
            )));
        }
        g.lo[k] = lo;
        g.hi[k] = hi;
        g.shape[k] = shape[k];
        g.spacing[k] = (hi - lo) / (shape[k] - 1) as f64;
    }
    for k in (0..dim.saturating_sub(1)).rev() {
        g.strides[k] = g.strides[k + 1] * g.shape[k + 1];
    }
    Ok(g)
}

impl Grid {
    /// Unit square / cube with `n` points per axis.
    pub fn unit(dim: usize, n: usize) -> Result<Grid> {
        make_grid(&vec![[0.0, 1.0]; dim], &vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.dim]
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo[..self.dim]
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi[..self.dim]
    }

    pub fn bounds(&self) -> Vec<[f64; 2]> {
        (0..self.dim).map(|k| [self.lo[k], self.hi[k]]).collect()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.shape[..self.dim].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest side length of the box.
    pub fn extent(&self) -> f64 {
        (0..self.dim)
            .map(|k| self.hi[k] - self.lo[k])
            .fold(0.0, f64::max)
    }

    pub fn index(&self, ijk: &[usize]) -> usize {
        (0..self.dim).map(|k| ijk[k] * self.strides[k]).sum()
    }

    pub fn multi_index(&self, p: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut rem = p;
        for k in 0..self.dim {
            out[k] = rem / self.strides[k];
            rem %= self.strides[k];
        }
        out
    }

    /// Physical coordinates of point `p` (unused axes are zero).
    pub fn coords(&self, p: usize) -> [f64; 3] {
        let idx = self.multi_index(p);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = if idx[k] + 1 == self.shape[k] {
                self.hi[k]
            } else {
                self.lo[k] + idx[k] as f64 * self.spacing[k]
            };
        }
        x
    }

    /// Number of grid steps from `p` to the nearest boundary face.
    pub fn margin_of(&self, p: usize) -> usize {
        let idx = self.multi_index(p);
        (0..self.dim)
            .map(|k| idx[k].min(self.shape[k] - 1 - idx[k]))
            .min()
            .unwrap_or(0)
    }

    pub fn is_boundary(&self, p: usize) -> bool {
        self.margin_of(p) == 0
    }

    /// Boundary point indices in grid order.
    pub fn boundary_points(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.is_boundary(p)).collect()
    }

    /// The sub-grid of points at least `margin` steps from every face.
    pub fn shrink(&self, margin: usize) -> Result<Grid> {
        let mut bounds = Vec::with_capacity(self.dim);
        let mut shape = Vec::with_capacity(self.dim);
        for k in 0..self.dim {
            if self.shape[k] < 2 * margin + MIN_AXIS_POINTS {
                return Err(Error::Config(format!(
                    "axis {k}: {} points leave fewer than {MIN_AXIS_POINTS} after removing a margin of {margin}",
                    self.shape[k]
                )));
            }
            let lo = self.lo[k] + margin as f64 * self.spacing[k];
            let hi = self.lo[k] + (self.shape[k] - 1 - margin) as f64 * self.spacing[k];
            bounds.push([lo, hi]);
            shape.push(self.shape[k] - 2 * margin);
        }
        let mut g = make_grid(&bounds, &shape)?;
        // keep the parent spacing bit-for-bit
        g.spacing = self.spacing;
        Ok(g)
    }

    /// Maps a point of `self.shrink(margin)` back to this grid.
    pub fn parent_index(&self, margin: usize, sub: &Grid, q: usize) -> usize {
        let idx = sub.multi_index(q);
        let shifted: Vec<usize> = (0..self.dim).map(|k| idx[k] + margin).collect();
        self.index(&shifted)
    }

    /// Whether two grids describe the same points (up to rounding of bounds).
    pub fn compatible(&self, other: &Grid) -> bool {
        self.dim == other.dim
            && self.shape == other.shape
            && (0..self.dim).all(|k| {
                let tol = 1e-12 * (1.0 + self.hi[k].abs() + self.lo[k].abs());
                (self.lo[k] - other.lo[k]).abs() <= tol && (self.hi[k] - other.hi[k]).abs() <= tol
            })
    }
}

/// Points at least `margin` grid steps from every boundary face.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorMask {
    pub grid: Grid,
    pub margin: usize,
    flags: Vec<bool>,
}

pub fn interior_mask(grid: &Grid, margin: usize) -> Result<InteriorMask> {
    let min_axis = grid.shape().iter().copied().min().unwrap_or(0);
    if margin < 1 || 2 * margin >= min_axis {
        return Err(Error::Config(format!(
            "interior margin {margin} invalid for smallest axis of {min_axis} points"
        )));
    }
    let flags = (0..grid.len()).map(|p| grid.margin_of(p) >= margin).collect();
    Ok(InteriorMask {
        grid: *grid,
        margin,
        flags,
    })
}

impl InteriorMask {
    /// Wraps explicit flags (used for validity masks derived from data).
    pub fn from_flags(grid: &Grid, margin: usize, flags: Vec<bool>) -> InteriorMask {
        assert_eq!(flags.len(), grid.len());
        InteriorMask {
            grid: *grid,
            margin,
            flags,
        }
    }

    pub fn contains(&self, p: usize) -> bool {
        self.flags[p]
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn points(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(p, &f)| f.then_some(p))
    }

    /// Drops every point whose axis neighbours are not all flagged.
    pub fn erode(&self) -> InteriorMask {
        let g = &self.grid;
        let flags = (0..g.len())
            .map(|p| {
                if !self.flags[p] || g.is_boundary(p) {
                    return false;
                }
                (0..g.dim()).all(|k| {
                    let s = g.stride(k);
                    self.flags[p - s] && self.flags[p + s]
                })
            })
            .collect();
        InteriorMask {
            grid: *g,
            margin: self.margin + 1,
            flags,
        }
    }

    pub fn and(&self, other: &InteriorMask) -> InteriorMask {
        let flags = self
            .flags
            .iter()
            .zip(&other.flags)
            .map(|(&a, &b)| a && b)
            .collect();
        InteriorMask {
            grid: self.grid,
            margin: self.margin.max(other.margin),
            flags,
        }
    }

    /// Restricts the mask to `grid.shrink(margin)`.
    pub fn shrink(&self, margin: usize) -> Result<InteriorMask> {
        let sub = self.grid.shrink(margin)?;
        let flags = (0..sub.len())
            .map(|q| self.flags[self.grid.parent_index(margin, &sub, q)])
            .collect();
        Ok(InteriorMask {
            grid: sub,
            margin: self.margin.saturating_sub(margin),
            flags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_from_bounds() {
        let g = make_grid(&[[0.0, 1.0], [0.0, 1.0]], &[5, 5]).unwrap();
        assert_eq!(g.spacing(), &[0.25, 0.25]);
        let g = make_grid(&[[-1.0, 1.0], [0.0, 2.0]], &[11, 21]).unwrap();
        assert!((g.spacing()[0] - 0.2).abs() < 1e-15);
        assert!((g.spacing()[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_small_or_degenerate_axes() {
        assert!(make_grid(&[[0.0, 1.0], [0.0, 1.0]], &[4, 5]).is_err());
        assert!(make_grid(&[[1.0, 1.0], [0.0, 1.0]], &[5, 5]).is_err());
        assert!(make_grid(&[[0.0, 1.0]], &[5]).is_err());
    }

    #[test]
    fn ordering_is_last_axis_fastest() {
        let g = make_grid(&[[0.0, 1.0], [0.0, 2.0]], &[5, 6]).unwrap();
        assert_eq!(g.index(&[0, 1]), 1);
        assert_eq!(g.index(&[1, 0]), 6);
        assert_eq!(g.coords(7), [0.25, 0.4, 0.0]);
        assert_eq!(g.multi_index(13), [2, 1, 0]);
    }

    #[test]
    fn mask_counts() {
        let g = Grid::unit(2, 5).unwrap();
        assert_eq!(interior_mask(&g, 1).unwrap().count(), 9);
        assert_eq!(interior_mask(&g, 2).unwrap().count(), 1);
        assert!(interior_mask(&g, 3).is_err());
        assert!(interior_mask(&g, 0).is_err());
    }

    #[test]
    fn shrink_preserves_points() {
        let g = Grid::unit(2, 9).unwrap();
        let s = g.shrink(2).unwrap();
        assert_eq!(s.shape(), &[5, 5]);
        for q in 0..s.len() {
            let p = g.parent_index(2, &s, q);
            let (a, b) = (g.coords(p), s.coords(q));
            assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
        }
    }
}
