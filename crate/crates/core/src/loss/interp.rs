//! Interpolation of positive prototypes across neighboring cells.

use crate::cellgrid::{
    cell_center, cell_from_point, cells_overlapping_triangle, face_grid_coords, k_nearest_cells,
    CellId, GeoPoint,
};
use crate::error::{invalid, Result};

/// Sparse convex weights over cells, sorted by cell id.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationWeights(Vec<(CellId, f64)>);

impl InterpolationWeights {
    /// Validates nonnegativity and unit sum, then sorts by cell.
    pub fn new(mut entries: Vec<(CellId, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("interpolation weights must be nonempty"));
        }
        if entries.iter().any(|(_, w)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("interpolation weights must be nonnegative"));
        }
        let sum: f64 = entries.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("interpolation weights sum to {sum}")));
        }
        entries.sort_by_key(|e| e.0);
        Ok(Self(entries))
    }

    pub fn single(cell: CellId) -> Self {
        Self(vec![(cell, 1.0)])
    }

    pub fn entries(&self) -> &[(CellId, f64)] {
        &self.0
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.0.iter().map(|(c, _)| *c)
    }

    pub fn weight(&self, cell: &CellId) -> f64 {
        self.0
            .binary_search_by(|(c, _)| c.cmp(cell))
            .map_or(0.0, |k| self.0[k].1)
    }

    /// Same support with equal weights.
    pub fn uniform(&self) -> Self {
        let w = 1.0 / self.0.len() as f64;
        Self(self.0.iter().map(|(c, _)| (*c, w)).collect())
    }
}

pub fn nearest_weights(p: &GeoPoint, level: u8) -> Result<InterpolationWeights> {
    Ok(InterpolationWeights::single(cell_from_point(p, level)?))
}

/// Prototype weights from the overlap of each cell with the camera's
/// triangular footprint.
pub fn frustum_weights(
    location: &GeoPoint,
    heading: f64,
    fov: f64,
    depth_m: f64,
    level: u8,
) -> Result<InterpolationWeights> {
    let cells = cells_overlapping_triangle(location, heading, fov, depth_m, level)?;
    let sum: f64 = cells.iter().map(|c| c.1).sum();
    InterpolationWeights::new(cells.into_iter().map(|(c, w)| (c, w / sum)).collect())
}

/// Cells covered by the frustum, equally weighted.
pub fn frustum_support(
    location: &GeoPoint,
    heading: f64,
    fov: f64,
    depth_m: f64,
    level: u8,
) -> Result<InterpolationWeights> {
    frustum_weights(location, heading, fov, depth_m, level).map(|w| w.uniform())
}

/// Bilinear weights over the (up to) four cells whose centers surround
/// `center` in the grid frame of the face containing it. These are the four
/// nearest cells except right next to a cell center, where the swapped-out
/// cell would get a weight near zero anyway; choosing the surrounding block
/// keeps the weights continuous.
pub fn bilinear_weights(center: &GeoPoint, level: u8) -> Result<InterpolationWeights> {
    let candidates = k_nearest_cells(center, level, 9)?;
    let face = cell_from_point(center, level)?.face();
    let (x, y) = face_grid_coords(face, center, level).expect("point lies on its own face");
    let mut entries: Vec<(CellId, f64)> = candidates
        .iter()
        .map(|c| {
            let w = face_grid_coords(face, &cell_center(c), level).map_or(0.0, |(cx, cy)| {
                (1.0 - (x - cx).abs()).max(0.0) * (1.0 - (y - cy).abs()).max(0.0)
            });
            (*c, w)
        })
        .filter(|e| e.1 > 0.0)
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    entries.truncate(4);
    let sum: f64 = entries.iter().map(|e| e.1).sum();
    if !(sum > 1e-12) {
        return Ok(InterpolationWeights::single(candidates[0]));
    }
    for e in &mut entries {
        e.1 /= sum;
    }
    InterpolationWeights::new(entries)
}
