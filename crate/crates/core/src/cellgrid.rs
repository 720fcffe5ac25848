//! Hierarchical cube-face quadtree over the sphere.
//!
//! A point is projected gnomonically onto the face of the circumscribed cube
//! whose axis is closest, giving face coordinates `(u, v)` in `[-1, 1]`. The
//! linear transform `s = (u + 1) / 2` maps those onto `[0, 1]`, and a cell at
//! level `L` is the `(i, j)` bucket of a `2^L x 2^L` grid over `(s, t)`.
//! Every cell splits into four children at the next level, so the parent of
//! a cell is a plain bit shift of its grid indices.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::OnceLock;

use crate::error::{invalid, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Deepest supported subdivision level.
pub const MAX_LEVEL: u8 = 20;

/// Number of cube faces.
pub const NUM_FACES: u8 = 6;

const FACE_SHIFT: u32 = 61;
const LEVEL_SHIFT: u32 = 56;
const I_SHIFT: u32 = 28;
const COORD_MASK: u64 = (1 << 28) - 1;

/// Samples per triangle edge for overlap estimation.
pub const TRIANGLE_GRID: usize = 32;

/// A location on the sphere, in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    /// Builds a point, normalizing longitude into `[-pi, pi)`.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(invalid(format!("non-finite coordinates ({lat}, {lon})")));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&lat) {
            return Err(invalid(format!("latitude {lat} outside [-pi/2, pi/2]")));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians())
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat.to_degrees()
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon.to_degrees()
    }

    /// Unit vector in Earth-centered coordinates.
    pub fn to_unit(&self) -> [f64; 3] {
        let (sl, cl) = self.lat.sin_cos();
        let (so, co) = self.lon.sin_cos();
        [cl * co, cl * so, sl]
    }

    /// Inverse of [`GeoPoint::to_unit`]; the input need not be normalized.
    pub fn from_unit(v: [f64; 3]) -> Self {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let z = (v[2] / n).clamp(-1.0, 1.0);
        Self {
            lat: z.asin(),
            lon: normalize_lon(v[1].atan2(v[0])),
        }
    }

    /// Point reached by travelling `distance_m` along the great circle with
    /// initial bearing `bearing` (radians clockwise from north).
    pub fn destination(&self, bearing: f64, distance_m: f64) -> Self {
        if distance_m == 0.0 {
            return *self;
        }
        let delta = distance_m / EARTH_RADIUS_M;
        let (sd, cd) = delta.sin_cos();
        let (sl, cl) = self.lat.sin_cos();
        let (sb, cb) = bearing.sin_cos();
        let lat = (sl * cd + cl * sd * cb).clamp(-1.0, 1.0).asin();
        let lon = self.lon + (sb * sd * cl).atan2(cd - sl * lat.sin());
        Self {
            lat,
            lon: normalize_lon(lon),
        }
    }

    /// Point at a local east/north offset, using the azimuthal equidistant
    /// tangent plane centered here.
    pub fn offset_enu(&self, east_m: f64, north_m: f64) -> Self {
        let d = east_m.hypot(north_m);
        if d == 0.0 {
            return *self;
        }
        self.destination(east_m.atan2(north_m), d)
    }

    /// East/north coordinates of `other` in the azimuthal equidistant plane
    /// centered here. Inverse of [`GeoPoint::offset_enu`].
    pub fn enu_of(&self, other: &GeoPoint) -> (f64, f64) {
        let d = haversine_distance(self, other);
        if d == 0.0 {
            return (0.0, 0.0);
        }
        let b = self.bearing_to(other);
        (d * b.sin(), d * b.cos())
    }

    /// Initial great-circle bearing towards `other`.
    pub fn bearing_to(&self, other: &GeoPoint) -> f64 {
        let dlon = other.lon - self.lon;
        let y = dlon.sin() * other.lat.cos();
        let x = self.lat.cos() * other.lat.sin() - self.lat.sin() * other.lat.cos() * dlon.cos();
        y.atan2(x)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat_deg(), self.lon_deg())
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if (-PI..PI).contains(&lon) {
        return lon;
    }
    let mut x = (lon + PI).rem_euclid(2.0 * PI) - PI;
    if x >= PI {
        x -= 2.0 * PI;
    }
    x
}

/// Great-circle distance in meters.
pub fn haversine_distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let dlat = b.lat - a.lat;
    let dlon = b.lon - a.lon;
    let h = (dlat * 0.5).sin().powi(2) + a.lat.cos() * b.lat.cos() * (dlon * 0.5).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Great-circle distance between two unit vectors, in meters.
pub fn unit_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    s.atan2(c) * EARTH_RADIUS_M
}

/// Address of one cell of the quadtree.
///
/// Field order matches the packed layout, so the derived ordering agrees
/// with ordering by [`CellId::pack`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    face: u8,
    level: u8,
    i: u32,
    j: u32,
}

impl CellId {
    pub fn new(face: u8, level: u8, i: u32, j: u32) -> Result<Self> {
        if face >= NUM_FACES {
            return Err(invalid(format!("face {face} out of range")));
        }
        check_level(level)?;
        let size = 1u32 << level;
        if i >= size || j >= size {
            return Err(invalid(format!(
                "grid index ({i}, {j}) out of range at level {level}"
            )));
        }
        Ok(Self { face, level, i, j })
    }

    pub fn face(&self) -> u8 {
        self.face
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn i(&self) -> u32 {
        self.i
    }

    pub fn j(&self) -> u32 {
        self.j
    }

    /// Packed form: bits 63-61 face, 60-56 level, 55-28 i, 27-0 j.
    pub fn pack(&self) -> u64 {
        (u64::from(self.face) << FACE_SHIFT)
            | (u64::from(self.level) << LEVEL_SHIFT)
            | (u64::from(self.i) << I_SHIFT)
            | u64::from(self.j)
    }

    pub fn unpack(packed: u64) -> Result<Self> {
        let face = (packed >> FACE_SHIFT) as u8;
        let level = ((packed >> LEVEL_SHIFT) & 0x1f) as u8;
        let i = ((packed >> I_SHIFT) & COORD_MASK) as u32;
        let j = (packed & COORD_MASK) as u32;
        Self::new(face, level, i, j)
            .map_err(|e| invalid(format!("bad packed cell id {packed:#018x}: {e}")))
    }

    pub fn from_point(p: &GeoPoint, level: u8) -> Result<Self> {
        cell_from_point(p, level)
    }

    pub fn center(&self) -> GeoPoint {
        cell_center(self)
    }

    pub fn parent(&self, level: u8) -> Result<Self> {
        parent(self, level)
    }

    pub fn children(&self) -> Result<[Self; 4]> {
        children(self)
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.face, self.level, self.i, self.j)
    }
}

fn check_level(level: u8) -> Result<()> {
    if level > MAX_LEVEL {
        return Err(invalid(format!("level {level} exceeds {MAX_LEVEL}")));
    }
    Ok(())
}

/// Prototype and aerial subdivision levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelConfig {
    prototype_level: u8,
    aerial_level: u8,
}

impl LevelConfig {
    pub fn new(prototype_level: u8, aerial_level: u8) -> Result<Self> {
        check_level(prototype_level)?;
        check_level(aerial_level)?;
        if aerial_level < prototype_level || aerial_level - prototype_level > 2 {
            return Err(invalid(format!(
                "aerial level {aerial_level} must be 0..=2 levels below prototype level {prototype_level}"
            )));
        }
        Ok(Self {
            prototype_level,
            aerial_level,
        })
    }

    pub fn prototype_level(&self) -> u8 {
        self.prototype_level
    }

    pub fn aerial_level(&self) -> u8 {
        self.aerial_level
    }
}

fn face_of(v: &[f64; 3]) -> u8 {
    let a = [v[0].abs(), v[1].abs(), v[2].abs()];
    let mut axis = 0;
    if a[1] > a[axis] {
        axis = 1;
    }
    if a[2] > a[axis] {
        axis = 2;
    }
    if v[axis] < 0.0 {
        axis as u8 + 3
    } else {
        axis as u8
    }
}

/// Gnomonic face coordinates of `v` on `face`, or `None` when `v` lies in
/// the opposite hemisphere of the face axis.
fn xyz_to_face_uv(face: u8, v: &[f64; 3]) -> Option<(f64, f64)> {
    let [x, y, z] = *v;
    let (axis, uv) = match face {
        0 => (x, (y / x, z / x)),
        1 => (y, (-x / y, z / y)),
        2 => (z, (-x / z, -y / z)),
        3 => (-x, (z / x, y / x)),
        4 => (-y, (z / y, -x / y)),
        _ => (-z, (-y / z, -x / z)),
    };
    (axis > 0.0).then_some(uv)
}

fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> [f64; 3] {
    match face {
        0 => [1.0, u, v],
        1 => [-u, 1.0, v],
        2 => [-u, -v, 1.0],
        3 => [-1.0, -v, -u],
        4 => [v, -1.0, -u],
        _ => [v, u, -1.0],
    }
}

fn grid_index(uv: f64, level: u8) -> u32 {
    let size = 1u32 << level;
    let s = (uv + 1.0) * 0.5 * f64::from(size);
    (s.floor().max(0.0) as u32).min(size - 1)
}

/// Continuous grid coordinates of `p` on `face` at `level`: cell `(i, j)`
/// spans `[i, i + 1) x [j, j + 1)`. Coordinates may fall outside the face
/// when `p` lies on a neighboring face.
pub fn face_grid_coords(face: u8, p: &GeoPoint, level: u8) -> Option<(f64, f64)> {
    let size = f64::from(1u32 << level);
    xyz_to_face_uv(face, &p.to_unit())
        .map(|(u, v)| ((u + 1.0) * 0.5 * size, (v + 1.0) * 0.5 * size))
}

pub fn cell_from_point(p: &GeoPoint, level: u8) -> Result<CellId> {
    check_level(level)?;
    Ok(cell_from_unit(&p.to_unit(), level))
}

fn cell_from_unit(v: &[f64; 3], level: u8) -> CellId {
    let face = face_of(v);
    let (u, w) = xyz_to_face_uv(face, v).expect("face axis component is positive");
    CellId {
        face,
        level,
        i: grid_index(u, level),
        j: grid_index(w, level),
    }
}

pub fn cell_center(c: &CellId) -> GeoPoint {
    GeoPoint::from_unit(cell_center_unit(c))
}

fn cell_center_unit(c: &CellId) -> [f64; 3] {
    let size = f64::from(1u32 << c.level);
    let u = 2.0 * (f64::from(c.i) + 0.5) / size - 1.0;
    let v = 2.0 * (f64::from(c.j) + 0.5) / size - 1.0;
    let x = face_uv_to_xyz(c.face, u, v);
    let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    [x[0] / n, x[1] / n, x[2] / n]
}

/// Unit vector of the cell center; cheaper than going through [`GeoPoint`].
pub fn cell_center_xyz(c: &CellId) -> [f64; 3] {
    cell_center_unit(c)
}

pub fn parent(c: &CellId, target_level: u8) -> Result<CellId> {
    if target_level > c.level {
        return Err(invalid(format!(
            "target level {target_level} is finer than cell level {}",
            c.level
        )));
    }
    let shift = c.level - target_level;
    Ok(CellId {
        face: c.face,
        level: target_level,
        i: c.i >> shift,
        j: c.j >> shift,
    })
}

pub fn children(c: &CellId) -> Result<[CellId; 4]> {
    if c.level >= MAX_LEVEL {
        return Err(invalid(format!("cell {c} at level {MAX_LEVEL} has no children")));
    }
    let child = |a: u32, b: u32| CellId {
        face: c.face,
        level: c.level + 1,
        i: 2 * c.i + a,
        j: 2 * c.j + b,
    };
    Ok([child(0, 0), child(0, 1), child(1, 0), child(1, 1)])
}

fn face_edge_arc_m() -> f64 {
    static ARC: OnceLock<f64> = OnceLock::new();
    *ARC.get_or_init(|| {
        // Mean great-circle length of the constant-v grid lines across a
        // face; the line at v spans 2 atan(1 / sqrt(1 + v^2)) radians.
        let n = 4096;
        let sum: f64 = (0..n)
            .map(|k| {
                let v = (k as f64 + 0.5) / n as f64;
                2.0 * (1.0 / (1.0 + v * v).sqrt()).atan()
            })
            .sum();
        sum / n as f64 * EARTH_RADIUS_M
    })
}

/// Mean great-circle edge length of cells at `level`, in meters.
pub fn avg_edge_length(level: u8) -> f64 {
    face_edge_arc_m() / f64::from(1u32 << level.min(31))
}

/// The `k` cells at `level` whose centers are nearest to `p`, ascending by
/// distance with ties broken by packed id.
pub fn k_nearest_cells(p: &GeoPoint, level: u8, k: usize) -> Result<Vec<CellId>> {
    check_level(level)?;
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let pu = p.to_unit();
    let home = cell_from_unit(&pu, level);
    let reach = ((k as f64).sqrt().ceil() as i64) / 2 + 2;
    let size = 1i64 << level;
    let (i0, j0) = (i64::from(home.i), i64::from(home.j));

    let mut candidates: Vec<CellId> = Vec::new();
    if i0 - reach >= 0 && j0 - reach >= 0 && i0 + reach < size && j0 + reach < size {
        for i in i0 - reach..=i0 + reach {
            for j in j0 - reach..=j0 + reach {
                candidates.push(CellId {
                    face: home.face,
                    level,
                    i: i as u32,
                    j: j as u32,
                });
            }
        }
    } else {
        // Near a face boundary: probe the tangent plane instead.
        let edge = avg_edge_length(level);
        let step = edge / 4.0;
        let steps = (reach + 1) * 6;
        let mut seen = BTreeSet::new();
        for a in -steps..=steps {
            for b in -steps..=steps {
                let q = p.offset_enu(a as f64 * step, b as f64 * step);
                seen.insert(cell_from_unit(&q.to_unit(), level));
            }
        }
        candidates.extend(seen);
    }

    let mut scored: Vec<(f64, CellId)> = candidates
        .into_iter()
        .map(|c| (unit_distance(&pu, &cell_center_unit(&c)), c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.dedup_by(|a, b| a.1 == b.1);
    Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
}

/// Cells at `level` that intersect the planar triangle with its apex at
/// `apex`, opening `fov` radians around `heading` out to `depth_m`, together
/// with the fraction of the triangle's area falling in each cell.
///
/// Area fractions come from a deterministic midpoint grid of
/// `TRIANGLE_GRID x TRIANGLE_GRID` samples folded onto the triangle; they are
/// exact multiples of `1 / TRIANGLE_GRID^2` and sum to one. Output is sorted
/// by cell id.
pub fn cells_overlapping_triangle(
    apex: &GeoPoint,
    heading: f64,
    fov: f64,
    depth_m: f64,
    level: u8,
) -> Result<Vec<(CellId, f64)>> {
    check_level(level)?;
    if !(fov > 0.0 && fov < PI) {
        return Err(invalid(format!("field of view {fov} outside (0, pi)")));
    }
    if !(depth_m > 0.0 && depth_m.is_finite()) {
        return Err(invalid(format!("depth {depth_m} must be positive")));
    }
    let (left, right) = (heading - 0.5 * fov, heading + 0.5 * fov);
    let b = (depth_m * left.sin(), depth_m * left.cos());
    let c = (depth_m * right.sin(), depth_m * right.cos());

    let n = TRIANGLE_GRID;
    let mut counts: BTreeMap<CellId, u32> = BTreeMap::new();
    for a in 0..n {
        for k in 0..n {
            let mut x = (a as f64 + 0.5) / n as f64;
            let mut y = (k as f64 + 0.5) / n as f64;
            if x + y > 1.0 {
                x = 1.0 - x;
                y = 1.0 - y;
            }
            let e = x * b.0 + y * c.0;
            let nn = x * b.1 + y * c.1;
            let q = apex.offset_enu(e, nn);
            *counts.entry(cell_from_unit(&q.to_unit(), level)).or_insert(0) += 1;
        }
    }
    let total = (n * n) as f64;
    Ok(counts
        .into_iter()
        .map(|(cell, count)| (cell, f64::from(count) / total))
        .collect())
}

/// All cells at `level` whose centers lie within `radius_m` of `center`,
/// sorted by id.
pub fn cells_in_cap(center: &GeoPoint, radius_m: f64, level: u8) -> Result<Vec<CellId>> {
    check_level(level)?;
    if !(radius_m > 0.0) {
        return Err(invalid(format!("radius {radius_m} must be positive")));
    }
    let edge = avg_edge_length(level);
    let step = edge / 3.0;
    let extent = radius_m + 2.0 * edge;
    let steps = (extent / step).ceil() as i64;
    let cu = center.to_unit();
    let mut found = BTreeSet::new();
    for a in -steps..=steps {
        for b in -steps..=steps {
            let (e, n) = (a as f64 * step, b as f64 * step);
            if e.hypot(n) > extent {
                continue;
            }
            let c = cell_from_unit(&center.offset_enu(e, n).to_unit(), level);
            if unit_distance(&cu, &cell_center_unit(&c)) <= radius_m {
                found.insert(c);
            }
        }
    }
    Ok(found.into_iter().collect())
}
