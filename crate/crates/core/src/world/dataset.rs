use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{AerialObservation, GroundObservation, WorldModel, FOV_MAX, FOV_MIN};
use crate::cellgrid::{cell_from_point, haversine_distance, CellId, GeoPoint};
use crate::error::{invalid, Error, Result};
use crate::seed;

/// Ground views rendered per place, at headings a quarter turn apart.
pub const VIEWS_PER_PLACE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityBump {
    pub center: GeoPoint,
    pub sigma_m: f64,
    pub weight: f64,
}

/// Relative sampling intensity of places: a flat rural floor plus Gaussian
/// urban bumps.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySpec {
    pub background: f64,
    pub bumps: Vec<DensityBump>,
}

impl DensitySpec {
    /// `n_bumps` bumps scattered over the region with radii between 5% and
    /// 20% of the region radius.
    pub fn random(center: &GeoPoint, radius_m: f64, n_bumps: usize, background: f64, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, seed::DENSITY, 0);
        let bumps = (0..n_bumps)
            .map(|_| {
                let r = radius_m * 0.8 * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                DensityBump {
                    center: center.offset_enu(r * th.sin(), r * th.cos()),
                    sigma_m: radius_m * rng.random_range(0.05..0.2),
                    weight: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        Self { background, bumps }
    }

    pub fn density(&self, p: &GeoPoint) -> f64 {
        self.background
            + self
                .bumps
                .iter()
                .map(|b| {
                    let d = haversine_distance(p, &b.center);
                    b.weight * (-0.5 * (d / b.sigma_m).powi(2)).exp()
                })
                .sum::<f64>()
    }

    fn upper_bound(&self) -> f64 {
        self.background + self.bumps.iter().map(|b| b.weight).sum::<f64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetCounts {
    pub train_places: usize,
    pub test_places: usize,
}

/// A ground view paired with an aerial tile near it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub place: u32,
    pub ground: GroundObservation,
    pub aerial: AerialObservation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    prototype_level: u8,
    samples: Vec<Sample>,
    density: BTreeMap<CellId, u32>,
}

impl Dataset {
    pub fn new(prototype_level: u8, samples: Vec<Sample>) -> Result<Self> {
        let mut density = BTreeMap::new();
        for s in samples.iter().filter(|s| s.ground.epoch == 0) {
            *density
                .entry(cell_from_point(&s.ground.location, prototype_level)?)
                .or_insert(0) += 1;
        }
        Ok(Self {
            prototype_level,
            samples,
            density,
        })
    }

    pub fn prototype_level(&self) -> u8 {
        self.prototype_level
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.ground.epoch == 0)
    }

    pub fn test(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(|s| s.ground.epoch == 1)
    }

    /// Training views per prototype-level cell.
    pub fn density_index(&self) -> &BTreeMap<CellId, u32> {
        &self.density
    }

    pub fn train_count(&self, cell: &CellId) -> u32 {
        self.density.get(cell).copied().unwrap_or(0)
    }
}

fn round32(x: f64) -> f64 {
    f64::from(x as f32)
}

/// Draws places with probability proportional to `density`, rejecting any
/// candidate closer than the minimum spacing to an accepted place, then
/// renders four ground views per place with a paired, randomly offset and
/// rotated aerial tile. A random subset of `counts.test_places` places is
/// marked as test era.
///
/// Candidates are generated from per-index seeds and filtered in one
/// sequential pass, so the accepted set depends only on `seed`.
pub fn generate_dataset(
    world: &WorldModel,
    density: &DensitySpec,
    counts: DatasetCounts,
    prototype_level: u8,
    seed: u64,
) -> Result<Dataset> {
    let cfg = world.config();
    let total = counts.train_places + counts.test_places;
    if total == 0 {
        return Err(invalid("dataset needs at least one place"));
    }
    if !(density.background >= 0.0) || density.upper_bound() <= 0.0 {
        return Err(invalid("density must be nonnegative and not identically zero"));
    }
    let spacing = cfg.min_place_spacing_m();
    let radius = cfg.region_radius_m;
    let center = cfg.region_center;
    let max_density = density.upper_bound();
    let max_candidates = 200 * total + 100_000;

    // Spatial hash on the tangent plane; bins are one spacing wide so only
    // the 3x3 neighborhood needs checking.
    let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut places: Vec<GeoPoint> = Vec::with_capacity(total);
    let mut candidate = 0u64;
    while places.len() < total {
        if candidate as usize >= max_candidates {
            return Err(Error::Capacity {
                requested: total,
                placed: places.len(),
            });
        }
        let mut rng = seed::rng_for(seed, seed::PLACES, candidate);
        candidate += 1;
        let r = radius * rng.random::<f64>().sqrt();
        let th = rng.random_range(0.0..2.0 * PI);
        let (e, n) = (r * th.sin(), r * th.cos());
        if rng.random::<f64>() * max_density >= density.density(&center.offset_enu(e, n)) {
            continue;
        }
        let p = center.offset_enu(e, n);
        let key = ((e / spacing).floor() as i64, (n / spacing).floor() as i64);
        let crowded = (-1..=1).any(|a| {
            (-1..=1).any(|b| {
                bins.get(&(key.0 + a, key.1 + b)).is_some_and(|ids| {
                    ids.iter()
                        .any(|&k| haversine_distance(&places[k], &p) < spacing)
                })
            })
        });
        if crowded {
            continue;
        }
        bins.entry(key).or_default().push(places.len());
        places.push(p);
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut seed::rng_for(seed, seed::SPLIT, 0));
    let mut is_test = vec![false; total];
    for &k in order.iter().take(counts.test_places) {
        is_test[k] = true;
    }

    let max_offset = cfg.max_pair_offset_m();
    let mut samples = Vec::with_capacity(total * VIEWS_PER_PLACE);
    for (place, location) in places.iter().enumerate() {
        let mut rng = seed::rng_for(seed, seed::VIEWS, place as u64);
        let base_heading = rng.random_range(0.0..FRAC_PI_2);
        for v in 0..VIEWS_PER_PLACE {
            let heading = round32(base_heading + v as f64 * FRAC_PI_2);
            let fov = round32(rng.random_range(FOV_MIN..FOV_MAX));
            let mut ground = world.sample_ground_view(location, heading, fov, &mut rng)?;
            ground.epoch = u8::from(is_test[place]);
            let offset = round32(max_offset * rng.random::<f64>().sqrt());
            let bearing = rng.random_range(0.0..2.0 * PI);
            let rotation = round32(rng.random_range(0.0..2.0 * PI));
            let tile_center = location.destination(bearing, offset);
            let mut aerial = world.sample_aerial_tile(&tile_center, rotation, &mut rng);
            aerial.offset_m = offset;
            samples.push(Sample {
                place: place as u32,
                ground,
                aerial,
            });
        }
    }
    Dataset::new(prototype_level, samples)
}
