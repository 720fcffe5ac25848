//! Deterministic synthetic world standing in for street-level and aerial
//! imagery.
//!
//! Appearance is a latent vector field over the sphere built from random
//! Fourier features of the 3D unit position. The first half of the latent
//! coordinates uses long wavelengths (regional character), the second half
//! short ones (local detail). Ground views look at the latent along a short
//! viewing ray; aerial tiles see the latent averaged over their footprint.
//! Both are observed through fixed random linear maps plus Gaussian noise.
//!
//! Physical distances taken from street-level capture (viewing depths,
//! tile footprint, pairing offset, place spacing) are multiplied by
//! [`WorldConfig::geo_scale`], so a world at coarser cell levels keeps the
//! same proportions.

mod dataset;
mod gwds;

pub use dataset::{generate_dataset, Dataset, DatasetCounts, DensityBump, DensitySpec, Sample};
pub use gwds::{load_dataset, read_dataset, save_dataset, write_dataset};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::cellgrid::{GeoPoint, EARTH_RADIUS_M};
use crate::error::{invalid, Result};
use crate::seed;

/// Depths along the viewing ray at which a ground view samples the world.
pub const VIEW_DEPTHS_M: [f64; 3] = [10.0, 25.0, 45.0];
/// Depth of the camera frustum triangle.
pub const FRUSTUM_DEPTH_M: f64 = 50.0;
/// Side of the square aerial tile footprint (256 px at 0.6 m/px).
pub const TILE_SIDE_M: f64 = 256.0 * 0.6;
/// Largest offset between a ground view and its paired aerial tile center.
pub const MAX_PAIR_OFFSET_M: f64 = 80.0;
/// Minimum spacing between distinct places.
pub const MIN_PLACE_SPACING_M: f64 = 40.0;
/// Aerial footprint sampling grid per side.
pub const TILE_GRID: usize = 4;
pub const FOV_MIN: f64 = 45.0 * PI / 180.0;
pub const FOV_MAX: f64 = 75.0 * PI / 180.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub region_center: GeoPoint,
    pub region_radius_m: f64,
    /// Latent dimension; must be even.
    pub latent_dim: usize,
    pub n_low_freq: usize,
    pub n_high_freq: usize,
    /// Wavelength range of the regional bank, meters.
    pub low_wavelength_m: (f64, f64),
    /// Wavelength range of the local bank, meters.
    pub high_wavelength_m: (f64, f64),
    pub ground_feature_dim: usize,
    pub aerial_feature_dim: usize,
    pub noise_sigma: f64,
    pub geo_scale: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 || !self.latent_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "latent_dim {} must be even and at least 2",
                self.latent_dim
            )));
        }
        if self.n_low_freq == 0 || self.n_high_freq == 0 {
            return Err(invalid("frequency banks must be nonempty"));
        }
        if self.ground_feature_dim == 0 || self.aerial_feature_dim == 0 {
            return Err(invalid("feature dimensions must be at least 1"));
        }
        if !(self.region_radius_m > 0.0) {
            return Err(invalid("region radius must be positive"));
        }
        for (lo, hi) in [self.low_wavelength_m, self.high_wavelength_m] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(invalid(format!("bad wavelength range ({lo}, {hi})")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be a nonnegative number"));
        }
        if !(self.geo_scale > 0.0) {
            return Err(invalid("geo_scale must be positive"));
        }
        Ok(())
    }

    pub fn view_depths_m(&self) -> [f64; 3] {
        VIEW_DEPTHS_M.map(|d| d * self.geo_scale)
    }

    pub fn frustum_depth_m(&self) -> f64 {
        FRUSTUM_DEPTH_M * self.geo_scale
    }

    pub fn tile_side_m(&self) -> f64 {
        TILE_SIDE_M * self.geo_scale
    }

    pub fn max_pair_offset_m(&self) -> f64 {
        MAX_PAIR_OFFSET_M * self.geo_scale
    }

    pub fn min_place_spacing_m(&self) -> f64 {
        MIN_PLACE_SPACING_M * self.geo_scale
    }

    fn ground_input_dim(&self) -> usize {
        VIEW_DEPTHS_M.len() * self.latent_dim + 2
    }
}

/// One bank of cosine features; coordinate `k` of the bank is
/// `amp * sum_b cos(freq[k][b] . x + phase[k][b])`.
#[derive(Clone, Debug)]
struct CosineBank {
    coords: usize,
    per_coord: usize,
    freqs: Vec<[f64; 3]>,
    phases: Vec<f64>,
    amp: f64,
    max_freq: f64,
}

impl CosineBank {
    fn sample(coords: usize, per_coord: usize, wavelengths: (f64, f64), rng: &mut impl Rng) -> Self {
        let n = coords * per_coord;
        let mut freqs = Vec::with_capacity(n);
        let mut phases = Vec::with_capacity(n);
        let mut max_freq = 0.0f64;
        for _ in 0..n {
            let dir = random_unit(rng);
            let lambda = if wavelengths.1 > wavelengths.0 {
                rng.random_range(wavelengths.0..wavelengths.1)
            } else {
                wavelengths.0
            };
            let k = 2.0 * PI * EARTH_RADIUS_M / lambda;
            max_freq = max_freq.max(k);
            freqs.push([dir[0] * k, dir[1] * k, dir[2] * k]);
            phases.push(rng.random_range(0.0..2.0 * PI));
        }
        Self {
            coords,
            per_coord,
            freqs,
            phases,
            amp: 1.0 / (per_coord as f64).sqrt(),
            max_freq,
        }
    }

    fn eval_into(&self, x: &[f64; 3], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.coords) {
            let base = k * self.per_coord;
            let mut s = 0.0;
            for b in base..base + self.per_coord {
                let f = &self.freqs[b];
                s += (f[0] * x[0] + f[1] * x[1] + f[2] * x[2] + self.phases[b]).cos();
            }
            *o = self.amp * s;
        }
    }
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// The synthetic world: latent field plus observation operators.
#[derive(Clone, Debug)]
pub struct WorldModel {
    config: WorldConfig,
    low: CosineBank,
    high: CosineBank,
    /// `ground_feature_dim x (3 * latent_dim + 2)`, row-major.
    w_ground: Vec<f64>,
    /// `aerial_feature_dim x latent_dim`, row-major.
    w_aerial: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundObservation {
    pub features: Vec<f32>,
    pub location: GeoPoint,
    pub heading: f64,
    pub fov: f64,
    /// 0 for the training era, 1 for the held-out test era.
    pub epoch: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AerialObservation {
    pub features: Vec<f32>,
    pub tile_center: GeoPoint,
    pub rotation: f64,
    /// Distance from the paired ground view to the tile center.
    pub offset_m: f64,
}

pub fn generate_world(config: WorldConfig) -> Result<WorldModel> {
    config.validate()?;
    let mut rng = seed::rng_for(config.seed, seed::WORLD_BASES, 0);
    let half = config.latent_dim / 2;
    let low = CosineBank::sample(half, config.n_low_freq, config.low_wavelength_m, &mut rng);
    let high = CosineBank::sample(half, config.n_high_freq, config.high_wavelength_m, &mut rng);
    let gin = config.ground_input_dim();
    let gscale = 1.0 / (gin as f64).sqrt();
    let w_ground = (0..config.ground_feature_dim * gin)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * gscale)
        .collect();
    let ascale = 1.0 / (config.latent_dim as f64).sqrt();
    let w_aerial = (0..config.aerial_feature_dim * config.latent_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * ascale)
        .collect();
    Ok(WorldModel {
        config,
        low,
        high,
        w_ground,
        w_aerial,
    })
}

impl WorldModel {
    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Latent appearance at `p`: regional half followed by local half.
    pub fn latent_field(&self, p: &GeoPoint) -> Vec<f64> {
        let mut out = vec![0.0; self.config.latent_dim];
        self.latent_into(&p.to_unit(), &mut out);
        out
    }

    fn latent_into(&self, x: &[f64; 3], out: &mut [f64]) {
        let half = self.config.latent_dim / 2;
        let (lo, hi) = out.split_at_mut(half);
        self.low.eval_into(x, lo);
        self.high.eval_into(x, hi);
    }

    /// Upper bound on `|d latent_k / d distance|`, per meter.
    pub fn lipschitz_bound(&self) -> f64 {
        let per = |b: &CosineBank| b.amp * b.per_coord as f64 * b.max_freq / EARTH_RADIUS_M;
        per(&self.low).max(per(&self.high))
    }

    fn add_noise(&self, features: &mut [f64], rng: &mut impl Rng) {
        if self.config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.config.noise_sigma).expect("validated sigma");
            for f in features {
                *f += normal.sample(rng);
            }
        }
    }

    pub fn sample_ground_view(
        &self,
        location: &GeoPoint,
        heading: f64,
        fov: f64,
        rng: &mut impl Rng,
    ) -> Result<GroundObservation> {
        if !(FOV_MIN - 1e-6..=FOV_MAX + 1e-6).contains(&fov) {
            return Err(invalid(format!(
                "field of view {:.2} deg outside [45, 75]",
                fov.to_degrees()
            )));
        }
        let m = self.config.latent_dim;
        let mut input = vec![0.0; self.config.ground_input_dim()];
        for (k, depth) in self.config.view_depths_m().iter().enumerate() {
            let p = location.destination(heading, *depth);
            self.latent_into(&p.to_unit(), &mut input[k * m..(k + 1) * m]);
        }
        let tail = VIEW_DEPTHS_M.len() * m;
        input[tail] = heading.cos();
        input[tail + 1] = heading.sin();
        let mut features = matvec(&self.w_ground, &input, self.config.ground_feature_dim);
        self.add_noise(&mut features, rng);
        Ok(GroundObservation {
            features: features.into_iter().map(|x| x as f32).collect(),
            location: *location,
            heading,
            fov,
            epoch: 0,
        })
    }

    pub fn sample_aerial_tile(
        &self,
        tile_center: &GeoPoint,
        rotation: f64,
        rng: &mut impl Rng,
    ) -> AerialObservation {
        let m = self.config.latent_dim;
        let side = self.config.tile_side_m();
        let (sr, cr) = rotation.sin_cos();
        let mut mean = vec![0.0; m];
        let mut buf = vec![0.0; m];
        for a in 0..TILE_GRID {
            for b in 0..TILE_GRID {
                let x = ((a as f64 + 0.5) / TILE_GRID as f64 - 0.5) * side;
                let y = ((b as f64 + 0.5) / TILE_GRID as f64 - 0.5) * side;
                let east = cr * x + sr * y;
                let north = -sr * x + cr * y;
                let p = tile_center.offset_enu(east, north);
                self.latent_into(&p.to_unit(), &mut buf);
                for (acc, v) in mean.iter_mut().zip(&buf) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / (TILE_GRID * TILE_GRID) as f64;
        for v in &mut mean {
            *v *= inv;
        }
        let mut features = matvec(&self.w_aerial, &mean, self.config.aerial_feature_dim);
        self.add_noise(&mut features, rng);
        AerialObservation {
            features: features.into_iter().map(|x| x as f32).collect(),
            tile_center: *tile_center,
            rotation,
            offset_m: 0.0,
        }
    }
}

fn matvec(w: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| crate::vecmath::dot(&w[r * cols..(r + 1) * cols], x))
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::cellgrid::haversine_distance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config(seed: u64) -> WorldConfig {
        WorldConfig {
            region_center: GeoPoint::from_degrees(47.0, 8.0).unwrap(),
            region_radius_m: 5_000.0,
            latent_dim: 8,
            n_low_freq: 4,
            n_high_freq: 4,
            low_wavelength_m: (20_000.0, 60_000.0),
            high_wavelength_m: (500.0, 2_000.0),
            ground_feature_dim: 12,
            aerial_feature_dim: 10,
            noise_sigma: 0.1,
            geo_scale: 1.0,
            seed,
        }
    }

    fn probes(n: usize, seed: u64) -> Vec<GeoPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = GeoPoint::from_degrees(47.0, 8.0).unwrap();
        (0..n)
            .map(|_| c.offset_enu(rng.random_range(-5e3..5e3), rng.random_range(-5e3..5e3)))
            .collect()
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_world(small_config(1)).unwrap();
        let b = generate_world(small_config(1)).unwrap();
        let c = generate_world(small_config(2)).unwrap();
        let mut differ = 0;
        for p in probes(100, 0) {
            let (fa, fb, fc) = (a.latent_field(&p), b.latent_field(&p), c.latent_field(&p));
            assert_eq!(fa, fb);
            if fa != fc {
                differ += 1;
            }
        }
        assert!(differ >= 99);
    }

    #[test]
    fn field_is_continuous() {
        let w = generate_world(small_config(3)).unwrap();
        let mut near = 0.0;
        let mut far = 0.0;
        for p in probes(100, 1) {
            let f = w.latent_field(&p);
            let dist = |q: &GeoPoint| {
                let g = w.latent_field(q);
                f.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            };
            near += dist(&p.offset_enu(1.0, 0.0));
            far += dist(&p.offset_enu(10_000.0, 0.0));
        }
        assert!(near * 100.0 < far, "near {near} far {far}");
        let bound = w.lipschitz_bound() * (w.latent_dim() as f64).sqrt();
        assert!(near / 100.0 <= bound * 1.0 + 1e-12);
    }

    #[test]
    fn coordinates_bounded_by_cosine_count() {
        let w = generate_world(small_config(4)).unwrap();
        for p in probes(200, 2) {
            for v in w.latent_field(&p) {
                assert!(v.abs() <= 4.0);
            }
        }
    }

    #[test]
    fn regional_half_decorrelates_with_distance() {
        let w = generate_world(small_config(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let half = w.latent_dim() / 2;
        let corr = |d: f64, rng: &mut ChaCha8Rng| {
            let mut s = 0.0;
            for p in probes(1000, rng.random()) {
                let th: f64 = rng.random_range(0.0..2.0 * PI);
                let q = p.offset_enu(d * th.sin(), d * th.cos());
                let (a, b) = (w.latent_field(&p), w.latent_field(&q));
                let num: f64 = (0..half).map(|k| a[k] * b[k]).sum();
                let den = (0..half).map(|k| a[k] * a[k]).sum::<f64>().sqrt()
                    * (0..half).map(|k| b[k] * b[k]).sum::<f64>().sqrt();
                s += num / den;
            }
            s / 1000.0
        };
        let near = corr(100.0, &mut rng);
        let far = corr(50_000.0, &mut rng);
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn ground_view_construction() {
        let mut cfg = small_config(6);
        cfg.noise_sigma = 0.0;
        let w = generate_world(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GeoPoint::from_degrees(47.01, 8.02).unwrap();
        let a = w.sample_ground_view(&p, 0.4, 1.0, &mut rng).unwrap();
        let b = w.sample_ground_view(&p, 0.4, 1.0, &mut rng).unwrap();
        let c = w.sample_ground_view(&p, 0.4 + PI, 1.0, &mut rng).unwrap();
        assert_eq!(a.features, b.features);
        assert_ne!(a.features, c.features);
        assert_eq!(a.features.len(), 12);
        assert!(w.sample_ground_view(&p, 0.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn aerial_tile_construction() {
        let mut cfg = small_config(7);
        cfg.noise_sigma = 0.0;
        let w = generate_world(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GeoPoint::from_degrees(47.01, 8.02).unwrap();
        let a = w.sample_aerial_tile(&p, 0.0, &mut rng);
        let b = w.sample_aerial_tile(&p, PI / 2.0 + 0.1, &mut rng);
        assert_ne!(a.features, b.features);
        assert_eq!(a.features.len(), 10);
        assert_eq!(a, w.sample_aerial_tile(&p, 0.0, &mut rng));
    }

    #[test]
    fn aerial_similarity_falls_with_distance() {
        let w = generate_world(small_config(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cos = |a: &[f32], b: &[f32]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
            let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let (mut near, mut far) = (0.0, 0.0);
        for p in probes(500, 3) {
            let t = w.sample_aerial_tile(&p, 0.0, &mut rng);
            let n = w.sample_aerial_tile(&p.offset_enu(50.0, 0.0), 0.0, &mut rng);
            let f = w.sample_aerial_tile(&p.offset_enu(0.0, 100_000.0), 0.0, &mut rng);
            near += cos(&t.features, &n.features);
            far += cos(&t.features, &f.features);
            assert!(haversine_distance(&p, &f.tile_center) > 99_000.0);
        }
        assert!(near > far, "near {near} far {far}");
    }
}
