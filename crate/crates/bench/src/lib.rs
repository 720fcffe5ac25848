//! Fixtures shared by the benchmarks.

use cellcode::cellgrid::{cells_in_cap, GeoPoint};
use cellcode::codedb::{CellCodeDB, DbMode};
use cellcode::train::PrototypeTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn center() -> GeoPoint {
    GeoPoint::from_degrees(47.0, 8.0).expect("valid center")
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_point(rng: &mut impl Rng, radius_m: f64) -> GeoPoint {
    center().offset_enu(rng.random_range(-radius_m..radius_m), rng.random_range(-radius_m..radius_m))
}

/// Database of `n` random unit vectors with ids 0..n.
pub fn random_db(rng: &mut impl Rng, n: usize, dim: usize) -> CellCodeDB {
    let entries = (0..n as u64)
        .map(|id| (id, random_point(rng, 20_000.0), unit_vector(rng, dim)))
        .collect();
    CellCodeDB::new(DbMode::Aerial, 13, 0.0, dim, entries).expect("valid database")
}

/// Prototypes for every cell within `radius_m` of the center.
pub fn random_table(rng: &mut impl Rng, level: u8, dim: usize, radius_m: f64) -> PrototypeTable {
    let cells = cells_in_cap(&center(), radius_m, level).expect("cells");
    PrototypeTable::random(level, dim, cells, rng).expect("table")
}
