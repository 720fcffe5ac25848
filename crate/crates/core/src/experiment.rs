//! End-to-end benchmark runs: world, dataset, training, databases and
//! evaluation, plus the derived analyses.

use rand::seq::index::sample;

use crate::cellgrid::{avg_edge_length, cell_from_point, CellId, GeoPoint, LevelConfig};
use crate::codedb::{
    build_aerial_db, build_ground_db, build_hybrid_db, build_prototype_db, calibrate_kappa,
    density_terciles, embed_aerial_cells, eval_suite, hit_within, search_topk, CellCodeDB,
    EvalReport, Hit, Slice,
};
use crate::error::{invalid, Result};
use crate::seed;
use crate::encoder::EncoderParams;
use crate::train::{train, Model, PrototypeTable, TrainConfig, TrainOutput};
use crate::world::{
    generate_dataset, generate_world, Dataset, DatasetCounts, DensitySpec, WorldConfig, WorldModel,
};

/// Everything that defines one benchmark run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub world: WorldConfig,
    pub density_bumps: usize,
    pub density_background: f64,
    pub counts: DatasetCounts,
    pub levels: LevelConfig,
    pub train: TrainConfig,
    pub calibration_queries: usize,
    pub ks: Vec<usize>,
    pub distances_m: Vec<f64>,
    pub seed: u64,
}

impl BenchmarkConfig {
    /// The committed reference benchmark at seed 0.
    pub fn reference() -> Self {
        let levels = LevelConfig::new(12, 13).expect("valid levels");
        let geo_scale = 8.0;
        let world = WorldConfig {
            region_center: GeoPoint::from_degrees(47.0, 8.0).expect("valid point"),
            region_radius_m: 25_000.0,
            latent_dim: 32,
            n_low_freq: 6,
            n_high_freq: 6,
            low_wavelength_m: (15_000.0, 60_000.0),
            high_wavelength_m: (2_000.0, 6_000.0),
            ground_feature_dim: 96,
            aerial_feature_dim: 80,
            noise_sigma: 0.5,
            geo_scale,
            seed: 0,
        };
        let mut train = TrainConfig::new(levels.prototype_level());
        train.steps = 1500;
        train.batch_size = 128;
        train.embed_dim = 64;
        train.hidden_dim = 128;
        let mut config = Self {
            world,
            density_bumps: 8,
            density_background: 0.03,
            counts: DatasetCounts {
                train_places: 7000,
                test_places: 600,
            },
            levels,
            train,
            calibration_queries: 1000,
            ks: vec![1, 5, 10],
            distances_m: Vec::new(),
            seed: 0,
        };
        config.refresh_derived();
        config
    }

    /// Resets every setting that follows from the levels and the world
    /// scale: exclusion radii, prototype margin, frustum depth and the
    /// evaluation distances.
    pub fn refresh_derived(&mut self) {
        let (lp, la) = (self.levels.prototype_level(), self.levels.aerial_level());
        self.train.prototype_margin_m = 2.0 * avg_edge_length(lp);
        self.train.loss.neg_exclusion_radius_m = 2.0 * avg_edge_length(lp);
        self.train.loss.frustum_depth_m = self.world.frustum_depth_m();
        self.train.loss.batch_exclusion_radius_m = 1000.0 * self.world.geo_scale;
        self.distances_m = vec![recall_threshold_m(la), 4.0 * avg_edge_length(la)];
    }

    /// Same benchmark with every seed set from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(invalid("evaluation needs positive K values"));
        }
        if self.distances_m.is_empty() || self.distances_m.iter().any(|d| !(*d >= 0.0)) {
            return Err(invalid("evaluation needs nonnegative distances"));
        }
        Ok(())
    }
}

/// Top-1 success radius: 1.43 fine-cell edges, which is 200 m at level 16.
pub fn recall_threshold_m(aerial_level: u8) -> f64 {
    1.43 * avg_edge_length(aerial_level)
}

pub fn density_spec(config: &BenchmarkConfig) -> DensitySpec {
    DensitySpec::random(
        &config.world.region_center,
        config.world.region_radius_m,
        config.density_bumps,
        config.density_background,
        seed::derive_seed(config.seed, seed::DENSITY, 0),
    )
}

/// World and dataset of a benchmark.
pub fn generate_data(config: &BenchmarkConfig) -> Result<(WorldModel, Dataset)> {
    let world = generate_world(config.world.clone())?;
    let ds = generate_dataset(
        &world,
        &density_spec(config),
        config.counts,
        config.levels.prototype_level(),
        config.seed,
    )?;
    Ok((world, ds))
}

/// Renders and embeds a ground view at a given pose, with observation
/// noise drawn from `seed`.
pub fn embed_view(
    world: &WorldModel,
    ground: &EncoderParams,
    location: &GeoPoint,
    heading: f64,
    fov: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seed::rng_for(seed, seed::QUERY, 0);
    let view = world.sample_ground_view(location, heading, fov, &mut rng)?;
    let x: Vec<f64> = view.features.iter().map(|v| f64::from(*v)).collect();
    Ok(ground.encode(&x)?.into_inner())
}

/// Embedded held-out ground views with their locations and density slices.
#[derive(Clone, Debug)]
pub struct QuerySet {
    pub embeddings: Vec<Vec<f64>>,
    pub locations: Vec<GeoPoint>,
    pub slices: Vec<Slice>,
}

pub fn embed_queries(dataset: &Dataset, ground: &EncoderParams) -> Result<QuerySet> {
    let level = dataset.prototype_level();
    let mut q = QuerySet {
        embeddings: Vec::new(),
        locations: Vec::new(),
        slices: Vec::new(),
    };
    let mut counts = Vec::new();
    for s in dataset.test() {
        let x: Vec<f64> = s.ground.features.iter().map(|v| f64::from(*v)).collect();
        q.embeddings.push(ground.encode(&x)?.into_inner());
        q.locations.push(s.ground.location);
        counts.push(dataset.train_count(&cell_from_point(&s.ground.location, level)?));
    }
    q.slices = density_terciles(&counts);
    Ok(q)
}

/// Embedded training ground views, evenly strided, for calibration.
pub fn calibration_queries(dataset: &Dataset, ground: &EncoderParams, n: usize) -> Result<Vec<Vec<f64>>> {
    let train: Vec<_> = dataset.train().collect();
    let stride = (train.len() / n.max(1)).max(1);
    train
        .iter()
        .step_by(stride)
        .take(n)
        .map(|s| {
            let x: Vec<f64> = s.ground.features.iter().map(|v| f64::from(*v)).collect();
            Ok(ground.encode(&x)?.into_inner())
        })
        .collect()
}

/// Fine cells below every prototype cell.
pub fn aerial_cells(table: &PrototypeTable, aerial_level: u8) -> Result<Vec<CellId>> {
    let mut cells: Vec<CellId> = table.ids().to_vec();
    for _ in table.level()..aerial_level {
        let mut next = Vec::with_capacity(cells.len() * 4);
        for c in &cells {
            next.extend(c.children()?);
        }
        cells = next;
    }
    cells.sort();
    Ok(cells)
}

/// Databases built from a trained model.
#[derive(Clone, Debug)]
pub struct Databases {
    pub ground: CellCodeDB,
    pub aerial: CellCodeDB,
    pub prototype: CellCodeDB,
    pub hybrid: CellCodeDB,
    pub kappa: f64,
}

pub fn build_databases(
    config: &BenchmarkConfig,
    world: &WorldModel,
    dataset: &Dataset,
    model: Model<'_>,
) -> Result<Databases> {
    let table = model.prototypes;
    let cells = aerial_cells(table, config.levels.aerial_level())?;
    let aerial = build_aerial_db(
        config.levels.aerial_level(),
        embed_aerial_cells(world, model.aerial, &cells, config.seed)?,
    )?;
    let prototype = build_prototype_db(table)?;
    let calib = calibration_queries(dataset, model.ground, config.calibration_queries)?;
    let kappa = calibrate_kappa(&calib, &prototype, &aerial)?;
    let hybrid = build_hybrid_db(table, &aerial, kappa, false)?;
    let ground_entries = dataset
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.ground.epoch == 0)
        .map(|(i, s)| {
            let x: Vec<f64> = s.ground.features.iter().map(|v| f64::from(*v)).collect();
            Ok((i as u64, s.ground.location, model.ground.encode(&x)?.into_inner()))
        })
        .collect::<Result<Vec<_>>>()?;
    let ground = build_ground_db(config.levels.prototype_level(), ground_entries)?;
    Ok(Databases {
        ground,
        aerial,
        prototype,
        hybrid,
        kappa,
    })
}

/// A complete run.
#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub config: BenchmarkConfig,
    pub world: WorldModel,
    pub dataset: Dataset,
    pub trained: TrainOutput,
    pub dbs: Databases,
    pub queries: QuerySet,
    pub report: EvalReport,
}

impl BenchmarkRun {
    /// Top-1 recall at the success radius over all queries.
    pub fn top1(&self, db: &CellCodeDB) -> Result<f64> {
        top1_recall(db, &self.queries, None, recall_threshold_m(self.config.levels.aerial_level()))
    }

    /// Top-1 recall restricted to one density slice.
    pub fn top1_slice(&self, db: &CellCodeDB, slice: Slice) -> Result<f64> {
        top1_recall(db, &self.queries, Some(slice), recall_threshold_m(self.config.levels.aerial_level()))
    }
}

pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkRun> {
    config.validate()?;
    let (world, dataset) = generate_data(config)?;
    let trained = train(&dataset, Some(&world), &config.train)?;
    let dbs = build_databases(config, &world, &dataset, trained.state.model())?;
    let queries = embed_queries(&dataset, &trained.state.ground)?;
    let report = eval_suite(
        &[&dbs.ground, &dbs.aerial, &dbs.prototype, &dbs.hybrid],
        &queries.embeddings,
        &queries.locations,
        &queries.slices,
        &config.ks,
        &config.distances_m,
    )?;
    Ok(BenchmarkRun {
        config: config.clone(),
        world,
        dataset,
        trained,
        dbs,
        queries,
        report,
    })
}

pub fn top1_hits(db: &CellCodeDB, queries: &QuerySet) -> Result<Vec<Hit>> {
    queries
        .embeddings
        .iter()
        .map(|q| Ok(search_topk(db, q, 1)?[0]))
        .collect()
}

pub fn top1_recall(db: &CellCodeDB, queries: &QuerySet, slice: Option<Slice>, distance_m: f64) -> Result<f64> {
    let mut hits = 0usize;
    let mut n = 0usize;
    for (k, q) in queries.embeddings.iter().enumerate() {
        if slice.is_some_and(|s| s != queries.slices[k]) {
            continue;
        }
        n += 1;
        let top = search_topk(db, q, 1)?;
        hits += usize::from(hit_within(&top, &queries.locations[k], 1, distance_m));
    }
    Ok(if n == 0 { 0.0 } else { hits as f64 / n as f64 })
}

/// Hybrid top-1 recall for each `kappa`.
pub fn kappa_sweep(run: &BenchmarkRun, kappas: &[f64]) -> Result<Vec<(f64, f64)>> {
    kappas
        .iter()
        .map(|&k| {
            let db = build_hybrid_db(&run.trained.state.prototypes, &run.dbs.aerial, k, false)?;
            Ok((k, run.top1(&db)?))
        })
        .collect()
}

/// `n` values spaced geometrically from `kappa / 4` to `4 kappa`, with
/// `kappa` itself in the middle.
pub fn kappa_grid(kappa: f64, n: usize) -> Vec<f64> {
    let n = n.max(3) | 1;
    let half = (n / 2) as f64;
    (0..n)
        .map(|k| kappa * 4f64.powf((k as f64 - half) / half))
        .collect()
}

/// Recall with and without a fraction of prototypes removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapOutcome {
    pub removed: usize,
    pub covered_queries: usize,
    pub gap_queries: usize,
    pub covered_full: f64,
    pub covered_fallback: f64,
    pub gap_fallback: f64,
}

/// Deletes `fraction` of the prototypes (seeded), rebuilds the hybrid
/// database with aerial-only fallback, and compares top-1 recall on queries
/// whose own prototype cell survived against the full database.
pub fn gap_experiment(run: &BenchmarkRun, fraction: f64, seed: u64) -> Result<GapOutcome> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid("fraction must be in [0, 1)"));
    }
    let table = &run.trained.state.prototypes;
    let removed = (fraction * table.len() as f64).round() as usize;
    let mut rng = seed::rng_for(seed, seed::GAPS, 0);
    let mut drop = vec![false; table.len()];
    for k in sample(&mut rng, table.len(), removed) {
        drop[k] = true;
    }
    let keep: Vec<usize> = (0..table.len()).filter(|&k| !drop[k]).collect();
    let holey = PrototypeTable::new(
        table.level(),
        table.dim(),
        keep.iter().map(|&k| table.ids()[k]).collect(),
        keep.iter().flat_map(|&k| table.row(k).to_vec()).collect(),
    )?;
    let fallback = build_hybrid_db(&holey, &run.dbs.aerial, run.dbs.kappa, true)?;
    let radius = recall_threshold_m(run.config.levels.aerial_level());
    let mut out = GapOutcome {
        removed,
        covered_queries: 0,
        gap_queries: 0,
        covered_full: 0.0,
        covered_fallback: 0.0,
        gap_fallback: 0.0,
    };
    for (k, q) in run.queries.embeddings.iter().enumerate() {
        let gt = &run.queries.locations[k];
        let covered = holey.get(&cell_from_point(gt, table.level())?).is_some();
        let fb = f64::from(u8::from(hit_within(&search_topk(&fallback, q, 1)?, gt, 1, radius)));
        if covered {
            let full = f64::from(u8::from(hit_within(&search_topk(&run.dbs.hybrid, q, 1)?, gt, 1, radius)));
            out.covered_queries += 1;
            out.covered_full += full;
            out.covered_fallback += fb;
        } else {
            out.gap_queries += 1;
            out.gap_fallback += fb;
        }
    }
    let div = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    out.covered_full = div(out.covered_full, out.covered_queries);
    out.covered_fallback = div(out.covered_fallback, out.covered_queries);
    out.gap_fallback = div(out.gap_fallback, out.gap_queries);
    Ok(out)
}
