//! Joint training of the two encoders and the prototype table.

pub mod adam;
mod prototypes;
pub mod shard;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

pub use prototypes::PrototypeTable;
pub use shard::{shard_prototypes, sharded_negative_sums, ShardAssignment};

use crate::cellgrid::{avg_edge_length, cells_in_cap, unit_distance, CellId, GeoPoint};
use crate::encoder::EncoderParams;
use crate::error::{invalid, Error, Result};
use crate::loss::{ms_loss_batch, positives_for, Example, LossBreakdown, LossConfig, Positives};
use crate::seed;
use crate::vecmath::dot;
use crate::world::{Dataset, Sample, WorldModel};
use adam::{Adam, SparseAdam};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_encoders: f64,
    pub lr_prototypes: f64,
    /// Learning rate reached by the cosine schedules at the last step.
    pub lr_floor: f64,
    pub seed: u64,
    pub shard_count: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Resample the paired aerial tile every epoch after the first.
    pub augment_aerial: bool,
    /// Extra margin around the training area covered by prototypes.
    pub prototype_margin_m: f64,
    /// Held-out views used for the final validation loss.
    pub validation_size: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn new(prototype_level: u8) -> Self {
        Self {
            steps: 1000,
            batch_size: 128,
            lr_encoders: 0.003,
            lr_prototypes: 0.01,
            lr_floor: 1e-6,
            seed: 0,
            shard_count: 1,
            hidden_dim: 128,
            embed_dim: 64,
            augment_aerial: true,
            prototype_margin_m: 2.0 * avg_edge_length(prototype_level),
            validation_size: 512,
            checkpoint_dir: None,
            checkpoint_every: 0,
            loss: LossConfig::for_level(prototype_level),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        if self.shard_count == 0 {
            return Err(invalid("shard count must be at least 1"));
        }
        if !(self.lr_encoders >= 0.0 && self.lr_prototypes >= 0.0 && self.lr_floor >= 0.0) {
            return Err(invalid("learning rates must be nonnegative"));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        if !(self.loss.alpha > 0.0 && self.loss.beta > 0.0) {
            return Err(invalid("alpha and beta must be positive"));
        }
        if self.loss.edges.is_empty() {
            return Err(invalid("at least one loss edge must be enabled"));
        }
        Ok(())
    }
}

/// Cosine decay from `lr0` at step 0 to `floor` at step `total - 1`. A
/// floor above `lr0` is clamped to `lr0`.
pub fn cosine_lr(lr0: f64, floor: f64, step: usize, total: usize) -> f64 {
    let floor = floor.min(lr0);
    if total <= 1 {
        return floor;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    floor + (lr0 - floor) * 0.5 * (1.0 + (PI * t).cos())
}

/// Parameters and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub ground: EncoderParams,
    pub aerial: EncoderParams,
    pub prototypes: PrototypeTable,
    pub step: usize,
    adam_ground: Adam,
    adam_aerial: Adam,
    adam_prototypes: SparseAdam,
}

/// Borrowed view of the learned parameters.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub ground: &'a EncoderParams,
    pub aerial: &'a EncoderParams,
    pub prototypes: &'a PrototypeTable,
}

impl TrainState {
    pub fn model(&self) -> Model<'_> {
        Model {
            ground: &self.ground,
            aerial: &self.aerial,
            prototypes: &self.prototypes,
        }
    }

    pub fn new(ground: EncoderParams, aerial: EncoderParams, prototypes: PrototypeTable) -> Result<Self> {
        if ground.embed_dim() != prototypes.dim() || aerial.embed_dim() != prototypes.dim() {
            return Err(invalid("encoder and prototype dimensions differ"));
        }
        Ok(Self {
            adam_ground: Adam::new(ground.as_slice().len()),
            adam_aerial: Adam::new(aerial.as_slice().len()),
            adam_prototypes: SparseAdam::new(prototypes.len(), prototypes.dim()),
            ground,
            aerial,
            prototypes,
            step: 0,
        })
    }

    /// Seeded encoders and unit-norm random prototypes over `cells`.
    pub fn init(
        ground_dim: usize,
        aerial_dim: usize,
        cells: Vec<CellId>,
        level: u8,
        config: &TrainConfig,
    ) -> Result<Self> {
        let (h, d) = (config.hidden_dim, config.embed_dim);
        let ground = EncoderParams::init(ground_dim, h, d, &mut seed::rng_for(config.seed, seed::ENCODER_GROUND, 0))?;
        let aerial = EncoderParams::init(aerial_dim, h, d, &mut seed::rng_for(config.seed, seed::ENCODER_AERIAL, 0))?;
        let prototypes = PrototypeTable::random(level, d, cells, &mut seed::rng_for(config.seed, seed::PROTOTYPES, 0))?;
        Self::new(ground, aerial, prototypes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr_encoders: f64,
    pub lr_prototypes: f64,
    pub grad_norm_ground: f64,
    pub grad_norm_aerial: f64,
    pub grad_norm_prototypes: f64,
    pub touched_prototypes: usize,
}

/// One optimizer step at `state.step` of a `total_steps` schedule.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Example<'_>],
    positives: &[Positives],
    shards: &ShardAssignment,
    config: &TrainConfig,
    total_steps: usize,
) -> Result<StepMetrics> {
    let out = ms_loss_batch(
        batch,
        positives,
        &state.ground,
        &state.aerial,
        &state.prototypes,
        shards,
        &config.loss,
    )?;
    let l = out.loss;
    if !(l.total.is_finite() && l.positive.is_finite() && l.negative.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: total {}, positive {}, negative {}",
            state.step, l.total, l.positive, l.negative
        )));
    }
    let norm = |v: &[f64]| dot(v, v).sqrt();
    let (gg, ga, gp) = (norm(&out.ground_params), norm(&out.aerial_params), out.prototypes.norm());
    if !(gg.is_finite() && ga.is_finite() && gp.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at step {}", state.step)));
    }
    let lr_e = cosine_lr(config.lr_encoders, config.lr_floor, state.step, total_steps);
    let lr_p = cosine_lr(config.lr_prototypes, config.lr_floor, state.step, total_steps);
    if lr_e > 0.0 {
        state
            .adam_ground
            .update(state.ground.as_mut_slice(), &out.ground_params, lr_e);
        state
            .adam_aerial
            .update(state.aerial.as_mut_slice(), &out.aerial_params, lr_e);
    }
    if lr_p > 0.0 {
        for (k, g) in out.prototypes.iter() {
            state
                .adam_prototypes
                .update_row(k, state.prototypes.row_mut(k), g, lr_p);
            state.prototypes.renormalize_row(k)?;
        }
    }
    let metrics = StepMetrics {
        step: state.step,
        loss: l,
        lr_encoders: lr_e,
        lr_prototypes: lr_p,
        grad_norm_ground: gg,
        grad_norm_aerial: ga,
        grad_norm_prototypes: gp,
        touched_prototypes: out.prototypes.len(),
    };
    state.step += 1;
    Ok(metrics)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepMetrics>,
    pub validation: LossBreakdown,
    /// Mean validation loss per example.
    pub validation_mean: f64,
}

impl TrainReport {
    /// CSV with columns `step,loss,pos,neg,lr_enc,lr_proto`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,pos,neg,lr_enc,lr_proto\n");
        for m in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.step, m.loss.total, m.loss.positive, m.loss.negative, m.lr_encoders, m.lr_prototypes
            );
        }
        s
    }

    /// Mean per-batch loss over the last `n` recorded steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.steps.len()).max(1);
        self.steps[self.steps.len().saturating_sub(k)..]
            .iter()
            .map(|m| m.loss.total)
            .sum::<f64>()
            / k as f64
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub report: TrainReport,
}

/// An example with owned features and cached positives.
struct Prepared {
    ground: Vec<f64>,
    aerial: Vec<f64>,
    location: GeoPoint,
    heading: f64,
    fov: f64,
    tile_center: GeoPoint,
    positives: Positives,
}

impl Prepared {
    fn new(s: &Sample, level: u8, loss: &LossConfig) -> Result<Self> {
        let mut p = Self {
            ground: s.ground.features.iter().map(|x| f64::from(*x)).collect(),
            aerial: s.aerial.features.iter().map(|x| f64::from(*x)).collect(),
            location: s.ground.location,
            heading: s.ground.heading,
            fov: s.ground.fov,
            tile_center: s.aerial.tile_center,
            positives: Positives {
                ground: crate::loss::InterpolationWeights::single(CellId::new(0, 0, 0, 0)?),
                aerial: crate::loss::InterpolationWeights::single(CellId::new(0, 0, 0, 0)?),
            },
        };
        p.positives = positives_for(&p.example(), level, loss)?;
        Ok(p)
    }

    fn example(&self) -> Example<'_> {
        Example {
            ground: &self.ground,
            aerial: &self.aerial,
            location: self.location,
            heading: self.heading,
            fov: self.fov,
            tile_center: self.tile_center,
        }
    }
}

/// Prototype cells: every cell within the training area, widened by the
/// configured margin, plus every cell any training positive refers to.
fn prototype_cells(examples: &[Prepared], level: u8, margin_m: f64) -> Result<Vec<CellId>> {
    let mut acc = [0.0; 3];
    for e in examples {
        let u = e.location.to_unit();
        for d in 0..3 {
            acc[d] += u[d];
        }
    }
    let center = GeoPoint::from_unit(acc);
    let cu = center.to_unit();
    let reach = examples
        .iter()
        .map(|e| unit_distance(&cu, &e.location.to_unit()))
        .fold(0.0, f64::max);
    let mut cells = cells_in_cap(&center, reach + margin_m, level)?;
    for e in examples {
        cells.extend(e.positives.ground.cells());
        cells.extend(e.positives.aerial.cells());
    }
    cells.sort();
    cells.dedup();
    Ok(cells)
}

/// Fresh paired tile for training view `index` in `epoch`: a new offset,
/// bearing and rotation around the place.
fn resample_tile(world: &WorldModel, p: &mut Prepared, seed: u64, epoch: u64, index: usize, level: u8, loss: &LossConfig) -> Result<()> {
    let mut rng = seed::rng_for(seed, seed::AUGMENT, (epoch << 32) | index as u64);
    let offset = world.config().max_pair_offset_m() * rng.random::<f64>().sqrt();
    let bearing = rng.random_range(0.0..2.0 * PI);
    let rotation = rng.random_range(0.0..2.0 * PI);
    let center = p.location.destination(bearing, offset);
    let obs = world.sample_aerial_tile(&center, rotation, &mut rng);
    p.aerial = obs.features.iter().map(|x| f64::from(*x)).collect();
    p.tile_center = center;
    p.positives = positives_for(&p.example(), level, loss)?;
    Ok(())
}

/// Trains on the training views of `dataset`. With a world model and
/// `augment_aerial`, paired tiles are re-rendered each epoch after the
/// first.
pub fn train(dataset: &Dataset, world: Option<&WorldModel>, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let level = dataset.prototype_level();
    let mut examples: Vec<Prepared> = dataset
        .train()
        .map(|s| Prepared::new(s, level, &config.loss))
        .collect::<Result<_>>()?;
    if examples.is_empty() {
        return Err(invalid("dataset has no training views"));
    }
    let validation: Vec<Prepared> = {
        let held: Vec<&Sample> = dataset.test().take(config.validation_size).collect();
        let src: Vec<&Sample> = if held.is_empty() {
            dataset.train().take(config.validation_size).collect()
        } else {
            held
        };
        src.into_iter()
            .map(|s| Prepared::new(s, level, &config.loss))
            .collect::<Result<_>>()?
    };
    let cells = prototype_cells(&examples, level, config.prototype_margin_m)?;
    let mut state = TrainState::init(
        examples[0].ground.len(),
        examples[0].aerial.len(),
        cells,
        level,
        config,
    )?;
    let shards = shard_prototypes(state.prototypes.len(), config.shard_count)?;
    for (i, e) in examples.iter().enumerate() {
        for c in e.positives.ground.cells().chain(e.positives.aerial.cells()) {
            if state.prototypes.index_of(&c).is_none() {
                return Err(Error::Coverage(format!("training view {i} has no prototype for cell {c}")));
            }
        }
    }

    let n = examples.len();
    let batch = config.batch_size.min(n);
    let per_epoch = n / batch;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = u64::MAX;
    for step in 0..config.steps {
        let e = (step / per_epoch) as u64;
        if e != epoch {
            epoch = e;
            order = (0..n).collect();
            order.shuffle(&mut seed::rng_for(config.seed, seed::SHUFFLE, epoch));
        }
        let slot = step % per_epoch;
        let idx = &order[slot * batch..(slot + 1) * batch];
        if epoch > 0 && config.augment_aerial {
            if let Some(w) = world {
                for &i in idx {
                    resample_tile(w, &mut examples[i], config.seed, epoch, i, level, &config.loss)?;
                }
            }
        }
        for &i in idx {
            for c in examples[i].positives.aerial.cells() {
                if state.prototypes.index_of(&c).is_none() {
                    return Err(Error::Coverage(format!("augmented tile of view {i} has no prototype for cell {c}")));
                }
            }
        }
        let ex: Vec<Example> = idx.iter().map(|&i| examples[i].example()).collect();
        let pos: Vec<Positives> = idx.iter().map(|&i| examples[i].positives.clone()).collect();
        let m = train_step(&mut state, &ex, &pos, &shards, config, config.steps)?;
        report.steps.push(m);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                save_checkpoint(&state, dir)?;
            }
        }
    }

    let (total, count) = validation_loss(&state, &validation, &shards, config)?;
    report.validation = total;
    report.validation_mean = if count > 0 { total.total / count as f64 } else { 0.0 };
    Ok(TrainOutput { state, report })
}

/// Summed loss over `examples` in consecutive batches of the training
/// batch size, skipping views whose positives fall outside the table.
fn validation_loss(
    state: &TrainState,
    examples: &[Prepared],
    shards: &ShardAssignment,
    config: &TrainConfig,
) -> Result<(LossBreakdown, usize)> {
    let usable: Vec<&Prepared> = examples
        .iter()
        .filter(|e| {
            e.positives
                .ground
                .cells()
                .chain(e.positives.aerial.cells())
                .all(|c| state.prototypes.index_of(&c).is_some())
        })
        .collect();
    let mut acc = LossBreakdown::default();
    for chunk in usable.chunks(config.batch_size) {
        let ex: Vec<Example> = chunk.iter().map(|e| e.example()).collect();
        let pos: Vec<Positives> = chunk.iter().map(|e| e.positives.clone()).collect();
        let out = ms_loss_batch(&ex, &pos, &state.ground, &state.aerial, &state.prototypes, shards, &config.loss)?;
        acc.total += out.loss.total;
        acc.positive += out.loss.positive;
        acc.negative += out.loss.negative;
    }
    Ok((acc, usable.len()))
}

pub fn save_checkpoint(state: &TrainState, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    state.ground.save(dir.join("ground.genc"))?;
    state.aerial.save(dir.join("aerial.genc"))?;
    state.prototypes.save(dir.join("prototypes.gprt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::tests::small_config;
    use crate::world::{generate_dataset, generate_world, DatasetCounts, DensitySpec};

    fn setup() -> (WorldModel, Dataset) {
        let cfg = small_config(7);
        let world = generate_world(cfg.clone()).unwrap();
        let spec = DensitySpec::random(&cfg.region_center, cfg.region_radius_m, 2, 0.2, 7);
        let counts = DatasetCounts {
            train_places: 60,
            test_places: 10,
        };
        let ds = generate_dataset(&world, &spec, counts, 12, 9).unwrap();
        (world, ds)
    }

    fn config() -> TrainConfig {
        let mut c = TrainConfig::new(12);
        c.steps = 30;
        c.batch_size = 16;
        c.hidden_dim = 16;
        c.embed_dim = 8;
        c.loss.frustum_depth_m = 400.0;
        c
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.01, 1e-6, 0, 100), 0.01);
        assert!((cosine_lr(0.01, 1e-6, 99, 100) - 1e-6).abs() < 1e-9);
        let lrs: Vec<f64> = (0..100).map(|t| cosine_lr(0.003, 1e-6, t, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(cosine_lr(0.0, 1e-6, 5, 10), 0.0);
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let (world, ds) = setup();
        let mut c = config();
        c.steps = 0;
        let out = train(&ds, Some(&world), &c).unwrap();
        let level = ds.prototype_level();
        let examples: Vec<Prepared> = ds.train().map(|s| Prepared::new(s, level, &c.loss).unwrap()).collect();
        let cells = prototype_cells(&examples, level, c.prototype_margin_m).unwrap();
        let init = TrainState::init(examples[0].ground.len(), examples[0].aerial.len(), cells, level, &c).unwrap();
        assert_eq!(out.state, init);
        assert!(out.report.steps.is_empty());
    }

    #[test]
    fn zero_learning_rates_leave_parameters() {
        let (world, ds) = setup();
        let mut c = config();
        c.lr_encoders = 0.0;
        c.lr_prototypes = 0.0;
        c.steps = 5;
        let out = train(&ds, Some(&world), &c).unwrap();
        let mut z = c.clone();
        z.steps = 0;
        let init = train(&ds, Some(&world), &z).unwrap();
        assert_eq!(out.state.ground, init.state.ground);
        assert_eq!(out.state.aerial, init.state.aerial);
        assert_eq!(out.state.prototypes, init.state.prototypes);
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let (world, ds) = setup();
        let c = config();
        let a = train(&ds, Some(&world), &c).unwrap();
        let b = train(&ds, Some(&world), &c).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.report, b.report);
        let t = &a.state.prototypes;
        for k in 0..t.len() {
            assert!((crate::vecmath::norm(t.row(k)) - 1.0).abs() < 1e-6);
        }
        assert!(a.report.steps.iter().all(|m| m.loss.total > 0.0 && m.loss.negative >= 0.0));
        let csv = a.report.to_csv();
        assert!(csv.starts_with("step,loss,pos,neg,lr_enc,lr_proto\n"));
        assert_eq!(csv.lines().count(), c.steps + 1);
    }

    #[test]
    fn shard_count_does_not_change_training() {
        let (world, ds) = setup();
        let c1 = config();
        let mut c4 = config();
        c4.shard_count = 4;
        let a = train(&ds, Some(&world), &c1).unwrap();
        let b = train(&ds, Some(&world), &c4).unwrap();
        let rel = (a.report.validation.total - b.report.validation.total).abs() / a.report.validation.total;
        assert!(rel <= 1e-5, "relative difference {rel:e}");
        for (x, y) in a.report.steps.iter().zip(&b.report.steps) {
            assert!((x.loss.total - y.loss.total).abs() <= 1e-6 * x.loss.total);
        }
    }

    #[test]
    fn too_many_shards_is_rejected() {
        let (world, ds) = setup();
        let mut c = config();
        c.shard_count = 100_000;
        assert!(matches!(train(&ds, Some(&world), &c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn touched_set_is_positives_and_live_negatives() {
        let (_, ds) = setup();
        let c = config();
        let level = ds.prototype_level();
        let examples: Vec<Prepared> = ds.train().take(8).map(|s| Prepared::new(s, level, &c.loss).unwrap()).collect();
        let cells = prototype_cells(&examples, level, c.prototype_margin_m).unwrap();
        let mut state = TrainState::init(examples[0].ground.len(), examples[0].aerial.len(), cells, level, &c).unwrap();
        let shards = shard_prototypes(state.prototypes.len(), 1).unwrap();
        let ex: Vec<Example> = examples.iter().map(|e| e.example()).collect();
        let pos: Vec<Positives> = examples.iter().map(|e| e.positives.clone()).collect();
        let out = ms_loss_batch(&ex, &pos, &state.ground, &state.aerial, &state.prototypes, &shards, &c.loss).unwrap();
        let mut expected = std::collections::BTreeSet::new();
        for e in &examples {
            for cell in e.positives.ground.cells() {
                expected.insert(state.prototypes.index_of(&cell).unwrap());
            }
            let x = e.location.to_unit();
            let q = state.ground.encode(&e.ground).unwrap();
            for (k, center) in state.prototypes.centers().iter().enumerate() {
                let live = crate::loss::delta(dot(q.as_slice(), state.prototypes.row(k)), c.loss.beta, c.loss.lambda) > 0.0;
                if unit_distance(&x, center) > c.loss.neg_exclusion_radius_m && live {
                    expected.insert(k);
                }
            }
        }
        let got: Vec<usize> = out.prototypes.indices().to_vec();
        assert_eq!(got, expected.into_iter().collect::<Vec<_>>());
        let before = state.prototypes.clone();
        train_step(&mut state, &ex, &pos, &shards, &c, 10).unwrap();
        // Untouched rows are bitwise unchanged; touched rows with tiny
        // gradients may round back to the same value.
        for k in 0..before.len() {
            if out.prototypes.get(k).is_none() {
                assert_eq!(before.row(k), state.prototypes.row(k), "row {k}");
            }
        }
        assert!((0..before.len()).any(|k| before.row(k) != state.prototypes.row(k)));
    }
}
