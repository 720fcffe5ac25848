//! One function per subcommand. Every command reads its inputs from and
//! writes its outputs to the run directory, next to `resolved.cfg`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cellcode::cellgrid::GeoPoint;
use cellcode::codedb::{build_hybrid_db, eval_suite, search_topk, CellCodeDB, DbMode, EvalReport, Slice};
use cellcode::encoder::EncoderParams;
use cellcode::experiment::{
    build_databases, embed_queries, embed_view, generate_data, kappa_grid, run_benchmark, BenchmarkConfig,
    BenchmarkRun, Databases,
};
use cellcode::loss::{AerialInterp, EdgeSet, GroundInterp};
use cellcode::pca::prototype_pca;
use cellcode::train::{train, Model, PrototypeTable};
use cellcode::world::{generate_world, load_dataset, save_dataset, Dataset, WorldModel};

use crate::config::RunConfig;
use crate::error::CliError;

pub const DATASET: &str = "dataset.gwds";
pub const GROUND_ENCODER: &str = "ground.genc";
pub const AERIAL_ENCODER: &str = "aerial.genc";
pub const PROTOTYPES: &str = "prototypes.gprt";
pub const TRAIN_REPORT: &str = "train_report.csv";
pub const KAPPA: &str = "kappa.txt";
pub const EVAL: &str = "eval.csv";
pub const PCA: &str = "pca.csv";
pub const RESOLVED: &str = "resolved.cfg";

pub const QUERY_HEADER: &str = "rank,id,score,lat_deg,lon_deg";
pub const PCA_HEADER: &str = "cell_id,lat_deg,lon_deg,pc1,pc2,pc3";
pub const LOSS_EDGES_HEADER: &str = "ground_aerial,ground_prototype,aerial_prototype,mode,K,distance_m,recall";
pub const INTERP_HEADER: &str = "ground_interp,aerial_interp,mode,K,distance_m,recall";
pub const KAPPA_HEADER: &str = "kappa,kappa_ratio,K,distance_m,recall";
pub const DENSITY_HEADER: &str = "slice,count,mode,K,distance_m,recall";
pub const GRANULARITY_HEADER: &str =
    "prototype_level,aerial_level,dim,prototype_bytes,hybrid_bytes,mode,K,distance_m,recall";

pub fn db_file(mode: DbMode) -> String {
    format!("{}.gcdb", mode.name())
}

/// Run directory plus configuration.
pub struct Context {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Context {
    /// Creates the run directory and records the resolved configuration.
    pub fn open(config: RunConfig) -> Result<Self, CliError> {
        let dir = config.out_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        fs::write(dir.join(RESOLVED), config.resolved())?;
        Ok(Self { config, dir })
    }

    fn bench(&self) -> &BenchmarkConfig {
        &self.config.bench
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an input that must already exist.
    fn input(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::Missing(p))
        }
    }

    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn world(&self) -> Result<WorldModel, CliError> {
        Ok(generate_world(self.bench().world.clone())?)
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let ds = load_dataset(self.input(DATASET)?)?;
        let level = self.bench().levels.prototype_level();
        if ds.prototype_level() != level {
            return Err(CliError::Config(format!(
                "{DATASET} was generated for prototype level {}, config has {level}",
                ds.prototype_level()
            )));
        }
        Ok(ds)
    }

    fn encoder(&self, name: &str) -> Result<EncoderParams, CliError> {
        Ok(EncoderParams::load(self.input(name)?)?)
    }

    fn prototypes(&self) -> Result<PrototypeTable, CliError> {
        Ok(PrototypeTable::load(self.input(PROTOTYPES)?)?)
    }

    fn database(&self, mode: DbMode) -> Result<CellCodeDB, CliError> {
        Ok(CellCodeDB::load(self.input(&db_file(mode))?)?)
    }
}

pub fn gen_world(ctx: &Context) -> Result<String, CliError> {
    let (_, ds) = generate_data(ctx.bench())?;
    save_dataset(&ds, ctx.path(DATASET))?;
    Ok(format!(
        "wrote {} with {} training and {} test views",
        DATASET,
        ds.train().count(),
        ds.test().count()
    ))
}

pub fn train_cmd(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let world = ctx.world()?;
    let mut tc = ctx.bench().train.clone();
    if tc.checkpoint_every > 0 {
        let dir = ctx.path("checkpoints");
        fs::create_dir_all(&dir)?;
        tc.checkpoint_dir = Some(dir);
    }
    let out = train(&ds, Some(&world), &tc)?;
    out.state.ground.save(ctx.path(GROUND_ENCODER))?;
    out.state.aerial.save(ctx.path(AERIAL_ENCODER))?;
    out.state.prototypes.save(ctx.path(PROTOTYPES))?;
    ctx.write(TRAIN_REPORT, &out.report.to_csv())?;
    let last = out.report.steps.last().map_or(f64::NAN, |m| m.loss.total);
    Ok(format!(
        "trained {} steps, {} prototypes; final batch loss {last:.4}, validation loss {:.4}",
        out.report.steps.len(),
        out.state.prototypes.len(),
        out.report.validation_mean
    ))
}

/// Loads the trained model and builds every database from it.
fn databases(ctx: &Context) -> Result<(Dataset, EncoderParams, PrototypeTable, Databases), CliError> {
    let ds = ctx.dataset()?;
    let ground = ctx.encoder(GROUND_ENCODER)?;
    let aerial = ctx.encoder(AERIAL_ENCODER)?;
    let table = ctx.prototypes()?;
    let world = ctx.world()?;
    let model = Model {
        ground: &ground,
        aerial: &aerial,
        prototypes: &table,
    };
    let dbs = build_databases(ctx.bench(), &world, &ds, model)?;
    Ok((ds, ground, table, dbs))
}

pub fn calibrate(ctx: &Context) -> Result<String, CliError> {
    let (_, _, _, dbs) = databases(ctx)?;
    ctx.write(KAPPA, &format!("{}\n", dbs.kappa))?;
    Ok(format!("kappa = {}", dbs.kappa))
}

fn stored_kappa(ctx: &Context) -> Result<f64, CliError> {
    if let Some(k) = ctx.config.kappa {
        return Ok(k);
    }
    let path = ctx.input(KAPPA)?;
    let text = fs::read_to_string(&path)?;
    text.trim()
        .parse::<f64>()
        .ok()
        .filter(|k| k.is_finite() && *k >= 0.0)
        .ok_or_else(|| CliError::Artifact(format!("{}: not a valid kappa", path.display())))
}

pub fn build_db(ctx: &Context) -> Result<String, CliError> {
    let kappa = stored_kappa(ctx)?;
    let (_, _, table, mut dbs) = databases(ctx)?;
    if kappa != dbs.kappa {
        dbs.hybrid = build_hybrid_db(&table, &dbs.aerial, kappa, false)?;
    }
    let mut summary = Vec::new();
    for db in [&dbs.ground, &dbs.aerial, &dbs.prototype, &dbs.hybrid] {
        db.save(ctx.path(&db_file(db.mode())))?;
        summary.push(format!("{} {}", db.mode(), db.len()));
    }
    Ok(format!("built databases ({}), kappa {kappa}", summary.join(", ")))
}

/// What to search with.
#[derive(Clone, Debug, PartialEq)]
pub enum QueryInput {
    /// Render a ground view at this pose (radians for the angles).
    Pose { location: GeoPoint, heading: f64, fov: f64 },
    Embedding(Vec<f64>),
}

pub fn query(ctx: &Context, mode: DbMode, k: usize, input: &QueryInput) -> Result<String, CliError> {
    let db = ctx.database(mode)?;
    let q = match input {
        QueryInput::Embedding(v) => {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(CliError::Config("query embedding must be nonzero".into()));
            }
            v.iter().map(|x| x / n).collect()
        }
        QueryInput::Pose { location, heading, fov } => {
            let ground = ctx.encoder(GROUND_ENCODER)?;
            embed_view(&ctx.world()?, &ground, location, *heading, *fov, ctx.bench().seed)?
        }
    };
    if q.len() != db.dim() {
        return Err(CliError::Config(format!(
            "query has dimension {}, database has {}",
            q.len(),
            db.dim()
        )));
    }
    let hits = search_topk(&db, &q, k)?;
    let mut out = String::from(QUERY_HEADER);
    out.push('\n');
    for (rank, h) in hits.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9}",
            rank + 1,
            h.id,
            h.score,
            h.anchor.lat_deg(),
            h.anchor.lon_deg()
        );
    }
    Ok(out)
}

pub fn eval(ctx: &Context) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let ground = ctx.encoder(GROUND_ENCODER)?;
    let dbs = DbMode::ALL
        .iter()
        .map(|m| ctx.database(*m))
        .collect::<Result<Vec<_>, _>>()?;
    let queries = embed_queries(&ds, &ground)?;
    let refs: Vec<&CellCodeDB> = dbs.iter().collect();
    let b = ctx.bench();
    let report = eval_suite(&refs, &queries.embeddings, &queries.locations, &queries.slices, &b.ks, &b.distances_m)?;
    ctx.write(EVAL, &report.to_csv())?;
    let (k, d) = (b.ks[0], b.distances_m[0]);
    let line: Vec<String> = DbMode::ALL
        .iter()
        .filter_map(|m| report.recall(*m, k, d, Slice::All).map(|r| format!("{m} {r:.4}")))
        .collect();
    Ok(format!("wrote {EVAL}; recall@{k} within {d:.0} m: {}", line.join(", ")))
}

pub fn export_pca(ctx: &Context) -> Result<String, CliError> {
    let table = ctx.prototypes()?;
    let (pca, rows) = prototype_pca(&table)?;
    let mut out = String::from(PCA_HEADER);
    out.push('\n');
    for r in &rows {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.cell.pack(),
            r.lat_deg,
            r.lon_deg,
            r.pc[0],
            r.pc[1],
            r.pc[2]
        );
    }
    ctx.write(PCA, &out)?;
    let v = pca.variances();
    Ok(format!(
        "wrote {PCA} with {} prototypes; component variances {:.4}, {:.4}, {:.4}",
        rows.len(),
        v[0],
        v[1],
        v[2]
    ))
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    LossEdges,
    Interpolation,
    Kappa,
    Density,
    Granularity,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::LossEdges,
        Suite::Interpolation,
        Suite::Kappa,
        Suite::Density,
        Suite::Granularity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::LossEdges => "loss-edges",
            Suite::Interpolation => "interp",
            Suite::Kappa => "kappa",
            Suite::Density => "density",
            Suite::Granularity => "granularity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn file(self) -> String {
        format!("ablate_{}.csv", self.name().replace('-', "_"))
    }
}

/// The six edge subsets with a trainable model, in the usual table order.
pub fn loss_edge_grid() -> Vec<EdgeSet> {
    let e = |ga, gp, ap| EdgeSet {
        ground_aerial: ga,
        ground_prototype: gp,
        aerial_prototype: ap,
    };
    vec![
        e(true, false, false),
        e(false, true, false),
        e(true, true, false),
        e(true, false, true),
        e(false, true, true),
        e(true, true, true),
    ]
}

/// Runs that share the base configuration are trained once.
struct Arms<'a> {
    base: &'a BenchmarkConfig,
    cache: Vec<(BenchmarkConfig, BenchmarkRun)>,
}

impl<'a> Arms<'a> {
    fn run(&mut self, edit: impl FnOnce(&mut BenchmarkConfig)) -> Result<&BenchmarkRun, CliError> {
        let mut cfg = self.base.clone();
        edit(&mut cfg);
        if let Some(k) = self.cache.iter().position(|(c, _)| *c == cfg) {
            return Ok(&self.cache[k].1);
        }
        let run = run_benchmark(&cfg)?;
        self.cache.push((cfg, run));
        Ok(&self.cache.last().expect("just pushed").1)
    }
}

fn recall_rows(report: &EvalReport, modes: &[DbMode], slice: Slice, mut emit: impl FnMut(DbMode, usize, f64, f64)) {
    for r in report.rows.iter().filter(|r| r.slice == slice && modes.contains(&r.mode)) {
        emit(r.mode, r.k, r.distance_m, r.recall);
    }
}

const CELL_MODES: [DbMode; 3] = [DbMode::Aerial, DbMode::Prototype, DbMode::Hybrid];

pub fn ablate(ctx: &Context, suites: &[Suite]) -> Result<String, CliError> {
    let mut arms = Arms {
        base: ctx.bench(),
        cache: Vec::new(),
    };
    let mut written = Vec::new();
    for &suite in suites {
        let mut out = String::new();
        match suite {
            Suite::LossEdges => {
                out += LOSS_EDGES_HEADER;
                out.push('\n');
                for edges in loss_edge_grid() {
                    let run = arms.run(|c| c.train.loss.edges = edges)?;
                    recall_rows(&run.report, &CELL_MODES, Slice::All, |m, k, d, r| {
                        let _ = writeln!(
                            out,
                            "{},{},{},{m},{k},{d},{r:.6}",
                            edges.ground_aerial, edges.ground_prototype, edges.aerial_prototype
                        );
                    });
                }
            }
            Suite::Interpolation => {
                out += INTERP_HEADER;
                out.push('\n');
                for (gname, g) in [
                    ("nearest", GroundInterp::Nearest),
                    ("frustum", GroundInterp::FrustumWeights),
                    ("frustum_all", GroundInterp::FrustumAllCells),
                ] {
                    for (aname, a) in [("nearest", AerialInterp::Nearest), ("bilinear", AerialInterp::Bilinear)] {
                        let run = arms.run(|c| {
                            c.train.loss.ground_interp = g;
                            c.train.loss.aerial_interp = a;
                        })?;
                        recall_rows(&run.report, &CELL_MODES, Slice::All, |m, k, d, r| {
                            let _ = writeln!(out, "{gname},{aname},{m},{k},{d},{r:.6}");
                        });
                    }
                }
            }
            Suite::Kappa => {
                out += KAPPA_HEADER;
                out.push('\n');
                let b = ctx.bench();
                let run = arms.run(|_| ())?;
                let queries = &run.queries;
                for kappa in kappa_grid(run.dbs.kappa, 9) {
                    let db = build_hybrid_db(&run.trained.state.prototypes, &run.dbs.aerial, kappa, false)?;
                    let report = eval_suite(&[&db], &queries.embeddings, &queries.locations, &queries.slices, &b.ks, &b.distances_m)?;
                    recall_rows(&report, &[DbMode::Hybrid], Slice::All, |_, k, d, r| {
                        let _ = writeln!(out, "{kappa},{},{k},{d},{r:.6}", kappa / run.dbs.kappa);
                    });
                }
            }
            Suite::Density => {
                out += DENSITY_HEADER;
                out.push('\n');
                let run = arms.run(|_| ())?;
                for slice in [Slice::Low, Slice::Mid, Slice::High] {
                    for row in run.report.rows.iter().filter(|r| r.slice == slice) {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{},{:.6}",
                            slice.name(),
                            row.count,
                            row.mode,
                            row.k,
                            row.distance_m,
                            row.recall
                        );
                    }
                }
            }
            Suite::Granularity => {
                out += GRANULARITY_HEADER;
                out.push('\n');
                for (lp, la, dim) in granularity_grid(ctx.bench()) {
                    let distances = ctx.bench().distances_m.clone();
                    let run = arms.run(|c| {
                        c.levels = cellcode::LevelConfig::new(lp, la).expect("checked levels");
                        c.refresh_derived();
                        c.distances_m = distances;
                        c.train.embed_dim = dim;
                    })?;
                    let (pb, hb) = (run.dbs.prototype.payload_bytes(), run.dbs.hybrid.payload_bytes());
                    recall_rows(&run.report, &CELL_MODES, Slice::All, |m, k, d, r| {
                        let _ = writeln!(out, "{lp},{la},{dim},{pb},{hb},{m},{k},{d},{r:.6}");
                    });
                }
            }
        }
        let file = suite.file();
        ctx.write(&file, &out)?;
        written.push(file);
    }
    Ok(format!("wrote {}", written.join(", ")))
}

/// Prototype levels one coarser and one finer than the base, with the
/// dimension scaled by four per level so the prototype database keeps its
/// byte size. The aerial level keeps its offset from the prototype level.
pub fn granularity_grid(base: &BenchmarkConfig) -> Vec<(u8, u8, usize)> {
    let (lp, la, d) = (
        base.levels.prototype_level(),
        base.levels.aerial_level(),
        base.train.embed_dim,
    );
    let offset = la - lp;
    let mut out = Vec::new();
    for (level, dim) in [(lp.checked_sub(1), d * 4), (Some(lp), d), (Some(lp + 1), d / 4)] {
        if let Some(level) = level {
            let ok = (1..=256).contains(&dim) && level + offset <= cellcode::cellgrid::MAX_LEVEL;
            if ok && (dim >= 4 || level == lp) {
                out.push((level, level + offset, dim));
            }
        }
    }
    out
}

/// Full pipeline used by `run-all` style scripts and tests.
pub fn pipeline(ctx: &Context) -> Result<Vec<String>, CliError> {
    Ok(vec![
        gen_world(ctx)?,
        train_cmd(ctx)?,
        calibrate(ctx)?,
        build_db(ctx)?,
        eval(ctx)?,
        export_pca(ctx)?,
    ])
}

pub fn read_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing(p.to_path_buf()),
            _ => CliError::Io(format!("{}: {e}", p.display())),
        })?,
        None => String::new(),
    };
    let mut config = RunConfig::parse(&text, seed)?;
    if let Some(o) = out {
        config.out_dir = o.to_path_buf();
    }
    Ok(config)
}
