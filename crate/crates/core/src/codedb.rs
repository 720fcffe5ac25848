//! Retrieval databases of cell codes, exact search and recall.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::cellgrid::{haversine_distance, CellId, GeoPoint, MAX_LEVEL};
use crate::encoder::EncoderParams;
use crate::error::{invalid, Error, Result};
use crate::seed;
use crate::train::PrototypeTable;
use crate::vecmath::{dot, norm};
use crate::world::WorldModel;

const MAGIC: &[u8; 4] = b"GCDB";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DbMode {
    /// One entry per reference ground image.
    Ground,
    /// One north-aligned aerial tile per fine cell.
    Aerial,
    /// One learned prototype per coarse cell.
    Prototype,
    /// Scaled parent prototype plus aerial embedding per fine cell.
    Hybrid,
}

impl DbMode {
    pub const ALL: [DbMode; 4] = [DbMode::Ground, DbMode::Aerial, DbMode::Prototype, DbMode::Hybrid];

    pub fn code(self) -> u8 {
        match self {
            DbMode::Ground => 0,
            DbMode::Aerial => 1,
            DbMode::Prototype => 2,
            DbMode::Hybrid => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(usize::from(c)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DbMode::Ground => "ground",
            DbMode::Aerial => "aerial",
            DbMode::Prototype => "prototype",
            DbMode::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for DbMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellCodeDB {
    mode: DbMode,
    level: u8,
    kappa: f64,
    dim: usize,
    ids: Vec<u64>,
    anchors: Vec<GeoPoint>,
    data: Vec<f64>,
}

/// One retrieved entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
    pub anchor: GeoPoint,
}

impl CellCodeDB {
    /// Builds a database from `(id, anchor, vector)` entries, sorted by id.
    pub fn new(
        mode: DbMode,
        level: u8,
        kappa: f64,
        dim: usize,
        mut entries: Vec<(u64, GeoPoint, Vec<f64>)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("database dimension must be positive"));
        }
        if level > MAX_LEVEL {
            return Err(invalid(format!("level {level} out of range")));
        }
        if !kappa.is_finite() || kappa < 0.0 || (mode != DbMode::Hybrid && kappa != 0.0) {
            return Err(invalid("kappa must be finite, nonnegative, and zero outside hybrid mode"));
        }
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid("duplicate database id"));
        }
        let mut db = Self {
            mode,
            level,
            kappa,
            dim,
            ids: Vec::with_capacity(entries.len()),
            anchors: Vec::with_capacity(entries.len()),
            data: Vec::with_capacity(entries.len() * dim),
        };
        for (id, anchor, v) in entries {
            if v.len() != dim {
                return Err(invalid(format!("entry {id} has dimension {}, expected {dim}", v.len())));
            }
            db.ids.push(id);
            db.anchors.push(anchor);
            db.data.extend(v);
        }
        Ok(db)
    }

    pub fn mode(&self) -> DbMode {
        self.mode
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn anchor(&self, k: usize) -> GeoPoint {
        self.anchors[k]
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn position(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    /// Bytes taken by the entry vectors when stored.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * 4
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out);
        w.bytes(MAGIC)?;
        w.u16(VERSION)?;
        w.u8(self.mode.code())?;
        w.u8(self.level)?;
        w.u32(self.dim as u32)?;
        w.u64(self.len() as u64)?;
        w.f64(self.kappa)?;
        for k in 0..self.len() {
            w.u64(self.ids[k])?;
            w.f64(self.anchors[k].lat())?;
            w.f64(self.anchors[k].lon())?;
            w.f32s(self.vector(k).iter().map(|x| *x as f32))?;
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let at = r.offset();
        let mode = DbMode::from_code(r.u8()?).ok_or_else(|| Error::Format {
            offset: at,
            message: "unknown database mode".into(),
        })?;
        let level = r.u8()?;
        if level > MAX_LEVEL {
            return Err(r.error(format!("level {level} out of range")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.error("zero dimension"));
        }
        let count = r.u64()?;
        let kappa = r.f64()?;
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(r.error("invalid kappa"));
        }
        let mut entries = Vec::new();
        let mut last = None;
        for _ in 0..count {
            let at = r.offset();
            let id = r.u64()?;
            if last.is_some_and(|l| l >= id) {
                return Err(Error::Format {
                    offset: at,
                    message: "ids are not strictly increasing".into(),
                });
            }
            last = Some(id);
            let lat = r.f64()?;
            let lon = r.f64()?;
            let anchor = GeoPoint::new(lat, lon).map_err(|e| r.error(e.to_string()))?;
            let v: Vec<f64> = r.f32s(dim)?.into_iter().map(f64::from).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(r.error("non-finite vector entry"));
            }
            entries.push((id, anchor, v));
        }
        r.expect_eof()?;
        Self::new(mode, level, kappa, dim, entries).map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Ground-image database; ids are caller-chosen, anchors are image
/// locations.
pub fn build_ground_db(level: u8, entries: Vec<(u64, GeoPoint, Vec<f64>)>) -> Result<CellCodeDB> {
    let dim = entries.first().map_or(0, |e| e.2.len());
    CellCodeDB::new(DbMode::Ground, level, 0.0, dim, entries)
}

/// Embeds one north-aligned tile centered on every cell. Tile noise is drawn
/// per cell from `seed`.
pub fn embed_aerial_cells(
    world: &WorldModel,
    encoder: &EncoderParams,
    cells: &[CellId],
    seed: u64,
) -> Result<Vec<(CellId, Vec<f64>)>> {
    cells
        .iter()
        .map(|c| {
            let mut rng = seed::rng_for(seed, seed::AERIAL_DB, c.pack());
            let obs = world.sample_aerial_tile(&c.center(), 0.0, &mut rng);
            let x: Vec<f64> = obs.features.iter().map(|v| f64::from(*v)).collect();
            Ok((*c, encoder.encode(&x)?.into_inner()))
        })
        .collect()
}

pub fn build_aerial_db(level: u8, cells: Vec<(CellId, Vec<f64>)>) -> Result<CellCodeDB> {
    if let Some((c, _)) = cells.iter().find(|(c, _)| c.level() != level) {
        return Err(invalid(format!("aerial cell {c} is not at level {level}")));
    }
    let dim = cells.first().map_or(0, |e| e.1.len());
    let entries = cells
        .into_iter()
        .map(|(c, v)| (c.pack(), c.center(), v))
        .collect();
    CellCodeDB::new(DbMode::Aerial, level, 0.0, dim, entries)
}

pub fn build_prototype_db(table: &PrototypeTable) -> Result<CellCodeDB> {
    let entries = table
        .ids()
        .iter()
        .enumerate()
        .map(|(k, c)| (c.pack(), c.center(), table.row(k).to_vec()))
        .collect();
    CellCodeDB::new(DbMode::Prototype, table.level(), 0.0, table.dim(), entries)
}

/// Cell codes `kappa * prototype(parent(i)) + aerial(i)` for every aerial
/// entry. Cells whose parent has no prototype are an error, or with
/// `fallback` keep the aerial embedding alone.
pub fn build_hybrid_db(table: &PrototypeTable, aerial: &CellCodeDB, kappa: f64, fallback: bool) -> Result<CellCodeDB> {
    if aerial.mode() != DbMode::Aerial {
        return Err(invalid("hybrid codes need an aerial database"));
    }
    if aerial.dim() != table.dim() {
        return Err(invalid("prototype and aerial dimensions differ"));
    }
    if aerial.level() < table.level() {
        return Err(invalid("aerial level is coarser than the prototype level"));
    }
    let mut entries = Vec::with_capacity(aerial.len());
    for k in 0..aerial.len() {
        let cell = CellId::unpack(aerial.ids()[k])?;
        let parent = cell.parent(table.level())?;
        let mut v = aerial.vector(k).to_vec();
        match table.get(&parent) {
            Some(p) => {
                for (x, y) in v.iter_mut().zip(p) {
                    *x += kappa * y;
                }
            }
            None if fallback => {}
            None => {
                return Err(Error::Coverage(format!(
                    "no prototype for parent {parent} of aerial cell {cell}"
                )))
            }
        }
        entries.push((aerial.ids()[k], aerial.anchor(k), v));
    }
    CellCodeDB::new(DbMode::Hybrid, aerial.level(), kappa, aerial.dim(), entries)
}

/// Ratio of the mean top-1 similarity against the aerial database to the
/// mean top-1 similarity against the prototype database.
pub fn calibrate_kappa(queries: &[Vec<f64>], prototypes: &CellCodeDB, aerial: &CellCodeDB) -> Result<f64> {
    if queries.len() < 100 {
        return Err(Error::Calibration(format!(
            "{} calibration queries, need at least 100",
            queries.len()
        )));
    }
    let mean_top1 = |db: &CellCodeDB| -> Result<f64> {
        let mut s = 0.0;
        for q in queries {
            s += search_topk(db, q, 1)?[0].score;
        }
        Ok(s / queries.len() as f64)
    };
    let a = mean_top1(aerial)?;
    let p = mean_top1(prototypes)?;
    if !(p > 0.0) || !(a > 0.0) {
        return Err(Error::Calibration(format!(
            "mean top-1 similarities must be positive (aerial {a}, prototype {p})"
        )));
    }
    Ok(a / p)
}

/// Exact top-`k` by dot product, highest score first, ties by ascending id.
pub fn search_topk(db: &CellCodeDB, query: &[f64], k: usize) -> Result<Vec<Hit>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if query.len() != db.dim() {
        return Err(invalid(format!("query has dimension {}, expected {}", query.len(), db.dim())));
    }
    let n = norm(query);
    if (n - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("query norm {n} is not 1")));
    }
    let scores: Vec<f64> = (0..db.len()).map(|i| dot(query, db.vector(i))).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..db.len()).collect();
    let k = k.min(db.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    Ok(idx
        .into_iter()
        .map(|i| Hit {
            id: db.ids()[i],
            score: scores[i],
            anchor: db.anchor(i),
        })
        .collect())
}

/// Whether any of the first `k` hits lies within `distance_m` of `gt`.
pub fn hit_within(hits: &[Hit], gt: &GeoPoint, k: usize, distance_m: f64) -> bool {
    hits.iter()
        .take(k)
        .any(|h| haversine_distance(&h.anchor, gt) <= distance_m)
}

/// Fraction of queries with a top-`k` anchor within `distance_m`.
pub fn recall_at(results: &[Vec<Hit>], gts: &[GeoPoint], k: usize, distance_m: f64) -> f64 {
    assert_eq!(results.len(), gts.len());
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .zip(gts)
        .filter(|(r, g)| hit_within(r, g, k, distance_m))
        .count();
    hits as f64 / results.len() as f64
}

/// Query subsets for sliced evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Slice {
    All,
    Low,
    Mid,
    High,
}

impl Slice {
    pub fn name(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::Low => "low",
            Slice::Mid => "mid",
            Slice::High => "high",
        }
    }
}

/// Splits queries into density terciles given each query's count of
/// training views in its prototype cell. Queries are ranked by count, ties
/// by index, and cut into thirds.
pub fn density_terciles(counts: &[u32]) -> Vec<Slice> {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (counts[i], i));
    let mut out = vec![Slice::Low; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n / 3 {
            Slice::Low
        } else if rank < 2 * n / 3 {
            Slice::Mid
        } else {
            Slice::High
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: DbMode,
    pub k: usize,
    pub distance_m: f64,
    pub slice: Slice,
    pub recall: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, mode: DbMode, k: usize, distance_m: f64, slice: Slice) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.mode == mode && r.k == k && r.distance_m == distance_m && r.slice == slice)
    }

    pub fn recall(&self, mode: DbMode, k: usize, distance_m: f64, slice: Slice) -> Option<f64> {
        self.get(mode, k, distance_m, slice).map(|r| r.recall)
    }

    pub const CSV_HEADER: &'static str = "mode,K,distance_m,slice,recall,count";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{}\n",
                r.mode,
                r.k,
                r.distance_m,
                r.slice.name(),
                r.recall,
                r.count
            ));
        }
        s
    }
}

/// Recall grid for each database over `ks` x `distances`, for all queries
/// and for each density slice.
pub fn eval_suite(
    dbs: &[&CellCodeDB],
    queries: &[Vec<f64>],
    gts: &[GeoPoint],
    slices: &[Slice],
    ks: &[usize],
    distances: &[f64],
) -> Result<EvalReport> {
    if queries.len() != gts.len() || slices.len() != gts.len() {
        return Err(invalid("queries, locations and slices differ in length"));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let mut report = EvalReport::default();
    for db in dbs {
        let results: Vec<Vec<Hit>> = queries
            .iter()
            .map(|q| search_topk(db, q, kmax))
            .collect::<Result<_>>()?;
        for slice in [Slice::All, Slice::Low, Slice::Mid, Slice::High] {
            let members: Vec<usize> = (0..gts.len())
                .filter(|&i| slice == Slice::All || slices[i] == slice)
                .collect();
            let r: Vec<Vec<Hit>> = members.iter().map(|&i| results[i].clone()).collect();
            let g: Vec<GeoPoint> = members.iter().map(|&i| gts[i]).collect();
            for &k in ks {
                for &d in distances {
                    report.rows.push(EvalRow {
                        mode: db.mode(),
                        k,
                        distance_m: d,
                        slice,
                        recall: recall_at(&r, &g, k, d),
                        count: members.len(),
                    });
                }
            }
        }
    }
    Ok(report)
}
