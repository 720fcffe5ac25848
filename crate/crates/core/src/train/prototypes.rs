//! Table of unit-norm cell prototypes, stored in cell order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::cellgrid::{cell_center_xyz, CellId, MAX_LEVEL};
use crate::error::{invalid, Error, Result};
use crate::vecmath::{norm, scale};

const MAGIC: &[u8; 4] = b"GPRT";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    level: u8,
    dim: usize,
    ids: Vec<CellId>,
    data: Vec<f64>,
    centers: Vec<[f64; 3]>,
}

impl PrototypeTable {
    /// Builds a table from cells and row-major vectors. Cells are sorted and
    /// rows renormalized.
    pub fn new(level: u8, dim: usize, cells: Vec<CellId>, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("prototype dimension must be positive"));
        }
        if data.len() != cells.len() * dim {
            return Err(invalid(format!(
                "{} values for {} prototypes of dimension {dim}",
                data.len(),
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|c| c.level() != level) {
            return Err(invalid(format!("cell {c} is not at level {level}")));
        }
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by_key(|&k| cells[k]);
        if order.windows(2).any(|w| cells[w[0]] == cells[w[1]]) {
            return Err(invalid("duplicate prototype cell"));
        }
        let ids: Vec<CellId> = order.iter().map(|&k| cells[k]).collect();
        let mut sorted = Vec::with_capacity(data.len());
        for &k in &order {
            sorted.extend_from_slice(&data[k * dim..(k + 1) * dim]);
        }
        let centers = ids.iter().map(cell_center_xyz).collect();
        let mut table = Self {
            level,
            dim,
            ids,
            data: sorted,
            centers,
        };
        for k in 0..table.len() {
            table.renormalize_row(k)?;
        }
        Ok(table)
    }

    /// Random unit vectors, one per cell.
    pub fn random(level: u8, dim: usize, cells: Vec<CellId>, rng: &mut impl Rng) -> Result<Self> {
        let mut cells = cells;
        cells.sort();
        cells.dedup();
        let data = (0..cells.len() * dim).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(level, dim, cells, data)
    }

    pub fn level(&self) -> u8 {
        self.level
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

    pub fn ids(&self) -> &[CellId] {
        &self.ids
    }

    /// Unit vectors of the cell centers, in table order.
    pub fn centers(&self) -> &[[f64; 3]] {
        &self.centers
    }

    pub fn index_of(&self, cell: &CellId) -> Option<usize> {
        self.ids.binary_search(cell).ok()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, cell: &CellId) -> Option<&[f64]> {
        self.index_of(cell).map(|k| self.row(k))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Projects row `k` back onto the unit sphere.
    pub fn renormalize_row(&mut self, k: usize) -> Result<()> {
        let row = self.row_mut(k);
        let n = norm(row);
        if !(n > crate::encoder::NORMALIZE_EPS) || !n.is_finite() {
            return Err(Error::Degenerate {
                norm: n,
                eps: crate::encoder::NORMALIZE_EPS,
            });
        }
        scale(row, 1.0 / n);
        Ok(())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<W> {
        let mut w = Writer::new(out);
        w.bytes(MAGIC)?;
        w.u16(VERSION)?;
        w.u8(self.level)?;
        w.u8(0)?;
        w.u32(self.dim as u32)?;
        w.u64(self.len() as u64)?;
        for (k, id) in self.ids.iter().enumerate() {
            w.u64(id.pack())?;
            w.f32s(self.row(k).iter().map(|x| *x as f32))?;
        }
        w.finish()
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let level = r.u8()?;
        if level > MAX_LEVEL {
            return Err(r.error(format!("level {level} out of range")));
        }
        let _reserved = r.u8()?;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.error("zero prototype dimension"));
        }
        let count = r.u64()?;
        let mut ids: Vec<CellId> = Vec::new();
        let mut data = Vec::new();
        for _ in 0..count {
            let at = r.offset();
            let id = CellId::unpack(r.u64()?).map_err(|e| Error::Format {
                offset: at,
                message: e.to_string(),
            })?;
            if id.level() != level {
                return Err(Error::Format {
                    offset: at,
                    message: format!("cell {id} is not at level {level}"),
                });
            }
            if ids.last().is_some_and(|last| *last >= id) {
                return Err(Error::Format {
                    offset: at,
                    message: "prototype cells are not strictly increasing".into(),
                });
            }
            ids.push(id);
            let row = r.f32s(dim)?;
            if row.iter().any(|x| !x.is_finite()) {
                return Err(r.error("non-finite prototype value"));
            }
            data.extend(row.into_iter().map(f64::from));
        }
        r.expect_eof()?;
        Self::new(level, dim, ids, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cellgrid::{cells_in_cap, GeoPoint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> PrototypeTable {
        let c = GeoPoint::from_degrees(47.0, 8.0).unwrap();
        let cells = cells_in_cap(&c, 5000.0, 12).unwrap();
        PrototypeTable::random(12, 8, cells, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn rows_are_unit_and_sorted() {
        let t = table();
        assert!(t.len() > 10);
        assert!(t.ids().windows(2).all(|w| w[0] < w[1]));
        for k in 0..t.len() {
            assert!((norm(t.row(k)) - 1.0).abs() < 1e-12);
            assert_eq!(t.index_of(&t.ids()[k]), Some(k));
        }
    }

    #[test]
    fn round_trip_through_f32() {
        let t = table();
        let bytes = t.write(Vec::new()).unwrap();
        let back = PrototypeTable::read(bytes.as_slice()).unwrap();
        assert_eq!(back.ids(), t.ids());
        for (x, y) in back.as_slice().iter().zip(t.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(back.write(Vec::new()).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let t = table();
        let good = t.write(Vec::new()).unwrap();
        let mut bad = good.clone();
        bad[0] = b'Q';
        assert!(matches!(PrototypeTable::read(bad.as_slice()), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            PrototypeTable::read(&good[..good.len() - 1]),
            Err(Error::Format { .. })
        ));
        // Swap the first two records so the order check fires.
        let rec = 8 + 4 * t.dim();
        let head = 4 + 2 + 2 + 4 + 8;
        let mut swapped = good.clone();
        let (a, b) = swapped[head..head + 2 * rec].split_at_mut(rec);
        a.swap_with_slice(b);
        assert!(matches!(
            PrototypeTable::read(swapped.as_slice()),
            Err(Error::Format { offset, .. }) if offset == (head + rec) as u64
        ));
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = CellId::new(0, 3, 1, 1).unwrap();
        assert!(PrototypeTable::new(3, 2, vec![c], vec![1.0]).is_err());
        assert!(PrototypeTable::new(4, 2, vec![c], vec![1.0, 0.0]).is_err());
        assert!(PrototypeTable::new(3, 2, vec![c, c], vec![1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(matches!(
            PrototypeTable::new(3, 2, vec![c], vec![0.0, 0.0]),
            Err(Error::Degenerate { .. })
        ));
    }
}
