//! `GWDS` dataset files. Layout is documented in `docs/formats.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::dataset::{Dataset, Sample};
use super::{AerialObservation, GroundObservation};
use crate::binio::{Reader, Writer};
use crate::cellgrid::{cell_from_point, GeoPoint, MAX_LEVEL};
use crate::error::Result;

const MAGIC: &[u8; 4] = b"GWDS";
const VERSION: u16 = 1;

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<W> {
    let samples = ds.samples();
    let gdim = samples.first().map_or(0, |s| s.ground.features.len());
    let adim = samples.first().map_or(0, |s| s.aerial.features.len());
    let mut w = Writer::new(out);
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    w.u8(ds.prototype_level())?;
    w.u8(0)?;
    w.u32(gdim as u32)?;
    w.u32(adim as u32)?;
    w.u64(samples.len() as u64)?;
    for s in samples {
        assert_eq!(s.ground.features.len(), gdim, "ragged ground features");
        assert_eq!(s.aerial.features.len(), adim, "ragged aerial features");
        let cell = cell_from_point(&s.ground.location, ds.prototype_level())?;
        w.u32(s.place)?;
        w.u64(cell.pack())?;
        w.f64(s.ground.location.lat())?;
        w.f64(s.ground.location.lon())?;
        w.f32(s.ground.heading as f32)?;
        w.f32(s.ground.fov as f32)?;
        w.u8(s.ground.epoch)?;
        w.f32s(s.ground.features.iter().copied())?;
        w.f64(s.aerial.tile_center.lat())?;
        w.f64(s.aerial.tile_center.lon())?;
        w.f32(s.aerial.rotation as f32)?;
        w.f32(s.aerial.offset_m as f32)?;
        w.f32s(s.aerial.features.iter().copied())?;
    }
    w.finish()
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut r = Reader::new(input);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let level = r.u8()?;
    if level > MAX_LEVEL {
        return Err(r.error(format!("prototype level {level} out of range")));
    }
    let _reserved = r.u8()?;
    let gdim = r.u32()? as usize;
    let adim = r.u32()? as usize;
    let count = r.u64()?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let place = r.u32()?;
        let cell_offset = r.offset();
        let packed = r.u64()?;
        let location = point(&mut r)?;
        let heading = f64::from(r.f32()?);
        let fov = f64::from(r.f32()?);
        let epoch = r.u8()?;
        if epoch > 1 {
            return Err(r.error(format!("epoch {epoch} is not 0 or 1")));
        }
        let gfeat = r.f32s(gdim)?;
        let tile_center = point(&mut r)?;
        let rotation = f64::from(r.f32()?);
        let offset_m = f64::from(r.f32()?);
        let afeat = r.f32s(adim)?;
        if cell_from_point(&location, level)?.pack() != packed {
            return Err(crate::error::Error::Format {
                offset: cell_offset,
                message: format!("cell id {packed:#x} does not contain the record location"),
            });
        }
        samples.push(Sample {
            place,
            ground: GroundObservation {
                features: gfeat,
                location,
                heading,
                fov,
                epoch,
            },
            aerial: AerialObservation {
                features: afeat,
                tile_center,
                rotation,
                offset_m,
            },
        });
    }
    r.expect_eof()?;
    Dataset::new(level, samples)
}

fn point<R: Read>(r: &mut Reader<R>) -> Result<GeoPoint> {
    let lat = r.f64()?;
    let lon = r.f64()?;
    GeoPoint::new(lat, lon).map_err(|e| r.error(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
