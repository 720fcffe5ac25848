//! Geolocalization by retrieval against hybrid cell codes.
//!
//! A ground-level query is embedded and matched against a database of
//! per-cell codes, each the sum of a learned prototype for a coarse cell
//! (scaled by a calibration factor) and the embedding of an aerial tile of
//! a finer child cell. The crate covers the full pipeline on a synthetic
//! world: cell geometry, data generation, encoders, losses, training with
//! sharded prototypes, database construction and evaluation.

// Guards of the form `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cellgrid;
pub mod codedb;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod pca;
pub mod seed;
pub mod train;
pub mod vecmath;
pub mod world;

mod binio;

pub use cellgrid::{CellId, GeoPoint, LevelConfig};
pub use error::{Error, Result};
