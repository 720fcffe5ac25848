//! Command-line front end for the cellcode library.

pub mod commands;
pub mod config;
pub mod error;
