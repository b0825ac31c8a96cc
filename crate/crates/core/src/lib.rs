#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dbh;
pub mod dtm;
pub mod error;
pub mod geom;
pub mod icp;
pub mod io;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
