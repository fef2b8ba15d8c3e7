//! Moment dynamics, characteristic functions, and parameter recovery for
//! linear-quadratic mean field games driven by jump-diffusions.

pub mod charfun;
pub mod cli;
pub mod error;
pub mod hjb;
pub mod io;
pub mod mc;
pub mod model;
pub mod moments;
pub mod numerics;
pub mod recover;
pub mod registry;

pub use error::{Error, Result};
