//! Digital twin of femtosecond-laser NV-center writing with closed-loop
//! orientation selection in diamond.
//!
//! The crate is split along the physical pipeline:
//!
//! * [`geometry`]: NV axes, surface cuts, distinguishable orientation classes.
//! * [`emission`]: polarization patterns, pattern fits, classification.
//! * [`kinetics`]: per-site stochastic state under seed and diffusion pulses.
//! * [`photonics`]: photon counting, antibunching synthesis and g² fits,
//!   confocal images.
//! * [`hal`]: instrument traits, the simulated bench, scripts and JSONL logs.
//! * [`controller`]: the write / classify / re-anneal loop and array campaigns.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod emission;
pub mod error;
pub mod geometry;
pub mod hal;
pub mod kinetics;
pub mod photonics;
pub mod rng;

pub use error::{Error, Result};
pub use nalgebra;
