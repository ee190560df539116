//! Instrument boundary: device traits, the simulated bench, the line-oriented
//! command language and JSONL event logs.

mod log;
mod mock;
mod script;

pub use log::{
    parse_jsonl, replay, to_jsonl, Divergence, EventRecord, LogHeader, Recorder, ReplayReport, SCHEMA_VERSION,
};
pub use mock::{bind_mock, site_key, MockBench, ACCURACY_SIGMA_UM, REPEATABILITY_SIGMA_UM, SITE_QUANTUM_UM};
pub use script::{apply_command, execute_script, parse_command, parse_script, Command, Outcome};

use crate::error::Result;
use crate::photonics::{ConfocalImage, Region};

/// Site index `[i, j]` inside a campaign grid.
pub type SiteIndex = [u32; 2];

pub trait Stage {
    fn move_to(&mut self, x: f64, y: f64, z: f64) -> Result<[f64; 3]>;
    fn position(&self) -> [f64; 3];
}

pub trait HwpRotator {
    fn set_angle(&mut self, rad: f64) -> Result<()>;
    fn angle(&self) -> f64;
}

pub trait PulseGate {
    fn seed_pulse(&mut self) -> Result<()>;
    fn train_on(&mut self) -> Result<()>;
    fn train_off(&mut self) -> Result<()>;
    fn train_active(&self) -> bool;
}

pub trait PhotonCounter {
    fn acquire(&mut self, dwell: f64) -> Result<u64>;
}

pub trait Scanner {
    fn scan(&mut self, region: Region, pitch: f64) -> Result<ConfocalImage>;
}

/// Everything a controller needs, plus a clock and an event hook.
pub trait Bench: Stage + HwpRotator + PulseGate + PhotonCounter + Scanner {
    /// Instrument time in seconds.
    fn now(&self) -> f64;

    /// Tag subsequent commands with a campaign site.
    fn enter_site(&mut self, _site: Option<SiteIndex>) {}

    /// Observe a controller-level event. Benches that log override this.
    fn annotate(&mut self, _event: &str, _data: &serde_json::Value) {}
}
