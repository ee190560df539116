//! Closed-loop fabrication: seed, anneal, measure, classify, re-anneal.

mod detect;
mod run;

pub use detect::{detect_formation, RunDetector};
pub use run::{fast_mode_bias, measure_pattern, reorient_until, run_campaign, scan_array, Measurement};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::emission::PatternFit;
use crate::error::{Error, Result};
use crate::geometry::{class_by_id, SurfaceCut};
use crate::hal::SiteIndex;

fn default_pitch() -> f64 {
    10.0
}
fn default_depth() -> f64 {
    20.0
}
fn default_timeout() -> f64 {
    120.0
}
fn default_reseeds() -> u32 {
    3
}
fn default_target() -> u8 {
    1
}
fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricationPlan {
    pub surface: SurfaceCut,
    #[serde(default = "one")]
    pub rows: u32,
    #[serde(default = "one")]
    pub cols: u32,
    #[serde(default = "default_pitch")]
    pub pitch_um: f64,
    #[serde(default = "default_depth")]
    pub depth_um: f64,
    /// Orientation-class id to write.
    #[serde(default = "default_target")]
    pub target_class: u8,
    /// Train time since the last seed before reseeding, s.
    #[serde(default = "default_timeout")]
    pub anneal_timeout_s: f64,
    #[serde(default = "default_reseeds")]
    pub max_reseeds: u32,
    pub seed: u64,
}

impl FabricationPlan {
    pub fn new(surface: SurfaceCut, rows: u32, cols: u32, target_class: u8, seed: u64) -> Self {
        Self {
            surface,
            rows,
            cols,
            pitch_um: default_pitch(),
            depth_um: default_depth(),
            target_class,
            anneal_timeout_s: default_timeout(),
            max_reseeds: default_reseeds(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 1 || self.cols < 1 {
            return Err(Error::InvalidParameter("plan needs at least one row and one column".into()));
        }
        if !(self.pitch_um > 0.0) {
            return Err(Error::InvalidParameter(format!("pitch {} must be positive", self.pitch_um)));
        }
        if !self.depth_um.is_finite() {
            return Err(Error::InvalidParameter("depth must be finite".into()));
        }
        if !(self.anneal_timeout_s > 0.0) {
            return Err(Error::InvalidParameter("anneal timeout must be positive".into()));
        }
        if class_by_id(self.surface, self.target_class).is_none() {
            return Err(Error::InvalidParameter(format!(
                "target class {} does not exist on the {} surface",
                self.target_class, self.surface
            )));
        }
        Ok(())
    }

    pub fn position(&self, site: SiteIndex) -> [f64; 3] {
        [site[0] as f64 * self.pitch_um, site[1] as f64 * self.pitch_um, self.depth_um]
    }

    /// Sites in row-major visiting order.
    pub fn sites(&self) -> Vec<SiteIndex> {
        (0..self.rows).flat_map(|i| (0..self.cols).map(move |j| [i, j])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub detection_dwell_ms: f64,
    /// Threshold in background standard deviations.
    pub k_sigma: f64,
    /// Consecutive bins required by every level detector.
    pub m_bins: u32,
    /// Waveplate angles per pattern, uniform over [0, π/2).
    pub hwp_angles: u32,
    /// Expected counts per pattern angle.
    pub photon_budget: f64,
    /// Bias the analyzer to the pattern minimum while annealing ((100) only).
    pub fast_mode: bool,
    /// Longest anneal watch before re-measuring, s.
    pub anneal_slice_s: f64,
    /// Biased baseline recorded before the train starts in fast mode, s.
    pub fast_baseline_s: f64,
    pub background_probe_s: f64,
    /// Lateral offset of the background reference spot, µm.
    pub background_offset_um: f64,
    /// Dwell of each of the four rate-probe angles, s.
    pub probe_dwell_s: f64,
    pub max_pattern_dwell_s: f64,
    /// Classification margin below which the pattern is re-measured.
    pub min_margin: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            detection_dwell_ms: 10.0,
            k_sigma: 5.0,
            m_bins: 3,
            hwp_angles: 19,
            photon_budget: 1e4,
            fast_mode: false,
            anneal_slice_s: 10.0,
            fast_baseline_s: 1.8,
            background_probe_s: 0.5,
            background_offset_um: 5.0,
            probe_dwell_s: 0.02,
            max_pattern_dwell_s: 5.0,
            min_margin: 2.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.k_sigma > 0.0) {
            return bad(format!("k_sigma {} must be positive", self.k_sigma));
        }
        if self.m_bins < 1 {
            return bad("m_bins must be at least 1".into());
        }
        if self.hwp_angles < 5 {
            return bad(format!("{} waveplate angles, need at least 5", self.hwp_angles));
        }
        for (name, v) in [
            ("detection_dwell_ms", self.detection_dwell_ms),
            ("photon_budget", self.photon_budget),
            ("anneal_slice_s", self.anneal_slice_s),
            ("background_probe_s", self.background_probe_s),
            ("probe_dwell_s", self.probe_dwell_s),
            ("max_pattern_dwell_s", self.max_pattern_dwell_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.fast_baseline_s >= 0.0) || !(self.min_margin >= 0.0) || !self.background_offset_um.is_finite() {
            return bad("fast_baseline_s, min_margin must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn dwell(&self) -> f64 {
        self.detection_dwell_ms * 1e-3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SiteEvent {
    BackgroundCalibrated {
        rate: f64,
    },
    Seed,
    TrainOn,
    TrainOff,
    FormationDetected,
    PatternMeasured {
        fit: PatternFit,
        dwell: f64,
        reliable: bool,
    },
    Classified {
        class: u8,
        margin: f64,
        distance: f64,
        tie: bool,
    },
    /// Analyzer parked for an anneal watch; `level` is counts/s at that angle.
    Biased {
        hwp_angle: f64,
        level: f64,
    },
    DipDetected,
    RecoveryDetected {
        level: f64,
    },
    Reseed {
        count: u32,
    },
    Success {
        final_class: u8,
        cycles: u32,
    },
    Failure {
        reason: String,
    },
}

impl SiteEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SiteEvent::BackgroundCalibrated { .. } => "background_calibrated",
            SiteEvent::Seed => "seed",
            SiteEvent::TrainOn => "train_on",
            SiteEvent::TrainOff => "train_off",
            SiteEvent::FormationDetected => "formation_detected",
            SiteEvent::PatternMeasured { .. } => "pattern_measured",
            SiteEvent::Classified { .. } => "classified",
            SiteEvent::Biased { .. } => "biased",
            SiteEvent::DipDetected => "dip_detected",
            SiteEvent::RecoveryDetected { .. } => "recovery_detected",
            SiteEvent::Reseed { .. } => "reseed",
            SiteEvent::Success { .. } => "success",
            SiteEvent::Failure { .. } => "failure",
        }
    }

    /// Payload without the kind tag.
    pub fn payload(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("events serialize");
        if let Some(map) = v.as_object_mut() {
            map.remove("kind");
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t: f64,
    pub event: SiteEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Incomplete,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLog {
    pub site: SiteIndex,
    pub events: Vec<TimedEvent>,
}

impl SiteLog {
    pub fn new(site: SiteIndex) -> Self {
        Self { site, events: Vec::new() }
    }

    pub fn outcome(&self) -> Outcome {
        match self.events.last().map(|e| &e.event) {
            Some(SiteEvent::Success { .. }) => Outcome::Success,
            Some(SiteEvent::Failure { .. }) => Outcome::Failure,
            _ => Outcome::Incomplete,
        }
    }

    pub fn classifications(&self) -> Vec<u8> {
        self.events
            .iter()
            .filter_map(|e| match e.event {
                SiteEvent::Classified { class, .. } => Some(class),
                _ => None,
            })
            .collect()
    }

    pub fn initial_class(&self) -> Option<u8> {
        self.classifications().first().copied()
    }

    pub fn final_class(&self) -> Option<u8> {
        self.classifications().last().copied()
    }

    pub fn cycles(&self) -> Option<u32> {
        self.events.iter().rev().find_map(|e| match e.event {
            SiteEvent::Success { cycles, .. } => Some(cycles),
            _ => None,
        })
    }

    fn count(&self, f: impl Fn(&SiteEvent) -> bool) -> usize {
        self.events.iter().filter(|e| f(&e.event)).count()
    }

    pub fn seeds(&self) -> usize {
        self.count(|e| matches!(e, SiteEvent::Seed))
    }

    pub fn reseeds(&self) -> usize {
        self.count(|e| matches!(e, SiteEvent::Reseed { .. }))
    }

    /// Structural checks every finished log must satisfy.
    pub fn check(&self, target: u8) -> std::result::Result<(), String> {
        if self.events.windows(2).any(|w| w[1].t < w[0].t) {
            return Err("timestamps decrease".into());
        }
        let terminals = self.count(|e| matches!(e, SiteEvent::Success { .. } | SiteEvent::Failure { .. }));
        if terminals != 1 || self.outcome() == Outcome::Incomplete {
            return Err(format!("{terminals} terminal events"));
        }
        let mut train = false;
        for e in &self.events {
            match e.event {
                SiteEvent::TrainOn => train = true,
                SiteEvent::TrainOff => train = false,
                SiteEvent::PatternMeasured { .. } if train => {
                    return Err(format!("pattern measured with train on at t={}", e.t))
                }
                _ => {}
            }
        }
        if self.reseeds() != self.seeds().saturating_sub(1) {
            return Err(format!("{} reseeds but {} seeds", self.reseeds(), self.seeds()));
        }
        if let Some(SiteEvent::Success { final_class, cycles }) = self.events.last().map(|e| &e.event) {
            let classes = self.classifications();
            if classes.last() != Some(&target) || *final_class != target {
                return Err("success without a final target classification".into());
            }
            let misses = classes.iter().filter(|&&c| c != target).count() as u32;
            if *cycles != misses + 1 {
                return Err(format!("cycles {cycles} but {misses} non-target classifications"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub sites: usize,
    pub successes: usize,
    pub failures: usize,
    /// cycles → number of successful sites.
    pub cycle_histogram: BTreeMap<u32, usize>,
    /// first classified class → number of sites.
    pub initial_classes: BTreeMap<u8, usize>,
    pub reseeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub plan: FabricationPlan,
    pub sites: Vec<SiteLog>,
    pub summary: CampaignSummary,
}

impl CampaignReport {
    pub fn from_logs(plan: FabricationPlan, sites: Vec<SiteLog>) -> Self {
        let mut summary = CampaignSummary {
            sites: sites.len(),
            successes: 0,
            failures: 0,
            cycle_histogram: BTreeMap::new(),
            initial_classes: BTreeMap::new(),
            reseeds: 0,
        };
        for log in &sites {
            match log.outcome() {
                Outcome::Success => summary.successes += 1,
                Outcome::Failure => summary.failures += 1,
                Outcome::Incomplete => {}
            }
            if let Some(c) = log.cycles() {
                *summary.cycle_histogram.entry(c).or_default() += 1;
            }
            if let Some(c) = log.initial_class() {
                *summary.initial_classes.entry(c).or_default() += 1;
            }
            summary.reseeds += log.reseeds();
        }
        Self { plan, sites, summary }
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("site_i,site_j,outcome,cycles,reseeds,final_class\n");
        for log in &self.sites {
            let opt = |v: Option<String>| v.unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                log.site[0],
                log.site[1],
                log.outcome().label(),
                opt(log.cycles().map(|c| c.to_string())),
                log.reseeds(),
                opt(log.final_class().map(|c| c.to_string())),
            ));
        }
        s
    }
}
