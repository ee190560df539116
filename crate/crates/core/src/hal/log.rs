//! JSONL event logs, the recording bench wrapper, and replay.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    apply_command, Bench, Command, HwpRotator, MockBench, Outcome, PhotonCounter, PulseGate, Scanner, SiteIndex, Stage,
};
use crate::emission::EmissionConfig;
use crate::error::{Error, Result};
use crate::geometry::SurfaceCut;
use crate::kinetics::{KineticsConfig, SiteState};
use crate::photonics::{ConfocalImage, Region};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub t: f64,
    pub event: String,
    pub site: Option<SiteIndex>,
    pub data: Value,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// First line of every log: enough to rebuild the bench that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub schema_version: u32,
    pub seed: u64,
    pub surface: SurfaceCut,
    pub kinetics: KineticsConfig,
    pub emission: EmissionConfig,
    #[serde(default)]
    pub presets: Vec<([f64; 3], SiteState)>,
}

impl LogHeader {
    pub fn of(bench: &MockBench) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: bench.seed,
            surface: bench.surface,
            kinetics: bench.kinetics.clone(),
            emission: bench.emission.clone(),
            presets: bench.presets().to_vec(),
        }
    }

    pub fn record(&self) -> EventRecord {
        EventRecord {
            t: 0.0,
            event: "header".into(),
            site: None,
            data: serde_json::to_value(self).expect("header serializes"),
        }
    }

    pub fn build_bench(&self) -> Result<MockBench> {
        let mut b = MockBench::new(self.surface, self.kinetics.clone(), self.emission.clone(), self.seed)?;
        for (p, s) in &self.presets {
            b.preset_site(*p, *s);
        }
        Ok(b)
    }
}

pub fn to_jsonl(records: &[EventRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Parse a log into its header and body records. An empty log has neither.
pub fn parse_jsonl(text: &str) -> Result<(Option<LogHeader>, Vec<EventRecord>)> {
    let mut header = None;
    let mut records = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |msg: String| Error::Schema { line: i + 1, msg };
        let rec: EventRecord = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        if rec.t < last_t {
            return Err(schema(format!("time {} precedes {}", rec.t, last_t)));
        }
        last_t = rec.t;
        if header.is_none() {
            if rec.event != "header" {
                return Err(schema("first record must be the header".into()));
            }
            let h: LogHeader = serde_json::from_value(rec.data).map_err(|e| schema(e.to_string()))?;
            if h.schema_version != SCHEMA_VERSION {
                return Err(schema(format!("schema version {} unsupported", h.schema_version)));
            }
            header = Some(h);
        } else {
            records.push(rec);
        }
    }
    Ok((header, records))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    /// 1-based line in the log (the header is line 1).
    pub line: usize,
    pub logged: String,
    pub replayed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub records: usize,
    pub commands: usize,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Re-execute every command of a log on a fresh bench and compare observables.
pub fn replay(text: &str) -> Result<ReplayReport> {
    let (header, records) = parse_jsonl(text)?;
    let Some(header) = header else {
        return Ok(ReplayReport { records: 0, commands: 0, divergence: None });
    };
    let mut bench = header.build_bench()?;
    let mut commands = 0;
    for (i, rec) in records.iter().enumerate() {
        let line = i + 2;
        let cmd = Command::from_record(rec).map_err(|e| match e {
            Error::Schema { msg, .. } => Error::Schema { line, msg },
            other => other,
        })?;
        let Some(cmd) = cmd else { continue };
        commands += 1;
        let replayed = match apply_command(&mut bench, &cmd) {
            Ok(outcome) => cmd.record(bench.now(), rec.site, &outcome).to_line(),
            Err(e) => format!("error: {e}"),
        };
        let logged = rec.to_line();
        if logged != replayed {
            return Ok(ReplayReport {
                records: records.len(),
                commands,
                divergence: Some(Divergence { line, logged, replayed }),
            });
        }
    }
    Ok(ReplayReport { records: records.len(), commands, divergence: None })
}

/// Bench wrapper that logs every command and controller event.
#[derive(Debug, Clone)]
pub struct Recorder {
    inner: MockBench,
    records: Vec<EventRecord>,
    site: Option<SiteIndex>,
}

impl Recorder {
    pub fn new(inner: MockBench) -> Self {
        let header = LogHeader::of(&inner).record();
        Self { inner, records: vec![header], site: None }
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn inner(&self) -> &MockBench {
        &self.inner
    }

    pub fn into_parts(self) -> (MockBench, Vec<EventRecord>) {
        (self.inner, self.records)
    }

    pub fn to_jsonl(&self) -> String {
        to_jsonl(&self.records)
    }

    fn exec(&mut self, cmd: Command) -> Result<Outcome> {
        let outcome = apply_command(&mut self.inner, &cmd)?;
        self.records.push(cmd.record(self.inner.now(), self.site, &outcome));
        Ok(outcome)
    }
}

impl Stage for Recorder {
    fn move_to(&mut self, x: f64, y: f64, z: f64) -> Result<[f64; 3]> {
        self.exec(Command::Move { x, y, z })?;
        Ok(self.inner.position())
    }

    fn position(&self) -> [f64; 3] {
        self.inner.position()
    }
}

impl HwpRotator for Recorder {
    fn set_angle(&mut self, rad: f64) -> Result<()> {
        self.exec(Command::Hwp { angle: rad }).map(drop)
    }

    fn angle(&self) -> f64 {
        self.inner.angle()
    }
}

impl PulseGate for Recorder {
    fn seed_pulse(&mut self) -> Result<()> {
        self.exec(Command::Seed).map(drop)
    }

    fn train_on(&mut self) -> Result<()> {
        self.exec(Command::Train { on: true }).map(drop)
    }

    fn train_off(&mut self) -> Result<()> {
        self.exec(Command::Train { on: false }).map(drop)
    }

    fn train_active(&self) -> bool {
        self.inner.train_active()
    }
}

impl PhotonCounter for Recorder {
    fn acquire(&mut self, dwell: f64) -> Result<u64> {
        match self.exec(Command::Acq { dwell })? {
            Outcome::Counts { counts, .. } => Ok(counts),
            other => Err(Error::Bench(format!("unexpected acquisition outcome {other:?}"))),
        }
    }
}

impl Scanner for Recorder {
    fn scan(&mut self, region: Region, pitch: f64) -> Result<ConfocalImage> {
        let Region { x0, y0, x1, y1 } = region;
        match self.exec(Command::Scan { x0, y0, x1, y1, pitch })? {
            Outcome::Image(img) => Ok(img),
            other => Err(Error::Bench(format!("unexpected scan outcome {other:?}"))),
        }
    }
}

impl Bench for Recorder {
    fn now(&self) -> f64 {
        self.inner.now()
    }

    fn enter_site(&mut self, site: Option<SiteIndex>) {
        self.site = site;
    }

    fn annotate(&mut self, event: &str, data: &Value) {
        self.records.push(EventRecord {
            t: self.inner.now(),
            event: event.to_string(),
            site: self.site,
            data: data.clone(),
        });
    }
}
