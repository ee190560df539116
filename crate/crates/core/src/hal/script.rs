//! One-command-per-line bench language.
//!
//! ```text
//! MOVE x y z            # µm
//! HWP angle             # waveplate angle, rad
//! SEED
//! TRAIN ON | TRAIN OFF
//! ACQ dwell             # s
//! SCAN x0 y0 x1 y1 pitch
//! ```

use std::fmt;

use serde_json::{json, Value};

use super::{Bench, EventRecord, SiteIndex};
use crate::error::{Error, Result};
use crate::geometry::wrap_pi;
use crate::photonics::{ConfocalImage, Region};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command {
    Move { x: f64, y: f64, z: f64 },
    Hwp { angle: f64 },
    Seed,
    Train { on: bool },
    Acq { dwell: f64 },
    Scan { x0: f64, y0: f64, x1: f64, y1: f64, pitch: f64 },
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Command::Move { x, y, z } => write!(f, "MOVE {x} {y} {z}"),
            Command::Hwp { angle } => write!(f, "HWP {angle}"),
            Command::Seed => write!(f, "SEED"),
            Command::Train { on } => write!(f, "TRAIN {}", if on { "ON" } else { "OFF" }),
            Command::Acq { dwell } => write!(f, "ACQ {dwell}"),
            Command::Scan { x0, y0, x1, y1, pitch } => write!(f, "SCAN {x0} {y0} {x1} {y1} {pitch}"),
        }
    }
}

impl Command {
    pub fn event_name(&self) -> &'static str {
        match self {
            Command::Move { .. } => "cmd.move",
            Command::Hwp { .. } => "cmd.hwp",
            Command::Seed => "cmd.seed",
            Command::Train { .. } => "cmd.train",
            Command::Acq { .. } => "cmd.acq",
            Command::Scan { .. } => "cmd.scan",
        }
    }

    /// Log record for this command and what the bench returned.
    pub fn record(&self, t: f64, site: Option<SiteIndex>, outcome: &Outcome) -> EventRecord {
        let data = match (*self, outcome) {
            (Command::Move { x, y, z }, Outcome::Position(p)) => json!({ "x": x, "y": y, "z": z, "position": p }),
            (Command::Hwp { angle }, _) => json!({ "angle": angle }),
            (Command::Seed, _) => json!({}),
            (Command::Train { on }, _) => json!({ "on": on }),
            (Command::Acq { dwell }, Outcome::Counts { theta, counts }) => {
                json!({ "dwell": dwell, "theta": theta, "counts": counts })
            }
            (Command::Scan { x0, y0, x1, y1, pitch }, Outcome::Image(img)) => json!({
                "x0": x0, "y0": y0, "x1": x1, "y1": y1, "pitch": pitch,
                "width": img.width, "height": img.height, "total": img.total(),
            }),
            (cmd, _) => json!({ "command": cmd.to_string() }),
        };
        EventRecord { t, event: self.event_name().to_string(), site, data }
    }

    /// Rebuild the command behind a `cmd.*` record.
    pub fn from_record(rec: &EventRecord) -> Result<Option<Command>> {
        let num = |k: &str| -> Result<f64> {
            rec.data
                .get(k)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Schema { line: 0, msg: format!("{} record lacks numeric '{k}'", rec.event) })
        };
        Ok(Some(match rec.event.as_str() {
            "cmd.move" => Command::Move { x: num("x")?, y: num("y")?, z: num("z")? },
            "cmd.hwp" => Command::Hwp { angle: num("angle")? },
            "cmd.seed" => Command::Seed,
            "cmd.train" => Command::Train {
                on: rec
                    .data
                    .get("on")
                    .and_then(Value::as_bool)
                    .ok_or_else(|| Error::Schema { line: 0, msg: "cmd.train record lacks boolean 'on'".into() })?,
            },
            "cmd.acq" => Command::Acq { dwell: num("dwell")? },
            "cmd.scan" => {
                Command::Scan { x0: num("x0")?, y0: num("y0")?, x1: num("x1")?, y1: num("y1")?, pitch: num("pitch")? }
            }
            other if other.starts_with("cmd.") => {
                return Err(Error::Schema { line: 0, msg: format!("unknown command record '{other}'") })
            }
            _ => return Ok(None),
        }))
    }
}

/// Observable result of a command.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    None,
    Position([f64; 3]),
    Counts { theta: f64, counts: u64 },
    Image(ConfocalImage),
}

/// Parse one line; blank lines and `#` comments yield `None`.
pub fn parse_command(line: &str) -> std::result::Result<Option<Command>, String> {
    let body = line.split('#').next().unwrap_or("").trim();
    if body.is_empty() {
        return Ok(None);
    }
    let mut words = body.split_whitespace();
    let verb = words.next().expect("non-empty line");
    let args: Vec<&str> = words.collect();
    let nums = |n: usize| -> std::result::Result<Vec<f64>, String> {
        if args.len() != n {
            return Err(format!("{verb} takes {n} argument(s), got {}", args.len()));
        }
        args.iter()
            .map(|a| match a.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(format!("'{a}' is not a finite number")),
            })
            .collect()
    };
    let cmd = match verb {
        "MOVE" => {
            let v = nums(3)?;
            Command::Move { x: v[0], y: v[1], z: v[2] }
        }
        "HWP" => Command::Hwp { angle: nums(1)?[0] },
        "SEED" => {
            nums(0)?;
            Command::Seed
        }
        "TRAIN" => match args.as_slice() {
            ["ON"] => Command::Train { on: true },
            ["OFF"] => Command::Train { on: false },
            _ => return Err("TRAIN takes ON or OFF".into()),
        },
        "ACQ" => Command::Acq { dwell: nums(1)?[0] },
        "SCAN" => {
            let v = nums(5)?;
            Command::Scan { x0: v[0], y0: v[1], x1: v[2], y1: v[3], pitch: v[4] }
        }
        other => return Err(format!("unknown command '{other}'")),
    };
    Ok(Some(cmd))
}

/// Parse a whole script, returning (1-based line, command) pairs.
pub fn parse_script(text: &str) -> Result<Vec<(usize, Command)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        match parse_command(line) {
            Ok(Some(c)) => out.push((i + 1, c)),
            Ok(None) => {}
            Err(msg) => return Err(Error::Parse { line: i + 1, msg }),
        }
    }
    Ok(out)
}

pub fn apply_command<B: Bench + ?Sized>(bench: &mut B, cmd: &Command) -> Result<Outcome> {
    Ok(match *cmd {
        Command::Move { x, y, z } => Outcome::Position(bench.move_to(x, y, z)?),
        Command::Hwp { angle } => {
            bench.set_angle(angle)?;
            Outcome::None
        }
        Command::Seed => {
            bench.seed_pulse()?;
            Outcome::None
        }
        Command::Train { on: true } => {
            bench.train_on()?;
            Outcome::None
        }
        Command::Train { on: false } => {
            bench.train_off()?;
            Outcome::None
        }
        Command::Acq { dwell } => {
            let theta = wrap_pi(2.0 * bench.angle());
            Outcome::Counts { theta, counts: bench.acquire(dwell)? }
        }
        Command::Scan { x0, y0, x1, y1, pitch } => Outcome::Image(bench.scan(Region::new(x0, y0, x1, y1), pitch)?),
    })
}

/// Parse then run a script; nothing executes if any line fails to parse.
pub fn execute_script<B: Bench + ?Sized>(bench: &mut B, text: &str) -> Result<Vec<EventRecord>> {
    let cmds = parse_script(text)?;
    let mut out = Vec::with_capacity(cmds.len());
    for (line, cmd) in cmds {
        let outcome = apply_command(bench, &cmd).map_err(|e| {
            let detail = match e {
                Error::Bench(m) => m,
                other => other.to_string(),
            };
            Error::Bench(format!("line {line} ({cmd}): {detail}"))
        })?;
        out.push(cmd.record(bench.now(), None, &outcome));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emission::EmissionConfig;
    use crate::geometry::SurfaceCut;
    use crate::hal::{MockBench, Stage};
    use crate::kinetics::KineticsConfig;

    fn bench() -> MockBench {
        MockBench::new(SurfaceCut::Cut111, KineticsConfig::default(), EmissionConfig::default(), 3).unwrap()
    }

    #[test]
    fn parses_grammar() {
        let cmds = parse_script(
            "# header\nMOVE 0 0 20\n\nHWP 0.3927  # comment\nSEED\nTRAIN ON\nACQ 0.01\nTRAIN OFF\nSCAN -1 -1 1 1 0.5\n",
        )
        .unwrap();
        let lines: Vec<usize> = cmds.iter().map(|c| c.0).collect();
        assert_eq!(lines, vec![2, 4, 5, 6, 7, 8, 9]);
        assert_eq!(cmds[0].1, Command::Move { x: 0.0, y: 0.0, z: 20.0 });
        assert_eq!(cmds[3].1, Command::Train { on: true });
    }

    #[test]
    fn parse_errors_carry_line() {
        for (text, line) in [
            ("MOVE 0 0 0\nMOVE x\n", 2),
            ("move 1 2 3", 1),
            ("TRAIN", 1),
            ("ACQ nan", 1),
            ("SEED 1", 1),
            ("\n\nFOO", 3),
        ] {
            match parse_script(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn malformed_line_changes_nothing() {
        let mut b = bench();
        assert!(execute_script(&mut b, "MOVE 5 5 5\nMOVE x\n").is_err());
        assert_eq!(b.commanded_position(), [0.0; 3]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn move_then_acquire() {
        let mut b = bench();
        let recs = execute_script(&mut b, "MOVE 0 0 20\nHWP 0.3927\nACQ 0.01\n").unwrap();
        assert_eq!(recs.len(), 3);
        let p = b.position();
        assert!((p[2] - 20.0).abs() < 3.0);
        assert_eq!(recs[2].event, "cmd.acq");
        assert!((recs[2].data["theta"].as_f64().unwrap() - 0.7854).abs() < 1e-12);
        assert_eq!(recs[0].t, 0.0);
        assert!((recs[2].t - 0.01).abs() < 1e-12);
    }

    #[test]
    fn command_errors_have_context() {
        let mut b = bench();
        match execute_script(&mut b, "ACQ 0.01\nACQ -1\n") {
            Err(Error::Bench(msg)) => assert!(msg.starts_with("line 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn records_rebuild_commands() {
        let mut b = bench();
        let text = "MOVE 1.5 -2 20\nHWP 0.1\nSEED\nTRAIN ON\nACQ 0.02\nTRAIN OFF\nSCAN 0 0 2 2 0.5\n";
        let recs = execute_script(&mut b, text).unwrap();
        let back: Vec<Command> = recs.iter().map(|r| Command::from_record(r).unwrap().unwrap()).collect();
        let want: Vec<Command> = parse_script(text).unwrap().into_iter().map(|c| c.1).collect();
        assert_eq!(back, want);
    }
}
