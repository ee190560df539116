//! TOML run configuration with dotted `key=value` overrides.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::controller::{ControllerConfig, FabricationPlan};
use crate::emission::EmissionConfig;
use crate::error::{Error, Result};
use crate::kinetics::KineticsConfig;
use crate::photonics::{CorrelationMode, G2Params, StreamSpec};

/// Synthetic HBT acquisition and histogram settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct G2Config {
    pub a: f64,
    pub tau1_ns: f64,
    pub tau2_ns: f64,
    pub signal_rate: f64,
    pub background_rate: f64,
    pub duration_s: f64,
    pub companion_fraction: f64,
    pub bin_width_ns: f64,
    pub max_delay_ns: f64,
    pub mode: CorrelationMode,
}

impl Default for G2Config {
    fn default() -> Self {
        Self {
            a: 0.5,
            tau1_ns: 10.0,
            tau2_ns: 100.0,
            signal_rate: 4e6,
            background_rate: 4e6 * (1.0 / 0.9 - 1.0),
            duration_s: 0.25,
            companion_fraction: 0.0,
            bin_width_ns: 1.0,
            max_delay_ns: 300.0,
            mode: CorrelationMode::Full,
        }
    }
}

impl G2Config {
    pub fn params(&self) -> G2Params {
        G2Params { a: self.a, tau1_ns: self.tau1_ns, tau2_ns: self.tau2_ns }
    }

    pub fn stream(&self) -> StreamSpec {
        StreamSpec {
            params: self.params(),
            signal_rate: self.signal_rate,
            background_rate: self.background_rate,
            duration_s: self.duration_s,
            companion_fraction: self.companion_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Seed for subcommands without a fabrication plan.
    pub seed: Option<u64>,
    pub plan: Option<FabricationPlan>,
    #[serde(default)]
    pub kinetics: KineticsConfig,
    #[serde(default)]
    pub emission: EmissionConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub g2: G2Config,
}

impl Config {
    /// Parse TOML text, apply overrides (later ones win), then validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.kinetics.validate()?;
        self.emission.validate()?;
        self.controller.validate()?;
        if let Some(p) = &self.plan {
            p.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Set `a.b.c=value` in a TOML table; the value is read as TOML when it
/// parses as such and as a bare string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key '{key}'")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SurfaceCut;

    const SAMPLE: &str = r#"
[plan]
surface = "111"
rows = 3
cols = 3
seed = 7

[kinetics]
p_form = 1e-5

[controller]
photon_budget = 2e4
"#;

    #[test]
    fn loads_sections() {
        let c = Config::from_toml(SAMPLE, &[]).unwrap();
        let p = c.plan.unwrap();
        assert_eq!((p.surface, p.rows, p.seed), (SurfaceCut::Cut111, 3, 7));
        assert_eq!(c.kinetics.p_form, 1e-5);
        assert_eq!(c.kinetics.p_dissociate, KineticsConfig::default().p_dissociate);
        assert_eq!(c.controller.photon_budget, 2e4);
        assert_eq!(c.emission, EmissionConfig::default());
    }

    #[test]
    fn overrides_win() {
        let c = Config::from_toml(
            SAMPLE,
            &[
                "kinetics.p_form=0".into(),
                "plan.surface=100".into(),
                "plan.target_class=2".into(),
                "controller.fast_mode=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.kinetics.p_form, 0.0);
        assert_eq!(c.plan.as_ref().unwrap().surface, SurfaceCut::Cut100);
        assert!(c.controller.fast_mode);
        let c = Config::from_toml("", &["g2.mode=start_stop".into(), "seed=3".into()]).unwrap();
        assert_eq!(c.g2.mode, CorrelationMode::StartStop);
        assert_eq!(c.seed, Some(3));
    }

    #[test]
    fn unknown_keys_rejected() {
        for o in ["kinetics.p_fom=1", "bogus.x=1", "controller.k=2", "plan=3"] {
            assert!(Config::from_toml(SAMPLE, &[o.into()]).is_err(), "{o}");
        }
        assert!(Config::from_toml("[kinetics]\nfoo = 1\n", &[]).is_err());
        assert!(Config::from_toml(SAMPLE, &["novalue".into()]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml(SAMPLE, &["kinetics.p_form=2".into()]).is_err());
        assert!(Config::from_toml(SAMPLE, &["controller.hwp_angles=3".into()]).is_err());
        assert!(Config::from_toml(SAMPLE, &["plan.target_class=3".into(), "plan.surface=100".into()]).is_err());
    }

    #[test]
    fn round_trips() {
        let c = Config::from_toml(SAMPLE, &[]).unwrap();
        assert_eq!(Config::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn g2_defaults_give_rho_point_nine() {
        let s = G2Config::default().stream();
        assert!((s.signal_fraction() - 0.9).abs() < 1e-12);
    }
}
