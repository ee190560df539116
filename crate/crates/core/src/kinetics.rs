//! Stochastic state of one laser-written site.
//!
//! A seed pulse deposits a quantum of vacancies. Under the diffusion train a
//! vacancy-rich site forms an NV with per-pulse probability `p_form`, using one
//! vacancy; an existing NV enters a dark intermediate with probability
//! `p_dissociate` and, after a geometric dwell, reforms along a uniformly drawn
//! axis (or its prior axis when no vacancy is left to catalyse the change).
//!
//! [`step_pulse`] is the literal per-pulse rule. [`advance`] produces the same
//! process event by event, drawing geometric waiting times instead of one
//! Bernoulli per pulse; it is what the bench and the train simulator use.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::emission::{collection_efficiency, normalized_value, EmissionConfig};
use crate::error::{Error, Result};
use crate::geometry::{lab_vector, NvAxis, SurfaceCut};
use crate::photonics::{sample_counts, CountTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SiteState {
    Pristine,
    VacancyRich { vacancies: u32 },
    NvPresent { axis: NvAxis, vacancies: u32 },
    DarkIntermediate { prior_axis: NvAxis, vacancies: u32, remaining_dwell: u64 },
    Depleted,
}

impl SiteState {
    pub fn vacancies(&self) -> u32 {
        match *self {
            SiteState::Pristine | SiteState::Depleted => 0,
            SiteState::VacancyRich { vacancies }
            | SiteState::NvPresent { vacancies, .. }
            | SiteState::DarkIntermediate { vacancies, .. } => vacancies,
        }
    }

    /// Axis of a fluorescing NV.
    pub fn nv_axis(&self) -> Option<NvAxis> {
        match *self {
            SiteState::NvPresent { axis, .. } => Some(axis),
            _ => None,
        }
    }
}

/// Laser pulse parameters. Only the repetition rate enters the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseParams {
    pub seed_energy_nj: f64,
    pub diffusion_energy_nj: f64,
    pub repetition_rate_khz: f64,
    pub seed_duration_fs: f64,
    pub wavelength_nm: f64,
}

impl Default for PulseParams {
    fn default() -> Self {
        Self {
            seed_energy_nj: 1.47,
            diffusion_energy_nj: 1.19,
            repetition_rate_khz: 200.0,
            seed_duration_fs: 270.0,
            wavelength_nm: 515.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsConfig {
    /// Per-pulse NV formation probability while vacancy-rich.
    pub p_form: f64,
    /// Per-pulse probability that a present NV turns dark.
    pub p_dissociate: f64,
    /// Mean of the geometric dark dwell, in pulses.
    pub dark_dwell_mean_pulses: f64,
    pub vacancies_per_seed: u32,
    /// NV count rate before the analyzer, counts/s.
    pub brightness: f64,
    /// Background count rate, counts/s.
    pub background: f64,
    pub pulses: PulseParams,
}

impl Default for KineticsConfig {
    fn default() -> Self {
        Self {
            p_form: 5e-6,
            p_dissociate: 2e-6,
            dark_dwell_mean_pulses: 2e5,
            vacancies_per_seed: 20,
            brightness: 5e4,
            background: 5e3,
            pulses: PulseParams::default(),
        }
    }
}

impl KineticsConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero rates are accepted so formation or reorientation can be switched off.
        for (name, p) in [("p_form", self.p_form), ("p_dissociate", self.p_dissociate)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} = {p} outside [0, 1)")));
            }
        }
        if !(self.dark_dwell_mean_pulses >= 1.0) {
            return Err(Error::InvalidParameter("dark dwell mean must be ≥ 1 pulse".into()));
        }
        if self.vacancies_per_seed < 1 {
            return Err(Error::InvalidParameter("vacancies_per_seed must be ≥ 1".into()));
        }
        let p = &self.pulses;
        if !(p.seed_energy_nj > 0.0 && p.diffusion_energy_nj > 0.0) {
            return Err(Error::InvalidParameter("pulse energies must be positive".into()));
        }
        if !(p.repetition_rate_khz > 0.0) {
            return Err(Error::InvalidParameter("repetition rate must be positive".into()));
        }
        if !(self.brightness >= 0.0 && self.background >= 0.0) {
            return Err(Error::InvalidParameter("rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rate_hz(&self) -> f64 {
        self.pulses.repetition_rate_khz * 1e3
    }
}

pub fn apply_seed(s: SiteState, cfg: &KineticsConfig) -> SiteState {
    let add = cfg.vacancies_per_seed;
    match s {
        SiteState::Pristine | SiteState::Depleted => SiteState::VacancyRich { vacancies: add },
        SiteState::VacancyRich { vacancies } => SiteState::VacancyRich { vacancies: vacancies + add },
        SiteState::NvPresent { axis, vacancies } => SiteState::NvPresent { axis, vacancies: vacancies + add },
        SiteState::DarkIntermediate { prior_axis, vacancies, remaining_dwell } => {
            SiteState::DarkIntermediate { prior_axis, vacancies: vacancies + add, remaining_dwell }
        }
    }
}

fn uniform_axis<R: Rng + ?Sized>(rng: &mut R) -> NvAxis {
    NvAxis::ALL[rng.random_range(0..4)]
}

/// Trials up to and including the first success; `None` when `p == 0`.
fn geometric_trials<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Option<u64> {
    if p <= 0.0 {
        return None;
    }
    let g = Geometric::new(p).expect("probability validated");
    Some(g.sample(rng).saturating_add(1))
}

fn dark_dwell<R: Rng + ?Sized>(cfg: &KineticsConfig, rng: &mut R) -> u64 {
    geometric_trials(1.0 / cfg.dark_dwell_mean_pulses, rng).unwrap_or(1)
}

fn reform(prior_axis: NvAxis, vacancies: u32, rng: &mut (impl Rng + ?Sized)) -> SiteState {
    if vacancies > 0 {
        SiteState::NvPresent { axis: uniform_axis(rng), vacancies }
    } else {
        SiteState::NvPresent { axis: prior_axis, vacancies: 0 }
    }
}

/// One diffusion pulse.
pub fn step_pulse<R: Rng + ?Sized>(s: SiteState, cfg: &KineticsConfig, rng: &mut R) -> SiteState {
    match s {
        SiteState::Pristine | SiteState::Depleted => s,
        SiteState::VacancyRich { vacancies: 0 } => SiteState::Depleted,
        SiteState::VacancyRich { vacancies } => {
            if rng.random::<f64>() < cfg.p_form {
                SiteState::NvPresent { axis: uniform_axis(rng), vacancies: vacancies - 1 }
            } else {
                s
            }
        }
        SiteState::NvPresent { axis, vacancies } => {
            if rng.random::<f64>() < cfg.p_dissociate {
                SiteState::DarkIntermediate { prior_axis: axis, vacancies, remaining_dwell: dark_dwell(cfg, rng) }
            } else {
                s
            }
        }
        SiteState::DarkIntermediate { prior_axis, vacancies, remaining_dwell } => {
            if remaining_dwell <= 1 {
                reform(prior_axis, vacancies, rng)
            } else {
                SiteState::DarkIntermediate { prior_axis, vacancies, remaining_dwell: remaining_dwell - 1 }
            }
        }
    }
}

/// A state change after `pulse` pulses (1-based offset into the window).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub pulse: u64,
    pub state: SiteState,
}

/// Apply `pulses` diffusion pulses, returning the final state and every transition.
///
/// A waiting time that runs past the window is discarded; by memorylessness
/// the next window redraws it without changing the law of the process.
pub fn advance<R: Rng + ?Sized>(
    mut s: SiteState,
    pulses: u64,
    cfg: &KineticsConfig,
    rng: &mut R,
) -> (SiteState, Vec<Transition>) {
    let mut out = Vec::new();
    let mut at = 0u64;
    while at < pulses {
        let left = pulses - at;
        let (wait, next) = match s {
            SiteState::Pristine | SiteState::Depleted => break,
            SiteState::VacancyRich { vacancies: 0 } => (1, SiteState::Depleted),
            SiteState::VacancyRich { vacancies } => match geometric_trials(cfg.p_form, rng) {
                Some(k) if k <= left => (k, SiteState::NvPresent { axis: uniform_axis(rng), vacancies: vacancies - 1 }),
                _ => break,
            },
            SiteState::NvPresent { axis, vacancies } => match geometric_trials(cfg.p_dissociate, rng) {
                Some(k) if k <= left => (
                    k,
                    SiteState::DarkIntermediate { prior_axis: axis, vacancies, remaining_dwell: dark_dwell(cfg, rng) },
                ),
                _ => break,
            },
            SiteState::DarkIntermediate { prior_axis, vacancies, remaining_dwell } => {
                if remaining_dwell <= left {
                    (remaining_dwell, reform(prior_axis, vacancies, rng))
                } else {
                    s = SiteState::DarkIntermediate { prior_axis, vacancies, remaining_dwell: remaining_dwell - left };
                    break;
                }
            }
        };
        at += wait;
        s = next;
        out.push(Transition { pulse: at, state: s });
    }
    (s, out)
}

/// Count rate seen behind an analyzer at angle `theta`.
pub fn brightness(
    s: &SiteState,
    theta: f64,
    surface: SurfaceCut,
    cfg: &KineticsConfig,
    emission: &EmissionConfig,
) -> Result<f64> {
    Ok(match s.nv_axis() {
        Some(axis) => {
            let v = lab_vector(surface, axis);
            cfg.background
                + cfg.brightness * collection_efficiency(&v, emission)? * normalized_value(&v, theta, emission)?
        }
        None => cfg.background,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub final_state: SiteState,
    pub pulses: u64,
    /// (seconds since train start, new state)
    pub trajectory: Vec<(f64, SiteState)>,
}

/// Run the diffusion train for `duration` seconds.
pub fn simulate_train<R: Rng + ?Sized>(
    s: SiteState,
    duration: f64,
    cfg: &KineticsConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if !(duration > 0.0) {
        return Err(Error::InvalidParameter(format!("train duration {duration} must be positive")));
    }
    cfg.validate()?;
    let rate = cfg.rate_hz();
    let pulses = (duration * rate).floor() as u64;
    let (final_state, transitions) = advance(s, pulses, cfg, rng);
    let trajectory = transitions.into_iter().map(|t| (t.pulse as f64 / rate, t.state)).collect();
    Ok(TrainOutcome { final_state, pulses, trajectory })
}

impl TrainOutcome {
    /// Photon-count trace of the simulated train behind a fixed analyzer.
    #[allow(clippy::too_many_arguments)]
    pub fn count_trace<R: Rng + ?Sized>(
        &self,
        initial: SiteState,
        theta: f64,
        surface: SurfaceCut,
        cfg: &KineticsConfig,
        emission: &EmissionConfig,
        bin_width: f64,
        rng: &mut R,
    ) -> Result<CountTrace> {
        if !(bin_width > 0.0) {
            return Err(Error::InvalidParameter("bin width must be positive".into()));
        }
        let duration = self.pulses as f64 / cfg.rate_hz();
        let bins = (duration / bin_width).floor() as usize;
        let mut counts = Vec::with_capacity(bins);
        let mut state = initial;
        let mut next = 0usize;
        for b in 0..bins {
            let (lo, hi) = (b as f64 * bin_width, (b + 1) as f64 * bin_width);
            let mut expected = 0.0;
            let mut t = lo;
            while next < self.trajectory.len() && self.trajectory[next].0 < hi {
                let (tt, st) = self.trajectory[next];
                expected += brightness(&state, theta, surface, cfg, emission)? * (tt - t);
                state = st;
                t = tt;
                next += 1;
            }
            expected += brightness(&state, theta, surface, cfg, emission)? * (hi - t);
            counts.push(sample_counts(expected, 1.0, rng)?);
        }
        CountTrace::new(bin_width, counts, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    fn rng(seed: u64) -> crate::rng::SimRng {
        rng_for(seed, Stream::Kinetics, [0, 0, 0])
    }

    #[test]
    fn seeding() {
        let cfg = KineticsConfig::default();
        assert_eq!(apply_seed(SiteState::Pristine, &cfg), SiteState::VacancyRich { vacancies: 20 });
        assert_eq!(apply_seed(SiteState::Depleted, &cfg), SiteState::VacancyRich { vacancies: 20 });
        assert_eq!(
            apply_seed(SiteState::NvPresent { axis: NvAxis::A111, vacancies: 0 }, &cfg),
            SiteState::NvPresent { axis: NvAxis::A111, vacancies: 20 }
        );
    }

    #[test]
    fn forced_and_absorbing_transitions() {
        let cfg = KineticsConfig::default();
        let mut r = rng(1);
        assert_eq!(step_pulse(SiteState::VacancyRich { vacancies: 0 }, &cfg, &mut r), SiteState::Depleted);
        let hot = KineticsConfig { p_form: 0.9, p_dissociate: 0.9, ..cfg.clone() };
        for _ in 0..1000 {
            assert_eq!(step_pulse(SiteState::Depleted, &hot, &mut r), SiteState::Depleted);
        }
        let (s, tr) = advance(SiteState::VacancyRich { vacancies: 0 }, 10, &cfg, &mut r);
        assert_eq!(s, SiteState::Depleted);
        assert_eq!(tr, vec![Transition { pulse: 1, state: SiteState::Depleted }]);
    }

    #[test]
    fn dark_state_reverts_without_vacancies() {
        let cfg = KineticsConfig::default();
        let mut r = rng(2);
        let s = SiteState::DarkIntermediate { prior_axis: NvAxis::Am11m1, vacancies: 0, remaining_dwell: 1 };
        assert_eq!(step_pulse(s, &cfg, &mut r), SiteState::NvPresent { axis: NvAxis::Am11m1, vacancies: 0 });
        let s = SiteState::DarkIntermediate { prior_axis: NvAxis::Am11m1, vacancies: 3, remaining_dwell: 5 };
        let (end, tr) = advance(s, 4, &cfg, &mut r);
        assert!(tr.is_empty());
        assert_eq!(end, SiteState::DarkIntermediate { prior_axis: NvAxis::Am11m1, vacancies: 3, remaining_dwell: 1 });
    }

    #[test]
    fn vacancies_never_grow_under_pulses() {
        let cfg =
            KineticsConfig { p_form: 0.05, p_dissociate: 0.05, dark_dwell_mean_pulses: 5.0, ..Default::default() };
        let mut r = rng(3);
        let mut s = apply_seed(SiteState::Pristine, &cfg);
        for _ in 0..20_000 {
            let n = step_pulse(s, &cfg, &mut r);
            assert!(n.vacancies() <= s.vacancies());
            s = n;
        }
    }

    #[test]
    fn zero_formation_rate_is_inert() {
        let cfg = KineticsConfig { p_form: 0.0, ..Default::default() };
        let out = simulate_train(SiteState::VacancyRich { vacancies: 20 }, 5.0, &cfg, &mut rng(4)).unwrap();
        assert!(out.trajectory.is_empty());
        assert_eq!(out.final_state, SiteState::VacancyRich { vacancies: 20 });
        assert_eq!(out.pulses, 1_000_000);
        assert!(simulate_train(SiteState::Pristine, 0.0, &cfg, &mut rng(4)).is_err());
    }

    #[test]
    fn train_is_deterministic() {
        let cfg = KineticsConfig::default();
        let s0 = SiteState::VacancyRich { vacancies: 20 };
        let a = simulate_train(s0, 30.0, &cfg, &mut rng(42)).unwrap();
        let b = simulate_train(s0, 30.0, &cfg, &mut rng(42)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(!a.trajectory.is_empty());
    }

    #[test]
    fn brightness_levels() {
        let cfg = KineticsConfig::default();
        let em = EmissionConfig::default();
        let s = SurfaceCut::Cut111;
        assert_eq!(brightness(&SiteState::Pristine, 0.3, s, &cfg, &em).unwrap(), 5e3);
        let dark = SiteState::DarkIntermediate { prior_axis: NvAxis::A111, vacancies: 1, remaining_dwell: 9 };
        assert_eq!(brightness(&dark, 0.3, s, &cfg, &em).unwrap(), 5e3);
        let nv = SiteState::NvPresent { axis: NvAxis::A111, vacancies: 1 };
        for t in [0.0, 0.7, 2.9] {
            assert!((brightness(&nv, t, s, &cfg, &em).unwrap() - 5.5e4).abs() < 1e-6);
        }
    }

    #[test]
    fn stepping_and_skipping_agree_in_mean() {
        // same law, different draws: compare mean formation times at a fast rate
        let cfg = KineticsConfig { p_form: 0.01, ..Default::default() };
        let s0 = SiteState::VacancyRich { vacancies: 5 };
        let n = 4000;
        let mut r = rng(9);
        let mut step_sum = 0u64;
        for _ in 0..n {
            let mut s = s0;
            let mut k = 0;
            while s.nv_axis().is_none() {
                s = step_pulse(s, &cfg, &mut r);
                k += 1;
            }
            step_sum += k;
        }
        let mut skip_sum = 0u64;
        for _ in 0..n {
            let (_, tr) = advance(s0, 100_000, &cfg, &mut r);
            skip_sum += tr[0].pulse;
        }
        // mean 100, sd 99.5 → sd of the mean ≈ 1.57; difference sd ≈ 2.2
        let (a, b) = (step_sum as f64 / n as f64, skip_sum as f64 / n as f64);
        assert!((a - 100.0).abs() < 5.0 && (b - 100.0).abs() < 5.0 && (a - b).abs() < 7.0, "{a} {b}");
    }
}
