use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::{Bench, HwpRotator, PhotonCounter, PulseGate, Scanner, Stage};
use crate::emission::{collection_efficiency, EmissionConfig, PatternShape};
use crate::error::{Error, Result};
use crate::geometry::{lab_vector, wrap_pi, NvAxis, SurfaceCut};
use crate::kinetics::{advance, apply_seed, KineticsConfig, SiteState};
use crate::photonics::{sample_counts, synthesize_confocal_image, ConfocalImage, Emitter, Region};
use crate::rng::{rng_for, SimRng, Stream};

/// Grid used to decide which simulated site the focus is on.
pub const SITE_QUANTUM_UM: f64 = 0.5;
/// Per-move Gaussian scatter of the stage.
pub const REPEATABILITY_SIGMA_UM: f64 = 0.04;
/// Scale of the fixed calibration offset drawn once per bench.
pub const ACCURACY_SIGMA_UM: f64 = 0.5;

const PSF_SIGMA_UM: f64 = 0.25;

pub fn site_key(p: [f64; 3]) -> [i64; 3] {
    p.map(|v| (v / SITE_QUANTUM_UM).round() as i64)
}

#[derive(Debug, Clone)]
struct Site {
    position: [f64; 3],
    state: SiteState,
    rng: SimRng,
}

/// Simulated bench driving the kinetics, emission and photonics models.
#[derive(Debug, Clone)]
pub struct MockBench {
    pub surface: SurfaceCut,
    pub kinetics: KineticsConfig,
    pub emission: EmissionConfig,
    pub seed: u64,
    clock_ns: u64,
    train_on_ns: u64,
    train: bool,
    hwp: f64,
    commanded: [f64; 3],
    actual: [f64; 3],
    offset: [f64; 3],
    sites: BTreeMap<[i64; 3], Site>,
    presets: Vec<([f64; 3], SiteState)>,
    counter_rng: SimRng,
    stage_rng: SimRng,
    /// Per-axis unit-mean pattern and relative collection efficiency.
    shapes: [(PatternShape, f64); 4],
}

pub fn bind_mock(
    surface: SurfaceCut,
    kinetics: KineticsConfig,
    emission: EmissionConfig,
    seed: u64,
) -> Result<MockBench> {
    MockBench::new(surface, kinetics, emission, seed)
}

impl MockBench {
    pub fn new(surface: SurfaceCut, kinetics: KineticsConfig, emission: EmissionConfig, seed: u64) -> Result<Self> {
        kinetics.validate()?;
        emission.validate()?;
        let mut stage_rng = rng_for(seed, Stream::Stage, [0; 3]);
        let accuracy = Normal::new(0.0, ACCURACY_SIGMA_UM).expect("finite sigma");
        let offset = [0; 3].map(|_: i32| accuracy.sample(&mut stage_rng));
        let mut shapes = Vec::with_capacity(4);
        for axis in NvAxis::ALL {
            let v = lab_vector(surface, axis);
            shapes.push((PatternShape::new(&v, &emission)?, collection_efficiency(&v, &emission)?));
        }
        let shapes: [(PatternShape, f64); 4] = shapes.try_into().expect("four axes");
        Ok(Self {
            surface,
            kinetics,
            emission,
            seed,
            clock_ns: 0,
            train_on_ns: 0,
            train: false,
            hwp: 0.0,
            commanded: [0.0; 3],
            actual: offset,
            offset,
            sites: BTreeMap::new(),
            presets: Vec::new(),
            counter_rng: rng_for(seed, Stream::Counter, [0; 3]),
            stage_rng,
            shapes,
        })
    }

    pub fn commanded_position(&self) -> [f64; 3] {
        self.commanded
    }

    /// Analyzer angle seen by the emitter: twice the waveplate angle, mod π.
    pub fn analyzer_angle(&self) -> f64 {
        wrap_pi(2.0 * self.hwp)
    }

    fn site_mut(&mut self) -> &mut Site {
        let key = site_key(self.commanded);
        let (seed, position) = (self.seed, self.commanded);
        self.sites.entry(key).or_insert_with(|| Site {
            position,
            state: SiteState::Pristine,
            rng: rng_for(seed, Stream::Kinetics, key),
        })
    }

    /// Force the state of the site at `position` (scripted scenarios, tests).
    pub fn preset_site(&mut self, position: [f64; 3], state: SiteState) {
        let key = site_key(position);
        let seed = self.seed;
        self.presets.push((position, state));
        self.sites
            .entry(key)
            .or_insert_with(|| Site { position, state, rng: rng_for(seed, Stream::Kinetics, key) })
            .state = state;
    }

    pub fn presets(&self) -> &[([f64; 3], SiteState)] {
        &self.presets
    }

    pub fn site_state(&self, position: [f64; 3]) -> SiteState {
        self.sites.get(&site_key(position)).map_or(SiteState::Pristine, |s| s.state)
    }

    /// Sites currently hosting a fluorescing NV, in key order.
    pub fn nv_sites(&self) -> Vec<([f64; 3], SiteState)> {
        self.sites.values().filter(|s| s.state.nv_axis().is_some()).map(|s| (s.position, s.state)).collect()
    }

    /// Count rate behind analyzer `theta`; equals `kinetics::brightness`.
    pub fn rate(&self, state: &SiteState, theta: f64) -> f64 {
        match state.nv_axis() {
            Some(axis) => {
                let (shape, eff) = &self.shapes[axis.index()];
                self.kinetics.background + self.kinetics.brightness * eff * shape.value(theta)
            }
            None => self.kinetics.background,
        }
    }

    fn pulses_by(&self, on_ns: u64) -> u64 {
        (on_ns as f64 * self.kinetics.rate_hz() / 1e9).floor() as u64
    }
}

impl Stage for MockBench {
    fn move_to(&mut self, x: f64, y: f64, z: f64) -> Result<[f64; 3]> {
        if ![x, y, z].iter().all(|v| v.is_finite()) {
            return Err(Error::Bench(format!("non-finite stage target ({x}, {y}, {z})")));
        }
        let scatter = Normal::new(0.0, REPEATABILITY_SIGMA_UM).expect("finite sigma");
        self.commanded = [x, y, z];
        for k in 0..3 {
            self.actual[k] = self.commanded[k] + self.offset[k] + scatter.sample(&mut self.stage_rng);
        }
        Ok(self.actual)
    }

    fn position(&self) -> [f64; 3] {
        self.actual
    }
}

impl HwpRotator for MockBench {
    fn set_angle(&mut self, rad: f64) -> Result<()> {
        if !rad.is_finite() {
            return Err(Error::Bench("non-finite waveplate angle".into()));
        }
        self.hwp = rad;
        Ok(())
    }

    fn angle(&self) -> f64 {
        self.hwp
    }
}

impl PulseGate for MockBench {
    fn seed_pulse(&mut self) -> Result<()> {
        let cfg = self.kinetics.clone();
        let site = self.site_mut();
        site.state = apply_seed(site.state, &cfg);
        Ok(())
    }

    fn train_on(&mut self) -> Result<()> {
        self.train = true;
        Ok(())
    }

    fn train_off(&mut self) -> Result<()> {
        self.train = false;
        Ok(())
    }

    fn train_active(&self) -> bool {
        self.train
    }
}

impl PhotonCounter for MockBench {
    fn acquire(&mut self, dwell: f64) -> Result<u64> {
        if !(dwell > 0.0 && dwell.is_finite()) {
            return Err(Error::Bench(format!("dwell {dwell} s must be positive")));
        }
        let dwell_ns = (dwell * 1e9).round().max(1.0) as u64;
        let theta = self.analyzer_angle();
        let cfg = self.kinetics.clone();
        let rate_hz = cfg.rate_hz();
        let shapes = self.shapes;
        let rate = |s: &SiteState| match s.nv_axis() {
            Some(axis) => {
                cfg.background + cfg.brightness * shapes[axis.index()].1 * shapes[axis.index()].0.value(theta)
            }
            None => cfg.background,
        };

        let (p0, pulses) = if self.train {
            let p0 = self.pulses_by(self.train_on_ns);
            (p0, self.pulses_by(self.train_on_ns + dwell_ns) - p0)
        } else {
            (0, 0)
        };
        let on0 = self.train_on_ns;
        let key = site_key(self.commanded);
        let (seed, position) = (self.seed, self.commanded);
        let site = self.sites.entry(key).or_insert_with(|| Site {
            position,
            state: SiteState::Pristine,
            rng: rng_for(seed, Stream::Kinetics, key),
        });
        let mut state = site.state;
        let mut expected = 0.0;
        let mut t = 0u64;
        if pulses > 0 {
            let (last, transitions) = advance(state, pulses, &cfg, &mut site.rng);
            for tr in transitions {
                let at = (((p0 + tr.pulse) as f64 * 1e9 / rate_hz).ceil() as u64).saturating_sub(on0).min(dwell_ns);
                expected += rate(&state) * (at - t) as f64 * 1e-9;
                state = tr.state;
                t = at;
            }
            site.state = last;
        }
        expected += rate(&state) * (dwell_ns - t) as f64 * 1e-9;

        if self.train {
            self.train_on_ns += dwell_ns;
        }
        self.clock_ns += dwell_ns;
        let span = dwell_ns as f64 * 1e-9;
        sample_counts(expected / span, span, &mut self.counter_rng)
    }
}

impl Scanner for MockBench {
    fn scan(&mut self, region: Region, pitch: f64) -> Result<ConfocalImage> {
        let emitters = self
            .nv_sites()
            .into_iter()
            .map(|(p, s)| {
                let axis = s.nv_axis().expect("filtered to NV sites");
                Emitter { x: p[0], y: p[1], brightness: self.kinetics.brightness * self.shapes[axis.index()].1 }
            })
            .collect::<Vec<_>>();
        synthesize_confocal_image(&emitters, PSF_SIGMA_UM, region, pitch, self.kinetics.background)
            .map_err(|e| Error::Bench(format!("scan failed: {e}")))
    }
}

impl Bench for MockBench {
    fn now(&self) -> f64 {
        self.clock_ns as f64 * 1e-9
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NvAxis;

    fn bench(seed: u64) -> MockBench {
        MockBench::new(SurfaceCut::Cut111, KineticsConfig::default(), EmissionConfig::default(), seed).unwrap()
    }

    #[test]
    fn background_before_seed() {
        let mut b = bench(1);
        b.move_to(0.0, 0.0, 20.0).unwrap();
        let n = 2000;
        let mean = (0..n).map(|_| b.acquire(0.01).unwrap() as f64).sum::<f64>() / n as f64;
        // Poisson(50): σ of the mean ≈ 0.16
        assert!((mean - 50.0).abs() < 1.0, "{mean}");
        assert!((b.now() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn seed_and_train_forms_nv() {
        let mut b = bench(2);
        b.move_to(0.0, 0.0, 20.0).unwrap();
        b.seed_pulse().unwrap();
        b.train_on().unwrap();
        let mut formed = false;
        for _ in 0..3000 {
            if b.acquire(0.01).unwrap() > 200 {
                formed = true;
                break;
            }
        }
        assert!(formed);
        assert!(matches!(
            b.site_state([0.0, 0.0, 20.0]),
            SiteState::NvPresent { .. } | SiteState::DarkIntermediate { .. }
        ));
    }

    #[test]
    fn pulses_follow_on_time() {
        let mut b = bench(3);
        b.move_to(0.0, 0.0, 0.0).unwrap();
        b.train_on().unwrap();
        b.acquire(0.3).unwrap();
        b.train_off().unwrap();
        b.train_off().unwrap();
        b.acquire(0.5).unwrap();
        b.train_on().unwrap();
        b.acquire(0.2).unwrap();
        assert_eq!(b.pulses_by(b.train_on_ns), 100_000);
        assert!((b.now() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_identical_counts() {
        let run = |seed| {
            let mut b = bench(seed);
            b.move_to(10.0, 0.0, 20.0).unwrap();
            b.seed_pulse().unwrap();
            b.train_on().unwrap();
            (0..500).map(|_| b.acquire(0.01).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn stage_repeatability() {
        let mut b = bench(4);
        let xs: Vec<[f64; 3]> = (0..1000).map(|_| b.move_to(5.0, 5.0, 20.0).unwrap()).collect();
        for k in 0..3 {
            let m = xs.iter().map(|p| p[k]).sum::<f64>() / 1000.0;
            let sd = (xs.iter().map(|p| (p[k] - m).powi(2)).sum::<f64>() / 999.0).sqrt();
            assert!(sd <= 0.08, "{sd}");
        }
        assert_eq!(b.commanded_position(), [5.0, 5.0, 20.0]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn hwp_doubles_angle() {
        let mut b = bench(5);
        b.set_angle(0.3927).unwrap();
        assert!((b.analyzer_angle() - 0.7854).abs() < 1e-12);
        b.set_angle(0.3927).unwrap();
        assert_eq!(b.angle(), 0.3927);
        assert!(b.set_angle(f64::NAN).is_err());
    }

    #[test]
    fn scan_shows_preset_emitters() {
        let mut b = bench(6);
        b.preset_site([0.0, 0.0, 20.0], SiteState::NvPresent { axis: NvAxis::A111, vacancies: 0 });
        b.preset_site([10.0, 0.0, 20.0], SiteState::NvPresent { axis: NvAxis::Am1m11, vacancies: 0 });
        b.preset_site([0.0, 10.0, 20.0], SiteState::VacancyRich { vacancies: 3 });
        let t0 = b.now();
        let img = b.scan(Region::new(-5.0, -5.0, 15.0, 15.0), 0.25).unwrap();
        assert_eq!(b.now(), t0);
        let thr = img.min() + 0.1 * (img.max() - img.min());
        assert_eq!(img.local_maxima(thr).len(), 2);
    }

    #[test]
    fn cached_rate_matches_brightness() {
        for emission in [EmissionConfig::default(), EmissionConfig { grid: 48, ..EmissionConfig::high_na() }] {
            let b = MockBench::new(SurfaceCut::Cut100, KineticsConfig::default(), emission.clone(), 1).unwrap();
            for axis in NvAxis::ALL {
                let s = SiteState::NvPresent { axis, vacancies: 1 };
                for k in 0..12 {
                    let th = k as f64 * 0.3;
                    let want = crate::kinetics::brightness(&s, th, SurfaceCut::Cut100, &b.kinetics, &emission).unwrap();
                    assert!((b.rate(&s, th) - want).abs() < 1e-9 * want);
                }
            }
        }
    }

    #[test]
    fn acquire_rejects_bad_dwell() {
        let mut b = bench(7);
        assert!(b.acquire(0.0).is_err());
        assert!(b.acquire(-1.0).is_err());
        assert!(b.move_to(f64::INFINITY, 0.0, 0.0).is_err());
    }
}
