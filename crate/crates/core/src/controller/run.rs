use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use super::{CampaignReport, ControllerConfig, FabricationPlan, RunDetector, SiteEvent, SiteLog, TimedEvent};
use crate::emission::{
    classify_with, fit_pattern_net, Classification, EmissionConfig, PatternFit, PolarizationPattern,
};
use crate::error::{Error, Result};
use crate::geometry::{wrap_pi, SurfaceCut};
use crate::hal::{Bench, SiteIndex};
use crate::photonics::{ConfocalImage, Region};

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Count rate (counts/s) per analyzer angle.
    pub pattern: PolarizationPattern,
    /// Fit of the background-subtracted pattern.
    pub fit: PatternFit,
    /// Dwell per angle, s.
    pub dwell: f64,
    /// The summed excess over background clears k·σ.
    pub reliable: bool,
}

/// Record a polarization pattern at the current site with the train off.
///
/// The dwell per angle is set from a four-angle probe, which averages out the
/// second harmonic, so each angle collects about `budget` counts.
pub fn measure_pattern<B: Bench + ?Sized>(
    bench: &mut B,
    cfg: &ControllerConfig,
    background_rate: f64,
    budget: f64,
) -> Result<Measurement> {
    if bench.train_active() {
        return Err(Error::Bench("pattern requested while the diffusion train is on".into()));
    }
    let mut probe = 0u64;
    for k in 0..4 {
        bench.set_angle(k as f64 * FRAC_PI_4 / 2.0)?;
        probe += bench.acquire(cfg.probe_dwell_s)?;
    }
    let rate = (probe as f64 / (4.0 * cfg.probe_dwell_s)).max(1.0);
    let dwell = (budget / rate).clamp(1e-3, cfg.max_pattern_dwell_s);

    let n = cfg.hwp_angles as usize;
    let (mut angles, mut net, mut errors) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut total = 0u64;
    for k in 0..n {
        let alpha = k as f64 * FRAC_PI_2 / n as f64;
        bench.set_angle(alpha)?;
        let c = bench.acquire(dwell)?;
        total += c;
        angles.push(wrap_pi(2.0 * alpha));
        net.push(c as f64 / dwell);
        errors.push((c.max(1) as f64).sqrt() / dwell);
    }
    let pattern = PolarizationPattern::new(angles, net, Some(errors))?;
    let fit = fit_pattern_net(&pattern, background_rate)?;
    let excess = total as f64 - background_rate * dwell * n as f64;
    let reliable = excess > cfg.k_sigma * (total.max(1) as f64).sqrt() && fit.a0 > 0.0;
    Ok(Measurement { pattern, fit, dwell, reliable })
}

/// Park the analyzer at the pattern minimum and return the waveplate angle.
pub fn fast_mode_bias<B: Bench + ?Sized>(bench: &mut B, surface: SurfaceCut, fit: &PatternFit) -> Result<f64> {
    if surface != SurfaceCut::Cut100 {
        return Err(Error::UnsupportedSurface(format!(
            "fast mode needs the (100) surface; level contrast on {surface} is not decisive"
        )));
    }
    let hwp = 0.5 * wrap_pi(fit.azimuth + FRAC_PI_2);
    bench.set_angle(hwp)?;
    Ok(hwp)
}

enum Formation {
    Detected,
    TimedOut,
}

struct SiteRun<'a, B: Bench + ?Sized> {
    bench: &'a mut B,
    plan: &'a FabricationPlan,
    cfg: &'a ControllerConfig,
    emission: &'a EmissionConfig,
    log: SiteLog,
    background: f64,
    train_since_seed: f64,
    reseeds: u32,
}

impl<B: Bench + ?Sized> SiteRun<'_, B> {
    fn emit(&mut self, event: SiteEvent) {
        self.bench.annotate(event.name(), &event.payload());
        self.log.events.push(TimedEvent { t: self.bench.now(), event });
    }

    fn bg_counts(&self) -> f64 {
        self.background * self.cfg.dwell()
    }

    fn bg_threshold(&self) -> f64 {
        RunDetector::background_threshold(self.bg_counts(), self.cfg.k_sigma)
    }

    fn seed(&mut self) -> Result<()> {
        self.bench.seed_pulse()?;
        self.emit(SiteEvent::Seed);
        self.train_since_seed = 0.0;
        Ok(())
    }

    fn train(&mut self, on: bool) -> Result<()> {
        if on {
            self.bench.train_on()?;
            self.emit(SiteEvent::TrainOn);
        } else {
            self.bench.train_off()?;
            self.emit(SiteEvent::TrainOff);
        }
        Ok(())
    }

    fn bin(&mut self) -> Result<u64> {
        let dwell = self.cfg.dwell();
        let c = self.bench.acquire(dwell)?;
        if self.bench.train_active() {
            self.train_since_seed += dwell;
        }
        Ok(c)
    }

    fn calibrate(&mut self, at: [f64; 3]) -> Result<()> {
        let off = self.cfg.background_offset_um;
        self.bench.move_to(at[0] + off, at[1] + off, at[2])?;
        let c = self.bench.acquire(self.cfg.background_probe_s)?;
        self.background = (c as f64 / self.cfg.background_probe_s).max(1.0 / self.cfg.background_probe_s);
        self.bench.move_to(at[0], at[1], at[2])?;
        self.emit(SiteEvent::BackgroundCalibrated { rate: self.background });
        Ok(())
    }

    fn nv_visible(&mut self) -> Result<bool> {
        let mut d = RunDetector::above(self.bg_threshold(), self.cfg.m_bins);
        let mut seen = false;
        for _ in 0..self.cfg.m_bins {
            seen = d.push(self.bin()?);
        }
        Ok(seen)
    }

    fn await_formation(&mut self) -> Result<Formation> {
        let mut d = RunDetector::above(self.bg_threshold(), self.cfg.m_bins);
        self.train(true)?;
        loop {
            let c = self.bin()?;
            if d.push(c) {
                self.emit(SiteEvent::FormationDetected);
                self.train(false)?;
                return Ok(Formation::Detected);
            }
            if self.train_since_seed >= self.plan.anneal_timeout_s {
                self.train(false)?;
                return Ok(Formation::TimedOut);
            }
        }
    }

    /// Reseed after a stall; `false` once the reseed allowance is spent.
    fn reseed(&mut self) -> Result<bool> {
        if self.reseeds >= self.plan.max_reseeds {
            self.emit(SiteEvent::Failure { reason: format!("timeout: no usable NV after {} reseeds", self.reseeds) });
            return Ok(false);
        }
        self.reseeds += 1;
        self.emit(SiteEvent::Reseed { count: self.reseeds });
        self.seed()?;
        Ok(true)
    }

    fn classify(&mut self) -> Result<Option<(Measurement, Classification)>> {
        let mut m = measure_pattern(self.bench, self.cfg, self.background, self.cfg.photon_budget)?;
        self.emit(SiteEvent::PatternMeasured { fit: m.fit, dwell: m.dwell, reliable: m.reliable });
        if !m.reliable {
            return Ok(None);
        }
        let mut c = classify_with(&m.fit, self.plan.surface, 0.0, self.emission)?;
        if c.margin < self.cfg.min_margin {
            m = measure_pattern(self.bench, self.cfg, self.background, 2.0 * self.cfg.photon_budget)?;
            self.emit(SiteEvent::PatternMeasured { fit: m.fit, dwell: m.dwell, reliable: m.reliable });
            if !m.reliable {
                return Ok(None);
            }
            c = classify_with(&m.fit, self.plan.surface, 0.0, self.emission)?;
        }
        self.emit(SiteEvent::Classified { class: c.class.id, margin: c.margin, distance: c.distance, tie: c.tie });
        Ok(Some((m, c)))
    }

    /// Anneal with the analyzer parked until a dip and recovery, or the slice ends.
    fn watch(&mut self, fit: &PatternFit) -> Result<()> {
        let m = self.cfg.m_bins;
        let fast = self.cfg.fast_mode;
        let (hwp, rise) = if fast {
            let hwp = fast_mode_bias(self.bench, self.plan.surface, fit)?;
            let bins = (self.cfg.fast_baseline_s / self.cfg.dwell()).round().max(1.0) as usize;
            let mut sum = 0u64;
            for _ in 0..bins {
                sum += self.bin()?;
            }
            let level = sum as f64 / bins as f64;
            (hwp, Some((level, level + self.cfg.k_sigma * level.sqrt())))
        } else {
            let hwp = 0.5 * wrap_pi(fit.azimuth);
            self.bench.set_angle(hwp)?;
            (hwp, None)
        };
        let level = match rise {
            Some((l, _)) => l / self.cfg.dwell(),
            None => fit.value(fit.azimuth) + self.background,
        };
        self.emit(SiteEvent::Biased { hwp_angle: hwp, level });

        let thr = self.bg_threshold();
        let mut dip = RunDetector::below(thr, m);
        let mut back = RunDetector::above(thr, m);
        let mut up = RunDetector::above(rise.map_or(thr, |r| r.1), m);
        let mut recent: Vec<u64> = Vec::with_capacity(m as usize);
        let mut dipped = false;
        let mut elapsed = 0.0;
        self.train(true)?;
        while elapsed < self.cfg.anneal_slice_s {
            let c = self.bin()?;
            elapsed += self.cfg.dwell();
            if recent.len() == m as usize {
                recent.remove(0);
            }
            recent.push(c);
            if !dipped {
                if dip.push(c) {
                    dipped = true;
                    back.reset();
                    up.reset();
                    self.emit(SiteEvent::DipDetected);
                }
                continue;
            }
            let rose = up.push(c);
            let returned = back.push(c);
            if rose {
                let level = recent.iter().sum::<u64>() as f64 / (recent.len() as f64 * self.cfg.dwell());
                self.emit(SiteEvent::RecoveryDetected { level });
                break;
            }
            if returned && fast {
                // back at the biased level: same class, keep annealing
                dipped = false;
                dip.reset();
            }
        }
        self.train(false)
    }
}

/// Drive one site until it holds an NV of the target class, or give up.
pub fn reorient_until<B: Bench + ?Sized>(
    bench: &mut B,
    site: SiteIndex,
    plan: &FabricationPlan,
    cfg: &ControllerConfig,
    emission: &EmissionConfig,
) -> Result<SiteLog> {
    plan.validate()?;
    cfg.validate()?;
    if cfg.fast_mode && plan.surface != SurfaceCut::Cut100 {
        return Err(Error::UnsupportedSurface(format!(
            "fast mode is defined for (100) only, plan uses {}",
            plan.surface
        )));
    }
    let at = plan.position(site);
    bench.enter_site(Some(site));
    let mut run = SiteRun {
        bench,
        plan,
        cfg,
        emission,
        log: SiteLog::new(site),
        background: 0.0,
        train_since_seed: 0.0,
        reseeds: 0,
    };
    run.calibrate(at)?;
    let mut have_nv = run.nv_visible()?;
    if !have_nv {
        run.seed()?;
    }
    let mut misses = 0u32;
    loop {
        if !have_nv {
            match run.await_formation()? {
                Formation::Detected => {}
                Formation::TimedOut => {
                    if !run.reseed()? {
                        break;
                    }
                    continue;
                }
            }
        }
        let Some((m, c)) = run.classify()? else {
            have_nv = false;
            continue;
        };
        if c.class.id == plan.target_class {
            run.emit(SiteEvent::Success { final_class: c.class.id, cycles: misses + 1 });
            break;
        }
        misses += 1;
        if run.train_since_seed >= plan.anneal_timeout_s && !run.reseed()? {
            break;
        }
        run.watch(&m.fit)?;
        have_nv = true;
    }
    let log = run.log;
    run.bench.enter_site(None);
    Ok(log)
}

/// Visit every plan site in row-major order and drive it to the target class.
pub fn run_campaign<B: Bench + ?Sized>(
    plan: &FabricationPlan,
    bench: &mut B,
    cfg: &ControllerConfig,
    emission: &EmissionConfig,
) -> Result<CampaignReport> {
    plan.validate()?;
    cfg.validate()?;
    let mut logs = Vec::with_capacity((plan.rows * plan.cols) as usize);
    for site in plan.sites() {
        logs.push(reorient_until(bench, site, plan, cfg, emission)?);
    }
    Ok(CampaignReport::from_logs(plan.clone(), logs))
}

/// Confocal scan covering the plan grid with half a pitch of margin.
pub fn scan_array<B: Bench + ?Sized>(bench: &mut B, plan: &FabricationPlan, pixel_um: f64) -> Result<ConfocalImage> {
    let h = 0.5 * plan.pitch_um;
    let region =
        Region::new(-h, -h, (plan.rows - 1) as f64 * plan.pitch_um + h, (plan.cols - 1) as f64 * plan.pitch_um + h);
    bench.scan(region, pixel_um)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NvAxis;
    use crate::hal::{MockBench, PulseGate, Recorder, Stage};
    use crate::kinetics::{KineticsConfig, SiteState};

    fn bench(surface: SurfaceCut, seed: u64) -> MockBench {
        MockBench::new(surface, KineticsConfig::default(), EmissionConfig::default(), seed).unwrap()
    }

    fn preset(b: &mut MockBench, axis: NvAxis) {
        b.preset_site([0.0, 0.0, 20.0], SiteState::NvPresent { axis, vacancies: 19 });
    }

    #[test]
    fn pattern_spans_half_turn() {
        let mut b = bench(SurfaceCut::Cut111, 1);
        preset(&mut b, NvAxis::Am1m11);
        b.move_to(0.0, 0.0, 20.0).unwrap();
        let m = measure_pattern(&mut b, &ControllerConfig::default(), 5e3, 1e4).unwrap();
        assert_eq!(m.pattern.len(), 19);
        assert!(m.pattern.angles.windows(2).all(|w| w[1] > w[0]));
        assert!(*m.pattern.angles.last().unwrap() < std::f64::consts::PI);
        assert!(m.reliable);
        assert!((m.fit.visibility - 0.8).abs() < 0.03, "{}", m.fit.visibility);
    }

    #[test]
    fn vertical_nv_pattern_is_flat() {
        let mut b = bench(SurfaceCut::Cut111, 2);
        preset(&mut b, NvAxis::A111);
        b.move_to(0.0, 0.0, 20.0).unwrap();
        let m = measure_pattern(&mut b, &ControllerConfig::default(), 5e3, 1e4).unwrap();
        assert!(m.fit.visibility < 0.05, "{}", m.fit.visibility);
    }

    #[test]
    fn empty_site_is_unreliable() {
        let mut b = bench(SurfaceCut::Cut111, 3);
        b.move_to(0.0, 0.0, 20.0).unwrap();
        let m = measure_pattern(&mut b, &ControllerConfig::default(), 5e3, 1e4).unwrap();
        assert!(!m.reliable);
        assert!(m.fit.a0.abs() < 500.0);
    }

    #[test]
    fn pattern_refused_with_train_on() {
        let mut b = bench(SurfaceCut::Cut111, 3);
        b.train_on().unwrap();
        assert!(measure_pattern(&mut b, &ControllerConfig::default(), 5e3, 1e4).is_err());
    }

    #[test]
    fn fast_bias_finds_minimum() {
        let mut b = bench(SurfaceCut::Cut100, 4);
        preset(&mut b, NvAxis::Am1m11);
        b.move_to(0.0, 0.0, 20.0).unwrap();
        let m = measure_pattern(&mut b, &ControllerConfig::default(), 5e3, 1e5).unwrap();
        let hwp = fast_mode_bias(&mut b, SurfaceCut::Cut100, &m.fit).unwrap();
        let s = SiteState::NvPresent { axis: NvAxis::Am1m11, vacancies: 0 };
        let th = wrap_pi(2.0 * hwp);
        let bg = b.kinetics.background;
        let lo = b.rate(&s, th) - bg;
        let hi = b.rate(&s, th + FRAC_PI_2) - bg;
        assert!((lo / hi - 1.0 / 3.0).abs() < 0.01, "{}", lo / hi);
        // orthogonal class at the same analyzer angle is three times brighter
        let other = SiteState::NvPresent { axis: NvAxis::A111, vacancies: 0 };
        assert!(((b.rate(&other, th) - bg) / lo - 3.0).abs() < 0.05);
        assert!(matches!(fast_mode_bias(&mut b, SurfaceCut::Cut111, &m.fit), Err(Error::UnsupportedSurface(_))));
    }

    #[test]
    fn already_on_target() {
        let mut b = bench(SurfaceCut::Cut111, 5);
        preset(&mut b, NvAxis::A111);
        let plan = FabricationPlan::new(SurfaceCut::Cut111, 1, 1, 1, 5);
        let log =
            reorient_until(&mut b, [0, 0], &plan, &ControllerConfig::default(), &EmissionConfig::default()).unwrap();
        assert_eq!(log.classifications(), vec![1]);
        assert_eq!(log.cycles(), Some(1));
        assert_eq!(log.seeds(), 0);
        assert!(!log.events.iter().any(|e| e.event == SiteEvent::TrainOn));
        log.check(1).unwrap();
    }

    #[test]
    fn impossible_formation_fails() {
        let kin = KineticsConfig { p_form: 0.0, ..KineticsConfig::default() };
        let mut b = MockBench::new(SurfaceCut::Cut111, kin, EmissionConfig::default(), 6).unwrap();
        let plan = FabricationPlan { max_reseeds: 0, ..FabricationPlan::new(SurfaceCut::Cut111, 1, 1, 1, 6) };
        let log =
            reorient_until(&mut b, [0, 0], &plan, &ControllerConfig::default(), &EmissionConfig::default()).unwrap();
        assert!(
            matches!(&log.events.last().unwrap().event, SiteEvent::Failure { reason } if reason.starts_with("timeout"))
        );
        log.check(1).unwrap();
        assert!(b.now() >= 120.0);
    }

    #[test]
    fn reseeds_are_bounded() {
        let kin = KineticsConfig { p_form: 0.0, ..KineticsConfig::default() };
        let mut b = MockBench::new(SurfaceCut::Cut111, kin, EmissionConfig::default(), 6).unwrap();
        let plan = FabricationPlan {
            max_reseeds: 2,
            anneal_timeout_s: 1.0,
            ..FabricationPlan::new(SurfaceCut::Cut111, 1, 1, 1, 6)
        };
        let log =
            reorient_until(&mut b, [0, 0], &plan, &ControllerConfig::default(), &EmissionConfig::default()).unwrap();
        assert_eq!((log.seeds(), log.reseeds()), (3, 2));
        log.check(1).unwrap();
    }

    #[test]
    fn small_campaign_succeeds() {
        let plan = FabricationPlan::new(SurfaceCut::Cut100, 2, 2, 1, 8);
        let mut b = Recorder::new(bench(SurfaceCut::Cut100, 8));
        let r = run_campaign(&plan, &mut b, &ControllerConfig::default(), &EmissionConfig::default()).unwrap();
        assert_eq!(r.summary.successes, 4);
        for log in &r.sites {
            log.check(1).unwrap();
        }
        assert!(b.records().iter().any(|r| r.event == "classified" && r.site == Some([1, 1])));
    }

    #[test]
    fn fast_mode_sequence() {
        let mut b = bench(SurfaceCut::Cut100, 9);
        preset(&mut b, NvAxis::Am1m11);
        let plan = FabricationPlan::new(SurfaceCut::Cut100, 1, 1, 1, 9);
        let cfg = ControllerConfig { fast_mode: true, ..Default::default() };
        let log = reorient_until(&mut b, [0, 0], &plan, &cfg, &EmissionConfig::default()).unwrap();
        log.check(1).unwrap();
        assert_eq!(log.initial_class(), Some(2));
        assert!(log.events.iter().any(|e| matches!(e.event, SiteEvent::RecoveryDetected { .. })));
        let plan111 = FabricationPlan::new(SurfaceCut::Cut111, 1, 1, 1, 9);
        assert!(reorient_until(&mut bench(SurfaceCut::Cut111, 9), [0, 0], &plan111, &cfg, &EmissionConfig::default())
            .is_err());
    }
}
