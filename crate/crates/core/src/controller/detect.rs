use super::ControllerConfig;
use crate::photonics::CountTrace;

/// Streaming "M consecutive bins past a threshold" detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunDetector {
    pub threshold: f64,
    pub m: u32,
    above: bool,
    run: u32,
}

impl RunDetector {
    /// Fires on counts strictly above `threshold`.
    pub fn above(threshold: f64, m: u32) -> Self {
        Self { threshold, m, above: true, run: 0 }
    }

    /// Fires on counts strictly below `threshold`.
    pub fn below(threshold: f64, m: u32) -> Self {
        Self { threshold, m, above: false, run: 0 }
    }

    /// Background `k·σ` threshold for a bin holding `bg_counts` expected counts.
    pub fn background_threshold(bg_counts: f64, k: f64) -> f64 {
        bg_counts + k * bg_counts.max(0.0).sqrt()
    }

    pub fn push(&mut self, counts: u64) -> bool {
        let c = counts as f64;
        let hit = if self.above { c > self.threshold } else { c < self.threshold };
        self.run = if hit { self.run + 1 } else { 0 };
        self.run >= self.m
    }

    pub fn reset(&mut self) {
        self.run = 0;
    }
}

/// End time of the first run of `m_bins` bins above background + k·σ.
pub fn detect_formation(trace: &CountTrace, background_rate: f64, cfg: &ControllerConfig) -> Option<f64> {
    let bg = background_rate * trace.bin_width;
    let mut d = RunDetector::above(RunDetector::background_threshold(bg, cfg.k_sigma), cfg.m_bins);
    trace.counts.iter().position(|&c| d.push(c)).map(|i| trace.start + (i + 1) as f64 * trace.bin_width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::photonics::sample_counts;
    use crate::rng::{rng_for, Stream};

    fn cfg() -> ControllerConfig {
        ControllerConfig::default()
    }

    #[test]
    fn background_rarely_triggers() {
        let mut false_hits = 0;
        for trial in 0..100 {
            let mut r = rng_for(1, Stream::Trial, [trial, 0, 0]);
            let counts = (0..1000).map(|_| sample_counts(5e3, 0.01, &mut r).unwrap()).collect();
            let tr = CountTrace::new(0.01, counts, 0.0).unwrap();
            false_hits += detect_formation(&tr, 5e3, &cfg()).is_some() as u32;
        }
        assert!(false_hits <= 1, "{false_hits}");
    }

    #[test]
    fn step_is_caught_within_m_bins() {
        // background 50 counts/bin, σ ≈ 7.07; step to +10σ at bin 50
        let mut counts = vec![50u64; 100];
        for c in counts.iter_mut().skip(50) {
            *c = 50 + 71;
        }
        let tr = CountTrace::new(0.01, counts, 2.0).unwrap();
        let t = detect_formation(&tr, 5e3, &cfg()).unwrap();
        let bin = ((t - 2.0) / 0.01).round() as usize;
        assert!(bin <= 53, "{bin}");
        assert_eq!(bin, 53);
    }

    #[test]
    fn empty_and_short_runs() {
        let tr = CountTrace::new(0.01, vec![], 0.0).unwrap();
        assert_eq!(detect_formation(&tr, 5e3, &cfg()), None);
        let tr = CountTrace::new(0.01, vec![50, 200, 200, 50, 200, 200, 50], 0.0).unwrap();
        assert_eq!(detect_formation(&tr, 5e3, &cfg()), None);
    }

    #[test]
    fn below_detector() {
        let mut d = RunDetector::below(85.0, 3);
        assert!(![300, 40, 40].iter().any(|&c| d.push(c)));
        assert!(d.push(10));
        d.reset();
        assert!(!d.push(10));
    }
}
