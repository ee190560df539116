//! Photon statistics: detector counts, antibunched emission, HBT
//! coincidence histograms and confocal images.

mod confocal;
mod g2;

pub use confocal::{synthesize_confocal_image, ConfocalImage, Emitter, Region};
pub use g2::{
    background_correct, fit_g2, g2_model, histogram_coincidences, mix_background, simulate_photon_stream,
    simulate_photon_stream_with, CorrelationMode, G2Fit, G2Params, HbtHistogram, StreamSpec, ThreeLevelRates,
};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this mean, Poisson draws use sequential inversion.
const INVERSION_LIMIT: f64 = 30.0;

/// Detector counts for a Poisson source of `rate` counts/s over `dwell` s.
pub fn sample_counts<R: Rng + ?Sized>(rate: f64, dwell: f64, rng: &mut R) -> Result<u64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!("count rate {rate} must be finite and ≥ 0")));
    }
    if !(dwell > 0.0) {
        return Err(Error::InvalidParameter(format!("dwell {dwell} must be positive")));
    }
    let mean = rate * dwell;
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < INVERSION_LIMIT {
        let u: f64 = rng.random();
        let mut k = 0u64;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p < f64::MIN_POSITIVE && k as f64 > mean {
                break;
            }
        }
        Ok(k)
    } else {
        let d = Poisson::new(mean).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(d.sample(rng) as u64)
    }
}

/// Binned photon counts from one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTrace {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub start: f64,
}

impl CountTrace {
    pub fn new(bin_width: f64, counts: Vec<u64>, start: f64) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(Error::InvalidParameter(format!("bin width {bin_width} must be positive")));
        }
        Ok(Self { bin_width, counts, start })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Start time of bin `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        self.start + i as f64 * self.bin_width
    }

    pub fn mean_rate(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        self.counts.iter().sum::<u64>() as f64 / (self.counts.len() as f64 * self.bin_width)
    }
}
