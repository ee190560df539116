//! Lateral confocal scan synthesis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub x: f64,
    pub y: f64,
    /// Integrated counts per second.
    pub brightness: f64,
}

/// Rectangular scan window in µm; both corners are sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    fn pixels(&self, pitch: f64) -> Result<(usize, usize)> {
        if !(pitch > 0.0) {
            return Err(Error::InvalidParameter(format!("pixel pitch {pitch} must be positive")));
        }
        if !(self.x1 > self.x0 && self.y1 > self.y0) {
            return Err(Error::Empty("scan region"));
        }
        let n = |span: f64| (span / pitch + 1e-9).floor() as usize + 1;
        Ok((n(self.x1 - self.x0), n(self.y1 - self.y0)))
    }
}

/// Row-major intensity map; row `j` is `y0 + j·pitch`, column `i` is `x0 + i·pitch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfocalImage {
    pub region: Region,
    pub pitch: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ConfocalImage {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn position(&self, col: usize, row: usize) -> (f64, f64) {
        (self.region.x0 + col as f64 * self.pitch, self.region.y0 + row as f64 * self.pitch)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Pixels above `threshold` that dominate their 8-neighbourhood.
    ///
    /// Plateaus resolve to a single pixel: a candidate must strictly exceed
    /// neighbours that precede it in row-major order.
    pub fn local_maxima(&self, threshold: f64) -> Vec<(usize, usize)> {
        let (w, h) = (self.width as i64, self.height as i64);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let v = self.data[(r * w + c) as usize];
                if v <= threshold {
                    continue;
                }
                let mut peak = true;
                'n: for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= h || cc >= w {
                            continue;
                        }
                        let u = self.data[(rr * w + cc) as usize];
                        let earlier = (rr, cc) < (r, c);
                        if u > v || (earlier && u == v) {
                            peak = false;
                            break 'n;
                        }
                    }
                }
                if peak {
                    out.push((c as usize, r as usize));
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.data.len() * 12);
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary 16-bit PGM scaled so the brightest pixel maps to 65535.
    pub fn to_pgm16(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        let (lo, hi) = (self.min().min(0.0), self.max());
        let scale = if hi > lo { 65535.0 / (hi - lo) } else { 0.0 };
        for &v in &self.data {
            let q = ((v - lo) * scale).round().clamp(0.0, 65535.0) as u16;
            out.extend_from_slice(&q.to_be_bytes());
        }
        out
    }
}

/// Sum of unit-flux Gaussian spots scaled by brightness, plus a uniform background.
///
/// Each pixel holds counts/s collected over its `pitch²` footprint, so the
/// image total approximates the summed brightness plus background.
pub fn synthesize_confocal_image(
    emitters: &[Emitter],
    psf_sigma: f64,
    region: Region,
    pitch: f64,
    background: f64,
) -> Result<ConfocalImage> {
    if !(psf_sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("PSF sigma {psf_sigma} must be positive")));
    }
    let (width, height) = region.pixels(pitch)?;
    let norm = pitch * pitch / (2.0 * std::f64::consts::PI * psf_sigma * psf_sigma);
    let inv = 1.0 / (2.0 * psf_sigma * psf_sigma);
    let reach = 8.0 * psf_sigma;
    let mut data = vec![background; width * height];
    for e in emitters {
        let lo_c = (((e.x - reach - region.x0) / pitch).floor().max(0.0)) as usize;
        let hi_c = (((e.x + reach - region.x0) / pitch).ceil().max(-1.0) + 1.0) as usize;
        let lo_r = (((e.y - reach - region.y0) / pitch).floor().max(0.0)) as usize;
        let hi_r = (((e.y + reach - region.y0) / pitch).ceil().max(-1.0) + 1.0) as usize;
        for r in lo_r..hi_r.min(height) {
            let dy = region.y0 + r as f64 * pitch - e.y;
            for c in lo_c..hi_c.min(width) {
                let dx = region.x0 + c as f64 * pitch - e.x;
                data[r * width + c] += e.brightness * norm * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Ok(ConfocalImage { region, pitch, width, height, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_emitter_peaks_at_center() {
        let img = synthesize_confocal_image(
            &[Emitter { x: 5.0, y: 5.0, brightness: 1e4 }],
            0.25,
            Region::new(0.0, 0.0, 10.0, 10.0),
            0.1,
            10.0,
        )
        .unwrap();
        assert_eq!((img.width, img.height), (101, 101));
        let (i, _) = img.data.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(i, 50 * 101 + 50);
        assert_eq!(img.local_maxima(20.0), vec![(50, 50)]);
    }

    #[test]
    fn flux_matches_brightness() {
        let img = synthesize_confocal_image(
            &[Emitter { x: 2.0, y: 3.0, brightness: 7e3 }],
            0.3,
            Region::new(0.0, 0.0, 5.0, 5.0),
            0.05,
            0.0,
        )
        .unwrap();
        assert!((img.total() / 7e3 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_of_nine() {
        let ems: Vec<Emitter> = (0..3)
            .flat_map(|i| (0..3).map(move |j| Emitter { x: 10.0 * i as f64, y: 10.0 * j as f64, brightness: 5e4 }))
            .collect();
        let img = synthesize_confocal_image(&ems, 0.25, Region::new(-5.0, -5.0, 25.0, 25.0), 0.25, 100.0).unwrap();
        let thr = 100.0 + 0.1 * (img.max() - 100.0);
        let mut found: Vec<(f64, f64)> = img.local_maxima(thr).into_iter().map(|(c, r)| img.position(c, r)).collect();
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(found.len(), 9);
        for (k, (x, y)) in found.iter().enumerate() {
            assert!((x - 10.0 * (k / 3) as f64).abs() < 1e-9);
            assert!((y - 10.0 * (k % 3) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_and_uniform() {
        let img = synthesize_confocal_image(&[], 0.25, Region::new(0.0, 0.0, 1.0, 2.0), 0.5, 3.0).unwrap();
        assert!(img.data.iter().all(|&v| v == 3.0));
        assert_eq!((img.width, img.height), (3, 5));
        assert!(img.local_maxima(3.0).is_empty());
        assert!(synthesize_confocal_image(&[], 0.25, Region::new(1.0, 0.0, 1.0, 2.0), 0.5, 0.0).is_err());
        assert!(synthesize_confocal_image(&[], 0.0, Region::new(0.0, 0.0, 1.0, 2.0), 0.5, 0.0).is_err());
        assert!(synthesize_confocal_image(&[], 0.2, Region::new(0.0, 0.0, 1.0, 2.0), -0.5, 0.0).is_err());
    }

    #[test]
    fn plateau_yields_one_maximum() {
        let img = ConfocalImage {
            region: Region::new(0.0, 0.0, 2.0, 2.0),
            pitch: 1.0,
            width: 3,
            height: 3,
            data: vec![1.0; 9],
        };
        assert_eq!(img.local_maxima(0.0), vec![(0, 0)]);
    }

    #[test]
    fn exports() {
        let img = synthesize_confocal_image(
            &[Emitter { x: 0.5, y: 0.5, brightness: 1.0 }],
            0.25,
            Region::new(0.0, 0.0, 1.0, 1.0),
            0.5,
            0.0,
        )
        .unwrap();
        let csv = img.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().all(|l| l.split(',').count() == 3));
        let pgm = img.to_pgm16();
        let header = b"P5\n3 3\n65535\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 18);
        let center = u16::from_be_bytes([pgm[header.len() + 8], pgm[header.len() + 9]]);
        assert_eq!(center, 65535);
    }
}
