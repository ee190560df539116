//! Second-order autocorrelation: model, synthesis, histogramming and fitting.
//!
//! Single-emitter model (times in ns):
//!
//! ```text
//! g²(τ) = 1 − (1 + a)·exp(−|τ|/τ1) + a·exp(−|τ|/τ2)
//! ```
//!
//! Uncorrelated background with signal fraction ρ mixes this into
//! `ρ²·g² + 1 − ρ²`. Fits use a free contrast `C` in place of ρ² so the
//! fitted dip depth can be corrected with an independently known ρ.

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2Params {
    /// Bunching amplitude.
    pub a: f64,
    /// Antibunching time, ns.
    pub tau1_ns: f64,
    /// Bunching (shelving) time, ns.
    pub tau2_ns: f64,
}

impl G2Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0) {
            return Err(Error::InvalidParameter(format!("bunching amplitude {} < 0", self.a)));
        }
        if !(self.tau1_ns > 0.0) {
            return Err(Error::InvalidParameter(format!("tau1 {} must be positive", self.tau1_ns)));
        }
        if !(self.tau2_ns > self.tau1_ns) {
            return Err(Error::InvalidParameter(format!("tau2 {} must exceed tau1 {}", self.tau2_ns, self.tau1_ns)));
        }
        Ok(())
    }
}

pub fn g2_model(tau_ns: f64, p: &G2Params) -> f64 {
    let t = tau_ns.abs();
    1.0 - (1.0 + p.a) * (-t / p.tau1_ns).exp() + p.a * (-t / p.tau2_ns).exp()
}

/// g² seen with an uncorrelated background at signal fraction `rho`.
pub fn mix_background(g: f64, rho: f64) -> f64 {
    rho * rho * g + 1.0 - rho * rho
}

/// Remove uncorrelated background from a measured g² value.
pub fn background_correct(g_meas: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidParameter(format!("signal fraction {rho} outside (0, 1]")));
    }
    let r2 = rho * rho;
    Ok((g_meas - (1.0 - r2)) / r2)
}

/// Model with a free dip contrast: `1 − C·[(1+a)e^(−|τ|/τ1) − a·e^(−|τ|/τ2)]`.
fn g2_contrast(tau_ns: f64, p: &G2Params, contrast: f64) -> f64 {
    1.0 - contrast * (1.0 - g2_model(tau_ns, p))
}

/// Transition rates (1/ns) of a ground / excited / shelving-state emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeLevelRates {
    pub excite: f64,
    pub radiative: f64,
    pub to_shelf: f64,
    pub from_shelf: f64,
}

impl ThreeLevelRates {
    /// Rates whose excited-state return probability reproduces `g2_model`.
    ///
    /// With λ1 = 1/τ1, λ2 = 1/τ2 the eigenvalues fix the trace and the
    /// product of the rate matrix, and the initial slope of g² fixes the
    /// shelf decay `w = λ1λ2 / ((1+a)λ1 − aλ2)`. The remaining freedom
    /// (overall emission rate) is set by equal excitation and shelving rates.
    pub fn from_params(p: &G2Params) -> Result<Self> {
        p.validate()?;
        let l1 = 1.0 / p.tau1_ns;
        let l2 = 1.0 / p.tau2_ns;
        if p.a == 0.0 {
            return Ok(Self { excite: l1 / 2.0, radiative: l1 / 2.0, to_shelf: 0.0, from_shelf: l2 });
        }
        let w = l1 * l2 / ((1.0 + p.a) * l1 - p.a * l2);
        let sum = l1 + l2 - w;
        let prod = (l1 - w) * (l2 - w);
        let x = prod.sqrt();
        Ok(Self { excite: x, radiative: sum - 2.0 * x, to_shelf: x, from_shelf: w })
    }

    /// Steady-state excited population.
    pub fn excited_population(&self) -> f64 {
        let (x, y, z, w) = (self.excite, self.radiative, self.to_shelf, self.from_shelf);
        let d = x * z + x * w + y * w + z * w;
        x * w / d
    }

    /// Emitted photons per second at steady state.
    pub fn emission_rate_hz(&self) -> f64 {
        self.radiative * self.excited_population() * 1e9
    }
}

/// Parameters of a synthetic HBT acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub params: G2Params,
    /// Detected emitter photons per second.
    pub signal_rate: f64,
    /// Uncorrelated background photons per second.
    pub background_rate: f64,
    pub duration_s: f64,
    /// Share of the signal from a second, independent emitter of the same kind.
    #[serde(default)]
    pub companion_fraction: f64,
}

impl StreamSpec {
    pub fn signal_fraction(&self) -> f64 {
        let total = self.signal_rate + self.background_rate;
        if total > 0.0 {
            self.signal_rate / total
        } else {
            1.0
        }
    }

    /// Background-corrected g²(0) implied by the companion share.
    pub fn expected_corrected_g2_zero(&self) -> f64 {
        let f = self.companion_fraction;
        2.0 * f * (1.0 - f)
    }
}

/// Sorted arrival times (ns) of one emitter plus Poisson background.
pub fn simulate_photon_stream<R: Rng + ?Sized>(
    params: &G2Params,
    signal_rate: f64,
    background_rate: f64,
    duration_s: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    simulate_photon_stream_with(
        &StreamSpec { params: *params, signal_rate, background_rate, duration_s, companion_fraction: 0.0 },
        rng,
    )
}

pub fn simulate_photon_stream_with<R: Rng + ?Sized>(spec: &StreamSpec, rng: &mut R) -> Result<Vec<f64>> {
    if !(spec.signal_rate >= 0.0 && spec.background_rate >= 0.0) {
        return Err(Error::InvalidParameter("photon rates must be non-negative".into()));
    }
    if !(0.0..=0.5).contains(&spec.companion_fraction) {
        return Err(Error::InvalidParameter("companion fraction must lie in [0, 0.5]".into()));
    }
    let rates = ThreeLevelRates::from_params(&spec.params)?;
    let horizon = spec.duration_s.max(0.0) * 1e9;
    let mut out = Vec::new();
    if horizon <= 0.0 {
        return Ok(out);
    }
    let f = spec.companion_fraction;
    emit(&rates, spec.signal_rate * (1.0 - f), horizon, rng, &mut out)?;
    if f > 0.0 {
        emit(&rates, spec.signal_rate * f, horizon, rng, &mut out)?;
    }
    if spec.background_rate > 0.0 {
        let k = spec.background_rate * 1e-9;
        let mut t = 0.0;
        loop {
            t += rng.sample::<f64, _>(Exp1) / k;
            if t >= horizon {
                break;
            }
            out.push(t);
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

fn emit<R: Rng + ?Sized>(
    rates: &ThreeLevelRates,
    detected_rate: f64,
    horizon: f64,
    rng: &mut R,
    out: &mut Vec<f64>,
) -> Result<()> {
    if detected_rate <= 0.0 {
        return Ok(());
    }
    let efficiency = detected_rate / rates.emission_rate_hz();
    if efficiency > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "signal rate {detected_rate:.3e}/s exceeds emitter saturation {:.3e}/s",
            rates.emission_rate_hz()
        )));
    }
    let leave_excited = rates.radiative + rates.to_shelf;
    let p_radiative = rates.radiative / leave_excited;
    let mut t = 0.0;
    loop {
        // ground → excited
        t += rng.sample::<f64, _>(Exp1) / rates.excite;
        t += rng.sample::<f64, _>(Exp1) / leave_excited;
        if t >= horizon {
            break;
        }
        if rng.random::<f64>() < p_radiative {
            if rng.random::<f64>() < efficiency {
                out.push(t);
            }
        } else {
            t += rng.sample::<f64, _>(Exp1) / rates.from_shelf;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Every (start, stop) pair within the delay window.
    #[default]
    Full,
    /// Only the first stop after each start, on each detector.
    StartStop,
}

/// Coincidence histogram with bins centred on `k·bin_width`, k = −K..=K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HbtHistogram {
    pub bin_width_ns: f64,
    pub centers_ns: Vec<f64>,
    pub counts: Vec<u64>,
    pub acquisition_s: f64,
    /// Expected uncorrelated coincidences per bin.
    pub accidental: f64,
    pub mode: CorrelationMode,
}

impl HbtHistogram {
    fn empty(bin_width_ns: f64, max_delay_ns: f64, mode: CorrelationMode) -> Result<Self> {
        if !(bin_width_ns > 0.0 && max_delay_ns >= bin_width_ns) {
            return Err(Error::InvalidParameter("need 0 < bin width ≤ max delay".into()));
        }
        let k = (max_delay_ns / bin_width_ns).round() as i64;
        let centers_ns = (-k..=k).map(|i| i as f64 * bin_width_ns).collect::<Vec<_>>();
        let counts = vec![0; centers_ns.len()];
        Ok(Self { bin_width_ns, centers_ns, counts, acquisition_s: 0.0, accidental: 0.0, mode })
    }

    pub fn edges_ns(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.centers_ns.iter().map(|c| c - 0.5 * self.bin_width_ns).collect();
        e.push(self.centers_ns.last().copied().unwrap_or(0.0) + 0.5 * self.bin_width_ns);
        e
    }

    pub fn g2_norm(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| if self.accidental > 0.0 { c as f64 / self.accidental } else { 0.0 }).collect()
    }

    /// Noiseless histogram of the contrast model.
    pub fn from_model(
        p: &G2Params,
        contrast: f64,
        bin_width_ns: f64,
        max_delay_ns: f64,
        accidental: f64,
    ) -> Result<Self> {
        let mut h = Self::empty(bin_width_ns, max_delay_ns, CorrelationMode::Full)?;
        h.accidental = accidental;
        h.counts = h.centers_ns.iter().map(|&t| (g2_contrast(t, p, contrast) * accidental).round() as u64).collect();
        Ok(h)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau_ns,coincidences,g2_norm\n");
        for ((t, c), g) in self.centers_ns.iter().zip(&self.counts).zip(self.g2_norm()) {
            s.push_str(&format!("{t},{c},{g}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "tau_ns,coincidences,g2_norm" => {}
            _ => return Err(Error::Parse { line: 1, msg: "expected header 'tau_ns,coincidences,g2_norm'".into() }),
        }
        let (mut taus, mut counts, mut gs) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |m: &str| Error::Parse { line: n + 1, msg: m.to_string() };
            if f.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            taus.push(f[0].parse::<f64>().map_err(|_| bad("bad tau"))?);
            counts.push(f[1].parse::<u64>().map_err(|_| bad("bad coincidence count"))?);
            gs.push(f[2].parse::<f64>().map_err(|_| bad("bad g2 value"))?);
        }
        if taus.len() < 2 {
            return Err(Error::Parse { line: 0, msg: "histogram needs at least two bins".into() });
        }
        let w = taus[1] - taus[0];
        let (sc, sg) = counts.iter().zip(&gs).fold((0.0, 0.0), |(a, b), (&c, &g)| (a + c as f64, b + g));
        let accidental = if sg > 0.0 { sc / sg } else { 0.0 };
        Ok(Self {
            bin_width_ns: w,
            centers_ns: taus,
            counts,
            acquisition_s: 0.0,
            accidental,
            mode: CorrelationMode::Full,
        })
    }

    fn bin_of(&self, delay: f64) -> Option<usize> {
        let k = (self.centers_ns.len() / 2) as i64;
        let i = (delay / self.bin_width_ns).round() as i64;
        (-k..=k).contains(&i).then(|| (i + k) as usize)
    }
}

/// Split a stream onto two detectors at random and histogram their delays.
///
/// The acquisition time is taken as the last arrival time; streams start at 0.
pub fn histogram_coincidences<R: Rng + ?Sized>(
    stream: &[f64],
    splitter: &mut R,
    bin_width_ns: f64,
    max_delay_ns: f64,
    mode: CorrelationMode,
) -> Result<HbtHistogram> {
    if stream.is_empty() {
        return Err(Error::Empty("photon stream"));
    }
    let mut h = HbtHistogram::empty(bin_width_ns, max_delay_ns, mode)?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &t in stream {
        if splitter.random::<bool>() {
            a.push(t);
        } else {
            b.push(t);
        }
    }
    let reach = (h.centers_ns.len() / 2) as f64 * bin_width_ns + 0.5 * bin_width_ns;
    match mode {
        CorrelationMode::Full => {
            let mut lo = 0usize;
            for &ta in &a {
                while lo < b.len() && b[lo] < ta - reach {
                    lo += 1;
                }
                let mut j = lo;
                while j < b.len() && b[j] < ta + reach {
                    if let Some(i) = h.bin_of(b[j] - ta) {
                        h.counts[i] += 1;
                    }
                    j += 1;
                }
            }
        }
        CorrelationMode::StartStop => {
            // A starts → positive delays, B starts → negative delays
            for (starts, stops, sign) in [(&a, &b, 1.0), (&b, &a, -1.0)] {
                let mut j = 0usize;
                for &t0 in starts.iter() {
                    while j < stops.len() && stops[j] <= t0 {
                        j += 1;
                    }
                    if let Some(&t1) = stops.get(j) {
                        let d = t1 - t0;
                        if d < reach && (sign > 0.0 || d > 0.5 * bin_width_ns) {
                            if let Some(i) = h.bin_of(sign * d) {
                                h.counts[i] += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let t_ns = stream.last().copied().unwrap_or(0.0).max(bin_width_ns);
    h.acquisition_s = t_ns * 1e-9;
    h.accidental = a.len() as f64 * b.len() as f64 * bin_width_ns / t_ns;
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2Fit {
    pub params: G2Params,
    /// Fitted dip contrast; equals ρ² for a single emitter.
    pub contrast: f64,
    /// Fitted g²(0) including background, `1 − contrast`.
    pub g2_zero: f64,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

const MAX_ITER: usize = 400;

fn jacobian_row(t: f64, th: &Vector4<f64>) -> (f64, Vector4<f64>) {
    let (c, a, t1, t2) = (th[0], th[1], th[2], th[3]);
    let x = t.abs();
    let e1 = (-x / t1).exp();
    let e2 = (-x / t2).exp();
    let shape = (1.0 + a) * e1 - a * e2;
    let f = 1.0 - c * shape;
    let d = Vector4::new(-shape, -c * (e1 - e2), -c * (1.0 + a) * e1 * x / (t1 * t1), c * a * e2 * x / (t2 * t2));
    (f, d)
}

fn project(th: &mut Vector4<f64>) {
    th[0] = th[0].clamp(0.0, 2.0);
    th[1] = th[1].clamp(0.0, 1e3);
    th[2] = th[2].max(1e-3);
    th[3] = th[3].max(th[2] * (1.0 + 1e-6));
}

struct Data {
    tau: Vec<f64>,
    y: Vec<f64>,
    inv_sigma: Vec<f64>,
}

fn chi2(d: &Data, th: &Vector4<f64>) -> f64 {
    d.tau.iter().zip(&d.y).zip(&d.inv_sigma).map(|((&t, &y), &w)| ((y - jacobian_row(t, th).0) * w).powi(2)).sum()
}

fn levenberg_marquardt(d: &Data, mut th: Vector4<f64>) -> (Vector4<f64>, f64, usize, bool) {
    project(&mut th);
    let mut cur = chi2(d, &th);
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITER {
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for ((&t, &y), &w) in d.tau.iter().zip(&d.y).zip(&d.inv_sigma) {
            let (f, g) = jacobian_row(t, &th);
            let gw = g * w;
            jtj += gw * gw.transpose();
            jtr += gw * ((y - f) * w);
        }
        loop {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                if lambda > 1e15 {
                    return (th, cur, it, true);
                }
                continue;
            };
            let mut trial = th + step;
            project(&mut trial);
            let next = chi2(d, &trial);
            if next <= cur {
                let gain = cur - next;
                th = trial;
                cur = next;
                lambda = (lambda / 3.0).max(1e-12);
                if gain <= 1e-12 * cur.max(1e-300) || step.norm() <= 1e-12 * th.norm() {
                    return (th, cur, it, true);
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e15 {
                // no descent direction left: stationary point
                return (th, cur, it, true);
            }
        }
    }
    (th, cur, MAX_ITER, false)
}

/// Weighted least-squares fit of the contrast model to a coincidence histogram.
pub fn fit_g2(h: &HbtHistogram) -> Result<G2Fit> {
    let n = h.centers_ns.len();
    if n < 20 {
        return Err(Error::InsufficientData(format!("{n} histogram bins, need at least 20")));
    }
    if !(h.accidental > 0.0) {
        return Err(Error::DegenerateFit("histogram has no coincidences".into()));
    }
    let y = h.g2_norm();
    let inv_sigma: Vec<f64> = h.counts.iter().map(|&c| h.accidental / (c.max(1) as f64).sqrt()).collect();
    let data = Data { tau: h.centers_ns.clone(), y: y.clone(), inv_sigma };

    // starting point from the central dip and the bunching shoulder
    let mid = n / 2;
    let dip = (y[mid - 1] + y[mid] + y[mid + 1]) / 3.0;
    let c0 = (1.0 - dip).clamp(0.0, 1.0);
    let target = 1.0 - c0 / std::f64::consts::E;
    let half = |i: usize| 0.5 * (y[mid + i] + y[mid - i]);
    let rise = (1..=mid).find(|&i| half(i) >= target).unwrap_or(mid.min(5));
    let tau1_0 = (rise as f64 * h.bin_width_ns).max(h.bin_width_ns);
    let peak = (1..=mid).map(half).fold(f64::MIN, f64::max);
    let a0 = if c0 > 0.05 { ((peak - 1.0).max(0.0) / c0).min(10.0) } else { 0.0 };

    let mut best: Option<(Vector4<f64>, f64, usize, bool)> = None;
    for mult in [3.0, 10.0, 30.0] {
        let start = Vector4::new(c0, a0, tau1_0, tau1_0 * mult);
        let r = levenberg_marquardt(&data, start);
        if best.as_ref().is_none_or(|b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (th, chi, iterations, converged) = best.expect("at least one start");
    let params = G2Params { a: th[1], tau1_ns: th[2], tau2_ns: th[3] };
    let span = h.centers_ns[n - 1];
    if span < 5.0 * params.tau1_ns {
        return Err(Error::InsufficientData(format!(
            "histogram spans ±{span} ns, need ≥ 5·τ1 = {} ns",
            5.0 * params.tau1_ns
        )));
    }
    Ok(G2Fit {
        params,
        contrast: th[0],
        g2_zero: 1.0 - th[0],
        chi2: chi,
        reduced_chi2: chi / (n as f64 - 4.0),
        iterations,
        converged,
    })
}
