//! Polarization-resolved fluorescence of an NV center and orientation
//! classification from measured analyzer scans.
//!
//! The NV emits through two degenerate, mutually incoherent dipoles spanning
//! the plane normal to its axis `n`. Whatever the collection optics, the power
//! behind a linear analyzer at angle θ is a quadratic form `û(θ)ᵀ M û(θ)` of the
//! 2×2 in-plane coherency matrix `M` of the collimated field, so every model
//! here reduces to computing `M`:
//!
//! * `Projection`: `M = I₂ − n⊥ n⊥ᵀ`, i.e. `I(θ) = 1 − (n·û)²`.
//! * `HighNaNumeric`: far fields of both dipoles integrated over the
//!   collection cone inside diamond, with Fresnel transmission into the
//!   immersion medium and s/p mapping onto azimuthal/radial pupil directions.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{diff_mod_pi, equivalence_classes_with_offset, wrap_pi, OrientationClass, SurfaceCut};

const UNIT_TOL: f64 = 1e-9;
/// Templates flatter than this carry no azimuth information.
const FLAT_TEMPLATE_VISIBILITY: f64 = 0.05;
const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmissionModel {
    #[default]
    Projection,
    HighNaNumeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmissionConfig {
    pub model: EmissionModel,
    pub numerical_aperture: f64,
    pub immersion_index: f64,
    pub diamond_index: f64,
    /// Emitter depth below the surface in µm. Recorded; the planar-interface
    /// far-field model does not depend on it.
    pub depth_um: f64,
    /// Samples per axis of the (polar, azimuthal) cone grid.
    pub grid: usize,
}

impl Default for EmissionConfig {
    fn default() -> Self {
        Self {
            model: EmissionModel::Projection,
            numerical_aperture: 1.45,
            immersion_index: 1.518,
            diamond_index: 2.42,
            depth_um: 20.0,
            grid: 256,
        }
    }
}

impl EmissionConfig {
    pub fn high_na() -> Self {
        Self { model: EmissionModel::HighNaNumeric, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture <= self.immersion_index) {
            return Err(Error::InvalidParameter(format!(
                "numerical aperture {} must lie in (0, immersion index {}]",
                self.numerical_aperture, self.immersion_index
            )));
        }
        if !(self.immersion_index > 1.0 && self.diamond_index > 1.0) {
            return Err(Error::InvalidParameter("refractive indices must exceed 1".into()));
        }
        if self.grid < 16 {
            return Err(Error::InvalidParameter(format!("grid resolution {} < 16", self.grid)));
        }
        Ok(())
    }
}

/// Fluorescence intensity sampled against analyzer angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolarizationPattern {
    /// Analyzer angles in [0, π), strictly increasing.
    pub angles: Vec<f64>,
    pub intensities: Vec<f64>,
    /// One-sigma counting error per point, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<Vec<f64>>,
}

impl PolarizationPattern {
    pub fn new(angles: Vec<f64>, intensities: Vec<f64>, errors: Option<Vec<f64>>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::Empty("pattern angles"));
        }
        if angles.len() != intensities.len() || errors.as_ref().is_some_and(|e| e.len() != angles.len()) {
            return Err(Error::InvalidParameter("pattern columns differ in length".into()));
        }
        if angles.iter().any(|a| !(0.0..PI).contains(a)) {
            return Err(Error::InvalidParameter("analyzer angles must lie in [0, π)".into()));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter("analyzer angles must be strictly increasing".into()));
        }
        if intensities.iter().any(|i| !i.is_finite() || *i < 0.0) {
            return Err(Error::InvalidParameter("intensities must be finite and non-negative".into()));
        }
        Ok(Self { angles, intensities, errors })
    }

    /// Poisson-counted pattern: errors are √counts (at least 1).
    pub fn from_counts(angles: Vec<f64>, counts: &[u64]) -> Result<Self> {
        let intensities: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let errors = intensities.iter().map(|&c| c.max(1.0).sqrt()).collect();
        Self::new(angles, intensities, Some(errors))
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.intensities.iter().sum::<f64>() / self.len() as f64
    }

    /// Copy scaled to unit mean. Flat-zero patterns are returned unchanged.
    pub fn normalized(&self) -> PolarizationPattern {
        let m = self.mean();
        if m <= 0.0 {
            return self.clone();
        }
        PolarizationPattern {
            angles: self.angles.clone(),
            intensities: self.intensities.iter().map(|i| i / m).collect(),
            errors: self.errors.as_ref().map(|e| e.iter().map(|x| x / m).collect()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_rad,intensity\n");
        for (a, i) in self.angles.iter().zip(&self.intensities) {
            out.push_str(&format!("{a},{i}\n"));
        }
        out
    }

    /// Parse `theta_rad,intensity[,error]` CSV with a header line.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Empty("pattern CSV"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "theta_rad" || cols[1] != "intensity" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header 'theta_rad,intensity', got '{header}'"),
            });
        }
        let with_err = cols.get(2) == Some(&"error");
        let (mut a, mut i, mut e) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let want = if with_err { 3 } else { 2 };
            if f.len() != want {
                return Err(Error::Parse { line: n + 1, msg: format!("expected {want} fields") });
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::Parse { line: n + 1, msg: format!("not a number: '{s}'") })
            };
            a.push(num(f[0])?);
            i.push(num(f[1])?);
            if with_err {
                e.push(num(f[2])?);
            }
        }
        Self::new(a, i, with_err.then_some(e)).map_err(|err| match err {
            Error::Parse { .. } => err,
            other => Error::Parse { line: 0, msg: other.to_string() },
        })
    }
}

/// `n` uniformly spaced analyzer angles over [0, π).
pub fn analyzer_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * PI / n as f64).collect()
}

fn check_axis(axis: &Vector3<f64>) -> Result<()> {
    let norm = axis.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NonUnitAxis(norm));
    }
    Ok(())
}

/// In-plane coherency matrix of the collected, collimated field.
pub fn coherency(axis_lab: &Vector3<f64>, cfg: &EmissionConfig) -> Result<Matrix2<f64>> {
    check_axis(axis_lab)?;
    cfg.validate()?;
    Ok(match cfg.model {
        EmissionModel::Projection => projection_coherency(axis_lab),
        EmissionModel::HighNaNumeric => cone_coherency(axis_lab, cfg),
    })
}

fn projection_coherency(n: &Vector3<f64>) -> Matrix2<f64> {
    let p = Vector2::new(n.x, n.y);
    Matrix2::identity() - p * p.transpose()
}

fn cone_coherency(n: &Vector3<f64>, cfg: &EmissionConfig) -> Matrix2<f64> {
    let n1 = cfg.diamond_index;
    let n2 = cfg.immersion_index;
    // Rays reaching the pupil leave diamond below this polar angle; TIR rays
    // lie beyond sin θ = n2/n1 ≥ NA/n1 and are never collected.
    let theta_max = (cfg.numerical_aperture / n1).asin();
    let q = Matrix3::identity() - n * n.transpose();
    let nt = cfg.grid;
    let np = cfg.grid;
    let dt = theta_max / nt as f64;
    let dp = 2.0 * PI / np as f64;

    let mut m = Matrix2::zeros();
    for it in 0..nt {
        let th = (it as f64 + 0.5) * dt;
        let (st, ct) = th.sin_cos();
        let st2 = n1 * st / n2;
        let ct2 = (1.0 - st2 * st2).sqrt();
        let ts = 2.0 * n1 * ct / (n1 * ct + n2 * ct2);
        let tp = 2.0 * n1 * ct / (n2 * ct + n1 * ct2);
        let power = (n2 * ct2) / (n1 * ct);
        let amp_s = (power * ts * ts).sqrt();
        let amp_p = (power * tp * tp).sqrt();
        let w = st * dt * dp;
        let mut ring = Matrix2::zeros();
        for ip in 0..np {
            let ph = (ip as f64 + 0.5) * dp;
            let (sp, cp) = ph.sin_cos();
            let e_s = Vector3::new(-sp, cp, 0.0);
            let e_p = Vector3::new(ct * cp, ct * sp, -st);
            let pupil_s = Vector2::new(-sp, cp);
            let pupil_r = Vector2::new(cp, sp);
            // L maps a dipole moment to the collimated pupil field.
            let l = amp_s * pupil_s * e_s.transpose() + amp_p * pupil_r * e_p.transpose();
            ring += l * q * l.transpose();
        }
        m += ring * w;
    }
    m
}

fn quad(m: &Matrix2<f64>, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let u = Vector2::new(c, s);
    (u.transpose() * m * u)[(0, 0)].max(0.0)
}

/// Mean of `ûᵀMû` over analyzer angle.
fn coherency_mean(m: &Matrix2<f64>) -> f64 {
    0.5 * m.trace()
}

/// Model intensity at each analyzer angle (unnormalized).
pub fn pattern(axis_lab: &Vector3<f64>, angles: &[f64], cfg: &EmissionConfig) -> Result<PolarizationPattern> {
    if angles.is_empty() {
        return Err(Error::Empty("analyzer angles"));
    }
    let m = coherency(axis_lab, cfg)?;
    let intensities = angles.iter().map(|&t| quad(&m, t)).collect();
    PolarizationPattern::new(angles.to_vec(), intensities, None)
}

/// Unit-mean pattern value at one analyzer angle.
pub fn normalized_value(axis_lab: &Vector3<f64>, theta: f64, cfg: &EmissionConfig) -> Result<f64> {
    let m = coherency(axis_lab, cfg)?;
    Ok(quad(&m, theta) / coherency_mean(&m))
}

/// Precomputed unit-mean pattern of one axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternShape {
    m: Matrix2<f64>,
    mean: f64,
}

impl PatternShape {
    pub fn new(axis_lab: &Vector3<f64>, cfg: &EmissionConfig) -> Result<Self> {
        let m = coherency(axis_lab, cfg)?;
        Ok(Self { m, mean: coherency_mean(&m) })
    }

    pub fn value(&self, theta: f64) -> f64 {
        quad(&self.m, theta) / self.mean
    }

    pub fn visibility(&self) -> f64 {
        let (_, r2, _) = harmonics(&self.m);
        r2 / self.mean
    }

    /// Analyzer angle of maximum transmission, mod π.
    pub fn max_azimuth(&self) -> f64 {
        harmonics(&self.m).2
    }
}

/// (mean, second-harmonic amplitude, azimuth of maximum) of `ûᵀMû`.
fn harmonics(m: &Matrix2<f64>) -> (f64, f64, f64) {
    let a0 = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let c = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let s = m[(0, 1)];
    let r2 = c.hypot(s);
    let phi = if r2 > 0.0 { wrap_pi(0.5 * s.atan2(c)) } else { 0.0 };
    (a0, r2, phi)
}

/// Collected power of an axis relative to the vertical (optical-axis) one.
///
/// The projection model describes pattern shape only and returns 1.
pub fn collection_efficiency(axis_lab: &Vector3<f64>, cfg: &EmissionConfig) -> Result<f64> {
    match cfg.model {
        EmissionModel::Projection => {
            check_axis(axis_lab)?;
            Ok(1.0)
        }
        EmissionModel::HighNaNumeric => {
            let m = coherency(axis_lab, cfg)?;
            let vertical = coherency(&Vector3::z(), cfg)?;
            Ok(m.trace() / vertical.trace())
        }
    }
}

/// Max over analyzer angle of the difference between the unit-mean numeric
/// and projection patterns.
pub fn pattern_numeric_vs_projection(axis_lab: &Vector3<f64>, cfg: &EmissionConfig) -> Result<f64> {
    let numeric = PatternShape::new(axis_lab, &EmissionConfig { model: EmissionModel::HighNaNumeric, ..cfg.clone() })?;
    let proj = PatternShape::new(axis_lab, &EmissionConfig { model: EmissionModel::Projection, ..cfg.clone() })?;
    Ok(analyzer_angles(720).into_iter().map(|t| (numeric.value(t) - proj.value(t)).abs()).fold(0.0, f64::max))
}

/// Least-squares fit of `a0 + r2·cos(2(θ − φ))` to a measured pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternFit {
    pub a0: f64,
    pub r2: f64,
    /// Analyzer angle of maximum transmission, mod π.
    pub azimuth: f64,
    pub visibility: f64,
    pub residual: f64,
    pub sigma_a0: f64,
    pub sigma_visibility: f64,
    pub sigma_azimuth: f64,
    pub points: usize,
}

impl PatternFit {
    pub fn value(&self, theta: f64) -> f64 {
        self.a0 + self.r2 * (2.0 * (theta - self.azimuth)).cos()
    }
}

pub fn fit_pattern(p: &PolarizationPattern) -> Result<PatternFit> {
    fit_pattern_net(p, 0.0)
}

/// Fit after subtracting a known uniform background from every intensity.
pub fn fit_pattern_net(p: &PolarizationPattern, background: f64) -> Result<PatternFit> {
    let n = p.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!("{n} analyzer angles, need at least 5")));
    }
    let span = p.angles[n - 1] - p.angles[0];
    if span < 0.75 * PI - 1e-12 {
        return Err(Error::InsufficientData(format!("angles span {span:.4} rad, need ≥ 3π/4")));
    }
    if p.intensities.iter().all(|&i| i == 0.0) {
        return Err(Error::DegenerateFit("all intensities are zero".into()));
    }

    let rows: Vec<Vector3<f64>> =
        p.angles.iter().map(|&t| Vector3::new(1.0, (2.0 * t).cos(), (2.0 * t).sin())).collect();
    let mut xtx = Matrix3::zeros();
    let mut xty = Vector3::zeros();
    for (x, &y) in rows.iter().zip(&p.intensities) {
        xtx += x * x.transpose();
        xty += x * (y - background);
    }
    let inv = xtx
        .try_inverse()
        .ok_or_else(|| Error::DegenerateFit("analyzer angles do not resolve the second harmonic".into()))?;
    let beta = inv * xty;
    let (a0, c, s) = (beta[0], beta[1], beta[2]);

    let residuals: Vec<f64> = rows.iter().zip(&p.intensities).map(|(x, &y)| y - background - x.dot(&beta)).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();

    // Sandwich covariance with per-point variances.
    let variances: Vec<f64> = match &p.errors {
        Some(e) => e.iter().map(|s| s * s).collect(),
        None => {
            let s2 = if n > 3 { rss / (n - 3) as f64 } else { 0.0 };
            vec![s2; n]
        }
    };
    let mut meat = Matrix3::zeros();
    for (x, v) in rows.iter().zip(&variances) {
        meat += x * x.transpose() * *v;
    }
    let cov = inv * meat * inv;

    let r2 = c.hypot(s);
    let azimuth = if r2 > 0.0 { wrap_pi(0.5 * s.atan2(c)) } else { 0.0 };
    let visibility = if a0 > 0.0 { (r2 / a0).clamp(0.0, 1.0) } else { 0.0 };

    let (sigma_visibility, sigma_azimuth) = if a0 > 0.0 && r2 > 0.0 {
        let gv = Vector3::new(-r2 / (a0 * a0), c / (r2 * a0), s / (r2 * a0));
        let gp = Vector3::new(0.0, -s / (2.0 * r2 * r2), c / (2.0 * r2 * r2));
        ((gv.transpose() * cov * gv)[(0, 0)].max(0.0).sqrt(), (gp.transpose() * cov * gp)[(0, 0)].max(0.0).sqrt())
    } else {
        let sr = cov[(1, 1)].max(cov[(2, 2)]).max(0.0).sqrt();
        (if a0 > 0.0 { sr / a0 } else { f64::INFINITY }, PI)
    };

    Ok(PatternFit {
        a0,
        r2,
        azimuth,
        visibility,
        residual: rss.sqrt(),
        sigma_a0: cov[(0, 0)].max(0.0).sqrt(),
        sigma_visibility,
        sigma_azimuth,
        points: n,
    })
}

/// Visibility and max-transmission azimuth expected for a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Template {
    pub visibility: f64,
    pub azimuth: f64,
}

pub fn class_template(class: &OrientationClass, cfg: &EmissionConfig) -> Result<Template> {
    let s = class.in_plane;
    let axis = Vector3::new(s * class.azimuth.cos(), s * class.azimuth.sin(), (1.0 - s * s).max(0.0).sqrt());
    let shape = PatternShape::new(&axis, cfg)?;
    Ok(Template { visibility: shape.visibility(), azimuth: shape.max_azimuth() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub class: OrientationClass,
    /// Distance (in propagated-error units) to the best template.
    pub distance: f64,
    /// Distance gap between runner-up and best template.
    pub margin: f64,
    /// Best and runner-up were indistinguishable; lowest id was taken.
    pub tie: bool,
}

/// Nearest class template under the projection model.
pub fn classify(fit: &PatternFit, surface: SurfaceCut, azimuth_offset: f64) -> Result<Classification> {
    classify_with(fit, surface, azimuth_offset, &EmissionConfig::default())
}

pub fn classify_with(
    fit: &PatternFit,
    surface: SurfaceCut,
    azimuth_offset: f64,
    cfg: &EmissionConfig,
) -> Result<Classification> {
    if fit.a0 <= 0.0 {
        return Err(Error::DegenerateFit(format!("mean level {} ≤ 0", fit.a0)));
    }
    let sv = fit.sigma_visibility.max(SIGMA_FLOOR);
    let sp = fit.sigma_azimuth.max(SIGMA_FLOOR);
    let mut scored: Vec<(f64, OrientationClass)> = equivalence_classes_with_offset(surface, azimuth_offset)
        .into_iter()
        .map(|class| {
            let t = class_template(&class, cfg)?;
            let mut d2 = ((fit.visibility - t.visibility) / sv).powi(2);
            if t.visibility >= FLAT_TEMPLATE_VISIBILITY {
                d2 += (diff_mod_pi(fit.azimuth, t.azimuth) / sp).powi(2);
            }
            Ok((d2.sqrt(), class))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    let (best_d, best) = scored[0].clone();
    let margin = scored.get(1).map_or(f64::INFINITY, |(d, _)| d - best_d);
    let tie = margin <= 1e-12;
    Ok(Classification { class: best, distance: best_d, margin: if tie { 0.0 } else { margin }, tie })
}
