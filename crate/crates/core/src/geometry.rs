//! NV orientation axes, diamond surface cuts and the lab frame.
//!
//! Lab frame: z is the outward surface normal (towards the objective).
//! For the (111) cut the in-plane x axis is chosen so that the projection of
//! the [-1-11] axis lies at azimuth 0; for the (100) cut x runs along [011].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SAME_CLASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum SurfaceCut {
    #[serde(rename = "100")]
    Cut100,
    #[serde(rename = "111")]
    Cut111,
}

impl<'de> Deserialize<'de> for SurfaceCut {
    /// Accepts "100", "(111)" or a bare integer such as 111.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Number(u64),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Text(s) => s,
            Raw::Number(n) => n.to_string(),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

impl SurfaceCut {
    /// Rotation taking crystal-frame vectors to the lab frame.
    pub fn crystal_to_lab(self) -> Matrix3<f64> {
        let (x, y, z) = match self {
            SurfaceCut::Cut111 => (
                Vector3::new(-1.0, -1.0, 2.0) / 6f64.sqrt(),
                Vector3::new(1.0, -1.0, 0.0) / 2f64.sqrt(),
                Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt(),
            ),
            SurfaceCut::Cut100 => (
                Vector3::new(0.0, 1.0, 1.0) / 2f64.sqrt(),
                Vector3::new(0.0, -1.0, 1.0) / 2f64.sqrt(),
                Vector3::new(1.0, 0.0, 0.0),
            ),
        };
        Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
    }

    pub fn label(self) -> &'static str {
        match self {
            SurfaceCut::Cut100 => "100",
            SurfaceCut::Cut111 => "111",
        }
    }
}

impl fmt::Display for SurfaceCut {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SurfaceCut {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().trim_start_matches('(').trim_end_matches(')') {
            "100" => Ok(SurfaceCut::Cut100),
            "111" => Ok(SurfaceCut::Cut111),
            other => Err(Error::InvalidParameter(format!("unknown surface cut '{other}'"))),
        }
    }
}

/// One of the four <111> directions an NV pair can occupy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NvAxis {
    #[serde(rename = "[111]")]
    A111,
    #[serde(rename = "[1-1-1]")]
    A1m1m1,
    #[serde(rename = "[-1-11]")]
    Am1m11,
    #[serde(rename = "[-11-1]")]
    Am11m1,
}

impl NvAxis {
    pub const ALL: [NvAxis; 4] = [NvAxis::A111, NvAxis::A1m1m1, NvAxis::Am1m11, NvAxis::Am11m1];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<NvAxis> {
        NvAxis::ALL.get(i).copied()
    }

    /// Miller direction, integer components.
    pub fn miller(self) -> [i8; 3] {
        match self {
            NvAxis::A111 => [1, 1, 1],
            NvAxis::A1m1m1 => [1, -1, -1],
            NvAxis::Am1m11 => [-1, -1, 1],
            NvAxis::Am11m1 => [-1, 1, -1],
        }
    }

    /// Unit vector in the crystal frame.
    pub fn crystal_vector(self) -> Vector3<f64> {
        let [a, b, c] = self.miller();
        Vector3::new(a as f64, b as f64, c as f64) / 3f64.sqrt()
    }

    pub fn label(self) -> &'static str {
        match self {
            NvAxis::A111 => "[111]",
            NvAxis::A1m1m1 => "[1-1-1]",
            NvAxis::Am1m11 => "[-1-11]",
            NvAxis::Am11m1 => "[-11-1]",
        }
    }
}

impl fmt::Display for NvAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for NvAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        NvAxis::ALL
            .into_iter()
            .find(|a| a.label() == t || a.label().trim_matches(|c| c == '[' || c == ']') == t)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown NV axis '{t}'")))
    }
}

/// Lab-frame vector of an axis before sign canonicalization (N->V sense kept).
pub fn raw_lab_vector(surface: SurfaceCut, axis: NvAxis) -> Vector3<f64> {
    surface.crystal_to_lab() * axis.crystal_vector()
}

/// Axis direction in the lab frame, sign chosen so that z >= 0.
///
/// A dipole pattern only depends on the line, not the sense, of the axis.
pub fn lab_vector(surface: SurfaceCut, axis: NvAxis) -> Vector3<f64> {
    canonical(raw_lab_vector(surface, axis))
}

fn canonical(v: Vector3<f64>) -> Vector3<f64> {
    if v.z < 0.0 {
        -v
    } else {
        v
    }
}

pub fn axes_in_lab(surface: SurfaceCut) -> [(NvAxis, Vector3<f64>); 4] {
    NvAxis::ALL.map(|a| (a, lab_vector(surface, a)))
}

/// Same as [`axes_in_lab`] with the lab frame rotated about z by `azimuth_offset`.
pub fn axes_in_lab_with_offset(surface: SurfaceCut, azimuth_offset: f64) -> [(NvAxis, Vector3<f64>); 4] {
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), azimuth_offset);
    NvAxis::ALL.map(|a| (a, canonical(rot * raw_lab_vector(surface, a))))
}

/// Reduce an angle to [0, π).
pub fn wrap_pi(angle: f64) -> f64 {
    let r = angle.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

/// Signed smallest difference of two angles taken mod π, in [-π/2, π/2).
pub fn diff_mod_pi(a: f64, b: f64) -> f64 {
    (a - b + PI / 2.0).rem_euclid(PI) - PI / 2.0
}

/// Orientations that give indistinguishable polarization patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientationClass {
    /// 1-based, assigned in order of first member in [`NvAxis::ALL`].
    pub id: u8,
    pub members: Vec<NvAxis>,
    /// In-plane azimuth of the axis projection, mod π.
    pub azimuth: f64,
    /// Angle between the representative axis (N->V sense) and the optical axis.
    pub polar_angle: f64,
    /// Length of the in-plane projection of the unit axis.
    pub in_plane: f64,
}

impl OrientationClass {
    pub fn contains(&self, axis: NvAxis) -> bool {
        self.members.contains(&axis)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

pub fn equivalence_classes(surface: SurfaceCut) -> Vec<OrientationClass> {
    equivalence_classes_with_offset(surface, 0.0)
}

/// Partition the four axes by (in-plane magnitude, azimuth mod π).
pub fn equivalence_classes_with_offset(surface: SurfaceCut, azimuth_offset: f64) -> Vec<OrientationClass> {
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), azimuth_offset);
    let mut classes: Vec<OrientationClass> = Vec::new();
    for axis in NvAxis::ALL {
        let raw = rot * raw_lab_vector(surface, axis);
        let s = raw.x.hypot(raw.y);
        let az = if s < SAME_CLASS_TOL { 0.0 } else { wrap_pi(raw.y.atan2(raw.x)) };
        let existing = classes.iter_mut().find(|c| {
            (c.in_plane - s).abs() < SAME_CLASS_TOL
                && (s < SAME_CLASS_TOL || diff_mod_pi(c.azimuth, az).abs() < SAME_CLASS_TOL)
        });
        match existing {
            Some(c) => c.members.push(axis),
            None => classes.push(OrientationClass {
                id: classes.len() as u8 + 1,
                members: vec![axis],
                azimuth: az,
                polar_angle: raw.z.clamp(-1.0, 1.0).acos(),
                in_plane: s,
            }),
        }
    }
    classes
}

/// Id of the class containing `axis`.
pub fn class_of(surface: SurfaceCut, axis: NvAxis) -> u8 {
    equivalence_classes(surface)
        .into_iter()
        .find(|c| c.contains(axis))
        .map(|c| c.id)
        .expect("classes partition all four axes")
}

pub fn class_by_id(surface: SurfaceCut, id: u8) -> Option<OrientationClass> {
    equivalence_classes(surface).into_iter().find(|c| c.id == id)
}

/// Magnetometry gain of an array over a randomly oriented one, where each
/// class would hold a quarter of the centers.
pub fn sensitivity_gain(fraction_in_addressed_class: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fraction_in_addressed_class) {
        return Err(Error::InvalidParameter(format!(
            "addressed fraction {fraction_in_addressed_class} outside [0, 1]"
        )));
    }
    Ok(fraction_in_addressed_class / 0.25)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn crystal_axes_are_unit_and_tetrahedral() {
        // oracle: integer dot products of (±1,±1,±1) divided by 3
        for a in NvAxis::ALL {
            assert!(close(a.crystal_vector().norm(), 1.0, 1e-12));
            for b in NvAxis::ALL {
                if a == b {
                    continue;
                }
                let [a0, a1, a2] = a.miller();
                let [b0, b1, b2] = b.miller();
                let int_dot = (a0 * b0 + a1 * b1 + a2 * b2) as f64;
                assert_eq!(int_dot, -1.0);
                assert!(close(a.crystal_vector().dot(&b.crystal_vector()), -1.0 / 3.0, 1e-12));
            }
        }
    }

    #[test]
    fn rotations_are_proper_orthonormal() {
        for s in [SurfaceCut::Cut100, SurfaceCut::Cut111] {
            let r = s.crystal_to_lab();
            assert!(close(r.determinant(), 1.0, 1e-12));
            let rrt = r * r.transpose();
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!(close(rrt[(i, j)], e, 1e-12));
                }
            }
        }
    }

    #[test]
    fn cut111_vertical_axis() {
        let v = lab_vector(SurfaceCut::Cut111, NvAxis::A111);
        assert!(close(v.x, 0.0, 1e-12) && close(v.y, 0.0, 1e-12) && close(v.z, 1.0, 1e-12));
        let am = raw_lab_vector(SurfaceCut::Cut111, NvAxis::Am1m11);
        assert!(close(am.y.atan2(am.x), 0.0, 1e-12));
    }

    #[test]
    fn cut100_axes_share_z_component() {
        for (_, v) in axes_in_lab(SurfaceCut::Cut100) {
            assert!(close(v.norm(), 1.0, 1e-12));
            assert!(close(v.z, 1.0 / 3f64.sqrt(), 1e-12));
            assert!(close(v.x.hypot(v.y), (2.0f64 / 3.0).sqrt(), 1e-12));
        }
        let v = lab_vector(SurfaceCut::Cut100, NvAxis::A111);
        assert!(close(v.z, 0.57735, 1e-5));
        assert!(close(v.x.hypot(v.y), 0.81650, 1e-5));
    }

    #[test]
    fn cut100_has_two_classes() {
        let cls = equivalence_classes(SurfaceCut::Cut100);
        assert_eq!(cls.len(), 2);
        assert_eq!(cls[0].members, vec![NvAxis::A111, NvAxis::A1m1m1]);
        assert_eq!(cls[1].members, vec![NvAxis::Am1m11, NvAxis::Am11m1]);
        assert!(close(diff_mod_pi(cls[0].azimuth, cls[1].azimuth).abs(), PI / 2.0, 1e-12));
    }

    #[test]
    fn cut111_has_four_singletons() {
        let cls = equivalence_classes(SurfaceCut::Cut111);
        assert_eq!(cls.len(), 4);
        assert!(cls.iter().all(|c| c.size() == 1));
        assert_eq!(cls[0].members, vec![NvAxis::A111]);
        assert!(close(cls[0].polar_angle, 0.0, 1e-12));
        for c in &cls[1..] {
            assert!(close(c.polar_angle, (-1.0f64 / 3.0).acos(), 1e-12));
            assert!(close(c.polar_angle, 1.91063, 1e-5));
        }
        // full-circle azimuths of the tilted projections are 2π/3 apart
        let mut az: Vec<f64> = [NvAxis::A1m1m1, NvAxis::Am1m11, NvAxis::Am11m1]
            .iter()
            .map(|&a| {
                let v = raw_lab_vector(SurfaceCut::Cut111, a);
                v.y.atan2(v.x).rem_euclid(2.0 * PI)
            })
            .collect();
        az.sort_by(f64::total_cmp);
        assert!(close(az[1] - az[0], 2.0 * PI / 3.0, 1e-12));
        assert!(close(az[2] - az[1], 2.0 * PI / 3.0, 1e-12));
    }

    #[test]
    fn partition_is_invariant_under_frame_rotation() {
        for s in [SurfaceCut::Cut100, SurfaceCut::Cut111] {
            let base: Vec<Vec<NvAxis>> = equivalence_classes(s).into_iter().map(|c| c.members).collect();
            for k in 0..17 {
                let off = k as f64 * 0.37;
                let rotated: Vec<Vec<NvAxis>> =
                    equivalence_classes_with_offset(s, off).into_iter().map(|c| c.members).collect();
                assert_eq!(base, rotated);
            }
        }
    }

    #[test]
    fn sensitivity_gain_values() {
        assert_eq!(sensitivity_gain(1.0).unwrap(), 4.0);
        assert_eq!(sensitivity_gain(0.5).unwrap(), 2.0);
        assert_eq!(sensitivity_gain(0.25).unwrap(), 1.0);
        assert!(sensitivity_gain(1.01).is_err());
        assert!(sensitivity_gain(-0.1).is_err());
    }

    #[test]
    fn parse_labels() {
        assert_eq!("111".parse::<SurfaceCut>().unwrap(), SurfaceCut::Cut111);
        assert_eq!("(100)".parse::<SurfaceCut>().unwrap(), SurfaceCut::Cut100);
        assert_eq!("[-1-11]".parse::<NvAxis>().unwrap(), NvAxis::Am1m11);
        assert_eq!("1-1-1".parse::<NvAxis>().unwrap(), NvAxis::A1m1m1);
        assert!("110".parse::<SurfaceCut>().is_err());
    }
}
