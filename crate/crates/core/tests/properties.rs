use std::f64::consts::PI;

use proptest::prelude::*;

use nvtwin::emission::{analyzer_angles, fit_pattern, normalized_value, pattern, EmissionConfig, PatternShape};
use nvtwin::geometry::{
    class_of, diff_mod_pi, equivalence_classes, lab_vector, sensitivity_gain, wrap_pi, NvAxis, SurfaceCut,
};
use nvtwin::hal::{parse_command, Command};
use nvtwin::kinetics::{advance, KineticsConfig, SiteState};
use nvtwin::nalgebra::Vector3;
use nvtwin::photonics::{
    background_correct, g2_model, mix_background, synthesize_confocal_image, Emitter, G2Params, Region,
};
use nvtwin::rng::{rng_for, Stream};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e3..1e3f64, Just(0.0), -1e-6..1e-6f64]
}

fn command() -> impl Strategy<Value = Command> {
    prop_oneof![
        (finite(), finite(), finite()).prop_map(|(x, y, z)| Command::Move { x, y, z }),
        finite().prop_map(|angle| Command::Hwp { angle }),
        Just(Command::Seed),
        any::<bool>().prop_map(|on| Command::Train { on }),
        (1e-6..1e3f64).prop_map(|dwell| Command::Acq { dwell }),
        (finite(), finite(), finite(), finite(), 1e-3..10f64).prop_map(|(x0, y0, x1, y1, pitch)| Command::Scan {
            x0,
            y0,
            x1,
            y1,
            pitch
        }),
    ]
}

fn unit_vector() -> impl Strategy<Value = Vector3<f64>> {
    (0.0..PI / 2.0, 0.0..2.0 * PI)
        .prop_map(|(polar, az)| Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos()))
}

fn surface() -> impl Strategy<Value = SurfaceCut> {
    prop_oneof![Just(SurfaceCut::Cut100), Just(SurfaceCut::Cut111)]
}

proptest! {
    #[test]
    fn grammar_round_trips(cmd in command()) {
        let line = cmd.to_string();
        prop_assert_eq!(parse_command(&line).unwrap(), Some(cmd));
    }

    #[test]
    fn background_correction_inverts_mixing(g in 0.0..3.0f64, rho in 0.01..=1.0f64) {
        let back = background_correct(mix_background(g, rho), rho).unwrap();
        prop_assert!((back - g).abs() < 1e-9 * (1.0 / (rho * rho)));
    }

    #[test]
    fn g2_model_is_even_and_bounded(tau in 0.0..1e3f64, a in 0.0..2.0f64, t1 in 1.0..50.0f64, k in 1.5..20.0f64) {
        let p = G2Params { a, tau1_ns: t1, tau2_ns: t1 * k };
        prop_assert_eq!(g2_model(tau, &p), g2_model(-tau, &p));
        prop_assert!(g2_model(0.0, &p).abs() < 1e-12);
        prop_assert!(g2_model(tau, &p) <= 1.0 + a);
    }

    #[test]
    fn confocal_image_is_linear(
        xs in prop::collection::vec((0.0..4.0f64, 0.0..4.0f64, 1e2..1e5f64), 1..5),
        k in 0.1..10.0f64,
    ) {
        let ems: Vec<Emitter> = xs.iter().map(|&(x, y, b)| Emitter { x, y, brightness: b }).collect();
        let scaled: Vec<Emitter> = ems.iter().map(|e| Emitter { brightness: e.brightness * k, ..*e }).collect();
        let region = Region::new(-1.0, -1.0, 5.0, 5.0);
        let a = synthesize_confocal_image(&ems, 0.3, region, 0.2, 0.0).unwrap();
        let b = synthesize_confocal_image(&scaled, 0.3, region, 0.2, 0.0).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x * k - y).abs() <= 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn patterns_have_unit_mean_and_fit_back(v in unit_vector()) {
        let cfg = EmissionConfig::default();
        let angles = analyzer_angles(36);
        let p = pattern(&v, &angles, &cfg).unwrap();
        let mean = angles.iter().map(|&t| normalized_value(&v, t, &cfg).unwrap()).sum::<f64>() / angles.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        let shape = PatternShape::new(&v, &cfg).unwrap();
        let fit = fit_pattern(&p).unwrap();
        prop_assert!((fit.visibility - shape.visibility()).abs() < 1e-9);
        if shape.visibility() > 1e-6 {
            prop_assert!(diff_mod_pi(fit.azimuth, shape.max_azimuth()).abs() < 1e-6);
        }
    }

    #[test]
    fn classes_partition_axes(s in surface(), offset in -PI..PI) {
        let classes = nvtwin::geometry::equivalence_classes_with_offset(s, offset);
        let mut seen = [0u8; 4];
        for c in &classes {
            for a in &c.members {
                seen[a.index()] += 1;
            }
        }
        prop_assert_eq!(seen, [1, 1, 1, 1]);
    }

    #[test]
    fn sensitivity_gain_is_monotone(f in 0.0..1.0f64, g in 0.0..1.0f64) {
        let (lo, hi) = if f < g { (f, g) } else { (g, f) };
        prop_assert!(sensitivity_gain(lo).unwrap() <= sensitivity_gain(hi).unwrap());
    }

    #[test]
    fn vacancies_never_grow_under_annealing(seed in any::<u64>(), pulses in 1u64..5_000_000, start in 1u32..30) {
        let cfg = KineticsConfig::default();
        let mut rng = rng_for(seed, Stream::Kinetics, [0, 0, 0]);
        let (end, path) = advance(SiteState::VacancyRich { vacancies: start }, pulses, &cfg, &mut rng);
        let mut last = start;
        for t in &path {
            prop_assert!(t.state.vacancies() <= last);
            prop_assert!(t.pulse <= pulses);
            last = t.state.vacancies();
        }
        prop_assert_eq!(end.vacancies(), last);
    }

    #[test]
    fn wrap_pi_is_idempotent(x in -1e3..1e3f64) {
        let w = wrap_pi(x);
        prop_assert!((0.0..PI).contains(&w));
        prop_assert!(diff_mod_pi(w, x).abs() < 1e-9);
    }
}

#[test]
fn lab_vectors_are_unit_and_upward() {
    for s in [SurfaceCut::Cut100, SurfaceCut::Cut111] {
        for a in NvAxis::ALL {
            let v = lab_vector(s, a);
            assert!((v.norm() - 1.0).abs() < 1e-12);
            assert!(v.z >= 0.0);
            let c = class_of(s, a);
            assert!(equivalence_classes(s).iter().any(|k| k.id == c && k.contains(a)));
        }
    }
}
