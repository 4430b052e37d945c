mod common;

use proptest::prelude::*;
use twoshot::optics::{bessel_j0, build_kernel, psf_value, sample_psf_grid, OpticalConfig, PsfEvaluator};

#[test]
fn quadrature_matches_simpson_oracle() {
    let cfg = OpticalConfig::default();
    let eval = PsfEvaluator::<f64>::new(&cfg).unwrap();
    let rmax = cfg.kernel_radius_px as f64 * cfg.pixel_pitch_um;
    for i in 0..12 {
        let r = rmax * ((i * 7) % 12) as f64 / 11.0;
        let dz = -3.0 + 6.0 * ((i * 5) % 12) as f64 / 11.0;
        let got = eval.value(r, dz).unwrap();
        let want = common::psf_simpson(r, dz, &cfg);
        assert!(((got - want) / want).abs() < 1e-8, "h({r}, {dz}) = {got} vs {want}");
    }
}

#[test]
fn j0_agrees_with_integral_form() {
    for i in 0..200 {
        let x = i as f64 * 0.25;
        let got: f64 = bessel_j0(x).unwrap();
        assert!((got - common::j0_integral(x)).abs() < 1e-10, "J0({x})");
    }
}

#[test]
fn truncated_kernel_keeps_most_energy() {
    let cfg = OpticalConfig::default();
    let wide = OpticalConfig {
        kernel_radius_px: 2 * cfg.kernel_radius_px,
        ..cfg
    };
    let sum = |c: &OpticalConfig| -> f64 { sample_psf_grid::<f64>(0.0, c).unwrap().as_slice().iter().sum() };
    assert!(sum(&cfg) / sum(&wide) >= 0.99);
}

#[test]
fn kernels_across_defocus_are_normalized() {
    let cfg = OpticalConfig::default();
    for i in -6..=6 {
        let k = build_kernel::<f64>(i as f64 * 0.5, &cfg).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-9);
        assert_eq!(k.side(), cfg.kernel_side());
    }
}

#[test]
fn on_axis_profile_matches_closed_form() {
    // On the axis the integral is elementary: sin²(b/2) / b².
    let cfg = OpticalConfig::default();
    let ratio = cfg.numerical_aperture / cfg.refractive_index;
    for i in 1..=40 {
        let dz = i as f64 * 0.25;
        let b = 0.5 * cfg.wave_number() * ratio * ratio * dz;
        let want = (b / 2.0).sin().powi(2) / (b * b);
        let got: f64 = psf_value(0.0, dz, &cfg).unwrap();
        assert!((got - want).abs() < 1e-12, "dz {dz}: {got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn psf_is_even_in_defocus(r in 0.0f64..4.5, dz in -10.0f64..10.0) {
        let cfg = OpticalConfig::default();
        let a: f64 = psf_value(r, dz, &cfg).unwrap();
        let b: f64 = psf_value(r, -dz, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()));
    }

    #[test]
    fn psf_is_bounded_by_focus_peak(r in 0.0f64..4.5, dz in -5.0f64..5.0) {
        let cfg = OpticalConfig::default();
        let v: f64 = psf_value(r, dz, &cfg).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!(v <= 0.25 + 1e-12);
    }

    #[test]
    fn kernel_normalized_for_any_optics(
        na in 0.3f64..0.95,
        lambda in 0.4f64..0.7,
        pitch in 0.1f64..0.5,
        radius in 1usize..8,
        dz in -3.0f64..3.0,
    ) {
        let cfg = OpticalConfig {
            numerical_aperture: na,
            wavelength_um: lambda,
            pixel_pitch_um: pitch,
            kernel_radius_px: radius,
            ..OpticalConfig::default()
        };
        let k = build_kernel::<f64>(dz, &cfg).unwrap();
        prop_assert!((k.sum() - 1.0).abs() < 1e-9);
        let s = k.samples();
        let n = k.side();
        for y in 0..n {
            for x in 0..n {
                prop_assert!(s.get(x, y) >= 0.0);
                prop_assert_eq!(s.get(x, y), s.get(y, x));
                prop_assert_eq!(s.get(x, y), s.get(n - 1 - x, y));
            }
        }
    }
}
