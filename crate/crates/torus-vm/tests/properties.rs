use proptest::prelude::*;
use std::f64::consts::PI;
use torus_vm::absorption::AbsorptionConfig;
use torus_vm::characteristics::{LightSpeed, PhaseState};
use torus_vm::maxwell::solve_poisson;
use torus_vm::plan::magnetic_arc;
use torus_vm::rescale::{initial_state, rescale_state, state_distance, ScalingConfig};
use torus_vm::spectral::{divergence, to_real, to_spectral_vector, GridSpec, ScalarField};

proptest! {
    #[test]
    fn opacity_stays_in_unit_interval(t in 0.0..1.0f64, phi in 0.0..2.0 * PI, s in 0.0..20.0f64, th in 0.0..2.0 * PI) {
        let cfg = AbsorptionConfig::new([0.5, 0.5], 0.1, 1.0).unwrap();
        let x = [0.5 + 0.2 * phi.cos(), 0.5 + 0.2 * phi.sin()];
        let o = cfg.opacity(t, x, [s * th.cos(), s * th.sin()]);
        prop_assert!((0.0..=1.0).contains(&o), "{o}");
    }

    #[test]
    fn magnetic_arcs_reverse(x in prop::array::uniform2(0.0..1.0f64), v in prop::array::uniform2(-50.0..50.0f64),
                             b in 0.1..5.0f64, c in 1.0..100.0f64, t in 0.0..3.0f64) {
        let light = LightSpeed::Finite(c);
        let s = PhaseState::new(x, v);
        let back = magnetic_arc(magnetic_arc(s, b, light, t), b, light, -t);
        let scale = 1.0 + v[0].abs().max(v[1].abs()) / b;
        for i in 0..2 {
            prop_assert!((back.x[i] - x[i]).abs() < 1e-10 * scale);
            prop_assert!((back.v[i] - v[i]).abs() < 1e-10 * (1.0 + v[i].abs()));
        }
        prop_assert!((back.speed() - s.speed()).abs() < 1e-9 * (1.0 + s.speed()));
    }

    #[test]
    fn rescaling_composes_to_identity(lambda in prop_oneof![-4.0..-0.25f64, 0.25..4.0f64]) {
        let cfg = ScalingConfig { grid_n: 8, k_max: 3, particles: 16, ..ScalingConfig::default() };
        let s = initial_state(&cfg).unwrap();
        let back = rescale_state(&rescale_state(&s, lambda).unwrap(), 1.0 / lambda).unwrap();
        prop_assert!(state_distance(&s, &back).unwrap() < 1e-12);
    }

    #[test]
    fn poisson_field_has_the_right_divergence(a in -1.0..1.0f64, b in -1.0..1.0f64, k in 1i64..4, l in 0i64..4) {
        let g = GridSpec::new(16, 5).unwrap();
        let rho = ScalarField::from_fn(g, |x| 2.0 + a * (2.0 * PI * (k as f64 * x[0] + l as f64 * x[1])).cos()
            + b * (2.0 * PI * (l as f64 * x[0] - k as f64 * x[1])).sin());
        let e = solve_poisson(&rho).unwrap();
        let div = to_real(&divergence(&to_spectral_vector(&e).unwrap()));
        let want = rho.axpy(-1.0, &ScalarField::constant(g, rho.mean())).unwrap();
        prop_assert!(div.max_abs_diff(&want).unwrap() < 1e-11);
    }
}
