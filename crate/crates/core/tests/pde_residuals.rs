mod common;

use common::max_residual;
use deep_bsde::problems::{by_name, with_shape, Shape, PROBLEM_NAMES};
use deep_bsde::rng::{fill_standard_normal, keyed_rng};

#[test]
fn burgers_closed_form_solves_its_pde() {
    for d in [2, 5] {
        let p = with_shape("burgers-d20", Shape { dim: d, horizon: 1.0, steps: 10 }).unwrap();
        let r = max_residual(&p, 100, d as u64);
        assert!(r <= 1e-4, "d = {d}: residual {r}");
    }
}

#[test]
fn quadratic_gradient_profile_solves_its_pde() {
    let r = max_residual(&by_name("quadratic-gradient").unwrap(), 100, 1);
    assert!(r <= 1e-4, "residual {r}");
}

#[test]
fn reaction_diffusion_closed_form_solves_its_pde() {
    let r = max_residual(&by_name("reaction-diffusion").unwrap(), 100, 2);
    assert!(r <= 1e-4, "residual {r}");
}

#[test]
fn residual_detects_a_wrong_diffusion_scale() {
    let mut p = with_shape("burgers-d20", Shape { dim: 5, horizon: 1.0, steps: 10 }).unwrap();
    p.scheme = deep_bsde::sde::ForwardScheme::ShiftedBrownian { scale: 5.0 / 2f64.sqrt() };
    assert!(max_residual(&p, 20, 3) > 1e-2);
}

#[test]
fn drivers_and_terminals_are_finite_on_path_scale_inputs() {
    for name in PROBLEM_NAMES {
        let p = by_name(name).unwrap();
        let mut rng = keyed_rng(5, &[]);
        let mut noise = vec![0.0; p.dim];
        let mut z = vec![0.0; p.dim];
        let mut dz = vec![0.0; p.dim];
        for k in 0..200 {
            let t = p.horizon * k as f64 / 200.0;
            fill_standard_normal(&mut rng, &mut noise);
            let w: Vec<f64> = noise.iter().map(|v| v * t.sqrt()).collect();
            let x = p.scheme.step(0.0, t.max(1e-9), &p.xi, &w).unwrap();
            fill_standard_normal(&mut rng, &mut z);
            let y = p.u0_range.0 + 3.0 * noise[0];
            assert!(p.terminal.eval(&x).is_finite(), "{name}: g");
            assert!(p.driver.eval(t, &x, y, &z).is_finite(), "{name}: f");
            let (f, fy) = p.driver.eval_with_partials(t, &x, y, &z, &mut dz);
            assert!(f.is_finite() && fy.is_finite() && dz.iter().all(|v| v.is_finite()), "{name}: partials");
        }
    }
}
