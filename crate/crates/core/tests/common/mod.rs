#![allow(dead_code)]

use std::sync::Arc;

use deep_bsde::bsde::{loss_and_grad, rollout, RolloutConfig};
use deep_bsde::diffnet::{init_params, BatchNormState, ParameterVector};
use deep_bsde::problems::{default_shape, with_shape, Driver, ProblemSpec, Shape};
use deep_bsde::rng::keyed_rng;
use deep_bsde::sde::{sample_paths, ForwardScheme, PathBatch};
use rand::Rng;

/// `f ≡ 0`.
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn eval(&self, _: f64, _: &[f64], _: f64, _: &[f64]) -> f64 {
        0.0
    }
    fn eval_with_partials(&self, _: f64, _: &[f64], _: f64, _: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.fill(0.0);
        (0.0, 0.0)
    }
}

/// A small instance of a named problem.
pub fn small_problem(name: &str, dim: usize, steps: usize) -> ProblemSpec {
    let base = default_shape(name).unwrap();
    with_shape(name, Shape { dim, steps, ..base }).unwrap()
}

/// A problem with `f ≡ 0`, Brownian forward paths and the given terminal.
pub fn driftless(dim: usize, steps: usize, horizon: f64, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ProblemSpec {
    let mut p = with_shape("hjb", Shape { dim, horizon, steps: steps.max(2) }).unwrap();
    p.steps = steps;
    p.driver = Arc::new(ZeroDriver);
    p.terminal = Arc::new(g);
    p.scheme = ForwardScheme::ShiftedBrownian { scale: 1.0 };
    p.reference = None;
    p
}

/// Initial parameters with every normalization scale and shift randomized,
/// so that no block sits at a special value.
pub fn random_params(problem: &ProblemSpec, seed: u64) -> ParameterVector {
    let spec = problem.subnet_spec();
    let mut params = init_params(&spec, problem.steps, seed, problem.u0_range, 0.3).unwrap();
    let mut rng = keyed_rng(seed, &[77]);
    let blocks = params.layout().blocks.clone();
    for b in blocks {
        let slice = &mut params.data_mut()[b.range()];
        if b.name.ends_with(".scale") {
            slice.iter_mut().for_each(|v| *v = rng.random_range(0.3..1.2));
        } else if b.name.ends_with(".shift") {
            slice.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    params
}

fn loss_at(problem: &ProblemSpec, params: &ParameterVector, paths: &PathBatch) -> (f64, Vec<bool>) {
    let mut bn = BatchNormState::new(&problem.subnet_spec(), problem.steps);
    let r = rollout(params, &mut bn, paths, &RolloutConfig::train(problem)).unwrap();
    (r.loss, r.tape.activation_pattern())
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose step had to shrink to stay off a rectifier kink.
    pub refined: usize,
    /// Coordinates where no step avoided a kink.
    pub skipped: usize,
}

/// Absolute floor of the relative-error denominator. Central differences of
/// a loss of order one carry rounding noise near `1e-16 / h`.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient with the fourth-order central
/// difference `(8(L(h) - L(-h)) - (L(2h) - L(-2h))) / 12h`.
///
/// Each coordinate is differenced at `h, h/10, h/100, h/1000`; steps whose
/// stencil moves a rectifier input across zero are discarded, and the finer
/// estimate of the best-agreeing adjacent pair is kept. Large steps lose to
/// curvature and small ones to rounding, so agreement marks the plateau.
pub fn gradient_check(problem: &ProblemSpec, batch: usize, seed: u64, h: f64) -> GradCheck {
    let params = random_params(problem, seed);
    let paths = sample_paths(&problem.grid(), &problem.scheme, &problem.xi, batch, seed ^ 0x5eed).unwrap();
    let mut bn = BatchNormState::new(&problem.subnet_spec(), problem.steps);
    let (_, grad) = loss_and_grad(&params, &mut bn, &paths, &RolloutConfig::train(problem)).unwrap();
    let (_, base_pattern) = loss_at(problem, &params, &paths);
    let mut out = GradCheck { max_rel: 0.0, checked: 0, refined: 0, skipped: 0 };
    for i in 0..params.len() {
        let estimates: Vec<Option<f64>> = (0..4)
            .map(|k| {
                let step = h / 10f64.powi(k);
                let mut vals = [0.0; 4];
                for (slot, offset) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                    let mut q = params.clone();
                    q.data_mut()[i] += offset * step;
                    let (l, pattern) = loss_at(problem, &q, &paths);
                    if pattern != base_pattern {
                        return None;
                    }
                    vals[slot] = l;
                }
                Some((8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * step))
            })
            .collect();
        let best = estimates
            .windows(2)
            .filter_map(|w| match (w[0], w[1]) {
                (Some(a), Some(b)) => Some(((a - b).abs(), b)),
                _ => None,
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, b)| b);
        match best {
            Some(v) => {
                if estimates[0].is_none() {
                    out.refined += 1;
                }
                out.checked += 1;
                out.max_rel = out.max_rel.max(relative_gap(grad[i], v));
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// `∂_t u + ½ c² Δu + f(t, x, u, c ∇u)` for the exact solution of a problem
/// driven by `X = ξ + c W`, by central differences.
pub fn pde_residual(problem: &ProblemSpec, t: f64, x: &[f64]) -> f64 {
    let exact = problem.exact.expect("problem has a closed form");
    let c = match problem.scheme {
        ForwardScheme::ShiftedBrownian { scale } => scale,
        ref other => panic!("residual needs a Brownian scheme, got {other:?}"),
    };
    let u = |t: f64, x: &[f64]| exact.value(t, x);
    let h1 = 1e-6;
    let h2 = 1e-3;
    let u0 = u(t, x);
    let ut = (u(t + h1, x) - u(t - h1, x)) / (2.0 * h1);
    let mut grad = vec![0.0; x.len()];
    let mut lap = 0.0;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h1;
        let up = u(t, &xp);
        xp[i] = x[i] - h1;
        let um = u(t, &xp);
        grad[i] = (up - um) / (2.0 * h1);
        xp[i] = x[i] + h2;
        let up2 = u(t, &xp);
        xp[i] = x[i] - h2;
        let um2 = u(t, &xp);
        lap += (up2 - 2.0 * u0 + um2) / (h2 * h2);
        xp[i] = x[i];
    }
    let z: Vec<f64> = grad.iter().map(|g| c * g).collect();
    ut + 0.5 * c * c * lap + problem.driver.eval(t, x, u0, &z)
}

/// Largest absolute residual over `points` random `(t, x)` with `t` uniform
/// on `[0, T]` and `x` standard normal.
pub fn max_residual(problem: &ProblemSpec, points: usize, seed: u64) -> f64 {
    let mut rng = keyed_rng(seed, &[]);
    let mut worst = 0.0f64;
    let mut x = vec![0.0; problem.dim];
    for _ in 0..points {
        let t = rng.random_range(0.0..problem.horizon);
        deep_bsde::rng::fill_standard_normal(&mut rng, &mut x);
        worst = worst.max(pde_residual(problem, t, &x).abs());
    }
    worst
}

/// Hand-rolled Adam recursion on a scalar.
pub fn adam_by_hand(theta0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
    for (k, &g) in grads.iter().enumerate() {
        let step = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(step));
        let vhat = v / (1.0 - b2.powi(step));
        theta -= lr * mhat / (eps + vhat.sqrt());
    }
    theta
}
