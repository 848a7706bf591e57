//! Reference values computed independently of the solver: branching
//! diffusion Monte Carlo, Cole–Hopf Monte Carlo and exact solutions.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::problems::{logistic, OscillatingProfile, ProblemSpec, Terminal};
use crate::rng::{fill_standard_normal, keyed_rng};
use crate::stats::Moments;
use crate::{Error, Result};

/// Samples per parallel work unit. Fixed so that results do not depend on
/// the thread count.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: u64,
}

impl OracleEstimate {
    /// Whether `target` lies within `max(k·std_error, rel·|target|)`.
    pub fn agrees_with(&self, target: f64, k: f64, rel: f64) -> bool {
        (self.value - target).abs() <= (k * self.std_error).max(rel * target.abs())
    }
}

// ------------------------------------------------------------- closed forms

/// Problems whose solution is known exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClosedForm {
    /// `u(t, x) = 1 - 1 / (1 + exp(t + κ Σx))`.
    Burgers { kappa: f64 },
    /// `u(t, x) = sin((T - t + |x|²/c)^α)`.
    Quadratic { horizon: f64, alpha: f64, norm_scale: f64 },
    /// `u(t, x) = 1 + κ + sin(λ Σx) exp(λ² d (t - T) / 2)`.
    ReactionDiffusion { horizon: f64, kappa: f64, lambda: f64 },
}

impl ClosedForm {
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let sum: f64 = x.iter().sum();
        match *self {
            ClosedForm::Burgers { kappa } => logistic(t + kappa * sum),
            ClosedForm::Quadratic { horizon, alpha, norm_scale } => {
                OscillatingProfile { horizon, alpha, norm_scale }.value(t, x)
            }
            ClosedForm::ReactionDiffusion { horizon, kappa, lambda } => {
                let d = x.len() as f64;
                1.0 + kappa + (lambda * sum).sin() * (lambda * lambda * d * (t - horizon) / 2.0).exp()
            }
        }
    }
}

pub fn closed_form_value(form: &ClosedForm, t: f64, x: &[f64]) -> f64 {
    form.value(t, x)
}

// --------------------------------------------------------------- branching

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Offspring {
    pub count: usize,
    pub prob: f64,
    pub weight: f64,
}

/// A branching mechanism representing a polynomial driver `f(y)`:
/// `β (Σ p_k w_k y^k - y) = f(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchingMechanism {
    pub rate: f64,
    pub offspring: Vec<Offspring>,
    pub diffusion_scale: f64,
    /// Coefficients of `f` in increasing degree.
    pub driver_coefficients: Vec<f64>,
}

impl BranchingMechanism {
    /// `β = 1`, `{(1, 2/3, 3), (3, 1/3, -3)}` for `f(y) = y - y³`.
    pub fn allen_cahn() -> Self {
        BranchingMechanism {
            rate: 1.0,
            offspring: vec![
                Offspring { count: 1, prob: 2.0 / 3.0, weight: 3.0 },
                Offspring { count: 3, prob: 1.0 / 3.0, weight: -3.0 },
            ],
            diffusion_scale: std::f64::consts::SQRT_2,
            driver_coefficients: vec![0.0, 1.0, 0.0, -1.0],
        }
    }

    /// `f ≡ 0`: the tree never branches and reduces to Feynman–Kac.
    pub fn trivial(diffusion_scale: f64) -> Self {
        BranchingMechanism {
            rate: 1.0,
            offspring: vec![Offspring { count: 1, prob: 1.0, weight: 1.0 }],
            diffusion_scale,
            driver_coefficients: vec![],
        }
    }

    /// Coefficients of `β (Σ p_k w_k y^k - y)` in increasing degree.
    pub fn implied_coefficients(&self) -> Vec<f64> {
        let deg = self.offspring.iter().map(|o| o.count).max().unwrap_or(0).max(1);
        let mut c = vec![0.0; deg + 1];
        for o in &self.offspring {
            c[o.count] += self.rate * o.prob * o.weight;
        }
        c[1] -= self.rate;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || !(self.diffusion_scale >= 0.0) {
            return Err(Error::config("branching rate must be positive"));
        }
        if self.offspring.is_empty() || self.offspring.iter().any(|o| !(o.prob > 0.0)) {
            return Err(Error::config("offspring probabilities must be positive"));
        }
        let total: f64 = self.offspring.iter().map(|o| o.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("offspring probabilities sum to {total}")));
        }
        let implied = self.implied_coefficients();
        let n = implied.len().max(self.driver_coefficients.len());
        for i in 0..n {
            let a = implied.get(i).copied().unwrap_or(0.0);
            let b = self.driver_coefficients.get(i).copied().unwrap_or(0.0);
            if (a - b).abs() > 1e-12 {
                return Err(Error::config(format!(
                    "mechanism does not reproduce the driver: degree {i} coefficient {a} vs {b}"
                )));
            }
        }
        Ok(())
    }

    fn pick<R: Rng>(&self, rng: &mut R) -> &Offspring {
        let mut u: f64 = rng.random();
        for o in &self.offspring {
            if u < o.prob {
                return o;
            }
            u -= o.prob;
        }
        self.offspring.last().unwrap()
    }
}

/// One tree: the product of branching weights and of `g` over the particles
/// alive at `horizon`.
fn branching_tree<R: Rng>(
    mech: &BranchingMechanism,
    g: &dyn Terminal,
    horizon: f64,
    x0: &[f64],
    rng: &mut R,
) -> f64 {
    let d = x0.len();
    let mut weight = 1.0;
    let mut queue: Vec<(f64, Vec<f64>)> = vec![(0.0, x0.to_vec())];
    let mut noise = vec![0.0; d];
    while let Some((born, mut x)) = queue.pop() {
        let u: f64 = rng.random();
        let life = -(1.0 - u).ln() / mech.rate;
        let end = (born + life).min(horizon);
        let scale = mech.diffusion_scale * (end - born).sqrt();
        fill_standard_normal(rng, &mut noise);
        for (xi, ni) in x.iter_mut().zip(&noise) {
            *xi += scale * ni;
        }
        if born + life >= horizon {
            weight *= g.eval(&x);
        } else {
            let o = mech.pick(rng);
            weight *= o.weight;
            for _ in 0..o.count {
                queue.push((end, x.clone()));
            }
        }
        if weight == 0.0 {
            break;
        }
    }
    weight
}

fn chunked_moments<F>(n_samples: u64, sample: F) -> Moments
where
    F: Fn(u64) -> f64 + Sync,
{
    let chunks = n_samples.div_ceil(CHUNK as u64);
    let partial: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::default();
            let lo = c * CHUNK as u64;
            let hi = (lo + CHUNK as u64).min(n_samples);
            for i in lo..hi {
                m.push(sample(i));
            }
            m
        })
        .collect();
    partial.into_iter().fold(Moments::default(), Moments::merge)
}

/// Branching diffusion Monte Carlo estimate of `u(0, x0)`.
pub fn branching_estimate(
    mech: &BranchingMechanism,
    g: &dyn Terminal,
    horizon: f64,
    x0: &[f64],
    n_samples: u64,
    seed: u64,
) -> Result<OracleEstimate> {
    mech.validate()?;
    if n_samples == 0 {
        return Err(Error::config("n_samples must be positive"));
    }
    let m = chunked_moments(n_samples, |i| {
        let mut rng = keyed_rng(seed, &[0xb7a9, i]);
        branching_tree(mech, g, horizon, x0, &mut rng)
    });
    Ok(OracleEstimate {
        value: m.mean(),
        std_error: m.std_error(),
        n_samples,
    })
}

// ---------------------------------------------------------------- Cole–Hopf

/// `(α/β) ln E[exp(β g(x0 + √(2αT) Z) / α)]` with a delta-method standard
/// error.
pub fn cole_hopf_estimate(
    g: &dyn Terminal,
    horizon: f64,
    alpha: f64,
    beta: f64,
    x0: &[f64],
    n_samples: u64,
    seed: u64,
) -> Result<OracleEstimate> {
    if n_samples == 0 || alpha <= 0.0 || beta == 0.0 || !(horizon >= 0.0) {
        return Err(Error::config("need n_samples > 0, α > 0, β ≠ 0, T ≥ 0"));
    }
    let d = x0.len();
    let scale = (2.0 * alpha * horizon).sqrt();
    let exponents: Vec<f64> = (0..n_samples as usize)
        .into_par_iter()
        .with_min_len(CHUNK)
        .map_init(
            || (vec![0.0; d], vec![0.0; d]),
            |(z, x), i| {
                let mut rng = keyed_rng(seed, &[0xc01e, i as u64]);
                fill_standard_normal(&mut rng, z);
                for k in 0..d {
                    x[k] = x0[k] + scale * z[k];
                }
                beta * g.eval(x) / alpha
            },
        )
        .collect();
    // shift by the maximum so the exponentials stay finite
    let shift = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut m = Moments::default();
    for a in &exponents {
        m.push((a - shift).exp());
    }
    let mean = m.mean();
    let value = alpha / beta * (mean.ln() + shift);
    let std_error = (alpha / beta).abs() * m.std_error() / mean;
    Ok(OracleEstimate {
        value,
        std_error,
        n_samples,
    })
}

/// The independent reference for a named problem.
pub fn reference_estimate(problem: &ProblemSpec, n_samples: u64, seed: u64) -> Result<OracleEstimate> {
    if let Some(exact) = &problem.exact {
        return Ok(OracleEstimate {
            value: exact.value(0.0, &problem.xi),
            std_error: 0.0,
            n_samples: 0,
        });
    }
    match problem.name.as_str() {
        "allen-cahn" => branching_estimate(
            &BranchingMechanism::allen_cahn(),
            problem.terminal.as_ref(),
            problem.horizon,
            &problem.xi,
            n_samples,
            seed,
        ),
        "hjb" => cole_hopf_estimate(
            problem.terminal.as_ref(),
            problem.horizon,
            1.0,
            -1.0,
            &problem.xi,
            n_samples,
            seed,
        ),
        other => Err(Error::config(format!("no independent oracle for '{other}'"))),
    }
}
