//! Plain SGD, Adam with bias correction, and learning-rate schedules.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::{params::read_f64_le, params::sidecar_path, params::write_f64_le};
use crate::{Error, Result};

/// Learning rate as a function of the (1-based) iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    Constant {
        value: f64,
    },
    /// `pieces[i] = (last_step, rate)`: the rate applies to every `m` up to
    /// and including `last_step` not covered by an earlier piece; `tail`
    /// applies afterwards.
    Piecewise {
        pieces: Vec<(u64, f64)>,
        tail: f64,
    },
}

impl LrSchedule {
    pub fn constant(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::config(format!("learning rate must be positive (got {value})")));
        }
        Ok(LrSchedule::Constant { value })
    }

    pub fn piecewise(pieces: Vec<(u64, f64)>, tail: f64) -> Result<Self> {
        if pieces.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("schedule breakpoints must be increasing"));
        }
        if pieces.iter().map(|p| p.1).chain([tail]).any(|r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(LrSchedule::Piecewise { pieces, tail })
    }

    /// `10^(1[1,first](m) + 1[1,second](m) - 4)`: `1e-2`, then `1e-3`, then `1e-4`.
    pub fn three_decades(first: u64, second: u64) -> Self {
        LrSchedule::Piecewise {
            pieces: vec![(first, 1e-2), (second, 1e-3)],
            tail: 1e-4,
        }
    }

    pub fn burgers_d20() -> Self {
        Self::three_decades(30_000, 50_000)
    }

    pub fn burgers_d50() -> Self {
        Self::three_decades(15_000, 25_000)
    }

    pub fn lr_at(&self, m: u64) -> Result<f64> {
        if m == 0 {
            return Err(Error::config("iterations are numbered from 1"));
        }
        Ok(match self {
            LrSchedule::Constant { value } => *value,
            LrSchedule::Piecewise { pieces, tail } => pieces
                .iter()
                .find(|(last, _)| m <= *last)
                .map_or(*tail, |p| p.1),
        })
    }
}

/// `θ ← θ - γ g`.
pub fn sgd_step(theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    check_len(theta.len(), grad.len())?;
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= lr * g;
    }
    Ok(())
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            what: "gradient",
            expected,
            actual,
        });
    }
    Ok(())
}

/// Adam moments and constants.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    len: usize,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self::with_constants(len, Self::BETA1, Self::BETA2, Self::EPS)
    }

    pub fn with_constants(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update with the mini-batch-mean gradient `grad` and rate `lr`.
    ///
    /// `θ ← θ - lr (m / (1 - β1^k)) / (ε + sqrt(v / (1 - β2^k)))`, with `ε`
    /// added outside the square root.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_len(self.m.len(), theta.len())?;
        check_len(self.m.len(), grad.len())?;
        self.step += 1;
        let k = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - self.beta1.powi(k);
        let bc2 = 1.0 - self.beta2.powi(k);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((t, &g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *t -= lr * (*m / bc1) / (eps + (*v / bc2).sqrt());
        }
        Ok(())
    }

    /// Writes `m` then `v` as little-endian f64 to `path` and a JSON header
    /// next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = self.m.clone();
        flat.extend_from_slice(&self.v);
        write_f64_le(path, &flat)?;
        let header = AdamHeader {
            len: self.m.len(),
            step: self.step,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        };
        let sidecar = sidecar_path(path);
        fs::write(&sidecar, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let h: AdamHeader = serde_json::from_str(&text)?;
        let mut flat = read_f64_le(path)?;
        if flat.len() != 2 * h.len {
            return Err(Error::Shape {
                what: "optimizer checkpoint",
                expected: 2 * h.len,
                actual: flat.len(),
            });
        }
        let v = flat.split_off(h.len);
        Ok(AdamState {
            m: flat,
            v,
            step: h.step,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
        })
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    state.step(theta, grad, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Optimizer state owned by one training run.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(len)),
        }
    }

    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(theta, grad, lr),
            Optimizer::Adam(state) => state.step(theta, grad, lr),
        }
    }
}
