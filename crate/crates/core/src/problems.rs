//! The benchmark equations.
//!
//! Each problem is a semilinear PDE
//! `∂u/∂t + ½ Tr(σσ* Hess u) + <μ, ∇u> + f(t, x, u, (∇u)* σ) = 0` with
//! `u(T, x) = g(x)`, given here through its driver `f`, terminal condition
//! `g`, forward scheme, initial point `ξ` and training schedule.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffnet::SubnetSpec;
use crate::optim::LrSchedule;
use crate::oracles::ClosedForm;
use crate::sde::{ForwardScheme, TimeGrid};
use crate::{Error, Result};

/// The nonlinearity `f(t, x, y, z)`.
pub trait Driver: Send + Sync {
    fn eval(&self, t: f64, x: &[f64], y: f64, z: &[f64]) -> f64;

    /// Returns `(f, ∂f/∂y)` and writes `∂f/∂z` into `dz`. At kinks any
    /// one-sided derivative is acceptable.
    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64);
}

/// The terminal condition `g(x)`.
pub trait Terminal: Send + Sync {
    fn eval(&self, x: &[f64]) -> f64;
}

impl<F> Terminal for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    BranchingMc,
    ColeHopfMc,
    ClosedForm,
    /// A published value consumed as-is.
    PublishedConstant { citation: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub value: f64,
    pub source: ReferenceSource,
}

/// One benchmark problem. Immutable after construction.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub xi: Vec<f64>,
    pub driver: Arc<dyn Driver>,
    pub terminal: Arc<dyn Terminal>,
    pub scheme: ForwardScheme,
    pub lr: LrSchedule,
    pub u0_range: (f64, f64),
    pub reference: Option<ReferenceValue>,
    /// Exact solution, when one is known.
    pub exact: Option<ClosedForm>,
    pub default_iterations: u64,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("steps", &self.steps)
            .field("scheme", &self.scheme)
            .field("lr", &self.lr)
            .field("u0_range", &self.u0_range)
            .field("reference", &self.reference)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::uniform(self.horizon, self.steps).expect("validated at construction")
    }

    /// Subnet shape for this problem. Outputs are divided by `d`, so a
    /// freshly initialized `Z_n` is of the same order as `Z_0`.
    pub fn subnet_spec(&self) -> SubnetSpec {
        SubnetSpec {
            output_multiplier: 1.0 / self.dim as f64,
            ..SubnetSpec::for_dim(self.dim)
        }
    }

    /// Default half-width of the uniform `z0` initialization.
    pub fn z0_scale(&self) -> f64 {
        0.1 / (self.dim as f64).sqrt()
    }
}

/// Dimension, horizon and step count of a problem instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
}

impl Shape {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.steps < 2 || !(self.horizon > 0.0) {
            return Err(Error::config(format!(
                "need d >= 1, N >= 2 and T > 0 (got d = {}, N = {}, T = {})",
                self.dim, self.steps, self.horizon
            )));
        }
        Ok(())
    }
}

pub const PROBLEM_NAMES: [&str; 7] = [
    "allen-cahn",
    "hjb",
    "pricing",
    "burgers-d20",
    "burgers-d50",
    "quadratic-gradient",
    "reaction-diffusion",
];

/// The default shape of a named problem.
pub fn default_shape(name: &str) -> Result<Shape> {
    let (dim, horizon, steps) = match name {
        "allen-cahn" => (100, 0.3, 20),
        "hjb" => (100, 1.0, 20),
        "pricing" => (100, 0.5, 20),
        "burgers-d20" => (20, 1.0, 80),
        "burgers-d50" => (50, 0.2, 30),
        "quadratic-gradient" => (100, 1.0, 30),
        "reaction-diffusion" => (100, 1.0, 30),
        other => {
            return Err(Error::config(format!(
                "unknown problem '{other}' (expected one of {})",
                PROBLEM_NAMES.join(", ")
            )))
        }
    };
    Ok(Shape { dim, horizon, steps })
}

/// Looks a problem up by its command-line name.
pub fn by_name(name: &str) -> Result<ProblemSpec> {
    with_shape(name, default_shape(name)?)
}

/// Builds a named problem with a non-default shape. References that are
/// only known for the default shape are dropped.
pub fn with_shape(name: &str, shape: Shape) -> Result<ProblemSpec> {
    shape.validate()?;
    let is_default = default_shape(name)? == shape;
    let mut p = match name {
        "allen-cahn" => allen_cahn_shaped(shape),
        "hjb" => hjb_shaped(shape),
        "pricing" => pricing_shaped(shape),
        "burgers-d20" => burgers_shaped(shape, LrSchedule::burgers_d20(), 60_000),
        "burgers-d50" => burgers_shaped(shape, LrSchedule::burgers_d50(), 30_000),
        "quadratic-gradient" => quadratic_shaped(shape),
        "reaction-diffusion" => reaction_diffusion_shaped(shape),
        _ => unreachable!("validated by default_shape"),
    };
    p.name = name.to_string();
    if !is_default && p.exact.is_none() {
        p.reference = None;
    }
    Ok(p)
}

fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

// ---------------------------------------------------------------- Allen–Cahn

/// `f = y - y³`.
#[derive(Debug, Clone, Copy)]
pub struct AllenCahnDriver;

impl Driver for AllenCahnDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, _z: &[f64]) -> f64 {
        y - y * y * y
    }

    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.fill(0.0);
        (self.eval(t, x, y, z), 1.0 - 3.0 * y * y)
    }
}

/// `g(x) = 1 / (2 + 0.4 |x|²)`.
#[derive(Debug, Clone, Copy)]
pub struct AllenCahnTerminal;

impl Terminal for AllenCahnTerminal {
    fn eval(&self, x: &[f64]) -> f64 {
        1.0 / (2.0 + 0.4 * norm_sq(x))
    }
}

pub const ALLEN_CAHN_REFERENCE: f64 = 0.052802;

pub fn allen_cahn() -> ProblemSpec {
    allen_cahn_shaped(default_shape("allen-cahn").unwrap())
}

fn allen_cahn_shaped(s: Shape) -> ProblemSpec {
    ProblemSpec {
        name: "allen-cahn".into(),
        dim: s.dim,
        horizon: s.horizon,
        steps: s.steps,
        xi: vec![0.0; s.dim],
        driver: Arc::new(AllenCahnDriver),
        terminal: Arc::new(AllenCahnTerminal),
        scheme: ForwardScheme::ShiftedBrownian { scale: SQRT_2 },
        lr: LrSchedule::Constant { value: 5e-4 },
        u0_range: (0.3, 0.6),
        reference: Some(ReferenceValue {
            value: ALLEN_CAHN_REFERENCE,
            source: ReferenceSource::BranchingMc,
        }),
        exact: None,
        default_iterations: 4000,
    }
}

// ----------------------------------------------------------------------- HJB

/// `f = -|z|²`.
#[derive(Debug, Clone, Copy)]
pub struct HjbDriver;

impl Driver for HjbDriver {
    fn eval(&self, _t: f64, _x: &[f64], _y: f64, z: &[f64]) -> f64 {
        -norm_sq(z)
    }

    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        for (d, &zi) in dz.iter_mut().zip(z) {
            *d = -2.0 * zi;
        }
        (self.eval(t, x, y, z), 0.0)
    }
}

/// `g(x) = ln((1 + |x|²) / 2)`.
#[derive(Debug, Clone, Copy)]
pub struct HjbTerminal;

impl Terminal for HjbTerminal {
    fn eval(&self, x: &[f64]) -> f64 {
        (0.5 * (1.0 + norm_sq(x))).ln()
    }
}

pub const HJB_REFERENCE: f64 = 4.5901;

pub fn hjb() -> ProblemSpec {
    hjb_shaped(default_shape("hjb").unwrap())
}

fn hjb_shaped(s: Shape) -> ProblemSpec {
    ProblemSpec {
        name: "hjb".into(),
        dim: s.dim,
        horizon: s.horizon,
        steps: s.steps,
        xi: vec![0.0; s.dim],
        driver: Arc::new(HjbDriver),
        terminal: Arc::new(HjbTerminal),
        scheme: ForwardScheme::ShiftedBrownian { scale: SQRT_2 },
        lr: LrSchedule::Constant { value: 1e-2 },
        u0_range: (0.0, 1.0),
        reference: Some(ReferenceValue {
            value: HJB_REFERENCE,
            source: ReferenceSource::ColeHopfMc,
        }),
        exact: None,
        default_iterations: 2000,
    }
}

// ------------------------------------------------------------------- pricing

/// Option pricing with a lending rate `R^l` below the borrowing rate `R^b`:
/// `f = -R^l y - ((μ̄ - R^l)/σ̄) Σz + (R^b - R^l) max(0, Σz/σ̄ - y)`.
#[derive(Debug, Clone, Copy)]
pub struct PricingDriver {
    pub drift: f64,
    pub vol: f64,
    pub rate_lend: f64,
    pub rate_borrow: f64,
}

impl Default for PricingDriver {
    fn default() -> Self {
        PricingDriver {
            drift: 0.06,
            vol: 0.2,
            rate_lend: 0.04,
            rate_borrow: 0.06,
        }
    }
}

impl Driver for PricingDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, z: &[f64]) -> f64 {
        let sz: f64 = z.iter().sum();
        -self.rate_lend * y - (self.drift - self.rate_lend) / self.vol * sz
            + (self.rate_borrow - self.rate_lend) * (sz / self.vol - y).max(0.0)
    }

    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        let sz: f64 = z.iter().sum();
        let spread = self.rate_borrow - self.rate_lend;
        let base_z = -(self.drift - self.rate_lend) / self.vol;
        let (fy, fz) = if sz / self.vol - y > 0.0 {
            (-self.rate_lend - spread, base_z + spread / self.vol)
        } else {
            (-self.rate_lend, base_z)
        };
        dz.fill(fz);
        (self.eval(t, x, y, z), fy)
    }
}

/// Call spread on the maximum: `max(M - 120, 0) - 2 max(M - 150, 0)` with
/// `M = max_i x_i`.
#[derive(Debug, Clone, Copy)]
pub struct CallSpreadOnMax;

impl Terminal for CallSpreadOnMax {
    fn eval(&self, x: &[f64]) -> f64 {
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (m - 120.0).max(0.0) - 2.0 * (m - 150.0).max(0.0)
    }
}

pub const PRICING_REFERENCE: f64 = 21.299;

pub fn pricing_different_rates() -> ProblemSpec {
    pricing_shaped(default_shape("pricing").unwrap())
}

fn pricing_shaped(s: Shape) -> ProblemSpec {
    let driver = PricingDriver::default();
    ProblemSpec {
        name: "pricing".into(),
        dim: s.dim,
        horizon: s.horizon,
        steps: s.steps,
        xi: vec![100.0; s.dim],
        driver: Arc::new(driver),
        terminal: Arc::new(CallSpreadOnMax),
        scheme: ForwardScheme::GeometricExact {
            drift: driver.drift,
            vol: driver.vol,
        },
        lr: LrSchedule::Constant { value: 5e-3 },
        u0_range: (15.0, 18.0),
        reference: Some(ReferenceValue {
            value: PRICING_REFERENCE,
            source: ReferenceSource::PublishedConstant {
                citation: "multilevel Picard approximation".into(),
            },
        }),
        exact: None,
        default_iterations: 4000,
    }
}

// ------------------------------------------------------------------- Burgers

/// `f = (y - (2 + d)/(2d)) Σz`.
#[derive(Debug, Clone, Copy)]
pub struct BurgersDriver {
    pub dim: usize,
}

impl BurgersDriver {
    fn level(&self) -> f64 {
        let d = self.dim as f64;
        (2.0 + d) / (2.0 * d)
    }
}

impl Driver for BurgersDriver {
    fn eval(&self, _t: f64, _x: &[f64], y: f64, z: &[f64]) -> f64 {
        (y - self.level()) * z.iter().sum::<f64>()
    }

    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.fill(y - self.level());
        (self.eval(t, x, y, z), z.iter().sum())
    }
}

/// `g(x) = e^a / (1 + e^a)` with `a = T + Σx / d`.
#[derive(Debug, Clone, Copy)]
pub struct LogisticTerminal {
    pub horizon: f64,
    pub dim: usize,
}

impl Terminal for LogisticTerminal {
    fn eval(&self, x: &[f64]) -> f64 {
        let a = self.horizon + x.iter().sum::<f64>() / self.dim as f64;
        logistic(a)
    }
}

pub(crate) fn logistic(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BurgersVariant {
    D20,
    D50,
}

pub fn burgers_type(variant: BurgersVariant) -> ProblemSpec {
    match variant {
        BurgersVariant::D20 => by_name("burgers-d20"),
        BurgersVariant::D50 => by_name("burgers-d50"),
    }
    .expect("built-in problem")
}

fn burgers_shaped(s: Shape, lr: LrSchedule, iterations: u64) -> ProblemSpec {
    let exact = ClosedForm::Burgers {
        kappa: 1.0 / s.dim as f64,
    };
    ProblemSpec {
        name: "burgers".into(),
        dim: s.dim,
        horizon: s.horizon,
        steps: s.steps,
        xi: vec![0.0; s.dim],
        driver: Arc::new(BurgersDriver { dim: s.dim }),
        terminal: Arc::new(LogisticTerminal {
            horizon: s.horizon,
            dim: s.dim,
        }),
        // diffusion d·I, which makes the logistic profile an exact solution
        scheme: ForwardScheme::ShiftedBrownian { scale: s.dim as f64 },
        lr,
        u0_range: (0.0, 1.0),
        reference: Some(ReferenceValue {
            value: exact.value(0.0, &vec![0.0; s.dim]),
            source: ReferenceSource::ClosedForm,
        }),
        exact: Some(exact),
        default_iterations: iterations,
    }
}

// ------------------------------------------------------- quadratic gradient

/// `ψ(t, x) = sin((T - t + |x|²/c)^α)` and the derivatives entering the
/// driver, with `c = norm_scale`.
#[derive(Debug, Clone, Copy)]
pub struct OscillatingProfile {
    pub horizon: f64,
    pub alpha: f64,
    pub norm_scale: f64,
}

/// Values of `ψ` and its derivatives at one point.
#[derive(Debug, Clone, Copy)]
pub struct ProfileDerivatives {
    pub value: f64,
    pub time: f64,
    pub grad_norm_sq: f64,
    pub laplacian: f64,
}

impl OscillatingProfile {
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.horizon - t + norm_sq(x) / self.norm_scale).powf(self.alpha).sin()
    }

    /// Closed-form derivatives; `r = T - t + |x|²/c` must be positive.
    pub fn derivatives(&self, t: f64, x: &[f64]) -> ProfileDerivatives {
        let a = self.alpha;
        let c2 = self.norm_scale;
        let x2 = norm_sq(x);
        let r = self.horizon - t + x2 / c2;
        let ra = r.powf(a);
        let (s, c) = ra.sin_cos();
        // d/dr sin(r^α) = α r^(α-1) cos(r^α)
        let dr = a * r.powf(a - 1.0);
        let d2r = a * (a - 1.0) * r.powf(a - 2.0);
        let d = x.len() as f64;
        // |∇r|² = 4|x|²/c², Δr = 2d/c
        let grad_r2 = 4.0 * x2 / (c2 * c2);
        ProfileDerivatives {
            value: s,
            time: -c * dr,
            grad_norm_sq: c * c * dr * dr * grad_r2,
            laplacian: (-s * dr * dr + c * d2r) * grad_r2 + c * dr * 2.0 * d / c2,
        }
    }
}

/// `f = |z|² - |∇ψ|² - ∂ψ/∂t - ½Δψ`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticGradientDriver {
    pub profile: OscillatingProfile,
}

impl Driver for QuadraticGradientDriver {
    fn eval(&self, t: f64, x: &[f64], _y: f64, z: &[f64]) -> f64 {
        let p = self.profile.derivatives(t, x);
        norm_sq(z) - p.grad_norm_sq - p.time - 0.5 * p.laplacian
    }

    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        for (d, &zi) in dz.iter_mut().zip(z) {
            *d = 2.0 * zi;
        }
        (self.eval(t, x, y, z), 0.0)
    }
}

/// `g(x) = sin((|x|²/c)^α)`.
#[derive(Debug, Clone, Copy)]
pub struct SinePowerTerminal {
    pub alpha: f64,
    pub norm_scale: f64,
}

impl Terminal for SinePowerTerminal {
    fn eval(&self, x: &[f64]) -> f64 {
        (norm_sq(x) / self.norm_scale).powf(self.alpha).sin()
    }
}

pub fn quadratic_gradient() -> ProblemSpec {
    quadratic_shaped(default_shape("quadratic-gradient").unwrap())
}

fn quadratic_shaped(s: Shape) -> ProblemSpec {
    let alpha = 0.4;
    let norm_scale = s.dim as f64;
    let profile = OscillatingProfile {
        horizon: s.horizon,
        alpha,
        norm_scale,
    };
    let exact = ClosedForm::Quadratic {
        horizon: s.horizon,
        alpha,
        norm_scale,
    };
    ProblemSpec {
        name: "quadratic-gradient".into(),
        dim: s.dim,
        horizon: s.horizon,
        steps: s.steps,
        xi: vec![0.0; s.dim],
        driver: Arc::new(QuadraticGradientDriver { profile }),
        terminal: Arc::new(SinePowerTerminal { alpha, norm_scale }),
        scheme: ForwardScheme::ShiftedBrownian { scale: 1.0 },
        lr: LrSchedule::Constant { value: 5e-3 },
        u0_range: (0.0, 1.0),
        reference: Some(ReferenceValue {
            value: exact.value(0.0, &vec![0.0; s.dim]),
            source: ReferenceSource::ClosedForm,
        }),
        exact: Some(exact),
        default_iterations: 4000,
    }
}

// -------------------------------------------------------- reaction-diffusion

/// `f = min(1, [y - κ - 1 - sin(λΣx) exp(λ²d(t - T)/2)]²)`.
#[derive(Debug, Clone, Copy)]
pub struct ReactionDiffusionDriver {
    pub horizon: f64,
    pub kappa: f64,
    pub lambda: f64,
}

impl ReactionDiffusionDriver {
    fn bracket(&self, t: f64, x: &[f64], y: f64) -> f64 {
        let d = x.len() as f64;
        let s: f64 = x.iter().sum();
        y - self.kappa
            - 1.0
            - (self.lambda * s).sin() * (self.lambda * self.lambda * d * (t - self.horizon) / 2.0).exp()
    }
}

impl Driver for ReactionDiffusionDriver {
    fn eval(&self, t: f64, x: &[f64], y: f64, _z: &[f64]) -> f64 {
        let b = self.bracket(t, x, y);
        (b * b).min(1.0)
    }

    fn eval_with_partials(&self, t: f64, x: &[f64], y: f64, _z: &[f64], dz: &mut [f64]) -> (f64, f64) {
        dz.fill(0.0);
        let b = self.bracket(t, x, y);
        if b * b < 1.0 {
            (b * b, 2.0 * b)
        } else {
            (1.0, 0.0)
        }
    }
}

/// `g(x) = 1 + κ + sin(λΣx)`.
#[derive(Debug, Clone, Copy)]
pub struct ShiftedSineTerminal {
    pub kappa: f64,
    pub lambda: f64,
}

impl Terminal for ShiftedSineTerminal {
    fn eval(&self, x: &[f64]) -> f64 {
        1.0 + self.kappa + (self.lambda * x.iter().sum::<f64>()).sin()
    }
}

pub fn reaction_diffusion() -> ProblemSpec {
    reaction_diffusion_shaped(default_shape("reaction-diffusion").unwrap())
}

fn reaction_diffusion_shaped(s: Shape) -> ProblemSpec {
    let kappa = 0.6;
    let lambda = 1.0 / (s.dim as f64).sqrt();
    let exact = ClosedForm::ReactionDiffusion {
        horizon: s.horizon,
        kappa,
        lambda,
    };
    ProblemSpec {
        name: "reaction-diffusion".into(),
        dim: s.dim,
        horizon: s.horizon,
        steps: s.steps,
        xi: vec![0.0; s.dim],
        driver: Arc::new(ReactionDiffusionDriver {
            horizon: s.horizon,
            kappa,
            lambda,
        }),
        terminal: Arc::new(ShiftedSineTerminal { kappa, lambda }),
        scheme: ForwardScheme::ShiftedBrownian { scale: 1.0 },
        lr: LrSchedule::Constant { value: 1e-2 },
        u0_range: (0.3, 0.6),
        reference: Some(ReferenceValue {
            value: exact.value(0.0, &vec![0.0; s.dim]),
            source: ReferenceSource::ClosedForm,
        }),
        exact: Some(exact),
        default_iterations: 24_000,
    }
}
