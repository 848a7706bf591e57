//! Time grids, Brownian increments and one-step forward schemes.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array3, ArrayView1, ArrayView2, Axis};

use crate::rng::{fill_standard_normal, keyed_rng};
use crate::{Error, Result};

/// Time nodes `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// Uniform nodes `t_n = n T / N`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::config(format!(
                "uniform grid needs T > 0 and N >= 1 (got T = {horizon}, N = {steps})"
            )));
        }
        let nodes = (0..=steps)
            .map(|n| n as f64 * horizon / steps as f64)
            .collect();
        Ok(TimeGrid { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes[0] != 0.0 {
            return Err(Error::config("grid must start at 0 and contain at least two nodes"));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || !nodes.iter().all(|t| t.is_finite()) {
            return Err(Error::config("grid nodes must be finite and strictly increasing"));
        }
        Ok(TimeGrid { nodes })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn t(&self, n: usize) -> f64 {
        self.nodes[n]
    }

    /// `t_{n+1} - t_n`.
    pub fn dt(&self, n: usize) -> f64 {
        self.nodes[n + 1] - self.nodes[n]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
}

/// Drift `μ(t, x)` and diffusion `σ(t, x)` of a forward SDE, for the
/// Euler–Maruyama scheme.
pub trait Coefficients: Send + Sync {
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// Writes `σ(t, x) w` into `out`.
    fn diffuse(&self, t: f64, x: &[f64], w: &[f64], out: &mut [f64]);
}

/// `μ(t, x) = μ̄ x`, `σ(t, x) = σ̄ diag(x)`.
#[derive(Debug, Clone, Copy)]
pub struct GeometricCoefficients {
    pub drift: f64,
    pub vol: f64,
}

impl Coefficients for GeometricCoefficients {
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = self.drift * xi;
        }
    }

    fn diffuse(&self, _t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
            *o = self.vol * xi * wi;
        }
    }
}

/// Coefficients given by two closures.
pub struct FnCoefficients<D, S> {
    pub drift: D,
    pub diffuse: S,
}

impl<D, S> Coefficients for FnCoefficients<D, S>
where
    D: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
    S: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    fn diffuse(&self, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        (self.diffuse)(t, x, w, out)
    }
}

/// The one-step map `Υ(s, t, x, w)` advancing the forward state.
#[derive(Clone)]
pub enum ForwardScheme {
    /// `x + c w` (Brownian motion with constant diffusion `c I`).
    ShiftedBrownian { scale: f64 },
    /// Exact geometric Brownian motion step, componentwise.
    GeometricExact { drift: f64, vol: f64 },
    EulerMaruyama(Arc<dyn Coefficients>),
}

impl fmt::Debug for ForwardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ForwardScheme::ShiftedBrownian { scale } => {
                f.debug_struct("ShiftedBrownian").field("scale", scale).finish()
            }
            ForwardScheme::GeometricExact { drift, vol } => f
                .debug_struct("GeometricExact")
                .field("drift", drift)
                .field("vol", vol)
                .finish(),
            ForwardScheme::EulerMaruyama(_) => f.write_str("EulerMaruyama(..)"),
        }
    }
}

impl ForwardScheme {
    /// Applies `Υ(s, t, x, w)` and writes the new state into `out`.
    pub fn step_into(&self, s: f64, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            ForwardScheme::ShiftedBrownian { scale } => {
                for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
                    *o = xi + scale * wi;
                }
            }
            ForwardScheme::GeometricExact { drift, vol } => {
                if x.iter().any(|&xi| !(xi > 0.0)) {
                    return Err(Error::config("geometric step requires a positive state"));
                }
                let growth = (drift - 0.5 * vol * vol) * (t - s);
                for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
                    *o = xi * (growth + vol * wi).exp();
                }
            }
            ForwardScheme::EulerMaruyama(c) => {
                if !(t > s) {
                    return Err(Error::config("Euler step requires t > s"));
                }
                let mut noise = vec![0.0; x.len()];
                c.drift(s, x, out);
                c.diffuse(s, x, w, &mut noise);
                for ((o, &xi), &ni) in out.iter_mut().zip(x).zip(&noise) {
                    *o = xi + *o * (t - s) + ni;
                }
            }
        }
        Ok(())
    }

    pub fn step(&self, s: f64, t: f64, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.step_into(s, t, x, w, &mut out)?;
        Ok(out)
    }
}

/// `x + c w`.
pub fn step_shifted_brownian(x: &[f64], w: &[f64], scale: f64) -> Vec<f64> {
    x.iter().zip(w).map(|(xi, wi)| xi + scale * wi).collect()
}

/// `x_i exp((μ̄ - σ̄²/2)(t - s) + σ̄ w_i)`.
pub fn step_geometric(s: f64, t: f64, x: &[f64], w: &[f64], drift: f64, vol: f64) -> Result<Vec<f64>> {
    ForwardScheme::GeometricExact { drift, vol }.step(s, t, x, w)
}

/// `x + μ(s, x)(t - s) + σ(s, x) w`.
pub fn step_euler(s: f64, t: f64, x: &[f64], w: &[f64], coeffs: Arc<dyn Coefficients>) -> Result<Vec<f64>> {
    ForwardScheme::EulerMaruyama(coeffs).step(s, t, x, w)
}

/// Brownian increments and forward states for a batch of samples.
///
/// Stored step-major: `increments[[n, j, k]]` is coordinate `k` of
/// `W_{t_{n+1}} - W_{t_n}` for sample `j`, and `states[[n, j, k]]` is `X_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    increments: Array3<f64>,
    states: Array3<f64>,
    seed: Option<u64>,
}

impl PathBatch {
    /// Builds the forward states from given increments of shape `(N, J, d)`.
    pub fn from_increments(
        grid: &TimeGrid,
        scheme: &ForwardScheme,
        xi: &[f64],
        increments: Array3<f64>,
    ) -> Result<Self> {
        let (steps, batch, dim) = increments.dim();
        if steps != grid.steps() {
            return Err(Error::Shape {
                what: "increment steps",
                expected: grid.steps(),
                actual: steps,
            });
        }
        if dim != xi.len() {
            return Err(Error::Shape {
                what: "increment dimension",
                expected: xi.len(),
                actual: dim,
            });
        }
        let mut states = Array3::zeros((steps + 1, batch, dim));
        for j in 0..batch {
            states.slice_mut(ndarray::s![0, j, ..]).assign(&ArrayView1::from(xi));
        }
        for n in 0..steps {
            let (s, t) = (grid.t(n), grid.t(n + 1));
            for j in 0..batch {
                let x = states.slice(ndarray::s![n, j, ..]).to_vec();
                let w = increments.slice(ndarray::s![n, j, ..]);
                let w = w.as_slice().expect("contiguous increment row");
                let mut next = states.slice_mut(ndarray::s![n + 1, j, ..]);
                let out = next.as_slice_mut().expect("contiguous state row");
                scheme.step_into(s, t, &x, w, out)?;
            }
        }
        Ok(PathBatch {
            increments,
            states,
            seed: None,
        })
    }

    pub fn batch(&self) -> usize {
        self.increments.dim().1
    }

    pub fn steps(&self) -> usize {
        self.increments.dim().0
    }

    pub fn dim(&self) -> usize {
        self.increments.dim().2
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// All samples' increments over step `n`, `J x d`.
    pub fn increments_at(&self, n: usize) -> ArrayView2<'_, f64> {
        self.increments.index_axis(Axis(0), n)
    }

    /// All samples' states at node `n`, `J x d`.
    pub fn states_at(&self, n: usize) -> ArrayView2<'_, f64> {
        self.states.index_axis(Axis(0), n)
    }

    pub fn increment(&self, j: usize, n: usize) -> ArrayView1<'_, f64> {
        self.increments.slice(ndarray::s![n, j, ..])
    }

    pub fn state(&self, j: usize, n: usize) -> ArrayView1<'_, f64> {
        self.states.slice(ndarray::s![n, j, ..])
    }

    /// Debug dump: three little-endian u64 (`J`, `N`, `d`), then the
    /// increments and then the states, each in sample, step, coordinate order.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let (steps, batch, dim) = self.increments.dim();
        let mut bytes = Vec::with_capacity(24 + 8 * batch * dim * (2 * steps + 1));
        for v in [batch, steps, dim] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for arr in [&self.increments, &self.states] {
            for j in 0..batch {
                for row in arr.index_axis(Axis(1), j).outer_iter() {
                    row.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a dump back as `(increments, states)` in step-major layout.
    pub fn read_dump(path: &Path) -> Result<(Array3<f64>, Array3<f64>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
        if bytes.len() < 24 {
            return Err(Error::config("path dump too short"));
        }
        let (batch, steps, dim) = (word(0) as usize, word(1) as usize, word(2) as usize);
        let expected = 24 + 8 * batch * dim * (2 * steps + 1);
        if bytes.len() != expected {
            return Err(Error::Shape {
                what: "path dump bytes",
                expected,
                actual: bytes.len(),
            });
        }
        let mut pos = 3;
        let mut read = |n_nodes: usize| {
            let mut arr = Array3::zeros((n_nodes, batch, dim));
            for j in 0..batch {
                for n in 0..n_nodes {
                    for k in 0..dim {
                        arr[[n, j, k]] = f64::from_bits(word(pos));
                        pos += 1;
                    }
                }
            }
            arr
        };
        let inc = read(steps);
        let states = read(steps + 1);
        Ok((inc, states))
    }
}

/// Draws `J` paths: the increment of sample `j` over step `n` comes from the
/// stream keyed by `(seed, j, n)` and has per-coordinate variance `Δt_n`.
pub fn sample_paths(
    grid: &TimeGrid,
    scheme: &ForwardScheme,
    xi: &[f64],
    batch: usize,
    seed: u64,
) -> Result<PathBatch> {
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let steps = grid.steps();
    let dim = xi.len();
    let mut increments = Array3::zeros((steps, batch, dim));
    for n in 0..steps {
        let sd = grid.dt(n).sqrt();
        for j in 0..batch {
            let mut row = increments.slice_mut(ndarray::s![n, j, ..]);
            let out = row.as_slice_mut().expect("contiguous");
            fill_standard_normal(&mut keyed_rng(seed, &[j as u64, n as u64]), out);
            out.iter_mut().for_each(|v| *v *= sd);
        }
    }
    let mut paths = PathBatch::from_increments(grid, scheme, xi, increments)?;
    paths.seed = Some(seed);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    #[test]
    fn uniform_grid_nodes() {
        let g = TimeGrid::uniform(0.3, 20).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.horizon(), 0.3);
        assert!((g.dt(7) - 0.015).abs() < 1e-15);
        assert!(TimeGrid::uniform(0.0, 3).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.1, 0.7]).is_ok());
    }

    #[test]
    fn shifted_brownian_steps() {
        assert_eq!(step_shifted_brownian(&[0.0], &[0.0], SQRT_2), vec![0.0]);
        let y = step_shifted_brownian(&[1.0, 1.0], &[1.0, -1.0], SQRT_2);
        assert!((y[0] - (1.0 + SQRT_2)).abs() < 1e-15);
        assert!((y[1] - (1.0 - SQRT_2)).abs() < 1e-15);
        let y = step_shifted_brownian(&[0.0, 0.0], &[1.0, 0.0], 2.0 / SQRT_2);
        assert!((y[0] - SQRT_2).abs() < 1e-15);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn geometric_steps() {
        let x = [100.0, 50.0];
        assert_eq!(step_geometric(0.2, 0.2, &x, &[0.0, 0.0], 0.06, 0.2).unwrap(), x.to_vec());
        let y = step_geometric(0.0, 0.7, &x, &[0.0, 0.0], 0.02, 0.2).unwrap();
        assert!((y[0] - 100.0).abs() < 1e-12 && (y[1] - 50.0).abs() < 1e-12);
        let y = step_geometric(0.0, 0.025, &[100.0], &[0.0], 0.06, 0.2).unwrap();
        assert!((y[0] - 100.0 * 0.001f64.exp()).abs() < 1e-12);
        assert!((y[0] - 100.1001).abs() < 1e-4);
        assert!(step_geometric(0.0, 0.1, &[1.0, 0.0], &[0.0, 0.0], 0.06, 0.2).is_err());
    }

    #[test]
    fn euler_steps() {
        let ident: Arc<dyn Coefficients> = Arc::new(FnCoefficients {
            drift: |_t: f64, _x: &[f64], o: &mut [f64]| o.fill(0.0),
            diffuse: |_t: f64, _x: &[f64], w: &[f64], o: &mut [f64]| o.copy_from_slice(w),
        });
        let y = step_euler(0.0, 0.1, &[1.0, 2.0], &[0.5, -0.25], ident.clone()).unwrap();
        assert_eq!(y, vec![1.5, 1.75]);
        let linear: Arc<dyn Coefficients> = Arc::new(FnCoefficients {
            drift: |_t: f64, x: &[f64], o: &mut [f64]| o.copy_from_slice(x),
            diffuse: |_t: f64, _x: &[f64], _w: &[f64], o: &mut [f64]| o.fill(0.0),
        });
        let y = step_euler(0.0, 0.1, &[1.0, 2.0], &[0.3, 0.3], linear).unwrap();
        assert!((y[0] - 1.1).abs() < 1e-15 && (y[1] - 2.2).abs() < 1e-15);
        assert!(step_euler(0.1, 0.1, &[1.0], &[0.0], ident).is_err());
    }

    #[test]
    fn zero_noise_keeps_initial_state() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let scheme = ForwardScheme::ShiftedBrownian { scale: SQRT_2 };
        let xi = [0.5, -1.0, 2.0];
        let paths = PathBatch::from_increments(&grid, &scheme, &xi, Array3::zeros((5, 4, 3))).unwrap();
        for j in 0..4 {
            for n in 0..=5 {
                assert_eq!(paths.state(j, n).to_vec(), xi.to_vec());
            }
        }
    }

    #[test]
    fn geometric_zero_noise_path() {
        let grid = TimeGrid::uniform(0.5, 2).unwrap();
        let scheme = ForwardScheme::GeometricExact { drift: 0.06, vol: 0.2 };
        let paths =
            PathBatch::from_increments(&grid, &scheme, &[100.0, 100.0], Array3::zeros((2, 1, 2))).unwrap();
        let expected = 100.0 * ((0.06 - 0.02) * 0.25f64).exp();
        assert!((paths.state(0, 1)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_reproducible_and_keyed() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let scheme = ForwardScheme::ShiftedBrownian { scale: 1.0 };
        let a = sample_paths(&grid, &scheme, &[0.0; 3], 5, 42).unwrap();
        let b = sample_paths(&grid, &scheme, &[0.0; 3], 5, 42).unwrap();
        assert_eq!(a, b);
        // sample 2's increments do not depend on the batch size
        let c = sample_paths(&grid, &scheme, &[0.0; 3], 3, 42).unwrap();
        assert_eq!(a.increment(2, 3), c.increment(2, 3));
        for j in 0..5 {
            assert_eq!(a.state(j, 0).to_vec(), vec![0.0; 3]);
        }
    }

    #[test]
    fn dump_round_trip() {
        let grid = TimeGrid::uniform(1.0, 3).unwrap();
        let scheme = ForwardScheme::ShiftedBrownian { scale: 1.0 };
        let p = sample_paths(&grid, &scheme, &[0.1, 0.2], 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("paths.bin");
        p.dump(&path).unwrap();
        let (inc, states) = PathBatch::read_dump(&path).unwrap();
        assert_eq!(inc, p.increments);
        assert_eq!(states, p.states);
    }
}
