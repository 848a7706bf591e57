use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::SubnetSpec;
use crate::rng::keyed_rng;
use crate::{Error, Result};

/// One named contiguous region of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of the nine blocks of one subnet. Weight matrices are stored
/// row-major as `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubnetOffsets {
    pub w1: usize,
    pub bn1_scale: usize,
    pub bn1_shift: usize,
    pub w2: usize,
    pub bn2_scale: usize,
    pub bn2_shift: usize,
    pub w3: usize,
    pub bn3_scale: usize,
    pub bn3_shift: usize,
}

/// Layout of all trainable parameters for a `(d, N)` configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub dim: usize,
    pub hidden: usize,
    pub steps: usize,
    pub blocks: Vec<Block>,
}

const SUBNET_BLOCKS: usize = 9;

impl ParamLayout {
    pub fn new(spec: &SubnetSpec, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config(format!(
                "at least two time steps are required (got N = {steps})"
            )));
        }
        Self::build(spec, steps)
    }

    /// Layout of a one-step rollout: only `u0` and `z0`, no subnets.
    pub fn single_step(spec: &SubnetSpec) -> Result<Self> {
        Self::build(spec, 1)
    }

    fn build(spec: &SubnetSpec, steps: usize) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim != spec.input_dim {
            return Err(Error::config("subnet input and output dimension must equal d >= 1"));
        }
        let d = spec.input_dim;
        let h = spec.hidden_dim;
        let mut blocks = Vec::with_capacity(2 + SUBNET_BLOCKS * (steps - 1));
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let b = Block { name, offset, shape };
            offset += b.len();
            blocks.push(b);
        };
        push("u0".into(), vec![1]);
        push("z0".into(), vec![d]);
        for n in 1..steps {
            let p = format!("subnet{n}");
            push(format!("{p}.w1"), vec![h, d]);
            push(format!("{p}.bn1.scale"), vec![h]);
            push(format!("{p}.bn1.shift"), vec![h]);
            push(format!("{p}.w2"), vec![h, h]);
            push(format!("{p}.bn2.scale"), vec![h]);
            push(format!("{p}.bn2.shift"), vec![h]);
            push(format!("{p}.w3"), vec![d, h]);
            push(format!("{p}.bn3.scale"), vec![d]);
            push(format!("{p}.bn3.shift"), vec![d]);
        }
        Ok(ParamLayout {
            dim: d,
            hidden: h,
            steps,
            blocks,
        })
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn u0_offset(&self) -> usize {
        self.blocks[0].offset
    }

    pub fn z0_range(&self) -> std::ops::Range<usize> {
        self.blocks[1].range()
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Offsets of the subnet used at time step `n` (`1 <= n < N`).
    pub fn subnet(&self, n: usize) -> SubnetOffsets {
        assert!(n >= 1 && n < self.steps, "subnet index {n} out of range");
        let b = &self.blocks[2 + SUBNET_BLOCKS * (n - 1)..2 + SUBNET_BLOCKS * n];
        SubnetOffsets {
            w1: b[0].offset,
            bn1_scale: b[1].offset,
            bn1_shift: b[2].offset,
            w2: b[3].offset,
            bn2_scale: b[4].offset,
            bn2_shift: b[5].offset,
            w3: b[6].offset,
            bn3_scale: b[7].offset,
            bn3_shift: b[8].offset,
        }
    }

    /// The full range covered by the subnet of time step `n`.
    pub fn subnet_range(&self, n: usize) -> std::ops::Range<usize> {
        let first = &self.blocks[2 + SUBNET_BLOCKS * (n - 1)];
        let last = &self.blocks[1 + SUBNET_BLOCKS * n];
        first.offset..last.offset + last.len()
    }
}

/// Number of trainable parameters for dimension `d` and `N` time steps:
/// `d + 1 + (N - 1) * (2d(d+10) + (d+10)^2 + 4(d+10) + 2d)`.
pub fn param_count(d: usize, steps: usize) -> Result<usize> {
    if d == 0 {
        return Err(Error::config("dimension must be at least 1"));
    }
    if steps < 2 {
        return Err(Error::config(format!(
            "at least two time steps are required (got N = {steps})"
        )));
    }
    let h = d + 10;
    Ok(d + 1 + (steps - 1) * (2 * d * h + h * h + 4 * h + 2 * d))
}

/// Flat parameter storage together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    data: Vec<f64>,
    layout: ParamLayout,
}

impl ParameterVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        ParameterVector {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_parts(layout: ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Shape {
                what: "parameter vector",
                expected: layout.len(),
                actual: data.len(),
            });
        }
        Ok(ParameterVector { data, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The trainable approximation of `u(0, ξ)`.
    pub fn u0(&self) -> f64 {
        self.data[self.layout.u0_offset()]
    }

    pub fn z0(&self) -> &[f64] {
        &self.data[self.layout.z0_range()]
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.data[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.block(name)?.range();
        Some(&mut self.data[range])
    }

    /// Writes the values as little-endian f64 to `path` and the layout as
    /// JSON to `path` with a `.json` extension appended.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_f64_le(path, &self.data)?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.layout)?;
        fs::write(&sidecar, json).map_err(|e| Error::io(sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let layout: ParamLayout = serde_json::from_str(&text)?;
        let data = read_f64_le(path)?;
        ParameterVector::from_parts(layout, data)
    }
}

pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::config(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Random initialization.
///
/// Weight matrices are i.i.d. `N(0, 2 / (fan_in + fan_out))`, batch-norm
/// scales are one and shifts zero, `u0 ~ U[u0_range]` and
/// `z0_i ~ U[-z0_scale, z0_scale]`.
pub fn init_params(
    spec: &SubnetSpec,
    steps: usize,
    seed: u64,
    u0_range: (f64, f64),
    z0_scale: f64,
) -> Result<ParameterVector> {
    let (lo, hi) = u0_range;
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::config(format!("empty u0 range [{lo}, {hi}]")));
    }
    if !(z0_scale >= 0.0) {
        return Err(Error::config("z0 scale must be nonnegative"));
    }
    let layout = ParamLayout::new(spec, steps)?;
    let mut params = ParameterVector::zeros(layout);
    let mut rng = keyed_rng(seed, &[0x1a17]);

    params.data[0] = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    for v in &mut params.data[params.layout.z0_range()] {
        *v = if z0_scale == 0.0 {
            0.0
        } else {
            rng.random_range(-z0_scale..=z0_scale)
        };
    }

    let blocks = params.layout.blocks.clone();
    for b in blocks.iter().skip(2) {
        let slice = &mut params.data[b.range()];
        if b.name.ends_with(".scale") {
            slice.fill(1.0);
        } else if b.name.ends_with(".shift") {
            slice.fill(0.0);
        } else {
            let (fan_out, fan_in) = (b.shape[0], b.shape[1]);
            let normal = Normal::new(0.0, (2.0 / (fan_in + fan_out) as f64).sqrt())
                .expect("positive standard deviation");
            for v in slice {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}
