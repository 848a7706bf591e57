//! Reverse-mode tape over batch matrices.
//!
//! Every node holds a `rows x cols` value (rows index batch samples) and the
//! operation that produced it, with whatever forward quantities its backward
//! rule needs. Parameters are referenced by offset into the borrowed flat
//! parameter slice, so [`Tape::backward`] returns a gradient of the same
//! length as that slice.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Broadcast {
        offset: usize,
    },
    Linear {
        input: NodeId,
        weight: usize,
    },
    BatchNorm {
        input: NodeId,
        scale: usize,
        shift: usize,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Relu {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    BsdeStep {
        y: NodeId,
        z: NodeId,
        dfdy: Array1<f64>,
        dfdz: Array2<f64>,
        dw: Array2<f64>,
        dt: f64,
    },
    MeanSquaredMismatch {
        y: NodeId,
        target: Array1<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn last(&self) -> Option<NodeId> {
        self.nodes.len().checked_sub(1).map(NodeId)
    }

    /// Which side of zero every rectifier input lies on. Two evaluations
    /// with equal patterns lie on the same smooth piece of the loss.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { input } => Some(&self.nodes[input.0].value),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|&a| a > 0.0))
            .collect()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn param_matrix(&self, offset: usize, rows: usize, cols: usize) -> ArrayView2<'p, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[offset..offset + rows * cols])
            .expect("parameter block in range")
    }

    fn param_row(&self, offset: usize, len: usize) -> ArrayView1<'p, f64> {
        ArrayView1::from(&self.params[offset..offset + len])
    }

    /// A constant (no gradient flows into it).
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// `rows` copies of the parameter row `params[offset..offset + width]`.
    pub fn broadcast(&mut self, offset: usize, width: usize, rows: usize) -> NodeId {
        let row = self.param_row(offset, width);
        let value = row.broadcast((rows, width)).expect("broadcast").to_owned();
        self.push(value, Op::Broadcast { offset })
    }

    /// `input * W^T` where `W` is the `out_dim x in_dim` block at `weight`.
    pub fn linear(&mut self, input: NodeId, weight: usize, out_dim: usize) -> NodeId {
        let x = &self.nodes[input.0].value;
        let w = self.param_matrix(weight, out_dim, x.ncols());
        let value = x.dot(&w.t());
        self.push(value, Op::Linear { input, weight })
    }

    /// Batch normalization with statistics of the current batch. Returns the
    /// node and the observed (biased) batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        scale: usize,
        shift: usize,
        eps: f64,
    ) -> (NodeId, BatchMoments) {
        let x = &self.nodes[input.0].value;
        let rows = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / rows;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = centered * &inv_std;
        let value = self.affine(&xhat, scale, shift);
        let moments = BatchMoments {
            mean: mean.to_vec(),
            var: var.to_vec(),
        };
        let id = self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        (id, moments)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        scale: usize,
        shift: usize,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> NodeId {
        let x = &self.nodes[input.0].value;
        let mean = ArrayView1::from(mean);
        let inv_std = ArrayView1::from(var).mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let value = self.affine(&xhat, scale, shift);
        self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: false,
            },
        )
    }

    fn affine(&self, xhat: &Array2<f64>, scale: usize, shift: usize) -> Array2<f64> {
        let width = xhat.ncols();
        xhat * &self.param_row(scale, width) + self.param_row(shift, width)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.mapv(|v| v.max(0.0));
        self.push(value, Op::Relu { input })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = &self.nodes[input.0].value * factor;
        self.push(value, Op::Scale { input, factor })
    }

    /// One backward-Euler step of the value process:
    /// `y' = y - f * dt + <z, dw>` row by row, where the driver values `f`
    /// and its partials `dfdy`, `dfdz` were evaluated at `(y, z)` by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn bsde_step(
        &mut self,
        y: NodeId,
        z: NodeId,
        f: &Array1<f64>,
        dfdy: Array1<f64>,
        dfdz: Array2<f64>,
        dw: Array2<f64>,
        dt: f64,
    ) -> NodeId {
        let yv = self.nodes[y.0].value.column(0);
        let zv = &self.nodes[z.0].value;
        let noise = (zv * &dw).sum_axis(Axis(1));
        let next = &yv - &(f * dt) + &noise;
        let value = next.insert_axis(Axis(1));
        self.push(
            value,
            Op::BsdeStep {
                y,
                z,
                dfdy,
                dfdz,
                dw,
                dt,
            },
        )
    }

    /// `(1/J) * sum_j (y_j - target_j)^2` as a `1 x 1` node.
    pub fn mean_squared_mismatch(&mut self, y: NodeId, target: Array1<f64>) -> NodeId {
        let yv = self.nodes[y.0].value.column(0);
        let diff = &yv - &target;
        let loss = diff.dot(&diff) / diff.len() as f64;
        self.push(Array2::from_elem((1, 1), loss), Op::MeanSquaredMismatch { y, target })
    }

    /// Reverse sweep from the final node, which must be `1 x 1`, seeded with
    /// `seed`. Returns the gradient with respect to the whole parameter slice.
    pub fn backward(&self, seed: f64) -> Result<Vec<f64>> {
        let last = self.nodes.last().ok_or(Error::NotScalar { rows: 0, cols: 0 })?;
        let (rows, cols) = last.value.dim();
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[self.nodes.len() - 1] = Some(Array2::from_elem((1, 1), seed));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Broadcast { offset } => {
                    let colsum = g.sum_axis(Axis(0));
                    for (k, v) in colsum.iter().enumerate() {
                        grad[offset + k] += v;
                    }
                }
                Op::Linear { input, weight } => {
                    let x = &self.nodes[input.0].value;
                    let (out_dim, in_dim) = (g.ncols(), x.ncols());
                    let w = self.param_matrix(*weight, out_dim, in_dim);
                    let mut gw = ArrayViewMut2::from_shape(
                        (out_dim, in_dim),
                        &mut grad[*weight..*weight + out_dim * in_dim],
                    )
                    .expect("weight block in range");
                    general_mat_mul(1.0, &g.t(), x, 1.0, &mut gw);
                    accumulate(&mut adj[input.0], g.dot(&w));
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let width = g.ncols();
                    let gscale = (&g * xhat).sum_axis(Axis(0));
                    let gshift = g.sum_axis(Axis(0));
                    for k in 0..width {
                        grad[scale + k] += gscale[k];
                        grad[shift + k] += gshift[k];
                    }
                    let gamma = self.param_row(*scale, width);
                    let gxhat = &g * &gamma;
                    let gx = if *batch_stats {
                        // the batch mean and variance depend on every row
                        let mean_g = gxhat.mean_axis(Axis(0)).expect("nonempty");
                        let mean_gx = (&gxhat * xhat).mean_axis(Axis(0)).expect("nonempty");
                        (&gxhat - &mean_g - &(xhat * &mean_gx)) * inv_std
                    } else {
                        gxhat * inv_std
                    };
                    accumulate(&mut adj[input.0], gx);
                }
                Op::Relu { input } => {
                    let x = &self.nodes[input.0].value;
                    let mut gx = g;
                    gx.zip_mut_with(x, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut adj[input.0], gx);
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut adj[input.0], g * *factor);
                }
                Op::BsdeStep {
                    y,
                    z,
                    dfdy,
                    dfdz,
                    dw,
                    dt,
                } => {
                    let a = g.column(0);
                    let gy = &a * &dfdy.mapv(|v| 1.0 - v * dt);
                    let gz = (dw - &(dfdz * *dt)) * a.insert_axis(Axis(1));
                    accumulate(&mut adj[y.0], gy.insert_axis(Axis(1)));
                    accumulate(&mut adj[z.0], gz);
                }
                Op::MeanSquaredMismatch { y, target } => {
                    let s = g[[0, 0]];
                    let yv = self.nodes[y.0].value.column(0);
                    let n = target.len() as f64;
                    let gy = (&yv - target) * (2.0 * s / n);
                    accumulate(&mut adj[y.0], gy.insert_axis(Axis(1)));
                }
            }
        }
        Ok(grad)
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_squared_scalar() {
        let params = [3.0, 7.0, -1.0];
        let mut tape = Tape::new(&params);
        let u = tape.broadcast(0, 1, 1);
        let loss = tape.mean_squared_mismatch(u, Array1::zeros(1));
        assert_eq!(tape.value(loss)[[0, 0]], 9.0);
        let g = tape.backward(1.0).unwrap();
        assert_eq!(g, vec![6.0, 0.0, 0.0]);
    }

    #[test]
    fn seed_scales_gradient() {
        let params = [3.0];
        let mut tape = Tape::new(&params);
        let u = tape.broadcast(0, 1, 2);
        tape.mean_squared_mismatch(u, Array1::from(vec![1.0, 2.0]));
        let g1 = tape.backward(1.0).unwrap();
        let g2 = tape.backward(2.5).unwrap();
        assert!((g2[0] - 2.5 * g1[0]).abs() < 1e-15);
        // d/du mean((u-1)^2, (u-2)^2) = (u-1) + (u-2)
        assert!((g1[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_tape_is_not_scalar() {
        let tape = Tape::new(&[]);
        assert!(tape.backward(1.0).is_err());
    }
}
