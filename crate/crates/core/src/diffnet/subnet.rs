use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LayerStats, NodeId, ParameterVector, SubnetOffsets, Tape};
use super::BatchNormState;
use crate::{Error, Result};

/// Whether batch normalization uses (and updates) batch statistics or the
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Shape and normalization constants of one gradient subnet. Hidden layers
/// use the rectifier; the output layer is normalized but not activated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    /// Constant factor applied to the subnet output. Shrinking it shrinks
    /// the effective step size of the output normalization parameters.
    #[serde(default = "one")]
    pub output_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl SubnetSpec {
    pub const BN_EPSILON: f64 = 1e-6;
    pub const BN_MOMENTUM: f64 = 0.99;

    pub fn for_dim(d: usize) -> Self {
        SubnetSpec {
            input_dim: d,
            hidden_dim: d + 10,
            output_dim: d,
            bn_epsilon: Self::BN_EPSILON,
            bn_momentum: Self::BN_MOMENTUM,
            output_multiplier: 1.0,
        }
    }
}

/// Records one subnet evaluation on `tape` and returns the output node.
///
/// In training mode the three normalizations use batch statistics and fold
/// them into `stats`; in evaluation mode `stats` is only read.
pub fn record_subnet(
    tape: &mut Tape<'_>,
    spec: &SubnetSpec,
    offsets: &SubnetOffsets,
    stats: &mut [LayerStats],
    input: NodeId,
    mode: Mode,
    use_batch_norm: bool,
) -> NodeId {
    let h = spec.hidden_dim;
    let layers = [
        (offsets.w1, h, offsets.bn1_scale, offsets.bn1_shift),
        (offsets.w2, h, offsets.bn2_scale, offsets.bn2_shift),
        (offsets.w3, spec.output_dim, offsets.bn3_scale, offsets.bn3_shift),
    ];
    let mut node = input;
    for (k, &(w, width, scale, shift)) in layers.iter().enumerate() {
        node = tape.linear(node, w, width);
        if use_batch_norm {
            node = match mode {
                Mode::Train => {
                    let (id, moments) =
                        tape.batch_norm_train(node, scale, shift, spec.bn_epsilon);
                    stats[k].update(&moments.mean, &moments.var, spec.bn_momentum);
                    id
                }
                Mode::Eval => tape.batch_norm_eval(
                    node,
                    scale,
                    shift,
                    spec.bn_epsilon,
                    &stats[k].running_mean,
                    &stats[k].running_var,
                ),
            };
        }
        if k < 2 {
            node = tape.relu(node);
        }
    }
    if spec.output_multiplier != 1.0 {
        node = tape.scale(node, spec.output_multiplier);
    }
    node
}

/// Evaluates the subnet of time step `n` on a `J x d` batch with batch
/// normalization enabled, returning its `J x d` output and the tape.
pub fn subnet_forward<'p>(
    params: &'p ParameterVector,
    spec: &SubnetSpec,
    n: usize,
    bn_state: &mut BatchNormState,
    x_batch: &Array2<f64>,
    mode: Mode,
) -> Result<(Array2<f64>, Tape<'p>)> {
    let layout = params.layout();
    if n == 0 || n >= layout.steps {
        return Err(Error::config(format!(
            "subnet index {n} outside 1..{}",
            layout.steps
        )));
    }
    if x_batch.ncols() != spec.input_dim {
        return Err(Error::Shape {
            what: "subnet input width",
            expected: spec.input_dim,
            actual: x_batch.ncols(),
        });
    }
    if mode == Mode::Train && x_batch.nrows() < 2 {
        return Err(Error::config(
            "training-mode batch normalization needs at least two samples",
        ));
    }
    if x_batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("subnet"));
    }
    let mut tape = Tape::new(params.data());
    let input = tape.input(x_batch.clone());
    let out = record_subnet(
        &mut tape,
        spec,
        &layout.subnet(n),
        bn_state.subnet_mut(n),
        input,
        mode,
        true,
    );
    Ok((tape.value(out).clone(), tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_params, ParamLayout};
    use ndarray::{array, Axis};

    fn setup(d: usize, seed: u64) -> (SubnetSpec, ParameterVector, BatchNormState) {
        let spec = SubnetSpec::for_dim(d);
        let params = init_params(&spec, 3, seed, (0.0, 1.0), 0.1).unwrap();
        let bn = BatchNormState::new(&spec, 3);
        (spec, params, bn)
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::keyed_rng(seed, &[]);
        let mut data = vec![0.0; rows * cols];
        crate::rng::fill_standard_normal(&mut rng, &mut data);
        Array2::from_shape_vec((rows, cols), data).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (spec, params, mut bn) = setup(3, 1);
        let x = Array2::zeros((5, 3));
        for mode in [Mode::Train, Mode::Eval] {
            let (z, _) = subnet_forward(&params, &spec, 1, &mut bn, &x, mode).unwrap();
            assert!(z.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn permuting_rows_permutes_output() {
        let (spec, params, bn) = setup(3, 2);
        let x = batch(6, 3, 9);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = x.select(Axis(0), &perm);
        let (z, _) = subnet_forward(&params, &spec, 2, &mut bn.clone(), &x, Mode::Train).unwrap();
        let (zp, _) = subnet_forward(&params, &spec, 2, &mut bn.clone(), &xp, Mode::Train).unwrap();
        let expected = z.select(Axis(0), &perm);
        for (a, b) in zp.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_straight_line_evaluation() {
        // d = 2, hidden 12, J = 4, hand-written parameters
        let spec = SubnetSpec::for_dim(2);
        let layout = ParamLayout::new(&spec, 2).unwrap();
        let data: Vec<f64> = (0..layout.len())
            .map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.45) * 0.9)
            .collect();
        let params = ParameterVector::from_parts(layout, data).unwrap();
        let x = array![[0.3, -1.2], [1.1, 0.4], [-0.7, 0.9], [0.05, -0.2]];
        let mut bn = BatchNormState::new(&spec, 2);
        let (z, _) = subnet_forward(&params, &spec, 1, &mut bn, &x, Mode::Train).unwrap();

        let p = params.data();
        let o = params.layout().subnet(1);
        let eps = spec.bn_epsilon;
        let lin = |inp: &Vec<Vec<f64>>, off: usize, out: usize| -> Vec<Vec<f64>> {
            let inw = inp[0].len();
            inp.iter()
                .map(|row| {
                    (0..out)
                        .map(|r| (0..inw).map(|c| p[off + r * inw + c] * row[c]).sum())
                        .collect()
                })
                .collect()
        };
        let bnorm = |inp: Vec<Vec<f64>>, sc: usize, sh: usize| -> Vec<Vec<f64>> {
            let n = inp.len() as f64;
            let w = inp[0].len();
            let mut out = inp.clone();
            for k in 0..w {
                let m: f64 = inp.iter().map(|r| r[k]).sum::<f64>() / n;
                let v: f64 = inp.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n;
                for (j, row) in inp.iter().enumerate() {
                    out[j][k] = p[sc + k] * (row[k] - m) / (v + eps).sqrt() + p[sh + k];
                }
            }
            out
        };
        let relu = |inp: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            inp.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
        };
        let x0: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
        let a1 = relu(bnorm(lin(&x0, o.w1, 12), o.bn1_scale, o.bn1_shift));
        let a2 = relu(bnorm(lin(&a1, o.w2, 12), o.bn2_scale, o.bn2_shift));
        let a3 = bnorm(lin(&a2, o.w3, 2), o.bn3_scale, o.bn3_shift);
        for j in 0..4 {
            for k in 0..2 {
                assert!((z[[j, k]] - a3[j][k]).abs() < 1e-12, "({j},{k})");
            }
        }
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let (spec, params, mut bn) = setup(4, 3);
        let x = batch(128, 4, 17);
        let (z, _) = subnet_forward(&params, &spec, 1, &mut bn, &x, Mode::Train).unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        let var = z.var_axis(Axis(0), 0.0);
        for k in 0..4 {
            assert!(mean[k].abs() < 1e-6);
            assert!((var[k] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_is_pure() {
        let (spec, params, mut bn) = setup(3, 4);
        let x = batch(8, 3, 5);
        subnet_forward(&params, &spec, 1, &mut bn, &x, Mode::Train).unwrap();
        let before = bn.clone();
        let (a, _) = subnet_forward(&params, &spec, 1, &mut bn, &x, Mode::Eval).unwrap();
        let (b, _) = subnet_forward(&params, &spec, 1, &mut bn, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, bn);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (spec, params, mut bn) = setup(3, 4);
        let one = batch(1, 3, 1);
        assert!(subnet_forward(&params, &spec, 1, &mut bn, &one, Mode::Train).is_err());
        assert!(subnet_forward(&params, &spec, 1, &mut bn, &one, Mode::Eval).is_ok());
        let mut bad = batch(4, 3, 1);
        bad[[2, 1]] = f64::NAN;
        assert!(matches!(
            subnet_forward(&params, &spec, 1, &mut bn, &bad, Mode::Train),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn non_scalar_tape_is_rejected() {
        let (spec, params, mut bn) = setup(2, 4);
        let x = batch(4, 2, 1);
        let (_, tape) = subnet_forward(&params, &spec, 1, &mut bn, &x, Mode::Train).unwrap();
        assert!(matches!(tape.backward(1.0), Err(Error::NotScalar { rows: 4, cols: 2 })));
    }
}
