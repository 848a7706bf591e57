//! The discretized backward equation: forward rollout of `Y` along sampled
//! paths, the terminal-mismatch loss and its exact gradient.

use ndarray::{Array1, Array2};

use crate::diffnet::{record_subnet, BatchNormState, Mode, ParameterVector, Tape};
use crate::problems::ProblemSpec;
use crate::sde::{sample_paths, PathBatch};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig<'a> {
    pub problem: &'a ProblemSpec,
    pub mode: Mode,
    pub use_batch_norm: bool,
}

impl<'a> RolloutConfig<'a> {
    pub fn train(problem: &'a ProblemSpec) -> Self {
        RolloutConfig {
            problem,
            mode: Mode::Train,
            use_batch_norm: true,
        }
    }

    pub fn eval(problem: &'a ProblemSpec) -> Self {
        RolloutConfig {
            problem,
            mode: Mode::Eval,
            use_batch_norm: true,
        }
    }
}

#[derive(Debug)]
pub struct RolloutResult<'p> {
    pub terminal_y: Array1<f64>,
    pub terminal_g: Array1<f64>,
    pub loss: f64,
    /// The recorded computation; its last node is the loss.
    pub tape: Tape<'p>,
}

fn check_shapes(params: &ParameterVector, paths: &PathBatch, problem: &ProblemSpec) -> Result<()> {
    let layout = params.layout();
    let checks = [
        ("parameter dimension", problem.dim, layout.dim),
        ("parameter steps", problem.steps, layout.steps),
        ("path dimension", problem.dim, paths.dim()),
        ("path steps", problem.steps, paths.steps()),
    ];
    for (what, expected, actual) in checks {
        if expected != actual {
            return Err(Error::Shape { what, expected, actual });
        }
    }
    Ok(())
}

/// Runs `Y_0 = u0`, `Z_0 = z0`, `Z_n = subnet_n(X_n)` and
/// `Y_{n+1} = Y_n - f(t_n, X_n, Y_n, Z_n) Δt_n + <Z_n, ΔW_n>` over the batch.
///
/// In training mode the batch-normalization running statistics in
/// `bn_state` are updated; in evaluation mode they are only read.
pub fn rollout<'p>(
    params: &'p ParameterVector,
    bn_state: &mut BatchNormState,
    paths: &PathBatch,
    config: &RolloutConfig<'_>,
) -> Result<RolloutResult<'p>> {
    let problem = config.problem;
    check_shapes(params, paths, problem)?;
    if config.mode == Mode::Train && config.use_batch_norm && paths.batch() < 2 && problem.steps > 1 {
        return Err(Error::config(
            "training-mode batch normalization needs at least two samples",
        ));
    }
    let grid = problem.grid();
    let layout = params.layout();
    let spec = problem.subnet_spec();
    let (batch, d) = (paths.batch(), problem.dim);

    let mut tape = Tape::new(params.data());
    let mut y = tape.broadcast(layout.u0_offset(), 1, batch);
    let mut z = tape.broadcast(layout.z0_range().start, d, batch);
    let mut dz_row = vec![0.0; d];
    for n in 0..problem.steps {
        let states = paths.states_at(n);
        if n >= 1 {
            let x = tape.input(states.to_owned());
            z = record_subnet(
                &mut tape,
                &spec,
                &layout.subnet(n),
                bn_state.subnet_mut(n),
                x,
                config.mode,
                config.use_batch_norm,
            );
        }
        let t = grid.t(n);
        let mut f = Array1::zeros(batch);
        let mut dfdy = Array1::zeros(batch);
        let mut dfdz = Array2::zeros((batch, d));
        {
            let yv = tape.value(y);
            let zv = tape.value(z);
            for j in 0..batch {
                let xj = states.row(j);
                let xj = xj.as_slice().expect("contiguous state row");
                let zj = zv.row(j);
                let zj = zj.as_slice().expect("contiguous z row");
                let (fv, fy) = problem
                    .driver
                    .eval_with_partials(t, xj, yv[[j, 0]], zj, &mut dz_row);
                f[j] = fv;
                dfdy[j] = fy;
                dfdz.row_mut(j).assign(&ndarray::ArrayView1::from(&dz_row[..]));
            }
        }
        let dw = paths.increments_at(n).to_owned();
        y = tape.bsde_step(y, z, &f, dfdy, dfdz, dw, grid.dt(n));
        if tape.value(y).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "Y", step: n + 1 });
        }
    }
    let terminal = paths.states_at(problem.steps);
    let terminal_g: Array1<f64> = terminal
        .rows()
        .into_iter()
        .map(|row| problem.terminal.eval(row.as_slice().expect("contiguous state row")))
        .collect();
    if terminal_g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "g(X_N)", step: problem.steps });
    }
    let terminal_y = tape.value(y).column(0).to_owned();
    let loss_node = tape.mean_squared_mismatch(y, terminal_g.clone());
    let loss = tape.value(loss_node)[[0, 0]];
    Ok(RolloutResult {
        terminal_y,
        terminal_g,
        loss,
        tape,
    })
}

/// Mini-batch loss and its exact gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ParameterVector,
    bn_state: &mut BatchNormState,
    paths: &PathBatch,
    config: &RolloutConfig<'_>,
) -> Result<(f64, Vec<f64>)> {
    if config.mode != Mode::Train {
        return Err(Error::config("gradients are only taken in training mode"));
    }
    let result = rollout(params, bn_state, paths, config)?;
    let grad = result.tape.backward(1.0)?;
    Ok((result.loss, grad))
}

/// Evaluation-mode loss on `n_samples` fresh paths drawn with `seed`. The
/// running statistics are not modified.
pub fn estimate_loss(
    params: &ParameterVector,
    bn_state: &BatchNormState,
    problem: &ProblemSpec,
    n_samples: usize,
    seed: u64,
    use_batch_norm: bool,
) -> Result<f64> {
    let paths = sample_paths(&problem.grid(), &problem.scheme, &problem.xi, n_samples, seed)?;
    let config = RolloutConfig {
        problem,
        mode: Mode::Eval,
        use_batch_norm,
    };
    let mut bn = bn_state.clone();
    Ok(rollout(params, &mut bn, &paths, &config)?.loss)
}
