//! Multi-run training experiments, checkpoint statistics and report files.
//!
//! Run `r` trains with seed `derive_seed(master, [r])` (or an explicit seed
//! from the configuration). Iteration `m` of a run draws its paths with seed
//! `derive_seed(run_seed, [m])`, so runs are independent and every report is
//! reproducible bit for bit, except for the wall-clock column.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{estimate_loss, loss_and_grad, RolloutConfig};
use crate::diffnet::{init_params, BatchNormState, Mode, ParameterVector};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::problems::{default_shape, with_shape, ProblemSpec, Shape};
use crate::rng::derive_seed;
use crate::sde::sample_paths;
use crate::stats::{mean, sample_std};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0x1417;
const EVAL_STREAM: u64 = 0xe7a1;

fn default_runs() -> usize {
    5
}
fn default_batch() -> usize {
    64
}
fn default_eval_samples() -> usize {
    256
}
fn default_checkpoint_every() -> u64 {
    100
}
fn default_true() -> bool {
    true
}

/// Everything needed to reproduce an experiment. Stored as JSON; absent
/// fields take the problem's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<LrSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0_range: Option<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Explicit per-run seeds; overrides derivation from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_seeds: Option<Vec<u64>>,
    #[serde(default = "default_eval_samples")]
    pub loss_eval_samples: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_true")]
    pub use_batch_norm: bool,
}

impl ExperimentConfig {
    pub fn new(problem: impl Into<String>) -> Self {
        ExperimentConfig {
            problem: problem.into(),
            dim: None,
            horizon: None,
            steps: None,
            iterations: None,
            batch: default_batch(),
            lr: None,
            u0_range: None,
            seed: 0,
            runs: default_runs(),
            run_seeds: None,
            loss_eval_samples: default_eval_samples(),
            checkpoint_every: default_checkpoint_every(),
            optimizer: OptimizerKind::Adam,
            use_batch_norm: true,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// The problem with every override applied.
    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let base = default_shape(&self.problem)?;
        let shape = Shape {
            dim: self.dim.unwrap_or(base.dim),
            horizon: self.horizon.unwrap_or(base.horizon),
            steps: self.steps.unwrap_or(base.steps),
        };
        let mut p = with_shape(&self.problem, shape)?;
        if let Some(lr) = &self.lr {
            p.lr = lr.clone();
        }
        if let Some(range) = self.u0_range {
            p.u0_range = range;
        }
        Ok(p)
    }

    pub fn iterations_for(&self, problem: &ProblemSpec) -> u64 {
        self.iterations.unwrap_or(problem.default_iterations)
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        match &self.run_seeds {
            Some(seeds) => seeds[run],
            None => derive_seed(self.seed, &[run as u64]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("runs must be at least 1"));
        }
        if self.iterations == Some(0) {
            return Err(Error::config("iterations must be at least 1"));
        }
        if self.batch == 0 || self.loss_eval_samples == 0 {
            return Err(Error::config("batch and loss_eval_samples must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        if let Some(seeds) = &self.run_seeds {
            if seeds.len() != self.runs {
                return Err(Error::config(format!(
                    "{} run seeds given for {} runs",
                    seeds.len(),
                    self.runs
                )));
            }
        }
        if let Some((lo, hi)) = self.u0_range {
            if !(lo <= hi) {
                return Err(Error::config("u0_range must satisfy lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Statistics of one run at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub u0: f64,
    pub loss: f64,
    pub runtime_s: f64,
}

/// One training iteration: the mini-batch loss at the parameters before the
/// update and `u0` after it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub batch_loss: f64,
    pub u0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub run: usize,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
}

/// One row of the summary table. Error columns are absent when the problem
/// has no reference value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    pub runs: usize,
    pub mean_u: f64,
    pub std_u: f64,
    pub rel_l1_err: Option<f64>,
    pub std_rel_l1_err: Option<f64>,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub reference: Option<f64>,
    pub rows: Vec<ReportRow>,
    pub detail: Vec<RunDetail>,
}

impl RunReport {
    pub fn failures(&self) -> impl Iterator<Item = &RunDetail> {
        self.detail.iter().filter(|d| d.failure.is_some())
    }

    pub fn final_row(&self) -> Option<&ReportRow> {
        self.rows.last()
    }

    pub fn row_at(&self, step: u64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.step == step)
    }
}

/// The end state of one run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub run: usize,
    pub seed: u64,
    pub params: ParameterVector,
    pub bn_state: BatchNormState,
    pub history: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub failure: Option<RunFailure>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<TrainedRun>,
    pub report: RunReport,
}

impl Experiment {
    /// Per-step curves averaged over runs that reached the step.
    pub fn curves(&self) -> Curves {
        let longest = self.runs.iter().map(|r| r.history.len()).max().unwrap_or(0);
        let mut curves = Curves::default();
        for i in 0..longest {
            let recs: Vec<&StepRecord> = self.runs.iter().filter_map(|r| r.history.get(i)).collect();
            let step = recs[0].step;
            curves
                .loss
                .push((step, mean(&recs.iter().map(|r| r.batch_loss).collect::<Vec<_>>())));
            if let Some(u) = self.report.reference {
                let errs: Vec<f64> = recs.iter().map(|r| relative_error(r.u0, u)).collect();
                curves.rel_error.push((step, mean(&errs)));
            }
        }
        curves
    }
}

/// `(iteration, value)` series for plotting.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Curves {
    pub rel_error: Vec<(u64, f64)>,
    pub loss: Vec<(u64, f64)>,
}

pub fn relative_error(estimate: f64, reference: f64) -> f64 {
    (estimate - reference).abs() / reference.abs()
}

fn checkpoint(
    step: u64,
    params: &ParameterVector,
    bn: &BatchNormState,
    problem: &ProblemSpec,
    config: &ExperimentConfig,
    run_seed: u64,
    started: Instant,
) -> Result<CheckpointRecord> {
    let loss = estimate_loss(
        params,
        bn,
        problem,
        config.loss_eval_samples,
        derive_seed(run_seed, &[EVAL_STREAM, step]),
        config.use_batch_norm,
    )?;
    Ok(CheckpointRecord {
        step,
        u0: params.u0(),
        loss,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Trains a single run to completion or to its first numerical failure.
pub fn train_run(problem: &ProblemSpec, config: &ExperimentConfig, run: usize) -> Result<TrainedRun> {
    let seed = config.run_seed(run);
    let iterations = config.iterations_for(problem);
    let spec = problem.subnet_spec();
    let mut params = init_params(
        &spec,
        problem.steps,
        derive_seed(seed, &[INIT_STREAM]),
        problem.u0_range,
        problem.z0_scale(),
    )?;
    let mut bn = BatchNormState::new(&spec, problem.steps);
    let mut opt = Optimizer::new(config.optimizer, params.len());
    let grid = problem.grid();
    let rollout = RolloutConfig {
        problem,
        mode: Mode::Train,
        use_batch_norm: config.use_batch_norm,
    };
    let started = Instant::now();
    let mut history = Vec::with_capacity(iterations as usize);
    let mut checkpoints = Vec::new();
    let mut failure = None;

    let mut body = |history: &mut Vec<StepRecord>, checkpoints: &mut Vec<CheckpointRecord>| -> Result<()> {
        checkpoints.push(checkpoint(0, &params, &bn, problem, config, seed, started)?);
        for m in 1..=iterations {
            let paths = sample_paths(&grid, &problem.scheme, &problem.xi, config.batch, derive_seed(seed, &[m]))?;
            let (loss, grad) = loss_and_grad(&params, &mut bn, &paths, &rollout)?;
            opt.apply(params.data_mut(), &grad, problem.lr.lr_at(m)?)?;
            if !params.u0().is_finite() {
                return Err(Error::NonFinite { what: "u0", step: 0 });
            }
            history.push(StepRecord {
                step: m,
                batch_loss: loss,
                u0: params.u0(),
            });
            if m % config.checkpoint_every == 0 || m == iterations {
                checkpoints.push(checkpoint(m, &params, &bn, problem, config, seed, started)?);
            }
        }
        Ok(())
    };
    match body(&mut history, &mut checkpoints) {
        Ok(()) => {}
        Err(e @ (Error::NonFinite { .. } | Error::NonFiniteInput(_))) => {
            failure = Some(RunFailure {
                step: history.len() as u64 + 1,
                message: e.to_string(),
            });
        }
        Err(e) => return Err(e),
    }
    Ok(TrainedRun {
        run,
        seed,
        params,
        bn_state: bn,
        history,
        checkpoints,
        failure,
    })
}

/// Trains every run of `config` (in parallel when threads are available)
/// and aggregates the checkpoint statistics.
pub fn train(config: &ExperimentConfig) -> Result<Experiment> {
    config.validate()?;
    let problem = config.problem_spec()?;
    let runs: Vec<TrainedRun> = (0..config.runs)
        .into_par_iter()
        .map(|r| train_run(&problem, config, r))
        .collect::<Result<_>>()?;
    let reference = problem.reference.as_ref().map(|r| r.value);
    let detail: Vec<RunDetail> = runs
        .iter()
        .map(|r| RunDetail {
            run: r.run,
            seed: r.seed,
            checkpoints: r.checkpoints.clone(),
            failure: r.failure.clone(),
        })
        .collect();
    let report = RunReport {
        config: config.clone(),
        reference,
        rows: aggregate(&detail, reference),
        detail,
    };
    Ok(Experiment { runs, report })
}

/// Summary rows from per-run checkpoints. A step's row uses every run that
/// recorded it.
pub fn aggregate(detail: &[RunDetail], reference: Option<f64>) -> Vec<ReportRow> {
    let mut steps: Vec<u64> = detail
        .iter()
        .flat_map(|d| d.checkpoints.iter().map(|c| c.step))
        .collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|step| {
            let recs: Vec<&CheckpointRecord> = detail
                .iter()
                .filter_map(|d| d.checkpoints.iter().find(|c| c.step == step))
                .collect();
            let us: Vec<f64> = recs.iter().map(|c| c.u0).collect();
            let losses: Vec<f64> = recs.iter().map(|c| c.loss).collect();
            let times: Vec<f64> = recs.iter().map(|c| c.runtime_s).collect();
            let errs: Option<Vec<f64>> = reference.map(|u| us.iter().map(|&x| relative_error(x, u)).collect());
            ReportRow {
                step,
                runs: recs.len(),
                mean_u: mean(&us),
                std_u: sample_std(&us),
                rel_l1_err: errs.as_deref().map(mean),
                std_rel_l1_err: errs.as_deref().map(sample_std),
                loss_mean: mean(&losses),
                loss_std: sample_std(&losses),
                runtime_s: mean(&times),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "step",
    "mean_u",
    "std_u",
    "rel_l1_err",
    "std_rel_l1_err",
    "loss_mean",
    "loss_std",
    "runtime_s",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_to_json(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn report_from_json(text: &str) -> Result<RunReport> {
    Ok(serde_json::from_str(text)?)
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let text = report_to_json(report)?;
            fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(CSV_COLUMNS)?;
            for r in &report.rows {
                w.write_record([
                    r.step.to_string(),
                    r.mean_u.to_string(),
                    r.std_u.to_string(),
                    fmt_opt(r.rel_l1_err),
                    fmt_opt(r.std_rel_l1_err),
                    r.loss_mean.to_string(),
                    r.loss_std.to_string(),
                    r.runtime_s.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

fn write_series(path: &Path, series: &[(u64, f64)]) -> Result<()> {
    let mut out = Vec::with_capacity(series.len() * 24);
    for (m, v) in series {
        writeln!(out, "{m} {v}").expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>_error.dat` and `<prefix>_loss.dat`, one `iteration value`
/// pair per line. The error file is empty when there is no reference.
pub fn emit_curves(curves: &Curves, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let with_suffix = |s: &str| {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(s);
        prefix.with_file_name(name)
    };
    let err_path = with_suffix("_error.dat");
    let loss_path = with_suffix("_loss.dat");
    write_series(&err_path, &curves.rel_error)?;
    write_series(&loss_path, &curves.loss)?;
    Ok((err_path, loss_path))
}
