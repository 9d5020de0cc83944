//! REINFORCE training of single-distribution teachers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instancegen::{generate_instance, DistributionSpec};
use crate::optim::{clip_global_norm, Adam, AdamConfig, AdamState};
use crate::policy::{rollout, ArchSpec, PolicyParams, Replay, RolloutMode, RolloutTrace};
use crate::problems::{Instance, ProblemKind};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Mean length over the instance's multi-start rollouts.
    SharedMultistart,
    /// Greedy decode of a frozen copy, refreshed at every epoch start.
    GreedyRollout,
}

impl std::fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineMode::SharedMultistart => "shared_multistart",
            BaselineMode::GreedyRollout => "greedy_rollout",
        })
    }
}

impl std::str::FromStr for BaselineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared_multistart" => Ok(BaselineMode::SharedMultistart),
            "greedy_rollout" => Ok(BaselineMode::GreedyRollout),
            _ => Err(Error::Config(format!("unknown baseline mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: ProblemKind,
    /// Nodes (TSP) or customers (CVRP) per instance.
    pub n: usize,
    pub distribution: DistributionSpec,
    pub embed_dim: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub baseline_mode: BaselineMode,
    /// Multi-start rollouts per instance; `None` uses every start.
    pub starts: Option<usize>,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Seed of the initial parameters; defaults to one derived from `seed`.
    /// Teachers meant for joint distillation share it so that they settle on
    /// the same tour orientation.
    pub init_seed: Option<u64>,
}

impl TrainConfig {
    pub fn new(problem: ProblemKind, n: usize, distribution: DistributionSpec) -> Self {
        Self {
            problem,
            n,
            distribution,
            embed_dim: 32,
            epochs: 10,
            steps_per_epoch: 20,
            batch_size: 16,
            learning_rate: 1e-4,
            baseline_mode: BaselineMode::SharedMultistart,
            starts: None,
            grad_clip: Some(1.0),
            seed: 0,
            init_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("embed_dim", self.embed_dim),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.problem == ProblemKind::Tsp && self.n < 2 {
            return Err(Error::Config("TSP needs at least 2 nodes".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(s) = self.starts {
            if s == 0 || s > self.n {
                return Err(Error::Config(format!("starts must lie in 1..={}", self.n)));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.distribution.validate()?;
        self.arch().validate()
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec::new(self.problem, self.embed_dim)
    }

    /// Rollout mode used to sample training tours.
    pub fn sampling_mode(&self) -> RolloutMode {
        match self.baseline_mode {
            BaselineMode::SharedMultistart => RolloutMode::MultiStart {
                starts: self.starts.unwrap_or(self.n),
                greedy: false,
            },
            BaselineMode::GreedyRollout => RolloutMode::Sample,
        }
    }
}

/// `-(L - b)` per trajectory.
pub fn advantages(lengths: &[f64], baselines: &[f64]) -> Vec<f64> {
    lengths.iter().zip(baselines).map(|(l, b)| -(l - b)).collect()
}

/// Every trajectory gets the mean length of the group.
pub fn shared_baseline(lengths: &[f64]) -> Vec<f64> {
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    vec![mean; lengths.len()]
}

/// Index of the first step whose action the policy chose.
pub fn first_chosen_step(trace: &RolloutTrace) -> usize {
    usize::from(trace.forced_first)
}

/// Value of the REINFORCE surrogate `weight · Σ_t (L_t - b_t) · log p(τ_t)`
/// over chosen steps of the replayed trajectories.
pub fn task_surrogate(replay: &Replay, traces: &[RolloutTrace], baselines: &[f64], weight: f64) -> f64 {
    traces
        .iter()
        .enumerate()
        .map(|(t, tr)| {
            let lp: f64 = replay.steps(t)[first_chosen_step(tr)..]
                .iter()
                .zip(&replay.actions(t)[first_chosen_step(tr)..])
                .map(|(s, &a)| s.log_probs[a])
                .sum();
            weight * (tr.tour.length() - baselines[t]) * lp
        })
        .sum()
}

/// Gradient of [`task_surrogate`].
pub fn task_gradient(
    replay: &Replay,
    params: &PolicyParams,
    traces: &[RolloutTrace],
    baselines: &[f64],
    weight: f64,
) -> Result<PolicyParams> {
    replay.backward(params, |t, s, _, c| {
        if s >= first_chosen_step(&traces[t]) {
            c[replay.actions(t)[s]] = weight * (traces[t].tour.length() - baselines[t]);
        }
    })
}

/// Samples tours on one instance and computes baselines.
pub fn sample_with_baseline(
    instance: &Instance,
    params: &PolicyParams,
    baseline_params: Option<&PolicyParams>,
    mode: RolloutMode,
    rng: &mut RngStream,
) -> Result<(Replay, Vec<RolloutTrace>, Vec<f64>)> {
    let (replay, traces) = Replay::rollout(instance, params, mode, rng)?;
    let lengths: Vec<f64> = traces.iter().map(|t| t.tour.length()).collect();
    let baselines = match baseline_params {
        None => shared_baseline(&lengths),
        Some(frozen) => {
            let greedy = rollout(instance, frozen, RolloutMode::Greedy, rng)?;
            vec![greedy[0].tour.length(); lengths.len()]
        }
    };
    Ok((replay, traces, baselines))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub mean_length: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Sums per-instance gradients in batch order so results do not depend on
/// thread scheduling.
pub(crate) fn reduce_in_order(
    template: &PolicyParams,
    parts: Vec<Result<(PolicyParams, f64, f64, usize)>>,
) -> Result<(PolicyParams, f64, f64, usize)> {
    let mut total = template.zeros_like();
    let (mut a, mut b, mut count) = (0.0, 0.0, 0usize);
    for part in parts {
        let (g, x, y, c) = part?;
        total.axpy(1.0, &g);
        a += x;
        b += y;
        count += c;
    }
    Ok((total, a, b, count))
}

/// Applies a clipped Adam update and checks the result.
pub(crate) fn apply_update(
    params: &mut PolicyParams,
    optimizer: &mut Adam,
    grads: &mut PolicyParams,
    clip: Option<f64>,
) -> Result<f64> {
    grads.check_finite("gradient")?;
    let norm = match clip {
        Some(c) => clip_global_norm(grads, c),
        None => grads.global_norm(),
    };
    optimizer.step(params, grads);
    params.check_finite("parameters after update")?;
    Ok(norm)
}

/// One REINFORCE update on `batch`. `baseline_params` must be given exactly
/// when the config uses the greedy-rollout baseline.
pub fn reinforce_step(
    params: &mut PolicyParams,
    optimizer: &mut Adam,
    batch: &[Instance],
    config: &TrainConfig,
    baseline_params: Option<&PolicyParams>,
    rng: &mut RngStream,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if (config.baseline_mode == BaselineMode::GreedyRollout) != baseline_params.is_some() {
        return Err(Error::Config(
            "a frozen baseline policy is required exactly for greedy_rollout".into(),
        ));
    }
    let mode = config.sampling_mode();
    let rngs: Vec<RngStream> = batch.iter().map(|_| rng.fork()).collect();
    let trajectories_per_instance = match mode {
        RolloutMode::MultiStart { starts, .. } => starts,
        _ => 1,
    };
    let weight = 1.0 / (batch.len() * trajectories_per_instance) as f64;
    let current: &PolicyParams = params;
    let parts: Vec<_> = batch
        .par_iter()
        .zip(rngs)
        .map(|(inst, mut r)| {
            let (replay, traces, baselines) =
                sample_with_baseline(inst, current, baseline_params, mode, &mut r)?;
            let loss = task_surrogate(&replay, &traces, &baselines, weight);
            let grads = task_gradient(&replay, current, &traces, &baselines, weight)?;
            let total_len: f64 = traces.iter().map(|t| t.tour.length()).sum();
            Ok((grads, loss, total_len, traces.len()))
        })
        .collect();
    let (mut grads, loss, total_len, count) = reduce_in_order(params, parts)?;
    if !loss.is_finite() {
        return Err(Error::numeric("reinforce loss", format!("loss = {loss}")));
    }
    let grad_norm = apply_update(params, optimizer, &mut grads, config.grad_clip)?;
    Ok(StepStats {
        mean_length: total_len / count as f64,
        loss,
        grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub mean_length: f64,
    pub baseline_mode: BaselineMode,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub optimizer: AdamState,
    pub log: Vec<TrainLogRow>,
}

impl TrainOutcome {
    /// Mean of the logged step lengths for each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.log.iter().map(|r| r.epoch).max().unwrap_or(0);
        (1..=epochs)
            .map(|e| {
                let rows: Vec<f64> = self.log.iter().filter(|r| r.epoch == e).map(|r| r.mean_length).collect();
                rows.iter().sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

/// Salt for the initialization stream, disjoint from per-step salts.
const INIT_SALT: u64 = u64::MAX;

/// Fresh training batch for global step `step`.
pub fn training_batch(
    problem: ProblemKind,
    spec: &DistributionSpec,
    n: usize,
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<Instance>> {
    let mut rng = RngStream::derive(seed, 2 * step as u64);
    (0..batch_size)
        .map(|_| generate_instance(problem, spec, n, &mut rng))
        .collect()
}

/// Sampling stream for global step `step`.
pub fn step_stream(seed: u64, step: usize) -> RngStream {
    RngStream::derive(seed, 2 * step as u64 + 1)
}

/// Trains a policy from scratch. `on_epoch` runs after every epoch with the
/// 1-based epoch index.
pub fn train_teacher<F>(config: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &PolicyParams, &AdamState) -> Result<()>,
{
    config.validate()?;
    let mut init = match config.init_seed {
        Some(s) => RngStream::new(s),
        None => RngStream::derive(config.seed, INIT_SALT),
    };
    let mut params = PolicyParams::init(&config.arch(), &mut init)?;
    let mut optimizer = Adam::new(&params, AdamConfig::new(config.learning_rate));
    let mut log = Vec::with_capacity(config.epochs * config.steps_per_epoch);
    let mut global = 0;
    for epoch in 1..=config.epochs {
        let frozen = (config.baseline_mode == BaselineMode::GreedyRollout).then(|| params.clone());
        for _ in 0..config.steps_per_epoch {
            let batch = training_batch(
                config.problem,
                &config.distribution,
                config.n,
                config.batch_size,
                config.seed,
                global,
            )?;
            let mut rng = step_stream(config.seed, global);
            let stats = reinforce_step(&mut params, &mut optimizer, &batch, config, frozen.as_ref(), &mut rng)?;
            global += 1;
            log::debug!("epoch {epoch} step {global} mean length {:.4}", stats.mean_length);
            log.push(TrainLogRow {
                epoch,
                step: global,
                mean_length: stats.mean_length,
                baseline_mode: config.baseline_mode,
                seed: config.seed,
            });
        }
        on_epoch(epoch, &params, &optimizer.state)?;
    }
    Ok(TrainOutcome {
        params,
        optimizer: optimizer.state,
        log,
    })
}

/// Writes the training log as CSV.
pub fn write_train_log<W: std::io::Write>(rows: &[TrainLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
