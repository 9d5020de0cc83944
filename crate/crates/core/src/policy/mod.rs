//! Attention construction policy: rollouts, tour scoring and exact
//! log-probability gradients.

mod arch;
pub mod checkpoint;
mod model;
mod params;
mod tensor;

use rand::Rng;

pub use arch::{ArchSpec, INPUT_FEATURES, LOGIT_CLIP, NORM_EPS};
pub use model::{DecoderContext, EncoderPass, StepCache, StepInput};
pub use params::{EncoderLayerParams, PolicyParams};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::problems::{ConstructionState, Instance, ProblemKind, Tour};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Argmax at every step, ties to the lowest node index.
    Greedy,
    /// Draw every action from the policy.
    Sample,
    /// `count` independent sampled rollouts sharing one encoder pass.
    Samples { count: usize },
    /// One rollout per forced first action: nodes `0..starts` for TSP,
    /// customers `1..=starts` for CVRP. Later actions are greedy or sampled.
    MultiStart { starts: usize, greedy: bool },
}

#[derive(Clone, Debug)]
pub struct RolloutTrace {
    pub tour: Tour,
    /// Decision actions; excludes the automatic final depot return.
    pub actions: Vec<usize>,
    /// Log-probability of each decision action under the acting policy.
    pub log_probs: Vec<f64>,
    /// Full per-step distributions, kept on request.
    pub distributions: Option<Vec<Vec<f64>>>,
    /// The first action was imposed (multi-start) rather than chosen.
    pub forced_first: bool,
}

impl RolloutTrace {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Sum of log-probabilities over the actions the policy actually chose.
    pub fn chosen_log_prob(&self) -> f64 {
        let skip = usize::from(self.forced_first);
        self.log_probs[skip..].iter().sum()
    }
}

fn step_input(instance: &Instance, state: &ConstructionState) -> StepInput {
    StepInput {
        current: state.current(),
        capacity_frac: match instance.kind() {
            ProblemKind::Cvrp => state.remaining_capacity() as f64 / instance.capacity() as f64,
            ProblemKind::Tsp => 0.0,
        },
    }
}

fn argmax_lowest(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = usize::MAX;
    for (j, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m && (best == usize::MAX || p > probs[best]) {
            best = j;
        }
    }
    best
}

fn sample_index(probs: &[f64], mask: &[bool], rng: &mut RngStream) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = usize::MAX;
    for (j, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        last = j;
        acc += p;
        if u < acc {
            return j;
        }
    }
    last
}

fn first_actions(instance: &Instance, mode: RolloutMode) -> Result<Vec<Option<usize>>> {
    match mode {
        RolloutMode::Greedy | RolloutMode::Sample => Ok(vec![None]),
        RolloutMode::Samples { count } => Ok(vec![None; count]),
        RolloutMode::MultiStart { starts, .. } => {
            let available = instance.n_customers();
            if starts == 0 || starts > available {
                return Err(Error::Config(format!(
                    "multi-start needs 1..={available} starts, got {starts}"
                )));
            }
            let offset = usize::from(instance.kind() == ProblemKind::Cvrp);
            Ok((0..starts).map(|s| Some(s + offset)).collect())
        }
    }
}

/// Constructs tours with the policy.
///
/// Greedy and sample modes return one trace; multi-start returns one per start.
pub fn rollout(
    instance: &Instance,
    params: &PolicyParams,
    mode: RolloutMode,
    rng: &mut RngStream,
) -> Result<Vec<RolloutTrace>> {
    rollout_with(instance, params, mode, rng, false)
}

pub fn rollout_with(
    instance: &Instance,
    params: &PolicyParams,
    mode: RolloutMode,
    rng: &mut RngStream,
    keep_distributions: bool,
) -> Result<Vec<RolloutTrace>> {
    let (replay, mut traces) = Replay::rollout(instance, params, mode, rng)?;
    if keep_distributions {
        for (t, trace) in traces.iter_mut().enumerate() {
            trace.distributions = Some(replay.steps(t).iter().map(|s| s.probs.clone()).collect());
        }
    }
    Ok(traces)
}

/// Forward pass over fixed action sequences on one instance, retaining every
/// intermediate needed to differentiate per-step log-probabilities.
pub struct Replay {
    encoder: EncoderPass,
    decoder: DecoderContext,
    steps: Vec<Vec<StepCache>>,
    actions: Vec<Vec<usize>>,
}

impl Replay {
    /// Replays each sequence through the construction process. A trailing
    /// CVRP depot return after the last customer is accepted and skipped.
    pub fn new<S: AsRef<[usize]>>(
        instance: &Instance,
        params: &PolicyParams,
        sequences: &[S],
    ) -> Result<Self> {
        let encoder = EncoderPass::forward(instance, params)?;
        let decoder = DecoderContext::new(encoder.embeddings(), params);
        let mut mask = vec![false; instance.n_nodes()];
        let mut all_steps = Vec::with_capacity(sequences.len());
        let mut all_actions = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let seq = seq.as_ref();
            let mut state = ConstructionState::new(instance);
            let mut steps = Vec::with_capacity(seq.len());
            let mut actions = Vec::with_capacity(seq.len());
            for (pos, &a) in seq.iter().enumerate() {
                if state.is_done() {
                    let trailing_depot = instance.depot() == Some(a) && pos + 1 == seq.len();
                    if trailing_depot {
                        break;
                    }
                    return Err(Error::Config(format!(
                        "sequence continues after completion at position {pos}"
                    )));
                }
                state.fill_mask(instance, &mut mask);
                if a >= mask.len() || !mask[a] {
                    return Err(Error::IllegalAction { action: a });
                }
                steps.push(decoder.step(params, step_input(instance, &state), &mask)?);
                state.step(instance, a)?;
                actions.push(a);
            }
            if !state.is_done() {
                return Err(Error::Infeasible(
                    crate::problems::validate_tour(instance, seq)
                        .err()
                        .unwrap_or(crate::problems::Violation::Missing { node: 0 }),
                ));
            }
            all_steps.push(steps);
            all_actions.push(actions);
        }
        Ok(Self {
            encoder,
            decoder,
            steps: all_steps,
            actions: all_actions,
        })
    }

    /// Constructs tours with the policy while retaining the replay caches,
    /// so the rollout can be differentiated without a second forward pass.
    pub fn rollout(
        instance: &Instance,
        params: &PolicyParams,
        mode: RolloutMode,
        rng: &mut RngStream,
    ) -> Result<(Self, Vec<RolloutTrace>)> {
        let encoder = EncoderPass::forward(instance, params)?;
        let decoder = DecoderContext::new(encoder.embeddings(), params);
        let greedy = match mode {
            RolloutMode::Greedy => true,
            RolloutMode::Sample | RolloutMode::Samples { .. } => false,
            RolloutMode::MultiStart { greedy, .. } => greedy,
        };
        let n = instance.n_nodes();
        let mut mask = vec![false; n];
        let firsts = first_actions(instance, mode)?;
        let mut all_steps = Vec::with_capacity(firsts.len());
        let mut all_actions = Vec::with_capacity(firsts.len());
        let mut traces = Vec::with_capacity(firsts.len());
        for forced in firsts {
            let mut state = ConstructionState::new(instance);
            let mut steps = Vec::with_capacity(2 * n);
            let mut actions = Vec::with_capacity(2 * n);
            let mut log_probs = Vec::with_capacity(2 * n);
            while !state.is_done() {
                if state.fill_mask(instance, &mut mask) == 0 {
                    return Err(Error::Invariant("reachable state without feasible action".into()));
                }
                let step = decoder.step(params, step_input(instance, &state), &mask)?;
                let action = match forced {
                    Some(a) if actions.is_empty() => a,
                    _ if greedy => argmax_lowest(&step.probs, &mask),
                    _ => sample_index(&step.probs, &mask, rng),
                };
                log_probs.push(step.log_probs[action]);
                steps.push(step);
                state.step(instance, action)?;
                actions.push(action);
            }
            traces.push(RolloutTrace {
                tour: Tour::new(instance, state.sequence().to_vec())?,
                actions: actions.clone(),
                log_probs,
                distributions: None,
                forced_first: forced.is_some(),
            });
            all_steps.push(steps);
            all_actions.push(actions);
        }
        let replay = Self {
            encoder,
            decoder,
            steps: all_steps,
            actions: all_actions,
        };
        Ok((replay, traces))
    }

    pub fn n_trajectories(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self, trajectory: usize) -> &[StepCache] {
        &self.steps[trajectory]
    }

    pub fn actions(&self, trajectory: usize) -> &[usize] {
        &self.actions[trajectory]
    }

    pub fn embeddings(&self) -> &Tensor {
        self.encoder.embeddings()
    }

    pub fn log_prob(&self, trajectory: usize) -> f64 {
        self.steps[trajectory]
            .iter()
            .zip(&self.actions[trajectory])
            .map(|(s, &a)| s.log_probs[a])
            .sum()
    }

    /// Gradient of `Σ_traj Σ_step Σ_node c · log p(node)`, where `coeffs`
    /// fills the coefficient vector `c` for each (trajectory, step).
    /// Coefficients on masked nodes must be zero.
    pub fn backward<F>(&self, params: &PolicyParams, mut coeffs: F) -> Result<PolicyParams>
    where
        F: FnMut(usize, usize, &StepCache, &mut [f64]),
    {
        let mut grads = params.zeros_like();
        let mut dg = self.decoder.zero_grads();
        let mut buf = vec![0.0; self.decoder.n_nodes()];
        for (t, steps) in self.steps.iter().enumerate() {
            for (s, step) in steps.iter().enumerate() {
                buf.iter_mut().for_each(|v| *v = 0.0);
                coeffs(t, s, step, &mut buf);
                self.decoder.step_backward(params, step, &buf, &mut dg, &mut grads);
            }
        }
        let dh = self
            .decoder
            .backward(params, self.encoder.embeddings(), dg, &mut grads);
        self.encoder.backward(params, dh, &mut grads);
        grads.check_finite("policy backward")?;
        Ok(grads)
    }
}

/// Per-step distributions of a policy along a fixed tour.
#[derive(Clone, Debug)]
pub struct TourScore {
    pub actions: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub distributions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub total_log_prob: f64,
}

fn score_from_replay(replay: &Replay, t: usize) -> TourScore {
    let steps = replay.steps(t);
    let actions = replay.actions(t).to_vec();
    let log_probs: Vec<f64> = steps.iter().zip(&actions).map(|(s, &a)| s.log_probs[a]).collect();
    TourScore {
        masks: steps.iter().map(|s| s.mask.clone()).collect(),
        distributions: steps.iter().map(|s| s.probs.clone()).collect(),
        total_log_prob: log_probs.iter().sum(),
        log_probs,
        actions,
    }
}

/// Replays `sequence` and reports the policy's distribution at every step.
pub fn score_tour(instance: &Instance, sequence: &[usize], params: &PolicyParams) -> Result<TourScore> {
    let replay = Replay::new(instance, params, &[sequence])?;
    Ok(score_from_replay(&replay, 0))
}

/// [`score_tour`] for several tours of the same instance, sharing the encoder.
pub fn score_tours<S: AsRef<[usize]>>(
    instance: &Instance,
    sequences: &[S],
    params: &PolicyParams,
) -> Result<Vec<TourScore>> {
    let replay = Replay::new(instance, params, sequences)?;
    Ok((0..replay.n_trajectories())
        .map(|t| score_from_replay(&replay, t))
        .collect())
}

/// Exact gradient of the tour's total log-probability.
pub fn grad_log_prob(instance: &Instance, sequence: &[usize], params: &PolicyParams) -> Result<PolicyParams> {
    let replay = Replay::new(instance, params, &[sequence])?;
    let actions = replay.actions(0).to_vec();
    replay.backward(params, |_, s, _, c| c[actions[s]] = 1.0)
}

/// Node embeddings of `instance`.
pub fn encode(instance: &Instance, params: &PolicyParams) -> Result<Tensor> {
    params.check_finite("encode")?;
    Ok(EncoderPass::forward(instance, params)?.embeddings().clone())
}

/// Action distribution for `state` given precomputed embeddings.
pub fn decode_step(
    instance: &Instance,
    state: &ConstructionState,
    embeddings: &Tensor,
    params: &PolicyParams,
    mask: &[bool],
) -> Result<Vec<f64>> {
    let decoder = DecoderContext::new(embeddings, params);
    Ok(decoder.step(params, step_input(instance, state), mask)?.probs)
}
