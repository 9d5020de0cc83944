//! Adaptive multi-distribution knowledge distillation.
//!
//! A light student learns from per-distribution teachers. Each epoch picks one
//! exemplar distribution, with probabilities driven by the student's current
//! validation gaps, and trains on a weighted sum of the REINFORCE task loss and
//! a per-step KL divergence to the teacher along student-sampled tours.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{mean_gap, DecodeSpec, GapReport};
use crate::instancegen::{generate_dataset, DistributionSpec};
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::policy::{rollout, score_tours, ArchSpec, PolicyParams, Replay, RolloutMode, StepCache};
use crate::problems::{Instance, ProblemKind};
use crate::rng::RngStream;
use crate::solvers::{instance_hash, ReferenceCache};
use crate::training::{
    apply_update, first_chosen_step, reduce_in_order, sample_with_baseline, step_stream, task_surrogate,
    training_batch,
};

/// Floor applied to probabilities inside the KL logarithms.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    /// KD along tours sampled by the student.
    OnPolicy,
    /// KD along tours sampled by the teacher.
    OffPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Distil from the teacher of the selected distribution.
    SingleSelected,
    /// Distil from the mean KL over all teachers.
    SimultaneousMt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub problem: ProblemKind,
    pub n: usize,
    pub exemplars: Vec<DistributionSpec>,
    pub student_dim: usize,
    pub alpha: f64,
    pub epochs: usize,
    /// First epoch that uses gap-driven probabilities.
    pub adaptive_start: usize,
    /// `false` keeps uniform probabilities throughout.
    pub adaptive: bool,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub starts: Option<usize>,
    pub grad_clip: Option<f64>,
    pub validation_size: usize,
    pub validation_seed: u64,
    pub validation_decode: DecodeSpec,
    pub trajectory_source: TrajectorySource,
    pub teacher_mode: TeacherMode,
    /// Freeze probabilities once they stop moving.
    pub early_stop_eval: bool,
    pub seed: u64,
}

impl DistillConfig {
    pub fn new(problem: ProblemKind, n: usize, exemplars: Vec<DistributionSpec>) -> Self {
        Self {
            problem,
            n,
            exemplars,
            student_dim: 16,
            alpha: 0.5,
            epochs: 10,
            adaptive_start: 1,
            adaptive: true,
            steps_per_epoch: 20,
            batch_size: 16,
            learning_rate: 1e-4,
            starts: None,
            grad_clip: Some(1.0),
            validation_size: 1000,
            validation_seed: 12345,
            validation_decode: DecodeSpec::multistart(),
            trajectory_source: TrajectorySource::OnPolicy,
            teacher_mode: TeacherMode::SingleSelected,
            early_stop_eval: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.exemplars.is_empty() {
            return Err(Error::Config("at least one exemplar distribution is required".into()));
        }
        if self.adaptive_start > self.epochs {
            return Err(Error::Config("adaptive_start must not exceed epochs".into()));
        }
        for (name, v) in [
            ("n", self.n),
            ("student_dim", self.student_dim),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("validation_size", self.validation_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(s) = self.starts {
            if s == 0 || s > self.n {
                return Err(Error::Config(format!("starts must lie in 1..={}", self.n)));
            }
        }
        for e in &self.exemplars {
            e.validate()?;
        }
        self.student_arch().validate()
    }

    pub fn student_arch(&self) -> ArchSpec {
        ArchSpec::new(self.problem, self.student_dim)
    }

    fn sampling_mode(&self) -> RolloutMode {
        RolloutMode::MultiStart {
            starts: self.starts.unwrap_or(self.n),
            greedy: false,
        }
    }

    fn names(&self) -> Vec<String> {
        self.exemplars.iter().map(|e| e.kind.code().to_string()).collect()
    }
}

/// Selection probabilities: uniform before `adaptive_start`, afterwards a
/// softmax over gaps expressed in percentage points.
pub fn adaptive_probs(gaps: &[f64], epoch: usize, adaptive_start: usize) -> Vec<f64> {
    let k = gaps.len();
    if epoch < adaptive_start {
        return vec![1.0 / k as f64; k];
    }
    let pct: Vec<f64> = gaps.iter().map(|g| 100.0 * g).collect();
    let max = pct.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = pct.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// `Σ_j p(j) (ln p(j) - ln q(j))` over entries where `mask` holds, with both
/// probabilities floored at [`KL_FLOOR`] inside the logarithms.
pub fn kl_divergence(p: &[f64], q: &[f64], mask: &[bool]) -> f64 {
    p.iter()
        .zip(q)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&pj, &qj), _)| {
            if pj == 0.0 {
                0.0
            } else {
                pj * (pj.max(KL_FLOOR).ln() - qj.max(KL_FLOOR).ln())
            }
        })
        .sum()
}

/// Per-step teacher distributions along `sequences`, averaged over teachers.
pub fn teacher_targets<S: AsRef<[usize]>>(
    teachers: &[&PolicyParams],
    instance: &Instance,
    sequences: &[S],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if teachers.is_empty() {
        return Err(Error::Config("no teachers".into()));
    }
    Ok(mean_targets(&per_teacher_targets(teachers, instance, sequences)?))
}

fn mean_targets(per: &[Vec<Vec<Vec<f64>>>]) -> Vec<Vec<Vec<f64>>> {
    let mut mean = per[0].clone();
    for other in &per[1..] {
        for (mt, dt) in mean.iter_mut().zip(other) {
            for (ms, ds) in mt.iter_mut().zip(dt) {
                ms.iter_mut().zip(ds).for_each(|(a, b)| *a += b);
            }
        }
    }
    let inv = 1.0 / per.len() as f64;
    mean.iter_mut().flatten().flatten().for_each(|v| *v *= inv);
    mean
}

/// Per-teacher step distributions, one set per teacher.
fn per_teacher_targets<S: AsRef<[usize]>>(
    teachers: &[&PolicyParams],
    instance: &Instance,
    sequences: &[S],
) -> Result<Vec<Vec<Vec<Vec<f64>>>>> {
    teachers
        .iter()
        .map(|t| Ok(score_tours(instance, sequences, t)?.into_iter().map(|s| s.distributions).collect()))
        .collect()
}

/// `weight · Σ_traj Σ_step KL(p_T ‖ p_S)` with the student distributions
/// taken from `replay`; `targets[teacher][traj][step]`.
fn kd_value(replay: &Replay, targets: &[Vec<Vec<Vec<f64>>>], weight: f64) -> f64 {
    let mut total = 0.0;
    for per_teacher in targets {
        for (t, traj) in per_teacher.iter().enumerate() {
            for (step, pt) in replay.steps(t).iter().zip(traj) {
                total += kl_divergence(pt, &step.probs, &step.mask);
            }
        }
    }
    weight * total / targets.len() as f64
}

fn kd_coeffs(step: &StepCache, target: &[f64], scale: f64, c: &mut [f64]) {
    for (j, cj) in c.iter_mut().enumerate() {
        if step.mask[j] {
            *cj -= scale * target[j];
        }
    }
}

/// KD loss of `student` against `teachers` (mean over teachers) along
/// `sequences`, scaled by `weight`, with its gradient in the student.
pub fn kd_loss_multi<S: AsRef<[usize]>>(
    teachers: &[&PolicyParams],
    student: &PolicyParams,
    instance: &Instance,
    sequences: &[S],
    weight: f64,
) -> Result<(f64, PolicyParams)> {
    if teachers.is_empty() {
        return Err(Error::Config("simultaneous distillation needs at least one teacher".into()));
    }
    let replay = Replay::new(instance, student, sequences)?;
    let targets = per_teacher_targets(teachers, instance, sequences)?;
    let loss = kd_value(&replay, &targets, weight);
    let mean = mean_targets(&targets);
    let grads = replay.backward(student, |t, s, step, c| kd_coeffs(step, &mean[t][s], weight, c))?;
    Ok((loss, grads))
}

/// Single-teacher KD loss and gradient.
pub fn kd_loss<S: AsRef<[usize]>>(
    teacher: &PolicyParams,
    student: &PolicyParams,
    instance: &Instance,
    sequences: &[S],
    weight: f64,
) -> Result<(f64, PolicyParams)> {
    kd_loss_multi(&[teacher], student, instance, sequences, weight)
}

fn check_teachers(student: &PolicyParams, teachers: &[&PolicyParams]) -> Result<()> {
    for t in teachers {
        if t.arch.problem_kind != student.arch.problem_kind {
            return Err(Error::Config(format!(
                "teacher solves {} but the student solves {}",
                t.arch.problem_kind, student.arch.problem_kind
            )));
        }
    }
    Ok(())
}

/// Losses of one combined update, both already scaled by the batch weight
/// but not by `α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub task_loss: f64,
    pub kd_loss: f64,
    pub mean_length: f64,
}

/// Gradient of `α·L_task + (1-α)·L_KD` on one instance, with both losses.
pub fn combined_gradient(
    student: &PolicyParams,
    teachers: &[&PolicyParams],
    instance: &Instance,
    config: &DistillConfig,
    weight: f64,
    rng: &mut RngStream,
) -> Result<(PolicyParams, f64, f64, f64)> {
    let alpha = config.alpha;
    let mode = config.sampling_mode();
    let (replay, traces, baselines) = sample_with_baseline(instance, student, None, mode, rng)?;
    let task = task_surrogate(&replay, &traces, &baselines, weight);
    let total_len: f64 = traces.iter().map(|t| t.tour.length()).sum();
    match config.trajectory_source {
        TrajectorySource::OnPolicy => {
            let seqs: Vec<&[usize]> = traces.iter().map(|t| t.tour.sequence()).collect();
            let per = per_teacher_targets(teachers, instance, &seqs)?;
            let kd = kd_value(&replay, &per, weight);
            let mean = mean_targets(&per);
            let grads = replay.backward(student, |t, s, step, c| {
                if s >= first_chosen_step(&traces[t]) {
                    c[replay.actions(t)[s]] = alpha * weight * (traces[t].tour.length() - baselines[t]);
                }
                kd_coeffs(step, &mean[t][s], (1.0 - alpha) * weight, c);
            })?;
            Ok((grads, task, kd, total_len))
        }
        TrajectorySource::OffPolicy => {
            let mut grads = replay.backward(student, |t, s, _, c| {
                if s >= first_chosen_step(&traces[t]) {
                    c[replay.actions(t)[s]] = alpha * weight * (traces[t].tour.length() - baselines[t]);
                }
            })?;
            // teacher-sampled tours; MT mode pools every teacher's samples
            let mut seqs = Vec::new();
            for t in teachers {
                seqs.extend(rollout(instance, t, mode, rng)?.into_iter().map(|x| x.tour.sequence().to_vec()));
            }
            let kd_weight = weight * traces.len() as f64 / seqs.len() as f64;
            let (kd, g) = kd_loss_multi(teachers, student, instance, &seqs, kd_weight)?;
            grads.axpy(1.0 - alpha, &g);
            Ok((grads, task, kd, total_len))
        }
    }
}

/// One AMDKD update on a batch from the selected distribution.
pub fn combined_update(
    student: &mut PolicyParams,
    optimizer: &mut Adam,
    teachers: &[&PolicyParams],
    batch: &[Instance],
    config: &DistillConfig,
    rng: &mut RngStream,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if teachers.is_empty() {
        return Err(Error::Config("no teacher for the selected distribution".into()));
    }
    check_teachers(student, teachers)?;
    let starts = config.starts.unwrap_or(config.n);
    let weight = 1.0 / (batch.len() * starts) as f64;
    let rngs: Vec<RngStream> = batch.iter().map(|_| rng.fork()).collect();
    let current: &PolicyParams = student;
    let parts: Vec<Result<(PolicyParams, f64, f64, f64)>> = batch
        .par_iter()
        .zip(rngs)
        .map(|(inst, mut r)| combined_gradient(current, teachers, inst, config, weight, &mut r))
        .collect();
    let mut lens = 0.0;
    let parts = parts
        .into_iter()
        .map(|r| {
            r.map(|(g, task, kd, len)| {
                lens += len;
                (g, task, kd, starts)
            })
        })
        .collect();
    let (mut grads, task_loss, kd_loss, count) = reduce_in_order(student, parts)?;
    if !(task_loss.is_finite() && kd_loss.is_finite()) {
        return Err(Error::numeric(
            "distillation loss",
            format!("task {task_loss}, kd {kd_loss}"),
        ));
    }
    apply_update(student, optimizer, &mut grads, config.grad_clip)?;
    Ok(UpdateStats {
        task_loss,
        kd_loss,
        mean_length: lens / count as f64,
    })
}

/// Fixed validation instances with reference lengths, one group per exemplar.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub names: Vec<String>,
    pub instances: Vec<Vec<Instance>>,
    pub references: Vec<Vec<f64>>,
}

impl ValidationSet {
    /// Generates `size` instances per distribution and takes their references
    /// from `cache`, solving and inserting whatever is missing.
    pub fn build(
        problem: ProblemKind,
        n: usize,
        exemplars: &[DistributionSpec],
        size: usize,
        seed: u64,
        cache: &mut ReferenceCache,
    ) -> Result<Self> {
        let mut names = Vec::new();
        let mut instances = Vec::new();
        let mut references = Vec::new();
        for spec in exemplars {
            let set = generate_dataset(problem, spec, n, size, validation_seed(seed, spec))?;
            references.push(cache.ensure(&set)?);
            instances.push(set);
            names.push(spec.kind.code().to_string());
        }
        Ok(Self {
            names,
            instances,
            references,
        })
    }

    /// Looks references up without solving; errors when any is missing.
    pub fn from_cache(
        problem: ProblemKind,
        n: usize,
        exemplars: &[DistributionSpec],
        size: usize,
        seed: u64,
        cache: &ReferenceCache,
    ) -> Result<Self> {
        let mut set = Self {
            names: Vec::new(),
            instances: Vec::new(),
            references: Vec::new(),
        };
        for spec in exemplars {
            let insts = generate_dataset(problem, spec, n, size, validation_seed(seed, spec))?;
            let refs = insts
                .iter()
                .map(|i| {
                    cache.get(i).map(|e| e.length).ok_or_else(|| {
                        Error::Config(format!("missing reference for validation instance {}", instance_hash(i)))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            set.names.push(spec.kind.code().to_string());
            set.instances.push(insts);
            set.references.push(refs);
        }
        Ok(set)
    }

    /// Digest over every instance and reference length.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (insts, refs) in self.instances.iter().zip(&self.references) {
            for (i, r) in insts.iter().zip(refs) {
                h.update(instance_hash(i).as_bytes());
                h.update(r.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Average gap per distribution.
    pub fn evaluate(&self, params: &PolicyParams, decode: DecodeSpec, seed: u64) -> Result<GapReport> {
        let gaps = self
            .instances
            .iter()
            .zip(&self.references)
            .map(|(i, r)| mean_gap(i, r, params, decode, seed))
            .collect::<Result<Vec<f64>>>()?;
        Ok(GapReport::new(self.names.clone(), gaps))
    }
}

/// Seed of the validation instances of one distribution.
pub fn validation_seed(seed: u64, spec: &DistributionSpec) -> u64 {
    let salt = spec.kind.code().bytes().next().expect("nonempty code") as u64;
    RngStream::derive(seed, 0x5EED_0000 + salt).gen()
}

/// Average gap of `params` on one distribution's validation group.
pub fn avg_gap(
    params: &PolicyParams,
    instances: &[Instance],
    references: &[f64],
    decode: DecodeSpec,
    seed: u64,
) -> Result<f64> {
    mean_gap(instances, references, params, decode, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLogRow {
    pub epoch: usize,
    pub selected_distribution: String,
    pub probabilities: Vec<f64>,
    /// Validation gaps measured after the epoch's updates.
    pub gaps: Vec<f64>,
    pub task_loss: f64,
    pub kd_loss: f64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub params: PolicyParams,
    pub optimizer: AdamState,
    pub names: Vec<String>,
    pub initial_gaps: Vec<f64>,
    pub log: Vec<DistillLogRow>,
    /// Seconds per epoch; kept apart from the deterministic log.
    pub wall_times: Vec<f64>,
}

impl DistillOutcome {
    pub fn final_report(&self) -> GapReport {
        let gaps = self.log.last().map_or(self.initial_gaps.clone(), |r| r.gaps.clone());
        GapReport::new(self.names.clone(), gaps)
    }
}

/// Writes the run log; probability and gap columns are named per exemplar.
pub fn write_distill_log<W: std::io::Write>(names: &[String], rows: &[DistillLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string(), "selected_distribution".to_string()];
    header.extend(names.iter().map(|n| format!("p_{n}")));
    header.extend(names.iter().map(|n| format!("gap_{n}")));
    header.extend(["task_loss".to_string(), "kd_loss".to_string()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.selected_distribution.clone()];
        rec.extend(r.probabilities.iter().map(|p| p.to_string()));
        rec.extend(r.gaps.iter().map(|g| g.to_string()));
        rec.extend([r.task_loss.to_string(), r.kd_loss.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Epoch wall times, one row per epoch.
pub fn write_wall_times<W: std::io::Write>(times: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "wall_time"])?;
    for (e, t) in times.iter().enumerate() {
        w.write_record([(e + 1).to_string(), format!("{t:.3}")])?;
    }
    w.flush()?;
    Ok(())
}

const STUDENT_INIT_SALT: u64 = u64::MAX;
const EARLY_STOP_WINDOW: usize = 20;
const EARLY_STOP_TOL: f64 = 1e-3;

fn selection_stream(seed: u64, epoch: usize) -> RngStream {
    RngStream::derive(seed, u64::MAX - 1 - epoch as u64)
}

fn pick(probs: &[f64], rng: &mut RngStream) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Runs the full distillation loop. `teachers[d]` belongs to
/// `config.exemplars[d]`; `on_epoch` runs after every epoch.
pub fn distill<F>(
    config: &DistillConfig,
    teachers: &[PolicyParams],
    validation: &ValidationSet,
    mut on_epoch: F,
) -> Result<DistillOutcome>
where
    F: FnMut(usize, &PolicyParams, &AdamState) -> Result<()>,
{
    config.validate()?;
    if teachers.len() != config.exemplars.len() {
        return Err(Error::Config(format!(
            "{} teachers for {} exemplar distributions",
            teachers.len(),
            config.exemplars.len()
        )));
    }
    if validation.names != config.names() || validation.instances.iter().any(|g| g.len() != config.validation_size) {
        return Err(Error::Config("validation set does not match the exemplar set".into()));
    }
    let mut student = PolicyParams::init(
        &config.student_arch(),
        &mut RngStream::derive(config.seed, STUDENT_INIT_SALT),
    )?;
    let refs: Vec<&PolicyParams> = teachers.iter().collect();
    check_teachers(&student, &refs)?;
    for t in teachers {
        if t.arch.problem_kind != config.problem {
            return Err(Error::Config("teacher problem kind differs from the config".into()));
        }
    }
    let mut optimizer = Adam::new(&student, AdamConfig::new(config.learning_rate));
    let fingerprint = validation.fingerprint();
    let eval_seed = config.seed ^ 0xE7A1;
    let mut gaps = validation.evaluate(&student, config.validation_decode, eval_seed)?.gaps;
    let initial_gaps = gaps.clone();
    let k = config.exemplars.len();
    let mut log = Vec::with_capacity(config.epochs);
    let mut wall_times = Vec::with_capacity(config.epochs);
    let mut frozen_probs: Option<Vec<f64>> = None;
    let mut stable_epochs = 0;
    let mut prev_probs: Option<Vec<f64>> = None;
    let mut global = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let probs = match (&frozen_probs, config.adaptive) {
            (_, false) => vec![1.0 / k as f64; k],
            (Some(p), true) => p.clone(),
            (None, true) => adaptive_probs(&gaps, epoch, config.adaptive_start),
        };
        let d = pick(&probs, &mut selection_stream(config.seed, epoch));
        let active: Vec<&PolicyParams> = match config.teacher_mode {
            TeacherMode::SingleSelected => vec![&teachers[d]],
            TeacherMode::SimultaneousMt => refs.clone(),
        };
        let (mut task_sum, mut kd_sum) = (0.0, 0.0);
        for _ in 0..config.steps_per_epoch {
            let batch = training_batch(
                config.problem,
                &config.exemplars[d],
                config.n,
                config.batch_size,
                config.seed,
                global,
            )?;
            let mut rng = step_stream(config.seed, global);
            let stats = combined_update(&mut student, &mut optimizer, &active, &batch, config, &mut rng)?;
            task_sum += stats.task_loss;
            kd_sum += stats.kd_loss;
            global += 1;
        }
        if validation.fingerprint() != fingerprint {
            return Err(Error::Invariant("validation set changed during the run".into()));
        }
        if frozen_probs.is_none() {
            gaps = validation.evaluate(&student, config.validation_decode, eval_seed)?.gaps;
        }
        if config.early_stop_eval && frozen_probs.is_none() && epoch >= config.adaptive_start {
            if let Some(prev) = &prev_probs {
                let change = prev.iter().zip(&probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                stable_epochs = if change < EARLY_STOP_TOL { stable_epochs + 1 } else { 0 };
            }
            prev_probs = Some(probs.clone());
            if stable_epochs >= EARLY_STOP_WINDOW {
                frozen_probs = Some(probs.clone());
            }
        }
        let steps = config.steps_per_epoch as f64;
        log.push(DistillLogRow {
            epoch,
            selected_distribution: validation.names[d].clone(),
            probabilities: probs,
            gaps: gaps.clone(),
            task_loss: task_sum / steps,
            kd_loss: kd_sum / steps,
        });
        log::info!("epoch {epoch}: distribution {} gaps {:?}", validation.names[d], gaps);
        wall_times.push(started.elapsed().as_secs_f64());
        on_epoch(epoch, &student, &optimizer.state)?;
    }
    Ok(DistillOutcome {
        params: student,
        optimizer: optimizer.state,
        names: validation.names.clone(),
        initial_gaps,
        log,
        wall_times,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoAdaptive,
    NoKd,
    NoTask,
    OffPolicy,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-adaptive" => Ok(Ablation::NoAdaptive),
            "no-kd" => Ok(Ablation::NoKd),
            "no-task" => Ok(Ablation::NoTask),
            "off-policy" => Ok(Ablation::OffPolicy),
            _ => Err(Error::Config(format!(
                "unknown ablation `{s}` (expected no-adaptive, no-kd, no-task or off-policy)"
            ))),
        }
    }
}

impl Ablation {
    pub fn apply(self, config: &DistillConfig) -> DistillConfig {
        let mut c = config.clone();
        match self {
            Ablation::NoAdaptive => c.adaptive = false,
            Ablation::NoKd => c.alpha = 1.0,
            Ablation::NoTask => c.alpha = 0.0,
            Ablation::OffPolicy => c.trajectory_source = TrajectorySource::OffPolicy,
        }
        c
    }
}

/// [`distill`] with one component switched off.
pub fn ablate<F>(
    config: &DistillConfig,
    switch: Ablation,
    teachers: &[PolicyParams],
    validation: &ValidationSet,
    on_epoch: F,
) -> Result<DistillOutcome>
where
    F: FnMut(usize, &PolicyParams, &AdamState) -> Result<()>,
{
    distill(&switch.apply(config), teachers, validation, on_epoch)
}
