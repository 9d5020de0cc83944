//! REINFORCE surrogate gradients and end-to-end teacher training.

mod common;

use amdkd_core::eval::{mean_gap, DecodeSpec};
use amdkd_core::instancegen::{generate_dataset, DistributionKind, DistributionSpec};
use amdkd_core::optim::{Adam, AdamConfig};
use amdkd_core::policy::{ArchSpec, EncoderPass, PolicyParams, Replay, RolloutMode};
use amdkd_core::problems::{validate_tour, ProblemKind};
use amdkd_core::rng::RngStream;
use amdkd_core::solvers::ReferenceCache;
use amdkd_core::training::{
    advantages, reinforce_step, sample_with_baseline, shared_baseline, task_gradient, task_surrogate,
    train_teacher, training_batch, BaselineMode, TrainConfig,
};
use common::{assert_close_smooth, finite_difference_with_kinks, instance};

#[test]
fn surrogate_gradient_matches_finite_differences() {
    for kind in [ProblemKind::Tsp, ProblemKind::Cvrp] {
        for seed in 0..3 {
            let inst = instance(kind, 6, 40 + seed);
            let params = PolicyParams::init(&ArchSpec::new(kind, 8), &mut RngStream::new(seed)).unwrap();
            let mode = RolloutMode::MultiStart { starts: 5, greedy: false };
            let (replay, traces, baselines) =
                sample_with_baseline(&inst, &params, None, mode, &mut RngStream::new(seed + 9)).unwrap();
            let seqs: Vec<Vec<usize>> = traces.iter().map(|t| t.tour.sequence().to_vec()).collect();
            let analytic = task_gradient(&replay, &params, &traces, &baselines, 0.2).unwrap();
            // trajectories and baselines frozen, parameters perturbed
            let (fd, kinked) = finite_difference_with_kinks(
                &params,
                |p| task_surrogate(&Replay::new(&inst, p, &seqs).unwrap(), &traces, &baselines, 0.2),
                |p| EncoderPass::forward(&inst, p).unwrap().relu_pattern(),
            );
            let label = format!("surrogate {kind} seed {seed}");
            assert_close_smooth(&analytic, &fd, &kinked, params.n_params() / 100, &label);
        }
    }
}

#[test]
fn shared_multistart_advantages_sum_to_zero() {
    let params = PolicyParams::init(&ArchSpec::new(ProblemKind::Cvrp, 8), &mut RngStream::new(1)).unwrap();
    for seed in 0..10 {
        let inst = instance(ProblemKind::Cvrp, 7, seed);
        let mode = RolloutMode::MultiStart { starts: 7, greedy: false };
        let (_, traces, b) = sample_with_baseline(&inst, &params, None, mode, &mut RngStream::new(seed)).unwrap();
        let lengths: Vec<f64> = traces.iter().map(|t| t.tour.length()).collect();
        assert_eq!(b, shared_baseline(&lengths));
        assert!(advantages(&lengths, &b).iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn greedy_rollout_baseline_uses_frozen_policy() {
    let inst = instance(ProblemKind::Tsp, 8, 2);
    let params = PolicyParams::init(&ArchSpec::new(ProblemKind::Tsp, 8), &mut RngStream::new(1)).unwrap();
    let frozen = PolicyParams::init(&ArchSpec::new(ProblemKind::Tsp, 8), &mut RngStream::new(2)).unwrap();
    let (_, traces, b) =
        sample_with_baseline(&inst, &params, Some(&frozen), RolloutMode::Sample, &mut RngStream::new(0)).unwrap();
    let greedy = amdkd_core::policy::rollout(&inst, &frozen, RolloutMode::Greedy, &mut RngStream::new(0)).unwrap();
    assert_eq!(traces.len(), 1);
    assert_eq!(b, vec![greedy[0].tour.length()]);
}

fn desk_config(n: usize, steps: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::new(ProblemKind::Tsp, n, DistributionKind::Uniform.into());
    c.embed_dim = 16;
    c.epochs = 1;
    c.steps_per_epoch = steps;
    c.batch_size = 8;
    c.learning_rate = 1e-3;
    c.seed = seed;
    c
}

#[test]
fn learning_curve_decreases_on_tsp10() {
    let config = desk_config(10, 200, 0);
    let outcome = train_teacher(&config, |_, _, _| Ok(())).unwrap();
    let lengths: Vec<f64> = outcome.log.iter().map(|r| r.mean_length).collect();
    assert_eq!(lengths.len(), 200);
    let first: f64 = lengths[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = lengths[190..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "first-10 mean {first:.4}, last-10 mean {last:.4}");
}

#[test]
fn training_is_deterministic() {
    let mut config = desk_config(8, 6, 5);
    config.epochs = 2;
    config.steps_per_epoch = 3;
    let run = || {
        let mut epochs = Vec::new();
        let out = train_teacher(&config, |e, p, _| {
            epochs.push((e, p.to_flat()));
            Ok(())
        })
        .unwrap();
        (out.params.to_flat(), out.log, epochs)
    };
    let (a, la, ea) = run();
    let (b, lb, eb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(ea, eb);
    assert_eq!(ea.len(), 2);
}

#[test]
fn greedy_rollout_training_runs_and_emits_feasible_tours() {
    let mut config = desk_config(8, 4, 3);
    config.problem = ProblemKind::Cvrp;
    config.baseline_mode = BaselineMode::GreedyRollout;
    config.epochs = 2;
    let outcome = train_teacher(&config, |_, _, _| Ok(())).unwrap();
    assert_eq!(outcome.log.len(), 8);
    let batch = training_batch(ProblemKind::Cvrp, &DistributionSpec::new(DistributionKind::Cluster), 8, 4, 1, 0).unwrap();
    for inst in &batch {
        for t in amdkd_core::policy::rollout(&inst, &outcome.params, RolloutMode::Sample, &mut RngStream::new(0)).unwrap() {
            assert!(validate_tour(inst, t.tour.sequence()).is_ok());
        }
    }
}

#[test]
fn mismatched_baseline_arguments_are_rejected() {
    let config = desk_config(6, 1, 0);
    let mut p = PolicyParams::init(&config.arch(), &mut RngStream::new(0)).unwrap();
    let frozen = p.clone();
    let mut opt = Adam::new(&p, AdamConfig::new(1e-3));
    let batch = training_batch(ProblemKind::Tsp, &config.distribution, 6, 2, 0, 0).unwrap();
    assert!(reinforce_step(&mut p, &mut opt, &batch, &config, Some(&frozen), &mut RngStream::new(0)).is_err());
}

#[test]
fn teachers_beat_their_initialisation_and_specialise() {
    let n = 20;
    let spec = |k: DistributionKind| -> DistributionSpec { k.into() };
    let mut cache = ReferenceCache::new();
    let mut validation = Vec::new();
    for (i, kind) in [DistributionKind::Uniform, DistributionKind::Cluster].into_iter().enumerate() {
        let insts = generate_dataset(ProblemKind::Tsp, &spec(kind), n, 1000, 70 + i as u64).unwrap();
        let refs = cache.ensure(&insts).unwrap();
        validation.push((insts, refs));
    }
    let gap_on = |p: &PolicyParams, d: usize| mean_gap(&validation[d].0, &validation[d].1, p, DecodeSpec::greedy(), 0).unwrap();
    let teacher = |kind: DistributionKind, seed: u64| {
        let mut c = TrainConfig::new(ProblemKind::Tsp, n, spec(kind));
        c.epochs = 6;
        c.steps_per_epoch = 50;
        c.batch_size = 16;
        c.learning_rate = 1e-3;
        c.seed = seed;
        c.init_seed = Some(1000);
        c
    };
    let init = PolicyParams::init(&teacher(DistributionKind::Uniform, 0).arch(), &mut RngStream::new(1000)).unwrap();
    let uniform = train_teacher(&teacher(DistributionKind::Uniform, 0), |_, _, _| Ok(())).unwrap().params;
    let cluster = train_teacher(&teacher(DistributionKind::Cluster, 1), |_, _, _| Ok(())).unwrap().params;
    let (u_on_u, init_on_u) = (gap_on(&uniform, 0), gap_on(&init, 0));
    let (c_on_c, u_on_c, init_on_c) = (gap_on(&cluster, 1), gap_on(&uniform, 1), gap_on(&init, 1));
    println!("U teacher on U {u_on_u:.4} (untrained {init_on_u:.4}); on C: C teacher {c_on_c:.4}, U teacher {u_on_c:.4} (untrained {init_on_c:.4})");
    assert!(u_on_u < init_on_u);
    assert!(c_on_c < init_on_c);
    assert!(c_on_c < u_on_c, "cluster teacher {c_on_c:.4} vs uniform teacher {u_on_c:.4} on cluster instances");
}
