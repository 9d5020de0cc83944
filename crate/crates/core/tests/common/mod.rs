//! Shared finite-difference helpers.
#![allow(dead_code)]

use amdkd_core::instancegen::{attach_cvrp, gen_uniform};
use amdkd_core::policy::PolicyParams;
use amdkd_core::problems::{Instance, ProblemKind};
use amdkd_core::rng::RngStream;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Central-difference gradient of `f` over every parameter.
pub fn finite_difference(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = vec![0.0; base.len()];
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + H;
        probe.set_flat(&flat);
        let up = f(&probe);
        flat[i] = base[i] - H;
        probe.set_flat(&flat);
        let down = f(&probe);
        flat[i] = base[i];
        out[i] = (up - down) / (2.0 * H);
    }
    out
}

/// Per-tensor relative error `|a - f| / max(|a|, |f|)`, skipping tensors whose
/// gradients are both below 1e-8 in norm.
pub fn assert_close(analytic: &PolicyParams, fd: &[f64], label: &str) {
    let mut off = 0;
    for (name, t) in analytic.tensors() {
        let a = t.data();
        let f = &fd[off..off + a.len()];
        off += a.len();
        let diff: f64 = a.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nf: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nf);
        if scale < 1e-8 {
            continue;
        }
        let rel = diff / scale;
        assert!(rel < TOL, "{label}: {name} rel-err {rel:.3e} (|a|={na:.3e}, |fd|={nf:.3e})");
    }
}

/// Small instance; CVRP capacity is tight so that routes split.
pub fn instance(kind: ProblemKind, n: usize, seed: u64) -> Instance {
    let mut rng = RngStream::new(seed);
    match kind {
        ProblemKind::Tsp => Instance::tsp(gen_uniform(n, &mut rng).unwrap()).unwrap(),
        ProblemKind::Cvrp => {
            let coords = gen_uniform(n + 1, &mut rng).unwrap();
            let inst = attach_cvrp(coords, n, &mut rng).unwrap();
            let c = inst.cvrp_data().unwrap();
            Instance::cvrp(inst.coords().to_vec(), c.demands.clone(), 12).unwrap()
        }
    }
}

/// Central differences that also report coordinates whose `±h` probes land on
/// different sides of a kink, as detected by a change in `pattern`.
pub fn finite_difference_with_kinks(
    params: &PolicyParams,
    f: impl Fn(&PolicyParams) -> f64,
    pattern: impl Fn(&PolicyParams) -> Vec<bool>,
) -> (Vec<f64>, Vec<bool>) {
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut out = vec![0.0; base.len()];
    let mut kinked = vec![false; base.len()];
    let mut flat = base.clone();
    for i in 0..base.len() {
        flat[i] = base[i] + H;
        probe.set_flat(&flat);
        let up = f(&probe);
        let pu = pattern(&probe);
        flat[i] = base[i] - H;
        probe.set_flat(&flat);
        let down = f(&probe);
        let pd = pattern(&probe);
        flat[i] = base[i];
        out[i] = (up - down) / (2.0 * H);
        kinked[i] = pu != pd;
    }
    (out, kinked)
}

/// [`assert_close`] after replacing kinked coordinates with the analytic
/// value. At most `max_kinked` coordinates may be excluded.
pub fn assert_close_smooth(analytic: &PolicyParams, fd: &[f64], kinked: &[bool], max_kinked: usize, label: &str) {
    let excluded = kinked.iter().filter(|&&k| k).count();
    assert!(excluded <= max_kinked, "{label}: {excluded} coordinates straddle a kink");
    let a = analytic.to_flat();
    let patched: Vec<f64> = fd
        .iter()
        .zip(&a)
        .zip(kinked)
        .map(|((&f, &x), &k)| if k { x } else { f })
        .collect();
    assert_close(analytic, &patched, label);
}
