//! Instance generators for the seven coordinate distributions.
//!
//! Uniform, Cluster and Mixed are the exemplar distributions used to train
//! teachers. Expansion, Implosion, Explosion and Grid start from a uniform
//! draw and mutate a region of it. Every generator is a pure function of its
//! inputs and the [`RngStream`] it is handed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::{Instance, Point, ProblemKind};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistributionKind {
    Uniform,
    Cluster,
    Mixed,
    Expansion,
    Implosion,
    Explosion,
    Grid,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 7] = [
        DistributionKind::Uniform,
        DistributionKind::Cluster,
        DistributionKind::Mixed,
        DistributionKind::Expansion,
        DistributionKind::Implosion,
        DistributionKind::Explosion,
        DistributionKind::Grid,
    ];

    pub const EXEMPLARS: [DistributionKind; 3] = [
        DistributionKind::Uniform,
        DistributionKind::Cluster,
        DistributionKind::Mixed,
    ];

    /// One-letter column tag used in reports (`X` is Explosion).
    pub fn code(self) -> &'static str {
        match self {
            DistributionKind::Uniform => "U",
            DistributionKind::Cluster => "C",
            DistributionKind::Mixed => "M",
            DistributionKind::Expansion => "E",
            DistributionKind::Implosion => "I",
            DistributionKind::Explosion => "X",
            DistributionKind::Grid => "G",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::Uniform => "uniform",
            DistributionKind::Cluster => "cluster",
            DistributionKind::Mixed => "mixed",
            DistributionKind::Expansion => "expansion",
            DistributionKind::Implosion => "implosion",
            DistributionKind::Explosion => "explosion",
            DistributionKind::Grid => "grid",
        }
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        DistributionKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.code().eq_ignore_ascii_case(&s))
            .ok_or_else(|| Error::Config(format!("unknown distribution `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    #[serde(default = "defaults::n_clusters")]
    pub n_clusters: usize,
    #[serde(default = "defaults::cluster_sigma")]
    pub cluster_sigma: f64,
    /// Radius of the mutated region: r, R_ic, R_ec and the grid box side.
    #[serde(default = "defaults::mutation_radius")]
    pub mutation_radius: f64,
    /// Rate of the exponential push distance.
    #[serde(default = "defaults::exp_rate")]
    pub exp_rate: f64,
    #[serde(default = "defaults::cluster_mean_lo")]
    pub cluster_mean_lo: f64,
    #[serde(default = "defaults::cluster_mean_hi")]
    pub cluster_mean_hi: f64,
}

mod defaults {
    pub fn n_clusters() -> usize {
        3
    }
    pub fn cluster_sigma() -> f64 {
        0.07
    }
    pub fn mutation_radius() -> f64 {
        0.3
    }
    pub fn exp_rate() -> f64 {
        10.0
    }
    pub fn cluster_mean_lo() -> f64 {
        0.2
    }
    pub fn cluster_mean_hi() -> f64 {
        0.8
    }
}

impl DistributionSpec {
    pub fn new(kind: DistributionKind) -> Self {
        Self {
            kind,
            n_clusters: defaults::n_clusters(),
            cluster_sigma: defaults::cluster_sigma(),
            mutation_radius: defaults::mutation_radius(),
            exp_rate: defaults::exp_rate(),
            cluster_mean_lo: defaults::cluster_mean_lo(),
            cluster_mean_hi: defaults::cluster_mean_hi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cluster_sigma > 0.0
            && self.mutation_radius > 0.0
            && self.mutation_radius < 1.0
            && self.exp_rate > 0.0
            && self.n_clusters >= 1
            && self.cluster_mean_lo <= self.cluster_mean_hi;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid distribution spec {self:?}")))
        }
    }
}

impl From<DistributionKind> for DistributionSpec {
    fn from(kind: DistributionKind) -> Self {
        DistributionSpec::new(kind)
    }
}

fn check_size(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidSize(format!("need at least {min} nodes, got {n}")));
    }
    Ok(())
}

pub fn gen_uniform(n: usize, rng: &mut RngStream) -> Result<Vec<Point>> {
    check_size(n, 2)?;
    Ok((0..n).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect())
}

/// Gaussian clusters; node `i` belongs to cluster `i % n_clusters`.
pub fn gen_cluster(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    spec.validate()?;
    check_size(n, spec.n_clusters.max(1))?;
    Ok(cluster_points(n, spec.n_clusters, spec, rng))
}

fn cluster_points(n: usize, n_clusters: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Vec<Point> {
    let (lo, hi) = (spec.cluster_mean_lo, spec.cluster_mean_hi);
    let means: Vec<Point> = (0..n_clusters)
        .map(|_| [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)])
        .collect();
    let normal = Normal::new(0.0, spec.cluster_sigma).expect("sigma validated positive");
    (0..n)
        .map(|i| {
            let mu = means[i % n_clusters];
            let x = mu[0] + normal.sample(rng);
            let y = mu[1] + normal.sample(rng);
            [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]
        })
        .collect()
}

/// Half uniform, half a single Gaussian cluster, shuffled together.
pub fn gen_mixed(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    gen_mixed_traced(n, spec, rng).map(|(p, _)| p)
}

/// Like [`gen_mixed`], also returning which output nodes came from the cluster.
pub fn gen_mixed_traced(
    n: usize,
    spec: &DistributionSpec,
    rng: &mut RngStream,
) -> Result<(Vec<Point>, Vec<bool>)> {
    spec.validate()?;
    check_size(n, 2)?;
    let n_uniform = n / 2;
    let mut tagged: Vec<(Point, bool)> = (0..n_uniform)
        .map(|_| ([rng.gen::<f64>(), rng.gen::<f64>()], false))
        .collect();
    tagged.extend(
        cluster_points(n - n_uniform, 1, spec, rng)
            .into_iter()
            .map(|p| (p, true)),
    );
    tagged.shuffle(rng);
    Ok(tagged.into_iter().unzip())
}

/// Min-max rescaling of each axis onto `[0, 1]`. A constant axis maps to 0.5.
pub fn normalize_coords(points: &[Point]) -> Vec<Point> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    points
        .iter()
        .map(|p| {
            let mut q = [0.5; 2];
            for a in 0..2 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    q[a] = ((p[a] - lo[a]) / span).clamp(0.0, 1.0);
                }
            }
            q
        })
        .collect()
}

/// Pre-normalization state of an expansion draw.
#[derive(Clone, Debug)]
pub struct ExpansionTrace {
    pub slope: f64,
    pub intercept: f64,
    pub raw: Vec<Point>,
    pub moved: Vec<bool>,
}

/// Signed orthogonal distance from `p` to the line `y = slope * x + intercept`.
pub fn line_distance(p: Point, slope: f64, intercept: f64) -> f64 {
    (slope * p[0] - p[1] + intercept) / (slope * slope + 1.0).sqrt()
}

/// Pushes every point closer than `radius` to the line out to `radius + γ`,
/// `γ ~ Exp(rate)`, along the line normal on the point's own side.
pub fn expand_from_line(
    points: &mut [Point],
    slope: f64,
    intercept: f64,
    radius: f64,
    rate: f64,
    rng: &mut RngStream,
) -> Vec<bool> {
    let exp = Exp::new(rate).expect("rate validated positive");
    let norm = (slope * slope + 1.0).sqrt();
    let normal = [slope / norm, -1.0 / norm];
    points
        .iter_mut()
        .map(|p| {
            let s = line_distance(*p, slope, intercept);
            if s.abs() >= radius {
                return false;
            }
            let side = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            };
            let gamma: f64 = exp.sample(rng);
            let shift = side * (radius + gamma) - s;
            p[0] += shift * normal[0];
            p[1] += shift * normal[1];
            true
        })
        .collect()
}

pub fn gen_expansion(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    gen_expansion_traced(n, spec, rng).map(|(p, _)| p)
}

pub fn gen_expansion_traced(
    n: usize,
    spec: &DistributionSpec,
    rng: &mut RngStream,
) -> Result<(Vec<Point>, ExpansionTrace)> {
    spec.validate()?;
    let mut points = gen_uniform(n, rng)?;
    let intercept: f64 = rng.gen();
    let slope = if intercept < 0.5 {
        rng.gen_range(0.0..=3.0)
    } else {
        rng.gen_range(-3.0..=0.0)
    };
    let moved = expand_from_line(
        &mut points,
        slope,
        intercept,
        spec.mutation_radius,
        spec.exp_rate,
        rng,
    );
    let out = normalize_coords(&points);
    Ok((
        out,
        ExpansionTrace {
            slope,
            intercept,
            raw: points,
            moved,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct ImplosionTrace {
    pub centroid: Point,
    pub new_radius: f64,
    pub moved: Vec<bool>,
}

/// Scales the radial offset of every point within `radius` of `centroid` by
/// `new_radius / radius`.
pub fn implode(points: &mut [Point], centroid: Point, radius: f64, new_radius: f64) -> Vec<bool> {
    let factor = new_radius / radius;
    points
        .iter_mut()
        .map(|p| {
            let (dx, dy) = (p[0] - centroid[0], p[1] - centroid[1]);
            if dx.hypot(dy) >= radius {
                return false;
            }
            p[0] = centroid[0] + dx * factor;
            p[1] = centroid[1] + dy * factor;
            true
        })
        .collect()
}

pub fn gen_implosion(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    gen_implosion_traced(n, spec, rng).map(|(p, _)| p)
}

pub fn gen_implosion_traced(
    n: usize,
    spec: &DistributionSpec,
    rng: &mut RngStream,
) -> Result<(Vec<Point>, ImplosionTrace)> {
    spec.validate()?;
    let mut points = gen_uniform(n, rng)?;
    let centroid = [rng.gen::<f64>(), rng.gen::<f64>()];
    let new_radius = rng.gen_range(0.0..=spec.mutation_radius);
    let moved = implode(&mut points, centroid, spec.mutation_radius, new_radius);
    Ok((
        points,
        ImplosionTrace {
            centroid,
            new_radius,
            moved,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct ExplosionTrace {
    pub centroid: Point,
    pub raw: Vec<Point>,
    pub moved: Vec<bool>,
}

/// Moves every point within `radius` of `centroid` to distance `radius + γ`,
/// `γ ~ Exp(rate)`, along the centroid-to-point direction.
pub fn explode(
    points: &mut [Point],
    centroid: Point,
    radius: f64,
    rate: f64,
    rng: &mut RngStream,
) -> Vec<bool> {
    let exp = Exp::new(rate).expect("rate validated positive");
    points
        .iter_mut()
        .map(|p| {
            let (dx, dy) = (p[0] - centroid[0], p[1] - centroid[1]);
            let d = dx.hypot(dy);
            if d >= radius {
                return false;
            }
            let (ux, uy) = if d > 0.0 {
                (dx / d, dy / d)
            } else {
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                (theta.cos(), theta.sin())
            };
            let gamma: f64 = exp.sample(rng);
            p[0] = centroid[0] + ux * (radius + gamma);
            p[1] = centroid[1] + uy * (radius + gamma);
            true
        })
        .collect()
}

pub fn gen_explosion(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    gen_explosion_traced(n, spec, rng).map(|(p, _)| p)
}

pub fn gen_explosion_traced(
    n: usize,
    spec: &DistributionSpec,
    rng: &mut RngStream,
) -> Result<(Vec<Point>, ExplosionTrace)> {
    spec.validate()?;
    let mut points = gen_uniform(n, rng)?;
    let centroid = [rng.gen::<f64>(), rng.gen::<f64>()];
    let moved = explode(&mut points, centroid, spec.mutation_radius, spec.exp_rate, rng);
    let out = normalize_coords(&points);
    Ok((
        out,
        ExplosionTrace {
            centroid,
            raw: points,
            moved,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct GridTrace {
    pub origin: Point,
    pub box_side: f64,
    /// Lattice cells per side.
    pub cells: usize,
    /// Spacing between neighbouring lattice points (0 for a single cell).
    pub pitch: f64,
    pub relocated: Vec<usize>,
}

/// Re-places the points inside the axis-aligned box at `origin` with side
/// `side` onto a `ceil(sqrt(k))`-per-side lattice spanning the box, filled
/// row-major from the bottom-left corner.
pub fn grid_arrange(points: &mut [Point], origin: Point, side: f64) -> GridTrace {
    let inside: Vec<usize> = points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            p[0] >= origin[0] && p[0] <= origin[0] + side && p[1] >= origin[1] && p[1] <= origin[1] + side
        })
        .map(|(i, _)| i)
        .collect();
    let k = inside.len();
    let cells = (k as f64).sqrt().ceil() as usize;
    let pitch = if cells > 1 { side / (cells - 1) as f64 } else { 0.0 };
    for (slot, &i) in inside.iter().enumerate() {
        let (row, col) = (slot / cells, slot % cells);
        points[i] = [
            (origin[0] + col as f64 * pitch).min(1.0),
            (origin[1] + row as f64 * pitch).min(1.0),
        ];
    }
    GridTrace {
        origin,
        box_side: side,
        cells,
        pitch,
        relocated: inside,
    }
}

pub fn gen_grid(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    gen_grid_traced(n, spec, rng).map(|(p, _)| p)
}

pub fn gen_grid_traced(
    n: usize,
    spec: &DistributionSpec,
    rng: &mut RngStream,
) -> Result<(Vec<Point>, GridTrace)> {
    spec.validate()?;
    let mut points = gen_uniform(n, rng)?;
    let side = spec.mutation_radius;
    let origin = [rng.gen_range(0.0..=1.0 - side), rng.gen_range(0.0..=1.0 - side)];
    let trace = grid_arrange(&mut points, origin, side);
    Ok((points, trace))
}

/// Dispatches on `spec.kind`.
pub fn generate(n: usize, spec: &DistributionSpec, rng: &mut RngStream) -> Result<Vec<Point>> {
    match spec.kind {
        DistributionKind::Uniform => gen_uniform(n, rng),
        DistributionKind::Cluster => gen_cluster(n, spec, rng),
        DistributionKind::Mixed => gen_mixed(n, spec, rng),
        DistributionKind::Expansion => gen_expansion(n, spec, rng),
        DistributionKind::Implosion => gen_implosion(n, spec, rng),
        DistributionKind::Explosion => gen_explosion(n, spec, rng),
        DistributionKind::Grid => gen_grid(n, spec, rng),
    }
}

/// Vehicle capacity for `n` customers.
pub fn cvrp_capacity(n: usize) -> u32 {
    match n {
        20 => 30,
        50 => 40,
        100 => 50,
        _ => 30.max((n as f64 / 2.0).round() as u32),
    }
}

/// Builds a CVRP instance from `n + 1` points, the first being the depot.
pub fn attach_cvrp(coords: Vec<Point>, n: usize, rng: &mut RngStream) -> Result<Instance> {
    if n == 0 {
        return Err(Error::InvalidSize("CVRP needs at least one customer".into()));
    }
    if coords.len() != n + 1 {
        return Err(Error::InvalidSize(format!(
            "expected {} points (depot + {n} customers), got {}",
            n + 1,
            coords.len()
        )));
    }
    let mut demands = Vec::with_capacity(n + 1);
    demands.push(0);
    demands.extend((0..n).map(|_| rng.gen_range(1..=9u32)));
    Instance::cvrp(coords, demands, cvrp_capacity(n))
}

/// Generates one instance with `n` nodes (TSP) or `n` customers plus a depot
/// drawn from the same distribution (CVRP).
pub fn generate_instance(
    problem: ProblemKind,
    spec: &DistributionSpec,
    n: usize,
    rng: &mut RngStream,
) -> Result<Instance> {
    match problem {
        ProblemKind::Tsp => Instance::tsp(generate(n, spec, rng)?),
        ProblemKind::Cvrp => {
            let coords = generate(n + 1, spec, rng)?;
            attach_cvrp(coords, n, rng)
        }
    }
}

/// `count` instances, instance `i` drawn from the stream derived from `(seed, i)`.
pub fn generate_dataset(
    problem: ProblemKind,
    spec: &DistributionSpec,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Instance>> {
    (0..count)
        .map(|i| generate_instance(problem, spec, n, &mut RngStream::derive(seed, i as u64)))
        .collect()
}

/// One line of an instance file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub kind: DistributionKind,
    pub n: usize,
    pub seed: u64,
    pub coords: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depot_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demands: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
}

impl InstanceRecord {
    pub fn new(kind: DistributionKind, seed: u64, instance: &Instance) -> Self {
        let cvrp = instance.cvrp_data();
        Self {
            kind,
            n: instance.n_customers(),
            seed,
            coords: instance.coords().to_vec(),
            depot_index: cvrp.map(|c| c.depot_index),
            demands: cvrp.map(|c| c.demands.clone()),
            capacity: cvrp.map(|c| c.capacity),
        }
    }

    pub fn to_instance(&self) -> Result<Instance> {
        match (&self.demands, self.capacity) {
            (Some(demands), Some(capacity)) => {
                if self.depot_index.unwrap_or(0) != 0 {
                    return Err(Error::Config("depot must be node 0".into()));
                }
                Instance::cvrp(self.coords.clone(), demands.clone(), capacity)
            }
            (None, None) => Instance::tsp(self.coords.clone()),
            _ => Err(Error::Config(
                "CVRP records need both demands and capacity".into(),
            )),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}
