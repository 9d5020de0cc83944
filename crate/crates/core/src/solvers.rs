//! Reference solvers: exact dynamic programs for small instances, local
//! search beyond.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::problems::{join_routes, Instance, ProblemKind, Tour};
use crate::rng::RngStream;

pub const EXACT_TSP_LIMIT: usize = 16;
pub const EXACT_CVRP_LIMIT: usize = 8;
const EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub tour: Tour,
    pub is_exact: bool,
    pub solver: String,
    /// Accepted improving moves (heuristics) or DP states expanded (exact).
    pub iterations: u64,
}

struct Dist {
    n: usize,
    d: Vec<f64>,
}

impl Dist {
    fn new(instance: &Instance) -> Self {
        let n = instance.n_nodes();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = instance.dist(i, j);
            }
        }
        Self { n, d }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

fn require(instance: &Instance, kind: ProblemKind) -> Result<()> {
    if instance.kind() != kind {
        return Err(Error::Config(format!("{kind} solver given a {} instance", instance.kind())));
    }
    Ok(())
}

/// Held-Karp over subsets of nodes `1..n` with node 0 fixed as the start.
pub fn exact_tsp(instance: &Instance) -> Result<SolverResult> {
    require(instance, ProblemKind::Tsp)?;
    let n = instance.n_nodes();
    if n > EXACT_TSP_LIMIT {
        return Err(Error::SizeLimit {
            solver: "exact_tsp (use heuristic_tsp)",
            size: n,
            limit: EXACT_TSP_LIMIT,
        });
    }
    if n <= 3 {
        let tour = Tour::new(instance, (0..n).collect())?;
        return Ok(SolverResult {
            tour,
            is_exact: true,
            solver: "held_karp".into(),
            iterations: 0,
        });
    }
    let d = Dist::new(instance);
    let m = n - 1;
    let full = (1usize << m) - 1;
    let mut cost = vec![f64::INFINITY; (full + 1) * m];
    let mut parent = vec![u8::MAX; (full + 1) * m];
    for j in 0..m {
        cost[(1 << j) * m + j] = d.at(0, j + 1);
    }
    let mut expanded = 0u64;
    for set in 1..=full {
        for j in 0..m {
            if set & (1 << j) == 0 {
                continue;
            }
            let c = cost[set * m + j];
            if !c.is_finite() {
                continue;
            }
            expanded += 1;
            for k in 0..m {
                if set & (1 << k) != 0 {
                    continue;
                }
                let next = set | (1 << k);
                let cand = c + d.at(j + 1, k + 1);
                if cand < cost[next * m + k] {
                    cost[next * m + k] = cand;
                    parent[next * m + k] = j as u8;
                }
            }
        }
    }
    let mut best = (f64::INFINITY, 0);
    for j in 0..m {
        let c = cost[full * m + j] + d.at(j + 1, 0);
        if c < best.0 {
            best = (c, j);
        }
    }
    let mut seq = Vec::with_capacity(n);
    let (mut set, mut j) = (full, best.1);
    loop {
        seq.push(j + 1);
        let p = parent[set * m + j];
        set &= !(1 << j);
        if p == u8::MAX {
            break;
        }
        j = p as usize;
    }
    seq.push(0);
    seq.reverse();
    Ok(SolverResult {
        tour: Tour::new(instance, seq)?,
        is_exact: true,
        solver: "held_karp".into(),
        iterations: expanded,
    })
}

/// Nearest-neighbour tour from `start`; ties go to the lowest index.
pub fn nearest_neighbor(instance: &Instance, start: usize) -> Vec<usize> {
    let d = Dist::new(instance);
    nn_with(&d, start)
}

fn nn_with(d: &Dist, start: usize) -> Vec<usize> {
    let mut visited = vec![false; d.n];
    let mut seq = vec![start];
    visited[start] = true;
    let mut cur = start;
    for _ in 1..d.n {
        let mut best = usize::MAX;
        for j in 0..d.n {
            if !visited[j] && (best == usize::MAX || d.at(cur, j) < d.at(cur, best)) {
                best = j;
            }
        }
        visited[best] = true;
        seq.push(best);
        cur = best;
    }
    seq
}

/// First improving 2-opt move on a closed tour in lexicographic `(i, j)`
/// order: reversing `tour[i+1..=j]`.
pub fn find_two_opt_move(instance: &Instance, tour: &[usize]) -> Option<(usize, usize)> {
    find_two_opt_with(&Dist::new(instance), tour)
}

fn find_two_opt_with(d: &Dist, t: &[usize]) -> Option<(usize, usize)> {
    let n = t.len();
    if n < 4 {
        return None;
    }
    for i in 0..n - 2 {
        let (a, b) = (t[i], t[i + 1]);
        let j_end = if i == 0 { n - 1 } else { n };
        for j in i + 2..j_end {
            let (c, e) = (t[j], t[(j + 1) % n]);
            let delta = d.at(a, c) + d.at(b, e) - d.at(a, b) - d.at(c, e);
            if delta < -EPS {
                return Some((i, j));
            }
        }
    }
    None
}

/// Applies first-improvement 2-opt until no improving move remains.
/// `observe` sees the tour after every accepted move.
pub fn two_opt(instance: &Instance, tour: &mut [usize], observe: &mut dyn FnMut(&[usize])) -> u64 {
    two_opt_with(&Dist::new(instance), tour, observe)
}

fn two_opt_with(d: &Dist, tour: &mut [usize], observe: &mut dyn FnMut(&[usize])) -> u64 {
    let mut moves = 0;
    while let Some((i, j)) = find_two_opt_with(d, tour) {
        tour[i + 1..=j].reverse();
        moves += 1;
        observe(tour);
    }
    moves
}

fn rotate_to_zero(seq: &mut [usize]) {
    if let Some(p) = seq.iter().position(|&v| v == 0) {
        seq.rotate_left(p);
    }
}

/// Best of `min(n, 10)` nearest-neighbour starts, each polished by 2-opt.
pub fn heuristic_tsp(instance: &Instance, rng: &mut RngStream) -> Result<SolverResult> {
    heuristic_tsp_observed(instance, rng, &mut |_| {})
}

pub fn heuristic_tsp_observed(
    instance: &Instance,
    rng: &mut RngStream,
    observe: &mut dyn FnMut(&[usize]),
) -> Result<SolverResult> {
    require(instance, ProblemKind::Tsp)?;
    let n = instance.n_nodes();
    if n < 2 {
        return Err(Error::InvalidSize("heuristic_tsp needs at least 2 nodes".into()));
    }
    let d = Dist::new(instance);
    let k = n.min(10);
    let mut starts = sample(rng, n, k).into_vec();
    starts.sort_unstable();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut iterations = 0;
    for s in starts {
        let mut t = nn_with(&d, s);
        iterations += two_opt_with(&d, &mut t, observe);
        rotate_to_zero(&mut t);
        let len = crate::problems::sequence_length(instance, &t);
        if best.as_ref().map_or(true, |(b, _)| len < *b - EPS) {
            best = Some((len, t));
        }
    }
    let (_, seq) = best.expect("at least one start");
    Ok(SolverResult {
        tour: Tour::new(instance, seq)?,
        is_exact: false,
        solver: "nn_2opt".into(),
        iterations,
    })
}

/// Optimal split of a giant tour into capacity-feasible consecutive routes.
pub fn split_giant_tour(instance: &Instance, giant: &[usize]) -> Result<(f64, Vec<Vec<usize>>)> {
    split_with(&Dist::new(instance), instance, giant)
}

fn split_with(d: &Dist, instance: &Instance, giant: &[usize]) -> Result<(f64, Vec<Vec<usize>>)> {
    let depot = instance.depot().ok_or_else(|| Error::Config("split needs a CVRP instance".into()))?;
    let q = instance.capacity() as u64;
    let m = giant.len();
    let mut best = vec![f64::INFINITY; m + 1];
    let mut pred = vec![0usize; m + 1];
    best[0] = 0.0;
    for i in 0..m {
        if !best[i].is_finite() {
            continue;
        }
        let mut load = 0u64;
        let mut inner = 0.0;
        for j in i..m {
            load += instance.demand(giant[j]) as u64;
            if load > q {
                break;
            }
            if j > i {
                inner += d.at(giant[j - 1], giant[j]);
            }
            let cost = best[i] + d.at(depot, giant[i]) + inner + d.at(giant[j], depot);
            if cost < best[j + 1] {
                best[j + 1] = cost;
                pred[j + 1] = i;
            }
        }
    }
    if !best[m].is_finite() {
        return Err(Error::Invariant("giant tour has no capacity-feasible split".into()));
    }
    let mut routes = Vec::new();
    let mut j = m;
    while j > 0 {
        let i = pred[j];
        routes.push(giant[i..j].to_vec());
        j = i;
    }
    routes.reverse();
    Ok((best[m], routes))
}

/// Advances `p` to the next lexicographic permutation; false after the last.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("pivot has a successor");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive search over customer orders, each split optimally.
pub fn exact_cvrp(instance: &Instance) -> Result<SolverResult> {
    require(instance, ProblemKind::Cvrp)?;
    let m = instance.n_customers();
    if m > EXACT_CVRP_LIMIT {
        return Err(Error::SizeLimit {
            solver: "exact_cvrp (use heuristic_cvrp)",
            size: m,
            limit: EXACT_CVRP_LIMIT,
        });
    }
    let depot = instance.depot().expect("CVRP instance");
    let d = Dist::new(instance);
    let mut perm: Vec<usize> = (0..instance.n_nodes()).filter(|&v| v != depot).collect();
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    let mut count = 0u64;
    loop {
        count += 1;
        let (c, routes) = split_with(&d, instance, &perm)?;
        if best.as_ref().map_or(true, |(b, _)| c < *b) {
            best = Some((c, routes));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (_, routes) = best.expect("at least one permutation");
    Ok(SolverResult {
        tour: Tour::new(instance, join_routes(depot, &routes))?,
        is_exact: true,
        solver: "permutation_split".into(),
        iterations: count,
    })
}

/// Clarke-Wright parallel savings construction.
pub fn savings_routes(instance: &Instance) -> Result<Vec<Vec<usize>>> {
    require(instance, ProblemKind::Cvrp)?;
    Ok(savings_with(&Dist::new(instance), instance))
}

fn savings_with(d: &Dist, instance: &Instance) -> Vec<Vec<usize>> {
    let depot = instance.depot().expect("CVRP instance");
    let q = instance.capacity() as u64;
    let customers: Vec<usize> = (0..instance.n_nodes()).filter(|&v| v != depot).collect();
    let mut routes: Vec<Vec<usize>> = customers.iter().map(|&c| vec![c]).collect();
    let mut loads: Vec<u64> = customers.iter().map(|&c| instance.demand(c) as u64).collect();
    let mut owner = vec![usize::MAX; instance.n_nodes()];
    for (r, &c) in customers.iter().enumerate() {
        owner[c] = r;
    }
    let mut savings = Vec::new();
    for (a, &i) in customers.iter().enumerate() {
        for &j in &customers[a + 1..] {
            savings.push((d.at(depot, i) + d.at(depot, j) - d.at(i, j), i, j));
        }
    }
    // descending savings, ties by node indices
    savings.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    for (s, i, j) in savings {
        if s <= EPS {
            break;
        }
        let (ri, rj) = (owner[i], owner[j]);
        if ri == rj || loads[ri] + loads[rj] > q {
            continue;
        }
        let (a, b) = (&routes[ri], &routes[rj]);
        let i_end = *a.last().unwrap() == i;
        let i_start = a[0] == i;
        let j_end = *b.last().unwrap() == j;
        let j_start = b[0] == j;
        if !(i_end || i_start) || !(j_end || j_start) {
            continue;
        }
        let mut left = std::mem::take(&mut routes[ri]);
        let mut right = std::mem::take(&mut routes[rj]);
        if !i_end {
            left.reverse();
        }
        if !j_start {
            right.reverse();
        }
        left.extend(right);
        for &v in &left {
            owner[v] = ri;
        }
        routes[ri] = left;
        loads[ri] += loads[rj];
        loads[rj] = 0;
    }
    routes.into_iter().filter(|r| !r.is_empty()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvrpMove {
    /// Reverse `route[i..=j]`.
    TwoOpt { route: usize, i: usize, j: usize },
    /// Move `from[pos]` into `to` before index `at`.
    Relocate { from: usize, pos: usize, to: usize, at: usize },
}

/// First improving intra-route 2-opt or inter-route relocate move.
pub fn find_cvrp_move(instance: &Instance, routes: &[Vec<usize>]) -> Option<CvrpMove> {
    find_cvrp_move_with(&Dist::new(instance), instance, routes)
}

fn find_cvrp_move_with(d: &Dist, instance: &Instance, routes: &[Vec<usize>]) -> Option<CvrpMove> {
    let depot = instance.depot().expect("CVRP instance");
    let node = |r: &[usize], k: isize| -> usize {
        if k < 0 || k as usize >= r.len() {
            depot
        } else {
            r[k as usize]
        }
    };
    for (ri, r) in routes.iter().enumerate() {
        let len = r.len() as isize;
        for i in 0..len {
            for j in i + 1..len {
                let (a, b) = (node(r, i - 1), node(r, i));
                let (c, e) = (node(r, j), node(r, j + 1));
                let delta = d.at(a, c) + d.at(b, e) - d.at(a, b) - d.at(c, e);
                if delta < -EPS {
                    return Some(CvrpMove::TwoOpt {
                        route: ri,
                        i: i as usize,
                        j: j as usize,
                    });
                }
            }
        }
    }
    let q = instance.capacity() as u64;
    let loads: Vec<u64> = routes
        .iter()
        .map(|r| r.iter().map(|&v| instance.demand(v) as u64).sum())
        .collect();
    for (fi, from) in routes.iter().enumerate() {
        for pos in 0..from.len() {
            let v = from[pos];
            let p = node(from, pos as isize - 1);
            let nx = node(from, pos as isize + 1);
            let removal = d.at(p, nx) - d.at(p, v) - d.at(v, nx);
            for (ti, to) in routes.iter().enumerate() {
                if ti == fi || loads[ti] + instance.demand(v) as u64 > q {
                    continue;
                }
                for at in 0..=to.len() {
                    let (a, b) = (node(to, at as isize - 1), node(to, at as isize));
                    let insertion = d.at(a, v) + d.at(v, b) - d.at(a, b);
                    if removal + insertion < -EPS {
                        return Some(CvrpMove::Relocate { from: fi, pos, to: ti, at });
                    }
                }
            }
        }
    }
    None
}

fn apply_cvrp_move(routes: &mut Vec<Vec<usize>>, mv: CvrpMove) {
    match mv {
        CvrpMove::TwoOpt { route, i, j } => routes[route][i..=j].reverse(),
        CvrpMove::Relocate { from, pos, to, at } => {
            let v = routes[from].remove(pos);
            routes[to].insert(at, v);
            if routes[from].is_empty() {
                routes.remove(from);
            }
        }
    }
}

/// Savings construction followed by 2-opt and relocate descent.
pub fn heuristic_cvrp(instance: &Instance) -> Result<SolverResult> {
    heuristic_cvrp_observed(instance, &mut |_| {})
}

/// [`heuristic_cvrp`]; `observe` sees the flattened solution after
/// construction and after every accepted move.
pub fn heuristic_cvrp_observed(instance: &Instance, observe: &mut dyn FnMut(&[usize])) -> Result<SolverResult> {
    require(instance, ProblemKind::Cvrp)?;
    let depot = instance.depot().expect("CVRP instance");
    let d = Dist::new(instance);
    let mut routes = savings_with(&d, instance);
    observe(&join_routes(depot, &routes));
    let mut moves = 0;
    while let Some(mv) = find_cvrp_move_with(&d, instance, &routes) {
        apply_cvrp_move(&mut routes, mv);
        moves += 1;
        observe(&join_routes(depot, &routes));
    }
    Ok(SolverResult {
        tour: Tour::new(instance, join_routes(depot, &routes))?,
        is_exact: false,
        solver: "savings_ls".into(),
        iterations: moves,
    })
}

/// SHA-256 over the problem kind, coordinates and CVRP data.
pub fn instance_hash(instance: &Instance) -> String {
    let mut h = Sha256::new();
    h.update(instance.kind().to_string().as_bytes());
    for p in instance.coords() {
        h.update(p[0].to_le_bytes());
        h.update(p[1].to_le_bytes());
    }
    if let Some(c) = instance.cvrp_data() {
        h.update((c.depot_index as u64).to_le_bytes());
        for &q in &c.demands {
            h.update(q.to_le_bytes());
        }
        h.update(c.capacity.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Exact when within the size limits, heuristic otherwise. A pure function
/// of the instance: the heuristic stream is seeded from the instance hash.
pub fn solve_reference(instance: &Instance) -> Result<SolverResult> {
    match instance.kind() {
        ProblemKind::Tsp if instance.n_nodes() <= EXACT_TSP_LIMIT => exact_tsp(instance),
        ProblemKind::Tsp => {
            let hash = instance_hash(instance);
            let seed = u64::from_str_radix(&hash[..16], 16).expect("hex digest");
            heuristic_tsp(instance, &mut RngStream::new(seed))
        }
        ProblemKind::Cvrp if instance.n_customers() <= EXACT_CVRP_LIMIT => exact_cvrp(instance),
        ProblemKind::Cvrp => heuristic_cvrp(instance),
    }
}

/// [`solve_reference`] over many instances, in input order.
pub fn solve_references(instances: &[Instance]) -> Result<Vec<SolverResult>> {
    instances.par_iter().map(solve_reference).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub hash: String,
    pub length: f64,
    pub is_exact: bool,
    pub solver: String,
}

/// Reference lengths keyed by [`instance_hash`]; persisted as JSON lines in
/// hash order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceCache {
    entries: BTreeMap<String, CacheEntry>,
}

impl ReferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, instance: &Instance) -> Option<&CacheEntry> {
        self.entries.get(&instance_hash(instance))
    }

    pub fn insert(&mut self, instance: &Instance, result: &SolverResult) {
        let hash = instance_hash(instance);
        self.entries.insert(
            hash.clone(),
            CacheEntry {
                hash,
                length: result.tour.length(),
                is_exact: result.is_exact,
                solver: result.solver.clone(),
            },
        );
    }

    /// Solves every instance missing from the cache; returns the lengths in
    /// input order.
    pub fn ensure(&mut self, instances: &[Instance]) -> Result<Vec<f64>> {
        let missing: Vec<Instance> = instances.iter().filter(|i| self.get(i).is_none()).cloned().collect();
        for (inst, res) in missing.iter().zip(solve_references(&missing)?) {
            self.insert(inst, &res);
        }
        Ok(instances.iter().map(|i| self.get(i).expect("just solved").length).collect())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: CacheEntry = serde_json::from_str(&line)?;
            entries.insert(e.hash.clone(), e);
        }
        Ok(Self { entries })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for e in self.entries.values() {
            writeln!(out, "{}", serde_json::to_string(e)?)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
