//! TSP/CVRP instances, tours and the step-by-step construction process.
//!
//! A CVRP instance always keeps its depot at index 0. Construction starts at
//! the depot and a tour is the sequence of chosen actions; the closing depot
//! return is appended automatically once the last customer is served.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemKind::Tsp => f.write_str("tsp"),
            ProblemKind::Cvrp => f.write_str("cvrp"),
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            other => Err(Error::Config(format!("unknown problem kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvrpData {
    pub depot_index: usize,
    pub demands: Vec<u32>,
    pub capacity: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    coords: Vec<Point>,
    cvrp: Option<CvrpData>,
}

#[inline]
pub fn euclidean(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl Instance {
    pub fn tsp(coords: Vec<Point>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidSize(format!(
                "a TSP instance needs at least 2 nodes, got {}",
                coords.len()
            )));
        }
        check_finite(&coords)?;
        Ok(Self { coords, cvrp: None })
    }

    /// CVRP instance with the depot at index 0. `demands[0]` must be 0.
    pub fn cvrp(coords: Vec<Point>, demands: Vec<u32>, capacity: u32) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::InvalidSize(
                "a CVRP instance needs a depot and at least one customer".into(),
            ));
        }
        check_finite(&coords)?;
        if demands.len() != coords.len() {
            return Err(Error::InvalidSize(format!(
                "{} demands for {} nodes",
                demands.len(),
                coords.len()
            )));
        }
        if capacity == 0 {
            return Err(Error::InvalidSize("capacity must be positive".into()));
        }
        if demands[0] != 0 {
            return Err(Error::Config("depot demand must be 0".into()));
        }
        if let Some((i, &d)) = demands.iter().enumerate().find(|(_, &d)| d > capacity) {
            return Err(Error::Config(format!(
                "demand {d} of node {i} exceeds capacity {capacity}"
            )));
        }
        Ok(Self {
            coords,
            cvrp: Some(CvrpData {
                depot_index: 0,
                demands,
                capacity,
            }),
        })
    }

    pub fn kind(&self) -> ProblemKind {
        if self.cvrp.is_some() {
            ProblemKind::Cvrp
        } else {
            ProblemKind::Tsp
        }
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Customers for CVRP, all nodes for TSP.
    pub fn n_customers(&self) -> usize {
        match self.cvrp {
            Some(_) => self.coords.len() - 1,
            None => self.coords.len(),
        }
    }

    pub fn cvrp_data(&self) -> Option<&CvrpData> {
        self.cvrp.as_ref()
    }

    pub fn depot(&self) -> Option<usize> {
        self.cvrp.as_ref().map(|c| c.depot_index)
    }

    pub fn demand(&self, node: usize) -> u32 {
        self.cvrp.as_ref().map_or(0, |c| c.demands[node])
    }

    pub fn capacity(&self) -> u32 {
        self.cvrp.as_ref().map_or(0, |c| c.capacity)
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        euclidean(self.coords[i], self.coords[j])
    }

    /// Same demands and capacity, new coordinates.
    pub fn with_coords(&self, coords: Vec<Point>) -> Result<Self> {
        assert_eq!(coords.len(), self.coords.len());
        check_finite(&coords)?;
        Ok(Self {
            coords,
            cvrp: self.cvrp.clone(),
        })
    }

    pub fn distance_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.n_nodes();
        (0..n)
            .map(|i| (0..n).map(|j| self.dist(i, j)).collect())
            .collect()
    }
}

fn check_finite(coords: &[Point]) -> Result<()> {
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("instance", "non-finite coordinate"));
    }
    Ok(())
}

/// First violated constraint of a candidate tour.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NodeOutOfRange { node: usize },
    Duplicate { node: usize, position: usize },
    Missing { node: usize },
    EmptyRoute { route: usize },
    CapacityExceeded { route: usize, load: u64, capacity: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NodeOutOfRange { node } => write!(f, "node {node} out of range"),
            Violation::Duplicate { node, position } => {
                write!(f, "node {node} visited again at position {position}")
            }
            Violation::Missing { node } => write!(f, "node {node} never visited"),
            Violation::EmptyRoute { route } => write!(f, "sub-tour {route} is empty"),
            Violation::CapacityExceeded {
                route,
                load,
                capacity,
            } => write!(f, "sub-tour {route} carries {load} > capacity {capacity}"),
        }
    }
}

/// Checks visit-once, completeness and (CVRP) per-sub-tour capacity.
pub fn validate_tour(instance: &Instance, sequence: &[usize]) -> Result<(), Violation> {
    let n = instance.n_nodes();
    let mut seen = vec![false; n];
    match instance.cvrp_data() {
        None => {
            for (pos, &v) in sequence.iter().enumerate() {
                if v >= n {
                    return Err(Violation::NodeOutOfRange { node: v });
                }
                if seen[v] {
                    return Err(Violation::Duplicate {
                        node: v,
                        position: pos,
                    });
                }
                seen[v] = true;
            }
        }
        Some(cvrp) => {
            let depot = cvrp.depot_index;
            let mut route = 0;
            let mut load: u64 = 0;
            let mut route_len = 0;
            for (pos, &v) in sequence.iter().enumerate() {
                if v >= n {
                    return Err(Violation::NodeOutOfRange { node: v });
                }
                if v == depot {
                    if route_len == 0 {
                        return Err(Violation::EmptyRoute { route });
                    }
                    route += 1;
                    load = 0;
                    route_len = 0;
                    continue;
                }
                if seen[v] {
                    return Err(Violation::Duplicate {
                        node: v,
                        position: pos,
                    });
                }
                seen[v] = true;
                load += cvrp.demands[v] as u64;
                route_len += 1;
                if load > cvrp.capacity as u64 {
                    return Err(Violation::CapacityExceeded {
                        route,
                        load,
                        capacity: cvrp.capacity,
                    });
                }
            }
            seen[depot] = true;
        }
    }
    if let Some(node) = seen.iter().position(|&s| !s) {
        return Err(Violation::Missing { node });
    }
    Ok(())
}

/// Length of the closed walk through `sequence` without any feasibility check.
///
/// TSP walks return to the first node; CVRP walks start and end at the depot.
pub fn sequence_length(instance: &Instance, sequence: &[usize]) -> f64 {
    if sequence.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for w in sequence.windows(2) {
        total += instance.dist(w[0], w[1]);
    }
    let (first, last) = (sequence[0], sequence[sequence.len() - 1]);
    match instance.depot() {
        None => total += instance.dist(last, first),
        Some(depot) => {
            total += instance.dist(depot, first);
            total += instance.dist(last, depot);
        }
    }
    total
}

pub fn tour_length(instance: &Instance, sequence: &[usize]) -> Result<f64> {
    validate_tour(instance, sequence).map_err(Error::Infeasible)?;
    Ok(sequence_length(instance, sequence))
}

/// A feasible tour with its cached length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tour {
    sequence: Vec<usize>,
    length: f64,
}

impl Tour {
    /// Validates and measures `sequence`; a CVRP sequence gets its closing
    /// depot return appended when missing.
    pub fn new(instance: &Instance, mut sequence: Vec<usize>) -> Result<Self> {
        if let Some(depot) = instance.depot() {
            if sequence.last() != Some(&depot) {
                sequence.push(depot);
            }
        }
        let length = tour_length(instance, &sequence)?;
        Ok(Self { sequence, length })
    }

    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Depot-delimited routes of a CVRP tour (depot excluded).
    pub fn routes(&self, instance: &Instance) -> Vec<Vec<usize>> {
        split_routes(instance, &self.sequence)
    }

    /// Re-checks a tour read from disk and refreshes the cached length.
    pub fn revalidate(self, instance: &Instance) -> Result<Self> {
        Tour::new(instance, self.sequence)
    }
}

pub fn split_routes(instance: &Instance, sequence: &[usize]) -> Vec<Vec<usize>> {
    let depot = instance.depot().unwrap_or(usize::MAX);
    let mut routes = Vec::new();
    let mut cur = Vec::new();
    for &v in sequence {
        if v == depot {
            if !cur.is_empty() {
                routes.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(v);
        }
    }
    if !cur.is_empty() {
        routes.push(cur);
    }
    routes
}

/// Flattens routes into a depot-delimited action sequence.
pub fn join_routes(depot: usize, routes: &[Vec<usize>]) -> Vec<usize> {
    let mut seq = Vec::new();
    for r in routes.iter().filter(|r| !r.is_empty()) {
        seq.extend_from_slice(r);
        seq.push(depot);
    }
    seq
}

/// Partial solution of the construction process.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstructionState {
    sequence: Vec<usize>,
    visited: Vec<bool>,
    current: Option<usize>,
    remaining: u32,
    unvisited_customers: usize,
    done: bool,
}

impl ConstructionState {
    pub fn new(instance: &Instance) -> Self {
        let mut visited = vec![false; instance.n_nodes()];
        let (current, remaining) = match instance.cvrp_data() {
            Some(c) => {
                visited[c.depot_index] = true;
                (Some(c.depot_index), c.capacity)
            }
            None => (None, 0),
        };
        Self {
            sequence: Vec::with_capacity(instance.n_nodes() * 2),
            visited,
            current,
            remaining,
            unvisited_customers: instance.n_customers(),
            done: false,
        }
    }

    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    /// `None` before the first TSP action.
    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn remaining_capacity(&self) -> u32 {
        self.remaining
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Fills `mask` and returns the number of feasible actions.
    pub fn fill_mask(&self, instance: &Instance, mask: &mut [bool]) -> usize {
        let mut count = 0;
        if self.done {
            mask.iter_mut().for_each(|m| *m = false);
            return 0;
        }
        match instance.cvrp_data() {
            None => {
                for (m, &v) in mask.iter_mut().zip(&self.visited) {
                    *m = !v;
                    count += *m as usize;
                }
            }
            Some(c) => {
                for (i, m) in mask.iter_mut().enumerate() {
                    *m = if i == c.depot_index {
                        self.current != Some(c.depot_index)
                    } else {
                        !self.visited[i] && c.demands[i] <= self.remaining
                    };
                    count += *m as usize;
                }
            }
        }
        count
    }

    pub fn step(&mut self, instance: &Instance, action: usize) -> Result<bool> {
        if self.done || action >= instance.n_nodes() {
            return Err(Error::IllegalAction { action });
        }
        match instance.cvrp_data() {
            None => {
                if self.visited[action] {
                    return Err(Error::IllegalAction { action });
                }
                self.visited[action] = true;
                self.unvisited_customers -= 1;
                self.done = self.unvisited_customers == 0;
            }
            Some(c) => {
                if action == c.depot_index {
                    if self.current == Some(c.depot_index) {
                        return Err(Error::IllegalAction { action });
                    }
                    self.remaining = c.capacity;
                } else {
                    if self.visited[action] || c.demands[action] > self.remaining {
                        return Err(Error::IllegalAction { action });
                    }
                    self.visited[action] = true;
                    self.remaining -= c.demands[action];
                    self.unvisited_customers -= 1;
                }
            }
        }
        self.sequence.push(action);
        self.current = Some(action);
        if let Some(c) = instance.cvrp_data() {
            if self.unvisited_customers == 0 {
                if action != c.depot_index {
                    self.sequence.push(c.depot_index);
                    self.current = Some(c.depot_index);
                    self.remaining = c.capacity;
                }
                self.done = true;
            }
        }
        Ok(self.done)
    }
}

pub fn feasible_mask(state: &ConstructionState, instance: &Instance) -> Result<Vec<bool>> {
    let mut mask = vec![false; instance.n_nodes()];
    if state.fill_mask(instance, &mut mask) == 0 {
        return Err(Error::Invariant(
            "no feasible action in a non-terminal state".into(),
        ));
    }
    Ok(mask)
}

pub fn env_step(
    instance: &Instance,
    state: &ConstructionState,
    action: usize,
) -> Result<(ConstructionState, bool)> {
    let mut next = state.clone();
    let done = next.step(instance, action)?;
    Ok((next, done))
}

/// Applies symmetry `k` (0..8) of the unit square; element 0 is the identity.
pub fn augment_point(p: Point, k: usize) -> Point {
    let [x, y] = p;
    match k {
        0 => [x, y],
        1 => [y, x],
        2 => [x, 1.0 - y],
        3 => [1.0 - x, y],
        4 => [1.0 - x, 1.0 - y],
        5 => [y, 1.0 - x],
        6 => [1.0 - y, x],
        7 => [1.0 - y, 1.0 - x],
        _ => panic!("augmentation index {k} out of range"),
    }
}

pub fn augment8(instance: &Instance) -> Vec<Instance> {
    (0..8)
        .map(|k| {
            let coords = instance
                .coords()
                .iter()
                .map(|&p| augment_point(p, k))
                .collect();
            instance
                .with_coords(coords)
                .expect("isometry preserves finiteness")
        })
        .collect()
}
