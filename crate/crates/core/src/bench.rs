//! TSPLIB/CVRPLIB instances and gap reporting.
//!
//! Benchmark gaps use the TSPLIB convention of rounding every edge to the
//! nearest integer, so they are comparable with published optima. Policies
//! see the coordinates rescaled onto the unit square.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{decode_all, decode_best, gap, DecodeSpec, GapReport};
use crate::instancegen::normalize_coords;
use crate::policy::PolicyParams;
use crate::problems::{euclidean, Instance, Point, ProblemKind};
use crate::rng::RngStream;
use crate::solvers::{heuristic_cvrp, heuristic_tsp, instance_hash, ReferenceCache, SolverResult};

/// Published optimal (or best known) objective values.
pub const PUBLISHED: &[(&str, f64)] = &[
    ("kroA100", 21282.0),
    ("kroB100", 22141.0),
    ("kroC100", 20749.0),
    ("kroD100", 21294.0),
    ("kroE100", 22068.0),
    ("eil101", 629.0),
    ("lin105", 14379.0),
    ("pr107", 44303.0),
    ("pr124", 59030.0),
    ("bier127", 118282.0),
    ("ch130", 6110.0),
    ("pr136", 96772.0),
    ("pr144", 58537.0),
    ("ch150", 6528.0),
    ("kroA150", 26524.0),
    ("kroB150", 26130.0),
    ("pr152", 73682.0),
    ("rat195", 2323.0),
    ("kroA200", 29368.0),
    ("kroB200", 29437.0),
    ("X-n101-k25", 27591.0),
    ("X-n106-k14", 26362.0),
    ("X-n110-k13", 14971.0),
    ("X-n115-k10", 12747.0),
    ("X-n120-k6", 13332.0),
    ("X-n125-k30", 55539.0),
    ("X-n129-k18", 28940.0),
    ("X-n134-k13", 10916.0),
    ("X-n139-k10", 13590.0),
    ("X-n143-k7", 15700.0),
    ("X-n148-k46", 43448.0),
    ("X-n153-k22", 21220.0),
    ("X-n157-k13", 16876.0),
    ("X-n162-k11", 14138.0),
    ("X-n167-k10", 20557.0),
    ("X-n172-k51", 45607.0),
    ("X-n176-k26", 47812.0),
    ("X-n181-k23", 25569.0),
    ("X-n186-k15", 24145.0),
    ("X-n190-k8", 16980.0),
    ("X-n195-k51", 44225.0),
];

pub fn published_optimum(name: &str) -> Option<f64> {
    PUBLISHED.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
}

/// How benchmark coordinates are mapped before the policy sees them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Raw coordinates.
    None,
    /// Each axis rescaled onto `[0, 1]` independently.
    #[default]
    MinMax,
    /// Both axes shifted to the origin and divided by the larger span,
    /// keeping the aspect ratio.
    Uniform,
}

impl std::str::FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "min_max" => Ok(Normalization::MinMax),
            "uniform" => Ok(Normalization::Uniform),
            _ => Err(Error::Config(format!("unknown normalization `{s}`"))),
        }
    }
}

impl Normalization {
    pub fn apply(self, points: &[Point]) -> Vec<Point> {
        match self {
            Normalization::None => points.to_vec(),
            Normalization::MinMax => normalize_coords(points),
            Normalization::Uniform => {
                let lo = points.iter().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
                let hi = points
                    .iter()
                    .fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
                let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
                let scale = if span > 0.0 { 1.0 / span } else { 1.0 };
                points.iter().map(|p| [(p[0] - lo[0]) * scale, (p[1] - lo[1]) * scale]).collect()
            }
        }
    }
}

/// A parsed benchmark file. For CVRP the depot is stored first; `node_ids`
/// keeps the file's ids in storage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkInstance {
    pub name: String,
    pub comment: Option<String>,
    pub problem: ProblemKind,
    pub dimension: usize,
    pub edge_weight_type: String,
    pub node_ids: Vec<usize>,
    pub coords: Vec<Point>,
    pub demands: Option<Vec<u32>>,
    pub capacity: Option<u32>,
}

/// TSPLIB `nint` distance.
pub fn rounded_distance(a: Point, b: Point) -> f64 {
    (euclidean(a, b) + 0.5).floor()
}

impl BenchmarkInstance {
    /// Instance on the original coordinates.
    pub fn instance(&self) -> Result<Instance> {
        self.instance_with(self.coords.clone())
    }

    /// Instance as seen by a policy.
    pub fn policy_instance(&self, norm: Normalization) -> Result<Instance> {
        self.instance_with(norm.apply(&self.coords))
    }

    fn instance_with(&self, coords: Vec<Point>) -> Result<Instance> {
        match self.problem {
            ProblemKind::Tsp => Instance::tsp(coords),
            ProblemKind::Cvrp => Instance::cvrp(
                coords,
                self.demands.clone().unwrap_or_default(),
                self.capacity.unwrap_or(0),
            ),
        }
    }

    /// Length under rounded distances, with the same closing conventions as
    /// [`crate::problems::sequence_length`].
    pub fn rounded_length(&self, sequence: &[usize]) -> f64 {
        let Some((&first, &last)) = sequence.first().zip(sequence.last()) else {
            return 0.0;
        };
        let d = |i: usize, j: usize| rounded_distance(self.coords[i], self.coords[j]);
        let inner: f64 = sequence.windows(2).map(|w| d(w[0], w[1])).sum();
        match self.problem {
            ProblemKind::Tsp => inner + d(last, first),
            ProblemKind::Cvrp => inner + d(0, first) + d(last, 0),
        }
    }

    /// Lower bound `ceil(Σ demand / Q)` on the number of routes.
    pub fn min_routes(&self) -> Option<u64> {
        let total: u64 = self.demands.as_ref()?.iter().map(|&q| q as u64).sum();
        Some(total.div_ceil(self.capacity? as u64))
    }

    pub fn published_optimum(&self) -> Option<f64> {
        published_optimum(&self.name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.problem {
            ProblemKind::Tsp => "TSP",
            ProblemKind::Cvrp => "CVRP",
        };
        writeln!(s, "NAME : {}", self.name).unwrap();
        if let Some(c) = &self.comment {
            writeln!(s, "COMMENT : {c}").unwrap();
        }
        writeln!(s, "TYPE : {kind}").unwrap();
        writeln!(s, "DIMENSION : {}", self.dimension).unwrap();
        writeln!(s, "EDGE_WEIGHT_TYPE : {}", self.edge_weight_type).unwrap();
        if let Some(q) = self.capacity {
            writeln!(s, "CAPACITY : {q}").unwrap();
        }
        writeln!(s, "NODE_COORD_SECTION").unwrap();
        for (id, p) in self.node_ids.iter().zip(&self.coords) {
            writeln!(s, "{id} {} {}", p[0], p[1]).unwrap();
        }
        if let Some(demands) = &self.demands {
            writeln!(s, "DEMAND_SECTION").unwrap();
            for (id, q) in self.node_ids.iter().zip(demands) {
                writeln!(s, "{id} {q}").unwrap();
            }
            writeln!(s, "DEPOT_SECTION\n{}\n-1", self.node_ids[0]).unwrap();
        }
        s.push_str("EOF\n");
        s
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    Coords,
    Demands,
    Depot,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn number<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| parse_err(line, format!("bad {what} `{tok}`")))
}

fn parse(text: &str, expected: ProblemKind) -> Result<BenchmarkInstance> {
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut coords: BTreeMap<usize, (usize, Point)> = BTreeMap::new();
    let mut order: Vec<usize> = Vec::new();
    let mut demands: BTreeMap<usize, u32> = BTreeMap::new();
    let mut depots: Vec<usize> = Vec::new();
    let mut section = Section::Header;
    let mut seen_sections = Vec::new();
    let mut last_line = 0;
    for (idx, raw) in text.lines().enumerate() {
        let ln = idx + 1;
        last_line = ln;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            break;
        }
        let keyword = line.split(|c: char| c == ':' || c.is_whitespace()).next().unwrap_or("");
        let next = match keyword {
            "NODE_COORD_SECTION" => Some(Section::Coords),
            "DEMAND_SECTION" => Some(Section::Demands),
            "DEPOT_SECTION" => Some(Section::Depot),
            k if k.ends_with("_SECTION") => {
                return Err(Error::Unsupported(format!("section {k} (line {ln})")));
            }
            _ => None,
        };
        if let Some(s) = next {
            if seen_sections.contains(&s) {
                return Err(parse_err(ln, format!("repeated {keyword}")));
            }
            seen_sections.push(s);
            section = s;
            continue;
        }
        if let Some((key, value)) = line.split_once(':') {
            if section != Section::Header && key.trim().chars().all(|c| c.is_ascii_uppercase() || c == '_') {
                section = Section::Header;
            }
            if section == Section::Header {
                let key = key.trim().to_string();
                if header.contains_key(&key) {
                    return Err(parse_err(ln, format!("repeated header {key}")));
                }
                header.insert(key, (ln, value.trim().to_string()));
                continue;
            }
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Header => return Err(parse_err(ln, format!("expected `KEY : VALUE`, got `{line}`"))),
            Section::Coords => {
                if toks.len() != 3 {
                    return Err(parse_err(ln, "coordinate lines need `id x y`"));
                }
                let id: usize = number(toks[0], ln, "node id")?;
                let p = [number::<f64>(toks[1], ln, "x")?, number::<f64>(toks[2], ln, "y")?];
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(parse_err(ln, "non-finite coordinate"));
                }
                if coords.insert(id, (ln, p)).is_some() {
                    return Err(parse_err(ln, format!("duplicate node {id}")));
                }
                order.push(id);
            }
            Section::Demands => {
                if toks.len() != 2 {
                    return Err(parse_err(ln, "demand lines need `id demand`"));
                }
                let id: usize = number(toks[0], ln, "node id")?;
                if demands.insert(id, number(toks[1], ln, "demand")?).is_some() {
                    return Err(parse_err(ln, format!("duplicate demand for node {id}")));
                }
            }
            Section::Depot => {
                for t in toks {
                    let v: i64 = number(t, ln, "depot id")?;
                    if v == -1 {
                        section = Section::Header;
                        break;
                    }
                    if v <= 0 {
                        return Err(parse_err(ln, format!("bad depot id {v}")));
                    }
                    depots.push(v as usize);
                }
            }
        }
    }

    let get = |key: &str| header.get(key).map(|(l, v)| (*l, v.as_str()));
    let (type_line, kind) = get("TYPE").ok_or_else(|| parse_err(last_line, "missing TYPE"))?;
    let problem = match kind {
        "TSP" => ProblemKind::Tsp,
        "CVRP" => ProblemKind::Cvrp,
        other => return Err(Error::Unsupported(format!("problem type {other} (line {type_line})"))),
    };
    if problem != expected {
        return Err(parse_err(type_line, format!("expected a {expected} file, found TYPE {kind}")));
    }
    let (ew_line, ew) = get("EDGE_WEIGHT_TYPE").ok_or_else(|| parse_err(last_line, "missing EDGE_WEIGHT_TYPE"))?;
    if ew != "EUC_2D" {
        return Err(Error::Unsupported(format!("edge weight type {ew} (line {ew_line})")));
    }
    let (dim_line, dim) = get("DIMENSION").ok_or_else(|| parse_err(last_line, "missing DIMENSION"))?;
    let dimension: usize = number(dim, dim_line, "DIMENSION")?;
    if coords.len() != dimension {
        return Err(parse_err(
            dim_line,
            format!("DIMENSION {dimension} but {} coordinates", coords.len()),
        ));
    }
    if let Some((&id, &(ln, _))) = coords.iter().find(|(&id, _)| id == 0 || id > dimension) {
        return Err(parse_err(ln, format!("node id {id} outside 1..={dimension}")));
    }
    let name = get("NAME").map(|(_, v)| v.to_string()).unwrap_or_default();
    let comment = get("COMMENT").map(|(_, v)| v.to_string());

    let mut inst = BenchmarkInstance {
        name,
        comment,
        problem,
        dimension,
        edge_weight_type: ew.to_string(),
        node_ids: Vec::new(),
        coords: Vec::new(),
        demands: None,
        capacity: None,
    };
    match problem {
        ProblemKind::Tsp => {
            if dimension < 2 {
                return Err(parse_err(dim_line, "a tour needs at least 2 nodes"));
            }
            inst.coords = order.iter().map(|id| coords[id].1).collect();
            inst.node_ids = order;
        }
        ProblemKind::Cvrp => {
            let (cap_line, cap) = get("CAPACITY").ok_or_else(|| parse_err(last_line, "missing CAPACITY"))?;
            let capacity: u32 = number(cap, cap_line, "CAPACITY")?;
            if capacity == 0 {
                return Err(parse_err(cap_line, "CAPACITY must be positive"));
            }
            let depot = match depots.as_slice() {
                [] => 1,
                [d] => *d,
                _ => return Err(Error::Unsupported("more than one depot".into())),
            };
            if !coords.contains_key(&depot) {
                return Err(parse_err(last_line, format!("depot {depot} has no coordinates")));
            }
            if let Some(&id) = coords.keys().find(|id| !demands.contains_key(id)) {
                return Err(parse_err(last_line, format!("node {id} has no demand")));
            }
            if demands.len() != dimension {
                return Err(parse_err(last_line, "demands for unknown nodes"));
            }
            if demands[&depot] != 0 {
                return Err(parse_err(last_line, "depot demand must be 0"));
            }
            if let Some((id, q)) = demands.iter().find(|(_, &q)| q > capacity) {
                return Err(parse_err(last_line, format!("demand {q} of node {id} exceeds CAPACITY")));
            }
            let mut ids = vec![depot];
            ids.extend(order.iter().copied().filter(|&id| id != depot));
            inst.coords = ids.iter().map(|id| coords[id].1).collect();
            inst.demands = Some(ids.iter().map(|id| demands[id]).collect());
            inst.capacity = Some(capacity);
            inst.node_ids = ids;
            if let (Some(k), Some(lb)) = (declared_vehicles(&inst.name), inst.min_routes()) {
                if k < lb {
                    return Err(parse_err(
                        last_line,
                        format!("name declares {k} vehicles but demands need at least {lb}"),
                    ));
                }
            }
        }
    }
    Ok(inst)
}

/// The `K` of a CVRPLIB name ending in `-kK`.
fn declared_vehicles(name: &str) -> Option<u64> {
    name.rsplit_once("-k").and_then(|(_, k)| k.parse().ok())
}

/// Parses a TSPLIB `TYPE : TSP` file with `EUC_2D` weights.
pub fn parse_tsplib(text: &str) -> Result<BenchmarkInstance> {
    parse(text, ProblemKind::Tsp)
}

/// Parses a CVRPLIB file; the depot moves to index 0.
pub fn parse_cvrplib(text: &str) -> Result<BenchmarkInstance> {
    parse(text, ProblemKind::Cvrp)
}

pub fn load_benchmark(path: impl AsRef<Path>) -> Result<BenchmarkInstance> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("vrp") => parse_cvrplib(&text),
        _ => parse_tsplib(&text),
    }
}

/// Finds `<name>.tsp` or `<name>.vrp` in `dir`.
pub fn find_benchmark(name: &str, dir: &Path) -> Option<PathBuf> {
    ["tsp", "vrp"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

/// Classical heuristic on the original coordinates.
pub fn solve_benchmark(bench: &BenchmarkInstance, seed: u64) -> Result<SolverResult> {
    let inst = bench.instance()?;
    match bench.problem {
        ProblemKind::Tsp => heuristic_tsp(&inst, &mut RngStream::new(seed)),
        ProblemKind::Cvrp => heuristic_cvrp(&inst),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub name: String,
    pub length: f64,
    pub reference: f64,
    pub gap: f64,
}

/// Decodes with a policy on the normalized instance and measures the tour
/// under rounded distances on the original coordinates.
pub fn evaluate_benchmark(
    bench: &BenchmarkInstance,
    params: &PolicyParams,
    decode: DecodeSpec,
    norm: Normalization,
    seed: u64,
) -> Result<BenchmarkResult> {
    let reference = bench
        .published_optimum()
        .ok_or_else(|| Error::Config(format!("no published optimum for `{}`", bench.name)))?;
    let tour = decode_best(&bench.policy_instance(norm)?, params, decode, &mut RngStream::new(seed))?;
    let length = bench.rounded_length(tour.sequence());
    Ok(BenchmarkResult {
        name: bench.name.clone(),
        length,
        reference,
        gap: gap(length, reference),
    })
}

/// One evaluated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub distribution: String,
    pub index: usize,
    pub hash: String,
    pub length: f64,
    pub reference: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: GapReport,
    pub rows: Vec<InstanceRow>,
}

impl Evaluation {
    pub fn skipped(&self) -> usize {
        self.rows.iter().filter(|r| r.gap.is_none()).count()
    }
}

/// Evaluates `params` on named instance groups. Instances without a cached
/// reference are reported with a warning and left out of the averages.
pub fn evaluate_groups(
    params: &PolicyParams,
    groups: &[(String, Vec<Instance>)],
    cache: &ReferenceCache,
    decode: DecodeSpec,
    seed: u64,
) -> Result<Evaluation> {
    let mut rows = Vec::new();
    let mut names = Vec::new();
    let mut gaps = Vec::new();
    for (name, instances) in groups {
        let tours = decode_all(instances, params, decode, seed)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, (inst, tour)) in instances.iter().zip(&tours).enumerate() {
            let reference = cache.get(inst).map(|e| e.length);
            if reference.is_none() {
                log::warn!("{name}[{i}]: no reference, skipped");
            }
            let g = reference.map(|r| gap(tour.length(), r));
            if let Some(g) = g {
                sum += g;
                count += 1;
            }
            rows.push(InstanceRow {
                distribution: name.clone(),
                index: i,
                hash: instance_hash(inst),
                length: tour.length(),
                reference,
                gap: g,
            });
        }
        if count == 0 {
            return Err(Error::Config(format!("no references for any `{name}` instance")));
        }
        names.push(name.clone());
        gaps.push(sum / count as f64);
    }
    Ok(Evaluation {
        report: GapReport::new(names, gaps),
        rows,
    })
}

pub fn write_instance_csv<W: std::io::Write>(rows: &[InstanceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["distribution", "index", "hash", "length", "reference", "gap"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.distribution.clone(),
            r.index.to_string(),
            r.hash.clone(),
            r.length.to_string(),
            opt(r.reference),
            opt(r.gap),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per model: `model, G_<d>..., Avg`. Every report must list the
/// same distributions in the same order.
pub fn write_gap_table<W: std::io::Write>(models: &[(String, GapReport)], out: W) -> Result<()> {
    let Some((_, first)) = models.first() else {
        return Err(Error::Config("no models to tabulate".into()));
    };
    if models.iter().any(|(_, r)| r.distributions != first.distributions) {
        return Err(Error::Config("reports cover different distributions".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string()];
    header.extend(first.distributions.iter().map(|d| format!("G_{d}")));
    header.push("Avg".into());
    w.write_record(&header)?;
    for (model, r) in models {
        let mut rec = vec![model.clone()];
        rec.extend(r.gaps.iter().map(|g| g.to_string()));
        rec.push(r.overall.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
