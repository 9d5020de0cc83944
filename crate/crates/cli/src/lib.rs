//! The `amdkd` command line: generate → solve → train-teacher → distill →
//! evaluate, plus ablations and benchmark parsing.

pub mod config;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use amdkd_core::bench::{
    evaluate_benchmark, evaluate_groups, load_benchmark, solve_benchmark, write_gap_table, write_instance_csv,
};
use amdkd_core::distill::{ablate, distill, write_distill_log, write_wall_times, ValidationSet};
use amdkd_core::eval::gap;
use amdkd_core::instancegen::{generate_dataset, DistributionKind, DistributionSpec, InstanceRecord};
use amdkd_core::policy::checkpoint::Checkpoint;
use amdkd_core::problems::{Instance, ProblemKind};
use amdkd_core::solvers::ReferenceCache;
use amdkd_core::training::{train_teacher, write_train_log};
use amdkd_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};

use config::*;

#[derive(Debug, Parser)]
#[command(name = "amdkd", version, about = "Multi-distribution distillation of TSP/CVRP construction policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write instance sets to `instances.jsonl`.
    Generate(RunArgs),
    /// Compute reference solutions and extend the reference cache.
    Solve(RunArgs),
    /// Train a single-distribution teacher.
    TrainTeacher(RunArgs),
    /// Distil exemplar teachers into one student.
    Distill(RunArgs),
    /// Distil with one component switched off.
    Ablate(RunArgs),
    /// Gap tables for policy checkpoints.
    Evaluate(RunArgs),
    /// Parse TSPLIB/CVRPLIB files and score them against published optima.
    ParseBench(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the `seed` of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Short tag for machine-readable error lines.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidSize(_) => "invalid_size",
        Error::Infeasible(_) => "infeasible",
        Error::IllegalAction { .. } => "illegal_action",
        Error::Invariant(_) => "invariant",
        Error::Numeric { .. } => "numeric",
        Error::Config(_) => "config",
        Error::SizeLimit { .. } => "size_limit",
        Error::Parse { .. } => "parse",
        Error::Unsupported(_) => "unsupported",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({"status": "error", "kind": error_kind(&e), "message": e.to_string()});
            eprintln!("{line}");
            1
        }
    }
}

pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(&prepare(a)?),
        Command::Solve(a) => solve(&prepare(a)?),
        Command::TrainTeacher(a) => train(&prepare(a)?),
        Command::Distill(a) => distill_cmd(&prepare(a)?, false),
        Command::Ablate(a) => distill_cmd(&prepare(a)?, true),
        Command::Evaluate(a) => evaluate(&prepare(a)?),
        Command::ParseBench(a) => parse_bench(&prepare(a)?),
    }
}

/// Loads the config, applies `--seed` and the output override, validates,
/// and echoes the effective config into the output directory.
fn prepare<T: RunConfig + DeserializeOwned>(args: &RunArgs) -> Result<T> {
    let mut cfg: T = load(&args.config)?;
    if let Some(seed) = args.seed {
        *cfg.seed_mut() = seed;
    }
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        *cfg.output_dir_mut() = PathBuf::from(dir);
    }
    cfg.validate()?;
    let dir = cfg.output_dir_mut().clone();
    std::fs::create_dir_all(&dir)?;
    let echo = to_toml(&cfg)?;
    std::fs::write(dir.join("config.toml"), &echo)?;
    println!("config {}", echo.trim_end().replace('\n', "; "));
    Ok(cfg)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    std::io::copy(&mut File::open(path)?, &mut h)?;
    Ok(hex::encode(h.finalize()))
}

/// Writes `path` through `f` and logs its digest.
fn emit<F>(path: PathBuf, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut w = BufWriter::new(File::create(&path)?);
    f(&mut w)?;
    w.flush()?;
    drop(w);
    println!("wrote {} sha256={}", path.display(), file_sha256(&path)?);
    Ok(())
}

fn log_input(path: &Path) -> Result<()> {
    println!("read {} sha256={}", path.display(), file_sha256(path)?);
    Ok(())
}

/// Instance groups from a `generate` file, in order of first appearance.
pub fn read_instances(path: &Path) -> Result<Vec<(DistributionKind, Vec<Instance>)>> {
    log_input(path)?;
    let mut groups: Vec<(DistributionKind, Vec<Instance>)> = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = InstanceRecord::from_json_line(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let inst = rec.to_instance()?;
        match groups.iter_mut().find(|(k, _)| *k == rec.kind) {
            Some((_, v)) => v.push(inst),
            None => groups.push((rec.kind, vec![inst])),
        }
    }
    Ok(groups)
}

fn load_cache(path: Option<&Path>) -> Result<ReferenceCache> {
    match path {
        Some(p) if p.exists() => {
            log_input(p)?;
            ReferenceCache::load(p)
        }
        _ => Ok(ReferenceCache::new()),
    }
}

fn load_checkpoint(path: &Path, problem: ProblemKind) -> Result<Checkpoint> {
    log_input(path)?;
    let ck = Checkpoint::load(path)?;
    if ck.params.arch.problem_kind != problem {
        return Err(Error::Config(format!(
            "{} holds a {} policy, expected {problem}",
            path.display(),
            ck.params.arch.problem_kind
        )));
    }
    Ok(ck)
}

fn generate(cfg: &GenerateConfig) -> Result<()> {
    emit(cfg.output_dir.join("instances.jsonl"), |w| {
        for &kind in &cfg.distributions {
            let seed = dataset_seed(cfg.seed, kind);
            for inst in generate_dataset(cfg.problem, &DistributionSpec::new(kind), cfg.n, cfg.count, seed)? {
                writeln!(w, "{}", InstanceRecord::new(kind, seed, &inst).to_json_line()?)?;
            }
        }
        Ok(())
    })
}

fn solve(cfg: &SolveConfig) -> Result<()> {
    let groups = read_instances(&cfg.instances)?;
    let mut cache = load_cache(cfg.references.as_deref())?;
    for (_, insts) in &groups {
        cache.ensure(insts)?;
    }
    emit(cfg.output_dir.join("references.jsonl"), |w| cache.write(w))?;
    emit(cfg.output_dir.join("solutions.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["distribution", "index", "hash", "length", "is_exact", "solver"])?;
        for (kind, insts) in &groups {
            for (i, inst) in insts.iter().enumerate() {
                let e = cache.get(inst).expect("solved above");
                csv.write_record([
                    kind.name().to_string(),
                    i.to_string(),
                    e.hash.clone(),
                    e.length.to_string(),
                    e.is_exact.to_string(),
                    e.solver.clone(),
                ])?;
            }
        }
        csv.flush()?;
        Ok(())
    })
}

fn train(cfg: &TrainTeacherConfig) -> Result<()> {
    let out = train_teacher(&cfg.train_config(), |_, _, _| Ok(()))?;
    if let Some(last) = out.epoch_means().last() {
        println!("final epoch mean length {last}");
    }
    emit(cfg.output_dir.join("train_log.csv"), |w| write_train_log(&out.log, w))?;
    let ck = Checkpoint {
        params: out.params,
        optimizer: Some(out.optimizer),
    };
    emit(cfg.output_dir.join("teacher.ckpt"), |w| Ok(w.write_all(&ck.to_bytes())?))
}

fn distill_cmd(cfg: &DistillRunConfig, ablation_run: bool) -> Result<()> {
    let switch = match (cfg.ablation, ablation_run) {
        (Some(a), true) => Some(a),
        (None, false) => None,
        (None, true) => return Err(Error::Config("ablate needs an `ablation` entry".into())),
        (Some(_), false) => return Err(Error::Config("`ablation` is only valid for ablate".into())),
    };
    let dc = cfg.distill_config();
    let teachers = cfg
        .teachers
        .iter()
        .map(|p| load_checkpoint(p, cfg.problem).map(|c| c.params))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = load_cache(cfg.references.as_deref())?;
    let validation = ValidationSet::build(
        cfg.problem,
        cfg.n,
        &dc.exemplars,
        dc.validation_size,
        dc.validation_seed,
        &mut cache,
    )?;
    println!("validation fingerprint {}", validation.fingerprint());
    emit(cfg.output_dir.join("references.jsonl"), |w| cache.write(w))?;
    let out = match switch {
        Some(a) => ablate(&dc, a, &teachers, &validation, |_, _, _| Ok(()))?,
        None => distill(&dc, &teachers, &validation, |_, _, _| Ok(()))?,
    };
    let report = out.final_report();
    println!("final gaps {:?} overall {}", report.gaps, report.overall);
    emit(cfg.output_dir.join("distill_log.csv"), |w| {
        write_distill_log(&out.names, &out.log, w)
    })?;
    emit(cfg.output_dir.join("final_gaps.csv"), |w| {
        write_gap_table(&[("student".to_string(), report.clone())], w)
    })?;
    let ck = Checkpoint {
        params: out.params,
        optimizer: Some(out.optimizer),
    };
    emit(cfg.output_dir.join("student.ckpt"), |w| Ok(w.write_all(&ck.to_bytes())?))?;
    // Timing sidecar; excluded from reproducibility comparisons.
    let f = File::create(cfg.output_dir.join("wall_times.csv"))?;
    write_wall_times(&out.wall_times, f)
}

fn evaluate(cfg: &EvaluateConfig) -> Result<()> {
    let groups: Vec<(String, Vec<Instance>)> = match &cfg.instances {
        Some(p) => read_instances(p)?
            .into_iter()
            .map(|(k, v)| (k.code().to_string(), v))
            .collect(),
        None => cfg
            .distributions
            .iter()
            .map(|&k| {
                let seed = dataset_seed(cfg.seed, k);
                generate_dataset(cfg.problem, &DistributionSpec::new(k), cfg.n, cfg.count, seed)
                    .map(|v| (k.code().to_string(), v))
            })
            .collect::<Result<_>>()?,
    };
    if groups.iter().flat_map(|(_, v)| v).any(|i| i.kind() != cfg.problem) {
        return Err(Error::Config(format!("instances are not all {}", cfg.problem)));
    }
    let mut cache = load_cache(cfg.references.as_deref())?;
    if cfg.solve_missing {
        for (_, insts) in &groups {
            cache.ensure(insts)?;
        }
    }
    let mut table = Vec::new();
    let mut used = BTreeSet::new();
    for (name, path) in cfg.names().into_iter().zip(&cfg.models) {
        if !used.insert(name.clone()) {
            return Err(Error::Config(format!("duplicate model name `{name}`")));
        }
        let ck = load_checkpoint(path, cfg.problem)?;
        let e = evaluate_groups(&ck.params, &groups, &cache, cfg.decode, cfg.seed)?;
        if e.skipped() > 0 {
            log::warn!("{name}: {} instances without reference were skipped", e.skipped());
        }
        println!("{name}: gaps {:?} overall {}", e.report.gaps, e.report.overall);
        emit(cfg.output_dir.join(format!("instances_{name}.csv")), |w| {
            write_instance_csv(&e.rows, w)
        })?;
        table.push((name, e.report));
    }
    emit(cfg.output_dir.join("gap_table.csv"), |w| write_gap_table(&table, w))
}

fn parse_bench(cfg: &ParseBenchConfig) -> Result<()> {
    let model = cfg.model.as_deref().map(|p| {
        log_input(p)?;
        Checkpoint::load(p)
    });
    let model = model.transpose()?;
    emit(cfg.output_dir.join("bench.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record([
            "name",
            "problem",
            "dimension",
            "min_routes",
            "published",
            "heuristic_length",
            "heuristic_gap",
            "model_length",
            "model_gap",
        ])?;
        for path in &cfg.files {
            log_input(path)?;
            let b = load_benchmark(path)?;
            let published = b.published_optimum();
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let heuristic = match cfg.solve {
                true => Some(b.rounded_length(solve_benchmark(&b, cfg.seed)?.tour.sequence())),
                false => None,
            };
            let policy = match &model {
                Some(ck) if ck.params.arch.problem_kind == b.problem && published.is_some() => {
                    Some(evaluate_benchmark(&b, &ck.params, cfg.decode, cfg.normalization, cfg.seed)?.length)
                }
                _ => None,
            };
            let g = |len: Option<f64>| len.zip(published).map(|(l, r)| gap(l, r));
            csv.write_record([
                b.name.clone(),
                b.problem.to_string(),
                b.dimension.to_string(),
                b.min_routes().map(|r| r.to_string()).unwrap_or_default(),
                opt(published),
                opt(heuristic),
                opt(g(heuristic)),
                opt(policy),
                opt(g(policy)),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })
}
