//! Decoding policies into tours and measuring gaps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{rollout, PolicyParams, RolloutMode};
use crate::problems::{augment8, sequence_length, Instance, Tour};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeStrategy {
    Greedy,
    /// Best of `k` sampled tours.
    Sample { k: usize },
}

/// How a policy turns an instance into one tour.
///
/// Written as `+`-joined tokens: `greedy` or `sample-K`, optionally with
/// `multistart` (one rollout per start node) and `aug8` (best over the eight
/// square symmetries).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSpec {
    pub strategy: DecodeStrategy,
    pub multistart: bool,
    pub augment8: bool,
}

impl DecodeSpec {
    pub const GREEDY: DecodeSpec = DecodeSpec {
        strategy: DecodeStrategy::Greedy,
        multistart: false,
        augment8: false,
    };

    pub fn greedy() -> Self {
        Self::GREEDY
    }

    pub fn multistart() -> Self {
        Self {
            multistart: true,
            ..Self::GREEDY
        }
    }

    pub fn sample(k: usize) -> Self {
        Self {
            strategy: DecodeStrategy::Sample { k },
            ..Self::GREEDY
        }
    }

    pub fn with_augment(mut self) -> Self {
        self.augment8 = true;
        self
    }

    fn modes(&self, instance: &Instance) -> Vec<RolloutMode> {
        let starts = instance.n_customers();
        match (self.strategy, self.multistart) {
            (DecodeStrategy::Greedy, false) => vec![RolloutMode::Greedy],
            (DecodeStrategy::Greedy, true) => vec![RolloutMode::MultiStart { starts, greedy: true }],
            (DecodeStrategy::Sample { k }, false) => vec![RolloutMode::Samples { count: k }],
            (DecodeStrategy::Sample { k }, true) => {
                vec![RolloutMode::MultiStart { starts, greedy: false }; k.div_ceil(starts)]
            }
        }
    }
}

impl std::fmt::Display for DecodeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.strategy {
            DecodeStrategy::Greedy => f.write_str("greedy")?,
            DecodeStrategy::Sample { k } => write!(f, "sample-{k}")?,
        }
        if self.multistart {
            f.write_str("+multistart")?;
        }
        if self.augment8 {
            f.write_str("+aug8")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for DecodeSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown decode spec `{s}`"));
        let mut tokens = s.split('+');
        let strategy = match tokens.next().ok_or_else(bad)? {
            "greedy" => DecodeStrategy::Greedy,
            t => {
                let k = t
                    .strip_prefix("sample-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(bad)?;
                DecodeStrategy::Sample { k }
            }
        };
        let mut spec = DecodeSpec {
            strategy,
            multistart: false,
            augment8: false,
        };
        for t in tokens {
            match t {
                "multistart" if !spec.multistart => spec.multistart = true,
                "aug8" if !spec.augment8 => spec.augment8 = true,
                _ => return Err(bad()),
            }
        }
        Ok(spec)
    }
}

impl Serialize for DecodeSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecodeSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Best tour found by `spec`, measured on `instance` itself. Under `aug8`
/// the policy sees the transformed coordinates; node indices are shared so
/// every candidate is a tour of the original instance. The first of equally
/// short candidates wins.
pub fn decode_best(instance: &Instance, params: &PolicyParams, spec: DecodeSpec, rng: &mut RngStream) -> Result<Tour> {
    let views = if spec.augment8 {
        augment8(instance)
    } else {
        vec![instance.clone()]
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    for view in &views {
        for mode in spec.modes(view) {
            for trace in rollout(view, params, mode, rng)? {
                let len = sequence_length(instance, trace.tour.sequence());
                if best.as_ref().map_or(true, |(b, _)| len < *b) {
                    best = Some((len, trace.tour.sequence().to_vec()));
                }
            }
        }
    }
    let (_, seq) = best.expect("at least one candidate");
    Tour::new(instance, seq)
}

/// Relative gap `(length - reference) / reference`.
pub fn gap(length: f64, reference: f64) -> f64 {
    (length - reference) / reference
}

/// Decodes every instance in parallel; instance `i` samples from the stream
/// derived from `(seed, i)`.
pub fn decode_all(
    instances: &[Instance],
    params: &PolicyParams,
    spec: DecodeSpec,
    seed: u64,
) -> Result<Vec<Tour>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| decode_best(inst, params, spec, &mut RngStream::derive(seed, i as u64)))
        .collect()
}

/// Mean gap of `params` over `instances` against `references`.
pub fn mean_gap(
    instances: &[Instance],
    references: &[f64],
    params: &PolicyParams,
    spec: DecodeSpec,
    seed: u64,
) -> Result<f64> {
    if instances.len() != references.len() || instances.is_empty() {
        return Err(Error::Config("need one reference per instance".into()));
    }
    let tours = decode_all(instances, params, spec, seed)?;
    let total: f64 = tours.iter().zip(references).map(|(t, &r)| gap(t.length(), r)).sum();
    Ok(total / instances.len() as f64)
}

/// Per-distribution average gaps and their plain mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub distributions: Vec<String>,
    pub gaps: Vec<f64>,
    pub overall: f64,
}

impl GapReport {
    pub fn new(distributions: Vec<String>, gaps: Vec<f64>) -> Self {
        let overall = if gaps.is_empty() {
            f64::NAN
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        };
        Self {
            distributions,
            gaps,
            overall,
        }
    }

    pub fn gap_of(&self, name: &str) -> Option<f64> {
        self.distributions.iter().position(|d| d == name).map(|i| self.gaps[i])
    }
}
