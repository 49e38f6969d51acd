//! Plain-text `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Lists are comma separated; seeds
//! also accept a half-open range `a..b`. Pairs such as `eta` are written
//! `0.9, 0.3`. Every key has a default, so an empty file is a valid OU2
//! MF-NPE configuration.

use mfsbi_core::algorithms::RoundData;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value { key: key.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Ou2,
    Ou3,
    Ou4,
    Ou2Perturbed,
    Slcp,
    Sir,
    Blob,
}

impl TaskId {
    pub const ALL: [TaskId; 7] =
        [TaskId::Ou2, TaskId::Ou3, TaskId::Ou4, TaskId::Ou2Perturbed, TaskId::Slcp, TaskId::Sir, TaskId::Blob];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Ou2 => "ou2",
            TaskId::Ou3 => "ou3",
            TaskId::Ou4 => "ou4",
            TaskId::Ou2Perturbed => "ou2-perturbed",
            TaskId::Slcp => "slcp",
            TaskId::Sir => "sir",
            TaskId::Blob => "blob",
        }
    }
}

impl FromStr for TaskId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected one of ou2, ou3, ou4, ou2-perturbed, slcp, sir, blob)"))
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Npe,
    MfNpe,
    MfNpeChain,
    Tsnpe,
    MfTsnpe,
    AMfTsnpe,
    MfAbc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Npe,
        Algorithm::MfNpe,
        Algorithm::MfNpeChain,
        Algorithm::Tsnpe,
        Algorithm::MfTsnpe,
        Algorithm::AMfTsnpe,
        Algorithm::MfAbc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Npe => "npe",
            Algorithm::MfNpe => "mf-npe",
            Algorithm::MfNpeChain => "mf-npe-chain",
            Algorithm::Tsnpe => "tsnpe",
            Algorithm::MfTsnpe => "mf-tsnpe",
            Algorithm::AMfTsnpe => "a-mf-tsnpe",
            Algorithm::MfAbc => "mf-abc",
        }
    }

    /// Trained once per (budget, seed) and evaluated at every observation.
    pub fn is_amortized(self) -> bool {
        matches!(self, Algorithm::Npe | Algorithm::MfNpe | Algorithm::MfNpeChain)
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, Algorithm::Tsnpe | Algorithm::MfTsnpe | Algorithm::AMfTsnpe)
    }

    pub fn uses_low_fidelity(self) -> bool {
        !matches!(self, Algorithm::Npe | Algorithm::Tsnpe)
    }

    /// Whether the result has a density for NLTP.
    pub fn has_density(self) -> bool {
        self != Algorithm::MfAbc
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            format!("unknown algorithm `{s}` (expected npe, mf-npe, mf-npe-chain, tsnpe, mf-tsnpe, a-mf-tsnpe or mf-abc)")
        })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    C2st,
    Mmd,
    Nltp,
    Nrmse,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::C2st => "c2st",
            Metric::Mmd => "mmd",
            Metric::Nltp => "nltp",
            Metric::Nrmse => "nrmse",
        }
    }

    /// Needs reference posterior samples.
    pub fn needs_reference(self) -> bool {
        matches!(self, Metric::C2st | Metric::Mmd)
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "c2st" => Ok(Metric::C2st),
            "mmd" => Ok(Metric::Mmd),
            "nltp" => Ok(Metric::Nltp),
            "nrmse" => Ok(Metric::Nrmse),
            _ => Err(format!("unknown metric `{s}` (expected c2st, mmd, nltp or nrmse)")),
        }
    }
}

/// High-fidelity budgets used unless `custom_grid = true`.
pub const PAPER_GRID: [usize; 5] = [50, 100, 1_000, 10_000, 100_000];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskId,
    pub algorithm: Algorithm,
    pub lf_budget: usize,
    /// Middle level of `mf-npe-chain`.
    pub mid_budget: usize,
    pub hf_budgets: Vec<usize>,
    pub custom_grid: bool,
    pub seeds: Vec<u64>,
    pub observations: usize,
    /// Seed of the observation set, shared by every run seed.
    pub observation_seed: u64,
    pub metrics: Vec<Metric>,
    pub output: PathBuf,
    /// Posterior and reference draws per observation for sample metrics.
    pub posterior_samples: usize,
    pub rounds: usize,
    pub epsilon: f64,
    pub n_mc: usize,
    pub round_data: RoundData,
    pub b_fraction: f64,
    pub ensemble_size: usize,
    pub delta: f64,
    pub invert: bool,
    pub eta: (f64, f64),
    pub epsilon_abc: (f64, f64),
    pub abc_pilot: usize,
    pub transforms: usize,
    pub hidden_units: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Kernel bandwidth on I/N for SIR reference posteriors.
    pub sir_bandwidth: f64,
    /// Side of blob images.
    pub blob_side: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Ou2,
            algorithm: Algorithm::MfNpe,
            lf_budget: 10_000,
            mid_budget: 1_000,
            hf_budgets: vec![50, 100, 1_000],
            custom_grid: false,
            seeds: (0..10).collect(),
            observations: 30,
            observation_seed: 0,
            metrics: vec![Metric::C2st],
            output: PathBuf::from("results"),
            posterior_samples: 10_000,
            rounds: 5,
            epsilon: 1e-6,
            n_mc: 10_000,
            round_data: RoundData::Accumulate,
            b_fraction: 0.2,
            ensemble_size: 5,
            delta: 0.0,
            invert: false,
            eta: (0.9, 0.3),
            epsilon_abc: (1.0, 1.0),
            abc_pilot: 10_000,
            transforms: 5,
            hidden_units: 50,
            batch_size: 200,
            learning_rate: 5e-4,
            patience: 20,
            max_epochs: 2000,
            sir_bandwidth: 0.01,
            blob_side: 32,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| bad(key, format!("cannot parse `{}`", v.trim())))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_num(key, s)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64), ConfigError> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(bad(key, "expected two comma-separated numbers")),
    }
}

fn parse_seeds(key: &str, v: &str) -> Result<Vec<u64>, ConfigError> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse_num(key, a)?, parse_num(key, b)?);
        if a >= b {
            return Err(bad(key, "empty range"));
        }
        return Ok((a..b).collect());
    }
    parse_list(key, v)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(bad(key, format!("expected true or false, got `{other}`"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parse a configuration file; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override, e.g. from `--set`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "task" => self.task = v.parse().map_err(|e: String| bad(key, e))?,
            "algorithm" => self.algorithm = v.parse().map_err(|e: String| bad(key, e))?,
            "lf_budget" => self.lf_budget = parse_num(key, v)?,
            "mid_budget" => self.mid_budget = parse_num(key, v)?,
            "hf_budgets" => self.hf_budgets = parse_list(key, v)?,
            "custom_grid" => self.custom_grid = parse_bool(key, v)?,
            "seeds" => self.seeds = parse_seeds(key, v)?,
            "observations" => self.observations = parse_num(key, v)?,
            "observation_seed" => self.observation_seed = parse_num(key, v)?,
            "metrics" => {
                self.metrics = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().map_err(|e: String| bad(key, e)))
                    .collect::<Result<_, _>>()?
            }
            "output" => self.output = PathBuf::from(v),
            "posterior_samples" => self.posterior_samples = parse_num(key, v)?,
            "rounds" => self.rounds = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "n_mc" => self.n_mc = parse_num(key, v)?,
            "round_data" => {
                self.round_data = match v {
                    "accumulate" => RoundData::Accumulate,
                    "last" => RoundData::Last,
                    _ => return Err(bad(key, "expected accumulate or last")),
                }
            }
            "b_fraction" => self.b_fraction = parse_num(key, v)?,
            "ensemble_size" => self.ensemble_size = parse_num(key, v)?,
            "delta" => self.delta = parse_num(key, v)?,
            "invert" => self.invert = parse_bool(key, v)?,
            "eta" => self.eta = parse_pair(key, v)?,
            "epsilon_abc" => self.epsilon_abc = parse_pair(key, v)?,
            "abc_pilot" => self.abc_pilot = parse_num(key, v)?,
            "transforms" => self.transforms = parse_num(key, v)?,
            "hidden_units" => self.hidden_units = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "patience" => self.patience = parse_num(key, v)?,
            "max_epochs" => self.max_epochs = parse_num(key, v)?,
            "sir_bandwidth" => self.sir_bandwidth = parse_num(key, v)?,
            "blob_side" => self.blob_side = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Apply `key=value` strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Invalid(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        if self.hf_budgets.is_empty() || self.hf_budgets.contains(&0) {
            return inv("hf_budgets must be a non-empty list of positive budgets".into());
        }
        if !self.custom_grid {
            if let Some(b) = self.hf_budgets.iter().find(|b| !PAPER_GRID.contains(b)) {
                return inv(format!("hf budget {b} is outside the default grid {PAPER_GRID:?}; set custom_grid = true"));
            }
        }
        if self.algorithm.uses_low_fidelity() && self.algorithm != Algorithm::MfAbc && self.lf_budget == 0 {
            return inv(format!("{} needs lf_budget > 0", self.algorithm));
        }
        if self.algorithm == Algorithm::MfNpeChain && self.mid_budget == 0 {
            return inv("mf-npe-chain needs mid_budget > 0".into());
        }
        if self.seeds.is_empty() || self.observations == 0 || self.metrics.is_empty() {
            return inv("seeds, observations and metrics must be non-empty".into());
        }
        if self.posterior_samples < 10 {
            return inv("posterior_samples must be at least 10".into());
        }
        if self.algorithm.is_sequential() {
            if self.rounds == 0 {
                return inv("rounds must be positive".into());
            }
            if let Some(b) = self.hf_budgets.iter().find(|&&b| b % self.rounds != 0 || b < self.rounds) {
                return inv(format!("hf budget {b} is not divisible into {} rounds", self.rounds));
            }
        }
        if self.task != TaskId::Ou2Perturbed && (self.delta != 0.0 || self.invert) {
            return inv("delta and invert only apply to ou2-perturbed".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return inv("delta must be non-negative".into());
        }
        if self.transforms == 0 || self.hidden_units == 0 || self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0
        {
            return inv("network and training sizes must be positive".into());
        }
        if self.task == TaskId::Blob && (self.blob_side == 0 || 256 % self.blob_side != 0 || self.blob_side < 8) {
            return inv("blob_side must be a divisor of 256 of at least 8".into());
        }
        Ok(())
    }

    /// Canonical text with every key, in a fixed order. The output
    /// directory is left out so that a configuration hashes the same
    /// wherever it writes.
    pub fn canonical(&self) -> String {
        let mut m = BTreeMap::new();
        m.insert("task", self.task.to_string());
        m.insert("algorithm", self.algorithm.to_string());
        m.insert("lf_budget", self.lf_budget.to_string());
        m.insert("mid_budget", self.mid_budget.to_string());
        m.insert("hf_budgets", join(&self.hf_budgets));
        m.insert("custom_grid", self.custom_grid.to_string());
        m.insert("seeds", join(&self.seeds));
        m.insert("observations", self.observations.to_string());
        m.insert("observation_seed", self.observation_seed.to_string());
        m.insert("metrics", self.metrics.iter().map(|x| x.as_str()).collect::<Vec<_>>().join(","));
        m.insert("posterior_samples", self.posterior_samples.to_string());
        m.insert("rounds", self.rounds.to_string());
        m.insert("epsilon", format!("{:e}", self.epsilon));
        m.insert("n_mc", self.n_mc.to_string());
        m.insert(
            "round_data",
            match self.round_data {
                RoundData::Accumulate => "accumulate".into(),
                RoundData::Last => "last".into(),
            },
        );
        m.insert("b_fraction", self.b_fraction.to_string());
        m.insert("ensemble_size", self.ensemble_size.to_string());
        m.insert("delta", self.delta.to_string());
        m.insert("invert", self.invert.to_string());
        m.insert("eta", format!("{},{}", self.eta.0, self.eta.1));
        m.insert("epsilon_abc", format!("{},{}", self.epsilon_abc.0, self.epsilon_abc.1));
        m.insert("abc_pilot", self.abc_pilot.to_string());
        m.insert("transforms", self.transforms.to_string());
        m.insert("hidden_units", self.hidden_units.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("learning_rate", format!("{:e}", self.learning_rate));
        m.insert("patience", self.patience.to_string());
        m.insert("max_epochs", self.max_epochs.to_string());
        m.insert("sir_bandwidth", self.sir_bandwidth.to_string());
        m.insert("blob_side", self.blob_side.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Key-value view of [`canonical`](Self::canonical) for manifests.
    pub fn settings(&self) -> BTreeMap<String, String> {
        self.canonical()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::parse("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn keys_and_lists() {
        let c = ExperimentConfig::parse(
            "task = slcp\nalgorithm = a-mf-tsnpe\nhf_budgets = 100, 1000\nseeds = 2..5\neta = 0.5, 0.25 # comment\ninvert = no\nmetrics = c2st,nltp",
        )
        .unwrap();
        assert_eq!(c.task, TaskId::Slcp);
        assert_eq!(c.algorithm, Algorithm::AMfTsnpe);
        assert_eq!(c.hf_budgets, vec![100, 1000]);
        assert_eq!(c.seeds, vec![2, 3, 4]);
        assert_eq!(c.eta, (0.5, 0.25));
        assert_eq!(c.metrics, vec![Metric::C2st, Metric::Nltp]);
    }

    #[test]
    fn errors_name_the_problem() {
        assert_eq!(ExperimentConfig::parse("nonsense"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(ExperimentConfig::parse("colour = red"), Err(ConfigError::UnknownKey("colour".into())));
        assert!(matches!(ExperimentConfig::parse("task = ou9"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("eta = 1"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn grid_and_budget_rules() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.hf_budgets = vec![200];
        assert!(c.validate().is_err());
        c.custom_grid = true;
        c.validate().unwrap();
        c.hf_budgets = vec![0];
        assert!(c.validate().is_err());
        let mut s = ExperimentConfig { algorithm: Algorithm::MfTsnpe, hf_budgets: vec![50], rounds: 3, ..Default::default() };
        assert!(s.validate().is_err());
        s.rounds = 5;
        s.validate().unwrap();
    }

    #[test]
    fn hash_ignores_output_and_formatting() {
        let a = ExperimentConfig::parse("task=ou3\noutput = a").unwrap();
        let b = ExperimentConfig::parse("  task = ou3 \n output=b\nlf_budget = 10000").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::parse("task=ou3\nlf_budget=1000").unwrap();
        assert_ne!(a.hash(), c.hash());
        // canonical text parses back to the same configuration
        let mut back = ExperimentConfig::parse(&a.canonical()).unwrap();
        back.output = a.output.clone();
        assert_eq!(back, a);
    }
}
