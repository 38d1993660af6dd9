//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::train::{Phase, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneChoice {
    Toy,
    VitB32,
}

impl FromStr for BackboneChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "toy" => Ok(BackboneChoice::Toy),
            "vit-b32" => Ok(BackboneChoice::VitB32),
            other => Err(format!("unknown backbone {other:?} (expected toy or vit-b32)")),
        }
    }
}

impl BackboneChoice {
    pub fn config(self, seed: u64) -> BackboneConfig {
        match self {
            BackboneChoice::Toy => BackboneConfig::toy(seed),
            BackboneChoice::VitB32 => BackboneConfig {
                seed,
                ..BackboneConfig::vit_b32()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus_root: Option<PathBuf>,
    pub train_triplets: Option<PathBuf>,
    pub val_pairs: Option<PathBuf>,
    /// Starting parameters; fresh initialisation when absent.
    pub init_checkpoint: Option<PathBuf>,
    pub backbone: BackboneChoice,
    pub learning_rates: [f64; 3],
    pub iterations: [usize; 3],
    pub weight_decay: f64,
    pub cosine_period_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub log_level: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p: Vec<TrainConfig> = Phase::ALL.iter().map(|&ph| TrainConfig::for_phase(ph)).collect();
        RunConfig {
            corpus_root: None,
            train_triplets: None,
            val_pairs: None,
            init_checkpoint: None,
            backbone: BackboneChoice::VitB32,
            learning_rates: [p[0].learning_rate, p[1].learning_rate, p[2].learning_rate],
            iterations: [p[0].max_iters, p[1].max_iters, p[2].max_iters],
            weight_decay: p[0].weight_decay,
            cosine_period_iters: p[0].cosine_period_iters,
            batch_size: p[0].batch_size,
            seed: 0,
            checkpoint_every: p[0].checkpoint_every,
            log_level: "info".into(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "corpus_root",
    "train_triplets",
    "val_pairs",
    "init_checkpoint",
    "backbone",
    "lr_phase1",
    "lr_phase2",
    "lr_phase3",
    "iters_phase1",
    "iters_phase2",
    "iters_phase3",
    "weight_decay",
    "cosine_period_iters",
    "batch_size",
    "seed",
    "checkpoint_every",
    "log_level",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    /// Sets one key. Errors name the key; callers add location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let path = || Some(PathBuf::from(value));
        match key {
            "corpus_root" => self.corpus_root = path(),
            "train_triplets" => self.train_triplets = path(),
            "val_pairs" => self.val_pairs = path(),
            "init_checkpoint" => self.init_checkpoint = path(),
            "backbone" => self.backbone = value.parse()?,
            "lr_phase1" => self.learning_rates[0] = parse(key, value)?,
            "lr_phase2" => self.learning_rates[1] = parse(key, value)?,
            "lr_phase3" => self.learning_rates[2] = parse(key, value)?,
            "iters_phase1" => self.iterations[0] = parse(key, value)?,
            "iters_phase2" => self.iterations[1] = parse(key, value)?,
            "iters_phase3" => self.iterations[2] = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "cosine_period_iters" => self.cosine_period_iters = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "log_level" => self.log_level = value.to_owned(),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim()).map_err(Error::Config)
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let i = phase.number() as usize - 1;
        TrainConfig {
            phase,
            learning_rate: self.learning_rates[i],
            weight_decay: self.weight_decay,
            cosine_period_iters: self.cosine_period_iters,
            batch_size: self.batch_size,
            max_iters: self.iterations[i],
            seed: self.seed.wrapping_add(i as u64),
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for ph in Phase::ALL {
            self.train_config(ph).validate()?;
        }
        Ok(())
    }

    /// Checks that every configured input file exists.
    pub fn validate_paths(&self) -> Result<()> {
        if let Some(root) = &self.corpus_root {
            if !root.is_dir() {
                return Err(Error::data(format!("corpus root {} is not a directory", root.display())));
            }
        }
        for p in [&self.train_triplets, &self.val_pairs, &self.init_checkpoint].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::data(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

pub fn parse_config(path: &Path, text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(err)?;
    }
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(path, &text)
}
