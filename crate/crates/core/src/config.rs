//! Run configuration: a flat `section.key = value` text file.
//!
//! ```text
//! # comment
//! model.d = 16
//! data.rho_train = 0.95
//! train.lr = 0.05
//! dict.init = kmeans
//! paths.train = data/train.jsonl
//! benchmark.seeds = 0,1,2,3,4
//! ```
//!
//! Unknown keys and duplicates are rejected. Relative paths resolve
//! against the directory holding the config file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::ConfoundedTaskSpec;
use crate::dictionary::{DictionarySource, DEFAULT_MAX_ITERS};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub spec: ConfoundedTaskSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: ConfoundedTaskSpec::default(),
            n_train: 2000,
            n_test: 4000,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_mul(2)
    }

    pub fn test_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictConfig {
    pub init: DictionarySource,
    pub max_iters: usize,
}

impl Default for DictConfig {
    fn default() -> Self {
        Self {
            init: DictionarySource::KMeans,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// One arm of the deconfounding benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Catt,
    /// CATT with randomly initialized dictionaries.
    CattRandom,
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "catt" => Ok(Self::Catt),
            "catt-random" => Ok(Self::CattRandom),
            other => Err(Error::Config(format!("unknown arm {other:?} (baseline|catt|catt-random)"))),
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::Baseline => "baseline",
            Arm::Catt => "catt",
            Arm::CattRandom => "catt-random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// Extra k-means CATT arms at these feature-dictionary sizes.
    pub dict_sizes: Vec<usize>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            arms: vec![Arm::Baseline, Arm::Catt, Arm::CattRandom],
            dict_sizes: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub dict: DictConfig,
    pub paths: PathsConfig,
    pub benchmark: BenchmarkConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} = {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s, line))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config(format!("line {line}: expected `section.key = value`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            cfg.set(key, value, line, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    fn set(&mut self, key: &str, v: &str, line: usize, base: Option<&Path>) -> Result<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            Some(match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            })
        };
        let m = &mut self.model;
        let s = &mut self.data.spec;
        match key {
            "model.enc_layers" => m.enc_layers = parse_value(key, v, line)?,
            "model.dec_layers" => m.dec_layers = parse_value(key, v, line)?,
            "model.d" => m.d = parse_value(key, v, line)?,
            "model.heads" => m.heads = parse_value(key, v, line)?,
            "model.ffn_hidden" => m.ffn_hidden = parse_value(key, v, line)?,
            "model.share_params" => m.share_params = parse_value(key, v, line)?,
            "model.init_scale" => m.init_scale = parse_value(key, v, line)?,
            "data.vocab_in" => s.vocab_in = parse_value(key, v, line)?,
            "data.vocab_out" => s.vocab_out = parse_value(key, v, line)?,
            "data.causal_per_label" => s.causal_per_label = parse_value(key, v, line)?,
            "data.rho_train" => s.rho_train = parse_value(key, v, line)?,
            "data.rho_test" => s.rho_test = parse_value(key, v, line)?,
            "data.seq_len" => s.seq_len = parse_value(key, v, line)?,
            "data.ctx_len" => s.ctx_len = parse_value(key, v, line)?,
            "data.noise_rate" => s.noise_rate = parse_value(key, v, line)?,
            "data.families" => s.families = parse_value(key, v, line)?,
            "data.n_train" => self.data.n_train = parse_value(key, v, line)?,
            "data.n_test" => self.data.n_test = parse_value(key, v, line)?,
            "data.seed" => self.data.seed = parse_value(key, v, line)?,
            "train.lr" => self.train.lr = parse_value(key, v, line)?,
            "train.epochs" => self.train.epochs = parse_value(key, v, line)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v, line)?,
            "train.seed" => self.train.seed = parse_value(key, v, line)?,
            "dict.k_img" => m.k_img = parse_value(key, v, line)?,
            "dict.k_txt" => m.k_txt = parse_value(key, v, line)?,
            "dict.init" => self.dict.init = parse_value(key, v, line)?,
            "dict.max_iters" => self.dict.max_iters = parse_value(key, v, line)?,
            "paths.train" => self.paths.train = path(v),
            "paths.test" => self.paths.test = path(v),
            "paths.checkpoint" => self.paths.checkpoint = path(v),
            "paths.metrics" => self.paths.metrics = path(v),
            "benchmark.seeds" => self.benchmark.seeds = parse_list(key, v, line)?,
            "benchmark.arms" => self.benchmark.arms = parse_list(key, v, line)?,
            "benchmark.dict_sizes" => self.benchmark.dict_sizes = parse_list(key, v, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
        }
        Ok(())
    }

    /// Copies the data vocabulary into the model and checks every section.
    pub fn validate(&mut self) -> Result<()> {
        self.model.vocab_in = self.data.spec.vocab_in;
        self.model.vocab_out = self.data.spec.vocab_out;
        self.model.validate()?;
        self.data.spec.validate()?;
        self.train.validate()?;
        if self.dict.max_iters == 0 {
            return Err(Error::Config("dict.max_iters must be positive".into()));
        }
        if self.benchmark.dict_sizes.contains(&0) {
            return Err(Error::Config("benchmark.dict_sizes entries must be positive".into()));
        }
        Ok(())
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let s = &self.data.spec;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.enc_layers", m.enc_layers.to_string());
        kv("model.dec_layers", m.dec_layers.to_string());
        kv("model.d", m.d.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.ffn_hidden", m.ffn_hidden.to_string());
        kv("model.share_params", m.share_params.to_string());
        kv("model.init_scale", format!("{:?}", m.init_scale));
        kv("data.vocab_in", s.vocab_in.to_string());
        kv("data.vocab_out", s.vocab_out.to_string());
        kv("data.causal_per_label", s.causal_per_label.to_string());
        kv("data.rho_train", format!("{:?}", s.rho_train));
        kv("data.rho_test", format!("{:?}", s.rho_test));
        kv("data.seq_len", s.seq_len.to_string());
        kv("data.ctx_len", s.ctx_len.to_string());
        kv("data.noise_rate", format!("{:?}", s.noise_rate));
        kv("data.families", s.families.to_string());
        kv("data.n_train", self.data.n_train.to_string());
        kv("data.n_test", self.data.n_test.to_string());
        kv("data.seed", self.data.seed.to_string());
        kv("train.lr", format!("{:?}", self.train.lr));
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.seed", self.train.seed.to_string());
        kv("dict.k_img", m.k_img.to_string());
        kv("dict.k_txt", m.k_txt.to_string());
        kv("dict.init", self.dict.init.to_string());
        kv("dict.max_iters", self.dict.max_iters.to_string());
        for (k, p) in [
            ("paths.train", &self.paths.train),
            ("paths.test", &self.paths.test),
            ("paths.checkpoint", &self.paths.checkpoint),
            ("paths.metrics", &self.paths.metrics),
        ] {
            if let Some(p) = p {
                kv(k, p.display().to_string());
            }
        }
        kv("benchmark.seeds", join(&self.benchmark.seeds));
        kv("benchmark.arms", join(&self.benchmark.arms));
        if !self.benchmark.dict_sizes.is_empty() {
            kv("benchmark.dict_sizes", join(&self.benchmark.dict_sizes));
        }
        out
    }
}
