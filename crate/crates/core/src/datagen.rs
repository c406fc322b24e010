//! Synthetic confounded sequence-classification tasks.
//!
//! A hidden confounder decides which spurious token gets planted next to the
//! label's causal token. In the train split the spurious token is the
//! label's own partner; in the test split it is an anti-partner, so a model
//! that leaned on the shortcut fails exactly on the spurious-present subset.
//!
//! Input vocabulary layout (`L` labels, `m` causal tokens per label):
//!
//! | ids                     | role                                  |
//! |-------------------------|---------------------------------------|
//! | `0 .. L·m`              | causal tokens, label `l` owns `l·m ..` |
//! | `L·m .. L·m + L`        | spurious partner of each label        |
//! | `L·m + L .. vocab_in−1` | plain noise tokens                    |
//! | `vocab_in − 1`          | padding                               |
//!
//! Context tokens live in the output alphabet: the first `F` ids are
//! question-family cues (label `y` belongs to family `y·F/L`), the rest are
//! context filler.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfoundedTaskSpec {
    pub vocab_in: usize,
    /// Number of labels; also the context alphabet size.
    pub vocab_out: usize,
    pub causal_per_label: usize,
    pub rho_train: f64,
    pub rho_test: f64,
    pub seq_len: usize,
    pub ctx_len: usize,
    /// Probability a filler feature position holds a random noise token
    /// rather than padding.
    pub noise_rate: f64,
    /// Number of question families cued in the context.
    pub families: usize,
}

impl Default for ConfoundedTaskSpec {
    fn default() -> Self {
        Self {
            vocab_in: 32,
            vocab_out: 4,
            causal_per_label: 1,
            rho_train: 0.95,
            rho_test: 0.05,
            seq_len: 6,
            ctx_len: 3,
            noise_rate: 1.0,
            families: 2,
        }
    }
}

impl ConfoundedTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_out == 0 || self.causal_per_label == 0 || self.seq_len == 0 || self.ctx_len == 0 {
            return bad("label count, causal tokens per label and lengths must be positive".into());
        }
        for (name, rho) in [("rho_train", self.rho_train), ("rho_test", self.rho_test)] {
            if !(0.0..=1.0).contains(&rho) {
                return bad(format!("{name} must be in [0, 1], got {rho}"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate must be in [0, 1], got {}", self.noise_rate));
        }
        if self.vocab_in < self.noise_start() + 1 {
            return bad(format!(
                "vocab_in {} too small: need {} causal + {} spurious + noise + padding ids",
                self.vocab_in,
                self.vocab_out * self.causal_per_label,
                self.vocab_out
            ));
        }
        if self.families == 0 || self.families > self.vocab_out {
            return bad(format!("families must be in 1..={}", self.vocab_out));
        }
        if self.seq_len < 2 && self.rho_train.max(self.rho_test) > 0.0 {
            return bad("planting a spurious token needs seq_len >= 2".into());
        }
        Ok(())
    }

    pub fn labels(&self) -> usize {
        self.vocab_out
    }

    pub fn causal_tokens(&self, label: usize) -> std::ops::Range<usize> {
        label * self.causal_per_label..(label + 1) * self.causal_per_label
    }

    /// Label whose causal token this is, if any.
    pub fn causal_label(&self, token: usize) -> Option<usize> {
        (token < self.vocab_out * self.causal_per_label).then(|| token / self.causal_per_label)
    }

    pub fn spurious_token(&self, label: usize) -> usize {
        self.vocab_out * self.causal_per_label + label
    }

    /// Label whose spurious partner this is, if any.
    pub fn spurious_label(&self, token: usize) -> Option<usize> {
        let start = self.vocab_out * self.causal_per_label;
        (start..start + self.vocab_out).contains(&token).then(|| token - start)
    }

    fn noise_start(&self) -> usize {
        self.vocab_out * (self.causal_per_label + 1)
    }

    pub fn pad_token(&self) -> usize {
        self.vocab_in - 1
    }

    pub fn family(&self, label: usize) -> usize {
        label * self.families / self.vocab_out
    }

    /// The label whose spurious token is planted on test samples of `label`.
    pub fn anti_partner(&self, label: usize) -> usize {
        let l = self.vocab_out;
        if l == 1 {
            0
        } else if l.is_multiple_of(2) {
            label ^ 1
        } else {
            (label + 1) % l
        }
    }

    fn rho(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.rho_train,
            Split::Test => self.rho_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Label whose spurious token the confounder selects.
    pub confounder: usize,
    /// Whether the spurious token was planted.
    pub spurious: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<usize>,
    pub context: Vec<usize>,
    pub label: usize,
    pub meta: SampleMeta,
}

/// Draws `n` samples; labels are balanced by construction.
pub fn generate(spec: &ConfoundedTaskSpec, n: usize, split: Split, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let salt = match split {
        Split::Train => 0x7261_696e,
        Split::Test => 0x7465_7374,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    let labels = spec.labels();
    let mut out: Vec<Sample> = (0..n)
        .map(|i| draw_one(spec, i % labels, split, &mut rng))
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

fn draw_one(spec: &ConfoundedTaskSpec, label: usize, split: Split, rng: &mut ChaCha8Rng) -> Sample {
    let confounder = match split {
        Split::Train => label,
        Split::Test => spec.anti_partner(label),
    };
    let spurious = rng.random::<f64>() < spec.rho(split);

    let mut positions: Vec<usize> = (0..spec.seq_len).collect();
    positions.shuffle(rng);
    let mut features = vec![spec.pad_token(); spec.seq_len];
    let causal = spec.causal_tokens(label);
    features[positions[0]] = rng.random_range(causal);
    let mut filled = 1;
    if spurious {
        features[positions[1]] = spec.spurious_token(confounder);
        filled = 2;
    }
    let noise = spec.noise_start()..spec.pad_token();
    for &p in &positions[filled..] {
        if rng.random::<f64>() < spec.noise_rate {
            features[p] = rng.random_range(noise.clone());
        }
    }

    let cue = spec.family(label);
    let filler = spec.families..spec.vocab_out;
    let mut context: Vec<usize> = (0..spec.ctx_len)
        .map(|i| {
            if i == 0 || filler.is_empty() {
                cue
            } else {
                rng.random_range(filler.clone())
            }
        })
        .collect();
    context.shuffle(rng);

    Sample {
        features,
        context,
        label,
        meta: SampleMeta { confounder, spurious },
    }
}

/// Fraction of samples whose features contain their label's spurious partner.
pub fn partner_rate(spec: &ConfoundedTaskSpec, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = samples
        .iter()
        .filter(|s| s.features.contains(&spec.spurious_token(s.label)))
        .count();
    hits as f64 / samples.len() as f64
}

/// The shortcut classifier: predicts the label of the first spurious token
/// present, else label 0.
pub fn cooccurrence_predict(spec: &ConfoundedTaskSpec, sample: &Sample) -> usize {
    sample
        .features
        .iter()
        .find_map(|&t| spec.spurious_label(t))
        .unwrap_or(0)
}

/// Reads the label off the causal token alone.
pub fn causal_probe_predict(spec: &ConfoundedTaskSpec, sample: &Sample) -> Option<usize> {
    sample.features.iter().find_map(|&t| spec.causal_label(t))
}

pub fn write_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::Input(e.to_string()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::checkpoint::write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Checks ids against the task's alphabets.
pub fn validate_samples(samples: &[Sample], vocab_in: usize, vocab_out: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.features.is_empty() || s.context.is_empty() {
            return Err(Error::Input(format!("sample {i}: empty sequence")));
        }
        if let Some(t) = s.features.iter().find(|&&t| t >= vocab_in) {
            return Err(Error::Input(format!("sample {i}: feature id {t} >= {vocab_in}")));
        }
        if let Some(t) = s.context.iter().find(|&&t| t >= vocab_out) {
            return Err(Error::Input(format!("sample {i}: context id {t} >= {vocab_out}")));
        }
        if s.label >= vocab_out {
            return Err(Error::Input(format!("sample {i}: label {} >= {vocab_out}", s.label)));
        }
    }
    Ok(())
}
