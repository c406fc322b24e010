//! Toy Transformer+CATT encoder/decoder for sequence-pair classification.
//!
//! The encoder reads feature tokens, the decoder reads context tokens and
//! cross-attends to the encoder. Every layer carries two streams: the
//! in-sample (IS) stream and the cross-sample (CS) stream. The first layer of
//! each side attends over the sample (IS) and over a global dictionary (CS);
//! deeper layers run the two streams in parallel through the same block
//! weights. The pooled decoder outputs `(Ẑ, X̂)` are concatenated and fed to
//! a linear predictor followed by a softmax.
//!
//! In `Baseline` mode the CS stream and both dictionaries do not exist and
//! the predictor sees `Ẑ` only.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{cs_att, is_att, multi_head, CattBlockParams};
use crate::autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
use crate::datagen::Sample;
use crate::dictionary::{self, DictionarySource, GlobalDictionary, KMeansResult};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::{argmax, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Catt,
    Baseline,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "catt" => Ok(Self::Catt),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Config(format!("unknown mode {other:?} (catt|baseline)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Catt => "catt",
            Mode::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub k_img: usize,
    pub k_txt: usize,
    pub vocab_in: usize,
    pub vocab_out: usize,
    pub share_params: bool,
    /// Half-width of the uniform init of embedding tables and random dictionaries.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d: 16,
            heads: 2,
            ffn_hidden: 64,
            k_img: 16,
            k_txt: 4,
            vocab_in: 32,
            vocab_out: 4,
            share_params: true,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d", self.d),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("k_img", self.k_img),
            ("k_txt", self.k_txt),
            ("vocab_in", self.vocab_in),
            ("vocab_out", self.vocab_out),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d = {} is not a multiple of model.heads = {}",
                self.d, self.heads
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("model.init_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder streams `[V_I]_E` and `[V_C]_E`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub is_stream: Var,
    pub cs_stream: Option<Var>,
}

/// Pooled decoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub z_hat: Var,
    pub x_hat: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CattModel {
    pub config: ModelConfig,
    pub mode: Mode,
    pub store: ParamStore,
    pub feat_embed: ParamId,
    pub ctx_embed: ParamId,
    pub encoder: Vec<CattBlockParams>,
    pub dec_self: Vec<CattBlockParams>,
    /// Cross-attention blocks of decoder layers 2.. (one fewer than `dec_self`).
    pub dec_cross: Vec<CattBlockParams>,
    pub feat_dict: Option<GlobalDictionary>,
    pub ctx_dict: Option<GlobalDictionary>,
    pub predictor_w: ParamId,
    pub predictor_b: ParamId,
}

impl CattModel {
    /// Randomly initialized model. Dictionaries start random; see
    /// [`CattModel::init_dictionaries_kmeans`].
    pub fn new(config: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let s = config.init_scale;
        let feat_embed = store.add("embed.features", Tensor::uniform(&[config.vocab_in, d], s, &mut rng))?;
        let ctx_embed = store.add("embed.context", Tensor::uniform(&[config.vocab_out, d], s, &mut rng))?;
        let shared = config.share_params || mode == Mode::Baseline;
        let block = |store: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            CattBlockParams::with_hidden(store, &name, d, config.heads, config.ffn_hidden, shared, rng)
        };
        let encoder = (0..config.enc_layers)
            .map(|i| block(&mut store, format!("enc{i}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_self = (0..config.dec_layers)
            .map(|i| block(&mut store, format!("dec{i}.self"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_cross = (1..config.dec_layers)
            .map(|i| block(&mut store, format!("dec{i}.cross"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (feat_dict, ctx_dict) = match mode {
            Mode::Catt => {
                let fd = dictionary::random_entries(config.k_img, d, s, seed ^ 0xf00d)?;
                let cd = dictionary::random_entries(config.k_txt, d, s, seed ^ 0xbeef)?;
                (
                    Some(GlobalDictionary::from_tensor(&mut store, "dict.features", fd, DictionarySource::Random)?),
                    Some(GlobalDictionary::from_tensor(&mut store, "dict.context", cd, DictionarySource::Random)?),
                )
            }
            Mode::Baseline => (None, None),
        };
        let pred_in = match mode {
            Mode::Catt => 2 * d,
            Mode::Baseline => d,
        };
        let scale = (6.0 / (pred_in + config.vocab_out) as f64).sqrt();
        let predictor_w = store.add("predictor.w", Tensor::uniform(&[pred_in, config.vocab_out], scale, &mut rng))?;
        let predictor_b = store.add("predictor.b", Tensor::zeros(&[1, config.vocab_out]))?;
        Ok(Self {
            config,
            mode,
            store,
            feat_embed,
            ctx_embed,
            encoder,
            dec_self,
            dec_cross,
            feat_dict,
            ctx_dict,
            predictor_w,
            predictor_b,
        })
    }

    /// Replaces both dictionaries with K-means centroids over the current
    /// embeddings of every token occurrence in `samples`.
    pub fn init_dictionaries_kmeans(
        &mut self,
        samples: &[Sample],
        max_iters: usize,
        seed: u64,
    ) -> Result<(KMeansResult, KMeansResult)> {
        let (Some(fd), Some(cd)) = (self.feat_dict.clone(), self.ctx_dict.clone()) else {
            return Err(Error::Config("baseline models have no dictionaries".into()));
        };
        let feat_ids: Vec<usize> = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
        let ctx_ids: Vec<usize> = samples.iter().flat_map(|s| s.context.iter().copied()).collect();
        let feat_points = self.store.value(self.feat_embed).gather_rows(&feat_ids)?;
        let ctx_points = self.store.value(self.ctx_embed).gather_rows(&ctx_ids)?;
        let fr = dictionary::kmeans(&feat_points, fd.size(), max_iters, seed)?;
        let cr = dictionary::kmeans(&ctx_points, cd.size(), max_iters, seed.wrapping_add(1))?;
        self.store.set_value(fd.entries(), fr.centroids.clone())?;
        self.store.set_value(cd.entries(), cr.centroids.clone())?;
        self.feat_dict = Some(fd.with_source(DictionarySource::KMeans));
        self.ctx_dict = Some(cd.with_source(DictionarySource::KMeans));
        Ok((fr, cr))
    }

    /// The same architecture reading its parameters from `store`.
    pub fn with_store(&self, store: &ParamStore) -> CattModel {
        let mut m = self.clone();
        m.store = store.clone();
        m
    }

    fn check_ids(&self, ids: &[usize], vocab: usize, what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Input(format!("empty {what} sequence")));
        }
        if let Some(t) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("{what} id {t} outside vocabulary of size {vocab}")));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, features: &[usize]) -> Result<EncoderOutput> {
        self.check_ids(features, self.config.vocab_in, "feature")?;
        let table = g.param(&self.store, self.feat_embed);
        let x = g.gather_rows(table, features)?;
        let mut is_stream = x;
        let mut cs_stream = None;
        for (i, blk) in self.encoder.iter().enumerate() {
            if i == 0 {
                is_stream = is_att(g, &self.store, x, x, &blk.is_att)?;
                if let Some(dict) = &self.feat_dict {
                    cs_stream = Some(cs_att(g, &self.store, dict, x, &blk.cs_att)?);
                }
            } else {
                is_stream = is_att(g, &self.store, is_stream, is_stream, &blk.is_att)?;
                if let Some(c) = cs_stream {
                    cs_stream = Some(is_att(g, &self.store, c, c, &blk.cs_att)?);
                }
            }
        }
        Ok(EncoderOutput { is_stream, cs_stream })
    }

    pub fn decode(&self, g: &mut Graph, context: &[usize], enc: Option<&EncoderOutput>) -> Result<DecoderOutput> {
        self.check_ids(context, self.config.vocab_out, "context")?;
        if self.dec_self.len() > 1 && enc.is_none() {
            return Err(Error::Contract("decoder layers >= 2 need encoder outputs".into()));
        }
        let table = g.param(&self.store, self.ctx_embed);
        let y = g.gather_rows(table, context)?;
        let mut is_stream = y;
        let mut cs_stream = None;
        for (i, blk) in self.dec_self.iter().enumerate() {
            if i == 0 {
                is_stream = is_att(g, &self.store, y, y, &blk.is_att)?;
                if let Some(dict) = &self.ctx_dict {
                    cs_stream = Some(cs_att(g, &self.store, dict, y, &blk.cs_att)?);
                }
                continue;
            }
            let enc = enc.expect("checked above");
            is_stream = is_att(g, &self.store, is_stream, is_stream, &blk.is_att)?;
            if let Some(c) = cs_stream {
                cs_stream = Some(is_att(g, &self.store, c, c, &blk.cs_att)?);
            }
            let cross = &self.dec_cross[i - 1];
            is_stream = multi_head(g, &self.store, is_stream, enc.is_stream, enc.is_stream, &cross.is_att)?.output;
            if let (Some(c), Some(ec)) = (cs_stream, enc.cs_stream) {
                cs_stream = Some(multi_head(g, &self.store, c, ec, ec, &cross.cs_att)?.output);
            }
        }
        let z_hat = g.mean_rows(is_stream)?;
        let x_hat = cs_stream.map(|c| g.mean_rows(c)).transpose()?;
        Ok(DecoderOutput { z_hat, x_hat })
    }

    /// Logits `g([Ẑ ; X̂])` of the linear predictor.
    pub fn predictor_logits(&self, g: &mut Graph, out: &DecoderOutput) -> Result<Var> {
        let input = match (self.mode, out.x_hat) {
            (Mode::Catt, Some(x)) => g.concat_cols(out.z_hat, x)?,
            (Mode::Baseline, _) => out.z_hat,
            (Mode::Catt, None) => return Err(Error::Contract("catt predictor needs X̂".into())),
        };
        let w = g.param(&self.store, self.predictor_w);
        let b = g.param(&self.store, self.predictor_b);
        let logits = g.matmul(input, w)?;
        g.add_row(logits, b)
    }

    /// Builds the whole forward pass of one sample; returns `1×vocab_out` logits.
    pub fn logits(&self, g: &mut Graph, sample: &Sample) -> Result<Var> {
        let enc = if self.dec_self.len() > 1 {
            Some(self.encode(g, &sample.features)?)
        } else {
            self.check_ids(&sample.features, self.config.vocab_in, "feature")?;
            None
        };
        let dec = self.decode(g, &sample.context, enc.as_ref())?;
        self.predictor_logits(g, &dec)
    }

    /// `Softmax(g(Ẑ, X̂))` for explicit pooled vectors (`X̂` ignored in baseline mode).
    pub fn predict(&self, z_hat: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
        let d = self.config.d;
        if z_hat.len() != d || (self.mode == Mode::Catt && x_hat.len() != d) {
            return Err(Error::dim("predict", &[z_hat.len(), x_hat.len()], &[d, d]));
        }
        let mut g = Graph::new();
        let z = g.input(Tensor::row_vector(z_hat));
        let x = g.input(Tensor::row_vector(x_hat));
        let out = DecoderOutput {
            z_hat: z,
            x_hat: Some(x),
        };
        let l = self.predictor_logits(&mut g, &out)?;
        let mut p = g.value(l).data().to_vec();
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Predictive distribution for one sample.
    pub fn predict_sample(&self, sample: &Sample) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, sample)?;
        let mut p = g.value(l).data().to_vec();
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Cross-entropy of one sample, built on `g`.
    pub fn sample_loss(&self, g: &mut Graph, sample: &Sample) -> Result<Var> {
        if sample.label >= self.config.vocab_out {
            return Err(Error::Input(format!("label {} outside vocabulary", sample.label)));
        }
        let l = self.logits(g, sample)?;
        g.cross_entropy(l, &[sample.label])
    }

    /// Mean cross-entropy over `batch` and its gradient. Per-sample
    /// gradients are summed in batch order on every execution path.
    pub fn loss_and_grads(&self, batch: &[Sample], exec: Execution) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let parts = par::map_collect(exec, batch, |s| -> Result<(f64, Gradients)> {
            let mut g = Graph::new();
            let loss = self.sample_loss(&mut g, s)?;
            Ok((g.value(loss).data()[0], g.backward_grads(loss)?))
        });
        let mut total = 0.0;
        let mut grads = Gradients::default();
        for part in parts {
            let (l, gr) = part?;
            total += l;
            grads.merge(&gr)?;
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    /// Mean loss without gradients.
    pub fn mean_loss(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut total = 0.0;
        for s in batch {
            let mut g = Graph::new();
            let l = self.sample_loss(&mut g, s)?;
            total += g.value(l).data()[0];
        }
        Ok(total / batch.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One record per epoch. Wall-clock time is kept separately so the
/// metrics themselves stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochMetrics>,
    pub seconds: Vec<f64>,
}

/// Mini-batch SGD over seeded shuffles.
pub fn train(
    model: &mut CattModel,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        seconds: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = model.loss_and_grads(&batch, exec)?;
            model.store.zero_grad();
            model.store.accumulate(&grads)?;
            model.store.sgd_step(cfg.lr);
            loss_sum += loss;
            batches += 1;
        }
        let eval_accuracy = if eval_set.is_empty() {
            0.0
        } else {
            evaluate(model, eval_set, exec)?.accuracy()
        };
        history.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            eval_accuracy,
        });
        history.seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub total: usize,
}

impl Counts {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += usize::from(ok);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Counts,
    /// Samples carrying a planted spurious token.
    pub spurious_present: Counts,
    pub spurious_absent: Counts,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }
}

/// Argmax accuracy (ties to the lowest class id), sharded over `exec`
/// and merged in dataset order.
pub fn evaluate(model: &CattModel, dataset: &[Sample], exec: Execution) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let preds = par::map_collect(exec, dataset, |s| model.predict_sample(s).map(|p| argmax(&p)));
    let v = model.config.vocab_out;
    let mut report = EvalReport {
        overall: Counts::default(),
        spurious_present: Counts::default(),
        spurious_absent: Counts::default(),
        confusion: vec![vec![0; v]; v],
    };
    for (s, p) in dataset.iter().zip(preds) {
        let p = p?;
        let ok = p == s.label;
        report.overall.add(ok);
        if s.meta.spurious {
            report.spurious_present.add(ok);
        } else {
            report.spurious_absent.add(ok);
        }
        report.confusion[s.label][p] += 1;
    }
    Ok(report)
}
