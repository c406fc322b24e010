//! The command implementations behind the `catt` binary. Each command
//! writes its human-readable report to `out` and returns structured
//! results for programmatic callers.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::autodiff::{Graph, ParamStore};
use crate::checkpoint;
use crate::config::{Arm, RunConfig};
use crate::datagen::{self, Sample, Split};
use crate::dictionary::{self, DictionarySource, KMeansResult};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_gradcheck, GradcheckOptions, GradcheckReport};
use crate::model::{evaluate, train, CattModel, EvalReport, Mode, TrainHistory};
use crate::oracle::FrontDoorScm;
use crate::par::{self, Execution};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_ACCEPTANCE: i32 = 5;

/// Largest model `gradcheck` agrees to run.
pub const GRADCHECK_MAX_PARAMS: usize = 1000;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<output>", e))
}

fn require_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Input(e.to_string()))
}

/// Reads a JSONL split and checks it against the configured alphabets.
pub fn load_dataset(cfg: &RunConfig, path: &Path) -> Result<Vec<Sample>> {
    let samples = datagen::read_jsonl(path)?;
    datagen::validate_samples(&samples, cfg.model.vocab_in, cfg.model.vocab_out)?;
    Ok(samples)
}

pub struct DatagenOutput {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub train_partner_rate: f64,
    pub test_partner_rate: f64,
}

pub fn generate_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if cfg.data.n_train == 0 || cfg.data.n_test == 0 {
        return Err(Error::Config("data.n_train and data.n_test must be positive".into()));
    }
    let spec = &cfg.data.spec;
    Ok((
        datagen::generate(spec, cfg.data.n_train, Split::Train, cfg.data.train_seed())?,
        datagen::generate(spec, cfg.data.n_test, Split::Test, cfg.data.test_seed())?,
    ))
}

/// Writes `train.jsonl`/`test.jsonl` into `out_dir`, or to `paths.*`.
pub fn cmd_datagen(cfg: &RunConfig, out_dir: Option<&Path>, out: &mut dyn Write) -> Result<DatagenOutput> {
    let (train_path, test_path) = match out_dir {
        Some(dir) => (dir.join("train.jsonl"), dir.join("test.jsonl")),
        None => (
            require_path(&cfg.paths.train, "paths.train")?.to_path_buf(),
            require_path(&cfg.paths.test, "paths.test")?.to_path_buf(),
        ),
    };
    let (train, test) = generate_splits(cfg)?;
    datagen::write_jsonl(&train, &train_path)?;
    datagen::write_jsonl(&test, &test_path)?;
    let spec = &cfg.data.spec;
    let res = DatagenOutput {
        train_partner_rate: datagen::partner_rate(spec, &train),
        test_partner_rate: datagen::partner_rate(spec, &test),
        train,
        test,
    };
    emit(
        out,
        &format!(
            "train: {} samples -> {}\ntest: {} samples -> {}\ntrain co-occurrence (spurious partner | label): {:.4}\n\
             test co-occurrence (spurious partner | label): {:.4}\n",
            res.train.len(),
            train_path.display(),
            res.test.len(),
            test_path.display(),
            res.train_partner_rate,
            res.test_partner_rate
        ),
    )?;
    Ok(res)
}

/// Fresh model with dictionaries initialized per `dict.init`.
pub fn build_model(
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
    train_set: &[Sample],
) -> Result<(CattModel, Option<(KMeansResult, KMeansResult)>)> {
    let mut model = CattModel::new(cfg.model.clone(), mode, seed)?;
    let km = if mode == Mode::Catt && cfg.dict.init == DictionarySource::KMeans {
        Some(model.init_dictionaries_kmeans(train_set, cfg.dict.max_iters, seed)?)
    } else {
        None
    };
    Ok((model, km))
}

pub struct TrainOutput {
    pub model: CattModel,
    pub history: TrainHistory,
    pub report: EvalReport,
}

pub fn metrics_jsonl(history: &TrainHistory) -> Result<String> {
    let mut s = String::new();
    for e in &history.epochs {
        s += &serde_json::to_string(e).map_err(|e| Error::Input(e.to_string()))?;
        s.push('\n');
    }
    Ok(s)
}

fn timing_jsonl(history: &TrainHistory) -> String {
    history
        .epochs
        .iter()
        .zip(&history.seconds)
        .map(|(e, s)| format!("{{\"epoch\":{},\"seconds\":{s}}}\n", e.epoch))
        .collect()
}

/// Path of the wall-clock sidecar written next to a metrics file.
pub fn timing_path(metrics: &Path) -> PathBuf {
    let mut name = metrics.file_name().unwrap_or_default().to_os_string();
    name.push(".timing.jsonl");
    metrics.with_file_name(name)
}

/// Trains on `paths.train`, reports on `paths.test`, writes the checkpoint
/// (`checkpoint_out` or `paths.checkpoint`) and per-epoch metrics.
pub fn cmd_train(
    cfg: &RunConfig,
    mode: Mode,
    checkpoint_out: Option<&Path>,
    exec: Execution,
    out: &mut dyn Write,
) -> Result<TrainOutput> {
    let ckpt = match checkpoint_out {
        Some(p) => p,
        None => require_path(&cfg.paths.checkpoint, "paths.checkpoint")?,
    };
    let train_set = load_dataset(cfg, require_path(&cfg.paths.train, "paths.train")?)?;
    let test_set = load_dataset(cfg, require_path(&cfg.paths.test, "paths.test")?)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Input("training and test sets must be nonempty".into()));
    }
    let (mut model, km) = build_model(cfg, mode, cfg.train.seed, &train_set)?;
    if let Some((f, c)) = &km {
        emit(
            out,
            &format!(
                "k-means: features K={} inertia {:.6} ({} iters), context K={} inertia {:.6} ({} iters)\n",
                f.centroids.rows(),
                f.inertia,
                f.iterations,
                c.centroids.rows(),
                c.inertia,
                c.iterations
            ),
        )?;
    }
    let history = train(&mut model, &train_set, &test_set, &cfg.train, exec)?;
    checkpoint::save(&model.store, ckpt)?;
    if let Some(m) = &cfg.paths.metrics {
        checkpoint::write_atomic(m, metrics_jsonl(&history)?.as_bytes())?;
        checkpoint::write_atomic(&timing_path(m), timing_jsonl(&history).as_bytes())?;
    }
    for (e, s) in history.epochs.iter().zip(&history.seconds) {
        emit(
            out,
            &format!(
                "epoch {:>3}  loss {:.6}  eval_acc {:.4}  {:.2}s\n",
                e.epoch, e.train_loss, e.eval_accuracy, s
            ),
        )?;
    }
    let report = evaluate(&model, &test_set, exec)?;
    emit(out, &format_report(&report))?;
    emit(out, &format!("checkpoint -> {}\n", ckpt.display()))?;
    Ok(TrainOutput { model, history, report })
}

fn format_report(r: &EvalReport) -> String {
    format!(
        "accuracy {:.4} ({}/{})\nspurious-present accuracy {:.4} ({}/{})\nspurious-absent accuracy {:.4} ({}/{})\n",
        r.overall.accuracy(),
        r.overall.correct,
        r.overall.total,
        r.spurious_present.accuracy(),
        r.spurious_present.correct,
        r.spurious_present.total,
        r.spurious_absent.accuracy(),
        r.spurious_absent.correct,
        r.spurious_absent.total,
    )
}

/// Mode implied by a checkpoint's parameter names.
pub fn checkpoint_mode(text: &str) -> Result<Mode> {
    let names = checkpoint::parse(text)?;
    Ok(if names.iter().any(|(n, _)| n.starts_with("dict.")) {
        Mode::Catt
    } else {
        Mode::Baseline
    })
}

pub fn load_model(cfg: &RunConfig, path: &Path, mode: Option<Mode>) -> Result<CattModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mode = match mode {
        Some(m) => m,
        None => checkpoint_mode(&text)?,
    };
    let mut model = CattModel::new(cfg.model.clone(), mode, 0)?;
    checkpoint::load_str_into(&mut model.store, &text)?;
    Ok(model)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: &Path,
    dataset: &Path,
    mode: Option<Mode>,
    report_out: Option<&Path>,
    exec: Execution,
    out: &mut dyn Write,
) -> Result<EvalReport> {
    let model = load_model(cfg, checkpoint_path, mode)?;
    let samples = load_dataset(cfg, dataset)?;
    if samples.is_empty() {
        return Err(Error::Input(format!("{} holds no samples", dataset.display())));
    }
    let report = evaluate(&model, &samples, exec)?;
    emit(out, &format!("mode {}\n", model.mode))?;
    emit(out, &format_report(&report))?;
    if let Some(p) = report_out {
        checkpoint::write_atomic(p, to_json(&report)?.as_bytes())?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckArgs {
    pub tolerance: f64,
    pub corrupt: Option<f64>,
    /// Check only the linear predictor on fixed inputs.
    pub linear_only: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            corrupt: None,
            linear_only: false,
        }
    }
}

/// Finite-difference check of the full CATT loss on a two-sample batch.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    args: GradcheckArgs,
    exec: Execution,
    out: &mut dyn Write,
) -> Result<GradcheckReport> {
    let seed = cfg.train.seed;
    let model = CattModel::new(cfg.model.clone(), Mode::Catt, seed)?;
    let n = model.store.num_scalars();
    if n > GRADCHECK_MAX_PARAMS {
        return Err(Error::Config(format!(
            "gradcheck refuses a model with {n} parameters (limit {GRADCHECK_MAX_PARAMS})"
        )));
    }
    let opts = GradcheckOptions {
        tolerance: args.tolerance,
        corrupt: args.corrupt,
        exec,
        ..Default::default()
    };
    let report = if args.linear_only {
        let d = cfg.model.d;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let input = Tensor::uniform(&[1, 2 * d], 1.0, &mut rng);
        let ids = [model.predictor_w, model.predictor_b];
        finite_diff_gradcheck(
            &model.store,
            &ids,
            |store: &ParamStore, g: &mut Graph| {
                let x = g.input(input.clone());
                let w = g.param(store, ids[0]);
                let b = g.param(store, ids[1]);
                let l = g.matmul(x, w)?;
                let l = g.add_row(l, b)?;
                Ok(g.sum(l))
            },
            opts,
        )?
    } else {
        let batch = datagen::generate(&cfg.data.spec, 2, Split::Train, seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        finite_diff_gradcheck(
            &model.store,
            &ids,
            |store: &ParamStore, g: &mut Graph| {
                let view = model.with_store(store);
                let a = view.sample_loss(g, &batch[0])?;
                let b = view.sample_loss(g, &batch[1])?;
                let s = g.add(a, b)?;
                Ok(g.scale(s, 0.5))
            },
            opts,
        )?
    };
    emit(
        out,
        &format!(
            "gradcheck: {} entries, max relative error {:.3e}, tolerance {:.1e}: {}\n",
            report.checked,
            report.max_rel_error,
            report.tolerance,
            if report.passed() { "PASS" } else { "FAIL" }
        ),
    )?;
    if let Some(m) = report.relu_margin {
        emit(
            out,
            &format!(
                "nearest ReLU kink {m:.3e}; {} entries crossed a kink\n",
                report.kink_crossings
            ),
        )?;
    }
    if let Some(w) = &report.worst {
        emit(
            out,
            &format!(
                "worst entry {}[{}]: autodiff {:.6e} finite-diff {:.6e}\n",
                w.param, w.index, w.autodiff, w.finite_diff
            ),
        )?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub x: usize,
    pub observational: Vec<f64>,
    pub intervene_truth: Vec<f64>,
    pub front_door: Vec<f64>,
    pub backdoor: Vec<f64>,
    pub do_z: Vec<Vec<f64>>,
    /// Largest pairwise gap among the three interventional estimates.
    pub max_deviation: f64,
}

pub fn oracle_report(scm: &FrontDoorScm, x: usize) -> Result<OracleReport> {
    let truth = scm.intervene_truth(x)?;
    let fd = scm.front_door(x)?;
    let bd = scm.backdoor(x)?;
    let max_deviation = truth
        .max_abs_diff(&fd)
        .max(truth.max_abs_diff(&bd))
        .max(fd.max_abs_diff(&bd));
    let do_z = (0..scm.sizes().z)
        .map(|z| scm.do_z(z).map(|d| d.probs().to_vec()))
        .collect::<Result<_>>()?;
    Ok(OracleReport {
        x,
        observational: scm.observational(x)?.probs().to_vec(),
        intervene_truth: truth.probs().to_vec(),
        front_door: fd.probs().to_vec(),
        backdoor: bd.probs().to_vec(),
        do_z,
        max_deviation,
    })
}

pub fn cmd_oracle(scm_path: &Path, x: usize, out: &mut dyn Write) -> Result<OracleReport> {
    let text = std::fs::read_to_string(scm_path).map_err(|e| Error::io(scm_path, e))?;
    let scm = FrontDoorScm::from_text(&text)?;
    let r = oracle_report(&scm, x)?;
    let row = |name: &str, p: &[f64]| {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.12}")).collect();
        format!("{name:<18}{}\n", cells.join("  "))
    };
    let mut s = format!("x = {x}\n");
    s += &row("observational", &r.observational);
    s += &row("intervene_truth", &r.intervene_truth);
    s += &row("front_door", &r.front_door);
    s += &row("backdoor", &r.backdoor);
    for (z, p) in r.do_z.iter().enumerate() {
        s += &row(&format!("do_z[z={z}]"), p);
    }
    s += &format!("max_deviation     {:.3e}\n", r.max_deviation);
    emit(out, &s)?;
    Ok(r)
}

/// Arm label plus the model settings it implies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArmSpec {
    pub label: String,
    pub mode: Mode,
    pub init: DictionarySource,
    pub k_img: Option<usize>,
}

pub fn arm_specs(cfg: &RunConfig) -> Vec<ArmSpec> {
    let mut arms: Vec<ArmSpec> = cfg
        .benchmark
        .arms
        .iter()
        .map(|a| ArmSpec {
            label: a.to_string(),
            mode: if *a == Arm::Baseline { Mode::Baseline } else { Mode::Catt },
            init: if *a == Arm::CattRandom {
                DictionarySource::Random
            } else {
                DictionarySource::KMeans
            },
            k_img: None,
        })
        .collect();
    arms.extend(cfg.benchmark.dict_sizes.iter().map(|&k| ArmSpec {
        label: format!("catt-k{k}"),
        mode: Mode::Catt,
        init: DictionarySource::KMeans,
        k_img: Some(k),
    }));
    arms
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub arm: String,
    pub seed: u64,
    pub spurious_present: f64,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkSummary {
    pub rows: Vec<BenchmarkRow>,
    /// `(arm, median spurious-present accuracy)` in arm order.
    pub medians: Vec<(String, f64)>,
}

impl BenchmarkSummary {
    pub fn median(&self, arm: &str) -> Option<f64> {
        self.medians.iter().find(|(a, _)| a == arm).map(|(_, m)| *m)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<14}{:>6}{:>18}{:>10}\n", "arm", "seed", "spurious_present", "overall");
        for r in &self.rows {
            s += &format!("{:<14}{:>6}{:>18.4}{:>10.4}\n", r.arm, r.seed, r.spurious_present, r.overall);
        }
        for (a, m) in &self.medians {
            s += &format!("{:<14}{:>6}{:>18.4}\n", a, "median", m);
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// One benchmark cell: data seeded by `seed`, model and shuffles too.
pub fn run_arm(cfg: &RunConfig, arm: &ArmSpec, seed: u64, train_set: &[Sample], test_set: &[Sample]) -> Result<EvalReport> {
    let mut c = cfg.clone();
    c.dict.init = arm.init;
    if let Some(k) = arm.k_img {
        c.model.k_img = k;
    }
    c.train.seed = seed;
    let (mut model, _) = build_model(&c, arm.mode, seed, train_set)?;
    train(&mut model, train_set, &[], &c.train, Execution::sequential())?;
    evaluate(&model, test_set, Execution::sequential())
}

/// Trains every arm on every seed. Cells run on `exec`; each cell is
/// single-threaded and independently seeded, so the table does not depend
/// on the thread count.
pub fn run_benchmark(cfg: &RunConfig, exec: Execution) -> Result<BenchmarkSummary> {
    if cfg.benchmark.seeds.len() < 3 {
        return Err(Error::Config("benchmark needs at least 3 seeds".into()));
    }
    let arms = arm_specs(cfg);
    if arms.is_empty() {
        return Err(Error::Config("benchmark.arms is empty".into()));
    }
    let data = cfg
        .benchmark
        .seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.data.seed = s;
            generate_splits(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..data.len()).map(move |s| (a, s)))
        .collect();
    let results = par::map_collect(exec, &cells, |&(a, s)| {
        run_arm(cfg, &arms[a], cfg.benchmark.seeds[s], &data[s].0, &data[s].1)
    });
    let mut rows = Vec::with_capacity(cells.len());
    for (&(a, s), r) in cells.iter().zip(results) {
        let r = r?;
        rows.push(BenchmarkRow {
            arm: arms[a].label.clone(),
            seed: cfg.benchmark.seeds[s],
            spurious_present: r.spurious_present.accuracy(),
            overall: r.accuracy(),
        });
    }
    let medians = arms
        .iter()
        .map(|a| {
            let v: Vec<f64> = rows.iter().filter(|r| r.arm == a.label).map(|r| r.spurious_present).collect();
            (a.label.clone(), median(&v))
        })
        .collect();
    Ok(BenchmarkSummary { rows, medians })
}

pub fn cmd_benchmark(
    cfg: &RunConfig,
    summary_out: Option<&Path>,
    exec: Execution,
    out: &mut dyn Write,
) -> Result<BenchmarkSummary> {
    let summary = run_benchmark(cfg, exec)?;
    emit(out, &summary.to_table())?;
    if let Some(p) = summary_out {
        checkpoint::write_atomic(p, to_json(&summary)?.as_bytes())?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct KMeansDump {
    pub k: usize,
    pub points: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub converged: bool,
    pub inertia_history: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
}

impl KMeansDump {
    fn new(r: &KMeansResult, points: usize) -> Self {
        Self {
            k: r.centroids.rows(),
            points,
            inertia: r.inertia,
            iterations: r.iterations,
            converged: r.converged,
            inertia_history: r.inertia_history.clone(),
            centroids: (0..r.centroids.rows()).map(|i| r.centroids.row(i).to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KMeansDumpReport {
    pub features: KMeansDump,
    pub context: KMeansDump,
}

/// K-means over the freshly initialized embeddings of the training tokens.
pub fn cmd_kmeans_dump(cfg: &RunConfig, json_out: Option<&Path>, out: &mut dyn Write) -> Result<KMeansDumpReport> {
    let train_set = load_dataset(cfg, require_path(&cfg.paths.train, "paths.train")?)?;
    let model = CattModel::new(cfg.model.clone(), Mode::Catt, cfg.train.seed)?;
    let feat_ids: Vec<usize> = train_set.iter().flat_map(|s| s.features.iter().copied()).collect();
    let ctx_ids: Vec<usize> = train_set.iter().flat_map(|s| s.context.iter().copied()).collect();
    let fp = model.store.value(model.feat_embed).gather_rows(&feat_ids)?;
    let cp = model.store.value(model.ctx_embed).gather_rows(&ctx_ids)?;
    let seed = cfg.train.seed;
    let fr = dictionary::kmeans(&fp, cfg.model.k_img, cfg.dict.max_iters, seed)?;
    let cr = dictionary::kmeans(&cp, cfg.model.k_txt, cfg.dict.max_iters, seed.wrapping_add(1))?;
    let report = KMeansDumpReport {
        features: KMeansDump::new(&fr, feat_ids.len()),
        context: KMeansDump::new(&cr, ctx_ids.len()),
    };
    let json = to_json(&report)?;
    match json_out {
        Some(p) => {
            checkpoint::write_atomic(p, json.as_bytes())?;
            for (name, d) in [("features", &report.features), ("context", &report.context)] {
                emit(
                    out,
                    &format!(
                        "{name}: K={} over {} points, inertia {:.6}, {} iterations, converged {}\n",
                        d.k, d.points, d.inertia, d.iterations, d.converged
                    ),
                )?;
            }
        }
        None => emit(out, &(json + "\n"))?,
    }
    Ok(report)
}
