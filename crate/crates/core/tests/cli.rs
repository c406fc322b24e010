use std::path::{Path, PathBuf};
use std::process::Command;

use catt::checkpoint;
use catt::commands::build_model;
use catt::config::RunConfig;
use catt::datagen;
use catt::model::Mode;
use catt::oracle::FrontDoorScm;

const TINY: &str = "model.enc_layers = 1
model.dec_layers = 2
model.d = 4
model.heads = 2
model.ffn_hidden = 8
dict.k_img = 4
dict.k_txt = 2
data.vocab_in = 12
train.seed = 7
";

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn catt(args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_catt"))
        .args(args)
        .env("CATT_THREADS", "1")
        .output()
        .expect("spawn catt");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `body` plus run paths rooted in `dir` and returns the config path.
fn write_config(dir: &Path, body: &str) -> PathBuf {
    let text = format!(
        "{body}paths.train = train.jsonl\npaths.test = test.jsonl\npaths.checkpoint = model.ckpt\npaths.metrics = metrics.jsonl\n"
    );
    let p = dir.join("run.conf");
    std::fs::write(&p, text).unwrap();
    p
}

fn no_confounding_scm() -> String {
    "catt-scm 1
sizes 2 3 2 2
cpt C
0.3 0.7
cpt X|C
0.2 0.5 0.3
0.2 0.5 0.3
cpt Z|X
0.9 0.1
0.4 0.6
0.25 0.75
cpt Y|Z,C
0.8 0.2
0.6 0.4
0.3 0.7
0.1 0.9
"
    .to_string()
}

#[test]
fn help_lists_exit_codes() {
    let o = catt(&["--help"]);
    assert_eq!(o.code, 0);
    for needle in ["Exit codes", "2  configuration", "3  I/O", "4  validation", "5  acceptance", "CATT_THREADS"] {
        assert!(o.stdout.contains(needle), "missing {needle:?}");
    }
}

#[test]
fn datagen_with_zero_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "data.n_train = 0\n");
    let o = catt(&["datagen", "--config", s(&cfg)]);
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.depth = 3\n");
    let o = catt(&["train", "--config", s(&cfg)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("line 1"), "{}", o.stderr);
}

#[test]
fn train_with_missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = catt(&["train", "--config", s(&cfg)]);
    assert_eq!(o.code, 3, "{}", o.stderr);
}

#[test]
fn malformed_cpt_row_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = no_confounding_scm().replace("0.2 0.5 0.3\n0.2 0.5 0.3", "0.2 0.5 0.3\n0.2 0.4 0.3");
    let p = dir.path().join("bad.scm");
    std::fs::write(&p, text).unwrap();
    let o = catt(&["oracle", "--scm", s(&p), "--x", "0"]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    assert!(o.stderr.contains("X|C") && o.stderr.contains("row 1"), "{}", o.stderr);
}

#[test]
fn oracle_without_confounding_agrees_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("plain.scm");
    std::fs::write(&p, no_confounding_scm()).unwrap();
    let json = dir.path().join("oracle.json");
    for x in 0..3 {
        let o = catt(&["oracle", "--scm", s(&p), "--x", &x.to_string(), "--out", s(&json)]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        let col = |k: &str| -> Vec<f64> {
            v[k].as_array().unwrap().iter().map(|e| e.as_f64().unwrap()).collect()
        };
        let obs = col("observational");
        for k in ["intervene_truth", "front_door", "backdoor"] {
            for (a, b) in obs.iter().zip(col(k)) {
                assert!((a - b).abs() <= 1e-12, "{k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn oracle_rejects_out_of_range_treatment() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("plain.scm");
    std::fs::write(&p, no_confounding_scm()).unwrap();
    assert_eq!(catt(&["oracle", "--scm", s(&p), "--x", "3"]).code, 4);
}

#[test]
fn oracle_reads_what_the_library_writes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("binary.scm");
    std::fs::write(&p, FrontDoorScm::binary_example().to_text()).unwrap();
    let o = catt(&["oracle", "--scm", s(&p), "--x", "1"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("front_door"));
}

#[test]
fn gradcheck_refuses_oversize_models() {
    let o = catt(&["gradcheck"]);
    assert_eq!(o.code, 2, "{}", o.stdout);
    assert!(o.stderr.contains("limit 1000"), "{}", o.stderr);
}

#[test]
fn gradcheck_passes_and_flags_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let ok = catt(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(ok.code, 0, "{}{}", ok.stdout, ok.stderr);
    assert!(ok.stdout.contains("PASS"));
    let bad = catt(&["gradcheck", "--config", s(&cfg), "--corrupt", "0.5"]);
    assert_eq!(bad.code, 5, "{}", bad.stdout);
    assert!(bad.stdout.contains("FAIL"));
}

#[test]
fn linear_only_gradcheck_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let o = catt(&["gradcheck", "--config", s(&cfg), "--linear-only"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let err: f64 = o
        .stdout
        .split("max relative error ")
        .nth(1)
        .and_then(|t| t.split(',').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn default_datagen_hits_the_target_cooccurrence() {
    let dir = tempfile::tempdir().unwrap();
    let o = catt(&["datagen", "--out", s(dir.path())]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let rate: f64 = o
        .stdout
        .lines()
        .find(|l| l.starts_with("train co-occurrence"))
        .and_then(|l| l.rsplit(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((rate - 0.95).abs() <= 0.02, "{rate}");
    let train = datagen::read_jsonl(&dir.path().join("train.jsonl")).unwrap();
    let test = datagen::read_jsonl(&dir.path().join("test.jsonl")).unwrap();
    assert_eq!((train.len(), test.len()), (2000, 4000));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &format!("{TINY}train.epochs = 0\ndata.n_train = 40\ndata.n_test = 40\n"));
    assert_eq!(catt(&["datagen", "--config", s(&cfg_path)]).code, 0);
    let o = catt(&["train", "--config", s(&cfg_path)]);
    assert_eq!(o.code, 0, "{}", o.stderr);

    let cfg = RunConfig::load(&cfg_path).unwrap();
    let train = datagen::read_jsonl(&dir.path().join("train.jsonl")).unwrap();
    let (model, _) = build_model(&cfg, Mode::Catt, cfg.train.seed, &train).unwrap();
    let saved = std::fs::read_to_string(dir.path().join("model.ckpt")).unwrap();
    assert_eq!(saved, checkpoint::to_string(&model.store));
    assert_eq!(std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap(), "");
}

#[test]
fn memorizes_a_ten_sample_task() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{TINY}data.n_train = 10\ndata.n_test = 10\ntrain.lr = 0.1\ntrain.epochs = 200\ntrain.batch_size = 5\n"
    );
    let cfg = write_config(dir.path(), &body);
    assert_eq!(catt(&["datagen", "--config", s(&cfg)]).code, 0);
    let o = catt(&["train", "--config", s(&cfg)]);
    assert_eq!(o.code, 0, "{}", o.stderr);

    let report = dir.path().join("eval.json");
    let train = dir.path().join("train.jsonl");
    let o = catt(&["eval", "--config", s(&cfg), "--data", s(&train), "--out", s(&report)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.contains("accuracy 1.0000 (10/10)"), "{}", o.stdout);
    assert!(o.stdout.starts_with("mode catt"));

    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let total = |k: &str| v[k]["total"].as_u64().unwrap();
    assert_eq!(total("overall"), 10);
    assert_eq!(total("spurious_present") + total("spurious_absent"), 10);
}

#[test]
fn eval_rejects_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}train.epochs = 0\ndata.n_train = 20\ndata.n_test = 20\n"));
    assert_eq!(catt(&["datagen", "--config", s(&cfg)]).code, 0);
    assert_eq!(catt(&["train", "--config", s(&cfg)]).code, 0);
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = catt(&["eval", "--config", s(&cfg), "--data", s(&empty)]);
    assert_eq!(o.code, 4, "{}", o.stderr);
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}train.epochs = 0\ndata.n_train = 20\ndata.n_test = 20\n"));
    assert_eq!(catt(&["datagen", "--config", s(&cfg)]).code, 0);
    assert_eq!(catt(&["train", "--config", s(&cfg), "--mode", "baseline"]).code, 0);
    let o = catt(&["eval", "--config", s(&cfg), "--mode", "catt"]);
    assert_eq!(o.code, 4, "{}", o.stderr);
    let o = catt(&["eval", "--config", s(&cfg)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.starts_with("mode baseline"));
}

#[test]
fn benchmark_needs_three_seeds() {
    let o = catt(&["benchmark", "--seeds", "0,1"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("at least 3 seeds"), "{}", o.stderr);
}

#[test]
fn benchmark_with_frozen_weights_scores_chance_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{TINY}train.lr = 0\ntrain.epochs = 1\ndata.n_train = 40\ndata.n_test = 400\nbenchmark.arms = baseline\nbenchmark.seeds = 0,1,2\n"
    );
    let cfg = write_config(dir.path(), &body);
    let a = catt(&["benchmark", "--config", s(&cfg)]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    let b = catt(&["benchmark", "--config", s(&cfg)]);
    assert_eq!(a.stdout, b.stdout);
    let median: f64 = a
        .stdout
        .lines()
        .find(|l| l.starts_with("baseline") && l.contains("median"))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap();
    // vocab_out 4: an untrained model should sit near 1/4.
    assert!((median - 0.25).abs() <= 0.15, "{median}");
}

#[test]
fn require_gap_without_both_arms_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{TINY}train.epochs = 0\ndata.n_train = 20\ndata.n_test = 20\nbenchmark.arms = baseline\nbenchmark.seeds = 0,1,2\n"
    );
    let cfg = write_config(dir.path(), &body);
    let o = catt(&["benchmark", "--config", s(&cfg), "--require-gap", "5"]);
    assert_eq!(o.code, 2, "{}", o.stderr);
}
