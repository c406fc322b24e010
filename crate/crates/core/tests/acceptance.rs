//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use catt::attention::{additive_scores, catt_block, multi_head, AdditiveParams, AttentionParams, CattBlockParams};
use catt::autodiff::{Graph, ParamStore};
use catt::commands::{cmd_gradcheck, run_benchmark, GradcheckArgs};
use catt::config::RunConfig;
use catt::dictionary::{assign, kmeans, DictionarySource, GlobalDictionary};
use catt::gradcheck::{finite_diff_gradcheck, GradcheckOptions};
use catt::model::{CattModel, Mode, ModelConfig};
use catt::oracle::{nwgm_gap, random_scm, wgm, AffineScorer, DiscreteDistribution, DomainSizes, FrontDoorScm};
use catt::par::Execution;
use catt::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scm_family(n: u64) -> impl Iterator<Item = FrontDoorScm> {
    (0..n).map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let mut s = || rng.random_range(2..=5);
        let sizes = DomainSizes {
            c: s(),
            x: s(),
            z: s(),
            y: s(),
        };
        random_scm(sizes, seed, 1e-3).expect("valid random scm")
    })
}

fn max_over_family(f: impl Fn(&FrontDoorScm, usize) -> f64) -> (f64, Duration) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for scm in scm_family(1000) {
        for x in 0..scm.sizes().x {
            worst = worst.max(f(&scm, x));
        }
    }
    (worst, start.elapsed())
}

fn front_door_identifiability() -> Outcome {
    let (err, t) = max_over_family(|s, x| s.front_door(x).unwrap().max_abs_diff(&s.intervene_truth(x).unwrap()));
    outcome(
        err <= 1e-12 && t < Duration::from_secs(30),
        format!("max |front_door - truth| = {err:.2e} over 1000 models in {:.2}s", t.as_secs_f64()),
    )
}

fn backdoor_identifiability() -> Outcome {
    let (err, t) = max_over_family(|s, x| s.backdoor(x).unwrap().max_abs_diff(&s.intervene_truth(x).unwrap()));
    outcome(
        err <= 1e-12,
        format!("max |backdoor - truth| = {err:.2e} in {:.2}s", t.as_secs_f64()),
    )
}

fn chaining_identity() -> Outcome {
    let (err, t) = max_over_family(|s, x| {
        let pz = s.z_given_x(x).unwrap();
        let mut chained = vec![0.0; s.sizes().y];
        for (z, w) in pz.probs().iter().enumerate() {
            for (acc, p) in chained.iter_mut().zip(s.do_z(z).unwrap().probs()) {
                *acc += w * p;
            }
        }
        DiscreteDistribution::new(chained)
            .unwrap()
            .max_abs_diff(&s.front_door(x).unwrap())
    });
    outcome(
        err <= 1e-12,
        format!("max |sum_z P(z|x) do_z - front_door| = {err:.2e} in {:.2}s", t.as_secs_f64()),
    )
}

fn confounding_witness() -> Outcome {
    let scm = FrontDoorScm::binary_example();
    let tv = (0..scm.sizes().x)
        .map(|x| {
            scm.observational(x)
                .unwrap()
                .total_variation(&scm.intervene_truth(x).unwrap())
        })
        .fold(0.0, f64::max);
    let fd_gap = (0..scm.sizes().x)
        .map(|x| scm.front_door(x).unwrap().max_abs_diff(&scm.intervene_truth(x).unwrap()))
        .fold(0.0, f64::max);
    outcome(
        tv > 0.05 && fd_gap <= 1e-12,
        format!("binary catalog model: max TV(observational, truth) = {tv:.4}, front-door gap {fd_gap:.1e}"),
    )
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> DiscreteDistribution {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    DiscreteDistribution::new(raw.iter().map(|v| v / total).collect()).unwrap()
}

fn wgm_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let w = random_distribution(&mut rng, n);
        let lhs = wgm(&g.iter().map(|v| v.exp()).collect::<Vec<_>>(), &w).unwrap();
        let mean: f64 = g.iter().zip(w.probs()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - mean.exp()).abs());
    }
    let mut gap: f64 = 0.0;
    for _ in 0..100 {
        let (nz, nx, ny, dz, dx) = (3, 4, 3, 2, 3);
        let mut v = |r: usize, c: usize| -> Vec<Vec<f64>> {
            (0..r).map(|_| (0..c).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
        };
        let scorer = AffineScorer {
            wz: v(ny, dz),
            wx: v(ny, dx),
            bias: v(1, ny).remove(0),
        };
        let (ze, xe) = (v(nz, dz), v(nx, dx));
        let pz = DiscreteDistribution::point_mass(nz, 1);
        let px = DiscreteDistribution::point_mass(nx, 2);
        gap = gap.max(nwgm_gap(&scorer, &pz, &ze, &px, &xe).unwrap().gap);
    }
    outcome(
        worst <= 1e-12 && gap <= 1e-12,
        format!("max |wgm(exp g) - exp(E g)| = {worst:.2e}; point-mass NWGM gap {gap:.2e}"),
    )
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf")).unwrap();
    let mut sink = Vec::new();
    let full = cmd_gradcheck(&cfg, GradcheckArgs::default(), Execution::sequential(), &mut sink).unwrap();
    let params = CattModel::new(cfg.model.clone(), Mode::Catt, 0).unwrap().store.num_scalars();

    // Per-module checks: multi-head attention, a CATT block, the additive
    // scorer, each read out through a fixed random linear functional.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let att = AttentionParams::with_hidden(&mut store, "m", 4, 2, 6, &mut rng).unwrap();
    let blk = CattBlockParams::new(&mut store, "b", 4, 2, false, &mut rng).unwrap();
    let add = AdditiveParams::new(&mut store, "a", 4, &mut rng).unwrap();
    let dict = GlobalDictionary::from_tensor(
        &mut store,
        "dict",
        Tensor::uniform(&[3, 4], 1.0, &mut rng),
        DictionarySource::Random,
    )
    .unwrap();
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let q = Tensor::uniform(&[2, 4], 1.0, &mut rng);
    let r_att = Tensor::uniform(&[2, 4], 1.0, &mut rng);
    let r_blk = Tensor::uniform(&[2, 8], 1.0, &mut rng);
    let r_add = Tensor::uniform(&[1, 3], 1.0, &mut rng);
    let readout = |g: &mut Graph, v: catt::autodiff::Var, r: &Tensor| {
        let r = g.input(r.clone());
        let p = g.mul(v, r)?;
        Ok(g.sum(p))
    };
    let opts = GradcheckOptions {
        tolerance: 1e-5,
        ..Default::default()
    };
    let modules = [
        finite_diff_gradcheck(
            &store,
            &att.ids(),
            |s, g| {
                let (xv, qv) = (g.input(x.clone()), g.input(q.clone()));
                let m = multi_head(g, s, qv, xv, xv, &att)?.output;
                readout(g, m, &r_att)
            },
            opts,
        ),
        finite_diff_gradcheck(
            &store,
            &[blk.is_att.ids(), blk.cs_att.ids(), vec![dict.entries()]].concat(),
            |s, g| {
                let (xv, qv) = (g.input(x.clone()), g.input(q.clone()));
                let (z, xh) = catt_block(g, s, xv, &dict, qv, &blk)?;
                let zx = g.concat_cols(z, xh)?;
                readout(g, zx, &r_blk)
            },
            opts,
        ),
        finite_diff_gradcheck(
            &store,
            &[add.w, add.wk, add.wq],
            |s, g| {
                let (xv, qv) = (g.input(x.clone()), g.input(q.clone()));
                let q1 = g.mean_rows(qv)?;
                let a = additive_scores(g, s, q1, xv, &add)?;
                readout(g, a, &r_add)
            },
            opts,
        ),
    ]
    .map(Result::unwrap);
    let module_err = modules.iter().map(|m| m.max_rel_error).fold(0.0, f64::max);
    let modules_pass = modules.iter().all(|m| m.passed() && m.kink_crossings == 0);
    let t = start.elapsed();
    outcome(
        params <= 1000 && full.passed() && full.kink_crossings == 0 && modules_pass && t < Duration::from_secs(60),
        format!(
            "full model ({params} params): max rel {:.2e} (tol 1e-4); modules: max rel {:.2e} (tol 1e-5); {:.2}s",
            full.max_rel_error,
            module_err,
            t.as_secs_f64()
        ),
    )
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut negative = false;
    let mut rows = 0usize;
    for _ in 0..500 {
        let heads = rng.random_range(1..=4);
        let d = heads * rng.random_range(1..=4);
        let (nq, nk) = (rng.random_range(1..=6), rng.random_range(1..=9));
        let scale = *[0.1, 1.0, 10.0, 100.0].get(rng.random_range(0..4)).unwrap();
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", d, heads, &mut rng).unwrap();
        let add = AdditiveParams::new(&mut store, "s", d, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.input(Tensor::uniform(&[nq, d], scale, &mut rng));
        let k = g.input(Tensor::uniform(&[nk, d], scale, &mut rng));
        let out = multi_head(&mut g, &store, q, k, k, &p).unwrap();
        let q1 = g.input(Tensor::uniform(&[1, d], scale, &mut rng));
        let a = additive_scores(&mut g, &store, q1, k, &add).unwrap();
        for v in out.attention.iter().chain([&a]) {
            let t = g.value(*v);
            for r in 0..t.rows() {
                let row = t.row(r);
                negative |= row.iter().any(|&x| x < 0.0);
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    outcome(
        worst <= 1e-12 && !negative,
        format!("{rows} rows over 500 shapes: max |row sum - 1| = {worst:.2e}, negatives: {negative}"),
    )
}

fn parameter_sharing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let blk = CattBlockParams::new(&mut store, "b", 6, 3, true, &mut rng).unwrap();
    let sample = Tensor::uniform(&[5, 6], 1.0, &mut rng);
    let dict = GlobalDictionary::from_tensor(&mut store, "dict", sample.clone(), DictionarySource::Random).unwrap();
    let mut g = Graph::new();
    let s = g.input(sample);
    let q = g.input(Tensor::uniform(&[4, 6], 1.0, &mut rng));
    let (z, x) = catt_block(&mut g, &store, s, &dict, q, &blk).unwrap();
    let bit_exact = g.value(z) == g.value(x);

    let shared = CattModel::new(ModelConfig::default(), Mode::Catt, 1).unwrap();
    let unshared = CattModel::new(
        ModelConfig {
            share_params: false,
            ..Default::default()
        },
        Mode::Catt,
        1,
    )
    .unwrap();
    let text = catt::checkpoint::to_string(&shared.store);
    let records = catt::checkpoint::parse(&text).unwrap();
    let once = records.len() == shared.store.len() && !records.iter().any(|(n, _)| n.contains(".cs."));
    let per_block = catt::checkpoint::parse(&catt::checkpoint::to_string(&unshared.store)).unwrap().len();
    outcome(
        bit_exact && once && per_block > records.len(),
        format!(
            "Z == X bit-exact: {bit_exact}; shared checkpoint {} tensors vs {per_block} unshared",
            records.len()
        ),
    )
}

fn kmeans_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut monotone = true;
    let mut fixed_point = true;
    let mut centroid_err: f64 = 0.0;
    let mut runs = 0;
    for seed in 0..40 {
        let n = rng.random_range(5..200);
        let d = rng.random_range(1..6);
        let k = rng.random_range(1..=n.min(12));
        let pts = Tensor::uniform(&[n, d], 3.0, &mut rng);
        let r = kmeans(&pts, k, 300, seed).unwrap();
        monotone &= r.inertia_history.windows(2).all(|w| w[1] <= w[0]);
        if r.converged {
            runs += 1;
            fixed_point &= assign(&pts, &r.centroids).unwrap() == r.labels;
            for c in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| r.labels[i] == c).collect();
                for j in 0..d {
                    let mean = members.iter().map(|&i| pts.get(i, j)).sum::<f64>() / members.len() as f64;
                    centroid_err = centroid_err.max((mean - r.centroids.get(c, j)).abs());
                }
            }
        }
    }
    let distinct = Tensor::uniform(&[7, 3], 1.0, &mut rng);
    let zero = kmeans(&distinct, 7, 100, 1).unwrap().inertia;
    outcome(
        monotone && fixed_point && runs > 0 && centroid_err <= 1e-12 && zero == 0.0,
        format!(
            "monotone: {monotone}; fixed point on {runs} converged runs: {fixed_point} (centroid err {centroid_err:.1e}); N==K inertia {zero}"
        ),
    )
}

struct BenchResult {
    catt: f64,
    baseline: f64,
    random: f64,
    seconds: f64,
}

fn default_benchmark() -> BenchResult {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let s = run_benchmark(&cfg, Execution::sequential()).expect("benchmark runs");
    BenchResult {
        catt: s.median("catt").unwrap(),
        baseline: s.median("baseline").unwrap(),
        random: s.median("catt-random").unwrap(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn deconfounding(b: &BenchResult) -> Outcome {
    let gap = 100.0 * (b.catt - b.baseline);
    outcome(
        gap >= 5.0 && b.seconds < 1800.0,
        format!(
            "spurious-present median: catt {:.4}, baseline {:.4}, gap {gap:+.2} points (need >= +5); {:.0}s",
            b.catt, b.baseline, b.seconds
        ),
    )
}

fn init_ablation(b: &BenchResult) -> Outcome {
    outcome(
        b.catt >= b.random,
        format!("spurious-present median: k-means {:.4}, random {:.4}", b.catt, b.random),
    )
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_catt"))
        .args(args)
        .env("CATT_THREADS", "2")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(
        root.join("run.conf"),
        "data.n_train = 120\ndata.n_test = 80\ntrain.epochs = 2\nmodel.d = 8\ndict.k_img = 6\n\
         paths.train = data/train.jsonl\npaths.test = data/test.jsonl\npaths.metrics = metrics.jsonl\n\
         paths.checkpoint = model.ckpt\nbenchmark.seeds = 1,2,3\n",
    )
    .unwrap();
    fs::write(root.join("scm.txt"), FrontDoorScm::binary_example().to_text()).unwrap();
    let conf = root.join("run.conf");
    let conf = conf.to_str().unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_string();
    let tiny = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf");

    let mut mismatched = Vec::new();
    let mut twice = |label: &str, files: &[&str], run: &dyn Fn(usize) -> Vec<u8>| {
        let mut snaps = Vec::new();
        for round in 0..2 {
            let stdout = run(round);
            let mut bytes: Vec<Vec<u8>> = files.iter().map(|f| fs::read(root.join(f)).unwrap()).collect();
            if files.is_empty() {
                bytes.push(stdout);
            }
            snaps.push(bytes);
        }
        if snaps[0] != snaps[1] {
            mismatched.push(label.to_string());
        }
    };
    twice("datagen", &["data/train.jsonl", "data/test.jsonl"], &|_| run_cli(&["datagen", "--config", conf]));
    for mode in ["catt", "baseline"] {
        twice(&format!("train {mode}"), &["metrics.jsonl", "model.ckpt"], &|_| {
            run_cli(&["train", "--config", conf, "--mode", mode])
        });
    }
    twice("eval", &["report.json"], &|_| run_cli(&["eval", "--config", conf, "--out", &p("report.json")]));
    twice("benchmark", &["bench.json"], &|_| run_cli(&["benchmark", "--config", conf, "--out", &p("bench.json")]));
    twice("kmeans-dump", &["km.json"], &|_| run_cli(&["kmeans-dump", "--config", conf, "--out", &p("km.json")]));
    twice("oracle", &["oracle.json"], &|_| {
        run_cli(&["oracle", "--scm", &p("scm.txt"), "--x", "1", "--out", &p("oracle.json")])
    });
    twice("gradcheck", &[], &|_| run_cli(&["gradcheck", "--config", tiny.to_str().unwrap()]));
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            "datagen, train (catt, baseline), eval, benchmark, kmeans-dump, oracle, gradcheck: byte-identical reruns".into()
        } else {
            format!("differing outputs: {}", mismatched.join(", "))
        },
    )
}

fn main() {
    let mut stdout = std::io::stdout();
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        writeln!(stdout, "[{tag}] {id:>2} {name}: {}", o.detail).unwrap();
        stdout.flush().unwrap();
        if !o.pass {
            failed.push(id);
        }
    };
    report(1, "front-door identifiability", front_door_identifiability());
    report(2, "backdoor identifiability", backdoor_identifiability());
    report(3, "chaining identity", chaining_identity());
    report(4, "confounding witness", confounding_witness());
    report(5, "wgm identity", wgm_identity());
    report(6, "gradient correctness", gradient_correctness());
    report(7, "attention normalization", attention_normalization());
    report(8, "parameter sharing", parameter_sharing());
    report(9, "k-means contract", kmeans_contract());
    let bench = default_benchmark();
    report(10, "deconfounding benchmark", deconfounding(&bench));
    report(11, "init ablation", init_ablation(&bench));
    report(12, "determinism", determinism());
    if failed.is_empty() {
        println!("acceptance: all 12 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
