//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion. Exact criteria (1-4, 6, 8) also assert. The two seed-median
//! reproduction studies (5, 7) only report, unless
//! `INFOCORE_STRICT_ACCEPTANCE=1` is set.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture` to see
//! the report lines.

use std::path::{Path, PathBuf};
use std::process::Command;

use infocore::config::ExperimentConfig;
use infocore::discrete::DiscreteJoint;
use infocore::eval::{retrieval_topn, Scope};
use infocore::numkern::{normalize_rows, softmax_rows, RngStream};
use infocore::objectives::{
    c_diagnostic, clip_infonce_loss, infocore_clip_loss, single_sample_bound_weighted, Mixing, ObjectiveConfig, ObjectiveKind,
};
use infocore::pipeline::{self, compare_objectives};

fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}

/// Assert a reproduction-study outcome only in strict mode.
fn gate_study(pass: bool) {
    if std::env::var("INFOCORE_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1") {
        assert!(pass);
    }
}

// ── 1. Gradient correctness ─────────────────────────────────────────────────

#[test]
fn c1_gradient_correctness() {
    let start = std::time::Instant::now();
    let r = pipeline::gradcheck_suite(1).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let covered = [ObjectiveKind::Clip, ObjectiveKind::Ccl, ObjectiveKind::Infocore].iter().all(|k| r.cases.iter().any(|c| c.objective == *k))
        && r.cases.iter().any(|c| c.mixing == Mixing::Geometric);
    let pass = r.max_rel_error < 1e-4 && r.samples == 16 && covered && r.cases.len() >= 48;
    let detail = format!("{} cases, {} params, max rel err {:.2e}, {secs:.1}s", r.cases.len(), r.parameters, r.max_rel_error);
    assert!(report(1, "gradient correctness", pass, &detail));
}

// ── 2. Collapse identity ────────────────────────────────────────────────────

#[test]
fn c2_collapse_identity() {
    let mut rng = RngStream::new(2, "collapse");
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let k = 2 + trial % 15;
        let b = 1 + trial % 4;
        let sim = rng.normal_matrix(k, k, 3.0);
        let post_g = softmax_rows(&rng.normal_matrix(k, b, 2.0));
        let post_d = softmax_rows(&rng.normal_matrix(k, b, 2.0));
        let ids: Vec<usize> = (0..k).map(|_| rng.index(b)).collect();
        for mixing in [Mixing::Arithmetic, Mixing::Geometric] {
            let cfg = ObjectiveConfig { alpha: 1.0, lambda: 0.0, tau: 1.0, mixing, objective: ObjectiveKind::Infocore };
            let ic = infocore_clip_loss(&sim, &post_g, &post_d, &ids, &cfg).unwrap();
            let (_, clip) = clip_infonce_loss(&sim, &cfg).unwrap();
            worst = worst.max(ic.grad_sim.sub(&clip).unwrap().max_abs());
        }
    }
    assert!(report(2, "collapse identity", worst <= 1e-10, &format!("max |grad diff| {worst:.2e} over 100 cases")));
}

// ── 3. C-positivity ─────────────────────────────────────────────────────────

#[test]
fn c3_c_positivity() {
    let mut rng = RngStream::new(3, "c-positivity");
    let mut min = f64::INFINITY;
    let mut count = 0;
    for mixing in [Mixing::Arithmetic, Mixing::Geometric] {
        for step in 1..=9 {
            let alpha = step as f64 / 10.0;
            for trial in 0..10_000 {
                let n_b = 2 + trial % 9;
                let spread = [0.3, 1.0, 3.0, 8.0][trial % 4];
                let p_g = softmax_rows(&rng.normal_matrix(1, n_b, spread));
                let p_d = softmax_rows(&rng.normal_matrix(1, n_b, spread));
                let b = rng.index(n_b);
                min = min.min(c_diagnostic(p_g.row(0), p_d.row(0), b, alpha, mixing).unwrap());
                count += 1;
            }
        }
    }
    assert!(report(3, "C positivity", min >= -1e-12, &format!("min C {min:.3e} over {count} pairs")));
}

// ── 4. Bound sanity on a discrete toy ───────────────────────────────────────

/// `I(D;G|B)` by direct summation over the table.
fn exact_cmi(joint: &DiscreteJoint) -> f64 {
    let (nd, ng, nb) = joint.dims();
    let mut total = 0.0;
    for d in 0..nd {
        for g in 0..ng {
            for b in 0..nb {
                let p = joint.prob(d, g, b);
                if p > 0.0 {
                    total += p * (p * joint.p_b(b) / (joint.p_db(d, b) * joint.p_gb(g, b))).ln();
                }
            }
        }
    }
    total
}

/// `I(D;B)` by direct summation.
fn exact_mi_db(joint: &DiscreteJoint) -> f64 {
    let (nd, _, nb) = joint.dims();
    let mut total = 0.0;
    for d in 0..nd {
        for b in 0..nb {
            let p = joint.p_db(d, b);
            if p > 0.0 {
                total += p * (p / (joint.p_d(d) * joint.p_b(b))).ln();
            }
        }
    }
    total
}

#[test]
fn c4_bound_sanity() {
    let start = std::time::Instant::now();
    let joint = DiscreteJoint::random(4, 4, 2, &mut RngStream::new(4, "toy")).unwrap();
    let cmi = exact_cmi(&joint);
    let mut pass = true;
    let mut detail = format!("CMI {cmi:.4}");
    for mixing in [Mixing::Arithmetic, Mixing::Geometric] {
        let mut prev = f64::NEG_INFINITY;
        for k in [2, 4, 8, 16] {
            let est = joint.exact_multi_sample_estimate(k, 0.09, mixing).unwrap();
            pass &= est.value <= cmi + 1e-9 && est.value >= prev - 0.02;
            detail.push_str(&format!(", {mixing:?} K={k}: {:.4}", est.value));
            prev = est.value;
        }
    }

    // single-sample bound with its optimal critic, exact expectations
    let (nd, ng, nb) = joint.dims();
    let (mut h_joint, mut p_joint, mut h_marg, mut p_marg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for d in 0..nd {
        for g in 0..ng {
            for b in 0..nb {
                let h = joint.optimal_single_sample_critic(d, g, b);
                h_joint.push(h);
                p_joint.push(joint.prob(d, g, b));
                h_marg.push(h);
                p_marg.push(joint.p_d(d) * joint.p_gb(g, b));
            }
        }
    }
    let single = single_sample_bound_weighted(&h_joint, &p_joint, &h_marg, &p_marg, exact_mi_db(&joint)).unwrap();
    pass &= single <= cmi + 1e-9;
    detail.push_str(&format!(", single-sample {single:.6}, {:.1}s", start.elapsed().as_secs_f64()));
    assert!(report(4, "bound sanity", pass, &detail));
}

// ── 5. Simulation study ─────────────────────────────────────────────────────

/// Settings for the simulated study; see `configs/sim_study.json`.
fn sim_study_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sim_study.json");
    ExperimentConfig::load(&path).unwrap()
}

const SIM_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

#[test]
fn c5_simulation_study() {
    let start = std::time::Instant::now();
    let base = sim_study_config();
    let kinds = [ObjectiveKind::Clip, ObjectiveKind::Ccl, ObjectiveKind::Infocore];
    let mut per_seed = Vec::new();
    for seed in SIM_SEEDS {
        let mut cfg = base.clone();
        cfg.apply_seed(seed);
        per_seed.push(compare_objectives(&cfg, &kinds).unwrap());
    }
    let med = |kind: ObjectiveKind, metric: &str| {
        median(per_seed.iter().map(|runs| runs.iter().find(|(k, _)| *k == kind).unwrap().1.get(metric).unwrap()).collect())
    };
    let eff = |k| med(k, "probe/screen/effect");
    let (ic, clip, ccl) = (eff(ObjectiveKind::Infocore), eff(ObjectiveKind::Clip), eff(ObjectiveKind::Ccl));
    let ic_batch = med(ObjectiveKind::Infocore, "probe/screen/batch");
    let ent = |k| med(k, "mixing_entropy/screen");
    let pur = |k| med(k, "knn_purity/screen");
    let checks = [
        ("infocore effect >= 0.60", ic >= 0.60),
        ("infocore batch <= 0.12", ic_batch <= 0.12),
        ("clip effect <= infocore - 0.10", clip <= ic - 0.10),
        ("ccl effect <= infocore - 0.10", ccl <= ic - 0.10),
        ("entropy infocore >= clip", ent(ObjectiveKind::Infocore) >= ent(ObjectiveKind::Clip)),
        ("purity infocore >= ccl", pur(ObjectiveKind::Infocore) >= pur(ObjectiveKind::Ccl)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "medians over {} seeds: effect infocore {ic:.3} clip {clip:.3} ccl {ccl:.3}; infocore batch {ic_batch:.3}; \
         entropy infocore {:.3} clip {:.3}; purity infocore {:.3} ccl {:.3}; failed: {failed:?}; {:.0}s",
        SIM_SEEDS.len(),
        ent(ObjectiveKind::Infocore),
        ent(ObjectiveKind::Clip),
        pur(ObjectiveKind::Infocore),
        pur(ObjectiveKind::Ccl),
        start.elapsed().as_secs_f64()
    );
    gate_study(report(5, "simulation study", failed.is_empty(), &detail));
}

// ── 6. Random-retrieval baseline ────────────────────────────────────────────

fn random_retrieval(library: usize, trials: usize, scope: Scope, rng: &mut RngStream) -> Vec<f64> {
    let ns = [1, 5, 10];
    let mut hits = [0.0; 3];
    let truth: Vec<usize> = (0..library).collect();
    let batches = vec![0; library];
    for _ in 0..trials {
        let (q, _) = normalize_rows(&rng.normal_matrix(library, 16, 1.0)).unwrap();
        let (l, _) = normalize_rows(&rng.normal_matrix(library, 16, 1.0)).unwrap();
        for (h, (_, acc)) in hits.iter_mut().zip(retrieval_topn(&q, &l, &truth, &ns, scope, &batches, &batches).unwrap()) {
            *h += acc / trials as f64;
        }
    }
    hits.to_vec()
}

#[test]
fn c6_random_retrieval_baseline() {
    let mut rng = RngStream::new(6, "random-retrieval");
    // 1600 libraries of 63 give ~1e5 queries
    let batch = random_retrieval(63, 1600, Scope::Batch, &mut rng);
    let reference = [1.58, 7.90, 15.81];
    let batch_ok = batch.iter().zip(reference).all(|(a, r)| (100.0 * a - r).abs() <= 0.3);
    let whole = random_retrieval(100, 1000, Scope::Whole, &mut rng);
    let whole_ok = whole.iter().zip([1.0, 5.0, 10.0]).all(|(a, n)| (a / (n / 100.0) - 1.0).abs() <= 0.10);
    let detail = format!(
        "batch L=63 top-1/5/10 = {:.2}/{:.2}/{:.2}%; whole L=100 = {:.2}/{:.2}/{:.2}%",
        100.0 * batch[0],
        100.0 * batch[1],
        100.0 * batch[2],
        100.0 * whole[0],
        100.0 * whole[1],
        100.0 * whole[2]
    );
    assert!(report(6, "random retrieval baseline", batch_ok && whole_ok, &detail));
}

// ── 7. Fairness experiment ──────────────────────────────────────────────────

fn adult_dir() -> PathBuf {
    std::env::var_os("INFOCORE_ADULT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data/adult"))
}

fn fairness_config() -> Option<ExperimentConfig> {
    let dir = adult_dir();
    if !dir.join("adult.data").exists() || !dir.join("adult.test").exists() {
        return None;
    }
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/adult_fairness.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    let tab = cfg.tabular.as_mut().unwrap();
    tab.train = dir.join("adult.data");
    tab.test = dir.join("adult.test");
    Some(cfg)
}

const FAIRNESS_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[test]
fn c7_fairness_experiment() {
    let Some(base) = fairness_config() else {
        println!("criterion 7 [fairness experiment]: NOT RUN (no Adult data under {}; set INFOCORE_ADULT_DIR)", adult_dir().display());
        return;
    };
    let start = std::time::Instant::now();
    let kinds = [ObjectiveKind::Clip, ObjectiveKind::Infocore];
    let mut runs = Vec::new();
    for seed in FAIRNESS_SEEDS {
        let mut cfg = base.clone();
        cfg.apply_seed(seed);
        runs.push(compare_objectives(&cfg, &kinds).unwrap());
    }
    let med = |kind: ObjectiveKind, metric: &str| {
        median(runs.iter().map(|r| r.iter().find(|(k, _)| *k == kind).unwrap().1.get(metric).unwrap()).collect())
    };
    let (eo_ic, eo_clip) = (med(ObjectiveKind::Infocore, "fairness/eo"), med(ObjectiveKind::Clip, "fairness/eo"));
    let (acc_ic, acc_clip) = (med(ObjectiveKind::Infocore, "fairness/accuracy"), med(ObjectiveKind::Clip, "fairness/accuracy"));
    let pass = eo_ic < eo_clip && (acc_ic - acc_clip).abs() <= 0.010;
    let detail = format!(
        "medians over {} seeds: accuracy infocore {:.2}% clip {:.2}%; EO infocore {:.2} clip {:.2}; {:.0}s",
        FAIRNESS_SEEDS.len(),
        100.0 * acc_ic,
        100.0 * acc_clip,
        100.0 * eo_ic,
        100.0 * eo_clip,
        start.elapsed().as_secs_f64()
    );
    gate_study(report(7, "fairness experiment", pass, &detail));
}

// ── 8. Determinism and persistence ──────────────────────────────────────────

const TINY_CONFIG: &str = r#"{
  "sim": {"n_samples": 300, "n_batches": 6, "per_batch": 50},
  "model": {"embedding_dim": 4, "encoder_hidden": [32], "classifier_hidden": [16]},
  "trainer": {"epochs": 3, "batch_size": 32},
  "eval": {"knn_k": 5, "probe": {"steps": 100}}
}"#;

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_infocore")).args(args).env("RUST_LOG", "warn").status().unwrap();
    assert!(status.success(), "infocore {args:?} failed: {status}");
}

/// Training log with the wall-clock field removed.
fn log_without_wall_time(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn c8_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.json");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();

    // library route: evaluation before saving equals evaluation after loading
    let mut cfg = ExperimentConfig::load(&cfg_path).unwrap();
    cfg.out = dir.path().join("lib");
    let outcome = pipeline::train(&cfg).unwrap();
    let before = pipeline::eval_all(&outcome.bundle, &outcome.data, &cfg).unwrap();
    let ckpt = cfg.out.join(pipeline::CHECKPOINT_FILE);
    infocore::persist::save_checkpoint(&ckpt, &outcome.bundle).unwrap();
    let loaded = pipeline::load_bundle(&ckpt).unwrap();
    let after = pipeline::eval_all(&loaded, &outcome.data, &cfg).unwrap();
    let persist_ok = loaded == outcome.bundle && before == after;

    // CLI route: two runs with the same seed
    let runs: Vec<PathBuf> = ["run_a", "run_b"].iter().map(|r| dir.path().join(r)).collect();
    for out in &runs {
        let sim = out.join("sim.csv");
        run_cli(&["sim-gen", "--config", cfg_path.to_str().unwrap(), "--seed", "8", "--out", sim.to_str().unwrap()]);
        run_cli(&["train", "--config", cfg_path.to_str().unwrap(), "--seed", "8", "--data", sim.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        run_cli(&["eval", "retrieval", "--scope", "batch", "--config", cfg_path.to_str().unwrap(), "--seed", "8", "--data", sim.to_str().unwrap(), "--out", out.join("eval").to_str().unwrap(), "--checkpoint", out.join("model.v1.ckpt").to_str().unwrap()]);
    }
    let files = ["sim.csv", "sim.csv.meta.json", "model.v1.ckpt", "metrics.json", "metrics.csv", "embeddings.csv", "eval/metrics.json", "eval/retrieval.csv"];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(runs[0].join(f)).unwrap() != std::fs::read(runs[1].join(f)).unwrap() {
            differing.push(f);
        }
    }
    let logs_equal = log_without_wall_time(&runs[0].join("training_log.ndjson")) == log_without_wall_time(&runs[1].join("training_log.ndjson"));
    let pass = persist_ok && differing.is_empty() && logs_equal;
    let detail = format!(
        "reload identical: {persist_ok}; byte-identical files: {}/{}; training log equal modulo wall_time: {logs_equal}",
        files.len() - differing.len(),
        files.len()
    );
    assert!(report(8, "determinism and persistence", pass, &detail));
}
