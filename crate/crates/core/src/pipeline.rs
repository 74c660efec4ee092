//! End-to-end runs: load or generate data, train, evaluate, and write the
//! output files. The command-line front end is a thin layer over this.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataio::{format_float, load_paired_csv, load_tabular_pair, subsample_groups, PairedDataset};
use crate::error::{Error, Result};
use crate::eval::{
    entropy_batch_mixing, fairness_metrics, knn_purity, linear_probe_cv, retrieval_csv, retrieval_topn, MetricReport, Probe, Scope,
};
use crate::frameworks::{clf_loss_value, clip_loss_value, fit, log_to_ndjson, step_gradients, ExtraCandidates, LogRecord, ModelBundle, StepInputs};
use crate::nn::{Activation, Architecture, Networks, Parameters};
use crate::numkern::{finite_difference_gradient, max_relative_error, normalize_rows, softmax_rows, Matrix, RngStream};
use crate::objectives::{cmi_bound_report, Mixing, ObjectiveConfig, ObjectiveKind};
use crate::persist::{load_checkpoint, save_checkpoint, write_atomic};
use crate::simgen::{generate_simulation, read_metadata, stratified_split};

pub const CHECKPOINT_FILE: &str = "model.v1.ckpt";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TRAINING_LOG: &str = "training_log.ndjson";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const RETRIEVAL_CSV: &str = "retrieval.csv";

/// Training and evaluation slices of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: PairedDataset,
    pub eval: PairedDataset,
}

/// Load the configured data source: a paired CSV, a tabular train/test
/// pair, or (when neither is set) a freshly generated simulation.
pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    if let Some(path) = &cfg.data {
        let ds = load_paired_csv(path)?;
        let (train, holdout) = match read_metadata(path)? {
            Some(meta) => (meta.train, meta.holdout),
            None => {
                let mut rng = RngStream::new(cfg.seed, "split");
                stratified_split(&ds.batch, ds.n_batches(), cfg.eval.holdout_fraction, &mut rng)
            }
        };
        if train.iter().chain(&holdout).any(|&i| i >= ds.len()) {
            return Err(Error::Data(format!("split metadata does not match {}", path.display())));
        }
        return Ok(ExperimentData { train: ds.subset(&train), eval: ds.subset(&holdout) });
    }
    if let (Some(src), Some(mapping)) = (&cfg.tabular, cfg.load_mapping()?) {
        let (train, test, _) = load_tabular_pair(&src.train, &src.test, &mapping)?;
        let train = match src.subsample {
            Some(ratios) => subsample_groups(&train, &ratios, &mut RngStream::new(cfg.seed, "subsample"))?,
            None => train,
        };
        train.validate_fairness()?;
        return Ok(ExperimentData { train, eval: test });
    }
    let (sim, _) = generate_simulation(&cfg.sim)?;
    Ok(ExperimentData { train: sim.dataset.subset(&sim.train), eval: sim.dataset.subset(&sim.holdout) })
}

pub fn build_bundle(cfg: &ExperimentConfig, train: &PairedDataset) -> Result<ModelBundle> {
    let arch = Architecture {
        drug_dim: train.x_d.cols(),
        screen_dim: train.x_g.cols(),
        embedding_dim: cfg.model.embedding_dim,
        encoder_hidden: cfg.model.encoder_hidden.clone(),
        classifier_hidden: cfg.model.classifier_hidden.clone(),
        n_batches: train.n_batches(),
        activation: cfg.model.activation,
        cell_line_heads: (cfg.model.cell_line_heads && train.n_cell_lines() > 1).then_some(train.n_cell_lines()),
    };
    ModelBundle::init(arch, cfg.objective, cfg.trainer.clone(), cfg.augment, train.batch_vocab.clone(), train.cell_vocab.clone())
}

pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<LogRecord>,
    pub data: ExperimentData,
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let bundle = build_bundle(cfg, &data.train)?;
    let rows: Vec<usize> = (0..data.train.len()).collect();
    info!(
        "training {} on {} rows ({} epochs, batch {})",
        cfg.objective.objective,
        rows.len(),
        cfg.trainer.epochs,
        cfg.trainer.batch_size
    );
    let state = fit(bundle, &data.train, &rows)?;
    Ok(TrainOutcome { bundle: state.bundle, log: state.log, data })
}

// ── Evaluation ──────────────────────────────────────────────────────────────

/// Re-express `ds` batch ids in the bundle's vocabulary.
fn bundle_batches(bundle: &ModelBundle, ds: &PairedDataset) -> Result<Vec<usize>> {
    ds.batch
        .iter()
        .map(|&b| {
            let name = &ds.batch_vocab.names[b];
            bundle.batch_vocab.get(name).ok_or_else(|| Error::Data(format!("batch '{name}' unseen in training")))
        })
        .collect()
}

/// Screen-to-drug retrieval: each screen embedding queries the drug library.
pub fn eval_retrieval(bundle: &ModelBundle, ds: &PairedDataset, ns: &[usize], scope: Scope) -> Result<(MetricReport, Vec<(usize, f64)>)> {
    let (z_d, z_g) = bundle.embed(ds)?;
    let truth: Vec<usize> = (0..ds.len()).collect();
    let rows = retrieval_topn(&z_g, &z_d, &truth, ns, scope, &ds.batch, &ds.batch)?;
    let mut report = MetricReport::default();
    let scope_name = match scope {
        Scope::Whole => "whole",
        Scope::Batch => "batch",
    };
    for &(n, acc) in &rows {
        report.insert(format!("retrieval/{scope_name}/top{n}"), acc, None, &[("library", ds.len().to_string())]);
    }
    Ok((report, rows))
}

fn effect_labels(ds: &PairedDataset) -> Option<Vec<usize>> {
    let labels = ds.labels.as_ref()?;
    let min = *labels.iter().min()?;
    Some(labels.iter().map(|&l| (l - min) as usize).collect())
}

/// Linear-probe accuracy of both representations for batch id and, when
/// labels exist, for the label.
pub fn eval_probe(bundle: &ModelBundle, ds: &PairedDataset, cfg: &ExperimentConfig) -> Result<MetricReport> {
    let (z_d, z_g) = bundle.embed(ds)?;
    let mut report = MetricReport::default();
    let folds = [("folds", cfg.eval.probe.folds.to_string())];
    for (name, z) in [("screen", &z_g), ("drug", &z_d)] {
        let r = linear_probe_cv(z, &ds.batch, &cfg.eval.probe)?;
        report.insert(format!("probe/{name}/batch"), r.mean, Some(r.std), &folds);
        if let Some(labels) = effect_labels(ds) {
            let r = linear_probe_cv(z, &labels, &cfg.eval.probe)?;
            report.insert(format!("probe/{name}/effect"), r.mean, Some(r.std), &folds);
        }
    }
    Ok(report)
}

/// KNN purity against the input features and batch-mixing entropy.
pub fn eval_mixing(bundle: &ModelBundle, ds: &PairedDataset, cfg: &ExperimentConfig) -> Result<MetricReport> {
    let (z_d, z_g) = bundle.embed(ds)?;
    let k = cfg.eval.knn_k;
    let params = [("k", k.to_string())];
    let mut report = MetricReport::default();
    for (name, z, x) in [("screen", &z_g, &ds.x_g), ("drug", &z_d, &ds.x_d)] {
        let h = entropy_batch_mixing(z, &ds.batch, k, cfg.eval.distance, cfg.eval.normalize_entropy)?;
        report.insert(format!("mixing_entropy/{name}"), h, None, &params);
        let p = knn_purity(x, z, &ds.batch, k, cfg.eval.distance)?;
        report.insert(format!("knn_purity/{name}"), p, None, &params);
    }
    Ok(report)
}

/// Frozen screen embeddings, a small head trained on the training slice,
/// and group-fairness gaps on the evaluation slice.
pub fn eval_fairness(bundle: &ModelBundle, train: &PairedDataset, eval: &PairedDataset, cfg: &ExperimentConfig) -> Result<MetricReport> {
    train.validate_fairness()?;
    let labels = |ds: &PairedDataset| -> Vec<usize> { ds.labels.as_ref().map(|l| l.iter().map(|&v| v as usize).collect()).unwrap_or_default() };
    let (_, z_train) = bundle.embed(train)?;
    let (_, z_eval) = bundle.embed(eval)?;
    let probe = Probe::fit(&z_train, &labels(train), 2, &cfg.eval.fairness_probe, &mut RngStream::new(cfg.eval.fairness_probe.seed, "fairness"))?;
    let pred = probe.predict(&z_eval)?;
    let r = fairness_metrics(&pred, &labels(eval), &eval.subgroups()?)?;
    let mut report = MetricReport::default();
    report.insert("fairness/accuracy", r.accuracy, None, &[]);
    report.insert("fairness/eo", r.eo, None, &[]);
    report.insert("fairness/eopp", r.eopp, None, &[]);
    report.insert("fairness/dp", r.dp, None, &[]);
    Ok(report)
}

/// Contrastive bound estimate with the trained critic and classifiers.
pub fn eval_bound(bundle: &ModelBundle, ds: &PairedDataset) -> Result<MetricReport> {
    let (z_d, z_g) = bundle.embed(ds)?;
    let post_d = softmax_rows(&bundle.networks.clf_d.forward(&z_d)?);
    let post_g = softmax_rows(&bundle.networks.clf_g.forward(&z_g)?);
    let batches = bundle_batches(bundle, ds)?;
    let est = cmi_bound_report(&z_g, &z_d, &post_g, &post_d, &batches, &bundle.objective)?;
    let mut report = MetricReport::default();
    report.insert("bound/value", est.value, None, &[]);
    for (k, v) in est.components {
        report.insert(format!("bound/{k}"), v, None, &[]);
    }
    Ok(report)
}

/// Every evaluation applicable to the data.
pub fn eval_all(bundle: &ModelBundle, data: &ExperimentData, cfg: &ExperimentConfig) -> Result<MetricReport> {
    let ds = &data.eval;
    let mut report = MetricReport::default();
    if data.train.group_a.is_some() && data.train.group_b.is_some() {
        report.merge("", eval_fairness(bundle, &data.train, ds, cfg)?);
        return Ok(report);
    }
    report.merge("", eval_retrieval(bundle, ds, &cfg.eval.retrieval_ns, cfg.eval.scope)?.0);
    report.merge("", eval_probe(bundle, ds, cfg)?);
    report.merge("", eval_mixing(bundle, ds, cfg)?);
    report.merge("", eval_bound(bundle, ds)?);
    Ok(report)
}

// ── Output files ────────────────────────────────────────────────────────────

pub fn embeddings_csv(ds: &PairedDataset, z_d: &Matrix, z_g: &Matrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "batch_id".to_string()];
    header.extend((0..z_d.cols()).map(|k| format!("zd_{k}")));
    header.extend((0..z_g.cols()).map(|k| format!("zg_{k}")));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.ids[i].clone(), ds.batch_vocab.names[ds.batch[i]].clone()];
        rec.extend(z_d.row(i).iter().map(|v| format_float(*v)));
        rec.extend(z_g.row(i).iter().map(|v| format_float(*v)));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_report(out: &Path, report: &MetricReport) -> Result<()> {
    write_atomic(&out.join(METRICS_JSON), &report.to_json()?)?;
    write_atomic(&out.join(METRICS_CSV), &report.to_csv()?)
}

/// Train, save the checkpoint, evaluate and write every output file.
pub fn run_train(cfg: &ExperimentConfig) -> Result<MetricReport> {
    let outcome = train(cfg)?;
    let out = &cfg.out;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &outcome.bundle)?;
    write_atomic(&out.join(TRAINING_LOG), &log_to_ndjson(&outcome.log)?)?;
    let (z_d, z_g) = outcome.bundle.embed(&outcome.data.eval)?;
    write_atomic(&out.join(EMBEDDINGS_CSV), &embeddings_csv(&outcome.data.eval, &z_d, &z_g)?)?;
    let report = eval_all(&outcome.bundle, &outcome.data, cfg)?;
    write_report(out, &report)?;
    Ok(report)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    load_checkpoint(path)
}

pub fn write_retrieval(out: &Path, rows: &[(usize, f64)]) -> Result<()> {
    write_atomic(&out.join(RETRIEVAL_CSV), &retrieval_csv(rows)?)
}

/// Train and evaluate one model per objective on the same data, keeping
/// every other setting of `base`.
pub fn compare_objectives(base: &ExperimentConfig, objectives: &[ObjectiveKind]) -> Result<Vec<(ObjectiveKind, MetricReport)>> {
    base.validate()?;
    let data = load_data(base)?;
    let rows: Vec<usize> = (0..data.train.len()).collect();
    objectives
        .iter()
        .map(|&kind| {
            let mut cfg = base.clone();
            cfg.objective.objective = kind;
            let bundle = fit(build_bundle(&cfg, &data.train)?, &data.train, &rows)?.bundle;
            Ok((kind, eval_all(&bundle, &data, &cfg)?))
        })
        .collect()
}

// ── Gradient check suite ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub objective: ObjectiveKind,
    pub mixing: Mixing,
    pub alpha: f64,
    pub lambda: f64,
    pub queue: bool,
    pub max_rel_error_encoders: f64,
    pub max_rel_error_classifiers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub samples: usize,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub cases: Vec<GradcheckCase>,
}

pub const GRADCHECK_EPS: f64 = 1e-5;
/// Magnitude below which gradient entries are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

fn tensors_of(nets: &Networks, encoders: bool) -> Vec<Matrix> {
    let mut t = if encoders { nets.enc_d.tensors() } else { nets.clf_d.tensors() };
    t.extend(if encoders { nets.enc_g.tensors() } else { nets.clf_g.tensors() });
    t.into_iter().cloned().collect()
}

fn set_tensor(nets: &mut Networks, encoders: bool, k: usize, value: &Matrix) {
    let mut t = if encoders { nets.enc_d.tensors_mut() } else { nets.clf_d.tensors_mut() };
    t.extend(if encoders { nets.enc_g.tensors_mut() } else { nets.clf_g.tensors_mut() });
    *t[k] = value.clone();
}

/// Finite-difference check of every encoder and classifier gradient on a
/// 16-sample toy.
///
/// Encoder gradients are checked against a surrogate in which the
/// classifier inputs move by `lambda` times the embedding change, which is
/// what the scaled backward pass differentiates. Classifier gradients are
/// checked against `L_CLIP + L_CLF` with the embeddings fixed.
pub fn gradcheck_suite(seed: u64) -> Result<GradcheckReport> {
    const N: usize = 16;
    let mut rng = RngStream::new(seed, "gradcheck");
    let x_d = rng.normal_matrix(N, 5, 1.0);
    let x_g = rng.normal_matrix(N, 4, 1.0);
    let batch_ids: Vec<usize> = (0..N).map(|i| i % 3).collect();
    let cells = vec![0; N];
    let arch = Architecture {
        drug_dim: 5,
        screen_dim: 4,
        embedding_dim: 3,
        encoder_hidden: vec![6],
        classifier_hidden: vec![4],
        n_batches: 3,
        activation: Activation::Tanh,
        cell_line_heads: None,
    };
    let nets = Networks::init(&arch, &mut rng.fork("nets"))?;
    let queue = {
        let (e, _) = normalize_rows(&rng.normal_matrix(5, 3, 1.0))?;
        ExtraCandidates { embeddings: e, posteriors: softmax_rows(&rng.normal_matrix(5, 3, 1.0)), batch_ids: vec![0, 1, 2, 1, 0] }
    };
    let z0_g = nets.enc_g.forward(&x_g, &cells)?;
    let z0_d = nets.enc_d.forward(&x_d, &cells)?;

    let mut cases = Vec::new();
    let variants = [
        (ObjectiveKind::Clip, Mixing::Arithmetic),
        (ObjectiveKind::Ccl, Mixing::Arithmetic),
        (ObjectiveKind::Infocore, Mixing::Arithmetic),
        (ObjectiveKind::Infocore, Mixing::Geometric),
    ];
    for (objective, mixing) in variants {
        for lambda in [0.0, 0.1, 1.0] {
            for alpha in [0.0, 0.33, 0.83, 1.0] {
                for use_queue in [false, true] {
                    let cfg = ObjectiveConfig { objective, mixing, alpha, lambda, tau: 0.5 };
                    let extra = use_queue.then_some(&queue);
                    let inp = StepInputs { x_d: &x_d, x_g: &x_g, cells: &cells, batch_ids: &batch_ids, extra_d: extra, extra_g: extra };
                    let g = step_gradients(&nets, &inp, &cfg)?;

                    let mut enc_grad = g.enc_d.tensors();
                    enc_grad.extend(g.enc_g.tensors());
                    let mut err_enc: f64 = 0.0;
                    for (k, base) in tensors_of(&nets, true).iter().enumerate() {
                        let numeric = finite_difference_gradient(
                            |x| {
                                let mut trial = nets.clone();
                                set_tensor(&mut trial, true, k, x);
                                let eval = || -> Result<f64> {
                                    let z_g = trial.enc_g.forward(&x_g, &cells)?;
                                    let z_d = trial.enc_d.forward(&x_d, &cells)?;
                                    let pin_g = z0_g.add(&z_g.sub(&z0_g)?.scale(lambda))?;
                                    let pin_d = z0_d.add(&z_d.sub(&z0_d)?.scale(lambda))?;
                                    clip_loss_value(&trial, &inp, &cfg, Some((&pin_g, &pin_d)))
                                };
                                eval().unwrap_or(f64::NAN)
                            },
                            base,
                            GRADCHECK_EPS,
                        )?;
                        err_enc = err_enc.max(max_relative_error(enc_grad[k], &numeric, GRADCHECK_FLOOR));
                    }

                    let clf_total: Vec<Matrix> = {
                        let mut a = g.clf_d_clip.tensors();
                        a.extend(g.clf_g_clip.tensors());
                        let mut b = g.clf_d.tensors();
                        b.extend(g.clf_g.tensors());
                        a.iter().zip(b).map(|(x, y)| x.add(y)).collect::<Result<_>>()?
                    };
                    let mut err_clf: f64 = 0.0;
                    for (k, base) in tensors_of(&nets, false).iter().enumerate() {
                        let numeric = finite_difference_gradient(
                            |x| {
                                let mut trial = nets.clone();
                                set_tensor(&mut trial, false, k, x);
                                let l_clip = clip_loss_value(&trial, &inp, &cfg, None).unwrap_or(f64::NAN);
                                let l_clf = clf_loss_value(&trial, &z0_g, &z0_d, &batch_ids).unwrap_or(f64::NAN);
                                l_clip + l_clf
                            },
                            base,
                            GRADCHECK_EPS,
                        )?;
                        err_clf = err_clf.max(max_relative_error(&clf_total[k], &numeric, GRADCHECK_FLOOR));
                    }
                    cases.push(GradcheckCase {
                        objective,
                        mixing,
                        alpha,
                        lambda,
                        queue: use_queue,
                        max_rel_error_encoders: err_enc,
                        max_rel_error_classifiers: err_clf,
                    });
                }
            }
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error_encoders.max(c.max_rel_error_classifiers)).fold(0.0, f64::max);
    Ok(GradcheckReport { samples: N, parameters: nets.parameter_count(), max_rel_error, cases })
}
