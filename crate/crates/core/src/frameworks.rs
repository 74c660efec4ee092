//! Training orchestration: batch construction, negative sourcing (in-batch
//! or momentum queues), and the alternating encoder/classifier update.
//!
//! Each step first updates both encoders on the contrastive loss with the
//! classifiers held fixed, then updates both classifiers on the batch
//! cross-entropy of the (detached) embeddings. Gradients reaching the
//! embeddings through the posterior path are multiplied by lambda.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_screen_batch, AugmentConfig};
use crate::dataio::{PairedDataset, Vocab};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Encoder, MomentumState, Mlp, Modality, Networks, Parameters, QueueItem, QueueKey, QueueScope};
use crate::numkern::{softmax_rows, softmax_rows_backward, Matrix, RngStream};
use crate::objectives::{
    c_diagnostic, classifier_loss_from_logits, objective_direction, DirectionInputs, ObjectiveConfig, ObjectiveKind,
};
use crate::optim::{Optimizer, OptimizerConfig};

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    /// Negatives from the current batch only.
    #[default]
    Simclr,
    /// Current batch plus FIFO queues of momentum-encoder outputs.
    Moco,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub classifier_lr: f64,
    pub optimizer: OptimizerConfig,
    pub framework: Framework,
    /// Alternate random batches with single-cell-line batches.
    pub alternate_by_cell: bool,
    pub momentum: f64,
    pub queue_capacity: usize,
    /// Largest number of conditions for which CCL keeps per-condition queues.
    pub max_ccl_conditions: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            classifier_lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            framework: Framework::Simclr,
            alternate_by_cell: false,
            momentum: 0.99,
            queue_capacity: 1024,
            max_ccl_conditions: 8,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size = {} must be >= 2", self.batch_size)));
        }
        for (name, lr) in [("lr", self.lr), ("classifier_lr", self.classifier_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} = {lr} must be > 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum = {} must lie in [0, 1]", self.momentum)));
        }
        Ok(())
    }
}

// ── Gradient scaling ────────────────────────────────────────────────────────

/// Identity forward, backward gradient multiplied by `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradScale {
    pub lambda: f64,
}

impl GradScale {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda = {lambda} must be finite and >= 0")));
        }
        Ok(Self { lambda })
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    pub fn backward(&self, grad: &Matrix) -> Matrix {
        grad.scale(self.lambda)
    }
}

// ── Model bundle ────────────────────────────────────────────────────────────

/// Everything needed to embed new data and to resume evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub architecture: Architecture,
    pub networks: Networks,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
    pub augment: AugmentConfig,
    pub batch_vocab: Vocab,
    pub cell_vocab: Vocab,
}

impl ModelBundle {
    pub fn init(
        architecture: Architecture,
        objective: ObjectiveConfig,
        trainer: TrainerConfig,
        augment: AugmentConfig,
        batch_vocab: Vocab,
        cell_vocab: Vocab,
    ) -> Result<Self> {
        let networks = Networks::init(&architecture, &mut RngStream::new(trainer.seed, "init"))?;
        Ok(Self { architecture, networks, objective, trainer, augment, batch_vocab, cell_vocab })
    }

    /// Unit-norm drug and screen embeddings for every row.
    pub fn embed(&self, ds: &PairedDataset) -> Result<(Matrix, Matrix)> {
        let cells = self.map_cells(ds)?;
        let z_d = self.networks.enc_d.forward(&ds.x_d, &cells)?;
        let z_g = self.networks.enc_g.forward(&ds.x_g, &cells)?;
        Ok((z_d, z_g))
    }

    /// Translate dataset cell-line ids into this bundle's vocabulary.
    fn map_cells(&self, ds: &PairedDataset) -> Result<Vec<usize>> {
        if self.networks.enc_d.heads.is_none() {
            return Ok(vec![0; ds.len()]);
        }
        ds.cell_line
            .iter()
            .map(|&c| {
                let name = &ds.cell_vocab.names[c];
                self.cell_vocab.get(name).ok_or_else(|| Error::Data(format!("cell line '{name}' unseen in training")))
            })
            .collect()
    }
}

// ── Batches ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBatch {
    /// Positions into the training rows.
    pub rows: Vec<usize>,
    /// Set when every row comes from this cell line by construction.
    pub pure_cell: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<TrainBatch>,
    pub steps_per_epoch: usize,
    /// Cell-line batches drawn with replacement because the line was small.
    pub with_replacement: usize,
}

/// The batch sequence for all epochs.
///
/// Without alternation (or with a single cell line) each epoch is a fresh
/// permutation cut into consecutive batches. With alternation, odd steps
/// sample uniformly without replacement and even steps sample from one
/// uniformly chosen cell line.
pub fn build_training_batches(cells: &[usize], cfg: &TrainerConfig, rng: &mut RngStream) -> Result<BatchPlan> {
    let n = cells.len();
    if n == 0 {
        return Err(Error::Data("no training rows".into()));
    }
    let bs = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut by_cell: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in cells.iter().enumerate() {
        by_cell.entry(c).or_default().push(i);
    }
    let alternate = cfg.alternate_by_cell && by_cell.len() > 1;
    let lines: Vec<&Vec<usize>> = by_cell.values().collect();
    let line_ids: Vec<usize> = by_cell.keys().copied().collect();
    let mut batches = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut with_replacement = 0;
    for _ in 0..cfg.epochs {
        if !alternate {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let mut chunks: Vec<Vec<usize>> = perm.chunks(bs).map(<[usize]>::to_vec).collect();
            if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < 2) {
                let tail = chunks.pop().unwrap_or_default();
                if let Some(prev) = chunks.last_mut() {
                    prev.extend(tail);
                }
            }
            batches.extend(chunks.into_iter().map(|rows| TrainBatch { rows, pure_cell: None }));
            continue;
        }
        for _ in 0..steps_per_epoch {
            let step = batches.len() + 1;
            if step % 2 == 1 {
                batches.push(TrainBatch { rows: rng.sample_without_replacement(n, bs), pure_cell: None });
            } else {
                let k = rng.index(lines.len());
                let members = lines[k];
                let rows = if members.len() >= bs {
                    rng.sample_without_replacement(members.len(), bs).into_iter().map(|j| members[j]).collect()
                } else {
                    with_replacement += 1;
                    (0..bs).map(|_| members[rng.index(members.len())]).collect()
                };
                batches.push(TrainBatch { rows, pure_cell: Some(line_ids[k]) });
            }
        }
    }
    if with_replacement > 0 {
        warn!("{with_replacement} cell-line batches sampled with replacement (line smaller than batch size)");
    }
    Ok(BatchPlan { batches, steps_per_epoch, with_replacement })
}

// ── Loss and gradients for one batch ────────────────────────────────────────

/// Extra candidates appended after the in-batch ones (constants).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraCandidates {
    pub embeddings: Matrix,
    pub posteriors: Matrix,
    pub batch_ids: Vec<usize>,
}

/// Inputs to one contrastive step.
#[derive(Debug, Clone)]
pub struct StepInputs<'a> {
    pub x_d: &'a Matrix,
    pub x_g: &'a Matrix,
    pub cells: &'a [usize],
    pub batch_ids: &'a [usize],
    /// Drug candidates for screen anchors.
    pub extra_d: Option<&'a ExtraCandidates>,
    /// Screen candidates for drug anchors.
    pub extra_g: Option<&'a ExtraCandidates>,
}

#[derive(Debug, Clone)]
pub struct StepGradients {
    pub l_clip: f64,
    pub l_clf: f64,
    pub c_diagnostic: f64,
    /// `∂L_CLIP/∂θ` for the drug and screen encoders, posterior path scaled by lambda.
    pub enc_d: Encoder,
    pub enc_g: Encoder,
    /// `∂L_CLIP/∂θ` for the classifiers (zero unless the objective reweights).
    pub clf_d_clip: Mlp,
    pub clf_g_clip: Mlp,
    /// `∂L_CLF/∂θ` for the classifiers.
    pub clf_d: Mlp,
    pub clf_g: Mlp,
}

fn append(block: &Matrix, extra: Option<&Matrix>) -> Result<Matrix> {
    match extra {
        Some(e) if e.rows() > 0 => block.vstack(e),
        _ => Ok(block.clone()),
    }
}

fn top_rows(m: &Matrix, k: usize) -> Matrix {
    m.select_rows(&(0..k).collect::<Vec<_>>())
}

/// Contrastive loss on embeddings, with posteriors computed by the
/// classifiers from `post_in_g` / `post_in_d` (normally the embeddings
/// themselves). Returned for finite-difference checks.
pub fn clip_loss_value(
    nets: &Networks,
    inp: &StepInputs<'_>,
    cfg: &ObjectiveConfig,
    post_in: Option<(&Matrix, &Matrix)>,
) -> Result<f64> {
    let z_d = nets.enc_d.forward(inp.x_d, inp.cells)?;
    let z_g = nets.enc_g.forward(inp.x_g, inp.cells)?;
    let (pin_g, pin_d) = post_in.unwrap_or((&z_g, &z_d));
    let p_g = softmax_rows(&nets.clf_g.forward(pin_g)?);
    let p_d = softmax_rows(&nets.clf_d.forward(pin_d)?);
    Ok(contrastive(&z_g, &z_d, &p_g, &p_d, inp, cfg)?.loss)
}

/// Classifier loss for fixed embeddings.
pub fn clf_loss_value(nets: &Networks, z_g: &Matrix, z_d: &Matrix, batch_ids: &[usize]) -> Result<f64> {
    let (lg, _) = classifier_loss_from_logits(&nets.clf_g.forward(z_g)?, batch_ids)?;
    let (ld, _) = classifier_loss_from_logits(&nets.clf_d.forward(z_d)?, batch_ids)?;
    Ok(0.5 * (lg + ld))
}

struct Contrastive {
    loss: f64,
    grad_z_g: Matrix,
    grad_z_d: Matrix,
    grad_p_g: Option<Matrix>,
    grad_p_d: Option<Matrix>,
}

/// Symmetric loss with in-batch plus extra candidates; gradients are
/// unscaled by lambda.
fn contrastive(z_g: &Matrix, z_d: &Matrix, p_g: &Matrix, p_d: &Matrix, inp: &StepInputs<'_>, cfg: &ObjectiveConfig) -> Result<Contrastive> {
    let k = z_g.rows();
    let inv_tau = 1.0 / cfg.tau;
    let cand_d = append(z_d, inp.extra_d.map(|e| &e.embeddings))?;
    let cand_g = append(z_g, inp.extra_g.map(|e| &e.embeddings))?;
    let cand_pd = append(p_d, inp.extra_d.map(|e| &e.posteriors))?;
    let cand_pg = append(p_g, inp.extra_g.map(|e| &e.posteriors))?;
    let mut ids_d = inp.batch_ids.to_vec();
    ids_d.extend(inp.extra_d.map(|e| e.batch_ids.clone()).unwrap_or_default());
    let mut ids_g = inp.batch_ids.to_vec();
    ids_g.extend(inp.extra_g.map(|e| e.batch_ids.clone()).unwrap_or_default());

    // embeddings are unit norm, so dot products are cosines
    let sim_g = z_g.matmul_nt(&cand_d)?.scale(inv_tau);
    let sim_d = z_d.matmul_nt(&cand_g)?.scale(inv_tau);
    let reweight = cfg.objective == ObjectiveKind::Infocore;
    let dir_g = objective_direction(
        cfg,
        DirectionInputs {
            sim: &sim_g,
            anchor_post: reweight.then_some(p_g),
            cand_post: reweight.then_some(&cand_pd),
            anchor_batches: inp.batch_ids,
            cand_batches: &ids_d,
        },
    )?;
    let dir_d = objective_direction(
        cfg,
        DirectionInputs {
            sim: &sim_d,
            anchor_post: reweight.then_some(p_d),
            cand_post: reweight.then_some(&cand_pg),
            anchor_batches: inp.batch_ids,
            cand_batches: &ids_g,
        },
    )?;
    let half = 0.5 * inv_tau;
    // sim_g = z_g · cand_dᵀ / τ ;  sim_d = z_d · cand_gᵀ / τ
    let mut grad_z_g = dir_g.grad_sim.matmul(&cand_d)?.scale(half);
    let mut grad_z_d = dir_d.grad_sim.matmul(&cand_g)?.scale(half);
    grad_z_d.axpy(half, &top_rows(&dir_g.grad_sim.matmul_tn(z_g)?, k))?;
    grad_z_g.axpy(half, &top_rows(&dir_d.grad_sim.matmul_tn(z_d)?, k))?;
    let (grad_p_g, grad_p_d) = match (dir_g.grad_anchor_post, dir_g.grad_cand_post, dir_d.grad_anchor_post, dir_d.grad_cand_post) {
        (Some(ga_g), Some(gc_d), Some(ga_d), Some(gc_g)) => {
            let gp_g = ga_g.add(&top_rows(&gc_g, k))?.scale(0.5);
            let gp_d = ga_d.add(&top_rows(&gc_d, k))?.scale(0.5);
            (Some(gp_g), Some(gp_d))
        }
        _ => (None, None),
    };
    Ok(Contrastive { loss: 0.5 * (dir_g.loss + dir_d.loss), grad_z_g, grad_z_d, grad_p_g, grad_p_d })
}

/// Losses and all analytic gradients for one batch.
pub fn step_gradients(nets: &Networks, inp: &StepInputs<'_>, cfg: &ObjectiveConfig) -> Result<StepGradients> {
    let k = inp.batch_ids.len();
    if inp.x_d.rows() != k || inp.x_g.rows() != k || inp.cells.len() != k {
        return Err(Error::shape("training_step", "batch inputs differ in length"));
    }
    let scale = GradScale::new(cfg.lambda)?;
    let tr_d = nets.enc_d.forward_trace(inp.x_d, inp.cells)?;
    let tr_g = nets.enc_g.forward_trace(inp.x_g, inp.cells)?;
    let (z_d, z_g) = (&tr_d.embedding, &tr_g.embedding);

    let logits_g = nets.clf_g.forward(&scale.forward(z_g))?;
    let logits_d = nets.clf_d.forward(&scale.forward(z_d))?;
    let p_g = softmax_rows(&logits_g);
    let p_d = softmax_rows(&logits_d);
    let con = contrastive(z_g, z_d, &p_g, &p_d, inp, cfg)?;

    let mut grad_z_g = con.grad_z_g;
    let mut grad_z_d = con.grad_z_d;
    let (clf_g_clip, clf_d_clip) = match (&con.grad_p_g, &con.grad_p_d) {
        (Some(gp_g), Some(gp_d)) => {
            let (cg, dz_g) = nets.clf_g.backward_from_input(z_g, &softmax_rows_backward(&p_g, gp_g)?)?;
            let (cd, dz_d) = nets.clf_d.backward_from_input(z_d, &softmax_rows_backward(&p_d, gp_d)?)?;
            grad_z_g = grad_z_g.add(&scale.backward(&dz_g))?;
            grad_z_d = grad_z_d.add(&scale.backward(&dz_d))?;
            (cg, cd)
        }
        _ => (nets.clf_g.zeros_like(), nets.clf_d.zeros_like()),
    };
    let (enc_g, _) = nets.enc_g.backward(&tr_g, inp.cells, &grad_z_g)?;
    let (enc_d, _) = nets.enc_d.backward(&tr_d, inp.cells, &grad_z_d)?;

    // classifier loss on detached embeddings
    let (lg, dlg) = classifier_loss_from_logits(&logits_g, inp.batch_ids)?;
    let (ld, dld) = classifier_loss_from_logits(&logits_d, inp.batch_ids)?;
    let (clf_g, _) = nets.clf_g.backward_from_input(z_g, &dlg.scale(0.5))?;
    let (clf_d, _) = nets.clf_d.backward_from_input(z_d, &dld.scale(0.5))?;

    let mut c_total = 0.0;
    for (r, &b) in inp.batch_ids.iter().enumerate() {
        c_total += c_diagnostic(p_g.row(r), p_d.row(r), b, cfg.alpha, cfg.mixing)?;
    }
    Ok(StepGradients {
        l_clip: con.loss,
        l_clf: 0.5 * (lg + ld),
        c_diagnostic: c_total / k as f64,
        enc_d,
        enc_g,
        clf_d_clip,
        clf_g_clip,
        clf_d,
        clf_g,
    })
}

// ── Training state ──────────────────────────────────────────────────────────

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub l_clip: f64,
    pub l_clf: f64,
    pub c_diagnostic: f64,
    /// Seconds since training started; the only nondeterministic field.
    pub wall_time: f64,
}

pub struct TrainState {
    pub bundle: ModelBundle,
    pub enc_opt: Optimizer,
    pub clf_opt: Optimizer,
    pub momentum: Option<MomentumState>,
    pub step: u64,
    pub log: Vec<LogRecord>,
    /// Steps where a queue was empty and only in-batch negatives were used.
    pub queue_fallbacks: usize,
    framework: Framework,
    condition_queues: bool,
    cell_queues: bool,
    rng: RngStream,
    started: Instant,
}

impl TrainState {
    pub fn new(bundle: ModelBundle, n_conditions: usize, n_cell_lines: usize) -> Result<Self> {
        let cfg = bundle.trainer.clone();
        cfg.validate()?;
        bundle.objective.validate()?;
        bundle.augment.validate()?;
        let nets = &bundle.networks;
        let mut enc_tensors = nets.enc_d.tensors();
        enc_tensors.extend(nets.enc_g.tensors());
        let mut clf_tensors = nets.clf_d.tensors();
        clf_tensors.extend(nets.clf_g.tensors());
        let enc_opt = Optimizer::new(cfg.optimizer, cfg.lr, &enc_tensors)?;
        let clf_opt = Optimizer::new(cfg.optimizer, cfg.classifier_lr, &clf_tensors)?;

        let mut framework = cfg.framework;
        let ccl = bundle.objective.objective == ObjectiveKind::Ccl;
        if framework == Framework::Moco && ccl && n_conditions > cfg.max_ccl_conditions {
            warn!(
                "CCL with {n_conditions} conditions exceeds the per-condition queue limit {}; using in-batch negatives",
                cfg.max_ccl_conditions
            );
            framework = Framework::Simclr;
        }
        let condition_queues = framework == Framework::Moco && ccl;
        let cell_queues = framework == Framework::Moco && cfg.alternate_by_cell && n_cell_lines > 1;
        let momentum = if framework == Framework::Moco {
            let mut m = MomentumState::new(nets, cfg.momentum, cfg.queue_capacity)?;
            if condition_queues {
                for b in 0..n_conditions {
                    m.declare_scope(QueueScope::Condition(b), cfg.queue_capacity);
                }
            }
            if cell_queues {
                for c in 0..n_cell_lines {
                    m.declare_scope(QueueScope::CellLine(c), cfg.queue_capacity);
                }
            }
            Some(m)
        } else {
            None
        };
        let rng = RngStream::new(cfg.seed, "train");
        Ok(Self {
            bundle,
            enc_opt,
            clf_opt,
            momentum,
            step: 0,
            log: Vec::new(),
            queue_fallbacks: 0,
            framework,
            condition_queues,
            cell_queues,
            rng,
            started: Instant::now(),
        })
    }

    pub fn framework(&self) -> Framework {
        self.framework
    }

    /// Queue entries to use as extra candidates for this batch, per modality.
    pub fn negative_source(&mut self, batch_ids: &[usize], pure_cell: Option<usize>) -> Result<(Option<ExtraCandidates>, Option<ExtraCandidates>)> {
        let Some(m) = &self.momentum else {
            return Ok((None, None));
        };
        let scopes: Vec<QueueScope> = if self.condition_queues {
            let mut present = batch_ids.to_vec();
            present.sort_unstable();
            present.dedup();
            present.into_iter().map(QueueScope::Condition).collect()
        } else if let (true, Some(c)) = (self.cell_queues, pure_cell) {
            vec![QueueScope::CellLine(c)]
        } else {
            vec![QueueScope::Global]
        };
        let mut out = Vec::with_capacity(2);
        for modality in [Modality::Drug, Modality::Screen] {
            let mut emb: Vec<Vec<f64>> = Vec::new();
            let mut post: Vec<Vec<f64>> = Vec::new();
            let mut ids = Vec::new();
            for &scope in &scopes {
                for item in &m.queue(&QueueKey::new(modality, scope))?.items {
                    emb.push(item.embedding.clone());
                    post.push(item.posterior.clone());
                    ids.push(item.batch_id);
                }
            }
            out.push(if ids.is_empty() {
                None
            } else {
                Some(ExtraCandidates { embeddings: Matrix::from_rows(&emb)?, posteriors: Matrix::from_rows(&post)?, batch_ids: ids })
            });
        }
        let extra_g = out.pop().flatten();
        let extra_d = out.pop().flatten();
        if extra_d.is_none() || extra_g.is_none() {
            self.queue_fallbacks += 1;
        }
        Ok((extra_d, extra_g))
    }

    /// One encoder update followed by one classifier update on `rows` of `ds`.
    pub fn training_step(&mut self, ds: &PairedDataset, rows: &[usize], pure_cell: Option<usize>, replicates: &[Vec<usize>]) -> Result<LogRecord> {
        self.step += 1;
        let mut step_rng = self.rng.fork(&format!("step{}", self.step));
        let x_d = ds.x_d.select_rows(rows);
        let x_g = augment_screen_batch(&ds.x_g, rows, |i| replicates[i].as_slice(), &self.bundle.augment, &mut step_rng)?;
        let cells: Vec<usize> = rows.iter().map(|&i| ds.cell_line[i]).collect();
        let batch_ids: Vec<usize> = rows.iter().map(|&i| ds.batch[i]).collect();
        let (extra_d, extra_g) = self.negative_source(&batch_ids, pure_cell)?;
        let inp = StepInputs { x_d: &x_d, x_g: &x_g, cells: &cells, batch_ids: &batch_ids, extra_d: extra_d.as_ref(), extra_g: extra_g.as_ref() };
        let g = step_gradients(&self.bundle.networks, &inp, &self.bundle.objective)?;
        if !g.l_clip.is_finite() || !g.l_clf.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: l_clip = {}, l_clf = {}, c = {}",
                self.step, g.l_clip, g.l_clf, g.c_diagnostic
            )));
        }

        let nets = &mut self.bundle.networks;
        let mut params = nets.enc_d.tensors_mut();
        params.extend(nets.enc_g.tensors_mut());
        let mut grads = g.enc_d.tensors();
        grads.extend(g.enc_g.tensors());
        self.enc_opt.step(params, grads)?;

        let mut params = nets.clf_d.tensors_mut();
        params.extend(nets.clf_g.tensors_mut());
        let mut grads = g.clf_d.tensors();
        grads.extend(g.clf_g.tensors());
        self.clf_opt.step(params, grads)?;

        if let Some(m) = &mut self.momentum {
            m.momentum_update(nets)?;
            let z_d = m.shadow.enc_d.forward(&x_d, &cells)?;
            let z_g = m.shadow.enc_g.forward(&x_g, &cells)?;
            let p_d = softmax_rows(&m.shadow.clf_d.forward(&z_d)?);
            let p_g = softmax_rows(&m.shadow.clf_g.forward(&z_g)?);
            for (modality, z, p) in [(Modality::Drug, &z_d, &p_d), (Modality::Screen, &z_g, &p_g)] {
                let items = |subset: &mut dyn Iterator<Item = usize>| -> Vec<QueueItem> {
                    subset
                        .map(|r| QueueItem { embedding: z.row(r).to_vec(), posterior: p.row(r).to_vec(), batch_id: batch_ids[r] })
                        .collect()
                };
                m.enqueue(QueueKey::new(modality, QueueScope::Global), items(&mut (0..rows.len())))?;
                if self.condition_queues {
                    for r in 0..rows.len() {
                        m.enqueue(QueueKey::new(modality, QueueScope::Condition(batch_ids[r])), items(&mut std::iter::once(r)))?;
                    }
                }
                if self.cell_queues {
                    for r in 0..rows.len() {
                        m.enqueue(QueueKey::new(modality, QueueScope::CellLine(cells[r])), items(&mut std::iter::once(r)))?;
                    }
                }
            }
        }

        let record = LogRecord {
            step: self.step,
            l_clip: g.l_clip,
            l_clf: g.l_clf,
            c_diagnostic: g.c_diagnostic,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        self.log.push(record.clone());
        Ok(record)
    }
}

/// Train on `train_rows` of `ds`; returns the final state with its log.
pub fn fit(bundle: ModelBundle, ds: &PairedDataset, train_rows: &[usize]) -> Result<TrainState> {
    let mut state = TrainState::new(bundle, ds.n_batches(), ds.n_cell_lines())?;
    let cells: Vec<usize> = train_rows.iter().map(|&i| ds.cell_line[i]).collect();
    let plan = build_training_batches(&cells, &state.bundle.trainer, &mut RngStream::new(state.bundle.trainer.seed, "batches"))?;
    let replicates = ds.replicate_members();
    let total = plan.batches.len();
    for (s, batch) in plan.batches.iter().enumerate() {
        let rows: Vec<usize> = batch.rows.iter().map(|&p| train_rows[p]).collect();
        let rec = state.training_step(ds, &rows, batch.pure_cell, &replicates)?;
        if plan.steps_per_epoch > 0 && (s + 1) % (plan.steps_per_epoch * 10).max(1) == 0 {
            info!("step {}/{total}: l_clip {:.4} l_clf {:.4}", rec.step, rec.l_clip, rec.l_clf);
        }
    }
    if state.queue_fallbacks > 0 {
        info!("{} steps used in-batch negatives only (empty queue)", state.queue_fallbacks);
    }
    Ok(state)
}

/// Newline-delimited JSON, one record per step.
pub fn log_to_ndjson(log: &[LogRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in log {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::numkern::{finite_difference_gradient, max_relative_error};
    use crate::objectives::Mixing;

    fn toy_dataset(n: usize, n_cells: usize, seed: u64) -> PairedDataset {
        let mut rng = RngStream::new(seed, "toyds");
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        PairedDataset {
            replicate_vocab: Vocab::from_names(ids.clone()),
            ids,
            x_d: rng.normal_matrix(n, 4, 1.0),
            x_g: rng.normal_matrix(n, 3, 1.0),
            batch: (0..n).map(|i| i % 3).collect(),
            cell_line: (0..n).map(|i| i % n_cells).collect(),
            replicate: (0..n).collect(),
            batch_vocab: Vocab::from_names(vec!["a".into(), "b".into(), "c".into()]),
            cell_vocab: Vocab::from_names((0..n_cells).map(|c| format!("cell{c}")).collect()),
            labels: None,
            group_a: None,
            group_b: None,
        }
    }

    fn toy_bundle(ds: &PairedDataset, objective: ObjectiveKind, trainer: TrainerConfig) -> ModelBundle {
        let arch = Architecture {
            drug_dim: 4,
            screen_dim: 3,
            embedding_dim: 3,
            encoder_hidden: vec![5],
            classifier_hidden: vec![4],
            n_batches: 3,
            activation: Activation::Tanh,
            cell_line_heads: (ds.n_cell_lines() > 1).then_some(ds.n_cell_lines()),
        };
        let obj = ObjectiveConfig { objective, tau: 0.5, ..Default::default() };
        ModelBundle::init(arch, obj, trainer, AugmentConfig::default(), ds.batch_vocab.clone(), ds.cell_vocab.clone()).unwrap()
    }

    #[test]
    fn grad_scale_examples() {
        let g = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        assert_eq!(GradScale::new(0.0).unwrap().backward(&g), Matrix::zeros(1, 2));
        assert_eq!(GradScale::new(1.0).unwrap().backward(&g), g);
        assert_eq!(GradScale::new(0.1).unwrap().backward(&g).data(), &[0.1, -0.2]);
        assert_eq!(GradScale::new(0.1).unwrap().forward(&g), g);
    }

    #[test]
    fn batches_without_alternation_cover_each_epoch() {
        let cells = vec![0; 10];
        let cfg = TrainerConfig { epochs: 2, batch_size: 4, ..Default::default() };
        let plan = build_training_batches(&cells, &cfg, &mut RngStream::new(1, "b")).unwrap();
        assert_eq!(plan.steps_per_epoch, 3);
        assert_eq!(plan.batches.len(), 6);
        let mut seen: Vec<usize> = plan.batches[..3].iter().flat_map(|b| b.rows.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(plan.batches.iter().all(|b| b.pure_cell.is_none()));
        // a single cell line makes alternation vacuous
        let alt = TrainerConfig { alternate_by_cell: true, ..cfg.clone() };
        assert_eq!(build_training_batches(&cells, &alt, &mut RngStream::new(1, "b")).unwrap(), plan);
    }

    /// Recorded once from a seeded run.
    #[test]
    fn alternating_batches_golden() {
        let cells: Vec<usize> = (0..12).map(|i| usize::from(i >= 8)).collect();
        let cfg = TrainerConfig { epochs: 1, batch_size: 5, alternate_by_cell: true, ..Default::default() };
        let plan = build_training_batches(&cells, &cfg, &mut RngStream::new(3, "batches")).unwrap();
        assert_eq!(plan.batches.len(), 3);
        assert!(plan.batches[0].pure_cell.is_none() && plan.batches[2].pure_cell.is_none());
        let pure = plan.batches[1].pure_cell.unwrap();
        assert!(plan.batches[1].rows.iter().all(|&r| cells[r] == pure));
        let text: Vec<Vec<usize>> = plan.batches.iter().map(|b| b.rows.clone()).collect();
        assert_eq!(format!("{text:?}"), GOLDEN_BATCHES);
        assert_eq!(plan, build_training_batches(&cells, &cfg, &mut RngStream::new(3, "batches")).unwrap());
    }

    const GOLDEN_BATCHES: &str = "[[5, 4, 7, 2, 6], [9, 8, 8, 9, 10], [3, 7, 4, 9, 11]]";

    #[test]
    fn small_cell_line_sampled_with_replacement() {
        let cells: Vec<usize> = (0..12).map(|i| usize::from(i >= 10)).collect();
        let cfg = TrainerConfig { epochs: 4, batch_size: 4, alternate_by_cell: true, ..Default::default() };
        let plan = build_training_batches(&cells, &cfg, &mut RngStream::new(5, "b")).unwrap();
        assert!(plan.with_replacement > 0);
    }

    fn check_step_gradients(objective: ObjectiveKind, mixing: Mixing, alpha: f64, lambda: f64, with_queue: bool) {
        let ds = toy_dataset(6, 1, 11);
        let bundle = toy_bundle(&ds, objective, TrainerConfig::default());
        let nets = bundle.networks.clone();
        let cfg = ObjectiveConfig { alpha, lambda, mixing, ..bundle.objective };
        let cells = vec![0; 6];
        let extra = with_queue.then(|| {
            let mut rng = RngStream::new(2, "queue");
            let (e, _) = crate::numkern::normalize_rows(&rng.normal_matrix(3, 3, 1.0)).unwrap();
            ExtraCandidates { embeddings: e, posteriors: softmax_rows(&rng.normal_matrix(3, 3, 1.0)), batch_ids: vec![2, 0, 1] }
        });
        let inp = StepInputs {
            x_d: &ds.x_d,
            x_g: &ds.x_g,
            cells: &cells,
            batch_ids: &ds.batch,
            extra_d: extra.as_ref(),
            extra_g: extra.as_ref(),
        };
        let g = step_gradients(&nets, &inp, &cfg).unwrap();
        let z0_g = nets.enc_g.forward(&ds.x_g, &cells).unwrap();
        let z0_d = nets.enc_d.forward(&ds.x_d, &cells).unwrap();

        // encoder parameters: posterior inputs move by lambda times the embedding change
        let n_enc = nets.enc_d.tensors().len() + nets.enc_g.tensors().len();
        for t in 0..n_enc {
            let base = {
                let mut all = nets.enc_d.tensors();
                all.extend(nets.enc_g.tensors());
                all[t].clone()
            };
            let f = |x: &Matrix| {
                let mut trial = nets.clone();
                let mut all = trial.enc_d.tensors_mut();
                all.extend(trial.enc_g.tensors_mut());
                *all[t] = x.clone();
                let z_g = trial.enc_g.forward(&ds.x_g, &cells).unwrap();
                let z_d = trial.enc_d.forward(&ds.x_d, &cells).unwrap();
                let pin_g = z0_g.add(&z_g.sub(&z0_g).unwrap().scale(lambda)).unwrap();
                let pin_d = z0_d.add(&z_d.sub(&z0_d).unwrap().scale(lambda)).unwrap();
                clip_loss_value(&trial, &inp, &cfg, Some((&pin_g, &pin_d))).unwrap()
            };
            let numeric = finite_difference_gradient(f, &base, 1e-6).unwrap();
            let analytic = {
                let mut all = g.enc_d.tensors();
                all.extend(g.enc_g.tensors());
                all[t].clone()
            };
            let err = max_relative_error(&analytic, &numeric, 1e-7);
            assert!(err < 1e-5, "{objective} {mixing:?} a={alpha} l={lambda} enc tensor {t}: {err}");
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for objective in [ObjectiveKind::Clip, ObjectiveKind::Ccl, ObjectiveKind::Infocore] {
            for lambda in [0.0, 0.1, 1.0] {
                check_step_gradients(objective, Mixing::Arithmetic, 0.33, lambda, false);
            }
        }
        check_step_gradients(ObjectiveKind::Infocore, Mixing::Geometric, 0.83, 0.1, true);
        check_step_gradients(ObjectiveKind::Ccl, Mixing::Arithmetic, 0.0, 0.0, true);
    }

    #[test]
    fn zero_lr_leaves_parameters_and_logs() {
        let ds = toy_dataset(8, 1, 3);
        let mut trainer = TrainerConfig { epochs: 1, batch_size: 4, ..Default::default() };
        trainer.optimizer.kind = crate::optim::OptimizerKind::Sgd;
        let mut bundle = toy_bundle(&ds, ObjectiveKind::Infocore, trainer);
        bundle.trainer.lr = 1e-300;
        bundle.trainer.classifier_lr = 1e-300;
        let before = bundle.networks.clone();
        let mut state = TrainState::new(bundle, 3, 1).unwrap();
        state.enc_opt.lr = 0.0;
        state.clf_opt.lr = 0.0;
        let reps = ds.replicate_members();
        state.training_step(&ds, &[0, 1, 2, 3], None, &reps).unwrap();
        assert_eq!(state.bundle.networks, before);
        assert_eq!(state.log.len(), 1);
        assert!(state.log[0].l_clip.is_finite());
    }

    #[test]
    fn sgd_step_moves_by_minus_lr_gradient() {
        let ds = toy_dataset(2, 1, 4);
        let mut trainer = TrainerConfig { epochs: 1, batch_size: 2, lr: 0.01, classifier_lr: 0.02, ..Default::default() };
        trainer.optimizer.kind = crate::optim::OptimizerKind::Sgd;
        let bundle = toy_bundle(&ds, ObjectiveKind::Infocore, trainer);
        let before = bundle.networks.clone();
        let cells = vec![0, 0];
        let inp = StepInputs { x_d: &ds.x_d, x_g: &ds.x_g, cells: &cells, batch_ids: &ds.batch, extra_d: None, extra_g: None };
        let g = step_gradients(&before, &inp, &bundle.objective).unwrap();
        let mut state = TrainState::new(bundle, 3, 1).unwrap();
        state.training_step(&ds, &[0, 1], None, &ds.replicate_members()).unwrap();
        let after = &state.bundle.networks;
        let check = |new: Vec<&Matrix>, old: Vec<&Matrix>, grad: Vec<&Matrix>, lr: f64| {
            for ((n, o), g) in new.iter().zip(old).zip(grad) {
                for ((a, b), d) in n.data().iter().zip(o.data()).zip(g.data()) {
                    assert!((a - (b - lr * d)).abs() < 1e-15);
                }
            }
        };
        check(after.enc_d.tensors(), before.enc_d.tensors(), g.enc_d.tensors(), 0.01);
        check(after.enc_g.tensors(), before.enc_g.tensors(), g.enc_g.tensors(), 0.01);
        check(after.clf_d.tensors(), before.clf_d.tensors(), g.clf_d.tensors(), 0.02);
        check(after.clf_g.tensors(), before.clf_g.tensors(), g.clf_g.tensors(), 0.02);
    }

    #[test]
    fn clip_encoder_update_ignores_classifiers() {
        let ds = toy_dataset(6, 1, 5);
        let bundle = toy_bundle(&ds, ObjectiveKind::Clip, TrainerConfig::default());
        let cells = vec![0; 6];
        let inp = StepInputs { x_d: &ds.x_d, x_g: &ds.x_g, cells: &cells, batch_ids: &ds.batch, extra_d: None, extra_g: None };
        let a = step_gradients(&bundle.networks, &inp, &bundle.objective).unwrap();
        let mut other = bundle.networks.clone();
        other.clf_d = Mlp::init(&[3, 4, 3], Activation::Tanh, false, &mut RngStream::new(99, "x")).unwrap();
        other.clf_g = Mlp::init(&[3, 4, 3], Activation::Tanh, false, &mut RngStream::new(98, "x")).unwrap();
        let b = step_gradients(&other, &inp, &bundle.objective).unwrap();
        assert_eq!(a.enc_d, b.enc_d);
        assert_eq!(a.enc_g, b.enc_g);
        assert_eq!(a.l_clip, b.l_clip);
    }

    #[test]
    fn moco_queue_accounting_and_fallback() {
        let ds = toy_dataset(12, 1, 6);
        let trainer = TrainerConfig { epochs: 1, batch_size: 4, framework: Framework::Moco, queue_capacity: 10, ..Default::default() };
        let bundle = toy_bundle(&ds, ObjectiveKind::Infocore, trainer);
        let mut state = TrainState::new(bundle, 3, 1).unwrap();
        let reps = ds.replicate_members();
        let key = QueueKey::new(Modality::Drug, QueueScope::Global);
        let (d, g) = state.negative_source(&[0, 1, 2, 0], None).unwrap();
        assert!(d.is_none() && g.is_none());
        assert_eq!(state.queue_fallbacks, 1);
        state.queue_fallbacks = 0;
        for (n, rows) in [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]].iter().enumerate() {
            state.training_step(&ds, rows, None, &reps).unwrap();
            let len = state.momentum.as_ref().unwrap().queue(&key).unwrap().len();
            assert_eq!(len, ((n + 1) * 4).min(10));
        }
        assert_eq!(state.queue_fallbacks, 1);
        let (d, _) = state.negative_source(&[0, 1, 2, 0], None).unwrap();
        assert_eq!(d.unwrap().embeddings.rows(), 10);
    }

    #[test]
    fn ccl_moco_falls_back_with_many_conditions() {
        let ds = toy_dataset(12, 1, 7);
        let trainer = TrainerConfig { framework: Framework::Moco, max_ccl_conditions: 2, ..Default::default() };
        let state = TrainState::new(toy_bundle(&ds, ObjectiveKind::Ccl, trainer.clone()), 3, 1).unwrap();
        assert_eq!(state.framework(), Framework::Simclr);
        let trainer = TrainerConfig { max_ccl_conditions: 8, ..trainer };
        let state = TrainState::new(toy_bundle(&ds, ObjectiveKind::Ccl, trainer), 3, 1).unwrap();
        assert_eq!(state.framework(), Framework::Moco);
        assert!(state.momentum.as_ref().unwrap().queue(&QueueKey::new(Modality::Screen, QueueScope::Condition(2))).is_ok());
    }

    #[test]
    fn fit_is_deterministic_and_zero_epochs_is_identity() {
        let ds = toy_dataset(16, 2, 8);
        let trainer = TrainerConfig { epochs: 3, batch_size: 4, alternate_by_cell: true, framework: Framework::Moco, ..Default::default() };
        let bundle = toy_bundle(&ds, ObjectiveKind::Infocore, trainer);
        let rows: Vec<usize> = (0..16).collect();
        let a = fit(bundle.clone(), &ds, &rows).unwrap();
        let b = fit(bundle.clone(), &ds, &rows).unwrap();
        assert_eq!(a.bundle, b.bundle);
        let strip = |l: &[LogRecord]| l.iter().map(|r| (r.step, r.l_clip, r.l_clf, r.c_diagnostic)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_ne!(a.bundle.networks, bundle.networks);

        let mut zero = bundle.clone();
        zero.trainer.epochs = 0;
        let z = fit(zero.clone(), &ds, &rows).unwrap();
        assert_eq!(z.bundle.networks, zero.networks);
        assert!(z.log.is_empty());
    }

    #[test]
    fn ndjson_has_one_record_per_line() {
        let log = vec![
            LogRecord { step: 1, l_clip: 0.5, l_clf: 1.0, c_diagnostic: 0.0, wall_time: 0.1 },
            LogRecord { step: 2, l_clip: 0.25, l_clf: 0.5, c_diagnostic: 0.01, wall_time: 0.2 },
        ];
        let text = String::from_utf8(log_to_ndjson(&log).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(serde_json::from_str::<LogRecord>(lines[1]).unwrap(), log[1]);
    }
}
