//! Contrastive losses and bound estimators.
//!
//! Similarity matrices are indexed `[anchor, candidate]` and are expected to
//! be already divided by the temperature. Candidate `i` is the positive for
//! anchor `i`; any candidates past the anchor count (queue entries) are
//! negatives only.
//!
//! Per anchor `i` with candidate set `J_i` and weights `w_ij` the loss is
//!
//! ```text
//! l_i = -s_ii + log( (1/|J_i|) Σ_{j∈J_i} exp(s_ij) · w_ij )
//! ```
//!
//! Plain InfoNCE uses `w = 1` and all candidates; the conditional variant
//! keeps only candidates from the anchor's batch; the reweighted variant
//! derives `w` from batch posteriors of the anchor and the candidate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{clamp_prob, cosine_similarity_matrix, logsumexp, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    #[default]
    Arithmetic,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Clip,
    Ccl,
    #[default]
    Infocore,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObjectiveKind::Clip => "clip",
            ObjectiveKind::Ccl => "ccl",
            ObjectiveKind::Infocore => "infocore",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(ObjectiveKind::Clip),
            "ccl" => Ok(ObjectiveKind::Ccl),
            "infocore" => Ok(ObjectiveKind::Infocore),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Weight on the anchor's own posterior when mixing.
    pub alpha: f64,
    /// Scale applied to gradients flowing through the posterior path.
    pub lambda: f64,
    /// Critic temperature; similarities are cosine / tau.
    pub tau: f64,
    pub mixing: Mixing,
    pub objective: ObjectiveKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { alpha: 0.09, lambda: 0.1, tau: 0.1, mixing: Mixing::Arithmetic, objective: ObjectiveKind::Infocore }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda = {} must be finite and >= 0", self.lambda)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau = {} must be finite and > 0", self.tau)));
        }
        Ok(())
    }
}

// ── Posterior mixing ────────────────────────────────────────────────────────

fn check_batch(b: usize, n_batches: usize, op: &'static str) -> Result<()> {
    if b >= n_batches {
        return Err(Error::Data(format!("{op}: batch index {b} out of range for {n_batches} batches")));
    }
    Ok(())
}

/// `w_i = alpha·p(b|anchor) + (1−alpha)·p(b|candidate_i)`.
pub fn posterior_mix_arithmetic(anchor: &[f64], candidates: &Matrix, b: usize, alpha: f64) -> Result<Vec<f64>> {
    check_batch(b, anchor.len(), "posterior_mix_arithmetic")?;
    if candidates.cols() != anchor.len() {
        return Err(Error::shape("posterior_mix_arithmetic", format!("{} vs {} batches", anchor.len(), candidates.cols())));
    }
    let pa = anchor[b];
    Ok(candidates.row_iter().map(|c| alpha * pa + (1.0 - alpha) * c[b]).collect())
}

/// Normalized weighted geometric mean of anchor and candidate posteriors,
/// evaluated at batch `b`. Probabilities are clamped to the floor first.
pub fn posterior_mix_geometric(anchor: &[f64], candidates: &Matrix, b: usize, alpha: f64) -> Result<Vec<f64>> {
    check_batch(b, anchor.len(), "posterior_mix_geometric")?;
    if candidates.cols() != anchor.len() {
        return Err(Error::shape("posterior_mix_geometric", format!("{} vs {} batches", anchor.len(), candidates.cols())));
    }
    Ok(candidates
        .row_iter()
        .map(|c| {
            let term = |k: usize| clamp_prob(anchor[k]).powf(alpha) * clamp_prob(c[k]).powf(1.0 - alpha);
            let norm: f64 = (0..anchor.len()).map(term).sum();
            term(b) / norm
        })
        .collect())
}

/// Normalizer of the geometric mixture; never exceeds one. Unclamped, since
/// raising tiny entries to the floor could push the sum above one.
pub fn geometric_normalizer(p: &[f64], q: &[f64], alpha: f64) -> f64 {
    p.iter().zip(q).map(|(&a, &c)| a.max(0.0).powf(alpha) * c.max(0.0).powf(1.0 - alpha)).sum()
}

/// Dense weight matrix `[anchor, candidate]` for the reweighted objective.
pub fn mix_weights(
    anchor_post: &Matrix,
    cand_post: &Matrix,
    anchor_batches: &[usize],
    alpha: f64,
    mixing: Mixing,
) -> Result<Matrix> {
    check_posterior_blocks(anchor_post, cand_post, anchor_batches)?;
    let (a, c) = (anchor_post.rows(), cand_post.rows());
    let mut w = Matrix::zeros(a, c);
    match mixing {
        Mixing::Arithmetic => {
            for i in 0..a {
                let b = anchor_batches[i];
                let pa = clamp_prob(anchor_post.get(i, b));
                for j in 0..c {
                    w.set(i, j, alpha * pa + (1.0 - alpha) * clamp_prob(cand_post.get(j, b)));
                }
            }
        }
        Mixing::Geometric => {
            let (pow_a, pow_c) = geometric_powers(anchor_post, cand_post, alpha);
            let norm = pow_a.matmul_nt(&pow_c)?;
            for i in 0..a {
                let b = anchor_batches[i];
                for j in 0..c {
                    w.set(i, j, pow_a.get(i, b) * pow_c.get(j, b) / norm.get(i, j));
                }
            }
        }
    }
    Ok(w)
}

fn geometric_powers(anchor_post: &Matrix, cand_post: &Matrix, alpha: f64) -> (Matrix, Matrix) {
    (
        anchor_post.map(|p| clamp_prob(p).powf(alpha)),
        cand_post.map(|p| clamp_prob(p).powf(1.0 - alpha)),
    )
}

/// Backward of [`mix_weights`]: gradients with respect to the anchor and
/// candidate posterior blocks given `grad_w = ∂loss/∂w`.
pub fn mix_weights_backward(
    anchor_post: &Matrix,
    cand_post: &Matrix,
    anchor_batches: &[usize],
    alpha: f64,
    mixing: Mixing,
    weights: &Matrix,
    grad_w: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_posterior_blocks(anchor_post, cand_post, anchor_batches)?;
    let (a, c, nb) = (anchor_post.rows(), cand_post.rows(), anchor_post.cols());
    let mut ga = Matrix::zeros(a, nb);
    let mut gc = Matrix::zeros(c, nb);
    match mixing {
        Mixing::Arithmetic => {
            for i in 0..a {
                let b = anchor_batches[i];
                let mut row_total = 0.0;
                for j in 0..c {
                    let g = grad_w.get(i, j);
                    row_total += g;
                    let v = gc.get(j, b) + (1.0 - alpha) * g;
                    gc.set(j, b, v);
                }
                ga.set(i, b, alpha * row_total);
            }
        }
        Mixing::Geometric => {
            // ∂log w_ij/∂pA[i,k] = α(δ_kb/pA[i,b] − t_ijk/pA[i,k]) with
            // t_ijk = pA[i,k]^α pC[j,k]^(1−α) / N_ij, symmetric for pC.
            let (pow_a, pow_c) = geometric_powers(anchor_post, cand_post, alpha);
            let norm = pow_a.matmul_nt(&pow_c)?;
            let gw = grad_w.hadamard(weights)?;
            let u = Matrix::from_fn(a, c, |i, j| gw.get(i, j) / norm.get(i, j));
            let u_pc = u.matmul(&pow_c)?;
            let ut_pa = u.matmul_tn(&pow_a)?;
            for i in 0..a {
                let b = anchor_batches[i];
                let row_total: f64 = gw.row(i).iter().sum();
                for k in 0..nb {
                    let pa = clamp_prob(anchor_post.get(i, k));
                    let mut v = -pow_a.get(i, k) / pa * u_pc.get(i, k);
                    if k == b {
                        v += row_total / pa;
                    }
                    ga.set(i, k, alpha * v);
                }
                for j in 0..c {
                    let pc = clamp_prob(cand_post.get(j, b));
                    let v = gc.get(j, b) + (1.0 - alpha) * gw.get(i, j) / pc;
                    gc.set(j, b, v);
                }
            }
            for j in 0..c {
                for k in 0..nb {
                    let pc = clamp_prob(cand_post.get(j, k));
                    let v = gc.get(j, k) - (1.0 - alpha) * pow_c.get(j, k) / pc * ut_pa.get(j, k);
                    gc.set(j, k, v);
                }
            }
        }
    }
    Ok((ga, gc))
}

fn check_posterior_blocks(anchor_post: &Matrix, cand_post: &Matrix, anchor_batches: &[usize]) -> Result<()> {
    if anchor_post.cols() != cand_post.cols() {
        return Err(Error::shape("mix_weights", format!("{} vs {} batches", anchor_post.cols(), cand_post.cols())));
    }
    if anchor_batches.len() != anchor_post.rows() {
        return Err(Error::shape(
            "mix_weights",
            format!("{} anchors, {} batch ids", anchor_post.rows(), anchor_batches.len()),
        ));
    }
    for &b in anchor_batches {
        check_batch(b, anchor_post.cols(), "mix_weights")?;
    }
    Ok(())
}

/// Rows must be probability vectors.
pub fn check_probability_rows(p: &Matrix, what: &str) -> Result<()> {
    for (r, row) in p.row_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("{what}: row {r} is not a probability vector (sum {total})")));
        }
    }
    Ok(())
}

// ── One anchor direction ────────────────────────────────────────────────────

/// Loss and gradients of one anchor direction.
#[derive(Debug, Clone)]
pub struct DirectionOutput {
    /// Mean over anchors.
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    /// `∂loss/∂s`, same shape as the similarity matrix.
    pub grad_sim: Matrix,
    /// `∂loss/∂w` when weights were supplied.
    pub grad_weights: Option<Matrix>,
}

/// Reweighted InfoNCE for one anchor direction.
///
/// `weights` defaults to all ones; `include(i, j)` restricts the candidate
/// set (the positive `j == i` is always kept).
pub fn direction_loss(
    sim: &Matrix,
    weights: Option<&Matrix>,
    include: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<DirectionOutput> {
    let (a, c) = sim.shape();
    if a == 0 {
        return Err(Error::degenerate("direction_loss", "no anchors"));
    }
    if c < a {
        return Err(Error::shape("direction_loss", format!("{a} anchors but only {c} candidates")));
    }
    if let Some(w) = weights {
        if w.shape() != sim.shape() {
            return Err(Error::shape("direction_loss", format!("weights {:?} vs sim {:?}", w.shape(), sim.shape())));
        }
        if let Some(v) = w.data().iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Data(format!("direction_loss: weight {v} is not a positive finite number")));
        }
    }
    sim.ensure_finite("direction_loss similarities")?;

    let mut per_anchor = Vec::with_capacity(a);
    let mut grad_sim = Matrix::zeros(a, c);
    let mut grad_w = weights.map(|_| Matrix::zeros(a, c));
    let scale = 1.0 / a as f64;
    let mut logits = Vec::with_capacity(c);
    let mut members = Vec::with_capacity(c);
    for i in 0..a {
        logits.clear();
        members.clear();
        for j in 0..c {
            if j == i || include.is_none_or(|f| f(i, j)) {
                let lw = weights.map_or(0.0, |w| w.get(i, j).ln());
                logits.push(sim.get(i, j) + lw);
                members.push(j);
            }
        }
        let lse = logsumexp(&logits);
        per_anchor.push(-sim.get(i, i) + lse - (members.len() as f64).ln());
        for (&j, &l) in members.iter().zip(&logits) {
            let q = (l - lse).exp();
            grad_sim.set(i, j, scale * q);
            if let (Some(gw), Some(w)) = (grad_w.as_mut(), weights) {
                gw.set(i, j, scale * q / w.get(i, j));
            }
        }
        let v = grad_sim.get(i, i) - scale;
        grad_sim.set(i, i, v);
    }
    let loss = per_anchor.iter().sum::<f64>() * scale;
    Ok(DirectionOutput { loss, per_anchor, grad_sim, grad_weights: grad_w })
}

/// Inputs for one anchor direction of any objective.
#[derive(Debug, Clone, Copy)]
pub struct DirectionInputs<'a> {
    pub sim: &'a Matrix,
    pub anchor_post: Option<&'a Matrix>,
    pub cand_post: Option<&'a Matrix>,
    pub anchor_batches: &'a [usize],
    pub cand_batches: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct ObjectiveDirection {
    pub loss: f64,
    pub grad_sim: Matrix,
    /// Unscaled `∂loss/∂posterior` for anchors and candidates (reweighted objective only).
    pub grad_anchor_post: Option<Matrix>,
    pub grad_cand_post: Option<Matrix>,
}

/// Dispatch one direction according to the configured objective.
pub fn objective_direction(cfg: &ObjectiveConfig, inp: DirectionInputs<'_>) -> Result<ObjectiveDirection> {
    let (a, c) = inp.sim.shape();
    match cfg.objective {
        ObjectiveKind::Clip => {
            let out = direction_loss(inp.sim, None, None)?;
            Ok(ObjectiveDirection { loss: out.loss, grad_sim: out.grad_sim, grad_anchor_post: None, grad_cand_post: None })
        }
        ObjectiveKind::Ccl => {
            if inp.anchor_batches.len() != a || inp.cand_batches.len() != c {
                return Err(Error::shape("ccl_loss", "batch ids do not match the similarity matrix"));
            }
            let same = |i: usize, j: usize| inp.anchor_batches[i] == inp.cand_batches[j];
            let out = direction_loss(inp.sim, None, Some(&same))?;
            Ok(ObjectiveDirection { loss: out.loss, grad_sim: out.grad_sim, grad_anchor_post: None, grad_cand_post: None })
        }
        ObjectiveKind::Infocore => {
            let (pa, pc) = match (inp.anchor_post, inp.cand_post) {
                (Some(pa), Some(pc)) => (pa, pc),
                _ => return Err(Error::Config("reweighted objective needs posteriors".into())),
            };
            if pa.rows() != a || pc.rows() != c {
                return Err(Error::shape(
                    "infocore_clip_loss",
                    format!("posteriors {}x· / {}x· vs similarities {a}x{c}", pa.rows(), pc.rows()),
                ));
            }
            let w = mix_weights(pa, pc, inp.anchor_batches, cfg.alpha, cfg.mixing)?;
            let out = direction_loss(inp.sim, Some(&w), None)?;
            let gw = out.grad_weights.as_ref().expect("weights supplied");
            let (ga, gc) = mix_weights_backward(pa, pc, inp.anchor_batches, cfg.alpha, cfg.mixing, &w, gw)?;
            Ok(ObjectiveDirection {
                loss: out.loss,
                grad_sim: out.grad_sim,
                grad_anchor_post: Some(ga),
                grad_cand_post: Some(gc),
            })
        }
    }
}

// ── Symmetric in-batch losses ───────────────────────────────────────────────

/// Symmetric loss over a square in-batch similarity matrix.
#[derive(Debug, Clone)]
pub struct SymmetricLoss {
    pub loss: f64,
    /// `∂loss/∂sim` where `sim[i][j]` scores screen `i` against drug `j`.
    pub grad_sim: Matrix,
    /// `∂loss/∂p(·|z_g)` and `∂loss/∂p(·|z_d)`, multiplied by lambda.
    pub grad_post_g: Option<Matrix>,
    pub grad_post_d: Option<Matrix>,
}

fn symmetric_in_batch(
    sim: &Matrix,
    post_g: Option<&Matrix>,
    post_d: Option<&Matrix>,
    batch_ids: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<SymmetricLoss> {
    let k = sim.rows();
    if k == 0 {
        return Err(Error::degenerate("contrastive loss", "K = 0"));
    }
    if sim.cols() != k {
        return Err(Error::shape("contrastive loss", format!("similarity matrix {:?} is not square", sim.shape())));
    }
    let sim_t = sim.transpose();
    let g_dir = objective_direction(
        cfg,
        DirectionInputs { sim, anchor_post: post_g, cand_post: post_d, anchor_batches: batch_ids, cand_batches: batch_ids },
    )?;
    let d_dir = objective_direction(
        cfg,
        DirectionInputs { sim: &sim_t, anchor_post: post_d, cand_post: post_g, anchor_batches: batch_ids, cand_batches: batch_ids },
    )?;
    let mut grad_sim = g_dir.grad_sim.add(&d_dir.grad_sim.transpose())?;
    grad_sim.scale_in_place(0.5);
    let (grad_post_g, grad_post_d) = match (g_dir.grad_anchor_post, g_dir.grad_cand_post, d_dir.grad_anchor_post, d_dir.grad_cand_post) {
        (Some(ga_g), Some(gc_d), Some(ga_d), Some(gc_g)) => {
            let scale = 0.5 * cfg.lambda;
            (Some(ga_g.add(&gc_g)?.scale(scale)), Some(ga_d.add(&gc_d)?.scale(scale)))
        }
        _ => (None, None),
    };
    Ok(SymmetricLoss { loss: 0.5 * (g_dir.loss + d_dir.loss), grad_sim, grad_post_g, grad_post_d })
}

/// Posterior-reweighted symmetric InfoNCE.
///
/// `sim[i][j]` is the temperature-scaled similarity of screen embedding `i`
/// and drug embedding `j`. Posterior gradients are scaled by `cfg.lambda`.
pub fn infocore_clip_loss(
    sim: &Matrix,
    post_g: &Matrix,
    post_d: &Matrix,
    batch_ids: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<SymmetricLoss> {
    check_probability_rows(post_g, "screen posteriors")?;
    check_probability_rows(post_d, "drug posteriors")?;
    let cfg = ObjectiveConfig { objective: ObjectiveKind::Infocore, ..*cfg };
    symmetric_in_batch(sim, Some(post_g), Some(post_d), batch_ids, &cfg)
}

/// Symmetric InfoNCE with `1/K` inside the log, so chance level is zero.
pub fn clip_infonce_loss(sim: &Matrix, cfg: &ObjectiveConfig) -> Result<(f64, Matrix)> {
    let cfg = ObjectiveConfig { objective: ObjectiveKind::Clip, ..*cfg };
    let out = symmetric_in_batch(sim, None, None, &vec![0; sim.rows()], &cfg)?;
    Ok((out.loss, out.grad_sim))
}

/// Symmetric InfoNCE with each anchor's candidates restricted to its batch.
pub fn ccl_loss(sim: &Matrix, batch_ids: &[usize], cfg: &ObjectiveConfig) -> Result<(f64, Matrix)> {
    if batch_ids.len() != sim.rows() {
        return Err(Error::shape("ccl_loss", format!("{} batch ids for {} rows", batch_ids.len(), sim.rows())));
    }
    let cfg = ObjectiveConfig { objective: ObjectiveKind::Ccl, ..*cfg };
    let out = symmetric_in_batch(sim, None, None, batch_ids, &cfg)?;
    Ok((out.loss, out.grad_sim))
}

// ── Classifier loss ─────────────────────────────────────────────────────────

/// Mean negative log-probability of the true batch.
pub fn classifier_loss(posteriors: &Matrix, batch_ids: &[usize]) -> Result<f64> {
    if batch_ids.len() != posteriors.rows() || batch_ids.is_empty() {
        return Err(Error::shape("classifier_loss", format!("{} ids for {} rows", batch_ids.len(), posteriors.rows())));
    }
    let mut total = 0.0;
    for (r, &b) in batch_ids.iter().enumerate() {
        check_batch(b, posteriors.cols(), "classifier_loss")?;
        total -= clamp_prob(posteriors.get(r, b)).ln();
    }
    Ok(total / batch_ids.len() as f64)
}

/// Cross-entropy from logits and its gradient with respect to the logits.
pub fn classifier_loss_from_logits(logits: &Matrix, batch_ids: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    if batch_ids.len() != n || n == 0 {
        return Err(Error::shape("classifier_loss", format!("{} ids for {n} rows", batch_ids.len())));
    }
    let mut grad = crate::numkern::softmax_rows(logits);
    let mut total = 0.0;
    for (r, &b) in batch_ids.iter().enumerate() {
        check_batch(b, logits.cols(), "classifier_loss")?;
        total += logsumexp(logits.row(r)) - logits.get(r, b);
        let v = grad.get(r, b) - 1.0;
        grad.set(r, b, v);
    }
    grad.scale_in_place(1.0 / n as f64);
    Ok((total / n as f64, grad))
}

// ── Diagnostics and bounds ──────────────────────────────────────────────────

/// Single-sample integrand of the C term for a positive pair:
/// `½ log( p̂_g · p̂_d / (p(b|z_g) · p(b|z_d)) )`, where `p̂_g` and `p̂_d` are the
/// mixed posteriors anchored on the screen and drug side.
pub fn c_diagnostic(p_g: &[f64], p_d: &[f64], b: usize, alpha: f64, mixing: Mixing) -> Result<f64> {
    if p_g.len() != p_d.len() {
        return Err(Error::shape("c_diagnostic", format!("{} vs {} batches", p_g.len(), p_d.len())));
    }
    check_batch(b, p_g.len(), "c_diagnostic")?;
    let (g, d) = (clamp_prob(p_g[b]), clamp_prob(p_d[b]));
    let value = match mixing {
        Mixing::Arithmetic => {
            let hat_g = alpha * g + (1.0 - alpha) * d;
            let hat_d = alpha * d + (1.0 - alpha) * g;
            0.5 * ((hat_g / g).ln() + (hat_d / d).ln())
        }
        // p̂_g · p̂_d = p_g(b) p_d(b) / (N_gd · N_dg), so only the normalizers remain
        Mixing::Geometric => {
            -0.5 * (geometric_normalizer(p_g, p_d, alpha).ln() + geometric_normalizer(p_d, p_g, alpha).ln())
        }
    };
    Ok(value)
}

/// `mean(h_joint) − e⁻¹·mean(exp(h_marg)) − i_zd_xb`.
pub fn single_sample_bound(h_joint: &[f64], h_marg: &[f64], i_zd_xb: f64) -> Result<f64> {
    if h_joint.is_empty() || h_marg.is_empty() {
        return Err(Error::degenerate("single_sample_bound", "empty sample array"));
    }
    let uniform = |n: usize| vec![1.0 / n as f64; n];
    single_sample_bound_weighted(h_joint, &uniform(h_joint.len()), h_marg, &uniform(h_marg.len()), i_zd_xb)
}

/// Same bound with explicit probability weights on each critic value, for
/// exact expectations over a finite support.
pub fn single_sample_bound_weighted(
    h_joint: &[f64],
    p_joint: &[f64],
    h_marg: &[f64],
    p_marg: &[f64],
    i_zd_xb: f64,
) -> Result<f64> {
    if h_joint.len() != p_joint.len() || h_marg.len() != p_marg.len() {
        return Err(Error::shape("single_sample_bound", "values and weights differ in length"));
    }
    if h_joint.is_empty() || h_marg.is_empty() {
        return Err(Error::degenerate("single_sample_bound", "empty sample array"));
    }
    let mut first = 0.0;
    for (&h, &p) in h_joint.iter().zip(p_joint) {
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("single_sample_bound: joint critic value {h}")));
        }
        first += p * h;
    }
    let mut second = 0.0;
    for (&h, &p) in h_marg.iter().zip(p_marg) {
        let e = (h - 1.0).exp();
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("single_sample_bound: exp overflow at critic value {h}")));
        }
        second += p * e;
    }
    Ok(first - second - i_zd_xb)
}

/// Empirical entropy (nats) of a label sequence.
pub fn empirical_entropy(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    counts.values().map(|&c| c as f64 / n).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// Decomposed lower-bound estimate (nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl BoundEstimate {
    /// `−l_clip − l_clf − entropy_xb`; the C term is recorded but not added.
    pub fn assemble(l_clip: f64, l_clf: f64, c_term: f64, entropy_xb: f64) -> Self {
        let components = BTreeMap::from([
            ("l_clip".to_string(), l_clip),
            ("l_clf".to_string(), l_clf),
            ("c_term".to_string(), c_term),
            ("entropy_xb".to_string(), entropy_xb),
        ]);
        Self { value: -l_clip - l_clf - entropy_xb, components }
    }
}

/// Bound estimate from embeddings and posteriors of a data slice, all rows
/// used as one in-batch candidate set.
pub fn cmi_bound_report(
    z_g: &Matrix,
    z_d: &Matrix,
    post_g: &Matrix,
    post_d: &Matrix,
    batch_ids: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<BoundEstimate> {
    if batch_ids.is_empty() {
        return Err(Error::degenerate("cmi_bound_report", "empty slice"));
    }
    let sim = cosine_similarity_matrix(z_g, z_d)?.scale(1.0 / cfg.tau);
    let cfg_ic = ObjectiveConfig { objective: ObjectiveKind::Infocore, ..*cfg };
    let l_clip = symmetric_in_batch(&sim, Some(post_g), Some(post_d), batch_ids, &cfg_ic)?.loss;
    let l_clf = 0.5 * (classifier_loss(post_g, batch_ids)? + classifier_loss(post_d, batch_ids)?);
    let mut c_total = 0.0;
    for (r, &b) in batch_ids.iter().enumerate() {
        c_total += c_diagnostic(post_g.row(r), post_d.row(r), b, cfg.alpha, cfg.mixing)?;
    }
    let c_term = c_total / batch_ids.len() as f64;
    Ok(BoundEstimate::assemble(l_clip, l_clf, c_term, empirical_entropy(batch_ids)))
}
