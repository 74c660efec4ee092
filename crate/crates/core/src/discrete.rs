//! Finite joint distributions over (drug code, screen code, batch) used to
//! evaluate the contrastive bound exactly, without sampling.
//!
//! With the critic `log p(g|d)/p(g)` and the true batch posteriors, the
//! classifier term vanishes and the bound reduces to `−L_CLIP − H(X_b)`.
//! The expectation over `K−1` i.i.d. negatives is taken by enumerating
//! their count vectors with multinomial weights.

use crate::error::{Error, Result};
use crate::numkern::{clamp_prob, Matrix, RngStream};
use crate::objectives::{c_diagnostic, direction_loss, mix_weights, BoundEstimate, Mixing};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    n_d: usize,
    n_g: usize,
    n_b: usize,
    /// `p[(d·n_g + g)·n_b + b]`
    p: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(n_d: usize, n_g: usize, n_b: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n_d * n_g * n_b || p.is_empty() {
            return Err(Error::shape("DiscreteJoint::new", format!("{} cells for {n_d}x{n_g}x{n_b}", p.len())));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Data(format!("joint table is not a distribution (sum {total})")));
        }
        Ok(Self { n_d, n_g, n_b, p })
    }

    /// Dirichlet(1) draw over all cells, with a small floor so that every
    /// marginal is strictly positive.
    pub fn random(n_d: usize, n_g: usize, n_b: usize, rng: &mut RngStream) -> Result<Self> {
        let n = n_d * n_g * n_b;
        let mut p = Vec::with_capacity(n);
        for _ in 0..n {
            p.push(rng.gamma(1.0)? + 1e-3);
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Self::new(n_d, n_g, n_b, p)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_d, self.n_g, self.n_b)
    }

    pub fn prob(&self, d: usize, g: usize, b: usize) -> f64 {
        self.p[(d * self.n_g + g) * self.n_b + b]
    }

    pub fn p_d(&self, d: usize) -> f64 {
        (0..self.n_g).flat_map(|g| (0..self.n_b).map(move |b| (g, b))).map(|(g, b)| self.prob(d, g, b)).sum()
    }

    pub fn p_g(&self, g: usize) -> f64 {
        (0..self.n_d).flat_map(|d| (0..self.n_b).map(move |b| (d, b))).map(|(d, b)| self.prob(d, g, b)).sum()
    }

    pub fn p_b(&self, b: usize) -> f64 {
        (0..self.n_d).flat_map(|d| (0..self.n_g).map(move |g| (d, g))).map(|(d, g)| self.prob(d, g, b)).sum()
    }

    pub fn p_dg(&self, d: usize, g: usize) -> f64 {
        (0..self.n_b).map(|b| self.prob(d, g, b)).sum()
    }

    pub fn p_gb(&self, g: usize, b: usize) -> f64 {
        (0..self.n_d).map(|d| self.prob(d, g, b)).sum()
    }

    pub fn p_db(&self, d: usize, b: usize) -> f64 {
        (0..self.n_g).map(|g| self.prob(d, g, b)).sum()
    }

    /// `p(·|g)` over batches.
    pub fn posterior_given_g(&self, g: usize) -> Vec<f64> {
        let pg = self.p_g(g);
        (0..self.n_b).map(|b| self.p_gb(g, b) / pg).collect()
    }

    /// `p(·|d)` over batches.
    pub fn posterior_given_d(&self, d: usize) -> Vec<f64> {
        let pd = self.p_d(d);
        (0..self.n_b).map(|b| self.p_db(d, b) / pd).collect()
    }

    /// Optimal multi-sample critic `log p(g|d)/p(g)`.
    pub fn optimal_critic(&self, d: usize, g: usize) -> f64 {
        (clamp_prob(self.p_dg(d, g)) / (self.p_d(d) * self.p_g(g))).ln()
    }

    /// Optimal single-sample critic `1 + log p(g,b|d)/p(g,b)`.
    pub fn optimal_single_sample_critic(&self, d: usize, g: usize, b: usize) -> f64 {
        1.0 + (clamp_prob(self.prob(d, g, b)) / (self.p_d(d) * self.p_gb(g, b))).ln()
    }

    pub fn entropy_b(&self) -> f64 {
        (0..self.n_b).map(|b| self.p_b(b)).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
    }

    /// Exact bound `−L_CLIP − H(X_b)` with `k` candidates per anchor (one
    /// positive plus `k−1` negatives) under the optimal critic and true
    /// posteriors. The expected C term is reported alongside.
    pub fn exact_multi_sample_estimate(&self, k: usize, alpha: f64, mixing: Mixing) -> Result<BoundEstimate> {
        if k == 0 {
            return Err(Error::degenerate("exact_multi_sample_estimate", "k = 0"));
        }
        let post_d: Vec<Vec<f64>> = (0..self.n_d).map(|d| self.posterior_given_d(d)).collect();
        let post_g: Vec<Vec<f64>> = (0..self.n_g).map(|g| self.posterior_given_g(g)).collect();
        let marg_d: Vec<f64> = (0..self.n_d).map(|d| self.p_d(d)).collect();
        let marg_g: Vec<f64> = (0..self.n_g).map(|g| self.p_g(g)).collect();
        let comps_d = compositions(k - 1, self.n_d, &marg_d);
        let comps_g = compositions(k - 1, self.n_g, &marg_g);
        let critic: Vec<Vec<f64>> =
            (0..self.n_d).map(|d| (0..self.n_g).map(|g| self.optimal_critic(d, g)).collect()).collect();

        let mut l_screen_anchor = 0.0;
        let mut l_drug_anchor = 0.0;
        let mut c_term = 0.0;
        for d1 in 0..self.n_d {
            for g1 in 0..self.n_g {
                for b1 in 0..self.n_b {
                    let p = self.prob(d1, g1, b1);
                    if p == 0.0 {
                        continue;
                    }
                    c_term += p * c_diagnostic(&post_g[g1], &post_d[d1], b1, alpha, mixing)?;
                    // screen anchor g1 against drug candidates
                    for (counts, weight) in &comps_d {
                        let cands = expand(d1, counts);
                        let sim = Matrix::from_fn(1, k, |_, j| critic[cands[j]][g1]);
                        let anchor = Matrix::row_vector(&post_g[g1]);
                        let cand_post = Matrix::from_fn(k, self.n_b, |j, b| post_d[cands[j]][b]);
                        let w = mix_weights(&anchor, &cand_post, &[b1], alpha, mixing)?;
                        l_screen_anchor += p * weight * direction_loss(&sim, Some(&w), None)?.loss;
                    }
                    // drug anchor d1 against screen candidates
                    for (counts, weight) in &comps_g {
                        let cands = expand(g1, counts);
                        let sim = Matrix::from_fn(1, k, |_, j| critic[d1][cands[j]]);
                        let anchor = Matrix::row_vector(&post_d[d1]);
                        let cand_post = Matrix::from_fn(k, self.n_b, |j, b| post_g[cands[j]][b]);
                        let w = mix_weights(&anchor, &cand_post, &[b1], alpha, mixing)?;
                        l_drug_anchor += p * weight * direction_loss(&sim, Some(&w), None)?.loss;
                    }
                }
            }
        }
        let l_clip = 0.5 * (l_screen_anchor + l_drug_anchor);
        Ok(BoundEstimate::assemble(l_clip, 0.0, c_term, self.entropy_b()))
    }
}

/// Positive first, then each value repeated by its count.
fn expand(positive: usize, counts: &[usize]) -> Vec<usize> {
    let mut out = vec![positive];
    for (v, &c) in counts.iter().enumerate() {
        out.extend(std::iter::repeat_n(v, c));
    }
    out
}

/// All count vectors of `n` draws over `m` values, with multinomial probabilities.
fn compositions(n: usize, m: usize, probs: &[f64]) -> Vec<(Vec<usize>, f64)> {
    let mut ln_fact = vec![0.0; n + 1];
    for i in 1..=n {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    let mut out = Vec::new();
    let mut current = vec![0usize; m];
    fn rec(
        pos: usize,
        left: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<(Vec<usize>, f64)>,
        probs: &[f64],
        ln_fact: &[f64],
        n: usize,
    ) {
        let m = current.len();
        if pos + 1 == m {
            current[pos] = left;
            let mut lp = ln_fact[n];
            for (v, &c) in current.iter().enumerate() {
                lp += c as f64 * probs[v].ln() - ln_fact[c];
            }
            out.push((current.clone(), lp.exp()));
            return;
        }
        for c in 0..=left {
            current[pos] = c;
            rec(pos + 1, left - c, current, out, probs, ln_fact, n);
        }
    }
    rec(0, n, &mut current, &mut out, probs, &ln_fact, n);
    out
}
