//! Training-time augmentations of the screen modality: replicate mixup,
//! additive Gaussian noise and masking. Drug vectors are never augmented.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Absolute standard deviation of the additive noise.
    pub alpha_noise: f64,
    /// Concentration of the symmetric Dirichlet over replicates; `None`
    /// disables mixup.
    pub alpha_dir: Option<f64>,
    /// Probability of zeroing each entry.
    pub alpha_drop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { alpha_noise: 0.0, alpha_dir: None, alpha_drop: 0.0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_noise >= 0.0) || !self.alpha_noise.is_finite() {
            return Err(Error::Config(format!("alpha_noise = {} must be >= 0", self.alpha_noise)));
        }
        if let Some(a) = self.alpha_dir {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("alpha_dir = {a} must be > 0")));
            }
        }
        if !(0.0..1.0).contains(&self.alpha_drop) {
            return Err(Error::Config(format!("alpha_drop = {} must lie in [0, 1)", self.alpha_drop)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.alpha_noise == 0.0 && self.alpha_dir.is_none() && self.alpha_drop == 0.0
    }
}

/// `x + alpha_noise·ε`, ε standard normal per entry.
pub fn add_gaussian_noise(x: &Matrix, alpha_noise: f64, rng: &mut RngStream) -> Matrix {
    if alpha_noise == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += alpha_noise * rng.normal();
    }
    out
}

/// Symmetric Dirichlet weights via normalized Gamma(alpha, 1) draws.
pub fn dirichlet_weights(r: usize, alpha_dir: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(Error::degenerate("dirichlet_mixup", "no replicates"));
    }
    if r == 1 {
        return Ok(vec![1.0]);
    }
    let mut w = Vec::with_capacity(r);
    for _ in 0..r {
        w.push(rng.gamma(alpha_dir)?);
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        // every gamma draw underflowed; fall back to one replicate
        let pick = rng.index(r);
        return Ok((0..r).map(|k| if k == pick { 1.0 } else { 0.0 }).collect());
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Convex combination of replicate rows with Dirichlet weights.
pub fn dirichlet_mixup(replicates: &Matrix, alpha_dir: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let w = dirichlet_weights(replicates.rows(), alpha_dir, rng)?;
    Ok(Matrix::row_vector(&w).matmul(replicates)?.into_data())
}

/// Zero each entry with probability `alpha_drop`, without rescaling.
pub fn dropout_mask(x: &Matrix, alpha_drop: f64, rng: &mut RngStream) -> Matrix {
    if alpha_drop == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        if rng.uniform() < alpha_drop {
            *v = 0.0;
        }
    }
    out
}

/// Augmented screen rows for a training batch: mixup over each sample's
/// replicate group, then noise, then masking.
///
/// `replicates_of(i)` lists the dataset rows sharing row `i`'s replicate group.
pub fn augment_screen_batch<'a>(
    x_g: &Matrix,
    rows: &[usize],
    replicates_of: impl Fn(usize) -> &'a [usize],
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<Matrix> {
    let mut out = x_g.select_rows(rows);
    if let Some(alpha_dir) = cfg.alpha_dir {
        for (r, &i) in rows.iter().enumerate() {
            let group = replicates_of(i);
            if group.len() > 1 {
                let mixed = dirichlet_mixup(&x_g.select_rows(group), alpha_dir, rng)?;
                out.row_mut(r).copy_from_slice(&mixed);
            }
        }
    }
    let out = add_gaussian_noise(&out, cfg.alpha_noise, rng);
    Ok(dropout_mask(&out, cfg.alpha_drop, rng))
}
