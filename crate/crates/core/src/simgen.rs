//! Synthetic confounded paired data.
//!
//! Each sample has a real-effect id and a batch id. One latent vector per
//! effect and one per batch are drawn from a standard normal, a fresh noise
//! vector is drawn per sample, and the concatenation is pushed through two
//! independent random networks to produce the drug and screen observations.
//! Both modalities therefore share the effect and the batch factor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{PairedDataset, Vocab};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::numkern::{Matrix, RngStream};
use crate::persist::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_samples: usize,
    pub n_effects: usize,
    pub n_batches: usize,
    pub per_batch: usize,
    /// Dimension of each effect and batch latent vector.
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub obs_dim: usize,
    /// Number of affine layers in each generator network.
    pub generator_depth: usize,
    pub generator_hidden: usize,
    pub activation: Activation,
    /// Standard deviation of generator weights and biases.
    pub weight_std: f64,
    /// Assign batch ids in contiguous blocks of `per_batch`.
    pub strict_balance: bool,
    /// Fraction of each batch held out for evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_samples: 1250,
            n_effects: 5,
            n_batches: 25,
            per_batch: 50,
            latent_dim: 10,
            noise_dim: 10,
            obs_dim: 10,
            generator_depth: 2,
            generator_hidden: 30,
            activation: Activation::Tanh,
            weight_std: 1.0,
            strict_balance: true,
            holdout_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_effects == 0 || self.n_batches == 0 {
            return Err(Error::Config("simulation needs samples, effects and batches".into()));
        }
        if self.strict_balance && self.n_batches * self.per_batch != self.n_samples {
            return Err(Error::Config(format!(
                "{} batches x {} per batch != {} samples",
                self.n_batches, self.per_batch, self.n_samples
            )));
        }
        if self.latent_dim == 0 || self.obs_dim == 0 || self.generator_depth == 0 || self.generator_hidden == 0 {
            return Err(Error::Config("simulation dimensions must be positive".into()));
        }
        if !(self.weight_std >= 0.0) || !self.weight_std.is_finite() {
            return Err(Error::Config(format!("weight_std = {} must be >= 0", self.weight_std)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!("holdout_fraction = {} must lie in [0, 1)", self.holdout_fraction)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 * self.latent_dim + self.noise_dim
    }
}

/// Factor vectors and generator networks; everything except per-sample draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGenerator {
    pub effect_vectors: Matrix,
    pub batch_vectors: Matrix,
    pub net_d: Mlp,
    pub net_g: Mlp,
}

impl SimGenerator {
    pub fn init(cfg: &SimConfig, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let effect_vectors = rng.fork("effects").normal_matrix(cfg.n_effects, cfg.latent_dim, 1.0);
        let batch_vectors = rng.fork("batches").normal_matrix(cfg.n_batches, cfg.latent_dim, 1.0);
        Ok(Self {
            effect_vectors,
            batch_vectors,
            net_d: random_net(cfg, &mut rng.fork("net_d"))?,
            net_g: random_net(cfg, &mut rng.fork("net_g"))?,
        })
    }

    /// Observations for one sample given its effect, batch and noise.
    pub fn observe(&self, effect: usize, batch: usize, noise: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut z = self.effect_vectors.row(effect).to_vec();
        z.extend_from_slice(self.batch_vectors.row(batch));
        z.extend_from_slice(noise);
        let z = Matrix::row_vector(&z);
        Ok((self.net_d.forward(&z)?.into_data(), self.net_g.forward(&z)?.into_data()))
    }
}

fn random_net(cfg: &SimConfig, rng: &mut RngStream) -> Result<Mlp> {
    let mut dims = vec![cfg.input_dim()];
    dims.extend(std::iter::repeat_n(cfg.generator_hidden, cfg.generator_depth - 1));
    dims.push(cfg.obs_dim);
    let layers = dims
        .windows(2)
        .map(|w| Linear {
            weight: rng.normal_matrix(w[0], w[1], cfg.weight_std),
            bias: rng.normal_matrix(1, w[1], cfg.weight_std),
        })
        .collect();
    Mlp::from_layers(layers, cfg.activation, false)
}

/// Generated data with its train/hold-out partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub dataset: PairedDataset,
    /// Zero-based effect index per row (the CSV label column is one-based).
    pub effects: Vec<usize>,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Metadata sidecar written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub config: SimConfig,
    pub generator: SimGenerator,
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

pub fn generate_simulation(cfg: &SimConfig) -> Result<(Simulation, SimGenerator)> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed, "simgen");
    let generator = SimGenerator::init(cfg, &root)?;
    let n = cfg.n_samples;

    let mut assign = root.fork("assign");
    let batches: Vec<usize> = if cfg.strict_balance {
        (0..n).map(|i| i / cfg.per_batch).collect()
    } else {
        (0..n).map(|_| assign.index(cfg.n_batches)).collect()
    };
    let effects: Vec<usize> = (0..n).map(|_| assign.index(cfg.n_effects)).collect();

    let noise = root.fork("noise").normal_matrix(n, cfg.noise_dim, 1.0);
    let mut xd = Vec::with_capacity(n * cfg.obs_dim);
    let mut xg = Vec::with_capacity(n * cfg.obs_dim);
    for i in 0..n {
        let (d, g) = generator.observe(effects[i], batches[i], noise.row(i))?;
        xd.extend(d);
        xg.extend(g);
    }

    let ids: Vec<String> = (0..n).map(|i| format!("s{i:05}")).collect();
    let dataset = PairedDataset {
        replicate_vocab: Vocab::from_names(ids.clone()),
        replicate: (0..n).collect(),
        ids,
        x_d: Matrix::new(n, cfg.obs_dim, xd)?,
        x_g: Matrix::new(n, cfg.obs_dim, xg)?,
        batch: batches.clone(),
        cell_line: vec![0; n],
        batch_vocab: Vocab::from_names((1..=cfg.n_batches).map(|b| b.to_string()).collect()),
        cell_vocab: Vocab::from_names(vec!["sim".into()]),
        labels: Some(effects.iter().map(|&e| e as i64 + 1).collect()),
        group_a: None,
        group_b: None,
    };
    dataset.validate()?;
    let (train, holdout) = stratified_split(&batches, cfg.n_batches, cfg.holdout_fraction, &mut root.fork("split"));
    Ok((Simulation { dataset, effects, train, holdout }, generator))
}

/// Per-batch split holding out `round(fraction·size)` rows of each batch.
/// Both index lists are returned in ascending order.
pub fn stratified_split(batches: &[usize], n_batches: usize, fraction: f64, rng: &mut RngStream) -> (Vec<usize>, Vec<usize>) {
    let mut members = vec![Vec::new(); n_batches];
    for (i, &b) in batches.iter().enumerate() {
        members[b].push(i);
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for rows in &members {
        let k = (fraction * rows.len() as f64).round() as usize;
        let mut picked = vec![false; rows.len()];
        for j in rng.sample_without_replacement(rows.len(), k) {
            picked[j] = true;
        }
        for (j, &row) in rows.iter().enumerate() {
            if picked[j] { holdout.push(row) } else { train.push(row) }
        }
    }
    train.sort_unstable();
    holdout.sort_unstable();
    (train, holdout)
}

pub fn metadata_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Write the CSV and its metadata sidecar.
pub fn write_simulation(sim: &Simulation, generator: &SimGenerator, cfg: &SimConfig, csv: &Path) -> Result<()> {
    sim.dataset.write_csv(csv)?;
    let meta = SimMetadata { config: cfg.clone(), generator: generator.clone(), train: sim.train.clone(), holdout: sim.holdout.clone() };
    let mut bytes = serde_json::to_vec_pretty(&meta)?;
    bytes.push(b'\n');
    write_atomic(&metadata_path(csv), &bytes)
}

pub fn read_metadata(csv: &Path) -> Result<Option<SimMetadata>> {
    let path = metadata_path(csv);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path)?;
    serde_json::from_slice(&bytes).map(Some).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
