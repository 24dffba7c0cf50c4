//! IMLE and RS-IMLE training.
//!
//! Each data point is matched to its nearest generated candidate from a pool
//! of latents; the generator is then pulled toward the data along those
//! matched latents. RS-IMLE first discards candidates that already land
//! within `ε` of some data point, so every match has to come from a
//! candidate that is at least `ε` away.

mod lemma;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

pub use lemma::{coverage_lemma_mc, LemmaReport, LemmaRow, EPSILON_Q10};
pub use optim::{ema_update, Adam, AdamConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{HistoryRow, RefreshEvent, TrainState, Trainer};

use crate::error::ModelError;
use crate::generator::Generator;
use crate::metrics::{euclidean, FeatureSet};
use crate::params::ParamSet;
use crate::rng::{self, Stream};
use crate::tensor::{DiffTensor, Real, Tape, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("every pool candidate was rejected at epsilon = {epsilon}; lower imle.epsilon")]
    EmptyPool { epsilon: f64 },
    #[error("non-finite gradient in `{tensor}`")]
    NonFiniteGradient { tensor: String },
    #[error("invalid training setup at `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("dataset is empty")]
    EmptyDataset,
}

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> TrainError {
    TrainError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn default_refresh() -> usize {
    50
}
fn default_lr() -> f64 {
    1e-3
}
fn default_ema() -> f64 {
    0.999
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImleConfig {
    /// Pool size; defaults to 20 × the dataset size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Rejection radius; defaults to the 5th percentile of pairwise data
    /// distances. `0` gives plain IMLE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Optimisation steps between pool refreshes.
    #[serde(default = "default_refresh")]
    pub refresh: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub steps: usize,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Minibatch size; defaults to the full dataset when it has at most 256
    /// points and 64 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
}

impl ImleConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            m: None,
            epsilon: None,
            refresh: default_refresh(),
            lr: default_lr(),
            steps,
            ema_decay: default_ema(),
            batch: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.m == Some(0) {
            return Err(invalid("m", "must be at least 1"));
        }
        if let Some(e) = self.epsilon {
            if e.is_nan() || e < 0.0 {
                return Err(invalid("epsilon", "must be non-negative"));
            }
        }
        if self.refresh == 0 {
            return Err(invalid("refresh", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("ema_decay", "must lie in [0, 1)"));
        }
        if self.batch == Some(0) {
            return Err(invalid("batch", "must be at least 1"));
        }
        Ok(())
    }

    pub fn pool_size(&self, n: usize) -> usize {
        self.m.unwrap_or(20 * n)
    }

    pub fn batch_size(&self, n: usize) -> usize {
        match self.batch {
            Some(b) => b.min(n),
            None if n <= 256 => n,
            None => 64,
        }
    }
}

/// Candidate latents with their decoded samples and features, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub d: usize,
    pub out_dim: usize,
    pub latents: Vec<f32>,
    pub samples: Vec<f32>,
    pub features: Vec<f64>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.latents.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn latent(&self, j: usize) -> &[f32] {
        &self.latents[j * self.d..(j + 1) * self.d]
    }

    pub fn feature_set(&self) -> FeatureSet<'_> {
        FeatureSet {
            points: &self.features,
            dim: self.out_dim,
        }
    }
}

/// The feature map: identity on raw sample coordinates.
pub fn features(samples: &[f32]) -> Vec<f64> {
    samples.iter().map(|&v| v as f64).collect()
}

/// Draws `m` standard-normal latents keyed by `(seed, Pool, round·2³² + j)`
/// and decodes them with `params`.
pub fn sample_pool(gen: &Generator, params: &ParamSet, m: usize, seed: u64, round: u64) -> Result<Pool, TrainError> {
    if m == 0 {
        return Err(invalid("m", "must be at least 1"));
    }
    let d = gen.latent_dim();
    let latents = rng::latents(seed, Stream::Pool, round << 32, m, d);
    let samples = gen.sample(params, &latents, None)?;
    Ok(Pool {
        d,
        out_dim: gen.out_dim(),
        features: features(&samples),
        latents,
        samples,
    })
}

/// Pool indices whose features are at least `epsilon` from every data point.
pub fn rs_reject(pool: FeatureSet<'_>, data: FeatureSet<'_>, epsilon: f64) -> Vec<usize> {
    (0..pool.len())
        .filter(|&j| (0..data.len()).all(|i| euclidean(data.row(i), pool.row(j)) >= epsilon))
        .collect()
}

/// Nearest accepted candidate for every data point.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Assignment {
    pub fn mean_distance(&self) -> f64 {
        self.distances.iter().sum::<f64>() / self.distances.len().max(1) as f64
    }
}

/// For each data point, the candidate among `accepted` at minimum Euclidean
/// distance; ties go to the lowest pool index.
pub fn match_nearest(data: FeatureSet<'_>, pool: FeatureSet<'_>, accepted: &[usize], epsilon: f64) -> Result<Assignment, TrainError> {
    if accepted.is_empty() {
        return Err(TrainError::EmptyPool { epsilon });
    }
    let mut sorted = accepted.to_vec();
    sorted.sort_unstable();
    let mut sigma = Vec::with_capacity(data.len());
    let mut distances = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = data.row(i);
        let (mut best, mut best_d) = (sorted[0], f64::INFINITY);
        for &j in &sorted {
            let dist = euclidean(x, pool.row(j));
            if dist < best_d {
                best = j;
                best_d = dist;
            }
        }
        sigma.push(best);
        distances.push(best_d);
    }
    Ok(Assignment { sigma, distances })
}

/// Mean squared error over all coordinates.
pub fn imle_loss<T: Real>(tape: &Tape<T>, matched: &DiffTensor<T>, data: &DiffTensor<T>) -> Result<DiffTensor<T>, TrainError> {
    let diff = tape.sub(matched, data)?;
    Ok(tape.mean(&tape.mul(&diff, &diff)?)?)
}

/// Nearest-rank 5th percentile of the pairwise distances of `data`.
pub fn default_epsilon(data: FeatureSet<'_>) -> f64 {
    let n = data.len();
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            d.push(euclidean(data.row(a), data.row(b)));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let rank = ((0.05 * d.len() as f64).ceil() as usize).max(1) - 1;
    let (_, v, _) = d.select_nth_unstable_by(rank, f64::total_cmp);
    *v
}

#[cfg(test)]
mod tests;
