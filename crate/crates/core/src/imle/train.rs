use rand::seq::index;

use super::{
    default_epsilon, imle_loss, match_nearest, rs_reject, sample_pool, Adam, AdamConfig, Assignment, ImleConfig, Pool, TrainError,
};
use crate::data::Dataset;
use crate::generator::Generator;
use crate::mapper::GradScope;
use crate::metrics::FeatureSet;
use crate::params::ParamSet;
use crate::rng::{self, Stream};
use crate::tensor::{DiffTensor, Tape};

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamSet,
    pub adam: Adam,
    pub ema: ParamSet,
    /// Completed optimisation steps.
    pub step: u64,
    pub seed: u64,
    /// Latent matched to each data point at the last refresh, `[n, d]`
    /// row-major.
    pub matched: Option<Vec<f32>>,
    /// Rows of `matched`.
    pub matched_rows: usize,
    /// Candidates that survived rejection at the last refresh.
    pub accepted: usize,
    /// Size of the last pool.
    pub pool: usize,
}

impl TrainState {
    /// Bitwise equality of every stored quantity.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let latents_eq = match (&self.matched, &other.matched) {
            (Some(a), Some(b)) => a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (None, None) => true,
            _ => false,
        };
        self.params.bit_eq(&other.params)
            && self.adam.m.bit_eq(&other.adam.m)
            && self.adam.v.bit_eq(&other.adam.v)
            && self.adam.t == other.adam.t
            && self.ema.bit_eq(&other.ema)
            && self.step == other.step
            && self.seed == other.seed
            && latents_eq
            && self.matched_rows == other.matched_rows
            && (self.accepted, self.pool) == (other.accepted, other.pool)
    }

    /// Fraction of the last pool that survived rejection.
    pub fn acceptance(&self) -> f64 {
        if self.pool == 0 {
            0.0
        } else {
            self.accepted as f64 / self.pool as f64
        }
    }
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub loss: f64,
    /// Mean distance between matched samples and their data points, measured
    /// on this step's batch before the update.
    pub mean_distance: f64,
    pub acceptance: f64,
}

/// Emitted after each pool refresh, before matching results are used.
#[derive(Debug)]
pub struct RefreshEvent<'a> {
    pub step: u64,
    pub epsilon: f64,
    pub pool: &'a Pool,
    pub accepted: &'a [usize],
    pub assignment: &'a Assignment,
}

/// A generator, a dataset and the hyperparameters that tie them together.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub gen: Generator,
    pub cfg: ImleConfig,
    data: Vec<f64>,
    data32: Vec<f32>,
    n: usize,
    dim: usize,
    epsilon: f64,
    m: usize,
    batch: usize,
}

impl Trainer {
    pub fn new(gen: Generator, cfg: ImleConfig, data: &Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if data.dim != gen.out_dim() {
            return Err(super::invalid(
                "decoder",
                format!("generator emits {} values but samples have {}", gen.out_dim(), data.dim),
            ));
        }
        let set = FeatureSet {
            points: &data.points,
            dim: data.dim,
        };
        let epsilon = cfg.epsilon.unwrap_or_else(|| default_epsilon(set));
        let n = data.len();
        Ok(Self {
            m: cfg.pool_size(n),
            batch: cfg.batch_size(n),
            gen,
            cfg,
            data: data.points.clone(),
            data32: data.to_f32(),
            n,
            dim: data.dim,
            epsilon,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn pool_size(&self) -> usize {
        self.m
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn data_features(&self) -> FeatureSet<'_> {
        FeatureSet {
            points: &self.data,
            dim: self.dim,
        }
    }

    pub fn init_state(&self, seed: u64) -> TrainState {
        let params = self.gen.init(seed);
        TrainState {
            adam: Adam::new(AdamConfig::new(self.cfg.lr), &params),
            ema: params.clone(),
            params,
            step: 0,
            seed,
            matched: None,
            matched_rows: 0,
            accepted: 0,
            pool: 0,
        }
    }

    /// Resamples the pool, rejects, and rematches every data point.
    fn refresh(&self, state: &mut TrainState, observer: &mut dyn FnMut(&RefreshEvent<'_>)) -> Result<(), TrainError> {
        let round = state.step / self.cfg.refresh as u64;
        let pool = sample_pool(&self.gen, &state.params, self.m, state.seed, round)?;
        let accepted = rs_reject(pool.feature_set(), self.data_features(), self.epsilon);
        let assignment = match_nearest(self.data_features(), pool.feature_set(), &accepted, self.epsilon)?;
        observer(&RefreshEvent {
            step: state.step,
            epsilon: self.epsilon,
            pool: &pool,
            accepted: &accepted,
            assignment: &assignment,
        });
        let mut matched = Vec::with_capacity(self.n * pool.d);
        for &j in &assignment.sigma {
            matched.extend_from_slice(pool.latent(j));
        }
        state.matched = Some(matched);
        state.matched_rows = self.n;
        state.accepted = accepted.len();
        state.pool = self.m;
        Ok(())
    }

    fn batch_indices(&self, seed: u64, step: u64) -> Vec<usize> {
        if self.batch >= self.n {
            return (0..self.n).collect();
        }
        let mut r = rng::keyed(seed, Stream::Batch, step);
        index::sample(&mut r, self.n, self.batch).into_vec()
    }

    /// One optimisation step, refreshing the pool first when due.
    pub fn step(&self, state: &mut TrainState, observer: &mut dyn FnMut(&RefreshEvent<'_>)) -> Result<HistoryRow, TrainError> {
        if state.step.is_multiple_of(self.cfg.refresh as u64) || state.matched.is_none() {
            self.refresh(state, observer)?;
        }
        let matched = state.matched.as_ref().expect("refreshed above");
        let d = self.gen.latent_dim();
        let idx = self.batch_indices(state.seed, state.step);
        let mut z = Vec::with_capacity(idx.len() * d);
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in &idx {
            z.extend_from_slice(&matched[i * d..(i + 1) * d]);
            x.extend_from_slice(&self.data32[i * self.dim..(i + 1) * self.dim]);
        }
        let z = DiffTensor::new(&[idx.len(), d], z)?;
        let x = DiffTensor::new(&[idx.len(), self.dim], x)?;

        let tape = Tape::new();
        let p = state.params.on_tape(&tape);
        let out = self.gen.forward(&tape, &p, &z, None, GradScope::ShortGradient)?;
        let loss = imle_loss(&tape, &out.x, &x)?;
        let grads = tape.backward(&loss)?;
        let mut g = ParamSet::new();
        for (name, leaf) in p.iter() {
            g.insert(name, grads.wrt_or_zero(leaf));
        }

        let mean_distance = out
            .x
            .values()
            .chunks_exact(self.dim)
            .zip(x.values().chunks_exact(self.dim))
            .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| (u as f64 - v as f64).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / idx.len() as f64;

        let mut params = state.params.clone();
        let mut adam = state.adam.clone();
        adam.step(&mut params, &g)?;
        let mut ema = state.ema.clone();
        super::ema_update(&mut ema, &params, self.cfg.ema_decay);
        state.params = params;
        state.adam = adam;
        state.ema = ema;
        state.step += 1;
        Ok(HistoryRow {
            step: state.step,
            loss: loss.item() as f64,
            mean_distance,
            acceptance: state.acceptance(),
        })
    }

    /// Steps until `state.step == until`.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: u64,
        observer: &mut dyn FnMut(&RefreshEvent<'_>),
    ) -> Result<Vec<HistoryRow>, TrainError> {
        let mut history = Vec::with_capacity(until.saturating_sub(state.step) as usize);
        while state.step < until {
            history.push(self.step(state, observer)?);
        }
        Ok(history)
    }

    /// Decodes `count` evaluation latents with the EMA weights.
    pub fn eval_samples(&self, state: &TrainState, count: usize, h_override: Option<usize>) -> Result<Vec<f64>, TrainError> {
        let latents = rng::latents(state.seed, Stream::Eval, 0, count, self.gen.latent_dim());
        let s = self.gen.sample(&state.ema, &latents, h_override)?;
        Ok(super::features(&s))
    }
}
