//! Monte Carlo check of pool coverage.
//!
//! If a neighbourhood `U` of latents that decode within `ε` of a target has
//! prior mass `q`, then `m` independent candidates all miss it with
//! probability `(1 − q)^m`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{self, Stream};

/// `ε` for which the identity stub with target 0 has `q = 0.1` under a
/// standard-normal prior (`Φ⁻¹(0.55)`).
pub const EPSILON_Q10: f64 = 0.125_661_346_855_074_16;

/// Draws used to estimate `q̂`.
const Q_DRAWS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaRow {
    pub m: usize,
    /// Fraction of trials in which no candidate landed within `ε`.
    pub empirical: f64,
    /// `(1 − q̂)^m`.
    pub bound: f64,
    /// Binomial standard error `sqrt(b(1 − b)/trials)` at the bound `b`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaReport {
    pub q_hat: f64,
    pub trials: usize,
    pub rows: Vec<LemmaRow>,
}

impl LemmaReport {
    /// With `q̂ = 0` the bound is vacuous and nothing can be concluded.
    pub fn inconclusive(&self) -> bool {
        self.q_hat == 0.0
    }

    /// `empirical ≤ bound + 3·se` on every row.
    pub fn within_bound(&self) -> bool {
        self.rows.iter().all(|r| r.empirical <= r.bound + 3.0 * r.se)
    }

    /// Empirical failure rate non-increasing in `m` within two combined
    /// standard errors.
    pub fn monotone(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].empirical <= w[0].empirical + 2.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt())
    }
}

/// Estimates the miss probability for each `m` in `m_list` over `trials`
/// repetitions, for a 1-D decoder stub under a standard-normal prior.
pub fn coverage_lemma_mc<F>(decoder: F, target: f64, epsilon: f64, m_list: &[usize], trials: usize, seed: u64) -> LemmaReport
where
    F: Fn(f64) -> f64,
{
    let hit = |z: f64| (decoder(z) - target).abs() <= epsilon;
    let mut r = rng::keyed(seed, Stream::Lemma, u64::MAX);
    let hits = (0..Q_DRAWS).filter(|_| hit(r.sample(StandardNormal))).count();
    let q_hat = hits as f64 / Q_DRAWS as f64;

    let rows = m_list
        .iter()
        .map(|&m| {
            let misses = (0..trials)
                .filter(|&t| {
                    let mut r = rng::keyed(seed, Stream::Lemma, ((m as u64) << 32) | t as u64);
                    !(0..m).any(|_| hit(r.sample(StandardNormal)))
                })
                .count();
            let bound = (1.0 - q_hat).powi(m as i32);
            LemmaRow {
                m,
                empirical: misses as f64 / trials as f64,
                bound,
                se: (bound * (1.0 - bound) / trials as f64).sqrt(),
            }
        })
        .collect();
    LemmaReport { q_hat, trials, rows }
}
