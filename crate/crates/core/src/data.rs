//! Synthetic datasets with known modes.
//!
//! Every sample is drawn from its own keyed generator `(seed, Data, i)`, so
//! generation is a pure function of the [`DatasetSpec`] and can be split
//! arbitrarily.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::decoder::{IMAGE_LEN, IMAGE_SIDE};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec at `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{0} has no discrete mode geometry")]
    NotAMixture(&'static str),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    /// `modes` isotropic Gaussians evenly spaced on a circle.
    GaussianRing { modes: usize, radius: f64, std: f64 },
    /// Two interleaved half circles with Gaussian noise.
    TwoMoons { noise: f64 },
    /// `grid × grid` Gaussians on a square lattice centred at the origin.
    GridMixture { grid: usize, spacing: f64, std: f64 },
    /// 16 procedural 8×8 RGB pattern classes with per-sample colour jitter.
    MicroPatterns { jitter: f64 },
}

impl DataKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianRing { .. } => "gaussian_ring",
            Self::TwoMoons { .. } => "two_moons",
            Self::GridMixture { .. } => "grid_mixture",
            Self::MicroPatterns { .. } => "micro_patterns",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub n: usize,
    pub seed: u64,
}

/// Samples as `f64` rows plus the generating mode of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.points.iter().map(|&v| v as f32).collect()
    }
}

/// Mode centres and the assignment radius used for mode coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGeometry {
    pub dim: usize,
    pub centers: Vec<f64>,
    pub radius: f64,
}

impl ModeGeometry {
    pub fn modes(&self) -> usize {
        self.centers.len() / self.dim
    }
}

const PALETTES: [[[f64; 3]; 2]; 4] = [
    [[0.9, 0.1, 0.1], [-0.9, -0.6, 0.2]],
    [[0.1, 0.9, 0.2], [0.6, -0.8, -0.9]],
    [[0.1, 0.3, 0.9], [-0.7, 0.8, -0.3]],
    [[0.9, 0.9, -0.8], [-0.9, -0.9, 0.9]],
];

/// Unjittered pattern: motif `class / 4`, palette `class % 4`, values CHW.
fn pattern(class: usize, offset: [f64; 3]) -> Vec<f64> {
    let (motif, pal) = (class / 4, &PALETTES[class % 4]);
    let n = IMAGE_SIDE;
    let mut img = vec![0.0; IMAGE_LEN];
    for y in 0..n {
        for x in 0..n {
            // mixing weight between the two palette colours
            let t = match motif {
                0 => ((y / 2) % 2) as f64,
                1 => ((x / 2) % 2) as f64,
                2 => ((x / 2 + y / 2) % 2) as f64,
                _ => (x + y) as f64 / (2 * n - 2) as f64,
            };
            for ch in 0..3 {
                let v = pal[0][ch] * (1.0 - t) + pal[1][ch] * t + offset[ch];
                img[ch * n * n + y * n + x] = v;
            }
        }
    }
    img
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match self.kind {
            DataKind::MicroPatterns { .. } => IMAGE_LEN,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        let check_std = |std: f64, gap: f64| {
            if !(std.is_finite() && std >= 0.0) {
                Err(invalid("std", "must be finite and non-negative"))
            } else if gap.is_finite() && std >= 0.5 * gap {
                Err(invalid("std", format!("must be below half the minimum centre gap ({gap:.4})")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            DataKind::GaussianRing { modes, radius, std } => {
                if modes == 0 {
                    return Err(invalid("modes", "must be at least 1"));
                }
                if !(radius.is_finite() && radius > 0.0) {
                    return Err(invalid("radius", "must be positive"));
                }
                check_std(std, ring_gap(modes, radius))
            }
            DataKind::TwoMoons { noise } => {
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(invalid("noise", "must be finite and non-negative"));
                }
                Ok(())
            }
            DataKind::GridMixture { grid, spacing, std } => {
                if grid == 0 {
                    return Err(invalid("grid", "must be at least 1"));
                }
                if !(spacing.is_finite() && spacing > 0.0) {
                    return Err(invalid("spacing", "must be positive"));
                }
                check_std(std, if grid > 1 { spacing } else { f64::INFINITY })
            }
            DataKind::MicroPatterns { jitter } => {
                if !(jitter.is_finite() && (0.0..0.5).contains(&jitter)) {
                    return Err(invalid("jitter", "must lie in [0, 0.5)"));
                }
                Ok(())
            }
        }
    }

    /// Mode centres of mixture kinds (and pattern prototypes).
    fn centers(&self) -> Option<Vec<f64>> {
        match self.kind {
            DataKind::GaussianRing { modes, radius, .. } => Some(
                (0..modes)
                    .flat_map(|k| {
                        let a = 2.0 * PI * k as f64 / modes as f64;
                        [radius * a.cos(), radius * a.sin()]
                    })
                    .collect(),
            ),
            DataKind::GridMixture { grid, spacing, .. } => {
                let half = (grid as f64 - 1.0) / 2.0;
                Some(
                    (0..grid * grid)
                        .flat_map(|k| [((k % grid) as f64 - half) * spacing, ((k / grid) as f64 - half) * spacing])
                        .collect(),
                )
            }
            DataKind::MicroPatterns { .. } => Some((0..16).flat_map(|c| pattern(c, [0.0; 3])).collect()),
            DataKind::TwoMoons { .. } => None,
        }
    }

    pub fn generate(&self) -> Result<Dataset, DataError> {
        self.validate()?;
        let dim = self.dim();
        let centers = self.centers();
        let mut points = Vec::with_capacity(self.n * dim);
        let mut labels = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut r = rng::keyed(self.seed, Stream::Data, i as u64);
            match self.kind {
                DataKind::GaussianRing { std, .. } | DataKind::GridMixture { std, .. } => {
                    let c = centers.as_ref().expect("mixture");
                    let label = r.random_range(0..c.len() / 2);
                    let gx: f64 = r.sample(StandardNormal);
                    let gy: f64 = r.sample(StandardNormal);
                    points.push(c[2 * label] + std * gx);
                    points.push(c[2 * label + 1] + std * gy);
                    labels.push(label);
                }
                DataKind::TwoMoons { noise } => {
                    let label = r.random_range(0..2usize);
                    let t = r.random_range(0.0..PI);
                    let (x, y) = if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let gx: f64 = r.sample(StandardNormal);
                    let gy: f64 = r.sample(StandardNormal);
                    points.push(x + noise * gx);
                    points.push(y + noise * gy);
                    labels.push(label);
                }
                DataKind::MicroPatterns { jitter } => {
                    let label = r.random_range(0..16usize);
                    let offset = [0, 1, 2].map(|_| r.random_range(-jitter..=jitter));
                    points.extend(pattern(label, offset));
                    labels.push(label);
                }
            }
        }
        Ok(Dataset { dim, points, labels })
    }

    /// Exact mode centres and an assignment radius of 0.45 × the minimum
    /// centre gap.
    pub fn mode_geometry(&self) -> Result<ModeGeometry, DataError> {
        self.validate()?;
        let centers = self.centers().ok_or(DataError::NotAMixture("two_moons"))?;
        let dim = self.dim();
        let k = centers.len() / dim;
        if k < 2 {
            return Err(invalid("modes", "a single mode has no centre gap, so the radius is undefined"));
        }
        let mut gap = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                gap = gap.min(crate::metrics::euclidean(
                    &centers[a * dim..(a + 1) * dim],
                    &centers[b * dim..(b + 1) * dim],
                ));
            }
        }
        Ok(ModeGeometry {
            dim,
            centers,
            radius: 0.45 * gap,
        })
    }
}

fn ring_gap(modes: usize, radius: f64) -> f64 {
    if modes < 2 {
        f64::INFINITY
    } else {
        2.0 * radius * (PI / modes as f64).sin()
    }
}

/// The frozen 8-mode ring (radius 1, std 0.05).
pub fn ring8(n: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        kind: DataKind::GaussianRing {
            modes: 8,
            radius: 1.0,
            std: 0.05,
        },
        n,
        seed,
    }
}
