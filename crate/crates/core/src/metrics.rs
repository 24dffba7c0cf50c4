//! Sample-quality metrics on raw feature vectors.
//!
//! Precision/recall and density/coverage follow the k-nearest-neighbour
//! definitions: each point of a reference set owns a ball whose radius is
//! the distance to its k-th nearest *other* point, and membership uses `≤`.
//! FID fits Gaussians (unbiased covariance) to both sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::ModeGeometry;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("k-nearest-neighbour radius needs more than k = {k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("feature widths differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("feature buffer of length {len} is not a multiple of dim {dim}")]
    Ragged { len: usize, dim: usize },
    #[error("covariance needs at least dim + 1 = {needed} points, got {n}")]
    Covariance { n: usize, needed: usize },
    #[error("covariance product is not positive semi-definite (eigenvalue {0:e})")]
    NonPsd(f64),
    #[error("mode radius {radius} is not below half the minimum centre gap {half_gap}")]
    OverlappingModes { radius: f64, half_gap: f64 },
    #[error("mode centres {0} and {1} coincide")]
    DuplicateCenters(usize, usize),
}

/// A borrowed set of `len()` feature vectors of width `dim`, row-major.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet<'a> {
    pub points: &'a [f64],
    pub dim: usize,
}

impl<'a> FeatureSet<'a> {
    pub fn new(points: &'a [f64], dim: usize) -> Result<Self, MetricError> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(MetricError::Ragged { len: points.len(), dim });
        }
        Ok(Self { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// `sqrt(Σ (a − b)²)`.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Row-major `|a| × |b|` distance matrix.
fn distances(a: FeatureSet<'_>, b: FeatureSet<'_>) -> Vec<f64> {
    (0..a.len())
        .into_par_iter()
        .flat_map_iter(|i| (0..b.len()).map(move |j| euclidean(a.row(i), b.row(j))))
        .collect()
}

/// Distance from each point to its k-th nearest other point of the set.
pub fn knn_radii(set: FeatureSet<'_>, k: usize) -> Result<Vec<f64>, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let n = set.len();
    if n <= k {
        return Err(MetricError::TooFewPoints { n, k });
    }
    let d = distances(set, set);
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i * n + j]).collect();
            let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

fn check_dims(a: FeatureSet<'_>, b: FeatureSet<'_>) -> Result<(), MetricError> {
    if a.dim != b.dim {
        return Err(MetricError::DimMismatch(a.dim, b.dim));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

/// Precision, recall, density and coverage from one pass over the
/// real × fake distance matrix.
pub fn prdc(real: FeatureSet<'_>, fake: FeatureSet<'_>, k: usize) -> Result<Prdc, MetricError> {
    check_dims(real, fake)?;
    let r_real = knn_radii(real, k)?;
    let r_fake = knn_radii(fake, k)?;
    let (nr, nf) = (real.len(), fake.len());
    let d = distances(real, fake);

    let mut fake_in_real = vec![0usize; nf];
    let mut real_hit = 0usize;
    let mut real_in_fake = 0usize;
    for i in 0..nr {
        let row = &d[i * nf..(i + 1) * nf];
        let mut hit = false;
        let mut recalled = false;
        for (j, &dist) in row.iter().enumerate() {
            if dist <= r_real[i] {
                fake_in_real[j] += 1;
                hit = true;
            }
            if dist <= r_fake[j] {
                recalled = true;
            }
        }
        real_hit += hit as usize;
        real_in_fake += recalled as usize;
    }
    Ok(Prdc {
        precision: fake_in_real.iter().filter(|&&c| c > 0).count() as f64 / nf as f64,
        recall: real_in_fake as f64 / nr as f64,
        density: fake_in_real.iter().sum::<usize>() as f64 / (k * nf) as f64,
        coverage: real_hit as f64 / nr as f64,
    })
}

pub fn precision_recall(real: FeatureSet<'_>, fake: FeatureSet<'_>, k: usize) -> Result<(f64, f64), MetricError> {
    let m = prdc(real, fake, k)?;
    Ok((m.precision, m.recall))
}

pub fn density_coverage(real: FeatureSet<'_>, fake: FeatureSet<'_>, k: usize) -> Result<(f64, f64), MetricError> {
    let m = prdc(real, fake, k)?;
    Ok((m.density, m.coverage))
}

fn gaussian_fit(set: FeatureSet<'_>) -> Result<(DVector<f64>, DMatrix<f64>), MetricError> {
    let (n, dim) = (set.len(), set.dim);
    if n < dim + 1 || n < 2 {
        return Err(MetricError::Covariance {
            n,
            needed: (dim + 1).max(2),
        });
    }
    let mut mu = DVector::zeros(dim);
    for i in 0..n {
        mu += DVector::from_column_slice(set.row(i));
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for i in 0..n {
        let c = DVector::from_column_slice(set.row(i)) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

/// Symmetric PSD square root with eigenvalues clamped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Relative tolerance for negative eigenvalues of `Σr^½ Σf Σr^½`.
pub const PSD_TOL: f64 = 1e-8;

/// `‖μr − μf‖² + Tr(Σr + Σf − 2 (Σr Σf)^½)`.
///
/// The trace of the cross term is the sum of square roots of the eigenvalues
/// of the symmetric matrix `Σr^½ Σf Σr^½`, which has the same spectrum as
/// `Σr Σf`.
pub fn fid(real: FeatureSet<'_>, fake: FeatureSet<'_>) -> Result<f64, MetricError> {
    check_dims(real, fake)?;
    let (mr, cr) = gaussian_fit(real)?;
    let (mf, cf) = gaussian_fit(fake)?;
    let s = psd_sqrt(&cr);
    let inner = SymmetricEigen::new(symmetrize(&(&s * &cf * &s)));
    let scale = inner.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut tr_sqrt = 0.0;
    for &v in inner.eigenvalues.iter() {
        if v < -PSD_TOL * scale {
            return Err(MetricError::NonPsd(v));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let dm = (&mr - &mf).norm_squared();
    Ok((dm + cr.trace() + cf.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Number of modes with at least one fake sample within `geo.radius` of the
/// centre.
pub fn mode_coverage(geo: &ModeGeometry, fake: FeatureSet<'_>) -> Result<usize, MetricError> {
    let centers = FeatureSet::new(&geo.centers, geo.dim)?;
    if !fake.is_empty() {
        check_dims(centers, fake)?;
    }
    let k = centers.len();
    let mut gap = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d = euclidean(centers.row(a), centers.row(b));
            if d == 0.0 {
                return Err(MetricError::DuplicateCenters(a, b));
            }
            gap = gap.min(d);
        }
    }
    if geo.radius >= 0.5 * gap {
        return Err(MetricError::OverlappingModes {
            radius: geo.radius,
            half_gap: 0.5 * gap,
        });
    }
    Ok((0..k)
        .filter(|&c| (0..fake.len()).any(|j| euclidean(centers.row(c), fake.row(j)) <= geo.radius))
        .count())
}

/// Every metric for one (real, fake) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
    pub fid: f64,
    pub modes_covered: Option<usize>,
    pub modes_total: Option<usize>,
    pub k: usize,
    pub n_real: usize,
    pub n_fake: usize,
}

impl MetricReport {
    pub fn compute(real: FeatureSet<'_>, fake: FeatureSet<'_>, k: usize, geometry: Option<&ModeGeometry>) -> Result<Self, MetricError> {
        let m = prdc(real, fake, k)?;
        let fid = fid(real, fake)?;
        let modes_covered = geometry.map(|g| mode_coverage(g, fake)).transpose()?;
        Ok(Self {
            precision: m.precision,
            recall: m.recall,
            density: m.density,
            coverage: m.coverage,
            fid,
            modes_covered,
            modes_total: geometry.map(ModeGeometry::modes),
            k,
            n_real: real.len(),
            n_fake: fake.len(),
        })
    }

    /// Whether every field lies in its documented range.
    pub fn in_range(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        unit(self.precision)
            && unit(self.recall)
            && unit(self.coverage)
            && self.density >= 0.0
            && self.density.is_finite()
            && self.fid >= -1e-9
            && self.fid.is_finite()
            && match (self.modes_covered, self.modes_total) {
                (Some(c), Some(t)) => c <= t,
                (None, None) => true,
                _ => false,
            }
    }

    /// Bitwise equality of every field.
    pub fn bit_eq(&self, other: &Self) -> bool {
        let f = |a: f64, b: f64| a.to_bits() == b.to_bits();
        f(self.precision, other.precision)
            && f(self.recall, other.recall)
            && f(self.density, other.density)
            && f(self.coverage, other.coverage)
            && f(self.fid, other.fid)
            && self.modes_covered == other.modes_covered
            && self.modes_total == other.modes_total
            && (self.k, self.n_real, self.n_fake) == (other.k, other.n_real, other.n_fake)
    }
}
