//! Automatic image metrics: Fréchet distance between feature sets and
//! CLIPscore-style cosine similarity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedder, ImageArtifact};
use crate::util;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("feature dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("empty feature set")]
    Empty,
    #[error("no real images to compare against")]
    NoReals,
    #[error("image could not be embedded: {0}")]
    Image(#[from] BackendError),
}

/// Condition number above which both covariances get `εI` added.
pub const MAX_CONDITION: f64 = 1e12;
pub const REGULARIZATION_EPS: f64 = 1e-6;

/// `n × d` feature matrix with a provenance tag.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    vectors: DMatrix<f64>,
    pub source: String,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], source: impl Into<String>) -> Result<Self, MetricsError> {
        let n = rows.len();
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(MetricsError::Empty);
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(MetricsError::Dimension {
                left: d,
                right: bad.len(),
            });
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self {
            vectors: DMatrix::from_fn(n, d, |i, j| rows[i][j]),
            source: source.into(),
        })
    }

    pub fn singleton(v: &[f64], source: impl Into<String>) -> Result<Self, MetricsError> {
        Self::new(&[v.to_vec()], source)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        let mut mu = DVector::zeros(self.dim());
        for row in self.vectors.row_iter() {
            mu += row.transpose();
        }
        mu / n
    }

    /// Sample covariance with denominator `n − 1`; zero for a single vector.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let d = self.dim();
        if n < 2 {
            return DMatrix::zeros(d, d);
        }
        let mu = self.mean();
        let mut centered = self.vectors.clone();
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        (centered.transpose() * &centered) / (n as f64 - 1.0)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// PSD square root via eigendecomposition, negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fréchet distance from sufficient statistics.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let (mut s1, mut s2) = (s1.clone(), s2.clone());
    if condition_number(&s1) > MAX_CONDITION || condition_number(&s2) > MAX_CONDITION {
        let eps = DMatrix::identity(s1.nrows(), s1.ncols()) * REGULARIZATION_EPS;
        s1 += &eps;
        s2 += &eps;
    }
    let root = psd_sqrt(&s1);
    let cross = trace_sqrt(&(&root * &s2 * &root));
    let diff = (mu1 - mu2).norm_squared();
    (diff + s1.trace() + s2.trace() - 2.0 * cross).max(0.0)
}

fn check_dims(a: &FeatureSet, b: &FeatureSet) -> Result<(), MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::Dimension {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Fréchet distance between the Gaussians fitted to `a` and `b`.
///
/// Two singleton sets give exactly their squared Euclidean distance.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    if a.len() == 1 && b.len() == 1 {
        return Ok(squared_distance(a.vectors.row(0).iter(), b.vectors.row(0).iter()));
    }
    Ok(frechet_distance(&a.mean(), &a.covariance(), &b.mean(), &b.covariance()))
}

/// [`fid`] with `eps·I` added to both covariances first.
pub fn fid_jittered(a: &FeatureSet, b: &FeatureSet, eps: f64) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let jitter = DMatrix::identity(a.dim(), a.dim()) * eps;
    Ok(frechet_distance(
        &a.mean(),
        &(a.covariance() + &jitter),
        &b.mean(),
        &(b.covariance() + &jitter),
    ))
}

fn squared_distance<'a>(x: impl Iterator<Item = &'a f64>, y: impl Iterator<Item = &'a f64>) -> f64 {
    x.zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Cosine of two embedding vectors (a dot product for unit inputs), clamped to [−1, 1].
pub fn clipscore_pair(u: &[f64], v: &[f64]) -> f64 {
    util::dot(u, v).clamp(-1.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfReals {
    pub fid_min: f64,
    pub clip_max: f64,
}

/// Minimum singleton FID over raw features and maximum CLIPscore over the
/// normalized features of the same vectors.
pub fn best_of_features(generated: &[f64], reals: &[Vec<f64>]) -> Result<BestOfReals, MetricsError> {
    if reals.is_empty() {
        return Err(MetricsError::NoReals);
    }
    let g = FeatureSet::singleton(generated, "generated")?;
    let g_unit = util::normalize(generated.to_vec());
    let mut fid_min = f64::INFINITY;
    let mut clip_max = f64::NEG_INFINITY;
    for r in reals {
        let rs = FeatureSet::singleton(r, "real")?;
        fid_min = fid_min.min(fid(&g, &rs)?);
        clip_max = clip_max.max(clipscore_pair(&g_unit, &util::normalize(r.clone())));
    }
    Ok(BestOfReals { fid_min, clip_max })
}

/// Embeds the generated image and each real image, then applies [`best_of_features`].
pub fn best_of_reals(
    generated: &ImageArtifact,
    reals: &[ImageArtifact],
    embedder: &dyn Embedder,
) -> Result<BestOfReals, MetricsError> {
    if reals.is_empty() {
        return Err(MetricsError::NoReals);
    }
    let g = embedder.embed_image_raw(&generated.bytes)?;
    let rs = reals
        .iter()
        .map(|r| embedder.embed_image_raw(&r.bytes))
        .collect::<Result<Vec<_>, _>>()?;
    best_of_features(&g, &rs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMetric {
    pub entity: String,
    pub fid_min: f64,
    pub clip_max: f64,
    pub n_reals: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntity {
    pub entity: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_fid: f64,
    pub mean_clip: f64,
    pub n_entities: usize,
}

/// Contents of `metrics_report.json` for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    /// Per-entity FID compares single images, so it reduces to a squared distance.
    pub fid_mode: String,
    pub rows: Vec<EntityMetric>,
    pub skipped: Vec<SkippedEntity>,
    pub aggregates: Aggregates,
}

pub const DEGENERATE_FID: &str = "degenerate FID: singleton sets, squared feature distance";

impl MetricReport {
    /// Rows are sorted by entity label; aggregates sum in that order.
    pub fn new(method: impl Into<String>, mut rows: Vec<EntityMetric>, mut skipped: Vec<SkippedEntity>) -> Self {
        rows.sort_by(|a, b| a.entity.cmp(&b.entity));
        skipped.sort_by(|a, b| a.entity.cmp(&b.entity));
        let n = rows.len();
        let (mean_fid, mean_clip) = if n == 0 {
            (0.0, 0.0)
        } else {
            let mut f = 0.0;
            let mut c = 0.0;
            for r in &rows {
                f += r.fid_min;
                c += r.clip_max;
            }
            (f / n as f64, c / n as f64)
        };
        Self {
            method: method.into(),
            fid_mode: DEGENERATE_FID.to_owned(),
            rows,
            skipped,
            aggregates: Aggregates {
                mean_fid,
                mean_clip,
                n_entities: n,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::new(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>(), "t").unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = set(&[&[1.0, 2.0, 0.5], &[0.3, -1.0, 2.0], &[2.0, 2.0, 2.0], &[0.0, 1.0, -3.0]]);
        assert!(fid(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn one_dimensional_unit_shift() {
        // sample variance of {-v, v, 0, 0} is 2v²/3 = 1
        let v = 1.5f64.sqrt();
        let a = set(&[&[-v], &[v], &[0.0], &[0.0]]);
        let b = set(&[&[1.0 - v], &[1.0 + v], &[1.0], &[1.0]]);
        assert!((a.covariance()[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn singletons_give_squared_distance_exactly() {
        let x = [0.1, 0.7, -2.3];
        let y = [1.9, -0.4, 0.25];
        let expected: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let d = fid(&FeatureSet::singleton(&x, "g").unwrap(), &FeatureSet::singleton(&y, "r").unwrap()).unwrap();
        assert_eq!(d, expected);
    }

    #[test]
    fn errors() {
        assert!(matches!(FeatureSet::new(&[], "x"), Err(MetricsError::Empty)));
        assert!(matches!(
            FeatureSet::new(&[vec![1.0], vec![f64::NAN]], "x"),
            Err(MetricsError::NonFinite)
        ));
        let a = set(&[&[1.0, 2.0]]);
        let b = set(&[&[1.0]]);
        assert!(matches!(fid(&a, &b), Err(MetricsError::Dimension { .. })));
    }

    #[test]
    fn clipscore_cases() {
        assert_eq!(clipscore_pair(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(clipscore_pair(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((clipscore_pair(&[1.0, 0.0], &[0.6, 0.8]) - 0.6).abs() < 1e-12);
    }

    fn real_at(dist2: f64, cos: f64) -> Vec<f64> {
        // generated vector is (1, 0); solve |a·u − g|² = dist2 for the scale a
        let a = cos + (cos * cos - 1.0 + dist2).sqrt();
        vec![a * cos, a * (1.0 - cos * cos).sqrt()]
    }

    #[test]
    fn best_of_three_reals() {
        let reals = vec![real_at(4.0, 0.2), real_at(1.0, 0.9), real_at(9.0, 0.5)];
        let b = best_of_features(&[1.0, 0.0], &reals).unwrap();
        assert!((b.fid_min - 1.0).abs() < 1e-12);
        assert!((b.clip_max - 0.9).abs() < 1e-12);
        let same = best_of_features(&[0.3, 0.4], &[vec![0.3, 0.4]]).unwrap();
        assert_eq!(same.fid_min, 0.0);
        assert!((same.clip_max - 1.0).abs() < 1e-12);
        assert!(matches!(best_of_features(&[1.0], &[]), Err(MetricsError::NoReals)));
    }

    #[test]
    fn report_aggregates_in_label_order() {
        let rows = vec![
            EntityMetric {
                entity: "b".into(),
                fid_min: 2.0,
                clip_max: 0.5,
                n_reals: 3,
            },
            EntityMetric {
                entity: "a".into(),
                fid_min: 1.0,
                clip_max: 0.7,
                n_reals: 1,
            },
        ];
        let r = MetricReport::new("vsns", rows, vec![]);
        assert_eq!(r.rows[0].entity, "a");
        assert_eq!(r.aggregates.n_entities, 2);
        assert!((r.aggregates.mean_fid - 1.5).abs() < 1e-15);
        assert!((r.aggregates.mean_clip - 0.6).abs() < 1e-15);
    }
}
