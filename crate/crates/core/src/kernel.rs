//! Similarity and distance primitives, pairwise matrices and exact k-nearest
//! neighbour radii.
//!
//! All reductions run in index order so results do not depend on how callers
//! shard work across threads.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("DimMismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("ZeroVector: cosine similarity of a zero vector")]
    ZeroVector,
    #[error("TooFewRows: {rows} rows cannot provide a {k}-th neighbour")]
    TooFewRows { rows: usize, k: usize },
    #[error("empty input")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityKind {
    #[default]
    Cosine,
    /// Negated Euclidean distance.
    NegEuclidean,
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::DimMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| {
        let d = x - y;
        acc + d * d
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64, KernelError> {
    check_dims(a, b)?;
    Ok(squared_distance(a, b).sqrt())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, KernelError> {
    check_dims(a, b)?;
    let na = dot(a, a);
    let nb = dot(b, b);
    if na == 0.0 || nb == 0.0 {
        return Err(KernelError::ZeroVector);
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): cosine(v, v) is then
    // exactly 1.
    Ok((dot(a, b) / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn similarity(a: &[f64], b: &[f64], kind: SimilarityKind) -> Result<f64, KernelError> {
    match kind {
        SimilarityKind::Cosine => cosine(a, b),
        SimilarityKind::NegEuclidean => euclidean(a, b).map(|d| -d),
    }
}

/// Symmetric matrix of `similarity(rows[i], rows[j])`, each unordered pair
/// evaluated once.
pub fn pairwise_matrix<V: AsRef<[f64]> + Sync>(
    rows: &[V],
    kind: SimilarityKind,
) -> Result<DMatrix<f64>, KernelError> {
    let n = rows.len();
    if n == 0 {
        return Err(KernelError::Empty);
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| similarity(rows[i].as_ref(), rows[j].as_ref(), kind))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (offset, &s) in row.iter().enumerate() {
            let j = i + offset;
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    Ok(m)
}

/// Per-row Euclidean distance to the k-th nearest other row.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnRadii {
    pub k: usize,
    pub radii: Vec<f64>,
}

impl KnnRadii {
    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }
}

/// Exact k-NN radii. Only the k-th smallest distance value matters, so how
/// equidistant neighbours are ordered cannot change the result.
pub fn knn_radii<V: AsRef<[f64]> + Sync>(rows: &[V], k: usize) -> Result<KnnRadii, KernelError> {
    if k == 0 || rows.len() <= k {
        return Err(KernelError::TooFewRows { rows: rows.len(), k });
    }
    let dim = rows[0].as_ref().len();
    if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != dim) {
        return Err(KernelError::DimMismatch {
            left: dim,
            right: bad.as_ref().len(),
        });
    }
    let radii = (0..rows.len())
        .into_par_iter()
        .map(|i| {
            let anchor = rows[i].as_ref();
            let mut dists: Vec<f64> = rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| squared_distance(anchor, r.as_ref()).sqrt())
                .collect();
            let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect();
    Ok(KnnRadii { k, radii })
}

/// Number of anchor balls (inclusive boundary) that contain `query`.
pub fn ball_count<V: AsRef<[f64]>>(
    query: &[f64],
    anchors: &[V],
    radii: &KnnRadii,
) -> Result<usize, KernelError> {
    let mut count = 0;
    for (anchor, &r) in anchors.iter().zip(&radii.radii) {
        if euclidean(query, anchor.as_ref())? <= r {
            count += 1;
        }
    }
    Ok(count)
}

/// True iff some anchor ball (inclusive boundary) contains `query`.
pub fn within_manifold<V: AsRef<[f64]>>(
    query: &[f64],
    anchors: &[V],
    radii: &KnnRadii,
) -> Result<bool, KernelError> {
    for (anchor, &r) in anchors.iter().zip(&radii.radii) {
        if euclidean(query, anchor.as_ref())? <= r {
            return Ok(true);
        }
    }
    Ok(false)
}
