//! Prompt-agnostic metrics over pooled embeddings: k-NN manifold precision,
//! recall, density and coverage, and the Vendi score.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::conditional::Sample;
use crate::kernel::{self, KernelError, KnnRadii, SimilarityKind};

/// k used by the manifold metrics unless a sweep overrides it.
pub const DEFAULT_K: usize = 3;

/// Negative eigenvalues above this magnitude are treated as solver roundoff.
pub const EIGEN_CLIP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarginalError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("NonFiniteKernel: similarity kernel holds NaN or infinity")]
    NonFiniteKernel,
    #[error("kernel is not positive semidefinite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("vendi requires a kernel with unit diagonal; {0:?} does not provide one")]
    UnsupportedKernel(SimilarityKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalInput {
    pub real: Vec<Sample>,
    pub generated: Vec<Sample>,
    pub k: usize,
}

impl MarginalInput {
    pub fn new(real: Vec<Sample>, generated: Vec<Sample>, k: usize) -> Self {
        Self { real, generated, k }
    }

    /// The same sets with the roles of real and generated exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            real: self.generated.clone(),
            generated: self.real.clone(),
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalScores {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn membership_fraction<V: AsRef<[f64]> + Sync>(
    queries: &[V],
    anchors: &[V],
    radii: &KnnRadii,
) -> Result<f64, KernelError> {
    let hits = queries
        .par_iter()
        .map(|q| kernel::within_manifold(q.as_ref(), anchors, radii).map(usize::from))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / queries.len() as f64)
}

fn precision_with(input: &MarginalInput, real_radii: &KnnRadii) -> Result<f64, KernelError> {
    if input.generated.is_empty() {
        return Err(KernelError::Empty);
    }
    membership_fraction(&input.generated, &input.real, real_radii)
}

fn density_with(input: &MarginalInput, real_radii: &KnnRadii) -> Result<f64, KernelError> {
    if input.generated.is_empty() {
        return Err(KernelError::Empty);
    }
    let counts = input
        .generated
        .par_iter()
        .map(|g| kernel::ball_count(&g.vector, &input.real, real_radii))
        .collect::<Result<Vec<_>, _>>()?;
    let total: usize = counts.iter().sum();
    Ok(total as f64 / (input.k as f64 * input.generated.len() as f64))
}

fn coverage_with(input: &MarginalInput, real_radii: &KnnRadii) -> Result<f64, KernelError> {
    if input.generated.is_empty() {
        return Err(KernelError::Empty);
    }
    let covered = input
        .real
        .par_iter()
        .zip(&real_radii.radii)
        .map(|(anchor, &r)| {
            for g in &input.generated {
                if kernel::euclidean(&g.vector, &anchor.vector)? <= r {
                    return Ok(1usize);
                }
            }
            Ok(0)
        })
        .collect::<Result<Vec<_>, KernelError>>()?;
    Ok(covered.iter().sum::<usize>() as f64 / input.real.len() as f64)
}

/// Fraction of generated samples inside the real k-NN manifold.
pub fn precision(input: &MarginalInput) -> Result<f64, MarginalError> {
    let radii = kernel::knn_radii(&input.real, input.k)?;
    Ok(precision_with(input, &radii)?)
}

/// Fraction of real samples inside the generated k-NN manifold.
pub fn recall(input: &MarginalInput) -> Result<f64, MarginalError> {
    precision(&input.swapped())
}

/// Average number of real balls containing each generated sample, divided
/// by k.
pub fn density(input: &MarginalInput) -> Result<f64, MarginalError> {
    let radii = kernel::knn_radii(&input.real, input.k)?;
    Ok(density_with(input, &radii)?)
}

/// Fraction of real balls holding at least one generated sample.
pub fn coverage(input: &MarginalInput) -> Result<f64, MarginalError> {
    let radii = kernel::knn_radii(&input.real, input.k)?;
    Ok(coverage_with(input, &radii)?)
}

/// All four manifold metrics, computing each radius set once.
pub fn manifold_scores(input: &MarginalInput) -> Result<MarginalScores, MarginalError> {
    let real_radii = kernel::knn_radii(&input.real, input.k)?;
    let swapped = input.swapped();
    let gen_radii = kernel::knn_radii(&swapped.real, input.k)?;
    Ok(MarginalScores {
        precision: precision_with(input, &real_radii)?,
        recall: precision_with(&swapped, &gen_radii)?,
        density: density_with(input, &real_radii)?,
        coverage: coverage_with(input, &real_radii)?,
    })
}

/// Precision, density and coverage: the metrics that only need real radii.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealSideScores {
    pub precision: f64,
    pub density: f64,
    pub coverage: f64,
}

pub fn real_side_scores(input: &MarginalInput) -> Result<RealSideScores, MarginalError> {
    let radii = kernel::knn_radii(&input.real, input.k)?;
    Ok(RealSideScores {
        precision: precision_with(input, &radii)?,
        density: density_with(input, &radii)?,
        coverage: coverage_with(input, &radii)?,
    })
}

/// `exp(-sum(l * ln l))` over the eigenvalues `l` of `kernel / n`.
pub fn vendi_from_kernel(kernel: &DMatrix<f64>) -> Result<f64, MarginalError> {
    let n = kernel.nrows();
    if n == 0 {
        return Err(KernelError::Empty.into());
    }
    spectral_entropy_exp(kernel / n as f64)
}

fn spectral_entropy_exp(scaled: DMatrix<f64>) -> Result<f64, MarginalError> {
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(MarginalError::NonFiniteKernel);
    }
    let eigen = SymmetricEigen::new(scaled);
    let mut entropy = 0.0;
    for &l in eigen.eigenvalues.iter() {
        if l < -EIGEN_CLIP {
            return Err(MarginalError::NotPositiveSemidefinite(l));
        }
        if l > 0.0 {
            entropy -= l * l.ln();
        }
    }
    Ok(entropy.exp())
}

/// Vendi score of a sample set under the cosine kernel.
///
/// When the feature dimension is below the sample count, the non-zero
/// spectrum of `K / n` is taken from the `d x d` matrix `X^T X / n` of
/// unit-normalized rows, which has the same non-zero eigenvalues.
pub fn vendi<V: AsRef<[f64]> + Sync>(rows: &[V], kind: SimilarityKind) -> Result<f64, MarginalError> {
    if kind != SimilarityKind::Cosine {
        return Err(MarginalError::UnsupportedKernel(kind));
    }
    let n = rows.len();
    if n == 0 {
        return Err(KernelError::Empty.into());
    }
    let dim = rows[0].as_ref().len();
    if dim >= n {
        return vendi_from_kernel(&kernel::pairwise_matrix(rows, kind)?);
    }
    let mut x = DMatrix::zeros(n, dim);
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != dim {
            return Err(KernelError::DimMismatch {
                left: dim,
                right: r.len(),
            }
            .into());
        }
        let norm = kernel::dot(r, r).sqrt();
        if norm == 0.0 {
            return Err(KernelError::ZeroVector.into());
        }
        for (j, v) in r.iter().enumerate() {
            x[(i, j)] = v / norm;
        }
    }
    spectral_entropy_exp(x.transpose() * &x / n as f64)
}
