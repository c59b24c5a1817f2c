//! Prompt-conditional metrics: VQA consistency, conditional diversity,
//! conditional realism and embedding-space (CLIPScore-style) consistency,
//! plus their unweighted aggregation over prompts.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::kernel::{self, KernelError, SimilarityKind};
use crate::model::{PromptId, RecordId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("MissingVerdicts: generated record `{0}` has no verdicts")]
    MissingVerdicts(RecordId),
    #[error("NeedAtLeastTwoSamples: conditional diversity needs N >= 2, got {0}")]
    NeedAtLeastTwoSamples(usize),
    #[error("NoRealReferences: prompt `{0}` has no real images")]
    NoRealReferences(PromptId),
    #[error("MissingPromptEmbedding: prompt `{0}`")]
    MissingPromptEmbedding(PromptId),
    #[error("prompt `{0}` has no generated samples")]
    EmptyBundle(PromptId),
    #[error("EmptyInput: nothing to aggregate")]
    EmptyInput,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record_id: RecordId,
    pub vector: Vec<f64>,
}

impl Sample {
    pub fn new(record_id: RecordId, vector: Vec<f64>) -> Self {
        Self { record_id, vector }
    }
}

impl AsRef<[f64]> for Sample {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

/// The N generations of one config for one prompt, its N' real references
/// and optional side inputs.
///
/// Samples are kept sorted by record id, which fixes every summation order.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub prompt_id: PromptId,
    pub generated: Vec<Sample>,
    pub real: Vec<Sample>,
    pub prompt_embedding: Option<Vec<f64>>,
    /// Per-image verdicts in question order.
    pub verdicts: BTreeMap<RecordId, Vec<bool>>,
    /// Named per-record scores usable as a top-m criterion.
    pub record_scores: BTreeMap<RecordId, BTreeMap<String, f64>>,
    /// Size of the batch before any top-m filtering.
    pub pool_size: usize,
}

impl PromptBundle {
    pub fn new(prompt_id: PromptId, mut generated: Vec<Sample>, mut real: Vec<Sample>) -> Self {
        generated.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        real.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        let pool_size = generated.len();
        Self {
            prompt_id,
            generated,
            real,
            prompt_embedding: None,
            verdicts: BTreeMap::new(),
            record_scores: BTreeMap::new(),
            pool_size,
        }
    }

    pub fn with_prompt_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.prompt_embedding = Some(embedding);
        self
    }

    pub fn with_verdicts(mut self, verdicts: BTreeMap<RecordId, Vec<bool>>) -> Self {
        self.verdicts = verdicts;
        self
    }

    pub fn with_record_scores(mut self, scores: BTreeMap<RecordId, BTreeMap<String, f64>>) -> Self {
        self.record_scores = scores;
        self
    }

    /// N, the number of generated samples currently in the bundle.
    pub fn n(&self) -> usize {
        self.generated.len()
    }

    /// N', the number of real references.
    pub fn n_real(&self) -> usize {
        self.real.len()
    }

    /// Fraction of true verdicts for one image.
    pub fn image_consistency(&self, record: &RecordId) -> Result<f64, MetricError> {
        match self.verdicts.get(record) {
            Some(v) if !v.is_empty() => {
                Ok(v.iter().filter(|b| **b).count() as f64 / v.len() as f64)
            }
            _ => Err(MetricError::MissingVerdicts(record.clone())),
        }
    }
}

/// Mean over images of the fraction of VQA questions answered as expected.
pub fn consistency_dsg(bundle: &PromptBundle) -> Result<f64, MetricError> {
    if bundle.generated.is_empty() {
        return Err(MetricError::EmptyBundle(bundle.prompt_id.clone()));
    }
    let mut sum = 0.0;
    for s in &bundle.generated {
        sum += bundle.image_consistency(&s.record_id)?;
    }
    Ok(sum / bundle.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diversity {
    /// Mean similarity over ordered pairs of distinct samples.
    pub raw: f64,
    /// `1 - raw`, oriented so that larger is more diverse.
    pub score: f64,
}

pub fn conditional_diversity(
    bundle: &PromptBundle,
    kind: SimilarityKind,
) -> Result<Diversity, MetricError> {
    let n = bundle.n();
    if n < 2 {
        return Err(MetricError::NeedAtLeastTwoSamples(n));
    }
    // The similarity is symmetric: the ordered-pair sum is twice the
    // unordered one.
    let mut sum = 0.0;
    for (i, a) in bundle.generated.iter().enumerate() {
        for b in &bundle.generated[i + 1..] {
            sum += kernel::similarity(&a.vector, &b.vector, kind)?;
        }
    }
    let raw = 2.0 * sum / (n * n - n) as f64;
    Ok(Diversity {
        raw,
        score: 1.0 - raw,
    })
}

/// Mean over generated samples of the best similarity to any real image of
/// the same prompt.
pub fn conditional_realism(bundle: &PromptBundle, kind: SimilarityKind) -> Result<f64, MetricError> {
    if bundle.generated.is_empty() {
        return Err(MetricError::EmptyBundle(bundle.prompt_id.clone()));
    }
    if bundle.real.is_empty() {
        return Err(MetricError::NoRealReferences(bundle.prompt_id.clone()));
    }
    let mut sum = 0.0;
    for g in &bundle.generated {
        let mut best = f64::NEG_INFINITY;
        for r in &bundle.real {
            best = best.max(kernel::similarity(&r.vector, &g.vector, kind)?);
        }
        sum += best;
    }
    Ok(sum / bundle.n() as f64)
}

/// Mean cosine between the prompt embedding and each generated sample.
pub fn clip_consistency(bundle: &PromptBundle) -> Result<f64, MetricError> {
    let prompt = bundle
        .prompt_embedding
        .as_ref()
        .ok_or_else(|| MetricError::MissingPromptEmbedding(bundle.prompt_id.clone()))?;
    if bundle.generated.is_empty() {
        return Err(MetricError::EmptyBundle(bundle.prompt_id.clone()));
    }
    let mut sum = 0.0;
    for g in &bundle.generated {
        sum += kernel::cosine(prompt, &g.vector)?;
    }
    Ok(sum / bundle.n() as f64)
}

/// Per-prompt values; `None` marks a metric that was not computed for the
/// prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptScores {
    pub prompt_id: PromptId,
    pub consistency: Option<f64>,
    pub diversity_raw: Option<f64>,
    pub diversity_score: Option<f64>,
    pub realism: Option<f64>,
    pub clip_consistency: Option<f64>,
}

impl PromptScores {
    pub fn empty(prompt_id: PromptId) -> Self {
        Self {
            prompt_id,
            consistency: None,
            diversity_raw: None,
            diversity_score: None,
            realism: None,
            clip_consistency: None,
        }
    }
}

/// Unweighted mean of one field over the prompts that carry it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldMean {
    pub mean: Option<f64>,
    pub contributing: usize,
    pub total: usize,
}

impl FieldMean {
    fn over(values: impl Iterator<Item = Option<f64>>) -> Self {
        let mut sum = 0.0;
        let mut contributing = 0;
        let mut total = 0;
        for v in values {
            total += 1;
            if let Some(v) = v {
                sum += v;
                contributing += 1;
            }
        }
        let mean = (contributing > 0).then(|| sum / contributing as f64);
        Self {
            mean,
            contributing,
            total,
        }
    }

    /// e.g. `"2/3"`.
    pub fn coverage_note(&self) -> String {
        format!("{}/{}", self.contributing, self.total)
    }

    pub fn is_partial(&self) -> bool {
        self.contributing < self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalScores {
    /// Sorted by prompt id.
    pub per_prompt: Vec<PromptScores>,
    pub consistency: FieldMean,
    pub diversity_raw: FieldMean,
    pub diversity_score: FieldMean,
    pub realism: FieldMean,
    pub clip_consistency: FieldMean,
}

/// Averages per-prompt scores, reducing in ascending prompt order.
pub fn aggregate(per_prompt: &[PromptScores]) -> Result<ConditionalScores, MetricError> {
    if per_prompt.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut rows = per_prompt.to_vec();
    rows.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    let field = |f: fn(&PromptScores) -> Option<f64>| FieldMean::over(rows.iter().map(f));
    Ok(ConditionalScores {
        consistency: field(|p| p.consistency),
        diversity_raw: field(|p| p.diversity_raw),
        diversity_score: field(|p| p.diversity_score),
        realism: field(|p| p.realism),
        clip_consistency: field(|p| p.clip_consistency),
        per_prompt: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rid(s: &str) -> RecordId {
        RecordId::new(s).unwrap()
    }

    fn pid(s: &str) -> PromptId {
        PromptId::new(s).unwrap()
    }

    fn samples(prefix: &str, vs: &[Vec<f64>]) -> Vec<Sample> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| Sample::new(rid(&format!("{prefix}{i:03}")), v.clone()))
            .collect()
    }

    fn bundle(gen: &[Vec<f64>], real: &[Vec<f64>]) -> PromptBundle {
        PromptBundle::new(pid("p"), samples("g", gen), samples("r", real))
    }

    #[test]
    fn dsg_all_true() {
        let b = bundle(&[vec![1.0], vec![2.0]], &[]).with_verdicts(BTreeMap::from([
            (rid("g000"), vec![true, true]),
            (rid("g001"), vec![true]),
        ]));
        assert_eq!(consistency_dsg(&b).unwrap(), 1.0);
    }

    #[test]
    fn dsg_hand_example() {
        let b = bundle(&[vec![1.0], vec![2.0]], &[]).with_verdicts(BTreeMap::from([
            (rid("g000"), vec![true, false, true, false]),
            (rid("g001"), vec![true, true, true]),
        ]));
        assert_eq!(consistency_dsg(&b).unwrap(), 0.75);
    }

    #[test]
    fn dsg_missing_questions() {
        let b = bundle(&[vec![1.0], vec![2.0]], &[]).with_verdicts(BTreeMap::from([
            (rid("g000"), vec![true]),
            (rid("g001"), vec![]),
        ]));
        assert_eq!(
            consistency_dsg(&b),
            Err(MetricError::MissingVerdicts(rid("g001")))
        );
        let none = bundle(&[vec![1.0]], &[]);
        assert!(matches!(consistency_dsg(&none), Err(MetricError::MissingVerdicts(_))));
    }

    #[test]
    fn diversity_identical_and_orthogonal() {
        let same = bundle(&vec![vec![0.6, 0.8]; 4], &[]);
        let d = conditional_diversity(&same, SimilarityKind::Cosine).unwrap();
        assert_eq!((d.raw, d.score), (1.0, 0.0));
        let orth = bundle(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[]);
        let d = conditional_diversity(&orth, SimilarityKind::Cosine).unwrap();
        assert_eq!((d.raw, d.score), (0.0, 1.0));
    }

    #[test]
    fn diversity_three_vectors() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = bundle(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]], &[]);
        let d = conditional_diversity(&b, SimilarityKind::Cosine).unwrap();
        let expected = (2.0 * 0.0 + 2.0 * h + 2.0 * h) / 6.0;
        assert!((d.raw - expected).abs() < 1e-9);
        assert!((d.raw - 0.4714045207910317).abs() < 1e-9);
    }

    #[test]
    fn diversity_needs_two() {
        let b = bundle(&[vec![1.0]], &[]);
        assert_eq!(
            conditional_diversity(&b, SimilarityKind::Cosine),
            Err(MetricError::NeedAtLeastTwoSamples(1))
        );
    }

    #[test]
    fn realism_limits() {
        let set = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, 0.3]];
        assert_eq!(
            conditional_realism(&bundle(&set, &set), SimilarityKind::Cosine).unwrap(),
            1.0
        );
        let orth = bundle(&[vec![1.0, 0.0, 0.0]], &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]);
        assert_eq!(conditional_realism(&orth, SimilarityKind::Cosine).unwrap(), 0.0);
        assert!(matches!(
            conditional_realism(&bundle(&set, &[]), SimilarityKind::Cosine),
            Err(MetricError::NoRealReferences(_))
        ));
    }

    #[test]
    fn clip_consistency_cases() {
        let p = vec![1.0, 0.0];
        let same = bundle(&[p.clone(), vec![3.0, 0.0]], &[]).with_prompt_embedding(p.clone());
        assert_eq!(clip_consistency(&same).unwrap(), 1.0);
        let orth = bundle(&[vec![0.0, 2.0]], &[]).with_prompt_embedding(p.clone());
        assert_eq!(clip_consistency(&orth).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mixed = bundle(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]], &[])
            .with_prompt_embedding(p);
        assert!((clip_consistency(&mixed).unwrap() - (1.0 + h) / 3.0).abs() < 1e-12);
        assert!(matches!(
            clip_consistency(&bundle(&[vec![1.0]], &[])),
            Err(MetricError::MissingPromptEmbedding(_))
        ));
    }

    fn scores(p: &str, c: Option<f64>) -> PromptScores {
        PromptScores {
            consistency: c,
            ..PromptScores::empty(pid(p))
        }
    }

    #[test]
    fn aggregate_cases() {
        assert_eq!(aggregate(&[]), Err(MetricError::EmptyInput));

        let one = aggregate(&[scores("a", Some(0.3))]).unwrap();
        assert_eq!(one.consistency.mean, Some(0.3));

        let two = aggregate(&[scores("a", Some(0.5)), scores("b", Some(1.0))]).unwrap();
        assert_eq!(two.consistency.mean, Some(0.75));

        let rows = [scores("a", Some(0.2)), scores("b", None), scores("c", Some(0.6))];
        let three = aggregate(&rows).unwrap();
        let filtered: Vec<f64> = rows.iter().filter_map(|r| r.consistency).collect();
        let oracle = filtered.iter().sum::<f64>() / filtered.len() as f64;
        assert_eq!(three.consistency.mean, Some(oracle));
        assert_eq!(three.consistency.coverage_note(), "2/3");
        assert_eq!(three.realism.mean, None);
    }

    fn unit_vectors(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), n).prop_map(|vs| {
            vs.into_iter()
                .map(|mut v| {
                    if v.iter().all(|x| x.abs() < 1e-3) {
                        v[0] = 1.0;
                    }
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|x| *x /= n);
                    v
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn outputs_within_bounds(gen in unit_vectors(2..8), real in unit_vectors(1..6)) {
            let b = bundle(&gen, &real).with_prompt_embedding(real[0].clone());
            let d = conditional_diversity(&b, SimilarityKind::Cosine).unwrap();
            prop_assert!((-1.0..=1.0).contains(&d.raw));
            let r = conditional_realism(&b, SimilarityKind::Cosine).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            let c = clip_consistency(&b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }

        #[test]
        fn permutation_and_scale_invariant(
            gen in unit_vectors(2..8),
            real in unit_vectors(1..6),
            scale in 0.01f64..100.0,
        ) {
            let b = bundle(&gen, &real);
            let mut shuffled_gen = samples("g", &gen);
            shuffled_gen.reverse();
            let mut shuffled_real = samples("r", &real);
            shuffled_real.rotate_left(1);
            let permuted = PromptBundle::new(pid("p"), shuffled_gen, shuffled_real);
            let k = SimilarityKind::Cosine;
            prop_assert_eq!(conditional_diversity(&b, k).unwrap(), conditional_diversity(&permuted, k).unwrap());
            prop_assert_eq!(conditional_realism(&b, k).unwrap(), conditional_realism(&permuted, k).unwrap());

            let scaled = |vs: &[Vec<f64>]| vs.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect::<Vec<Vec<f64>>>();
            let sb = bundle(&scaled(&gen), &scaled(&real));
            prop_assert!((conditional_diversity(&b, k).unwrap().raw - conditional_diversity(&sb, k).unwrap().raw).abs() < 1e-12);
            prop_assert!((conditional_realism(&b, k).unwrap() - conditional_realism(&sb, k).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn diversity_is_mean_off_diagonal(gen in unit_vectors(2..9)) {
            let b = bundle(&gen, &[]);
            let m = kernel::pairwise_matrix(&b.generated, SimilarityKind::Cosine).unwrap();
            let n = gen.len();
            let mut off = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        off += m[(i, j)];
                    }
                }
            }
            let d = conditional_diversity(&b, SimilarityKind::Cosine).unwrap();
            prop_assert!((d.raw - off / (n * n - n) as f64).abs() < 1e-12);
        }
    }
}
