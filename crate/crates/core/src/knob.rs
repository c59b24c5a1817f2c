//! Post-hoc top-m filtering and metric computation across a model-knob sweep.
//!
//! Guidance scale, retrieval k and bitrate are labels on generation runs that
//! happened upstream; top-m is the one knob defined purely on outputs, so it
//! is re-executed here on the bound generated set.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::conditional::{self, MetricError, PromptBundle, PromptScores, Sample};
use crate::kernel::{self, SimilarityKind};
use crate::marginal::{self, MarginalError, MarginalInput, DEFAULT_K};
use crate::model::{
    axis, AxisRegistry, ConfigId, EmbeddingTable, GroupId, KnobConfig, MetricPoint, PromptId,
    RecordId, Role, VerdictLog,
};
use crate::store::PromptEmbeddings;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KnobError {
    #[error("CriterionUnavailable: no criterion value for record `{0}`")]
    CriterionUnavailable(RecordId),
    #[error("top-m percentage {0} outside (0, 100]")]
    InvalidPercentage(f64),
    #[error("UnresolvedBinding: config `{config_id}`: {reason}")]
    UnresolvedBinding { config_id: ConfigId, reason: String },
    #[error("UnsupportedAxis: the engine cannot compute `{0}`")]
    UnsupportedAxis(String),
    #[error("config `{config_id}`: {source}")]
    Metric {
        config_id: ConfigId,
        #[source]
        source: MetricError,
    },
    #[error("config `{config_id}`: {source}")]
    Marginal {
        config_id: ConfigId,
        #[source]
        source: MarginalError,
    },
    #[error("config `{config_id}`: {source}")]
    Filter {
        config_id: ConfigId,
        #[source]
        source: Box<KnobError>,
    },
}

/// Ranking used by top-m filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterCriterion {
    /// A named per-record score. `"dsg"` falls back to the image's verdict
    /// fraction when no explicit score is attached.
    ScoreField(String),
    /// Cosine between the prompt embedding and the sample.
    PromptCosine,
}

pub fn criterion_value(
    bundle: &PromptBundle,
    sample: &Sample,
    criterion: &FilterCriterion,
) -> Result<f64, KnobError> {
    let unavailable = || KnobError::CriterionUnavailable(sample.record_id.clone());
    match criterion {
        FilterCriterion::PromptCosine => {
            let prompt = bundle.prompt_embedding.as_ref().ok_or_else(unavailable)?;
            kernel::cosine(prompt, &sample.vector).map_err(|_| unavailable())
        }
        FilterCriterion::ScoreField(name) => {
            if let Some(v) = bundle
                .record_scores
                .get(&sample.record_id)
                .and_then(|s| s.get(name))
            {
                return Ok(*v);
            }
            if name == "dsg" {
                return bundle
                    .image_consistency(&sample.record_id)
                    .map_err(|_| unavailable());
            }
            Err(unavailable())
        }
    }
}

/// `ceil(pool_size * m_pct / 100)`, never below one.
pub fn kept_count(pool_size: usize, m_pct: f64) -> usize {
    let kept = (pool_size as f64 * m_pct / 100.0).ceil() as usize;
    kept.clamp(1, pool_size.max(1))
}

/// Keeps the highest-criterion generated samples.
///
/// The kept count is taken relative to the bundle's original pool size, so
/// filtering an already filtered bundle with the same percentage is a no-op.
/// Ties at the cut keep the smaller record id; survivors stay in record-id
/// order.
pub fn top_m_filter(
    bundle: &PromptBundle,
    m_pct: f64,
    criterion: &FilterCriterion,
) -> Result<PromptBundle, KnobError> {
    if !(m_pct > 0.0 && m_pct <= 100.0) {
        return Err(KnobError::InvalidPercentage(m_pct));
    }
    let mut ranked = bundle
        .generated
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((criterion_value(bundle, s, criterion)?, i)))
        .collect::<Result<Vec<_>, KnobError>>()?;
    let keep = kept_count(bundle.pool_size, m_pct).min(bundle.n());
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| bundle.generated[a.1].record_id.cmp(&bundle.generated[b.1].record_id))
    });
    let kept: BTreeSet<usize> = ranked.into_iter().take(keep).map(|(_, i)| i).collect();
    let mut out = bundle.clone();
    out.generated = bundle
        .generated
        .iter()
        .enumerate()
        .filter(|(i, _)| kept.contains(i))
        .map(|(_, s)| s.clone())
        .collect();
    Ok(out)
}

const CONDITIONAL_AXES: [&str; 4] = [
    axis::DSG_CONSISTENCY,
    axis::CLIP_CONSISTENCY,
    axis::COND_DIVERSITY,
    axis::COND_REALISM,
];

/// What to compute over which configs.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub configs: Vec<KnobConfig>,
    /// Axes to compute; every name must be one the engine knows.
    pub axes: AxisRegistry,
    /// Default k for the manifold metrics.
    pub k: usize,
    /// Emit one point per table group besides the pooled "all" group.
    pub group_by: bool,
    pub filter: FilterCriterion,
    /// Similarity used by the conditional metrics.
    pub similarity: SimilarityKind,
}

impl SweepPlan {
    pub fn new(configs: Vec<KnobConfig>, axes: AxisRegistry) -> Self {
        Self {
            configs,
            axes,
            k: DEFAULT_K,
            group_by: false,
            filter: FilterCriterion::PromptCosine,
            similarity: SimilarityKind::Cosine,
        }
    }

    fn wants(&self, name: &str) -> bool {
        self.axes.contains(name)
    }
}

/// Data a sweep reads.
#[derive(Debug, Clone, Copy)]
pub struct SweepInputs<'a> {
    pub table: &'a EmbeddingTable,
    pub verdicts: Option<&'a VerdictLog>,
    pub prompt_embeddings: Option<&'a PromptEmbeddings>,
}

struct Prepared<'a> {
    inputs: SweepInputs<'a>,
    vectors: Vec<Vec<f64>>,
    verdicts: Option<BTreeMap<&'a RecordId, Vec<bool>>>,
    groups: Vec<GroupId>,
}

impl Prepared<'_> {
    fn in_group(&self, row: usize, group: &GroupId) -> bool {
        group.is_all() || self.inputs.table.rows[row].meta.group_id.as_ref() == Some(group)
    }

    fn sample(&self, row: usize) -> Sample {
        Sample::new(
            self.inputs.table.rows[row].meta.record_id.clone(),
            self.vectors[row].clone(),
        )
    }
}

/// Computes one [`MetricPoint`] per `(config, group)`, configs in plan order
/// and groups as `"all"` followed by the table's groups in ascending order.
pub fn run_sweep(plan: &SweepPlan, inputs: SweepInputs<'_>) -> Result<Vec<MetricPoint>, KnobError> {
    for name in plan.axes.names() {
        if !axis::ALL.contains(&name) {
            return Err(KnobError::UnsupportedAxis(name.to_string()));
        }
    }
    let declared: BTreeSet<&ConfigId> = plan.configs.iter().map(|c| &c.config_id).collect();
    let table = inputs.table;
    let mut by_config: BTreeMap<&ConfigId, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        if let (Role::Generated, Some(c)) = (r.meta.role, r.meta.config_id.as_ref()) {
            by_config.entry(c).or_default().push(i);
        }
    }
    for c in &plan.configs {
        let unresolved = |reason: String| KnobError::UnresolvedBinding {
            config_id: c.config_id.clone(),
            reason,
        };
        let source = c.source();
        if !declared.contains(source) {
            return Err(unresolved(format!("source config `{source}` is not in the sweep")));
        }
        let Some(rows) = by_config.get(source) else {
            return Err(unresolved(format!("no generated rows for `{source}`")));
        };
        if let Some(prompts) = &c.prompts {
            let present: BTreeSet<&PromptId> =
                rows.iter().map(|&i| &table.rows[i].meta.prompt_id).collect();
            if let Some(p) = prompts.iter().find(|p| !present.contains(p)) {
                return Err(unresolved(format!("no generated rows for prompt `{p}`")));
            }
        }
    }

    let mut groups = vec![GroupId::all()];
    if plan.group_by {
        let declared_groups: BTreeSet<&GroupId> =
            table.rows.iter().filter_map(|r| r.meta.group_id.as_ref()).collect();
        groups.extend(declared_groups.into_iter().filter(|g| !g.is_all()).cloned());
    }
    let prepared = Prepared {
        inputs,
        vectors: table
            .rows
            .iter()
            .map(|r| r.vector.iter().map(|&v| f64::from(v)).collect())
            .collect(),
        verdicts: inputs.verdicts.map(VerdictLog::by_record),
        groups,
    };

    let per_config = plan
        .configs
        .par_iter()
        .map(|c| evaluate_config(plan, &prepared, c, &by_config[c.source()]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_config.into_iter().flatten().collect())
}

fn evaluate_config(
    plan: &SweepPlan,
    data: &Prepared<'_>,
    config: &KnobConfig,
    rows: &[usize],
) -> Result<Vec<MetricPoint>, KnobError> {
    let table = data.inputs.table;
    let allowed: Option<BTreeSet<&PromptId>> = config.prompts.as_ref().map(|p| p.iter().collect());
    let prompt_ok = |p: &PromptId| allowed.as_ref().is_none_or(|a| a.contains(p));

    let mut points = Vec::with_capacity(data.groups.len());
    for group in &data.groups {
        let mut point = MetricPoint::new(config.config_id.clone(), group.clone());
        let gen_rows: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| data.in_group(i, group) && prompt_ok(&table.rows[i].meta.prompt_id))
            .collect();
        if gen_rows.is_empty() {
            for name in plan.axes.names() {
                point
                    .missing
                    .insert(name.to_string(), "no generated rows in group".into());
            }
            points.push(point);
            continue;
        }
        let real_rows: Vec<usize> = (0..table.rows.len())
            .filter(|&i| table.rows[i].meta.role == Role::Real && data.in_group(i, group))
            .collect();

        let mut bundles = build_bundles(data, &gen_rows, &real_rows);
        if let Some(m) = config.top_m_pct {
            bundles = bundles
                .iter()
                .map(|b| top_m_filter(b, m, &plan.filter))
                .collect::<Result<_, _>>()
                .map_err(|e| KnobError::Filter {
                    config_id: config.config_id.clone(),
                    source: Box::new(e),
                })?;
        }

        if CONDITIONAL_AXES.iter().any(|a| plan.wants(a)) {
            conditional_axes(plan, data, config, &bundles, &mut point)?;
        }
        let pooled_gen: Vec<Sample> = bundles.iter().flat_map(|b| b.generated.clone()).collect();
        let pooled_real: Vec<Sample> = real_rows.iter().map(|&i| data.sample(i)).collect();
        marginal_axes(plan, config, pooled_gen, pooled_real, &mut point)?;
        points.push(point);
    }
    Ok(points)
}

fn build_bundles(data: &Prepared<'_>, gen_rows: &[usize], real_rows: &[usize]) -> Vec<PromptBundle> {
    let table = data.inputs.table;
    let mut gen: BTreeMap<&PromptId, Vec<usize>> = BTreeMap::new();
    for &i in gen_rows {
        gen.entry(&table.rows[i].meta.prompt_id).or_default().push(i);
    }
    let mut real: BTreeMap<&PromptId, Vec<usize>> = BTreeMap::new();
    for &i in real_rows {
        real.entry(&table.rows[i].meta.prompt_id).or_default().push(i);
    }
    gen.into_iter()
        .map(|(prompt, rows)| {
            let generated = rows.iter().map(|&i| data.sample(i)).collect();
            let reals = real
                .get(prompt)
                .map(|r| r.iter().map(|&i| data.sample(i)).collect())
                .unwrap_or_default();
            let mut b = PromptBundle::new(prompt.clone(), generated, reals);
            if let Some(v) = &data.verdicts {
                b.verdicts = rows
                    .iter()
                    .filter_map(|&i| {
                        let id = &table.rows[i].meta.record_id;
                        v.get(id).map(|q| (id.clone(), q.clone()))
                    })
                    .collect();
            }
            if let Some(e) = data.inputs.prompt_embeddings.and_then(|p| p.get(prompt)) {
                b.prompt_embedding = Some(e.clone());
            }
            b
        })
        .collect()
}

fn conditional_axes(
    plan: &SweepPlan,
    data: &Prepared<'_>,
    config: &KnobConfig,
    bundles: &[PromptBundle],
    point: &mut MetricPoint,
) -> Result<(), KnobError> {
    let annotate = |source: MetricError| KnobError::Metric {
        config_id: config.config_id.clone(),
        source,
    };
    let want_dsg = plan.wants(axis::DSG_CONSISTENCY) && data.verdicts.is_some();
    let want_clip = plan.wants(axis::CLIP_CONSISTENCY);
    let mut per_prompt = Vec::with_capacity(bundles.len());
    for b in bundles {
        let mut s = PromptScores::empty(b.prompt_id.clone());
        if want_dsg {
            s.consistency = Some(conditional::consistency_dsg(b).map_err(annotate)?);
        }
        if plan.wants(axis::COND_DIVERSITY) && b.n() >= 2 {
            let d = conditional::conditional_diversity(b, plan.similarity).map_err(annotate)?;
            s.diversity_raw = Some(d.raw);
            s.diversity_score = Some(d.score);
        }
        if plan.wants(axis::COND_REALISM) && b.n_real() > 0 {
            s.realism = Some(conditional::conditional_realism(b, plan.similarity).map_err(annotate)?);
        }
        if want_clip && b.prompt_embedding.is_some() {
            s.clip_consistency = Some(conditional::clip_consistency(b).map_err(annotate)?);
        }
        per_prompt.push(s);
    }
    let agg = conditional::aggregate(&per_prompt).map_err(annotate)?;

    let mut record = |name: &str, field: conditional::FieldMean, why: &str| {
        if !plan.wants(name) {
            return;
        }
        match field.mean {
            Some(v) => {
                point.scores.insert(name.to_string(), v);
                if field.is_partial() {
                    point.notes.insert(name.to_string(), field.coverage_note());
                }
            }
            None => {
                point.missing.insert(name.to_string(), why.to_string());
            }
        }
    };
    record(
        axis::DSG_CONSISTENCY,
        agg.consistency,
        "MissingVerdicts: no verdict log supplied",
    );
    record(
        axis::COND_DIVERSITY,
        agg.diversity_score,
        "NeedAtLeastTwoSamples: every prompt has fewer than two samples",
    );
    record(
        axis::COND_REALISM,
        agg.realism,
        "NoRealReferences: no prompt has real images",
    );
    record(
        axis::CLIP_CONSISTENCY,
        agg.clip_consistency,
        "MissingPromptEmbedding: no prompt embeddings supplied",
    );
    if plan.wants(axis::COND_DIVERSITY) {
        if let Some(raw) = agg.diversity_raw.mean {
            point.raw.insert(axis::COND_DIVERSITY.to_string(), raw);
        }
    }
    Ok(())
}

fn marginal_axes(
    plan: &SweepPlan,
    config: &KnobConfig,
    generated: Vec<Sample>,
    real: Vec<Sample>,
    point: &mut MetricPoint,
) -> Result<(), KnobError> {
    let annotate = |source: MarginalError| KnobError::Marginal {
        config_id: config.config_id.clone(),
        source,
    };
    let k = config.manifold_k.unwrap_or(plan.k);
    let real_side = [axis::PRECISION, axis::DENSITY, axis::COVERAGE];
    let wants_real_side = real_side.iter().any(|a| plan.wants(a));
    let wants_recall = plan.wants(axis::RECALL);
    let wants_vendi = plan.wants(axis::VENDI);
    if !(wants_real_side || wants_recall || wants_vendi) {
        return Ok(());
    }

    if wants_vendi {
        let v = marginal::vendi(&generated, SimilarityKind::Cosine).map_err(annotate)?;
        point.scores.insert(axis::VENDI.to_string(), v);
    }
    let input = MarginalInput::new(real, generated, k);
    let too_few = |side: &str, n: usize| format!("TooFewRows: {n} {side} rows with k = {k}");
    if wants_real_side {
        if input.real.len() > k {
            let s = marginal::real_side_scores(&input).map_err(annotate)?;
            for (name, v) in [
                (axis::PRECISION, s.precision),
                (axis::DENSITY, s.density),
                (axis::COVERAGE, s.coverage),
            ] {
                if plan.wants(name) {
                    point.scores.insert(name.to_string(), v);
                }
            }
        } else {
            for name in real_side.into_iter().filter(|a| plan.wants(a)) {
                point
                    .missing
                    .insert(name.to_string(), too_few("real", input.real.len()));
            }
        }
    }
    if wants_recall {
        if input.generated.len() > k {
            let r = marginal::recall(&input).map_err(annotate)?;
            point.scores.insert(axis::RECALL.to_string(), r);
        } else {
            point.missing.insert(
                axis::RECALL.to_string(),
                too_few("generated", input.generated.len()),
            );
        }
    }
    Ok(())
}
