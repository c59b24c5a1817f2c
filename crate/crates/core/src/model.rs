//! Shared domain types: identifiers, embedding tables, verdict logs, knob
//! configurations and the metric-axis registry.
//!
//! Everything here is immutable once constructed and cheap to share across
//! worker threads. Serialization formats live in [`crate::store`].

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{0} must be a non-empty string")]
    EmptyId(&'static str),
    #[error("DuplicateAxis: axis `{0}` registered twice")]
    DuplicateAxis(String),
    #[error("UnknownDirection: `{0}` is not one of max, maximize, min, minimize")]
    UnknownDirection(String),
    #[error("UnknownAxis: `{0}` is not registered")]
    UnknownAxis(String),
    #[error("DuplicateVerdict: ({prompt_id}, {record_id}, {question_id}) appears more than once")]
    DuplicateVerdict {
        prompt_id: String,
        record_id: String,
        question_id: String,
    },
    #[error("KnobOutOfRange: config `{config_id}` has {knob} = {value}")]
    KnobOutOfRange {
        config_id: String,
        knob: &'static str,
        value: String,
    },
    #[error("config `{0}` has an empty model_name")]
    EmptyModelName(String),
    #[error("score for axis `{axis}` of config `{config_id}` is not finite")]
    NonFiniteScore { config_id: String, axis: String },
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Result<Self, ModelError> {
                let value = value.into();
                if value.is_empty() {
                    return Err(ModelError::EmptyId(stringify!($name)));
                }
                Ok(Self(value))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = ModelError;

            fn try_from(value: String) -> Result<Self, ModelError> {
                Self::new(value)
            }
        }

        impl TryFrom<&str> for $name {
            type Error = ModelError;

            fn try_from(value: &str) -> Result<Self, ModelError> {
                Self::new(value)
            }
        }

        impl From<$name> for String {
            fn from(value: $name) -> String {
                value.0
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(
    /// Row identifier, unique within one table. Its lexical order is the
    /// tie-break used everywhere a deterministic order is needed.
    RecordId
);
string_id!(
    /// Identity of one conditioning prompt.
    PromptId
);
string_id!(
    /// A disaggregation group such as a geographic region.
    GroupId
);
string_id!(
    /// One model-knob combination.
    ConfigId
);

/// Group label used for metrics pooled over every row.
pub const ALL_GROUP: &str = "all";

impl GroupId {
    pub fn all() -> Self {
        Self(ALL_GROUP.to_string())
    }

    pub fn is_all(&self) -> bool {
        self.0 == ALL_GROUP
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Real,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRowMeta {
    pub record_id: RecordId,
    pub prompt_id: PromptId,
    pub group_id: Option<GroupId>,
    pub role: Role,
    /// Required for generated rows, absent for real ones.
    pub config_id: Option<ConfigId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub meta: EmbeddingRowMeta,
    pub vector: Vec<f32>,
}

/// Feature vectors (binary32, as produced by the extractor) with per-row
/// metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, meta: EmbeddingRowMeta, vector: Vec<f32>) {
        self.rows.push(EmbeddingRow { meta, vector });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct config ids carried by generated rows.
    pub fn config_ids(&self) -> BTreeSet<&ConfigId> {
        self.rows
            .iter()
            .filter_map(|r| r.meta.config_id.as_ref())
            .collect()
    }

    /// Number of generated rows for a `(prompt, config)` pair, the per-prompt
    /// batch size.
    pub fn generated_count(&self, prompt: &PromptId, config: &ConfigId) -> usize {
        self.rows
            .iter()
            .filter(|r| {
                r.meta.role == Role::Generated
                    && &r.meta.prompt_id == prompt
                    && r.meta.config_id.as_ref() == Some(config)
            })
            .count()
    }

    /// Number of real reference rows for a prompt.
    pub fn real_count(&self, prompt: &PromptId) -> usize {
        self.rows
            .iter()
            .filter(|r| r.meta.role == Role::Real && &r.meta.prompt_id == prompt)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroDim,
    DimMismatch {
        record_id: String,
        expected: usize,
        found: usize,
    },
    DuplicateId {
        record_id: String,
    },
    ZeroVector {
        record_id: String,
    },
    NonFinite {
        record_id: String,
    },
    MissingConfig {
        record_id: String,
    },
    UnexpectedConfig {
        record_id: String,
    },
    OrphanVerdict {
        record_id: String,
    },
    VerdictPromptMismatch {
        record_id: String,
    },
}

impl Violation {
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::ZeroDim => "ZeroDim",
            Violation::DimMismatch { .. } => "DimMismatch",
            Violation::DuplicateId { .. } => "DuplicateId",
            Violation::ZeroVector { .. } => "ZeroVector",
            Violation::NonFinite { .. } => "NonFinite",
            Violation::MissingConfig { .. } => "MissingConfig",
            Violation::UnexpectedConfig { .. } => "UnexpectedConfig",
            Violation::OrphanVerdict { .. } => "OrphanVerdict",
            Violation::VerdictPromptMismatch { .. } => "VerdictPromptMismatch",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDim => write!(f, "ZeroDim: table dim must be at least 1"),
            Violation::DimMismatch {
                record_id,
                expected,
                found,
            } => write!(
                f,
                "DimMismatch: record `{record_id}` has {found} values, expected {expected}"
            ),
            Violation::DuplicateId { record_id } => {
                write!(f, "DuplicateId: record `{record_id}` appears more than once")
            }
            Violation::ZeroVector { record_id } => {
                write!(f, "ZeroVector: record `{record_id}` is all zeros")
            }
            Violation::NonFinite { record_id } => {
                write!(f, "NonFinite: record `{record_id}` holds NaN or infinity")
            }
            Violation::MissingConfig { record_id } => {
                write!(f, "MissingConfig: generated record `{record_id}` has no config_id")
            }
            Violation::UnexpectedConfig { record_id } => {
                write!(f, "UnexpectedConfig: real record `{record_id}` carries a config_id")
            }
            Violation::OrphanVerdict { record_id } => write!(
                f,
                "OrphanVerdict: record `{record_id}` is not a generated row of the table"
            ),
            Violation::VerdictPromptMismatch { record_id } => write!(
                f,
                "VerdictPromptMismatch: verdict prompt differs from the prompt of record `{record_id}`"
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: &str) -> usize {
        self.violations.iter().filter(|v| v.kind() == kind).count()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every table invariant and reports violations as data.
pub fn validate_table(table: &EmbeddingTable) -> ValidationReport {
    let mut violations = Vec::new();
    if table.dim == 0 {
        violations.push(Violation::ZeroDim);
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for row in &table.rows {
        let id = row.meta.record_id.as_str();
        if !seen.insert(id) {
            violations.push(Violation::DuplicateId {
                record_id: id.to_string(),
            });
        }
        if row.vector.len() != table.dim {
            violations.push(Violation::DimMismatch {
                record_id: id.to_string(),
                expected: table.dim,
                found: row.vector.len(),
            });
        }
        if row.vector.iter().any(|v| !v.is_finite()) {
            violations.push(Violation::NonFinite {
                record_id: id.to_string(),
            });
        } else if row.vector.iter().all(|v| *v == 0.0) {
            violations.push(Violation::ZeroVector {
                record_id: id.to_string(),
            });
        }
        match (row.meta.role, row.meta.config_id.is_some()) {
            (Role::Generated, false) => violations.push(Violation::MissingConfig {
                record_id: id.to_string(),
            }),
            (Role::Real, true) => violations.push(Violation::UnexpectedConfig {
                record_id: id.to_string(),
            }),
            _ => {}
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub prompt_id: PromptId,
    pub record_id: RecordId,
    pub question_id: String,
    pub verdict: bool,
}

/// Precomputed VQA outcomes, one per `(prompt, image, question)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerdictLog {
    entries: Vec<Verdict>,
}

impl VerdictLog {
    pub fn new(entries: Vec<Verdict>) -> Result<Self, ModelError> {
        let mut seen = BTreeSet::new();
        for v in &entries {
            if !seen.insert((&v.prompt_id, &v.record_id, v.question_id.as_str())) {
                return Err(ModelError::DuplicateVerdict {
                    prompt_id: v.prompt_id.to_string(),
                    record_id: v.record_id.to_string(),
                    question_id: v.question_id.clone(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Verdict] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Verdicts grouped per image, in question-id order.
    pub fn by_record(&self) -> BTreeMap<&RecordId, Vec<bool>> {
        let mut grouped: BTreeMap<&RecordId, Vec<(&str, bool)>> = BTreeMap::new();
        for v in &self.entries {
            grouped
                .entry(&v.record_id)
                .or_default()
                .push((v.question_id.as_str(), v.verdict));
        }
        grouped
            .into_iter()
            .map(|(k, mut qs)| {
                qs.sort_by(|a, b| a.0.cmp(b.0));
                (k, qs.into_iter().map(|(_, v)| v).collect())
            })
            .collect()
    }
}

/// Cross-checks a verdict log against the generated rows of a table.
pub fn validate_verdicts(log: &VerdictLog, table: &EmbeddingTable) -> ValidationReport {
    let generated: BTreeMap<&RecordId, &PromptId> = table
        .rows
        .iter()
        .filter(|r| r.meta.role == Role::Generated)
        .map(|r| (&r.meta.record_id, &r.meta.prompt_id))
        .collect();
    let mut violations = Vec::new();
    let mut reported = BTreeSet::new();
    for v in log.entries() {
        match generated.get(&v.record_id) {
            None => {
                if reported.insert(&v.record_id) {
                    violations.push(Violation::OrphanVerdict {
                        record_id: v.record_id.to_string(),
                    });
                }
            }
            Some(p) if *p != &v.prompt_id => {
                if reported.insert(&v.record_id) {
                    violations.push(Violation::VerdictPromptMismatch {
                        record_id: v.record_id.to_string(),
                    });
                }
            }
            Some(_) => {}
        }
    }
    ValidationReport { violations }
}

/// One model-knob-value combination. The knob fields are labels on
/// pre-generated sets except `top_m_pct`, which the engine re-executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnobConfig {
    pub config_id: ConfigId,
    pub model_name: String,
    /// Guidance scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_m_pct: Option<f64>,
    /// Retrieval neighbourhood size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_neighbors: Option<u32>,
    /// Compression rate in bits per pixel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bpp: Option<f64>,
    /// Overrides the k used by the manifold metrics for this config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifold_k: Option<usize>,
    /// Config whose generated rows this one evaluates (defaults to itself);
    /// used for top-m variants of an existing generation run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_config: Option<ConfigId>,
    /// Restricts the config to a subset of prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<PromptId>>,
}

impl KnobConfig {
    pub fn new(config_id: ConfigId, model_name: impl Into<String>) -> Self {
        Self {
            config_id,
            model_name: model_name.into(),
            g_scale: None,
            top_m_pct: None,
            k_neighbors: None,
            bpp: None,
            manifold_k: None,
            source_config: None,
            prompts: None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let out_of_range = |knob: &'static str, value: String| ModelError::KnobOutOfRange {
            config_id: self.config_id.to_string(),
            knob,
            value,
        };
        if self.model_name.is_empty() {
            return Err(ModelError::EmptyModelName(self.config_id.to_string()));
        }
        if let Some(g) = self.g_scale {
            if !(g.is_finite() && g > 0.0) {
                return Err(out_of_range("g_scale", g.to_string()));
            }
        }
        if let Some(m) = self.top_m_pct {
            if !(m.is_finite() && m > 0.0 && m <= 100.0) {
                return Err(out_of_range("top_m_pct", m.to_string()));
            }
        }
        if self.k_neighbors == Some(0) {
            return Err(out_of_range("k_neighbors", "0".into()));
        }
        if let Some(b) = self.bpp {
            if !(b.is_finite() && b > 0.0) {
                return Err(out_of_range("bpp", b.to_string()));
            }
        }
        if self.manifold_k == Some(0) {
            return Err(out_of_range("manifold_k", "0".into()));
        }
        Ok(())
    }

    /// Config whose generated rows back this one.
    pub fn source(&self) -> &ConfigId {
        self.source_config.as_ref().unwrap_or(&self.config_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Sign that maps a raw score onto "greater is better".
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }

    pub fn arrow(self) -> &'static str {
        match self {
            Direction::Maximize => "↑",
            Direction::Minimize => "↓",
        }
    }
}

impl FromStr for Direction {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "maximize" => Ok(Direction::Maximize),
            "min" | "minimize" => Ok(Direction::Minimize),
            _ => Err(ModelError::UnknownDirection(s.to_string())),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Maximize => "maximize",
            Direction::Minimize => "minimize",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricAxis {
    pub name: String,
    pub direction: Direction,
}

impl MetricAxis {
    pub fn new(name: impl Into<String>, direction: Direction) -> Self {
        Self {
            name: name.into(),
            direction,
        }
    }
}

/// Names of the axes the engine knows how to compute.
pub mod axis {
    pub const DSG_CONSISTENCY: &str = "dsg-consistency";
    pub const CLIP_CONSISTENCY: &str = "clip-consistency";
    /// Published as one minus the mean pairwise similarity.
    pub const COND_DIVERSITY: &str = "cond-diversity";
    pub const RECALL: &str = "recall";
    pub const VENDI: &str = "vendi";
    pub const COND_REALISM: &str = "cond-realism";
    pub const PRECISION: &str = "precision";
    pub const DENSITY: &str = "density";
    pub const COVERAGE: &str = "coverage";

    pub const ALL: [&str; 9] = [
        DSG_CONSISTENCY,
        CLIP_CONSISTENCY,
        COND_DIVERSITY,
        RECALL,
        VENDI,
        COND_REALISM,
        PRECISION,
        DENSITY,
        COVERAGE,
    ];
}

/// The objective an axis measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Consistency,
    Diversity,
    Realism,
}

impl Objective {
    pub fn of_axis(name: &str) -> Option<Self> {
        match name {
            axis::DSG_CONSISTENCY | axis::CLIP_CONSISTENCY => Some(Objective::Consistency),
            axis::COND_DIVERSITY | axis::RECALL | axis::VENDI | axis::COVERAGE => {
                Some(Objective::Diversity)
            }
            axis::COND_REALISM | axis::PRECISION | axis::DENSITY => Some(Objective::Realism),
            _ => None,
        }
    }
}

/// Immutable set of uniquely named axes with their objective directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisRegistry {
    axes: Vec<MetricAxis>,
    index: BTreeMap<String, usize>,
}

impl AxisRegistry {
    pub fn new(defs: Vec<MetricAxis>) -> Result<Self, ModelError> {
        let mut index = BTreeMap::new();
        for (i, a) in defs.iter().enumerate() {
            if a.name.is_empty() {
                return Err(ModelError::EmptyId("MetricAxis"));
            }
            if index.insert(a.name.clone(), i).is_some() {
                return Err(ModelError::DuplicateAxis(a.name.clone()));
            }
        }
        Ok(Self { axes: defs, index })
    }

    /// Builds a registry from `(name, direction token)` pairs.
    pub fn from_tokens<'a>(
        defs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, ModelError> {
        let axes = defs
            .into_iter()
            .map(|(n, d)| Ok(MetricAxis::new(n, d.parse()?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        Self::new(axes)
    }

    pub fn get(&self, name: &str) -> Option<&MetricAxis> {
        self.index.get(name).map(|&i| &self.axes[i])
    }

    pub fn direction(&self, name: &str) -> Result<Direction, ModelError> {
        self.get(name)
            .map(|a| a.direction)
            .ok_or_else(|| ModelError::UnknownAxis(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn axes(&self) -> &[MetricAxis] {
        &self.axes
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.axes.iter().map(|a| a.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.axes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }
}

impl Default for AxisRegistry {
    /// Every computable axis, all oriented so that larger is better.
    fn default() -> Self {
        Self::new(
            axis::ALL
                .iter()
                .map(|n| MetricAxis::new(*n, Direction::Maximize))
                .collect(),
        )
        .expect("built-in axis names are unique")
    }
}

/// Scores of one config (within one group) on the registered axes.
///
/// Axes that could not be computed are listed in `missing` with a reason
/// rather than dropped, so downstream Pareto analysis excludes the point
/// explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub config_id: ConfigId,
    pub group_id: GroupId,
    pub scores: BTreeMap<String, f64>,
    /// Quantities reported next to an axis in their literal form, e.g. the
    /// mean pairwise similarity behind `cond-diversity`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub raw: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub missing: BTreeMap<String, String>,
    /// Per-axis coverage notes such as "2/3" prompts contributing.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl MetricPoint {
    pub fn new(config_id: ConfigId, group_id: GroupId) -> Self {
        Self {
            config_id,
            group_id,
            scores: BTreeMap::new(),
            raw: BTreeMap::new(),
            missing: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    /// True when every named axis holds a score.
    pub fn has_axes<S: AsRef<str>>(&self, axes: &[S]) -> bool {
        axes.iter().all(|a| self.scores.contains_key(a.as_ref()))
    }

    pub fn check(&self, registry: &AxisRegistry) -> Result<(), ModelError> {
        for (axis, value) in &self.scores {
            if !registry.contains(axis) {
                return Err(ModelError::UnknownAxis(axis.clone()));
            }
            if !value.is_finite() {
                return Err(ModelError::NonFiniteScore {
                    config_id: self.config_id.to_string(),
                    axis: axis.clone(),
                });
            }
        }
        Ok(())
    }
}
