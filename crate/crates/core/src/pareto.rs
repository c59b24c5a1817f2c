//! Non-dominated sets over registered metric axes.
//!
//! Dominance is weak: `r` dominates `q` when it is at least as good on every
//! axis and strictly better on one. Exact duplicates therefore never dominate
//! each other and all stay on the front.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AxisRegistry, ConfigId, GroupId, MetricPoint};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParetoError {
    #[error("NoCompletePoints: no point has finite scores on {0:?}")]
    NoCompletePoints(Vec<String>),
    #[error("UnknownAxis: `{0}` is not registered")]
    UnknownAxis(String),
    #[error("points from groups `{0}` and `{1}` passed to a single front")]
    MixedGroups(GroupId, GroupId),
    #[error("a front needs 2 or 3 distinct axes, got {0:?}")]
    BadAxes(Vec<String>),
}

/// Scores of `point` on `axes` with Minimize axes negated, or `None` when a
/// score is absent or not finite.
pub fn normalize_direction(
    point: &MetricPoint,
    axes: &[&str],
    registry: &AxisRegistry,
) -> Result<Option<Vec<f64>>, ParetoError> {
    let mut out = Vec::with_capacity(axes.len());
    for &name in axes {
        let dir = registry
            .direction(name)
            .map_err(|_| ParetoError::UnknownAxis(name.to_string()))?;
        match point.scores.get(name) {
            Some(v) if v.is_finite() => out.push(dir.sign() * v),
            _ => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// True when `r` weakly dominates `q` (both already normalized).
pub fn dominates(r: &[f64], q: &[f64]) -> bool {
    let mut strict = false;
    for (a, b) in r.iter().zip(q) {
        if a < b {
            return false;
        }
        if a > b {
            strict = true;
        }
    }
    strict
}

/// Front membership flag per normalized point.
pub fn front_mask(points: &[Vec<f64>]) -> Vec<bool> {
    if points.first().is_some_and(|p| p.len() == 2) {
        front_mask_2d(points)
    } else {
        points
            .iter()
            .map(|q| !points.iter().any(|r| dominates(r, q)))
            .collect()
    }
}

/// Sort-based sweep: visit points by descending x in groups of equal x. A
/// point survives iff its y beats every y seen at strictly larger x and
/// equals the best y within its own group.
fn front_mask_2d(points: &[Vec<f64>]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b][0].total_cmp(&points[a][0]));
    let mut mask = vec![false; points.len()];
    let mut best_above = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let x = points[order[start]][0];
        let mut end = start;
        while end < order.len() && points[order[end]][0] == x {
            end += 1;
        }
        let group = &order[start..end];
        let group_best = group
            .iter()
            .map(|&i| points[i][1])
            .fold(f64::NEG_INFINITY, f64::max);
        for &i in group {
            let y = points[i][1];
            mask[i] = y == group_best && y > best_above;
        }
        best_above = best_above.max(group_best);
        start = end;
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub config_id: ConfigId,
    /// Scores in their original orientation.
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    pub axes: Vec<String>,
    pub group_id: GroupId,
    /// Sorted by the first axis after normalization, then by config id.
    pub front: Vec<FrontEntry>,
    pub dominated: Vec<ConfigId>,
    /// Points lacking a finite score on some requested axis.
    pub incomplete: Vec<ConfigId>,
}

impl ParetoResult {
    pub fn front_ids(&self) -> Vec<&ConfigId> {
        self.front.iter().map(|e| &e.config_id).collect()
    }
}

fn check_axes(axes: &[&str], registry: &AxisRegistry) -> Result<(), ParetoError> {
    let owned = || axes.iter().map(|a| a.to_string()).collect::<Vec<_>>();
    if !(2..=3).contains(&axes.len()) {
        return Err(ParetoError::BadAxes(owned()));
    }
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(ParetoError::BadAxes(owned()));
        }
        if !registry.contains(a) {
            return Err(ParetoError::UnknownAxis(a.to_string()));
        }
    }
    Ok(())
}

/// Front of points that all belong to one group.
pub fn pareto_front(
    points: &[MetricPoint],
    axes: &[&str],
    registry: &AxisRegistry,
) -> Result<ParetoResult, ParetoError> {
    check_axes(axes, registry)?;
    let axis_names: Vec<String> = axes.iter().map(|a| a.to_string()).collect();
    let Some(first) = points.first() else {
        return Err(ParetoError::NoCompletePoints(axis_names));
    };
    if let Some(other) = points.iter().find(|p| p.group_id != first.group_id) {
        return Err(ParetoError::MixedGroups(
            first.group_id.clone(),
            other.group_id.clone(),
        ));
    }

    let mut complete = Vec::new();
    let mut normalized = Vec::new();
    let mut incomplete = Vec::new();
    for p in points {
        match normalize_direction(p, axes, registry)? {
            Some(v) => {
                complete.push(p);
                normalized.push(v);
            }
            None => incomplete.push(p.config_id.clone()),
        }
    }
    if complete.is_empty() {
        return Err(ParetoError::NoCompletePoints(axis_names));
    }

    let mask = front_mask(&normalized);
    let mut front_idx: Vec<usize> = (0..complete.len()).filter(|&i| mask[i]).collect();
    front_idx.sort_by(|&a, &b| {
        normalized[a][0]
            .total_cmp(&normalized[b][0])
            .then_with(|| complete[a].config_id.cmp(&complete[b].config_id))
    });
    let front = front_idx
        .iter()
        .map(|&i| FrontEntry {
            config_id: complete[i].config_id.clone(),
            scores: axes
                .iter()
                .map(|a| (a.to_string(), complete[i].scores[*a]))
                .collect(),
        })
        .collect();
    let mut dominated: Vec<ConfigId> = (0..complete.len())
        .filter(|&i| !mask[i])
        .map(|i| complete[i].config_id.clone())
        .collect();
    dominated.sort();
    incomplete.sort();
    Ok(ParetoResult {
        axes: axis_names,
        group_id: first.group_id.clone(),
        front,
        dominated,
        incomplete,
    })
}

/// One independent front per group present in `points`.
pub fn fronts_by_group(
    points: &[MetricPoint],
    axes: &[&str],
    registry: &AxisRegistry,
) -> Result<BTreeMap<GroupId, ParetoResult>, ParetoError> {
    let mut groups: BTreeMap<&GroupId, Vec<MetricPoint>> = BTreeMap::new();
    for p in points {
        groups.entry(&p.group_id).or_default().push(p.clone());
    }
    let results = groups
        .into_par_iter()
        .map(|(g, pts)| Ok((g.clone(), pareto_front(&pts, axes, registry)?)))
        .collect::<Result<Vec<_>, ParetoError>>()?;
    Ok(results.into_iter().collect())
}
