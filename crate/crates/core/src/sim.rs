//! Gaussian toy world that makes the guidance and compression knobs
//! executable end to end.
//!
//! A sample for guidance scale `lambda` is `lambda * z_c + (1 - lambda) * z_u`
//! with `z_c ~ N(mu_p, sigma_c^2 I)` and `z_u ~ N(mu_u, sigma_u^2 I)`. Every
//! draw comes from a stream keyed by `(seed, domain, prompt, index)`, so
//! results do not depend on evaluation order and configs share noise.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kernel;
use crate::model::{
    EmbeddingRowMeta, EmbeddingTable, GroupId, KnobConfig, PromptId, RecordId, Role, Verdict,
    VerdictLog,
};
use crate::store::PromptEmbeddings;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("UnknownPrompt: `{0}` is not part of the world")]
    UnknownPrompt(PromptId),
    #[error("sweep is empty")]
    EmptySweep,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("bpp proxy must be positive, got {0}")]
    InvalidBpp(f64),
}

fn default_dim() -> usize {
    8
}

fn default_budget_bits() -> f64 {
    8.0
}

fn default_tau() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPrompt {
    pub prompt_id: PromptId,
    pub mean: Vec<f64>,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<GroupId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyWorld {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub prompts: Vec<ToyPrompt>,
    pub uncond_mean: Vec<f64>,
    pub uncond_sigma: f64,
    pub seed: u64,
    /// Bit budget `B` in the quantization step `2^(-bpp * B)`.
    #[serde(default = "default_budget_bits")]
    pub budget_bits: f64,
    /// Cosine threshold for the synthetic verdicts.
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl ToyWorld {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidWorld(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.prompts.is_empty() {
            return bad("no prompts".into());
        }
        if self.uncond_mean.len() != self.dim {
            return bad(format!("uncond_mean has {} entries, dim is {}", self.uncond_mean.len(), self.dim));
        }
        if !(self.uncond_sigma.is_finite() && self.uncond_sigma > 0.0) {
            return bad("uncond_sigma must be positive".into());
        }
        if !(self.budget_bits.is_finite() && self.budget_bits > 0.0) {
            return bad("budget_bits must be positive".into());
        }
        if !self.tau.is_finite() {
            return bad("tau must be finite".into());
        }
        let mut ids = BTreeSet::new();
        for (i, p) in self.prompts.iter().enumerate() {
            if !ids.insert(&p.prompt_id) {
                return bad(format!("duplicate prompt `{}`", p.prompt_id));
            }
            if p.mean.len() != self.dim {
                return bad(format!("prompt `{}` mean has {} entries", p.prompt_id, p.mean.len()));
            }
            if !(p.sigma.is_finite() && p.sigma > 0.0) {
                return bad(format!("prompt `{}` sigma must be positive", p.prompt_id));
            }
            if p.mean.iter().chain(&self.uncond_mean).any(|v| !v.is_finite()) {
                return bad(format!("prompt `{}` has a non-finite mean", p.prompt_id));
            }
            if self.prompts[..i].iter().any(|q| q.mean == p.mean) {
                return bad(format!("prompt `{}` repeats another prompt's mean", p.prompt_id));
            }
        }
        Ok(())
    }

    pub fn prompt(&self, id: &PromptId) -> Result<&ToyPrompt, SimError> {
        self.prompts
            .iter()
            .find(|p| &p.prompt_id == id)
            .ok_or_else(|| SimError::UnknownPrompt(id.clone()))
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let world: Self =
            serde_json::from_str(text).map_err(|e| SimError::InvalidWorld(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }
}

/// Stream domains. Real and generated draws must not share noise; dither is
/// shared across bitrates so that only the step size differs between them.
pub mod domain {
    pub const GENERATED: &str = "generated";
    pub const REAL: &str = "real";
    pub const DITHER: &str = "dither";
}

/// Deterministic generator for one `(seed, domain, prompt, index)` tuple.
pub fn keyed_stream(seed: u64, domain: &str, prompt: &PromptId, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [domain.as_bytes(), prompt.as_str().as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub prompt_id: PromptId,
    pub lambda: f64,
    pub index: u64,
    pub vector: Vec<f64>,
}

fn draw(world: &ToyWorld, prompt: &ToyPrompt, lambda: f64, index: u64, seed: u64, dom: &str) -> ToySample {
    let mut rng = keyed_stream(seed, dom, &prompt.prompt_id, index);
    let zc = normals(&mut rng, world.dim);
    let zu = normals(&mut rng, world.dim);
    let vector = (0..world.dim)
        .map(|d| {
            let c = prompt.mean[d] + prompt.sigma * zc[d];
            let u = world.uncond_mean[d] + world.uncond_sigma * zu[d];
            lambda * c + (1.0 - lambda) * u
        })
        .collect();
    ToySample {
        prompt_id: prompt.prompt_id.clone(),
        lambda,
        index,
        vector,
    }
}

/// `n` guidance-mixed samples for one prompt.
pub fn sample_cfg(
    world: &ToyWorld,
    prompt_id: &PromptId,
    lambda: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<ToySample>, SimError> {
    let prompt = world.prompt(prompt_id)?;
    if n == 0 {
        return Err(SimError::NoSamples);
    }
    Ok((0..n as u64)
        .map(|i| draw(world, prompt, lambda, i, seed, domain::GENERATED))
        .collect())
}

/// Quantization step for a bpp proxy under a bit budget.
pub fn quantization_step(bpp: f64, budget_bits: f64) -> f64 {
    (-bpp * budget_bits).exp2()
}

/// Rounds to the nearest multiple of `step`.
pub fn quantize(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

/// Quantizes every coordinate with step `2^(-bpp * budget_bits)`, then adds
/// Gaussian dither of standard deviation `step / 2`.
pub fn compress_knob(
    samples: &[ToySample],
    bpp: f64,
    budget_bits: f64,
    seed: u64,
) -> Result<Vec<ToySample>, SimError> {
    if !(bpp.is_finite() && bpp > 0.0) {
        return Err(SimError::InvalidBpp(bpp));
    }
    let step = quantization_step(bpp, budget_bits);
    Ok(samples
        .iter()
        .map(|s| {
            let mut rng = keyed_stream(seed, domain::DITHER, &s.prompt_id, s.index);
            let noise = normals(&mut rng, s.vector.len());
            let vector = s
                .vector
                .iter()
                .zip(noise)
                .map(|(&x, z)| quantize(x, step) + 0.5 * step * z)
                .collect();
            ToySample {
                vector,
                ..s.clone()
            }
        })
        .collect())
}

/// Everything `simulate` writes.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldDataset {
    pub table: EmbeddingTable,
    pub verdicts: VerdictLog,
    pub prompt_embeddings: PromptEmbeddings,
}

impl WorldDataset {
    pub fn generated_rows(&self) -> usize {
        self.table.rows.iter().filter(|r| r.meta.role == Role::Generated).count()
    }

    pub fn real_rows(&self) -> usize {
        self.table.rows.iter().filter(|r| r.meta.role == Role::Real).count()
    }
}

fn id<T: TryFrom<String>>(s: String) -> T
where
    T::Error: std::fmt::Debug,
{
    T::try_from(s).expect("generated ids are non-empty")
}

/// Real rows at `lambda = 1` plus generated rows for every config that owns
/// its rows (configs with a `source_config` reuse another config's rows).
///
/// Each sample gets one synthetic verdict, true iff its cosine to the
/// prompt mean reaches `world.tau`.
pub fn emit_world_dataset(
    world: &ToyWorld,
    sweep: &[KnobConfig],
    n_per_prompt: usize,
    seed: u64,
) -> Result<WorldDataset, SimError> {
    world.validate()?;
    if sweep.is_empty() {
        return Err(SimError::EmptySweep);
    }
    if n_per_prompt == 0 {
        return Err(SimError::NoSamples);
    }
    for c in sweep {
        for p in c.prompts.iter().flatten() {
            world.prompt(p)?;
        }
    }

    let mut shards: Vec<(Option<&KnobConfig>, &ToyPrompt)> =
        world.prompts.iter().map(|p| (None, p)).collect();
    for c in sweep.iter().filter(|c| c.source() == &c.config_id) {
        for p in &world.prompts {
            if c.prompts.as_ref().is_none_or(|ps| ps.contains(&p.prompt_id)) {
                shards.push((Some(c), p));
            }
        }
    }

    let produced: Vec<Vec<(EmbeddingRowMeta, Vec<f32>)>> = shards
        .par_iter()
        .map(|&(config, prompt)| {
            let (dom, lambda) = match config {
                None => (domain::REAL, 1.0),
                Some(c) => (domain::GENERATED, c.g_scale.unwrap_or(1.0)),
            };
            let mut samples: Vec<ToySample> = (0..n_per_prompt as u64)
                .map(|i| draw(world, prompt, lambda, i, seed, dom))
                .collect();
            if let Some(bpp) = config.and_then(|c| c.bpp) {
                samples = compress_knob(&samples, bpp, world.budget_bits, seed)?;
            }
            Ok(samples
                .into_iter()
                .map(|s| {
                    let record = match config {
                        None => format!("real/{}/{:04}", prompt.prompt_id, s.index),
                        Some(c) => format!("gen/{}/{}/{:04}", c.config_id, prompt.prompt_id, s.index),
                    };
                    let meta = EmbeddingRowMeta {
                        record_id: id::<RecordId>(record),
                        prompt_id: prompt.prompt_id.clone(),
                        group_id: prompt.group_id.clone(),
                        role: if config.is_some() { Role::Generated } else { Role::Real },
                        config_id: config.map(|c| c.config_id.clone()),
                    };
                    (meta, s.vector.iter().map(|&v| v as f32).collect())
                })
                .collect())
        })
        .collect::<Result<_, SimError>>()?;

    let mut table = EmbeddingTable::new(world.dim);
    let mut verdicts = Vec::new();
    for (meta, vector) in produced.into_iter().flatten() {
        if meta.role == Role::Generated {
            let prompt = world.prompt(&meta.prompt_id)?;
            let v64: Vec<f64> = vector.iter().map(|&v| f64::from(v)).collect();
            let cos = kernel::cosine(&v64, &prompt.mean).unwrap_or(f64::NEG_INFINITY);
            verdicts.push(Verdict {
                prompt_id: meta.prompt_id.clone(),
                record_id: meta.record_id.clone(),
                question_id: "q0".into(),
                verdict: cos >= world.tau,
            });
        }
        table.push(meta, vector);
    }
    let verdicts = VerdictLog::new(verdicts).map_err(|e| SimError::InvalidWorld(e.to_string()))?;
    let prompt_embeddings = world
        .prompts
        .iter()
        .map(|p| (p.prompt_id.clone(), p.mean.clone()))
        .collect();
    Ok(WorldDataset {
        table,
        verdicts,
        prompt_embeddings,
    })
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0 + 1.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with tied values sharing their average rank.
/// `None` when either input is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
