//! Independent reference implementations and random input generators shared
//! by the integration tests. Nothing here calls the metric code under test.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cdr_core::conditional::{PromptBundle, Sample};
use cdr_core::model::{PromptId, RecordId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rid(s: &str) -> RecordId {
    RecordId::new(s).unwrap()
}

pub fn pid(s: &str) -> PromptId {
    PromptId::new(s).unwrap()
}

/// Euclidean distance with the coordinate sum taken left to right.
pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// k-th smallest distance from each point to the others, by full sort.
pub fn radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| dist(&points[i], &points[j]))
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[k - 1]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Manifold {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn inside_fraction(queries: &[Vec<f64>], anchors: &[Vec<f64>], r: &[f64]) -> f64 {
    let mut hits = 0usize;
    for q in queries {
        let mut inside = false;
        for (a, ra) in anchors.iter().zip(r) {
            if dist(q, a) <= *ra {
                inside = true;
            }
        }
        if inside {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

/// Brute-force precision, recall, density and coverage.
pub fn manifold(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> Manifold {
    let rr = radii(real, k);
    let rg = radii(gen, k);
    let mut balls = 0usize;
    for g in gen {
        for (a, ra) in real.iter().zip(&rr) {
            if dist(g, a) <= *ra {
                balls += 1;
            }
        }
    }
    let mut covered = 0usize;
    for (a, ra) in real.iter().zip(&rr) {
        if gen.iter().any(|g| dist(g, a) <= *ra) {
            covered += 1;
        }
    }
    Manifold {
        precision: inside_fraction(gen, real, &rr),
        recall: inside_fraction(real, gen, &rg),
        density: balls as f64 / (k as f64 * gen.len() as f64),
        coverage: covered as f64 / real.len() as f64,
    }
}

/// Mean verdict fraction over images.
pub fn consistency(verdicts: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for v in verdicts {
        let yes = v.iter().filter(|b| **b).count() as f64;
        total += yes / v.len() as f64;
    }
    total / verdicts.len() as f64
}

/// Mean cosine over ordered pairs of distinct samples.
pub fn diversity_raw(gen: &[Vec<f64>]) -> f64 {
    let n = gen.len();
    let mut s = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                s += cos(&gen[j], &gen[i]);
            }
        }
    }
    s / (n * n - n) as f64
}

/// Mean over generated samples of the best cosine to any real sample.
pub fn realism(gen: &[Vec<f64>], real: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for g in gen {
        let mut best = f64::NEG_INFINITY;
        for r in real {
            best = best.max(cos(g, r));
        }
        s += best;
    }
    s / gen.len() as f64
}

/// `exp(-sum l ln l)` for eigenvalues of a symmetric 3x3 matrix, from the
/// trigonometric closed form.
pub fn vendi_3x3(k: [[f64; 3]; 3]) -> f64 {
    let n = 3.0;
    let a: Vec<Vec<f64>> = k.iter().map(|r| r.iter().map(|v| v / n).collect()).collect();
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let eig = if p == 0.0 {
        [q, q, q]
    } else {
        let b: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| (a[i][j] - if i == j { q } else { 0.0 }) / p).collect())
            .collect();
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    };
    let h: f64 = eig.iter().filter(|l| **l > 1e-15).map(|l| -l * l.ln()).sum();
    h.exp()
}

pub fn random_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Points on a coarse grid so that exact distance ties occur.
pub fn grid_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| f64::from(rng.random_range(-4i32..=4)) * 0.25).collect()
}

/// A random bundle with verdicts and real references, plus the raw vectors
/// for the oracles.
pub struct RandomBundle {
    pub bundle: PromptBundle,
    pub gen: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
    pub verdicts: Vec<Vec<bool>>,
}

pub fn random_bundle(rng: &mut ChaCha8Rng, tag: usize) -> RandomBundle {
    let dim = rng.random_range(2..10);
    let n = rng.random_range(2..12);
    let n_real = rng.random_range(1..8);
    let gen: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, dim)).collect();
    let real: Vec<Vec<f64>> = (0..n_real).map(|_| random_vec(rng, dim)).collect();
    let verdicts: Vec<Vec<bool>> = (0..n)
        .map(|_| {
            let q = rng.random_range(1..6);
            (0..q).map(|_| rng.random_bool(0.6)).collect()
        })
        .collect();
    let gen_samples = gen
        .iter()
        .enumerate()
        .map(|(i, v)| Sample::new(rid(&format!("g{i:03}")), v.clone()))
        .collect();
    let real_samples = real
        .iter()
        .enumerate()
        .map(|(i, v)| Sample::new(rid(&format!("r{i:03}")), v.clone()))
        .collect();
    let vmap: BTreeMap<RecordId, Vec<bool>> = verdicts
        .iter()
        .enumerate()
        .map(|(i, v)| (rid(&format!("g{i:03}")), v.clone()))
        .collect();
    let bundle = PromptBundle::new(pid(&format!("p{tag}")), gen_samples, real_samples)
        .with_verdicts(vmap)
        .with_prompt_embedding(random_vec(rng, dim));
    RandomBundle {
        bundle,
        gen,
        real,
        verdicts,
    }
}

/// Weak dominance on raw values with explicit per-axis orientation.
pub fn dominated_by(r: &[f64], q: &[f64], maximize: &[bool]) -> bool {
    let mut strictly = false;
    for i in 0..r.len() {
        let (better, worse) = if maximize[i] {
            (r[i] > q[i], r[i] < q[i])
        } else {
            (r[i] < q[i], r[i] > q[i])
        };
        if worse {
            return false;
        }
        strictly |= better;
    }
    strictly
}

pub fn brute_front(points: &[Vec<f64>], maximize: &[bool]) -> Vec<bool> {
    points
        .iter()
        .map(|q| !points.iter().any(|r| dominated_by(r, q, maximize)))
        .collect()
}
