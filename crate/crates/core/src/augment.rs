//! Weak and strong views of a batch.
//!
//! The strong perturbation always contains the weak one: attribute masking
//! draws the strong mask first and keeps each of its entries in the weak
//! mask with probability `1 / strong_multiplier`; edge perturbation removes
//! and adds prefixes of the same shuffled candidate lists.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    AttributeMask,
    EdgePerturb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub kind: AugmentKind,
    pub weak_ratio: f64,
    pub strong_multiplier: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kind: AugmentKind::AttributeMask,
            weak_ratio: 0.3,
            strong_multiplier: 2.0,
            seed: 0,
        }
    }
}

pub const MAX_STRONG_RATIO: f64 = 0.95;

impl AugmentConfig {
    pub fn strong_ratio(&self) -> f64 {
        self.weak_ratio * self.strong_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_ratio > 0.0 && self.weak_ratio <= 0.5) {
            return Err(Error::Config(format!("weak_ratio {} not in (0, 0.5]", self.weak_ratio)));
        }
        if !(self.strong_multiplier >= 1.0 && self.strong_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "strong_multiplier {} must be a finite value of at least 1",
                self.strong_multiplier
            )));
        }
        if self.strong_ratio() > MAX_STRONG_RATIO {
            return Err(Error::Config(format!(
                "strong ratio {} exceeds {MAX_STRONG_RATIO}",
                self.strong_ratio()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub original: GraphBatch,
    pub weak: GraphBatch,
    pub strong: GraphBatch,
}

pub fn augment_pair(batch: &GraphBatch, cfg: &AugmentConfig) -> Result<AugmentedPair> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let (weak, strong) = match cfg.kind {
        AugmentKind::AttributeMask => mask_attributes(batch, cfg, &mut rng)?,
        AugmentKind::EdgePerturb => perturb_edges(batch, cfg, &mut rng)?,
    };
    Ok(AugmentedPair {
        original: batch.clone(),
        weak,
        strong,
    })
}

fn mask_attributes(batch: &GraphBatch, cfg: &AugmentConfig, rng: &mut seed::Rng) -> Result<(GraphBatch, GraphBatch)> {
    let x = batch.features();
    let keep_in_weak = 1.0 / cfg.strong_multiplier;
    let mut weak = x.clone();
    let mut strong = x.clone();
    for (w, s) in weak.iter_mut().zip(strong.iter_mut()) {
        if rng.random_bool(cfg.strong_ratio()) {
            *s = 0.0;
            if rng.random_bool(keep_in_weak) {
                *w = 0.0;
            }
        }
    }
    Ok((batch.with_features(weak)?, batch.with_features(strong)?))
}

fn perturb_edges(batch: &GraphBatch, cfg: &AugmentConfig, rng: &mut seed::Rng) -> Result<(GraphBatch, GraphBatch)> {
    let mut per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); batch.n_graphs()];
    for &(u, v) in batch.edges() {
        per_graph[batch.graph_index()[u]].push((u, v));
    }
    let mut weak_edges = Vec::new();
    let mut strong_edges = Vec::new();
    for (g, mut edges) in per_graph.into_iter().enumerate() {
        let lo = batch.offsets()[g];
        let n = batch.offsets()[g + 1] - lo;
        let m = edges.len();
        let k_strong = (cfg.strong_ratio() * m as f64).round() as usize;
        let k_weak = ((cfg.weak_ratio * m as f64).round() as usize).min(k_strong);
        let existing: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        edges.shuffle(rng);
        let added = sample_non_edges(rng, lo, n, &existing, k_strong);
        let k_weak_add = k_weak.min(added.len());
        weak_edges.extend(edges[k_weak..].iter().copied().chain(added[..k_weak_add].iter().copied()));
        strong_edges.extend(edges[k_strong..].iter().copied().chain(added.iter().copied()));
    }
    Ok((batch.with_edges(weak_edges)?, batch.with_edges(strong_edges)?))
}

/// Up to `k` distinct node pairs of one graph that are not edges. Dense
/// graphs may yield fewer.
fn sample_non_edges(
    rng: &mut seed::Rng,
    lo: usize,
    n: usize,
    existing: &BTreeSet<(usize, usize)>,
    k: usize,
) -> Vec<(usize, usize)> {
    let capacity = n * n.saturating_sub(1) / 2 - existing.len();
    let k = k.min(capacity);
    let mut chosen = Vec::with_capacity(k);
    let mut seen = BTreeSet::new();
    let mut attempts = 0usize;
    while chosen.len() < k && attempts < 64 * (k + 1) {
        attempts += 1;
        let a = lo + rng.random_range(0..n);
        let b = lo + rng.random_range(0..n);
        let pair = (a.min(b), a.max(b));
        if a != b && !existing.contains(&pair) && seen.insert(pair) {
            chosen.push(pair);
        }
    }
    chosen
}

/// Fraction of feature entries that differ, counted over entries that are
/// nonzero in at least one of the batches. Two all-zero batches give 0.
pub fn masked_fraction(a: &GraphBatch, b: &GraphBatch) -> Result<f64> {
    feature_change_fraction(a.features(), b.features())
}

pub fn feature_change_fraction(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("feature shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let (mut support, mut changed) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        if x != 0.0 || y != 0.0 {
            support += 1;
            if x != y {
                changed += 1;
            }
        }
    }
    Ok(if support == 0 {
        0.0
    } else {
        changed as f64 / support as f64
    })
}
