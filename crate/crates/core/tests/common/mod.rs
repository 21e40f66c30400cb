#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use sscdl_core::augment::{augment_pair, AugmentConfig};
use sscdl_core::autodiff::{Tape, Var};
use sscdl_core::graph::{normalize_adjacency, pack_batch, Graph, GraphBatch};
use sscdl_core::losses::{
    cross_entropy_logits_node, divergence_node, nt_xent_node, similarity_loss_node, CandidateSet, CondDistConfig,
    DivergenceMode, NegativeCount, PROB_EPS,
};
use sscdl_core::model::{classifier_logits, encode, gradients, projection, BatchInput, Mode, ModelConfig, ModelParams, ParamVars};
use sscdl_core::seed::{self, Rng};

pub fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn mutag_dir() -> PathBuf {
    data_root().join("MUTAG")
}

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Connected-ish random graph: a random spanning tree plus extra edges.
pub fn random_graph(rng: &mut Rng, nodes: std::ops::RangeInclusive<usize>, feature_dim: usize, n_classes: usize, id: usize) -> Graph {
    let n = rng.random_range(nodes);
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for _ in 0..n / 2 {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v && !edges.contains(&(u, v)) && !edges.contains(&(v, u)) {
            edges.push((u, v));
        }
    }
    let features = Array2::from_shape_fn((n, feature_dim), |_| rng.random_range(0.0..1.0));
    Graph::new(features, edges, Some(rng.random_range(0..n_classes)), id).unwrap()
}

pub fn random_graphs(rng: &mut Rng, count: usize, feature_dim: usize, n_classes: usize) -> Vec<Graph> {
    (0..count).map(|i| random_graph(rng, 3..=7, feature_dim, n_classes, i)).collect()
}

pub fn random_permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn input(batch: &GraphBatch) -> BatchInput {
    BatchInput::with_adjacency(batch, &normalize_adjacency(batch).unwrap()).unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        gcn_layers: 2,
        hidden_dim: 8,
        mlp_layers: 2,
        projection_dim: 6,
        use_batchnorm: true,
    }
}

/// Every loss whose gradients are checked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Similarity,
    DivergenceScalar,
    DivergenceFull,
    Classification,
    NtXent,
    Composite,
}

pub const ALL_LOSSES: [LossKind; 6] = [
    LossKind::Similarity,
    LossKind::DivergenceScalar,
    LossKind::DivergenceFull,
    LossKind::Classification,
    LossKind::NtXent,
    LossKind::Composite,
];

/// A synthetic batch with its weak and strong views.
pub struct Problem {
    pub original: BatchInput,
    pub weak: BatchInput,
    pub strong: BatchInput,
    pub labels: Vec<usize>,
    pub candidates: CandidateSet,
}

impl Problem {
    pub fn random(rng: &mut Rng, feature_dim: usize, n_classes: usize) -> Self {
        let n = rng.random_range(4..=8);
        let graphs = random_graphs(rng, n, feature_dim, n_classes);
        let batch = pack_batch(&graphs).unwrap();
        let pair = augment_pair(
            &batch,
            &AugmentConfig {
                seed: rng.random(),
                ..Default::default()
            },
        )
        .unwrap();
        let negatives = if rng.random_bool(0.5) {
            NegativeCount::AllInBatch
        } else {
            NegativeCount::Fixed(rng.random_range(1..n))
        };
        Self {
            original: input(&pair.original),
            weak: input(&pair.weak),
            strong: input(&pair.strong),
            labels: graphs.iter().map(|g| g.label().unwrap()).collect(),
            candidates: CandidateSet::build(n, negatives, rng.random()).unwrap(),
        }
    }
}

pub fn build_loss(kind: LossKind, params: &ModelParams, tape: &mut Tape, vars: &ParamVars, p: &Problem) -> Var {
    let h = encode(tape, params, vars, &p.original, Mode::Train).unwrap().graph_embeddings;
    let h_w = encode(tape, params, vars, &p.weak, Mode::Train).unwrap().graph_embeddings;
    let mut cd = CondDistConfig::default();
    let l_s = |tape: &mut Tape| {
        let proj = projection(tape, params, vars, h);
        let proj_w = projection(tape, params, vars, h_w);
        similarity_loss_node(tape, proj_w, proj, 1.0)
    };
    match kind {
        LossKind::Similarity => l_s(tape),
        LossKind::DivergenceScalar | LossKind::DivergenceFull => {
            if kind == LossKind::DivergenceFull {
                cd.mode = DivergenceMode::FullDistribution;
            }
            let h_s = encode(tape, params, vars, &p.strong, Mode::Train).unwrap().graph_embeddings;
            divergence_node(tape, h, h_w, h_s, &p.candidates, &cd)
        }
        LossKind::Classification => {
            let logits = classifier_logits(tape, params, vars, h);
            cross_entropy_logits_node(tape, logits, &p.labels)
        }
        LossKind::NtXent => {
            let proj = projection(tape, params, vars, h);
            let proj_w = projection(tape, params, vars, h_w);
            nt_xent_node(tape, proj_w, proj, 0.5)
        }
        LossKind::Composite => {
            let logits = classifier_logits(tape, params, vars, h);
            let l_c = cross_entropy_logits_node(tape, logits, &p.labels);
            let ls = l_s(tape);
            let h_s = encode(tape, params, vars, &p.strong, Mode::Train).unwrap().graph_embeddings;
            let l_d = divergence_node(tape, h, h_w, h_s, &p.candidates, &cd);
            let a = tape.scale(ls, 0.1);
            let b = tape.scale(l_d, 0.1);
            let t = tape.add(l_c, a);
            tape.add(t, b)
        }
    }
}

pub fn loss_value(kind: LossKind, params: &ModelParams, p: &Problem) -> f64 {
    gradients(params, |tape, vars| Ok(build_loss(kind, params, tape, vars, p))).unwrap().0
}

/// Relative error with an absolute floor for coordinates whose gradient
/// is numerically zero on both sides.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error between analytic gradients and central finite
/// differences over `coords` random coordinates, or `None` when the stencil
/// of some coordinate straddles a rectifier kink (left and right one-sided
/// slopes disagree), where a central difference says nothing about the
/// gradient.
pub fn finite_difference_error(kind: LossKind, params: &ModelParams, p: &Problem, rng: &mut Rng, coords: usize) -> Option<f64> {
    const STEP: f64 = 1e-5;
    let (base, grads) = gradients(params, |tape, vars| Ok(build_loss(kind, params, tape, vars, p))).unwrap();
    let candidates: Vec<(usize, usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| g.indexed_iter().filter(|(_, v)| v.abs() > 0.0).map(move |((i, j), _)| (t, i, j)).collect::<Vec<_>>())
        .collect();
    assert!(!candidates.is_empty(), "{kind:?} has no gradient");
    let mut worst = 0.0_f64;
    for _ in 0..coords {
        let (t, i, j) = candidates[rng.random_range(0..candidates.len())];
        let mut plus = params.clone();
        plus.tensors_mut()[t][[i, j]] += STEP;
        let mut minus = params.clone();
        minus.tensors_mut()[t][[i, j]] -= STEP;
        let (up, down) = (loss_value(kind, &plus, p), loss_value(kind, &minus, p));
        let (right, left) = ((up - base) / STEP, (base - down) / STEP);
        if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(1.0) {
            return None;
        }
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(grads[t][[i, j]], numeric));
    }
    Some(worst)
}

pub fn fd_rng(kind: LossKind, point: u64) -> Rng {
    seed::rng(seed::derive(77, &[kind as u64, point]))
}

// Naive oracles, written with explicit loops.

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn row(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

pub fn naive_similarity(weak: &Array2<f64>, proj: &Array2<f64>, t: f64) -> f64 {
    let n = proj.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = cos(&row(weak, i), &row(proj, i)) / t;
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (cos(&row(weak, i), &row(proj, j)) / t).exp();
            }
        }
        total += pos - denom.ln();
    }
    -total / n as f64
}

pub fn naive_nt_xent(u: &Array2<f64>, v: &Array2<f64>, t: f64) -> f64 {
    let n = u.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (cos(&row(u, i), &row(v, i)) / t).exp();
        let mut denom = 0.0;
        for j in 0..n {
            denom += (cos(&row(u, i), &row(v, j)) / t).exp();
            if j != i {
                denom += (cos(&row(u, i), &row(u, j)) / t).exp();
            }
        }
        total += (pos / denom).ln();
    }
    -total / n as f64
}

/// Conditional distribution of row `i` of `aug` over candidate columns.
pub fn naive_conditional(original: &Array2<f64>, aug: &Array2<f64>, cands: &[usize], i: usize, tau: f64) -> Vec<f64> {
    let h = row(original, i);
    let weights: Vec<f64> = cands.iter().map(|&c| (cos(&row(aug, c), &h) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

pub fn naive_divergence(
    original: &Array2<f64>,
    weak: &Array2<f64>,
    strong: &Array2<f64>,
    candidates: &Array2<usize>,
    tau: f64,
    full: bool,
) -> f64 {
    let n = original.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let cands = candidates.row(i).to_vec();
        let pw = naive_conditional(original, weak, &cands, i, tau);
        let ps = naive_conditional(original, strong, &cands, i, tau);
        let upto = if full { cands.len() } else { 1 };
        for c in 0..upto {
            total += pw[c] * ps[c].max(PROB_EPS).ln();
        }
    }
    -total / n as f64
}

pub fn naive_cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total += probs[[i, y]].max(PROB_EPS).ln();
    }
    -total / labels.len() as f64
}
