//! Two-stage training: self-supervised pretraining on unlabeled graphs,
//! then fine-tuning on labeled graphs with `L_c + α L_s + β L_d`.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, pack_batch, Graph};
use crate::losses::{
    cross_entropy_logits_node, divergence_node, nt_xent_node, similarity_loss_node, CandidateSet, CondDistConfig,
    LossWeights, NegativeCount,
};
use crate::model::{self, classifier_logits, encode, projection, BatchInput, Mode, ModelConfig, ModelParams};
use crate::optim::{self, AdamConfig, AdamMoments};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    #[serde(rename = "L_c")]
    Classification,
    #[serde(rename = "L_s")]
    Similarity,
    #[serde(rename = "L_d")]
    Divergence,
}

impl LossTerm {
    pub const ALL: [LossTerm; 3] = [LossTerm::Classification, LossTerm::Similarity, LossTerm::Divergence];

    pub fn symbol(self) -> &'static str {
        match self {
            LossTerm::Classification => "L_c",
            LossTerm::Similarity => "L_s",
            LossTerm::Divergence => "L_d",
        }
    }
}

/// Objective of the self-supervised stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainObjective {
    /// Cross-view similarity loss between weak and original projections.
    Similarity,
    /// NT-Xent between weak and original projections.
    NtXent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub cond_dist: CondDistConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub loss_mask: BTreeSet<LossTerm>,
    pub pretrain_objective: PretrainObjective,
    pub nt_xent_temperature: f64,
    /// Draw fresh weak/strong views every epoch instead of once per stage.
    pub resample_views: bool,
    /// Early stopping on validation accuracy; `None` trains every epoch.
    pub early_stopping_patience: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pretrain: 100,
            epochs_finetune: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            weights: LossWeights::default(),
            cond_dist: CondDistConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            loss_mask: LossTerm::ALL.into_iter().collect(),
            pretrain_objective: PretrainObjective::Similarity,
            nt_xent_temperature: 0.5,
            resample_views: false,
            early_stopping_patience: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.nt_xent_temperature > 0.0 && self.nt_xent_temperature.is_finite()) {
            return Err(Error::Config("nt_xent_temperature must be positive".into()));
        }
        if self.loss_mask.is_empty() {
            return Err(Error::Config("loss_mask must name at least one term".into()));
        }
        self.weights.validate()?;
        self.cond_dist.validate()?;
        self.augment.validate()
    }

    /// Fine-tuning weight of `term`, or `None` when the term is masked out
    /// or weighted by zero.
    pub fn active_weight(&self, term: LossTerm) -> Option<f64> {
        let w = match term {
            LossTerm::Classification => 1.0,
            LossTerm::Similarity => self.weights.alpha,
            LossTerm::Divergence => self.weights.beta,
        };
        (self.loss_mask.contains(&term) && w != 0.0).then_some(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }
}

/// Mean loss components over the minibatches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: Stage,
    pub epoch: usize,
    pub l_c: Option<f64>,
    pub l_s: Option<f64>,
    pub l_d: Option<f64>,
    /// Pretraining objective when it is not `L_s`.
    pub other: Option<f64>,
    pub total: f64,
    /// Log-probability entries raised to the floor during the epoch.
    pub clamped: usize,
    pub validation_accuracy: Option<f64>,
}

/// Graph ids each stage touched. Pretraining ids are recorded with their
/// labels already stripped; fine-tuning ids are the labels read.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub pretrain_ids: BTreeSet<usize>,
    pub finetune_label_ids: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub moments: AdamMoments,
    pub epoch: usize,
    pub loss_history: Vec<EpochLoss>,
    pub audit: Audit,
}

const INIT_STREAM: u64 = 10;
const SHUFFLE_STREAM: u64 = 11;
const VIEW_STREAM: u64 = 12;
const CANDIDATE_STREAM: u64 = 13;

impl TrainState {
    pub fn init(model: &ModelConfig, input_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        let params = ModelParams::init(model, input_dim, n_classes, seed::derive(seed, &[INIT_STREAM]))?;
        Ok(Self::from_params(params))
    }

    pub fn from_params(params: ModelParams) -> Self {
        Self {
            moments: AdamMoments::zeros_like(params.tensors()),
            params,
            epoch: 0,
            loss_history: Vec::new(),
            audit: Audit::default(),
        }
    }
}

struct Views {
    original: Vec<Graph>,
    weak: Vec<Graph>,
    strong: Vec<Graph>,
}

fn make_views(graphs: &[Graph], cfg: &TrainConfig, stage: Stage, round: u64) -> Result<Views> {
    let mut weak = Vec::with_capacity(graphs.len());
    let mut strong = Vec::with_capacity(graphs.len());
    for g in graphs {
        let acfg = AugmentConfig {
            seed: seed::derive(
                cfg.seed,
                &[VIEW_STREAM, cfg.augment.seed, stage.tag(), g.graph_id() as u64, round],
            ),
            ..cfg.augment.clone()
        };
        let pair = augment_pair(&pack_batch(std::slice::from_ref(g))?, &acfg)?;
        weak.extend(pair.weak.unpack());
        strong.extend(pair.strong.unpack());
    }
    Ok(Views {
        original: graphs.to_vec(),
        weak,
        strong,
    })
}

/// Shuffled minibatches of at most `size`; a trailing singleton joins the
/// previous batch so every batch has a negative.
fn minibatches(n: usize, size: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

fn select(graphs: &[Graph], idx: &[usize]) -> Vec<Graph> {
    idx.iter().map(|&i| graphs[i].clone()).collect()
}

fn input_for(graphs: &[Graph], idx: &[usize]) -> Result<BatchInput> {
    let batch = pack_batch(&select(graphs, idx))?;
    BatchInput::with_adjacency(&batch, &normalize_adjacency(&batch)?)
}

#[derive(Default)]
struct StepLosses {
    l_c: Option<f64>,
    l_s: Option<f64>,
    l_d: Option<f64>,
    other: Option<f64>,
    total: f64,
    clamped: usize,
}

struct EpochAccumulator {
    sums: [f64; 5],
    seen: [bool; 4],
    clamped: usize,
    batches: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            sums: [0.0; 5],
            seen: [false; 4],
            clamped: 0,
            batches: 0,
        }
    }

    fn add(&mut self, s: &StepLosses) {
        for (k, v) in [s.l_c, s.l_s, s.l_d, s.other].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v;
                self.seen[k] = true;
            }
        }
        self.sums[4] += s.total;
        self.clamped += s.clamped;
        self.batches += 1;
    }

    fn finish(&self, stage: Stage, epoch: usize) -> EpochLoss {
        let n = self.batches as f64;
        let mean = |k: usize| self.seen[k].then(|| self.sums[k] / n);
        EpochLoss {
            stage,
            epoch,
            l_c: mean(0),
            l_s: mean(1),
            l_d: mean(2),
            other: mean(3),
            total: self.sums[4] / n,
            clamped: self.clamped,
            validation_accuracy: None,
        }
    }
}

/// Backpropagates `terms`, applies one optimizer step and folds the
/// original view's batch statistics into the running averages.
#[allow(clippy::too_many_arguments)]
fn apply(
    state: &mut TrainState,
    mut tape: Tape,
    vars: &model::ParamVars,
    terms: &[(Var, f64)],
    stats: &[model::ObservedStats],
    lr: f64,
    adam: &AdamConfig,
    location: &str,
) -> Result<f64> {
    let mut total = tape.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let scaled = tape.scale(v, w);
        total = tape.add(total, scaled);
    }
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value} at {location}")));
    }
    let grads = tape.backward(total);
    let grads: Vec<Array2<f64>> = vars
        .vars()
        .iter()
        .zip(state.params.tensors())
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(t.raw_dim())))
        .collect();
    optim::step(state.params.tensors_mut(), &grads, &mut state.moments, lr, adam)
        .map_err(|e| Error::NonFinite(format!("{e} at {location}")))?;
    state.params.update_running(stats);
    if !state.params.is_finite() {
        return Err(Error::NonFinite(format!("parameters after {location}")));
    }
    Ok(value)
}

fn pretrain_step(state: &mut TrainState, views: &Views, idx: &[usize], cfg: &TrainConfig, location: &str) -> Result<StepLosses> {
    let orig = input_for(&views.original, idx)?;
    let weak = input_for(&views.weak, idx)?;
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let p = &state.params;
    let enc = encode(&mut tape, p, &vars, &orig, Mode::Train)?;
    let enc_w = encode(&mut tape, p, &vars, &weak, Mode::Train)?;
    let proj = projection(&mut tape, p, &vars, enc.graph_embeddings);
    let proj_w = projection(&mut tape, p, &vars, enc_w.graph_embeddings);
    let mut out = StepLosses::default();
    let loss = match cfg.pretrain_objective {
        PretrainObjective::Similarity => {
            let l = similarity_loss_node(&mut tape, proj_w, proj, cfg.cond_dist.similarity_temperature);
            out.l_s = Some(tape.scalar(l));
            l
        }
        PretrainObjective::NtXent => {
            let l = nt_xent_node(&mut tape, proj_w, proj, cfg.nt_xent_temperature);
            out.other = Some(tape.scalar(l));
            l
        }
    };
    out.clamped = tape.clamp_hits();
    out.total = apply(state, tape, &vars, &[(loss, 1.0)], &enc.stats, cfg.learning_rate, &cfg.adam, location)?;
    Ok(out)
}

fn finetune_step(
    state: &mut TrainState,
    views: &Views,
    idx: &[usize],
    cfg: &TrainConfig,
    candidate_seed: u64,
    location: &str,
) -> Result<StepLosses> {
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| views.original[i].label().expect("labels checked at stage start"))
        .collect();
    let w_c = cfg.active_weight(LossTerm::Classification);
    let w_s = cfg.active_weight(LossTerm::Similarity);
    let w_d = cfg.active_weight(LossTerm::Divergence);
    if w_c.is_none() && w_s.is_none() && w_d.is_none() {
        return Err(Error::Config("every fine-tuning loss term is masked out or zero-weighted".into()));
    }

    let orig = input_for(&views.original, idx)?;
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let p = &state.params;
    let enc = encode(&mut tape, p, &vars, &orig, Mode::Train)?;
    let h = enc.graph_embeddings;
    let h_w = if w_s.is_some() || w_d.is_some() {
        let weak = input_for(&views.weak, idx)?;
        Some(encode(&mut tape, p, &vars, &weak, Mode::Train)?.graph_embeddings)
    } else {
        None
    };

    let mut out = StepLosses::default();
    let mut terms = Vec::new();
    if let Some(w) = w_c {
        let logits = classifier_logits(&mut tape, p, &vars, h);
        let l = cross_entropy_logits_node(&mut tape, logits, &labels);
        out.l_c = Some(tape.scalar(l));
        terms.push((l, w));
    }
    if let (Some(w), Some(h_w)) = (w_s, h_w) {
        let proj = projection(&mut tape, p, &vars, h);
        let proj_w = projection(&mut tape, p, &vars, h_w);
        let l = similarity_loss_node(&mut tape, proj_w, proj, cfg.cond_dist.similarity_temperature);
        out.l_s = Some(tape.scalar(l));
        terms.push((l, w));
    }
    if let (Some(w), Some(h_w)) = (w_d, h_w) {
        let strong = input_for(&views.strong, idx)?;
        let h_s = encode(&mut tape, p, &vars, &strong, Mode::Train)?.graph_embeddings;
        let negatives = match cfg.cond_dist.negatives {
            NegativeCount::Fixed(k) if k >= idx.len() => NegativeCount::AllInBatch,
            other => other,
        };
        let candidates = CandidateSet::build(idx.len(), negatives, candidate_seed)?;
        let before = tape.clamp_hits();
        let l = divergence_node(&mut tape, h, h_w, h_s, &candidates, &cfg.cond_dist);
        out.clamped = tape.clamp_hits() - before;
        out.l_d = Some(tape.scalar(l));
        terms.push((l, w));
    }
    out.total = apply(state, tape, &vars, &terms, &enc.stats, cfg.learning_rate, &cfg.adam, location)?;
    Ok(out)
}

/// Self-supervised stage on `graphs`, whose labels are never read.
pub fn pretrain(graphs: &[Graph], mut state: TrainState, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.epochs_pretrain == 0 {
        return Ok(state);
    }
    if graphs.len() < 2 {
        return Err(Error::Precondition(format!(
            "pretraining needs at least 2 graphs, got {}",
            graphs.len()
        )));
    }
    let graphs: Vec<Graph> = graphs.iter().map(Graph::unlabeled).collect();
    state.audit.pretrain_ids.extend(graphs.iter().map(Graph::graph_id));
    state.moments = AdamMoments::zeros_like(state.params.tensors());
    let stage = Stage::Pretrain;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[SHUFFLE_STREAM, stage.tag()]));
    let mut views = make_views(&graphs, cfg, stage, 0)?;
    for epoch in 0..cfg.epochs_pretrain {
        if cfg.resample_views && epoch > 0 {
            views = make_views(&graphs, cfg, stage, epoch as u64)?;
        }
        let mut acc = EpochAccumulator::new();
        for (b, idx) in minibatches(graphs.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let location = format!("pretrain epoch {epoch} batch {b}");
            acc.add(&pretrain_step(&mut state, &views, idx, cfg, &location)?);
        }
        state.loss_history.push(acc.finish(stage, epoch));
        state.epoch += 1;
    }
    Ok(state)
}

pub fn finetune(graphs: &[Graph], state: TrainState, cfg: &TrainConfig) -> Result<TrainState> {
    finetune_with_validation(graphs, &[], state, cfg)
}

/// Fine-tuning on labeled `graphs`. With `early_stopping_patience` set and
/// a non-empty `validation` set, keeps the parameters of the best
/// validation epoch and stops once it is `patience` epochs old.
pub fn finetune_with_validation(
    graphs: &[Graph],
    validation: &[Graph],
    mut state: TrainState,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.epochs_finetune == 0 {
        return Ok(state);
    }
    if graphs.len() < 2 {
        return Err(Error::Precondition(format!(
            "fine-tuning needs at least 2 labeled graphs, got {}",
            graphs.len()
        )));
    }
    if let Some(g) = graphs.iter().find(|g| g.label().is_none()) {
        return Err(Error::Precondition(format!("graph {} has no label", g.graph_id())));
    }
    if let Some(g) = graphs.iter().find(|g| g.label().unwrap() >= state.params.n_classes()) {
        return Err(Error::Precondition(format!("graph {} label out of range", g.graph_id())));
    }
    state.audit.finetune_label_ids.extend(graphs.iter().map(Graph::graph_id));
    state.moments = AdamMoments::zeros_like(state.params.tensors());
    let stage = Stage::Finetune;
    let mut rng = seed::rng(seed::derive(cfg.seed, &[SHUFFLE_STREAM, stage.tag()]));
    let mut views = make_views(graphs, cfg, stage, 0)?;
    let watch = cfg.early_stopping_patience.filter(|_| !validation.is_empty());
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 0..cfg.epochs_finetune {
        if cfg.resample_views && epoch > 0 {
            views = make_views(graphs, cfg, stage, epoch as u64)?;
        }
        let mut acc = EpochAccumulator::new();
        for (b, idx) in minibatches(graphs.len(), cfg.batch_size, &mut rng).iter().enumerate() {
            let location = format!("finetune epoch {epoch} batch {b}");
            let cseed = seed::derive(cfg.seed, &[CANDIDATE_STREAM, epoch as u64, b as u64]);
            acc.add(&finetune_step(&mut state, &views, idx, cfg, cseed, &location)?);
        }
        let mut record = acc.finish(stage, epoch);
        state.epoch += 1;
        if let Some(patience) = watch {
            let val = accuracy(&predict(&state.params, validation)?, validation);
            record.validation_accuracy = Some(val);
            state.loss_history.push(record);
            match &best {
                Some((b, _, _)) if val <= *b => {}
                _ => best = Some((val, epoch, state.params.clone())),
            }
            if epoch - best.as_ref().unwrap().1 >= patience {
                break;
            }
        } else {
            state.loss_history.push(record);
        }
    }
    if let Some((_, _, params)) = best {
        state.params = params;
    }
    Ok(state)
}

const PREDICT_CHUNK: usize = 256;

/// Class probabilities in evaluation mode, one row per graph.
pub fn predict_proba(params: &ModelParams, graphs: &[Graph]) -> Result<Array2<f64>> {
    if graphs.is_empty() {
        return Ok(Array2::zeros((0, params.n_classes())));
    }
    let mut parts = Vec::new();
    for chunk in graphs.chunks(PREDICT_CHUNK) {
        let batch = pack_batch(chunk)?;
        let out = model::forward(&batch, &normalize_adjacency(&batch)?, params, Mode::Eval)?;
        parts.push(out.class_probs);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// Arg-max class per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ModelParams, graphs: &[Graph]) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_proba(params, graphs)?))
}

/// Fraction of `graphs` whose label equals the prediction. Unlabeled
/// graphs count as misses; an empty set has accuracy 0.
pub fn accuracy(predictions: &[usize], graphs: &[Graph]) -> f64 {
    if graphs.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(graphs)
        .filter(|(&p, g)| g.label() == Some(p))
        .count();
    hits as f64 / graphs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_graphs() -> Vec<Graph> {
        // Two triangles (class 0) and two paths (class 1), distinct features.
        let tri = [(0, 1), (1, 2), (0, 2)];
        let path = [(0, 1), (1, 2), (2, 3)];
        vec![
            Graph::new(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], tri, Some(0), 0).unwrap(),
            Graph::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], tri, Some(0), 1).unwrap(),
            Graph::new(array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], path, Some(1), 2).unwrap(),
            Graph::new(array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], path, Some(1), 3).unwrap(),
        ]
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            gcn_layers: 2,
            hidden_dim: 16,
            mlp_layers: 1,
            projection_dim: 16,
            use_batchnorm: true,
        }
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs_pretrain: 5,
            epochs_finetune: 5,
            batch_size: 4,
            learning_rate: 1e-2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn minibatch_singleton_merges() {
        let mut rng = seed::rng(0);
        let b = minibatches(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let b = minibatches(8, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
    }

    #[test]
    fn zero_epochs_leave_params() {
        let state = TrainState::init(&small_model(), 2, 2, 1).unwrap();
        let c = TrainConfig {
            epochs_pretrain: 0,
            ..cfg(1)
        };
        let out = pretrain(&toy_graphs(), state.clone(), &c).unwrap();
        assert_eq!(out, state);
    }

    #[test]
    fn same_seed_same_parameters() {
        let run = || {
            let s = TrainState::init(&small_model(), 2, 2, 3).unwrap();
            let s = pretrain(&toy_graphs(), s, &cfg(3)).unwrap();
            finetune(&toy_graphs(), s, &cfg(3)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.loss_history.len(), 10);
    }

    #[test]
    fn zero_weights_match_classification_only() {
        let base = TrainConfig {
            weights: LossWeights { alpha: 0.0, beta: 0.0 },
            ..cfg(5)
        };
        let masked = TrainConfig {
            loss_mask: [LossTerm::Classification].into_iter().collect(),
            ..cfg(5)
        };
        let s = TrainState::init(&small_model(), 2, 2, 5).unwrap();
        let a = finetune(&toy_graphs(), s.clone(), &base).unwrap();
        let b = finetune(&toy_graphs(), s, &masked).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn finetune_requires_labels() {
        let s = TrainState::init(&small_model(), 2, 2, 5).unwrap();
        let unlabeled: Vec<Graph> = toy_graphs().iter().map(Graph::unlabeled).collect();
        assert!(matches!(finetune(&unlabeled, s, &cfg(0)), Err(Error::Precondition(_))));
    }

    #[test]
    fn pretrain_strips_labels_and_records_ids() {
        let s = TrainState::init(&small_model(), 2, 2, 5).unwrap();
        let s = pretrain(&toy_graphs(), s, &cfg(0)).unwrap();
        assert_eq!(s.audit.pretrain_ids, (0..4).collect());
        assert!(s.audit.finetune_label_ids.is_empty());
    }

    #[test]
    fn argmax_ties_take_lowest() {
        assert_eq!(argmax_rows(&array![[0.5, 0.5], [0.2, 0.8], [0.4, 0.4]]), vec![0, 1, 0]);
    }

    #[test]
    fn early_stopping_restores_best() {
        let c = TrainConfig {
            epochs_finetune: 50,
            early_stopping_patience: Some(3),
            ..cfg(2)
        };
        let s = TrainState::init(&small_model(), 2, 2, 2).unwrap();
        let out = finetune_with_validation(&toy_graphs(), &toy_graphs(), s, &c).unwrap();
        let best = out
            .loss_history
            .iter()
            .filter_map(|e| e.validation_accuracy)
            .fold(0.0, f64::max);
        let final_acc = accuracy(&predict(&out.params, &toy_graphs()).unwrap(), &toy_graphs());
        assert_eq!(final_acc, best);
    }
}
