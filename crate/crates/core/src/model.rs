//! Shared graph encoder and its heads.
//!
//! The encoder is a stack of GCN layers (`relu(BN(Â H W))`), a sum-pooling
//! readout and an MLP. On top of the graph-level representation sit a
//! linear softmax classifier and a two-layer projection head without
//! normalization. All trainable tensors live in one [`ModelParams`]; the
//! original, weak and strong views are encoded with the same [`ParamVars`].

use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, CsrMatrix, GraphBatch, NormalizedAdjacency};
use crate::seed;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub gcn_layers: usize,
    pub hidden_dim: usize,
    pub mlp_layers: usize,
    pub projection_dim: usize,
    pub use_batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gcn_layers: 3,
            hidden_dim: 64,
            mlp_layers: 2,
            projection_dim: 64,
            use_batchnorm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gcn_layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.projection_dim == 0 {
            return Err(Error::Config("hidden_dim and projection_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Batch-normalization statistics mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl RunningStats {
    fn new(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            var: Array1::ones(dim),
        }
    }

    /// Exponential moving average toward the observed batch; the variance
    /// is tracked unbiased.
    fn update(&mut self, batch: &BatchStats, rows: usize) {
        let unbias = if rows > 1 {
            rows as f64 / (rows as f64 - 1.0)
        } else {
            1.0
        };
        self.mean = &self.mean * (1.0 - BN_MOMENTUM) + &batch.mean * BN_MOMENTUM;
        self.var = &self.var * (1.0 - BN_MOMENTUM) + &batch.var * (BN_MOMENTUM * unbias);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DenseSlots {
    weight: usize,
    bias: Option<usize>,
    /// `(gamma, beta, running-stat slot)`.
    norm: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    gcn: Vec<DenseSlots>,
    mlp: Vec<DenseSlots>,
    classifier: DenseSlots,
    projection: [usize; 2],
}

/// Every trainable tensor of the model plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    input_dim: usize,
    n_classes: usize,
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    running: Vec<RunningStats>,
    layout: Layout,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    running_dims: Vec<usize>,
}

impl Builder {
    fn slot(&mut self, name: String, shape: (usize, usize)) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize, norm: bool, bias: bool) -> DenseSlots {
        let weight = self.slot(format!("{prefix}.weight"), (fan_in, fan_out));
        let bias = bias.then(|| self.slot(format!("{prefix}.bias"), (1, fan_out)));
        let norm = norm.then(|| {
            let g = self.slot(format!("{prefix}.bn.gamma"), (1, fan_out));
            let b = self.slot(format!("{prefix}.bn.beta"), (1, fan_out));
            self.running_dims.push(fan_out);
            (g, b, self.running_dims.len() - 1)
        });
        DenseSlots { weight, bias, norm }
    }
}

fn build_layout(config: &ModelConfig, input_dim: usize, n_classes: usize) -> (Layout, Builder) {
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        running_dims: Vec::new(),
    };
    let bn = config.use_batchnorm;
    let h = config.hidden_dim;
    let gcn = (0..config.gcn_layers)
        .map(|l| {
            let fan_in = if l == 0 { input_dim } else { h };
            b.dense(&format!("gcn.{l}"), fan_in, h, bn, false)
        })
        .collect();
    let mlp = (0..config.mlp_layers)
        .map(|l| b.dense(&format!("mlp.{l}"), h, h, bn, !bn))
        .collect();
    let classifier = b.dense("classifier", h, n_classes, false, true);
    let p = config.projection_dim;
    let projection = [
        b.slot("projection.0.weight".into(), (h, p)),
        b.slot("projection.1.weight".into(), (p, p)),
    ];
    (
        Layout {
            gcn,
            mlp,
            classifier,
            projection,
        },
        b,
    )
}

impl ModelParams {
    /// Fresh parameters: weights and biases uniform in `±1/√fan_in`,
    /// batch-norm scale 1 and shift 0.
    pub fn init(config: &ModelConfig, input_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || n_classes == 0 {
            return Err(Error::Config("input_dim and n_classes must be at least 1".into()));
        }
        let (layout, b) = build_layout(config, input_dim, n_classes);
        let mut rng = seed::rng(seed);
        let mut fan_in_of = vec![0usize; b.names.len()];
        for slots in layout.gcn.iter().chain(&layout.mlp).chain([&layout.classifier]) {
            let fan_in = b.shapes[slots.weight].0;
            fan_in_of[slots.weight] = fan_in;
            if let Some(bias) = slots.bias {
                fan_in_of[bias] = fan_in;
            }
        }
        for &w in &layout.projection {
            fan_in_of[w] = b.shapes[w].0;
        }
        let tensors = b
            .names
            .iter()
            .zip(&b.shapes)
            .zip(&fan_in_of)
            .map(|((name, &shape), &fan_in)| {
                if name.ends_with("bn.gamma") {
                    Array2::ones(shape)
                } else if name.ends_with("bn.beta") {
                    Array2::zeros(shape)
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            input_dim,
            n_classes,
            names: b.names,
            tensors,
            running: b.running_dims.into_iter().map(RunningStats::new).collect(),
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Names of the running-statistics slots, in [`ModelParams::running`] order.
    pub fn running_names(&self) -> Vec<String> {
        self.names
            .iter()
            .filter(|n| n.ends_with(".bn.gamma"))
            .map(|n| n.trim_end_matches(".gamma").to_string())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
            && self
                .running
                .iter()
                .all(|r| r.mean.iter().chain(r.var.iter()).all(|v| v.is_finite()))
    }

    /// Registers every tensor once on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Registers every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Folds the statistics of a training-mode pass into the running
    /// averages. `stats` must come from [`encode`] on this model.
    pub fn update_running(&mut self, stats: &[ObservedStats]) {
        for s in stats {
            self.running[s.slot].update(&s.stats, s.rows);
        }
    }

    /// Replaces tensor values, keeping names and layout.
    pub fn set_tensors(&mut self, tensors: Vec<Array2<f64>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::DimensionMismatch {
                context: "set_tensors".into(),
                expected: self.tensors.len(),
                found: tensors.len(),
            });
        }
        for ((old, new), name) in self.tensors.iter().zip(&tensors).zip(&self.names) {
            if old.dim() != new.dim() {
                return Err(Error::shape(format!(
                    "tensor {name}: expected {:?}, got {:?}",
                    old.dim(),
                    new.dim()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Tape handles for one binding of [`ModelParams`], aligned with
/// [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    fn at(&self, slot: usize) -> Var {
        self.0[slot]
    }
}

/// Batch statistics seen by one normalized layer during a training pass.
#[derive(Debug, Clone)]
pub struct ObservedStats {
    slot: usize,
    rows: usize,
    stats: BatchStats,
}

/// A batch prepared for the tape: constant features plus the fixed graph
/// structure.
#[derive(Debug, Clone)]
pub struct BatchInput {
    features: Array2<f64>,
    adjacency: Rc<CsrMatrix>,
    graph_index: Rc<Vec<usize>>,
    n_graphs: usize,
}

impl BatchInput {
    pub fn new(batch: &GraphBatch) -> Result<Self> {
        let adj = normalize_adjacency(batch)?;
        Self::with_adjacency(batch, &adj)
    }

    pub fn with_adjacency(batch: &GraphBatch, adj: &NormalizedAdjacency) -> Result<Self> {
        if adj.dim() != batch.n_nodes() {
            return Err(Error::DimensionMismatch {
                context: "adjacency vs batch nodes".into(),
                expected: batch.n_nodes(),
                found: adj.dim(),
            });
        }
        if batch.features().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("node features".into()));
        }
        Ok(Self {
            features: batch.features().clone(),
            adjacency: Rc::new(adj.matrix().clone()),
            graph_index: Rc::new(batch.graph_index().to_vec()),
            n_graphs: batch.n_graphs(),
        })
    }

    pub fn n_graphs(&self) -> usize {
        self.n_graphs
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Tape nodes produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub node_embeddings: Var,
    pub pooled: Var,
    /// Graph-level representation `H` (MLP output).
    pub graph_embeddings: Var,
    pub stats: Vec<ObservedStats>,
}

fn normalized_dense(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    slots: &DenseSlots,
    x: Var,
    mode: Mode,
    stats: &mut Vec<ObservedStats>,
) -> Var {
    let mut z = x;
    if let Some(b) = slots.bias {
        z = tape.add_row(z, vars.at(b));
    }
    if let Some((g, b, r)) = slots.norm {
        let (gamma, beta) = (vars.at(g), vars.at(b));
        z = match mode {
            Mode::Train => {
                let rows = tape.value(z).nrows();
                let (out, s) = tape.batch_norm_train(z, gamma, beta, BN_EPS);
                stats.push(ObservedStats {
                    slot: r,
                    rows,
                    stats: s,
                });
                out
            }
            Mode::Eval => {
                let rs = &params.running[r];
                tape.batch_norm_eval(z, gamma, beta, &rs.mean, &rs.var, BN_EPS)
            }
        };
    }
    tape.relu(z)
}

fn check_input(params: &ModelParams, input: &BatchInput) -> Result<()> {
    if input.feature_dim() != params.input_dim {
        return Err(Error::DimensionMismatch {
            context: "encoder input features".into(),
            expected: params.input_dim,
            found: input.feature_dim(),
        });
    }
    Ok(())
}

/// GCN stack, sum readout and MLP.
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &ParamVars,
    input: &BatchInput,
    mode: Mode,
) -> Result<Encoded> {
    check_input(params, input)?;
    let mut stats = Vec::new();
    let mut h = tape.constant(input.features.clone());
    for slots in &params.layout.gcn {
        let propagated = tape.spmm(input.adjacency.clone(), h);
        let lin = tape.matmul(propagated, vars.at(slots.weight));
        h = normalized_dense(tape, params, vars, slots, lin, mode, &mut stats);
    }
    let node_embeddings = h;
    let pooled = tape.segment_sum(h, input.graph_index.clone(), input.n_graphs);
    let mut g = pooled;
    for slots in &params.layout.mlp {
        let lin = tape.matmul(g, vars.at(slots.weight));
        g = normalized_dense(tape, params, vars, slots, lin, mode, &mut stats);
    }
    Ok(Encoded {
        node_embeddings,
        pooled,
        graph_embeddings: g,
        stats,
    })
}

/// Class logits `H W_c + b_c`.
pub fn classifier_logits(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, h: Var) -> Var {
    let c = &params.layout.classifier;
    let z = tape.matmul(h, vars.at(c.weight));
    let bias = c.bias.expect("classifier has a bias");
    tape.add_row(z, vars.at(bias))
}

/// Projection head `relu(H W_1) W_2`.
pub fn projection(tape: &mut Tape, params: &ModelParams, vars: &ParamVars, h: Var) -> Var {
    let [w1, w2] = params.layout.projection;
    let z = tape.matmul(h, vars.at(w1));
    let z = tape.relu(z);
    tape.matmul(z, vars.at(w2))
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// One GCN propagation `relu(Â H W)` without normalization.
pub fn gcn_layer(h_prev: &Array2<f64>, adj: &NormalizedAdjacency, w: &Array2<f64>) -> Result<Array2<f64>> {
    if h_prev.nrows() != adj.dim() {
        return Err(Error::DimensionMismatch {
            context: "gcn_layer nodes".into(),
            expected: adj.dim(),
            found: h_prev.nrows(),
        });
    }
    if h_prev.ncols() != w.nrows() {
        return Err(Error::DimensionMismatch {
            context: "gcn_layer weight".into(),
            expected: h_prev.ncols(),
            found: w.nrows(),
        });
    }
    if h_prev.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcn_layer input".into()));
    }
    Ok(adj.apply(h_prev).dot(w).mapv(|v| v.max(0.0)))
}

/// Per-graph sums of node rows.
pub fn readout_sum(node_embeddings: &Array2<f64>, graph_index: &[usize], n_graphs: usize) -> Result<Array2<f64>> {
    if node_embeddings.nrows() != graph_index.len() {
        return Err(Error::DimensionMismatch {
            context: "readout_sum".into(),
            expected: node_embeddings.nrows(),
            found: graph_index.len(),
        });
    }
    if let Some(&bad) = graph_index.iter().find(|&&g| g >= n_graphs) {
        return Err(Error::shape(format!("graph index {bad} >= {n_graphs}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(node_embeddings.clone());
    let s = tape.segment_sum(x, Rc::new(graph_index.to_vec()), n_graphs);
    Ok(tape.value(s).clone())
}

fn check_graph_matrix(params: &ModelParams, m: &Array2<f64>, context: &str) -> Result<()> {
    if m.ncols() != params.config.hidden_dim {
        return Err(Error::DimensionMismatch {
            context: context.into(),
            expected: params.config.hidden_dim,
            found: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.into()));
    }
    Ok(())
}

/// MLP part of the encoder applied to pooled graph vectors.
pub fn mlp_head(pooled: &Array2<f64>, params: &ModelParams, mode: Mode) -> Result<Array2<f64>> {
    check_graph_matrix(params, pooled, "mlp_head input")?;
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let mut g = tape.constant(pooled.clone());
    let mut stats = Vec::new();
    for slots in &params.layout.mlp {
        let lin = tape.matmul(g, vars.at(slots.weight));
        g = normalized_dense(&mut tape, params, &vars, slots, lin, mode, &mut stats);
    }
    Ok(tape.value(g).clone())
}

/// Softmax class probabilities for graph-level representations.
pub fn classify(h: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_graph_matrix(params, h, "classify input")?;
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let hv = tape.constant(h.clone());
    let logits = classifier_logits(&mut tape, params, &vars, hv);
    Ok(softmax_rows(tape.value(logits)))
}

pub fn project(h: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    check_graph_matrix(params, h, "project input")?;
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let hv = tape.constant(h.clone());
    let p = projection(&mut tape, params, &vars, hv);
    Ok(tape.value(p).clone())
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub node_embeddings: Array2<f64>,
    pub graph_embeddings: Array2<f64>,
    pub class_probs: Array2<f64>,
    pub projections: Array2<f64>,
}

/// Full pipeline without gradient tracking. Running statistics are not
/// modified, whatever the mode.
pub fn forward(batch: &GraphBatch, adj: &NormalizedAdjacency, params: &ModelParams, mode: Mode) -> Result<ForwardOutput> {
    let input = BatchInput::with_adjacency(batch, adj)?;
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let enc = encode(&mut tape, params, &vars, &input, mode)?;
    let logits = classifier_logits(&mut tape, params, &vars, enc.graph_embeddings);
    let proj = projection(&mut tape, params, &vars, enc.graph_embeddings);
    Ok(ForwardOutput {
        node_embeddings: tape.value(enc.node_embeddings).clone(),
        graph_embeddings: tape.value(enc.graph_embeddings).clone(),
        class_probs: softmax_rows(tape.value(logits)),
        projections: tape.value(proj).clone(),
    })
}

/// Gradients of a scalar loss with respect to every tensor of `params`.
///
/// `loss` receives a fresh tape and the bound parameters and returns the
/// scalar loss node. Rectifier derivatives at exactly 0 are taken as 0.
pub fn gradients<F>(params: &ModelParams, loss: F) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: FnOnce(&mut Tape, &ParamVars) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = loss(&mut tape, &vars)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss value {value}")));
    }
    let grads = tape.backward(out);
    let per_tensor = vars
        .vars()
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(t.raw_dim())))
        .collect();
    Ok((value, per_tensor))
}
