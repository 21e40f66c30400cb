//! Matrix-valued reverse-mode differentiation tape.
//!
//! Every value is a dense `Array2<f64>`; scalars are `1 × 1`. Operations
//! append a node recording their inputs, and [`Tape::backward`] walks the
//! nodes in reverse accumulating adjoints. Only nodes that depend on a
//! [`Tape::param`] leaf carry gradients.
//!
//! Shape mismatches between operands are programming errors and panic;
//! callers validate user-facing shapes before building the tape.

use std::rc::Rc;

use ndarray::{Array1, Array2, Axis, Zip};

use crate::graph::CsrMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    SpMM(Rc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    SegmentSum(Var, Rc<Vec<usize>>),
    NormalizeRows(Var, Vec<f64>),
    Gather(Var, Rc<Array2<usize>>),
    ConcatCols(Var, Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    ClampMin(Var, Vec<bool>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Denominator guard for row normalization; rows shorter than this are
/// divided by it instead of their own norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_hits: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of entries clamped by [`Tape::clamp_min`] so far.
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on a non-scalar node");
        val[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulT(a, b), t)
    }

    /// `m · x` for a constant sparse `m`.
    pub fn spmm(&mut self, m: Rc<CsrMatrix>, x: Var) -> Var {
        let value = m.matmul(self.value(x));
        let t = self.tracked(x);
        self.push(value, Op::SpMM(m, x), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), t)
    }

    /// Adds a `1 × d` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "add_row expects a single row");
        let value = self.value(x) + r;
        let t = self.tracked(x) || self.tracked(row);
        self.push(value, Op::AddRow(x, row), t)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x) * s;
        let t = self.tracked(x);
        self.push(value, Op::Scale(x, s), t)
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let t = self.tracked(x);
        self.push(value, Op::Relu(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::exp);
        let t = self.tracked(x);
        self.push(value, Op::Exp(x), t)
    }

    /// Column-wise batch normalization using the statistics of `x` itself
    /// (biased variance). Returns the output and the observed statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.mean_axis(Axis(0)).expect("batch norm over zero rows");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = centered * &inv_std;
        let value = &xhat * self.value(gamma) + self.value(beta);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        let stats = BatchStats { mean, var };
        let v = self.push(
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        );
        (v, stats)
    }

    /// Column-wise normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (self.value(x) - mean) * &inv_std;
        let value = &xhat * self.value(gamma) + self.value(beta);
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            value,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        )
    }

    /// Row `s` of the output is the sum of the rows `i` of `x` with
    /// `index[i] == s`.
    pub fn segment_sum(&mut self, x: Var, index: Rc<Vec<usize>>, segments: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), index.len(), "segment index length mismatch");
        let mut value = Array2::zeros((segments, xv.ncols()));
        for (row, &s) in xv.rows().into_iter().zip(index.iter()) {
            let mut acc = value.row_mut(s);
            acc += &row;
        }
        let t = self.tracked(x);
        self.push(value, Op::SegmentSum(x, index), t)
    }

    /// Scales every row to unit Euclidean length (see [`NORM_EPS`]).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_EPS))
            .collect();
        let mut value = xv.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        let t = self.tracked(x);
        self.push(value, Op::NormalizeRows(x, norms), t)
    }

    /// `out[i][j] = x[i][idx[i][j]]`.
    pub fn gather(&mut self, x: Var, idx: Rc<Array2<usize>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), idx.nrows(), "gather row mismatch");
        let value = Array2::from_shape_fn(idx.dim(), |(i, j)| xv[[i, idx[[i, j]]]]);
        let t = self.tracked(x);
        self.push(value, Op::Gather(x, idx), t)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row mismatch");
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::ConcatCols(a, b), t)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row -= lse;
        }
        let t = self.tracked(x);
        self.push(value, Op::LogSoftmaxRows(x), t)
    }

    /// `n × 1` column of row-wise log-sum-exp.
    pub fn log_sum_exp_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Array2::from_shape_fn((xv.nrows(), 1), |(i, _)| {
            log_sum_exp(xv.row(i).iter().copied())
        });
        let t = self.tracked(x);
        self.push(value, Op::LogSumExpRows(x), t)
    }

    /// `max(x, floor)` elementwise; clamped entries pass no gradient and
    /// are counted in [`Tape::clamp_hits`].
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let xv = self.value(x);
        let mask: Vec<bool> = xv.iter().map(|&v| v < floor).collect();
        let hits = mask.iter().filter(|&&m| m).count();
        if hits > 0 {
            log::warn!("clamped {hits} log-probabilities at {floor}");
        }
        let value = xv.mapv(|v| v.max(floor));
        self.clamp_hits += hits;
        let t = self.tracked(x);
        self.push(value, Op::ClampMin(x, mask), t)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let t = self.tracked(x);
        self.push(value, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Adjoints of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if !self.tracked(output) {
            return Gradients { grads };
        }
        grads[output.0] = Some(Array2::ones((1, 1)));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::SpMM(m, x) => self.accumulate(grads, *x, m.transpose_matmul(g)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g * *s),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &o| {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => self.accumulate(grads, *x, g * out),
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.tracked(*x) {
                    let n = g.nrows() as f64;
                    let dxhat = g * gv;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    let dx = (dxhat * n - &sum_d - xhat * &sum_dx) * &(inv_std / n);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.tracked(*x) {
                    self.accumulate(grads, *x, g * gv * inv_std);
                }
            }
            Op::SegmentSum(x, index) => {
                let cols = g.ncols();
                let d = Array2::from_shape_fn((index.len(), cols), |(i, j)| g[[index[i], j]]);
                self.accumulate(grads, *x, d);
            }
            Op::NormalizeRows(x, norms) => {
                let mut d = g.clone();
                for ((mut drow, yrow), &n) in d.rows_mut().into_iter().zip(out.rows()).zip(norms) {
                    if n > NORM_EPS {
                        let proj = yrow.dot(&drow);
                        drow.scaled_add(-proj, &yrow);
                    }
                    drow /= n;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gather(x, idx) => {
                let mut d = Array2::zeros(self.value(*x).raw_dim());
                for ((i, j), &c) in idx.indexed_iter() {
                    d[[i, c]] += g[[i, j]];
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(a, b) => {
                let split = self.value(*a).ncols();
                self.accumulate(grads, *a, g.slice(ndarray::s![.., ..split]).to_owned());
                self.accumulate(grads, *b, g.slice(ndarray::s![.., split..]).to_owned());
            }
            Op::LogSoftmaxRows(x) => {
                let mut d = g.clone();
                for (mut drow, orow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let total = drow.sum();
                    Zip::from(&mut drow).and(&orow).for_each(|d, &o| *d -= o.exp() * total);
                }
                self.accumulate(grads, *x, d);
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let mut d = Array2::zeros(xv.raw_dim());
                for (i, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let lse = out[[i, 0]];
                    let gi = g[[i, 0]];
                    Zip::from(&mut drow)
                        .and(xv.row(i))
                        .for_each(|d, &v| *d = gi * (v - lse).exp());
                }
                self.accumulate(grads, *x, d);
            }
            Op::ClampMin(x, mask) => {
                let mut d = g.clone();
                for (d, &m) in d.iter_mut().zip(mask) {
                    if m {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let s = g[[0, 0]];
                let shape = self.value(*x).raw_dim();
                self.accumulate(grads, *x, Array2::from_elem(shape, s));
            }
        }
    }
}

/// Stable `log Σ exp(v)`.
pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
