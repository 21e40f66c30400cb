//! Training objectives.
//!
//! Each batched loss exists as a tape builder (`*_node`) used during
//! training, and as a plain function over matrices that evaluates the same
//! builder on constants. Per-sample helpers ([`cosine_sim`], [`cond_prob`],
//! [`distribution_divergence`]) work on plain vectors.

use std::rc::Rc;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{Error, Result};
use crate::seed;

/// Floor applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// How many negatives each anchor sees in the conditional distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCount {
    /// Every other graph in the batch (`K = n_g − 1`).
    AllInBatch,
    /// A seeded uniform subset of this size.
    Fixed(usize),
}

/// Which reading of the divergence between conditional distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// `−p(h^w|h) · log p(h^s|h)` on the positive candidate only.
    ScalarPair,
    /// Cross-entropy between the full candidate distributions.
    FullDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondDistConfig {
    pub temperature: f64,
    pub negatives: NegativeCount,
    pub mode: DivergenceMode,
    /// Temperature inside the similarity loss. The loss is defined without
    /// one, which is the default of 1.
    pub similarity_temperature: f64,
}

impl Default for CondDistConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            negatives: NegativeCount::AllInBatch,
            mode: DivergenceMode::ScalarPair,
            similarity_temperature: 1.0,
        }
    }
}

impl CondDistConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.similarity_temperature > 0.0 && self.similarity_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "similarity temperature must be positive, got {}",
                self.similarity_temperature
            )));
        }
        if self.negatives == NegativeCount::Fixed(0) {
            return Err(Error::Config("fixed negative count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Trade-off weights of the composite objective `L_c + α·L_s + β·L_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_sim".into(),
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Conditional probability of an augmented embedding given its original.
#[derive(Debug, Clone, PartialEq)]
pub enum CondProb {
    /// Probability of the positive candidate.
    Scalar(f64),
    /// Normalized distribution over `[positive, negative_1, .., negative_K]`.
    Distribution(Vec<f64>),
}

impl CondProb {
    pub fn positive(&self) -> f64 {
        match self {
            CondProb::Scalar(p) => *p,
            CondProb::Distribution(d) => d[0],
        }
    }
}

/// `exp(sim(h_aug_i, h_i)/τ) / T` with
/// `T = exp(sim(h_aug_i, h_i)/τ) + Σ_k exp(sim(h_k^aug, h_i)/τ)`.
pub fn cond_prob(
    h_aug_i: ArrayView1<f64>,
    h_i: ArrayView1<f64>,
    negatives: &[ArrayView1<f64>],
    cfg: &CondDistConfig,
) -> Result<CondProb> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(Error::EmptyInput("conditional distribution needs at least one negative".into()));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_sim(h_aug_i, h_i)? / cfg.temperature);
    for neg in negatives {
        logits.push(cosine_sim(*neg, h_i)? / cfg.temperature);
    }
    let lse = log_sum_exp(logits.iter().copied());
    Ok(match cfg.mode {
        DivergenceMode::ScalarPair => CondProb::Scalar((logits[0] - lse).exp()),
        DivergenceMode::FullDistribution => {
            CondProb::Distribution(logits.iter().map(|l| (l - lse).exp()).collect())
        }
    })
}

/// Value of the divergence together with the number of clamped
/// probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub clamped: usize,
}

/// `−(1/n) Σ_i p_w · log p_s`, per-pair or summed over candidates depending
/// on the variant of the inputs. Strong probabilities are floored at
/// [`PROB_EPS`].
pub fn distribution_divergence(weak: &[CondProb], strong: &[CondProb]) -> Result<Divergence> {
    if weak.len() != strong.len() {
        return Err(Error::DimensionMismatch {
            context: "distribution_divergence".into(),
            expected: weak.len(),
            found: strong.len(),
        });
    }
    if weak.is_empty() {
        return Err(Error::EmptyInput("divergence over zero graphs".into()));
    }
    let mut clamped = 0;
    let mut log_floor = |p: f64| {
        if p < PROB_EPS {
            clamped += 1;
            PROB_EPS.ln()
        } else {
            p.ln()
        }
    };
    let mut total = 0.0;
    for (w, s) in weak.iter().zip(strong) {
        match (w, s) {
            (CondProb::Scalar(pw), CondProb::Scalar(ps)) => total += pw * log_floor(*ps),
            (CondProb::Distribution(pw), CondProb::Distribution(ps)) => {
                if pw.len() != ps.len() {
                    return Err(Error::DimensionMismatch {
                        context: "distribution_divergence candidates".into(),
                        expected: pw.len(),
                        found: ps.len(),
                    });
                }
                total += pw.iter().zip(ps).map(|(a, b)| a * log_floor(*b)).sum::<f64>();
            }
            _ => return Err(Error::Config("mixed conditional-probability modes".into())),
        }
    }
    if clamped > 0 {
        log::warn!("clamped {clamped} strong-view probabilities at {PROB_EPS}");
    }
    Ok(Divergence {
        value: -total / weak.len() as f64,
        clamped,
    })
}

/// Candidate indices per anchor: column 0 is the anchor itself (positive),
/// the remaining `K` columns are negatives drawn from the other rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet(Rc<Array2<usize>>);

impl CandidateSet {
    pub fn build(n: usize, negatives: NegativeCount, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Precondition(format!(
                "conditional distributions need at least 2 graphs, got {n}"
            )));
        }
        let k = match negatives {
            NegativeCount::AllInBatch => n - 1,
            NegativeCount::Fixed(k) if k >= 1 && k < n => k,
            NegativeCount::Fixed(k) => {
                return Err(Error::Precondition(format!(
                    "cannot draw {k} negatives from a batch of {n}"
                )))
            }
        };
        let mut idx = Array2::zeros((n, k + 1));
        let mut rng = seed::rng(seed);
        for i in 0..n {
            idx[[i, 0]] = i;
            let others = (0..n).filter(|&j| j != i);
            if k == n - 1 {
                for (c, j) in others.enumerate() {
                    idx[[i, c + 1]] = j;
                }
            } else {
                let mut picks: Vec<usize> = sample(&mut rng, n - 1, k).into_iter().collect();
                picks.sort_unstable();
                for (c, p) in picks.into_iter().enumerate() {
                    idx[[i, c + 1]] = if p < i { p } else { p + 1 };
                }
            }
        }
        Ok(Self(Rc::new(idx)))
    }

    pub fn indices(&self) -> &Array2<usize> {
        &self.0
    }

    pub fn negatives_per_anchor(&self) -> usize {
        self.0.ncols() - 1
    }
}

/// Indices `[0..n] \ {i}` for each row `i`.
fn off_diagonal(n: usize) -> Rc<Array2<usize>> {
    Rc::new(Array2::from_shape_fn((n, n - 1), |(i, c)| if c < i { c } else { c + 1 }))
}

fn diagonal(n: usize) -> Rc<Array2<usize>> {
    Rc::new(Array2::from_shape_fn((n, 1), |(i, _)| i))
}

/// `S[i][j] = cos(a_i, b_j) / t`.
fn scaled_cosine(tape: &mut Tape, a: Var, b: Var, t: f64) -> Var {
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let s = tape.matmul_t(an, bn);
    if t == 1.0 {
        s
    } else {
        tape.scale(s, 1.0 / t)
    }
}

/// Log conditional probabilities `log p(h_c^aug | h_i)` over the candidate
/// columns, shape `n × (K + 1)`.
pub fn conditional_log_probs_node(
    tape: &mut Tape,
    original: Var,
    augmented: Var,
    candidates: &CandidateSet,
    temperature: f64,
) -> Var {
    let s = scaled_cosine(tape, original, augmented, temperature);
    let picked = tape.gather(s, candidates.0.clone());
    tape.log_softmax_rows(picked)
}

/// Divergence between the weak-view and strong-view conditional
/// distributions given the original embeddings. Both distributions use the
/// same candidate indices; negatives come from the respective view.
pub fn divergence_node(
    tape: &mut Tape,
    original: Var,
    weak: Var,
    strong: Var,
    candidates: &CandidateSet,
    cfg: &CondDistConfig,
) -> Var {
    let n = tape.value(original).nrows() as f64;
    let log_w = conditional_log_probs_node(tape, original, weak, candidates, cfg.temperature);
    let log_s = conditional_log_probs_node(tape, original, strong, candidates, cfg.temperature);
    let log_s = tape.clamp_min(log_s, PROB_EPS.ln());
    let (log_w, log_s) = match cfg.mode {
        DivergenceMode::ScalarPair => {
            let first = Rc::new(Array2::zeros((log_w_rows(tape, log_w), 1)));
            (tape.gather(log_w, first.clone()), tape.gather(log_s, first))
        }
        DivergenceMode::FullDistribution => (log_w, log_s),
    };
    let p_w = tape.exp(log_w);
    let prod = tape.mul(p_w, log_s);
    let total = tape.sum(prod);
    tape.scale(total, -1.0 / n)
}

fn log_w_rows(tape: &Tape, v: Var) -> usize {
    tape.value(v).nrows()
}

/// Cross-view similarity loss
/// `−(1/n) Σ_i [ s_ii − log Σ_{j≠i} exp(s_ij) ]`, `s_ij = cos(p_i^w, p_j)/t`.
pub fn similarity_loss_node(tape: &mut Tape, weak_proj: Var, proj: Var, temperature: f64) -> Var {
    let n = tape.value(proj).nrows();
    let s = scaled_cosine(tape, weak_proj, proj, temperature);
    let pos = tape.gather(s, diagonal(n));
    let neg = tape.gather(s, off_diagonal(n));
    let lse = tape.log_sum_exp_rows(neg);
    let diff = tape.sub(lse, pos);
    tape.mean(diff)
}

/// NT-Xent with cross-view and intra-view negatives for anchors `u_i`.
pub fn nt_xent_node(tape: &mut Tape, u: Var, v: Var, temperature: f64) -> Var {
    let n = tape.value(u).nrows();
    let s_uv = scaled_cosine(tape, u, v, temperature);
    let s_uu = scaled_cosine(tape, u, u, temperature);
    let pos = tape.gather(s_uv, diagonal(n));
    let intra = tape.gather(s_uu, off_diagonal(n));
    let all = tape.concat_cols(s_uv, intra);
    let lse = tape.log_sum_exp_rows(all);
    let diff = tape.sub(lse, pos);
    tape.mean(diff)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits`.
pub fn cross_entropy_logits_node(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let logp = tape.log_softmax_rows(logits);
    let logp = tape.clamp_min(logp, PROB_EPS.ln());
    let idx = Rc::new(Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i]));
    let picked = tape.gather(logp, idx);
    let m = tape.mean(picked);
    tape.scale(m, -1.0)
}

fn check_pair(context: &str, a: &Array2<f64>, b: &Array2<f64>, min_rows: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{context}: operand shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() < min_rows {
        return Err(Error::Precondition(format!(
            "{context} needs at least {min_rows} rows, got {}",
            a.nrows()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{context} input")));
    }
    Ok(())
}

fn check_nonzero_rows(context: &str, m: &Array2<f64>) -> Result<()> {
    if m.rows().into_iter().any(|r| r.iter().all(|&v| v == 0.0)) {
        log::debug!("{context}: zero row");
        return Err(Error::ZeroVector);
    }
    Ok(())
}

pub fn similarity_loss(weak_proj: &Array2<f64>, proj: &Array2<f64>) -> Result<f64> {
    similarity_loss_with_temperature(weak_proj, proj, 1.0)
}

pub fn similarity_loss_with_temperature(
    weak_proj: &Array2<f64>,
    proj: &Array2<f64>,
    temperature: f64,
) -> Result<f64> {
    check_pair("similarity_loss", weak_proj, proj, 2)?;
    check_nonzero_rows("similarity_loss", weak_proj)?;
    check_nonzero_rows("similarity_loss", proj)?;
    let mut tape = Tape::new();
    let w = tape.constant(weak_proj.clone());
    let p = tape.constant(proj.clone());
    let l = similarity_loss_node(&mut tape, w, p, temperature);
    Ok(tape.scalar(l))
}

pub fn nt_xent(u: &Array2<f64>, v: &Array2<f64>, temperature: f64) -> Result<f64> {
    check_pair("nt_xent", u, v, 2)?;
    check_nonzero_rows("nt_xent", u)?;
    check_nonzero_rows("nt_xent", v)?;
    if temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let vv = tape.constant(v.clone());
    let l = nt_xent_node(&mut tape, uv, vv, temperature);
    Ok(tape.scalar(l))
}

/// Batched divergence on graph-level embeddings.
pub fn divergence(
    original: &Array2<f64>,
    weak: &Array2<f64>,
    strong: &Array2<f64>,
    candidates: &CandidateSet,
    cfg: &CondDistConfig,
) -> Result<Divergence> {
    cfg.validate()?;
    check_pair("divergence", original, weak, 2)?;
    check_pair("divergence", original, strong, 2)?;
    if candidates.indices().nrows() != original.nrows() {
        return Err(Error::DimensionMismatch {
            context: "divergence candidates".into(),
            expected: original.nrows(),
            found: candidates.indices().nrows(),
        });
    }
    for m in [original, weak, strong] {
        check_nonzero_rows("divergence", m)?;
    }
    let mut tape = Tape::new();
    let h = tape.constant(original.clone());
    let w = tape.constant(weak.clone());
    let s = tape.constant(strong.clone());
    let l = divergence_node(&mut tape, h, w, s, candidates, cfg);
    Ok(Divergence {
        value: tape.scalar(l),
        clamped: tape.clamp_hits(),
    })
}

/// `−(1/n) Σ_i log p_{i, y_i}` with probabilities floored at [`PROB_EPS`].
pub fn cross_entropy(class_probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if class_probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "cross_entropy".into(),
            expected: class_probs.nrows(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("cross entropy over zero graphs".into()));
    }
    let mut total = 0.0;
    for (row, &y) in class_probs.rows().into_iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Integrity(format!(
                "label {y} outside [0, {})",
                row.len()
            )));
        }
        total += row[y].max(PROB_EPS).ln();
    }
    Ok(-total / labels.len() as f64)
}

/// `L_c + α·L_s + β·L_d`.
pub fn total_loss(l_c: f64, l_s: f64, l_d: f64, weights: &LossWeights) -> f64 {
    l_c + weights.alpha * l_s + weights.beta * l_d
}

/// Outcome of checking the divergence lower bound on synthetic
/// embeddings whose negatives are orthogonal to the anchor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub temperature: f64,
    pub negatives: usize,
    /// `e^{1/τ} − 1`.
    pub threshold: f64,
    /// `log(K + 1) − 1/τ`.
    pub bound: f64,
    pub trials: usize,
    pub seed: u64,
    /// `−log p(h^s|h) − bound` per trial.
    pub margins: Vec<f64>,
    pub min_margin: f64,
    /// Whether every per-sample margin is nonnegative.
    pub holds: bool,
    /// Scalar-pair divergence over all trials treated as one batch.
    pub scalar_pair_value: f64,
    /// Whether the scalar-pair value clears the bound; observed only.
    pub scalar_pair_holds: bool,
}

/// Unit vector at angle `acos(cos)` from `e_0` inside the `e_0, e_1` plane.
fn at_similarity(dim: usize, cos: f64) -> ndarray::Array1<f64> {
    let mut v = ndarray::Array1::zeros(dim);
    v[0] = cos;
    v[1] = (1.0 - cos * cos).max(0.0).sqrt();
    v
}

pub fn theorem1_check(temperature: f64, negatives: usize, trials: usize, seed: u64) -> Result<BoundReport> {
    use rand::Rng;
    use rand_distr::StandardNormal;

    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let threshold = (1.0 / temperature).exp() - 1.0;
    let required = threshold.ceil().max(1.0) as usize;
    if negatives < required {
        return Err(Error::Precondition(format!(
            "K = {negatives} is below the threshold e^(1/tau) - 1 = {threshold:.4} (need K >= {required})"
        )));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let bound = ((negatives + 1) as f64).ln() - 1.0 / temperature;
    let cfg = CondDistConfig {
        temperature,
        negatives: NegativeCount::Fixed(negatives),
        mode: DivergenceMode::ScalarPair,
        similarity_temperature: 1.0,
    };
    // Axes 0 and 1 hold the anchor and positives; negatives live in the
    // orthogonal complement.
    let dim = 8;
    let mut rng = seed::rng(seed);
    let anchor = at_similarity(dim, 1.0);
    let mut margins = Vec::with_capacity(trials);
    let mut weak_probs = Vec::with_capacity(trials);
    let mut strong_probs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let negs: Vec<ndarray::Array1<f64>> = (0..negatives)
            .map(|_| loop {
                let mut v = ndarray::Array1::zeros(dim);
                for x in v.iter_mut().skip(2) {
                    *x = rng.sample(StandardNormal);
                }
                if v.dot(&v) > 1e-6 {
                    break v;
                }
            })
            .collect();
        let views: Vec<_> = negs.iter().map(|v| v.view()).collect();
        let strong = at_similarity(dim, rng.random_range(-1.0..=1.0));
        let weak = at_similarity(dim, rng.random_range(-1.0..=1.0));
        let p_s = cond_prob(strong.view(), anchor.view(), &views, &cfg)?;
        let p_w = cond_prob(weak.view(), anchor.view(), &views, &cfg)?;
        margins.push(-p_s.positive().ln() - bound);
        strong_probs.push(p_s);
        weak_probs.push(p_w);
    }
    let min_margin = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let scalar = distribution_divergence(&weak_probs, &strong_probs)?.value;
    Ok(BoundReport {
        temperature,
        negatives,
        threshold,
        bound,
        trials,
        seed,
        margins,
        min_margin,
        holds: min_margin >= 0.0,
        scalar_pair_value: scalar,
        scalar_pair_holds: scalar >= bound,
    })
}
