mod common;

use ndarray::Array2;
use rand::Rng as _;
use sscdl_core::losses::{
    cond_prob, cross_entropy, distribution_divergence, divergence, nt_xent, similarity_loss,
    similarity_loss_with_temperature, total_loss, CandidateSet, CondDistConfig, CondProb, DivergenceMode,
    LossWeights, NegativeCount,
};
use sscdl_core::model::softmax_rows;
use sscdl_core::seed;

use common::*;

const TOL: f64 = 1e-10;
const BATCHES: u64 = 100;

fn batch(rng: &mut seed::Rng) -> (usize, usize) {
    (rng.random_range(2..=12), rng.random_range(2..=9))
}

#[test]
fn similarity_matches_naive_loops() {
    for b in 0..BATCHES {
        let mut rng = seed::rng(seed::derive(1, &[b]));
        let (n, d) = batch(&mut rng);
        let w = random_matrix(&mut rng, n, d);
        let p = random_matrix(&mut rng, n, d);
        let t = rng.random_range(0.1..2.0);
        assert!((similarity_loss(&w, &p).unwrap() - naive_similarity(&w, &p, 1.0)).abs() <= TOL);
        assert!((similarity_loss_with_temperature(&w, &p, t).unwrap() - naive_similarity(&w, &p, t)).abs() <= TOL);
    }
}

#[test]
fn nt_xent_matches_naive_loops() {
    for b in 0..BATCHES {
        let mut rng = seed::rng(seed::derive(2, &[b]));
        let (n, d) = batch(&mut rng);
        let u = random_matrix(&mut rng, n, d);
        let v = random_matrix(&mut rng, n, d);
        let t = rng.random_range(0.1..2.0);
        assert!((nt_xent(&u, &v, t).unwrap() - naive_nt_xent(&u, &v, t)).abs() <= TOL);
    }
}

#[test]
fn divergence_matches_naive_loops_in_both_modes() {
    for b in 0..BATCHES {
        let mut rng = seed::rng(seed::derive(3, &[b]));
        let (n, d) = batch(&mut rng);
        let h = random_matrix(&mut rng, n, d);
        let w = random_matrix(&mut rng, n, d);
        let s = random_matrix(&mut rng, n, d);
        let negatives = if b % 2 == 0 {
            NegativeCount::AllInBatch
        } else {
            NegativeCount::Fixed(rng.random_range(1..n))
        };
        let cands = CandidateSet::build(n, negatives, b).unwrap();
        for mode in [DivergenceMode::ScalarPair, DivergenceMode::FullDistribution] {
            let cfg = CondDistConfig {
                temperature: rng.random_range(0.1..2.0),
                negatives,
                mode,
                ..Default::default()
            };
            let got = divergence(&h, &w, &s, &cands, &cfg).unwrap().value;
            let want = naive_divergence(&h, &w, &s, cands.indices(), cfg.temperature, mode == DivergenceMode::FullDistribution);
            assert!((got - want).abs() <= TOL, "batch {b} {mode:?}: {got} vs {want}");
        }
    }
}

#[test]
fn per_pair_divergence_matches_batched_form() {
    for b in 0..BATCHES {
        let mut rng = seed::rng(seed::derive(4, &[b]));
        let (n, d) = batch(&mut rng);
        let h = random_matrix(&mut rng, n, d);
        let w = random_matrix(&mut rng, n, d);
        let s = random_matrix(&mut rng, n, d);
        let cands = CandidateSet::build(n, NegativeCount::AllInBatch, 0).unwrap();
        for mode in [DivergenceMode::ScalarPair, DivergenceMode::FullDistribution] {
            let cfg = CondDistConfig { mode, ..Default::default() };
            let mut weak = Vec::new();
            let mut strong = Vec::new();
            for i in 0..n {
                let idx = cands.indices().row(i).to_vec();
                let negs_w: Vec<_> = idx[1..].iter().map(|&j| w.row(j)).collect();
                let negs_s: Vec<_> = idx[1..].iter().map(|&j| s.row(j)).collect();
                weak.push(cond_prob(w.row(i), h.row(i), &negs_w, &cfg).unwrap());
                strong.push(cond_prob(s.row(i), h.row(i), &negs_s, &cfg).unwrap());
                let want = naive_conditional(&h, &w, &idx, i, cfg.temperature);
                match &weak[i] {
                    CondProb::Scalar(p) => assert!((p - want[0]).abs() <= TOL),
                    CondProb::Distribution(ps) => {
                        for (a, b) in ps.iter().zip(&want) {
                            assert!((a - b).abs() <= TOL);
                        }
                    }
                }
            }
            let pairwise = distribution_divergence(&weak, &strong).unwrap().value;
            let batched = divergence(&h, &w, &s, &cands, &cfg).unwrap().value;
            assert!((pairwise - batched).abs() <= TOL);
        }
    }
}

#[test]
fn cross_entropy_matches_naive_loops() {
    for b in 0..BATCHES {
        let mut rng = seed::rng(seed::derive(5, &[b]));
        let (n, c) = batch(&mut rng);
        let probs = softmax_rows(&(random_matrix(&mut rng, n, c) * 4.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        assert!((cross_entropy(&probs, &labels).unwrap() - naive_cross_entropy(&probs, &labels)).abs() <= TOL);
    }
}

#[test]
fn total_loss_is_weighted_sum() {
    for b in 0..BATCHES {
        let mut rng = seed::rng(seed::derive(6, &[b]));
        let (l_c, l_s, l_d): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let w = LossWeights {
            alpha: rng.random(),
            beta: rng.random(),
        };
        let want = l_c + w.alpha * l_s + w.beta * l_d;
        assert!((total_loss(l_c, l_s, l_d, &w) - want).abs() <= TOL);
    }
}

#[test]
fn worked_examples() {
    // Identical views with orthogonal rows: s_ii = 1, s_ij = 0.
    let eye = Array2::<f64>::eye(3);
    let want = -(1.0 - (2.0f64).ln());
    assert!((similarity_loss(&eye, &eye).unwrap() - want).abs() < 1e-12);
    // One-hot probabilities give zero cross entropy.
    assert_eq!(cross_entropy(&eye, &[0, 1, 2]).unwrap(), 0.0);
}
