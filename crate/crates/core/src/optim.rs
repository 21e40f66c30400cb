//! Adaptive-moment (Adam) updates over a list of dense tensors.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros_like(tensors: &[Array2<f64>]) -> Self {
        Self {
            m: tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            v: tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    moments: &mut AdamMoments,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(Error::DimensionMismatch {
            context: "optimizer tensors".into(),
            expected: params.len(),
            found: grads.len(),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != moments.m[i].dim() {
            return Err(Error::shape(format!(
                "optimizer tensor {i}: parameter {:?}, gradient {:?}",
                p.dim(),
                g.dim()
            )));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of tensor {i}")));
        }
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    moments.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(moments.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(moments.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut p = vec![array![[1.0, -2.0]]];
        let mut mom = AdamMoments::zeros_like(&p);
        mom.m[0] = array![[0.5, 0.5]];
        mom.v[0] = array![[0.25, 0.25]];
        let before = p.clone();
        let mut fresh = AdamMoments::zeros_like(&p);
        step(&mut p, &[array![[0.0, 0.0]]], &mut fresh, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        step(&mut p, &[array![[0.0, 0.0]]], &mut mom, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(mom.m[0], array![[0.45, 0.45]]);
        assert!((mom.v[0][[0, 0]] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn lr_zero_keeps_params() {
        let mut p = vec![array![[1.0, -2.0]]];
        let mut mom = AdamMoments::zeros_like(&p);
        step(&mut p, &[array![[3.0, -1.0]]], &mut mom, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![array![[1.0, -2.0]]]);
    }

    #[test]
    fn constant_gradient_moves_at_lr() {
        let mut p = vec![array![[0.0, 0.0]]];
        let mut mom = AdamMoments::zeros_like(&p);
        let g = [array![[2.5, -0.1]]];
        let lr = 1e-3;
        let mut last = p[0].clone();
        for _ in 0..2000 {
            step(&mut p, &g, &mut mom, lr, &AdamConfig::default()).unwrap();
            let delta = &p[0] - &last;
            last = p[0].clone();
            assert!(delta[[0, 0]] < 0.0 && delta[[0, 1]] > 0.0);
            for d in delta.iter() {
                assert!((d.abs() - lr).abs() < lr * 1e-3);
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![array![[0.0]]];
        let mut mom = AdamMoments::zeros_like(&p);
        let r = step(&mut p, &[array![[f64::NAN]]], &mut mom, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
