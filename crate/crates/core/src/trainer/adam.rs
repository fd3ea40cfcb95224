use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{invalid, shape, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("beta1", "moment decay rates must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            first: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(shape(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} states",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.first[i].len() != p.len() {
            return Err(shape(
                "adam_step",
                format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, (theta, &grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let grad = grad + cfg.weight_decay * *theta;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0, 0.5])];
        let g = vec![Tensor::from_vec(vec![3.0, -0.01, 7.0])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for ((after, before), gv) in p[0].data().iter().zip([1.0, -2.0, 0.5]).zip(g[0].data()) {
            let expected = cfg.learning_rate * gv / (gv.abs() + cfg.eps);
            assert!(((before - after) - expected).abs() < 1e-15);
        }
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn quadratic_matches_scalar_reference() {
        // Independent scalar Adam on f(x) = x^2.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            reference.push(x);
        }

        let cfg = AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let mut prev = 1.0f64;
        for expected in reference {
            let g = vec![Tensor::scalar(2.0 * p[0].data()[0])];
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            let now = p[0].data()[0];
            assert!(now.abs() < prev.abs());
            assert!((now - expected).abs() <= 1e-12);
            prev = now;
        }
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut p = vec![Tensor::from_vec(vec![2.0])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, &cfg).unwrap();
        assert!((p[0].data()[0] - (2.0 - cfg.learning_rate / (1.0 + cfg.eps))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut st, &AdamConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn updates_stay_finite(
            theta in proptest::collection::vec(-1e6f64..1e6, 1..8),
            scale in -1e12f64..1e12,
            steps in 1usize..5,
        ) {
            let mut p = vec![Tensor::from_vec(theta.clone())];
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig { weight_decay: 1e-4, ..AdamConfig::default() };
            for k in 0..steps {
                let g: Vec<f64> = theta.iter().enumerate().map(|(i, _)| scale * ((i + k) as f64).sin()).collect();
                adam_step(&mut p, &[Tensor::from_vec(g)], &mut st, &cfg).unwrap();
            }
            prop_assert!(p[0].data().iter().all(|v| v.is_finite()));
        }
    }
}
