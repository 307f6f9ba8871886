use super::tensor::{NamedTensors, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters. The defaults for betas, epsilon and decay are
/// configuration choices; only the learning rate follows the prompt recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad optimizer config {self:?}")))
        }
    }
}

/// Moment estimates for bias-corrected AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    config: AdamConfig,
    step: u64,
    first_moment: NamedTensors,
    second_moment: NamedTensors,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first_moment: NamedTensors::new(),
            second_moment: NamedTensors::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &NamedTensors {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &NamedTensors {
        &self.second_moment
    }

    /// Applies one update to `params` in place. Every parameter needs a
    /// gradient of matching shape; non-finite gradients are rejected before
    /// anything is modified.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);

        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let mut m_data = m.data().to_vec();
            let mut v_data = v.data().to_vec();
            let mut p_data = p.data().to_vec();
            for i in 0..p_data.len() {
                m_data[i] = beta1 * m_data[i] + (1.0 - beta1) * g[i];
                v_data[i] = beta2 * v_data[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m_data[i] / bias1;
                let v_hat = v_data[i] / bias2;
                p_data[i] -= lr * weight_decay * p_data[i];
                p_data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            let shape = grads[name].shape().to_vec();
            *m = Tensor::new(shape.clone(), m_data)?;
            *v = Tensor::new(shape.clone(), v_data)?;
            *p = Tensor::new(shape, p_data).map_err(|_| Error::NonFinite(format!("update of `{name}`")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> NamedTensors {
        let mut m = NamedTensors::new();
        m.insert(name.into(), Tensor::vector(vec![v]).unwrap());
        m
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut state = OptimizerState::new(AdamConfig::default()).unwrap();
        let mut params = single("p", 0.0);
        state.step(&mut params, &single("p", 1.0)).unwrap();
        // m̂ = g, v̂ = g², so Δ = -lr · g / (|g| + ε)
        let expected = -5e-4 * 1.0 / (1.0 + 1e-8);
        assert!((params["p"].data()[0] - expected).abs() < 1e-18);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = OptimizerState::new(AdamConfig::default()).unwrap();
        let mut params = single("p", 0.75);
        for _ in 0..3 {
            state.step(&mut params, &single("p", 0.0)).unwrap();
        }
        assert_eq!(params["p"].data(), &[0.75]);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut state = OptimizerState::new(cfg).unwrap();
        let mut params = single("p", 2.0);
        state.step(&mut params, &single("p", 0.0)).unwrap();
        assert!((params["p"].data()[0] - (2.0 - 5e-4 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_and_missing_gradients() {
        let mut state = OptimizerState::new(AdamConfig::default()).unwrap();
        let mut params = single("p", 1.0);
        let bad = NamedTensors::from([(
            "p".to_string(),
            Tensor::from_parts(vec![1], vec![f64::NAN]),
        )]);
        assert!(matches!(state.step(&mut params, &bad), Err(Error::NonFinite(_))));
        assert_eq!(params["p"].data(), &[1.0]);
        assert_eq!(state.step_count(), 0);
        assert!(state.step(&mut params, &NamedTensors::new()).is_err());
    }

    #[test]
    fn deterministic_runs_match_bitwise() {
        let run = || {
            let mut state = OptimizerState::new(AdamConfig::default()).unwrap();
            let mut params = single("p", 0.3);
            for i in 0..50 {
                let g = single("p", (i as f64 * 0.37).sin());
                state.step(&mut params, &g).unwrap();
            }
            (params, state)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert!(p1["p"].bitwise_eq(&p2["p"]));
        assert_eq!(s1, s2);
    }
}
