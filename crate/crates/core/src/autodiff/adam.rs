use super::AutodiffError;
use crate::matrix::Matrix;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize), config: AdamConfig) -> Self {
        Self {
            config,
            m: Matrix::zeros(shape.0, shape.1),
            v: Matrix::zeros(shape.0, shape.1),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<(), AutodiffError> {
        for other in [grad, &self.m] {
            if param.shape() != other.shape() {
                return Err(AutodiffError::Dimension {
                    op: "adam_step",
                    left: param.shape(),
                    right: other.shape(),
                });
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let p = param.as_mut_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (i, &g) in grad.as_slice().iter().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Adam over an ordered group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>, config: AdamConfig) -> Self {
        Self {
            states: params
                .into_iter()
                .map(|p| AdamState::new(p.shape(), config))
                .collect(),
        }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Updates every parameter with its gradient; both lists follow construction order.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<(), AutodiffError> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(AutodiffError::Dimension {
                op: "adam_step",
                left: (self.states.len(), 1),
                right: (params.len(), grads.len()),
            });
        }
        for ((state, param), grad) in self.states.iter_mut().zip(params).zip(grads) {
            state.step(param, grad)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let mut s = AdamState::new(p.shape(), AdamConfig::default());
        for _ in 0..5 {
            s.step(&mut p, &Matrix::zeros(1, 2)).unwrap();
        }
        assert_eq!(p.as_slice(), &[1.0, -2.0]);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = (1-β1) g, v = (1-β2) g², m̂ = g, v̂ = g², update = lr · g / (|g| + ε).
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let g = 0.3;
        let mut p = Matrix::scalar(2.0);
        let mut s = AdamState::new((1, 1), cfg);
        s.step(&mut p, &Matrix::scalar(g)).unwrap();
        let m: f64 = 0.1 * g;
        let v: f64 = 0.001 * g * g;
        let expected = 2.0 - 0.01 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((p.item() - (2.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut w = Matrix::scalar(0.0);
        let mut s = AdamState::new((1, 1), cfg);
        for _ in 0..100 {
            let grad = 2.0 * (w.item() - 3.0);
            s.step(&mut w, &Matrix::scalar(grad)).unwrap();
        }
        assert!((w.item() - 3.0).abs() < 0.1, "w = {}", w.item());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Matrix::zeros(2, 2);
        let mut s = AdamState::new((2, 2), AdamConfig::default());
        assert!(matches!(
            s.step(&mut p, &Matrix::zeros(1, 2)),
            Err(AutodiffError::Dimension { .. })
        ));
    }
}
