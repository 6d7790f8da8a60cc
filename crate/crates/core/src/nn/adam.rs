use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. `params`, `grads` and `names` are parallel lists;
    /// accumulators are allocated on the first call and must keep their shapes.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], names: &[String]) -> Result<()> {
        if params.len() != grads.len() || params.len() != names.len() {
            return Err(Error::structural("adam: parameter, gradient and name lists differ in length"));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.len() != g.len() {
                return Err(Error::structural(format!(
                    "adam: `{name}` has {} values but gradient has {}",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { param: name.clone() });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() || self.first.iter().zip(&params).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::structural("adam: parameter shapes changed between steps"));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(0.1);
        let mut p = vec![1.0, -2.0];
        adam.update(vec![&mut p], &[&[0.0, 0.0]], &names(1)).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn moves_against_gradient() {
        let mut adam = AdamState::new(0.01);
        let mut p = vec![0.0];
        for _ in 0..100 {
            adam.update(vec![&mut p], &[&[0.7]], &names(1)).unwrap();
        }
        assert!(p[0] < -0.5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut adam = AdamState::new(0.05);
        let mut w = vec![0.0];
        for _ in 0..500 {
            let g = 2.0 * (w[0] - 3.0);
            adam.update(vec![&mut w], &[&[g]], &names(1)).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 0.01, "{}", w[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut adam = AdamState::new(0.1);
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        let err = adam
            .update(vec![&mut a, &mut b], &[&[0.0], &[f64::NAN]], &names(2))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref param } if param == "p1"));
    }
}
