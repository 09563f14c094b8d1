use serde::{Deserialize, Serialize};

use super::autograd::ParamStore;
use super::dense::DenseMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated lazily per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<DenseMatrix>>,
    v: Vec<Option<DenseMatrix>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears all
    /// gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (idx, p) in store.iter_mut().enumerate() {
            if p.trainable {
                let (rows, cols) = p.value.shape();
                let m = self.m[idx].get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                let v = self.v[idx].get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
                let moments = m.data_mut().iter_mut().zip(v.data_mut().iter_mut());
                for ((x, &g), (mk, vk)) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(p.grad.data())
                    .zip(moments)
                {
                    *mk = beta1 * *mk + (1.0 - beta1) * g;
                    *vk = beta2 * *vk + (1.0 - beta2) * g * g;
                    let m_hat = *mk / bc1;
                    let v_hat = *vk / bc2;
                    *x -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            p.grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", DenseMatrix::from_vec(1, 3, vec![0.0, 1.0, -2.0]), true);
        store.get_mut(id).grad = DenseMatrix::from_vec(1, 3, vec![3.0, -0.5, 40.0]);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.01,
            ..Default::default()
        });
        adam.step(&mut store);
        let x = store.value(id).data();
        assert!((x[0] - (0.0 - 0.01)).abs() < 1e-9);
        assert!((x[1] - (1.0 + 0.01)).abs() < 1e-9);
        assert!((x[2] - (-2.0 - 0.01)).abs() < 1e-9);
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("x", DenseMatrix::filled(2, 2, 0.7), true);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.value(id), &DenseMatrix::filled(2, 2, 0.7));
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let mut store = ParamStore::new();
        let id = store.add("x", DenseMatrix::filled(1, 1, 1.0), false);
        store.get_mut(id).grad = DenseMatrix::filled(1, 1, 5.0);
        AdamState::new(AdamConfig::default()).step(&mut store);
        assert_eq!(store.value(id).get(0, 0), 1.0);
    }

    /// Independent scalar Adam simulation on f(x) = x².
    fn scalar_oracle(steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut xs = vec![x];
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            xs.push(x);
        }
        xs
    }

    #[test]
    fn quadratic_descent_matches_scalar_simulation() {
        let oracle = scalar_oracle(100, 0.1);
        let mut store = ParamStore::new();
        let id = store.add("x", DenseMatrix::filled(1, 1, 1.0), true);
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut xs = vec![1.0];
        for _ in 0..100 {
            let x = store.value(id).get(0, 0);
            store.get_mut(id).grad = DenseMatrix::filled(1, 1, 2.0 * x);
            adam.step(&mut store);
            xs.push(store.value(id).get(0, 0));
        }
        for (a, b) in xs.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // |x| shrinks monotonically over the approach to the minimum, and the
        // run ends far closer to 0 than it started.
        let first_cross = xs.iter().position(|&x| x <= 0.0).unwrap_or(xs.len());
        assert!(first_cross > 5);
        for w in xs[..first_cross].windows(2) {
            assert!(w[1].abs() < w[0].abs());
        }
        assert!(xs.last().unwrap().abs() < 0.2);
    }
}
