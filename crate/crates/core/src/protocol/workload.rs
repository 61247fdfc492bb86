//! Local training stand-ins: seeded synthetic update vectors and a small
//! logistic-regression trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Synthetic(SyntheticUpdates),
    Toy(ToyTrainer),
}

impl Workload {
    /// The locally trained model `w_k^t` starting from `global`.
    pub fn local_model(&self, client_id: u64, round: u64, global: &[f64]) -> Vec<f64> {
        match self {
            Workload::Synthetic(s) => s.local_model(client_id, round, global),
            Workload::Toy(t) => t.train(global),
        }
    }
}

/// `w_k^t = w^{t-1} + delta` with `delta` uniform in `[-spread, spread]`,
/// drawn from `(seed, client, round)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUpdates {
    pub seed: Vec<u8>,
    pub spread: f64,
}

impl SyntheticUpdates {
    pub fn delta(&self, client_id: u64, round: u64, dim: usize) -> Vec<f64> {
        let mut label = String::from("synthetic-update/");
        label.push_str(&client_id.to_string());
        let mut rng = ChaCha20Rng::from_seed(derive_seed(&self.seed, &label, round));
        (0..dim)
            .map(|_| rng.gen_range(-self.spread..=self.spread))
            .collect()
    }

    pub fn local_model(&self, client_id: u64, round: u64, global: &[f64]) -> Vec<f64> {
        global
            .iter()
            .zip(self.delta(client_id, round, global.len()))
            .map(|(w, d)| w + d)
            .collect()
    }
}

/// Binary logistic regression trained with minibatch SGD. The model is
/// `[weights..., bias]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainer {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl ToyTrainer {
    /// Two Gaussian blobs centred at `+mu` and `-mu` (unit variance), with
    /// the client's share drawn from `seed`.
    pub fn gaussian_blobs(seed: &[u8], client_id: u64, samples: usize, dim: usize) -> Self {
        let label = format!("toy-data/{client_id}");
        let mut rng = ChaCha20Rng::from_seed(derive_seed(seed, &label, 0));
        let noise = Normal::new(0.0, 1.0).expect("unit normal");
        let mut features = Vec::with_capacity(samples);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let y: bool = rng.gen();
            let centre = if y { 1.0 } else { -1.0 };
            features.push((0..dim).map(|_| centre + noise.sample(&mut rng)).collect());
            labels.push(if y { 1.0 } else { 0.0 });
        }
        Self {
            features,
            labels,
            learning_rate: 0.01,
            epochs: 5,
            batch_size: 10,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len) + 1
    }

    fn predict(model: &[f64], x: &[f64]) -> f64 {
        let (w, b) = model.split_at(model.len() - 1);
        let z: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b[0];
        1.0 / (1.0 + (-z).exp())
    }

    pub fn train(&self, start: &[f64]) -> Vec<f64> {
        let mut model = start.to_vec();
        let d = model.len() - 1;
        for _ in 0..self.epochs {
            for batch in (0..self.features.len())
                .collect::<Vec<_>>()
                .chunks(self.batch_size)
            {
                let mut grad = vec![0.0; d + 1];
                for &i in batch {
                    let err = Self::predict(&model, &self.features[i]) - self.labels[i];
                    for (g, x) in grad.iter_mut().zip(&self.features[i]) {
                        *g += err * x;
                    }
                    grad[d] += err;
                }
                let scale = self.learning_rate / batch.len() as f64;
                for (w, g) in model.iter_mut().zip(&grad) {
                    *w -= scale * g;
                }
            }
        }
        model
    }

    pub fn accuracy(&self, model: &[f64]) -> f64 {
        let correct = self
            .features
            .iter()
            .zip(&self.labels)
            .filter(|(x, &y)| (Self::predict(model, x) >= 0.5) == (y == 1.0))
            .count();
        correct as f64 / self.features.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_deltas_are_bounded_and_seeded() {
        let s = SyntheticUpdates {
            seed: b"s".to_vec(),
            spread: 0.5,
        };
        let a = s.delta(3, 1, 100);
        assert!(a.iter().all(|v| v.abs() <= 0.5));
        assert_eq!(a, s.delta(3, 1, 100));
        assert_ne!(a, s.delta(3, 2, 100));
        assert_ne!(a, s.delta(4, 1, 100));
    }

    #[test]
    fn trainer_learns_separable_blobs() {
        let t = ToyTrainer::gaussian_blobs(b"toy", 1, 200, 4);
        assert_eq!(t.model_dim(), 5);
        let zero = vec![0.0; 5];
        let mut model = zero.clone();
        for _ in 0..10 {
            model = t.train(&model);
        }
        assert!(t.accuracy(&model) > 0.9, "accuracy {}", t.accuracy(&model));
        assert_eq!(t.train(&zero), t.train(&zero));
    }
}
