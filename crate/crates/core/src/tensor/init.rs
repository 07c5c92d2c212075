use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Normal with standard deviation `fan_in^(-1/2)`.
    FanInNormal {
        fan_in: usize,
    },
    StandardNormal,
    Zeros,
    Ones,
}

impl InitScheme {
    /// Fan-in normal where the fan-in is every axis but the last (weights laid out `[..., in, out]`).
    pub fn fan_in_for(shape: &[usize]) -> Self {
        let fan_in = shape[..shape.len().saturating_sub(1)]
            .iter()
            .product::<usize>()
            .max(1);
        Self::FanInNormal { fan_in }
    }
}

/// Deterministic initialization: identical `(shape, scheme, seed)` give bit-identical tensors.
pub fn seeded_init(shape: &[usize], scheme: InitScheme, seed: u64) -> Tensor {
    match scheme {
        InitScheme::Zeros => Tensor::zeros(shape),
        InitScheme::Ones => Tensor::filled(shape, 1.0),
        InitScheme::StandardNormal => normal(shape, 1.0, seed),
        InitScheme::FanInNormal { fan_in } => {
            normal(shape, (fan_in.max(1) as f64).powf(-0.5), seed)
        }
    }
}

fn normal(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = z * std;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_ones() {
        assert!(seeded_init(&[3, 4], InitScheme::Zeros, 1)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(seeded_init(&[3, 4], InitScheme::Ones, 1)
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = seeded_init(&[5, 7], InitScheme::FanInNormal { fan_in: 5 }, 42);
        let b = seeded_init(&[5, 7], InitScheme::FanInNormal { fan_in: 5 }, 42);
        let c = seeded_init(&[5, 7], InitScheme::FanInNormal { fan_in: 5 }, 43);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, c);
    }

    #[test]
    fn fan_in_normal_std_within_two_percent() {
        let fan_in = 64;
        let t = seeded_init(&[1000, 1000], InitScheme::FanInNormal { fan_in }, 7);
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = (fan_in as f64).powf(-0.5);
        assert!((var.sqrt() - expect).abs() / expect < 0.02);
    }

    #[test]
    fn fan_in_from_shape() {
        assert_eq!(
            InitScheme::fan_in_for(&[3, 3, 16, 32]),
            InitScheme::FanInNormal { fan_in: 144 }
        );
        assert_eq!(
            InitScheme::fan_in_for(&[8]),
            InitScheme::FanInNormal { fan_in: 1 }
        );
    }
}
