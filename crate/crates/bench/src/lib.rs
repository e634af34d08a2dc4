//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use pnca_core::numcore::{gaussian_sample, Rng};
use pnca_core::{LabeledDataset, MlpSpec, ParticleEnsemble};

/// A 784-200-200-`out` network, the shape used on MNIST.
pub fn mnist_spec(out: usize) -> MlpSpec {
    MlpSpec::new(vec![784, 200, 200, out]).expect("valid spec")
}

/// `n` random MNIST-sized inputs with labels cycling over ten classes.
pub fn random_dataset(n: usize, seed: u64) -> LabeledDataset {
    let x = gaussian_sample(&mut Rng::new(seed), n, 784, 0.0, 1.0).expect("valid shape");
    LabeledDataset::new(x, (0..n).map(|i| i % 10).collect(), 10).expect("valid dataset")
}

pub fn random_ensemble(spec: &MlpSpec, m: usize, seed: u64) -> ParticleEnsemble {
    ParticleEnsemble::init(spec, m, &mut Rng::new(seed)).expect("valid ensemble")
}

pub fn random_inputs(n: usize, dim: usize, seed: u64) -> Array2<f64> {
    gaussian_sample(&mut Rng::new(seed), n, dim, 0.0, 1.0).expect("valid shape")
}
