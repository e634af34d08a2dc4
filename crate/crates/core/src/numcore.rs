//! Deterministic random numbers.
//!
//! All randomness in the crate flows from [`Rng`], a ChaCha8 stream cipher
//! generator (`rand_chacha::ChaCha8Rng`) keyed by a 64-bit seed through
//! `SeedableRng::seed_from_u64`. ChaCha8 output is specified by its algorithm
//! and is identical across platforms, so a seed pins every sample.
//!
//! Gaussian draws use the ziggurat sampler of `rand_distr::StandardNormal`
//! (value-stable within the pinned `rand_distr` minor version).
//!
//! Independent streams are derived from a root seed with [`sub_seed`], a
//! SplitMix64 finalizer over `root ^ mix(stream)`.

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent stream `stream` under `root`.
pub fn sub_seed(root: u64, stream: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream))
}

/// Seeded generator. Single owner; clone to fork an identical stream.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for stream `stream` of this generator's root seed. Does not
    /// advance `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(sub_seed(self.seed, stream))
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        // 53 random mantissa bits
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::new(seed)
}

/// `rows × cols` matrix of i.i.d. Normal(mean, std²) draws, filled row-major.
pub fn gaussian_sample(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
) -> Result<Array2<f64>> {
    if !(std.is_finite() && std >= 0.0) {
        return Err(Error::invalid(format!(
            "gaussian std must be finite and >= 0, got {std}"
        )));
    }
    if !mean.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian mean must be finite, got {mean}"
        )));
    }
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        mean + std * rng.standard_normal()
    }))
}

/// Haar-random orthogonal matrix.
///
/// Orthogonalizes the columns of a Gaussian matrix by modified Gram-Schmidt
/// with one re-orthogonalization pass. Each column is normalized to a positive
/// norm, which is the positive-diagonal-R convention of the QR factorization,
/// so the result is a deterministic function of the Gaussian draw.
pub fn random_orthogonal(rng: &mut Rng, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::invalid("orthogonal matrix dimension must be >= 1"));
    }
    let g = gaussian_sample(rng, dim, dim, 0.0, 1.0)?;
    // work on columns stored as rows of the transpose
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|j| g.column(j).to_vec()).collect();
    for j in 0..dim {
        let (done, rest) = cols.split_at_mut(j);
        let v = &mut rest[0];
        for _pass in 0..2 {
            for q in done.iter() {
                let proj: f64 = q.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= proj * qi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 1e-300 {
            return Err(Error::Numeric(
                "rank-deficient Gaussian draw in random_orthogonal".into(),
            ));
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
    }
    Ok(Array2::from_shape_fn((dim, dim), |(i, j)| cols[j][i]))
}
