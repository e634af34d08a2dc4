//! Probabilistic neighbourhood component analysis (PNCA).
//!
//! A deep kNN-style classifier whose embedding network carries a distribution
//! over its weights. Each input maps to a distribution in latent space, points
//! select neighbours through a kernel between those distributions, and the
//! weight distribution is represented by a particle ensemble trained with
//! kernelized functional gradient descent.
//!
//! The crate also contains the comparison models (deterministic NCA, a plain
//! softmax MLP, deep ensembles, an SVGD-trained Bayesian MLP), dataset loaders
//! for IDX/PNG/CSV inputs with rotation shift, and the confidence-binned
//! evaluation used to compare predictive uncertainty.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`numcore`] | seeded generator, Gaussian draws, random orthogonal matrices |
//! | [`nn`] | MLP forward / reverse pass, Nadam, parameter serialization |
//! | [`kernels`] | latent and parameter kernels, median heuristic, orthogonal random features |
//! | [`nca`] | selection probabilities, NCA loss, gradients, training, prediction |
//! | [`pnca`] | particle ensembles, empirical distribution kernel, functional gradient, training |
//! | [`baselines`] | softmax MLP, deep ensemble, SVGD Bayesian MLP |
//! | [`data`] | IDX / image directory / CSV loading, subsampling, rotation |
//! | [`eval`] | prediction records, confidence histograms, trial aggregation, export |

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod nca;
pub mod nn;
pub mod numcore;
pub mod pnca;

pub use data::ImageSet;
pub use error::{Error, Result};
pub use eval::ConfidenceReport;
pub use nca::{LabeledDataset, Prediction, SelectionMatrix};
pub use nn::{MlpSpec, ParamVector};
pub use numcore::Rng;
pub use pnca::{KernelPath, ParticleEnsemble};
