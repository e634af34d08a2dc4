//! Softmax baselines on the shared MLP core: a single network trained by
//! minibatch cross-entropy, a deep ensemble of such networks, and a Bayesian
//! network whose posterior is approximated by SVGD particles.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{median_gram, param_gram, Bandwidth};
use crate::nca::{LabeledDataset, Prediction};
use crate::nn::{self, init_params, MlpSpec, NadamState, ParamVector};
use crate::numcore::Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl SoftmaxClassifier {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                spec.param_count()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Prediction> {
        predict_softmax(&self.spec, std::slice::from_ref(&self.params), x)
    }
}

/// SVGD particles approximating the weight posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnEnsemble {
    pub spec: MlpSpec,
    pub particles: Vec<ParamVector>,
    pub prior_std: f64,
}

impl BnnEnsemble {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Prediction> {
        predict_softmax(&self.spec, &self.particles, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DnnConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.001,
            batch_size: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnnConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub particles: usize,
    /// Standard deviation of the isotropic Gaussian prior. `f64::INFINITY`
    /// switches the prior off.
    pub prior_std: f64,
    pub seed: u64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.001,
            batch_size: 20,
            particles: 20,
            prior_std: 1.0,
            seed: 0,
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let total = row.sum();
        row /= total;
    }
    p
}

/// Mean cross-entropy of a batch and its gradient.
pub fn xent_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    x: ArrayView2<'_, f64>,
    y: &[usize],
) -> Result<(f64, ParamVector)> {
    let b = x.nrows();
    if b == 0 || y.len() != b {
        return Err(Error::invalid(format!(
            "batch has {b} rows and {} labels",
            y.len()
        )));
    }
    let classes = spec.output_dim();
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} outputs"
        )));
    }
    let (logits, cache) = nn::forward(spec, params, x)?;
    let mut loss = 0.0;
    let mut up = Array2::zeros(logits.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[y[i]];
        for (c, &v) in row.iter().enumerate() {
            up[[i, c]] = (v - lse).exp() / b as f64;
        }
        up[[i, y[i]]] -= 1.0 / b as f64;
    }
    let (grad, _) = nn::vjp(spec, params, &cache, up.view())?;
    Ok((loss / b as f64, grad))
}

fn check_data(spec: &MlpSpec, data: &LabeledDataset, batch_size: usize, lr: f64) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one example"));
    }
    if data.x().ncols() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "data has {} features, network expects {}",
            data.x().ncols(),
            spec.input_dim()
        )));
    }
    if spec.output_dim() != data.num_classes() {
        return Err(Error::invalid(format!(
            "network has {} outputs for {} classes",
            spec.output_dim(),
            data.num_classes()
        )));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    Ok(())
}

/// Minibatches of one epoch: a fresh Fisher-Yates shuffle, cut in order.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch(data: &LabeledDataset, rows: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (
        data.x().select(Axis(0), rows),
        rows.iter().map(|&i| data.y()[i]).collect(),
    )
}

pub fn train_dnn(
    spec: &MlpSpec,
    data: &LabeledDataset,
    config: &DnnConfig,
) -> Result<SoftmaxClassifier> {
    check_data(spec, data, config.batch_size, config.lr)?;
    let mut rng = Rng::new(config.seed);
    let mut params = init_params(spec, &mut rng);
    let mut opt = NadamState::new(params.len());
    for epoch in 0..config.epochs {
        for rows in epoch_batches(data.len(), config.batch_size, &mut rng) {
            let (xb, yb) = batch(data, &rows);
            let (loss, grad) = xent_grad(spec, &params, xb.view(), &yb)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_finite: vec![params],
                });
            }
            opt.step(&mut params, &grad, config.lr)?;
        }
    }
    SoftmaxClassifier::new(spec.clone(), params)
}

/// Seed of ensemble member `k`; member 0 keeps the base seed.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(GOLDEN_GAMMA)
}

/// `m` independent networks, member `k` trained with [`member_seed`].
pub fn train_ensemble(
    spec: &MlpSpec,
    data: &LabeledDataset,
    config: &DnnConfig,
    m: usize,
) -> Result<Vec<SoftmaxClassifier>> {
    if m == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let seeds: Vec<u64> = (0..m).map(|k| member_seed(config.seed, k)).collect();
    train_ensemble_with_seeds(spec, data, config, &seeds)
}

pub fn train_ensemble_with_seeds(
    spec: &MlpSpec,
    data: &LabeledDataset,
    config: &DnnConfig,
    seeds: &[u64],
) -> Result<Vec<SoftmaxClassifier>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            train_dnn(
                spec,
                data,
                &DnnConfig {
                    seed,
                    ..config.clone()
                },
            )
        })
        .collect()
}

/// SVGD ascent direction
/// `φ(wᵢ) = (1/m) Σ_l [κ(w_l, wᵢ) ∇ log p(w_l) + ∇_{w_l} κ(w_l, wᵢ)]`
/// with `κ(a, b) = exp(-‖a − b‖² / h)`.
pub fn svgd_update(
    particles: &[ParamVector],
    log_post_grads: &[ParamVector],
    bw: Bandwidth,
) -> Result<Vec<ParamVector>> {
    check_svgd(particles, log_post_grads)?;
    Ok(svgd_direction(
        particles,
        log_post_grads,
        bw,
        &param_gram(particles, bw),
    ))
}

fn check_svgd(particles: &[ParamVector], log_post_grads: &[ParamVector]) -> Result<()> {
    let m = particles.len();
    if m == 0 || log_post_grads.len() != m {
        return Err(Error::invalid(format!(
            "{} gradients for {m} particles",
            log_post_grads.len()
        )));
    }
    let len = particles[0].len();
    if particles
        .iter()
        .chain(log_post_grads)
        .any(|p| p.len() != len)
    {
        return Err(Error::invalid("particle and gradient lengths disagree"));
    }
    Ok(())
}

/// Matrix form of the SVGD sums. With `c = 2/h`, `K'` the kernel matrix
/// without its diagonal and `s` the row sums of `K'`,
/// `φᵢ = (Kᵢᵢ gᵢ + Σ_l K'ᵢₗ (g_l − c w_l) + c sᵢ wᵢ) / m`.
fn svgd_direction(
    particles: &[ParamVector],
    grads: &[ParamVector],
    bw: Bandwidth,
    gram: &Array2<f64>,
) -> Vec<ParamVector> {
    let m = particles.len();
    let c = 2.0 / bw.value();
    let len = particles[0].len();
    let mut u = Array2::zeros((m, len));
    for (l, row) in u.rows_mut().into_iter().enumerate() {
        Zip::from(row)
            .and(grads[l].values())
            .and(particles[l].values())
            .for_each(|u, &g, &w| *u = g - c * w);
    }
    let mut off = gram.clone();
    off.diag_mut().fill(0.0);
    let mut mixed = off.dot(&u);
    drop(u);
    for (i, row) in mixed.rows_mut().into_iter().enumerate() {
        let kii = gram[[i, i]];
        let pull = c * off.row(i).sum();
        Zip::from(row)
            .and(grads[i].values())
            .and(particles[i].values())
            .for_each(|v, &g, &w| *v = (*v + kii * g + pull * w) / m as f64);
    }
    mixed
        .outer_iter()
        .map(|r| ParamVector::new(r.to_owned()))
        .collect()
}

/// Minibatch estimate of `∇ log p(w | D)`: `-N · ∇(mean batch cross-entropy) − w / σ²`.
pub fn log_posterior_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    n_total: usize,
    prior_std: f64,
) -> Result<(f64, ParamVector)> {
    let (loss, grad) = xent_grad(spec, params, x, y)?;
    let mut g = grad.values() * -(n_total as f64);
    let precision = 1.0 / (prior_std * prior_std);
    if precision > 0.0 {
        g.scaled_add(-precision, params.values());
    }
    Ok((loss, ParamVector::new(g)))
}

pub fn train_bnn(spec: &MlpSpec, data: &LabeledDataset, config: &BnnConfig) -> Result<BnnEnsemble> {
    check_data(spec, data, config.batch_size, config.lr)?;
    if config.particles == 0 {
        return Err(Error::invalid("BNN needs at least one particle"));
    }
    if config.prior_std.is_nan() || config.prior_std <= 0.0 {
        return Err(Error::invalid(format!(
            "prior std must be positive, got {}",
            config.prior_std
        )));
    }
    let mut rng = Rng::new(config.seed);
    let mut particles: Vec<ParamVector> = (0..config.particles)
        .map(|_| init_params(spec, &mut rng))
        .collect();
    let mut opts = vec![NadamState::new(spec.param_count()); config.particles];
    for epoch in 0..config.epochs {
        for rows in epoch_batches(data.len(), config.batch_size, &mut rng) {
            let (xb, yb) = batch(data, &rows);
            let out = particles
                .par_iter()
                .map(|w| log_posterior_grad(spec, w, xb.view(), &yb, data.len(), config.prior_std))
                .collect::<Result<Vec<_>>>()?;
            if out.iter().any(|(l, g)| !l.is_finite() || !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    last_finite: particles,
                });
            }
            let grads: Vec<ParamVector> = out.into_iter().map(|(_, g)| g).collect();
            let (bw, gram) = median_gram(&particles);
            let phi = svgd_direction(&particles, &grads, bw, &gram);
            for ((w, mut dir), opt) in particles.iter_mut().zip(phi).zip(opts.iter_mut()) {
                // φ is an ascent direction
                dir.values_mut().mapv_inplace(|v| -v);
                opt.step(w, &dir, config.lr)?;
            }
        }
    }
    Ok(BnnEnsemble {
        spec: spec.clone(),
        particles,
        prior_std: config.prior_std,
    })
}

/// Mean softmax over members. Confidence is the largest mean probability.
pub fn predict_softmax(
    spec: &MlpSpec,
    members: &[ParamVector],
    x: ArrayView2<'_, f64>,
) -> Result<Prediction> {
    let Some((first, rest)) = members.split_first() else {
        return Err(Error::invalid("prediction needs at least one model"));
    };
    let mut probs = softmax(&nn::predict(spec, first, x)?);
    for w in rest {
        probs += &softmax(&nn::predict(spec, w, x)?);
    }
    probs /= members.len() as f64;
    Ok(Prediction::from_class_probs(probs))
}

pub fn predict_members(
    members: &[SoftmaxClassifier],
    x: ArrayView2<'_, f64>,
) -> Result<Prediction> {
    let Some(first) = members.first() else {
        return Err(Error::invalid("prediction needs at least one model"));
    };
    if members.iter().any(|c| c.spec != first.spec) {
        return Err(Error::invalid(
            "ensemble members have different architectures",
        ));
    }
    let params: Vec<ParamVector> = members.iter().map(|c| c.params.clone()).collect();
    predict_softmax(&first.spec, &params, x)
}
