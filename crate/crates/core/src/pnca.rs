//! Probabilistic NCA over a particle ensemble of embedding networks.
//!
//! The weight distribution `p(W)` is represented by `m` particles
//! `w₁..w_m`. Every input `xᵢ` then maps to the empirical latent distribution
//! `{g_{w_l}(xᵢ)}_l`, and two inputs are compared through the mean-embedding
//! kernel
//!
//! ```text
//! K̂ᵢⱼ = (1/m²) Σ_{l,l'} k(g_{w_l}(xᵢ), g_{w_l'}(xⱼ)),   k(z, z') = exp(-‖z − z'‖²)
//! ```
//!
//! Selection probabilities, loss and prediction then follow NCA with `K̂`
//! in place of `k`. Particles are moved along the kernel-smoothed direction
//! `φ(wᵢ) = Σ_l κ(wᵢ, w_l) ∇_{w_l} L̂`, with `κ` an RBF kernel on parameters
//! whose bandwidth is re-estimated every iteration by the median heuristic.
//!
//! Two kernel paths exist. The exact path evaluates the double sum above in
//! log space (`log K̂ᵢⱼ` via log-sum-exp), so it never underflows and at
//! `m = 1` performs exactly the floating-point operations of [`crate::nca`].
//! The ORF path replaces `k` by orthogonal random features: with `Φᵢ` the mean
//! feature vector of point `i`, `K̂ᵢⱼ ≈ max(0, Φᵢ·Φⱼ)`, which costs
//! `O(nmF + n²F)` instead of `O(n²m²d)`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    clamp_nonneg, default_num_features, median_gram, orf_build, orf_map, orf_map_vjp, param_gram,
    sq_dist, Bandwidth, OrfProjection,
};
use crate::nca::{
    class_sums, loss_and_logit_grad, nca_loss, softmax_offdiag, softmax_rows, LabeledDataset,
    Prediction, SelectionMatrix, LOSS_FLOOR,
};
use crate::nn::{self, init_params, ForwardCache, MlpSpec, NadamState, ParamVector};
use crate::numcore::{sub_seed, Rng};

/// Stream id under the training seed used to draw the ORF projection.
const ORF_STREAM: u64 = 0x004f_5246;

/// Particles representing samples from the weight distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Vec<ParamVector>,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<ParamVector>) -> Result<Self> {
        let Some(first) = particles.first() else {
            return Err(Error::invalid("an ensemble needs at least one particle"));
        };
        if particles.iter().any(|p| p.len() != first.len()) {
            return Err(Error::invalid("particles have different lengths"));
        }
        if particles.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite particle"));
        }
        Ok(Self { particles })
    }

    /// `m` draws from the initial distribution, taken in order from `rng`.
    pub fn init(spec: &MlpSpec, m: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..m).map(|_| init_params(spec, rng)).collect())
    }

    pub fn particles(&self) -> &[ParamVector] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn into_particles(self) -> Vec<ParamVector> {
        self.particles
    }
}

pub const ENSEMBLE_MAGIC: &[u8; 7] = b"PNCA-E1";

/// `PNCA-E1` layout: the 7-byte magic, a little-endian `u32` particle count,
/// then one `PNCA-W1` block per particle.
pub fn write_ensemble<W: Write>(
    out: &mut W,
    spec: &MlpSpec,
    ensemble: &ParticleEnsemble,
) -> std::io::Result<()> {
    out.write_all(ENSEMBLE_MAGIC)?;
    out.write_u32::<LittleEndian>(ensemble.len() as u32)?;
    for p in ensemble.particles() {
        nn::write_params(out, spec, p)?;
    }
    Ok(())
}

pub fn read_ensemble<R: Read>(input: &mut R, origin: &Path) -> Result<(MlpSpec, ParticleEnsemble)> {
    let mut magic = [0u8; 7];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::format(origin, format!("truncated ensemble header: {e}")))?;
    if &magic != ENSEMBLE_MAGIC {
        return Err(Error::format(
            origin,
            format!(
                "bad magic {:?}, expected PNCA-E1",
                String::from_utf8_lossy(&magic)
            ),
        ));
    }
    let m = input
        .read_u32::<LittleEndian>()
        .map_err(|e| Error::format(origin, format!("truncated ensemble header: {e}")))?
        as usize;
    if m == 0 {
        return Err(Error::format(origin, "ensemble with zero particles"));
    }
    let mut spec = None;
    let mut particles = Vec::with_capacity(m);
    for _ in 0..m {
        let (s, p) = nn::read_params(input, origin)?;
        match &spec {
            None => spec = Some(s),
            Some(prev) if *prev != s => {
                return Err(Error::format(origin, "particles disagree on architecture"))
            }
            Some(_) => {}
        }
        particles.push(p);
    }
    let ensemble =
        ParticleEnsemble::new(particles).map_err(|e| Error::format(origin, e.to_string()))?;
    Ok((spec.unwrap(), ensemble))
}

pub fn save_ensemble(path: &Path, spec: &MlpSpec, ensemble: &ParticleEnsemble) -> Result<()> {
    let mut buf = Vec::new();
    write_ensemble(&mut buf, spec, ensemble).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_ensemble(path: &Path) -> Result<(MlpSpec, ParticleEnsemble)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = std::io::Cursor::new(bytes);
    let out = read_ensemble(&mut cursor, path)?;
    if cursor.position() as usize != cursor.get_ref().len() {
        return Err(Error::format(path, "trailing bytes after ensemble"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    Exact,
    Orf,
}

impl KernelPath {
    /// ORF once `n·m ≥ 1000`, exact below.
    pub fn auto(n: usize, m: usize) -> Self {
        if n * m >= 1000 {
            KernelPath::Orf
        } else {
            KernelPath::Exact
        }
    }
}

impl fmt::Display for KernelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelPath::Exact => "exact",
            KernelPath::Orf => "orf",
        })
    }
}

impl FromStr for KernelPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(KernelPath::Exact),
            "orf" => Ok(KernelPath::Orf),
            other => Err(Error::invalid(format!(
                "unknown kernel path {other:?} (expected exact or orf)"
            ))),
        }
    }
}

/// Latent embeddings of a batch under every particle: `m` matrices of `n × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEmbedding {
    per_particle: Vec<Array2<f64>>,
}

impl EnsembleEmbedding {
    pub fn new(per_particle: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = per_particle.first() else {
            return Err(Error::invalid("embedding needs at least one particle"));
        };
        if per_particle.iter().any(|z| z.dim() != first.dim()) {
            return Err(Error::invalid("particle embeddings have different shapes"));
        }
        let per_particle = per_particle
            .into_iter()
            .map(|z| z.as_standard_layout().into_owned())
            .collect();
        Ok(Self { per_particle })
    }

    pub fn particle(&self, l: usize) -> &Array2<f64> {
        &self.per_particle[l]
    }

    pub fn num_particles(&self) -> usize {
        self.per_particle.len()
    }

    pub fn num_points(&self) -> usize {
        self.per_particle[0].nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.per_particle[0].ncols()
    }

    fn row(&self, l: usize, i: usize) -> &[f64] {
        let z = &self.per_particle[l];
        let d = z.ncols();
        &z.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }
}

pub fn embed_ensemble(
    spec: &MlpSpec,
    ensemble: &ParticleEnsemble,
    x: ArrayView2<'_, f64>,
) -> Result<EnsembleEmbedding> {
    let per_particle = ensemble
        .particles()
        .par_iter()
        .map(|w| nn::predict(spec, w, x))
        .collect::<Result<Vec<_>>>()?;
    EnsembleEmbedding::new(per_particle)
}

fn embed_with_caches(
    spec: &MlpSpec,
    ensemble: &ParticleEnsemble,
    x: ArrayView2<'_, f64>,
) -> Result<(EnsembleEmbedding, Vec<ForwardCache>)> {
    let out = ensemble
        .particles()
        .par_iter()
        .map(|w| nn::forward(spec, w, x))
        .collect::<Result<Vec<_>>>()?;
    let (z, caches): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok((EnsembleEmbedding::new(z)?, caches))
}

/// `K̂` between every pair of points of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalKernelMatrix {
    k: Array2<f64>,
    log_k: Option<Array2<f64>>,
    path: KernelPath,
}

impl EmpiricalKernelMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.k
    }

    /// `log K̂`, present on the exact path.
    pub fn log_values(&self) -> Option<&Array2<f64>> {
        self.log_k.as_ref()
    }

    pub fn path(&self) -> KernelPath {
        self.path
    }

    pub fn len(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.k.nrows() == 0
    }
}

/// log-sum-exp of `−‖z_a^l − z_b^l'‖²` over all particle pairs, without the
/// `−2 ln m` normalization.
fn pair_lse(
    a: &EnsembleEmbedding,
    i: usize,
    b: &EnsembleEmbedding,
    j: usize,
    buf: &mut Vec<f64>,
) -> f64 {
    buf.clear();
    let mut mx = f64::NEG_INFINITY;
    for l in 0..a.num_particles() {
        let zi = a.row(l, i);
        for lp in 0..b.num_particles() {
            let v = -sq_dist(zi, b.row(lp, j));
            if v > mx {
                mx = v;
            }
            buf.push(v);
        }
    }
    let mut total = 0.0;
    for &v in buf.iter() {
        total += (v - mx).exp();
    }
    mx + total.ln()
}

/// Raw log-sum-exp matrix; `log K̂ = lse − 2 ln m`. Exactly symmetric.
fn exact_lse_matrix(emb: &EnsembleEmbedding) -> Array2<f64> {
    let n = emb.num_points();
    let mut buf = Vec::with_capacity(emb.num_particles().pow(2));
    let mut lse = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = pair_lse(emb, i, emb, j, &mut buf);
            lse[[i, j]] = v;
            lse[[j, i]] = v;
        }
    }
    lse
}

fn log_norm(m: usize) -> f64 {
    2.0 * (m as f64).ln()
}

/// Mean ORF feature vector of each point, `n × F`.
fn mean_features(emb: &EnsembleEmbedding, proj: &OrfProjection) -> Result<Array2<f64>> {
    let m = emb.num_particles();
    let mut phi = orf_map(proj, emb.particle(0).view())?;
    for l in 1..m {
        phi += &orf_map(proj, emb.particle(l).view())?;
    }
    phi /= m as f64;
    Ok(phi)
}

fn require_proj(
    path: KernelPath,
    proj: Option<&OrfProjection>,
    d: usize,
) -> Result<Option<&OrfProjection>> {
    match (path, proj) {
        (KernelPath::Exact, _) => Ok(None),
        (KernelPath::Orf, None) => Err(Error::invalid("ORF kernel path needs a projection")),
        (KernelPath::Orf, Some(p)) if p.input_dim() != d => Err(Error::invalid(format!(
            "ORF projection has dimension {}, embeddings have {d}",
            p.input_dim()
        ))),
        (KernelPath::Orf, Some(p)) => Ok(Some(p)),
    }
}

pub fn empirical_kernel(
    emb: &EnsembleEmbedding,
    path: KernelPath,
    proj: Option<&OrfProjection>,
) -> Result<EmpiricalKernelMatrix> {
    match require_proj(path, proj, emb.latent_dim())? {
        None => {
            let log_k = exact_lse_matrix(emb) - log_norm(emb.num_particles());
            Ok(EmpiricalKernelMatrix {
                k: log_k.mapv(f64::exp),
                log_k: Some(log_k),
                path,
            })
        }
        Some(proj) => {
            let phi = mean_features(emb, proj)?;
            Ok(EmpiricalKernelMatrix {
                k: clamp_nonneg(&phi.dot(&phi.t())),
                log_k: None,
                path,
            })
        }
    }
}

/// Row-normalizes non-negative kernel values over `j ≠ i`. A row whose
/// off-diagonal entries are all zero becomes uniform.
fn normalize_offdiag(k: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let n = k.nrows();
    let mut q = Array2::zeros((n, n));
    let mut fallback = vec![false; n];
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| k[[i, j]]).sum();
        if total > 0.0 {
            for j in 0..n {
                if j != i {
                    q[[i, j]] = k[[i, j]] / total;
                }
            }
        } else {
            fallback[i] = true;
            for j in 0..n {
                if j != i {
                    q[[i, j]] = 1.0 / (n - 1) as f64;
                }
            }
        }
    }
    if fallback.iter().any(|&f| f) {
        log::warn!(
            "{} rows of the kernel matrix were all zero; using uniform selection",
            fallback.iter().filter(|&&f| f).count()
        );
    }
    (q, fallback)
}

/// `qᵢⱼ = K̂ᵢⱼ / Σ_{i'≠i} K̂ᵢᵢ'`, computed in log space when available.
pub fn pnca_probs(k: &EmpiricalKernelMatrix) -> Result<SelectionMatrix> {
    if k.len() < 2 {
        return Err(Error::invalid(format!(
            "selection needs at least 2 points, got {}",
            k.len()
        )));
    }
    Ok(SelectionMatrix::from_array(match &k.log_k {
        Some(log_k) => softmax_offdiag(log_k),
        None => normalize_offdiag(&k.k).0,
    }))
}

pub fn pnca_loss(q: &SelectionMatrix, y: &[usize]) -> f64 {
    nca_loss(q, y)
}

fn check_train(spec: &MlpSpec, data: &LabeledDataset) -> Result<()> {
    if data.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 points, got {}",
            data.len()
        )));
    }
    if data.x().ncols() != spec.input_dim() {
        return Err(Error::invalid(format!(
            "data has {} features, network expects {}",
            data.x().ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Exact path: loss and `∂L̂/∂z` for every particle's embedding.
fn exact_latent_grads(emb: &EnsembleEmbedding, y: &[usize]) -> (f64, Vec<Array2<f64>>) {
    let (n, d, m) = (emb.num_points(), emb.latent_dim(), emb.num_particles());
    let lse = exact_lse_matrix(emb);
    let log_k = &lse - log_norm(m);
    let q = softmax_offdiag(&log_k);
    let (loss, g) = loss_and_logit_grad(&q, y);
    let mut dz = vec![Array2::<f64>::zeros((n, d)); m];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = g[[i, j]] + g[[j, i]];
            for l in 0..m {
                for lp in 0..m {
                    let zi = emb.row(l, i);
                    let zj = emb.row(lp, j);
                    // softmax weight of this particle pair inside log K̂ᵢⱼ
                    let r = (-sq_dist(zi, zj) - lse[[i, j]]).exp();
                    let coef = -2.0 * (c * r);
                    for k in 0..d {
                        let diff = zi[k] - zj[k];
                        dz[l][[i, k]] += coef * diff;
                        dz[lp][[j, k]] -= coef * diff;
                    }
                }
            }
        }
    }
    (loss, dz)
}

/// ORF path: loss and `∂L̂/∂z` per particle. Entries clipped by the clamp
/// carry zero gradient.
fn orf_latent_grads(
    emb: &EnsembleEmbedding,
    y: &[usize],
    proj: &OrfProjection,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let (n, m) = (emb.num_points(), emb.num_particles());
    let phi = mean_features(emb, proj)?;
    let gram = phi.dot(&phi.t());
    let k = clamp_nonneg(&gram);
    let (q, fallback) = normalize_offdiag(&k);
    let mut loss = 0.0;
    // H = ∂L/∂(Φᵢ·Φⱼ)
    let mut h = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut same = 0.0;
        let mut total = 0.0;
        for j in 0..n {
            if j != i {
                total += k[[i, j]];
                if y[j] == y[i] {
                    same += k[[i, j]];
                }
            }
        }
        let qi: f64 = (0..n)
            .filter(|&j| j != i && y[j] == y[i])
            .map(|j| q[[i, j]])
            .sum();
        loss += -qi.max(LOSS_FLOOR).ln();
        if fallback[i] || qi <= LOSS_FLOOR {
            continue;
        }
        for j in 0..n {
            if j != i && gram[[i, j]] > 0.0 {
                let own = if y[j] == y[i] { 1.0 / same } else { 0.0 };
                h[[i, j]] = 1.0 / total - own;
            }
        }
    }
    let sym = &h + &h.t();
    let dphi = sym.dot(&phi) / m as f64;
    let dz = (0..m)
        .map(|l| orf_map_vjp(proj, emb.particle(l).view(), dphi.view()))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, dz))
}

/// `L̂` and `∇_{w_l} L̂` for every particle.
///
/// Each particle enters `K̂` through both the row point and the column point
/// of every pair; the latent gradients collect both contributions before the
/// per-particle reverse pass.
pub fn particle_grads(
    spec: &MlpSpec,
    ensemble: &ParticleEnsemble,
    data: &LabeledDataset,
    path: KernelPath,
    proj: Option<&OrfProjection>,
) -> Result<(f64, Vec<ParamVector>)> {
    check_train(spec, data)?;
    let proj = require_proj(path, proj, spec.output_dim())?;
    let (emb, caches) = embed_with_caches(spec, ensemble, data.x().view())?;
    let (loss, dz) = match proj {
        None => exact_latent_grads(&emb, data.y()),
        Some(p) => orf_latent_grads(&emb, data.y(), p)?,
    };
    let grads = ensemble
        .particles()
        .par_iter()
        .zip(caches.par_iter())
        .zip(dz.par_iter())
        .map(|((w, cache), up)| nn::vjp(spec, w, cache, up.view()).map(|(g, _)| g))
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, grads))
}

pub fn pnca_loss_at(
    spec: &MlpSpec,
    ensemble: &ParticleEnsemble,
    data: &LabeledDataset,
    path: KernelPath,
    proj: Option<&OrfProjection>,
) -> Result<f64> {
    check_train(spec, data)?;
    let emb = embed_ensemble(spec, ensemble, data.x().view())?;
    let k = empirical_kernel(&emb, path, proj)?;
    Ok(pnca_loss(&pnca_probs(&k)?, data.y()))
}

/// `φ(wᵢ) = Σ_l κ(wᵢ, w_l) ∇_{w_l} L̂`.
pub fn functional_gradient(
    ensemble: &ParticleEnsemble,
    grads: &[ParamVector],
    bw: Bandwidth,
) -> Result<Vec<ParamVector>> {
    let m = ensemble.len();
    if grads.len() != m {
        return Err(Error::invalid(format!(
            "{} gradients for {m} particles",
            grads.len()
        )));
    }
    if grads
        .iter()
        .any(|g| g.len() != ensemble.particles()[0].len())
    {
        return Err(Error::invalid("gradient length does not match particles"));
    }
    Ok(smooth_with_gram(
        grads,
        &param_gram(ensemble.particles(), bw),
    ))
}

fn smooth_with_gram(grads: &[ParamVector], gram: &Array2<f64>) -> Vec<ParamVector> {
    (0..grads.len())
        .map(|i| {
            let mut acc = grads[0].values() * gram[[i, 0]];
            for l in 1..grads.len() {
                acc.scaled_add(gram[[i, l]], grads[l].values());
            }
            ParamVector::new(acc)
        })
        .collect()
}

/// How the update direction is applied to each particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateRule {
    /// Per-particle Nadam state fed with `φ(wᵢ)`.
    Nadam,
    /// `wᵢ ← wᵢ − lr · φ(wᵢ)`.
    Plain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PncaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub particles: usize,
    pub seed: u64,
    /// `None` picks [`KernelPath::auto`].
    pub path: Option<KernelPath>,
    /// `None` uses ten features per latent dimension.
    pub orf_features: Option<usize>,
    pub update: UpdateRule,
}

impl Default for PncaConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.001,
            particles: 20,
            seed: 0,
            path: None,
            orf_features: None,
            update: UpdateRule::Nadam,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PncaModel {
    pub ensemble: ParticleEnsemble,
    pub path: KernelPath,
    /// Projection used in training; prediction must reuse it.
    pub projection: Option<OrfProjection>,
    /// Loss before every update, followed by the loss of the final ensemble.
    pub loss_history: Vec<f64>,
    /// Median-heuristic bandwidth used at each update.
    pub bandwidths: Vec<f64>,
}

/// Builds the fixed ORF projection a training run with `config` uses.
pub fn training_projection(spec: &MlpSpec, config: &PncaConfig) -> Result<OrfProjection> {
    let d = spec.output_dim();
    let features = config
        .orf_features
        .unwrap_or_else(|| default_num_features(d));
    orf_build(
        d,
        features,
        &mut Rng::new(sub_seed(config.seed, ORF_STREAM)),
    )
}

/// Functional gradient descent on the particle ensemble, full batch.
///
/// Particles are initialized in order from `Rng::new(config.seed)`, so the
/// first particle equals the initialization of [`crate::nca::train_nca`] with
/// the same seed. The ORF projection, when used, is drawn once from a separate
/// stream and held fixed.
pub fn train_pnca(spec: &MlpSpec, data: &LabeledDataset, config: &PncaConfig) -> Result<PncaModel> {
    check_train(spec, data)?;
    if config.particles == 0 {
        return Err(Error::invalid("PNCA needs at least one particle"));
    }
    let mut rng = Rng::new(config.seed);
    let mut ensemble = ParticleEnsemble::init(spec, config.particles, &mut rng)?;
    let path = config
        .path
        .unwrap_or_else(|| KernelPath::auto(data.len(), config.particles));
    let projection = match path {
        KernelPath::Exact => None,
        KernelPath::Orf => Some(training_projection(spec, config)?),
    };
    let mut opts = vec![NadamState::new(spec.param_count()); config.particles];
    let mut history = Vec::with_capacity(config.epochs + 1);
    let mut bandwidths = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (loss, grads) = particle_grads(spec, &ensemble, data, path, projection.as_ref())?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                last_finite: ensemble.into_particles(),
            });
        }
        history.push(loss);
        let (bw, gram) = median_gram(ensemble.particles());
        bandwidths.push(bw.value());
        if log::log_enabled!(log::Level::Debug) {
            let dev = gram
                .sum_axis(Axis(1))
                .iter()
                .fold(0.0f64, |a, s| a.max((s - 1.0).abs()));
            log::debug!(
                "epoch {epoch}: loss {loss:.6}, bandwidth {:.4e}, max |row sum - 1| {dev:.3}",
                bw.value()
            );
        }
        let phi = smooth_with_gram(&grads, &gram);
        for ((w, dir), opt) in ensemble.particles.iter_mut().zip(&phi).zip(opts.iter_mut()) {
            match config.update {
                UpdateRule::Nadam => opt.step(w, dir, config.lr)?,
                UpdateRule::Plain => w.values_mut().scaled_add(-config.lr, dir.values()),
            }
        }
    }
    let last = pnca_loss_at(spec, &ensemble, data, path, projection.as_ref())?;
    if !last.is_finite() || ensemble.particles().iter().any(|w| !w.is_finite()) {
        return Err(Error::Diverged {
            epoch: config.epochs,
            last_finite: ensemble.into_particles(),
        });
    }
    history.push(last);
    Ok(PncaModel {
        ensemble,
        path,
        projection,
        loss_history: history,
        bandwidths,
    })
}

/// Kernel between every test point's latent sample set and every training
/// point's, normalized over the training points and summed per class.
pub fn predict_pnca(
    spec: &MlpSpec,
    ensemble: &ParticleEnsemble,
    train: &LabeledDataset,
    x_test: ArrayView2<'_, f64>,
    path: KernelPath,
    proj: Option<&OrfProjection>,
) -> Result<Prediction> {
    if train.is_empty() {
        return Err(Error::invalid("prediction needs a non-empty training set"));
    }
    let proj = require_proj(path, proj, spec.output_dim())?;
    let emb_train = embed_ensemble(spec, ensemble, train.x().view())?;
    let emb_test = embed_ensemble(spec, ensemble, x_test)?;
    let weights = match proj {
        None => {
            let norm = log_norm(ensemble.len());
            let n_test = emb_test.num_points();
            let n_train = emb_train.num_points();
            let rows: Vec<Vec<f64>> = (0..n_test)
                .into_par_iter()
                .map(|t| {
                    let mut buf = Vec::new();
                    (0..n_train)
                        .map(|j| pair_lse(&emb_test, t, &emb_train, j, &mut buf) - norm)
                        .collect()
                })
                .collect();
            let logits = Array2::from_shape_vec((n_test, n_train), rows.concat()).expect("shape");
            softmax_rows(&logits)
        }
        Some(p) => {
            let k =
                clamp_nonneg(&mean_features(&emb_test, p)?.dot(&mean_features(&emb_train, p)?.t()));
            let mut q = k;
            let n_train = q.ncols();
            for mut row in q.rows_mut() {
                let total = row.sum();
                if total > 0.0 {
                    row /= total;
                } else {
                    row.fill(1.0 / n_train as f64);
                }
            }
            q
        }
    };
    Ok(Prediction::from_class_probs(class_sums(
        &weights,
        train.y(),
        train.num_classes(),
    )))
}

/// `Σ_{l,l'}` with `k` applied to each particle pair, written as a plain
/// quadruple loop. Reference implementation for tests and benches.
pub fn empirical_kernel_direct(emb: &EnsembleEmbedding) -> Array2<f64> {
    let (n, m) = (emb.num_points(), emb.num_particles());
    let mut k = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..m {
                for lp in 0..m {
                    acc += (-sq_dist(emb.row(l, i), emb.row(lp, j))).exp();
                }
            }
            k[[i, j]] = acc / (m * m) as f64;
        }
    }
    k
}

/// Column means of a matrix, used in diagnostics.
#[doc(hidden)]
pub fn mean_rows(a: &Array2<f64>) -> Vec<f64> {
    a.mean_axis(Axis(0)).map(|v| v.to_vec()).unwrap_or_default()
}
