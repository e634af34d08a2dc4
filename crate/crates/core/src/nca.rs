//! Neighbourhood components analysis with a neural embedding.
//!
//! Point `i` picks neighbour `j ≠ i` with probability proportional to
//! `exp(-‖zᵢ − zⱼ‖²)`, and the model is fit by minimizing the negative log
//! probability of picking a same-class neighbour.
//!
//! Selection probabilities are computed from the log-affinity matrix
//! `Aᵢⱼ = log kᵢⱼ` by a row softmax over `j ≠ i` with max subtraction, so large
//! latent distances never underflow to an all-zero row. The same helpers back
//! the exact kernel path of [`crate::pnca`].
//!
//! A point with no same-class neighbour has `qᵢ = 0`; its log term is floored
//! at `ln(1e-12)` and contributes no gradient.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::kernels::sq_dist;
use crate::nn::{self, init_params, MlpSpec, NadamState, ParamVector};
use crate::numcore::Rng;

/// Floor applied to `qᵢ` inside the log of the loss.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Row-stochastic neighbour-selection matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix(Array2<f64>);

impl SelectionMatrix {
    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub(crate) fn from_array(q: Array2<f64>) -> Self {
        Self(q)
    }
}

/// Feature matrix with integer labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    x: Array2<f64>,
    y: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "{} rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: nn::select_rows(self.x.view(), rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Labels, confidences and class probabilities for a batch of test points.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub class_probs: Array2<f64>,
}

impl Prediction {
    /// Argmax (ties to the smallest class index) and max of each row. The
    /// confidence is capped at 1 to absorb rounding in summed probabilities.
    pub fn from_class_probs(class_probs: Array2<f64>) -> Self {
        let mut labels = Vec::with_capacity(class_probs.nrows());
        let mut confidences = Vec::with_capacity(class_probs.nrows());
        for row in class_probs.rows() {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            labels.push(best);
            confidences.push(row[best].min(1.0));
        }
        Self {
            labels,
            confidences,
            class_probs,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `Aᵢⱼ = −‖zᵢ − zⱼ‖²`, filled from the upper triangle so it is exactly
/// symmetric. The diagonal is left at zero and never read.
pub(crate) fn neg_sq_dist_matrix(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = z.nrows();
    let rows: Vec<&[f64]> = z
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("row-major"))
        .collect();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = -sq_dist(rows[i], rows[j]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// Row softmax over off-diagonal entries of a square log-affinity matrix.
pub(crate) fn softmax_offdiag(logits: &Array2<f64>) -> Array2<f64> {
    let n = logits.nrows();
    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i && logits[[i, j]] > mx {
                mx = logits[[i, j]];
            }
        }
        let mut total = 0.0;
        for j in 0..n {
            if j != i {
                let e = (logits[[i, j]] - mx).exp();
                q[[i, j]] = e;
                total += e;
            }
        }
        for j in 0..n {
            if j != i {
                q[[i, j]] /= total;
            }
        }
    }
    q
}

/// Row softmax over every column (test points against a reference set).
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut q = logits.clone();
    for mut row in q.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        row.mapv_inplace(|v| v / total);
    }
    q
}

/// Per-class sums of selection weights against labelled reference points.
pub(crate) fn class_sums(
    weights: &Array2<f64>,
    y_ref: &[usize],
    num_classes: usize,
) -> Array2<f64> {
    let mut out = Array2::zeros((weights.nrows(), num_classes));
    for (i, row) in weights.rows().into_iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            out[[i, y_ref[j]]] += w;
        }
    }
    out
}

pub fn selection_probs(z: ArrayView2<'_, f64>) -> Result<SelectionMatrix> {
    if z.nrows() < 2 {
        return Err(Error::invalid(format!(
            "selection needs at least 2 points, got {}",
            z.nrows()
        )));
    }
    let z = z.as_standard_layout();
    Ok(SelectionMatrix(softmax_offdiag(&neg_sq_dist_matrix(
        z.view(),
    ))))
}

/// `(i, c) ↦ Σ_{j: yⱼ = c} qᵢⱼ`.
pub fn class_posterior(
    q: &SelectionMatrix,
    y: &[usize],
    num_classes: usize,
) -> Result<Array2<f64>> {
    check_labels(q, y, num_classes)?;
    Ok(class_sums(&q.0, y, num_classes))
}

fn check_labels(q: &SelectionMatrix, y: &[usize], num_classes: usize) -> Result<()> {
    if y.len() != q.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} points",
            y.len(),
            q.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Same-class selection probability `qᵢ` for each point.
fn same_class_mass(q: &Array2<f64>, y: &[usize]) -> Vec<f64> {
    let n = q.nrows();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && y[j] == y[i])
                .map(|j| q[[i, j]])
                .sum()
        })
        .collect()
}

/// `L = −Σᵢ log max(qᵢ, 1e-12)`.
pub fn nca_loss(q: &SelectionMatrix, y: &[usize]) -> f64 {
    same_class_mass(&q.0, y)
        .into_iter()
        .map(|qi| -qi.max(LOSS_FLOOR).ln())
        .sum()
}

/// Loss and `G = ∂L/∂A` for selection probabilities built by
/// [`softmax_offdiag`] from log-affinities `A`:
/// `Gᵢⱼ = qᵢⱼ − [yⱼ = yᵢ] qᵢⱼ / qᵢ` (zero for floored rows).
pub(crate) fn loss_and_logit_grad(q: &Array2<f64>, y: &[usize]) -> (f64, Array2<f64>) {
    let n = q.nrows();
    let mass = same_class_mass(q, y);
    let mut loss = 0.0;
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        let qi = mass[i];
        loss += -qi.max(LOSS_FLOOR).ln();
        if qi > LOSS_FLOOR {
            for j in 0..n {
                if j != i {
                    let same = if y[j] == y[i] { q[[i, j]] / qi } else { 0.0 };
                    g[[i, j]] = q[[i, j]] - same;
                }
            }
        }
    }
    (loss, g)
}

/// Loss and `∂L/∂Z` for `Aᵢⱼ = −‖zᵢ − zⱼ‖²`.
pub(crate) fn nca_latent_grad(z: ArrayView2<'_, f64>, y: &[usize]) -> (f64, Array2<f64>) {
    let (n, d) = z.dim();
    let q = softmax_offdiag(&neg_sq_dist_matrix(z));
    let (loss, g) = loss_and_logit_grad(&q, y);
    let mut dz = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in (i + 1)..n {
            let c = g[[i, j]] + g[[j, i]];
            let coef = -2.0 * c;
            for k in 0..d {
                let diff = z[[i, k]] - z[[j, k]];
                dz[[i, k]] += coef * diff;
                dz[[j, k]] -= coef * diff;
            }
        }
    }
    (loss, dz)
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

/// Loss and its gradient with respect to the network parameters.
pub fn nca_param_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    data: &LabeledDataset,
) -> Result<(f64, ParamVector)> {
    check_train(spec, data)?;
    let (z, cache) = nn::forward(spec, params, data.x().view())?;
    let (loss, dz) = nca_latent_grad(z.view(), data.y());
    let (grad, _) = nn::vjp(spec, params, &cache, dz.view())?;
    Ok((loss, grad))
}

pub fn nca_loss_at(spec: &MlpSpec, params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    check_train(spec, data)?;
    let z = nn::predict(spec, params, data.x().view())?;
    Ok(nca_loss(&selection_probs(z.view())?, data.y()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NcaConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NcaModel {
    pub params: ParamVector,
    /// Loss before every update, followed by the loss of the final parameters.
    pub loss_history: Vec<f64>,
}

/// Full-batch Nadam on the NCA loss. Parameters are initialized from
/// `Rng::new(config.seed)`.
pub fn train_nca(spec: &MlpSpec, data: &LabeledDataset, config: &NcaConfig) -> Result<NcaModel> {
    check_train(spec, data)?;
    let mut rng = Rng::new(config.seed);
    let mut params = init_params(spec, &mut rng);
    let mut opt = NadamState::new(params.len());
    let mut history = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = nca_param_grad(spec, &params, data)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite: vec![params],
            });
        }
        history.push(loss);
        opt.step(&mut params, &grad, config.lr)?;
    }
    let last = nca_loss_at(spec, &params, data)?;
    if !last.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
            last_finite: vec![params],
        });
    }
    history.push(last);
    Ok(NcaModel {
        params,
        loss_history: history,
    })
}

/// kNN-style prediction: softmax of `−‖z_test − zⱼ‖²` over all training
/// points, summed per class.
pub fn predict_nca(
    spec: &MlpSpec,
    params: &ParamVector,
    train: &LabeledDataset,
    x_test: ArrayView2<'_, f64>,
) -> Result<Prediction> {
    if train.is_empty() {
        return Err(Error::invalid("prediction needs a non-empty training set"));
    }
    let z_train = nn::predict(spec, params, train.x().view())?;
    let z_test = nn::predict(spec, params, x_test)?;
    let logits = cross_neg_sq_dist(z_test.view(), z_train.view());
    let q = softmax_rows(&logits);
    Ok(Prediction::from_class_probs(class_sums(
        &q,
        train.y(),
        train.num_classes(),
    )))
}

pub(crate) fn cross_neg_sq_dist(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        let ra = ra.to_slice().unwrap();
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = -sq_dist(ra, rb.to_slice().unwrap());
        }
    }
    out
}
