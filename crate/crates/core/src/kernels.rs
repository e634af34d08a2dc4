//! Kernels on latent embeddings and on network parameters.
//!
//! * [`sqexp`]: `k(z, z') = exp(-‖z − z'‖²)` between latent points. It has no
//!   bandwidth; scale is learned by the embedding network.
//! * [`param_rbf`]: `κ(w, w') = exp(-‖w − w'‖² / h)` between parameter
//!   vectors, with `h` from the median heuristic.
//! * [`OrfProjection`]: orthogonal random features approximating `k`.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::numcore::{random_orthogonal, Rng};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("vector lengths differ: {a} vs {b}")));
    }
    Ok(())
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn sqexp(z: &[f64], z_other: &[f64]) -> Result<f64> {
    check_len(z.len(), z_other.len())?;
    Ok((-sq_dist(z, z_other)).exp())
}

/// `(∂k/∂z, ∂k/∂z')` with `∂k/∂z = −2(z − z')·k(z, z')`.
pub fn sqexp_grad(z: &[f64], z_other: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = sqexp(z, z_other)?;
    let dz: Vec<f64> = z
        .iter()
        .zip(z_other)
        .map(|(a, b)| -2.0 * (a - b) * k)
        .collect();
    let dz_other = dz.iter().map(|v| -v).collect();
    Ok((dz, dz_other))
}

/// Squared lengthscale `h` of the parameter kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid(format!(
                "bandwidth must be positive and finite, got {h}"
            )));
        }
        Ok(Self(h))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn param_rbf(w: &ParamVector, w_other: &ParamVector, bw: Bandwidth) -> Result<f64> {
    check_len(w.len(), w_other.len())?;
    Ok((-w.sq_dist(w_other) / bw.value()).exp())
}

/// Squared distances between every pair of particles, `m × m`, exactly
/// symmetric with a zero diagonal.
pub fn pairwise_sq_dists(particles: &[ParamVector]) -> Array2<f64> {
    let m = particles.len();
    let mut d2 = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let v = particles[i].sq_dist(&particles[j]);
            d2[[i, j]] = v;
            d2[[j, i]] = v;
        }
    }
    d2
}

/// `κ` for every ordered pair of particles, `m × m`, exactly symmetric with a
/// unit diagonal.
pub fn param_gram(particles: &[ParamVector], bw: Bandwidth) -> Array2<f64> {
    gram_from_sq_dists(&pairwise_sq_dists(particles), bw)
}

pub fn gram_from_sq_dists(d2: &Array2<f64>, bw: Bandwidth) -> Array2<f64> {
    let m = d2.nrows();
    Array2::from_shape_fn((m, m), |(i, j)| {
        if i == j {
            1.0
        } else {
            (-d2[[i, j]] / bw.value()).exp()
        }
    })
}

/// Median heuristic: `h = med² / ln(m + 1)` where `med` is the median pairwise
/// Euclidean distance between particles. Falls back to `h = 1` when there are
/// no pairs or the median is zero.
pub fn median_bandwidth(particles: &[ParamVector]) -> Bandwidth {
    median_bandwidth_from_sq_dists(&pairwise_sq_dists(particles))
}

pub fn median_bandwidth_from_sq_dists(d2: &Array2<f64>) -> Bandwidth {
    let m = d2.nrows();
    if m < 2 {
        return Bandwidth(1.0);
    }
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push(d2[[i, j]].sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    let h = med * med / ((m + 1) as f64).ln();
    if h > 0.0 && h.is_finite() {
        Bandwidth(h)
    } else {
        Bandwidth(1.0)
    }
}

/// Median-heuristic bandwidth and the matching gram matrix, sharing one pass
/// over the particle pairs.
pub fn median_gram(particles: &[ParamVector]) -> (Bandwidth, Array2<f64>) {
    let d2 = pairwise_sq_dists(particles);
    let bw = median_bandwidth_from_sq_dists(&d2);
    (bw, gram_from_sq_dists(&d2, bw))
}

/// `Σⱼ κ(wᵢ, wⱼ)` per particle. Reported as a diagnostic of how close the
/// median heuristic gets the kernel rows to summing to one.
pub fn kernel_row_sums(particles: &[ParamVector], bw: Bandwidth) -> Vec<f64> {
    param_gram(particles, bw).sum_axis(Axis(1)).to_vec()
}

/// Orthogonal random features for `k(z, z') = exp(-‖z − z'‖²)`.
///
/// `k` is the Gaussian kernel with σ² = 1/2, whose spectral density is
/// `N(0, 2I)`. Frequencies are built in blocks of `d`: each block is a Haar
/// orthogonal `d × d` matrix whose rows are rescaled by independent
/// chi-distributed norms (`d` degrees of freedom) and by `√2`, so each row is
/// marginally `N(0, 2I)` while rows in a block are orthogonal. The last block
/// is truncated to `num_features / 2` frequencies in total.
///
/// The map is `φ(z) = √(2/F) [cos(Ωz); sin(Ωz)]`, so `φ(z)·φ(z')` is the
/// average of `cos(ωᵀ(z − z'))` over the frequencies and `‖φ(z)‖² = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrfProjection {
    freqs: Array2<f64>,
    num_features: usize,
}

impl OrfProjection {
    pub fn input_dim(&self) -> usize {
        self.freqs.ncols()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// `(num_features / 2) × d` frequency matrix.
    pub fn frequencies(&self) -> &Array2<f64> {
        &self.freqs
    }

    fn scale(&self) -> f64 {
        (2.0 / self.num_features as f64).sqrt()
    }
}

/// Ten features per latent dimension (always even).
pub fn default_num_features(d: usize) -> usize {
    10 * d
}

pub fn orf_build(d: usize, num_features: usize, rng: &mut Rng) -> Result<OrfProjection> {
    if d == 0 {
        return Err(Error::invalid("ORF input dimension must be >= 1"));
    }
    if num_features < 2 || !num_features.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "ORF feature count must be even and >= 2, got {num_features}"
        )));
    }
    let n_freq = num_features / 2;
    let mut freqs = Array2::zeros((n_freq, d));
    let mut row = 0;
    while row < n_freq {
        let q = random_orthogonal(rng, d)?;
        for i in 0..d {
            if row == n_freq {
                break;
            }
            let chi = (0..d)
                .map(|_| rng.standard_normal().powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = std::f64::consts::SQRT_2 * chi;
            freqs.row_mut(row).assign(&(&q.row(i) * scale));
            row += 1;
        }
    }
    Ok(OrfProjection {
        freqs,
        num_features,
    })
}

fn check_proj(proj: &OrfProjection, d: usize) -> Result<()> {
    if d != proj.input_dim() {
        return Err(Error::invalid(format!(
            "ORF projection expects dimension {}, got {d}",
            proj.input_dim()
        )));
    }
    Ok(())
}

/// Feature map, `n × num_features`: cosine block then sine block.
pub fn orf_map(proj: &OrfProjection, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    check_proj(proj, z.ncols())?;
    let a = proj.scale();
    let arg = z.dot(&proj.freqs.t());
    let cos = arg.mapv(|v| a * v.cos());
    let sin = arg.mapv(|v| a * v.sin());
    Ok(concatenate(Axis(1), &[cos.view(), sin.view()]).expect("matching shapes"))
}

/// `∂⟨U, φ(Z)⟩/∂Z` for an `n × num_features` upstream `U`.
pub fn orf_map_vjp(
    proj: &OrfProjection,
    z: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_proj(proj, z.ncols())?;
    let n_freq = proj.num_features / 2;
    if upstream.dim() != (z.nrows(), proj.num_features) {
        return Err(Error::invalid(format!(
            "ORF upstream is {:?}, expected ({}, {})",
            upstream.dim(),
            z.nrows(),
            proj.num_features
        )));
    }
    let a = proj.scale();
    let arg = z.dot(&proj.freqs.t());
    let u_cos = upstream.slice(s![.., ..n_freq]);
    let u_sin = upstream.slice(s![.., n_freq..]);
    let mut coeff = Array2::zeros(arg.raw_dim());
    Zip::from(&mut coeff)
        .and(&arg)
        .and(&u_cos)
        .and(&u_sin)
        .for_each(|c, &t, &uc, &us| *c = a * (us * t.cos() - uc * t.sin()));
    Ok(coeff.dot(&proj.freqs))
}

/// Entrywise `max(0, ·)`.
pub fn clamp_nonneg(k: &Array2<f64>) -> Array2<f64> {
    k.mapv(|v| v.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gaussian_sample, seeded_rng};
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn sqexp_values() {
        assert_eq!(sqexp(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let r = 2f64.ln().sqrt();
        assert!((sqexp(&[0.0], &[r]).unwrap() - 0.5).abs() < 1e-15);
        assert!(sqexp(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sqexp_matches_direct_evaluation() {
        let z = [0.1, -0.4, 0.25, 1.0, -0.3];
        let w = [0.0, 0.2, -0.5, 0.7, 0.1];
        let d2: f64 = z.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum();
        // d2 = 0.01 + 0.36 + 0.5625 + 0.09 + 0.16
        assert!((d2 - 1.1825).abs() < 1e-15);
        assert!((sqexp(&z, &w).unwrap() - (-1.1825f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sqexp_grad_cases() {
        let (a, b) = sqexp_grad(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(a.iter().chain(&b).all(|&v| v == 0.0));
        let (a, b) = sqexp_grad(&[0.0], &[1.0]).unwrap();
        assert!((a[0] - 2.0 * (-1f64).exp()).abs() < 1e-15);
        assert_eq!(b[0], -a[0]);
    }

    #[test]
    fn param_rbf_cases() {
        let w = ParamVector::from_vec(vec![1.0, 2.0]);
        let bw = Bandwidth::new(3.0).unwrap();
        assert_eq!(param_rbf(&w, &w, bw).unwrap(), 1.0);
        // ‖w − w'‖² = 3 = h
        let w2 = ParamVector::from_vec(vec![1.0 + 3f64.sqrt(), 2.0]);
        assert!((param_rbf(&w, &w2, bw).unwrap() - (-1f64).exp()).abs() < 1e-14);
        assert!(param_rbf(&w, &ParamVector::zeros(3), bw).is_err());
        assert!(Bandwidth::new(0.0).is_err());
    }

    #[test]
    fn median_bandwidth_cases() {
        let single = vec![ParamVector::from_vec(vec![1.0, 1.0])];
        assert_eq!(median_bandwidth(&single).value(), 1.0);
        let pair = vec![
            ParamVector::from_vec(vec![0.0, 0.0]),
            ParamVector::from_vec(vec![2.0, 0.0]),
        ];
        assert!((median_bandwidth(&pair).value() - 4.0 / 3f64.ln()).abs() < 1e-14);
        let same = vec![
            ParamVector::zeros(2),
            ParamVector::zeros(2),
            ParamVector::zeros(2),
        ];
        assert_eq!(median_bandwidth(&same).value(), 1.0);
    }

    #[test]
    fn median_bandwidth_row_sum_diagnostic() {
        let mut rng = seeded_rng(17);
        let particles: Vec<_> = (0..5)
            .map(|_| {
                ParamVector::new(
                    gaussian_sample(&mut rng, 1, 30, 0.0, 1.0)
                        .unwrap()
                        .row(0)
                        .to_owned(),
                )
            })
            .collect();
        let bw = median_bandwidth(&particles);
        let sums = kernel_row_sums(&particles, bw);
        let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        // only a diagnostic; row sums include κ(w, w) = 1 so they are >= 1
        eprintln!(
            "median heuristic: h = {:.4}, max |Σκ − 1| = {worst:.4}",
            bw.value()
        );
        assert!(sums.iter().all(|&s| s >= 1.0));
    }

    #[test]
    fn orf_default_and_validation() {
        assert_eq!(default_num_features(3), 30);
        let p = orf_build(3, default_num_features(3), &mut seeded_rng(0)).unwrap();
        assert_eq!(p.num_features(), 30);
        assert_eq!(p.frequencies().dim(), (15, 3));
        assert!(orf_build(3, 7, &mut seeded_rng(0)).is_err());
        assert!(orf_build(0, 8, &mut seeded_rng(0)).is_err());
        assert!(orf_build(3, 0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn orf_block_rows_are_orthogonal() {
        let p = orf_build(4, 16, &mut seeded_rng(12)).unwrap();
        let f = p.frequencies();
        for block in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    if i != j {
                        let dot = f.row(block * 4 + i).dot(&f.row(block * 4 + j));
                        assert!(dot.abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn orf_is_deterministic() {
        let a = orf_build(5, 40, &mut seeded_rng(3)).unwrap();
        let b = orf_build(5, 40, &mut seeded_rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn orf_self_kernel_and_continuity() {
        let p = orf_build(3, 30, &mut seeded_rng(1)).unwrap();
        let z = array![[0.3, -0.2, 1.1], [0.3 + 1e-7, -0.2, 1.1]];
        let phi = orf_map(&p, z.view()).unwrap();
        let s0 = phi.row(0).dot(&phi.row(0));
        assert!((s0 - 1.0).abs() < 1e-14);
        let cross = phi.row(0).dot(&phi.row(1));
        assert!(cross <= 1.0 + 1e-14 && cross > 1.0 - 1e-9);
        assert!(orf_map(&p, Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn orf_approximates_sqexp_in_two_dims() {
        let mut rng = seeded_rng(77);
        let p = orf_build(2, 1000, &mut rng).unwrap();
        let a = gaussian_sample(&mut rng, 500, 2, 0.0, 0.6).unwrap();
        let b = gaussian_sample(&mut rng, 500, 2, 0.0, 0.6).unwrap();
        let pa = orf_map(&p, a.view()).unwrap();
        let pb = orf_map(&p, b.view()).unwrap();
        let mut err = 0.0;
        for i in 0..500 {
            let exact = sqexp(a.row(i).as_slice().unwrap(), b.row(i).as_slice().unwrap()).unwrap();
            err += (pa.row(i).dot(&pb.row(i)) - exact).abs();
        }
        err /= 500.0;
        assert!(err < 0.05, "mean abs error {err}");
    }

    #[test]
    fn orf_vjp_matches_finite_differences() {
        let mut rng = seeded_rng(5);
        let p = orf_build(3, 12, &mut rng).unwrap();
        let z = gaussian_sample(&mut rng, 4, 3, 0.0, 1.0).unwrap();
        let u = gaussian_sample(&mut rng, 4, 12, 0.0, 1.0).unwrap();
        let g = orf_map_vjp(&p, z.view(), u.view()).unwrap();
        let f = |z: &Array2<f64>| (orf_map(&p, z.view()).unwrap() * &u).sum();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let fd = (f(&zp) - f(&zm)) / (2.0 * h);
                assert!(
                    (fd - g[[i, j]]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "{fd} vs {}",
                    g[[i, j]]
                );
            }
        }
    }

    #[test]
    fn clamp_cases() {
        let k = array![[-0.01, 0.3], [0.3, 1.0]];
        let c = clamp_nonneg(&k);
        assert_eq!(c, array![[0.0, 0.3], [0.3, 1.0]]);
        assert_eq!(clamp_nonneg(&c), c);
    }

    proptest! {
        #[test]
        fn kernels_symmetric_and_bounded(
            a in proptest::collection::vec(-3.0f64..3.0, 4),
            b in proptest::collection::vec(-3.0f64..3.0, 4),
            h in 0.1f64..10.0,
        ) {
            let k1 = sqexp(&a, &b).unwrap();
            prop_assert_eq!(k1, sqexp(&b, &a).unwrap());
            prop_assert!(k1 > 0.0 && k1 <= 1.0);
            let (wa, wb) = (ParamVector::from_vec(a.clone()), ParamVector::from_vec(b.clone()));
            let bw = Bandwidth::new(h).unwrap();
            let k2 = param_rbf(&wa, &wb, bw).unwrap();
            prop_assert_eq!(k2, param_rbf(&wb, &wa, bw).unwrap());
            prop_assert!(k2 > 0.0 && k2 <= 1.0);
        }

        #[test]
        fn clamp_is_idempotent(vals in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let k = Array2::from_shape_vec((3, 3), vals).unwrap();
            let once = clamp_nonneg(&k);
            prop_assert_eq!(clamp_nonneg(&once), once.clone());
            prop_assert!(once.iter().all(|&v| v >= 0.0));
        }
    }
}
