//! Structural properties of the empirical distribution kernel.

use nalgebra::DMatrix;
use pnca_core::kernels::{default_num_features, orf_build};
use pnca_core::numcore::{gaussian_sample, Rng};
use pnca_core::pnca::{empirical_kernel, pnca_probs, EnsembleEmbedding};
use pnca_core::KernelPath;

fn random_embedding(rng: &mut Rng, n: usize, m: usize, d: usize, std: f64) -> EnsembleEmbedding {
    EnsembleEmbedding::new(
        (0..m)
            .map(|_| gaussian_sample(rng, n, d, 0.0, std).unwrap())
            .collect(),
    )
    .unwrap()
}

#[test]
fn exact_kernel_is_symmetric_psd() {
    for seed in 0..30 {
        let mut rng = Rng::new(seed);
        let n = 2 + seed as usize % 9;
        let emb = random_embedding(
            &mut rng,
            n,
            1 + seed as usize % 4,
            1 + seed as usize % 5,
            0.8,
        );
        let k = empirical_kernel(&emb, KernelPath::Exact, None).unwrap();
        let v = k.values();
        let asym = (v - &v.t()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(asym <= 1e-10);
        let mat = DMatrix::from_fn(n, n, |i, j| v[[i, j]]);
        let min_eig = mat.symmetric_eigen().eigenvalues.min();
        assert!(min_eig > -1e-8, "seed {seed}: {min_eig}");
    }
}

#[test]
fn selection_rows_are_distributions() {
    for seed in 0..30 {
        let mut rng = Rng::new(100 + seed);
        let emb = random_embedding(&mut rng, 7, 3, 4, 2.0);
        let proj = orf_build(4, default_num_features(4), &mut rng).unwrap();
        for (path, p) in [(KernelPath::Exact, None), (KernelPath::Orf, Some(&proj))] {
            let q = pnca_probs(&empirical_kernel(&emb, path, p).unwrap()).unwrap();
            for (i, row) in q.as_array().rows().into_iter().enumerate() {
                assert_eq!(row[i], 0.0);
                assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn orf_converges_to_exact() {
    let mut rng = Rng::new(7);
    let emb = random_embedding(&mut rng, 6, 3, 3, 0.5);
    let exact = empirical_kernel(&emb, KernelPath::Exact, None).unwrap();
    let mae = |f: usize| -> f64 {
        (0..20)
            .map(|s| {
                let proj = orf_build(3, f, &mut Rng::new(500 + s)).unwrap();
                let k = empirical_kernel(&emb, KernelPath::Orf, Some(&proj)).unwrap();
                (k.values() - exact.values()).mapv(f64::abs).mean().unwrap()
            })
            .sum::<f64>()
            / 20.0
    };
    let coarse = mae(30);
    let fine = mae(3000);
    assert!(fine < coarse / 3.0, "{coarse} -> {fine}");
}
