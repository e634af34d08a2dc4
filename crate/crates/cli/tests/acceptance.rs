//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use nalgebra::DMatrix;
use pnca_cli::experiment::{load_datasets, run_trial, CLEAN, OOD, ROTATED};
use pnca_cli::{parse_config, ModelKind, RunArgs};
use pnca_core::kernels::{median_bandwidth, orf_build, param_rbf, sqexp, sqexp_grad};
use pnca_core::nca::{
    nca_loss, nca_loss_at, nca_param_grad, predict_nca, selection_probs, train_nca, NcaConfig,
};
use pnca_core::nn::{self, init_params};
use pnca_core::numcore::{gaussian_sample, Rng};
use pnca_core::pnca::{
    embed_ensemble, empirical_kernel, functional_gradient, particle_grads, pnca_loss, pnca_loss_at,
    pnca_probs, predict_pnca, train_pnca, PncaConfig,
};
use pnca_core::{KernelPath, LabeledDataset, MlpSpec, ParamVector, ParticleEnsemble};

type Outcome = (bool, String);

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            p[k] += h;
            let mut m = x.to_vec();
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn slice(p: &ParamVector) -> &[f64] {
    p.values().as_slice().unwrap()
}

fn random_data(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> LabeledDataset {
    let x = gaussian_sample(rng, n, dim, 0.0, 1.0).unwrap();
    LabeledDataset::new(x, (0..n).map(|i| i % classes).collect(), classes).unwrap()
}

fn max_abs(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0f64, |x, &y| x.max(y))
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const TRIALS: usize = 10;

/// Per evaluation set: (accuracy, high-confidence fraction).
type TrialMetrics = BTreeMap<String, (Option<f64>, f64)>;

struct Benchmark {
    results: BTreeMap<ModelKind, Vec<TrialMetrics>>,
}

fn run_benchmark() -> Benchmark {
    let data_dir = workspace().join("data");
    let mut results = BTreeMap::new();
    let models = [
        ModelKind::Nca,
        ModelKind::Pnca,
        ModelKind::Dnn,
        ModelKind::Ensemble,
        ModelKind::Bnn,
    ];
    let mut datasets = None;
    for model in models {
        let args = RunArgs {
            model: Some(model),
            train_images: Some(data_dir.join("mnist5k/pool-images-idx3-ubyte.gz")),
            train_labels: Some(data_dir.join("mnist5k/pool-labels-idx1-ubyte.gz")),
            test_images: Some(data_dir.join("mnist5k/test-images-idx3-ubyte.gz")),
            test_labels: Some(data_dir.join("mnist5k/test-labels-idx1-ubyte.gz")),
            ood_dir: Some(data_dir.join("letters")),
            trials: Some(TRIALS),
            ..Default::default()
        };
        let cfg = parse_config(&args, None).expect("default config");
        let data = datasets.get_or_insert_with(|| load_datasets(&cfg).expect("benchmark data"));
        let start = std::time::Instant::now();
        let trials: Vec<_> = (0..TRIALS)
            .map(|t| {
                let (res, _) = run_trial(&cfg, data, t).expect("trial");
                res.reports
                    .into_iter()
                    .map(|(k, r)| (k, (r.overall_accuracy, r.high_confidence_fraction)))
                    .collect()
            })
            .collect();
        eprintln!("  {model}: {TRIALS} trials in {:.0?}", start.elapsed());
        results.insert(model, trials);
    }
    Benchmark { results }
}

impl Benchmark {
    fn mean_acc(&self, model: ModelKind, set: &str) -> f64 {
        let t = &self.results[&model];
        t.iter().map(|r| r[set].0.unwrap()).sum::<f64>() / t.len() as f64
    }
}

fn criterion_1(b: &Benchmark) -> Outcome {
    let targets = [
        (ModelKind::Nca, 0.69),
        (ModelKind::Pnca, 0.67),
        (ModelKind::Dnn, 0.75),
        (ModelKind::Ensemble, 0.76),
        (ModelKind::Bnn, 0.74),
    ];
    let mut ok = true;
    let mut parts = vec![];
    for (m, target) in targets {
        let acc = b.mean_acc(m, CLEAN);
        ok &= (acc - target).abs() <= 0.05;
        parts.push(format!("{m} {acc:.3} (target {target:.2})"));
    }
    (ok, format!("clean accuracy: {}", parts.join(", ")))
}

fn criterion_2(b: &Benchmark) -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for m in b.results.keys() {
        let acc = b.mean_acc(*m, ROTATED);
        ok &= (0.12..=0.25).contains(&acc);
        parts.push(format!("{m} {acc:.3}"));
    }
    (
        ok,
        format!("rotated accuracy in [0.12, 0.25]: {}", parts.join(", ")),
    )
}

fn criterion_3(b: &Benchmark) -> Outcome {
    let frac = |m: ModelKind, t: usize| b.results[&m][t][OOD].1;
    let wins = (0..TRIALS)
        .filter(|&t| {
            let p = frac(ModelKind::Pnca, t);
            p < frac(ModelKind::Dnn, t) && p < frac(ModelKind::Ensemble, t)
        })
        .count();
    let mean = |m| (0..TRIALS).map(|t| frac(m, t)).sum::<f64>() / TRIALS as f64;
    (
        wins >= 8,
        format!(
            "PNCA OOD high-confidence fraction below DNN and ensemble in {wins}/{TRIALS} trials (means: pnca {:.3}, dnn {:.3}, ensemble {:.3})",
            mean(ModelKind::Pnca),
            mean(ModelKind::Dnn),
            mean(ModelKind::Ensemble)
        ),
    )
}

fn criterion_4() -> Outcome {
    let spec = MlpSpec::new(vec![4, 8, 3]).unwrap();
    let mut worst = 0.0f64;
    let mut labels_ok = true;
    let mut traj_ok = true;
    for seed in 0..50u64 {
        let mut rng = Rng::new(seed);
        let data = random_data(&mut rng, 8, 4, 3);
        let w = init_params(&spec, &mut rng);
        let ens = ParticleEnsemble::new(vec![w.clone()]).unwrap();
        let q_nca =
            selection_probs(nn::predict(&spec, &w, data.x().view()).unwrap().view()).unwrap();
        let emb = embed_ensemble(&spec, &ens, data.x().view()).unwrap();
        let q_pnca = pnca_probs(&empirical_kernel(&emb, KernelPath::Exact, None).unwrap()).unwrap();
        worst = worst.max(max_abs(q_nca.as_array(), q_pnca.as_array()));
        worst = worst.max((nca_loss(&q_nca, data.y()) - pnca_loss(&q_pnca, data.y())).abs());
        let xt = gaussian_sample(&mut rng, 6, 4, 0.0, 1.0).unwrap();
        let a = predict_nca(&spec, &w, &data, xt.view()).unwrap();
        let b = predict_pnca(&spec, &ens, &data, xt.view(), KernelPath::Exact, None).unwrap();
        labels_ok &= a.labels == b.labels;
        worst = worst.max(max_abs(&a.class_probs, &b.class_probs));

        let nca = train_nca(
            &spec,
            &data,
            &NcaConfig {
                epochs: 20,
                lr: 0.01,
                seed,
            },
        )
        .unwrap();
        let cfg = PncaConfig {
            epochs: 20,
            lr: 0.01,
            particles: 1,
            seed,
            path: Some(KernelPath::Exact),
            ..Default::default()
        };
        let pnca = train_pnca(&spec, &data, &cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        traj_ok &= pnca.ensemble.particles()[0] == nca.params
            && bits(&pnca.loss_history) == bits(&nca.loss_history);
    }
    (
        worst <= 1e-12 && labels_ok && traj_ok,
        format!(
            "m=1 reduction on 50 seeds: max |diff| {worst:.1e}, labels equal {labels_ok}, trajectories bitwise equal {traj_ok}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut sq = 0.0f64;
    let mut nca = 0.0f64;
    let mut exact = 0.0f64;
    let mut orf = 0.0f64;
    let mut back = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = Rng::new(10_000 + seed);
        let d = 1 + seed as usize % 6;
        let z = gaussian_sample(&mut rng, 2, d, 0.0, 0.7).unwrap();
        let (a, b) = (z.row(0).to_vec(), z.row(1).to_vec());
        let (ga, gb) = sqexp_grad(&a, &b).unwrap();
        sq = sq.max(rel_err(&ga, &fd(|x| sqexp(x, &b).unwrap(), &a, 1e-5)));
        sq = sq.max(rel_err(&gb, &fd(|x| sqexp(&a, x).unwrap(), &b, 1e-5)));

        let spec = MlpSpec::new(vec![3, 5, 4, 2]).unwrap();
        // Gaussian biases: zero-initialized ones put dead rows exactly on a ReLU kink.
        let w = ParamVector::from_vec(
            gaussian_sample(&mut rng, 1, spec.param_count(), 0.0, 0.5)
                .unwrap()
                .into_raw_vec_and_offset()
                .0,
        );
        let x = gaussian_sample(&mut rng, 4, 3, 0.0, 1.0).unwrap();
        let up = gaussian_sample(&mut rng, 4, 2, 0.0, 1.0).unwrap();
        let (_, cache) = nn::forward(&spec, &w, x.view()).unwrap();
        let (gw, gx) = nn::vjp(&spec, &w, &cache, up.view()).unwrap();
        let at_w = |p: &[f64]| {
            (&nn::predict(&spec, &ParamVector::from_vec(p.to_vec()), x.view()).unwrap() * &up).sum()
        };
        let at_x = |v: &[f64]| {
            let xv = ndarray::Array2::from_shape_vec((4, 3), v.to_vec()).unwrap();
            (&nn::predict(&spec, &w, xv.view()).unwrap() * &up).sum()
        };
        back = back.max(rel_err(slice(&gw), &fd(at_w, slice(&w), 1e-6)));
        back = back.max(rel_err(
            gx.as_slice().unwrap(),
            &fd(at_x, x.as_slice().unwrap(), 1e-6),
        ));

        let spec = MlpSpec::new(vec![3, 6, 2]).unwrap();
        let w = init_params(&spec, &mut rng);
        let data = random_data(&mut rng, 7, 3, 3);
        let (_, g) = nca_param_grad(&spec, &w, &data).unwrap();
        let f = fd(
            |p| nca_loss_at(&spec, &ParamVector::from_vec(p.to_vec()), &data).unwrap(),
            slice(&w),
            1e-6,
        );
        nca = nca.max(rel_err(slice(&g), &f));

        let spec = MlpSpec::new(vec![2, 4, 2]).unwrap();
        let m = 1 + seed as usize % 3;
        let ens = ParticleEnsemble::init(&spec, m, &mut rng).unwrap();
        let data = random_data(&mut rng, 6, 2, 2);
        let proj = orf_build(2, 20, &mut rng).unwrap();
        for (path, p, worst) in [
            (KernelPath::Exact, None, &mut exact),
            (KernelPath::Orf, Some(&proj), &mut orf),
        ] {
            let (_, grads) = particle_grads(&spec, &ens, &data, path, p).unwrap();
            for l in 0..m {
                let f = fd(
                    |v| {
                        let mut ps = ens.particles().to_vec();
                        ps[l] = ParamVector::from_vec(v.to_vec());
                        pnca_loss_at(&spec, &ParticleEnsemble::new(ps).unwrap(), &data, path, p)
                            .unwrap()
                    },
                    slice(&ens.particles()[l]),
                    1e-6,
                );
                *worst = worst.max(rel_err(slice(&grads[l]), &f));
            }
        }
    }
    (
        sq < 1e-7 && back < 1e-5 && nca < 1e-5 && exact < 1e-5 && orf < 1e-5,
        format!(
            "finite differences on 20 instances each: sqexp {sq:.1e}, vjp {back:.1e}, nca {nca:.1e}, pnca exact {exact:.1e}, pnca orf {orf:.1e}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = Rng::new(20_000 + seed);
        let n = 4 + seed as usize % 5;
        let m = 2 + seed as usize % 3;
        let spec = MlpSpec::new(vec![3, 8, 3]).unwrap();
        let ens = ParticleEnsemble::init(&spec, m, &mut rng).unwrap();
        let data = random_data(&mut rng, n, 3, 2);
        let (_, grads) = particle_grads(&spec, &ens, &data, KernelPath::Exact, None).unwrap();
        let bw = median_bandwidth(ens.particles());
        let phi = functional_gradient(&ens, &grads, bw).unwrap();
        let fd_grads: Vec<Vec<f64>> = (0..m)
            .map(|l| {
                fd(
                    |v| {
                        let mut ps = ens.particles().to_vec();
                        ps[l] = ParamVector::from_vec(v.to_vec());
                        pnca_loss_at(
                            &spec,
                            &ParticleEnsemble::new(ps).unwrap(),
                            &data,
                            KernelPath::Exact,
                            None,
                        )
                        .unwrap()
                    },
                    slice(&ens.particles()[l]),
                    1e-6,
                )
            })
            .collect();
        for i in 0..m {
            let mut oracle = vec![0.0; spec.param_count()];
            for (l, g) in fd_grads.iter().enumerate() {
                let k = param_rbf(&ens.particles()[i], &ens.particles()[l], bw).unwrap();
                for (o, v) in oracle.iter_mut().zip(g) {
                    *o += k * v;
                }
            }
            worst = worst.max(rel_err(slice(&phi[i]), &oracle));
        }
    }
    (
        worst < 1e-4,
        format!("functional gradient vs kernel-weighted finite differences: {worst:.1e}"),
    )
}

fn criterion_7() -> Outcome {
    let mut asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    let mut row_err = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Rng::new(30_000 + seed);
        let n = 3 + seed as usize % 10;
        let m = 1 + seed as usize % 5;
        let spec = MlpSpec::new(vec![5, 16, 10]).unwrap();
        let ens = ParticleEnsemble::init(&spec, m, &mut rng).unwrap();
        let x = gaussian_sample(&mut rng, n, 5, 0.0, 1.0).unwrap();
        let emb = embed_ensemble(&spec, &ens, x.view()).unwrap();
        let k = empirical_kernel(&emb, KernelPath::Exact, None).unwrap();
        let v = k.values();
        asym = asym.max(max_abs(v, &v.t().to_owned()));
        let mat = DMatrix::from_fn(n, n, |i, j| v[[i, j]]);
        min_eig = min_eig.min(mat.symmetric_eigen().eigenvalues.min());
        let proj = orf_build(10, 100, &mut rng).unwrap();
        for (path, p) in [(KernelPath::Exact, None), (KernelPath::Orf, Some(&proj))] {
            let q = pnca_probs(&empirical_kernel(&emb, path, p).unwrap()).unwrap();
            for row in q.as_array().rows() {
                row_err = row_err.max((row.sum() - 1.0).abs());
            }
        }
    }

    let mut rng = Rng::new(40_000);
    let spec = MlpSpec::new(vec![5, 16, 10]).unwrap();
    let ens = ParticleEnsemble::init(&spec, 5, &mut rng).unwrap();
    let x = gaussian_sample(&mut rng, 12, 5, 0.0, 1.0).unwrap();
    let emb = embed_ensemble(&spec, &ens, x.view()).unwrap();
    let exact = empirical_kernel(&emb, KernelPath::Exact, None).unwrap();
    let features = [24usize, 50, 100, 200, 400, 800];
    let mut mae = vec![];
    let mut median_at_100 = 0.0;
    for &f in &features {
        let reps = 40;
        let mut total = 0.0;
        for r in 0..reps {
            let proj = orf_build(10, f, &mut Rng::new(50_000 + r)).unwrap();
            let k = empirical_kernel(&emb, KernelPath::Orf, Some(&proj)).unwrap();
            let mut errs: Vec<f64> = (k.values() - exact.values())
                .iter()
                .map(|e| e.abs())
                .collect();
            total += errs.iter().sum::<f64>() / errs.len() as f64;
            if f == 100 {
                errs.sort_by(f64::total_cmp);
                median_at_100 += errs[errs.len() / 2] / reps as f64;
            }
        }
        mae.push(total / reps as f64);
    }
    let decreasing = mae.windows(2).all(|w| w[1] < w[0]);
    let ok =
        asym <= 1e-10 && min_eig > -1e-8 && row_err <= 1e-12 && decreasing && median_at_100 < 0.05;
    let curve: Vec<String> = features
        .iter()
        .zip(&mae)
        .map(|(f, e)| format!("{f}:{e:.4}"))
        .collect();
    (
        ok,
        format!(
            "kernel matrix: asymmetry {asym:.1e}, min eigenvalue {min_eig:.1e}, row-sum error {row_err:.1e}, \
             ORF MAE by F [{}], median error at F=100 {median_at_100:.4}",
            curve.join(" ")
        ),
    )
}

fn criterion_8() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let run = |out: &Path| {
        Command::new(env!("CARGO_BIN_EXE_pnca"))
            .arg("run")
            .arg("--train-images")
            .arg(fixtures.join("mini-images-idx3-ubyte"))
            .arg("--train-labels")
            .arg(fixtures.join("mini-labels-idx1-ubyte"))
            .arg("--ood-dir")
            .arg(fixtures.join("letters"))
            .args([
                "--model",
                "pnca",
                "--trials",
                "2",
                "--n-train",
                "30",
                "--epochs",
                "10",
                "--particles",
                "4",
            ])
            .args(["--seed", "42", "--save-models", "--output"])
            .arg(out)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .status()
            .expect("binary runs")
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if !run(a.path()).success() || !run(b.path()).success() {
        return (false, "fixture run failed".into());
    }
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    let bytes: usize = ta.values().map(Vec::len).sum();
    (
        !ta.is_empty() && ta == tb,
        format!(
            "two runs with seed 42: {} files, {bytes} bytes, identical {}",
            ta.len(),
            ta == tb
        ),
    )
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

fn main() -> ExitCode {
    eprintln!("running the MNIST benchmark ({TRIALS} trials per model)");
    let bench = run_benchmark();
    let outcomes = [
        criterion_1(&bench),
        criterion_2(&bench),
        criterion_3(&bench),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
    ];
    let mut failed = 0;
    for (i, (ok, detail)) in outcomes.iter().enumerate() {
        println!(
            "[{}] criterion {}: {detail}",
            if *ok { "PASS" } else { "FAIL" },
            i + 1
        );
        failed += usize::from(!ok);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
