//! Multi-trial experiment: subsample, train, evaluate on clean, rotated and
//! out-of-distribution data, write reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pnca_core::baselines::{
    predict_softmax, train_bnn, train_dnn, train_ensemble, BnnConfig, DnnConfig,
};
use pnca_core::data::{load_idx, load_image_dir, rotate_images, subsample_indices, ImageSet};
use pnca_core::eval::{
    aggregate_trials, confidence_histogram, default_bin_edges, export_report, records_from,
    ReportFormat, ReportMeta, Summary,
};
use pnca_core::nca::{predict_nca, train_nca, NcaConfig};
use pnca_core::nn::save_params;
use pnca_core::numcore::{sub_seed, Rng};
use pnca_core::pnca::{predict_pnca, save_ensemble, train_pnca, PncaConfig, PncaModel};
use pnca_core::{
    ConfidenceReport, Error, LabeledDataset, MlpSpec, ParamVector, ParticleEnsemble, Prediction,
    Result,
};
use serde::Serialize;

use crate::config::{ModelKind, RunConfig};

/// Stream under the trial seed that draws the training subset.
const SUBSET_STREAM: u64 = 1;

pub const CLEAN: &str = "clean";
pub const ROTATED: &str = "rotated";
pub const OOD: &str = "ood";

/// Inputs shared by all trials.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub pool: ImageSet,
    pub test: Option<ImageSet>,
    pub ood: Option<ImageSet>,
    pub num_classes: usize,
}

fn max_label(set: &ImageSet) -> usize {
    set.labels()
        .and_then(|l| l.iter().max().copied())
        .unwrap_or(0)
}

pub fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let pool = load_idx(&cfg.train_images, Some(&cfg.train_labels))?;
    let test = match (&cfg.test_images, &cfg.test_labels) {
        (Some(i), Some(l)) => Some(load_idx(i, Some(l))?),
        _ => None,
    };
    if let Some(t) = &test {
        if (t.height(), t.width()) != (pool.height(), pool.width()) {
            return Err(Error::Data(format!(
                "test images are {}x{}, training images {}x{}",
                t.height(),
                t.width(),
                pool.height(),
                pool.width()
            )));
        }
    }
    let ood = match &cfg.ood_dir {
        None => None,
        Some(dir) => {
            if pool.height() != pool.width() {
                return Err(Error::Data("OOD images need square training images".into()));
            }
            let (set, skipped) = load_image_dir(dir, pool.height())?;
            if skipped > 0 {
                log::warn!("{skipped} files skipped in {}", dir.display());
            }
            Some(set)
        }
    };
    let seen = max_label(&pool).max(test.as_ref().map_or(0, max_label)) + 1;
    let num_classes = match cfg.num_classes {
        Some(c) if c < seen => {
            return Err(Error::Data(format!(
                "labels go up to {} but --num-classes is {c}",
                seen - 1
            )));
        }
        Some(c) => c,
        None => seen,
    };
    if cfg.n_train > pool.len() {
        return Err(Error::Data(format!(
            "--n-train {} exceeds the {} training images",
            cfg.n_train,
            pool.len()
        )));
    }
    if test.is_none() && cfg.n_train == pool.len() {
        return Err(Error::Data(
            "no images left for testing; pass --test-images".into(),
        ));
    }
    Ok(Datasets {
        pool,
        test,
        ood,
        num_classes,
    })
}

/// A trained model of any kind.
#[derive(Debug, Clone)]
pub enum Trained {
    Nca {
        spec: MlpSpec,
        params: ParamVector,
    },
    Pnca {
        spec: MlpSpec,
        model: PncaModel,
    },
    Softmax {
        spec: MlpSpec,
        members: Vec<ParamVector>,
    },
}

impl Trained {
    pub fn predict(&self, train: &LabeledDataset, set: &ImageSet) -> Result<Prediction> {
        let x = set.pixels().view();
        match self {
            Trained::Nca { spec, params } => predict_nca(spec, params, train, x),
            Trained::Pnca { spec, model } => predict_pnca(
                spec,
                &model.ensemble,
                train,
                x,
                model.path,
                model.projection.as_ref(),
            ),
            Trained::Softmax { spec, members } => predict_softmax(spec, members, x),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Trained::Nca { spec, params } => save_params(path, spec, params),
            Trained::Pnca { spec, model } => save_ensemble(path, spec, &model.ensemble),
            Trained::Softmax { spec, members } if members.len() == 1 => {
                save_params(path, spec, &members[0])
            }
            Trained::Softmax { spec, members } => {
                save_ensemble(path, spec, &ParticleEnsemble::new(members.clone())?)
            }
        }
    }

    pub fn kernel_path(&self) -> Option<String> {
        match self {
            Trained::Pnca { model, .. } => Some(model.path.to_string()),
            _ => None,
        }
    }
}

pub fn network_spec(cfg: &RunConfig, input_dim: usize, num_classes: usize) -> Result<MlpSpec> {
    let out = cfg.latent_dim.unwrap_or(num_classes);
    let mut dims = vec![input_dim];
    dims.extend(&cfg.hidden);
    dims.push(out);
    MlpSpec::new(dims)
}

pub fn train_model(
    cfg: &RunConfig,
    spec: &MlpSpec,
    data: &LabeledDataset,
    seed: u64,
) -> Result<Trained> {
    let dnn = || DnnConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size.unwrap_or(20),
        seed,
    };
    Ok(match cfg.model {
        ModelKind::Nca => {
            let m = train_nca(
                spec,
                data,
                &NcaConfig {
                    epochs: cfg.epochs,
                    lr: cfg.lr,
                    seed,
                },
            )?;
            Trained::Nca {
                spec: spec.clone(),
                params: m.params,
            }
        }
        ModelKind::Pnca => {
            let pc = PncaConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                particles: cfg.particles,
                seed,
                path: cfg.kernel_path,
                orf_features: cfg.orf_features,
                update: cfg.update.unwrap_or(pnca_core::pnca::UpdateRule::Nadam),
            };
            Trained::Pnca {
                spec: spec.clone(),
                model: train_pnca(spec, data, &pc)?,
            }
        }
        ModelKind::Dnn => Trained::Softmax {
            spec: spec.clone(),
            members: vec![train_dnn(spec, data, &dnn())?.params],
        },
        ModelKind::Ensemble => Trained::Softmax {
            spec: spec.clone(),
            members: train_ensemble(spec, data, &dnn(), cfg.particles)?
                .into_iter()
                .map(|c| c.params)
                .collect(),
        },
        ModelKind::Bnn => {
            let bc = BnnConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                batch_size: cfg.batch_size.unwrap_or(20),
                particles: cfg.particles,
                prior_std: cfg.prior_std.unwrap_or(1.0),
                seed,
            };
            Trained::Softmax {
                spec: spec.clone(),
                members: train_bnn(spec, data, &bc)?.particles,
            }
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// Keyed by evaluation set: clean, rotated, ood.
    pub reports: BTreeMap<String, ConfidenceReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub model: String,
    pub config: serde_json::Value,
    /// Mean and sample std across trials, per evaluation set and metric.
    pub summary: BTreeMap<String, BTreeMap<String, Summary>>,
    pub trials: Vec<TrialResult>,
}

/// Trial `t` runs with seed `seed ^ t`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    seed ^ t as u64
}

fn evaluate(
    model: &Trained,
    train: &LabeledDataset,
    set: &ImageSet,
    meta: ReportMeta,
) -> Result<ConfidenceReport> {
    let pred = model.predict(train, set)?;
    let records = records_from(&pred, set.labels())?;
    Ok(confidence_histogram(&records, &default_bin_edges())?.with_meta(meta))
}

pub fn run_trial(cfg: &RunConfig, data: &Datasets, t: usize) -> Result<(TrialResult, Trained)> {
    let seed = trial_seed(cfg.seed, t);
    let idx = subsample_indices(
        data.pool.len(),
        cfg.n_train,
        &mut Rng::new(sub_seed(seed, SUBSET_STREAM)),
    )?;
    let train = data.pool.select(&idx)?.to_labeled(data.num_classes)?;
    let test = match &data.test {
        Some(t) => t.clone(),
        None => {
            let rest: Vec<usize> = (0..data.pool.len())
                .filter(|i| idx.binary_search(i).is_err())
                .collect();
            data.pool.select(&rest)?
        }
    };
    let spec = network_spec(
        cfg,
        data.pool.height() * data.pool.width(),
        data.num_classes,
    )?;
    log::info!(
        "trial {t}: training {} on {} examples (seed {seed})",
        cfg.model,
        train.len()
    );
    let model = train_model(cfg, &spec, &train, seed)?;
    let config = serde_json::to_value(cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let meta = |dataset: &str, set: &ImageSet| ReportMeta {
        model: cfg.model.name().to_string(),
        seed,
        m: Some(cfg.particles),
        latent_dim: cfg.latent_dim,
        kernel_path: model.kernel_path(),
        dataset: dataset.to_string(),
        dataset_sha256: set.sha256().to_string(),
        n_train: cfg.n_train,
        prior_std: cfg.prior_std,
        config: config.clone(),
    };
    let mut reports = BTreeMap::new();
    reports.insert(
        CLEAN.to_string(),
        evaluate(&model, &train, &test, meta(CLEAN, &test))?,
    );
    let rotated = rotate_images(&test, cfg.rotate)?;
    reports.insert(
        ROTATED.to_string(),
        evaluate(&model, &train, &rotated, meta(ROTATED, &rotated))?,
    );
    if let Some(ood) = &data.ood {
        reports.insert(
            OOD.to_string(),
            evaluate(&model, &train, ood, meta(OOD, ood))?,
        );
    }
    Ok((
        TrialResult {
            trial: t,
            seed,
            reports,
        },
        model,
    ))
}

fn trial_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("trial-{t:02}"))
}

/// Runs every trial and writes `report.json` plus per-trial JSON and CSV
/// reports under `cfg.output`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    let data = load_datasets(cfg)?;
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::Io {
        path: cfg.output.clone(),
        source: e,
    })?;
    let mut trials = Vec::with_capacity(cfg.trials);
    for t in 0..cfg.trials {
        let (result, model) = run_trial(cfg, &data, t)?;
        let dir = trial_dir(&cfg.output, t);
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        for (name, report) in &result.reports {
            export_report(
                report,
                &dir.join(format!("{name}.json")),
                ReportFormat::Json,
            )?;
            export_report(report, &dir.join(format!("{name}.csv")), ReportFormat::Csv)?;
        }
        if cfg.save_models {
            model.save(&dir.join("model.bin"))?;
        }
        if let Some(acc) = result.reports[CLEAN].overall_accuracy {
            log::info!("trial {t}: clean accuracy {acc:.4}");
        }
        trials.push(result);
    }
    let mut summary = BTreeMap::new();
    for set in [CLEAN, ROTATED, OOD] {
        let reports: Vec<ConfidenceReport> = trials
            .iter()
            .filter_map(|t| t.reports.get(set).cloned())
            .collect();
        if !reports.is_empty() {
            summary.insert(set.to_string(), aggregate_trials(&reports)?);
        }
    }
    let report = RunReport {
        model: cfg.model.name().to_string(),
        config: serde_json::to_value(cfg).map_err(|e| Error::InvalidArgument(e.to_string()))?,
        summary,
        trials,
    };
    let path = cfg.output.join("report.json");
    std::fs::write(&path, run_report_json(&report)?).map_err(|e| Error::Io { path, source: e })?;
    Ok(report)
}

pub fn run_report_json(report: &RunReport) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}
