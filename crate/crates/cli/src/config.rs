//! Run configuration: command-line flags over an optional JSON file over
//! defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use pnca_core::pnca::UpdateRule;
use pnca_core::KernelPath;
use serde::{Deserialize, Serialize};

/// Invalid or conflicting configuration. Reported with exit code 64.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dnn,
    Bnn,
    Ensemble,
    Nca,
    Pnca,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dnn => "dnn",
            ModelKind::Bnn => "bnn",
            ModelKind::Ensemble => "ensemble",
            ModelKind::Nca => "nca",
            ModelKind::Pnca => "pnca",
        }
    }

    /// NCA-style models embed into a latent space; the others output logits.
    pub fn is_metric(self) -> bool {
        matches!(self, ModelKind::Nca | ModelKind::Pnca)
    }

    /// Number of networks the model holds by default.
    pub fn default_particles(self) -> Option<usize> {
        match self {
            ModelKind::Dnn | ModelKind::Nca => None,
            ModelKind::Ensemble => Some(5),
            ModelKind::Bnn | ModelKind::Pnca => Some(20),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn parse_kernel_path(s: &str) -> Result<KernelPath, String> {
    KernelPath::from_str(s).map_err(|e| e.to_string())
}

fn parse_update(s: &str) -> Result<UpdateRule, String> {
    match s {
        "nadam" => Ok(UpdateRule::Nadam),
        "plain" => Ok(UpdateRule::Plain),
        other => Err(format!(
            "unknown update rule {other:?} (expected nadam or plain)"
        )),
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad layer width {p:?}"))
        })
        .collect()
}

/// Flags of `pnca run`. Every value is optional so that a config file can
/// supply it.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with the same keys as the flags (dashes become underscores)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Labeled training examples drawn per trial
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size for dnn, ensemble and bnn
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Particles (pnca, bnn) or members (ensemble)
    #[arg(long)]
    pub particles: Option<usize>,
    /// Embedding dimension for nca and pnca
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_parser = parse_hidden)]
    pub hidden: Option<Vec<usize>>,
    /// exact or orf; automatic when unset
    #[arg(long, value_parser = parse_kernel_path)]
    pub kernel_path: Option<KernelPath>,
    #[arg(long)]
    pub orf_features: Option<usize>,
    /// nadam or plain
    #[arg(long, value_parser = parse_update)]
    pub update: Option<UpdateRule>,
    #[arg(long)]
    pub prior_std: Option<f64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// IDX images the training subsets are drawn from
    #[arg(long, value_name = "FILE")]
    pub train_images: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub train_labels: Option<PathBuf>,
    /// IDX test images; without them the unused training pool is the test set
    #[arg(long, value_name = "FILE")]
    pub test_images: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub test_labels: Option<PathBuf>,
    /// Rotation in degrees for the shifted test set
    #[arg(long)]
    pub rotate: Option<f64>,
    /// Directory of images evaluated as out-of-distribution data
    #[arg(long, value_name = "DIR")]
    pub ood_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Write trained parameters next to the reports
    #[arg(long)]
    pub save_models: bool,
}

/// On-disk form of [`RunArgs`].
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelKind>,
    pub n_train: Option<usize>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub particles: Option<usize>,
    pub latent_dim: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub kernel_path: Option<KernelPath>,
    pub orf_features: Option<usize>,
    pub update: Option<UpdateRule>,
    pub prior_std: Option<f64>,
    pub num_classes: Option<usize>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub rotate: Option<f64>,
    pub ood_dir: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub save_models: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))
    }
}

/// Fully resolved settings of one `run`. Embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelKind,
    pub n_train: usize,
    pub seed: u64,
    pub trials: usize,
    pub epochs: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Networks in the model: 1 for nca and dnn.
    pub particles: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    pub hidden: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_path: Option<KernelPath>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orf_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update: Option<UpdateRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    pub rotate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_dir: Option<PathBuf>,
    /// Where results go; not part of the embedded config.
    #[serde(skip)]
    pub output: PathBuf,
    #[serde(skip)]
    pub save_models: bool,
}

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_N_TRAIN: usize = 100;
pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_BATCH: usize = 20;
pub const DEFAULT_LATENT: usize = 10;
pub const DEFAULT_HIDDEN: [usize; 2] = [200, 200];
pub const DEFAULT_ROTATE: f64 = 60.0;
pub const DEFAULT_PRIOR_STD: f64 = 1.0;

fn reject(model: ModelKind, flag: &str, present: bool) -> Result<(), UsageError> {
    if present {
        Err(usage(format!("--{flag} does not apply to model {model}")))
    } else {
        Ok(())
    }
}

fn positive(flag: &str, v: usize) -> Result<usize, UsageError> {
    if v == 0 {
        Err(usage(format!("--{flag} must be positive")))
    } else {
        Ok(v)
    }
}

/// Merges flags, file and defaults, then validates per model.
pub fn parse_config(args: &RunArgs, file: Option<&FileConfig>) -> Result<RunConfig, UsageError> {
    let empty = FileConfig::default();
    let f = file.unwrap_or(&empty);
    macro_rules! pick {
        ($field:ident) => {
            args.$field.clone().or_else(|| f.$field.clone())
        };
    }
    let model = pick!(model).unwrap_or(ModelKind::Pnca);
    let n_train = positive("n-train", pick!(n_train).unwrap_or(DEFAULT_N_TRAIN))?;
    if model.is_metric() && n_train < 2 {
        return Err(usage(format!("--n-train must be at least 2 for {model}")));
    }
    let trials = positive("trials", pick!(trials).unwrap_or(DEFAULT_TRIALS))?;
    let epochs = positive("epochs", pick!(epochs).unwrap_or(DEFAULT_EPOCHS))?;
    let lr = pick!(lr).unwrap_or(DEFAULT_LR);
    if !(lr.is_finite() && lr > 0.0) {
        return Err(usage(format!("--lr must be a positive number, got {lr}")));
    }
    let hidden = pick!(hidden).unwrap_or_else(|| DEFAULT_HIDDEN.to_vec());
    if hidden.contains(&0) {
        return Err(usage("--hidden widths must be positive"));
    }

    let batch_size = pick!(batch_size);
    let particles = pick!(particles);
    let latent_dim = pick!(latent_dim);
    let kernel_path = pick!(kernel_path);
    let orf_features = pick!(orf_features);
    let update = pick!(update);
    let prior_std = pick!(prior_std);

    if model.is_metric() {
        reject(model, "batch-size", batch_size.is_some())?;
    }
    if model.default_particles().is_none() {
        reject(model, "particles", particles.is_some())?;
    }
    if !model.is_metric() {
        reject(model, "latent-dim", latent_dim.is_some())?;
    }
    if model != ModelKind::Pnca {
        reject(model, "kernel-path", kernel_path.is_some())?;
        reject(model, "orf-features", orf_features.is_some())?;
        reject(model, "update", update.is_some())?;
    }
    if model != ModelKind::Bnn {
        reject(model, "prior-std", prior_std.is_some())?;
    }
    if let Some(f) = orf_features {
        if f < 2 || f % 2 != 0 {
            return Err(usage(format!(
                "--orf-features must be even and at least 2, got {f}"
            )));
        }
    }
    if let Some(p) = prior_std {
        if p.is_nan() || p <= 0.0 {
            return Err(usage(format!("--prior-std must be positive, got {p}")));
        }
    }

    let rotate = pick!(rotate).unwrap_or(DEFAULT_ROTATE);
    if !rotate.is_finite() {
        return Err(usage("--rotate must be finite"));
    }
    let num_classes = pick!(num_classes);
    if num_classes == Some(0) {
        return Err(usage("--num-classes must be positive"));
    }
    let train_images = pick!(train_images).ok_or_else(|| usage("--train-images is required"))?;
    let train_labels = pick!(train_labels).ok_or_else(|| usage("--train-labels is required"))?;
    let test_images = pick!(test_images);
    let test_labels = pick!(test_labels);
    if test_images.is_some() != test_labels.is_some() {
        return Err(usage(
            "--test-images and --test-labels must be given together",
        ));
    }

    Ok(RunConfig {
        model,
        n_train,
        seed: pick!(seed).unwrap_or(0),
        trials,
        epochs,
        lr,
        batch_size: (!model.is_metric())
            .then(|| positive("batch-size", batch_size.unwrap_or(DEFAULT_BATCH)))
            .transpose()?,
        particles: match model.default_particles() {
            Some(d) => positive("particles", particles.unwrap_or(d))?,
            None => 1,
        },
        latent_dim: model
            .is_metric()
            .then(|| positive("latent-dim", latent_dim.unwrap_or(DEFAULT_LATENT)))
            .transpose()?,
        hidden,
        kernel_path,
        orf_features,
        update: (model == ModelKind::Pnca).then(|| update.unwrap_or(UpdateRule::Nadam)),
        prior_std: (model == ModelKind::Bnn).then(|| prior_std.unwrap_or(DEFAULT_PRIOR_STD)),
        num_classes,
        train_images,
        train_labels,
        test_images,
        test_labels,
        rotate,
        ood_dir: pick!(ood_dir),
        output: pick!(output).unwrap_or_else(|| PathBuf::from("pnca-out")),
        save_models: args.save_models || f.save_models.unwrap_or(false),
    })
}

/// Reads the `--config` file named in `args`, if any, and resolves.
pub fn resolve(args: &RunArgs) -> Result<RunConfig, UsageError> {
    let file = args.config.as_deref().map(FileConfig::load).transpose()?;
    parse_config(args, file.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_data() -> RunArgs {
        RunArgs {
            train_images: Some("i".into()),
            train_labels: Some("l".into()),
            ..Default::default()
        }
    }

    #[test]
    fn defaults() {
        let c = parse_config(&with_data(), None).unwrap();
        assert_eq!((c.epochs, c.lr, c.n_train, c.trials), (100, 0.001, 100, 10));
        assert_eq!(c.model, ModelKind::Pnca);
        assert_eq!(c.particles, 20);
        assert_eq!(c.latent_dim, Some(10));
        assert_eq!(c.hidden, vec![200, 200]);
        assert_eq!(c.rotate, 60.0);
        assert_eq!(c.batch_size, None);
    }

    #[test]
    fn per_model_defaults() {
        for (model, m) in [
            (ModelKind::Ensemble, 5),
            (ModelKind::Bnn, 20),
            (ModelKind::Dnn, 1),
            (ModelKind::Nca, 1),
        ] {
            let c = parse_config(
                &RunArgs {
                    model: Some(model),
                    ..with_data()
                },
                None,
            )
            .unwrap();
            assert_eq!(c.particles, m, "{model}");
        }
        let c = parse_config(
            &RunArgs {
                model: Some(ModelKind::Bnn),
                ..with_data()
            },
            None,
        )
        .unwrap();
        assert_eq!((c.batch_size, c.prior_std), (Some(20), Some(1.0)));
    }

    #[test]
    fn particles_flag() {
        let c = parse_config(
            &RunArgs {
                model: Some(ModelKind::Pnca),
                particles: Some(5),
                ..with_data()
            },
            None,
        )
        .unwrap();
        assert_eq!(c.particles, 5);
    }

    #[test]
    fn validation_names_the_flag() {
        let e = parse_config(
            &RunArgs {
                epochs: Some(0),
                ..with_data()
            },
            None,
        )
        .unwrap_err();
        assert!(e.0.contains("--epochs"));
        let e = parse_config(
            &RunArgs {
                model: Some(ModelKind::Dnn),
                particles: Some(3),
                ..with_data()
            },
            None,
        )
        .unwrap_err();
        assert!(e.0.contains("--particles"));
        let e = parse_config(
            &RunArgs {
                model: Some(ModelKind::Nca),
                batch_size: Some(3),
                ..with_data()
            },
            None,
        )
        .unwrap_err();
        assert!(e.0.contains("--batch-size"));
        let e = parse_config(
            &RunArgs {
                lr: Some(-1.0),
                ..with_data()
            },
            None,
        )
        .unwrap_err();
        assert!(e.0.contains("--lr"));
        let e = parse_config(
            &RunArgs {
                orf_features: Some(7),
                ..with_data()
            },
            None,
        )
        .unwrap_err();
        assert!(e.0.contains("--orf-features"));
        let e = parse_config(&RunArgs::default(), None).unwrap_err();
        assert!(e.0.contains("--train-images"));
    }

    #[test]
    fn flags_override_file() {
        let file: FileConfig = serde_json::from_str(r#"{"epochs": 7, "lr": 0.01, "model": "nca", "train_images": "a", "train_labels": "b"}"#).unwrap();
        let c = parse_config(
            &RunArgs {
                epochs: Some(3),
                ..Default::default()
            },
            Some(&file),
        )
        .unwrap();
        assert_eq!((c.epochs, c.lr, c.model), (3, 0.01, ModelKind::Nca));
        assert_eq!(c.train_images, PathBuf::from("a"));
    }

    #[test]
    fn unknown_file_keys_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"epoch": 7}"#).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"bogus": 1}"#).unwrap();
        assert!(FileConfig::load(&p).is_err());
    }

    #[test]
    fn hidden_parser() {
        assert_eq!(parse_hidden("200,200").unwrap(), vec![200, 200]);
        assert_eq!(parse_hidden("").unwrap(), Vec::<usize>::new());
        assert!(parse_hidden("2,x").is_err());
    }
}
