//! `report` and `inspect` subcommands.

use std::fmt::Write as _;
use std::path::Path;

use pnca_core::data::{load_idx, load_image_dir};
use pnca_core::eval::{report_csv, ConfidenceReport};
use pnca_core::nn::{load_params, PARAMS_MAGIC};
use pnca_core::pnca::{load_ensemble, ENSEMBLE_MAGIC};
use pnca_core::{Error, Result};

/// CSV for a report file: bins of a single report, or the summary table of
/// a run's `report.json`.
pub fn report_to_csv(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    if value.get("bins").is_some() {
        let report: ConfidenceReport =
            serde_json::from_value(value).map_err(|e| Error::Format {
                path: path.into(),
                message: e.to_string(),
            })?;
        return Ok(report_csv(&report));
    }
    let Some(summary) = value.get("summary").and_then(|s| s.as_object()) else {
        return Err(Error::Format {
            path: path.into(),
            message: "neither a confidence report nor a run report".into(),
        });
    };
    let mut out = String::from("set,metric,mean,std,n\n");
    for (set, metrics) in summary {
        for (metric, s) in metrics.as_object().into_iter().flatten() {
            let field = |k: &str| s.get(k).map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{set},{metric},{},{},{}",
                field("mean"),
                field("std"),
                field("n")
            )
            .unwrap();
        }
    }
    Ok(out)
}

fn label_histogram(labels: &[usize]) -> String {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Human-readable description of a dataset, parameter file, ensemble file,
/// report or image directory.
pub fn inspect(path: &Path, labels: Option<&Path>) -> Result<String> {
    let mut out = String::new();
    if path.is_dir() {
        let (set, skipped) = load_image_dir(path, 28)?;
        writeln!(out, "kind: image directory").unwrap();
        writeln!(out, "images: {}", set.len()).unwrap();
        writeln!(out, "skipped: {skipped}").unwrap();
        writeln!(out, "sha256: {}", set.sha256()).unwrap();
        return Ok(out);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    if bytes.starts_with(PARAMS_MAGIC) {
        let (spec, params) = load_params(path)?;
        writeln!(out, "kind: parameters").unwrap();
        writeln!(out, "layers: {:?}", spec.layer_dims()).unwrap();
        writeln!(
            out,
            "activations: {} / {}",
            spec.hidden_activation(),
            spec.output_activation()
        )
        .unwrap();
        writeln!(out, "params: {}", params.len()).unwrap();
    } else if bytes.starts_with(ENSEMBLE_MAGIC) {
        let (spec, ens) = load_ensemble(path)?;
        writeln!(out, "kind: ensemble").unwrap();
        writeln!(out, "members: {}", ens.len()).unwrap();
        writeln!(out, "layers: {:?}", spec.layer_dims()).unwrap();
        writeln!(out, "params per member: {}", spec.param_count()).unwrap();
    } else if bytes.first() == Some(&b'{') {
        let value: serde_json::Value =
            serde_json::from_slice(&bytes).map_err(|e| Error::Format {
                path: path.into(),
                message: e.to_string(),
            })?;
        writeln!(out, "kind: report").unwrap();
        for key in [
            "model",
            "seed",
            "m",
            "latent_dim",
            "kernel_path",
            "dataset",
            "n_train",
            "overall_accuracy",
        ] {
            if let Some(v) = value.get(key) {
                writeln!(out, "{key}: {v}").unwrap();
            }
        }
        if let Some(t) = value.get("trials").and_then(|t| t.as_array()) {
            writeln!(out, "trials: {}", t.len()).unwrap();
        }
    } else {
        let set = load_idx(path, labels)?;
        writeln!(out, "kind: idx images").unwrap();
        writeln!(out, "images: {}", set.len()).unwrap();
        writeln!(out, "size: {}x{}", set.height(), set.width()).unwrap();
        if let Some(l) = set.labels() {
            writeln!(out, "label counts: {}", label_histogram(l)).unwrap();
        }
        writeln!(out, "sha256: {}", set.sha256()).unwrap();
    }
    Ok(out)
}
