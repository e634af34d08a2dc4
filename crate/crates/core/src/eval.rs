//! Confidence-binned evaluation, trial aggregation and report export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nca::Prediction;

/// Threshold above which a prediction counts as high confidence.
pub const HIGH_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub label_pred: usize,
    pub confidence: f64,
    pub label_true: Option<usize>,
    pub class_probs: Vec<f64>,
}

/// One record per row of `pred`, with true labels when given.
pub fn records_from(pred: &Prediction, labels: Option<&[usize]>) -> Result<Vec<PredictionRecord>> {
    if let Some(l) = labels {
        if l.len() != pred.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} predictions",
                l.len(),
                pred.len()
            )));
        }
    }
    Ok((0..pred.len())
        .map(|i| PredictionRecord {
            label_pred: pred.labels[i],
            confidence: pred.confidences[i],
            label_true: labels.map(|l| l[i]),
            class_probs: pred.class_probs.row(i).to_vec(),
        })
        .collect())
}

/// Edges `0.0, 0.1, …, 1.0`.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Model and data description carried by every report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model: String,
    pub seed: u64,
    pub m: Option<usize>,
    pub latent_dim: Option<usize>,
    pub kernel_path: Option<String>,
    pub dataset: String,
    pub dataset_sha256: String,
    pub n_train: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub bins: Vec<f64>,
    pub counts: Vec<usize>,
    /// Per-bin accuracy, `None` for empty bins. Absent for unlabeled data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracies: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall_accuracy: Option<f64>,
    pub high_confidence_threshold: f64,
    pub high_confidence_fraction: f64,
}

impl ConfidenceReport {
    pub fn with_meta(mut self, meta: ReportMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn bin_of(edges: &[f64], c: f64) -> usize {
    let last = edges.len() - 2;
    if c >= edges[last + 1] {
        return last;
    }
    // first edge strictly greater than c, minus one
    edges.partition_point(|&e| e <= c) - 1
}

/// Counts and accuracy per confidence bin. Bins are `[e_k, e_{k+1})` with
/// the last one closed. Accuracy appears only when every record is labeled.
pub fn confidence_histogram(
    records: &[PredictionRecord],
    bin_edges: &[f64],
) -> Result<ConfidenceReport> {
    if records.is_empty() {
        return Err(Error::invalid("no records to bin"));
    }
    if bin_edges.len() < 2
        || bin_edges
            .windows(2)
            .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::invalid(
            "bin edges must be at least two strictly increasing values",
        ));
    }
    let lo = bin_edges[0];
    let hi = *bin_edges.last().unwrap();
    if let Some(r) = records
        .iter()
        .find(|r| !(r.confidence >= lo && r.confidence <= hi))
    {
        return Err(Error::invalid(format!(
            "confidence {} outside [{lo}, {hi}]",
            r.confidence
        )));
    }
    let labeled = records.iter().all(|r| r.label_true.is_some());
    let nb = bin_edges.len() - 1;
    let mut counts = vec![0usize; nb];
    let mut correct = vec![0usize; nb];
    let mut high = 0usize;
    for r in records {
        let b = bin_of(bin_edges, r.confidence);
        counts[b] += 1;
        if r.label_true == Some(r.label_pred) {
            correct[b] += 1;
        }
        if r.confidence > HIGH_CONFIDENCE {
            high += 1;
        }
    }
    let n = records.len() as f64;
    let (accuracies, overall) = if labeled {
        let acc = counts
            .iter()
            .zip(&correct)
            .map(|(&c, &k)| (c > 0).then(|| k as f64 / c as f64))
            .collect();
        (Some(acc), Some(correct.iter().sum::<usize>() as f64 / n))
    } else {
        (None, None)
    };
    Ok(ConfidenceReport {
        meta: ReportMeta::default(),
        bins: bin_edges.to_vec(),
        counts,
        accuracies,
        overall_accuracy: overall,
        high_confidence_threshold: HIGH_CONFIDENCE,
        high_confidence_fraction: high as f64 / n,
    })
}

pub fn accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let mut correct = 0usize;
    for r in records {
        match r.label_true {
            None => return Err(Error::invalid("accuracy needs labeled records")),
            Some(t) if t == r.label_pred => correct += 1,
            Some(_) => {}
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Sample mean and standard deviation (`n − 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Summary of `values`, independent of their order.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("nothing to summarize"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Summary { mean, std, n })
}

/// Per-metric summaries across trials: overall accuracy (when labeled),
/// high-confidence fraction, and the count in each bin.
pub fn aggregate_trials(reports: &[ConfidenceReport]) -> Result<BTreeMap<String, Summary>> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("no reports to aggregate"));
    };
    for r in reports {
        if r.bins != first.bins
            || r.meta.model != first.meta.model
            || r.meta.dataset != first.meta.dataset
        {
            return Err(Error::invalid("reports differ in model, dataset or bins"));
        }
        if r.overall_accuracy.is_some() != first.overall_accuracy.is_some() {
            return Err(Error::invalid("reports mix labeled and unlabeled data"));
        }
    }
    let mut out = BTreeMap::new();
    if first.overall_accuracy.is_some() {
        let acc: Vec<f64> = reports.iter().filter_map(|r| r.overall_accuracy).collect();
        out.insert("overall_accuracy".to_string(), summarize(&acc)?);
    }
    let high: Vec<f64> = reports.iter().map(|r| r.high_confidence_fraction).collect();
    out.insert("high_confidence_fraction".to_string(), summarize(&high)?);
    for b in 0..first.counts.len() {
        let c: Vec<f64> = reports.iter().map(|r| r.counts[b] as f64).collect();
        out.insert(format!("count_bin_{b:02}"), summarize(&c)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Pretty JSON with a trailing newline.
pub fn report_json(report: &ConfidenceReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// One row per bin: `bin_lo,bin_hi,count,accuracy`. Accuracy is empty when
/// absent.
pub fn report_csv(report: &ConfidenceReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bin_lo", "bin_hi", "count", "accuracy"])
        .expect("in-memory write");
    for (b, &count) in report.counts.iter().enumerate() {
        let acc = report
            .accuracies
            .as_ref()
            .and_then(|a| a[b])
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([
            report.bins[b].to_string(),
            report.bins[b + 1].to_string(),
            count.to_string(),
            acc,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn export_report(report: &ConfidenceReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(report),
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<ConfidenceReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
