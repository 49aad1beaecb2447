//! Metrics, per-clip prediction dumps, attention profiles, the VLM
//! baseline client and comparison tables.

use std::path::Path;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use ndarray::{s, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, FeatureSequence};
use crate::error::{Error, Result};
use crate::featx::sample_frames;
use crate::fsutil;
use crate::model;
use crate::train::{argmax_labels, pad_batch, Checkpoint, Example};

/// Counts with label 1 (accident) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => return Err(Error::InvalidArgument(format!("entry {i}: prediction {p} / label {y} is not binary"))),
        }
    }
    Ok(cm)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Modality or baseline name.
    pub method: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn metrics(cm: &ConfusionMatrix, method: &str) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let p = precision.unwrap_or(0.0);
    let r = recall.unwrap_or(0.0);
    Ok(MetricsReport {
        method: method.to_string(),
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision: p,
        recall: r,
        f1: f1_score(p, r),
        confusion: *cm,
        degenerate: precision.is_none() || recall.is_none() || p + r == 0.0,
    })
}

/// One line of the misclassification dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipPrediction {
    pub method: String,
    pub clip_id: String,
    pub label: u8,
    pub prediction: u8,
    /// Softmax probability of the accident class.
    pub p_accident: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<ClipPrediction>,
}

/// Classifies every clip (argmax, ties to class 0) and scores the set.
pub fn evaluate(ckpt: &Checkpoint, test: &[Example], method: &str, batch_size: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let seqs: Vec<&FeatureSequence> = test.iter().map(|e| &e.features).collect();
    let logits = ckpt.logits(&seqs, batch_size)?;
    let preds = argmax_labels(&logits);
    let labels: Vec<u8> = test.iter().map(|e| e.label).collect();
    let report = metrics(&confusion(&preds, &labels)?, method)?;
    let predictions = test
        .iter()
        .zip(&preds)
        .zip(logits.axis_iter(Axis(0)))
        .map(|((e, &p), row)| ClipPrediction {
            method: method.to_string(),
            clip_id: e.features.clip_id.clone(),
            label: e.label,
            prediction: p,
            p_accident: 1.0 / (1.0 + (row[0] - row[1]).exp()),
        })
        .collect();
    Ok(Evaluation { report, predictions })
}

/// Writes one JSON object per line, atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    fsutil::atomic_write_with(path, |w| {
        for r in rows {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Frame-wise attention received in the final encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionProfile {
    pub clip_id: String,
    pub label: Option<u8>,
    pub prediction: u8,
    /// Non-negative, sums to 1, one entry per frame.
    pub scores: Vec<f64>,
}

/// Head-averaged column sums of the final layer's attention, renormalised.
pub fn attention_profile(ckpt: &Checkpoint, seq: &FeatureSequence, label: Option<u8>) -> Result<AttentionProfile> {
    let x = ckpt.prepare(seq)?;
    let batch = pad_batch(&[&x])?;
    let att = model::attention_weights(&batch, &ckpt.params, &ckpt.config)?;
    let last = att.slice(s![ckpt.config.num_layers - 1, 0, .., .., ..]);
    let (heads, t) = (ckpt.config.num_heads, x.len());
    let norm = (heads * t) as f64;
    let mut scores: Vec<f64> =
        (0..t).map(|j| last.slice(s![.., .., j]).iter().map(|&a| a as f64).sum::<f64>() / norm).collect();
    let total: f64 = scores.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite(format!("attention profile of {}", seq.clip_id)));
    }
    scores.iter_mut().for_each(|v| *v /= total);
    let prediction = argmax_labels(&model::predict_logits(&batch, &ckpt.params, &ckpt.config)?)[0];
    Ok(AttentionProfile { clip_id: seq.clip_id.clone(), label, prediction, scores })
}

/// The question asked of every vision-language model, byte for byte.
pub const VLM_PROMPT: &str = "Is there any traffic accident/crash in the video. Write Yes or No";

#[derive(Debug, Serialize)]
struct VlmRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    images: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct VlmReply {
    text: String,
}

/// Maps the first alphabetic token of a reply to a label: yes -> 1, no -> 0.
pub fn parse_vlm_answer(text: &str) -> Result<u8> {
    let token: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" => Ok(1),
        "no" => Ok(0),
        _ => Err(Error::VlmResponse(text.to_string())),
    }
}

/// Stride-sampled frames encoded as PNG, ready for [`VlmClient::query`].
pub fn vlm_images(frames: &[RgbImage], stride: usize) -> Result<Vec<Vec<u8>>> {
    sample_frames(frames, stride).iter().map(dataio::encode_png).collect()
}

/// HTTP client for the `{model, prompt, images}` -> `{text}` protocol.
#[derive(Debug, Clone)]
pub struct VlmClient {
    pub endpoint: String,
    pub model: String,
    pub timeout: Duration,
    /// Extra attempts after a transport failure.
    pub max_retries: u32,
    /// Delay before the first retry; doubles each time.
    pub backoff: Duration,
    /// Requests in flight at once in [`VlmClient::query_many`].
    pub concurrency: usize,
}

impl VlmClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        VlmClient {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout: Duration::from_secs(60),
            max_retries: 2,
            backoff: Duration::from_millis(500),
            concurrency: 4,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into()
    }

    fn post_once(&self, agent: &ureq::Agent, body: &VlmRequest) -> Result<String> {
        let mut resp = agent
            .post(&self.endpoint)
            .send_json(body)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let raw = resp.body_mut().read_to_string().map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let reply: VlmReply = serde_json::from_str(&raw).map_err(|_| Error::VlmResponse(raw.clone()))?;
        Ok(reply.text)
    }

    /// Sends one clip's frames; retries only transport failures.
    pub fn query(&self, images: &[Vec<u8>]) -> Result<u8> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("vlm query needs at least one frame".into()));
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = VlmRequest {
            model: &self.model,
            prompt: VLM_PROMPT,
            images: images.iter().map(|i| b64.encode(i)).collect(),
        };
        let agent = self.agent();
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.post_once(&agent, &body) {
                Ok(text) => return parse_vlm_answer(&text),
                Err(Error::Transport(msg)) if attempt < self.max_retries => {
                    log::warn!("vlm attempt {} failed: {msg}; retrying in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Queries every clip with at most `concurrency` requests in flight; results keep input order.
    pub fn query_many(&self, clips: &[Vec<Vec<u8>>]) -> Result<Vec<Result<u8>>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.concurrency.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("vlm worker pool: {e}")))?;
        Ok(pool.install(|| clips.par_iter().map(|c| self.query(c)).collect()))
    }
}

/// One row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&MetricsReport> for ReportRow {
    fn from(m: &MetricsReport) -> Self {
        ReportRow { method: m.method.clone(), accuracy: m.accuracy, precision: m.precision, recall: m.recall, f1: m.f1 }
    }
}

fn non_empty(rows: &[ReportRow]) -> Result<()> {
    if rows.is_empty() {
        Err(Error::InvalidArgument("comparison report needs at least one row".into()))
    } else {
        Ok(())
    }
}

/// Aligned text table, metrics to 3 decimals.
pub fn comparison_table(rows: &[ReportRow]) -> Result<String> {
    non_empty(rows)?;
    let w = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<w$}  {:>9}  {:>9}  {:>9}  {:>9}\n", "Method", "Accuracy", "Precision", "Recall", "F1");
    for r in rows {
        out +=
            &format!("{:<w$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9.3}\n", r.method, r.accuracy, r.precision, r.recall, r.f1);
    }
    Ok(out)
}

pub const CSV_HEADER: [&str; 5] = ["method", "accuracy", "precision", "recall", "f1"];

/// CSV with full-precision values so it parses back exactly.
pub fn comparison_csv(rows: &[ReportRow]) -> Result<String> {
    non_empty(rows)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::InvalidArgument(format!(
            "csv header must be {}, got {}",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_counts() {
        let cm = confusion(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 2, fp: 1, fn_: 0, tn: 1 });
        let exact = confusion(&[1, 0, 0, 1], &[1, 0, 0, 1]).unwrap();
        assert_eq!((exact.fp, exact.fn_), (0, 0));
        let flipped = confusion(&[0, 1, 0, 0], &[1, 0, 0, 1]).unwrap();
        assert_eq!((flipped.tp, flipped.fn_, flipped.tn, flipped.fp), (cm.fn_, cm.tp, cm.fp, cm.tn));
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn metric_examples() {
        assert!((f1_score(0.881, 0.887) - 0.884).abs() < 5e-4);
        let m = metrics(&ConfusionMatrix { tp: 2, fp: 0, fn_: 0, tn: 2 }, "x").unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!m.degenerate);
        let m = metrics(&ConfusionMatrix { tp: 3, fp: 1, fn_: 2, tn: 4 }, "x").unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_empty() {
        assert!(metrics(&ConfusionMatrix::default(), "x").is_err());
        let m = metrics(&ConfusionMatrix { tp: 0, fp: 0, fn_: 0, tn: 5 }, "x").unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 0.0, 0.0, 0.0));
        assert!(m.degenerate);
        // Always predicting accident on a balanced set.
        let m = metrics(&confusion(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(), "x").unwrap();
        assert_eq!((m.accuracy, m.recall), (0.5, 1.0));
    }

    #[test]
    fn answer_parsing() {
        assert_eq!(parse_vlm_answer("Yes").unwrap(), 1);
        assert_eq!(parse_vlm_answer("no.").unwrap(), 0);
        assert_eq!(parse_vlm_answer("  **YES**, clearly").unwrap(), 1);
        assert!(matches!(parse_vlm_answer("It depends"), Err(Error::VlmResponse(_))));
        assert!(parse_vlm_answer("").is_err());
        assert!(parse_vlm_answer("Nope").is_err());
    }

    fn row(method: &str, a: f64, p: f64, r: f64, f: f64) -> ReportRow {
        ReportRow { method: method.into(), accuracy: a, precision: p, recall: r, f1: f }
    }

    #[test]
    fn table_renders_three_decimals() {
        let t = comparison_table(&[row("Proposed model", 0.883, 0.881, 0.887, 0.884)]).unwrap();
        let line = t.lines().nth(1).unwrap();
        assert!(line.starts_with("Proposed model"));
        let nums: Vec<&str> = line["Proposed model".len()..].split_whitespace().collect();
        assert_eq!(nums.join(" "), "0.883 0.881 0.887 0.884");
        assert!(t.lines().next().unwrap().split_whitespace().eq(["Method", "Accuracy", "Precision", "Recall", "F1"]));
        assert!(comparison_table(&[]).is_err());
        assert!(comparison_csv(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            row("rgb", 0.7166666666666667, 0.1, 1.0 / 3.0, 0.0),
            row("a, \"quoted\" name", 1.0, 0.5, 0.25, f1_score(0.5, 0.25)),
        ];
        let text = comparison_csv(&rows).unwrap();
        assert!(text.starts_with("method,accuracy,precision,recall,f1\n"));
        assert_eq!(parse_comparison_csv(&text).unwrap(), rows);
        assert!(parse_comparison_csv("name,acc\nx,1\n").is_err());
    }
}
