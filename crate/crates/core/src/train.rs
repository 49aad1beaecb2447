//! Batching, Adam, the training loop and checkpoint files.
//!
//! Checkpoint layout (little-endian):
//!
//! | bytes            | content                                         |
//! |------------------|-------------------------------------------------|
//! | 0..8             | magic `CSEQCKPT`                                |
//! | 8..12            | format version, u32                             |
//! | 12..16           | header length `n`, u32                          |
//! | 16..16+n         | JSON header: config, metadata, tensor index     |
//! | 16+n..           | f32 tensor payloads in index order              |

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureSequence;
use crate::error::{Error, Result};
use crate::featx::{ModalitySpec, PreprocConfig};
use crate::model::{self, Dropout, ModelConfig, ModelParams, PaddedBatch, Scalar};
use crate::{fsutil, seed};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSEQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm cap; `0` disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Fraction of the training split held out per class for model selection.
    pub val_fraction: f64,
    /// Z-score every feature dimension with statistics of the training frames.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 30,
            grad_clip_norm: 1.0,
            seed: 0,
            shuffle: true,
            val_fraction: 0.0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must be in [0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return bad(format!("grad_clip_norm must be >= 0, got {}", self.grad_clip_norm));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Pads sequences to the longest one; see [`PaddedBatch`].
pub fn pad_batch(seqs: &[&FeatureSequence]) -> Result<PaddedBatch<f32>> {
    let views: Vec<_> = seqs.iter().map(|s| s.data.view()).collect();
    PaddedBatch::from_views(&views)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(AdamState { m: ModelParams::zeros(cfg)?, v: ModelParams::zeros(cfg)? })
    }
}

/// One Adam update with bias correction (`step_index` starts at 1). The
/// gradient is rescaled to `grad_clip_norm` first when its global norm exceeds it.
/// Returns the pre-clipping gradient norm.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
    step_index: u64,
) -> Result<f64> {
    if step_index == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    let norm = grads.sum_squares().to_f64().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm { cfg.grad_clip_norm / norm } else { 1.0 };
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let t = step_index as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let f = F::from_f64;
    let (clip, b1f, b2f, lr, eps) = (f(clip), f(b1), f(b2), f(cfg.learning_rate), f(cfg.epsilon));
    let (bc1, bc2) = (f(bc1), f(bc2));
    let gs = grads.named();
    let ms = state.m.named_mut();
    let vs = state.v.named_mut();
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params.named_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
            let g = g * clip;
            *m = b1f * *m + (F::one() - b1f) * g;
            *v = b2f * *v + (F::one() - b2f) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
    }
    if !params.all_finite() || !state.m.all_finite() || !state.v.all_finite() {
        return Err(Error::NonFinite(format!("adam update at step {step_index}")));
    }
    Ok(norm)
}

/// Per-dimension affine input normalisation, `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    /// Statistics over every frame of every sequence; std is floored at 1e-6.
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for s in seqs {
            if sum.is_empty() {
                sum = vec![0.0; s.dim()];
                sq = vec![0.0; s.dim()];
            } else if s.dim() != sum.len() {
                return Err(Error::Shape(format!(
                    "clip {} has feature dim {}, expected {}",
                    s.clip_id,
                    s.dim(),
                    sum.len()
                )));
            }
            for row in s.data.rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += v as f64 * v as f64;
                }
            }
            n += s.len();
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no frames to normalise".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-6)).collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        if seq.dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "clip {} has feature dim {}, normaliser expects {}",
                seq.clip_id,
                seq.dim(),
                self.mean.len()
            )));
        }
        let mut out = seq.clone();
        for mut row in out.data.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - self.mean[j]) / self.std[j]) as f32;
            }
        }
        Ok(out)
    }
}

/// A labelled input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureSequence,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Inference-mode mean loss on the training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept as best.
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Best validation accuracy (ties to the earlier epoch); the last epoch without validation data.
    pub best: ModelParams<f32>,
    pub last: ModelParams<f32>,
    pub history: History,
    /// Input normalisation the parameters were trained under.
    pub norm: Option<FeatureNorm>,
}

/// Inference logits for `seqs`, computed `batch_size` clips at a time.
pub fn batched_logits(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    seqs: &[&FeatureSequence],
    batch_size: usize,
) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((seqs.len(), cfg.num_classes));
    for (c, chunk) in seqs.chunks(batch_size.max(1)).enumerate() {
        let batch = pad_batch(chunk)?;
        let logits = model::predict_logits(&batch, params, cfg)?;
        let start = c * batch_size.max(1);
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&logits);
    }
    Ok(out)
}

/// Argmax per row; ties go to class 0.
pub fn argmax_labels(logits: &Array2<f32>) -> Vec<u8> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Inference-mode mean cross-entropy over `data`.
pub fn mean_loss(params: &ModelParams<f32>, cfg: &ModelConfig, data: &[Example], batch_size: usize) -> Result<f64> {
    let seqs: Vec<&FeatureSequence> = data.iter().map(|e| &e.features).collect();
    let logits = batched_logits(params, cfg, &seqs, batch_size)?;
    let labels: Vec<u8> = data.iter().map(|e| e.label).collect();
    let mut total = 0.0f64;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(&labels) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
        total += lse - row[y as usize] as f64;
    }
    Ok(total / data.len() as f64)
}

fn accuracy(params: &ModelParams<f32>, cfg: &ModelConfig, data: &[Example], batch_size: usize) -> Result<f64> {
    let seqs: Vec<&FeatureSequence> = data.iter().map(|e| &e.features).collect();
    let preds = argmax_labels(&batched_logits(params, cfg, &seqs, batch_size)?);
    let hits = preds.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    Ok(hits as f64 / data.len() as f64)
}

fn check_examples(data: &[Example], cfg: &ModelConfig, what: &str) -> Result<()> {
    for e in data {
        if e.label as usize >= cfg.num_classes {
            return Err(Error::InvalidArgument(format!("{what} clip {} has label {}", e.features.clip_id, e.label)));
        }
        if e.features.dim() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "{what} clip {} has feature dim {}, model expects {}",
                e.features.clip_id,
                e.features.dim(),
                cfg.input_dim
            )));
        }
    }
    Ok(())
}

/// Trains from the seeded initialisation for `train_cfg.epochs` epochs.
pub fn fit(train: &[Example], val: &[Example], model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<FitOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_examples(train, model_cfg, "train")?;
    check_examples(val, model_cfg, "validation")?;
    let norm = if train_cfg.standardize {
        Some(FeatureNorm::from_sequences(train.iter().map(|e| &e.features))?)
    } else {
        None
    };
    let normalise = |data: &[Example]| -> Result<Vec<Example>> {
        data.iter()
            .map(|e| {
                Ok(Example {
                    features: match &norm {
                        Some(n) => n.apply(&e.features)?,
                        None => e.features.clone(),
                    },
                    label: e.label,
                })
            })
            .collect()
    };
    let (train, val) = (&normalise(train)?[..], &normalise(val)?[..]);

    let mut params = ModelParams::<f32>::init(model_cfg, train_cfg.seed)?;
    let mut state = AdamState::new(model_cfg)?;
    let bs = train_cfg.batch_size;
    let initial_loss = mean_loss(&params, model_cfg, train, bs)?;
    let mut history = History { initial_loss, epochs: Vec::with_capacity(train_cfg.epochs), best_epoch: 0 };
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=train_cfg.epochs {
        order.sort_unstable();
        if train_cfg.shuffle {
            order.shuffle(&mut seed::rng(train_cfg.seed, &[seed::TAG_SHUFFLE, epoch as u64]));
        }
        let mut loss_sum = 0.0f64;
        for (b, idx) in order.chunks(bs).enumerate() {
            let seqs: Vec<&FeatureSequence> = idx.iter().map(|&i| &train[i].features).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train[i].label).collect();
            let batch = pad_batch(&seqs)?;
            let key = seed::derive(train_cfg.seed, &[seed::TAG_DROPOUT, epoch as u64, b as u64]);
            let ctx = |e: Error| e.context(format!("epoch {epoch}, batch {b}"));
            let (loss, grads) =
                model::loss_and_grad(&batch, &labels, &params, model_cfg, Dropout::Seeded(key)).map_err(ctx)?;
            step += 1;
            adam_step(&mut params, &grads, &mut state, train_cfg, step).map_err(ctx)?;
            loss_sum += loss as f64 * idx.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_accuracy = if val.is_empty() { None } else { Some(accuracy(&params, model_cfg, val, bs)?) };
        log::info!(
            "epoch {epoch}/{}: train loss {train_loss:.5}{}",
            train_cfg.epochs,
            val_accuracy.map(|a| format!(", val accuracy {a:.4}")).unwrap_or_default()
        );
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
                history.best_epoch = epoch;
            }
        }
        history.epochs.push(EpochRecord { epoch, train_loss, val_accuracy });
    }
    let best = match best {
        Some((_, p)) => p,
        None => {
            history.best_epoch = train_cfg.epochs;
            params.clone()
        }
    };
    Ok(FitOutcome { best, last: params, history, norm })
}

/// Everything needed to rebuild a model's inputs, stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub val_history: Vec<Option<f64>>,
    pub modality: Option<ModalitySpec>,
    pub preproc: Option<PreprocConfig>,
    pub extractor_seed: Option<u64>,
    pub train_config: Option<TrainConfig>,
    pub feature_norm: Option<FeatureNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams<f32>, meta: TrainingMeta) -> Self {
        Checkpoint { format_version: CHECKPOINT_VERSION, config, params, meta }
    }

    /// Applies the stored input normalisation, if any.
    pub fn prepare(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        match &self.meta.feature_norm {
            Some(n) => n.apply(seq),
            None => Ok(seq.clone()),
        }
    }

    /// Inference logits for raw (unnormalised) sequences.
    pub fn logits(&self, seqs: &[&FeatureSequence], batch_size: usize) -> Result<Array2<f32>> {
        let prepared = seqs.iter().map(|s| self.prepare(s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&FeatureSequence> = prepared.iter().collect();
        batched_logits(&self.params, &self.config, &refs, batch_size)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.check_shapes(&ckpt.config)?;
    if !ckpt.params.all_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let named = ckpt.params.named();
    let mut offset = 0;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += 4 * t.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: ckpt.config.clone(), meta: ckpt.meta.clone(), tensors })
        .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let fail = |m: String| Error::format(origin, m);
    if bytes.len() < 16 {
        return Err(fail(format!("truncated: {} bytes, header needs 16", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic, not a checkpoint".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(8);
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let hlen = word(12) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| fail(format!("truncated: header of {hlen} bytes does not fit")))?;
    let header: Header = serde_json::from_slice(&bytes[16..body]).map_err(|e| fail(format!("bad header: {e}")))?;
    header.config.validate()?;
    let expected = ModelParams::<f32>::expected_shapes(&header.config);
    if expected.len() != header.tensors.len() {
        return Err(fail(format!("config implies {} tensors, index lists {}", expected.len(), header.tensors.len())));
    }
    let payload = &bytes[body..];
    let mut params = ModelParams::<f32>::zeros(&header.config)?;
    let mut cursor = 0;
    for ((entry, (want_name, want_shape)), (_, mut dst)) in header.tensors.iter().zip(&expected).zip(params.named_mut())
    {
        if &entry.name != want_name || &entry.shape != want_shape {
            return Err(fail(format!(
                "tensor {} {:?} disagrees with config ({want_name} {want_shape:?})",
                entry.name, entry.shape
            )));
        }
        if entry.offset != cursor {
            return Err(fail(format!("tensor {} at offset {}, expected {cursor}", entry.name, entry.offset)));
        }
        let n = dst.len() * 4;
        let src = payload.get(cursor..cursor + n).ok_or_else(|| fail(format!("truncated in tensor {}", entry.name)))?;
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        cursor += n;
    }
    if cursor != payload.len() {
        return Err(fail(format!("{} trailing bytes after tensors", payload.len() - cursor)));
    }
    if !params.all_finite() {
        return Err(fail("non-finite parameter values".into()));
    }
    Ok(Checkpoint { format_version: version, config: header.config, params, meta: header.meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fsutil::atomic_write(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn scalar_cfg() -> ModelConfig {
        ModelConfig { dropout_rate: 0.0, ..ModelConfig::new(2, 2, 1, 1) }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let cfg = scalar_cfg();
        let mut p = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let before = p.clone();
        let g = ModelParams::<f64>::zeros(&cfg).unwrap();
        let mut st = AdamState::new(&cfg).unwrap();
        let zero = st.clone();
        adam_step(&mut p, &g, &mut st, &TrainConfig::default(), 1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st, zero);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = scalar_cfg();
        let mut p = ModelParams::<f64>::zeros(&cfg).unwrap();
        let mut g = ModelParams::<f64>::zeros(&cfg).unwrap();
        g.head_b[0] = 1.0;
        let tc = TrainConfig { learning_rate: 1e-3, grad_clip_norm: 0.0, ..TrainConfig::default() };
        let mut st = AdamState::new(&cfg).unwrap();
        adam_step(&mut p, &g, &mut st, &tc, 1).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.head_b[0] - expected).abs() < 1e-15);
        assert_eq!(p.head_b[1], 0.0);
    }

    #[test]
    fn adam_clips_global_norm() {
        let cfg = scalar_cfg();
        let mut g = ModelParams::<f64>::zeros(&cfg).unwrap();
        g.head_b[0] = 6.0;
        g.head_b[1] = 8.0;
        let tc = TrainConfig { grad_clip_norm: 1.0, ..TrainConfig::default() };
        let mut p = ModelParams::<f64>::zeros(&cfg).unwrap();
        let mut st = AdamState::new(&cfg).unwrap();
        let norm = adam_step(&mut p, &g, &mut st, &tc, 1).unwrap();
        assert_eq!(norm, 10.0);
        // m = (1 - beta1) * g * 0.1
        assert!((st.m.head_b[0] - 0.1 * 0.6).abs() < 1e-12);
        assert!((st.m.head_b[1] - 0.1 * 0.8).abs() < 1e-12);
        assert!(adam_step(&mut p, &g, &mut st, &tc, 0).is_err());
    }

    fn toy(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let s = if label == 1 { 1.0 } else { -1.0 };
                let t = 3 + i % 3;
                let data = Array2::from_shape_fn((t, 4), |(r, c)| s * (0.5 + 0.1 * c as f32) + 0.01 * r as f32);
                Example { features: FeatureSequence::new(format!("c{i}"), data).unwrap(), label }
            })
            .collect()
    }

    fn toy_cfgs() -> (ModelConfig, TrainConfig) {
        (
            ModelConfig::new(4, 8, 1, 2),
            TrainConfig { learning_rate: 1e-2, batch_size: 2, epochs: 5, seed: 3, ..TrainConfig::default() },
        )
    }

    #[test]
    fn separable_pair_loss_decreases() {
        let (mc, tc) = toy_cfgs();
        let data = toy(2);
        let out = fit(&data, &[], &mc, &tc).unwrap();
        let end = mean_loss(&out.last, &mc, &data, 2).unwrap();
        assert!(end < out.history.initial_loss, "{end} vs {}", out.history.initial_loss);
        assert_eq!(out.history.epochs.len(), 5);
        assert_eq!(out.history.best_epoch, 5);
        assert_eq!(out.best, out.last);
    }

    #[test]
    fn fit_is_deterministic_and_validates() {
        let (mc, tc) = toy_cfgs();
        let data = toy(10);
        let a = fit(&data[..8], &data[8..], &mc, &tc).unwrap();
        let b = fit(&data[..8], &data[8..], &mc, &tc).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.history, b.history);
        assert!(a.history.epochs.iter().all(|e| e.val_accuracy.is_some()));
        let zero = TrainConfig { epochs: 0, ..tc.clone() };
        assert!(fit(&data, &[], &mc, &zero).is_err());
        assert!(fit(&[], &[], &mc, &tc).is_err());
        let mut bad = data.clone();
        bad[0].label = 2;
        assert!(fit(&bad, &[], &mc, &tc).is_err());
    }

    #[test]
    fn best_epoch_prefers_earlier_ties() {
        let (mc, tc) = toy_cfgs();
        let data = toy(12);
        let out = fit(&data[..8], &data[8..], &mc, &tc).unwrap();
        let accs: Vec<f64> = out.history.epochs.iter().map(|e| e.val_accuracy.unwrap()).collect();
        let top = accs.iter().cloned().fold(f64::MIN, f64::max);
        let first = accs.iter().position(|&a| a == top).unwrap() + 1;
        assert_eq!(out.history.best_epoch, first);
    }

    #[test]
    fn loss_is_batch_size_independent() {
        let (mc, _) = toy_cfgs();
        let p = ModelParams::<f32>::init(&mc, 5).unwrap();
        let data = toy(8);
        let full = mean_loss(&p, &mc, &data, 8).unwrap();
        let halves = mean_loss(&p, &mc, &data, 4).unwrap();
        assert!((full - halves).abs() < 1e-6);
    }

    #[test]
    fn pad_batch_masks() {
        let a = FeatureSequence::new("a", Array2::ones((3, 2))).unwrap();
        let b = FeatureSequence::new("b", Array2::ones((5, 2))).unwrap();
        let pb = pad_batch(&[&a, &b]).unwrap();
        assert_eq!(pb.max_len(), 5);
        assert_eq!(pb.mask.row(0).to_vec(), vec![true, true, true, false, false]);
        assert!(pb.mask.row(1).iter().all(|&m| m));
        assert!(pb.features.slice(ndarray::s![0, 3.., ..]).iter().all(|&v| v == 0.0));
        let c = FeatureSequence::new("c", Array2::ones((2, 3))).unwrap();
        assert!(pad_batch(&[&a, &c]).is_err());
    }

    #[test]
    fn feature_norm_standardises_training_frames() {
        let a = FeatureSequence::new("a", Array2::from_shape_vec((2, 2), vec![1.0, 5.0, 3.0, 5.0]).unwrap()).unwrap();
        let b = FeatureSequence::new("b", Array2::from_shape_vec((2, 2), vec![1.0, 5.0, 3.0, 5.0]).unwrap()).unwrap();
        let n = FeatureNorm::from_sequences([&a, &b]).unwrap();
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 1e-6]);
        let z = n.apply(&a).unwrap();
        assert_eq!(z.data.as_slice().unwrap(), &[-1.0, 0.0, 1.0, 0.0]);
        let c = FeatureSequence::new("c", Array2::ones((1, 3))).unwrap();
        assert!(n.apply(&c).is_err());
        assert!(FeatureNorm::from_sequences([&a, &c]).is_err());
        assert!(FeatureNorm::from_sequences(std::iter::empty::<&FeatureSequence>()).is_err());
    }

    #[test]
    fn standardised_fit_matches_manual_normalisation() {
        let (mc, tc) = toy_cfgs();
        let data = toy(6);
        let out = fit(&data, &[], &mc, &tc).unwrap();
        let norm = out.norm.clone().unwrap();
        let manual: Vec<Example> =
            data.iter().map(|e| Example { features: norm.apply(&e.features).unwrap(), label: e.label }).collect();
        let plain = fit(&manual, &[], &mc, &TrainConfig { standardize: false, ..tc }).unwrap();
        assert!(plain.norm.is_none());
        assert_eq!(out.last, plain.last);
        let ck = Checkpoint::new(
            mc.clone(),
            out.last.clone(),
            TrainingMeta { feature_norm: out.norm, ..Default::default() },
        );
        let raw: Vec<&FeatureSequence> = data.iter().map(|e| &e.features).collect();
        let normed: Vec<&FeatureSequence> = manual.iter().map(|e| &e.features).collect();
        assert_eq!(ck.logits(&raw, 4).unwrap(), batched_logits(&out.last, &mc, &normed, 4).unwrap());
    }

    fn sample_ckpt() -> Checkpoint {
        let cfg = ModelConfig::new(6, 8, 2, 2);
        let params = ModelParams::init(&cfg, 42).unwrap();
        Checkpoint::new(
            cfg,
            params,
            TrainingMeta {
                epoch: 3,
                seed: 42,
                loss_history: vec![0.7, 0.5, 0.25],
                feature_norm: Some(FeatureNorm {
                    mean: vec![0.1, -0.3, 1.0 / 3.0, 0.0, 2.5, 7e-9],
                    std: vec![1.0, 0.2, 0.7, 1e-6, 3.0, 0.45],
                }),
                ..TrainingMeta::default()
            },
        )
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample_ckpt();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());

        let seq = FeatureSequence::new("x", Array2::from_shape_fn((4, 6), |(t, d)| (t * 6 + d) as f32 * 0.1)).unwrap();
        let cfg = &ck.config;
        assert_eq!(
            batched_logits(&ck.params, cfg, &[&seq], 1).unwrap(),
            batched_logits(&back.params, cfg, &[&seq], 1).unwrap()
        );
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let ck = sample_ckpt();
        let bytes = encode_checkpoint(&ck).unwrap();
        let p = Path::new("t.ckpt");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, p).unwrap_err().to_string().contains("magic"));

        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(decode_checkpoint(&bad, p).unwrap_err().to_string().contains("version"));

        for cut in [10, 40, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], p).is_err(), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode_checkpoint(&longer, p).is_err());

        // Header claims a different d_model than the stored tensors.
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        let edited = header.replacen("\"d_model\":8", "\"d_model\":4", 1);
        assert_ne!(edited, header);
        let mut forged = bytes[..12].to_vec();
        forged.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        forged.extend_from_slice(edited.as_bytes());
        forged.extend_from_slice(&bytes[16 + hlen..]);
        assert!(decode_checkpoint(&forged, p).unwrap_err().to_string().contains("disagrees"));
    }
}
