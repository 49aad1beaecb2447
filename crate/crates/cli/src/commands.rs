use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crashseq_core::dataio::{self, ClipManifestEntry};
use crashseq_core::eval::{self, MetricsReport, ReportRow, VlmClient};
use crashseq_core::featx::{FeaturePipeline, Modality, Streams};
use crashseq_core::optflow;
use crashseq_core::synth;
use crashseq_core::train::{self, Example, TrainingMeta};
use crashseq_core::{fsutil, seed, Checkpoint, Error, ModalitySpec, PreprocConfig};
use serde::{Deserialize, Serialize};

use crate::config::{ModalityChoice, RunConfig};
use crate::data::{self, Dataset, StreamSource};
use crate::{Failure, ReportFormat, SplitArg};

type Outcome = Result<(), Failure>;

pub const FEATURES_META: &str = "features.json";

/// How a directory of feature files was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesMeta {
    pub preproc: PreprocConfig,
    pub extractor_seed: u64,
    pub modality: ModalitySpec,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crashseq_core::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    bytes.push(b'\n');
    fsutil::atomic_write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> crashseq_core::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

fn usage_check(r: Result<(), String>) -> Outcome {
    r.map_err(Failure::Usage)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Outcome {
    let start = Instant::now();
    let manifest = synth::generate_dataset(&cfg.synth, out)?;
    log::info!("wrote {} clips in {:.1?}", 2 * cfg.synth.num_clips_per_class, start.elapsed());
    println!("{}", manifest.display());
    Ok(())
}

pub fn flow(cfg: &RunConfig, frames_dir: &Path, out: &Path, render: bool) -> Outcome {
    usage_check(data::require_file(frames_dir, "frames directory"))?;
    let frames = dataio::read_frame_sequence(frames_dir)?;
    let pipeline = FeaturePipeline::new(cfg.preproc.clone(), cfg.seed)?;
    let sampled = pipeline.prepare(&frames);
    let flows = optflow::flow_sequence(&sampled, &cfg.modality.flow_params)?;
    fsutil::create_dir_all(out)?;
    for (t, f) in flows.iter().enumerate() {
        fsutil::atomic_write(&out.join(format!("flow_{t:05}.flo")), &optflow::encode_flo(f))?;
        if render {
            let img = optflow::flow_to_color(f, cfg.modality.flow_max_mag);
            dataio::write_png(&out.join(format!("flow_{t:05}.png")), &img)?;
        }
    }
    log::info!(
        "{} frames sampled from {}, {} flow fields written to {}",
        sampled.len(),
        frames.len(),
        flows.len(),
        out.display()
    );
    Ok(())
}

pub fn features(cfg: &RunConfig, manifest: &Path, reuse: Option<&Path>, out: &Path) -> Outcome {
    usage_check(data::require_file(manifest, "manifest"))?;
    let ds = data::load(manifest, cfg.seed)?;
    let kinds = cfg.modality_choice.kinds();
    let need = Streams::for_modalities(&kinds);
    let pipeline = FeaturePipeline::new(cfg.preproc.clone(), cfg.seed)?;
    let src = StreamSource {
        pipeline: &pipeline,
        spec: &cfg.modality,
        manifest_dir: &ds.manifest_dir,
        features_dir: reuse,
        reuse_only_present: true,
    };
    let start = Instant::now();
    let streams = data::streams_for(&ds.entries, &src, need)?;
    fsutil::create_dir_all(out)?;
    for (e, s) in ds.entries.iter().zip(&streams) {
        for name in data::stream_names(need) {
            let seq = data::stream_of(s, name).expect("requested stream present");
            let path = out.join(crashseq_core::featx::feature_file_name(&e.clip_id, name));
            dataio::write_feature_file(seq, &path)?;
        }
    }
    let meta = FeaturesMeta { preproc: cfg.preproc.clone(), extractor_seed: cfg.seed, modality: cfg.modality.clone() };
    write_json(&out.join(FEATURES_META), &meta)?;
    log::info!(
        "features for {} clips ({}) in {:.1?}",
        ds.entries.len(),
        data::stream_names(need).join(", "),
        start.elapsed()
    );
    Ok(())
}

/// Settings the features in `dir` were built with, if recorded.
fn features_meta(dir: Option<&Path>) -> crashseq_core::Result<Option<FeaturesMeta>> {
    match dir.map(|d| d.join(FEATURES_META)) {
        Some(p) if p.exists() => Ok(Some(read_json(&p)?)),
        _ => Ok(None),
    }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    modality: Modality,
    train_clips: usize,
    val_clips: usize,
    history: &'a train::History,
    seconds: f64,
}

pub fn train(cfg: &RunConfig, manifest: &Path, features_dir: Option<&Path>, out: &Path) -> Outcome {
    usage_check(data::require_file(manifest, "manifest"))?;
    if let Some(d) = features_dir {
        usage_check(data::require_file(d, "features directory"))?;
    }
    let ds = data::load(manifest, cfg.seed)?;
    let train_entries = ds.select(SplitArg::Train);
    if train_entries.is_empty() {
        return Err(Error::InvalidArgument("manifest has no training clips".into()).into());
    }
    let (fit_entries, val_entries) = if cfg.train.val_fraction > 0.0 {
        dataio::split_dataset(
            &train_entries,
            1.0 - cfg.train.val_fraction,
            seed::derive(cfg.seed, &[seed::TAG_SPLIT, 1]),
        )?
    } else {
        (train_entries, Vec::new())
    };

    let kinds = cfg.modality_choice.kinds();
    let recorded = features_meta(features_dir)?;
    let (preproc, extractor_seed, base_spec) = match &recorded {
        Some(m) => {
            if m.preproc != cfg.preproc || m.extractor_seed != cfg.seed || !same_flow(&m.modality, &cfg.modality) {
                log::warn!("using the settings recorded in {FEATURES_META} for the checkpoint metadata");
            }
            (m.preproc.clone(), m.extractor_seed, m.modality.clone())
        }
        None => (cfg.preproc.clone(), cfg.seed, cfg.modality.clone()),
    };
    let pipeline = FeaturePipeline::new(preproc.clone(), extractor_seed)?;
    let src = StreamSource {
        pipeline: &pipeline,
        spec: &base_spec,
        manifest_dir: &ds.manifest_dir,
        features_dir,
        reuse_only_present: false,
    };
    let need = Streams::for_modalities(&kinds);
    let fit_streams = data::streams_for(&fit_entries, &src, need)?;
    let val_streams = data::streams_for(&val_entries, &src, need)?;

    for kind in kinds {
        let start = Instant::now();
        let examples = |entries: &[ClipManifestEntry], streams: &[crashseq_core::featx::ClipStreams]| {
            entries
                .iter()
                .zip(streams)
                .map(|(e, s)| Ok(Example { features: s.compose(kind)?, label: e.label }))
                .collect::<crashseq_core::Result<Vec<_>>>()
        };
        let fit_set = examples(&fit_entries, &fit_streams)?;
        let val_set = examples(&val_entries, &val_streams)?;
        let dim = fit_set[0].features.dim();
        if cfg.input_dim_fixed && cfg.model.input_dim != dim {
            return Err(Failure::Usage(format!(
                "model.input_dim is {} but {kind} features have dim {dim}",
                cfg.model.input_dim
            )));
        }
        let model_cfg = crashseq_core::ModelConfig { input_dim: dim, ..cfg.model.clone() };
        log::info!("training {kind}: {} clips ({} validation), input dim {dim}", fit_set.len(), val_set.len());
        let outcome = train::fit(&fit_set, &val_set, &model_cfg, &cfg.train)
            .map_err(|e| e.context(format!("training {kind}")))?;

        let dir = match cfg.modality_choice {
            ModalityChoice::All => out.join(kind.name()),
            ModalityChoice::One(_) => out.to_path_buf(),
        };
        let hist = &outcome.history;
        let meta = |epoch: usize| TrainingMeta {
            epoch,
            seed: cfg.seed,
            loss_history: hist.epochs.iter().map(|e| e.train_loss).collect(),
            val_history: hist.epochs.iter().map(|e| e.val_accuracy).collect(),
            modality: Some(base_spec.with_kind(kind)),
            preproc: Some(preproc.clone()),
            extractor_seed: Some(extractor_seed),
            train_config: Some(cfg.train.clone()),
            feature_norm: outcome.norm.clone(),
        };
        let best = Checkpoint::new(model_cfg.clone(), outcome.best.clone(), meta(hist.best_epoch));
        let last = Checkpoint::new(model_cfg.clone(), outcome.last.clone(), meta(cfg.train.epochs));
        train::save_checkpoint(&best, &dir.join("best"))?;
        train::save_checkpoint(&last, &dir.join("last"))?;
        let report = TrainReport {
            modality: kind,
            train_clips: fit_set.len(),
            val_clips: val_set.len(),
            history: hist,
            seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&dir.join("history.json"), &report)?;
        let final_loss = hist.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN);
        println!("{kind}: final train loss {final_loss:.4}, best epoch {} -> {}", hist.best_epoch, dir.display());
    }
    Ok(())
}

fn same_flow(a: &ModalitySpec, b: &ModalitySpec) -> bool {
    a.flow_params == b.flow_params && a.flow_max_mag == b.flow_max_mag && a.blend == b.blend
}

/// A checkpoint file, or `<dir>/best`, or `<dir>/<modality>/best`.
fn checkpoint_path(path: &Path, kind: Option<Modality>) -> Result<PathBuf, Failure> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let mut candidates = vec![path.join("best")];
    if let Some(k) = kind {
        candidates.push(path.join(k.name()).join("best"));
    }
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| Failure::Usage(format!("no checkpoint found at {}", path.display())))
}

/// Everything needed to rebuild a checkpoint's inputs.
struct InputSettings {
    spec: ModalitySpec,
    preproc: PreprocConfig,
    extractor_seed: u64,
}

fn input_settings(ck: &Checkpoint, cfg: &RunConfig, kind: Option<Modality>) -> Result<InputSettings, Failure> {
    let spec = match (&ck.meta.modality, kind) {
        (Some(s), Some(k)) if s.kind != k => {
            return Err(Failure::Usage(format!("checkpoint was trained on {}, not {k}", s.kind)))
        }
        (Some(s), _) => s.clone(),
        (None, Some(k)) => cfg.modality.with_kind(k),
        (None, None) => return Err(Failure::Usage("checkpoint records no modality; pass --modality".into())),
    };
    Ok(InputSettings {
        spec,
        preproc: ck.meta.preproc.clone().unwrap_or_else(|| cfg.preproc.clone()),
        extractor_seed: ck.meta.extractor_seed.unwrap_or(cfg.seed),
    })
}

/// Input sequences for `entries` under each settings group, computing shared streams once.
fn sequences(
    jobs: &[&InputSettings],
    entries: &[ClipManifestEntry],
    ds: &Dataset,
    features_dir: Option<&Path>,
) -> crashseq_core::Result<Vec<Vec<crashseq_core::FeatureSequence>>> {
    let key = |s: &InputSettings| {
        serde_json::to_string(&(&s.preproc, s.extractor_seed, &s.spec.flow_params, s.spec.flow_max_mag, s.spec.blend))
            .expect("settings serialise")
    };
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, j) in jobs.iter().enumerate() {
        groups.entry(key(j)).or_default().push(i);
    }
    let mut out: Vec<Option<Vec<crashseq_core::FeatureSequence>>> = vec![None; jobs.len()];
    for members in groups.values() {
        let first = jobs[members[0]];
        let pipeline = FeaturePipeline::new(first.preproc.clone(), first.extractor_seed)?;
        let kinds: Vec<Modality> = members.iter().map(|&i| jobs[i].spec.kind).collect();
        let src = StreamSource {
            pipeline: &pipeline,
            spec: &first.spec,
            manifest_dir: &ds.manifest_dir,
            features_dir,
            reuse_only_present: false,
        };
        let streams = data::streams_for(entries, &src, Streams::for_modalities(&kinds))?;
        for &i in members {
            let seqs =
                streams.iter().map(|s| s.compose(jobs[i].spec.kind)).collect::<crashseq_core::Result<Vec<_>>>()?;
            out[i] = Some(seqs);
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every job grouped")).collect())
}

pub struct EvalJob {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: SplitArg,
    pub modality: Option<ModalityChoice>,
    pub dump_predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub features_dir: Option<PathBuf>,
}

pub fn eval(cfg: &RunConfig, job: &EvalJob) -> Outcome {
    usage_check(data::require_file(&job.manifest, "manifest"))?;
    let kinds: Vec<Option<Modality>> = match job.modality {
        Some(ModalityChoice::All) => Modality::ALL.iter().map(|&k| Some(k)).collect(),
        Some(ModalityChoice::One(k)) => vec![Some(k)],
        None => vec![None],
    };
    let mut ckpts = Vec::new();
    for &k in &kinds {
        let path = if job.modality == Some(ModalityChoice::All) {
            let p = job.checkpoint.join(k.expect("all lists kinds").name()).join("best");
            if !p.is_file() {
                return Err(Failure::Usage(format!("--modality all needs {}", p.display())));
            }
            p
        } else {
            checkpoint_path(&job.checkpoint, k)?
        };
        let ck = train::load_checkpoint(&path)?;
        let settings = input_settings(&ck, cfg, k)?;
        ckpts.push((path, ck, settings));
    }

    let seed = ckpts[0].1.meta.seed;
    let ds = data::load(&job.manifest, seed)?;
    let entries = ds.select(job.split);
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("no clips in split {:?}", job.split)).into());
    }
    let settings: Vec<&InputSettings> = ckpts.iter().map(|(_, _, s)| s).collect();
    let seqs = sequences(&settings, &entries, &ds, job.features_dir.as_deref())?;

    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut dump = Vec::new();
    for ((path, ck, s), seqs) in ckpts.iter().zip(seqs) {
        let test: Vec<Example> =
            entries.iter().zip(seqs).map(|(e, f)| Example { features: f, label: e.label }).collect();
        let ev = eval::evaluate(ck, &test, s.spec.kind.name(), cfg.train.batch_size)?;
        log::info!("{}: {:?}", path.display(), ev.report.confusion);
        reports.push(ev.report);
        dump.extend(ev.predictions);
    }
    let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    print!("{}", eval::comparison_table(&rows)?);
    if let Some(p) = &job.dump_predictions {
        eval::write_jsonl(p, &dump)?;
    }
    if let Some(p) = &job.out {
        write_json(p, &reports)?;
    }
    Ok(())
}

pub fn attention(
    checkpoint: &Path,
    manifest: &Path,
    clips: &[String],
    split: SplitArg,
    out: &Path,
    features_dir: Option<&Path>,
) -> Outcome {
    usage_check(data::require_file(manifest, "manifest"))?;
    let path = checkpoint_path(checkpoint, None)?;
    let ck = train::load_checkpoint(&path)?;
    let spec = ck.meta.modality.clone().ok_or_else(|| Failure::Usage("checkpoint records no modality".into()))?;
    let settings = InputSettings {
        spec,
        preproc: ck.meta.preproc.clone().unwrap_or_default(),
        extractor_seed: ck.meta.extractor_seed.unwrap_or(ck.meta.seed),
    };
    let ds = data::load(manifest, ck.meta.seed)?;
    let entries: Vec<ClipManifestEntry> = if clips.is_empty() {
        ds.select(split)
    } else {
        clips
            .iter()
            .map(|id| {
                ds.entries
                    .iter()
                    .find(|e| &e.clip_id == id)
                    .cloned()
                    .ok_or_else(|| Failure::Usage(format!("clip {id:?} is not in the manifest")))
            })
            .collect::<Result<_, _>>()?
    };
    let seqs = sequences(&[&settings], &entries, &ds, features_dir)?.remove(0);
    let profiles = entries
        .iter()
        .zip(&seqs)
        .map(|(e, s)| eval::attention_profile(&ck, s, Some(e.label)))
        .collect::<crashseq_core::Result<Vec<_>>>()?;
    eval::write_jsonl(out, &profiles)?;
    log::info!("{} attention profiles written to {}", profiles.len(), out.display());
    Ok(())
}

pub struct VlmJob {
    pub manifest: PathBuf,
    pub endpoint: String,
    pub model: String,
    pub out: PathBuf,
    pub split: SplitArg,
    pub dump_predictions: Option<PathBuf>,
    pub concurrency: usize,
    pub timeout: f64,
}

#[derive(Serialize)]
struct VlmAnswer {
    method: String,
    clip_id: String,
    label: u8,
    prediction: Option<u8>,
    error: Option<String>,
}

pub fn vlm_compare(cfg: &RunConfig, job: &VlmJob) -> Outcome {
    usage_check(data::require_file(&job.manifest, "manifest"))?;
    if job.concurrency == 0 || !(job.timeout > 0.0) {
        return Err(Failure::Usage("--concurrency and --timeout must be positive".into()));
    }
    let ds = data::load(&job.manifest, cfg.seed)?;
    let entries = ds.select(job.split);
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!("no clips in split {:?}", job.split)).into());
    }
    let clips = entries
        .iter()
        .map(|e| {
            let frames = dataio::read_frame_sequence(&e.frames_dir(&ds.manifest_dir))?;
            eval::vlm_images(&frames, cfg.preproc.frame_stride)
        })
        .collect::<crashseq_core::Result<Vec<_>>>()?;
    let client = VlmClient {
        timeout: Duration::from_secs_f64(job.timeout),
        concurrency: job.concurrency,
        ..VlmClient::new(&job.endpoint, &job.model)
    };
    let method = format!("vlm:{}", job.model);
    let results = client.query_many(&clips)?;
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut answers = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        let (prediction, error) = match r {
            Ok(p) => {
                preds.push(p);
                labels.push(e.label);
                (Some(p), None)
            }
            Err(err) => {
                log::warn!("clip {}: {err}", e.clip_id);
                (None, Some(err.to_string()))
            }
        };
        answers.push(VlmAnswer {
            method: method.clone(),
            clip_id: e.clip_id.clone(),
            label: e.label,
            prediction,
            error,
        });
    }
    if let Some(p) = &job.dump_predictions {
        eval::write_jsonl(p, &answers)?;
    }
    if preds.is_empty() {
        return Err(Error::Transport("no clip received a usable answer".into()).into());
    }
    if preds.len() < entries.len() {
        log::warn!(
            "{} of {} clips failed and are excluded from the metrics",
            entries.len() - preds.len(),
            entries.len()
        );
    }
    let report = eval::metrics(&eval::confusion(&preds, &labels)?, &method)?;
    print!("{}", eval::comparison_table(&[ReportRow::from(&report)])?);
    write_json(&job.out, &vec![report])?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricsFile {
    Many(Vec<MetricsReport>),
    One(MetricsReport),
}

pub fn report(inputs: &[PathBuf], format: ReportFormat, out: Option<&Path>) -> Outcome {
    let mut rows = Vec::new();
    for p in inputs {
        usage_check(data::require_file(p, "input"))?;
        if p.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            rows.extend(eval::parse_comparison_csv(&text).map_err(|e| e.context(p.display().to_string()))?);
        } else {
            match read_json::<MetricsFile>(p)? {
                MetricsFile::Many(v) => rows.extend(v.iter().map(ReportRow::from)),
                MetricsFile::One(m) => rows.push(ReportRow::from(&m)),
            }
        }
    }
    let text = match format {
        ReportFormat::Text => eval::comparison_table(&rows)?,
        ReportFormat::Csv => eval::comparison_csv(&rows)?,
    };
    match out {
        Some(p) => fsutil::atomic_write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
