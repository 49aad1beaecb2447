//! Run configuration: built-in defaults, then the TOML file, then flags.

use std::path::Path;

use crashseq_core::featx::Modality;
use crashseq_core::synth::SynthConfig;
use crashseq_core::{FlowParams, ModalitySpec, ModelConfig, PreprocConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// One modality or all four.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityChoice {
    One(Modality),
    All,
}

impl ModalityChoice {
    pub fn kinds(self) -> Vec<Modality> {
        match self {
            ModalityChoice::One(m) => vec![m],
            ModalityChoice::All => Modality::ALL.to_vec(),
        }
    }
}

impl std::str::FromStr for ModalityChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(ModalityChoice::All);
        }
        s.parse().map(ModalityChoice::One).map_err(|_| {
            let names: Vec<&str> = Modality::ALL.iter().map(|m| m.name()).collect();
            format!("unknown modality {s:?}; expected one of {} or all", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalitySection {
    /// A modality name or `all`.
    pub kind: Option<String>,
    pub blend: Option<f32>,
    pub flow_max_mag: Option<f32>,
}

/// Model keys; `ffn_dim` follows `4 * d_model` unless set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_dim: Option<usize>,
    pub d_model: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub max_len: Option<usize>,
}

/// The file as written.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub preproc: PreprocConfig,
    pub modality: ModalitySection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub flow: FlowParams,
}

/// Values given on the command line; `None` leaves the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub modality: Option<ModalityChoice>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub per_class: Option<usize>,
    pub frames: Option<usize>,
    pub alpha: Option<f32>,
    pub iters: Option<usize>,
    pub levels: Option<usize>,
}

/// Fully resolved settings, echoed to the log at the start of every run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds every random stream: initialisation, shuffling, dropout, the extractor, synthesis and splits.
    pub seed: u64,
    pub threads: Option<usize>,
    pub modality_choice: ModalityChoice,
    pub modality_kind: String,
    pub preproc: PreprocConfig,
    pub modality: ModalitySpec,
    pub model: ModelConfig,
    /// Whether the file pinned `input_dim`; otherwise it is taken from the data.
    pub input_dim_fixed: bool,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

pub fn read_file(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_file(&text).map_err(|e| format!("config {}: {e}", path.display()))
}

pub fn parse_file(text: &str) -> Result<FileConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}

pub fn resolve(file: FileConfig, ov: &Overrides) -> Result<RunConfig, String> {
    let seed = ov.seed.or(file.seed).unwrap_or(0);
    let modality_choice = match (ov.modality, &file.modality.kind) {
        (Some(m), _) => m,
        (None, Some(k)) => k.parse()?,
        (None, None) => ModalityChoice::One(Modality::Rgb),
    };

    let defaults = ModelConfig::default();
    let m = &file.model;
    let d_model = ov.d_model.or(m.d_model).unwrap_or(defaults.d_model);
    let model = ModelConfig {
        input_dim: m.input_dim.unwrap_or(defaults.input_dim),
        d_model,
        num_layers: ov.layers.or(m.num_layers).unwrap_or(defaults.num_layers),
        num_heads: ov.heads.or(m.num_heads).unwrap_or(defaults.num_heads),
        ffn_dim: m.ffn_dim.unwrap_or(4 * d_model),
        dropout_rate: m.dropout_rate.unwrap_or(defaults.dropout_rate),
        num_classes: 2,
        max_len: m.max_len.unwrap_or(defaults.max_len),
    };

    let mut flow = file.flow;
    flow.alpha = ov.alpha.unwrap_or(flow.alpha);
    flow.iterations = ov.iters.unwrap_or(flow.iterations);
    flow.levels = ov.levels.unwrap_or(flow.levels);
    let spec_defaults = ModalitySpec::default();
    let modality = ModalitySpec {
        kind: match modality_choice {
            ModalityChoice::One(k) => k,
            ModalityChoice::All => Modality::Rgb,
        },
        blend: file.modality.blend.unwrap_or(spec_defaults.blend),
        flow_params: flow,
        flow_max_mag: file.modality.flow_max_mag.unwrap_or(spec_defaults.flow_max_mag),
    };

    let mut train = file.train;
    train.seed = seed;
    train.epochs = ov.epochs.unwrap_or(train.epochs);
    train.learning_rate = ov.lr.unwrap_or(train.learning_rate);
    train.batch_size = ov.batch.unwrap_or(train.batch_size);

    let mut synth = file.synth;
    synth.seed = seed;
    synth.num_clips_per_class = ov.per_class.unwrap_or(synth.num_clips_per_class);
    synth.frames_per_clip = ov.frames.unwrap_or(synth.frames_per_clip);

    let cfg = RunConfig {
        seed,
        threads: ov.threads.or(file.threads),
        modality_choice,
        modality_kind: match modality_choice {
            ModalityChoice::One(k) => k.name().to_string(),
            ModalityChoice::All => "all".into(),
        },
        preproc: file.preproc,
        modality,
        model,
        input_dim_fixed: m.input_dim.is_some(),
        train,
        synth,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    fn validate(&self) -> Result<(), String> {
        let s = |e: crashseq_core::Error| e.to_string();
        self.preproc.validate().map_err(s)?;
        self.modality.flow_params.validate().map_err(s)?;
        self.model.validate().map_err(s)?;
        self.train.validate().map_err(s)?;
        self.synth.validate().map_err(s)?;
        if !(0.0..=1.0).contains(&self.modality.blend) {
            return Err(format!("modality.blend must be in [0, 1], got {}", self.modality.blend));
        }
        if !(self.modality.flow_max_mag >= 0.0) {
            return Err(format!("modality.flow_max_mag must be >= 0, got {}", self.modality.flow_max_mag));
        }
        if self.threads == Some(0) {
            return Err("threads must be >= 1".into());
        }
        Ok(())
    }

    /// The resolved settings as a config file that reproduces them.
    pub fn to_file(&self) -> FileConfig {
        let m = &self.model;
        FileConfig {
            seed: Some(self.seed),
            threads: self.threads,
            preproc: self.preproc.clone(),
            modality: ModalitySection {
                kind: Some(self.modality_kind.clone()),
                blend: Some(self.modality.blend),
                flow_max_mag: Some(self.modality.flow_max_mag),
            },
            model: ModelSection {
                input_dim: self.input_dim_fixed.then_some(m.input_dim),
                d_model: Some(m.d_model),
                num_layers: Some(m.num_layers),
                num_heads: Some(m.num_heads),
                ffn_dim: Some(m.ffn_dim),
                dropout_rate: Some(m.dropout_rate),
                max_len: Some(m.max_len),
            },
            train: self.train.clone(),
            synth: self.synth.clone(),
            flow: self.modality.flow_params,
        }
    }

    /// TOML rendering for the run log; feeding it back as `--config` gives the same run.
    pub fn echo(&self) -> String {
        toml::to_string(&self.to_file()).unwrap_or_else(|e| format!("<unprintable config: {e}>"))
    }
}
