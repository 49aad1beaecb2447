//! Manifest loading and per-clip feature streams shared by the subcommands.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crashseq_core::dataio::{self, ClipManifestEntry, Split};
use crashseq_core::featx::{self, ClipStreams, FeaturePipeline, Streams};
use crashseq_core::{ModalitySpec, Result};
use rayon::prelude::*;

use crate::SplitArg;

pub struct Dataset {
    pub manifest_dir: PathBuf,
    pub entries: Vec<ClipManifestEntry>,
}

/// Loads a manifest; if no clip has a split yet, assigns a seeded 70:30 split.
pub fn load(manifest: &Path, seed: u64) -> Result<Dataset> {
    let mut entries = dataio::load_manifest(manifest)?;
    if entries.iter().all(|e| e.split == Split::Unassigned) {
        log::info!("manifest has no split marks; using a stratified 70:30 split with seed {seed}");
        entries = dataio::assign_splits(&entries, 0.7, seed)?;
    } else if entries.iter().any(|e| e.split == Split::Unassigned) {
        log::warn!("clips without a split mark are only used with --split all");
    }
    let manifest_dir = match manifest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok(Dataset { manifest_dir, entries })
}

impl Dataset {
    pub fn select(&self, split: SplitArg) -> Vec<ClipManifestEntry> {
        self.entries
            .iter()
            .filter(|e| match split {
                SplitArg::Train => e.split == Split::Train,
                SplitArg::Test => e.split == Split::Test,
                SplitArg::All => true,
            })
            .cloned()
            .collect()
    }
}

/// Where feature streams come from.
pub struct StreamSource<'a> {
    pub pipeline: &'a FeaturePipeline,
    pub spec: &'a ModalitySpec,
    pub manifest_dir: &'a Path,
    /// Pre-extracted AVFX files; with `reuse_only_present` missing files are computed.
    pub features_dir: Option<&'a Path>,
    pub reuse_only_present: bool,
}

const ALL_STREAMS: [(Streams, &str); 3] =
    [(Streams::RGB, "rgb"), (Streams::FLOW, "flow"), (Streams::OVERLAY, "overlay")];

fn slot(s: &mut ClipStreams, which: Streams) -> &mut Option<crashseq_core::FeatureSequence> {
    if which == Streams::RGB {
        &mut s.rgb
    } else if which == Streams::FLOW {
        &mut s.flow
    } else {
        &mut s.overlay
    }
}

fn clip_streams(entry: &ClipManifestEntry, src: &StreamSource, need: Streams) -> Result<ClipStreams> {
    let mut out = ClipStreams::default();
    let mut missing: Option<Streams> = None;
    for (which, name) in ALL_STREAMS {
        if !need.contains(which) {
            continue;
        }
        let file = src.features_dir.map(|d| d.join(featx::feature_file_name(&entry.clip_id, name)));
        match file {
            Some(f) if !src.reuse_only_present || f.exists() => {
                *slot(&mut out, which) = Some(dataio::read_feature_file(&f)?);
            }
            _ => missing = Some(missing.map_or(which, |m| m.union(which))),
        }
    }
    if let Some(m) = missing {
        let frames = dataio::read_frame_sequence(&entry.frames_dir(src.manifest_dir))?;
        let mut computed = src.pipeline.compute_streams(&entry.clip_id, &frames, src.spec, m)?;
        for (which, _) in ALL_STREAMS {
            if m.contains(which) {
                *slot(&mut out, which) = slot(&mut computed, which).take();
            }
        }
    }
    Ok(out)
}

/// Streams for every entry, in entry order.
pub fn streams_for(entries: &[ClipManifestEntry], src: &StreamSource, need: Streams) -> Result<Vec<ClipStreams>> {
    let done = AtomicUsize::new(0);
    let step = (entries.len() / 10).max(1);
    entries
        .par_iter()
        .map(|e| {
            let s = clip_streams(e, src, need).map_err(|err| err.context(format!("clip {}", e.clip_id)))?;
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if n.is_multiple_of(step) || n == entries.len() {
                log::info!("features: {n}/{} clips", entries.len());
            }
            Ok(s)
        })
        .collect()
}

/// Names the streams to write for each clip.
pub fn stream_names(need: Streams) -> Vec<&'static str> {
    ALL_STREAMS.iter().filter(|(s, _)| need.contains(*s)).map(|(_, n)| *n).collect()
}

pub fn stream_of<'a>(s: &'a ClipStreams, name: &str) -> Option<&'a crashseq_core::FeatureSequence> {
    match name {
        "rgb" => s.rgb.as_ref(),
        "flow" => s.flow.as_ref(),
        "overlay" => s.overlay.as_ref(),
        _ => None,
    }
}

pub fn require_file(path: &Path, what: &str) -> std::result::Result<(), String> {
    if path.exists() {
        Ok(())
    } else {
        Err(format!("{what} {} does not exist", path.display()))
    }
}
