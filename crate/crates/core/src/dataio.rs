//! Manifests, frame directories, the AVFX feature file and dataset splits.
//!
//! AVFX layout (all integers little-endian):
//!
//! | bytes  | field                              |
//! |--------|------------------------------------|
//! | 0..4   | magic `"AVFX"`                     |
//! | 4..8   | version, u32 = 1                   |
//! | 8..12  | reserved, u32 = 0                  |
//! | 12..16 | T (frames), u32                    |
//! | 16..20 | D (feature dim), u32               |
//! | 20..   | T*D f32, row-major (frame-major)   |

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{fsutil, seed};

pub const AVFX_MAGIC: &[u8; 4] = b"AVFX";
pub const AVFX_VERSION: u32 = 1;
pub const AVFX_HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One labelled clip. `label` is 1 for an accident, 0 otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifestEntry {
    pub clip_id: String,
    pub frames_path: PathBuf,
    pub label: u8,
    pub split: Split,
    pub num_frames: u32,
}

impl ClipManifestEntry {
    /// Frame directory, resolving relative paths against the manifest's directory.
    pub fn frames_dir(&self, manifest_dir: &Path) -> PathBuf {
        if self.frames_path.is_absolute() {
            self.frames_path.clone()
        } else {
            manifest_dir.join(&self.frames_path)
        }
    }
}

// Mirrors `ClipManifestEntry` with a wide label type so out-of-range labels
// produce a field-level error instead of a serde type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    clip_id: String,
    frames_path: PathBuf,
    label: i64,
    split: Split,
    num_frames: i64,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ClipManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let err = |line: usize, message: String| Error::Manifest { path: path.to_path_buf(), line, message };
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry = serde_json::from_str(&line).map_err(|e| err(lineno, format!("parse error: {e}")))?;
        if raw.label != 0 && raw.label != 1 {
            return Err(err(lineno, format!("field `label` must be 0 or 1, got {}", raw.label)));
        }
        if raw.num_frames < 2 || raw.num_frames > u32::MAX as i64 {
            return Err(err(lineno, format!("field `num_frames` must be >= 2, got {}", raw.num_frames)));
        }
        if !seen.insert(raw.clip_id.clone()) {
            return Err(err(lineno, format!("duplicate `clip_id` {:?}", raw.clip_id)));
        }
        entries.push(ClipManifestEntry {
            clip_id: raw.clip_id,
            frames_path: raw.frames_path,
            label: raw.label as u8,
            split: raw.split,
            num_frames: raw.num_frames as u32,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ClipManifestEntry]) -> Result<()> {
    fsutil::atomic_write_with(path, |w| {
        for e in entries {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn is_frame_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        .unwrap_or(false)
}

/// Lists frame files (PNG or PPM) of a directory in lexicographic order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for ent in rd {
        let p = ent.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && is_frame_file(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(img.to_rgb8())
}

/// Decodes every frame of `dir` in filename order. All frames must share one size.
pub fn read_frame_sequence(dir: &Path) -> Result<Vec<RgbImage>> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG/PPM frames in {}", dir.display())));
    }
    let mut frames: Vec<RgbImage> = Vec::with_capacity(files.len());
    for f in &files {
        let img = read_image(f)?;
        if let Some(first) = frames.first() {
            if first.dimensions() != img.dimensions() {
                return Err(Error::Image {
                    path: f.clone(),
                    message: format!("mixed resolutions: {:?} vs {:?}", img.dimensions(), first.dimensions()),
                });
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let (w, h) = img.dimensions();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(img.as_raw());
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fsutil::atomic_write(path, &encode_ppm(img))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: PathBuf::from("<memory>"), message: e.to_string() })?;
    Ok(buf.into_inner())
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    fsutil::atomic_write(path, &encode_png(img)?)
}

/// Frame-level features of one clip: row `t` is the feature vector of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub clip_id: String,
    pub data: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(clip_id: impl Into<String>, data: Array2<f32>) -> Result<Self> {
        let seq = FeatureSequence { clip_id: clip_id.into(), data };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() || self.dim() == 0 {
            return Err(Error::Shape(format!(
                "feature sequence {} must be non-empty, got {}x{}",
                self.clip_id,
                self.len(),
                self.dim()
            )));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("features of {}", self.clip_id)));
        }
        Ok(())
    }

    /// First `len` frames.
    pub fn truncated(&self, len: usize) -> FeatureSequence {
        let len = len.min(self.len());
        FeatureSequence { clip_id: self.clip_id.clone(), data: self.data.slice(ndarray::s![..len, ..]).to_owned() }
    }
}

pub fn encode_avfx(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let (t, d) = seq.data.dim();
    let t32 = u32::try_from(t).map_err(|_| Error::Shape(format!("T={t} exceeds u32")))?;
    let d32 = u32::try_from(d).map_err(|_| Error::Shape(format!("D={d} exceeds u32")))?;
    let mut out = Vec::with_capacity(AVFX_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(AVFX_MAGIC);
    out.extend_from_slice(&AVFX_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for v in seq.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses AVFX bytes. `origin` is only used in error messages.
pub fn decode_avfx(bytes: &[u8], clip_id: &str, origin: &Path) -> Result<FeatureSequence> {
    if bytes.len() < AVFX_HEADER_LEN {
        return Err(Error::format(origin, format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != AVFX_MAGIC {
        return Err(Error::format(origin, "bad magic, expected \"AVFX\""));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != AVFX_VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let (t, d) = (word(12) as usize, word(16) as usize);
    let expected =
        t.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::format(origin, "T*D overflows"))?;
    let payload = &bytes[AVFX_HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(
            origin,
            format!("truncated payload: header says {t}x{d} ({expected} bytes), found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            origin,
            format!("payload longer than header {t}x{d}: {} trailing bytes", payload.len() - expected),
        ));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let data = Array2::from_shape_vec((t, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    FeatureSequence::new(clip_id, data)
}

pub fn write_feature_file(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let bytes = encode_avfx(seq)?;
    fsutil::atomic_write(path, &bytes)
}

/// Reads an AVFX file. The clip id is the file name up to its first `.`.
pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let clip_id = name.split('.').next().unwrap_or(name);
    decode_avfx(&bytes, clip_id, path)
}

/// Stratified, seeded split into (train, test).
///
/// Each label class is shuffled independently and `round(fraction * n)` of
/// its entries go to train. Both sides keep the input order.
pub fn split_dataset(
    entries: &[ClipManifestEntry],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ClipManifestEntry>, Vec<ClipManifestEntry>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    if entries.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    let mut is_train = vec![false; entries.len()];
    for label in [0u8, 1] {
        let mut idx: Vec<usize> =
            entries.iter().enumerate().filter(|(_, e)| e.label == label).map(|(i, _)| i).collect();
        if idx.is_empty() {
            log::warn!("split: label class {label} has no entries");
            continue;
        }
        let n_train = (train_fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut seed::rng(seed, &[seed::TAG_SPLIT, label as u64]));
        for &i in &idx[..n_train] {
            is_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = entries.iter().zip(&is_train).partition(|(_, &t)| t);
    Ok((train.into_iter().map(|(e, _)| e.clone()).collect(), test.into_iter().map(|(e, _)| e.clone()).collect()))
}

/// Returns a copy of `entries` with `split` marks set by [`split_dataset`].
pub fn assign_splits(entries: &[ClipManifestEntry], train_fraction: f64, seed: u64) -> Result<Vec<ClipManifestEntry>> {
    let (train, _) = split_dataset(entries, train_fraction, seed)?;
    let train_ids: HashSet<&str> = train.iter().map(|e| e.clip_id.as_str()).collect();
    Ok(entries
        .iter()
        .map(|e| ClipManifestEntry {
            split: if train_ids.contains(e.clip_id.as_str()) { Split::Train } else { Split::Test },
            ..e.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn entry(id: &str, label: u8) -> ClipManifestEntry {
        ClipManifestEntry {
            clip_id: id.into(),
            frames_path: PathBuf::from(format!("d/{id}")),
            label,
            split: Split::Unassigned,
            num_frames: 10,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn manifest_single_line() {
        let f = write_lines(&[r#"{"clip_id":"a1","frames_path":"d/a1","label":1,"split":"train","num_frames":38}"#]);
        let entries = load_manifest(f.path()).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].label, 1);
        assert_eq!(entries[0].split, Split::Train);
        assert_eq!(entries[0].num_frames, 38);
        assert_eq!(entries[0].frames_path, PathBuf::from("d/a1"));
    }

    #[test]
    fn manifest_rejects_bad_label_with_line() {
        let f = write_lines(&[
            r#"{"clip_id":"a1","frames_path":"d/a1","label":1,"split":"train","num_frames":38}"#,
            r#"{"clip_id":"a2","frames_path":"d/a2","label":2,"split":"train","num_frames":38}"#,
        ]);
        let msg = load_manifest(f.path()).unwrap_err().to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("label"), "{msg}");
    }

    #[test]
    fn manifest_rejects_duplicates_and_garbage() {
        let line = r#"{"clip_id":"a1","frames_path":"d/a1","label":0,"split":"test","num_frames":3}"#;
        let f = write_lines(&[line, line]);
        assert!(load_manifest(f.path()).unwrap_err().to_string().contains("duplicate"));

        let f = write_lines(&["{not json"]);
        assert!(matches!(load_manifest(f.path()), Err(Error::Manifest { line: 1, .. })));

        let f = write_lines(&[r#"{"clip_id":"a1","frames_path":"d/a1","label":0,"split":"test","num_frames":1}"#]);
        assert!(load_manifest(f.path()).is_err());

        let f = write_lines(&[
            r#"{"clip_id":"a1","frames_path":"d/a1","label":0,"split":"test","num_frames":5,"extra":1}"#,
        ]);
        assert!(load_manifest(f.path()).is_err());
    }

    #[test]
    fn manifest_thousand_lines() {
        let entries: Vec<_> = (0..1000).map(|i| entry(&format!("c{i:04}"), (i % 2) as u8)).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &entries).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), entries);
    }

    #[test]
    fn avfx_single_value_layout() {
        let seq = FeatureSequence::new("x", Array2::from_elem((1, 1), 0.5f32)).unwrap();
        let bytes = encode_avfx(&seq).unwrap();
        // 20-byte header (magic, version, reserved, T, D) + one f32.
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"AVFX");
        assert_eq!(&bytes[20..], &0.5f32.to_le_bytes());
        let back = decode_avfx(&bytes, "x", Path::new("mem")).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn avfx_rejects_truncation_magic_and_version() {
        let seq = FeatureSequence::new("x", Array2::from_elem((3, 4), 1.0f32)).unwrap();
        let bytes = encode_avfx(&seq).unwrap();
        let p = Path::new("mem");
        assert!(decode_avfx(&bytes[..bytes.len() - 1], "x", p).unwrap_err().to_string().contains("truncated"));
        assert!(decode_avfx(&bytes[..10], "x", p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'B';
        assert!(decode_avfx(&bad, "x", p).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_avfx(&bad, "x", p).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(decode_avfx(&long, "x", p).is_err());
    }

    #[test]
    fn avfx_rejects_non_finite_on_write() {
        let mut data = Array2::zeros((2, 2));
        data[[1, 1]] = f32::NAN;
        let seq = FeatureSequence { clip_id: "x".into(), data };
        assert!(matches!(encode_avfx(&seq), Err(Error::NonFinite(_))));
    }

    #[test]
    fn avfx_file_round_trip_2048() {
        let data = Array2::from_shape_fn((6, 2048), |(t, d)| (t * 2048 + d) as f32 * 1e-3 - 3.0);
        let seq = FeatureSequence::new("clip7", data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clip7.rgb.avfx");
        write_feature_file(&seq, &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(raw, encode_avfx(&seq).unwrap());
        assert_eq!(read_feature_file(&p).unwrap(), seq);
    }

    #[test]
    fn frames_read_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        let black = RgbImage::new(224, 224);
        let grey = RgbImage::from_pixel(224, 224, image::Rgb([9, 9, 9]));
        write_ppm(&dir.path().join("f001.ppm"), &grey).unwrap();
        write_ppm(&dir.path().join("f000.ppm"), &black).unwrap();
        let frames = read_frame_sequence(dir.path()).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames[0].as_raw().iter().all(|&v| v == 0));
        assert!(frames[1].as_raw().iter().all(|&v| v == 9));
    }

    #[test]
    fn frames_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_frame_sequence(dir.path()).is_err());
        write_ppm(&dir.path().join("f000.ppm"), &RgbImage::new(4, 4)).unwrap();
        write_png(&dir.path().join("f001.png"), &RgbImage::new(5, 4)).unwrap();
        assert!(read_frame_sequence(dir.path()).unwrap_err().to_string().contains("mixed"));
        std::fs::write(dir.path().join("f002.png"), b"garbage").unwrap();
        std::fs::remove_file(dir.path().join("f001.png")).unwrap();
        assert!(read_frame_sequence(dir.path()).is_err());
    }

    #[test]
    fn split_seventy_thirty_balanced() {
        let entries: Vec<_> = (0..1000).map(|i| entry(&format!("c{i}"), (i % 2) as u8)).collect();
        let (train, test) = split_dataset(&entries, 0.7, 3).unwrap();
        assert_eq!((train.len(), test.len()), (700, 300));
        assert_eq!(train.iter().filter(|e| e.label == 1).count(), 350);
        assert_eq!(test.iter().filter(|e| e.label == 1).count(), 150);
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let entries: Vec<_> = (0..10).map(|i| entry(&format!("c{i}"), (i % 3 == 0) as u8)).collect();
        assert_eq!(split_dataset(&entries, 0.5, 11).unwrap(), split_dataset(&entries, 0.5, 11).unwrap());
        let four = vec![entry("a", 0), entry("b", 0), entry("c", 1), entry("d", 1)];
        let (train, test) = split_dataset(&four, 0.5, 1).unwrap();
        for side in [&train, &test] {
            assert_eq!(side.iter().filter(|e| e.label == 0).count(), 1);
            assert_eq!(side.iter().filter(|e| e.label == 1).count(), 1);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let entries = vec![entry("a", 0), entry("b", 1)];
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(split_dataset(&entries, f, 0).is_err());
        }
        assert!(split_dataset(&[], 0.5, 0).is_err());
        // A missing class is only a warning.
        let zeros = vec![entry("a", 0), entry("b", 0)];
        let (train, test) = split_dataset(&zeros, 0.5, 0).unwrap();
        assert_eq!(train.len() + test.len(), 2);
    }
}
