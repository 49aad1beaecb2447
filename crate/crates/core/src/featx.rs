//! Frame preprocessing, the built-in feature extractor and assembly of the
//! four input modalities (RGB, flow colour, flow overlay, RGB ‖ flow).

use std::path::Path;

use image::RgbImage;
use ndarray::{concatenate, Array2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ClipManifestEntry, FeatureSequence};
use crate::error::{Error, Result};
use crate::optflow::{self, render::to_u8, FlowParams};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocConfig {
    /// Frames are resized to `target_size x target_size`.
    pub target_size: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Keep frames `0, stride, 2*stride, ...`.
    pub frame_stride: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig { target_size: 224, mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225], frame_stride: 5 }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::InvalidArgument("target_size must be >= 1".into()));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument(format!("std components must be > 0, got {:?}", self.std)));
        }
        if self.frame_stride == 0 {
            return Err(Error::InvalidArgument("frame_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Flow,
    Overlay,
    RgbConcatFlow,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Flow, Modality::Overlay, Modality::RgbConcatFlow];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Overlay => "overlay",
            Modality::RgbConcatFlow => "rgb_concat_flow",
        }
    }

    pub fn needs(self) -> Streams {
        match self {
            Modality::Rgb => Streams::RGB,
            Modality::Flow => Streams::FLOW,
            Modality::Overlay => Streams::OVERLAY,
            Modality::RgbConcatFlow => Streams::RGB.union(Streams::FLOW),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality {s:?}")))
    }
}

/// How a modality's frames are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalitySpec {
    pub kind: Modality,
    /// Weight of the flow image when blending (overlay only).
    pub blend: f32,
    pub flow_params: FlowParams,
    /// Flow magnitude (px between sampled frames) rendered at full saturation. `0` = per-frame maximum.
    pub flow_max_mag: f32,
}

impl Default for ModalitySpec {
    fn default() -> Self {
        ModalitySpec { kind: Modality::Rgb, blend: 0.5, flow_params: FlowParams::default(), flow_max_mag: 25.0 }
    }
}

impl ModalitySpec {
    pub fn with_kind(&self, kind: Modality) -> Self {
        ModalitySpec { kind, ..self.clone() }
    }
}

/// Offset-0 strided sampling; the first frame is always kept.
pub fn sample_frames<T: Clone>(frames: &[T], stride: usize) -> Vec<T> {
    frames.iter().step_by(stride.max(1)).cloned().collect()
}

/// Bilinear resize with half-pixel centred coordinates.
pub fn resize_bilinear(img: &RgbImage, height: u32, width: u32) -> RgbImage {
    let (w_in, h_in) = img.dimensions();
    if (w_in, h_in) == (width, height) {
        return img.clone();
    }
    let sx = w_in as f32 / width as f32;
    let sy = h_in as f32 / height as f32;
    let src = |o: u32, scale: f32, n: u32| {
        let c = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f32);
        let i0 = c.floor() as u32;
        (i0, (i0 + 1).min(n - 1), c - i0 as f32)
    };
    RgbImage::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = src(x, sx, w_in);
        let (y0, y1, fy) = src(y, sy, h_in);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let p = |xx, yy| img.get_pixel(xx, yy)[c] as f32;
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            *o = to_u8(top * (1.0 - fy) + bot * fy);
        }
        image::Rgb(out)
    })
}

/// Channel-major `3 x H x W` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFrame {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl NormalizedFrame {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// `(pixel / 255 - mean_c) / std_c` per channel.
pub fn normalize(img: &RgbImage, cfg: &PreprocConfig) -> NormalizedFrame {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = (px[c] as f32 / 255.0 - cfg.mean[c]) / cfg.std[c];
        }
    }
    NormalizedFrame { height: h, width: w, data }
}

struct ConvLayer {
    c_in: usize,
    c_out: usize,
    /// `[c_out][c_in][3][3]`
    weights: Vec<f32>,
}

impl ConvLayer {
    /// 3x3 convolution, stride 2, zero padding 1, followed by ReLU.
    fn forward(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let ho = (h - 1) / 2 + 1;
        let wo = (w - 1) / 2 + 1;
        let mut out = vec![0.0f32; self.c_out * ho * wo];
        for (co, plane) in out.chunks_mut(ho * wo).enumerate() {
            for ci in 0..self.c_in {
                let k = &self.weights[(co * self.c_in + ci) * 9..][..9];
                let src = &input[ci * h * w..][..h * w];
                for oy in 0..ho {
                    for ky in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..][..w];
                        let dst = &mut plane[oy * wo..][..wo];
                        for kx in 0..3 {
                            let wgt = k[ky * 3 + kx];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix >= 0 && (ix as usize) < w {
                                    *d += wgt * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }
        (out, ho, wo)
    }
}

/// Fixed random-projection CNN: four stride-2 3x3 conv + ReLU blocks
/// (3 -> 8 -> 16 -> 32 -> 64 channels) and global average pooling.
///
/// Weights are drawn once from `N(0, 2 / fan_in)` keyed on the seed and never trained.
pub struct ConvExtractor {
    layers: Vec<ConvLayer>,
}

pub const BUILTIN_CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];

impl ConvExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[seed::TAG_EXTRACTOR]);
        let layers = BUILTIN_CHANNELS
            .windows(2)
            .map(|io| {
                let (c_in, c_out) = (io[0], io[1]);
                let std = (2.0 / (9 * c_in) as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let weights = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng) as f32).collect();
                ConvLayer { c_in, c_out, weights }
            })
            .collect();
        ConvExtractor { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.c_out).unwrap_or(0)
    }

    pub fn extract_frame(&self, frame: &NormalizedFrame) -> Result<Vec<f32>> {
        if frame.data.len() != 3 * frame.height * frame.width || frame.height == 0 || frame.width == 0 {
            return Err(Error::Shape(format!(
                "extractor expects a 3xHxW frame, got {} values for {}x{}",
                frame.data.len(),
                frame.height,
                frame.width
            )));
        }
        let (mut act, mut h, mut w) = (frame.data.clone(), frame.height, frame.width);
        for layer in &self.layers {
            (act, h, w) = layer.forward(&act, h, w);
        }
        let n = (h * w) as f32;
        Ok(act.chunks(h * w).map(|c| c.iter().sum::<f32>() / n).collect())
    }

    /// Features of every frame; frames are processed in parallel, results are order-stable.
    pub fn extract(&self, clip_id: &str, frames: &[NormalizedFrame]) -> Result<FeatureSequence> {
        if frames.is_empty() {
            return Err(Error::Shape("no frames to extract".into()));
        }
        let rows: Vec<Vec<f32>> = frames.par_iter().map(|f| self.extract_frame(f)).collect::<Result<_>>()?;
        let d = self.output_dim();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let data = Array2::from_shape_vec((frames.len(), d), flat).map_err(|e| Error::Shape(e.to_string()))?;
        FeatureSequence::new(clip_id, data)
    }
}

/// Which per-frame feature streams a request needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams(u8);

impl Streams {
    pub const RGB: Streams = Streams(1);
    pub const FLOW: Streams = Streams(2);
    pub const OVERLAY: Streams = Streams(4);

    pub const fn union(self, other: Streams) -> Streams {
        Streams(self.0 | other.0)
    }

    pub fn contains(self, other: Streams) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn for_modalities(kinds: &[Modality]) -> Streams {
        kinds.iter().fold(Streams(0), |acc, k| acc.union(k.needs()))
    }
}

/// Per-frame features of one clip, one entry per stream that was requested.
#[derive(Debug, Clone, Default)]
pub struct ClipStreams {
    pub rgb: Option<FeatureSequence>,
    pub flow: Option<FeatureSequence>,
    pub overlay: Option<FeatureSequence>,
}

impl ClipStreams {
    /// Combines streams into the input sequence of `kind`.
    pub fn compose(&self, kind: Modality) -> Result<FeatureSequence> {
        let need = |s: &Option<FeatureSequence>, name: &str| {
            s.clone().ok_or_else(|| Error::InvalidArgument(format!("{name} stream missing for {kind}")))
        };
        match kind {
            Modality::Rgb => need(&self.rgb, "rgb"),
            Modality::Flow => need(&self.flow, "flow"),
            Modality::Overlay => need(&self.overlay, "overlay"),
            Modality::RgbConcatFlow => {
                let rgb = need(&self.rgb, "rgb")?;
                let flow = need(&self.flow, "flow")?;
                concat_streams(&rgb, &flow)
            }
        }
    }
}

/// `[rgb_t ‖ flow_t]` over the common prefix of both streams.
pub fn concat_streams(rgb: &FeatureSequence, flow: &FeatureSequence) -> Result<FeatureSequence> {
    let t = rgb.len().min(flow.len());
    if t == 0 {
        return Err(Error::Shape(format!("no common frames to concatenate for {}", rgb.clip_id)));
    }
    let data = concatenate(Axis(1), &[rgb.data.slice(ndarray::s![..t, ..]), flow.data.slice(ndarray::s![..t, ..])])
        .map_err(|e| Error::Shape(e.to_string()))?;
    FeatureSequence::new(rgb.clip_id.clone(), data)
}

/// Preprocessing plus the built-in extractor.
pub struct FeaturePipeline {
    pub preproc: PreprocConfig,
    pub extractor: ConvExtractor,
}

impl FeaturePipeline {
    pub fn new(preproc: PreprocConfig, extractor_seed: u64) -> Result<Self> {
        preproc.validate()?;
        Ok(FeaturePipeline { preproc, extractor: ConvExtractor::new(extractor_seed) })
    }

    /// Strided sampling followed by resizing to the target size.
    pub fn prepare(&self, frames: &[RgbImage]) -> Vec<RgbImage> {
        let s = self.preproc.target_size;
        sample_frames(frames, self.preproc.frame_stride).par_iter().map(|f| resize_bilinear(f, s, s)).collect()
    }

    fn features_of(&self, clip_id: &str, images: &[RgbImage]) -> Result<FeatureSequence> {
        let normed: Vec<_> = images.par_iter().map(|f| normalize(f, &self.preproc)).collect();
        self.extractor.extract(clip_id, &normed)
    }

    /// Computes the requested streams from raw clip frames.
    pub fn compute_streams(
        &self,
        clip_id: &str,
        frames: &[RgbImage],
        spec: &ModalitySpec,
        streams: Streams,
    ) -> Result<ClipStreams> {
        let sampled = self.prepare(frames);
        let mut out = ClipStreams::default();
        if streams.contains(Streams::RGB) {
            out.rgb = Some(self.features_of(clip_id, &sampled)?);
        }
        if streams.contains(Streams::FLOW) || streams.contains(Streams::OVERLAY) {
            if sampled.len() < 2 {
                return Err(Error::Shape(format!(
                    "clip {clip_id} has {} sampled frame(s); flow needs 2",
                    sampled.len()
                )));
            }
            let flows = optflow::flow_sequence(&sampled, &spec.flow_params)?;
            let colored: Vec<RgbImage> =
                flows.par_iter().map(|f| optflow::flow_to_color(f, spec.flow_max_mag)).collect();
            if streams.contains(Streams::FLOW) {
                out.flow = Some(self.features_of(clip_id, &colored)?);
            }
            if streams.contains(Streams::OVERLAY) {
                // Flow frame t is paired with source frame t.
                let blended = sampled
                    .iter()
                    .zip(&colored)
                    .map(|(f, c)| optflow::overlay(f, c, spec.blend))
                    .collect::<Result<Vec<_>>>()?;
                out.overlay = Some(self.features_of(clip_id, &blended)?);
            }
        }
        Ok(out)
    }
}

pub fn feature_file_name(clip_id: &str, stream: &str) -> String {
    format!("{clip_id}.{stream}.avfx")
}

/// Loads pre-extracted streams `<clip_id>.{rgb,flow,overlay}.avfx`.
pub fn load_streams(features_dir: &Path, clip_id: &str, streams: Streams) -> Result<ClipStreams> {
    let load = |name: &str| dataio::read_feature_file(&features_dir.join(feature_file_name(clip_id, name)));
    let mut out = ClipStreams::default();
    if streams.contains(Streams::RGB) {
        out.rgb = Some(load("rgb")?);
    }
    if streams.contains(Streams::FLOW) {
        out.flow = Some(load("flow")?);
    }
    if streams.contains(Streams::OVERLAY) {
        out.overlay = Some(load("overlay")?);
    }
    Ok(out)
}

/// Builds the input sequence of one clip for `spec.kind`.
///
/// With `features_dir` the per-frame features come from AVFX files, otherwise
/// frames are read from the manifest entry and run through `pipeline`.
/// `expected_dim` rejects sequences a model was not built for.
pub fn assemble_modality(
    entry: &ClipManifestEntry,
    manifest_dir: &Path,
    spec: &ModalitySpec,
    pipeline: &FeaturePipeline,
    features_dir: Option<&Path>,
    expected_dim: Option<usize>,
) -> Result<FeatureSequence> {
    let need = spec.kind.needs();
    let streams = match features_dir {
        Some(dir) => load_streams(dir, &entry.clip_id, need)?,
        None => {
            let frames = dataio::read_frame_sequence(&entry.frames_dir(manifest_dir))?;
            pipeline.compute_streams(&entry.clip_id, &frames, spec, need)?
        }
    };
    let seq = streams.compose(spec.kind)?;
    if let Some(d) = expected_dim {
        if seq.dim() != d {
            return Err(Error::Shape(format!(
                "{} features of {} have dim {}, model expects {d}",
                spec.kind,
                entry.clip_id,
                seq.dim()
            )));
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn sampling_offsets() {
        let frames: Vec<usize> = (0..26).collect();
        assert_eq!(sample_frames(&frames, 5), vec![0, 5, 10, 15, 20, 25]);
        assert_eq!(sample_frames(&frames[..3], 5), vec![0]);
        assert_eq!(sample_frames(&frames, 1), frames);
        for t in 1..40usize {
            for s in 1..9 {
                let v: Vec<usize> = (0..t).collect();
                assert_eq!(sample_frames(&v, s).len(), t.div_ceil(s));
            }
        }
    }

    #[test]
    fn resize_cases() {
        let img = RgbImage::from_fn(224, 224, |x, y| Rgb([(x % 251) as u8, (y % 7) as u8, 3]));
        assert_eq!(resize_bilinear(&img, 224, 224), img);

        let two = RgbImage::from_fn(2, 2, |_, y| if y == 0 { Rgb([0; 3]) } else { Rgb([255; 3]) });
        let one = resize_bilinear(&two, 1, 1);
        assert_eq!(one.get_pixel(0, 0).0, [128, 128, 128]);

        let flat = RgbImage::from_pixel(37, 21, Rgb([17, 99, 230]));
        let r = resize_bilinear(&flat, 224, 224);
        assert!(r.pixels().all(|p| p.0 == [17, 99, 230]));
    }

    #[test]
    fn normalize_values() {
        let cfg = PreprocConfig::default();
        let black = normalize(&RgbImage::new(1, 1), &cfg);
        assert!((black.get(0, 0, 0) - (-0.485 / 0.229)).abs() < 1e-5);
        assert!((black.get(0, 0, 0) + 2.1179).abs() < 1e-4);
        let white = normalize(&RgbImage::from_pixel(1, 1, Rgb([255; 3])), &cfg);
        assert!((white.get(2, 0, 0) - 2.64).abs() < 1e-4);
        // 255 * 0.485 = 123.675 is not a pixel value; the nearest one is within half a step.
        let near_mean = normalize(&RgbImage::from_pixel(1, 1, Rgb([124, 0, 0])), &cfg);
        assert!(near_mean.get(0, 0, 0).abs() < 0.5 / 255.0 / 0.229 + 1e-6);
    }

    fn patterned(seed: u32) -> RgbImage {
        RgbImage::from_fn(224, 224, |x, y| {
            let v = ((x * 7 + y * 3 + seed) % 256) as u8;
            Rgb([v, if x < 60 { 255 } else { 0 }, (y / 2) as u8])
        })
    }

    #[test]
    fn extractor_shape_and_determinism() {
        let cfg = PreprocConfig::default();
        let frames: Vec<_> = (0..6).map(|i| normalize(&patterned(i), &cfg)).collect();
        let a = ConvExtractor::new(9).extract("c", &frames).unwrap();
        let b = ConvExtractor::new(9).extract("c", &frames).unwrap();
        assert_eq!((a.len(), a.dim()), (6, 64));
        assert_eq!(a, b);
        let c = ConvExtractor::new(10).extract("c", &frames).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn extractor_is_not_rotation_invariant() {
        let cfg = PreprocConfig::default();
        let img = patterned(0);
        let rot = image::imageops::rotate180(&img);
        let ex = ConvExtractor::new(1);
        let a = ex.extract_frame(&normalize(&img, &cfg)).unwrap();
        let b = ex.extract_frame(&normalize(&rot, &cfg)).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn extractor_rejects_bad_shape() {
        let bad = NormalizedFrame { height: 4, width: 4, data: vec![0.0; 10] };
        assert!(ConvExtractor::new(0).extract_frame(&bad).is_err());
    }

    #[test]
    fn concat_layout() {
        let rgb = FeatureSequence::new("c", Array2::from_shape_fn((4, 3), |(t, d)| (t * 10 + d) as f32)).unwrap();
        let flow = FeatureSequence::new("c", Array2::from_shape_fn((3, 2), |(t, d)| -((t * 10 + d) as f32))).unwrap();
        let cat = concat_streams(&rgb, &flow).unwrap();
        assert_eq!((cat.len(), cat.dim()), (3, 5));
        assert_eq!(cat.data.slice(ndarray::s![.., ..3]), rgb.data.slice(ndarray::s![..3, ..]));
        assert_eq!(cat.data.slice(ndarray::s![.., 3..]), flow.data);
    }

    #[test]
    fn concat_of_2048_streams_is_4096() {
        let a = FeatureSequence::new("c", Array2::zeros((6, 2048))).unwrap();
        let b = FeatureSequence::new("c", Array2::zeros((5, 2048))).unwrap();
        let s = ClipStreams { rgb: Some(a), flow: Some(b), overlay: None };
        let cat = s.compose(Modality::RgbConcatFlow).unwrap();
        assert_eq!((cat.len(), cat.dim()), (5, 4096));
        assert!(s.compose(Modality::Overlay).is_err());
    }

    #[test]
    fn modality_names_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert!("depth".parse::<Modality>().is_err());
    }
}
