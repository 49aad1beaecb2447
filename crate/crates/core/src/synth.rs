//! Synthetic traffic clips: bright coloured discs on a dark road.
//!
//! Normal clips move every disc at constant velocity for the whole clip.
//! Accident clips make two discs meet inside the accident window; at contact
//! both reverse direction (new velocity `-k * v`) and a short burst of debris
//! flies out of the contact point. The colliding pair bounces off the frame
//! edges, so every disc stays visible in both classes. Colours and sizes are
//! shared by both classes, so only motion tells them apart.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ClipManifestEntry, Split};
use crate::error::{Error, Result};
use crate::{fsutil, seed};

const BACKGROUND: [u8; 3] = [40, 40, 40];
const PALETTE: [[u8; 3]; 4] = [[240, 200, 40], [60, 200, 230], [240, 120, 200], [120, 230, 120]];
// Radii at 224 px; scaled with the image size.
const RADII: [f32; 4] = [24.0, 20.0, 17.0, 22.0];
const DEBRIS_FRAMES: usize = 3;
const DEBRIS_PIECES: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_clips_per_class: usize,
    pub frames_per_clip: usize,
    pub image_size: u32,
    pub num_blobs: usize,
    /// Speed range in px/frame.
    pub speed_range: [f32; 2],
    /// Fractional interval of the clip in which collisions happen.
    pub accident_window: [f32; 2],
    /// Per-frame positional jitter bound in px.
    pub jitter: f32,
    /// Post-collision speed as a multiple of the incoming speed, sampled from this range.
    pub rebound_range: [f32; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_clips_per_class: 100,
            frames_per_clip: 40,
            image_size: 224,
            num_blobs: 3,
            speed_range: [2.0, 5.0],
            accident_window: [0.4, 0.7],
            jitter: 0.3,
            rebound_range: [1.5, 2.5],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames_per_clip < 10 {
            return bad(format!("frames_per_clip must be >= 10, got {}", self.frames_per_clip));
        }
        if self.num_clips_per_class == 0 || self.num_blobs < 2 {
            return bad("need >= 1 clip per class and >= 2 blobs".into());
        }
        if self.image_size < 32 {
            return bad(format!("image_size must be >= 32, got {}", self.image_size));
        }
        let [s0, s1] = self.speed_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad(format!("bad speed_range {:?}", self.speed_range));
        }
        let [w0, w1] = self.accident_window;
        if !(0.0 <= w0 && w0 < w1 && w1 <= 1.0) {
            return bad(format!("bad accident_window {:?}", self.accident_window));
        }
        if self.collision_frames().is_none() {
            return bad(format!(
                "accident_window {:?} is too short for {} frames",
                self.accident_window, self.frames_per_clip
            ));
        }
        let [k0, k1] = self.rebound_range;
        if !(k0 >= 0.5 && k0 <= k1) {
            return bad(format!("rebound_range must satisfy 0.5 <= lo <= hi, got {:?}", self.rebound_range));
        }
        if !(0.0..=0.3).contains(&self.jitter) {
            return bad(format!("jitter must be in [0, 0.3], got {}", self.jitter));
        }
        Ok(())
    }

    /// Frames in which contact may happen. When the clip is long enough the
    /// transitions into the contact frame and through the debris burst all
    /// stay inside the window; otherwise only the contact frame does.
    fn collision_frames(&self) -> Option<(usize, usize)> {
        let last = (self.frames_per_clip - 1) as f32;
        let lo = (self.accident_window[0] * last).ceil() as usize;
        let hi = (self.accident_window[1] * last).floor() as usize;
        if lo < hi && hi - lo > DEBRIS_FRAMES {
            Some((lo + 1, hi - DEBRIS_FRAMES))
        } else {
            (lo <= hi).then_some((lo, hi))
        }
    }

    fn scale(&self) -> f32 {
        self.image_size as f32 / 224.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipKind {
    Normal,
    Accident,
}

impl ClipKind {
    pub fn label(self) -> u8 {
        match self {
            ClipKind::Normal => 0,
            ClipKind::Accident => 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    x: f32,
    y: f32,
    r: f32,
    color: [u8; 3],
}

fn draw_disc(img: &mut RgbImage, d: &Disc) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = ((d.x - d.r - 1.0).floor() as i64).max(0);
    let x1 = ((d.x + d.r + 1.0).ceil() as i64).min(w - 1);
    let y0 = ((d.y - d.r - 1.0).floor() as i64).max(0);
    let y1 = ((d.y + d.r + 1.0).ceil() as i64).min(h - 1);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dist = (px as f32 - d.x).hypot(py as f32 - d.y);
            let cover = (d.r + 0.5 - dist).clamp(0.0, 1.0);
            if cover > 0.0 {
                let p = img.get_pixel_mut(px as u32, py as u32);
                for c in 0..3 {
                    let v = p.0[c] as f32 * (1.0 - cover) + d.color[c] as f32 * cover;
                    p.0[c] = v.round() as u8;
                }
            }
        }
    }
}

/// Per-frame centre of one disc.
struct Track {
    r: f32,
    color: [u8; 3],
    centres: Vec<(f32, f32)>,
}

fn speed(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> f32 {
    let [a, b] = cfg.speed_range;
    if a == b {
        a
    } else {
        rng.random_range(a..=b)
    }
}

fn jitter(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (f32, f32) {
    if cfg.jitter == 0.0 {
        return (0.0, 0.0);
    }
    let j = cfg.jitter;
    (rng.random_range(-j..=j), rng.random_range(-j..=j))
}

/// Constant-velocity disc whose whole path stays inside the frame.
fn smooth_track(cfg: &SynthConfig, slot: usize, rng: &mut ChaCha8Rng) -> Track {
    let size = cfg.image_size as f32;
    let r = RADII[slot % RADII.len()] * cfg.scale();
    let steps = (cfg.frames_per_clip - 1) as f32;
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let mut s = speed(cfg, rng);
    let margin = r + 2.0;
    let room = size - 2.0 * margin;
    // Shrink the speed only if the path could not fit at all.
    let reach = s * steps * theta.cos().abs().max(theta.sin().abs());
    if reach > room {
        s *= room / reach;
    }
    let (vx, vy) = (s * theta.cos(), s * theta.sin());
    let span = |v: f32| {
        let travel = v * steps;
        (margin - travel.min(0.0), size - margin - travel.max(0.0))
    };
    let (xl, xh) = span(vx);
    let (yl, yh) = span(vy);
    let x0 = if xh > xl { rng.random_range(xl..=xh) } else { 0.5 * (xl + xh) };
    let y0 = if yh > yl { rng.random_range(yl..=yh) } else { 0.5 * (yl + yh) };
    let centres = (0..cfg.frames_per_clip)
        .map(|t| {
            let (jx, jy) = jitter(cfg, rng);
            (x0 + vx * t as f32 + jx, y0 + vy * t as f32 + jy)
        })
        .collect();
    Track { r, color: PALETTE[slot % PALETTE.len()], centres }
}

/// Folds an unbounded coordinate back into `[lo, hi]` as if bouncing off walls.
fn reflect(x: f32, lo: f32, hi: f32) -> f32 {
    let w = hi - lo;
    let m = (x - lo).rem_euclid(2.0 * w);
    lo + if m <= w { m } else { 2.0 * w - m }
}

struct Collision {
    frame: usize,
    point: (f32, f32),
    tracks: [Track; 2],
}

/// Two discs approaching each other, touching at `frame`, then reversing.
fn colliding_pair(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Collision {
    let size = cfg.image_size as f32;
    let (lo, hi) = cfg.collision_frames().expect("validated window");
    let frame = rng.random_range(lo..=hi);
    let point = (rng.random_range(0.35 * size..=0.65 * size), rng.random_range(0.35 * size..=0.65 * size));
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let (ux, uy) = (theta.cos(), theta.sin());
    let mut tracks = [0usize, 1].map(|slot| {
        let r = RADII[slot] * cfg.scale();
        // Slot 0 arrives moving along +u, slot 1 along -u, each slightly off-axis.
        let sign = if slot == 0 { 1.0 } else { -1.0 };
        let off = rng.random_range(-0.35f32..=0.35);
        let s = speed(cfg, rng);
        let (c, sn) = (off.cos(), off.sin());
        let (dx, dy) = (ux * c - uy * sn, ux * sn + uy * c);
        let v = (sign * s * dx, sign * s * dy);
        let [k0, k1] = cfg.rebound_range;
        let k = if k0 == k1 { k0 } else { rng.random_range(k0..=k1) };
        let contact = (point.0 - sign * ux * r * 0.8, point.1 - sign * uy * r * 0.8);
        let margin = r + 2.0;
        Track {
            r,
            color: PALETTE[slot],
            centres: (0..cfg.frames_per_clip)
                .map(|t| {
                    let dt = t as f32 - frame as f32;
                    let gain = if t <= frame { 1.0 } else { -k };
                    let (jx, jy) = jitter(cfg, rng);
                    (
                        reflect(contact.0 + gain * v.0 * dt, margin, size - margin) + jx,
                        reflect(contact.1 + gain * v.1 * dt, margin, size - margin) + jy,
                    )
                })
                .collect(),
        }
    });
    // Keep the draw order stable so the slots' colours never depend on geometry.
    tracks.sort_by_key(|t| t.color);
    Collision { frame, point, tracks }
}

/// Renders one clip. Identical `(cfg.seed, clip_seed, kind)` give identical frames.
pub fn generate_clip(kind: ClipKind, cfg: &SynthConfig, clip_seed: u64) -> Result<(Vec<RgbImage>, u8)> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed, &[seed::TAG_SYNTH, clip_seed, kind.label() as u64]);
    let mut tracks = Vec::with_capacity(cfg.num_blobs);
    let mut debris = Vec::new();
    let mut debris_state = None;
    let first_free = match kind {
        ClipKind::Normal => 0,
        ClipKind::Accident => {
            let col = colliding_pair(cfg, &mut rng);
            let scale = cfg.scale();
            for i in 0..DEBRIS_PIECES {
                let angle = std::f32::consts::TAU * (i as f32 + rng.random_range(0.0..1.0)) / DEBRIS_PIECES as f32;
                let speed = rng.random_range(6.0f32..=10.0) * scale;
                let r = rng.random_range(3.0f32..=5.0) * scale;
                debris.push((angle, speed, r, PALETTE[i % 2]));
            }
            let (frame, point) = (col.frame, col.point);
            tracks.extend(col.tracks);
            debris_state = Some((frame, point));
            2
        }
    };
    for slot in first_free..cfg.num_blobs {
        tracks.push(smooth_track(cfg, slot, &mut rng));
    }

    let n = cfg.image_size;
    let frames = (0..cfg.frames_per_clip)
        .map(|t| {
            let mut img = RgbImage::from_pixel(n, n, Rgb(BACKGROUND));
            for tr in &tracks {
                let (x, y) = tr.centres[t];
                draw_disc(&mut img, &Disc { x, y, r: tr.r, color: tr.color });
            }
            if let Some((frame, (px, py))) = debris_state {
                if t >= frame && t < frame + DEBRIS_FRAMES {
                    let age = (t - frame + 1) as f32;
                    for &(angle, speed, r, color) in &debris {
                        let d = speed * age;
                        draw_disc(&mut img, &Disc { x: px + d * angle.cos(), y: py + d * angle.sin(), r, color });
                    }
                }
            }
            img
        })
        .collect();
    Ok((frames, kind.label()))
}

/// Frame index of the collision in an accident clip (`None` for normal clips).
pub fn collision_frame(kind: ClipKind, cfg: &SynthConfig, clip_seed: u64) -> Result<Option<usize>> {
    cfg.validate()?;
    if kind == ClipKind::Normal {
        return Ok(None);
    }
    let mut rng = seed::rng(cfg.seed, &[seed::TAG_SYNTH, clip_seed, kind.label() as u64]);
    Ok(Some(colliding_pair(cfg, &mut rng).frame))
}

pub fn frame_file_name(index: usize) -> String {
    format!("f{index:05}.ppm")
}

/// Writes `<out>/frames/<clip_id>/f%05d.ppm` for a balanced dataset plus
/// `<out>/manifest.jsonl` with stratified 70:30 split marks. Returns the manifest path.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    fsutil::create_dir_all(out_dir)?;
    let jobs: Vec<(ClipKind, usize)> =
        (0..cfg.num_clips_per_class).flat_map(|i| [(ClipKind::Accident, i), (ClipKind::Normal, i)]).collect();
    let entries = jobs
        .par_iter()
        .map(|&(kind, i)| -> Result<ClipManifestEntry> {
            let clip_id = match kind {
                ClipKind::Accident => format!("acc{i:04}"),
                ClipKind::Normal => format!("nor{i:04}"),
            };
            let rel = PathBuf::from("frames").join(&clip_id);
            let dir = out_dir.join(&rel);
            fsutil::create_dir_all(&dir)?;
            let (frames, label) = generate_clip(kind, cfg, i as u64)?;
            for (t, f) in frames.iter().enumerate() {
                dataio::write_ppm(&dir.join(frame_file_name(t)), f)?;
            }
            Ok(ClipManifestEntry {
                clip_id,
                frames_path: rel,
                label,
                split: Split::Unassigned,
                num_frames: frames.len() as u32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = dataio::assign_splits(&entries, 0.7, cfg.seed)?;
    let manifest = out_dir.join("manifest.jsonl");
    dataio::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Mean absolute per-pixel difference between consecutive frames.
pub fn motion_energy(frames: &[RgbImage]) -> Vec<f64> {
    frames
        .windows(2)
        .map(|w| {
            let total: u64 = w[0].as_raw().iter().zip(w[1].as_raw()).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
            total as f64 / w[0].as_raw().len() as f64
        })
        .collect()
}
