//! Dense optical flow between consecutive frames and its RGB renderings.

mod horn_schunck;
pub(crate) mod render;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use horn_schunck::horn_schunck;
pub use render::{encode_flo, flow_to_color, overlay};

/// Single-channel real-valued image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Plane { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Border-replicating access.
    #[inline]
    pub fn at(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Mean over the pixels at least `border` away from every edge.
    pub fn interior_mean(&self, border: usize) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in border..self.height.saturating_sub(border) {
            for x in border..self.width.saturating_sub(border) {
                sum += self.get(x, y) as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Per-pixel motion `(u, v)` in pixels per frame; `u` is horizontal, `v` vertical (down).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField { u: Plane::zeros(width, height), v: Plane::zeros(width, height) }
    }

    pub fn width(&self) -> usize {
        self.u.width
    }

    pub fn height(&self) -> usize {
        self.u.height
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u.data.iter().zip(&self.v.data).map(|(u, v)| u.hypot(*v)).fold(0.0, f32::max)
    }

    /// Mean endpoint error against a uniform ground-truth flow over the interior.
    pub fn interior_endpoint_error(&self, gt_u: f32, gt_v: f32, border: usize) -> f64 {
        let e = Plane::from_fn(self.width(), self.height(), |x, y| {
            (self.u.get(x, y) - gt_u).hypot(self.v.get(x, y) - gt_v)
        });
        e.interior_mean(border)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    /// Smoothness weight; larger values give smoother, smaller flow.
    pub alpha: f32,
    pub iterations: usize,
    /// Pyramid depth, 1 = single scale.
    pub levels: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { alpha: 1.0, iterations: 100, levels: 3 }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("flow alpha must be > 0, got {}", self.alpha)));
        }
        if self.iterations == 0 || self.levels == 0 {
            return Err(Error::InvalidArgument("flow iterations and levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Rec. 601 luma in `[0, 255]`.
pub fn grayscale(img: &RgbImage) -> Plane {
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32).collect();
    Plane { width: w as usize, height: h as usize, data }
}

/// Flow between each pair of consecutive frames (`T - 1` fields).
pub fn flow_sequence(frames: &[RgbImage], params: &FlowParams) -> Result<Vec<FlowField>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("flow needs at least 2 frames, got {}", frames.len())));
    }
    let gray: Vec<Plane> = frames.par_iter().map(grayscale).collect();
    gray.par_windows(2).map(|w| horn_schunck(&w[0], &w[1], params)).collect()
}
