//! Flow colour wheel (zero motion renders white) and frame blending.

use image::{Rgb, RgbImage};

use super::FlowField;
use crate::error::{Error, Result};

/// Round half up and saturate to 8 bits.
#[inline]
pub(crate) fn to_u8(x: f32) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn hsv_to_rgb(hue_deg: f32, sat: f32, val: f32) -> [f32; 3] {
    let c = val * sat;
    let h = hue_deg / 60.0;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Renders flow as hue = direction, saturation = magnitude / `max_mag`.
///
/// `max_mag <= 0` normalises by the field's own maximum magnitude (floored at 1e-6).
pub fn flow_to_color(flow: &FlowField, max_mag: f32) -> RgbImage {
    let norm = if max_mag > 0.0 { max_mag } else { flow.max_magnitude().max(1e-6) };
    let w = flow.width() as u32;
    RgbImage::from_fn(w, flow.height() as u32, |x, y| {
        let (u, v) = (flow.u.get(x as usize, y as usize), flow.v.get(x as usize, y as usize));
        let mag = u.hypot(v);
        if !(mag > 0.0) {
            return Rgb([255, 255, 255]);
        }
        let mut hue = v.atan2(u).to_degrees();
        if hue < 0.0 {
            hue += 360.0;
        }
        if hue >= 360.0 {
            hue -= 360.0;
        }
        let sat = (mag / norm).min(1.0);
        let [r, g, b] = hsv_to_rgb(hue, sat, 1.0);
        Rgb([to_u8(r * 255.0), to_u8(g * 255.0), to_u8(b * 255.0)])
    })
}

/// Per-channel `round((1 - blend) * frame + blend * flow_img)`.
pub fn overlay(frame: &RgbImage, flow_img: &RgbImage, blend: f32) -> Result<RgbImage> {
    if frame.dimensions() != flow_img.dimensions() {
        return Err(Error::Shape(format!(
            "overlay size mismatch: {:?} vs {:?}",
            frame.dimensions(),
            flow_img.dimensions()
        )));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::InvalidArgument(format!("blend must be in [0, 1], got {blend}")));
    }
    let (w, h) = frame.dimensions();
    let raw = frame
        .as_raw()
        .iter()
        .zip(flow_img.as_raw())
        .map(|(&a, &b)| to_u8((1.0 - blend) * a as f32 + blend * b as f32))
        .collect();
    Ok(RgbImage::from_raw(w, h, raw).expect("buffer size matches"))
}

/// Middlebury `.flo` encoding.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.data.len());
    out.extend_from_slice(b"PIEH");
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (u, v) in flow.u.data.iter().zip(&flow.v.data) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}
