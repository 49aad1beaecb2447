//! Coarse-to-fine Horn–Schunck.
//!
//! At every pyramid level the second image is warped by the current flow
//! estimate and the linearised Horn–Schunck system is relaxed with Jacobi
//! sweeps on the total flow:
//!
//! ```text
//! u <- ubar - Ix * (Ix*(ubar - u0) + Iy*(vbar - v0) + It) / (alpha^2 + Ix^2 + Iy^2)
//! ```
//!
//! where `ubar` is the mean of the 8 neighbours and `(u0, v0)` is the flow
//! the warp was built from. On a single level with zero initial flow this is
//! the classic iteration.

use super::{FlowField, FlowParams, Plane};
use crate::error::{Error, Result};

// Coarser levels than this carry no usable gradient information.
const MIN_LEVEL_SIZE: usize = 8;

pub fn horn_schunck(i1: &Plane, i2: &Plane, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if i1.dims() != i2.dims() {
        return Err(Error::Shape(format!("flow frames differ in size: {:?} vs {:?}", i1.dims(), i2.dims())));
    }
    if i1.width == 0 || i1.height == 0 {
        return Err(Error::Shape("flow frames are empty".into()));
    }

    let scale = |p: &Plane| Plane { data: p.data.iter().map(|v| v / 255.0).collect(), ..*p };
    let mut pyr1 = vec![scale(i1)];
    let mut pyr2 = vec![scale(i2)];
    while pyr1.len() < params.levels {
        let last = pyr1.last().unwrap();
        if last.width.min(last.height) / 2 < MIN_LEVEL_SIZE {
            break;
        }
        let d1 = downsample(last);
        let d2 = downsample(pyr2.last().unwrap());
        pyr1.push(d1);
        pyr2.push(d2);
    }

    let alpha2 = params.alpha * params.alpha;
    let mut flow: Option<FlowField> = None;
    for (level, (a, b)) in pyr1.iter().zip(&pyr2).enumerate().rev() {
        let init = match flow.take() {
            Some(coarse) => upsample_flow(&coarse, a.width, a.height),
            None => FlowField::zeros(a.width, a.height),
        };
        let refined = refine(a, b, init, alpha2, params.iterations);
        if !refined.u.data.iter().chain(&refined.v.data).all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("horn-schunck flow at level {level}")));
        }
        flow = Some(refined);
    }
    Ok(flow.unwrap())
}

fn refine(i1: &Plane, i2: &Plane, init: FlowField, alpha2: f32, iterations: usize) -> FlowField {
    let (w, h) = i1.dims();
    let warped = warp(i2, &init);

    let mut ix = vec![0.0f32; w * h];
    let mut iy = vec![0.0f32; w * h];
    let mut it = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let dx = |p: &Plane| 0.5 * (p.at(xi + 1, yi) - p.at(xi - 1, yi));
            let dy = |p: &Plane| 0.5 * (p.at(xi, yi + 1) - p.at(xi, yi - 1));
            let k = y * w + x;
            ix[k] = 0.5 * (dx(i1) + dx(&warped));
            iy[k] = 0.5 * (dy(i1) + dy(&warped));
            // Pointwise, so that It is centred on the same pixel as Ix and Iy.
            it[k] = warped.get(x, y) - i1.get(x, y);
        }
    }

    // Per pixel: u = ubar - cx * (Ix*ubar + Iy*vbar - k), with
    // cx = Ix / (alpha^2 + Ix^2 + Iy^2) and k = Ix*u0 + Iy*v0 - It.
    let mut cx = vec![0.0f32; w * h];
    let mut cy = vec![0.0f32; w * h];
    let mut kk = vec![0.0f32; w * h];
    for i in 0..w * h {
        let den = alpha2 + ix[i] * ix[i] + iy[i] * iy[i];
        cx[i] = ix[i] / den;
        cy[i] = iy[i] / den;
        kk[i] = ix[i] * init.u.data[i] + iy[i] * init.v.data[i] - it[i];
    }
    let mut u = init.u;
    let mut v = init.v;
    let mut ubar = vec![0.0f32; w * h];
    let mut vbar = vec![0.0f32; w * h];
    let mut tmp = vec![0.0f32; w * h];
    for _ in 0..iterations {
        neighbour_mean(&u.data, w, h, &mut tmp, &mut ubar);
        neighbour_mean(&v.data, w, h, &mut tmp, &mut vbar);
        for i in 0..w * h {
            let (ub, vb) = (ubar[i], vbar[i]);
            let r = ix[i] * ub + iy[i] * vb - kk[i];
            u.data[i] = ub - cx[i] * r;
            v.data[i] = vb - cy[i] * r;
        }
    }
    FlowField { u, v }
}

/// Mean of the 8 neighbours with replicated borders, via a separable 3x3 box sum.
fn neighbour_mean(src: &[f32], w: usize, h: usize, tmp: &mut [f32], out: &mut [f32]) {
    for (s, t) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        if w == 1 {
            t[0] = 3.0 * s[0];
            continue;
        }
        t[0] = 2.0 * s[0] + s[1];
        for x in 1..w - 1 {
            t[x] = s[x - 1] + s[x] + s[x + 1];
        }
        t[w - 1] = s[w - 2] + 2.0 * s[w - 1];
    }
    for y in 0..h {
        let up = &tmp[y.saturating_sub(1) * w..][..w];
        let mid = &tmp[y * w..][..w];
        let down = &tmp[(y + 1).min(h - 1) * w..][..w];
        let row = &mut out[y * w..][..w];
        let centre = &src[y * w..][..w];
        for x in 0..w {
            row[x] = (up[x] + mid[x] + down[x] - centre[x]) / 8.0;
        }
    }
}

/// 2x box-filter decimation; odd trailing rows/columns are replicated.
fn downsample(p: &Plane) -> Plane {
    let w = p.width.div_ceil(2);
    let h = p.height.div_ceil(2);
    Plane::from_fn(w, h, |x, y| {
        let (x2, y2) = (2 * x as isize, 2 * y as isize);
        0.25 * (p.at(x2, y2) + p.at(x2 + 1, y2) + p.at(x2, y2 + 1) + p.at(x2 + 1, y2 + 1))
    })
}

/// Border-clamped bilinear sample.
fn sample(p: &Plane, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (p.width - 1) as f32);
    let y = y.clamp(0.0, (p.height - 1) as f32);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top = p.at(x0, y0) * (1.0 - fx) + p.at(x0 + 1, y0) * fx;
    let bot = p.at(x0, y0 + 1) * (1.0 - fx) + p.at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn warp(p: &Plane, flow: &FlowField) -> Plane {
    Plane::from_fn(p.width, p.height, |x, y| {
        let (du, dv) = (flow.u.get(x, y), flow.v.get(x, y));
        if du == 0.0 && dv == 0.0 {
            p.get(x, y)
        } else {
            sample(p, x as f32 + du, y as f32 + dv)
        }
    })
}

fn upsample_flow(coarse: &FlowField, width: usize, height: usize) -> FlowField {
    let sx = coarse.width() as f32 / width as f32;
    let sy = coarse.height() as f32 / height as f32;
    let up = |p: &Plane, gain: f32| {
        Plane::from_fn(width, height, |x, y| {
            let cx = (x as f32 + 0.5) * sx - 0.5;
            let cy = (y as f32 + 0.5) * sy - 0.5;
            sample(p, cx, cy) * gain
        })
    };
    FlowField { u: up(&coarse.u, 1.0 / sx), v: up(&coarse.v, 1.0 / sy) }
}
