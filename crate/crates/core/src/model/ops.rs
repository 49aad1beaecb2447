use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::{ModelParams, Scalar};
use crate::error::{Error, Result};

/// Sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(...)`, `t` from 0.
pub fn positional_encoding<F: Scalar>(len: usize, d_model: usize, max_len: usize) -> Result<Array2<F>> {
    if len > max_len {
        return Err(Error::Shape(format!("sequence length {len} exceeds max_len {max_len}")));
    }
    Ok(Array2::from_shape_fn((len, d_model), |(t, j)| {
        let i2 = (j - j % 2) as f64;
        let angle = t as f64 / 10000f64.powf(i2 / d_model as f64);
        F::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let d = F::from_f64(x.ncols() as f64);
    let eps = F::from_f64(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *inv = F::one() / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dL/dx` and accumulates `dL/dgamma`, `dL/dbeta`.
pub(crate) fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    cache: &LayerNormCache<F>,
    gamma: &Array1<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    *dgamma = &*dgamma + &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta = &*dbeta + &dy.sum_axis(Axis(0));
    let d = F::from_f64(dy.ncols() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xh), &inv) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
        for (v, &h) in row.iter_mut().zip(xh.iter()) {
            *v = inv * (*v - mean_d - h * mean_dx);
        }
    }
    dx
}

/// Row softmax over the first `valid` columns; the remaining columns get exactly 0.
pub(crate) fn masked_softmax_rows<F: Scalar>(scores: &mut Array2<F>, valid: usize) {
    for mut row in scores.rows_mut() {
        let m = row.iter().take(valid).fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < valid {
                *v = (*v - m).exp();
                sum += *v;
            } else {
                *v = F::zero();
            }
        }
        row.iter_mut().take(valid).for_each(|v| *v /= sum);
    }
}

/// Mean of the rows of each sequence where `mask` is true.
pub fn masked_mean_pool<F: Scalar>(h: &Array3<F>, mask: &Array2<bool>) -> Result<Array2<F>> {
    let (b, t, d) = h.dim();
    if mask.dim() != (b, t) {
        return Err(Error::Shape(format!("mask {:?} does not match activations {:?}", mask.dim(), h.dim())));
    }
    let mut out = Array2::zeros((b, d));
    for i in 0..b {
        let rows = h.index_axis(Axis(0), i);
        let m = mask.row(i);
        out.row_mut(i).assign(
            &pool_rows(rows, m)
                .ok_or_else(|| Error::InvalidArgument(format!("sequence {i} has no unmasked frames")))?,
        );
    }
    Ok(out)
}

pub(crate) fn pool_rows<F: Scalar>(rows: ArrayView2<'_, F>, mask: ArrayView1<'_, bool>) -> Option<Array1<F>> {
    let mut acc = Array1::zeros(rows.ncols());
    let mut n = 0usize;
    for (r, &m) in rows.rows().into_iter().zip(mask.iter()) {
        if m {
            acc += &r;
            n += 1;
        }
    }
    (n > 0).then(|| acc / F::from_f64(n as f64))
}

/// `logits = h W_cᵀ + b_c`, one row per clip.
pub fn classify<F: Scalar>(h_video: &Array2<F>, params: &ModelParams<F>) -> Array2<F> {
    h_video.dot(&params.head_w.t()) + &params.head_b
}

pub fn log_softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Max-subtracted row softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[u8]) -> Result<F> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    let ls = log_softmax(logits);
    let mut total = F::zero();
    for (row, &y) in ls.rows().into_iter().zip(labels) {
        let y = y as usize;
        if y >= row.len() {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        total -= row[y];
    }
    Ok(total / F::from_f64(labels.len() as f64))
}
