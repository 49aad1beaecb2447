//! Forward pass with recorded activations and the matching reverse pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array5, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use rayon::prelude::*;

use super::ops::{layer_norm, layer_norm_backward, masked_softmax_rows, LayerNormCache};
use super::{positional_encoding, softmax, LayerParams, ModelConfig, ModelParams, PaddedBatch, Scalar};
use crate::error::{Error, Result};
use crate::seed;

/// Dropout policy of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropout {
    Off,
    /// Sample `i` of the batch draws its masks from a stream keyed on `(key, i)`.
    Seeded(u64),
}

struct LayerTrace<F> {
    x_in: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
    drop_attn: Option<Array2<F>>,
    ln1: LayerNormCache<F>,
    y1: Array2<F>,
    pre_relu: Array2<F>,
    hidden: Array2<F>,
    drop_ffn: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
}

struct SampleTrace<F> {
    x: Array2<F>,
    len: usize,
    drop_in: Option<Array2<F>>,
    layers: Vec<LayerTrace<F>>,
    hidden_out: Array2<F>,
    pooled: Array1<F>,
    logits: Array1<F>,
}

#[inline]
fn linear<F: Scalar>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    x.dot(&w.t()) + b
}

fn dropout_mask<F: Scalar, R: Rng>(rng: &mut Option<R>, shape: (usize, usize), rate: f64) -> Option<Array2<F>> {
    let rng = rng.as_mut()?;
    if rate <= 0.0 {
        return None;
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    Some(Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { F::zero() } else { keep }))
}

fn apply_mask<F: Scalar>(x: Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

fn encoder_layer<F: Scalar, R: Rng>(
    x: Array2<F>,
    len: usize,
    lp: &LayerParams<F>,
    cfg: &ModelConfig,
    rng: &mut Option<R>,
) -> (Array2<F>, LayerTrace<F>) {
    let t = x.nrows();
    let dk = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());
    let q = linear(&x, &lp.wq, &lp.bq);
    let k = linear(&x, &lp.wk, &lp.bk);
    let v = linear(&x, &lp.wv, &lp.bv);
    let mut concat = Array2::zeros((t, cfg.d_model));
    let mut probs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        masked_softmax_rows(&mut p, len);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let attn = linear(&concat, &lp.wo, &lp.bo);
    let drop_attn = dropout_mask(rng, attn.dim(), cfg.dropout_rate);
    let r1 = &x + &apply_mask(attn, &drop_attn);
    let (y1, ln1) = layer_norm(&r1, &lp.ln1_gamma, &lp.ln1_beta);
    let pre_relu = linear(&y1, &lp.w1, &lp.b1);
    let hidden = pre_relu.mapv(|v| v.max(F::zero()));
    let ffn = linear(&hidden, &lp.w2, &lp.b2);
    let drop_ffn = dropout_mask(rng, ffn.dim(), cfg.dropout_rate);
    let r2 = &y1 + &apply_mask(ffn, &drop_ffn);
    let (out, ln2) = layer_norm(&r2, &lp.ln2_gamma, &lp.ln2_beta);
    let trace = LayerTrace { x_in: x, q, k, v, probs, concat, drop_attn, ln1, y1, pre_relu, hidden, drop_ffn, ln2 };
    (out, trace)
}

/// Encoder stack over one already-embedded sequence; padded rows of the result are zeroed.
fn encode<F: Scalar, R: Rng>(
    z: Array2<F>,
    len: usize,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    rng: &mut Option<R>,
) -> (Array2<F>, Vec<LayerTrace<F>>) {
    let mut x = z;
    let mut traces = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (out, tr) = encoder_layer(x, len, lp, cfg, rng);
        traces.push(tr);
        x = out;
    }
    x.slice_mut(s![len.., ..]).fill(F::zero());
    (x, traces)
}

fn sample_rng(dropout: Dropout, index: usize) -> Option<rand_chacha::ChaCha8Rng> {
    match dropout {
        Dropout::Off => None,
        Dropout::Seeded(key) => Some(seed::rng(key, &[seed::TAG_DROPOUT, index as u64])),
    }
}

fn sample_forward<F: Scalar>(
    x: ArrayView2<'_, F>,
    len: usize,
    pe: &Array2<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    mut rng: Option<rand_chacha::ChaCha8Rng>,
) -> Result<SampleTrace<F>> {
    let x = x.to_owned();
    let z = linear(&x, &params.proj_w, &params.proj_b) + pe;
    let drop_in = dropout_mask(&mut rng, z.dim(), cfg.dropout_rate);
    let z = apply_mask(z, &drop_in);
    let (hidden_out, layers) = encode(z, len, params, cfg, &mut rng);
    let pooled = hidden_out.slice(s![..len, ..]).sum_axis(Axis(0)) / F::from_f64(len as f64);
    let logits = params.head_w.dot(&pooled) + &params.head_b;
    if !logits.iter().chain(hidden_out.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("encoder activations".into()));
    }
    Ok(SampleTrace { x, len, drop_in, layers, hidden_out, pooled, logits })
}

fn check_inputs<F: Scalar>(batch: &PaddedBatch<F>, params: &ModelParams<F>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    batch.validate()?;
    if batch.input_dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "batch feature dim {} != model input_dim {}",
            batch.input_dim(),
            cfg.input_dim
        )));
    }
    params.check_shapes(cfg)
}

fn traces<F: Scalar>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    dropout: Dropout,
) -> Result<Vec<SampleTrace<F>>> {
    check_inputs(batch, params, cfg)?;
    let pe = positional_encoding::<F>(batch.max_len(), cfg.d_model, cfg.max_len)?;
    (0..batch.batch_size())
        .into_par_iter()
        .map(|i| {
            sample_forward(
                batch.features.index_axis(Axis(0), i),
                batch.lengths[i],
                &pe,
                params,
                cfg,
                sample_rng(dropout, i),
            )
        })
        .collect()
}

/// `z_t = W_p x_t + b_p` for every position, padded ones included.
pub fn project<F: Scalar>(batch: &PaddedBatch<F>, params: &ModelParams<F>) -> Result<Array3<F>> {
    if batch.input_dim() != params.proj_w.ncols() {
        return Err(Error::Shape(format!(
            "batch feature dim {} != projection input {}",
            batch.input_dim(),
            params.proj_w.ncols()
        )));
    }
    let (b, t, _) = batch.features.dim();
    let mut out = Array3::zeros((b, t, params.proj_w.nrows()));
    for i in 0..b {
        let x = batch.features.index_axis(Axis(0), i);
        out.index_axis_mut(Axis(0), i).assign(&(x.dot(&params.proj_w.t()) + &params.proj_b));
    }
    Ok(out)
}

fn lengths_from_mask(mask: &Array2<bool>) -> Result<Vec<usize>> {
    mask.rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let len = row.iter().take_while(|&&m| m).count();
            if len == 0 || row.iter().skip(len).any(|&m| m) {
                Err(Error::Shape(format!("mask row {i} is not a non-empty prefix")))
            } else {
                Ok(len)
            }
        })
        .collect()
}

/// Encoder stack on embedded inputs `z'` (`B x T x d_model`). Padded rows of the output are zero.
pub fn encoder_forward<F: Scalar, R: RngCore>(
    z_prime: &Array3<F>,
    mask: &Array2<bool>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Array3<F>> {
    cfg.validate()?;
    let (b, t, d) = z_prime.dim();
    if d != cfg.d_model || mask.dim() != (b, t) {
        return Err(Error::Shape(format!(
            "encoder input {:?} / mask {:?} incompatible with d_model {}",
            z_prime.dim(),
            mask.dim(),
            cfg.d_model
        )));
    }
    let lengths = lengths_from_mask(mask)?;
    let dropout = if training { Dropout::Seeded(rng.next_u64()) } else { Dropout::Off };
    let outs: Vec<Array2<F>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut r = sample_rng(dropout, i);
            let (h, _) = encode(z_prime.index_axis(Axis(0), i).to_owned(), lengths[i], params, cfg, &mut r);
            h
        })
        .collect();
    let mut out = Array3::zeros((b, t, d));
    for (i, h) in outs.into_iter().enumerate() {
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("encoder activations".into()));
        }
        out.index_axis_mut(Axis(0), i).assign(&h);
    }
    Ok(out)
}

/// Logits (`B x 2`). With `training`, dropout masks are keyed on one draw from `rng`.
pub fn forward<F: Scalar, R: RngCore>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<Array2<F>> {
    let dropout = if training { Dropout::Seeded(rng.next_u64()) } else { Dropout::Off };
    logits_with(batch, params, cfg, dropout)
}

fn logits_with<F: Scalar>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    dropout: Dropout,
) -> Result<Array2<F>> {
    let tr = traces(batch, params, cfg, dropout)?;
    let mut out = Array2::zeros((tr.len(), cfg.num_classes));
    for (i, t) in tr.iter().enumerate() {
        out.row_mut(i).assign(&t.logits);
    }
    Ok(out)
}

/// Inference-mode logits.
pub fn predict_logits<F: Scalar>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array2<F>> {
    logits_with(batch, params, cfg, Dropout::Off)
}

/// Inference-mode class probabilities.
pub fn predict_proba<F: Scalar>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array2<F>> {
    Ok(softmax(&logits_with(batch, params, cfg, Dropout::Off)?))
}

/// Post-softmax attention of every layer: `layers x B x heads x T_max x T_max`.
pub fn attention_weights<F: Scalar>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Array5<F>> {
    let tr = traces(batch, params, cfg, Dropout::Off)?;
    let t = batch.max_len();
    let mut out = Array5::zeros((cfg.num_layers, tr.len(), cfg.num_heads, t, t));
    for (b, sample) in tr.iter().enumerate() {
        for (l, layer) in sample.layers.iter().enumerate() {
            for (h, p) in layer.probs.iter().enumerate() {
                out.slice_mut(s![l, b, h, .., ..]).assign(p);
            }
        }
    }
    Ok(out)
}

/// Signs of every ReLU input in an inference pass. Finite-difference checks use
/// it to skip coordinates whose perturbation crosses a kink.
pub fn relu_signature<F: Scalar>(
    batch: &PaddedBatch<F>,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<Vec<bool>> {
    let tr = traces(batch, params, cfg, Dropout::Off)?;
    Ok(tr.iter().flat_map(|s| s.layers.iter().flat_map(|l| l.pre_relu.iter().map(|&v| v > F::zero()))).collect())
}

// Gradient accumulation runs this many samples concurrently and adds their
// gradients in sample order, so results do not depend on the thread count.
const GRAD_WAVE: usize = 8;

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad<F: Scalar>(
    batch: &PaddedBatch<F>,
    labels: &[u8],
    params: &ModelParams<F>,
    cfg: &ModelConfig,
    dropout: Dropout,
) -> Result<(F, ModelParams<F>)> {
    check_inputs(batch, params, cfg)?;
    let b = batch.batch_size();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= cfg.num_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let pe = positional_encoding::<F>(batch.max_len(), cfg.d_model, cfg.max_len)?;
    let mut total = ModelParams::zeros(cfg)?;
    let mut loss = F::zero();
    for start in (0..b).step_by(GRAD_WAVE) {
        let end = (start + GRAD_WAVE).min(b);
        let wave: Vec<Result<(F, ModelParams<F>)>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let tr = sample_forward(
                    batch.features.index_axis(Axis(0), i),
                    batch.lengths[i],
                    &pe,
                    params,
                    cfg,
                    sample_rng(dropout, i),
                )?;
                Ok(sample_loss_grad(&tr, labels[i] as usize, params, cfg))
            })
            .collect();
        for r in wave {
            let (l, g) = r?;
            loss += l;
            total.add_assign(&g);
        }
    }
    let inv_b = F::from_f64(1.0 / b as f64);
    total.scale(inv_b);
    if !total.all_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok((loss * inv_b, total))
}

/// Inference-mode (dropout off) loss and gradients.
pub fn backward<F: Scalar>(
    batch: &PaddedBatch<F>,
    labels: &[u8],
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> Result<(F, ModelParams<F>)> {
    loss_and_grad(batch, labels, params, cfg, Dropout::Off)
}

fn add_outer_t<F: Scalar>(acc: &mut Array2<F>, d_out: &Array2<F>, input: &Array2<F>) {
    general_mat_mul(F::one(), &d_out.t(), input, F::one(), acc);
}

fn add_rows<F: Scalar>(acc: &mut Array1<F>, d: &Array2<F>) {
    *acc += &d.sum_axis(Axis(0));
}

fn sample_loss_grad<F: Scalar>(
    tr: &SampleTrace<F>,
    label: usize,
    params: &ModelParams<F>,
    cfg: &ModelConfig,
) -> (F, ModelParams<F>) {
    let mut g = ModelParams::zeros(cfg).expect("validated config");
    let logits = tr.logits.view().insert_axis(Axis(0)).to_owned();
    let probs = softmax(&logits).row(0).to_owned();
    let m = tr.logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = tr.logits.iter().map(|&v| (v - m).exp()).sum::<F>().ln() + m;
    let loss = lse - tr.logits[label];

    let mut dlogits = probs;
    dlogits[label] -= F::one();
    Zip::from(&mut g.head_w)
        .and_broadcast(&dlogits.view().insert_axis(Axis(1)))
        .and_broadcast(&tr.pooled.view().insert_axis(Axis(0)))
        .for_each(|w, &a, &b| *w += a * b);
    g.head_b += &dlogits;
    let dpooled = params.head_w.t().dot(&dlogits);

    let t = tr.hidden_out.nrows();
    let mut dh = Array2::zeros((t, cfg.d_model));
    let share = dpooled / F::from_f64(tr.len as f64);
    for mut row in dh.rows_mut().into_iter().take(tr.len) {
        row.assign(&share);
    }

    for ((lt, lp), lg) in tr.layers.iter().zip(&params.layers).zip(g.layers.iter_mut()).rev() {
        dh = layer_backward(dh, lt, lp, lg, cfg);
    }

    let dz = apply_mask(dh, &tr.drop_in);
    add_outer_t(&mut g.proj_w, &dz, &tr.x);
    add_rows(&mut g.proj_b, &dz);
    (loss, g)
}

fn layer_backward<F: Scalar>(
    dout: Array2<F>,
    tr: &LayerTrace<F>,
    lp: &LayerParams<F>,
    g: &mut LayerParams<F>,
    cfg: &ModelConfig,
) -> Array2<F> {
    let dr2 = layer_norm_backward(&dout, &tr.ln2, &lp.ln2_gamma, &mut g.ln2_gamma, &mut g.ln2_beta);
    let dffn = apply_mask(dr2.clone(), &tr.drop_ffn);
    add_outer_t(&mut g.w2, &dffn, &tr.hidden);
    add_rows(&mut g.b2, &dffn);
    let mut dpre = dffn.dot(&lp.w2);
    Zip::from(&mut dpre).and(&tr.pre_relu).for_each(|d, &p| {
        if p <= F::zero() {
            *d = F::zero();
        }
    });
    add_outer_t(&mut g.w1, &dpre, &tr.y1);
    add_rows(&mut g.b1, &dpre);
    let dy1 = dr2 + dpre.dot(&lp.w1);

    let dr1 = layer_norm_backward(&dy1, &tr.ln1, &lp.ln1_gamma, &mut g.ln1_gamma, &mut g.ln1_beta);
    let dattn = apply_mask(dr1.clone(), &tr.drop_attn);
    add_outer_t(&mut g.wo, &dattn, &tr.concat);
    add_rows(&mut g.bo, &dattn);
    let dconcat = dattn.dot(&lp.wo);

    let dk_dim = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dk_dim as f64).sqrt());
    let shape = tr.q.dim();
    let (mut dq, mut dk, mut dv) = (Array2::zeros(shape), Array2::zeros(shape), Array2::zeros(shape));
    for (h, p) in tr.probs.iter().enumerate() {
        let cols = s![.., h * dk_dim..(h + 1) * dk_dim];
        let doh = dconcat.slice(cols);
        let dp = doh.dot(&tr.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        // Softmax backward; masked entries have p = 0 and stay 0.
        let mut ds = &dp * p;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut()).and(p.rows()).and(&row_dot).for_each(|mut dsr, pr, &rd| {
            Zip::from(&mut dsr).and(&pr).for_each(|d, &pp| *d -= pp * rd);
        });
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&tr.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&tr.q.slice(cols)));
    }
    for (dproj, gw, gb) in [(&dq, &mut g.wq, &mut g.bq), (&dk, &mut g.wk, &mut g.bk), (&dv, &mut g.wv, &mut g.bv)] {
        add_outer_t(gw, dproj, &tr.x_in);
        add_rows(gb, dproj);
    }
    dr1 + dq.dot(&lp.wq) + dk.dot(&lp.wk) + dv.dot(&lp.wv)
}
