use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};
use crate::seed;

/// One post-norm encoder block. Weight matrices are `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
}

/// Every learnable tensor of the classifier. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub proj_w: Array2<F>,
    pub proj_b: Array1<F>,
    pub layers: Vec<LayerParams<F>>,
    pub head_w: Array2<F>,
    pub head_b: Array1<F>,
}

macro_rules! layer_fields {
    ($l:expr, $m:ident) => {
        [
            ("wq", $l.wq.$m().into_dyn()),
            ("bq", $l.bq.$m().into_dyn()),
            ("wk", $l.wk.$m().into_dyn()),
            ("bk", $l.bk.$m().into_dyn()),
            ("wv", $l.wv.$m().into_dyn()),
            ("bv", $l.bv.$m().into_dyn()),
            ("wo", $l.wo.$m().into_dyn()),
            ("bo", $l.bo.$m().into_dyn()),
            ("ln1_gamma", $l.ln1_gamma.$m().into_dyn()),
            ("ln1_beta", $l.ln1_beta.$m().into_dyn()),
            ("w1", $l.w1.$m().into_dyn()),
            ("b1", $l.b1.$m().into_dyn()),
            ("w2", $l.w2.$m().into_dyn()),
            ("b2", $l.b2.$m().into_dyn()),
            ("ln2_gamma", $l.ln2_gamma.$m().into_dyn()),
            ("ln2_beta", $l.ln2_beta.$m().into_dyn()),
        ]
    };
}

impl<F: Scalar> LayerParams<F> {
    fn filled(cfg: &ModelConfig, weight: &mut impl FnMut(usize, usize) -> Array2<F>) -> Self {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        LayerParams {
            wq: weight(d, d),
            bq: Array1::zeros(d),
            wk: weight(d, d),
            bk: Array1::zeros(d),
            wv: weight(d, d),
            bv: Array1::zeros(d),
            wo: weight(d, d),
            bo: Array1::zeros(d),
            ln1_gamma: Array1::ones(d),
            ln1_beta: Array1::zeros(d),
            w1: weight(f, d),
            b1: Array1::zeros(f),
            w2: weight(d, f),
            b2: Array1::zeros(d),
            ln2_gamma: Array1::ones(d),
            ln2_beta: Array1::zeros(d),
        }
    }
}

impl<F: Scalar> ModelParams<F> {
    fn build(cfg: &ModelConfig, mut weight: impl FnMut(usize, usize) -> Array2<F>) -> Self {
        let proj_w = weight(cfg.d_model, cfg.input_dim);
        let layers = (0..cfg.num_layers).map(|_| LayerParams::filled(cfg, &mut weight)).collect();
        let head_w = weight(cfg.num_classes, cfg.d_model);
        ModelParams {
            proj_w,
            proj_b: Array1::zeros(cfg.d_model),
            layers,
            head_w,
            head_b: Array1::zeros(cfg.num_classes),
        }
    }

    /// Seeded initialisation: weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// biases zero, layer-norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, &[seed::TAG_INIT]);
        Ok(Self::build(cfg, |rows, cols| {
            let bound = 1.0 / (cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            Array2::from_shape_simple_fn((rows, cols), || F::from_f64(dist.sample(&mut rng)))
        }))
    }

    /// Same shapes as `init`, every weight drawn from `rng` in `[-scale, scale]`,
    /// and biases and norms randomised too. Used to probe behaviour away from the init point.
    pub fn random_full<R: Rng>(cfg: &ModelConfig, rng: &mut R, scale: f64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        for (name, mut t) in p.named_mut() {
            let centre = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            t.mapv_inplace(|_| F::from_f64(centre + rng.random_range(-scale..=scale)));
        }
        Ok(p)
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::build(cfg, |r, c| Array2::zeros((r, c)));
        for l in &mut p.layers {
            l.ln1_gamma.fill(F::zero());
            l.ln2_gamma.fill(F::zero());
        }
        Ok(p)
    }

    /// Tensors in canonical order with stable names (`layers.0.wq`, ...).
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = vec![
            ("proj_w".to_string(), self.proj_w.view().into_dyn()),
            ("proj_b".to_string(), self.proj_b.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in layer_fields!(l, view) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head_w".to_string(), self.head_w.view().into_dyn()));
        out.push(("head_b".to_string(), self.head_b.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = vec![
            ("proj_w".to_string(), self.proj_w.view_mut().into_dyn()),
            ("proj_b".to_string(), self.proj_b.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer_fields!(l, view_mut) {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("head_w".to_string(), self.head_w.view_mut().into_dyn()));
        out.push(("head_b".to_string(), self.head_b.view_mut().into_dyn()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Tensor names and shapes implied by `cfg`, in canonical order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let mut out = vec![("proj_w".to_string(), vec![d, cfg.input_dim]), ("proj_b".to_string(), vec![d])];
        let layer: [(&str, Vec<usize>); 16] = [
            ("wq", vec![d, d]),
            ("bq", vec![d]),
            ("wk", vec![d, d]),
            ("bk", vec![d]),
            ("wv", vec![d, d]),
            ("bv", vec![d]),
            ("wo", vec![d, d]),
            ("bo", vec![d]),
            ("ln1_gamma", vec![d]),
            ("ln1_beta", vec![d]),
            ("w1", vec![f, d]),
            ("b1", vec![f]),
            ("w2", vec![d, f]),
            ("b2", vec![d]),
            ("ln2_gamma", vec![d]),
            ("ln2_beta", vec![d]),
        ];
        for i in 0..cfg.num_layers {
            for (n, shape) in &layer {
                out.push((format!("layers.{i}.{n}"), shape.clone()));
            }
        }
        out.push(("head_w".to_string(), vec![cfg.num_classes, d]));
        out.push(("head_b".to_string(), vec![cfg.num_classes]));
        out
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let mine = self.named();
        let want = Self::expected_shapes(cfg);
        if mine.len() != want.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", want.len(), mine.len())));
        }
        for ((name, a), (_, shape)) in mine.iter().zip(&want) {
            if a.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("tensor {name}: shape {:?}, config wants {:?}", a.shape(), shape)));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn sum_squares(&self) -> F {
        self.named().iter().flat_map(|(_, t)| t.iter().copied()).fold(F::zero(), |acc, v| acc + v * v)
    }

    pub fn scale(&mut self, s: F) {
        for (_, mut t) in self.named_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &ModelParams<F>) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += y);
        }
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64(v.to_f64()));
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.to_f64()));
        ModelParams {
            proj_w: c2(&self.proj_w),
            proj_b: c1(&self.proj_b),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: c2(&l.wq),
                    bq: c1(&l.bq),
                    wk: c2(&l.wk),
                    bk: c1(&l.bk),
                    wv: c2(&l.wv),
                    bv: c1(&l.bv),
                    wo: c2(&l.wo),
                    bo: c1(&l.bo),
                    ln1_gamma: c1(&l.ln1_gamma),
                    ln1_beta: c1(&l.ln1_beta),
                    w1: c2(&l.w1),
                    b1: c1(&l.b1),
                    w2: c2(&l.w2),
                    b2: c1(&l.b2),
                    ln2_gamma: c1(&l.ln2_gamma),
                    ln2_beta: c1(&l.ln2_beta),
                })
                .collect(),
            head_w: c2(&self.head_w),
            head_b: c1(&self.head_b),
        }
    }
}
