//! Dense building blocks with hand-written reverse passes.

use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn init_weight(rng: &Rng, name: &str, rows: usize, cols: usize) -> Array2<f64> {
    let mut r = rng.derive(name);
    let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut r))
}

pub(crate) fn check_finite(name: &str, data: ArrayViewD<'_, f64>) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            tensor: name.to_string(),
        })
    }
}

/// Two-layer perceptron `x -> gelu(x W1 + b1) W2 + b2`, applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl Mlp {
    pub fn init(rng: &Rng, name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: init_weight(rng, &format!("{name}.w1"), input, hidden),
            b1: Array1::zeros(hidden),
            w2: init_weight(rng, &format!("{name}.w2"), hidden, output),
            b2: Array1::zeros(output),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = x.dot(&self.w1) + &self.b1;
        let act = pre.mapv(gelu);
        let out = act.dot(&self.w2) + &self.b2;
        (
            out,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    /// Accumulates parameter gradients into `grad`, returns the input gradient.
    pub fn backward(&self, cache: &MlpCache, dout: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        grad.w2 += &cache.act.t().dot(dout);
        grad.b2 += &dout.sum_axis(Axis(0));
        let dact = dout.dot(&self.w2.t());
        let dpre = dact * cache.pre.mapv(gelu_grad);
        grad.w1 += &cache.x.t().dot(&dpre);
        grad.b1 += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.w1.t())
    }

    pub(crate) fn views<'a>(&'a self, prefix: &str) -> Vec<(String, ArrayViewD<'a, f64>)> {
        vec![
            (format!("{prefix}.w1"), self.w1.view().into_dyn()),
            (format!("{prefix}.b1"), self.b1.view().into_dyn()),
            (format!("{prefix}.w2"), self.w2.view().into_dyn()),
            (format!("{prefix}.b2"), self.b2.view().into_dyn()),
        ]
    }

    pub(crate) fn views_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
        vec![
            (format!("{prefix}.w1"), self.w1.view_mut().into_dyn()),
            (format!("{prefix}.b1"), self.b1.view_mut().into_dyn()),
            (format!("{prefix}.w2"), self.w2.view_mut().into_dyn()),
            (format!("{prefix}.b2"), self.b2.view_mut().into_dyn()),
        ]
    }
}

/// Row-wise L2 normalization.
#[derive(Debug, Clone)]
pub struct NormCache {
    out: Array2<f64>,
    norms: Array1<f64>,
}

pub fn normalize_rows(x: &Array2<f64>) -> Result<(Array2<f64>, NormCache)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|n| *n == 0.0 || !n.is_finite()) {
        return Err(Error::Numeric {
            tensor: "projected feature (zero or non-finite norm)".into(),
        });
    }
    let out = x / &norms.view().insert_axis(Axis(1));
    Ok((out.clone(), NormCache { out, norms }))
}

pub fn normalize_rows_backward(cache: &NormCache, dy: &Array2<f64>) -> Array2<f64> {
    let proj = (&cache.out * dy).sum_axis(Axis(1));
    let dx = dy - &(&cache.out * &proj.view().insert_axis(Axis(1)));
    dx / &cache.norms.view().insert_axis(Axis(1))
}

/// Transformer block whose queries come from image patches and whose keys and
/// values come from text tokens: multi-head cross-attention with a residual,
/// then a position-wise feed-forward with a residual. No normalization layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub heads: usize,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct XattnCache {
    x: Array2<f64>,
    t: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ffn: MlpCache,
}

impl CrossAttention {
    pub fn init(rng: &Rng, name: &str, model_dim: usize, text_dim: usize, heads: usize) -> Self {
        Self {
            heads,
            wq: init_weight(rng, &format!("{name}.wq"), model_dim, model_dim),
            bq: Array1::zeros(model_dim),
            wk: init_weight(rng, &format!("{name}.wk"), text_dim, model_dim),
            bk: Array1::zeros(model_dim),
            wv: init_weight(rng, &format!("{name}.wv"), text_dim, model_dim),
            bv: Array1::zeros(model_dim),
            wo: init_weight(rng, &format!("{name}.wo"), model_dim, model_dim),
            bo: Array1::zeros(model_dim),
            ffn: Mlp::init(rng, &format!("{name}.ffn"), model_dim, 2 * model_dim, model_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            wq: Array2::zeros(self.wq.raw_dim()),
            bq: Array1::zeros(self.bq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            bk: Array1::zeros(self.bk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            bv: Array1::zeros(self.bv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
            bo: Array1::zeros(self.bo.raw_dim()),
            ffn: self.ffn.zeros_like(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn text_dim(&self) -> usize {
        self.wk.nrows()
    }

    fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    /// Attention sublayer output before the residual is added.
    pub fn attention(&self, x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
        let (o, ..) = self.attend(x, t);
        o.dot(&self.wo) + &self.bo
    }

    #[allow(clippy::type_complexity)]
    fn attend(
        &self,
        x: &Array2<f64>,
        t: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
        let q = x.dot(&self.wq) + &self.bq;
        let k = t.dot(&self.wk) + &self.bk;
        let v = t.dot(&self.wv) + &self.bv;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut o = Array2::zeros((x.nrows(), self.model_dim()));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in scores.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - m).exp());
                let sum = row.sum();
                row /= sum;
            }
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }
        (o, q, k, v, attn)
    }

    pub fn forward(&self, x: &Array2<f64>, t: &Array2<f64>) -> (Array2<f64>, XattnCache) {
        let (o, q, k, v, attn) = self.attend(x, t);
        let x1 = x + &(o.dot(&self.wo) + &self.bo);
        let (f, ffn) = self.ffn.forward(&x1);
        let x2 = &x1 + &f;
        (
            x2,
            XattnCache {
                x: x.clone(),
                t: t.clone(),
                q,
                k,
                v,
                attn,
                o,
                ffn,
            },
        )
    }

    /// Accumulates parameter gradients, returns the gradient w.r.t. the text
    /// (key/value) input. Patch inputs are frozen, so their gradient is not formed.
    pub fn backward(&self, cache: &XattnCache, dx2: &Array2<f64>, grad: &mut CrossAttention) -> Array2<f64> {
        let dx1 = dx2 + &self.ffn.backward(&cache.ffn, dx2, &mut grad.ffn);
        grad.wo += &cache.o.t().dot(&dx1);
        grad.bo += &dx1.sum_axis(Axis(0));
        let d_o = dx1.dot(&self.wo.t());

        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.attn.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_oh = d_o.slice(cols);
            let da = d_oh.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&d_oh));
            let inner = (&da * a).sum_axis(Axis(1));
            let ds = a * &(&da - &inner.view().insert_axis(Axis(1))) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        grad.wq += &cache.x.t().dot(&dq);
        grad.bq += &dq.sum_axis(Axis(0));
        grad.wk += &cache.t.t().dot(&dk);
        grad.bk += &dk.sum_axis(Axis(0));
        grad.wv += &cache.t.t().dot(&dv);
        grad.bv += &dv.sum_axis(Axis(0));
        dk.dot(&self.wk.t()) + dv.dot(&self.wv.t())
    }

    pub(crate) fn views<'a>(&'a self, prefix: &str) -> Vec<(String, ArrayViewD<'a, f64>)> {
        let mut v = vec![
            (format!("{prefix}.wq"), self.wq.view().into_dyn()),
            (format!("{prefix}.bq"), self.bq.view().into_dyn()),
            (format!("{prefix}.wk"), self.wk.view().into_dyn()),
            (format!("{prefix}.bk"), self.bk.view().into_dyn()),
            (format!("{prefix}.wv"), self.wv.view().into_dyn()),
            (format!("{prefix}.bv"), self.bv.view().into_dyn()),
            (format!("{prefix}.wo"), self.wo.view().into_dyn()),
            (format!("{prefix}.bo"), self.bo.view().into_dyn()),
        ];
        v.extend(self.ffn.views(&format!("{prefix}.ffn")));
        v
    }

    pub(crate) fn views_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
        let mut v = vec![
            (format!("{prefix}.wq"), self.wq.view_mut().into_dyn()),
            (format!("{prefix}.bq"), self.bq.view_mut().into_dyn()),
            (format!("{prefix}.wk"), self.wk.view_mut().into_dyn()),
            (format!("{prefix}.bk"), self.bk.view_mut().into_dyn()),
            (format!("{prefix}.wv"), self.wv.view_mut().into_dyn()),
            (format!("{prefix}.bv"), self.bv.view_mut().into_dyn()),
            (format!("{prefix}.wo"), self.wo.view_mut().into_dyn()),
            (format!("{prefix}.bo"), self.bo.view_mut().into_dyn()),
        ];
        v.extend(self.ffn.views_mut(&format!("{prefix}.ffn")));
        v
    }
}
