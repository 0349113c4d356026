//! Contrastive training of the encoder parameters.
//!
//! Each step encodes a batch of queries and the distinct ground-truth
//! documents of that batch with the current parameters, scores every
//! query against every document with MaxSim and minimizes softmax cross
//! entropy with the ground truth as the target. Gradients flow through the
//! arg-max document token of each query token only.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentedDocument, DocId};
use crate::binio::{Reader, Writer};
use crate::datagen::QaSample;
use crate::encoder::{
    encode_document_traced, encode_query_traced, DocFlags, EmbeddingProvider, EncoderConfig, EncoderParams,
    QueryInput, QueryMode, Trace,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scoring::max_matches;
use crate::vector::FeatureSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub flags: DocFlags,
    pub mode: QueryMode,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 1,
            seed: 0,
            flags: DocFlags::ALL,
            mode: QueryMode::ImageText,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// SHA-256 of the final checkpoint bytes, hex.
    pub checksum: String,
}

impl TrainStats {
    /// Mean loss over the first (`head = true`) or last `n` steps.
    pub fn mean_loss(&self, n: usize, head: bool) -> Option<f64> {
        let n = n.min(self.losses.len());
        if n == 0 {
            return None;
        }
        let s = if head {
            &self.losses[..n]
        } else {
            &self.losses[self.losses.len() - n..]
        };
        Some(s.iter().sum::<f64>() / n as f64)
    }
}

/// Loss plus gradients w.r.t. every query and document token.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_queries: Vec<Array2<f64>>,
    pub d_docs: Vec<Array2<f64>>,
    /// Arg-max document token for every (query, doc, query token), flattened.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub signature: Vec<usize>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-batch softmax cross entropy where query `i` targets document
/// `targets[i]`. Documents other than the target act as negatives.
pub fn contrastive_loss_targets(queries: &[FeatureSet], docs: &[FeatureSet], targets: &[usize]) -> Result<LossOutput> {
    if queries.len() < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            queries.len()
        )));
    }
    if targets.len() != queries.len() {
        return Err(Error::Shape {
            expected: queries.len(),
            got: targets.len(),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= docs.len()) {
        return Err(Error::Input(format!("target {t} out of range for {} documents", docs.len())));
    }
    let b = queries.len() as f64;
    let matches: Vec<Vec<Vec<(usize, f64)>>> = queries
        .iter()
        .map(|q| docs.iter().map(|d| max_matches(q, d)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;

    let mut d_queries: Vec<Array2<f64>> = queries.iter().map(|q| Array2::zeros((q.len(), q.dim()))).collect();
    let mut d_docs: Vec<Array2<f64>> = docs.iter().map(|d| Array2::zeros((d.len(), d.dim()))).collect();
    let mut loss = 0.0;
    let mut signature = Vec::new();
    for (i, row) in matches.iter().enumerate() {
        let scores: Vec<f64> = row.iter().map(|m| m.iter().map(|(_, s)| s).sum()).collect();
        let lse = log_sum_exp(&scores);
        loss += lse - scores[targets[i]];
        for (j, m) in row.iter().enumerate() {
            let g = ((scores[j] - lse).exp() - f64::from(u8::from(j == targets[i]))) / b;
            for (qi, &(dj, _)) in m.iter().enumerate() {
                signature.push(dj);
                for (k, (&qv, &dv)) in queries[i].token(qi).iter().zip(docs[j].token(dj)).enumerate() {
                    d_queries[i][[qi, k]] += g * dv;
                    d_docs[j][[dj, k]] += g * qv;
                }
            }
        }
    }
    Ok(LossOutput {
        loss: loss / b,
        d_queries,
        d_docs,
        signature,
    })
}

/// Mean over `i` of `-log softmax_j(s(Q_i, D_j))[i]`; positives are aligned.
pub fn contrastive_loss(queries: &[FeatureSet], docs: &[FeatureSet]) -> Result<f64> {
    if queries.len() != docs.len() {
        return Err(Error::Shape {
            expected: queries.len(),
            got: docs.len(),
        });
    }
    let targets: Vec<usize> = (0..queries.len()).collect();
    Ok(contrastive_loss_targets(queries, docs, &targets)?.loss)
}

pub fn query_input(sample: &QaSample) -> QueryInput {
    QueryInput {
        text: sample.question.clone(),
        image_key: sample.query_image_key.clone(),
    }
}

struct Forward {
    queries: Vec<(FeatureSet, Trace)>,
    docs: Vec<(FeatureSet, Trace)>,
    out: LossOutput,
}

fn forward<P: EmbeddingProvider + ?Sized>(
    params: &EncoderParams,
    batch: &[&QaSample],
    docs: &BTreeMap<DocId, AugmentedDocument>,
    provider: &P,
    flags: DocFlags,
    mode: QueryMode,
) -> Result<Forward> {
    // Distinct ground truths in first-appearance order; duplicates in a
    // batch are never each other's negatives.
    let mut unique: Vec<&DocId> = Vec::new();
    let targets: Vec<usize> = batch
        .iter()
        .map(|s| {
            unique.iter().position(|d| **d == s.gt_doc_id).unwrap_or_else(|| {
                unique.push(&s.gt_doc_id);
                unique.len() - 1
            })
        })
        .collect();
    let doc_refs = unique
        .iter()
        .map(|id| {
            docs.get(*id)
                .ok_or_else(|| Error::Data(format!("ground-truth document {id} not in the knowledge base")))
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = batch
        .par_iter()
        .map(|s| encode_query_traced(&query_input(s), params, provider, mode))
        .collect::<Result<Vec<_>>>()?;
    let encoded = doc_refs
        .par_iter()
        .map(|d| encode_document_traced(d, params, provider, flags))
        .collect::<Result<Vec<_>>>()?;
    let qs: Vec<FeatureSet> = queries.iter().map(|(f, _)| f.clone()).collect();
    let ds: Vec<FeatureSet> = encoded.iter().map(|(f, _)| f.clone()).collect();
    let out = contrastive_loss_targets(&qs, &ds, &targets)?;
    Ok(Forward {
        queries,
        docs: encoded,
        out,
    })
}

/// Batch loss and the arg-max signature of the evaluation.
pub fn batch_loss<P: EmbeddingProvider + ?Sized>(
    params: &EncoderParams,
    batch: &[&QaSample],
    docs: &BTreeMap<DocId, AugmentedDocument>,
    provider: &P,
    flags: DocFlags,
    mode: QueryMode,
) -> Result<(f64, Vec<usize>)> {
    let f = forward(params, batch, docs, provider, flags, mode)?;
    Ok((f.out.loss, f.out.signature))
}

/// Batch loss and its gradient w.r.t. every trainable tensor. Per-item
/// gradients are summed in batch order, so the result does not depend on
/// the number of worker threads.
pub fn grad_params<P: EmbeddingProvider + ?Sized>(
    params: &EncoderParams,
    batch: &[&QaSample],
    docs: &BTreeMap<DocId, AugmentedDocument>,
    provider: &P,
    flags: DocFlags,
    mode: QueryMode,
) -> Result<(f64, EncoderParams)> {
    params.check_finite()?;
    let f = forward(params, batch, docs, provider, flags, mode)?;
    let traces: Vec<(&Trace, &Array2<f64>)> = f
        .queries
        .iter()
        .map(|(_, t)| t)
        .zip(&f.out.d_queries)
        .chain(f.docs.iter().map(|(_, t)| t).zip(&f.out.d_docs))
        .collect();
    let parts: Vec<EncoderParams> = traces
        .par_iter()
        .map(|(t, d)| {
            let mut g = params.zeros_like();
            t.backward(params, d, &mut g);
            g
        })
        .collect();
    let mut grad = params.zeros_like();
    for p in &parts {
        grad.add_scaled(p, 1.0);
    }
    grad.check_finite()?;
    Ok((f.out.loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where the perturbation moved an arg-max.
    pub skipped: usize,
}

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central finite differences against [`grad_params`] for every coordinate
/// of every tensor. Coordinates whose perturbation crosses a MaxSim arg-max
/// switch are skipped, since the loss is not differentiable there.
pub fn gradient_check<P: EmbeddingProvider + ?Sized>(
    params: &EncoderParams,
    batch: &[&QaSample],
    docs: &BTreeMap<DocId, AugmentedDocument>,
    provider: &P,
    flags: DocFlags,
    mode: QueryMode,
    eps: f64,
) -> Result<Vec<TensorCheck>> {
    let (_, grad) = grad_params(params, batch, docs, provider, flags, mode)?;
    let (_, base_sig) = batch_loss(params, batch, docs, provider, flags, mode)?;
    let analytic: Vec<(String, Vec<f64>)> = grad
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let mut out = Vec::new();
    for (ti, (name, values)) in analytic.iter().enumerate() {
        let per_coord = (0..values.len())
            .into_par_iter()
            .map(|k| -> Result<Option<f64>> {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    if let Some(x) = p.named_tensors_mut()[ti].1.iter_mut().nth(k) {
                        *x += delta;
                    }
                    batch_loss(&p, batch, docs, provider, flags, mode)
                };
                let (plus, sig_p) = eval(eps)?;
                let (minus, sig_m) = eval(-eps)?;
                if sig_p != base_sig || sig_m != base_sig {
                    return Ok(None);
                }
                Ok(Some(relative_error(values[k], (plus - minus) / (2.0 * eps))))
            })
            .collect::<Result<Vec<_>>>()?;
        let errs: Vec<f64> = per_coord.iter().flatten().copied().collect();
        out.push(TensorCheck {
            name: name.clone(),
            max_rel_error: errs.iter().cloned().fold(0.0, f64::max),
            checked: errs.len(),
            skipped: per_coord.len() - errs.len(),
        });
    }
    Ok(out)
}

struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut EncoderParams, grad: &EncoderParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let tensors = params
            .named_tensors_mut()
            .into_iter()
            .zip(grad.named_tensors())
            .zip(self.m.named_tensors_mut())
            .zip(self.v.named_tensors_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            ndarray::Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                    *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                });
        }
    }
}

/// Trains from `init`. Each epoch visits the samples in a seeded random
/// order; a trailing batch with a single sample is dropped.
pub fn train<P: EmbeddingProvider + ?Sized>(
    samples: &[QaSample],
    docs: &BTreeMap<DocId, AugmentedDocument>,
    init: EncoderParams,
    provider: &P,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainStats)> {
    cfg.validate()?;
    if let Some(s) = samples.iter().find(|s| !docs.contains_key(&s.gt_doc_id)) {
        return Err(Error::Data(format!(
            "sample {}: ground-truth document {} not in the knowledge base",
            s.sample_id, s.gt_doc_id
        )));
    }
    let mut params = init;
    let mut adam = Adam {
        m: params.zeros_like(),
        v: params.zeros_like(),
        t: 0,
    };
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    let root = Rng::new(cfg.seed).derive("train");
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut root.derive_index("epoch", epoch as u64));
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let batch: Vec<&QaSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grad) = grad_params(&params, &batch, docs, provider, cfg.flags, cfg.mode)?;
            if !loss.is_finite() {
                return Err(Error::Numeric { tensor: "loss".into() });
            }
            losses.push(loss);
            grad_norms.push(grad.l2_norm());
            match cfg.optimizer {
                Optimizer::Sgd => params.add_scaled(&grad, -cfg.learning_rate),
                Optimizer::Adam => adam.step(&mut params, &grad, cfg.learning_rate),
            }
            params.check_finite()?;
        }
    }
    let checksum = checksum(&params);
    Ok((
        params,
        TrainStats {
            losses,
            grad_norms,
            checksum,
        },
    ))
}

pub fn checksum(params: &EncoderParams) -> String {
    Sha256::digest(params_to_bytes(params))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPRM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header, encoder shape, then `(name, shape, values)` per tensor.
pub fn params_to_bytes(params: &EncoderParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let c = &params.config;
    for x in [c.text_dim, c.image_dim, c.embed_dim, c.heads, c.num_patches, c.mm_tokens] {
        w.u32(x as u32);
    }
    let tensors = params.named_tensors();
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.u32(name.len() as u32);
        w.buf.extend_from_slice(name.as_bytes());
        w.u32(t.ndim() as u32);
        t.shape().iter().for_each(|&d| w.u64(d as u64));
        t.iter().for_each(|&x| w.f64(x));
    }
    w.buf
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = EncoderConfig {
        text_dim: dims[0],
        image_dim: dims[1],
        embed_dim: dims[2],
        heads: dims[3],
        num_patches: dims[4],
        mm_tokens: dims[5],
    };
    let mut params = EncoderParams::init(config, 0).map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    let n = r.u32()? as usize;
    let mut slots = params.named_tensors_mut();
    if n != slots.len() {
        return Err(Error::Corrupt(format!("checkpoint has {n} tensors, expected {}", slots.len())));
    }
    for (expected_name, slot) in &mut slots {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Corrupt(format!("expected tensor `{expected_name}`, found `{name}`")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let values = r.f64s(slot.len())?;
        slot.iter_mut().zip(values).for_each(|(x, v)| *x = v);
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    params.check_finite()?;
    Ok(params)
}

pub fn save_params(params: &EncoderParams, path: &Path) -> Result<()> {
    fs::write(path, params_to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<EncoderParams> {
    params_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
