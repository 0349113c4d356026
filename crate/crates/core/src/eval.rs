//! Retrieval evaluation: Recall@K, distractor recall, and the experiment
//! runners that train one model per configuration and evaluate it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedDocument, DocId};
use crate::datagen::{QaSample, Split};
use crate::encoder::{encode_document, encode_query, DocFlags, EmbeddingProvider, EncoderConfig, EncoderParams, QueryMode};
use crate::error::{Error, Result};
use crate::index::{RetrievalIndex, SearchParams};
use crate::scoring::rank_exact;
use crate::text::tokenize;
use crate::train::{query_input, train, TrainConfig};
use crate::vector::FeatureSet;

/// 1 iff `gt` is among the first `k` entries of `ranked`.
pub fn recall_at_k(ranked: &[DocId], gt: &DocId, k: usize) -> Result<u8> {
    if k == 0 {
        return Err(Error::Config("recall cutoff k must be >= 1".into()));
    }
    if ranked.is_empty() {
        return Err(Error::Input("empty ranking".into()));
    }
    Ok(u8::from(ranked.iter().take(k).any(|d| d == gt)))
}

/// Entity shown by a query image: the title of the document whose main
/// image it is, otherwise the name carried by an `entity:` key.
pub fn image_entity(key: &str, main_images: &BTreeMap<&str, &str>) -> Result<String> {
    if let Some(title) = main_images.get(key) {
        return Ok(title.to_string());
    }
    key.strip_prefix("entity:")
        .filter(|e| !e.trim().is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::Data(format!("cannot resolve the entity of image `{key}`")))
}

/// For each sample, the documents about the entity in its query image,
/// other than its ground truth.
pub fn build_distractor_map(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    samples: &[QaSample],
) -> Result<BTreeMap<String, BTreeSet<DocId>>> {
    let main_images: BTreeMap<&str, &str> = docs
        .values()
        .map(|d| (d.raw.main_image_key.as_str(), d.raw.title.as_str()))
        .collect();
    let mut by_title: BTreeMap<Vec<String>, Vec<&DocId>> = BTreeMap::new();
    for (id, d) in docs {
        by_title.entry(tokenize(&d.raw.title)).or_default().push(id);
    }
    samples
        .iter()
        .map(|s| {
            let entity = image_entity(&s.query_image_key, &main_images)?;
            let set = by_title
                .get(&tokenize(&entity))
                .into_iter()
                .flatten()
                .filter(|&&id| *id != s.gt_doc_id)
                .map(|&id| id.clone())
                .collect();
            Ok((s.sample_id.clone(), set))
        })
        .collect()
}

/// Share of samples with at least one distractor in the top `k`.
pub fn distractor_recall(
    rankings: &[(String, Vec<DocId>)],
    distractors: &BTreeMap<String, BTreeSet<DocId>>,
    k: usize,
) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .filter(|(id, ranked)| {
            distractors
                .get(id)
                .is_some_and(|set| ranked.iter().take(k).any(|d| set.contains(d)))
        })
        .count();
    hits as f64 / rankings.len() as f64
}

pub fn encode_corpus<P: EmbeddingProvider + ?Sized>(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    params: &EncoderParams,
    provider: &P,
    flags: DocFlags,
) -> Result<BTreeMap<DocId, FeatureSet>> {
    let encoded = docs
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|d| encode_document(d, params, provider, flags))
        .collect::<Result<Vec<_>>>()?;
    Ok(docs.keys().cloned().zip(encoded).collect())
}

/// Where rankings come from.
pub enum Retriever<'a> {
    Exact(&'a BTreeMap<DocId, FeatureSet>),
    Index(&'a RetrievalIndex, SearchParams),
}

impl Retriever<'_> {
    pub fn rank(&self, query: &FeatureSet, depth: usize) -> Result<Vec<DocId>> {
        let scored = match self {
            Retriever::Exact(corpus) => rank_exact(query, corpus, depth)?,
            Retriever::Index(index, p) => index.search(query, &SearchParams { k: depth, ..*p })?,
        };
        Ok(scored.into_iter().map(|s| s.doc_id).collect())
    }
}

/// One ranking per sample, keyed by sample id, in sample order.
pub fn rank_samples<P: EmbeddingProvider + ?Sized>(
    samples: &[QaSample],
    params: &EncoderParams,
    provider: &P,
    mode: QueryMode,
    retriever: &Retriever<'_>,
    depth: usize,
) -> Result<Vec<(String, Vec<DocId>)>> {
    samples
        .par_iter()
        .map(|s| {
            let q = encode_query(&query_input(s), params, provider, mode)?;
            Ok((s.sample_id.clone(), retriever.rank(&q, depth)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub benchmark: String,
    pub split: String,
    pub config_flags: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
}

pub const METRIC_RECALL: &str = "recall";
pub const METRIC_DISTRACTOR: &str = "distractor_recall";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    pub fn get(&self, benchmark: &str, split: &str, config_flags: &str, metric: &str, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.benchmark == benchmark && r.split == split && r.config_flags == config_flags && r.metric == metric && r.k == k
            })
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("benchmark,split,config_flags,metric,k,value\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{:.6}", r.benchmark, r.split, r.config_flags, r.metric, r.k, r.value);
        }
        s
    }

    /// One line per (benchmark, split, config, metric) with a column per k.
    pub fn to_table(&self) -> String {
        let ks: BTreeSet<usize> = self.rows.iter().map(|r| r.k).collect();
        let mut groups: Vec<(Vec<String>, BTreeMap<usize, f64>)> = Vec::new();
        for r in &self.rows {
            let key = vec![r.benchmark.clone(), r.split.clone(), r.config_flags.clone(), r.metric.clone()];
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, vals)) => {
                    vals.insert(r.k, r.value);
                }
                None => groups.push((key, BTreeMap::from([(r.k, r.value)]))),
            }
        }
        let mut header: Vec<String> = ["benchmark", "split", "config", "metric"].map(String::from).to_vec();
        header.extend(ks.iter().map(|k| format!("@{k}")));
        let mut lines: Vec<Vec<String>> = vec![header];
        for (key, vals) in &groups {
            let mut line = key.clone();
            line.extend(
                ks.iter()
                    .map(|k| vals.get(k).map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))),
            );
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| if c < 4 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        out
    }

    /// Every value lies in [0, 1] and recall never drops as k grows.
    pub fn check(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.value) {
                return Err(Error::Domain(format!("{} = {} outside [0, 1]", r.metric, r.value)));
            }
        }
        for a in &self.rows {
            for b in &self.rows {
                let same = a.benchmark == b.benchmark
                    && a.split == b.split
                    && a.config_flags == b.config_flags
                    && a.metric == b.metric;
                if same && a.k < b.k && a.value > b.value {
                    return Err(Error::Domain(format!(
                        "{} not monotone in k for {} / {} / {}",
                        a.metric, a.benchmark, a.split, a.config_flags
                    )));
                }
            }
        }
        Ok(())
    }
}

fn split_name(split: Option<Split>) -> String {
    split.map_or_else(|| "all".to_string(), |s| s.to_string())
}

/// Recall@k (and distractor recall@k when a map is given) for all samples
/// and for each split present, from a single ranking per sample.
pub fn evaluate_rankings(
    benchmark: &str,
    config_flags: &str,
    samples: &[QaSample],
    rankings: &[(String, Vec<DocId>)],
    distractors: Option<&BTreeMap<String, BTreeSet<DocId>>>,
    ks: &[usize],
) -> Result<EvalReport> {
    if samples.len() != rankings.len() {
        return Err(Error::Shape {
            expected: samples.len(),
            got: rankings.len(),
        });
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry("all".into()).or_default().push(i);
        if s.split.is_some() {
            groups.entry(split_name(s.split)).or_default().push(i);
        }
    }
    let mut report = EvalReport::default();
    for (split, idx) in &groups {
        for &k in ks {
            let hits = idx
                .iter()
                .map(|&i| recall_at_k(&rankings[i].1, &samples[i].gt_doc_id, k).map(u32::from))
                .sum::<Result<u32>>()?;
            let row = |metric: &str, value: f64| ReportRow {
                benchmark: benchmark.to_string(),
                split: split.clone(),
                config_flags: config_flags.to_string(),
                metric: metric.to_string(),
                k,
                value,
            };
            report.rows.push(row(METRIC_RECALL, f64::from(hits) / idx.len() as f64));
            if let Some(map) = distractors {
                let sub: Vec<(String, Vec<DocId>)> = idx.iter().map(|&i| rankings[i].clone()).collect();
                report.rows.push(row(METRIC_DISTRACTOR, distractor_recall(&sub, map, k)));
            }
        }
    }
    Ok(report)
}

/// Shared settings for the experiment runners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Experiment {
    pub benchmark: String,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Seed for parameter initialization, shared by all rows.
    pub init_seed: u64,
    pub ks: Vec<usize>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            benchmark: "synthetic".into(),
            encoder: EncoderConfig {
                embed_dim: 64,
                ..EncoderConfig::default()
            },
            train: TrainConfig {
                epochs: 6,
                learning_rate: 3e-3,
                optimizer: crate::train::Optimizer::Adam,
                ..TrainConfig::default()
            },
            init_seed: 0,
            ks: vec![1, 5, 10],
        }
    }
}

impl Experiment {
    fn depth(&self) -> Result<usize> {
        match self.ks.iter().max() {
            Some(&k) if !self.ks.contains(&0) => Ok(k),
            _ => Err(Error::Config("eval ks must be non-empty and >= 1".into())),
        }
    }
}

/// Trains under `flags` and `mode`, then ranks `test` exactly.
pub fn train_and_rank<P: EmbeddingProvider + ?Sized>(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    train_samples: &[QaSample],
    test: &[QaSample],
    flags: DocFlags,
    mode: QueryMode,
    provider: &P,
    exp: &Experiment,
) -> Result<Vec<(String, Vec<DocId>)>> {
    let depth = exp.depth()?;
    let cfg = TrainConfig { flags, mode, ..exp.train };
    let init = EncoderParams::init(exp.encoder, exp.init_seed)?;
    let (params, _) = train(train_samples, docs, init, provider, &cfg)?;
    let corpus = encode_corpus(docs, &params, provider, flags)?;
    rank_samples(test, &params, provider, mode, &Retriever::Exact(&corpus), depth)
}

/// One trained model per flag set, evaluated on the same test samples.
pub fn run_ablation<P: EmbeddingProvider + ?Sized>(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    train_samples: &[QaSample],
    test: &[QaSample],
    rows: &[DocFlags],
    provider: &P,
    exp: &Experiment,
) -> Result<EvalReport> {
    let distractors = build_distractor_map(docs, test)?;
    let mut report = EvalReport::default();
    for &flags in rows {
        let rankings = train_and_rank(docs, train_samples, test, flags, QueryMode::ImageText, provider, exp)?;
        report.extend(evaluate_rankings(
            &exp.benchmark,
            &flags.to_string(),
            test,
            &rankings,
            Some(&distractors),
            &exp.ks,
        )?);
    }
    Ok(report)
}

pub fn probe_label(flags: DocFlags, mode: QueryMode) -> String {
    format!("{flags}/{mode}")
}

/// Trains and evaluates with queries restricted to `mode`, all document
/// components on.
pub fn run_shortcut_probe<P: EmbeddingProvider + ?Sized>(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    train_samples: &[QaSample],
    test: &[QaSample],
    mode: QueryMode,
    provider: &P,
    exp: &Experiment,
) -> Result<EvalReport> {
    let flags = exp.train.flags;
    let distractors = build_distractor_map(docs, test)?;
    let rankings = train_and_rank(docs, train_samples, test, flags, mode, provider, exp)?;
    evaluate_rankings(
        &exp.benchmark,
        &probe_label(flags, mode),
        test,
        &rankings,
        Some(&distractors),
        &exp.ks,
    )
}
