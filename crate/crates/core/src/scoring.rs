//! Exact late-interaction (MaxSim) scoring.
//!
//! `s(Q, D) = Σ_i max_j cos(q_i, d_j)`. Feature-set tokens are unit-norm, so
//! the cosine is a plain dot product.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::DocId;
use crate::error::{Error, Result};
use crate::vector::{dot, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: DocId,
    pub score: f64,
}

/// For each query token, the best document token and its similarity.
/// Ties go to the lowest document-token index.
pub fn max_matches(query: &FeatureSet, doc: &FeatureSet) -> Result<Vec<(usize, f64)>> {
    if query.dim() != doc.dim() {
        return Err(Error::Shape {
            expected: query.dim(),
            got: doc.dim(),
        });
    }
    Ok(query
        .tokens()
        .map(|q| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (j, d) in doc.tokens().enumerate() {
                let s = dot(q, d);
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .collect())
}

pub fn late_interaction_score(query: &FeatureSet, doc: &FeatureSet) -> Result<f64> {
    Ok(max_matches(query, doc)?.iter().map(|(_, s)| s).sum())
}

/// Descending score, then ascending doc id.
pub fn rank_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

pub fn top_k(mut scored: Vec<ScoredDoc>, k: usize) -> Vec<ScoredDoc> {
    scored.sort_by(rank_order);
    scored.truncate(k);
    scored
}

/// Brute-force ranking of the whole corpus.
pub fn rank_exact(query: &FeatureSet, corpus: &BTreeMap<DocId, FeatureSet>, k: usize) -> Result<Vec<ScoredDoc>> {
    if corpus.is_empty() {
        return Err(Error::Input("cannot rank an empty corpus".into()));
    }
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    let scored = corpus
        .par_iter()
        .map(|(id, doc)| {
            late_interaction_score(query, doc).map(|score| ScoredDoc {
                doc_id: id.clone(),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k(scored, k))
}
