//! Compressed multi-vector index.
//!
//! Every document token vector is assigned to one of `K_c` spherical k-means
//! centroids and stored as a centroid id plus a quantized residual. Search
//! probes the `nprobe` nearest centroids of each query token, keeps the
//! candidate documents with the best centroid-level MaxSim, and re-ranks them
//! exactly on the reconstructed vectors.
//!
//! File layout (little-endian): magic `MVLI`, version `u32`, header, centroid
//! block, codebook block, codes block, assignment block, document table,
//! postings block.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::augment::DocId;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scoring::{late_interaction_score, top_k, ScoredDoc};
use crate::vector::{dot, l2_normalize, FeatureSet, TokenTag};

pub const MAGIC: &[u8; 4] = b"MVLI";
pub const FORMAT_VERSION: u32 = 1;

/// How residuals are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Per-dimension uniform scalar codes.
    #[default]
    Quantized,
    /// Original vectors kept verbatim; reconstruction is exact.
    Lossless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    /// `None` means `max(1, round(2 sqrt(N_vec)))`.
    pub k_centroids: Option<usize>,
    pub kmeans_iters: usize,
    pub nbits: u8,
    pub residual: ResidualMode,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            k_centroids: None,
            kmeans_iters: 20,
            nbits: 8,
            residual: ResidualMode::Quantized,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn resolve_k(&self, n_vec: usize) -> Result<usize> {
        let k = self
            .k_centroids
            .unwrap_or_else(|| ((2.0 * (n_vec as f64).sqrt()).round() as usize).clamp(1, n_vec.max(1)));
        if k == 0 {
            return Err(Error::Config("index.k_centroids must be >= 1".into()));
        }
        if k > n_vec {
            return Err(Error::Config(format!(
                "index.k_centroids ({k}) exceeds the number of vectors ({n_vec})"
            )));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchParams {
    pub nprobe: usize,
    pub candidate_doc_cap: usize,
    pub k: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            nprobe: 4,
            candidate_doc_cap: 256,
            k: 10,
        }
    }
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.nprobe == 0 {
            return Err(Error::Config("search.nprobe must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("search.k must be >= 1".into()));
        }
        if self.candidate_doc_cap < self.k {
            return Err(Error::Config(format!(
                "search.candidate_doc_cap ({}) must be >= k ({})",
                self.candidate_doc_cap, self.k
            )));
        }
        Ok(())
    }

    /// Probes every centroid and keeps every document.
    pub fn exhaustive(index: &RetrievalIndex, k: usize) -> Self {
        Self {
            nprobe: index.num_centroids(),
            candidate_doc_cap: index.num_docs().max(k),
            k,
        }
    }
}

/// Uniform scalar quantizer over `[min, max]` with `2^nbits` levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformQuantizer {
    pub min: f64,
    pub max: f64,
    pub nbits: u8,
}

impl UniformQuantizer {
    pub fn fit(values: impl IntoIterator<Item = f64>, nbits: u8) -> Result<Self> {
        if !(1..=8).contains(&nbits) {
            return Err(Error::Config(format!("index.nbits must be in 1..=8, got {nbits}")));
        }
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::Input("cannot fit a quantizer to no values".into()));
        }
        Ok(Self { min, max, nbits })
    }

    fn levels(&self) -> f64 {
        ((1u32 << self.nbits) - 1) as f64
    }

    pub fn bucket_width(&self) -> f64 {
        (self.max - self.min) / self.levels()
    }

    pub fn encode(&self, x: f64) -> u8 {
        let w = self.bucket_width();
        if w <= 0.0 {
            return 0;
        }
        ((x - self.min) / w).round().clamp(0.0, self.levels()) as u8
    }

    pub fn decode(&self, code: u8) -> f64 {
        self.min + code as f64 * self.bucket_width()
    }
}

/// Result of [`spherical_kmeans`].
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    /// `k x dim`, unit rows.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean cosine distance to the assigned centroid, one entry per
    /// assignment step (`iters + 1` entries).
    pub objective: Vec<f64>,
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(x, row);
        if s > best.1 {
            best = (c, s);
        }
    }
    best
}

/// k-means under cosine similarity. `data` is `n x dim`, unit rows.
///
/// Centroids start at `k` distinct rows chosen by `rng`, are re-normalized
/// after each mean update, and keep their previous value when their cluster
/// is empty. Assignment ties go to the lowest centroid index.
pub fn spherical_kmeans(data: &[f64], dim: usize, k: usize, iters: usize, rng: &mut Rng) -> Result<KMeans> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::Shape {
            expected: dim,
            got: data.len(),
        });
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut picks = sample(rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centroids: Vec<f64> = picks.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect();

    let assign = |centroids: &[f64]| -> (Vec<usize>, f64) {
        let best: Vec<(usize, f64)> = data.par_chunks_exact(dim).map(|x| nearest(x, centroids, dim)).collect();
        let objective = best.iter().map(|(_, s)| 1.0 - s).sum::<f64>() / n as f64;
        (best.into_iter().map(|(c, _)| c).collect(), objective)
    };

    let (mut assignments, obj) = assign(&centroids);
    let mut objective = vec![obj];
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        for (x, &c) in data.chunks_exact(dim).zip(&assignments) {
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..k {
            if let Ok(unit) = l2_normalize(&sums[c * dim..(c + 1) * dim]) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&unit);
            }
        }
        let (a, obj) = assign(&centroids);
        assignments = a;
        objective.push(obj);
    }
    Ok(KMeans {
        centroids,
        assignments,
        objective,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Residuals {
    Quantized { quantizers: Vec<UniformQuantizer>, codes: Vec<u8> },
    Lossless { vectors: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    kmeans_iters: u32,
    seed: u64,
    centroids: Vec<f64>,
    assignments: Vec<u32>,
    residuals: Residuals,
    postings: Vec<Vec<u32>>,
    doc_ids: Vec<DocId>,
    /// Vectors of doc `i` are `doc_offsets[i]..doc_offsets[i + 1]`.
    doc_offsets: Vec<usize>,
}

pub fn build_index(corpus: &BTreeMap<DocId, FeatureSet>, cfg: &IndexConfig) -> Result<RetrievalIndex> {
    let first = corpus
        .values()
        .next()
        .ok_or_else(|| Error::Input("cannot index an empty corpus".into()))?;
    let dim = first.dim();
    let mut data = Vec::new();
    let mut doc_offsets = vec![0];
    for fs in corpus.values() {
        if fs.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: fs.dim(),
            });
        }
        data.extend_from_slice(fs.as_slice());
        doc_offsets.push(data.len() / dim);
    }
    let n_vec = data.len() / dim;
    let k = cfg.resolve_k(n_vec)?;
    let mut rng = Rng::new(cfg.seed).derive("kmeans");
    let km = spherical_kmeans(&data, dim, k, cfg.kmeans_iters, &mut rng)?;

    let mut postings = vec![Vec::new(); k];
    for (v, &c) in km.assignments.iter().enumerate() {
        postings[c].push(v as u32);
    }
    let residuals = match cfg.residual {
        ResidualMode::Lossless => Residuals::Lossless { vectors: data },
        ResidualMode::Quantized => {
            let resid: Vec<f64> = data
                .chunks_exact(dim)
                .zip(&km.assignments)
                .flat_map(|(x, &c)| {
                    let cen = &km.centroids[c * dim..(c + 1) * dim];
                    x.iter().zip(cen).map(|(a, b)| a - b).collect::<Vec<_>>()
                })
                .collect();
            let quantizers = (0..dim)
                .map(|j| UniformQuantizer::fit(resid.iter().skip(j).step_by(dim).copied(), cfg.nbits))
                .collect::<Result<Vec<_>>>()?;
            let codes = resid
                .iter()
                .enumerate()
                .map(|(i, &r)| quantizers[i % dim].encode(r))
                .collect();
            Residuals::Quantized { quantizers, codes }
        }
    };
    Ok(RetrievalIndex {
        dim,
        kmeans_iters: cfg.kmeans_iters as u32,
        seed: cfg.seed,
        centroids: km.centroids,
        assignments: km.assignments.iter().map(|&c| c as u32).collect(),
        residuals,
        postings,
        doc_ids: corpus.keys().cloned().collect(),
        doc_offsets,
    })
}

impl RetrievalIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_centroids(&self) -> usize {
        self.postings.len()
    }

    pub fn num_vectors(&self) -> usize {
        self.assignments.len()
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[DocId] {
        &self.doc_ids
    }

    pub fn residual_mode(&self) -> ResidualMode {
        match self.residuals {
            Residuals::Quantized { .. } => ResidualMode::Quantized,
            Residuals::Lossless { .. } => ResidualMode::Lossless,
        }
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn assignment(&self, v: usize) -> usize {
        self.assignments[v] as usize
    }

    pub fn postings(&self, c: usize) -> &[u32] {
        &self.postings[c]
    }

    /// Per-dimension quantizers, or `None` in lossless mode.
    pub fn quantizers(&self) -> Option<&[UniformQuantizer]> {
        match &self.residuals {
            Residuals::Quantized { quantizers, .. } => Some(quantizers),
            Residuals::Lossless { .. } => None,
        }
    }

    /// Stored residual of vector `v` after decoding.
    pub fn residual(&self, v: usize) -> Vec<f64> {
        let d = self.dim;
        match &self.residuals {
            Residuals::Quantized { quantizers, codes } => codes[v * d..(v + 1) * d]
                .iter()
                .zip(quantizers)
                .map(|(&c, q)| q.decode(c))
                .collect(),
            Residuals::Lossless { vectors } => {
                let c = self.centroid(self.assignment(v));
                vectors[v * d..(v + 1) * d].iter().zip(c).map(|(x, m)| x - m).collect()
            }
        }
    }

    /// Centroid plus decoded residual. Exact in lossless mode.
    pub fn reconstruct(&self, v: usize) -> Vec<f64> {
        match &self.residuals {
            Residuals::Lossless { vectors } => vectors[v * self.dim..(v + 1) * self.dim].to_vec(),
            Residuals::Quantized { .. } => {
                let c = self.centroid(self.assignment(v));
                c.iter().zip(self.residual(v)).map(|(a, b)| a + b).collect()
            }
        }
    }

    /// Reconstructed document as a feature set. Quantized vectors are
    /// re-normalized; lossless vectors are returned unchanged.
    pub fn document(&self, doc: usize) -> Result<FeatureSet> {
        let range = self.doc_offsets[doc]..self.doc_offsets[doc + 1];
        let tags = vec![TokenTag::Textual; range.len()];
        match &self.residuals {
            Residuals::Lossless { vectors } => {
                FeatureSet::new(self.dim, vectors[range.start * self.dim..range.end * self.dim].to_vec(), tags)
            }
            Residuals::Quantized { .. } => {
                let rows: Vec<Vec<f64>> = range.map(|v| self.reconstruct(v)).collect();
                FeatureSet::from_rows(&rows, tags)
            }
        }
    }

    /// The corpus as the index sees it.
    pub fn reconstruct_corpus(&self) -> Result<BTreeMap<DocId, FeatureSet>> {
        (0..self.num_docs())
            .map(|i| Ok((self.doc_ids[i].clone(), self.document(i)?)))
            .collect()
    }

    pub fn search(&self, query: &FeatureSet, p: &SearchParams) -> Result<Vec<ScoredDoc>> {
        p.validate()?;
        if query.dim() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let kc = self.num_centroids();
        let nprobe = p.nprobe.min(kc);

        // Query-token x centroid similarities, reused for probing and for
        // the centroid-level approximate score.
        let sims: Vec<Vec<f64>> = query
            .tokens()
            .map(|q| self.centroids.chunks_exact(self.dim).map(|c| dot(q, c)).collect())
            .collect();

        let mut owner = vec![0usize; self.num_vectors()];
        for d in 0..self.num_docs() {
            owner[self.doc_offsets[d]..self.doc_offsets[d + 1]].fill(d);
        }
        let mut candidates: HashSet<usize> = HashSet::new();
        for row in &sims {
            let mut order: Vec<usize> = (0..kc).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &c in &order[..nprobe] {
                candidates.extend(self.postings[c].iter().map(|&v| owner[v as usize]));
            }
        }
        let mut candidates: Vec<usize> = candidates.into_iter().collect();
        candidates.sort_unstable();

        if candidates.len() > p.candidate_doc_cap {
            let approx: Vec<ScoredDoc> = candidates
                .iter()
                .map(|&d| {
                    let cents: Vec<usize> =
                        (self.doc_offsets[d]..self.doc_offsets[d + 1]).map(|v| self.assignment(v)).collect();
                    let score = sims
                        .iter()
                        .map(|row| cents.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max))
                        .sum();
                    ScoredDoc {
                        doc_id: self.doc_ids[d].clone(),
                        score,
                    }
                })
                .collect();
            let keep: HashSet<DocId> = top_k(approx, p.candidate_doc_cap)
                .into_iter()
                .map(|s| s.doc_id)
                .collect();
            candidates.retain(|&d| keep.contains(&self.doc_ids[d]));
        }

        let scored = candidates
            .par_iter()
            .map(|&d| {
                Ok(ScoredDoc {
                    doc_id: self.doc_ids[d].clone(),
                    score: late_interaction_score(query, &self.document(d)?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(top_k(scored, p.k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.dim as u32);
        w.u32(self.num_centroids() as u32);
        w.u32(self.num_vectors() as u32);
        w.u32(self.num_docs() as u32);
        w.u32(self.kmeans_iters);
        w.u64(self.seed);
        match &self.residuals {
            Residuals::Quantized { quantizers, .. } => {
                w.u8(0);
                w.u8(quantizers[0].nbits);
            }
            Residuals::Lossless { .. } => {
                w.u8(1);
                w.u8(0);
            }
        }
        self.centroids.iter().for_each(|&x| w.f64(x));
        match &self.residuals {
            Residuals::Quantized { quantizers, codes } => {
                quantizers.iter().for_each(|q| w.f64(q.min));
                quantizers.iter().for_each(|q| w.f64(q.max));
                w.buf.extend_from_slice(codes);
            }
            Residuals::Lossless { vectors } => vectors.iter().for_each(|&x| w.f64(x)),
        }
        self.assignments.iter().for_each(|&a| w.u32(a));
        for (i, id) in self.doc_ids.iter().enumerate() {
            w.u32(id.as_str().len() as u32);
            w.buf.extend_from_slice(id.as_str().as_bytes());
            w.u32((self.doc_offsets[i + 1] - self.doc_offsets[i]) as u32);
        }
        for p in &self.postings {
            w.u32(p.len() as u32);
            p.iter().for_each(|&v| w.u32(v));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an index file (bad magic)".into()));
        }
        r.pos = 4;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let kc = r.u32()? as usize;
        let n_vec = r.u32()? as usize;
        let n_docs = r.u32()? as usize;
        let kmeans_iters = r.u32()?;
        let seed = r.u64()?;
        let mode = r.u8()?;
        let nbits = r.u8()?;
        if dim == 0 || kc == 0 || n_docs == 0 || kc > n_vec {
            return Err(Error::Corrupt("inconsistent index header".into()));
        }
        let centroids = r.f64s(kc * dim)?;
        let residuals = match mode {
            0 => {
                if !(1..=8).contains(&nbits) {
                    return Err(Error::Corrupt(format!("bad nbits {nbits}")));
                }
                let mins = r.f64s(dim)?;
                let maxs = r.f64s(dim)?;
                let quantizers = mins
                    .into_iter()
                    .zip(maxs)
                    .map(|(min, max)| UniformQuantizer { min, max, nbits })
                    .collect();
                let codes = r.take(n_vec * dim)?.to_vec();
                Residuals::Quantized { quantizers, codes }
            }
            1 => Residuals::Lossless {
                vectors: r.f64s(n_vec * dim)?,
            },
            other => return Err(Error::Corrupt(format!("unknown residual mode {other}"))),
        };
        let assignments = (0..n_vec).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if assignments.iter().any(|&a| a as usize >= kc) {
            return Err(Error::Corrupt("assignment out of range".into()));
        }
        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_offsets = vec![0usize];
        for _ in 0..n_docs {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("doc id is not UTF-8".into()))?;
            doc_ids.push(DocId::from(id));
            let n = r.u32()? as usize;
            if n == 0 {
                return Err(Error::Corrupt("document with no vectors".into()));
            }
            doc_offsets.push(doc_offsets.last().unwrap() + n);
        }
        if *doc_offsets.last().unwrap() != n_vec || doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Corrupt("document table does not match vectors".into()));
        }
        let mut postings = Vec::with_capacity(kc);
        for _ in 0..kc {
            let len = r.u32()? as usize;
            postings.push((0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after postings".into()));
        }
        let mut seen = vec![false; n_vec];
        for (c, p) in postings.iter().enumerate() {
            for &v in p {
                let v = v as usize;
                if v >= n_vec || seen[v] || assignments[v] as usize != c {
                    return Err(Error::Corrupt("postings do not partition the vectors".into()));
                }
                seen[v] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Corrupt("postings do not partition the vectors".into()));
        }
        let index = Self {
            dim,
            kmeans_iters,
            seed,
            centroids,
            assignments,
            residuals,
            postings,
            doc_ids,
            doc_offsets,
        };
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn search(index: &RetrievalIndex, query: &FeatureSet, p: &SearchParams) -> Result<Vec<ScoredDoc>> {
    index.search(query, p)
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    index.save(path)
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex> {
    RetrievalIndex::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scoring::rank_exact;
    use crate::vector::seeded_unit_vector;
    use proptest::prelude::*;

    fn random_corpus(n_docs: usize, dim: usize, seed: u64) -> BTreeMap<DocId, FeatureSet> {
        (0..n_docs)
            .map(|i| {
                let n = 1 + (i * 7 + seed as usize) % 5;
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|j| seeded_unit_vector(format!("{seed}/{i}/{j}").as_bytes(), dim, "test-doc").unwrap())
                    .collect();
                (DocId::from(format!("d{i:03}")), FeatureSet::from_rows(&rows, vec![TokenTag::Textual; n]).unwrap())
            })
            .collect()
    }

    fn random_query(dim: usize, key: &str) -> FeatureSet {
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|j| seeded_unit_vector(format!("{key}/{j}").as_bytes(), dim, "test-query").unwrap())
            .collect();
        FeatureSet::from_rows(&rows, vec![TokenTag::Textual; 3]).unwrap()
    }

    #[test]
    fn one_centroid_per_vector_reconstructs() {
        let corpus = random_corpus(6, 8, 1);
        let n_vec: usize = corpus.values().map(FeatureSet::len).sum();
        let cfg = IndexConfig {
            k_centroids: Some(n_vec),
            ..IndexConfig::default()
        };
        let index = build_index(&corpus, &cfg).unwrap();
        let flat: Vec<f64> = corpus.values().flat_map(|f| f.as_slice().to_vec()).collect();
        for v in 0..n_vec {
            assert!(index.residual(v).iter().all(|r| r.abs() < 1e-15));
            for (a, b) in index.reconstruct(v).iter().zip(&flat[v * 8..(v + 1) * 8]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let corpus = random_corpus(20, 8, 2);
        let a = build_index(&corpus, &IndexConfig::default()).unwrap();
        let b = build_index(&corpus, &IndexConfig::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let other = IndexConfig {
            seed: 9,
            ..IndexConfig::default()
        };
        assert_ne!(a.to_bytes(), build_index(&corpus, &other).unwrap().to_bytes());
    }

    #[test]
    fn build_errors() {
        assert!(matches!(
            build_index(&BTreeMap::new(), &IndexConfig::default()),
            Err(Error::Input(_))
        ));
        let corpus = random_corpus(2, 4, 3);
        let cfg = IndexConfig {
            k_centroids: Some(1000),
            ..IndexConfig::default()
        };
        assert!(matches!(build_index(&corpus, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn default_centroid_count() {
        let cfg = IndexConfig::default();
        assert_eq!(cfg.resolve_k(1).unwrap(), 1);
        assert_eq!(cfg.resolve_k(100).unwrap(), 20);
        assert_eq!(cfg.resolve_k(10).unwrap(), 6);
    }

    #[test]
    fn exhaustive_lossless_equals_exact() {
        let corpus = random_corpus(50, 8, 4);
        let cfg = IndexConfig {
            residual: ResidualMode::Lossless,
            ..IndexConfig::default()
        };
        let index = build_index(&corpus, &cfg).unwrap();
        for qi in 0..20 {
            let q = random_query(8, &qi.to_string());
            let p = SearchParams::exhaustive(&index, 10);
            assert_eq!(index.search(&q, &p).unwrap(), rank_exact(&q, &corpus, 10).unwrap());
        }
    }

    #[test]
    fn exhaustive_quantized_equals_exact_on_reconstruction() {
        let corpus = random_corpus(30, 8, 5);
        let index = build_index(&corpus, &IndexConfig::default()).unwrap();
        let recon = index.reconstruct_corpus().unwrap();
        for qi in 0..10 {
            let q = random_query(8, &format!("r{qi}"));
            let p = SearchParams::exhaustive(&index, 5);
            assert_eq!(index.search(&q, &p).unwrap(), rank_exact(&q, &recon, 5).unwrap());
        }
    }

    #[test]
    fn single_doc_is_always_found() {
        let corpus = random_corpus(1, 8, 6);
        let index = build_index(&corpus, &IndexConfig::default()).unwrap();
        let r = index.search(&random_query(8, "x"), &SearchParams::default()).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].doc_id.as_str(), "d000");
    }

    #[test]
    fn search_param_errors() {
        let index = build_index(&random_corpus(3, 8, 7), &IndexConfig::default()).unwrap();
        let q = random_query(8, "x");
        let bad = SearchParams {
            candidate_doc_cap: 2,
            k: 3,
            nprobe: 1,
        };
        assert!(matches!(index.search(&q, &bad), Err(Error::Config(_))));
        assert!(matches!(
            index.search(&random_query(4, "x"), &SearchParams::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let corpus = random_corpus(12, 8, 8);
        for residual in [ResidualMode::Quantized, ResidualMode::Lossless] {
            let index = build_index(
                &corpus,
                &IndexConfig {
                    residual,
                    ..IndexConfig::default()
                },
            )
            .unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("x.mvli");
            index.save(&path).unwrap();
            let back = RetrievalIndex::load(&path).unwrap();
            assert_eq!(back, index);
            assert_eq!(back.to_bytes(), index.to_bytes());
            let q = random_query(8, "rt");
            assert_eq!(back.search(&q, &SearchParams::default()).unwrap(), index.search(&q, &SearchParams::default()).unwrap());
        }
        let index = build_index(&corpus, &IndexConfig::default()).unwrap();
        let mut bytes = index.to_bytes();
        assert!(matches!(RetrievalIndex::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        bytes[4] = 2;
        assert!(matches!(
            RetrievalIndex::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(RetrievalIndex::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn postings_partition_vectors() {
        let index = build_index(&random_corpus(15, 8, 9), &IndexConfig::default()).unwrap();
        let mut all: Vec<u32> = (0..index.num_centroids()).flat_map(|c| index.postings(c).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..index.num_vectors() as u32).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn quantizer_error_within_half_bucket(values in prop::collection::vec(-2.0f64..2.0, 1..40), nbits in 1u8..=8) {
            let q = UniformQuantizer::fit(values.iter().copied(), nbits).unwrap();
            let half = q.bucket_width() / 2.0;
            for &x in &values {
                prop_assert!((q.decode(q.encode(x)) - x).abs() <= half + 1e-12);
            }
        }

        #[test]
        fn kmeans_objective_never_increases(seed in any::<u64>(), n in 2usize..30, k in 1usize..6) {
            let dim = 4;
            let data: Vec<f64> = (0..n)
                .flat_map(|i| seeded_unit_vector(format!("{seed}/{i}").as_bytes(), dim, "km").unwrap())
                .collect();
            let k = k.min(n);
            let km = spherical_kmeans(&data, dim, k, 20, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(km.objective.len(), 21);
            for w in km.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", km.objective);
            }
        }
    }
}
