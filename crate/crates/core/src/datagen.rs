//! Question generation without visual shortcuts.
//!
//! Each augmented document becomes a one-hop graph: its main entity linked
//! to every related entity by the sentence that first mentions it. A sample
//! picks a query entity (shown to the retriever only as an image) and a
//! qualifying entity, and asks for the main entity through both relations
//! without naming either the answer or the query entity. Samples whose
//! ground truth BM25 already ranks in the top 5 are dropped, so the text
//! alone does not give the answer away.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentedDocument, DocId, LlmClient};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::{contains_phrase, normalize_word, tokenize, tokenize_sentences};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entity: String,
    pub relation_sentence: String,
    pub has_image: bool,
    pub image_key: String,
    pub source_doc_id: DocId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHopGraph {
    pub doc_id: DocId,
    pub main_entity: String,
    pub main_image_key: String,
    pub neighbors: Vec<Neighbor>,
}

/// One neighbor per related entity, tied to the sentence holding its first
/// mention.
pub fn build_onehop_graph(doc: &AugmentedDocument) -> OneHopGraph {
    let tokenized = tokenize_sentences(&doc.raw.body);
    let neighbors = doc
        .related
        .iter()
        .filter_map(|r| {
            let first = *r.span.iter().min()?;
            let sentence = tokenized.tokens.get(first)?.sentence;
            Some(Neighbor {
                entity: r.entity.clone(),
                relation_sentence: tokenized.sentences[sentence].clone(),
                has_image: !r.image_key.trim().is_empty(),
                image_key: r.image_key.clone(),
                source_doc_id: r.source_doc_id.clone(),
            })
        })
        .collect();
    OneHopGraph {
        doc_id: doc.raw.doc_id.clone(),
        main_entity: doc.raw.title.clone(),
        main_image_key: doc.raw.main_image_key.clone(),
        neighbors,
    }
}

/// Drops every edge A -> B for which B's graph also links back to A, so the
/// answer document is the only one tying the two entities together.
pub fn enforce_unique_gt(graphs: BTreeMap<DocId, OneHopGraph>) -> BTreeMap<DocId, OneHopGraph> {
    let links: BTreeSet<(DocId, DocId)> = graphs
        .values()
        .flat_map(|g| g.neighbors.iter().map(|n| (g.doc_id.clone(), n.source_doc_id.clone())))
        .collect();
    graphs
        .into_iter()
        .map(|(id, mut g)| {
            g.neighbors
                .retain(|n| !links.contains(&(n.source_doc_id.clone(), g.doc_id.clone())));
            (id, g)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSubgraph {
    pub doc_id: DocId,
    pub answer_entity: String,
    pub query_entity: String,
    pub query_image_key: String,
    pub query_doc_id: DocId,
    pub qualifying_entity: String,
    pub qualifying_doc_id: DocId,
    /// Sentence relating the answer to the query entity.
    pub relation_q: String,
    /// Sentence relating the answer to the qualifying entity.
    pub relation_k: String,
}

fn subgraph(g: &OneHopGraph, q: &Neighbor, k: &Neighbor) -> TargetSubgraph {
    TargetSubgraph {
        doc_id: g.doc_id.clone(),
        answer_entity: g.main_entity.clone(),
        query_entity: q.entity.clone(),
        query_image_key: q.image_key.clone(),
        query_doc_id: q.source_doc_id.clone(),
        qualifying_entity: k.entity.clone(),
        qualifying_doc_id: k.source_doc_id.clone(),
        relation_q: q.relation_sentence.clone(),
        relation_k: k.relation_sentence.clone(),
    }
}

/// Query entity uniform over image-bearing neighbors, qualifying entity
/// uniform over the rest. `None` with fewer than two neighbors or no image.
pub fn extract_target_subgraph(g: &OneHopGraph, rng: &mut Rng) -> Option<TargetSubgraph> {
    if g.neighbors.len() < 2 {
        return None;
    }
    let with_image: Vec<usize> = (0..g.neighbors.len()).filter(|&i| g.neighbors[i].has_image).collect();
    if with_image.is_empty() {
        return None;
    }
    let qi = with_image[rng.random_range(0..with_image.len())];
    let rest: Vec<usize> = (0..g.neighbors.len()).filter(|&i| i != qi).collect();
    let ki = rest[rng.random_range(0..rest.len())];
    Some(subgraph(g, &g.neighbors[qi], &g.neighbors[ki]))
}

/// Up to `n` distinct (query, qualifying) pairs in random order.
pub fn extract_target_subgraphs(g: &OneHopGraph, rng: &mut Rng, n: usize) -> Vec<TargetSubgraph> {
    let mut pairs: Vec<(usize, usize)> = (0..g.neighbors.len())
        .filter(|&q| g.neighbors[q].has_image)
        .flat_map(|q| (0..g.neighbors.len()).filter(move |&k| k != q).map(move |k| (q, k)))
        .collect();
    pairs.shuffle(rng);
    pairs.truncate(n);
    pairs
        .into_iter()
        .map(|(q, k)| subgraph(g, &g.neighbors[q], &g.neighbors[k]))
        .collect()
}

/// Entity surface -> type noun used in "this <type>" phrases. Lookups are
/// case-insensitive over normalized tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeMap(BTreeMap<String, String>);

impl TypeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entity: &str, type_noun: &str) {
        self.0.insert(entity.to_string(), type_noun.to_string());
    }

    pub fn get(&self, entity: &str) -> Option<&str> {
        if let Some(t) = self.0.get(entity) {
            return Some(t);
        }
        let key = tokenize(entity);
        self.0
            .iter()
            .find(|(k, _)| tokenize(k) == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, entity: &str) -> Result<&str> {
        self.get(entity)
            .ok_or_else(|| Error::Generation(format!("no type noun for entity `{entity}`")))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, String)> for TypeMap {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        TypeMap(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Seen,
    Unseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSample {
    pub sample_id: String,
    pub question: String,
    pub query_image_key: String,
    pub answer: String,
    pub gt_doc_id: DocId,
    pub split: Option<Split>,
    pub query_entity: String,
    pub qualifying_entity: Option<String>,
    /// The query image depicts the ground-truth document's main entity.
    #[serde(default)]
    pub shortcut: bool,
}

/// How the qualifying entity appears in the question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualifierPolicy {
    /// Keep the qualifying entity's name in the clause.
    #[default]
    Keep,
    /// Remove the name, keeping only the relation's verb phrase.
    Strip,
}

pub trait QuestionGenerator: Sync {
    fn generate(&self, sg: &TargetSubgraph, typemap: &TypeMap) -> Result<String>;
}

/// `Which <type(answer)> <pred_q>, given that it <pred_k>?`
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator {
    pub qualifier: QualifierPolicy,
}

struct Words<'a> {
    raw: Vec<&'a str>,
    norm: Vec<String>,
}

impl<'a> Words<'a> {
    fn new(s: &'a str) -> Self {
        let raw: Vec<&str> = s.split_whitespace().collect();
        let norm = raw.iter().map(|w| normalize_word(w)).collect();
        Self { raw, norm }
    }

    fn find(&self, phrase: &[String], from: usize) -> Option<usize> {
        if phrase.is_empty() || phrase.len() > self.norm.len() {
            return None;
        }
        (from..=self.norm.len() - phrase.len()).find(|&i| self.norm[i..i + phrase.len()] == *phrase)
    }
}

fn clean_word(w: &str) -> &str {
    w.trim_end_matches(['.', '!', '?', ',', ';', ':'])
}

/// Drops the leading answer surface and the trailing sentence punctuation,
/// then replaces `entity` with `replacement` (or removes it when `None`).
/// A type noun right after the entity is absorbed into the replacement.
fn predicate(sentence: &str, answer: &str, entity: &str, replacement: Option<&str>) -> Result<String> {
    let words = Words::new(sentence);
    let a = tokenize(answer);
    if words.find(&a, 0) != Some(0) {
        return Err(Error::Generation(format!(
            "sentence `{sentence}` does not start with the answer `{answer}`"
        )));
    }
    let e = tokenize(entity);
    let at = words
        .find(&e, a.len())
        .ok_or_else(|| Error::Generation(format!("sentence `{sentence}` does not mention `{entity}`")))?;
    let mut out: Vec<String> = words.raw[a.len()..at].iter().map(|w| clean_word(w).to_string()).collect();
    let mut next = at + e.len();
    if let Some(rep) = replacement {
        out.push(rep.to_string());
        let noun = rep.rsplit(' ').next().unwrap_or(rep);
        if let Some(w) = words.norm.get(next) {
            if *w == noun || *w == format!("{noun}s") || *w == format!("{noun}es") {
                next += 1;
            }
        }
    }
    out.extend(words.raw[next..].iter().map(|w| clean_word(w).to_string()));
    out.retain(|w| !w.is_empty());
    Ok(out.join(" "))
}

impl QuestionGenerator for TemplateGenerator {
    fn generate(&self, sg: &TargetSubgraph, typemap: &TypeMap) -> Result<String> {
        let answer_type = typemap.require(&sg.answer_entity)?;
        let query_type = typemap.require(&sg.query_entity)?;
        let pred_q = predicate(
            &sg.relation_q,
            &sg.answer_entity,
            &sg.query_entity,
            Some(&format!("this {query_type}")),
        )?;
        let pred_k = match self.qualifier {
            QualifierPolicy::Strip => predicate(&sg.relation_k, &sg.answer_entity, &sg.qualifying_entity, None)?,
            QualifierPolicy::Keep => {
                // Validate the mention, keep the sentence after the answer.
                predicate(&sg.relation_k, &sg.answer_entity, &sg.qualifying_entity, None)?;
                let words = Words::new(&sg.relation_k);
                let n = tokenize(&sg.answer_entity).len();
                words.raw[n..]
                    .iter()
                    .map(|w| clean_word(w))
                    .filter(|w| !w.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        };
        if pred_q.is_empty() || pred_k.is_empty() {
            return Err(Error::Generation("relation has no verb phrase".into()));
        }
        Ok(format!("Which {answer_type} {pred_q}, given that it {pred_k}?"))
    }
}

/// Question generation through a language model. Replies are validated by
/// the same checks as template output.
pub struct LlmQuestionGenerator<C: LlmClient> {
    pub client: C,
}

impl<C: LlmClient> LlmQuestionGenerator<C> {
    pub fn prompt(sg: &TargetSubgraph, typemap: &TypeMap) -> String {
        let query_type = typemap.get(&sg.query_entity).unwrap_or("entity");
        format!(
            "Write one question whose answer is \"{answer}\".\n\
             Use both facts below. Refer to \"{query}\" only as \"this {query_type}\" and do not \
             name \"{answer}\" or \"{query}\" anywhere in the question.\n\
             Fact 1: {rq}\nFact 2: {rk}\n\
             Reply with the question only.",
            answer = sg.answer_entity,
            query = sg.query_entity,
            rq = sg.relation_q,
            rk = sg.relation_k,
        )
    }
}

impl<C: LlmClient> QuestionGenerator for LlmQuestionGenerator<C> {
    fn generate(&self, sg: &TargetSubgraph, typemap: &TypeMap) -> Result<String> {
        let reply = self.client.complete(&Self::prompt(sg, typemap))?;
        let q = reply.trim().lines().next().unwrap_or("").trim().to_string();
        if q.is_empty() {
            return Err(Error::Generation("empty question from model".into()));
        }
        Ok(q)
    }
}

pub fn generate_question(sg: &TargetSubgraph, typemap: &TypeMap, generator: &dyn QuestionGenerator) -> Result<QaSample> {
    let question = generator.generate(sg, typemap)?;
    Ok(QaSample {
        sample_id: format!("{}/{}/{}", sg.doc_id, sg.query_doc_id, sg.qualifying_doc_id),
        question,
        query_image_key: sg.query_image_key.clone(),
        answer: sg.answer_entity.clone(),
        gt_doc_id: sg.doc_id.clone(),
        split: None,
        query_entity: sg.query_entity.clone(),
        qualifying_entity: Some(sg.qualifying_entity.clone()),
        shortcut: false,
    })
}

pub trait Paraphraser: Sync {
    fn paraphrase(&self, question: &str) -> Result<String>;
}

/// Synonym swaps plus moving the `given that` clause to the front (or back).
///
/// The table is symmetric, so applying the paraphraser twice restores the
/// original question.
#[derive(Debug, Clone)]
pub struct RuleParaphraser {
    synonyms: HashMap<String, String>,
    pub reorder: bool,
}

/// Word pairs swapped by the default paraphraser.
pub const SYNONYM_PAIRS: [(&str, &str); 50] = [
    ("feeds", "dines"),
    ("native", "indigenous"),
    ("founded", "established"),
    ("trades", "deals"),
    ("named", "titled"),
    ("grows", "thrives"),
    ("painted", "depicted"),
    ("competes", "rivals"),
    ("flows", "drains"),
    ("protected", "guarded"),
    ("built", "constructed"),
    ("migrates", "travels"),
    ("sold", "marketed"),
    ("studied", "researched"),
    ("borders", "adjoins"),
    ("discovered", "found"),
    ("eaten", "consumed"),
    ("shelters", "hides"),
    ("hunts", "preys"),
    ("restored", "renovated"),
    ("known", "famous"),
    ("spring", "springtime"),
    ("colonial", "imperial"),
    ("era", "age"),
    ("local", "regional"),
    ("records", "archives"),
    ("early", "initial"),
    ("period", "epoch"),
    ("large", "big"),
    ("numbers", "quantities"),
    ("many", "numerous"),
    ("decades", "years"),
    ("often", "frequently"),
    ("winter", "wintertime"),
    ("old", "ancient"),
    ("maps", "charts"),
    ("mainly", "chiefly"),
    ("night", "nighttime"),
    ("beside", "alongside"),
    ("near", "close"),
    ("after", "following"),
    ("into", "toward"),
    ("with", "among"),
    ("according", "per"),
    ("since", "from"),
    ("during", "throughout"),
    ("on", "upon"),
    ("by", "via"),
    ("in", "within"),
    ("for", "over"),
];

impl Default for RuleParaphraser {
    fn default() -> Self {
        Self::new(SYNONYM_PAIRS.iter().map(|(a, b)| (a.to_string(), b.to_string())), true)
            .expect("default table is a matching")
    }
}

impl RuleParaphraser {
    /// Each word may appear in at most one pair.
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>, reorder: bool) -> Result<Self> {
        let mut synonyms = HashMap::new();
        for (a, b) in pairs {
            let (a, b) = (a.to_lowercase(), b.to_lowercase());
            if a == b || synonyms.contains_key(&a) || synonyms.contains_key(&b) {
                return Err(Error::Config(format!("synonym `{a}`/`{b}` repeats a word")));
            }
            synonyms.insert(a.clone(), b.clone());
            synonyms.insert(b, a);
        }
        Ok(Self { synonyms, reorder })
    }

    pub fn identity() -> Self {
        Self {
            synonyms: HashMap::new(),
            reorder: false,
        }
    }

    fn swap_word(&self, raw: &str) -> String {
        let start = raw.find(|c: char| !c.is_ascii_punctuation()).unwrap_or(raw.len());
        let end = raw
            .rfind(|c: char| !c.is_ascii_punctuation())
            .map_or(start, |i| i + raw[i..].chars().next().map_or(1, char::len_utf8));
        let core = &raw[start..end];
        match self.synonyms.get(&core.to_lowercase()) {
            Some(rep) => {
                let rep = if core.chars().next().is_some_and(char::is_uppercase) {
                    capitalize(rep)
                } else {
                    rep.clone()
                };
                format!("{}{}{}", &raw[..start], rep, &raw[end..])
            }
            None => raw.to_string(),
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn decapitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// `Which X, given that Y?` <-> `Given that Y, which X?`
pub fn reorder_clauses(q: &str) -> String {
    let Some(body) = q.strip_suffix('?') else {
        return q.to_string();
    };
    if let Some(rest) = body.strip_prefix("Given that ") {
        if let Some((y, x)) = rest.split_once(", which ") {
            return format!("Which {x}, given that {y}?");
        }
    } else if let Some((x, y)) = body.split_once(", given that ") {
        if x.starts_with("Which ") {
            return format!("Given that {y}, {}?", decapitalize(x));
        }
    }
    q.to_string()
}

impl Paraphraser for RuleParaphraser {
    fn paraphrase(&self, question: &str) -> Result<String> {
        let swapped = question
            .split_whitespace()
            .map(|w| self.swap_word(w))
            .collect::<Vec<_>>()
            .join(" ");
        Ok(if self.reorder { reorder_clauses(&swapped) } else { swapped })
    }
}

/// Paraphrasing through a language model.
pub struct LlmParaphraser<C: LlmClient> {
    pub client: C,
}

impl<C: LlmClient> Paraphraser for LlmParaphraser<C> {
    fn paraphrase(&self, question: &str) -> Result<String> {
        let prompt = format!(
            "Rewrite the question below with different wording and the same meaning. \
             Keep every \"this <noun>\" phrase as it is and do not add names.\n\
             Question: {question}\nReply with the rewritten question only."
        );
        let reply = self.client.complete(&prompt)?;
        let q = reply.trim().lines().next().unwrap_or("").trim().to_string();
        if q.is_empty() {
            return Err(Error::Generation("empty paraphrase from model".into()));
        }
        Ok(q)
    }
}

pub fn paraphrase(question: &str, transformer: &dyn Paraphraser) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::Input("cannot paraphrase an empty question".into()));
    }
    transformer.paraphrase(question)
}

/// Question-text invariants. Returns a description of the first violation.
pub fn check_question(question: &str, answer: &str, query_entity: &str) -> std::result::Result<(), String> {
    if contains_phrase(question, query_entity) {
        return Err(format!("question names the query entity `{query_entity}`"));
    }
    if contains_phrase(question, answer) {
        return Err(format!("question names the answer `{answer}`"));
    }
    let words = tokenize(question);
    let demonstratives = words
        .iter()
        .enumerate()
        .filter(|(i, w)| *w == "this" && i + 1 < words.len())
        .count();
    let dangling = words.last().is_some_and(|w| w == "this");
    if demonstratives != 1 || dangling {
        return Err(format!("question has {demonstratives} `this <type>` phrases, expected 1"));
    }
    Ok(())
}

/// All sample invariants against the KB the sample was drawn from.
pub fn validate_sample(sample: &QaSample, docs: &BTreeMap<DocId, AugmentedDocument>) -> std::result::Result<(), String> {
    let gt = docs
        .get(&sample.gt_doc_id)
        .ok_or_else(|| format!("ground truth {} is not in the KB", sample.gt_doc_id))?;
    check_question(&sample.question, &sample.answer, &sample.query_entity)?;
    let same_image = sample.query_image_key == gt.raw.main_image_key;
    if same_image != sample.shortcut {
        return Err(if sample.shortcut {
            "shortcut sample whose image is not the ground-truth main image".into()
        } else {
            "query image is the ground-truth main image".into()
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub avgdl: f64,
    pub df: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_docs<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> Result<Self> {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        let mut total = 0;
        for d in docs {
            n_docs += 1;
            total += d.len();
            let uniq: BTreeSet<&String> = d.iter().collect();
            for t in uniq {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::State("BM25 statistics need a non-empty corpus".into()));
        }
        Ok(Self {
            n_docs,
            avgdl: total as f64 / n_docs as f64,
            df,
        })
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        let n = self.n_docs as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

fn okapi(tf: f64, dl: f64, idf: f64, stats: &CorpusStats, p: Bm25Params) -> f64 {
    if tf == 0.0 {
        return 0.0;
    }
    let norm = 1.0 - p.b + p.b * dl / stats.avgdl;
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * norm)
}

pub fn bm25_score(query_terms: &[String], doc: &[String], stats: &CorpusStats, params: Bm25Params) -> f64 {
    let dl = doc.len() as f64;
    query_terms
        .iter()
        .map(|q| {
            let tf = doc.iter().filter(|t| *t == q).count() as f64;
            okapi(tf, dl, stats.idf(q), stats, params)
        })
        .sum()
}

/// Term-frequency tables over a fixed corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<DocId>,
    tfs: Vec<HashMap<String, u32>>,
    lens: Vec<usize>,
    stats: CorpusStats,
    params: Bm25Params,
}

impl Bm25Index {
    pub fn new(docs: &BTreeMap<DocId, Vec<String>>, params: Bm25Params) -> Result<Self> {
        let stats = CorpusStats::from_docs(docs.values().map(Vec::as_slice))?;
        let tfs = docs
            .values()
            .map(|d| {
                let mut tf: HashMap<String, u32> = HashMap::new();
                for t in d {
                    *tf.entry(t.clone()).or_default() += 1;
                }
                tf
            })
            .collect();
        Ok(Self {
            ids: docs.keys().cloned().collect(),
            tfs,
            lens: docs.values().map(Vec::len).collect(),
            stats,
            params,
        })
    }

    pub fn from_kb(docs: &BTreeMap<DocId, AugmentedDocument>) -> Result<Self> {
        let bodies = docs.iter().map(|(id, d)| (id.clone(), d.text_tokens.clone())).collect();
        Self::new(&bodies, Bm25Params::default())
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Best `k` documents sharing at least one term with the query, ties by
    /// ascending doc id.
    pub fn top_k(&self, query_terms: &[String], k: usize) -> Vec<(DocId, f64)> {
        let idf: Vec<f64> = query_terms.iter().map(|q| self.stats.idf(q)).collect();
        let mut scored: Vec<(usize, f64)> = (0..self.ids.len())
            .map(|i| {
                let dl = self.lens[i] as f64;
                let s = query_terms
                    .iter()
                    .zip(&idf)
                    .map(|(q, &w)| {
                        let tf = self.tfs[i].get(q).copied().unwrap_or(0) as f64;
                        okapi(tf, dl, w, &self.stats, self.params)
                    })
                    .sum();
                (i, s)
            })
            .filter(|&(_, s)| s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(self.ids[a.0].cmp(&self.ids[b.0])));
        scored.truncate(k);
        scored.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Leak,
    NoQualifier,
    SurfaceViolation,
    StripFailure,
    VisualShortcut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedSample {
    pub id: String,
    pub reason: RejectReason,
    pub detail: String,
    pub question: Option<String>,
}

/// Drops samples whose ground truth is in the BM25 top `k` for the question.
pub fn bm25_leak_filter(samples: Vec<QaSample>, index: &Bm25Index, k: usize) -> (Vec<QaSample>, Vec<RejectedSample>) {
    let leaked: Vec<Option<usize>> = samples
        .par_iter()
        .map(|s| {
            index
                .top_k(&tokenize(&s.question), k)
                .iter()
                .position(|(id, _)| *id == s.gt_doc_id)
        })
        .collect();
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (s, rank) in samples.into_iter().zip(leaked) {
        match rank {
            Some(r) => rejected.push(RejectedSample {
                id: s.sample_id.clone(),
                reason: RejectReason::Leak,
                detail: format!("ground truth at BM25 rank {}", r + 1),
                question: Some(s.question),
            }),
            None => kept.push(s),
        }
    }
    (kept, rejected)
}

/// `seen` iff the ground truth is also a training ground truth.
pub fn split_seen_unseen(samples: Vec<QaSample>, train_gt_ids: &BTreeSet<DocId>) -> Vec<QaSample> {
    samples
        .into_iter()
        .map(|mut s| {
            s.split = Some(if train_gt_ids.contains(&s.gt_doc_id) {
                Split::Seen
            } else {
                Split::Unseen
            });
            s
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub seed: u64,
    pub max_samples_per_doc: usize,
    pub qualifier: QualifierPolicy,
    pub paraphrase: bool,
    pub leak_k: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_samples_per_doc: 12,
            qualifier: QualifierPolicy::Keep,
            paraphrase: true,
            leak_k: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatagenOutput {
    pub kept: Vec<QaSample>,
    pub rejected: Vec<RejectedSample>,
}

impl DatagenOutput {
    pub fn reject_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejected {
            let key = serde_json::to_value(r.reason)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *out.entry(key).or_default() += 1;
        }
        out
    }
}

fn draft_samples(
    g: &OneHopGraph,
    docs: &BTreeMap<DocId, AugmentedDocument>,
    typemap: &TypeMap,
    cfg: &DatagenConfig,
    generator: &dyn QuestionGenerator,
    paraphraser: &dyn Paraphraser,
) -> Result<(Vec<QaSample>, Vec<RejectedSample>)> {
    let mut rng = Rng::new(cfg.seed).derive("datagen").derive(g.doc_id.as_str());
    let subgraphs = extract_target_subgraphs(g, &mut rng, cfg.max_samples_per_doc);
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    if subgraphs.is_empty() {
        rejected.push(RejectedSample {
            id: g.doc_id.to_string(),
            reason: RejectReason::NoQualifier,
            detail: format!("{} usable neighbors", g.neighbors.len()),
            question: None,
        });
    }
    for sg in subgraphs {
        let id = format!("{}/{}/{}", sg.doc_id, sg.query_doc_id, sg.qualifying_doc_id);
        let mut sample = match generate_question(&sg, typemap, generator) {
            Ok(s) => s,
            Err(Error::Generation(detail)) => {
                rejected.push(RejectedSample {
                    id,
                    reason: RejectReason::StripFailure,
                    detail,
                    question: None,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        if cfg.paraphrase {
            sample.question = paraphrase(&sample.question, paraphraser)?;
        }
        if let Err(detail) = validate_sample(&sample, docs) {
            let reason = if sample.query_image_key == g.main_image_key {
                RejectReason::VisualShortcut
            } else {
                RejectReason::SurfaceViolation
            };
            rejected.push(RejectedSample {
                id,
                reason,
                detail,
                question: Some(sample.question),
            });
            continue;
        }
        kept.push(sample);
    }
    Ok((kept, rejected))
}

/// Full pipeline: graphs, uniqueness filter, subgraph sampling, question
/// generation, paraphrase, validation, BM25 leak filter. Output is in doc-id
/// order and identical for a fixed seed.
pub fn generate_samples(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    typemap: &TypeMap,
    cfg: &DatagenConfig,
    generator: &dyn QuestionGenerator,
    paraphraser: &dyn Paraphraser,
) -> Result<DatagenOutput> {
    if cfg.leak_k == 0 {
        return Err(Error::Config("datagen.leak_k must be >= 1".into()));
    }
    let graphs = enforce_unique_gt(docs.iter().map(|(id, d)| (id.clone(), build_onehop_graph(d))).collect());
    let per_doc = graphs
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|g| draft_samples(g, docs, typemap, cfg, generator, paraphraser))
        .collect::<Result<Vec<_>>>()?;
    let mut drafts = Vec::new();
    let mut rejected = Vec::new();
    for (k, r) in per_doc {
        drafts.extend(k);
        rejected.extend(r);
    }
    let index = Bm25Index::from_kb(docs)?;
    let (kept, leaks) = bm25_leak_filter(drafts, &index, cfg.leak_k);
    rejected.extend(leaks);
    Ok(DatagenOutput { kept, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{augment_kb, DictionaryLinker, RawDocument};

    fn raw(id: &str, title: &str, body: &str) -> RawDocument {
        RawDocument {
            doc_id: id.into(),
            title: title.into(),
            body: body.into(),
            main_image_key: format!("entity:{title}"),
        }
    }

    fn augmented(docs: &[RawDocument]) -> BTreeMap<DocId, AugmentedDocument> {
        let kb: BTreeMap<DocId, RawDocument> = docs.iter().map(|d| (d.doc_id.clone(), d.clone())).collect();
        augment_kb(&kb, &DictionaryLinker::from_kb(&kb).unwrap(), None).unwrap().0
    }

    fn lema_subgraph() -> (TargetSubgraph, TypeMap) {
        let sg = TargetSubgraph {
            doc_id: "lema".into(),
            answer_entity: "Lema daturaphila".into(),
            query_entity: "potato".into(),
            query_image_key: "entity:potato".into(),
            query_doc_id: "potato".into(),
            qualifying_entity: "North America".into(),
            qualifying_doc_id: "na".into(),
            relation_q: "Lema daturaphila feeds on potato plants.".into(),
            relation_k: "Lema daturaphila is native to North America.".into(),
        };
        let mut tm = TypeMap::new();
        tm.insert("potato", "plant");
        tm.insert("Lema daturaphila", "beetle");
        tm.insert("North America", "continent");
        (sg, tm)
    }

    #[test]
    fn template_question_example() {
        let (sg, tm) = lema_subgraph();
        let q = TemplateGenerator::default().generate(&sg, &tm).unwrap();
        assert_eq!(q, "Which beetle feeds on this plant, given that it is native to North America?");
        let stripped = TemplateGenerator {
            qualifier: QualifierPolicy::Strip,
        }
        .generate(&sg, &tm)
        .unwrap();
        assert_eq!(stripped, "Which beetle feeds on this plant, given that it is native to?");
    }

    #[test]
    fn template_requires_query_mention() {
        let (mut sg, tm) = lema_subgraph();
        sg.relation_q = "Lema daturaphila feeds on tomatoes.".into();
        assert!(matches!(
            TemplateGenerator::default().generate(&sg, &tm),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn validator_rejects_answer_mentions() {
        assert!(check_question("Which beetle eats this plant?", "Lema", "potato").is_ok());
        assert!(check_question("Which Lema eats this plant?", "Lema", "potato").is_err());
        assert!(check_question("Which beetle eats potato?", "Lema", "potato").is_err());
        assert!(check_question("Which beetle eats plants?", "Lema", "potato").is_err());
        assert!(check_question("Which beetle eats this plant near this river?", "Lema", "potato").is_err());
    }

    #[test]
    fn graph_uses_first_mention_sentence() {
        let docs = augmented(&[
            raw("x", "Xeno Bug", "Xeno Bug likes warm days. Xeno Bug feeds on Yam Root! Yam Root is purple."),
            raw("y", "Yam Root", "Yam Root grows underground."),
        ]);
        let g = build_onehop_graph(&docs[&DocId::from("x")]);
        assert_eq!(g.neighbors.len(), 1);
        assert_eq!(g.neighbors[0].relation_sentence, "Xeno Bug feeds on Yam Root!");
        let g = build_onehop_graph(&docs[&DocId::from("y")]);
        assert!(g.neighbors.is_empty());
    }

    #[test]
    fn unique_gt_removes_mutual_edges_only() {
        let docs = augmented(&[
            raw("a", "Alpha", "Alpha meets Beta. Alpha meets Gamma."),
            raw("b", "Beta", "Beta meets Alpha."),
            raw("c", "Gamma", "Gamma is alone."),
        ]);
        let graphs: BTreeMap<DocId, OneHopGraph> =
            docs.iter().map(|(id, d)| (id.clone(), build_onehop_graph(d))).collect();
        let filtered = enforce_unique_gt(graphs);
        let names = |id: &str| -> Vec<String> {
            filtered[&DocId::from(id)].neighbors.iter().map(|n| n.entity.clone()).collect()
        };
        assert_eq!(names("a"), vec!["Gamma".to_string()]);
        assert!(names("b").is_empty());
        assert_eq!(enforce_unique_gt(filtered.clone()), filtered);
    }

    fn graph_with(n: usize, images: &[bool]) -> OneHopGraph {
        OneHopGraph {
            doc_id: "g".into(),
            main_entity: "Main".into(),
            main_image_key: "entity:Main".into(),
            neighbors: (0..n)
                .map(|i| Neighbor {
                    entity: format!("N{i}"),
                    relation_sentence: format!("Main sees N{i}."),
                    has_image: images[i],
                    image_key: if images[i] { format!("entity:N{i}") } else { String::new() },
                    source_doc_id: format!("n{i}").into(),
                })
                .collect(),
        }
    }

    #[test]
    fn subgraph_selection_rules() {
        let mut rng = Rng::new(3);
        let forced = extract_target_subgraph(&graph_with(2, &[false, true]), &mut rng).unwrap();
        assert_eq!(forced.query_entity, "N1");
        assert_eq!(forced.qualifying_entity, "N0");
        assert!(extract_target_subgraph(&graph_with(1, &[true]), &mut rng).is_none());
        let g = graph_with(5, &[true; 5]);
        let a = extract_target_subgraph(&g, &mut Rng::new(11)).unwrap();
        let b = extract_target_subgraph(&g, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.query_entity, a.qualifying_entity);
        assert_eq!(extract_target_subgraphs(&g, &mut Rng::new(1), 100).len(), 20);
    }

    #[test]
    fn paraphrase_rules() {
        let q = "Which beetle feeds on this plant, given that it is native to X?";
        assert_eq!(paraphrase(q, &RuleParaphraser::identity()).unwrap(), q);
        let reorder_only = RuleParaphraser::new(Vec::new(), true).unwrap();
        let once = paraphrase(q, &reorder_only).unwrap();
        assert_eq!(once, "Given that it is native to X, which beetle feeds on this plant?");
        assert_eq!(paraphrase(&once, &reorder_only).unwrap(), q);
        let full = RuleParaphraser::default();
        let p = paraphrase(q, &full).unwrap();
        assert_eq!(p, "Given that it is indigenous to X, which beetle dines upon this plant?");
        assert_eq!(paraphrase(&p, &full).unwrap(), q);
        assert!(RuleParaphraser::new(vec![("a".into(), "b".into()), ("b".into(), "c".into())], false).is_err());
    }

    #[test]
    fn bm25_examples() {
        let t = |s: &str| tokenize(s);
        let docs = [t("red beetle"), t("green plant leaf")];
        let stats = CorpusStats::from_docs(docs.iter().map(Vec::as_slice)).unwrap();
        let p = Bm25Params::default();
        assert_eq!(bm25_score(&t("blue"), &docs[0], &stats, p), 0.0);

        // One document, tf = 1, dl = avgdl: idf = ln(1 + 0.5/1.5), tf part = 1.
        let single = [t("alpha")];
        let s1 = CorpusStats::from_docs(single.iter().map(Vec::as_slice)).unwrap();
        let expected = (1.0f64 + 0.5 / 1.5).ln() * (1.0 * 2.2) / (1.0 + 1.2 * 1.0);
        assert!((bm25_score(&t("alpha"), &single[0], &s1, p) - expected).abs() < 1e-15);
        assert!((expected - 0.287_682_072_451_780_9).abs() < 1e-15);
        assert!(CorpusStats::from_docs(std::iter::empty::<&[String]>()).is_err());
    }

    #[test]
    fn leak_filter_rules() {
        let docs = augmented(&[
            raw("a", "Alpha", "Alpha paints rivers at dawn."),
            raw("b", "Beta", "Beta sings songs at night."),
        ]);
        let index = Bm25Index::from_kb(&docs).unwrap();
        let mk = |q: &str| QaSample {
            sample_id: q.into(),
            question: q.into(),
            query_image_key: "entity:Beta".into(),
            answer: "Alpha".into(),
            gt_doc_id: "a".into(),
            split: None,
            query_entity: "Beta".into(),
            qualifying_entity: None,
            shortcut: false,
        };
        let (kept, rejected) = bm25_leak_filter(vec![mk("Who paints rivers at dawn?"), mk("zzz qqq")], &index, 1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].question, "zzz qqq");
        assert_eq!(rejected[0].reason, RejectReason::Leak);
    }

    #[test]
    fn split_rules() {
        let mk = |gt: &str| QaSample {
            sample_id: gt.into(),
            question: String::new(),
            query_image_key: String::new(),
            answer: String::new(),
            gt_doc_id: gt.into(),
            split: None,
            query_entity: String::new(),
            qualifying_entity: None,
            shortcut: false,
        };
        let train: BTreeSet<DocId> = [DocId::from("a")].into();
        let out = split_seen_unseen(vec![mk("a"), mk("b")], &train);
        assert_eq!(out[0].split, Some(Split::Seen));
        assert_eq!(out[1].split, Some(Split::Unseen));
        let none = split_seen_unseen(vec![mk("a")], &BTreeSet::new());
        assert_eq!(none[0].split, Some(Split::Unseen));
    }
}
