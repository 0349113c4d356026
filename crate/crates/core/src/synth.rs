//! Synthetic knowledge base and benchmark.
//!
//! Every entity has one document. A document's body is a list of relation
//! sentences `"<title> <verb phrase> <other title> <tail>."`, so the
//! dictionary linker recovers exactly the sampled neighbors. Image keys are
//! `entity:<title>`, which makes the depicted entity of any image explicit.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::{sample, sample_weighted};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_kb, AugmentedDocument, DictionaryLinker, DocId, RawDocument};
use crate::datagen::{
    build_onehop_graph, generate_samples, paraphrase, split_seen_unseen, validate_sample, DatagenConfig, Paraphraser,
    QaSample, QualifierPolicy, RuleParaphraser, Split, TemplateGenerator, TypeMap,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::tokenize;

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ren", "tor", "vel", "sa", "qui", "dro", "fen", "gal", "hu", "ix", "jor", "ne", "pol", "ur",
    "zeb", "wy", "os",
];

pub const TYPE_NOUNS: [&str; 10] = [
    "plant", "beetle", "city", "river", "monument", "bird", "painter", "company", "mountain", "ship",
];

const VERB_PHRASES: [&str; 21] = [
    "feeds on",
    "is native to",
    "was founded near",
    "trades with",
    "is named after",
    "grows beside",
    "was painted by",
    "competes with",
    "flows into",
    "is protected by",
    "was built by",
    "migrates to",
    "is sold in",
    "is studied at",
    "borders on",
    "was discovered in",
    "is eaten by",
    "shelters in",
    "hunts near",
    "was restored by",
    "is known for",
];

const TAILS: [&str; 12] = [
    "",
    "",
    "in spring",
    "during the colonial era",
    "according to local records",
    "since the early period",
    "in large numbers",
    "for many decades",
    "often in winter",
    "according to old maps",
    "mainly at night",
    "",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_docs: usize,
    /// Mean related entities per document (at least 1).
    pub mean_links: f64,
    /// Share of shortcut samples in every split.
    pub fraction_shortcut: f64,
    pub n_types: usize,
    /// Zipf exponent of entity popularity when sampling neighbors; 0 makes
    /// every entity equally likely to be mentioned.
    pub popularity_skew: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test_seen: usize,
    pub n_test_unseen: usize,
    /// Share of documents whose samples are held out of training.
    pub unseen_fraction: f64,
    pub max_samples_per_doc: usize,
    pub max_shortcut_per_doc: usize,
    pub qualifier: QualifierPolicy,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 200,
            mean_links: 4.3,
            fraction_shortcut: 0.0,
            n_types: TYPE_NOUNS.len(),
            popularity_skew: 1.0,
            seed: 0,
            n_train: 400,
            n_test_seen: 50,
            n_test_unseen: 50,
            unseen_fraction: 0.2,
            max_samples_per_doc: 12,
            max_shortcut_per_doc: 6,
            qualifier: QualifierPolicy::Strip,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs < 2 {
            return Err(Error::Config("synth.n_docs must be >= 2".into()));
        }
        if !(self.mean_links >= 1.0 && self.mean_links.is_finite()) {
            return Err(Error::Config("synth.mean_links must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fraction_shortcut) {
            return Err(Error::Config("synth.fraction_shortcut must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(Error::Config("synth.unseen_fraction must be in [0, 1)".into()));
        }
        if !(self.popularity_skew >= 0.0 && self.popularity_skew.is_finite()) {
            return Err(Error::Config("synth.popularity_skew must be >= 0".into()));
        }
        if self.n_types == 0 || self.n_types > TYPE_NOUNS.len() {
            return Err(Error::Config(format!("synth.n_types must be in 1..={}", TYPE_NOUNS.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthKb {
    pub docs: BTreeMap<DocId, RawDocument>,
    pub typemap: TypeMap,
}

pub fn image_key(entity: &str) -> String {
    format!("entity:{entity}")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
        .unwrap_or_default()
}

fn entity_names(n: usize, rng: &mut Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::with_capacity(n);
    let syl = |rng: &mut Rng, k: usize| -> String {
        (0..k).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect()
    };
    while names.len() < n {
        let name = format!("{} {}", capitalize(&syl(rng, 2)), capitalize(&syl(rng, 3)));
        if seen.insert(tokenize(&name)) {
            names.push(name);
        }
    }
    names
}

pub fn doc_id(i: usize) -> DocId {
    DocId(format!("d{i:05}"))
}

pub fn generate_kb(cfg: &SynthConfig) -> Result<SynthKb> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed).derive("synth-kb");
    let names = entity_names(cfg.n_docs, &mut root.derive("names"));
    let mut type_rng = root.derive("types");
    let types: Vec<&str> = (0..cfg.n_docs)
        .map(|_| TYPE_NOUNS[type_rng.random_range(0..cfg.n_types)])
        .collect();
    let extra = Poisson::new(cfg.mean_links - 1.0).ok();
    let mut rank: Vec<usize> = (0..cfg.n_docs).collect();
    rank.shuffle(&mut root.derive("popularity"));
    let weight: Vec<f64> = rank.iter().map(|&r| (r as f64 + 1.0).powf(-cfg.popularity_skew)).collect();
    let mut docs = BTreeMap::new();
    for (i, title) in names.iter().enumerate() {
        let mut rng = root.derive_index("doc", i as u64);
        let k = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let k = k.min(cfg.n_docs - 1);
        let others = sample_weighted(&mut rng, cfg.n_docs - 1, |j| weight[if j >= i { j + 1 } else { j }], k)
            .map_err(|e| Error::Config(format!("synth neighbor weights: {e}")))?
            .into_vec();
        let sentences: Vec<String> = others
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .map(|j| {
                let vp = VERB_PHRASES[rng.random_range(0..VERB_PHRASES.len())];
                let tail = TAILS[rng.random_range(0..TAILS.len())];
                let s = format!("{title} {vp} {} {tail}", names[j]);
                format!("{}.", s.trim_end())
            })
            .collect();
        let id = doc_id(i);
        docs.insert(
            id.clone(),
            RawDocument {
                doc_id: id,
                title: title.clone(),
                body: sentences.join(" "),
                main_image_key: image_key(title),
            },
        );
    }
    let typemap = names
        .iter()
        .zip(&types)
        .map(|(n, t)| (n.clone(), t.to_string()))
        .collect();
    Ok(SynthKb { docs, typemap })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Benchmark {
    pub train: Vec<QaSample>,
    pub test_seen: Vec<QaSample>,
    pub test_unseen: Vec<QaSample>,
}

impl Benchmark {
    pub fn test(&self) -> impl Iterator<Item = &QaSample> {
        self.test_seen.iter().chain(&self.test_unseen)
    }
}

/// Questions about the entity in the image: the query image is the ground
/// truth's own main image. `"This <type> <verb phrase> which <type>?"`
fn shortcut_samples(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    typemap: &TypeMap,
    cfg: &SynthConfig,
    paraphraser: &dyn Paraphraser,
) -> Result<Vec<QaSample>> {
    let mut out = Vec::new();
    for (id, doc) in docs {
        let mut rng = Rng::new(cfg.seed).derive("shortcut").derive(id.as_str());
        let mut neighbors = build_onehop_graph(doc).neighbors;
        neighbors.shuffle(&mut rng);
        for n in neighbors.into_iter().take(cfg.max_shortcut_per_doc) {
            let main_type = typemap.get(&doc.raw.title).unwrap_or("entity");
            let answer_type = typemap.get(&n.entity).unwrap_or("entity");
            let words: Vec<&str> = n.relation_sentence.split_whitespace().collect();
            let title_len = tokenize(&doc.raw.title).len();
            let ent = tokenize(&n.entity);
            let norm: Vec<String> = words.iter().map(|w| crate::text::normalize_word(w)).collect();
            let Some(at) = (title_len..norm.len().saturating_sub(ent.len() - 1)).find(|&p| norm[p..p + ent.len()] == ent[..])
            else {
                continue;
            };
            let mut parts: Vec<String> = vec![format!("This {main_type}")];
            parts.extend(words[title_len..at].iter().map(|w| w.to_string()));
            parts.push(format!("which {answer_type}"));
            parts.extend(words[at + ent.len()..].iter().map(|w| w.trim_end_matches('.').to_string()));
            parts.retain(|w| !w.is_empty());
            let question = paraphrase(&format!("{}?", parts.join(" ")), paraphraser)?;
            out.push(QaSample {
                sample_id: format!("{}/shortcut/{}", id, n.source_doc_id),
                question,
                query_image_key: doc.raw.main_image_key.clone(),
                answer: n.entity.clone(),
                gt_doc_id: id.clone(),
                split: None,
                query_entity: doc.raw.title.clone(),
                qualifying_entity: None,
                shortcut: true,
            });
        }
    }
    Ok(out)
}

fn take(pool: &mut Vec<QaSample>, n: usize, what: &str) -> Result<Vec<QaSample>> {
    if pool.len() < n {
        return Err(Error::Generation(format!(
            "only {} {what} samples available, {n} requested",
            pool.len()
        )));
    }
    Ok(pool.drain(..n).collect())
}

/// Train / seen-test / unseen-test samples over an augmented KB.
///
/// A random `unseen_fraction` of documents never serve as a training ground
/// truth; the unseen test split draws only from them. Seen test samples
/// have ground truths that also occur in training.
pub fn generate_benchmark(
    docs: &BTreeMap<DocId, AugmentedDocument>,
    typemap: &TypeMap,
    cfg: &SynthConfig,
) -> Result<Benchmark> {
    cfg.validate()?;
    let paraphraser = RuleParaphraser::default();
    let dg = DatagenConfig {
        seed: cfg.seed,
        max_samples_per_doc: cfg.max_samples_per_doc,
        qualifier: cfg.qualifier,
        paraphrase: true,
        leak_k: 5,
    };
    let free = generate_samples(docs, typemap, &dg, &TemplateGenerator { qualifier: cfg.qualifier }, &paraphraser)?.kept;
    let shortcut = shortcut_samples(docs, typemap, cfg, &paraphraser)?;

    let root = Rng::new(cfg.seed).derive("benchmark");
    let ids: Vec<&DocId> = docs.keys().collect();
    let n_unseen = (cfg.unseen_fraction * ids.len() as f64).round() as usize;
    let unseen: BTreeSet<DocId> = sample(&mut root.derive("unseen-docs"), ids.len(), n_unseen)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();

    let partition = |mut pool: Vec<QaSample>, label: &str| {
        pool.shuffle(&mut root.derive(label));
        let (u, s): (Vec<_>, Vec<_>) = pool.into_iter().partition(|s| unseen.contains(&s.gt_doc_id));
        (s, u)
    };
    let (mut free_seen, mut free_unseen) = partition(free, "free");
    let (mut short_seen, mut short_unseen) = partition(shortcut, "shortcut");

    let n_short = |n: usize| (cfg.fraction_shortcut * n as f64).round() as usize;
    let mut train = take(&mut short_seen, n_short(cfg.n_train), "shortcut training")?;
    train.extend(take(&mut free_seen, cfg.n_train - n_short(cfg.n_train), "shortcut-free training")?);
    let train_gt: BTreeSet<DocId> = train.iter().map(|s| s.gt_doc_id.clone()).collect();

    free_seen.retain(|s| train_gt.contains(&s.gt_doc_id));
    short_seen.retain(|s| train_gt.contains(&s.gt_doc_id));
    let mut test_seen = take(&mut short_seen, n_short(cfg.n_test_seen), "shortcut seen-test")?;
    test_seen.extend(take(
        &mut free_seen,
        cfg.n_test_seen - n_short(cfg.n_test_seen),
        "shortcut-free seen-test",
    )?);
    let mut test_unseen = take(&mut short_unseen, n_short(cfg.n_test_unseen), "shortcut unseen-test")?;
    test_unseen.extend(take(
        &mut free_unseen,
        cfg.n_test_unseen - n_short(cfg.n_test_unseen),
        "shortcut-free unseen-test",
    )?);

    for s in &mut train {
        s.split = Some(Split::Train);
    }
    let mut test_seen = split_seen_unseen(test_seen, &train_gt);
    let mut test_unseen = split_seen_unseen(test_unseen, &train_gt);
    for s in train.iter().chain(&test_seen).chain(&test_unseen) {
        validate_sample(s, docs).map_err(|e| Error::Generation(format!("sample {}: {e}", s.sample_id)))?;
    }
    train.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    test_seen.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    test_unseen.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(Benchmark {
        train,
        test_seen,
        test_unseen,
    })
}

/// KB, augmentation with the dictionary linker, and benchmark in one call.
pub fn generate_all(cfg: &SynthConfig) -> Result<(SynthKb, BTreeMap<DocId, AugmentedDocument>, Benchmark)> {
    let kb = generate_kb(cfg)?;
    let linker = DictionaryLinker::from_kb(&kb.docs)?;
    let (docs, _) = augment_kb(&kb.docs, &linker, None)?;
    let bench = generate_benchmark(&docs, &kb.typemap, cfg)?;
    Ok((kb, docs, bench))
}
