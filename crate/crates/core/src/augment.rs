//! Multi-image document augmentation.
//!
//! Each KB document names other entities in its body. Those that are the
//! main entity of some other KB document are linked, and the main image of
//! that document becomes a related-entity image of this one, together with
//! the token span where the entity is mentioned.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{find_all, tokenize};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl DocId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocId {
    fn from(s: &str) -> Self {
        DocId(s.to_string())
    }
}

impl From<String> for DocId {
    fn from(s: String) -> Self {
        DocId(s)
    }
}

/// A KB document: body text and an image of its main entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDocument {
    pub doc_id: DocId,
    /// Surface form of the main entity.
    pub title: String,
    pub body: String,
    pub main_image_key: String,
}

impl RawDocument {
    pub fn validate(&self) -> Result<()> {
        if tokenize(&self.title).is_empty() {
            return Err(Error::Document(format!("document {} has an empty title", self.doc_id)));
        }
        if self.main_image_key.trim().is_empty() {
            return Err(Error::Document(format!("document {} has no main image", self.doc_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelatedEntity {
    pub entity: String,
    /// Token indices (into the tokenized body) of every mention.
    pub span: Vec<usize>,
    pub image_key: String,
    pub source_doc_id: DocId,
}

/// A document plus the images of the related entities it mentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AugmentedRecord", into = "AugmentedRecord")]
pub struct AugmentedDocument {
    pub raw: RawDocument,
    pub text_tokens: Vec<String>,
    /// Token indices of the main entity's own mentions.
    pub main_span: Vec<usize>,
    pub related: Vec<RelatedEntity>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentedRecord {
    doc_id: DocId,
    title: String,
    body: String,
    main_image_key: String,
    related: Vec<RelatedEntity>,
}

impl TryFrom<AugmentedRecord> for AugmentedDocument {
    type Error = Error;

    fn try_from(r: AugmentedRecord) -> Result<Self> {
        AugmentedDocument::from_parts(
            RawDocument {
                doc_id: r.doc_id,
                title: r.title,
                body: r.body,
                main_image_key: r.main_image_key,
            },
            r.related,
        )
    }
}

impl From<AugmentedDocument> for AugmentedRecord {
    fn from(d: AugmentedDocument) -> Self {
        AugmentedRecord {
            doc_id: d.raw.doc_id,
            title: d.raw.title,
            body: d.raw.body,
            main_image_key: d.raw.main_image_key,
            related: d.related,
        }
    }
}

impl AugmentedDocument {
    /// Tokenizes the body and checks every related span against it.
    pub fn from_parts(raw: RawDocument, related: Vec<RelatedEntity>) -> Result<Self> {
        raw.validate()?;
        let text_tokens = tokenize(&raw.body);
        if text_tokens.is_empty() {
            return Err(Error::Document(format!("document {} has an empty body", raw.doc_id)));
        }
        let main_span = phrase_span(&text_tokens, &raw.title);
        let title_norm = tokenize(&raw.title);
        for r in &related {
            if tokenize(&r.entity) == title_norm {
                return Err(Error::Document(format!(
                    "document {} lists its own main entity as related",
                    raw.doc_id
                )));
            }
            if let Some(&bad) = r.span.iter().find(|&&s| s >= text_tokens.len()) {
                return Err(Error::Span {
                    index: bad,
                    len: text_tokens.len(),
                });
            }
        }
        Ok(Self {
            raw,
            text_tokens,
            main_span,
            related,
        })
    }

    /// Number of related-entity images `R`.
    pub fn num_related(&self) -> usize {
        self.related.len()
    }

    /// Document without any related-entity images.
    pub fn without_related(&self) -> Self {
        Self {
            related: Vec::new(),
            ..self.clone()
        }
    }
}

/// Token indices covered by every occurrence of `phrase` in `tokens`.
pub fn phrase_span(tokens: &[String], phrase: &str) -> Vec<usize> {
    let hay: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let needle = tokenize(phrase);
    let needle: Vec<&str> = needle.iter().map(String::as_str).collect();
    let mut span: Vec<usize> = find_all(&hay, &needle)
        .into_iter()
        .flat_map(|s| s..s + needle.len())
        .collect();
    span.sort_unstable();
    span.dedup();
    span
}

/// One entity mention group found in a document body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedEntity {
    pub entity: String,
    pub span: Vec<usize>,
    pub source_doc_id: DocId,
}

pub trait EntityLinker: Sync {
    /// Related entities in first-mention order. Must be deterministic.
    fn link(&self, doc: &RawDocument, tokens: &[String]) -> Result<Vec<LinkedEntity>>;
}

/// Longest-match, case-insensitive dictionary of KB titles.
#[derive(Debug, Clone)]
pub struct DictionaryLinker {
    titles: HashMap<Vec<String>, (DocId, String)>,
    max_len: usize,
}

impl DictionaryLinker {
    /// `kb_titles`: title surface -> document. When two documents normalize
    /// to the same title, the smaller doc id wins.
    pub fn new(kb_titles: &BTreeMap<String, DocId>) -> Result<Self> {
        if kb_titles.is_empty() {
            return Err(Error::Input("entity dictionary is empty".into()));
        }
        let mut titles: HashMap<Vec<String>, (DocId, String)> = HashMap::new();
        for (title, id) in kb_titles {
            let key = tokenize(title);
            if key.is_empty() {
                continue;
            }
            match titles.get(&key) {
                Some((existing, _)) if existing <= id => {}
                _ => {
                    titles.insert(key, (id.clone(), title.clone()));
                }
            }
        }
        let max_len = titles.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Self { titles, max_len })
    }

    pub fn from_kb(kb: &BTreeMap<DocId, RawDocument>) -> Result<Self> {
        let titles: BTreeMap<String, DocId> = kb.values().map(|d| (d.title.clone(), d.doc_id.clone())).collect();
        Self::new(&titles)
    }
}

impl EntityLinker for DictionaryLinker {
    fn link(&self, doc: &RawDocument, tokens: &[String]) -> Result<Vec<LinkedEntity>> {
        // Every dictionary hit, then accept longest-first, leftmost-first,
        // skipping any that overlap an accepted hit.
        let mut hits: Vec<(usize, usize)> = Vec::new();
        for start in 0..tokens.len() {
            for len in 1..=self.max_len.min(tokens.len() - start) {
                if self.titles.contains_key(&tokens[start..start + len]) {
                    hits.push((start, len));
                }
            }
        }
        hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut taken = vec![false; tokens.len()];
        let mut accepted = Vec::new();
        for (start, len) in hits {
            if taken[start..start + len].iter().any(|&t| t) {
                continue;
            }
            taken[start..start + len].iter_mut().for_each(|t| *t = true);
            accepted.push((start, len));
        }
        accepted.sort_unstable();

        let main = tokenize(&doc.title);
        let mut out: Vec<LinkedEntity> = Vec::new();
        for (start, len) in accepted {
            let key = &tokens[start..start + len];
            let (id, title) = &self.titles[key];
            if *key == main[..] || *id == doc.doc_id {
                continue;
            }
            match out.iter_mut().find(|e| e.source_doc_id == *id) {
                Some(e) => e.span.extend(start..start + len),
                None => out.push(LinkedEntity {
                    entity: title.clone(),
                    span: (start..start + len).collect(),
                    source_doc_id: id.clone(),
                }),
            }
        }
        Ok(out)
    }
}

pub fn link_entities(doc: &RawDocument, linker: &dyn EntityLinker) -> Result<Vec<LinkedEntity>> {
    linker.link(doc, &tokenize(&doc.body))
}

/// Text completion backend for model-driven entity extraction.
pub trait LlmClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Entity extraction through a language model.
///
/// The model is asked for a JSON array of `{"entity", "entity_type",
/// "relation"}` objects. Entities that are not KB titles, that do not occur
/// in the body, or that are the main entity are dropped, so the output obeys
/// the same invariants as [`DictionaryLinker`].
pub struct LlmLinker<C: LlmClient> {
    client: C,
    dictionary: DictionaryLinker,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEntity {
    pub entity: String,
    pub entity_type: String,
    pub relation: Option<String>,
}

impl<C: LlmClient> LlmLinker<C> {
    pub fn new(client: C, dictionary: DictionaryLinker) -> Self {
        Self { client, dictionary }
    }

    pub fn prompt(doc: &RawDocument) -> String {
        format!(
            "List the named entities mentioned in the passage below that have their own \
             encyclopedia article.\n\
             Reply with a JSON array only. Each element is an object with keys \
             \"entity\" (the article title), \"entity_type\" (a short category such as \
             Person, Place or Organization) and \"relation\" (one complete sentence with \
             \"{title}\" as its subject stating a concrete fact that links it to the \
             entity, or null if the passage states none).\n\
             Merge aliases of the same entity into one element.\n\n\
             Article title: \"{title}\"\n\nPassage:\n{body}\n",
            title = doc.title,
            body = doc.body
        )
    }

    pub fn parse_reply(reply: &str) -> Result<Vec<ExtractedEntity>> {
        let start = reply.find('[').ok_or_else(|| Error::Data("model reply has no JSON array".into()))?;
        let end = reply.rfind(']').ok_or_else(|| Error::Data("model reply has no JSON array".into()))?;
        serde_json::from_str(&reply[start..=end]).map_err(|e| Error::Data(format!("bad entity JSON: {e}")))
    }
}

impl<C: LlmClient> EntityLinker for LlmLinker<C> {
    fn link(&self, doc: &RawDocument, tokens: &[String]) -> Result<Vec<LinkedEntity>> {
        let extracted = Self::parse_reply(&self.client.complete(&Self::prompt(doc))?)?;
        let main = tokenize(&doc.title);
        let mut out: Vec<LinkedEntity> = Vec::new();
        for e in extracted {
            let key = tokenize(&e.entity);
            let Some((id, title)) = self.dictionary.titles.get(&key) else {
                continue;
            };
            if key == main || *id == doc.doc_id || out.iter().any(|o| o.source_doc_id == *id) {
                continue;
            }
            let span = phrase_span(tokens, title);
            if span.is_empty() {
                continue;
            }
            out.push(LinkedEntity {
                entity: title.clone(),
                span,
                source_doc_id: id.clone(),
            });
        }
        out.sort_by_key(|e| e.span[0]);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentWarning {
    pub doc_id: DocId,
    pub entity: String,
    pub reason: String,
}

pub fn augment_document(
    doc: &RawDocument,
    kb: &BTreeMap<DocId, RawDocument>,
    linker: &dyn EntityLinker,
    cap: Option<usize>,
) -> Result<(AugmentedDocument, Vec<AugmentWarning>)> {
    if !kb.contains_key(&doc.doc_id) {
        return Err(Error::Input(format!("document {} is not in the KB", doc.doc_id)));
    }
    let tokens = tokenize(&doc.body);
    let mut warnings = Vec::new();
    let mut related = Vec::new();
    for link in linker.link(doc, &tokens)? {
        if cap.is_some_and(|c| related.len() >= c) {
            break;
        }
        let image_key = kb
            .get(&link.source_doc_id)
            .map(|d| d.main_image_key.trim())
            .filter(|k| !k.is_empty());
        match image_key {
            Some(key) => related.push(RelatedEntity {
                entity: link.entity,
                span: link.span,
                image_key: key.to_string(),
                source_doc_id: link.source_doc_id,
            }),
            None => {
                warn!("{}: related entity `{}` has no image, skipped", doc.doc_id, link.entity);
                warnings.push(AugmentWarning {
                    doc_id: doc.doc_id.clone(),
                    entity: link.entity,
                    reason: "missing_image".into(),
                });
            }
        }
    }
    Ok((AugmentedDocument::from_parts(doc.clone(), related)?, warnings))
}

/// Augments every document, in doc-id order.
pub fn augment_kb(
    kb: &BTreeMap<DocId, RawDocument>,
    linker: &dyn EntityLinker,
    cap: Option<usize>,
) -> Result<(BTreeMap<DocId, AugmentedDocument>, Vec<AugmentWarning>)> {
    let results = kb
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|d| augment_document(d, kb, linker, cap))
        .collect::<Result<Vec<_>>>()?;
    let mut docs = BTreeMap::new();
    let mut warnings = Vec::new();
    for (doc, w) in results {
        docs.insert(doc.raw.doc_id.clone(), doc);
        warnings.extend(w);
    }
    Ok((docs, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, title: &str, body: &str) -> RawDocument {
        RawDocument {
            doc_id: id.into(),
            title: title.into(),
            body: body.into(),
            main_image_key: format!("img:{title}"),
        }
    }

    fn kb(docs: &[RawDocument]) -> BTreeMap<DocId, RawDocument> {
        docs.iter().map(|d| (d.doc_id.clone(), d.clone())).collect()
    }

    #[test]
    fn links_exact_dictionary_hit() {
        let lema = doc("d0", "Lema daturaphila", "Lema daturaphila feeds on potato plants.");
        let k = kb(&[lema.clone(), doc("d1", "Potato", "Potato is a tuber.")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let links = link_entities(&lema, &linker).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].entity, "Potato");
        assert_eq!(links[0].span, vec![4]);
    }

    #[test]
    fn excludes_self_mentions() {
        let a = doc("d0", "Potato", "Potato is a potato.");
        let k = kb(&[a.clone(), doc("d1", "Beetle", "x")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        assert!(link_entities(&a, &linker).unwrap().is_empty());
    }

    #[test]
    fn prefers_longest_match() {
        let a = doc("d0", "Tourist", "He went to new york.");
        let k = kb(&[a.clone(), doc("d1", "New York", "b"), doc("d2", "York", "c")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let links = link_entities(&a, &linker).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].entity, "New York");
        assert_eq!(links[0].span, vec![3, 4]);
    }

    #[test]
    fn longest_first_beats_leftmost() {
        let a = doc("d0", "Main", "a b c d");
        let k = kb(&[a.clone(), doc("d1", "A B", "x"), doc("d2", "B C D", "y")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let links = link_entities(&a, &linker).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].entity, "B C D");
    }

    #[test]
    fn merges_repeated_mentions() {
        let a = doc("d0", "Main", "Main likes Potato. Main eats potato!");
        let k = kb(&[a.clone(), doc("d1", "Potato", "x")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let links = link_entities(&a, &linker).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].span, vec![2, 5]);
    }

    #[test]
    fn augment_examples() {
        let lonely = doc("d0", "Main", "nothing to see");
        let k = kb(&[lonely.clone(), doc("d1", "Other", "x")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let (aug, _) = augment_document(&lonely, &k, &linker, None).unwrap();
        assert_eq!(aug.num_related(), 0);

        let names = ["Alpha", "Beta", "Gamma", "Delta", "Epsilon"];
        let body = "Main meets Gamma and Alpha then Epsilon, Beta and Delta.";
        let main = doc("m", "Main", body);
        let mut all = vec![main.clone()];
        all.extend(names.iter().enumerate().map(|(i, n)| doc(&format!("e{i}"), n, "x")));
        let k = kb(&all);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let (full, _) = augment_document(&main, &k, &linker, None).unwrap();
        assert_eq!(full.num_related(), 5);
        let (capped, _) = augment_document(&main, &k, &linker, Some(2)).unwrap();
        let kept: Vec<&str> = capped.related.iter().map(|r| r.entity.as_str()).collect();
        assert_eq!(kept, vec!["Gamma", "Alpha"]);
        for r in &full.related {
            assert_eq!(r.image_key, k[&r.source_doc_id].main_image_key);
        }
    }

    #[test]
    fn missing_image_is_skipped_with_warning() {
        let main = doc("m", "Main", "Main sees Ghost.");
        let mut ghost = doc("g", "Ghost", "x");
        ghost.main_image_key = String::new();
        let k = kb(&[main.clone(), ghost]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let (aug, warnings) = augment_document(&main, &k, &linker, None).unwrap();
        assert_eq!(aug.num_related(), 0);
        assert_eq!(warnings.len(), 1);
        assert_eq!(warnings[0].reason, "missing_image");
    }

    #[test]
    fn augmented_record_round_trip() {
        let main = doc("m", "Main", "Main sees Other.");
        let k = kb(&[main.clone(), doc("o", "Other", "x")]);
        let linker = DictionaryLinker::from_kb(&k).unwrap();
        let (aug, _) = augment_document(&main, &k, &linker, None).unwrap();
        let line = serde_json::to_string(&aug).unwrap();
        assert!(!line.contains("text_tokens"));
        let back: AugmentedDocument = serde_json::from_str(&line).unwrap();
        assert_eq!(back, aug);
        assert_eq!(back.main_span, vec![0]);
    }

    struct Canned(String);

    impl LlmClient for Canned {
        fn complete(&self, _prompt: &str) -> Result<String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn llm_linker_output_is_validated() {
        let main = doc("m", "Main", "Main feeds on Potato near Nowhere.");
        let k = kb(&[main.clone(), doc("p", "Potato", "x"), doc("q", "Quinoa", "y")]);
        let reply = r#"Sure: [{"entity":"Potato","entity_type":"Plant","relation":"Main feeds on Potato."},
            {"entity":"Quinoa","entity_type":"Plant","relation":null},
            {"entity":"Main","entity_type":"Insect","relation":null},
            {"entity":"Nowhere","entity_type":"Place","relation":null}]"#;
        let linker = LlmLinker::new(Canned(reply.into()), DictionaryLinker::from_kb(&k).unwrap());
        let links = link_entities(&main, &linker).unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].entity, "Potato");
        assert_eq!(links[0].span, vec![3]);
        assert!(LlmLinker::<Canned>::prompt(&main).contains("\"Main\""));
    }
}
