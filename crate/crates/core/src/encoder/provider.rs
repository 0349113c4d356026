//! Frozen backbone features.
//!
//! The text and image backbones are not trained; an [`EmbeddingProvider`]
//! supplies their outputs. [`SeededProvider`] derives them deterministically
//! from token strings and image keys. [`FileProvider`] reads precomputed
//! features from a flat binary file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::text::tokenize;
use crate::vector::seeded_unit_vector;

/// Token-level text features of one input.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub tokens: Vec<String>,
    /// `N_t x D_t`
    pub embeddings: Array2<f64>,
}

impl TextFeatures {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Global and patch-level features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub global: Array1<f64>,
    /// `N_p x D_v`
    pub patches: Array2<f64>,
}

pub trait EmbeddingProvider: Sync {
    fn text_dim(&self) -> usize;
    fn image_dim(&self) -> usize;
    fn num_patches(&self) -> usize;
    fn token_embedding(&self, token: &str) -> Result<Vec<f64>>;
    fn image_features(&self, image_key: &str) -> Result<ImageFeatures>;
}

/// Lowercased whitespace tokens, each mapped through the provider.
pub fn embed_text<P: EmbeddingProvider + ?Sized>(provider: &P, text: &str) -> Result<TextFeatures> {
    let tokens = tokenize(text);
    embed_tokens(provider, tokens)
}

pub fn embed_tokens<P: EmbeddingProvider + ?Sized>(provider: &P, tokens: Vec<String>) -> Result<TextFeatures> {
    if tokens.is_empty() {
        return Err(Error::Input("text has no tokens".into()));
    }
    let dim = provider.text_dim();
    let mut embeddings = Array2::zeros((tokens.len(), dim));
    for (i, tok) in tokens.iter().enumerate() {
        let v = provider.token_embedding(tok)?;
        if v.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: v.len(),
            });
        }
        embeddings.row_mut(i).assign(&Array1::from(v));
    }
    Ok(TextFeatures { tokens, embeddings })
}

pub fn embed_image<P: EmbeddingProvider + ?Sized>(provider: &P, image_key: &str) -> Result<ImageFeatures> {
    provider.image_features(image_key)
}

/// Hash-seeded stand-in for the frozen text and image backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededProvider {
    pub text_dim: usize,
    pub image_dim: usize,
    pub num_patches: usize,
}

impl Default for SeededProvider {
    fn default() -> Self {
        Self {
            text_dim: 64,
            image_dim: 64,
            num_patches: 9,
        }
    }
}

impl EmbeddingProvider for SeededProvider {
    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn num_patches(&self) -> usize {
        self.num_patches
    }

    fn token_embedding(&self, token: &str) -> Result<Vec<f64>> {
        seeded_unit_vector(token.as_bytes(), self.text_dim, "text")
    }

    fn image_features(&self, image_key: &str) -> Result<ImageFeatures> {
        let global = Array1::from(seeded_unit_vector(image_key.as_bytes(), self.image_dim, "img-g")?);
        let mut patches = Array2::zeros((self.num_patches, self.image_dim));
        let mut key = image_key.as_bytes().to_vec();
        let base = key.len();
        for j in 0..self.num_patches {
            key.truncate(base);
            key.extend_from_slice(&(j as u32).to_le_bytes());
            patches
                .row_mut(j)
                .assign(&Array1::from(seeded_unit_vector(&key, self.image_dim, "img-p")?));
        }
        Ok(ImageFeatures { global, patches })
    }
}

/// Features loaded from a record file.
///
/// Each record is `u32 key_len | key bytes | u32 dim | dim x f32`, all
/// little-endian, records back to back. Keys are namespaced:
/// `text:<token>`, `img-g:<image key>` and `img-p:<image key>#<j>`.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    text_dim: usize,
    image_dim: usize,
    num_patches: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileProvider {
    pub fn new(text_dim: usize, image_dim: usize, num_patches: usize) -> Self {
        Self {
            text_dim,
            image_dim,
            num_patches,
            table: HashMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, values: Vec<f64>) {
        self.table.insert(key.into(), values);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn decode(bytes: &[u8], text_dim: usize, image_dim: usize, num_patches: usize) -> Result<Self> {
        let mut out = Self::new(text_dim, image_dim, num_patches);
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| Error::Corrupt(format!("embedding record truncated at byte {pos}")))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        while pos < bytes.len() {
            let klen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            let key = std::str::from_utf8(take(&mut pos, klen)?)
                .map_err(|_| Error::Format("embedding key is not UTF-8".into()))?
                .to_string();
            let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
            let raw = take(&mut pos, dim.checked_mul(4).ok_or_else(|| Error::Corrupt("dim overflow".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            out.table.insert(key, values);
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut keys: Vec<&String> = self.table.keys().collect();
        keys.sort();
        let mut buf = Vec::new();
        for k in keys {
            let v = &self.table[k];
            buf.extend_from_slice(&(k.len() as u32).to_le_bytes());
            buf.extend_from_slice(k.as_bytes());
            buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn load(path: &Path, text_dim: usize, image_dim: usize, num_patches: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, text_dim, image_dim, num_patches)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    fn lookup(&self, key: &str, dim: usize) -> Result<Vec<f64>> {
        let v = self
            .table
            .get(key)
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))?;
        if v.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: v.len(),
            });
        }
        Ok(v.clone())
    }
}

impl EmbeddingProvider for FileProvider {
    fn text_dim(&self) -> usize {
        self.text_dim
    }

    fn image_dim(&self) -> usize {
        self.image_dim
    }

    fn num_patches(&self) -> usize {
        self.num_patches
    }

    fn token_embedding(&self, token: &str) -> Result<Vec<f64>> {
        self.lookup(&format!("text:{token}"), self.text_dim)
    }

    fn image_features(&self, image_key: &str) -> Result<ImageFeatures> {
        let global = Array1::from(self.lookup(&format!("img-g:{image_key}"), self.image_dim)?);
        let mut patches = Array2::zeros((self.num_patches, self.image_dim));
        for j in 0..self.num_patches {
            let p = self.lookup(&format!("img-p:{image_key}#{j}"), self.image_dim)?;
            patches.row_mut(j).assign(&Array1::from(p));
        }
        Ok(ImageFeatures { global, patches })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vector::cosine;

    #[test]
    fn text_examples() {
        let p = SeededProvider::default();
        let t = embed_text(&p, "Lema daturaphila").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t, embed_text(&p, "Lema daturaphila").unwrap());
        let aa = embed_text(&p, "a A").unwrap();
        assert_eq!(aa.embeddings.row(0), aa.embeddings.row(1));
        assert!(matches!(embed_text(&p, "   "), Err(Error::Input(_))));
    }

    #[test]
    fn image_examples() {
        let p = SeededProvider::default();
        let x = embed_image(&p, "x").unwrap();
        assert_eq!(x.patches.nrows(), 9);
        assert_eq!(x, embed_image(&p, "x").unwrap());
        let y = embed_image(&p, "y").unwrap();
        assert!(cosine(x.global.as_slice().unwrap(), y.global.as_slice().unwrap()).unwrap() < 1.0);
    }

    #[test]
    fn file_provider_round_trip_and_missing_key() {
        let mut fp = FileProvider::new(2, 2, 1);
        fp.insert("text:cat", vec![1.0, 0.0]);
        fp.insert("img-g:k", vec![0.0, 1.0]);
        fp.insert("img-p:k#0", vec![0.5, 0.25]);
        let back = FileProvider::decode(&fp.encode(), 2, 2, 1).unwrap();
        assert_eq!(back.token_embedding("cat").unwrap(), vec![1.0, 0.0]);
        assert_eq!(back.image_features("k").unwrap().patches[[0, 1]], 0.25);
        assert!(matches!(back.token_embedding("dog"), Err(Error::MissingEmbedding(_))));
        assert!(matches!(back.image_features("q"), Err(Error::MissingEmbedding(_))));
        let bytes = fp.encode();
        assert!(matches!(
            FileProvider::decode(&bytes[..bytes.len() - 1], 2, 2, 1),
            Err(Error::Corrupt(_))
        ));
    }
}
