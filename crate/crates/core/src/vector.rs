//! Vector primitives and the token-level feature set shared by every module.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::keyed_stream;

/// Tolerance on the unit-norm invariant.
pub const UNIT_TOL: f64 = 1e-6;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Deterministic unit vector keyed by `(domain, key)`.
///
/// Stands in for frozen backbone features: the same key always maps to the
/// same direction, independent keys map to (nearly) independent directions.
pub fn seeded_unit_vector(key: &[u8], dim: usize, domain: &str) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::Config(format!("embedding dimension must be >= 2, got {dim}")));
    }
    let mut h = Sha256::new();
    h.update((domain.len() as u32).to_le_bytes());
    h.update(domain.as_bytes());
    h.update(key);
    let digest = h.finalize();
    let mut stream = keyed_stream(digest.as_slice());
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut stream)).collect();
        if norm(&v) > 1e-12 {
            return l2_normalize(&v);
        }
    }
}

/// Where a feature-set token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenTag {
    Textual,
    /// Projected global feature of image `r` (0 = main entity image).
    GlobalImage { image: usize },
    /// Projected multimodal token `index` of image `r`.
    Multimodal { image: usize, index: usize },
}

/// A non-empty set of unit-norm, equal-dimension token vectors.
///
/// Stored row-major; token `i` occupies `data[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    data: Vec<f64>,
    tags: Vec<TokenTag>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f64>, tags: Vec<TokenTag>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if data.len() != dim * tags.len() {
            return Err(Error::Shape {
                expected: dim * tags.len(),
                got: data.len(),
            });
        }
        if tags.is_empty() {
            return Err(Error::Input("feature set must be non-empty".into()));
        }
        for (i, row) in data.chunks_exact(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    tensor: format!("feature token {i}"),
                });
            }
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Domain(format!("feature token {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { dim, data, tags })
    }

    /// Normalizes every row, then builds the set.
    pub fn from_rows<I, R>(rows: I, tags: Vec<TokenTag>) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f64]>,
    {
        let mut data = Vec::new();
        let mut dim = None;
        for row in rows {
            let row = row.as_ref();
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Shape {
                        expected: d,
                        got: row.len(),
                    })
                }
                _ => {}
            }
            data.extend(l2_normalize(row)?);
        }
        let dim = dim.ok_or_else(|| Error::Input("feature set must be non-empty".into()))?;
        Self::new(dim, data, tags)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn tags(&self) -> &[TokenTag] {
        &self.tags
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Subset of tokens, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        let mut tags = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Span {
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.token(i));
            tags.push(self.tags[i]);
        }
        Self::new(self.dim, data, tags)
    }

    /// Union of two sets (concatenation).
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        let mut tags = self.tags.clone();
        tags.extend_from_slice(&other.tags);
        Ok(Self {
            dim: self.dim,
            data,
            tags,
        })
    }

    pub fn count_tag(&self, pred: impl Fn(&TokenTag) -> bool) -> usize {
        self.tags.iter().filter(|t| pred(t)).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.6, 0.8]).unwrap(), 0.6, epsilon = 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(cosine(&[1.0, 0.0], &[1.0, 0.0, 0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn seeded_vectors() {
        let a = seeded_unit_vector(b"a", 16, "text").unwrap();
        let a2 = seeded_unit_vector(b"a", 16, "text").unwrap();
        let b = seeded_unit_vector(b"b", 16, "text").unwrap();
        assert_eq!(a, a2);
        assert!(cosine(&a, &b).unwrap() < 1.0);
        assert_abs_diff_eq!(norm(&a), 1.0, epsilon = 1e-6);
        assert_ne!(a, seeded_unit_vector(b"a", 16, "img-g").unwrap());
        assert!(matches!(seeded_unit_vector(b"a", 1, "text"), Err(Error::Config(_))));
    }

    #[test]
    fn distinct_keys_rarely_align() {
        // |cos| >= 0.9 between independent directions in 16-d is a ~1e-6 event.
        let n = 2000;
        let mut hits = 0;
        for i in 0..n {
            let a = seeded_unit_vector(format!("k{i}").as_bytes(), 16, "text").unwrap();
            let b = seeded_unit_vector(format!("j{i}").as_bytes(), 16, "text").unwrap();
            if cosine(&a, &b).unwrap().abs() >= 0.9 {
                hits += 1;
            }
        }
        assert!(hits as f64 / n as f64 <= 0.001);
    }

    #[test]
    fn feature_set_rejects_bad_rows() {
        assert!(FeatureSet::new(2, vec![], vec![]).is_err());
        assert!(FeatureSet::new(2, vec![2.0, 0.0], vec![TokenTag::Textual]).is_err());
        let fs = FeatureSet::from_rows([[3.0, 4.0]], vec![TokenTag::Textual]).unwrap();
        assert_abs_diff_eq!(fs.token(0)[1], 0.8, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn cosine_symmetric(a in prop::collection::vec(-1.0f64..1.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4)) {
            prop_assume!(norm(&a) > 1e-6 && norm(&b) > 1e-6);
            prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-10.0f64..10.0, 2..8)) {
            prop_assume!(norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
