use super::*;
use crate::augment::{RawDocument, RelatedEntity};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;
use crate::rng::Rng;

fn config(mm_tokens: usize) -> EncoderConfig {
    EncoderConfig {
        mm_tokens,
        ..EncoderConfig::default()
    }
}

fn document(n_t: usize, r: usize) -> AugmentedDocument {
    let text_tokens: Vec<String> = (0..n_t).map(|i| format!("w{i}")).collect();
    AugmentedDocument {
        raw: RawDocument {
            doc_id: "doc".into(),
            title: "w0".into(),
            body: text_tokens.join(" "),
            main_image_key: "main".into(),
        },
        main_span: vec![0],
        related: (0..r)
            .map(|i| RelatedEntity {
                entity: format!("e{i}"),
                span: vec![(i + 1) % n_t],
                image_key: format!("img{i}"),
                source_doc_id: format!("src{i}").into(),
            })
            .collect(),
        text_tokens,
    }
}

fn query(text: &str) -> QueryInput {
    QueryInput {
        text: text.into(),
        image_key: "q".into(),
    }
}

#[test]
fn query_cardinality() {
    let c = config(32);
    let params = EncoderParams::init(c, 1).unwrap();
    let p = c.provider();
    let q = query("one two three four five");
    let full = encode_query(&q, &params, &p, QueryMode::ImageText).unwrap();
    assert_eq!(full.len(), 38);
    assert_eq!(encode_query(&q, &params, &p, QueryMode::ImageOnly).unwrap().len(), 33);
    assert_eq!(encode_query(&query(""), &params, &p, QueryMode::ImageOnly).unwrap().len(), 33);
    assert_eq!(full, encode_query(&q, &params, &p, QueryMode::ImageText).unwrap());
    assert!(matches!(
        encode_query(&query(" "), &params, &p, QueryMode::ImageText),
        Err(Error::Input(_))
    ));
}

#[test]
fn image_only_query_keeps_text_in_cross_attention() {
    let c = config(4);
    let params = EncoderParams::init(c, 2).unwrap();
    let p = c.provider();
    let a = encode_query(&query("red beetle"), &params, &p, QueryMode::ImageOnly).unwrap();
    let b = encode_query(&query("green plant"), &params, &p, QueryMode::ImageOnly).unwrap();
    assert_eq!(a.token(0), b.token(0));
    assert_ne!(a.token(1), b.token(1));
}

#[test]
fn document_cardinality_examples() {
    let c = config(32);
    let params = EncoderParams::init(c, 3).unwrap();
    let p = c.provider();
    let doc = document(4, 2);
    assert_eq!(encode_document(&doc, &params, &p, DocFlags::ALL).unwrap().len(), 103);
    let mi_off = DocFlags { mi: false, ..DocFlags::ALL };
    assert_eq!(encode_document(&doc, &params, &p, mi_off).unwrap().len(), 37);
    let mi_only = DocFlags { mi: true, ..DocFlags::NONE };
    assert_eq!(encode_document(&doc, &params, &p, mi_only).unwrap().len(), 4 + 33 + 2);

    let lone = document(4, 0);
    assert_eq!(
        encode_document(&lone, &params, &p, DocFlags::ALL).unwrap(),
        encode_document(&lone, &params, &p, mi_off).unwrap()
    );
}

#[test]
fn document_without_main_image_fails() {
    let c = config(4);
    let params = EncoderParams::init(c, 3).unwrap();
    let mut doc = document(3, 1);
    doc.raw.main_image_key = " ".into();
    assert!(matches!(
        encode_document(&doc, &params, &c.provider(), DocFlags::ALL),
        Err(Error::Document(_))
    ));
}

#[test]
fn tags_follow_construction_order() {
    let c = config(2);
    let params = EncoderParams::init(c, 4).unwrap();
    let fs = encode_document(&document(3, 1), &params, &c.provider(), DocFlags::ALL).unwrap();
    let expected = vec![
        TokenTag::Textual,
        TokenTag::Textual,
        TokenTag::Textual,
        TokenTag::GlobalImage { image: 0 },
        TokenTag::Multimodal { image: 0, index: 0 },
        TokenTag::Multimodal { image: 0, index: 1 },
        TokenTag::GlobalImage { image: 1 },
        TokenTag::Multimodal { image: 1, index: 0 },
        TokenTag::Multimodal { image: 1, index: 1 },
    ];
    assert_eq!(fs.tags(), expected.as_slice());
}

#[test]
fn nonfinite_weights_are_rejected() {
    let c = config(2);
    let mut params = EncoderParams::init(c, 5).unwrap();
    params.xattn.wq[[0, 0]] = f64::NAN;
    let image = c.provider().image_features("x").unwrap();
    let text = embed_text(&c.provider(), "a b").unwrap();
    assert!(matches!(
        cross_attend(&image.patches, &text, &params),
        Err(Error::Numeric { .. })
    ));
}

#[test]
fn apply_ete_examples() {
    let p = SeededProvider::default();
    let t = embed_text(&p, "a b c").unwrap();
    let zero = Array1::zeros(64);
    assert_eq!(apply_ete(&t, &[0, 2], &zero).unwrap(), t);
    let mut e1 = Array1::zeros(64);
    e1[0] = 1.0;
    assert_eq!(apply_ete(&t, &[], &e1).unwrap(), t);
    let out = apply_ete(&t, &[1], &e1).unwrap();
    assert_eq!(out.embeddings.row(0), t.embeddings.row(0));
    assert_eq!(out.embeddings.row(2), t.embeddings.row(2));
    assert_eq!(out.embeddings[[1, 0]], t.embeddings[[1, 0]] + 1.0);
    assert_eq!(out.embeddings.row(1).slice(ndarray::s![1..]), t.embeddings.row(1).slice(ndarray::s![1..]));
    assert!(matches!(apply_ete(&t, &[3], &e1), Err(Error::Span { index: 3, len: 3 })));
}

fn small_params(seed: u64, text_dim: usize, heads: usize, head_dim: usize, patches: usize) -> EncoderParams {
    let c = EncoderConfig {
        text_dim,
        image_dim: heads * head_dim,
        embed_dim: 2,
        heads,
        num_patches: patches,
        mm_tokens: 1,
    };
    let mut params = EncoderParams::init(c, seed).unwrap();
    let mut rng = Rng::new(seed).derive("biases");
    for b in [&mut params.xattn.bq, &mut params.xattn.bk, &mut params.xattn.bv, &mut params.xattn.bo] {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    params
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn vm(x: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[[i, j]]).sum::<f64>())
        .collect()
}

/// Patch-at-a-time loops with no matrix products.
fn reference_block(x: &Array2<f64>, t: &Array2<f64>, a: &CrossAttention) -> Array2<f64> {
    let dm = a.model_dim();
    let hd = dm / a.heads;
    let keys: Vec<Vec<f64>> = t.rows().into_iter().map(|r| vm(r.as_slice().unwrap(), &a.wk, &a.bk)).collect();
    let vals: Vec<Vec<f64>> = t.rows().into_iter().map(|r| vm(r.as_slice().unwrap(), &a.wv, &a.bv)).collect();
    let mut out = Array2::zeros(x.raw_dim());
    for (p, xr) in x.rows().into_iter().enumerate() {
        let xr = xr.to_vec();
        let q = vm(&xr, &a.wq, &a.bq);
        let mut o = vec![0.0; dm];
        for h in 0..a.heads {
            let range = h * hd..(h + 1) * hd;
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| range.clone().map(|i| q[i] * k[i]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                let w = (l - m).exp() / z;
                for i in range.clone() {
                    o[i] += w * vals[k][i];
                }
            }
        }
        let attn = vm(&o, &a.wo, &a.bo);
        let x1: Vec<f64> = xr.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = vm(&x1, &a.ffn.w1, &a.ffn.b1).into_iter().map(gelu).collect();
        let f = vm(&hidden, &a.ffn.w2, &a.ffn.b2);
        for i in 0..dm {
            out[[p, i]] = x1[i] + f[i];
        }
    }
    out
}

#[test]
fn cross_attend_matches_reference() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let heads = rng.random_range(1..=3);
        let hd = rng.random_range(2..=4);
        let text_dim = rng.random_range(2..=5);
        let n_p = rng.random_range(1..=4);
        let n_t = rng.random_range(1..=5);
        let params = small_params(seed, text_dim, heads, hd, n_p);
        let x = random_matrix(&mut rng, n_p, heads * hd);
        let t = random_matrix(&mut rng, n_t, text_dim);
        let text = TextFeatures {
            tokens: (0..n_t).map(|i| i.to_string()).collect(),
            embeddings: t.clone(),
        };
        let got = cross_attend(&x, &text, &params).unwrap();
        let want = reference_block(&x, &t, &params.xattn);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-10, "seed {seed}: {g} vs {w}");
        }
    }
}

#[test]
fn single_text_token_gives_uniform_attention() {
    let params = small_params(7, 4, 2, 3, 4);
    let mut rng = Rng::new(7);
    let x = random_matrix(&mut rng, 4, 6);
    let t = random_matrix(&mut rng, 1, 4);
    let a = params.xattn.attention(&x, &t);
    for r in 1..4 {
        for c in 0..6 {
            assert!((a[[r, c]] - a[[0, c]]).abs() < 1e-14);
        }
    }
}

#[test]
fn text_order_does_not_matter() {
    let params = small_params(8, 4, 2, 3, 3);
    let mut rng = Rng::new(8);
    let x = random_matrix(&mut rng, 3, 6);
    let t = random_matrix(&mut rng, 4, 4);
    let mut rev = t.clone();
    rev.invert_axis(Axis(0));
    let a = params.xattn.forward(&x, &t).0;
    let b = params.xattn.forward(&x, &rev).0;
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn zero_feed_forward_leaves_attention_residual() {
    let mut params = small_params(9, 3, 2, 2, 2);
    params.xattn.ffn = params.xattn.ffn.zeros_like();
    let mut rng = Rng::new(9);
    let x = random_matrix(&mut rng, 2, 4);
    let t = random_matrix(&mut rng, 3, 3);
    let out = params.xattn.forward(&x, &t).0;
    assert_eq!(out, &x + &params.xattn.attention(&x, &t));
}

fn random_doc(rng: &mut Rng) -> AugmentedDocument {
    let n_t = rng.random_range(1..=8);
    let r = rng.random_range(0..=4);
    let mut doc = document(n_t, r);
    for rel in &mut doc.related {
        let len = rng.random_range(0..=n_t.min(2));
        rel.span = (0..len).map(|_| rng.random_range(0..n_t)).collect();
    }
    doc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn document_cardinality_and_identities(seed in any::<u64>(), n_v in 1usize..5) {
        let c = config(n_v);
        let mut params = EncoderParams::init(c, seed).unwrap();
        let p = c.provider();
        let doc = random_doc(&mut Rng::new(seed));
        let (n_t, r) = (doc.text_tokens.len(), doc.related.len());

        let full = encode_document(&doc, &params, &p, DocFlags::ALL).unwrap();
        prop_assert_eq!(full.len(), n_t + (r + 1) * (1 + n_v));
        prop_assert!(full.tokens().all(|t| (crate::vector::norm(t) - 1.0).abs() < 1e-6));

        // theta = 0 at init, so the ETE path must be bit-identical to no ETE.
        let no_ete = DocFlags { ete: false, ..DocFlags::ALL };
        prop_assert_eq!(&full, &encode_document(&doc, &params, &p, no_ete).unwrap());

        let mi_off = DocFlags { mi: false, ..DocFlags::ALL };
        prop_assert_eq!(
            encode_document(&doc, &params, &p, mi_off).unwrap(),
            encode_document(&doc.without_related(), &params, &p, DocFlags::ALL).unwrap()
        );

        let mmf_off = DocFlags { mi: true, mmf: false, ete: false };
        let keep: Vec<usize> = full
            .tags()
            .iter()
            .enumerate()
            .filter(|(_, t)| !matches!(t, TokenTag::Multimodal { image, .. } if *image >= 1))
            .map(|(i, _)| i)
            .collect();
        prop_assert_eq!(encode_document(&doc, &params, &p, mmf_off).unwrap(), full.select(&keep).unwrap());

        params.ete.fill(0.3);
        let perturbed = encode_document(&doc, &params, &p, DocFlags::ALL).unwrap();
        prop_assert_eq!(perturbed.len(), full.len());
        prop_assert_eq!(&perturbed.as_slice()[..n_t * c.embed_dim], &full.as_slice()[..n_t * c.embed_dim]);
    }
}
