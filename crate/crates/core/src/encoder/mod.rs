//! Query and document encoders.
//!
//! A query becomes `{g} ∪ T ∪ M`: one projected global image token, the
//! projected text tokens and `N_v` multimodal tokens produced by letting
//! image patches attend over the text. A document becomes
//! `T ∪ ⋃_r ({g_r} ∪ M_r)` over its main image (`r = 0`) and the images of
//! related entities (`r >= 1`). With entity token embeddings enabled, the
//! text fed to the cross-attention for image `r` has `θ_ETE` added at the
//! token positions of the entity that image depicts.
//!
//! Every encode returns a [`Trace`] alongside the features so that training
//! can run the reverse pass without re-encoding.

mod nn;
mod provider;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use serde::{Deserialize, Serialize};

pub use nn::{gelu, gelu_grad, CrossAttention, Mlp};
pub use provider::{
    embed_image, embed_text, embed_tokens, EmbeddingProvider, FileProvider, ImageFeatures, SeededProvider,
    TextFeatures,
};

use crate::augment::AugmentedDocument;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vector::{FeatureSet, TokenTag};
use nn::{check_finite, normalize_rows, normalize_rows_backward, MlpCache, NormCache, XattnCache};

/// Model shape. The attention block runs at the image feature width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Backbone text feature width `D_t`.
    pub text_dim: usize,
    /// Backbone image feature width `D_v`, also the attention block width.
    pub image_dim: usize,
    /// Shared retrieval embedding width `d`.
    pub embed_dim: usize,
    pub heads: usize,
    /// Patches per image `N_p`.
    pub num_patches: usize,
    /// Multimodal tokens per image `N_v`.
    pub mm_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_dim: 64,
            image_dim: 64,
            embed_dim: 16,
            heads: 4,
            num_patches: 9,
            mm_tokens: 4,
        }
    }
}

impl EncoderConfig {
    /// Retrieval width 128 and 32 multimodal tokens per image.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 128,
            mm_tokens: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text_dim", self.text_dim),
            ("image_dim", self.image_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("num_patches", self.num_patches),
            ("mm_tokens", self.mm_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        for (name, v) in [("text_dim", self.text_dim), ("image_dim", self.image_dim), ("embed_dim", self.embed_dim)] {
            if v < 2 {
                return Err(Error::Config(format!("encoder.{name} must be >= 2")));
            }
        }
        if self.image_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.image_dim ({}) must be divisible by encoder.heads ({})",
                self.image_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn provider(&self) -> SeededProvider {
        SeededProvider {
            text_dim: self.text_dim,
            image_dim: self.image_dim,
            num_patches: self.num_patches,
        }
    }
}

/// Document-side components, matching the ablation columns: multiple
/// related-entity images, multimodal features for those images, and entity
/// token embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DocFlags {
    pub mi: bool,
    pub mmf: bool,
    pub ete: bool,
}

impl DocFlags {
    pub const NONE: DocFlags = DocFlags {
        mi: false,
        mmf: false,
        ete: false,
    };
    pub const ALL: DocFlags = DocFlags {
        mi: true,
        mmf: true,
        ete: true,
    };

    /// The four cumulative ablation rows.
    pub fn ablation_rows() -> [DocFlags; 4] {
        [
            DocFlags::NONE,
            DocFlags {
                mi: true,
                ..DocFlags::NONE
            },
            DocFlags {
                mi: true,
                mmf: true,
                ete: false,
            },
            DocFlags::ALL,
        ]
    }
}

impl fmt::Display for DocFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.mi {
            parts.push("MI");
        }
        if self.mmf {
            parts.push("MMF");
        }
        if self.ete {
            parts.push("ETE");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for DocFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = DocFlags::NONE;
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(flags);
        }
        for part in s.split(['+', ',']) {
            match part.trim().to_ascii_uppercase().as_str() {
                "MI" => flags.mi = true,
                "MMF" => flags.mmf = true,
                "ETE" => flags.ete = true,
                "ALL" => flags = DocFlags::ALL,
                other => return Err(Error::Config(format!("unknown document flag `{other}`"))),
            }
        }
        Ok(flags)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    ImageText,
    /// Text tokens are left out of the query set; text still conditions the
    /// cross-attention when present.
    ImageOnly,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::ImageText => "image_text",
            QueryMode::ImageOnly => "image_only",
        })
    }
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_text" | "image+text" => Ok(QueryMode::ImageText),
            "image_only" => Ok(QueryMode::ImageOnly),
            other => Err(Error::Config(format!(
                "unknown query mode `{other}` (expected image_text or image_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInput {
    pub text: String,
    pub image_key: String,
}

/// Every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub text_proj: Mlp,
    pub global_proj: Mlp,
    pub xattn: CrossAttention,
    pub mm_proj: Mlp,
    /// Entity token embedding, width `D_t`.
    pub ete: Array1<f64>,
    /// Stand-in key/value token for image-only queries without text.
    pub null_text: Array1<f64>,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(seed).derive("encoder-init");
        let d = config.embed_dim;
        let mm_out = config.mm_tokens * d;
        let null_text = nn::init_weight(&rng, "null_text", config.text_dim, 1).column(0).to_owned();
        Ok(Self {
            config,
            text_proj: Mlp::init(&rng, "text_proj", config.text_dim, 2 * d, d),
            global_proj: Mlp::init(&rng, "global_proj", config.image_dim, 2 * d, d),
            xattn: CrossAttention::init(&rng, "xattn", config.image_dim, config.text_dim, config.heads),
            mm_proj: Mlp::init(&rng, "mm_proj", config.num_patches * config.image_dim, 2 * mm_out, mm_out),
            ete: Array1::zeros(config.text_dim),
            null_text,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            text_proj: self.text_proj.zeros_like(),
            global_proj: self.global_proj.zeros_like(),
            xattn: self.xattn.zeros_like(),
            mm_proj: self.mm_proj.zeros_like(),
            ete: Array1::zeros(self.ete.raw_dim()),
            null_text: Array1::zeros(self.null_text.raw_dim()),
        }
    }

    /// Tensors in a fixed order with dotted names.
    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut v = self.text_proj.views("text_proj");
        v.extend(self.global_proj.views("global_proj"));
        v.extend(self.xattn.views("xattn"));
        v.extend(self.mm_proj.views("mm_proj"));
        v.push(("ete".into(), self.ete.view().into_dyn()));
        v.push(("null_text".into(), self.null_text.view().into_dyn()));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut v = self.text_proj.views_mut("text_proj");
        v.extend(self.global_proj.views_mut("global_proj"));
        v.extend(self.xattn.views_mut("xattn"));
        v.extend(self.mm_proj.views_mut("mm_proj"));
        v.push(("ete".into(), self.ete.view_mut().into_dyn()));
        v.push(("null_text".into(), self.null_text.view_mut().into_dyn()));
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            check_finite(&name, t)?;
        }
        Ok(())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for ((_, mut a), (_, b)) in self.named_tensors_mut().into_iter().zip(other.named_tensors()) {
            a.zip_mut_with(&b, |x, y| *x += scale * y);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.embed_dim;
        let expect = |got: usize, expected: usize| {
            if got == expected {
                Ok(())
            } else {
                Err(Error::Shape { expected, got })
            }
        };
        expect(self.text_proj.input_dim(), c.text_dim)?;
        expect(self.text_proj.output_dim(), d)?;
        expect(self.global_proj.input_dim(), c.image_dim)?;
        expect(self.global_proj.output_dim(), d)?;
        expect(self.xattn.model_dim(), c.image_dim)?;
        expect(self.xattn.text_dim(), c.text_dim)?;
        expect(self.mm_proj.input_dim(), c.num_patches * c.image_dim)?;
        expect(self.mm_proj.output_dim(), c.mm_tokens * d)?;
        expect(self.ete.len(), c.text_dim)?;
        expect(self.null_text.len(), c.text_dim)
    }
}

/// Copy of `text` with `theta` added to the embeddings at `span`.
pub fn apply_ete(text: &TextFeatures, span: &[usize], theta: &Array1<f64>) -> Result<TextFeatures> {
    if theta.len() != text.embeddings.ncols() {
        return Err(Error::Shape {
            expected: text.embeddings.ncols(),
            got: theta.len(),
        });
    }
    let mut out = text.clone();
    for &s in span {
        if s >= text.len() {
            return Err(Error::Span {
                index: s,
                len: text.len(),
            });
        }
        let mut row = out.embeddings.row_mut(s);
        row += theta;
    }
    Ok(out)
}

/// One transformer block pass: patches are queries, text tokens are keys and values.
pub fn cross_attend(patches: &Array2<f64>, text: &TextFeatures, params: &EncoderParams) -> Result<Array2<f64>> {
    for (name, t) in params.xattn.views("xattn") {
        check_finite(&name, t)?;
    }
    check_cross_shapes(patches, &text.embeddings, params)?;
    Ok(params.xattn.forward(patches, &text.embeddings).0)
}

fn check_cross_shapes(patches: &Array2<f64>, text: &Array2<f64>, params: &EncoderParams) -> Result<()> {
    if patches.ncols() != params.xattn.model_dim() {
        return Err(Error::Shape {
            expected: params.xattn.model_dim(),
            got: patches.ncols(),
        });
    }
    if text.ncols() != params.xattn.text_dim() {
        return Err(Error::Shape {
            expected: params.xattn.text_dim(),
            got: text.ncols(),
        });
    }
    if text.nrows() == 0 || patches.nrows() == 0 {
        return Err(Error::Input("cross-attention needs at least one patch and one text token".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum TextSource {
    Frozen,
    Ete(Vec<usize>),
    Null,
}

#[derive(Debug, Clone)]
enum Segment {
    Text { mlp: MlpCache, norm: NormCache },
    Global { mlp: MlpCache, norm: NormCache },
    Multimodal {
        source: TextSource,
        xattn: XattnCache,
        mlp: MlpCache,
        norm: NormCache,
    },
}

/// Intermediate activations of one encode, consumed by [`Trace::backward`].
#[derive(Debug, Clone, Default)]
pub struct Trace {
    segments: Vec<(usize, usize, Segment)>,
}

impl Trace {
    /// Back-propagates `d_tokens` (gradient w.r.t. each normalized output
    /// token, `|set| x d`) into `grad`.
    pub fn backward(&self, params: &EncoderParams, d_tokens: &Array2<f64>, grad: &mut EncoderParams) {
        let d = params.config.embed_dim;
        for (start, len, seg) in &self.segments {
            let dy = d_tokens.slice(ndarray::s![*start..*start + *len, ..]).to_owned();
            match seg {
                Segment::Text { mlp, norm } => {
                    let dz = normalize_rows_backward(norm, &dy);
                    params.text_proj.backward(mlp, &dz, &mut grad.text_proj);
                }
                Segment::Global { mlp, norm } => {
                    let dz = normalize_rows_backward(norm, &dy);
                    params.global_proj.backward(mlp, &dz, &mut grad.global_proj);
                }
                Segment::Multimodal {
                    source,
                    xattn,
                    mlp,
                    norm,
                } => {
                    let dz = normalize_rows_backward(norm, &dy);
                    let dz = dz.into_shape_with_order((1, len * d)).expect("contiguous");
                    let dflat = params.mm_proj.backward(mlp, &dz, &mut grad.mm_proj);
                    let dx2 = dflat
                        .into_shape_with_order((params.config.num_patches, params.config.image_dim))
                        .expect("contiguous");
                    let dt = params.xattn.backward(xattn, &dx2, &mut grad.xattn);
                    match source {
                        TextSource::Frozen => {}
                        TextSource::Ete(span) => {
                            for &s in span {
                                grad.ete += &dt.row(s);
                            }
                        }
                        TextSource::Null => {
                            grad.null_text += &dt.sum_axis(Axis(0));
                        }
                    }
                }
            }
        }
    }
}

struct Assembler {
    dim: usize,
    rows: Vec<f64>,
    tags: Vec<TokenTag>,
    trace: Trace,
}

impl Assembler {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            tags: Vec::new(),
            trace: Trace::default(),
        }
    }

    fn push(&mut self, out: Array2<f64>, tags: impl IntoIterator<Item = TokenTag>, seg: Segment) {
        let start = self.tags.len();
        let n = out.nrows();
        self.rows.extend(out.iter());
        self.tags.extend(tags);
        debug_assert_eq!(self.tags.len(), start + n);
        self.trace.segments.push((start, n, seg));
    }

    fn finish(self) -> Result<(FeatureSet, Trace)> {
        Ok((FeatureSet::new(self.dim, self.rows, self.tags)?, self.trace))
    }
}

fn project_text(params: &EncoderParams, text: &TextFeatures, asm: &mut Assembler) -> Result<()> {
    let (z, mlp) = params.text_proj.forward(&text.embeddings);
    let (out, norm) = normalize_rows(&z)?;
    let n = out.nrows();
    asm.push(out, (0..n).map(|_| TokenTag::Textual), Segment::Text { mlp, norm });
    Ok(())
}

fn project_global(params: &EncoderParams, image: &ImageFeatures, r: usize, asm: &mut Assembler) -> Result<()> {
    let g = image.global.view().insert_axis(Axis(0)).to_owned();
    let (z, mlp) = params.global_proj.forward(&g);
    let (out, norm) = normalize_rows(&z)?;
    asm.push(out, [TokenTag::GlobalImage { image: r }], Segment::Global { mlp, norm });
    Ok(())
}

fn project_multimodal(
    params: &EncoderParams,
    image: &ImageFeatures,
    text: &Array2<f64>,
    source: TextSource,
    r: usize,
    asm: &mut Assembler,
) -> Result<()> {
    check_cross_shapes(&image.patches, text, params)?;
    let c = &params.config;
    let (x2, xattn) = params.xattn.forward(&image.patches, text);
    let flat = x2
        .into_shape_with_order((1, c.num_patches * c.image_dim))
        .map_err(|_| Error::Shape {
            expected: c.num_patches * c.image_dim,
            got: 0,
        })?;
    let (z, mlp) = params.mm_proj.forward(&flat);
    let z = z
        .into_shape_with_order((c.mm_tokens, c.embed_dim))
        .expect("mm_proj output is N_v * d");
    let (out, norm) = normalize_rows(&z)?;
    asm.push(
        out,
        (0..c.mm_tokens).map(|index| TokenTag::Multimodal { image: r, index }),
        Segment::Multimodal {
            source,
            xattn,
            mlp,
            norm,
        },
    );
    Ok(())
}

fn check_provider<P: EmbeddingProvider + ?Sized>(params: &EncoderParams, provider: &P) -> Result<()> {
    let c = &params.config;
    for (expected, got) in [
        (c.text_dim, provider.text_dim()),
        (c.image_dim, provider.image_dim()),
        (c.num_patches, provider.num_patches()),
    ] {
        if expected != got {
            return Err(Error::Shape { expected, got });
        }
    }
    Ok(())
}

fn check_image(params: &EncoderParams, image: &ImageFeatures) -> Result<()> {
    let c = &params.config;
    if image.patches.nrows() != c.num_patches {
        return Err(Error::Shape {
            expected: c.num_patches,
            got: image.patches.nrows(),
        });
    }
    if image.global.len() != c.image_dim {
        return Err(Error::Shape {
            expected: c.image_dim,
            got: image.global.len(),
        });
    }
    Ok(())
}

pub fn encode_query_traced<P: EmbeddingProvider + ?Sized>(
    query: &QueryInput,
    params: &EncoderParams,
    provider: &P,
    mode: QueryMode,
) -> Result<(FeatureSet, Trace)> {
    params.check_shapes()?;
    params.check_finite()?;
    check_provider(params, provider)?;
    let has_text = !crate::text::tokenize(&query.text).is_empty();
    let text = match (has_text, mode) {
        (true, _) => Some(embed_text(provider, &query.text)?),
        (false, QueryMode::ImageOnly) => None,
        (false, QueryMode::ImageText) => return Err(Error::Input("query text is empty".into())),
    };
    let image = embed_image(provider, &query.image_key)?;
    check_image(params, &image)?;

    let mut asm = Assembler::new(params.config.embed_dim);
    project_global(params, &image, 0, &mut asm)?;
    if let (Some(t), QueryMode::ImageText) = (&text, mode) {
        project_text(params, t, &mut asm)?;
    }
    match &text {
        Some(t) => project_multimodal(params, &image, &t.embeddings, TextSource::Frozen, 0, &mut asm)?,
        None => {
            let null = params.null_text.view().insert_axis(Axis(0)).to_owned();
            project_multimodal(params, &image, &null, TextSource::Null, 0, &mut asm)?
        }
    }
    asm.finish()
}

pub fn encode_query<P: EmbeddingProvider + ?Sized>(
    query: &QueryInput,
    params: &EncoderParams,
    provider: &P,
    mode: QueryMode,
) -> Result<FeatureSet> {
    encode_query_traced(query, params, provider, mode).map(|(fs, _)| fs)
}

pub fn encode_document_traced<P: EmbeddingProvider + ?Sized>(
    doc: &AugmentedDocument,
    params: &EncoderParams,
    provider: &P,
    flags: DocFlags,
) -> Result<(FeatureSet, Trace)> {
    params.check_shapes()?;
    params.check_finite()?;
    check_provider(params, provider)?;
    if doc.raw.main_image_key.trim().is_empty() {
        return Err(Error::Document(format!("document {} has no main image", doc.raw.doc_id)));
    }
    let text = embed_tokens(provider, doc.text_tokens.clone())?;

    let mut images: Vec<(&str, &[usize])> = vec![(doc.raw.main_image_key.as_str(), doc.main_span.as_slice())];
    if flags.mi {
        images.extend(doc.related.iter().map(|r| (r.image_key.as_str(), r.span.as_slice())));
    }

    let mut asm = Assembler::new(params.config.embed_dim);
    project_text(params, &text, &mut asm)?;
    for (r, (key, span)) in images.into_iter().enumerate() {
        let image = embed_image(provider, key)?;
        check_image(params, &image)?;
        project_global(params, &image, r, &mut asm)?;
        if r == 0 || flags.mmf {
            if flags.ete {
                let perturbed = apply_ete(&text, span, &params.ete)?;
                project_multimodal(
                    params,
                    &image,
                    &perturbed.embeddings,
                    TextSource::Ete(span.to_vec()),
                    r,
                    &mut asm,
                )?;
            } else {
                project_multimodal(params, &image, &text.embeddings, TextSource::Frozen, r, &mut asm)?;
            }
        }
    }
    asm.finish()
}

pub fn encode_document<P: EmbeddingProvider + ?Sized>(
    doc: &AugmentedDocument,
    params: &EncoderParams,
    provider: &P,
    flags: DocFlags,
) -> Result<FeatureSet> {
    encode_document_traced(doc, params, provider, flags).map(|(fs, _)| fs)
}

#[cfg(test)]
mod tests;
