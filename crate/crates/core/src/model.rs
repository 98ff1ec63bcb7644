//! Decoder-only Transformer and its variants.
//!
//! * `Lm`: words only.
//! * `SclmPast` / `SclmNext`: words only, plus a train-time head predicting
//!   the structural n-gram synchronous with each word.
//! * `Plm`: one autoregressive model over the joint action sequence.
//! * `PlmMask`: `Plm` with heads 0 and 1 of every layer restricted to the
//!   innermost open constituent and to everything outside it respectively.
//!
//! Blocks are pre-layernorm (GPT-2 style) with GELU feed-forward and learned
//! absolute position embeddings.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{kernels, Float, Matrix, Tape, TensorError, Var};
use crate::transitions::{window_starts, Action, HeadMaskRow, SyncSegment, TransitionError};
use crate::vocab::{JointActionVocab, NGramVocab, TokenVocab, BOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum Variant {
    Lm,
    SclmPast,
    SclmNext,
    Plm,
    PlmMask,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Lm,
        Variant::SclmPast,
        Variant::SclmNext,
        Variant::Plm,
        Variant::PlmMask,
    ];

    /// Models the joint action sequence rather than words alone.
    pub fn is_joint(self) -> bool {
        matches!(self, Variant::Plm | Variant::PlmMask)
    }

    pub fn is_scaffold(self) -> bool {
        matches!(self, Variant::SclmPast | Variant::SclmNext)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lm => "lm",
            Variant::SclmPast => "sclm-past",
            Variant::SclmNext => "sclm-next",
            Variant::Plm => "plm",
            Variant::PlmMask => "plm-mask",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(String),
    TooLong { len: usize, max: usize },
    EmptyInput,
    MaskMismatch,
    VariantMismatch { variant: Variant, op: &'static str },
    Tensor(TensorError),
    Transition(TransitionError),
    NonFinite,
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(m) => write!(f, "invalid model configuration: {m}"),
            ModelError::TooLong { len, max } => write!(f, "sequence of length {len} exceeds max_len {max}"),
            ModelError::EmptyInput => f.write_str("empty input sequence"),
            ModelError::MaskMismatch => f.write_str("head masks do not match the input sequence"),
            ModelError::VariantMismatch { variant, op } => write!(f, "{op} is not available for variant {variant}"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Transition(e) => write!(f, "{e}"),
            ModelError::NonFinite => f.write_str("non-finite loss or gradient"),
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<TransitionError> for ModelError {
    fn from(e: TransitionError) -> Self {
        ModelError::Transition(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    /// Input/output vocabulary: joint actions for PLM variants, words otherwise.
    pub vocab_size: usize,
    /// Scaffold n-gram vocabulary; 0 for non-scaffold variants.
    pub ngram_vocab_size: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
    pub layernorm_eps: f64,
    /// Weight of the scaffold term in the ScLM loss.
    pub scaffold_weight: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: H=128, 4 heads, 4 layers, 256 positions.
    pub fn desk(variant: Variant, vocab_size: usize, ngram_vocab_size: usize) -> Self {
        ModelConfig {
            variant,
            hidden: 128,
            heads: 4,
            layers: 4,
            ff_mult: 4,
            max_len: 256,
            vocab_size,
            ngram_vocab_size: if variant.is_scaffold() { ngram_vocab_size } else { 0 },
            dropout: 0.1,
            tie_embeddings: true,
            layernorm_eps: 1e-5,
            scaffold_weight: 1.0,
        }
    }

    /// Sized for the given vocabularies; the n-gram vocabulary is only used by
    /// scaffold variants.
    pub fn for_vocabs(variant: Variant, joint: &JointActionVocab, ngrams: Option<&NGramVocab>) -> Self {
        let vocab = if variant.is_joint() { joint.len() } else { joint.tokens().len() };
        Self::desk(variant, vocab, ngrams.map_or(0, NGramVocab::len))
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.ff_mult == 0 {
            return bad("hidden, heads, layers and ff_mult must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be divisible by the head count");
        }
        if self.variant == Variant::PlmMask && self.heads < 3 {
            return bad("plm-mask needs at least 3 heads (2 constrained, 1 free)");
        }
        if self.variant.is_scaffold() && self.ngram_vocab_size < 2 {
            return bad("scaffold variants need an n-gram vocabulary");
        }
        if !self.variant.is_scaffold() && self.ngram_vocab_size != 0 {
            return bad("only scaffold variants carry an n-gram vocabulary");
        }
        if self.vocab_size <= BOS as usize || self.max_len < 2 {
            return bad("vocabulary or max_len too small");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Parameter tensors in layout order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        build_layout(self).1
    }

    /// Closed-form parameter count:
    /// `V·H + L·H + M·((4 + 2f)·H² + (9 + f)·H) + 2H`, plus `V·H` when the
    /// output embedding is untied and `G·H` for a scaffold head.
    pub fn parameter_count(&self) -> usize {
        let (h, f) = (self.hidden, self.ff_mult);
        let per_layer = (4 + 2 * f) * h * h + (9 + f) * h;
        let mut n = self.vocab_size * h + self.max_len * h + self.layers * per_layer + 2 * h;
        if !self.tie_embeddings {
            n += self.vocab_size * h;
        }
        n += self.ngram_vocab_size * h;
        n
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerIndex {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIndex>,
    lnf_g: usize,
    lnf_b: usize,
    out_emb: Option<usize>,
    scaffold_emb: Option<usize>,
}

/// How a parameter is initialised and whether weight decay applies to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    /// Output projection of a residual branch (scaled-down init).
    ResidualWeight,
    Bias,
    Gain,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::ResidualWeight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub kind: ParamKind,
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut add = |name: String, shape: (usize, usize), kind: ParamKind| {
        specs.push(ParamSpec { name, shape, kind });
        specs.len() - 1
    };
    let (h, v) = (c.hidden, c.vocab_size);
    let ff = c.ff_mult * h;
    let tok_emb = add("tok_emb".into(), (v, h), ParamKind::Embedding);
    let pos_emb = add("pos_emb".into(), (c.max_len, h), ParamKind::Embedding);
    let mut layers = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerIndex {
            ln1_g: add(n("ln1.gain"), (1, h), ParamKind::Gain),
            ln1_b: add(n("ln1.bias"), (1, h), ParamKind::Bias),
            wq: add(n("attn.wq"), (h, h), ParamKind::Weight),
            bq: add(n("attn.bq"), (1, h), ParamKind::Bias),
            wk: add(n("attn.wk"), (h, h), ParamKind::Weight),
            bk: add(n("attn.bk"), (1, h), ParamKind::Bias),
            wv: add(n("attn.wv"), (h, h), ParamKind::Weight),
            bv: add(n("attn.bv"), (1, h), ParamKind::Bias),
            wo: add(n("attn.wo"), (h, h), ParamKind::ResidualWeight),
            bo: add(n("attn.bo"), (1, h), ParamKind::Bias),
            ln2_g: add(n("ln2.gain"), (1, h), ParamKind::Gain),
            ln2_b: add(n("ln2.bias"), (1, h), ParamKind::Bias),
            ff1_w: add(n("ff.w1"), (h, ff), ParamKind::Weight),
            ff1_b: add(n("ff.b1"), (1, ff), ParamKind::Bias),
            ff2_w: add(n("ff.w2"), (ff, h), ParamKind::ResidualWeight),
            ff2_b: add(n("ff.b2"), (1, h), ParamKind::Bias),
        });
    }
    let lnf_g = add("lnf.gain".into(), (1, h), ParamKind::Gain);
    let lnf_b = add("lnf.bias".into(), (1, h), ParamKind::Bias);
    let out_emb = (!c.tie_embeddings).then(|| add("out_emb".into(), (v, h), ParamKind::Embedding));
    let scaffold_emb = c
        .variant
        .is_scaffold()
        .then(|| add("scaffold_emb".into(), (c.ngram_vocab_size, h), ParamKind::Embedding));
    (
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            out_emb,
            scaffold_emb,
        },
        specs,
    )
}

/// A configured model and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Float> {
    config: ModelConfig,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Matrix<F>>,
}

/// Per-parameter gradients, aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Float> {
    pub grads: Vec<Matrix<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn zeros_like(model: &Model<F>) -> Self {
        Gradients {
            grads: model.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        self.grads.iter_mut().zip(&other.grads).for_each(|(a, b)| a.add_assign(b));
    }

    pub fn scale(&mut self, s: F) {
        self.grads.iter_mut().for_each(|g| g.scale(s));
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Matrix::all_finite)
    }
}

/// Structural attention restrictions for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum HeadMasks<'a> {
    /// Causal attention only.
    None,
    /// One row per position (PLM-mask).
    Rows(&'a [HeadMaskRow]),
    /// PLM-mask heads with every past key visible.
    AllVisible,
}

/// Tape handles produced by a forward pass.
pub struct ForwardOutput {
    /// `t x V`: row `p` scores the next symbol after position `p`.
    pub logits: Var,
    /// `t x H` output of the final layer norm.
    pub hidden: Var,
    /// Attention probabilities per layer and head (`layer * heads + head`),
    /// each `t x t`, when requested.
    pub attention: Option<Vec<Var>>,
}

/// One training or scoring instance.
#[derive(Debug, Clone, PartialEq)]
pub enum Example {
    /// Joint action ids (BOS first); windows are present for PLM-mask.
    Joint {
        ids: Vec<u32>,
        windows: Option<Vec<Option<usize>>>,
    },
    /// Word ids without BOS.
    Words { ids: Vec<u32> },
    /// Word ids without BOS and one scaffold target per word (PAD = ignored).
    Scaffold { ids: Vec<u32>, ngram_targets: Vec<u32> },
}

impl Example {
    /// Number of predictions the loss normalises by.
    pub fn tokens(&self) -> usize {
        match self {
            Example::Joint { ids, .. } => ids.len().saturating_sub(1),
            Example::Words { ids } | Example::Scaffold { ids, .. } => ids.len(),
        }
    }
}

/// Additive `t x t` mask with `-inf` above the diagonal.
fn causal_mask<F: Float>(t: usize) -> Matrix<F> {
    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, F::neg_infinity());
        }
    }
    m
}

fn visibility_mask<F: Float>(t: usize, rows: &[HeadMaskRow], pick: impl Fn(&HeadMaskRow) -> &[bool]) -> Matrix<F> {
    let mut m = Matrix::filled(t, t, F::neg_infinity());
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in pick(row).iter().enumerate() {
            if v {
                m.set(i, j, F::zero());
            }
        }
    }
    m
}

fn check_rows(rows: &[HeadMaskRow], t: usize) -> Result<(), ModelError> {
    if rows.len() != t {
        return Err(ModelError::MaskMismatch);
    }
    for (i, r) in rows.iter().enumerate() {
        let ok = r.stack_visible.len() == i + 1
            && r.outside_visible.len() == i + 1
            && r.stack_visible.iter().any(|&v| v)
            && r.outside_visible.iter().any(|&v| v);
        if !ok {
            return Err(ModelError::MaskMismatch);
        }
    }
    Ok(())
}

/// Log-softmax of a logits row, in f64.
pub fn log_softmax<F: Float>(logits: &[F]) -> Vec<f64> {
    let row: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let mut out = vec![0.0; row.len()];
    kernels::log_softmax_row(&row, &mut out);
    out
}

/// Scaffold n-gram target for every word position.
///
/// `SclmNext` predicts the n-gram preceding `w_t` at the output that predicts
/// `w_t`; `SclmPast` predicts the n-gram preceding `w_{t-1}` there, with PAD
/// (ignored) at the first word. Out-of-vocabulary n-grams become BLANK; the
/// second value counts them.
pub fn scaffold_targets(segments: &[SyncSegment], variant: Variant, ngrams: &NGramVocab) -> (Vec<u32>, usize) {
    let mut oov = 0;
    let mut ids: Vec<u32> = segments
        .iter()
        .map(|s| {
            let (id, miss) = ngrams.encode_or_blank(&s.preceding);
            oov += miss as usize;
            id
        })
        .collect();
    if variant == Variant::SclmPast && !ids.is_empty() {
        ids.pop();
        ids.insert(0, PAD);
    }
    (ids, oov)
}

impl<F: Float> Model<F> {
    /// Randomly initialised model: weights `N(0, 0.02)`, residual output
    /// projections `N(0, 0.02/sqrt(2M))`, zero biases, unit gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / num_traits::Float::sqrt(2.0 * config.layers as f64);
        let params = specs
            .iter()
            .map(|s| {
                let (r, c) = s.shape;
                match s.kind {
                    ParamKind::Bias => Matrix::zeros(r, c),
                    ParamKind::Gain => Matrix::filled(r, c, F::one()),
                    kind => {
                        let sd = if kind == ParamKind::ResidualWeight { resid_std } else { std };
                        let normal = Normal::new(0.0, sd).expect("positive std");
                        Matrix::from_vec(r, c, (0..r * c).map(|_| F::of(normal.sample(&mut rng))).collect())
                    }
                }
            })
            .collect();
        Ok(Model {
            config,
            layout,
            specs,
            params,
        })
    }

    /// Builds a model from explicit parameter tensors in layout order.
    pub fn from_params(config: ModelConfig, params: Vec<Matrix<F>>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if params.len() != specs.len() || params.iter().zip(&specs).any(|(p, s)| p.shape() != s.shape) {
            return Err(ModelError::Config("parameter shapes do not match the configuration".into()));
        }
        Ok(Model {
            config,
            layout,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &[Matrix<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<F>] {
        &mut self.params
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    /// Same weights in another float type.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
        }
    }

    /// Zeroes the scaffold output embedding, if any.
    pub fn zero_scaffold_head(&mut self) {
        if let Some(i) = self.layout.scaffold_emb {
            self.params[i].data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    fn out_emb_index(&self) -> usize {
        self.layout.out_emb.unwrap_or(self.layout.tok_emb)
    }

    /// Runs the decoder over `ids` (`ids[0]` is normally BOS).
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p, F>,
        ids: &[u32],
        masks: HeadMasks<'_>,
        capture_attention: bool,
    ) -> Result<ForwardOutput, ModelError> {
        let c = &self.config;
        let t = ids.len();
        if t == 0 {
            return Err(ModelError::EmptyInput);
        }
        if t > c.max_len {
            return Err(ModelError::TooLong { len: t, max: c.max_len });
        }
        let structural = match masks {
            HeadMasks::None if c.variant == Variant::PlmMask => return Err(ModelError::MaskMismatch),
            HeadMasks::None => None,
            _ if c.variant != Variant::PlmMask => {
                return Err(ModelError::VariantMismatch {
                    variant: c.variant,
                    op: "structural head masks",
                })
            }
            HeadMasks::AllVisible => None,
            HeadMasks::Rows(rows) => {
                check_rows(rows, t)?;
                Some((
                    visibility_mask::<F>(t, rows, |r| &r.stack_visible),
                    visibility_mask::<F>(t, rows, |r| &r.outside_visible),
                ))
            }
        };
        let causal = causal_mask::<F>(t);
        let pv: Vec<Var> = self.params.iter().enumerate().map(|(i, m)| tape.param(m, i)).collect();
        let l = &self.layout;
        let p = c.dropout;
        let eps = F::of(c.layernorm_eps);
        let d = c.head_dim();
        let scale = F::of(1.0 / num_traits::Float::sqrt(d as f64));

        let tok = tape.embedding(pv[l.tok_emb], ids)?;
        let positions: Vec<u32> = (0..t as u32).collect();
        let pos = tape.embedding(pv[l.pos_emb], &positions)?;
        let x0 = tape.add(tok, pos)?;
        let mut x = tape.dropout(x0, p);
        let mut attention = capture_attention.then(Vec::new);

        for li in &l.layers {
            let h = tape.layernorm(x, pv[li.ln1_g], pv[li.ln1_b], eps)?;
            let q = tape.matmul(h, pv[li.wq])?;
            let q = tape.add_row(q, pv[li.bq])?;
            let k = tape.matmul(h, pv[li.wk])?;
            let k = tape.add_row(k, pv[li.bk])?;
            let v = tape.matmul(h, pv[li.wv])?;
            let v = tape.add_row(v, pv[li.bv])?;
            let mut heads = Vec::with_capacity(c.heads);
            for n in 0..c.heads {
                let qn = tape.slice_cols(q, n * d, d)?;
                let kn = tape.slice_cols(k, n * d, d)?;
                let vn = tape.slice_cols(v, n * d, d)?;
                let s = tape.matmul_nt(qn, kn)?;
                let s = tape.scale(s, scale);
                let mask = match (&structural, n) {
                    (Some((stack, _)), 0) => stack,
                    (Some((_, outside)), 1) => outside,
                    _ => &causal,
                };
                let a = tape.masked_softmax(s, Some(mask))?;
                if let Some(att) = attention.as_mut() {
                    att.push(a);
                }
                heads.push(tape.matmul(a, vn)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = tape.matmul(cat, pv[li.wo])?;
            let o = tape.add_row(o, pv[li.bo])?;
            let o = tape.dropout(o, p);
            x = tape.add(x, o)?;

            let h2 = tape.layernorm(x, pv[li.ln2_g], pv[li.ln2_b], eps)?;
            let f = tape.matmul(h2, pv[li.ff1_w])?;
            let f = tape.add_row(f, pv[li.ff1_b])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, pv[li.ff2_w])?;
            let f = tape.add_row(f, pv[li.ff2_b])?;
            let f = tape.dropout(f, p);
            x = tape.add(x, f)?;
        }
        let hidden = tape.layernorm(x, pv[l.lnf_g], pv[l.lnf_b], eps)?;
        let logits = tape.matmul_nt(hidden, pv[self.out_emb_index()])?;
        Ok(ForwardOutput {
            logits,
            hidden,
            attention,
        })
    }

    /// Joint-action forward from an action prefix, deriving PLM-mask head
    /// masks from the prefix itself.
    pub fn forward_actions<'p>(
        &'p self,
        tape: &mut Tape<'p, F>,
        vocab: &JointActionVocab,
        actions: &[Action],
        capture_attention: bool,
    ) -> Result<ForwardOutput, ModelError> {
        if !self.variant().is_joint() {
            return Err(ModelError::VariantMismatch {
                variant: self.variant(),
                op: "joint-action forward",
            });
        }
        let ids = vocab
            .encode_sequence(actions)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let rows;
        let masks = if self.variant() == Variant::PlmMask {
            rows = crate::transitions::head_masks(actions)?;
            HeadMasks::Rows(&rows)
        } else {
            HeadMasks::None
        };
        self.forward(tape, &ids, masks, capture_attention)
    }

    /// Word-level forward for scaffold models: both heads read the same final
    /// hidden state. `words` are the `T` word ids; row `t` of each output
    /// predicts word `t` from `BOS, w_1..w_{t-1}`.
    pub fn scaffold_forward<'p>(&'p self, tape: &mut Tape<'p, F>, words: &[u32]) -> Result<(Var, Var), ModelError> {
        let Some(sc) = self.layout.scaffold_emb else {
            return Err(ModelError::VariantMismatch {
                variant: self.variant(),
                op: "scaffold forward",
            });
        };
        let inputs = word_inputs(words)?;
        let out = self.forward(tape, &inputs, HeadMasks::None, false)?;
        let emb = tape.param(&self.params[sc], sc);
        let ngram_logits = tape.matmul_nt(out.hidden, emb)?;
        Ok((out.logits, ngram_logits))
    }

    /// Builds the loss (summed over predictions) for one example on `tape`.
    /// The scaffold term is weighted by `scaffold_weight`.
    pub fn loss<'p>(&'p self, tape: &mut Tape<'p, F>, example: &Example) -> Result<Var, ModelError> {
        let v = self.variant();
        match example {
            Example::Joint { ids, windows } => {
                if !v.is_joint() {
                    return Err(ModelError::VariantMismatch { variant: v, op: "joint loss" });
                }
                if ids.len() < 2 {
                    return Err(ModelError::EmptyInput);
                }
                let input = &ids[..ids.len() - 1];
                let rows: Vec<HeadMaskRow>;
                let masks = match (v, windows) {
                    (Variant::PlmMask, Some(w)) => {
                        if w.len() < input.len() {
                            return Err(ModelError::MaskMismatch);
                        }
                        rows = w[..input.len()]
                            .iter()
                            .enumerate()
                            .map(|(p, &ws)| HeadMaskRow::new(p + 1, ws))
                            .collect();
                        HeadMasks::Rows(&rows)
                    }
                    (Variant::PlmMask, None) => return Err(ModelError::MaskMismatch),
                    _ => HeadMasks::None,
                };
                let out = self.forward(tape, input, masks, false)?;
                let targets: Vec<Option<u32>> = ids[1..].iter().map(|&i| Some(i)).collect();
                Ok(tape.cross_entropy(out.logits, &targets)?)
            }
            Example::Words { ids } => {
                if v.is_joint() {
                    return Err(ModelError::VariantMismatch { variant: v, op: "word loss" });
                }
                let out = self.forward(tape, &word_inputs(ids)?, HeadMasks::None, false)?;
                let targets: Vec<Option<u32>> = ids.iter().map(|&i| Some(i)).collect();
                Ok(tape.cross_entropy(out.logits, &targets)?)
            }
            Example::Scaffold { ids, ngram_targets } => {
                if ngram_targets.len() != ids.len() {
                    return Err(ModelError::MaskMismatch);
                }
                let (word_logits, ngram_logits) = self.scaffold_forward(tape, ids)?;
                let wt: Vec<Option<u32>> = ids.iter().map(|&i| Some(i)).collect();
                let word_loss = tape.cross_entropy(word_logits, &wt)?;
                let nt: Vec<Option<u32>> = ngram_targets.iter().map(|&g| (g != PAD).then_some(g)).collect();
                let ngram_loss = tape.cross_entropy(ngram_logits, &nt)?;
                let ngram_loss = tape.scale(ngram_loss, F::of(self.config.scaffold_weight));
                Ok(tape.add(word_loss, ngram_loss)?)
            }
        }
    }

    /// Summed loss and its gradient. `dropout_seed` enables dropout.
    pub fn loss_and_grad(&self, example: &Example, dropout_seed: Option<u64>) -> Result<(f64, Gradients<F>), ModelError> {
        let mut tape = match dropout_seed {
            Some(s) => Tape::training(s),
            None => Tape::new(),
        };
        let loss = self.loss(&mut tape, example)?;
        let value = tape.value(loss).to_scalar().as_f64();
        let grads = tape
            .backward(loss, self.params.len())
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect();
        Ok((value, Gradients { grads }))
    }

    /// Summed loss without gradients or dropout.
    pub fn eval_loss(&self, example: &Example) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, example)?;
        Ok(tape.value(loss).to_scalar().as_f64())
    }

    /// Log-probability of every next symbol after each position of `ids`
    /// (full, non-incremental pass; no dropout).
    pub fn next_log_probs(&self, ids: &[u32], masks: HeadMasks<'_>) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ids, masks, false)?;
        let logits = tape.value(out.logits);
        Ok((0..logits.rows()).map(|i| log_softmax(logits.row(i))).collect())
    }

    /// Empty decoder state; feed BOS first.
    pub fn start_incremental(&self) -> DecoderState<F> {
        DecoderState { last: None, len: 0 }
    }

    /// Consumes one symbol and returns the logits for the next one.
    ///
    /// `mask_row` is required for PLM-mask and describes what the new
    /// position may attend to through heads 0 and 1 (keys `0..=len`).
    pub fn step(
        &self,
        state: &DecoderState<F>,
        id: u32,
        mask_row: Option<&HeadMaskRow>,
    ) -> Result<(DecoderState<F>, Vec<F>), ModelError> {
        let c = &self.config;
        let pos = state.len;
        if pos >= c.max_len {
            return Err(ModelError::TooLong {
                len: pos + 1,
                max: c.max_len,
            });
        }
        if id as usize >= c.vocab_size {
            return Err(ModelError::Tensor(TensorError::BadTarget {
                target: id,
                classes: c.vocab_size,
            }));
        }
        let structural = match (c.variant, mask_row) {
            (Variant::PlmMask, Some(r)) => {
                if r.stack_visible.len() != pos + 1 || r.outside_visible.len() != pos + 1 {
                    return Err(ModelError::MaskMismatch);
                }
                Some(r)
            }
            (Variant::PlmMask, None) => return Err(ModelError::MaskMismatch),
            (_, Some(_)) => {
                return Err(ModelError::VariantMismatch {
                    variant: c.variant,
                    op: "structural head masks",
                })
            }
            _ => None,
        };
        let l = &self.layout;
        let h = c.hidden;
        let d = c.head_dim();
        let eps = F::of(c.layernorm_eps);
        let scale = F::of(1.0 / num_traits::Float::sqrt(d as f64));
        let p = |i: usize| &self.params[i];

        let mut x = Matrix::from_vec(1, h, p(l.tok_emb).row(id as usize).to_vec());
        x.add_assign(&Matrix::from_vec(1, h, p(l.pos_emb).row(pos).to_vec()));

        // Ancestors, oldest first.
        let mut chain: Vec<&CacheNode<F>> = Vec::with_capacity(pos);
        let mut cur = state.last.as_deref();
        while let Some(n) = cur {
            chain.push(n);
            cur = n.parent.as_deref();
        }
        chain.reverse();

        let mut keys_out = Vec::with_capacity(c.layers);
        let mut values_out = Vec::with_capacity(c.layers);
        for (li_idx, li) in l.layers.iter().enumerate() {
            let (hn, _, _) = kernels::layernorm(&x, p(li.ln1_g).data(), p(li.ln1_b).data(), eps);
            let mut q = kernels::matmul(&hn, p(li.wq));
            kernels::add_row_in_place(&mut q, p(li.bq).data());
            let mut k = kernels::matmul(&hn, p(li.wk));
            kernels::add_row_in_place(&mut k, p(li.bk).data());
            let mut v = kernels::matmul(&hn, p(li.wv));
            kernels::add_row_in_place(&mut v, p(li.bv).data());

            let key_rows: Vec<&[F]> = chain
                .iter()
                .map(|n| n.keys[li_idx].as_slice())
                .chain(core::iter::once(k.data()))
                .collect();
            let value_rows: Vec<&[F]> = chain
                .iter()
                .map(|n| n.values[li_idx].as_slice())
                .chain(core::iter::once(v.data()))
                .collect();

            let mut cat = Matrix::zeros(1, h);
            for n in 0..c.heads {
                let cols = n * d..(n + 1) * d;
                let head = |rows: &[&[F]]| Matrix::from_vec(rows.len(), d, rows.iter().flat_map(|r| r[cols.clone()].iter().copied()).collect());
                let qn = Matrix::from_vec(1, d, q.data()[cols.clone()].to_vec());
                let mut scores = kernels::matmul_nt(&qn, &head(&key_rows));
                scores.scale(scale);
                let visible: Option<&[bool]> = match (structural, n) {
                    (Some(r), 0) => Some(&r.stack_visible),
                    (Some(r), 1) => Some(&r.outside_visible),
                    _ => None,
                };
                if let Some(vis) = visible {
                    for (s, &ok) in scores.data_mut().iter_mut().zip(vis) {
                        if !ok {
                            *s += F::neg_infinity();
                        }
                    }
                }
                if !kernels::softmax_row(scores.data_mut()) {
                    return Err(ModelError::Tensor(TensorError::AllMaskedRow { row: pos }));
                }
                let out = kernels::matmul(&scores, &head(&value_rows));
                cat.data_mut()[cols].copy_from_slice(out.data());
            }
            let mut o = kernels::matmul(&cat, p(li.wo));
            kernels::add_row_in_place(&mut o, p(li.bo).data());
            x.add_assign(&o);

            let (h2, _, _) = kernels::layernorm(&x, p(li.ln2_g).data(), p(li.ln2_b).data(), eps);
            let mut f = kernels::matmul(&h2, p(li.ff1_w));
            kernels::add_row_in_place(&mut f, p(li.ff1_b).data());
            f.data_mut().iter_mut().for_each(|v| *v = kernels::gelu(*v));
            let mut f = kernels::matmul(&f, p(li.ff2_w));
            kernels::add_row_in_place(&mut f, p(li.ff2_b).data());
            x.add_assign(&f);

            keys_out.push(k.into_data());
            values_out.push(v.into_data());
        }
        let (hf, _, _) = kernels::layernorm(&x, p(l.lnf_g).data(), p(l.lnf_b).data(), eps);
        let logits = kernels::matmul_nt(&hf, p(self.out_emb_index())).into_data();
        let node = CacheNode {
            parent: state.last.clone(),
            keys: keys_out,
            values: values_out,
        };
        Ok((
            DecoderState {
                last: Some(Arc::new(node)),
                len: pos + 1,
            },
            logits,
        ))
    }
}

fn word_inputs(words: &[u32]) -> Result<Vec<u32>, ModelError> {
    if words.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut v = Vec::with_capacity(words.len());
    v.push(BOS);
    v.extend_from_slice(&words[..words.len() - 1]);
    Ok(v)
}

#[derive(Debug)]
struct CacheNode<F> {
    parent: Option<Arc<CacheNode<F>>>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

/// Key/value history of an incremental decode. Cloning is O(1); extensions
/// share their common prefix.
#[derive(Debug, Clone)]
pub struct DecoderState<F> {
    last: Option<Arc<CacheNode<F>>>,
    len: usize,
}

impl<F> DecoderState<F> {
    /// Number of symbols consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Encodes a tree's oracle as a training example for `variant`.
pub fn encode_example(
    variant: Variant,
    oracle: &[Action],
    joint: &JointActionVocab,
    ngrams: Option<&NGramVocab>,
) -> Result<(Example, usize), ModelError> {
    let words: Vec<u32> = oracle
        .iter()
        .filter_map(|a| match a {
            Action::Gen(w) => Some(joint.tokens().encode(w)),
            _ => None,
        })
        .collect();
    match variant {
        Variant::Plm | Variant::PlmMask => {
            let ids = joint
                .encode_sequence(oracle)
                .map_err(|e| ModelError::Config(e.to_string()))?;
            let windows = (variant == Variant::PlmMask).then(|| window_starts(oracle)).transpose()?;
            Ok((Example::Joint { ids, windows }, 0))
        }
        Variant::Lm => Ok((Example::Words { ids: words }, 0)),
        Variant::SclmPast | Variant::SclmNext => {
            let ngrams = ngrams.ok_or_else(|| ModelError::Config("scaffold variant without n-gram vocabulary".into()))?;
            let (segments, _) = crate::transitions::sync_ngrams(oracle);
            let (ngram_targets, oov) = scaffold_targets(&segments, variant, ngrams);
            Ok((
                Example::Scaffold {
                    ids: words,
                    ngram_targets,
                },
                oov,
            ))
        }
    }
}

/// Encodes a plain word sequence for word-level variants.
pub fn encode_words(tokens: &TokenVocab, words: &[&str]) -> Vec<u32> {
    words.iter().map(|w| tokens.encode(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transitions::oracle;
    use crate::tree::parse_tree;
    use crate::vocab::{build_ngram_vocab, build_token_vocab};

    fn tiny(variant: Variant, vocab: usize, ngrams: usize) -> ModelConfig {
        ModelConfig {
            variant,
            hidden: 16,
            heads: 4,
            layers: 2,
            ff_mult: 4,
            max_len: 32,
            vocab_size: vocab,
            ngram_vocab_size: if variant.is_scaffold() { ngrams } else { 0 },
            dropout: 0.0,
            tie_embeddings: true,
            layernorm_eps: 1e-5,
            scaffold_weight: 1.0,
        }
    }

    fn birds_sang() -> (Vec<Action>, JointActionVocab, NGramVocab) {
        let t = parse_tree("(S (NP The birds) (VP sang))").unwrap();
        let o = oracle(&t);
        let tv = build_token_vocab([&t], 1).unwrap();
        let jv = JointActionVocab::from_trees(tv, [&t]);
        let nv = build_ngram_vocab([&o]);
        (o.into_inner(), jv, nv)
    }

    #[test]
    fn config_validation() {
        assert!(tiny(Variant::Lm, 10, 0).validate().is_ok());
        let mut c = tiny(Variant::PlmMask, 10, 0);
        c.heads = 2;
        c.hidden = 16;
        assert!(c.validate().is_err());
        let mut c = tiny(Variant::Lm, 10, 0);
        c.hidden = 18;
        assert!(c.validate().is_err());
        assert!(tiny(Variant::SclmNext, 10, 0).validate().is_err());
        assert_eq!("plm-mask".parse::<Variant>().unwrap(), Variant::PlmMask);
        assert!("gpt".parse::<Variant>().is_err());
    }

    #[test]
    fn parameter_count_formula_matches_allocation() {
        for v in Variant::ALL {
            for tie in [true, false] {
                let mut c = tiny(v, 11, 7);
                c.tie_embeddings = tie;
                let m = Model::<f32>::new(c.clone(), 0).unwrap();
                assert_eq!(m.parameter_count(), c.parameter_count(), "{v} tie={tie}");
            }
        }
    }

    #[test]
    fn gpt2_small_count_is_about_117m() {
        let c = ModelConfig {
            hidden: 768,
            heads: 12,
            layers: 12,
            max_len: 1024,
            ..ModelConfig::desk(Variant::Lm, 50257, 0)
        };
        let n = c.parameter_count() as f64;
        assert!((n / 117e6 - 1.0).abs() < 0.1, "{n}");
    }

    #[test]
    fn single_bos_forward() {
        let m = Model::<f64>::new(tiny(Variant::Plm, 12, 0), 1).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &[BOS], HeadMasks::None, false).unwrap();
        let logits = tape.value(out.logits);
        assert_eq!(logits.shape(), (1, 12));
        let lp = log_softmax(logits.row(0));
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_errors() {
        let m = Model::<f64>::new(tiny(Variant::Plm, 12, 0), 1).unwrap();
        let mut tape = Tape::new();
        let long = vec![BOS; 33];
        assert!(matches!(
            m.forward(&mut tape, &long, HeadMasks::None, false),
            Err(ModelError::TooLong { len: 33, max: 32 })
        ));
        assert!(matches!(
            m.forward(&mut tape, &[BOS], HeadMasks::AllVisible, false),
            Err(ModelError::VariantMismatch { .. })
        ));
        let mm = Model::<f64>::new(tiny(Variant::PlmMask, 12, 0), 1).unwrap();
        let mut tape = Tape::new();
        assert_eq!(
            mm.forward(&mut tape, &[BOS, 3], HeadMasks::None, false).err(),
            Some(ModelError::MaskMismatch)
        );
        let rows = [HeadMaskRow::new(1, None)];
        assert_eq!(
            mm.forward(&mut tape, &[BOS, 3], HeadMasks::Rows(&rows), false).err(),
            Some(ModelError::MaskMismatch)
        );
    }

    #[test]
    fn birds_sang_scaffold_targets() {
        let (o, _, nv) = birds_sang();
        let (segs, _) = crate::transitions::sync_ngrams(&o);
        let id = |g: &[Action]| nv.get(g).unwrap();
        let s_np = id(&[Action::Nt("S".into()), Action::Nt("NP".into())]);
        let red_vp = id(&[Action::Reduce, Action::Nt("VP".into())]);
        let (next, _) = scaffold_targets(&segs, Variant::SclmNext, &nv);
        assert_eq!(next, vec![s_np, crate::vocab::BLANK, red_vp]);
        let (past, _) = scaffold_targets(&segs, Variant::SclmPast, &nv);
        assert_eq!(past, vec![PAD, s_np, crate::vocab::BLANK]);
    }

    #[test]
    fn scaffold_shapes_and_identity_with_lm() {
        let (o, jv, nv) = birds_sang();
        let tv = jv.tokens().len();
        let mut sc = Model::<f64>::new(tiny(Variant::SclmNext, tv, nv.len()), 3).unwrap();
        let words = vec![3, 4, 5];
        let mut tape = Tape::new();
        let (wl, gl) = sc.scaffold_forward(&mut tape, &words).unwrap();
        assert_eq!(tape.value(wl).shape(), (3, tv));
        assert_eq!(tape.value(gl).shape(), (3, nv.len()));
        for i in 0..3 {
            for row in [tape.value(wl).row(i), tape.value(gl).row(i)] {
                let s: f64 = log_softmax(row).iter().map(|v| v.exp()).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        drop(tape);

        // Same trunk weights as an LM.
        let lm_params: Vec<Matrix<f64>> = sc.params()[..sc.params().len() - 1].to_vec();
        let lm = Model::from_params(tiny(Variant::Lm, tv, 0), lm_params).unwrap();
        let (ex, _) = encode_example(Variant::SclmNext, &o, &jv, Some(&nv)).unwrap();
        let lm_ex = Example::Words { ids: match &ex {
            Example::Scaffold { ids, .. } => ids.clone(),
            _ => unreachable!(),
        } };
        sc.config.scaffold_weight = 0.0;
        assert_eq!(sc.eval_loss(&ex).unwrap(), lm.eval_loss(&lm_ex).unwrap());
        sc.zero_scaffold_head();
        let mut t1 = Tape::new();
        let (wl, _) = sc.scaffold_forward(&mut t1, &words).unwrap();
        let mut t2 = Tape::new();
        let out = lm.forward(&mut t2, &word_inputs(&words).unwrap(), HeadMasks::None, false).unwrap();
        assert_eq!(t1.value(wl), t2.value(out.logits));
    }

    #[test]
    fn uniform_model_loss_is_log_vocab() {
        let (o, jv, _) = birds_sang();
        let mut m = Model::<f64>::new(tiny(Variant::Plm, jv.len(), 0), 4).unwrap();
        // Zero embeddings give all-zero logits.
        let te = m.layout.tok_emb;
        m.params[te].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (ex, _) = encode_example(Variant::Plm, &o, &jv, None).unwrap();
        let loss = m.eval_loss(&ex).unwrap();
        let per = loss / ex.tokens() as f64;
        assert!((per - (jv.len() as f64).ln()).abs() < 1e-9, "{per}");
    }

    #[test]
    fn teacher_forcing_product_matches_loss() {
        let (o, jv, _) = birds_sang();
        let m = Model::<f64>::new(tiny(Variant::Plm, jv.len(), 0), 5).unwrap();
        let (ex, _) = encode_example(Variant::Plm, &o, &jv, None).unwrap();
        let Example::Joint { ids, .. } = &ex else { unreachable!() };
        let lps = m.next_log_probs(&ids[..ids.len() - 1], HeadMasks::None).unwrap();
        let logp: f64 = lps.iter().zip(&ids[1..]).map(|(row, &t)| row[t as usize]).sum();
        let loss = m.eval_loss(&ex).unwrap();
        assert!((logp.exp() - (-loss).exp()).abs() < 1e-12);
    }

    #[test]
    fn one_step_of_descent_lowers_loss() {
        let (o, jv, _) = birds_sang();
        let mut m = Model::<f64>::new(tiny(Variant::PlmMask, jv.len(), 0), 6).unwrap();
        let (ex, _) = encode_example(Variant::PlmMask, &o, &jv, None).unwrap();
        let (before, g) = m.loss_and_grad(&ex, None).unwrap();
        for (p, g) in m.params.iter_mut().zip(&g.grads) {
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= 1e-3 * d);
        }
        assert!(m.eval_loss(&ex).unwrap() < before);
    }

    #[test]
    fn incremental_matches_full_forward() {
        let (o, jv, _) = birds_sang();
        for variant in [Variant::Plm, Variant::PlmMask] {
            let m = Model::<f32>::new(tiny(variant, jv.len(), 0), 7).unwrap();
            let ids = jv.encode_sequence(&o).unwrap();
            let rows = crate::transitions::head_masks(&o).unwrap();
            let masks = if variant == Variant::PlmMask { HeadMasks::Rows(&rows) } else { HeadMasks::None };
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &ids, masks, false).unwrap();
            let full = tape.value(out.logits).clone();
            let mut st = m.start_incremental();
            for (p, &id) in ids.iter().enumerate() {
                let row = (variant == Variant::PlmMask).then(|| &rows[p]);
                let (next, logits) = m.step(&st, id, row).unwrap();
                assert_eq!(logits.as_slice(), full.row(p), "{variant} position {p}");
                st = next;
            }
            assert_eq!(st.len(), ids.len());
        }
    }

    #[test]
    fn dropout_changes_training_loss_only() {
        let (o, jv, _) = birds_sang();
        let mut c = tiny(Variant::Plm, jv.len(), 0);
        c.dropout = 0.3;
        let m = Model::<f64>::new(c, 8).unwrap();
        let (ex, _) = encode_example(Variant::Plm, &o, &jv, None).unwrap();
        let (a, _) = m.loss_and_grad(&ex, Some(1)).unwrap();
        let (b, _) = m.loss_and_grad(&ex, Some(1)).unwrap();
        let (cc, _) = m.loss_and_grad(&ex, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, cc);
        assert_eq!(cc, m.eval_loss(&ex).unwrap());
    }
}
