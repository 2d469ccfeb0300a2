//! Multimodal input embedding and the pointer-augmented answer decoder.
//!
//! Sequence layout fed to the encoder, in order: question tokens, visual
//! objects, OCR tokens, decoder slots. Image-origin rows carry no positional
//! embedding, so the encoder is equivariant over them.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{encode_stack, init_stack, AttentionConfig, AttentionError, AttentionMask, LayerWeights};
use crate::edge::{build_edge_tensor_with, BoundingBox, EdgeError, EdgeInput, EdgeTensor, FeatureMask, Modality, TranslationNorm};
use crate::params::{BoundParams, CheckpointError, Init, ParamId, ParamStore};
use crate::tensor::{NodeId, Tape, TensorError, LAYER_NORM_EPS};

/// Vocabulary index of the end-of-answer token.
pub const EOS: usize = 0;
pub const EOS_TOKEN: &str = "<eos>";
pub const MAX_DECODE_STEPS: usize = 12;
/// Width of a bounding-box location vector.
pub const D_LOC: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Edge(#[from] EdgeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input: {0}")]
    Input(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("vocabulary io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed answer vocabulary; index 0 is always [`EOS_TOKEN`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.first().map(String::as_str) != Some(EOS_TOKEN) {
            return Err(ModelError::Vocab(format!("line 0 must be {EOS_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains('\n') {
                return Err(ModelError::Vocab(format!("bad token at line {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of `<eos>` followed by `words`.
    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Result<Self, ModelError> {
        let tokens = std::iter::once(EOS_TOKEN.to_string()).chain(words.into_iter().map(Into::into)).collect();
        Self::new(tokens)
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Candidates of one instance: the fixed vocabulary followed by one entry per
/// OCR position.
#[derive(Debug, Clone, Copy)]
pub struct AnswerSpace<'a> {
    pub vocab: &'a Vocab,
    pub ocr: &'a [String],
}

impl<'a> AnswerSpace<'a> {
    pub fn new(vocab: &'a Vocab, ocr: &'a [String]) -> Self {
        Self { vocab, ocr }
    }

    pub fn len(&self) -> usize {
        self.vocab.len() + self.ocr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source(&self, candidate: usize) -> TokenSource {
        if candidate < self.vocab.len() {
            TokenSource::Vocab(candidate)
        } else {
            TokenSource::OcrCopy(candidate - self.vocab.len())
        }
    }

    pub fn candidate(&self, source: TokenSource) -> usize {
        match source {
            TokenSource::Vocab(v) => v,
            TokenSource::OcrCopy(p) => self.vocab.len() + p,
        }
    }

    pub fn text(&self, source: TokenSource) -> &'a str {
        match source {
            TokenSource::Vocab(v) => self.vocab.token(v),
            TokenSource::OcrCopy(p) => &self.ocr[p],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSource {
    Vocab(usize),
    OcrCopy(usize),
}

impl fmt::Display for TokenSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Vocab(v) => write!(f, "vocab({v})"),
            Self::OcrCopy(p) => write!(f, "ocr({p})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<String>,
    pub sources: Vec<TokenSource>,
    /// Candidate logits at every executed step, including the final
    /// end-of-answer step when one was taken.
    pub scores: Vec<Vec<f64>>,
}

impl DecodeResult {
    pub fn answer(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Greedy argmax decoding; `step_scores` receives the tokens chosen so far
/// and returns the candidate scores for the next step. Ties go to the lowest
/// candidate index. Stops at [`EOS`] or after `max_steps` tokens.
pub fn greedy_decode<E>(
    space: AnswerSpace<'_>,
    max_steps: usize,
    mut step_scores: impl FnMut(&[TokenSource]) -> Result<Vec<f64>, E>,
) -> Result<DecodeResult, E>
where
    E: From<ModelError>,
{
    if space.is_empty() {
        return Err(ModelError::Config("empty answer space".into()).into());
    }
    let mut out = DecodeResult {
        tokens: Vec::new(),
        sources: Vec::new(),
        scores: Vec::new(),
    };
    while out.tokens.len() < max_steps {
        let scores = step_scores(&out.sources)?;
        if scores.len() != space.len() {
            return Err(ModelError::Input(format!("{} scores for {} candidates", scores.len(), space.len())).into());
        }
        let best = argmax(&scores);
        out.scores.push(scores);
        if best == EOS {
            break;
        }
        let source = space.source(best);
        out.tokens.push(space.text(source).to_string());
        out.sources.push(source);
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Synthetic feature widths; location vectors are always [`D_LOC`] wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_fr: usize,
    pub d_ft: usize,
    pub d_p: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            d_fr: 64,
            d_ft: 32,
            d_p: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub dims: FeatureDims,
    pub question_vocab: usize,
    pub max_question_len: usize,
    pub answer_vocab: usize,
    pub max_decode_steps: usize,
    pub feature_mask: FeatureMask,
    pub translation_norm: TranslationNorm,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.attention.validate()?;
        if self.attention.fusion_location.is_fused() && self.attention.d_e != self.feature_mask.d_e() {
            return Err(ModelError::Config(format!(
                "attention d_e {} does not match feature mask width {}",
                self.attention.d_e,
                self.feature_mask.d_e()
            )));
        }
        if self.answer_vocab == 0 {
            return Err(ModelError::Config("empty answer space".into()));
        }
        if self.max_decode_steps == 0 || self.max_decode_steps > MAX_DECODE_STEPS {
            return Err(ModelError::Config(format!("max_decode_steps must be in 1..={MAX_DECODE_STEPS}")));
        }
        if self.question_vocab == 0 || self.max_question_len == 0 {
            return Err(ModelError::Config("question vocabulary and length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeatures {
    pub x_fr: Vec<f64>,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrFeatures {
    pub text: String,
    pub x_ft: Vec<f64>,
    pub x_fr: Vec<f64>,
    pub x_p: Vec<f64>,
    pub bbox: BoundingBox,
}

/// Model-ready features of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub question: Vec<usize>,
    pub objects: Vec<ObjectFeatures>,
    pub ocr: Vec<OcrFeatures>,
}

impl ModelInput {
    pub fn ocr_texts(&self) -> Vec<String> {
        self.ocr.iter().map(|o| o.text.clone()).collect()
    }

    /// Edge-feature inputs for this instance with `n_dec` decoder slots.
    pub fn edge_inputs(&self, n_dec: usize) -> Vec<EdgeInput<'_>> {
        let mut v = Vec::with_capacity(self.question.len() + self.objects.len() + self.ocr.len() + n_dec);
        v.extend(self.question.iter().map(|_| EdgeInput::question()));
        v.extend(self.objects.iter().map(|o| EdgeInput::image(Modality::VisualObject, o.bbox, &o.x_fr)));
        v.extend(self.ocr.iter().map(|o| EdgeInput::image(Modality::OcrToken, o.bbox, &o.x_fr)));
        v.extend((0..n_dec).map(|_| EdgeInput::answer_slot()));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormWeights {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormWeights {
    fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), &[d], Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), &[d], Init::Zeros, rng),
        }
    }

    fn apply(&self, tape: &mut Tape<'_>, bound: &BoundParams, x: NodeId) -> Result<NodeId, TensorError> {
        tape.layer_norm(x, bound[self.gain], bound[self.bias], LAYER_NORM_EPS)
    }
}

/// `LN(x_fr W_1) + LN(x_b W_2)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualEmbedding {
    pub w1: ParamId,
    pub ln1: LayerNormWeights,
    pub w2: ParamId,
    pub ln2: LayerNormWeights,
}

/// `LN(x_ft W_3 + x_fr W_4 + x_p W_5) + LN(x_b W_6)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OcrEmbedding {
    pub w3: ParamId,
    pub w4: ParamId,
    pub w5: ParamId,
    pub ln_a: LayerNormWeights,
    pub w6: ParamId,
    pub ln_b: LayerNormWeights,
}

impl VisualEmbedding {
    pub fn init(store: &mut ParamStore, d_fr: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: store.add("obj.w1", &[d_fr, d], Init::XavierUniform, rng),
            ln1: LayerNormWeights::init(store, "obj.ln1", d, rng),
            w2: store.add("obj.w2", &[D_LOC, d], Init::XavierUniform, rng),
            ln2: LayerNormWeights::init(store, "obj.ln2", d, rng),
        }
    }
}

impl OcrEmbedding {
    pub fn init(store: &mut ParamStore, dims: FeatureDims, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w3: store.add("ocr.w3", &[dims.d_ft, d], Init::XavierUniform, rng),
            w4: store.add("ocr.w4", &[dims.d_fr, d], Init::XavierUniform, rng),
            w5: store.add("ocr.w5", &[dims.d_p, d], Init::XavierUniform, rng),
            ln_a: LayerNormWeights::init(store, "ocr.ln_a", d, rng),
            w6: store.add("ocr.w6", &[D_LOC, d], Init::XavierUniform, rng),
            ln_b: LayerNormWeights::init(store, "ocr.ln_b", d, rng),
        }
    }
}

/// Rows of `x_fr` and `x_b` are objects.
pub fn embed_visual(tape: &mut Tape<'_>, bound: &BoundParams, w: &VisualEmbedding, x_fr: NodeId, x_b: NodeId) -> Result<NodeId, TensorError> {
    let a = tape.matmul(x_fr, bound[w.w1])?;
    let a = w.ln1.apply(tape, bound, a)?;
    let b = tape.matmul(x_b, bound[w.w2])?;
    let b = w.ln2.apply(tape, bound, b)?;
    tape.add(a, b)
}

/// Rows of every input are OCR tokens.
pub fn embed_ocr(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    w: &OcrEmbedding,
    x_ft: NodeId,
    x_fr: NodeId,
    x_p: NodeId,
    x_b: NodeId,
) -> Result<NodeId, TensorError> {
    let ft = tape.matmul(x_ft, bound[w.w3])?;
    let fr = tape.matmul(x_fr, bound[w.w4])?;
    let p = tape.matmul(x_p, bound[w.w5])?;
    let inner = tape.add(ft, fr)?;
    let inner = tape.add(inner, p)?;
    let a = w.ln_a.apply(tape, bound, inner)?;
    let b = tape.matmul(x_b, bound[w.w6])?;
    let b = w.ln_b.apply(tape, bound, b)?;
    tape.add(a, b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelWeights {
    pub visual: VisualEmbedding,
    pub ocr: OcrEmbedding,
    pub question_embed: ParamId,
    pub question_pos: ParamId,
    pub question_ln: LayerNormWeights,
    pub answer_embed: ParamId,
    pub decoder_start: ParamId,
    pub decoder_pos: ParamId,
    pub decoder_ln: LayerNormWeights,
    pub encoder: Vec<LayerWeights>,
    pub vocab_w: ParamId,
    pub vocab_b: ParamId,
    pub pointer_q_w: ParamId,
    pub pointer_q_b: ParamId,
    pub pointer_k_w: ParamId,
    pub pointer_k_b: ParamId,
    pub pointer_bias: ParamId,
}

/// Per-row sizes of the encoder sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub n_question: usize,
    pub n_objects: usize,
    pub n_ocr: usize,
    pub n_decoder: usize,
}

impl SequenceLayout {
    pub fn encoder_len(&self) -> usize {
        self.n_question + self.n_objects + self.n_ocr
    }

    pub fn len(&self) -> usize {
        self.encoder_len() + self.n_decoder
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ocr_start(&self) -> usize {
        self.n_question + self.n_objects
    }

    /// Encoder rows see only encoder rows; decoder slot `t` additionally sees
    /// slots `0..=t`.
    pub fn causal_mask(&self) -> AttentionMask {
        let enc = self.encoder_len();
        AttentionMask::from_fn(self.len(), |i, j| j < enc || (i >= enc && j <= i))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.attention.d_in;
        let visual = VisualEmbedding::init(&mut store, config.dims.d_fr, d, &mut rng);
        let ocr = OcrEmbedding::init(&mut store, config.dims, d, &mut rng);
        let question_embed = store.add("question.embed", &[config.question_vocab, d], Init::Normal(0.5), &mut rng);
        let question_pos = store.add("question.pos", &[config.max_question_len, d], Init::Normal(0.1), &mut rng);
        let question_ln = LayerNormWeights::init(&mut store, "question.ln", d, &mut rng);
        let answer_embed = store.add("answer.embed", &[config.answer_vocab, d], Init::Normal(0.5), &mut rng);
        let decoder_start = store.add("decoder.start", &[1, d], Init::Normal(0.5), &mut rng);
        let decoder_pos = store.add("decoder.pos", &[config.max_decode_steps, d], Init::Normal(0.1), &mut rng);
        let decoder_ln = LayerNormWeights::init(&mut store, "decoder.ln", d, &mut rng);
        let encoder = init_stack(&mut store, &config.attention, "encoder", &mut rng)?;
        let vocab_w = store.add("head.vocab.w", &[d, config.answer_vocab], Init::XavierUniform, &mut rng);
        let vocab_b = store.add("head.vocab.b", &[config.answer_vocab], Init::Zeros, &mut rng);
        let pointer_q_w = store.add("head.pointer.q.w", &[d, d], Init::XavierUniform, &mut rng);
        let pointer_q_b = store.add("head.pointer.q.b", &[d], Init::Zeros, &mut rng);
        let pointer_k_w = store.add("head.pointer.k.w", &[d, d], Init::XavierUniform, &mut rng);
        let pointer_k_b = store.add("head.pointer.k.b", &[d], Init::Zeros, &mut rng);
        let pointer_bias = store.add("head.pointer.bias", &[1], Init::Zeros, &mut rng);
        let weights = ModelWeights {
            visual,
            ocr,
            question_embed,
            question_pos,
            question_ln,
            answer_embed,
            decoder_start,
            decoder_pos,
            decoder_ln,
            encoder,
            vocab_w,
            vocab_b,
            pointer_q_w,
            pointer_q_b,
            pointer_k_w,
            pointer_k_b,
            pointer_bias,
        };
        Ok(Self { config, store, weights })
    }

    /// Loads weights saved by [`ParamStore::save`] into a model built from
    /// `config`.
    pub fn from_checkpoint(config: ModelConfig, path: &Path) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        let saved = ParamStore::load(path)?;
        model.store.assign_from(&saved)?;
        Ok(model)
    }

    fn check_input(&self, input: &ModelInput) -> Result<(), ModelError> {
        let c = &self.config;
        if input.question.len() > c.max_question_len {
            return Err(ModelError::Input(format!("question has {} tokens, max {}", input.question.len(), c.max_question_len)));
        }
        if let Some(&t) = input.question.iter().find(|&&t| t >= c.question_vocab) {
            return Err(ModelError::Input(format!("question token {t} outside vocabulary of {}", c.question_vocab)));
        }
        let dims = c.dims;
        for (i, o) in input.objects.iter().enumerate() {
            if o.x_fr.len() != dims.d_fr {
                return Err(ModelError::Input(format!("object {i}: x_fr width {} != {}", o.x_fr.len(), dims.d_fr)));
            }
        }
        for (i, o) in input.ocr.iter().enumerate() {
            if o.x_ft.len() != dims.d_ft || o.x_fr.len() != dims.d_fr || o.x_p.len() != dims.d_p {
                return Err(ModelError::Input(format!("ocr {i}: feature widths do not match config")));
            }
        }
        Ok(())
    }

    /// Edge tensor for `n_dec` decoder slots, or `None` for an unfused model.
    pub fn edge_tensor(&self, input: &ModelInput, n_dec: usize) -> Result<Option<EdgeTensor>, ModelError> {
        if !self.config.attention.fusion_location.is_fused() {
            return Ok(None);
        }
        let inputs = input.edge_inputs(n_dec);
        Ok(Some(build_edge_tensor_with(&inputs, self.config.feature_mask, self.config.translation_norm)?))
    }

    /// Candidate logits `[n_dec, vocab + n_ocr]` with one decoder slot per
    /// entry of `prev` plus the start slot. `edges` must come from
    /// [`Model::edge_tensor`] with the same slot count.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        bound: &BoundParams,
        input: &ModelInput,
        edges: Option<&'p EdgeTensor>,
        prev: &[TokenSource],
    ) -> Result<NodeId, ModelError> {
        self.check_input(input)?;
        let c = &self.config;
        let d = c.attention.d_in;
        let w = &self.weights;
        let n_dec = prev.len() + 1;
        if n_dec > c.max_decode_steps {
            return Err(ModelError::Input(format!("{n_dec} decoder slots exceed {}", c.max_decode_steps)));
        }
        let layout = SequenceLayout {
            n_question: input.question.len(),
            n_objects: input.objects.len(),
            n_ocr: input.ocr.len(),
            n_decoder: n_dec,
        };

        let mut parts = Vec::with_capacity(4);
        if layout.n_question > 0 {
            let tok = tape.gather_rows(bound[w.question_embed], &input.question)?;
            let idx: Vec<usize> = (0..layout.n_question).collect();
            let pos = tape.gather_rows(bound[w.question_pos], &idx)?;
            let q = tape.add(tok, pos)?;
            parts.push(w.question_ln.apply(tape, bound, q)?);
        }
        if layout.n_objects > 0 {
            let x_fr = tape.constant(&[layout.n_objects, c.dims.d_fr], input.objects.iter().flat_map(|o| o.x_fr.clone()).collect())?;
            let x_b = tape.constant(&[layout.n_objects, D_LOC], input.objects.iter().flat_map(|o| o.bbox.to_array()).collect())?;
            parts.push(embed_visual(tape, bound, &w.visual, x_fr, x_b)?);
        }
        let ocr_embed = if layout.n_ocr > 0 {
            let n = layout.n_ocr;
            let cat = |f: &dyn Fn(&OcrFeatures) -> Vec<f64>| input.ocr.iter().flat_map(f).collect::<Vec<f64>>();
            let x_ft = tape.constant(&[n, c.dims.d_ft], cat(&|o| o.x_ft.clone()))?;
            let x_fr = tape.constant(&[n, c.dims.d_fr], cat(&|o| o.x_fr.clone()))?;
            let x_p = tape.constant(&[n, c.dims.d_p], cat(&|o| o.x_p.clone()))?;
            let x_b = tape.constant(&[n, D_LOC], cat(&|o| o.bbox.to_array().to_vec()))?;
            let e = embed_ocr(tape, bound, &w.ocr, x_ft, x_fr, x_p, x_b)?;
            parts.push(e);
            Some(e)
        } else {
            None
        };

        let mut dec_rows = Vec::with_capacity(n_dec);
        dec_rows.push(bound[w.decoder_start]);
        for &src in prev {
            let row = match src {
                TokenSource::Vocab(v) => {
                    if v >= c.answer_vocab {
                        return Err(ModelError::Input(format!("vocab token {v} outside {}", c.answer_vocab)));
                    }
                    tape.gather_rows(bound[w.answer_embed], &[v])?
                }
                TokenSource::OcrCopy(p) => {
                    let e = ocr_embed.filter(|_| p < layout.n_ocr).ok_or_else(|| ModelError::Input(format!("ocr copy {p} out of range")))?;
                    tape.gather_rows(e, &[p])?
                }
            };
            dec_rows.push(row);
        }
        let dec_tok = tape.concat_rows(&dec_rows)?;
        let idx: Vec<usize> = (0..n_dec).collect();
        let dec_pos = tape.gather_rows(bound[w.decoder_pos], &idx)?;
        let dec = tape.add(dec_tok, dec_pos)?;
        parts.push(w.decoder_ln.apply(tape, bound, dec)?);

        let x = tape.concat_rows(&parts)?;
        if let Some(e) = edges {
            if e.n_obj() != layout.len() {
                return Err(ModelError::Input(format!("edge tensor covers {} inputs, sequence has {}", e.n_obj(), layout.len())));
            }
        }
        let mask = layout.causal_mask();
        let z = encode_stack(tape, x, edges, &w.encoder, bound, &c.attention, Some(&mask))?;

        let z_dec = tape.slice_rows(z, layout.encoder_len(), n_dec)?;
        let vocab = tape.matmul(z_dec, bound[w.vocab_w])?;
        let vocab = tape.add_bias(vocab, bound[w.vocab_b])?;
        if layout.n_ocr == 0 {
            return Ok(vocab);
        }
        let z_ocr = tape.slice_rows(z, layout.ocr_start(), layout.n_ocr)?;
        let pq = tape.matmul(z_dec, bound[w.pointer_q_w])?;
        let pq = tape.add_bias(pq, bound[w.pointer_q_b])?;
        let pk = tape.matmul(z_ocr, bound[w.pointer_k_w])?;
        let pk = tape.add_bias(pk, bound[w.pointer_k_b])?;
        let ptr = tape.matmul_t(pq, pk)?;
        let ptr = tape.scale(ptr, 1.0 / (d as f64).sqrt())?;
        let ptr = tape.add_scalar(ptr, bound[w.pointer_bias])?;
        Ok(tape.concat_last(vocab, ptr)?)
    }

    /// Logits of the last decoder slot given the tokens chosen so far.
    pub fn step_scores(&self, input: &ModelInput, prev: &[TokenSource]) -> Result<Vec<f64>, ModelError> {
        let edges = self.edge_tensor(input, prev.len() + 1)?;
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape)?;
        let scores = self.forward(&mut tape, &bound, input, edges.as_ref(), prev)?;
        let width = tape.shape(scores)[1];
        let v = tape.value(scores);
        Ok(v[v.len() - width..].to_vec())
    }

    pub fn decode(&self, input: &ModelInput, vocab: &Vocab) -> Result<DecodeResult, ModelError> {
        if vocab.len() != self.config.answer_vocab {
            return Err(ModelError::Config(format!("vocabulary has {} tokens, model expects {}", vocab.len(), self.config.answer_vocab)));
        }
        let texts = input.ocr_texts();
        let space = AnswerSpace::new(vocab, &texts);
        greedy_decode(space, self.config.max_decode_steps, |prev| self.step_scores(input, prev))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{FusionFn, FusionLocation};
    use crate::tensor::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn tiny_config(location: FusionLocation, fusion_fn: FusionFn) -> ModelConfig {
        let mut attention = AttentionConfig::new(8, 2, 2).with_fusion(location, fusion_fn);
        attention.ffn_width = 12;
        attention.d_e_prime = 3;
        ModelConfig {
            attention,
            dims: FeatureDims { d_fr: 5, d_ft: 4, d_p: 3 },
            question_vocab: 7,
            max_question_len: 4,
            answer_vocab: 4,
            max_decode_steps: MAX_DECODE_STEPS,
            feature_mask: FeatureMask::ALL,
            translation_norm: TranslationNorm::Image,
        }
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
        let (x, y) = (rng.gen_range(0.0..0.7), rng.gen_range(0.0..0.7));
        BoundingBox::new(x, y, x + rng.gen_range(0.05..0.3), y + rng.gen_range(0.05..0.3)).unwrap()
    }

    fn vec_of(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    pub(crate) fn random_input(cfg: &ModelConfig, seed: u64) -> ModelInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = cfg.dims;
        ModelInput {
            question: (0..3).map(|_| rng.gen_range(0..cfg.question_vocab)).collect(),
            objects: (0..2)
                .map(|_| ObjectFeatures {
                    x_fr: vec_of(dims.d_fr, &mut rng),
                    bbox: random_box(&mut rng),
                })
                .collect(),
            ocr: (0..3)
                .map(|i| OcrFeatures {
                    text: format!("w{i}"),
                    x_ft: vec_of(dims.d_ft, &mut rng),
                    x_fr: vec_of(dims.d_fr, &mut rng),
                    x_p: vec_of(dims.d_p, &mut rng),
                    bbox: random_box(&mut rng),
                })
                .collect(),
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::from_words(["yes", "no", "13"]).unwrap();
        assert_eq!(v.get(EOS_TOKEN), Some(EOS));
        assert_eq!(v.get("13"), Some(3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "<eos>\nyes\nno\n13\n");
        assert_eq!(Vocab::load(&path).unwrap(), v);
        assert!(Vocab::parse("yes\n<eos>\n").is_err());
        assert!(Vocab::from_words(["a", "a"]).is_err());
    }

    #[test]
    fn decode_stops_at_eos_immediately() {
        let v = Vocab::from_words(["a"]).unwrap();
        let ocr = vec!["x".to_string()];
        let r = greedy_decode::<ModelError>(AnswerSpace::new(&v, &ocr), 12, |_| Ok(vec![5.0, 1.0, 2.0])).unwrap();
        assert!(r.tokens.is_empty());
        assert_eq!(r.scores.len(), 1);
        assert_eq!(r.answer(), "");
    }

    #[test]
    fn hand_set_scores_copy_ocr_twice() {
        let v = Vocab::from_words(["a", "b"]).unwrap();
        let ocr: Vec<String> = ["p0", "p1", "p2", "p3"].map(String::from).to_vec();
        // Candidates: 3 vocab entries then ocr positions 0..4; ocr(2) is index 5.
        let table = [
            vec![0.1, 0.2, 0.0, 0.3, 0.1, 0.9, 0.4],
            vec![0.5, 0.2, 0.0, 0.3, 0.1, 0.8, 0.4],
            vec![0.9, 0.2, 0.0, 0.3, 0.1, 0.8, 0.4],
        ];
        let r = greedy_decode::<ModelError>(AnswerSpace::new(&v, &ocr), 12, |prev| Ok(table[prev.len()].clone())).unwrap();
        assert_eq!(r.sources, vec![TokenSource::OcrCopy(2), TokenSource::OcrCopy(2)]);
        assert_eq!(r.tokens, vec!["p2", "p2"]);
        assert_eq!(r.scores.len(), 3);
    }

    #[test]
    fn decode_caps_at_max_steps() {
        let v = Vocab::from_words(["a"]).unwrap();
        let r = greedy_decode::<ModelError>(AnswerSpace::new(&v, &[]), 12, |_| Ok(vec![0.0, 1.0])).unwrap();
        assert_eq!(r.tokens.len(), 12);
        assert_eq!(r.scores.len(), 12);
    }

    #[test]
    fn random_models_decode_within_cap_and_copy_faithfully() {
        for (seed, loc) in [FusionLocation::None, FusionLocation::Keys, FusionLocation::KeysAndValues].into_iter().enumerate() {
            let cfg = tiny_config(loc, FusionFn::Add);
            let model = Model::new(cfg.clone(), seed as u64).unwrap();
            let vocab = Vocab::from_words(["a", "b", "c"]).unwrap();
            for s in 0..4 {
                let input = random_input(&cfg, 10 * seed as u64 + s);
                let r = model.decode(&input, &vocab).unwrap();
                assert!(r.tokens.len() <= MAX_DECODE_STEPS);
                for (tok, src) in r.tokens.iter().zip(&r.sources) {
                    match *src {
                        TokenSource::OcrCopy(p) => assert_eq!(tok, &input.ocr[p].text),
                        TokenSource::Vocab(v) => assert_eq!(tok, vocab.token(v)),
                    }
                }
            }
        }
    }

    #[test]
    fn zero_projections_give_layer_norm_biases() {
        let cfg = tiny_config(FusionLocation::None, FusionFn::Add);
        let mut model = Model::new(cfg, 0).unwrap();
        let w = model.weights.visual.clone();
        for id in [w.w1, w.w2] {
            model.store.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
        model.store.get_mut(w.ln1.bias).values = (0..8).map(|i| i as f64).collect();
        model.store.get_mut(w.ln2.bias).values = vec![0.5; 8];
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape).unwrap();
        let x_fr = tape.constant(&[2, 5], vec![0.7; 10]).unwrap();
        let x_b = tape.constant(&[2, 4], vec![0.2, 0.2, 0.6, 0.9, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let out = embed_visual(&mut tape, &bound, &w, x_fr, x_b).unwrap();
        assert_eq!(tape.shape(out), &[2, 8]);
        let want: Vec<f64> = (0..8).map(|i| i as f64 + 0.5).collect();
        assert_eq!(&tape.value(out)[..8], &want[..]);
        assert_eq!(&tape.value(out)[8..], &want[..]);
    }

    #[test]
    fn ocr_embedding_zero_features_and_swap_symmetry() {
        let mut cfg = tiny_config(FusionLocation::None, FusionFn::Add);
        cfg.dims.d_p = cfg.dims.d_ft;
        let model = Model::new(cfg.clone(), 1).unwrap();
        let w = model.weights.ocr.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d_ft, d_fr) = (cfg.dims.d_ft, cfg.dims.d_fr);
        let ft = vec_of(2 * d_ft, &mut rng);
        let fr = vec_of(2 * d_fr, &mut rng);
        let p = vec_of(2 * d_ft, &mut rng);
        let b = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.5, 0.9, 0.7];

        let run = |store: &ParamStore, ft: &[f64], fr: &[f64], p: &[f64]| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let nft = tape.constant(&[2, d_ft], ft.to_vec()).unwrap();
            let nfr = tape.constant(&[2, d_fr], fr.to_vec()).unwrap();
            let np = tape.constant(&[2, d_ft], p.to_vec()).unwrap();
            let nb = tape.constant(&[2, 4], b.clone()).unwrap();
            let out = embed_ocr(&mut tape, &bound, &w, nft, nfr, np, nb).unwrap();
            // LN(W_6 x_b) alone for comparison.
            let lb = tape.matmul(nb, bound[w.w6]).unwrap();
            let lb = w.ln_b.apply(&mut tape, &bound, lb).unwrap();
            let zero = tape.constant(&[2, 8], vec![0.0; 16]).unwrap();
            let l0 = w.ln_a.apply(&mut tape, &bound, zero).unwrap();
            let want = tape.add(l0, lb).unwrap();
            (tape.value(out).to_vec(), tape.value(want).to_vec())
        };
        let zeros_ft = vec![0.0; 2 * d_ft];
        let zeros_fr = vec![0.0; 2 * d_fr];
        let (out, want) = run(&model.store, &zeros_ft, &zeros_fr, &zeros_ft);
        assert_eq!(out, want);

        let (base, _) = run(&model.store, &ft, &fr, &p);
        let mut swapped = model.store.clone();
        let w3 = swapped.get(w.w3).values.clone();
        let w5 = swapped.get(w.w5).values.clone();
        swapped.get_mut(w.w3).values = w5;
        swapped.get_mut(w.w5).values = w3;
        let (swap, _) = run(&swapped, &p, &fr, &ft);
        let diff = base.iter().zip(&swap).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    fn embedding_loss(params: &[Vec<f64>], store: &ParamStore, model: &Model, grads: bool) -> (f64, Vec<Vec<f64>>) {
        let mut local = store.clone();
        for (p, v) in local.iter_mut().zip(params) {
            p.values.clone_from(v);
        }
        let mut tape = Tape::new();
        let bound = local.bind(&mut tape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = model.config.dims;
        let x_fr = tape.constant(&[2, d.d_fr], vec_of(2 * d.d_fr, &mut rng)).unwrap();
        let x_b = tape.constant(&[2, 4], vec![0.1, 0.2, 0.4, 0.3, 0.5, 0.5, 0.9, 0.8]).unwrap();
        let x_ft = tape.constant(&[2, d.d_ft], vec_of(2 * d.d_ft, &mut rng)).unwrap();
        let x_p = tape.constant(&[2, d.d_p], vec_of(2 * d.d_p, &mut rng)).unwrap();
        let v = embed_visual(&mut tape, &bound, &model.weights.visual, x_fr, x_b).unwrap();
        let o = embed_ocr(&mut tape, &bound, &model.weights.ocr, x_ft, x_fr, x_p, x_b).unwrap();
        let mix = tape.constant(&[2, 8], vec_of(16, &mut rng)).unwrap();
        let v = tape.mul(v, mix).unwrap();
        let o = tape.mul(o, o).unwrap();
        let s = tape.add(v, o).unwrap();
        let loss = tape.sum(s).unwrap();
        let value = tape.value(loss)[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let mut g = local.zeros_like();
        g.accumulate(&tape, &bound, 1.0);
        (value, g.0)
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let model = Model::new(tiny_config(FusionLocation::None, FusionFn::Add), 4).unwrap();
        let mut store = model.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in store.iter_mut() {
            if p.name.ends_with(".gain") || p.name.ends_with(".bias") {
                p.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        let keep: Vec<usize> = store.iter().filter(|(_, p)| p.name.starts_with("obj.") || p.name.starts_with("ocr.")).map(|(id, _)| id.index()).collect();
        let all: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.values.clone()).collect();
        let expand = |sub: &[Vec<f64>]| {
            let mut full = all.clone();
            for (k, &i) in keep.iter().enumerate() {
                full[i].clone_from(&sub[k]);
            }
            full
        };
        let sub: Vec<Vec<f64>> = keep.iter().map(|&i| all[i].clone()).collect();
        let report = check_gradients(
            &sub,
            |p| embedding_loss(&expand(p), &store, &model, false).0,
            |p| {
                let g = embedding_loss(&expand(p), &store, &model, true).1;
                keep.iter().map(|&i| g[i].clone()).collect()
            },
            1e-5,
        );
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn embeddings_are_deterministic() {
        let cfg = tiny_config(FusionLocation::Values, FusionFn::Add);
        let a = Model::new(cfg.clone(), 7).unwrap();
        let b = Model::new(cfg.clone(), 7).unwrap();
        assert_eq!(a.store, b.store);
        let input = random_input(&cfg, 3);
        let prev = [TokenSource::OcrCopy(1)];
        assert_eq!(a.step_scores(&input, &prev).unwrap(), b.step_scores(&input, &prev).unwrap());
    }

    #[test]
    fn unfused_model_builds_no_edges() {
        let cfg = tiny_config(FusionLocation::None, FusionFn::Add);
        let model = Model::new(cfg.clone(), 0).unwrap();
        let before = crate::edge::edge_tensors_allocated();
        let vocab = Vocab::from_words(["a", "b", "c"]).unwrap();
        model.decode(&random_input(&cfg, 1), &vocab).unwrap();
        assert_eq!(crate::edge::edge_tensors_allocated(), before);
    }

    #[test]
    fn config_and_input_errors() {
        let mut cfg = tiny_config(FusionLocation::Keys, FusionFn::Add);
        cfg.attention.d_e = 5;
        assert!(matches!(Model::new(cfg, 0), Err(ModelError::Config(_))));
        let mut cfg = tiny_config(FusionLocation::None, FusionFn::Add);
        cfg.answer_vocab = 0;
        assert!(matches!(Model::new(cfg, 0), Err(ModelError::Config(_))));
        let cfg = tiny_config(FusionLocation::None, FusionFn::Add);
        let model = Model::new(cfg.clone(), 0).unwrap();
        let mut input = random_input(&cfg, 0);
        input.question.push(99);
        assert!(matches!(model.step_scores(&input, &[]), Err(ModelError::Input(_))));
        let input = random_input(&cfg, 0);
        assert!(matches!(model.step_scores(&input, &[TokenSource::OcrCopy(9)]), Err(ModelError::Input(_))));
        let wrong = Vocab::from_words(["a"]).unwrap();
        assert!(matches!(model.decode(&input, &wrong), Err(ModelError::Config(_))));
    }

    #[test]
    fn checkpoint_reload_reproduces_scores() {
        let cfg = tiny_config(FusionLocation::KeysAndValues, FusionFn::Concat);
        let model = Model::new(cfg.clone(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.store.save(&path).unwrap();
        let back = Model::from_checkpoint(cfg.clone(), &path).unwrap();
        let input = random_input(&cfg, 2);
        assert_eq!(model.step_scores(&input, &[]).unwrap(), back.step_scores(&input, &[]).unwrap());
        let mut other = cfg.clone();
        other.attention.d_in = 12;
        other.attention.n_heads = 3;
        other.attention.ffn_width = 16;
        assert!(matches!(Model::from_checkpoint(other, &path), Err(ModelError::Checkpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn later_decoder_inputs_never_change_earlier_scores(seed in 0u64..500, cell in 0usize..7, t in 1usize..4) {
            let (loc, f) = match cell {
                0 => (FusionLocation::None, FusionFn::Add),
                c => (FusionLocation::FUSED[(c - 1) / 2], FusionFn::ALL[(c - 1) % 2]),
            };
            let cfg = tiny_config(loc, f);
            let model = Model::new(cfg.clone(), seed).unwrap();
            let input = random_input(&cfg, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let mut pick = || if rng.gen_bool(0.5) { TokenSource::Vocab(rng.gen_range(0..4)) } else { TokenSource::OcrCopy(rng.gen_range(0..3)) };
            let base: Vec<TokenSource> = (0..4).map(|_| pick()).collect();
            let mut changed = base.clone();
            changed[t - 1] = match base[t - 1] {
                TokenSource::Vocab(v) => TokenSource::Vocab((v + 1) % 4),
                TokenSource::OcrCopy(p) => TokenSource::OcrCopy((p + 1) % 3),
            };
            let run = |prev: &[TokenSource]| {
                let edges = model.edge_tensor(&input, prev.len() + 1).unwrap();
                let mut tape = Tape::new();
                let bound = model.store.bind(&mut tape).unwrap();
                let s = model.forward(&mut tape, &bound, &input, edges.as_ref(), prev).unwrap();
                tape.value(s).to_vec()
            };
            let a = run(&base);
            let b = run(&changed);
            let width = cfg.answer_vocab + input.ocr.len();
            // Decoder input `t-1` feeds slot `t`; slots `0..t` must not move.
            prop_assert_eq!(&a[..t * width], &b[..t * width]);
            prop_assert!(a[t * width..] != b[t * width..]);
        }
    }
}
