//! Model capabilities consumed by the pipeline, and deterministic stubs.
//!
//! Three capabilities are needed: mask-position scoring and fine-tuning
//! ([`MaskedLm`]), sentence embedding ([`SentenceEmbedder`]) and template
//! candidate generation ([`TemplateGenerator`]). The baseline additionally
//! needs a plain sequence classifier with a task head ([`SequenceClassifier`]).
//!
//! The stubs are small hashed bag-of-words models. They need no downloads,
//! are bit-reproducible and their training step is a real AdamW step on the
//! restricted two-word cross-entropy, so loops built on them behave like
//! the real thing at toy scale.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledCorpus};
use crate::error::{Error, Result};
use crate::prompting::{EmbeddingIndex, SequenceBudget, Template, TemplateOrigin, Verbalizer, MASK_SLOT};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayKind {
    Mlm,
    Embedder,
    Generator,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayDescriptor {
    pub kind: GatewayKind,
    pub model_name: String,
    pub max_sequence_length: usize,
}

impl GatewayDescriptor {
    pub fn new(kind: GatewayKind, model_name: impl Into<String>, max_sequence_length: usize) -> Result<Self> {
        if max_sequence_length < 8 {
            return Err(Error::InvalidArgument(format!(
                "max_sequence_length must be at least 8, got {max_sequence_length}"
            )));
        }
        Ok(Self {
            kind,
            model_name: model_name.into(),
            max_sequence_length,
        })
    }
}

/// Configuration block for one gateway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub kind: GatewayKind,
    pub model_name: String,
    #[serde(default = "default_max_len")]
    pub max_sequence_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Seed of the hash functions behind stub gateways.
    #[serde(default)]
    pub seed: u64,
}

fn default_max_len() -> usize {
    512
}

impl GatewayConfig {
    pub fn stub(model_name: impl Into<String>) -> Self {
        Self {
            kind: GatewayKind::Stub,
            model_name: model_name.into(),
            max_sequence_length: default_max_len(),
            device: None,
            cache_dir: None,
            seed: 0,
        }
    }

    pub fn descriptor(&self) -> Result<GatewayDescriptor> {
        GatewayDescriptor::new(self.kind, self.model_name.clone(), self.max_sequence_length)
    }
}

/// Vocabulary scores at the mask position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLogits {
    pub scores: Vec<f64>,
    pub mask_index: usize,
}

/// Vocabulary ids of the two label words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbalizerBinding {
    pub positive_id: usize,
    pub negative_id: usize,
}

impl VerbalizerBinding {
    pub fn id(&self, label: Label) -> usize {
        match label {
            Label::Positive => self.positive_id,
            Label::Negative => self.negative_id,
        }
    }
}

/// One training prompt and the vocabulary id expected at its mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub prompt: String,
    pub target_id: usize,
}

/// Flat parameter vector of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    /// lr 1e-5, betas (0.9, 0.999), eps 1e-8, no weight decay.
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// AdamW moment estimates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    /// One decoupled-weight-decay Adam update with the given learning rate.
    pub fn adamw_update(&mut self, params: &mut [f64], grads: &[f64], config: &AdamWConfig, lr: f64) {
        if self.first_moment.len() != params.len() {
            self.first_moment = vec![0.0; params.len()];
            self.second_moment = vec![0.0; params.len()];
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - config.beta1.powi(t);
        let bias2 = 1.0 - config.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = config.beta1 * self.first_moment[i] + (1.0 - config.beta1) * g;
            self.second_moment[i] = config.beta2 * self.second_moment[i] + (1.0 - config.beta2) * g * g;
            let m_hat = self.first_moment[i] / bias1;
            let v_hat = self.second_moment[i] / bias2;
            params[i] -= lr * config.weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Masked language model: scores the mask position and can be fine-tuned.
pub trait MaskedLm {
    fn descriptor(&self) -> &GatewayDescriptor;
    fn vocab_size(&self) -> usize;
    /// The single vocabulary id of `word`, or `None` if it needs several units.
    fn vocab_id(&self, word: &str) -> Option<usize>;
    fn encoded_len(&self, text: &str) -> usize;
    fn mask_logits(&self, prompt: &str) -> Result<MaskLogits>;
    /// One gradient step on the restricted cross-entropy over the two label
    /// ids. Returns the batch mean loss measured before the update.
    fn fine_tune_step(
        &mut self,
        batch: &[TrainExample],
        binding: VerbalizerBinding,
        state: &mut OptimizerState,
        optimizer: &AdamWConfig,
    ) -> Result<f64>;
    fn weights(&self) -> Weights;
    fn load_weights(&mut self, weights: &Weights) -> Result<()>;
}

impl<T: MaskedLm + ?Sized> SequenceBudget for T {
    fn max_sequence_length(&self) -> usize {
        self.descriptor().max_sequence_length
    }

    fn encoded_len(&self, text: &str) -> usize {
        MaskedLm::encoded_len(self, text)
    }
}

/// Resolves both label words to single vocabulary ids.
pub fn bind_verbalizer<M: MaskedLm + ?Sized>(gateway: &M, verbalizer: &Verbalizer) -> Result<VerbalizerBinding> {
    verbalizer.validate()?;
    let resolve = |w: &str| {
        gateway
            .vocab_id(w)
            .ok_or_else(|| Error::UnboundLabelWord(w.to_string()))
    };
    Ok(VerbalizerBinding {
        positive_id: resolve(&verbalizer.word_positive)?,
        negative_id: resolve(&verbalizer.word_negative)?,
    })
}

pub trait SentenceEmbedder {
    fn descriptor(&self) -> &GatewayDescriptor;
    fn dimension(&self) -> usize;
    /// L2-normalised embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Embeds every instance of every corpus.
pub fn embed_corpora<E: SentenceEmbedder + ?Sized>(embedder: &E, corpora: &[&LabeledCorpus]) -> Result<EmbeddingIndex> {
    let mut index = EmbeddingIndex::new();
    for corpus in corpora {
        for inst in corpus.iter() {
            if !index.contains(&inst.id) {
                index.insert(inst.id.clone(), embedder.embed(&inst.text)?);
            }
        }
    }
    Ok(index)
}

/// A raw generator output: `<P>{prefix}<S>{suffix}`, optionally ending in `<E>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDecode {
    pub text: String,
    pub score: f64,
}

pub const PREFIX_SENTINEL: &str = "<P>";
pub const SUFFIX_SENTINEL: &str = "<S>";
pub const END_SENTINEL: &str = "<E>";

pub trait TemplateGenerator {
    fn descriptor(&self) -> &GatewayDescriptor;
    /// Beam-decodes fillings for the two sentinel slots of `input`.
    fn decode(&self, input: &str, beam_width: usize) -> Result<Vec<RawDecode>>;
}

/// Turns a raw decode back into a template `[x]{prefix}[MASK]{suffix}`.
pub fn reconstruct_template(decode: &str) -> Option<String> {
    let body = decode.trim_start().strip_prefix(PREFIX_SENTINEL)?;
    let body = match body.find(END_SENTINEL) {
        Some(end) => &body[..end],
        None => body,
    };
    let mut parts = body.split(SUFFIX_SENTINEL);
    let prefix = parts.next()?;
    let suffix = parts.next()?;
    if parts.next().is_some() || prefix.contains(PREFIX_SENTINEL) {
        return None;
    }
    let suffix = suffix.trim_end();
    Some(format!("[x]{prefix}{MASK_SLOT}{suffix}"))
}

/// Generates candidates for every input and deduplicates them by pattern,
/// keeping the best score. The merged list is sorted by score and capped at
/// `beam_width`.
pub fn generate_template_candidates<G: TemplateGenerator + ?Sized>(
    generator: &G,
    filled_inputs: &[String],
    beam_width: usize,
) -> Result<Vec<(Template, f64)>> {
    if beam_width == 0 {
        return Err(Error::InvalidArgument("beam width must be positive".into()));
    }
    let mut best: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
    for input in filled_inputs {
        for decode in generator.decode(input, beam_width)? {
            if !decode.score.is_finite() {
                continue;
            }
            let Some(pattern) = reconstruct_template(&decode.text) else {
                continue;
            };
            if Template::new(pattern.as_str()).is_err() {
                continue;
            }
            best.entry(pattern)
                .and_modify(|s| *s = s.max(decode.score))
                .or_insert(decode.score);
        }
    }
    let mut ranked: Vec<(String, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(beam_width);
    if ranked.is_empty() {
        return Err(Error::NoCandidates);
    }
    ranked
        .into_iter()
        .map(|(pattern, score)| {
            Ok((
                Template::with_origin(pattern, TemplateOrigin::Generated { score })?,
                score,
            ))
        })
        .collect()
}

/// Sequence classifier with a task head for the standard fine-tuning baseline.
pub trait SequenceClassifier {
    fn descriptor(&self) -> &GatewayDescriptor;
    /// (positive, negative) logits.
    fn class_logits(&self, text: &str) -> Result<(f64, f64)>;
    /// One cross-entropy step. `dropout_seed` drives the dropout masks.
    fn train_step(
        &mut self,
        batch: &[(&str, Label)],
        state: &mut OptimizerState,
        optimizer: &AdamWConfig,
        lr: f64,
        dropout: f64,
        dropout_seed: u64,
    ) -> Result<f64>;
    fn weights(&self) -> Weights;
    fn load_weights(&mut self, weights: &Weights) -> Result<()>;
}

// ---------------------------------------------------------------------------
// stubs

/// 64-bit FNV-1a. Stable across platforms and releases.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn unit_interval(hash: u64) -> f64 {
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StubToken<'a> {
    Mask,
    Word(&'a str),
}

/// Whitespace tokenizer that always isolates `[MASK]`, so a glued suffix
/// such as `[MASK]ities` becomes a mask followed by the word `ities`.
pub fn stub_tokenize(text: &str) -> Vec<StubToken<'_>> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while let Some(at) = rest.find(MASK_SLOT) {
            if at > 0 {
                tokens.push(StubToken::Word(&rest[..at]));
            }
            tokens.push(StubToken::Mask);
            rest = &rest[at + MASK_SLOT.len()..];
        }
        if !rest.is_empty() {
            tokens.push(StubToken::Word(rest));
        }
    }
    tokens
}

fn normalise_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// L2-normalised hashed bag-of-words counts, plus a constant bias feature at
/// index `buckets`.
fn hashed_features(words: impl Iterator<Item = String>, buckets: usize) -> Vec<(usize, f64)> {
    let mut counts: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for w in words.filter(|w| !w.is_empty()) {
        let b = (fnv1a(&[b"feat", w.as_bytes()]) % buckets as u64) as usize;
        *counts.entry(b).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    let mut features: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(b, c)| (b, if norm > 0.0 { c / norm } else { 0.0 }))
        .collect();
    features.push((buckets, 1.0));
    features
}

pub const STUB_VOCABULARY: &[&str] = &[
    "<pad>",
    "<unk>",
    "causal",
    "random",
    "cause",
    "coincidence",
    "choice",
    "yes",
    "no",
    "great",
    "terrible",
    "true",
    "false",
    "related",
    "unrelated",
    "not",
    "the",
    "it",
    "was",
    "this",
    "is",
    "there",
    "were",
    "incident",
    "effect",
    "because",
    "so",
    "then",
    "and",
    "but",
    "a",
    "an",
];

pub const STUB_FEATURE_BUCKETS: usize = 256;

/// Hashed linear masked LM.
///
/// Scores are `noise_scale * h(prompt, v) + W[v] · φ(prompt)`, where `h` is a
/// frozen hash of the prompt text into `[-1, 1]` (the "pretrained" part) and
/// `φ` is the normalised hashed bag of words of the non-mask tokens. Only
/// `W` is trained; it starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StubMlm {
    descriptor: GatewayDescriptor,
    vocabulary: Vec<String>,
    buckets: usize,
    noise_scale: f64,
    seed: u64,
    weights: Vec<f64>,
}

impl StubMlm {
    pub fn new(seed: u64) -> Self {
        Self::with_descriptor(
            GatewayDescriptor::new(GatewayKind::Stub, "stub-mlm", 512).expect("valid"),
            seed,
        )
    }

    pub fn with_descriptor(descriptor: GatewayDescriptor, seed: u64) -> Self {
        let vocabulary: Vec<String> = STUB_VOCABULARY.iter().map(|s| s.to_string()).collect();
        let buckets = STUB_FEATURE_BUCKETS;
        Self {
            weights: vec![0.0; vocabulary.len() * (buckets + 1)],
            descriptor,
            vocabulary,
            buckets,
            noise_scale: 0.5,
            seed,
        }
    }

    pub fn with_noise_scale(mut self, noise_scale: f64) -> Self {
        self.noise_scale = noise_scale;
        self
    }

    fn row(&self, v: usize) -> &[f64] {
        let width = self.buckets + 1;
        &self.weights[v * width..(v + 1) * width]
    }

    fn features(&self, tokens: &[StubToken<'_>]) -> Vec<(usize, f64)> {
        hashed_features(
            tokens.iter().filter_map(|t| match t {
                StubToken::Word(w) => Some(normalise_word(w)),
                StubToken::Mask => None,
            }),
            self.buckets,
        )
    }

    fn frozen(&self, prompt: &str, v: usize) -> f64 {
        let h = fnv1a(&[
            b"mlm",
            &self.seed.to_le_bytes(),
            prompt.as_bytes(),
            &(v as u64).to_le_bytes(),
        ]);
        self.noise_scale * (2.0 * unit_interval(h) - 1.0)
    }

    fn score(&self, prompt: &str, features: &[(usize, f64)], v: usize) -> f64 {
        let row = self.row(v);
        self.frozen(prompt, v) + features.iter().map(|&(f, x)| row[f] * x).sum::<f64>()
    }

    fn checked_tokens<'a>(&self, prompt: &'a str) -> Result<(Vec<StubToken<'a>>, usize)> {
        let tokens = stub_tokenize(prompt);
        let masks: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == StubToken::Mask)
            .map(|(i, _)| i)
            .collect();
        if masks.len() != 1 {
            return Err(Error::MaskCount(masks.len()));
        }
        let length = tokens.len() + 2;
        if length > self.descriptor.max_sequence_length {
            return Err(Error::SequenceOverflow {
                length,
                max: self.descriptor.max_sequence_length,
            });
        }
        // +1 for the leading <s>
        Ok((tokens, masks[0] + 1))
    }
}

impl MaskedLm for StubMlm {
    fn descriptor(&self) -> &GatewayDescriptor {
        &self.descriptor
    }

    fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    fn vocab_id(&self, word: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == word)
    }

    fn encoded_len(&self, text: &str) -> usize {
        stub_tokenize(text).len() + 2
    }

    fn mask_logits(&self, prompt: &str) -> Result<MaskLogits> {
        let (tokens, mask_index) = self.checked_tokens(prompt)?;
        let features = self.features(&tokens);
        let scores = (0..self.vocabulary.len())
            .map(|v| self.score(prompt, &features, v))
            .collect();
        Ok(MaskLogits { scores, mask_index })
    }

    fn fine_tune_step(
        &mut self,
        batch: &[TrainExample],
        binding: VerbalizerBinding,
        state: &mut OptimizerState,
        optimizer: &AdamWConfig,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let width = self.buckets + 1;
        let mut grads = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for example in batch {
            if example.target_id != binding.positive_id && example.target_id != binding.negative_id {
                return Err(Error::InvalidArgument(format!(
                    "target id {} is not a label word id",
                    example.target_id
                )));
            }
            let (tokens, _) = self.checked_tokens(&example.prompt)?;
            let features = self.features(&tokens);
            let s_pos = self.score(&example.prompt, &features, binding.positive_id);
            let s_neg = self.score(&example.prompt, &features, binding.negative_id);
            let max = s_pos.max(s_neg);
            let log_z = max + ((s_pos - max).exp() + (s_neg - max).exp()).ln();
            let p_pos = (s_pos - log_z).exp();
            let p_neg = (s_neg - log_z).exp();
            let target_is_pos = example.target_id == binding.positive_id;
            loss += log_z - if target_is_pos { s_pos } else { s_neg };
            let g_pos = p_pos - if target_is_pos { 1.0 } else { 0.0 };
            let g_neg = p_neg - if target_is_pos { 0.0 } else { 1.0 };
            for &(f, x) in &features {
                grads[binding.positive_id * width + f] += g_pos * x;
                grads[binding.negative_id * width + f] += g_neg * x;
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at optimizer step {} (batch of {})",
                state.step,
                batch.len()
            )));
        }
        grads.iter_mut().for_each(|g| *g /= n);
        state.adamw_update(&mut self.weights, &grads, optimizer, optimizer.learning_rate);
        Ok(loss)
    }

    fn weights(&self) -> Weights {
        Weights {
            values: self.weights.clone(),
        }
    }

    fn load_weights(&mut self, weights: &Weights) -> Result<()> {
        if weights.values.len() != self.weights.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.weights.len(),
                weights.values.len()
            )));
        }
        self.weights.clone_from(&weights.values);
        Ok(())
    }
}

/// Masked LM backed by a fixed prompt → score-vector table.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupMlm {
    descriptor: GatewayDescriptor,
    vocabulary: Vec<String>,
    table: std::collections::HashMap<String, Vec<f64>>,
    fallback: Vec<f64>,
}

impl LookupMlm {
    pub fn new(vocabulary: &[&str]) -> Self {
        Self {
            descriptor: GatewayDescriptor::new(GatewayKind::Stub, "lookup-mlm", 512).expect("valid"),
            vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
            table: Default::default(),
            fallback: vec![0.0; vocabulary.len()],
        }
    }

    /// Sets the vector returned for `prompt`.
    pub fn insert(&mut self, prompt: impl Into<String>, scores: Vec<f64>) {
        assert_eq!(scores.len(), self.vocabulary.len(), "score vector length");
        self.table.insert(prompt.into(), scores);
    }

    pub fn with_fallback(mut self, scores: Vec<f64>) -> Self {
        assert_eq!(scores.len(), self.vocabulary.len(), "score vector length");
        self.fallback = scores;
        self
    }
}

impl MaskedLm for LookupMlm {
    fn descriptor(&self) -> &GatewayDescriptor {
        &self.descriptor
    }

    fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    fn vocab_id(&self, word: &str) -> Option<usize> {
        self.vocabulary.iter().position(|v| v == word)
    }

    fn encoded_len(&self, text: &str) -> usize {
        stub_tokenize(text).len() + 2
    }

    fn mask_logits(&self, prompt: &str) -> Result<MaskLogits> {
        let tokens = stub_tokenize(prompt);
        let masks: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == StubToken::Mask)
            .map(|(i, _)| i)
            .collect();
        if masks.len() != 1 {
            return Err(Error::MaskCount(masks.len()));
        }
        if tokens.len() + 2 > self.descriptor.max_sequence_length {
            return Err(Error::SequenceOverflow {
                length: tokens.len() + 2,
                max: self.descriptor.max_sequence_length,
            });
        }
        Ok(MaskLogits {
            scores: self.table.get(prompt).unwrap_or(&self.fallback).clone(),
            mask_index: masks[0] + 1,
        })
    }

    fn fine_tune_step(
        &mut self,
        batch: &[TrainExample],
        _binding: VerbalizerBinding,
        _state: &mut OptimizerState,
        _optimizer: &AdamWConfig,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Err(Error::GatewayUnavailable("lookup stub is frozen".into()))
    }

    fn weights(&self) -> Weights {
        Weights { values: Vec::new() }
    }

    fn load_weights(&mut self, weights: &Weights) -> Result<()> {
        if weights.values.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint("lookup stub has no parameters".into()))
        }
    }
}

/// Letter-frequency embedder: dimension 27 (a-z, then everything else).
#[derive(Debug, Clone, PartialEq)]
pub struct StubEmbedder {
    descriptor: GatewayDescriptor,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self {
            descriptor: GatewayDescriptor::new(GatewayKind::Stub, "stub-embedder", 512).expect("valid"),
        }
    }
}

impl SentenceEmbedder for StubEmbedder {
    fn descriptor(&self) -> &GatewayDescriptor {
        &self.descriptor
    }

    fn dimension(&self) -> usize {
        27
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::EmptyEmbeddingInput);
        }
        let mut v = vec![0.0; 27];
        for c in text.chars().filter(|c| !c.is_whitespace()) {
            let c = c.to_ascii_lowercase();
            let slot = if c.is_ascii_lowercase() {
                (c as u8 - b'a') as usize
            } else {
                26
            };
            v[slot] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// Generator returning the same canned decodes for every input.
#[derive(Debug, Clone, PartialEq)]
pub struct StubGenerator {
    descriptor: GatewayDescriptor,
    decodes: Vec<RawDecode>,
}

impl StubGenerator {
    pub fn new(decodes: Vec<RawDecode>) -> Self {
        Self {
            descriptor: GatewayDescriptor::new(GatewayKind::Stub, "stub-generator", 512).expect("valid"),
            decodes,
        }
    }

    /// Canned decodes from templates of the form `[x]{prefix}[MASK]{suffix}`,
    /// scored by list position (first is best).
    pub fn from_templates(templates: &[Template]) -> Result<Self> {
        let mut decodes = Vec::with_capacity(templates.len());
        for (i, t) in templates.iter().enumerate() {
            let rest = t.pattern().strip_prefix("[x]").ok_or_else(|| Error::InvalidTemplate {
                pattern: t.pattern().to_string(),
                reason: "generated templates must start with [x]".into(),
            })?;
            let (prefix, suffix) = rest.split_once(MASK_SLOT).expect("validated template");
            decodes.push(RawDecode {
                text: format!("{PREFIX_SENTINEL}{prefix}{SUFFIX_SENTINEL}{suffix}{END_SENTINEL}"),
                score: -(i as f64),
            });
        }
        Ok(Self::new(decodes))
    }
}

impl TemplateGenerator for StubGenerator {
    fn descriptor(&self) -> &GatewayDescriptor {
        &self.descriptor
    }

    fn decode(&self, _input: &str, beam_width: usize) -> Result<Vec<RawDecode>> {
        Ok(self.decodes.iter().take(beam_width).cloned().collect())
    }
}

/// Hashed bag-of-words logistic classifier with a fresh two-way head.
#[derive(Debug, Clone, PartialEq)]
pub struct StubSequenceClassifier {
    descriptor: GatewayDescriptor,
    buckets: usize,
    weights: Vec<f64>,
}

impl StubSequenceClassifier {
    pub fn new(seed: u64) -> Self {
        let buckets = STUB_FEATURE_BUCKETS;
        let mut rng = rng::stream(seed, &["stub-head-init"]);
        use rand::Rng;
        let weights = (0..2 * (buckets + 1)).map(|_| rng.gen_range(-0.01..0.01)).collect();
        Self {
            descriptor: GatewayDescriptor::new(GatewayKind::Stub, "stub-seqcls", 512).expect("valid"),
            buckets,
            weights,
        }
    }

    fn features(&self, text: &str) -> Vec<(usize, f64)> {
        hashed_features(text.split_whitespace().map(normalise_word), self.buckets)
    }

    fn logits_of(&self, features: &[(usize, f64)]) -> (f64, f64) {
        let width = self.buckets + 1;
        let dot = |c: usize| {
            features
                .iter()
                .map(|&(f, x)| self.weights[c * width + f] * x)
                .sum::<f64>()
        };
        (dot(0), dot(1))
    }
}

impl SequenceClassifier for StubSequenceClassifier {
    fn descriptor(&self) -> &GatewayDescriptor {
        &self.descriptor
    }

    fn class_logits(&self, text: &str) -> Result<(f64, f64)> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("empty text".into()));
        }
        Ok(self.logits_of(&self.features(text)))
    }

    fn train_step(
        &mut self,
        batch: &[(&str, Label)],
        state: &mut OptimizerState,
        optimizer: &AdamWConfig,
        lr: f64,
        dropout: f64,
        dropout_seed: u64,
    ) -> Result<f64> {
        use rand::Rng;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0, 1), got {dropout}"
            )));
        }
        let width = self.buckets + 1;
        let mut rng = rng::stream(dropout_seed, &["dropout"]);
        let mut grads = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for &(text, label) in batch {
            let mut features = self.features(text);
            if dropout > 0.0 {
                let keep = 1.0 - dropout;
                for (f, x) in features.iter_mut() {
                    if *f == self.buckets {
                        continue;
                    }
                    *x = if rng.gen::<f64>() < dropout { 0.0 } else { *x / keep };
                }
            }
            let (s_pos, s_neg) = self.logits_of(&features);
            let max = s_pos.max(s_neg);
            let log_z = max + ((s_pos - max).exp() + (s_neg - max).exp()).ln();
            let target_pos = label.is_positive();
            loss += log_z - if target_pos { s_pos } else { s_neg };
            let g = [
                (s_pos - log_z).exp() - if target_pos { 1.0 } else { 0.0 },
                (s_neg - log_z).exp() - if target_pos { 0.0 } else { 1.0 },
            ];
            for &(f, x) in &features {
                grads[f] += g[0] * x;
                grads[width + f] += g[1] * x;
            }
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("baseline loss {loss} at step {}", state.step)));
        }
        grads.iter_mut().for_each(|g| *g /= n);
        state.adamw_update(&mut self.weights, &grads, optimizer, lr);
        Ok(loss)
    }

    fn weights(&self) -> Weights {
        Weights {
            values: self.weights.clone(),
        }
    }

    fn load_weights(&mut self, weights: &Weights) -> Result<()> {
        if weights.values.len() != self.weights.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.weights.len(),
                weights.values.len()
            )));
        }
        self.weights.clone_from(&weights.values);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub dev_f1: f64,
    pub template: Template,
    pub verbalizer: Verbalizer,
    pub seed: u64,
    pub model_name: String,
}

/// Full weights and optimizer snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub weights: Weights,
    pub optimizer: OptimizerState,
}

const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.json";
const OPTIMIZER_FILE: &str = "optimizer.json";

impl Checkpoint {
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            fs::write(&path, body + "\n").map_err(|e| Error::io(path, e))
        };
        write(MANIFEST_FILE, serde_json::to_string_pretty(&self.manifest)?)?;
        write(WEIGHTS_FILE, serde_json::to_string(&self.weights)?)?;
        write(OPTIMIZER_FILE, serde_json::to_string(&self.optimizer)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let parse = |name: &str, body: String| -> Result<serde_json::Value> {
            serde_json::from_str(&body).map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(name).display())))
        };
        let manifest = serde_json::from_value(parse(MANIFEST_FILE, read(MANIFEST_FILE)?)?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let weights = serde_json::from_value(parse(WEIGHTS_FILE, read(WEIGHTS_FILE)?)?)
            .map_err(|e| Error::Checkpoint(format!("weights: {e}")))?;
        let optimizer = serde_json::from_value(parse(OPTIMIZER_FILE, read(OPTIMIZER_FILE)?)?)
            .map_err(|e| Error::Checkpoint(format!("optimizer: {e}")))?;
        Ok(Self {
            manifest,
            weights,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binding(m: &StubMlm) -> VerbalizerBinding {
        bind_verbalizer(m, &Verbalizer::default()).unwrap()
    }

    #[test]
    fn descriptor_requires_minimum_length() {
        assert!(GatewayDescriptor::new(GatewayKind::Stub, "x", 7).is_err());
        assert!(GatewayDescriptor::new(GatewayKind::Stub, "x", 8).is_ok());
    }

    #[test]
    fn tokenizer_isolates_glued_mask() {
        assert_eq!(
            stub_tokenize("no [MASK]ities here"),
            vec![
                StubToken::Word("no"),
                StubToken::Mask,
                StubToken::Word("ities"),
                StubToken::Word("here")
            ]
        );
        assert_eq!(stub_tokenize("a[MASK]"), vec![StubToken::Word("a"), StubToken::Mask]);
    }

    #[test]
    fn stub_mask_logits_contract() {
        let m = StubMlm::new(3);
        let a = m.mask_logits("Soldiers were hurt This is not [MASK]").unwrap();
        let b = m.mask_logits("Soldiers were hurt This is not [MASK]").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores.len(), m.vocab_size());
        assert_eq!(a.mask_index, 7);
        assert!(a.scores.iter().all(|s| s.is_finite()));
        assert!(matches!(m.mask_logits("no mask here"), Err(Error::MaskCount(0))));
        assert!(matches!(m.mask_logits("[MASK] and [MASK]"), Err(Error::MaskCount(2))));
        let long = format!("{} [MASK]", "w ".repeat(600));
        assert!(matches!(m.mask_logits(&long), Err(Error::SequenceOverflow { .. })));
        assert_ne!(
            StubMlm::new(4).mask_logits("x [MASK]").unwrap(),
            m.mask_logits("x [MASK]").unwrap()
        );
    }

    #[test]
    fn lookup_stub_returns_table_vector() {
        let mut m = LookupMlm::new(&["causal", "random", "other"]);
        m.insert("p [MASK]", vec![1.0, 2.0, 3.0]);
        assert_eq!(m.mask_logits("p [MASK]").unwrap().scores, vec![1.0, 2.0, 3.0]);
        assert_eq!(m.mask_logits("q [MASK]").unwrap().scores, vec![0.0, 0.0, 0.0]);
        assert!(m.mask_logits("p").is_err());
    }

    #[test]
    fn binding_rejects_multi_unit_words() {
        let m = StubMlm::new(0);
        let b = binding(&m);
        assert_eq!((b.positive_id, b.negative_id), (2, 3));
        let v = Verbalizer::new("causality", "random").unwrap();
        assert!(matches!(bind_verbalizer(&m, &v), Err(Error::UnboundLabelWord(w)) if w == "causality"));
    }

    #[test]
    fn stub_training_loss_non_increasing() {
        let mut m = StubMlm::new(1);
        let b = binding(&m);
        let batch = vec![
            TrainExample {
                prompt: "storm caused damage It was [MASK]".into(),
                target_id: b.positive_id,
            },
            TrainExample {
                prompt: "sun rose today It was [MASK]".into(),
                target_id: b.negative_id,
            },
        ];
        let mut state = OptimizerState::default();
        let config = AdamWConfig::default();
        let losses: Vec<f64> = (0..5)
            .map(|_| m.fine_tune_step(&batch, b, &mut state, &config).unwrap())
            .collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0], "{losses:?}");
        }
        assert!(losses[4] < losses[0]);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn stub_training_errors() {
        let mut m = StubMlm::new(1);
        let b = binding(&m);
        let mut state = OptimizerState::default();
        let config = AdamWConfig::default();
        assert!(matches!(
            m.fine_tune_step(&[], b, &mut state, &config),
            Err(Error::EmptyBatch)
        ));
        let unmasked = vec![TrainExample {
            prompt: "no mask".into(),
            target_id: b.positive_id,
        }];
        assert!(matches!(
            m.fine_tune_step(&unmasked, b, &mut state, &config),
            Err(Error::MaskCount(0))
        ));
    }

    #[test]
    fn weights_roundtrip() {
        let mut m = StubMlm::new(1);
        let b = binding(&m);
        let before = m.weights();
        let batch = vec![TrainExample {
            prompt: "a [MASK]".into(),
            target_id: b.positive_id,
        }];
        m.fine_tune_step(&batch, b, &mut OptimizerState::default(), &AdamWConfig::default())
            .unwrap();
        assert_ne!(m.weights(), before);
        m.load_weights(&before).unwrap();
        assert_eq!(m.weights(), before);
        assert!(m.load_weights(&Weights { values: vec![1.0] }).is_err());
    }

    #[test]
    fn stub_embedder_contract() {
        let e = StubEmbedder::default();
        let a = e.embed("a").unwrap();
        let mut e1 = vec![0.0; 27];
        e1[0] = 1.0;
        assert_eq!(a, e1);
        for t in ["Protests spread to 15 towns", "x", "ÜBER 42!"] {
            let v = e.embed(t).unwrap();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            assert!((crate::prompting::cosine(&v, &v) - 1.0).abs() < 1e-12);
        }
        assert!(matches!(e.embed("  "), Err(Error::EmptyEmbeddingInput)));
    }

    #[test]
    fn template_reconstruction() {
        assert_eq!(
            reconstruct_template("<P> This is not <S><E>").as_deref(),
            Some("[x] This is not [MASK]")
        );
        assert_eq!(
            reconstruct_template("<P> There were no <S>ities in this<E> trailing").as_deref(),
            Some("[x] There were no [MASK]ities in this")
        );
        assert_eq!(reconstruct_template("<P> no suffix marker"), None);
        assert_eq!(reconstruct_template("missing prefix <S>"), None);
        assert_eq!(reconstruct_template("<P> a <S> b <S> c"), None);
    }

    fn decode(text: &str, score: f64) -> RawDecode {
        RawDecode {
            text: text.into(),
            score,
        }
    }

    #[test]
    fn candidate_generation_dedup_and_cap() {
        let decodes: Vec<RawDecode> = (0..120)
            .map(|i| decode(&format!("<P> t{i} <S>"), -(i as f64)))
            .collect();
        let g = StubGenerator::new(decodes);
        // both inputs yield the same decodes, so the merge must deduplicate
        let inputs = vec!["a<P>causal<S>".to_string(), "b<P>random<S>".to_string()];
        let out = generate_template_candidates(&g, &inputs, 100).unwrap();
        assert_eq!(out.len(), 100);
        let patterns: std::collections::HashSet<&str> = out.iter().map(|(t, _)| t.pattern()).collect();
        assert_eq!(patterns.len(), 100);
        assert!(out.windows(2).all(|w| w[0].1 >= w[1].1));
        let one = generate_template_candidates(&g, &inputs, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].0.pattern(), "[x] t0 [MASK]");
        assert_eq!(one[0].0.generation_score(), Some(0.0));
    }

    #[test]
    fn candidate_generation_filters_invalid_decodes() {
        let g = StubGenerator::new(vec![
            decode("<P> broken", 10.0),
            decode("<P> t0 <S>", 1.0),
            decode("<P> has [MASK] <S>", 10.0),
            decode("<P> has [x] <S>", 10.0),
            decode("<P> t0 <S>", 3.0),
            decode("<P> nan <S>", f64::NAN),
        ]);
        let out = generate_template_candidates(&g, &["q".to_string()], 10).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0.pattern(), "[x] t0 [MASK]");
        assert_eq!(out[0].1, 3.0);
    }

    #[test]
    fn generation_with_no_valid_decode_fails() {
        let g = StubGenerator::new(vec![decode("<P> bad", 0.0)]);
        assert!(matches!(
            generate_template_candidates(&g, &["x".to_string()], 10),
            Err(Error::NoCandidates)
        ));
    }

    #[test]
    fn generator_from_templates_roundtrips() {
        let ts = crate::prompting::parse_templates("[x] This is not [MASK]\n[x] There were no [MASK]ities in this\n")
            .unwrap();
        let g = StubGenerator::from_templates(&ts).unwrap();
        let out = generate_template_candidates(&g, &["q".to_string()], 10).unwrap();
        let patterns: Vec<&str> = out.iter().map(|(t, _)| t.pattern()).collect();
        assert_eq!(
            patterns,
            vec!["[x] This is not [MASK]", "[x] There were no [MASK]ities in this"]
        );
        assert!(StubGenerator::from_templates(&[Template::new("It was [MASK]: [x]").unwrap()]).is_err());
    }

    #[test]
    fn checkpoint_dir_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                step: 300,
                dev_f1: 0.75,
                template: Template::new("[x] It was [MASK]").unwrap(),
                verbalizer: Verbalizer::default(),
                seed: 9,
                model_name: "stub-mlm".into(),
            },
            weights: StubMlm::new(0).weights(),
            optimizer: OptimizerState::default(),
        };
        ckpt.save_dir(dir.path().join("c")).unwrap();
        assert_eq!(Checkpoint::load_dir(dir.path().join("c")).unwrap(), ckpt);
        std::fs::write(dir.path().join("c").join("weights.json"), "not json").unwrap();
        assert!(matches!(
            Checkpoint::load_dir(dir.path().join("c")),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::load_dir(dir.path().join("missing")).is_err());
    }

    #[test]
    fn adamw_first_step_is_sign_sized() {
        let mut p = vec![1.0, -2.0];
        let mut s = OptimizerState::default();
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            ..AdamWConfig::default()
        };
        s.adamw_update(&mut p, &[0.5, -3.0], &cfg, cfg.learning_rate);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }
}
