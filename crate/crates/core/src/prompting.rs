//! Prompt templates and the demonstration-augmented prompts built from them.
//!
//! A template is a pattern with one input slot `[x]` and one mask slot
//! `[MASK]`. The augmented prompt for an input `x` is the input prompt
//! followed by one answered prompt per class:
//!
//! ```text
//! f(x) ␣ f[mask := word(+)](x+) ␣ f[mask := word(-)](x-)
//! ```
//!
//! Only the first segment keeps its mask.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledCorpus, LabeledInstance};
use crate::error::{Error, Result};
use crate::rng;

pub const INPUT_SLOT: &str = "[x]";
pub const MASK_SLOT: &str = "[MASK]";
/// Joins the three segments of an augmented prompt.
pub const SEGMENT_SEPARATOR: &str = " ";
pub const DEFAULT_DEMO_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateOrigin {
    Manual,
    Generated { score: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRepr", into = "TemplateRepr")]
pub struct Template {
    pattern: String,
    origin: TemplateOrigin,
    input_at: usize,
    mask_at: usize,
}

#[derive(Serialize, Deserialize)]
struct TemplateRepr {
    pattern: String,
    origin: TemplateOrigin,
}

impl TryFrom<TemplateRepr> for Template {
    type Error = Error;

    fn try_from(repr: TemplateRepr) -> Result<Self> {
        Template::with_origin(repr.pattern, repr.origin)
    }
}

impl From<Template> for TemplateRepr {
    fn from(t: Template) -> Self {
        TemplateRepr {
            pattern: t.pattern,
            origin: t.origin,
        }
    }
}

impl Template {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        Self::with_origin(pattern, TemplateOrigin::Manual)
    }

    pub fn with_origin(pattern: impl Into<String>, origin: TemplateOrigin) -> Result<Self> {
        let pattern = pattern.into();
        let invalid = |reason: &str| Error::InvalidTemplate {
            pattern: pattern.clone(),
            reason: reason.to_string(),
        };
        if pattern.trim().is_empty() {
            return Err(invalid("empty pattern"));
        }
        let inputs: Vec<usize> = pattern.match_indices(INPUT_SLOT).map(|(i, _)| i).collect();
        let masks: Vec<usize> = pattern.match_indices(MASK_SLOT).map(|(i, _)| i).collect();
        if inputs.len() != 1 {
            return Err(invalid(&format!("expected one {INPUT_SLOT}, found {}", inputs.len())));
        }
        if masks.len() != 1 {
            return Err(invalid(&format!("expected one {MASK_SLOT}, found {}", masks.len())));
        }
        Ok(Self {
            input_at: inputs[0],
            mask_at: masks[0],
            pattern,
            origin,
        })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn origin(&self) -> &TemplateOrigin {
        &self.origin
    }

    pub fn generation_score(&self) -> Option<f64> {
        match self.origin {
            TemplateOrigin::Generated { score } => Some(score),
            TemplateOrigin::Manual => None,
        }
    }

    /// Splices `input` and/or `mask_word` into the pattern by position.
    fn render(&self, input: Option<&str>, mask_word: Option<&str>) -> String {
        let mut slots = [
            (self.input_at, INPUT_SLOT.len(), input),
            (self.mask_at, MASK_SLOT.len(), mask_word),
        ];
        slots.sort_by_key(|s| s.0);
        let mut out =
            String::with_capacity(self.pattern.len() + input.map_or(0, str::len) + mask_word.map_or(0, str::len));
        let mut cursor = 0;
        for (at, len, replacement) in slots {
            out.push_str(&self.pattern[cursor..at]);
            match replacement {
                Some(r) => out.push_str(r),
                None => out.push_str(&self.pattern[at..at + len]),
            }
            cursor = at + len;
        }
        out.push_str(&self.pattern[cursor..]);
        out
    }
}

/// Replaces the input slot with `x.text`, leaving the mask slot in place.
pub fn instantiate(template: &Template, x: &LabeledInstance) -> String {
    template.render(Some(&x.text), None)
}

/// Replaces the mask slot with `word`, leaving the input slot in place.
pub fn fill_mask(template: &Template, word: &str) -> String {
    template.render(None, Some(word))
}

/// Reads one pattern per line; blank lines and `#` comments are skipped.
pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_templates(&body)
}

pub fn parse_templates(body: &str) -> Result<Vec<Template>> {
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Template::new)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub word_positive: String,
    pub word_negative: String,
}

impl Verbalizer {
    pub fn new(word_positive: impl Into<String>, word_negative: impl Into<String>) -> Result<Self> {
        let v = Self {
            word_positive: word_positive.into(),
            word_negative: word_negative.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_positive.trim().is_empty() || self.word_negative.trim().is_empty() {
            return Err(Error::InvalidVerbalizer("label words must be non-empty".into()));
        }
        if self.word_positive == self.word_negative {
            return Err(Error::InvalidVerbalizer(format!(
                "label words must differ, both are '{}'",
                self.word_positive
            )));
        }
        Ok(())
    }

    pub fn word(&self, label: Label) -> &str {
        match label {
            Label::Positive => &self.word_positive,
            Label::Negative => &self.word_negative,
        }
    }
}

impl Default for Verbalizer {
    /// `causal` / `random`.
    fn default() -> Self {
        Self {
            word_positive: "causal".into(),
            word_negative: "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub instance: LabeledInstance,
    pub rendered: String,
}

impl Demonstration {
    pub fn render(template: &Template, verbalizer: &Verbalizer, instance: &LabeledInstance) -> Result<Self> {
        let rendered = template.render(Some(&instance.text), Some(verbalizer.word(instance.label)));
        if rendered.contains(MASK_SLOT) {
            return Err(Error::InvalidArgument(format!(
                "demonstration '{}' still contains {MASK_SLOT} after filling",
                instance.id
            )));
        }
        Ok(Self {
            instance: instance.clone(),
            rendered,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub input_prompt: String,
    /// Rendered (positive, negative) demonstrations, after any truncation.
    pub demonstrations: (String, String),
    pub full_text: String,
    /// Byte offset of the surviving mask placeholder in `full_text`.
    pub mask_position_hint: usize,
}

/// Encoded-length limit of the model that will score a prompt.
pub trait SequenceBudget {
    fn max_sequence_length(&self) -> usize;
    fn encoded_len(&self, text: &str) -> usize;
}

fn truncate_words(text: &str, keep: usize) -> String {
    text.split_whitespace().take(keep).collect::<Vec<_>>().join(" ")
}

/// Builds the augmented prompt `f(x) ␣ f+(x+) ␣ f-(x-)`.
///
/// With a `budget`, demonstration texts are shortened word by word (negative
/// first, then positive) until the encoded prompt fits. The input prompt is
/// never shortened.
pub fn build_prompt_bundle(
    template: &Template,
    verbalizer: &Verbalizer,
    x: &LabeledInstance,
    demos: (&LabeledInstance, &LabeledInstance),
    budget: Option<&dyn SequenceBudget>,
) -> Result<PromptBundle> {
    let (pos, neg) = demos;
    for (demo, expected) in [(pos, Label::Positive), (neg, Label::Negative)] {
        if demo.label != expected {
            return Err(Error::DemonstrationClass {
                expected,
                found: demo.label,
            });
        }
    }
    let input_prompt = instantiate(template, x);
    let masks = input_prompt.matches(MASK_SLOT).count();
    if masks != 1 {
        return Err(Error::MaskCount(masks));
    }

    let mut pos_inst = pos.clone();
    let mut neg_inst = neg.clone();
    let assemble = |p: &LabeledInstance, n: &LabeledInstance| -> Result<(String, String, String)> {
        let p = Demonstration::render(template, verbalizer, p)?.rendered;
        let n = Demonstration::render(template, verbalizer, n)?.rendered;
        let full = [input_prompt.as_str(), p.as_str(), n.as_str()].join(SEGMENT_SEPARATOR);
        Ok((p, n, full))
    };
    let (mut p_text, mut n_text, mut full) = assemble(&pos_inst, &neg_inst)?;

    if let Some(budget) = budget {
        let max = budget.max_sequence_length();
        let mut neg_words = neg_inst.text.split_whitespace().count();
        let mut pos_words = pos_inst.text.split_whitespace().count();
        while budget.encoded_len(&full) > max {
            if neg_words > 0 {
                neg_words -= 1;
                neg_inst.text = truncate_words(&neg.text, neg_words);
            } else if pos_words > 0 {
                pos_words -= 1;
                pos_inst.text = truncate_words(&pos.text, pos_words);
            } else {
                return Err(Error::SequenceOverflow {
                    length: budget.encoded_len(&full),
                    max,
                });
            }
            (p_text, n_text, full) = assemble(&pos_inst, &neg_inst)?;
        }
    }

    let masks = full.matches(MASK_SLOT).count();
    if masks != 1 {
        return Err(Error::MaskCount(masks));
    }
    let mask_position_hint = full.find(MASK_SLOT).expect("one mask");
    Ok(PromptBundle {
        input_prompt,
        demonstrations: (p_text, n_text),
        full_text: full,
        mask_position_hint,
    })
}

/// Precomputed sentence vectors keyed by instance id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) {
        self.vectors.insert(id.into(), vector);
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Size of the top-fraction pool: `ceil(fraction * n)`, at least 1.
pub fn top_pool_size(fraction: f64, n: usize) -> usize {
    // the epsilon absorbs products like 0.7 * 10 = 7.000000000000001
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Per-class candidate pools for one input, most similar first.
#[derive(Debug, Clone)]
pub struct DemoCandidates<'a> {
    pub positive: Vec<&'a LabeledInstance>,
    pub negative: Vec<&'a LabeledInstance>,
}

impl<'a> DemoCandidates<'a> {
    pub fn pool(&self, label: Label) -> &[&'a LabeledInstance] {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }

    /// Draws one demonstration per class uniformly from the pools.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (&'a LabeledInstance, &'a LabeledInstance) {
        let p = self.positive[rng.gen_range(0..self.positive.len())];
        let n = self.negative[rng.gen_range(0..self.negative.len())];
        (p, n)
    }
}

/// Ranks `pool` by cosine similarity to `x` within each class and keeps the
/// top fraction. `x` itself is never a candidate. Ties go to the smaller id.
pub fn demo_candidates<'a>(
    x: &LabeledInstance,
    pool: &'a LabeledCorpus,
    embeddings: &EmbeddingIndex,
    fraction: f64,
) -> Result<DemoCandidates<'a>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "demonstration fraction must be in (0, 1], got {fraction}"
        )));
    }
    let query = embeddings.get(&x.id)?;
    let ranked = |label: Label| -> Result<Vec<&'a LabeledInstance>> {
        let mut scored = Vec::new();
        for inst in pool.of_class(label).filter(|i| i.id != x.id) {
            scored.push((cosine(query, embeddings.get(&inst.id)?), inst));
        }
        if scored.is_empty() {
            return Err(Error::EmptyDemonstrationPool(label));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let keep = top_pool_size(fraction, scored.len());
        Ok(scored.into_iter().take(keep).map(|(_, i)| i).collect())
    };
    Ok(DemoCandidates {
        positive: ranked(Label::Positive)?,
        negative: ranked(Label::Negative)?,
    })
}

/// Samples one positive and one negative demonstration for `x`.
pub fn sample_demonstrations(
    x: &LabeledInstance,
    pool: &LabeledCorpus,
    embeddings: &EmbeddingIndex,
    fraction: f64,
    seed: u64,
) -> Result<(LabeledInstance, LabeledInstance)> {
    let candidates = demo_candidates(x, pool, embeddings, fraction)?;
    let mut rng = rng::stream(seed, &["demos", &x.id]);
    let (p, n) = candidates.draw(&mut rng);
    Ok((p.clone(), n.clone()))
}
