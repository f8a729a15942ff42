//! Mask-word classification, d-prompt logit averaging and training loops.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_kfold, sample_eval_subset, FewShotSplit, Label, LabeledCorpus, LabeledInstance};
use crate::error::{Error, Result};
use crate::evaluation::{self, FoldSummary, MetricsReport};
use crate::gateway::{
    bind_verbalizer, AdamWConfig, Checkpoint, CheckpointManifest, MaskLogits, MaskedLm, OptimizerState,
    SequenceClassifier, TrainExample, VerbalizerBinding, Weights,
};
use crate::prompting::{
    build_prompt_bundle, demo_candidates, instantiate, EmbeddingIndex, Template, Verbalizer, DEFAULT_DEMO_FRACTION,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub p_positive: f64,
    pub p_negative: f64,
}

impl ClassProbabilities {
    /// Argmax; an exact tie predicts positive.
    pub fn label(&self) -> Label {
        if self.p_positive >= self.p_negative {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// Two-way softmax with max subtraction.
pub fn softmax_pair(positive: f64, negative: f64) -> Result<ClassProbabilities> {
    if !positive.is_finite() || !negative.is_finite() {
        return Err(Error::NonFinite(format!("label-word logits ({positive}, {negative})")));
    }
    let max = positive.max(negative);
    let ep = (positive - max).exp();
    let en = (negative - max).exp();
    let z = ep + en;
    Ok(ClassProbabilities {
        p_positive: ep / z,
        p_negative: en / z,
    })
}

/// Pulls the two label-word scores out of a vocabulary vector.
pub fn label_logits(logits: &MaskLogits, binding: VerbalizerBinding) -> Result<(f64, f64)> {
    let get =
        |id: usize| {
            logits.scores.get(id).copied().ok_or_else(|| {
                Error::InvalidArgument(format!("vocabulary id {id} out of range {}", logits.scores.len()))
            })
        };
    Ok((get(binding.positive_id)?, get(binding.negative_id)?))
}

/// Softmax over exactly the two label-word scores; the rest of the
/// vocabulary is ignored.
pub fn restricted_softmax(logits: &MaskLogits, binding: VerbalizerBinding) -> Result<ClassProbabilities> {
    let (p, n) = label_logits(logits, binding)?;
    softmax_pair(p, n)
}

/// Element-wise mean of logit pairs, computed as `x0 + Σ(xi - x0)/d` so that
/// identical inputs average to themselves exactly.
pub fn average_logit_pairs(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    let (&(p0, n0), rest) = pairs
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("cannot average zero logit vectors".into()))?;
    let d = pairs.len() as f64;
    let (dp, dn) = rest
        .iter()
        .fold((0.0, 0.0), |(ap, an), &(p, n)| (ap + (p - p0), an + (n - n0)));
    Ok((p0 + dp / d, n0 + dn / d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub probabilities: ClassProbabilities,
    pub predicted_label: Label,
}

impl Prediction {
    pub fn from_probabilities(instance_id: impl Into<String>, probabilities: ClassProbabilities) -> Self {
        Self {
            instance_id: instance_id.into(),
            predicted_label: probabilities.label(),
            probabilities,
        }
    }
}

/// Where demonstrations come from, if any.
#[derive(Debug, Clone, Copy)]
pub struct DemoSource<'a> {
    pub pool: &'a LabeledCorpus,
    pub embeddings: &'a EmbeddingIndex,
    pub fraction: f64,
}

/// Everything needed to turn an instance into prompts.
#[derive(Debug, Clone, Copy)]
pub struct PromptSetup<'a> {
    pub template: &'a Template,
    pub verbalizer: &'a Verbalizer,
    pub binding: VerbalizerBinding,
    /// `None` scores the bare prompt without demonstrations.
    pub demos: Option<DemoSource<'a>>,
}

/// Output of [`classify`]: the prediction and the `d` raw label-word logit pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub prediction: Prediction,
    pub logit_pairs: Vec<(f64, f64)>,
    pub prompts: Vec<String>,
}

/// Builds `d` augmented prompts with independently drawn demonstrations,
/// averages their label-word logits and applies the restricted softmax.
///
/// Without a demonstration source a single bare prompt is scored regardless
/// of `d`.
pub fn classify<M: MaskedLm>(
    x: &LabeledInstance,
    setup: &PromptSetup<'_>,
    gateway: &M,
    d: usize,
    seed: u64,
) -> Result<Classification> {
    if d == 0 {
        return Err(Error::InvalidArgument("d must be at least 1".into()));
    }
    let prompts: Vec<String> = match setup.demos {
        None => vec![instantiate(setup.template, x)],
        Some(src) => {
            let candidates = demo_candidates(x, src.pool, src.embeddings, src.fraction)?;
            (0..d)
                .map(|j| {
                    let mut rng = rng::stream(seed, &["demos", &x.id, &j.to_string()]);
                    let (p, n) = candidates.draw(&mut rng);
                    build_prompt_bundle(setup.template, setup.verbalizer, x, (p, n), Some(gateway)).map(|b| b.full_text)
                })
                .collect::<Result<_>>()?
        }
    };
    let logit_pairs = prompts
        .iter()
        .map(|prompt| label_logits(&gateway.mask_logits(prompt)?, setup.binding))
        .collect::<Result<Vec<_>>>()?;
    let (p, n) = average_logit_pairs(&logit_pairs)?;
    let prediction = Prediction::from_probabilities(x.id.clone(), softmax_pair(p, n)?);
    Ok(Classification {
        prediction,
        logit_pairs,
        prompts,
    })
}

/// Classifies every instance of `corpus` in parallel. Output keeps corpus order.
pub fn classify_corpus<M: MaskedLm + Sync>(
    corpus: &LabeledCorpus,
    setup: &PromptSetup<'_>,
    gateway: &M,
    d: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    corpus
        .instances()
        .par_iter()
        .map(|x| classify(x, setup, gateway, d, seed).map(|c| c.prediction))
        .collect()
}

/// F1 of predictions (aligned with `corpus`) against the corpus labels.
pub fn predictions_f1(predictions: &[Prediction], corpus: &LabeledCorpus) -> Result<f64> {
    Ok(predictions_report(predictions, corpus)?.f1)
}

pub fn predictions_report(predictions: &[Prediction], corpus: &LabeledCorpus) -> Result<MetricsReport> {
    if predictions.len() != corpus.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: corpus.len(),
        });
    }
    let predicted: Vec<Label> = predictions.iter().map(|p| p.predicted_label).collect();
    let gold: Vec<Label> = corpus.iter().map(|i| i.label).collect();
    evaluation::metrics(evaluation::confusion(&predicted, &gold)?)
}

/// Prompt-model fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub max_steps: usize,
    pub eval_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Prompts averaged per instance during periodic evaluation.
    pub eval_d: usize,
    pub demo_fraction: f64,
    /// Evaluate on `m` per class of the evaluation set instead of all of it.
    pub eval_subsample: Option<usize>,
}

impl Default for TrainConfig {
    /// 1000 steps of AdamW (lr 1e-5, no weight decay), evaluated every 100
    /// steps, batch size 8.
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            max_steps: 1000,
            eval_every: 100,
            batch_size: 8,
            seed: 0,
            eval_d: 1,
            demo_fraction: DEFAULT_DEMO_FRACTION,
            eval_subsample: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.max_steps == 0 || self.eval_every == 0 || self.batch_size == 0 || self.eval_d == 0 {
            return Err(Error::InvalidArgument(
                "max_steps, eval_every, batch_size and eval_d must be positive".into(),
            ));
        }
        if self.eval_every > self.max_steps {
            return Err(Error::InvalidArgument(format!(
                "eval_every ({}) exceeds max_steps ({})",
                self.eval_every, self.max_steps
            )));
        }
        Ok(())
    }

    pub fn evaluation_events(&self) -> usize {
        self.max_steps / self.eval_every
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub dev_f1: Option<f64>,
    pub checkpointed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    /// Best snapshot; the initial weights when no evaluation ever ran.
    pub best: Checkpoint,
    pub snapshot_taken: bool,
    pub log: Vec<TrainLogRecord>,
}

impl FinetuneOutcome {
    pub fn evaluation_events(&self) -> usize {
        self.log.iter().filter(|r| r.dev_f1.is_some()).count()
    }

    pub fn checkpoint_f1s(&self) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.checkpointed)
            .filter_map(|r| r.dev_f1)
            .collect()
    }
}

/// Cycles through the training set in seeded shuffled epochs.
struct BatchCursor {
    seed: u64,
    len: usize,
    epoch: usize,
    order: Vec<usize>,
    at: usize,
}

impl BatchCursor {
    fn new(seed: u64, len: usize) -> Self {
        let mut cursor = Self {
            seed,
            len,
            epoch: 0,
            order: Vec::new(),
            at: 0,
        };
        cursor.reshuffle();
        cursor
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        let mut rng = rng::stream(self.seed, &["train-order", &self.epoch.to_string()]);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
        self.at = 0;
    }

    /// Next batch and the epoch it belongs to; batches never span epochs.
    fn next(&mut self, batch_size: usize) -> (usize, Vec<usize>) {
        if self.at >= self.len {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.at + batch_size).min(self.len);
        let batch = self.order[self.at..end].to_vec();
        self.at = end;
        (self.epoch, batch)
    }
}

/// Fine-tunes `gateway` on the split's training set and keeps the snapshot
/// with the best evaluation-set F1 (strict improvement only).
///
/// Training prompts carry demonstrations drawn from the training set,
/// resampled every epoch and never the example itself. On return the gateway
/// holds the best snapshot's weights.
pub fn finetune_prompt_model<M: MaskedLm + Sync>(
    gateway: &mut M,
    split: &FewShotSplit,
    template: &Template,
    verbalizer: &Verbalizer,
    embeddings: &EmbeddingIndex,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    let binding = bind_verbalizer(gateway, verbalizer)?;
    let train = &split.train;
    if train.is_empty() {
        return Err(Error::EmptyCorpus(train.name().to_string()));
    }
    let eval_set = match config.eval_subsample {
        Some(m) => sample_eval_subset(&split.eval, m, rng::sub_seed(config.seed, &["eval-subsample"]))?,
        None => split.eval.clone(),
    };
    let eval_seed = rng::sub_seed(config.seed, &["eval-demos"]);
    let model_name = gateway.descriptor().model_name.clone();

    let mut state = OptimizerState::default();
    let snapshot = |gateway: &M, state: &OptimizerState, step: usize, dev_f1: f64| Checkpoint {
        manifest: CheckpointManifest {
            step: step as u64,
            dev_f1,
            template: template.clone(),
            verbalizer: verbalizer.clone(),
            seed: config.seed,
            model_name: model_name.clone(),
        },
        weights: gateway.weights(),
        optimizer: state.clone(),
    };
    let mut best = snapshot(gateway, &state, 0, 0.0);
    let mut best_f1: Option<f64> = None;
    let mut log = Vec::with_capacity(config.max_steps);
    let mut cursor = BatchCursor::new(config.seed, train.len());

    for step in 1..=config.max_steps {
        let (epoch, batch_positions) = cursor.next(config.batch_size);
        let epoch_tag = epoch.to_string();
        let mut batch = Vec::with_capacity(batch_positions.len());
        for pos in batch_positions {
            let x = &train.instances()[pos];
            let candidates = demo_candidates(x, train, embeddings, config.demo_fraction)?;
            let mut demo_rng = rng::stream(config.seed, &["train-demos", &epoch_tag, &x.id]);
            let (p, n) = candidates.draw(&mut demo_rng);
            let bundle = build_prompt_bundle(template, verbalizer, x, (p, n), Some(&*gateway))?;
            batch.push(TrainExample {
                prompt: bundle.full_text,
                target_id: binding.id(x.label),
            });
        }
        let loss = gateway.fine_tune_step(&batch, binding, &mut state, &config.optimizer)?;

        let mut record = TrainLogRecord {
            step,
            loss,
            dev_f1: None,
            checkpointed: false,
        };
        if step % config.eval_every == 0 {
            let setup = PromptSetup {
                template,
                verbalizer,
                binding,
                demos: Some(DemoSource {
                    pool: train,
                    embeddings,
                    fraction: config.demo_fraction,
                }),
            };
            let predictions = classify_corpus(&eval_set, &setup, &*gateway, config.eval_d, eval_seed)?;
            let f1 = predictions_f1(&predictions, &eval_set)?;
            record.dev_f1 = Some(f1);
            if best_f1.is_none_or(|b| f1 > b) {
                best_f1 = Some(f1);
                best = snapshot(gateway, &state, step, f1);
                record.checkpointed = true;
            }
            log::debug!("step {step}: loss {loss:.6} eval f1 {f1:.4}");
        }
        log.push(record);
    }

    gateway.load_weights(&best.weights)?;
    Ok(FinetuneOutcome {
        best,
        snapshot_taken: best_f1.is_some(),
        log,
    })
}

/// Linear decay from `base_lr` at step 0 to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        let remaining = (self.total_steps - step) as f64 / self.total_steps as f64;
        self.base_lr * remaining
    }
}

/// Standard fine-tuning settings for the sequence-classification baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    /// lr 5e-5 with linear decay, batch 32, 50 epochs, dropout 0.1.
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig {
                learning_rate: 5e-5,
                ..AdamWConfig::default()
            },
            epochs: 50,
            batch_size: 32,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.steps_per_epoch(train_len) * self.epochs
    }

    pub fn schedule(&self, train_len: usize) -> LinearSchedule {
        LinearSchedule {
            base_lr: self.optimizer.learning_rate,
            total_steps: self.total_steps(train_len),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub last_lr: f64,
    pub dev: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub weights: Weights,
    pub optimizer: OptimizerState,
    pub epochs: Vec<EpochRecord>,
    pub total_steps: usize,
}

pub fn baseline_predict<C: SequenceClassifier + ?Sized>(model: &C, corpus: &LabeledCorpus) -> Result<Vec<Prediction>> {
    corpus
        .iter()
        .map(|x| {
            let (p, n) = model.class_logits(&x.text)?;
            Ok(Prediction::from_probabilities(x.id.clone(), softmax_pair(p, n)?))
        })
        .collect()
}

/// Cross-entropy fine-tuning with a task head, linear learning-rate decay
/// and per-epoch dev metrics.
pub fn baseline_finetune<C: SequenceClassifier + ?Sized>(
    model: &mut C,
    train: &LabeledCorpus,
    dev: &LabeledCorpus,
    config: &BaselineConfig,
) -> Result<BaselineOutcome> {
    config.optimizer.validate()?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(Error::EmptyCorpus(
            if train.is_empty() { train.name() } else { dev.name() }.to_string(),
        ));
    }
    let schedule = config.schedule(train.len());
    let mut state = OptimizerState::default();
    let mut cursor = BatchCursor::new(config.seed, train.len());
    let mut step = 0usize;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for _ in 0..config.steps_per_epoch(train.len()) {
            let (_, positions) = cursor.next(config.batch_size);
            let batch: Vec<(&str, Label)> = positions
                .iter()
                .map(|&p| {
                    let x = &train.instances()[p];
                    (x.text.as_str(), x.label)
                })
                .collect();
            lr = schedule.lr_at(step);
            let dropout_seed = rng::sub_seed(config.seed, &["dropout", &step.to_string()]);
            losses.push(model.train_step(&batch, &mut state, &config.optimizer, lr, config.dropout, dropout_seed)?);
            step += 1;
        }
        let dev_report = predictions_report(&baseline_predict(model, dev)?, dev)?;
        epochs.push(EpochRecord {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            last_lr: lr,
            dev: dev_report,
        });
    }
    Ok(BaselineOutcome {
        weights: model.weights(),
        optimizer: state,
        epochs,
        total_steps: step,
    })
}

/// Runs the baseline on every fold of a stratified k-fold partition and
/// summarises the final-epoch dev metrics.
pub fn kfold_baseline<C, F>(
    make_model: F,
    corpus: &LabeledCorpus,
    folds: usize,
    config: &BaselineConfig,
) -> Result<(Vec<MetricsReport>, FoldSummary)>
where
    C: SequenceClassifier,
    F: Fn(usize) -> C,
{
    let mut reports = Vec::with_capacity(folds);
    for (fold, (train, dev)) in make_kfold(corpus, folds, config.seed)?.into_iter().enumerate() {
        let mut model = make_model(fold);
        let outcome = baseline_finetune(&mut model, &train, &dev, config)?;
        reports.push(outcome.epochs.last().expect("at least one epoch").dev.clone());
    }
    let summary = evaluation::summarize_folds(&reports)?;
    Ok((reports, summary))
}
