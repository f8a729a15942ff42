//! Probability-averaging ensembles built by greedy TOP-N fusion with random
//! restarts. Majority voting and the prediction cache format live here too.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassProbabilities, Prediction};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::evaluation::{f1_from_counts, ConfusionCounts};
use crate::rng;

/// Tolerance on `p_positive + p_negative = 1` for cached rows.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// Cached class probabilities of several models over one instance set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    model_ids: Vec<String>,
    instance_ids: Vec<String>,
    /// `probs[model][instance]`
    probs: Vec<Vec<ClassProbabilities>>,
    gold: Vec<Label>,
}

fn ensure_unique(kind: &str, ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(format!("{kind} {id}")));
        }
    }
    Ok(())
}

impl PredictionMatrix {
    pub fn new(
        model_ids: Vec<String>,
        instance_ids: Vec<String>,
        probs: Vec<Vec<ClassProbabilities>>,
        gold: Vec<Label>,
    ) -> Result<Self> {
        if model_ids.is_empty() || instance_ids.is_empty() {
            return Err(Error::InvalidArgument(
                "prediction matrix needs at least one model and one instance".into(),
            ));
        }
        ensure_unique("model", &model_ids)?;
        ensure_unique("instance", &instance_ids)?;
        if probs.len() != model_ids.len() {
            return Err(Error::LengthMismatch {
                left: probs.len(),
                right: model_ids.len(),
            });
        }
        if gold.len() != instance_ids.len() {
            return Err(Error::LengthMismatch {
                left: gold.len(),
                right: instance_ids.len(),
            });
        }
        for (m, row) in probs.iter().enumerate() {
            if row.len() != instance_ids.len() {
                return Err(Error::LengthMismatch {
                    left: row.len(),
                    right: instance_ids.len(),
                });
            }
            for (i, p) in row.iter().enumerate() {
                check_row(p, &model_ids[m], &instance_ids[i])?;
            }
        }
        Ok(Self {
            model_ids,
            instance_ids,
            probs,
            gold,
        })
    }

    /// Assembles a matrix from cache records, aligned with the gold labels'
    /// instance order. Models appear in order of first occurrence.
    pub fn from_records(records: &[CacheRecord], gold: &[(String, Label)]) -> Result<Self> {
        let mut model_ids: Vec<String> = Vec::new();
        let mut by_model: HashMap<&str, BTreeMap<&str, ClassProbabilities>> = HashMap::new();
        for r in records {
            let entry = by_model.entry(r.model_id.as_str()).or_insert_with(|| {
                model_ids.push(r.model_id.clone());
                BTreeMap::new()
            });
            let p = ClassProbabilities {
                p_positive: r.p_positive,
                p_negative: r.p_negative,
            };
            if entry.insert(r.instance_id.as_str(), p).is_some() {
                return Err(Error::DuplicateId(format!("{} in model {}", r.instance_id, r.model_id)));
            }
        }
        let instance_ids: Vec<String> = gold.iter().map(|(id, _)| id.clone()).collect();
        ensure_unique("instance", &instance_ids)?;
        let gold_set: HashSet<&str> = instance_ids.iter().map(String::as_str).collect();
        let mut probs = Vec::with_capacity(model_ids.len());
        for model in &model_ids {
            let rows = &by_model[model.as_str()];
            let missing: Vec<&str> = instance_ids
                .iter()
                .map(String::as_str)
                .filter(|id| !rows.contains_key(id))
                .collect();
            let extra: Vec<&str> = rows.keys().copied().filter(|id| !gold_set.contains(id)).collect();
            if !missing.is_empty() || !extra.is_empty() {
                return Err(Error::Misaligned(format!(
                    "model {model}: missing ids [{}], unknown ids [{}]",
                    missing.join(", "),
                    extra.join(", ")
                )));
            }
            probs.push(instance_ids.iter().map(|id| rows[id.as_str()]).collect());
        }
        Self::new(model_ids, instance_ids, probs, gold.iter().map(|(_, l)| *l).collect())
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn instance_ids(&self) -> &[String] {
        &self.instance_ids
    }

    pub fn gold(&self) -> &[Label] {
        &self.gold
    }

    pub fn probs(&self, model: usize) -> &[ClassProbabilities] {
        &self.probs[model]
    }

    pub fn models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn instances(&self) -> usize {
        self.instance_ids.len()
    }

    /// F1 of each model on its own.
    pub fn model_f1s(&self) -> Vec<f64> {
        (0..self.models()).map(|m| self.subset_f1(&[m])).collect()
    }

    /// Fused F1 of a subset; panics on invalid indices.
    pub fn subset_f1(&self, subset: &[usize]) -> f64 {
        let mut acc = Accumulator::new(self.instances());
        for &m in subset {
            acc.add(&self.probs[m]);
        }
        acc.f1(&self.gold, subset.len())
    }
}

fn check_row(p: &ClassProbabilities, model: &str, instance: &str) -> Result<()> {
    let ok = p.p_positive.is_finite()
        && p.p_negative.is_finite()
        && (0.0..=1.0).contains(&p.p_positive)
        && (0.0..=1.0).contains(&p.p_negative)
        && (p.p_positive + p.p_negative - 1.0).abs() <= NORMALIZATION_TOLERANCE;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "model {model}, instance {instance}: probabilities ({}, {}) are not a distribution",
            p.p_positive, p.p_negative
        )))
    }
}

/// Running sums of member probabilities per instance.
#[derive(Clone)]
struct Accumulator {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            pos: vec![0.0; n],
            neg: vec![0.0; n],
        }
    }

    fn add(&mut self, row: &[ClassProbabilities]) {
        for ((sp, sn), p) in self.pos.iter_mut().zip(self.neg.iter_mut()).zip(row) {
            *sp += p.p_positive;
            *sn += p.p_negative;
        }
    }

    fn label(sum_pos: f64, sum_neg: f64, count: usize) -> Label {
        let c = count as f64;
        ClassProbabilities {
            p_positive: sum_pos / c,
            p_negative: sum_neg / c,
        }
        .label()
    }

    fn f1(&self, gold: &[Label], count: usize) -> f64 {
        self.f1_with(gold, count, None)
    }

    /// F1 of the current members, optionally with one extra row tentatively added.
    fn f1_with(&self, gold: &[Label], count: usize, extra: Option<&[ClassProbabilities]>) -> f64 {
        let mut counts = ConfusionCounts::default();
        for (i, &g) in gold.iter().enumerate() {
            let (mut sp, mut sn) = (self.pos[i], self.neg[i]);
            if let Some(row) = extra {
                sp += row[i].p_positive;
                sn += row[i].p_negative;
            }
            counts.record(Self::label(sp, sn, count), g);
        }
        f1_from_counts(counts.tp, counts.fp, counts.fn_)
    }
}

/// Element-wise mean of the subset's probabilities with argmax labels.
pub fn average_probs(matrix: &PredictionMatrix, subset: &[usize]) -> Result<Vec<Prediction>> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("ensemble subset is empty".into()));
    }
    let mut seen = HashSet::new();
    for &m in subset {
        if m >= matrix.models() {
            return Err(Error::InvalidArgument(format!(
                "model index {m} out of range {}",
                matrix.models()
            )));
        }
        if !seen.insert(m) {
            return Err(Error::InvalidArgument(format!("model index {m} repeated")));
        }
    }
    let mut acc = Accumulator::new(matrix.instances());
    for &m in subset {
        acc.add(matrix.probs(m));
    }
    let c = subset.len() as f64;
    Ok(matrix
        .instance_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            Prediction::from_probabilities(
                id.clone(),
                ClassProbabilities {
                    p_positive: acc.pos[i] / c,
                    p_negative: acc.neg[i] / c,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    /// Members in the order they joined.
    pub member_ids: Vec<String>,
    pub fused_f1: f64,
    pub seed_model: String,
    pub restart_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub restart: usize,
    pub seed_model: usize,
    pub seed_f1: f64,
    pub members: Vec<usize>,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome {
    pub result: EnsembleResult,
    pub restarts: Vec<RestartRecord>,
}

fn greedy_restart(matrix: &PredictionMatrix, restart: usize, seed: u64) -> RestartRecord {
    let mut rng = rng::stream(seed, &["fusion", &restart.to_string()]);
    let m = matrix.models();
    let first = rng.gen_range(0..m);
    let mut rest: Vec<usize> = (0..m).filter(|&i| i != first).collect();
    rest.shuffle(&mut rng);

    let mut acc = Accumulator::new(matrix.instances());
    acc.add(matrix.probs(first));
    let mut members = vec![first];
    let seed_f1 = acc.f1(matrix.gold(), 1);
    let mut f1 = seed_f1;
    for candidate in rest {
        let trial = acc.f1_with(matrix.gold(), members.len() + 1, Some(matrix.probs(candidate)));
        if trial > f1 {
            acc.add(matrix.probs(candidate));
            members.push(candidate);
            f1 = trial;
        }
    }
    RestartRecord {
        restart,
        seed_model: first,
        seed_f1,
        members,
        f1,
    }
}

/// Stochastic greedy ensemble search.
///
/// Each restart seeds the ensemble with one random model, visits the others
/// in random order and keeps a model only when fused F1 strictly improves.
/// The best restart wins; ties go to fewer members, then the earlier restart.
/// Every restart draws from its own stream, so the result does not depend on
/// thread scheduling.
pub fn topn_fusion(matrix: &PredictionMatrix, restarts: usize, seed: u64) -> Result<FusionOutcome> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("number of restarts must be positive".into()));
    }
    let records: Vec<RestartRecord> = (0..restarts)
        .into_par_iter()
        .map(|r| greedy_restart(matrix, r, seed))
        .collect();
    let best = records
        .iter()
        .reduce(|best, r| {
            let better = r.f1 > best.f1 || (r.f1 == best.f1 && r.members.len() < best.members.len());
            if better {
                r
            } else {
                best
            }
        })
        .expect("at least one restart");
    let result = EnsembleResult {
        member_ids: best.members.iter().map(|&m| matrix.model_ids[m].clone()).collect(),
        fused_f1: best.f1,
        seed_model: matrix.model_ids[best.seed_model].clone(),
        restart_index: best.restart,
    };
    Ok(FusionOutcome {
        result,
        restarts: records,
    })
}

/// Per-instance majority label over an odd number of aligned vectors.
pub fn majority_vote(predictions: &[Vec<(String, Label)>]) -> Result<Vec<(String, Label)>> {
    let Some(first) = predictions.first() else {
        return Err(Error::InvalidArgument(
            "majority vote needs at least one prediction vector".into(),
        ));
    };
    if predictions.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "majority vote needs an odd number of prediction vectors, got {}",
            predictions.len()
        )));
    }
    for (v, vector) in predictions.iter().enumerate().skip(1) {
        if vector.len() != first.len() {
            return Err(Error::Misaligned(format!(
                "vector {v} has {} instances, vector 0 has {}",
                vector.len(),
                first.len()
            )));
        }
        if let Some(((a, _), (b, _))) = first.iter().zip(vector).find(|((a, _), (b, _))| a != b) {
            return Err(Error::Misaligned(format!(
                "vector {v} has instance {b} where vector 0 has {a}"
            )));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let positives = predictions.iter().filter(|v| v[i].1.is_positive()).count();
            let label = if 2 * positives > predictions.len() {
                Label::Positive
            } else {
                Label::Negative
            };
            (first[i].0.clone(), label)
        })
        .collect())
}

/// One line of a prediction cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub model_id: String,
    pub instance_id: String,
    pub p_positive: f64,
    pub p_negative: f64,
}

impl CacheRecord {
    pub fn from_prediction(model_id: &str, p: &Prediction) -> Self {
        Self {
            model_id: model_id.to_string(),
            instance_id: p.instance_id.clone(),
            p_positive: p.probabilities.p_positive,
            p_negative: p.probabilities.p_negative,
        }
    }

    pub fn label(&self) -> Label {
        ClassProbabilities {
            p_positive: self.p_positive,
            p_negative: self.p_negative,
        }
        .label()
    }
}

/// A hard label, as produced by voting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub instance_id: String,
    pub label: Label,
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_prediction_cache(path: impl AsRef<Path>, model_id: &str, predictions: &[Prediction]) -> Result<()> {
    let records: Vec<CacheRecord> = predictions
        .iter()
        .map(|p| CacheRecord::from_prediction(model_id, p))
        .collect();
    write_jsonl(path, &records)
}

pub fn read_prediction_cache(path: impl AsRef<Path>) -> Result<Vec<CacheRecord>> {
    read_jsonl(path)
}
