//! Template search: generation, zero-shot ranking, finalist fine-tuning and
//! dev-set selection, with a resumable stage store.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify_corpus, finetune_prompt_model, predictions_f1, DemoSource, PromptSetup, TrainConfig};
use crate::corpus::{make_fewshot_split, sample_eval_subset, FewShotSplit, LabeledCorpus};
use crate::error::{Error, Result};
use crate::gateway::{
    bind_verbalizer, embed_corpora, generate_template_candidates, Checkpoint, MaskedLm, SentenceEmbedder,
    TemplateGenerator,
};
use crate::prompting::{fill_mask, EmbeddingIndex, Template, Verbalizer, DEFAULT_DEMO_FRACTION, INPUT_SLOT};
use crate::rng;

/// Sentinel the generator fills in before the label word.
pub const PREFIX_SENTINEL: &str = "<P>";
/// Sentinel the generator fills in after the label word.
pub const SUFFIX_SENTINEL: &str = "<S>";

/// Turns each training instance into a generator input `text<P>word<S>`.
pub fn build_generation_inputs(train: &LabeledCorpus, verbalizer: &Verbalizer) -> Result<Vec<String>> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus(train.name().to_string()));
    }
    let skeleton = Template::new(format!("{INPUT_SLOT}{PREFIX_SENTINEL}[MASK]{SUFFIX_SENTINEL}"))?;
    Ok(train
        .iter()
        .map(|x| fill_mask(&skeleton, verbalizer.word(x.label)).replacen(INPUT_SLOT, &x.text, 1))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub template: Template,
    pub zero_shot_f1: f64,
    /// 1-based position after sorting.
    pub rank: usize,
}

/// How candidates are scored during zero-shot ranking.
#[derive(Debug, Clone, Copy)]
pub enum RankMode<'a> {
    /// Bare prompts, no demonstrations.
    Plain,
    Demonstrations {
        d: usize,
        source: DemoSource<'a>,
    },
}

/// Scores every candidate on `subset` with the untouched gateway and sorts by
/// F1 descending. Ties fall back to generation score (higher first), then to
/// the pattern string.
pub fn rank_candidates<M: MaskedLm + Sync>(
    candidates: &[Template],
    subset: &LabeledCorpus,
    verbalizer: &Verbalizer,
    gateway: &M,
    mode: RankMode<'_>,
    seed: u64,
) -> Result<Vec<CandidateReport>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let binding = bind_verbalizer(gateway, verbalizer)?;
    let (d, demos) = match mode {
        RankMode::Plain => (1, None),
        RankMode::Demonstrations { d, source } => (d, Some(source)),
    };
    let scored = candidates
        .par_iter()
        .map(|template| {
            let setup = PromptSetup {
                template,
                verbalizer,
                binding,
                demos,
            };
            let predictions = classify_corpus(subset, &setup, gateway, d, seed)?;
            Ok((template.clone(), predictions_f1(&predictions, subset)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<(Template, f64)> = scored;
    order.sort_by(|(ta, fa), (tb, fb)| {
        let ga = ta.generation_score().unwrap_or(f64::NEG_INFINITY);
        let gb = tb.generation_score().unwrap_or(f64::NEG_INFINITY);
        fb.total_cmp(fa)
            .then_with(|| gb.total_cmp(&ga))
            .then_with(|| ta.pattern().cmp(tb.pattern()))
    });
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, (template, zero_shot_f1))| CandidateReport {
            template,
            zero_shot_f1,
            rank: i + 1,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k: usize,
    /// Instances per class in the zero-shot ranking subset.
    pub m: usize,
    #[serde(default = "default_beam")]
    pub beam_width: usize,
    #[serde(default = "default_finalists")]
    pub finalists: usize,
    #[serde(default = "default_one")]
    pub seeds_per_template: usize,
    /// `None` ranks with bare prompts; `Some(d)` with `d` demonstration prompts.
    #[serde(default)]
    pub rank_d: Option<usize>,
    /// Prompts averaged per instance when scoring finalists on the dev set.
    #[serde(default = "default_one")]
    pub dev_d: usize,
    #[serde(default = "default_fraction")]
    pub demo_fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

fn default_beam() -> usize {
    100
}

fn default_finalists() -> usize {
    10
}

fn default_one() -> usize {
    1
}

fn default_fraction() -> f64 {
    DEFAULT_DEMO_FRACTION
}

impl SearchConfig {
    pub fn new(k: usize, m: usize, seed: u64, train: TrainConfig) -> Self {
        Self {
            k,
            m,
            beam_width: default_beam(),
            finalists: default_finalists(),
            seeds_per_template: 1,
            rank_d: None,
            dev_d: 1,
            demo_fraction: DEFAULT_DEMO_FRACTION,
            seed,
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.beam_width == 0 || self.finalists == 0 {
            return Err(Error::InvalidArgument(
                "k, m, beam_width and finalists must be positive".into(),
            ));
        }
        if self.seeds_per_template == 0 || self.dev_d == 0 || self.rank_d == Some(0) {
            return Err(Error::InvalidArgument(
                "seeds_per_template, dev_d and rank_d must be positive".into(),
            ));
        }
        self.train.validate()
    }
}

/// Everything needed to re-run any stage bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchProvenance {
    pub rng: String,
    pub config: SearchConfig,
    pub verbalizer: Verbalizer,
    pub source: String,
    pub source_checksum: String,
    pub dev: String,
    pub dev_checksum: String,
    pub mlm: String,
    pub generator: String,
    pub embedder: String,
    pub train_ids: Vec<String>,
    pub subset_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalistRecord {
    /// Zero-shot rank of the template.
    pub rank: usize,
    pub template: Template,
    pub seed: u64,
    pub best_step: u64,
    /// F1 on the held-out remainder of the source corpus.
    pub eval_f1: f64,
    /// F1 on the official dev corpus.
    pub dev_f1: f64,
    pub checkpoint: String,
}

/// Persisted progress; each stage is filled in as it completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub provenance: SearchProvenance,
    pub candidates: Option<Vec<Template>>,
    pub ranking: Option<Vec<CandidateReport>>,
    pub finalists: Vec<FinalistRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub provenance: SearchProvenance,
    pub ranking: Vec<CandidateReport>,
    pub finalists: Vec<FinalistRecord>,
    /// Index into `finalists`.
    pub selected: usize,
    /// 1-based position of the selected finalist when ordered by eval F1.
    pub selected_eval_position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl SearchResult {
    pub fn selected_finalist(&self) -> &FinalistRecord {
        &self.finalists[self.selected]
    }
}

/// Persistence for search progress and finalist checkpoints.
pub trait SearchStore {
    fn load_state(&self) -> Result<Option<SearchState>>;
    fn save_state(&mut self, state: &SearchState) -> Result<()>;
    fn save_checkpoint(&mut self, key: &str, checkpoint: &Checkpoint) -> Result<()>;
    fn load_checkpoint(&self, key: &str) -> Result<Checkpoint>;
}

/// Keeps everything in memory; useful for tests and one-shot runs.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore {
    pub state: Option<SearchState>,
    pub checkpoints: BTreeMap<String, Checkpoint>,
}

impl SearchStore for MemoryStore {
    fn load_state(&self) -> Result<Option<SearchState>> {
        Ok(self.state.clone())
    }

    fn save_state(&mut self, state: &SearchState) -> Result<()> {
        self.state = Some(state.clone());
        Ok(())
    }

    fn save_checkpoint(&mut self, key: &str, checkpoint: &Checkpoint) -> Result<()> {
        self.checkpoints.insert(key.to_string(), checkpoint.clone());
        Ok(())
    }

    fn load_checkpoint(&self, key: &str) -> Result<Checkpoint> {
        self.checkpoints
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint stored under '{key}'")))
    }
}

/// Stores the state as `search-state.json` and checkpoints under
/// `checkpoints/<key>/` inside a directory.
#[derive(Debug, Clone)]
pub struct DirectoryStore {
    root: PathBuf,
}

pub const STATE_FILE: &str = "search-state.json";

impl DirectoryStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_dir(&self, key: &str) -> PathBuf {
        self.root.join("checkpoints").join(key)
    }
}

impl SearchStore for DirectoryStore {
    fn load_state(&self) -> Result<Option<SearchState>> {
        let path = self.root.join(STATE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&body)
            .map(Some)
            .map_err(|e| Error::parse(&path, e.to_string()))
    }

    fn save_state(&mut self, state: &SearchState) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(STATE_FILE);
        let tmp = self.root.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(state)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn save_checkpoint(&mut self, key: &str, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.save_dir(self.checkpoint_dir(key))
    }

    fn load_checkpoint(&self, key: &str) -> Result<Checkpoint> {
        Checkpoint::load_dir(self.checkpoint_dir(key))
    }
}

/// Models used by the search.
pub struct SearchGateways<'a, M, G: ?Sized, E: ?Sized> {
    /// Untouched masked LM; cloned for every finalist run.
    pub mlm: &'a M,
    pub generator: &'a G,
    pub embedder: &'a E,
}

/// Fails when an id occurs in both corpora, since demonstrations are
/// excluded by id.
pub fn check_disjoint_ids(a: &LabeledCorpus, b: &LabeledCorpus) -> Result<()> {
    let ids: HashSet<&str> = a.iter().map(|i| i.id.as_str()).collect();
    match b.iter().find(|i| ids.contains(i.id.as_str())) {
        Some(i) => Err(Error::DuplicateId(format!(
            "{} (present in both '{}' and '{}')",
            i.id,
            a.name(),
            b.name()
        ))),
        None => Ok(()),
    }
}

fn finalist_key(rank: usize) -> String {
    format!("finalist-{rank:02}")
}

/// Runs the full search: split the source corpus, generate candidates from
/// the training half, rank them zero-shot on a per-class subset of the
/// remainder, fine-tune the best few and select by official-dev F1.
///
/// Completed stages found in `store` are reused when their provenance
/// matches, so an interrupted run resumes where it stopped.
pub fn run_search<M, G, E, S>(
    source: &LabeledCorpus,
    dev: &LabeledCorpus,
    verbalizer: &Verbalizer,
    gateways: &SearchGateways<'_, M, G, E>,
    config: &SearchConfig,
    store: &mut S,
) -> Result<SearchResult>
where
    M: MaskedLm + Clone + Sync,
    G: TemplateGenerator + ?Sized,
    E: SentenceEmbedder + ?Sized,
    S: SearchStore + ?Sized,
{
    config.validate()?;
    check_disjoint_ids(source, dev)?;
    let split = make_fewshot_split(source, config.k, config.seed)?;
    let subset = sample_eval_subset(&split.eval, config.m, config.seed)?;
    let provenance = SearchProvenance {
        rng: rng::RNG_ID.to_string(),
        config: config.clone(),
        verbalizer: verbalizer.clone(),
        source: source.name().to_string(),
        source_checksum: source.checksum(),
        dev: dev.name().to_string(),
        dev_checksum: dev.checksum(),
        mlm: gateways.mlm.descriptor().model_name.clone(),
        generator: gateways.generator.descriptor().model_name.clone(),
        embedder: gateways.embedder.descriptor().model_name.clone(),
        train_ids: split.train.ids(),
        subset_ids: subset.ids(),
    };
    let mut state = match store.load_state()? {
        Some(saved) if saved.provenance == provenance => saved,
        Some(_) => {
            return Err(Error::InvalidArgument(
                "stored search state was produced by a different configuration or input".into(),
            ))
        }
        None => SearchState {
            provenance: provenance.clone(),
            candidates: None,
            ranking: None,
            finalists: Vec::new(),
        },
    };

    let embeddings = embed_corpora(gateways.embedder, &[source, dev])?;

    if state.candidates.is_none() {
        let inputs = build_generation_inputs(&split.train, verbalizer)?;
        let generated = generate_template_candidates(gateways.generator, &inputs, config.beam_width)?;
        state.candidates = Some(generated.into_iter().map(|(t, _)| t).collect());
        store.save_state(&state)?;
    }
    let candidates = state.candidates.clone().expect("generation stage complete");

    if state.ranking.is_none() {
        let mode = match config.rank_d {
            None => RankMode::Plain,
            Some(d) => RankMode::Demonstrations {
                d,
                source: DemoSource {
                    pool: &split.train,
                    embeddings: &embeddings,
                    fraction: config.demo_fraction,
                },
            },
        };
        let rank_seed = rng::sub_seed(config.seed, &["rank-demos"]);
        let ranking = rank_candidates(&candidates, &subset, verbalizer, gateways.mlm, mode, rank_seed)?;
        state.ranking = Some(ranking);
        store.save_state(&state)?;
    }
    let ranking = state.ranking.clone().expect("ranking stage complete");

    let finalist_count = config.finalists.min(ranking.len());
    for report in ranking.iter().take(finalist_count).skip(state.finalists.len()) {
        let (record, checkpoint) = train_finalist(report, &split, dev, verbalizer, gateways.mlm, &embeddings, config)?;
        store.save_checkpoint(&record.checkpoint, &checkpoint)?;
        state.finalists.push(record);
        store.save_state(&state)?;
    }

    select(provenance, ranking, state.finalists)
}

fn train_finalist<M: MaskedLm + Clone + Sync>(
    report: &CandidateReport,
    split: &FewShotSplit,
    dev: &LabeledCorpus,
    verbalizer: &Verbalizer,
    base: &M,
    embeddings: &EmbeddingIndex,
    config: &SearchConfig,
) -> Result<(FinalistRecord, Checkpoint)> {
    let mut best: Option<(M, Checkpoint)> = None;
    for s in 0..config.seeds_per_template {
        let seed = rng::sub_seed(config.seed, &["finetune", report.template.pattern(), &s.to_string()]);
        let train_config = TrainConfig {
            seed,
            ..config.train.clone()
        };
        let mut model = base.clone();
        let outcome = finetune_prompt_model(
            &mut model,
            split,
            &report.template,
            verbalizer,
            embeddings,
            &train_config,
        )?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| outcome.best.manifest.dev_f1 > b.manifest.dev_f1)
        {
            best = Some((model, outcome.best));
        }
    }
    let (model, checkpoint) = best.expect("at least one seed");
    let setup = PromptSetup {
        template: &report.template,
        verbalizer,
        binding: bind_verbalizer(&model, verbalizer)?,
        demos: Some(DemoSource {
            pool: &split.train,
            embeddings,
            fraction: config.demo_fraction,
        }),
    };
    let dev_seed = rng::sub_seed(config.seed, &["dev-demos"]);
    let dev_f1 = predictions_f1(&classify_corpus(dev, &setup, &model, config.dev_d, dev_seed)?, dev)?;
    let record = FinalistRecord {
        rank: report.rank,
        template: report.template.clone(),
        seed: checkpoint.manifest.seed,
        best_step: checkpoint.manifest.step,
        eval_f1: checkpoint.manifest.dev_f1,
        dev_f1,
        checkpoint: finalist_key(report.rank),
    };
    Ok((record, checkpoint))
}

/// Picks the finalist with the highest official-dev F1 (earliest on ties)
/// and warns when it is outside the top three by held-out F1.
pub fn select(
    provenance: SearchProvenance,
    ranking: Vec<CandidateReport>,
    finalists: Vec<FinalistRecord>,
) -> Result<SearchResult> {
    if finalists.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut selected = 0;
    for (i, f) in finalists.iter().enumerate() {
        if f.dev_f1 > finalists[selected].dev_f1 {
            selected = i;
        }
    }
    let chosen_eval = finalists[selected].eval_f1;
    let selected_eval_position = 1 + finalists.iter().filter(|f| f.eval_f1 > chosen_eval).count();
    let warning = (selected_eval_position > 3).then(|| {
        let msg = format!(
            "selected template '{}' is only #{selected_eval_position} by held-out F1",
            finalists[selected].template.pattern()
        );
        log::warn!("{msg}");
        msg
    });
    Ok(SearchResult {
        provenance,
        ranking,
        finalists,
        selected,
        selected_eval_position,
        warning,
    })
}
