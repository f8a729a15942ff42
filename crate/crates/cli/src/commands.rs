//! Subcommand implementations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use causal_prompt::classifier::{classify_corpus, DemoSource, PromptSetup};
use causal_prompt::corpus::{load_corpus, load_gold_labels, make_fewshot_split, write_corpus_jsonl, SplitManifest};
use causal_prompt::ensemble::{
    average_probs, majority_vote, read_jsonl, read_prediction_cache, topn_fusion, write_jsonl, CacheRecord,
    LabelRecord, PredictionMatrix,
};
use causal_prompt::evaluation::{confusion, consistency_check, metrics, ReportedRow};
use causal_prompt::fixtures::submission_rows;
use causal_prompt::gateway::{bind_verbalizer, embed_corpora, Checkpoint, MaskedLm};
use causal_prompt::search::{run_search, DirectoryStore, SearchConfig, SearchGateways};
use causal_prompt::{rng, Label, LabeledCorpus, Template};

use crate::cli::{ClassifyArgs, CorpusArgs, EvalArgs, FuseArgs, SearchArgs, SplitArgs};
use crate::config::{check_paths, RunConfig};

/// Bad or missing arguments discovered after merging flags with the config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn required<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("missing required value: {what}")))
}

/// Holds `<path>` while a command writes its outputs.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("output is locked by another run ({} exists)", path.display()))?;
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, Serialize)]
struct InputFile {
    path: String,
    sha256: String,
}

fn input(path: &Path) -> Result<InputFile> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    command: &'a str,
    rng: &'a str,
    config: &'a RunConfig,
    inputs: BTreeMap<String, InputFile>,
    result: T,
}

fn write_manifest<T: Serialize>(
    path: &Path,
    command: &str,
    config: &RunConfig,
    inputs: BTreeMap<String, InputFile>,
    result: T,
) -> Result<()> {
    let manifest = Manifest {
        command,
        rng: rng::RNG_ID,
        config,
        inputs,
        result,
    };
    let body = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn apply_corpus_args(config: &mut RunConfig, args: &CorpusArgs) {
    if let Some(c) = &args.text_column {
        config.corpus.text_column = c.clone();
    }
    if let Some(c) = &args.label_column {
        config.corpus.label_column = c.clone();
    }
    if let Some(c) = &args.id_column {
        config.corpus.id_column = c.clone();
    }
    if args.row_ids {
        config.corpus.id_column.clear();
    }
}

fn load(config: &RunConfig, path: &Path) -> Result<LabeledCorpus> {
    load_corpus(path, &config.corpus.schema()).with_context(|| format!("loading corpus {}", path.display()))
}

pub fn split(mut config: RunConfig, args: SplitArgs) -> Result<()> {
    apply_corpus_args(&mut config, &args.corpus_args);
    if args.corpus.is_some() {
        config.corpus.train = args.corpus.clone();
    }
    if args.k.is_some() {
        config.split.k = args.k;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let corpus_path = required(config.corpus.train.clone(), "--corpus")?;
    let k = required(config.split.k, "--k")?;
    let seed = required(config.seed, "--seed")?;
    check_paths([("corpus", corpus_path.as_path())])?;

    let _lock = OutputLock::acquire(args.out.join(".lock"))?;
    let corpus = load(&config, &corpus_path)?;
    let split = make_fewshot_split(&corpus, k, seed)?;
    write_corpus_jsonl(&split.train, args.out.join("train.jsonl"))?;
    write_corpus_jsonl(&split.eval, args.out.join("eval.jsonl"))?;
    let manifest = SplitManifest::from_split(&corpus, &split);
    let inputs = BTreeMap::from([("corpus".to_string(), input(&corpus_path)?)]);
    write_manifest(
        &args.out.join("split-manifest.json"),
        "split",
        &config,
        inputs,
        &manifest,
    )?;
    println!(
        "split {}: {} train ({} per class), {} held out",
        corpus.name(),
        split.train.len(),
        k,
        split.eval.len()
    );
    Ok(())
}

pub fn search(mut config: RunConfig, args: SearchArgs) -> Result<()> {
    apply_corpus_args(&mut config, &args.corpus_args);
    if args.corpus.is_some() {
        config.corpus.train = args.corpus.clone();
    }
    if args.dev.is_some() {
        config.corpus.dev = args.dev.clone();
    }
    if args.templates.is_some() {
        config.search.templates = args.templates.clone();
    }
    if args.k.is_some() {
        config.split.k = args.k;
    }
    if args.m.is_some() {
        config.search.m = args.m;
    }
    if let Some(b) = args.beam {
        config.search.beam_width = b;
    }
    if let Some(f) = args.finalists {
        config.search.finalists = f;
    }
    if let Some(s) = args.seeds_per_template {
        config.search.seeds_per_template = s;
    }
    if args.rank_d.is_some() {
        config.search.rank_d = args.rank_d;
    }
    if let Some(d) = args.dev_d {
        config.search.dev_d = d;
    }
    if let Some(s) = args.max_steps {
        config.train.max_steps = s;
    }
    if let Some(e) = args.eval_every {
        config.train.eval_every = e;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.train.optimizer.learning_rate = lr;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let corpus_path = required(config.corpus.train.clone(), "--corpus")?;
    let dev_path = required(config.corpus.dev.clone(), "--dev")?;
    let templates_path = required(config.search.templates.clone(), "--templates")?;
    let k = required(config.split.k, "--k")?;
    let m = required(config.search.m, "--m")?;
    let seed = required(config.seed, "--seed")?;
    check_paths([
        ("corpus", corpus_path.as_path()),
        ("dev", dev_path.as_path()),
        ("templates", templates_path.as_path()),
    ])?;

    let _lock = OutputLock::acquire(args.out.join(".lock"))?;
    let source = load(&config, &corpus_path)?;
    let dev = load(&config, &dev_path)?;
    let mlm = config.mlm()?;
    let generator = config.generator()?;
    let embedder = config.embedder()?;
    let search_config = SearchConfig {
        k,
        m,
        beam_width: config.search.beam_width,
        finalists: config.search.finalists,
        seeds_per_template: config.search.seeds_per_template,
        rank_d: config.search.rank_d,
        dev_d: config.search.dev_d,
        demo_fraction: config.search.demo_fraction,
        seed,
        train: config.train.clone(),
    };
    let gateways = SearchGateways {
        mlm: &mlm,
        generator: &generator,
        embedder: &embedder,
    };
    let mut store = DirectoryStore::new(&args.out);
    let result = run_search(&source, &dev, &config.verbalizer, &gateways, &search_config, &mut store)?;

    let train = source.restrict_to(format!("{}-train-k{k}", source.name()), &result.provenance.train_ids)?;
    write_corpus_jsonl(&train, args.out.join("train.jsonl"))?;
    let selected = result.selected_finalist();
    let selected_dir = store.checkpoint_dir(&selected.checkpoint);
    println!(
        "selected '{}' (dev F1 {:.4}, held-out F1 {:.4}) -> {}",
        selected.template.pattern(),
        selected.dev_f1,
        selected.eval_f1,
        selected_dir.display()
    );
    if let Some(w) = &result.warning {
        eprintln!("warning: {w}");
    }
    let inputs = BTreeMap::from([
        ("corpus".to_string(), input(&corpus_path)?),
        ("dev".to_string(), input(&dev_path)?),
        ("templates".to_string(), input(&templates_path)?),
    ]);
    write_manifest(
        &args.out.join("search-manifest.json"),
        "search",
        &config,
        inputs,
        &result,
    )?;
    Ok(())
}

pub fn classify(mut config: RunConfig, args: ClassifyArgs) -> Result<()> {
    apply_corpus_args(&mut config, &args.corpus_args);
    if let Some(d) = args.d {
        config.classify.d = d;
    }
    if let Some(f) = args.fraction {
        config.classify.demo_fraction = f;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let seed = required(config.seed, "--seed")?;
    let d = config.classify.d;
    if d == 0 {
        return Err(usage("--d must be at least 1"));
    }
    if d > 1 && args.pool.is_none() {
        return Err(usage("--d above 1 needs a demonstration --pool"));
    }
    let mut paths = vec![("corpus", args.corpus.as_path())];
    if let Some(p) = &args.pool {
        paths.push(("pool", p.as_path()));
    }
    check_paths(paths)?;

    let mut mlm = config.mlm()?;
    let (template, verbalizer, default_id) = match (&args.checkpoint, &args.template) {
        (Some(dir), _) => {
            let ckpt = Checkpoint::load_dir(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            if ckpt.manifest.model_name != mlm.descriptor().model_name {
                bail!(
                    "checkpoint was trained on '{}' but the configured model is '{}'",
                    ckpt.manifest.model_name,
                    mlm.descriptor().model_name
                );
            }
            mlm.load_weights(&ckpt.weights)
                .with_context(|| format!("loading weights from {}", dir.display()))?;
            let id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into());
            (ckpt.manifest.template, ckpt.manifest.verbalizer, id)
        }
        (None, Some(pattern)) => (
            Template::new(pattern.as_str())?,
            config.verbalizer.clone(),
            "zero-shot".into(),
        ),
        (None, None) => return Err(usage("classify needs --checkpoint or --template")),
    };
    let model_id = args.model_id.clone().unwrap_or(default_id);

    let corpus = load(&config, &args.corpus)?;
    let pool = args.pool.as_deref().map(|p| load(&config, p)).transpose()?;
    let embedder = config.embedder()?;
    let embeddings = match &pool {
        Some(pool) => {
            let texts: HashMap<&str, &str> = pool.iter().map(|i| (i.id.as_str(), i.text.as_str())).collect();
            if let Some(x) = corpus
                .iter()
                .find(|x| texts.get(x.id.as_str()).is_some_and(|t| *t != x.text))
            {
                bail!(
                    "instance id '{}' names different texts in the corpus and the pool",
                    x.id
                );
            }
            embed_corpora(&embedder, &[pool, &corpus])?
        }
        None => Default::default(),
    };
    let setup = PromptSetup {
        template: &template,
        verbalizer: &verbalizer,
        binding: bind_verbalizer(&mlm, &verbalizer)?,
        demos: pool.as_ref().map(|pool| DemoSource {
            pool,
            embeddings: &embeddings,
            fraction: config.classify.demo_fraction,
        }),
    };
    let _lock = OutputLock::acquire(with_suffix(&args.out, ".lock"))?;
    let predictions = classify_corpus(&corpus, &setup, &mlm, d, seed)?;
    causal_prompt::ensemble::write_prediction_cache(&args.out, &model_id, &predictions)?;

    let mut inputs = BTreeMap::from([("corpus".to_string(), input(&args.corpus)?)]);
    if let Some(p) = &args.pool {
        inputs.insert("pool".into(), input(p)?);
    }
    if let Some(dir) = &args.checkpoint {
        inputs.insert("checkpoint".into(), input(&dir.join("weights.json"))?);
    }
    #[derive(Serialize)]
    struct ClassifyResult<'a> {
        model_id: &'a str,
        template: &'a Template,
        d: usize,
        instances: usize,
        predicted_positive: usize,
    }
    let result = ClassifyResult {
        model_id: &model_id,
        template: &template,
        d,
        instances: predictions.len(),
        predicted_positive: predictions.iter().filter(|p| p.predicted_label.is_positive()).count(),
    };
    write_manifest(
        &with_suffix(&args.out, ".manifest.json"),
        "classify",
        &config,
        inputs,
        &result,
    )?;
    println!(
        "classified {} instances as '{model_id}' -> {}",
        predictions.len(),
        args.out.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gold_labels(config: &RunConfig, path: &Path) -> Result<Vec<(String, Label)>> {
    load_gold_labels(path, &config.corpus.schema()).with_context(|| format!("loading gold labels {}", path.display()))
}

pub fn fuse(mut config: RunConfig, args: FuseArgs) -> Result<()> {
    apply_corpus_args(&mut config, &args.corpus_args);
    if let Some(n) = args.restarts {
        config.fuse.restarts = n;
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    if args.caches.is_empty() {
        return Err(usage("fuse needs at least one --cache"));
    }
    let mut paths: Vec<(&str, &Path)> = args.caches.iter().map(|p| ("cache", p.as_path())).collect();
    if let Some(g) = &args.gold {
        paths.push(("gold", g.as_path()));
    }
    check_paths(paths)?;
    let mut inputs = BTreeMap::new();
    for (i, p) in args.caches.iter().enumerate() {
        inputs.insert(format!("cache{i:02}"), input(p)?);
    }
    if let Some(g) = &args.gold {
        inputs.insert("gold".into(), input(g)?);
    }

    if args.vote {
        if args.caches.len().is_multiple_of(2) {
            bail!("majority vote needs an odd number of caches, got {}", args.caches.len());
        }
        let _lock = OutputLock::acquire(args.out.join(".lock"))?;
        let mut vectors = Vec::new();
        let mut members = Vec::new();
        for path in &args.caches {
            let records = read_prediction_cache(path)?;
            let models: Vec<&str> = records
                .iter()
                .map(|r| r.model_id.as_str())
                .collect::<HashSet<_>>()
                .into_iter()
                .collect();
            if models.len() != 1 {
                bail!(
                    "{} holds {} models; voting needs one model per cache",
                    path.display(),
                    models.len()
                );
            }
            members.push(models[0].to_string());
            vectors.push(
                records
                    .iter()
                    .map(|r| (r.instance_id.clone(), r.label()))
                    .collect::<Vec<_>>(),
            );
        }
        let aligned = align_to_first(&vectors)?;
        let voted = majority_vote(&aligned)?;
        let records: Vec<LabelRecord> = voted
            .into_iter()
            .map(|(instance_id, label)| LabelRecord { instance_id, label })
            .collect();
        write_jsonl(args.out.join("vote-predictions.jsonl"), &records)?;
        let report = match &args.gold {
            Some(g) => Some(report_against_gold(&gold_labels(&config, g)?, &label_map(&records)?)?),
            None => None,
        };
        #[derive(Serialize)]
        struct VoteResult {
            members: Vec<String>,
            instances: usize,
            metrics: Option<causal_prompt::MetricsReport>,
        }
        let result = VoteResult {
            members,
            instances: records.len(),
            metrics: report.clone(),
        };
        write_manifest(
            &args.out.join("vote-manifest.json"),
            "fuse --vote",
            &config,
            inputs,
            &result,
        )?;
        println!(
            "majority vote over {} caches, {} instances",
            args.caches.len(),
            records.len()
        );
        if let Some(r) = report {
            println!("{r}");
        }
        return Ok(());
    }

    let seed = required(config.seed, "--seed")?;
    let gold_path = required(args.gold.clone(), "--gold")?;
    let gold = gold_labels(&config, &gold_path)?;
    let mut records = Vec::new();
    for path in &args.caches {
        records.extend(read_prediction_cache(path)?);
    }
    let matrix = PredictionMatrix::from_records(&records, &gold)?;
    let _lock = OutputLock::acquire(args.out.join(".lock"))?;
    let outcome = topn_fusion(&matrix, config.fuse.restarts, seed)?;
    let members: Vec<usize> = outcome
        .result
        .member_ids
        .iter()
        .map(|id| {
            matrix
                .model_ids()
                .iter()
                .position(|m| m == id)
                .expect("member of matrix")
        })
        .collect();
    let fused = average_probs(&matrix, &members)?;
    causal_prompt::ensemble::write_prediction_cache(args.out.join("fused-predictions.jsonl"), "ensemble", &fused)?;
    write_jsonl(args.out.join("fusion-restarts.jsonl"), &outcome.restarts)?;
    #[derive(Serialize)]
    struct FuseResult<'a> {
        ensemble: &'a causal_prompt::ensemble::EnsembleResult,
        model_f1: BTreeMap<&'a str, f64>,
        restarts: usize,
    }
    let model_f1 = matrix
        .model_ids()
        .iter()
        .map(String::as_str)
        .zip(matrix.model_f1s())
        .collect();
    let result = FuseResult {
        ensemble: &outcome.result,
        model_f1,
        restarts: config.fuse.restarts,
    };
    write_manifest(&args.out.join("fusion-manifest.json"), "fuse", &config, inputs, &result)?;
    println!(
        "ensemble of {} models [{}], fused F1 {:.4}",
        outcome.result.member_ids.len(),
        outcome.result.member_ids.join(", "),
        outcome.result.fused_f1
    );
    Ok(())
}

/// Reorders every vector to the first vector's instance order.
fn align_to_first(vectors: &[Vec<(String, Label)>]) -> Result<Vec<Vec<(String, Label)>>> {
    let order: Vec<&String> = vectors[0].iter().map(|(id, _)| id).collect();
    vectors
        .iter()
        .enumerate()
        .map(|(v, vector)| {
            let map: HashMap<&String, Label> = vector.iter().map(|(id, l)| (id, *l)).collect();
            if map.len() != order.len() {
                bail!(
                    "cache {v} covers {} instances, cache 0 covers {}",
                    map.len(),
                    order.len()
                );
            }
            order
                .iter()
                .map(|id| {
                    map.get(id)
                        .map(|l| ((*id).clone(), *l))
                        .ok_or_else(|| anyhow!("cache {v} has no prediction for instance '{id}'"))
                })
                .collect()
        })
        .collect()
}

fn label_map(records: &[LabelRecord]) -> Result<HashMap<String, Label>> {
    let mut map = HashMap::new();
    for r in records {
        if map.insert(r.instance_id.clone(), r.label).is_some() {
            bail!("instance '{}' predicted twice", r.instance_id);
        }
    }
    Ok(map)
}

fn report_against_gold(
    gold: &[(String, Label)],
    predicted: &HashMap<String, Label>,
) -> Result<causal_prompt::MetricsReport> {
    let gold_ids: HashSet<&str> = gold.iter().map(|(id, _)| id.as_str()).collect();
    let mut missing: Vec<&str> = gold
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !predicted.contains_key(*id))
        .collect();
    let mut extra: Vec<&str> = predicted
        .keys()
        .map(String::as_str)
        .filter(|id| !gold_ids.contains(id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort_unstable();
        extra.sort_unstable();
        bail!(
            "prediction ids do not match gold ids; missing predictions: [{}]; unknown ids: [{}]",
            missing.join(", "),
            extra.join(", ")
        );
    }
    let preds: Vec<Label> = gold.iter().map(|(id, _)| predicted[id]).collect();
    let labels: Vec<Label> = gold.iter().map(|(_, l)| *l).collect();
    Ok(metrics(confusion(&preds, &labels)?)?)
}

/// Reads either probability cache lines or hard-label lines.
fn read_predicted_labels(path: &Path, model_id: Option<&str>) -> Result<HashMap<String, Label>> {
    let values: Vec<serde_json::Value> = read_jsonl(path)?;
    if values.iter().all(|v| v.get("label").is_some()) {
        let records: Vec<LabelRecord> = values
            .into_iter()
            .map(serde_json::from_value)
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing label records in {}", path.display()))?;
        return label_map(&records);
    }
    let records: Vec<CacheRecord> = values
        .into_iter()
        .map(serde_json::from_value)
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("parsing prediction cache {}", path.display()))?;
    let models: std::collections::BTreeSet<&str> = records.iter().map(|r| r.model_id.as_str()).collect();
    let chosen = match model_id {
        Some(m) if models.contains(m) => m.to_string(),
        Some(m) => bail!("model '{m}' not found in {}", path.display()),
        None if models.len() == 1 => models.iter().next().expect("one model").to_string(),
        None => bail!(
            "{} holds several models ({}); pick one with --model-id",
            path.display(),
            models.into_iter().collect::<Vec<_>>().join(", ")
        ),
    };
    let selected: Vec<LabelRecord> = records
        .iter()
        .filter(|r| r.model_id == chosen)
        .map(|r| LabelRecord {
            instance_id: r.instance_id.clone(),
            label: r.label(),
        })
        .collect();
    label_map(&selected)
}

pub fn eval(mut config: RunConfig, args: EvalArgs) -> Result<()> {
    apply_corpus_args(&mut config, &args.corpus_args);
    if args.consistency {
        let rows: Vec<ReportedRow> = match &args.rows {
            Some(path) => read_jsonl(path)?,
            None => submission_rows(),
        };
        let deviations = consistency_check(&rows);
        let mut worst: f64 = 0.0;
        for (row, dev) in rows.iter().zip(&deviations) {
            println!(
                "{:<24} P={:>6.2} R={:>6.2} F1={:>6.2} |dev|={:.4}",
                row.name, row.precision, row.recall, row.f1, dev
            );
            worst = worst.max(*dev);
        }
        println!("max deviation {worst:.4} (tolerance {})", args.tolerance);
        if worst > args.tolerance {
            let offenders: Vec<&str> = rows
                .iter()
                .zip(&deviations)
                .filter(|(_, dev)| **dev > args.tolerance)
                .map(|(row, _)| row.name.as_str())
                .collect();
            bail!(
                "F1 deviates from the harmonic mean of P and R by up to {worst:.4} in: {}",
                offenders.join(", ")
            );
        }
        return Ok(());
    }
    let gold_path = required(args.gold.clone(), "--gold")?;
    let pred_path = required(args.predictions.clone(), "--predictions")?;
    check_paths([("gold", gold_path.as_path()), ("predictions", pred_path.as_path())])?;
    let gold = gold_labels(&config, &gold_path)?;
    let predicted = read_predicted_labels(&pred_path, args.model_id.as_deref())?;
    let report = report_against_gold(&gold, &predicted)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{report}");
    }
    if let Some(out) = &args.out {
        let inputs = BTreeMap::from([
            ("gold".to_string(), input(&gold_path)?),
            ("predictions".to_string(), input(&pred_path)?),
        ]);
        write_manifest(out, "eval", &config, inputs, &report)?;
    }
    Ok(())
}
