use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_causal-prompt"));
    cmd.env_remove("CAUSAL_PROMPT_CACHE_DIR");
    cmd
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_corpus(path: &Path, prefix: &str, positives: usize, negatives: usize) {
    let mut body = String::from("id,text,label\n");
    for i in 0..positives {
        body.push_str(&format!("{prefix}p{i},the storm {i} caused damage {}, 1\n", i % 7).replace(", 1", ",1"));
    }
    for i in 0..negatives {
        body.push_str(&format!("{prefix}n{i},the market {i} opened on day {},0\n", i % 5));
    }
    fs::write(path, body).unwrap();
}

fn write_templates(path: &Path, n: usize) {
    let body: String = (0..n).map(|i| format!("[x] option {i} is [MASK]\n")).collect();
    fs::write(path, body).unwrap();
}

const SMALL_TRAIN: &[&str] = &[
    "--max-steps",
    "20",
    "--eval-every",
    "10",
    "--batch-size",
    "4",
    "--lr",
    "0.01",
];

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn split_counts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("train.csv"), "", 1603, 1322);
    ok(
        dir.path(),
        &[
            "split",
            "--corpus",
            "train.csv",
            "--k",
            "256",
            "--seed",
            "13",
            "--out",
            "a",
        ],
    );
    ok(
        dir.path(),
        &[
            "split",
            "--corpus",
            "train.csv",
            "--k",
            "256",
            "--seed",
            "13",
            "--out",
            "b",
        ],
    );
    let manifest = read_json(&dir.path().join("a/split-manifest.json"));
    assert_eq!(manifest["result"]["train_ids"].as_array().unwrap().len(), 512);
    assert_eq!(manifest["result"]["eval_ids"].as_array().unwrap().len(), 2925 - 512);
    assert!(manifest["config"]["split"]["k"] == 256);
    assert!(manifest["inputs"]["corpus"]["sha256"].as_str().unwrap().len() == 64);
    for f in ["split-manifest.json", "train.jsonl", "eval.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    assert!(!dir.path().join("a/.lock").exists());
}

#[test]
fn split_usage_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("train.csv"), "", 10, 10);
    let out = run_in(
        dir.path(),
        &["split", "--corpus", "train.csv", "--seed", "1", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--k"));
    let out = run_in(
        dir.path(),
        &["split", "--corpus", "train.csv", "--k", "nope", "--out", "o"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(
        dir.path(),
        &[
            "split",
            "--corpus",
            "train.csv",
            "--k",
            "11",
            "--seed",
            "1",
            "--out",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("only 10 available"));
    let out = run_in(
        dir.path(),
        &[
            "split",
            "--corpus",
            "missing.csv",
            "--k",
            "1",
            "--seed",
            "1",
            "--out",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("train.csv"), "", 20, 20);
    fs::write(
        dir.path().join("run.toml"),
        "seed = 5\n[corpus]\ntrain = \"train.csv\"\n[split]\nk = 3\n",
    )
    .unwrap();
    ok(dir.path(), &["--config", "run.toml", "split", "--out", "a"]);
    ok(dir.path(), &["--config", "run.toml", "split", "--k", "4", "--out", "b"]);
    assert_eq!(read_json(&dir.path().join("a/split-manifest.json"))["result"]["k"], 3);
    assert_eq!(read_json(&dir.path().join("b/split-manifest.json"))["result"]["k"], 4);
    assert_eq!(
        read_json(&dir.path().join("b/split-manifest.json"))["config"]["seed"],
        5
    );
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("train.csv"), "", 5, 5);
    fs::create_dir_all(dir.path().join("o")).unwrap();
    fs::write(dir.path().join("o/.lock"), "").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "split",
            "--corpus",
            "train.csv",
            "--k",
            "1",
            "--seed",
            "1",
            "--out",
            "o",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

fn search_fixture(dir: &Path, templates: usize) {
    write_corpus(&dir.join("train.csv"), "", 30, 30);
    write_corpus(&dir.join("dev.csv"), "dev-", 8, 6);
    write_templates(&dir.join("candidates.txt"), templates);
}

fn search_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "search",
        "--corpus",
        "train.csv",
        "--dev",
        "dev.csv",
        "--templates",
        "candidates.txt",
        "--k",
        "8",
        "--m",
        "4",
        "--seed",
        "21",
        "--out",
        out,
    ];
    args.extend_from_slice(SMALL_TRAIN);
    args.extend_from_slice(extra);
    args
}

#[test]
fn search_lists_ten_finalists() {
    let dir = tempfile::tempdir().unwrap();
    search_fixture(dir.path(), 12);
    ok(dir.path(), &search_args("s", &[]));
    let m = read_json(&dir.path().join("s/search-manifest.json"));
    let finalists = m["result"]["finalists"].as_array().unwrap();
    assert_eq!(finalists.len(), 10);
    assert_eq!(m["result"]["ranking"].as_array().unwrap().len(), 12);
    let selected = m["result"]["selected"].as_u64().unwrap() as usize;
    let best = finalists[selected]["dev_f1"].as_f64().unwrap();
    assert!(finalists.iter().all(|f| f["dev_f1"].as_f64().unwrap() <= best));
    let key = finalists[selected]["checkpoint"].as_str().unwrap();
    assert!(dir.path().join("s/checkpoints").join(key).join("weights.json").exists());
    assert_eq!(
        fs::read_to_string(dir.path().join("s/train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        16
    );

    ok(dir.path(), &search_args("one", &["--beam", "1"]));
    let m = read_json(&dir.path().join("one/search-manifest.json"));
    assert_eq!(m["result"]["ranking"].as_array().unwrap().len(), 1);
    assert_eq!(m["result"]["finalists"].as_array().unwrap().len(), 1);
}

#[test]
fn interrupted_search_resumes_from_stage_state() {
    let dir = tempfile::tempdir().unwrap();
    search_fixture(dir.path(), 5);
    ok(dir.path(), &search_args("s", &[]));
    let complete = fs::read_to_string(dir.path().join("s/search-manifest.json")).unwrap();

    // roll the run back to "three finalists trained", as if it had been killed
    let state_path = dir.path().join("s/search-state.json");
    let mut state = read_json(&state_path);
    state["finalists"].as_array_mut().unwrap().truncate(3);
    fs::write(&state_path, serde_json::to_string_pretty(&state).unwrap()).unwrap();
    fs::remove_file(dir.path().join("s/search-manifest.json")).unwrap();
    for key in ["finalist-04", "finalist-05"] {
        fs::remove_dir_all(dir.path().join("s/checkpoints").join(key)).unwrap();
    }
    ok(dir.path(), &search_args("s", &[]));
    assert_eq!(
        fs::read_to_string(dir.path().join("s/search-manifest.json")).unwrap(),
        complete
    );
    assert!(dir.path().join("s/checkpoints/finalist-05/weights.json").exists());
}

#[test]
fn classify_writes_normalized_cache() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("pool.csv"), "pool-", 4, 4);
    write_corpus(&dir.path().join("items.csv"), "x-", 5, 5);
    ok(
        dir.path(),
        &[
            "classify",
            "--corpus",
            "items.csv",
            "--pool",
            "pool.csv",
            "--template",
            "[x] so [MASK]",
            "--d",
            "3",
            "--seed",
            "2",
            "--out",
            "c.jsonl",
        ],
    );
    let body = fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(body.lines().count(), 10);
    for line in body.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let s = v["p_positive"].as_f64().unwrap() + v["p_negative"].as_f64().unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(v["model_id"], "zero-shot");
    }
    assert!(dir.path().join("c.jsonl.manifest.json").exists());
    assert!(!dir.path().join("c.jsonl.lock").exists());
}

#[test]
fn single_pair_pool_makes_d_irrelevant() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("pool.csv"), "pool-", 1, 1);
    write_corpus(&dir.path().join("items.csv"), "x-", 3, 3);
    for (d, out) in [("1", "d1.jsonl"), ("3", "d3.jsonl")] {
        ok(
            dir.path(),
            &[
                "classify",
                "--corpus",
                "items.csv",
                "--pool",
                "pool.csv",
                "--template",
                "[x] so [MASK]",
                "--d",
                d,
                "--seed",
                "4",
                "--out",
                out,
            ],
        );
    }
    assert_eq!(
        fs::read(dir.path().join("d1.jsonl")).unwrap(),
        fs::read(dir.path().join("d3.jsonl")).unwrap()
    );
}

#[test]
fn unreadable_checkpoint_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("items.csv"), "x-", 2, 2);
    let ckpt = dir.path().join("ckpt");
    fs::create_dir_all(&ckpt).unwrap();
    fs::write(ckpt.join("manifest.json"), "{ not json").unwrap();
    let out = run_in(
        dir.path(),
        &[
            "classify",
            "--corpus",
            "items.csv",
            "--checkpoint",
            "ckpt",
            "--seed",
            "1",
            "--out",
            "c.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ckpt"), "{err}");
}

/// Three caches over six instances with gold P,P,N,P,N,N, where A and B err on
/// disjoint pairs that averaging repairs, while C errs on both pairs.
fn fusion_fixture(dir: &Path) -> Vec<PathBuf> {
    let gold = ["1", "1", "0", "1", "0", "0"];
    let mut body = String::from("id,label\n");
    for (i, g) in gold.iter().enumerate() {
        body.push_str(&format!("i{i},{g}\n"));
    }
    fs::write(dir.join("gold.csv"), body).unwrap();
    let models = [
        ("A", [0.9, 0.4, 0.6, 0.9, 0.1, 0.2]),
        ("B", [0.9, 0.9, 0.1, 0.4, 0.6, 0.2]),
        ("C", [0.9, 0.2, 0.8, 0.2, 0.8, 0.1]),
    ];
    models
        .iter()
        .map(|(name, ps)| {
            let path = dir.join(format!("{name}.jsonl"));
            let body: String = ps
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    format!(
                        "{{\"model_id\":\"{name}\",\"instance_id\":\"i{i}\",\"p_positive\":{p},\"p_negative\":{}}}\n",
                        1.0 - p
                    )
                })
                .collect();
            fs::write(&path, body).unwrap();
            path
        })
        .collect()
}

#[test]
fn fuse_finds_complementary_pair_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    fusion_fixture(dir.path());
    let args = |out: &'static str| {
        vec![
            "fuse",
            "--gold",
            "gold.csv",
            "--cache",
            "A.jsonl",
            "--cache",
            "B.jsonl",
            "--cache",
            "C.jsonl",
            "--restarts",
            "1000",
            "--seed",
            "7",
            "--out",
            out,
        ]
    };
    ok(dir.path(), &args("f1"));
    ok(dir.path(), &args("f2"));
    let m = read_json(&dir.path().join("f1/fusion-manifest.json"));
    let mut members: Vec<String> = m["result"]["ensemble"]["member_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    members.sort();
    assert_eq!(members, ["A", "B"]);
    assert_eq!(m["result"]["ensemble"]["fused_f1"], 1.0);
    for f in [
        "fusion-manifest.json",
        "fused-predictions.jsonl",
        "fusion-restarts.jsonl",
    ] {
        assert_eq!(
            fs::read(dir.path().join("f1").join(f)).unwrap(),
            fs::read(dir.path().join("f2").join(f)).unwrap()
        );
    }
    assert_eq!(
        fs::read_to_string(dir.path().join("f1/fusion-restarts.jsonl"))
            .unwrap()
            .lines()
            .count(),
        1000
    );

    let out = ok(
        dir.path(),
        &[
            "eval",
            "--gold",
            "gold.csv",
            "--predictions",
            "f1/fused-predictions.jsonl",
            "--json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["f1"], 1.0);
}

#[test]
fn vote_needs_odd_count() {
    let dir = tempfile::tempdir().unwrap();
    fusion_fixture(dir.path());
    ok(
        dir.path(),
        &[
            "fuse", "--vote", "--gold", "gold.csv", "--cache", "A.jsonl", "--cache", "B.jsonl", "--cache", "C.jsonl",
            "--out", "v",
        ],
    );
    let body = fs::read_to_string(dir.path().join("v/vote-predictions.jsonl")).unwrap();
    let labels: Vec<String> = body
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["label"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    // per instance: A,B,C votes -> majority
    // i0 PPP, i1 NPN, i2 PNP, i3 PNN, i4 NPP, i5 NNN
    assert_eq!(
        labels,
        ["positive", "negative", "positive", "negative", "positive", "negative"]
    );
    let out = ok(
        dir.path(),
        &[
            "eval",
            "--gold",
            "gold.csv",
            "--predictions",
            "v/vote-predictions.jsonl",
            "--json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["counts"]["tp"], 1);

    let out = run_in(
        dir.path(),
        &[
            "fuse", "--vote", "--cache", "A.jsonl", "--cache", "B.jsonl", "--out", "v2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("odd"));
}

#[test]
fn eval_reports_and_checks() {
    let dir = tempfile::tempdir().unwrap();
    fusion_fixture(dir.path());
    let perfect: String = ["positive", "positive", "negative", "positive", "negative", "negative"]
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{{\"instance_id\":\"i{i}\",\"label\":\"{l}\"}}\n"))
        .collect();
    fs::write(dir.path().join("perfect.jsonl"), perfect).unwrap();
    let out = ok(
        dir.path(),
        &[
            "eval",
            "--gold",
            "gold.csv",
            "--predictions",
            "perfect.jsonl",
            "--json",
            "--out",
            "r.json",
        ],
    );
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    for key in ["precision", "recall", "accuracy", "f1"] {
        assert_eq!(report[key], 1.0, "{key}");
    }
    assert!(dir.path().join("r.json").exists());

    // the shipped table has one row whose F1 is 0.0555pp off its P and R
    let out = run_in(dir.path(), &["eval", "--consistency"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max deviation 0.0555"));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("in: Prompt-1000 dev\n") || err.trim_end().ends_with("in: Prompt-1000 dev"),
        "{err}"
    );
    let out = ok(dir.path(), &["eval", "--consistency", "--tolerance", "0.06"]);
    assert!(out.contains("max deviation"));
    fs::write(
        dir.path().join("fine.jsonl"),
        "{\"name\":\"fine\",\"precision\":60,\"recall\":40,\"f1\":48}\n",
    )
    .unwrap();
    ok(dir.path(), &["eval", "--consistency", "--rows", "fine.jsonl"]);
    fs::write(
        dir.path().join("rows.jsonl"),
        "{\"name\":\"off\",\"precision\":50,\"recall\":50,\"f1\":60}\n",
    )
    .unwrap();
    let out = run_in(dir.path(), &["eval", "--consistency", "--rows", "rows.jsonl"]);
    assert_eq!(out.status.code(), Some(1));

    fs::write(
        dir.path().join("short.jsonl"),
        "{\"instance_id\":\"i0\",\"label\":\"positive\"}\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["eval", "--gold", "gold.csv", "--predictions", "short.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("i1") && err.contains("i5"), "{err}");

    let out = run_in(dir.path(), &["eval", "--gold", "gold.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

/// split -> search -> classify -> fuse -> eval, twice, in two directories.
fn full_pipeline(root: &Path) {
    search_fixture(root, 4);
    ok(
        root,
        &[
            "split",
            "--corpus",
            "train.csv",
            "--k",
            "8",
            "--seed",
            "21",
            "--out",
            "split",
        ],
    );
    let mut args = search_args("search", &["--finalists", "3"]);
    args.extend_from_slice(&[]);
    ok(root, &args);
    let m = read_json(&root.join("search/search-manifest.json"));
    let keys: Vec<String> = m["result"]["finalists"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["checkpoint"].as_str().unwrap().to_string())
        .collect();
    let mut cache_args = vec!["fuse".to_string(), "--gold".into(), "dev.csv".into()];
    for key in &keys {
        let ckpt = format!("search/checkpoints/{key}");
        let out = format!("{key}.jsonl");
        ok(
            root,
            &[
                "classify",
                "--corpus",
                "dev.csv",
                "--pool",
                "search/train.jsonl",
                "--checkpoint",
                &ckpt,
                "--d",
                "2",
                "--seed",
                "21",
                "--out",
                &out,
            ],
        );
        cache_args.extend(["--cache".into(), out]);
    }
    cache_args.extend([
        "--restarts".into(),
        "200".into(),
        "--seed".into(),
        "21".into(),
        "--out".into(),
        "fused".into(),
    ]);
    let refs: Vec<&str> = cache_args.iter().map(String::as_str).collect();
    ok(root, &refs);
    ok(
        root,
        &[
            "eval",
            "--gold",
            "dev.csv",
            "--predictions",
            "fused/fused-predictions.jsonl",
            "--out",
            "report.json",
        ],
    );
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    let ta = tree(a.path());
    let tb = tree(b.path());
    assert!(ta.len() > 15);
    assert_eq!(ta.len(), tb.len());
    for ((pa, ba), (pb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs between runs", pa.display());
    }
}
