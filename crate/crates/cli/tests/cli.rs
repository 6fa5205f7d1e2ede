use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relpatch"));
    // keep the caller's RELPATCH_* settings out of the tests
    for (k, _) in std::env::vars() {
        if k.starts_with("RELPATCH_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "relpatch {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        run(&["fixture", "--out", p(&root.join("fx")), "--n", "20"]);
        run(&[
            "build-data",
            "--queries", p(&root.join("fx/queries.tsv")),
            "--corpus", p(&root.join("fx/corpus.tsv")),
            "--qrels", p(&root.join("fx/qrels.txt")),
            "--n", "8",
            "--out", p(&root.join("data")),
        ]);
        Fixture { _tmp: tmp, root }
    }

    fn path(&self, rel: &str) -> String {
        p(&self.root.join(rel)).to_string()
    }

    fn model_args(&self) -> Vec<String> {
        vec![
            "--model".into(),
            self.path("fx/model"),
            "--tokenizer".into(),
            self.path("fx/tokenizer.json"),
            "--template".into(),
            "fixture".into(),
            "--triplets".into(),
            self.path("data/triplets.jsonl"),
        ]
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.model_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn data(path: &Path) -> Value {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["data"].clone()
}

#[test]
fn build_data_writes_the_requested_count_and_is_reproducible() {
    let f = Fixture::new();
    let text = std::fs::read_to_string(f.root.join("data/triplets.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# tool=relpatch"));
    assert_eq!(lines.len(), 1 + 8);
    let report = data(&f.root.join("data/build_report.json"));
    assert_eq!(report["written"], 8);

    let again = f.root.join("data");
    let before = files(&again);
    std::fs::remove_dir_all(&again).unwrap();
    run(&[
        "build-data",
        "--queries", &f.path("fx/queries.tsv"),
        "--corpus", &f.path("fx/corpus.tsv"),
        "--qrels", &f.path("fx/qrels.txt"),
        "--n", "8",
        "--out", &f.path("data"),
    ]);
    assert_eq!(files(&again), before);
}

#[test]
fn trace_heads_and_eval_pipeline() {
    let f = Fixture::new();
    let grids = f.path("grids");
    let common = ["--style", "pointwise", "--out", &grids];
    f.run("trace", &[&common[..], &["--granularity", "head", "--positions", "last,query"]].concat());
    f.run("trace", &[&common[..], &["--granularity", "attn-score"]].concat());
    f.run("trace", &[&common[..], &["--site", "attn_out", "--positions", "query,last"]].concat());

    let circuit = data(&f.root.join("fx/circuit.json"));
    let outputs: Vec<[u64; 2]> = circuit["circuit"]["output_heads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| [h["layer"].as_u64().unwrap(), h["head"].as_u64().unwrap()])
        .collect();
    let last = data(&f.root.join("grids/grid_pointwise_head_out_last.json"));
    let mut best = (0.0, [0, 0]);
    for (r, row) in last["mean_ie"].as_array().unwrap().iter().enumerate() {
        for (c, v) in row.as_array().unwrap().iter().enumerate() {
            if v.as_f64().unwrap() > best.0 {
                best = (v.as_f64().unwrap(), [r as u64, c as u64]);
            }
        }
    }
    assert!(outputs.contains(&best.1), "{best:?}");

    let layer = data(&f.root.join("grids/grid_pointwise_attn_out.json"));
    assert_eq!(layer["rows"].as_array().unwrap().len(), 6);
    assert_eq!(layer["cols"], serde_json::json!(["query", "last"]));
    let csv = std::fs::read_to_string(f.root.join("grids/grid_pointwise_attn_out.csv")).unwrap();
    assert!(csv.starts_with("# tool=relpatch"));
    assert!(csv.lines().nth(1).unwrap() == "layer,col,mean_ie,n");

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(f.root.join("grids/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 3);

    let heads_out = f.path("heads");
    f.run("heads", &["--style", "pointwise", "--grids", &grids, "--out", &heads_out, "--k", "2"]);
    let corr = data(&f.root.join("heads/correlation_pointwise.json"));
    assert_eq!(corr["heads"].as_array().unwrap().len(), 48);
    let unembed = data(&f.root.join("heads/unembed_pointwise.json"));
    assert_eq!(unembed[0]["top"][0]["token"].as_str().unwrap().trim(), "yes");

    let plan = f.root.join("plan.json");
    let rows = serde_json::json!({"rows": [
        {"name": "Random-5", "kind": "random", "k": 5, "seeds": [0, 1]},
        {"name": "Last-5", "kind": "top", "group": "last", "k": 5},
    ]});
    std::fs::write(&plan, rows.to_string()).unwrap();
    let eval_out = f.path("eval");
    let out = f.run("eval", &["--style", "pointwise", "--grids", &grids, "--plan", p(&plan), "--out", &eval_out]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("Last-5"), "{table}");
    let report = data(&f.root.join("eval/eval_report.json"));
    let rows = report["rows"].as_array().unwrap();
    let value = |name: &str| {
        rows.iter().find(|r| r["name"] == name).unwrap()["cells"][0]["value"]
            .as_f64()
            .unwrap()
    };
    assert!(value("Last-5") < value("Random-5"));
    assert_eq!(value("Full model"), 1.0);
}

#[test]
fn judge_and_rerank_outputs() {
    let f = Fixture::new();
    let out = f.path("judge");
    f.run("judge", &["--out", &out]);
    let j = data(&f.root.join("judge/judge_pairwise.json"));
    assert_eq!(j["n"], 16);
    assert!(j["f1"].as_f64().unwrap() >= 0.9);

    let rr = f.path("rerank");
    run(&[
        "rerank",
        "--model", &f.path("fx/model"),
        "--tokenizer", &f.path("fx/tokenizer.json"),
        "--template", "fixture",
        "--queries", &f.path("fx/queries.tsv"),
        "--corpus", &f.path("fx/corpus.tsv"),
        "--qrels", &f.path("fx/qrels.txt"),
        "--run", &f.path("fx/run.txt"),
        "--n", "4",
        "--out", &rr,
    ]);
    let s = data(&f.root.join("rerank/rerank_pointwise.json"));
    assert!(s["ndcg"].as_f64().unwrap() > s["first_stage_ndcg"].as_f64().unwrap());
    let run_text = std::fs::read_to_string(f.root.join("rerank/rerank_pointwise.run")).unwrap();
    assert_eq!(run_text.lines().filter(|l| !l.starts_with('#')).count(), 4 * 20);
}

#[test]
fn invalid_configuration_fails_before_compute() {
    let f = Fixture::new();
    let out = f.root.join("never");
    let r = bin()
        .args(["trace", "--model", &f.path("fx/model"), "--tokenizer", &f.path("fx/tokenizer.json")])
        .args(["--triplets", &f.path("missing.jsonl"), "--out", p(&out)])
        .output()
        .unwrap();
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("--triplets"), "{err}");
    assert!(!out.exists());

    let r = bin()
        .args(["trace", "--granularity", "neuron", "--out", p(&out)])
        .output()
        .unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("granularity"));

    let r = bin()
        .args(["heads", "--model", &f.path("fx/model"), "--tokenizer", &f.path("fx/tokenizer.json")])
        .args(["--template", "fixture", "--triplets", &f.path("data/triplets.jsonl")])
        .args(["--grids", &f.path("data"), "--out", p(&out)])
        .output()
        .unwrap();
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("relpatch trace --granularity head"), "{err}");
    assert!(!out.exists());
}

#[test]
fn environment_and_config_file_supply_settings() {
    let f = Fixture::new();
    let cfg = f.root.join("judge.json");
    let settings = serde_json::json!({
        "model": f.path("fx/model"),
        "tokenizer": f.path("fx/tokenizer.json"),
        "template": "fixture",
        "triplets": f.path("data/triplets.jsonl"),
        "style": "pairwise",
        "n": 3,
    });
    std::fs::write(&cfg, settings.to_string()).unwrap();
    let out = f.root.join("envjudge");
    let r = bin()
        .args(["judge", "--config", p(&cfg), "--n", "5"])
        .env("RELPATCH_OUT", p(&out))
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let j = data(&out.join("judge_pairwise.json"));
    // the flag beats the file
    assert_eq!(j["n"], 10);
    assert!(!out.join("judge_pointwise.json").exists());

    std::fs::write(&cfg, r#"{"modle": "x"}"#).unwrap();
    let r = bin().args(["judge", "--config", p(&cfg)]).output().unwrap();
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("modle"));
}

#[test]
fn reruns_are_byte_identical() {
    let f = Fixture::new();
    let out = f.root.join("t");
    let go = || {
        f.run("trace", &["--site", "attn_out,mlp_out", "--n", "4", "--out", p(&out)]);
        f.run("judge", &["--n", "4", "--out", p(&out)]);
    };
    go();
    let first = files(&out);
    std::fs::remove_dir_all(&out).unwrap();
    go();
    assert_eq!(files(&out), first);

    // a thread count change is not a config change
    std::fs::remove_dir_all(&out).unwrap();
    f.run("judge", &["--n", "4", "--out", p(&out), "--threads", "2"]);
    let judge = std::fs::read(out.join("judge_pointwise.json")).unwrap();
    assert_eq!(judge, first[Path::new("judge_pointwise.json")]);
}
