use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

/// Small corpus, short schedules: each full run takes a few seconds.
const QUICK_CONFIG: &str = r#"
name = "quick"
seed = 3

[corpus]
kind = "synthetic"
class_names = ["neutral", "joy", "anger", "fear"]
class_proportions = [0.5, 0.3, 0.17, 0.03]
num_dialogues = 30
utterances_per_dialogue = [6, 10]
speakers_per_dialogue = [2, 3]
class_separation = 3.0
noise_scale = 1.0
dims = { text = 12, audio = 6, visual = 6 }
long_tail = true
sessions = 5
seed = 3

[hyper]
max_epochs = 2
boost_rounds = 3

[gan]
steps = 10

[gan.classifier]
epochs = 3

[fusion]
epochs = 2

[gnn]
width = 8
"#;

fn cberl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cberl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("CBERL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cberl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_spec(dir: &Path) -> std::path::PathBuf {
    let cfg: toml::Value = toml::from_str(QUICK_CONFIG).unwrap();
    let mut spec = cfg["corpus"].clone();
    spec.as_table_mut().unwrap().remove("kind");
    let path = dir.join("spec.toml");
    std::fs::write(&path, toml::to_string(&spec).unwrap()).unwrap();
    path
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_and_stats_agree() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let corpus = dir.path().join("corpus");
    let hist: Value = serde_json::from_str(&ok(&["corpus", "synth", "--spec", p(&spec), "--out", p(&corpus)])).unwrap();
    let stats: Value = serde_json::from_str(&ok(&["corpus", "stats", p(&corpus)])).unwrap();
    assert_eq!(stats["dialogues"], 30);
    assert_eq!(stats["histogram"], hist);
    assert_eq!(hist["counts"].as_array().unwrap().len(), 4);
}

#[test]
fn seed_variable_overrides_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let synth = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cberl"));
        cmd.args(["corpus", "synth", "--spec", p(&spec), "--out", p(&out)]);
        match seed {
            Some(s) => cmd.env("CBERL_SEED", s),
            None => cmd.env_remove("CBERL_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out.join("utterances.jsonl")).unwrap()
    };
    let base = synth("a", None);
    assert_eq!(base, synth("b", Some("3")));
    assert_ne!(base, synth("c", Some("4")));
}

#[test]
fn graph_inspect_dumps_nodes_edges_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["corpus", "synth", "--spec", p(&spec), "--out", p(&corpus)]);
    let dump: Value = serde_json::from_str(&ok(&[
        "graph", "inspect", "--corpus", p(&corpus), "--dialogue", "2", "--past", "1", "--future", "0",
        "--mask-rate", "0.5", "--seed", "7",
    ]))
    .unwrap();
    let n = dump["nodes"].as_array().unwrap().len();
    let edges = dump["edges"].as_array().unwrap();
    // One self-loop per node plus one edge to the previous node.
    assert_eq!(edges.len(), 2 * n - 1);
    let masked = dump["mask"].as_array().unwrap().iter().filter(|m| m.as_bool().unwrap()).count();
    assert_eq!(masked, (0.5 * n as f64).round() as usize);
    assert!(edges.iter().all(|e| e["source"].as_u64() <= e["target"].as_u64()));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    for args in [
        vec!["corpus", "stats", p(&missing)],
        vec!["run", "--config", p(&missing)],
        vec!["export-emb", "--run", p(dir.path()), "--out", p(&missing)],
    ] {
        let out = cberl(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    }
    let spec = write_spec(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["corpus", "synth", "--spec", p(&spec), "--out", p(&corpus)]);
    let out = cberl(&["graph", "inspect", "--corpus", p(&corpus), "--mask-rate", "1.5"]);
    assert!(!out.status.success());
}

#[test]
fn augmenter_and_fusion_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    std::fs::write(&config, QUICK_CONFIG).unwrap();
    let spec = write_spec(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["corpus", "synth", "--spec", p(&spec), "--out", p(&corpus)]);

    let gan = dir.path().join("gan.ckpt");
    ok(&["augment", "train", "--corpus", p(&corpus), "--out", p(&gan), "--config", p(&config)]);
    let synthetic = dir.path().join("synthetic");
    let hist: Value =
        serde_json::from_str(&ok(&["augment", "generate", "--ckpt", p(&gan), "--counts", "[0, 2, 0, 5]", "--out", p(&synthetic)]))
            .unwrap();
    assert_eq!(hist["counts"], serde_json::json!([0, 2, 0, 5]));
    let stats: Value = serde_json::from_str(&ok(&["corpus", "stats", p(&synthetic)])).unwrap();
    assert_eq!(stats["dialogues"], 7);

    let fusion = dir.path().join("fusion.ckpt");
    ok(&["fusion", "train", "--corpus", p(&corpus), "--out", p(&fusion), "--config", p(&config)]);
    let codes = dir.path().join("codes.jsonl");
    ok(&["fusion", "encode", "--ckpt", p(&fusion), "--corpus", p(&corpus), "--out", p(&codes)]);
    let rows = jsonl(&codes);
    let total: u64 = stats_total(&corpus);
    assert_eq!(rows.len() as u64, total);
    assert!(rows.iter().all(|r| r["latent"].as_array().unwrap().len() == 8));

    // A checkpoint of the wrong kind is refused.
    let out = cberl(&["fusion", "encode", "--ckpt", p(&gan), "--corpus", p(&corpus), "--out", p(&codes)]);
    assert!(!out.status.success());
}

fn stats_total(corpus: &Path) -> u64 {
    let stats: Value = serde_json::from_str(&ok(&["corpus", "stats", p(corpus)])).unwrap();
    stats["histogram"]["total"].as_u64().unwrap()
}

#[test]
fn run_fit_predict_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    std::fs::write(&config, QUICK_CONFIG).unwrap();

    let run_dir = dir.path().join("run");
    let report: Value = serde_json::from_str(&ok(&["run", "--config", p(&config), "--out", p(&run_dir)])).unwrap();
    assert!(report["waf1"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["metadata"]["seed"], 3);
    let emb = dir.path().join("emb.jsonl");
    ok(&["export-emb", "--run", p(&run_dir), "--out", p(&emb)]);
    let exported = jsonl(&emb);
    assert!(!exported.is_empty());
    assert!(exported.iter().all(|r| r["embedding"].as_array().unwrap().len() == 8));

    let spec = write_spec(dir.path());
    let corpus = dir.path().join("corpus");
    ok(&["corpus", "synth", "--spec", p(&spec), "--out", p(&corpus)]);
    let model = dir.path().join("model.ckpt");
    ok(&["classify", "fit", "--corpus", p(&corpus), "--out", p(&model), "--config", p(&config)]);
    let preds = dir.path().join("preds.jsonl");
    ok(&["classify", "predict", "--ckpt", p(&model), "--corpus", p(&corpus), "--out", p(&preds)]);
    let rows = jsonl(&preds);
    assert_eq!(rows.len() as u64, stats_total(&corpus));
    assert!(rows.iter().all(|r| r["predicted"].as_u64().unwrap() < 4));
}

#[test]
fn seed_variable_overrides_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("quick.toml");
    std::fs::write(&config, QUICK_CONFIG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cberl"))
        .args(["run", "--config", p(&config)])
        .env("CBERL_SEED", "11")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["metadata"]["seed"], 11);
}
