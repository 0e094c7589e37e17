use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use hgsr::cli::{run, Cli, CliError};
use hgsr::corpus::load_corpus;

const SHEEP: &str = r#"{"tokens":[{"surface":"the","pos":"DT","head":2,"deprel":"det"},{"surface":"sheep","pos":"NN","head":3,"deprel":"nsubj"},{"surface":"are","pos":"VV","head":0,"deprel":"root"},{"surface":"like","pos":"P","head":3,"deprel":"prep"},{"surface":"white","pos":"JJ","head":6,"deprel":"amod"},{"surface":"clouds","pos":"NN","head":4,"deprel":"pobj"}],"comparator_index":4,"glosses":{"2":["woolly","farm","animal"],"6":["floating","water","vapour"]},"label":"simile","tags":["O","T","O","O","O","V"]}"#;

fn hgsr(args: &[&str]) -> Result<String, CliError> {
    let mut argv = vec!["hgsr"];
    argv.extend_from_slice(args);
    let cli = Cli::try_parse_from(argv).expect("arguments parse");
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out).expect("utf-8 output"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    hgsr(&["generate-data", "--out", s(&path), "--n", &n.to_string(), "--seed", &seed.to_string()]).unwrap();
    path
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, r#"{"train": {"epochs": 2, "batch_size": 4}}"#).unwrap();
    path
}

/// Parsed `digraph` text: node ids and (src, dst, label) edges.
struct Dot {
    nodes: BTreeSet<usize>,
    edges: Vec<(usize, usize, String)>,
}

/// Accepts only the subset of DOT the exporter is meant to produce and
/// rejects anything else line by line.
fn parse_dot(text: &str) -> Result<Dot, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("digraph hetgraph {") {
        return Err("missing digraph header".into());
    }
    let mut dot = Dot {
        nodes: BTreeSet::new(),
        edges: Vec::new(),
    };
    let mut closed = false;
    for line in lines {
        if closed {
            return Err(format!("content after closing brace: {line}"));
        }
        if line == "}" {
            closed = true;
            continue;
        }
        if line == "rankdir=LR;" {
            continue;
        }
        let body = line.strip_suffix("];").ok_or(format!("unterminated statement: {line}"))?;
        let (head, attrs) = body.split_once(" [").ok_or(format!("missing attributes: {line}"))?;
        let label = attr(attrs, "label").ok_or(format!("missing label: {line}"))?;
        let id = |t: &str| -> Result<usize, String> {
            t.strip_prefix('n')
                .and_then(|n| n.parse().ok())
                .ok_or(format!("bad node id {t:?}"))
        };
        match head.split_once(" -> ") {
            Some((a, b)) => dot.edges.push((id(a)?, id(b)?, label)),
            None => {
                if !dot.nodes.insert(id(head)?) {
                    return Err(format!("duplicate node {head}"));
                }
            }
        }
    }
    if !closed {
        return Err("missing closing brace".into());
    }
    for (a, b, _) in &dot.edges {
        if !dot.nodes.contains(a) || !dot.nodes.contains(b) {
            return Err(format!("edge n{a} -> n{b} uses an undeclared node"));
        }
    }
    Ok(dot)
}

fn attr(attrs: &str, key: &str) -> Option<String> {
    let start = attrs.find(&format!("{key}=\""))? + key.len() + 2;
    let rest = &attrs[start..];
    let mut value = String::new();
    let mut chars = rest.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => value.push(chars.next()?),
            '"' => return Some(value),
            c => value.push(c),
        }
    }
    None
}

#[test]
fn dot_checker_rejects_malformed_text() {
    assert!(parse_dot("digraph hetgraph {\n  n0 [label=\"a\"];\n}\n").is_ok());
    assert!(parse_dot("graph g {\n}\n").is_err());
    assert!(parse_dot("digraph hetgraph {\n  n0 [label=\"a\"];\n").is_err());
    assert!(parse_dot("digraph hetgraph {\n  n0 -> n1 [label=\"x\"];\n}\n").is_err());
    assert!(parse_dot("digraph hetgraph {\n  n0 [label=\"a\"]\n}\n").is_err());
}

#[test]
fn generate_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.jsonl", 25, 3);
    let b = generate(dir.path(), "b.jsonl", 25, 3);
    let c = generate(dir.path(), "c.jsonl", 25, 4);
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    assert_eq!(load_corpus(&a).unwrap().len(), 25);
}

#[test]
fn generate_data_rejects_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.jsonl");
    let err = hgsr(&["generate-data", "--out", s(&path), "--n", "0"]).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err}");
    assert!(!path.exists());
}

#[test]
fn inspect_graph_reports_the_sheep_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("one.jsonl");
    std::fs::write(&input, format!("{SHEEP}\n")).unwrap();
    let dot_path = dir.path().join("g.dot");
    let out = hgsr(&["inspect-graph", "--input", s(&input), "--index", "0", "--dot-out", s(&dot_path)]).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("noun:2 non-noun:4 subsentence:2"));
    let counts: Vec<(String, usize)> = lines
        .map(|l| {
            let mut parts = l.split_whitespace();
            (parts.next().unwrap().to_string(), parts.next().unwrap().parse().unwrap())
        })
        .collect();
    let count = |name: &str| counts.iter().find(|(n, _)| n == name).map_or(0, |(_, c)| *c);
    assert_eq!(count("con"), 2);
    assert_eq!(count("not-con"), 2);
    assert_eq!(count("self"), 8);
    // five arcs, both directions
    assert_eq!(count("nsubj") + count("prep") + count("pobj") + count("amod") + count("det"), 10);

    let dot = parse_dot(&std::fs::read_to_string(&dot_path).unwrap()).unwrap();
    assert_eq!(dot.nodes.len(), 8);
    assert_eq!(dot.edges.len(), counts.iter().map(|(_, c)| c).sum::<usize>());
    assert_eq!(dot.edges.iter().filter(|e| e.2 == "con" || e.2 == "not-con").count(), 4);
}

#[test]
fn inspect_graph_flags_remove_edges_and_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("one.jsonl");
    std::fs::write(&input, format!("{SHEEP}\n")).unwrap();
    let out = hgsr(&["inspect-graph", "--input", s(&input), "--index", "0", "--no-dependency"]).unwrap();
    assert!(!out.contains("nsubj"));
    assert!(out.contains("con"));
    let out = hgsr(&["inspect-graph", "--input", s(&input), "--index", "0", "--no-subsentence-nodes"]).unwrap();
    assert!(out.starts_with("noun:2 non-noun:4 subsentence:"));
    assert!(!out.lines().any(|l| l.starts_with("not-con")));
}

#[test]
fn inspect_graph_rejects_out_of_range_index() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("one.jsonl");
    std::fs::write(&input, format!("{SHEEP}\n")).unwrap();
    let err = hgsr(&["inspect-graph", "--input", s(&input), "--index", "1"]).unwrap_err();
    assert!(err.to_string().contains("out of range"), "{err}");
}

#[test]
fn train_evaluate_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = generate(d, "train.jsonl", 40, 1);
    let dev = generate(d, "dev.jsonl", 12, 2);
    let config = tiny_config(d);
    let run_dir = d.join("run");
    let out = hgsr(&["train", "--train", s(&train), "--dev", s(&dev), "--config", s(&config), "--out-dir", s(&run_dir)]).unwrap();
    let selection: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!(["p", "t", "v"].contains(&selection["model"].as_str().unwrap()));
    for f in ["config.json", "vocab.json", "train_log.jsonl", "selected.json", "model_p.params.json", "model_t.params.json", "model_v.params.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let out = hgsr(&["evaluate", "--model-dir", s(&run_dir), "--data", s(&dev)]).unwrap();
    let first = out.lines().next().unwrap();
    let report: serde_json::Value = serde_json::from_str(first).unwrap();
    let f1 = report["report"]["extraction"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    let out = hgsr(&["evaluate", "--model-dir", s(&run_dir), "--data", s(&dev), "--folds", "3"]).unwrap();
    let report: serde_json::Value = serde_json::from_str(out.lines().next().unwrap()).unwrap();
    assert_eq!(report["folds"]["k"], 3);
    assert!(out.contains("3 partitions:"));

    let preds = d.join("preds.jsonl");
    hgsr(&["predict", "--model-dir", s(&run_dir), "--input", s(&dev), "--out", s(&preds)]).unwrap();
    let text = std::fs::read_to_string(&preds).unwrap();
    assert_eq!(text.lines().count(), 12);
    for line in text.lines() {
        let p: serde_json::Value = serde_json::from_str(line).unwrap();
        let label = p["label"].as_str().unwrap();
        assert!(label == "simile" || label == "literal");
        if label == "literal" {
            assert!(p["spans"].as_array().unwrap().is_empty());
        }
    }
}

#[test]
fn predict_accepts_sentences_without_gold_fields() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = generate(d, "train.jsonl", 30, 1);
    let config = tiny_config(d);
    let run_dir = d.join("run");
    hgsr(&["train", "--train", s(&train), "--dev", s(&train), "--config", s(&config), "--out-dir", s(&run_dir)]).unwrap();

    let mut record: serde_json::Value = serde_json::from_str(SHEEP).unwrap();
    let obj = record.as_object_mut().unwrap();
    obj.remove("label");
    obj.remove("tags");
    let input = d.join("raw.jsonl");
    std::fs::write(&input, format!("{record}\n")).unwrap();
    let preds = d.join("preds.jsonl");
    hgsr(&["predict", "--model-dir", s(&run_dir), "--input", s(&input), "--out", s(&preds)]).unwrap();
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 1);
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d, "data.jsonl", 10, 1);
    let config = d.join("bad.json");
    std::fs::write(&config, r#"{"train": {"epochs": 1}, "learning_rate": 0.1}"#).unwrap();
    let err = hgsr(&["train", "--train", s(&data), "--dev", s(&data), "--config", s(&config), "--out-dir", s(&d.join("run"))]).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(err.to_string().contains("learning_rate"), "{err}");
}

#[test]
fn disabled_models_are_not_trained() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d, "data.jsonl", 20, 1);
    let config = tiny_config(d);
    let run_dir = d.join("run");
    hgsr(&["train", "--train", s(&data), "--dev", s(&data), "--config", s(&config), "--out-dir", s(&run_dir), "--disable-model", "t"]).unwrap();
    assert!(run_dir.join("model_p.params.json").is_file());
    assert!(run_dir.join("model_v.params.json").is_file());
    assert!(!run_dir.join("model_t.params.json").exists());

    let err = hgsr(&["train", "--train", s(&data), "--dev", s(&data), "--config", s(&config), "--out-dir", s(&run_dir), "--disable-model", "p", "--disable-model", "t", "--disable-model", "v"]).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
}

#[test]
fn binary_reads_environment_overrides_and_reports_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = generate(d, "data.jsonl", 16, 1);
    let config = tiny_config(d);
    let run_dir = d.join("env-run");
    let out = Command::new(env!("CARGO_BIN_EXE_hgsr"))
        .args(["train", "--train", s(&data), "--dev", s(&data), "--config", s(&config)])
        .env("HGSR_OUT_DIR", &run_dir)
        .env("HGSR_SEED", "42")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let selection: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(selection["dev"].is_array());
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["seed"], 42);

    let out = Command::new(env!("CARGO_BIN_EXE_hgsr"))
        .args(["evaluate", "--model-dir", s(&d.join("missing")), "--data", s(&data)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
