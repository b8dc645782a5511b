use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maskwright::mask::MaskPoint;
use maskwright::nn::{Activation, LayerSpec, ModelGraph};
use maskwright::tasks::{Inputs, Targets, TaskKind};
use maskwright::Tensor;
use maskwright_cli::commands::token_name;
use maskwright_cli::export::{parse_pgm, parse_token_weights, read_metrics, SUMMARY_HEADER};
use maskwright_cli::modelfile::{load_model, save_model, ModelFile, Role};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskwright")).args(args).env_remove("MASKWRIGHT_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = bin(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let o = bin(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["eval", "--base", "x"]).status.code(), Some(1));
    assert_eq!(bin(&["gen-task", "--task", "nope", "--n", "5", "--out", "/tmp/x"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["gen-task", "train-base", "train-explainer", "explain", "eval", "gradcheck"] {
        let o = bin(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn missing_model_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.mskm");
    let o = bin(&[
        "explain",
        "--base",
        p(&missing),
        "--explainer",
        p(&missing),
        "--data",
        p(dir.path()),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(p(&missing)));
}

#[test]
fn gradcheck_passes_with_seed_7() {
    let out = ok(&["gradcheck", "--seed", "7"]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert!(rows.len() >= 30, "{out}");
    assert!(rows.iter().all(|r| r.ends_with("\tok")), "{out}");
}

#[test]
fn corrupt_model_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-task", "--task", "keyword_seq", "--n", "60", "--seed", "2", "--out", p(d)]);
    let base = d.join("base.mskm");
    ok(&["train-base", "--data", p(&d.join("train")), "--out", p(&base), "--epochs", "1"]);
    let mut bytes = fs::read(&base).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&base, bytes).unwrap();
    let o = bin(&["train-explainer", "--base", p(&base), "--data", p(&d.join("train")), "--out", p(&d.join("e.mskm"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt"));
}

/// Mean weight per (label, token) recomputed from the models through the
/// library, ranked with an ordinary sort.
fn summary_oracle(base: &Path, ex: &Path, data_dir: &Path) -> Vec<String> {
    let (_, data) = maskwright::tasks::read_dataset(data_dir).unwrap();
    let base = load_model(base).unwrap().graph;
    let ex = load_model(ex).unwrap();
    let Role::Explainer { split_index, mask_point } = ex.role else { panic!("not an explainer") };
    let split = maskwright::mask::split_model(base, split_index).unwrap();
    let mut mm = maskwright::mask::MaskedModel::assemble(split, ex.graph, mask_point, &data.example_shape()).unwrap();
    let (_, masks) = maskwright::eval::masked_predictions(&mut mm, &data).unwrap();
    let (Inputs::Tokens(tokens), Targets::Classes(labels)) = (data.inputs(), data.targets()) else { unreachable!() };
    let mut acc: HashMap<(String, String), (f64, usize)> = HashMap::new();
    for (i, row) in masks.data().chunks(tokens.len()).enumerate() {
        let name = if labels[i] == 1 { "positive" } else { "negative" };
        for (&id, &w) in tokens.row(i).iter().zip(row) {
            let e = acc.entry((name.to_string(), token_name(TaskKind::KeywordSeq, id))).or_default();
            e.0 += w;
            e.1 += 1;
        }
    }
    let mut by_label: HashMap<String, Vec<(String, f64)>> = HashMap::new();
    for ((label, tok), (s, c)) in acc {
        by_label.entry(label).or_default().push((tok, s / c as f64));
    }
    let mut keys: Vec<_> = by_label.keys().cloned().collect();
    keys.sort();
    let mut lines = Vec::new();
    for k in keys {
        let mut v = by_label.remove(&k).unwrap();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        lines.extend(v.iter().take(5).map(|(t, m)| format!("{k}\t{t}\t{m:.6}")));
    }
    lines
}

#[test]
fn keyword_pipeline_exports_token_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-task", "--task", "keyword_seq", "--n", "150", "--seed", "4", "--out", p(d)]);
    let (train, test) = (d.join("train"), d.join("test"));
    let (base, ex) = (d.join("base.mskm"), d.join("ex.mskm"));
    let log = ok(&["train-base", "--data", p(&train), "--out", p(&base), "--epochs", "2", "--seed", "4"]);
    assert!(log.starts_with("epoch\ttask_loss"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3);
    ok(&["train-explainer", "--base", p(&base), "--data", p(&train), "--out", p(&ex), "--epochs", "1", "--seed", "4"]);
    assert!(matches!(
        load_model(&ex).unwrap().role,
        Role::Explainer { split_index: 2, mask_point: MaskPoint::PostEmbedding }
    ));

    let out = d.join("explain");
    ok(&["explain", "--base", p(&base), "--explainer", p(&ex), "--data", p(&test), "--out", p(&out), "--limit", "2"]);
    let first = fs::read_to_string(out.join("example_0.tsv")).unwrap();
    let rows = parse_token_weights(&first).unwrap();
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|(t, w)| !t.is_empty() && (0.0..=1.0).contains(w)));
    assert!(out.join("example_1.tsv").exists() && !out.join("example_2.tsv").exists());

    let summary = fs::read_to_string(out.join("summary.tsv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some(SUMMARY_HEADER));
    let got: Vec<String> = lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\t{}", f[0], f[2], f[3])
        })
        .collect();
    assert_eq!(got.len(), 10);
    assert_eq!(got, summary_oracle(&base, &ex, &test));

    let metrics = d.join("m.json");
    ok(&["eval", "--base", p(&base), "--explainer", p(&ex), "--data", p(&test), "--out", p(&metrics)]);
    let m = read_metrics(&metrics).unwrap();
    assert_eq!(m.n_examples, 30);
    assert_eq!(m.k, 3);
}

#[test]
fn patch_explain_writes_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-task", "--task", "planted_patch", "--n", "80", "--seed", "3", "--out", p(d)]);
    let (base, ex) = (d.join("base.mskm"), d.join("ex.mskm"));
    ok(&["train-base", "--data", p(&d.join("train")), "--out", p(&base), "--epochs", "1"]);
    ok(&["train-explainer", "--base", p(&base), "--data", p(&d.join("train")), "--out", p(&ex), "--epochs", "1"]);
    let out = d.join("maps");
    ok(&[
        "explain",
        "--base",
        p(&base),
        "--explainer",
        p(&ex),
        "--data",
        p(&d.join("test")),
        "--out",
        p(&out),
        "--limit",
        "3",
    ]);
    for i in 0..3 {
        let (w, h, px) = parse_pgm(&fs::read_to_string(out.join(format!("example_{i}.pgm"))).unwrap()).unwrap();
        assert_eq!((w, h, px.len()), (16, 16, 256));
    }
    assert!(!out.join("example_3.pgm").exists());
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-task", "--task", "char_count", "--n", "60", "--seed", "1", "--out", p(d)]);
    let cfg = d.join("run.json");
    let base = d.join("b.mskm");
    let json = serde_json::json!({
        "data": d.join("train"),
        "out": base,
        "epochs": 3,
        "layers": [
            "embedding vocab=12 dim=4",
            "mean_over_time",
            "dense input=4 units=1 activation=identity"
        ]
    });
    fs::write(&cfg, json.to_string()).unwrap();
    let log = ok(&["train-base", "--config", p(&cfg), "--epochs", "2"]);
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 3, "{log}");
    let m = load_model(&base).unwrap();
    assert_eq!(m.graph.len(), 3);

    fs::write(&cfg, r#"{"epochs": 2, "bogus": 1}"#).unwrap();
    assert_eq!(
        bin(&["train-base", "--config", p(&cfg), "--data", p(&d.join("train")), "--out", p(&base)]).status.code(),
        Some(2)
    );
}

#[test]
fn seed_falls_back_to_environment() {
    let run = |seed: Option<&str>, flag: Option<&str>| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Command::new(env!("CARGO_BIN_EXE_maskwright"));
        c.args(["gen-task", "--task", "keyword_seq", "--n", "20", "--out", p(dir.path())]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        match seed {
            Some(s) => c.env("MASKWRIGHT_SEED", s),
            None => c.env_remove("MASKWRIGHT_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read(dir.path().join("train/inputs.idx")).unwrap()
    };
    assert_eq!(run(Some("9"), None), run(None, Some("9")));
    assert_ne!(run(Some("9"), None), run(None, None));
    assert_eq!(run(None, None), run(None, Some("0")));
    assert_eq!(run(Some("5"), Some("9")), run(None, Some("9")));
}

#[test]
fn identity_mask_run_has_zero_fidelity_delta() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-task", "--task", "planted_patch", "--n", "60", "--seed", "8", "--out", p(d)]);
    let base = d.join("base.mskm");
    ok(&["train-base", "--data", p(&d.join("train")), "--out", p(&base), "--epochs", "1"]);

    // zero weights and unit bias: every mask entry is exactly 1
    let mut graph = ModelGraph::new(
        vec![
            LayerSpec::Dense { input: 64, units: 256, activation: Activation::Identity },
            LayerSpec::Reshape { shape: vec![16, 16] },
        ],
        0,
    )
    .unwrap();
    for prm in graph.layers_mut()[0].params.iter_mut() {
        prm.value = if prm.name == "b" { Tensor::ones(prm.value.shape()) } else { Tensor::zeros(prm.value.shape()) };
    }
    let ex = d.join("identity.mskm");
    save_model(&ex, &ModelFile { role: Role::Explainer { split_index: 4, mask_point: MaskPoint::RawInput }, graph })
        .unwrap();
    let metrics = d.join("m.json");
    ok(&["eval", "--base", p(&base), "--explainer", p(&ex), "--data", p(&d.join("test")), "--out", p(&metrics)]);
    let m = read_metrics(&metrics).unwrap();
    assert_eq!(m.fidelity_delta, 0.0);
    assert_eq!(m.base_metric.to_bits(), m.masked_metric.to_bits());
    assert_eq!(m.mean_mask, 1.0);
}
