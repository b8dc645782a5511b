use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use maskwright::eval::{evaluate, masked_predictions};
use maskwright::gradcheck::gradient_suite;
use maskwright::mask::{build_explainer, split_model, MaskedModel};
use maskwright::nn::ModelGraph;
use maskwright::presets::preset;
use maskwright::tasks::{
    generate, Inputs, LabeledDataset, Targets, TaskKind, TaskSpec, CHAR_ALPHABET, KEYWORDS_PER_POLARITY,
};
use maskwright::tasks::{read_dataset, write_dataset};
use maskwright::train::{train_base, train_explainer, TrainingLog};

use crate::args::{EvalArgs, ExplainArgs, GenTaskArgs, GradcheckArgs, TrainBaseArgs, TrainExplainerArgs, TrainFlags};
use crate::config::{apply_overrides, parse_layers, parse_mask_point, resolve_seed, RunConfig, TrainOverrides};
use crate::error::{CliError, CliResult};
use crate::export;
use crate::modelfile::{load_model, save_model, ModelFile, Role};

fn io_out(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

fn require(flag: Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| file.clone()).ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or config)")))
}

/// Inputs must exist before any work starts.
fn must_exist(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn overrides(t: &TrainFlags, reg: Option<String>) -> TrainOverrides {
    TrainOverrides {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        optimizer: t.optimizer.clone(),
        reg,
        clip_norm: t.clip_norm,
        max_steps: t.max_steps,
    }
}

fn emit_log(log: &TrainingLog, path: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let tsv = log.to_tsv();
    if let Some(p) = path {
        fs::write(p, &tsv).map_err(|e| CliError::io(p, e))?;
    }
    out.write_all(tsv.as_bytes()).map_err(io_out)
}

fn load_role(path: &Path, want_base: bool) -> CliResult<ModelFile> {
    let f = load_model(path)?;
    if matches!(f.role, Role::Base) != want_base {
        let want = if want_base { "a base model" } else { "an explainer" };
        return Err(CliError::Corrupt { path: path.to_path_buf(), msg: format!("expected {want}") });
    }
    Ok(f)
}

pub fn gen_task(a: GenTaskArgs, out: &mut dyn Write) -> CliResult<()> {
    let kind: TaskKind = a.task.parse().map_err(|e: maskwright::Error| CliError::Usage(e.to_string()))?;
    let seed = resolve_seed(a.seed, None)?;
    let mut spec = TaskSpec::new(kind, a.n, seed);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.seq_len = a.seq_len.unwrap_or(spec.seq_len);
    spec.vocab = a.vocab.unwrap_or(spec.vocab);
    spec.image_size = a.image_size.unwrap_or(spec.image_size);
    spec.classes = a.classes.unwrap_or(spec.classes);
    let data = generate(&spec)?;
    let (train, test) = data.train_test_split(a.test_fraction)?;
    write_dataset(&a.out.join("train"), &train, &spec)?;
    write_dataset(&a.out.join("test"), &test, &spec)?;
    writeln!(out, "{}: {} train, {} test examples in {}", kind.as_str(), train.len(), test.len(), a.out.display())
        .map_err(io_out)
}

pub fn train_base_cmd(a: TrainBaseArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = RunConfig::load_opt(a.train.config.as_deref())?;
    let data_dir = require(a.data, &file.data, "data")?;
    let out_path = require(a.out, &file.out, "out")?;
    must_exist(&data_dir)?;
    let seed = resolve_seed(a.train.seed, file.seed)?;
    let (spec, data) = read_dataset(&data_dir)?;
    let p = preset(&spec, seed)?;
    let specs = match &file.layers {
        Some(lines) => parse_layers(lines)?,
        None => p.base.clone(),
    };
    let cfg = apply_overrides(p.base_train.clone(), &file, &overrides(&a.train, None))?;
    let mut model = ModelGraph::new(specs, seed)?;
    let log = train_base(&mut model, &data, &cfg)?;
    save_model(&out_path, &ModelFile { role: Role::Base, graph: model })?;
    emit_log(&log, a.train.log.as_deref(), out)
}

pub fn train_explainer_cmd(a: TrainExplainerArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = RunConfig::load_opt(a.train.config.as_deref())?;
    let base_path = require(a.base, &file.base, "base")?;
    let data_dir = require(a.data, &file.data, "data")?;
    let out_path = require(a.out, &file.out, "out")?;
    must_exist(&base_path)?;
    must_exist(&data_dir)?;
    let seed = resolve_seed(a.train.seed, file.seed)?;
    let base = load_role(&base_path, true)?.graph;
    let (spec, data) = read_dataset(&data_dir)?;
    let p = preset(&spec, seed)?;
    let split_index = file.split_index.unwrap_or(p.split_index);
    let mask_point = match &file.mask_point {
        Some(s) => parse_mask_point(s)?,
        None => p.mask_point,
    };
    let explainer_seed = seed.wrapping_add(1);
    let explainer = match &file.explainer_layers {
        Some(lines) => ModelGraph::new(parse_layers(lines)?, explainer_seed)?,
        None => build_explainer(&p.explainer, explainer_seed)?,
    };
    let cfg = apply_overrides(p.explainer_train.clone(), &file, &overrides(&a.train, a.reg))?;
    let mut mm = MaskedModel::assemble(split_model(base, split_index)?, explainer, mask_point, &data.example_shape())?;
    let log = train_explainer(&mut mm, &data, &cfg)?;
    let (_, graph) = mm.into_parts();
    save_model(&out_path, &ModelFile { role: Role::Explainer { split_index, mask_point }, graph })?;
    emit_log(&log, a.train.log.as_deref(), out)
}

/// Base model, explainer and dataset wired into a masked model.
fn open_masked(
    base: &Path,
    explainer: &Path,
    data: &Path,
) -> CliResult<(ModelGraph, MaskedModel, TaskSpec, LabeledDataset)> {
    for p in [base, explainer, data] {
        must_exist(p)?;
    }
    let base_graph = load_role(base, true)?.graph;
    let ex = load_role(explainer, false)?;
    let Role::Explainer { split_index, mask_point } = ex.role else { unreachable!("role checked") };
    let (spec, ds) = read_dataset(data)?;
    let mm = MaskedModel::assemble(
        split_model(base_graph.clone(), split_index)?,
        ex.graph,
        mask_point,
        &ds.example_shape(),
    )?;
    Ok((base_graph, mm, spec, ds))
}

pub fn token_name(kind: TaskKind, id: usize) -> String {
    match kind {
        TaskKind::CharCount => CHAR_ALPHABET.chars().nth(id).map_or_else(|| format!("?{id}"), String::from),
        _ if id < KEYWORDS_PER_POLARITY => format!("pos{id}"),
        _ if id < 2 * KEYWORDS_PER_POLARITY => format!("neg{}", id - KEYWORDS_PER_POLARITY),
        _ => format!("w{id}"),
    }
}

fn label_name(kind: TaskKind, c: usize) -> String {
    match (kind, c) {
        (TaskKind::KeywordSeq, 0) => "negative".into(),
        (TaskKind::KeywordSeq, 1) => "positive".into(),
        _ => format!("class{c}"),
    }
}

pub fn explain_cmd(a: ExplainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (_, mut mm, spec, data) = open_masked(&a.base, &a.explainer, &a.data)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let (_, masks) = masked_predictions(&mut mm, &data)?;
    let n = data.len();
    let per: usize = masks.shape()[1..].iter().product();
    let shown = a.limit.min(n);
    match data.inputs() {
        Inputs::Images(_) => {
            let hw = &masks.shape()[1..];
            for i in 0..shown {
                let m = masks.slice_rows(i, 1)?.reshape(hw)?;
                export::export_pgm(&m, &a.out.join(format!("example_{i}.pgm")))?;
            }
        }
        Inputs::Tokens(tokens) => {
            let names: Vec<Vec<String>> =
                (0..n).map(|i| tokens.row(i).iter().map(|&id| token_name(spec.kind, id)).collect()).collect();
            let rows: Vec<&[f64]> = masks.data().chunks(per).collect();
            for i in 0..shown {
                export::export_token_weights(&names[i], rows[i], &a.out.join(format!("example_{i}.tsv")))?;
            }
            if let Targets::Classes(labels) = data.targets() {
                let labels: Vec<String> = labels.iter().map(|&c| label_name(spec.kind, c)).collect();
                let top = export::top_tokens((0..n).map(|i| (names[i].as_slice(), rows[i], labels[i].as_str())), 5);
                let path = a.out.join("summary.tsv");
                fs::write(&path, export::summary_string(&top)).map_err(|e| CliError::io(&path, e))?;
            }
        }
    }
    writeln!(out, "wrote {shown} explanations to {}", a.out.display()).map_err(io_out)
}

pub fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let (base, mut mm, _, data) = open_masked(&a.base, &a.explainer, &a.data)?;
    let report = evaluate(&base, &mut mm, &data, a.k)?;
    export::export_metrics(&report, &a.out)?;
    out.write_all(export::metrics_string(&report).as_bytes()).map_err(io_out)
}

/// `Ok(true)` when every check passes.
pub fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> CliResult<bool> {
    let seed = resolve_seed(a.seed, None)?;
    let results = gradient_suite(a.instances, a.h, seed)?;
    let mut ok = true;
    writeln!(out, "check\tinstances\tworst_rel_err\tstatus").map_err(io_out)?;
    for r in &results {
        let pass = r.passed(a.tol);
        ok &= pass;
        writeln!(out, "{}\t{}\t{:.3e}\t{}", r.name, r.instances, r.worst, if pass { "ok" } else { "FAIL" })
            .map_err(io_out)?;
    }
    Ok(ok)
}
