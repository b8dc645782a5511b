//! Result exports: mask heatmaps, token weights and metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use maskwright::eval::MetricsReport;
use maskwright::{Error, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Plain PGM text for a 2-D mask. Values are clamped to `[0, 1]` and scaled
/// to 0..=255, rounding half away from zero.
pub fn pgm_string(mask: &Tensor) -> CliResult<String> {
    let &[h, w] = mask.shape() else {
        return Err(Error::Shape(format!("heatmap needs a 2-D mask, got {:?}", mask.shape())).into());
    };
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in mask.data().chunks(w.max(1)).take(h) {
        let px: Vec<String> = row.iter().map(|&m| pixel(m).to_string()).collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    Ok(s)
}

fn pixel(m: f64) -> u8 {
    // f64::round already rounds half away from zero; NaN maps to 0
    let v = if m.is_nan() { 0.0 } else { m.clamp(0.0, 1.0) };
    (255.0 * v).round() as u8
}

pub fn export_pgm(mask: &Tensor, path: &Path) -> CliResult<()> {
    fs::write(path, pgm_string(mask)?).map_err(|e| CliError::io(path, e))
}

/// Parses the subset of P2 that [`pgm_string`] writes.
pub fn parse_pgm(text: &str) -> Option<(usize, usize, Vec<u8>)> {
    let mut it = text.split_ascii_whitespace();
    if it.next()? != "P2" {
        return None;
    }
    let w: usize = it.next()?.parse().ok()?;
    let h: usize = it.next()?.parse().ok()?;
    if it.next()? != "255" {
        return None;
    }
    let px: Vec<u8> = it.map(|t| t.parse().ok()).collect::<Option<_>>()?;
    (px.len() == w * h).then_some((w, h, px))
}

pub const TOKEN_HEADER: &str = "token\tweight";

pub fn token_weights_string(tokens: &[String], mask: &[f64]) -> CliResult<String> {
    if tokens.len() != mask.len() {
        return Err(Error::Size(format!("{} tokens but {} mask weights", tokens.len(), mask.len())).into());
    }
    let mut s = format!("{TOKEN_HEADER}\n");
    for (t, m) in tokens.iter().zip(mask) {
        writeln!(s, "{t}\t{m:.6}").unwrap();
    }
    Ok(s)
}

pub fn export_token_weights(tokens: &[String], mask: &[f64], path: &Path) -> CliResult<()> {
    fs::write(path, token_weights_string(tokens, mask)?).map_err(|e| CliError::io(path, e))
}

/// Reads back a token-weight file as `(token, weight)` pairs.
pub fn parse_token_weights(text: &str) -> Option<Vec<(String, f64)>> {
    let mut lines = text.lines();
    if lines.next()? != TOKEN_HEADER {
        return None;
    }
    lines
        .map(|l| {
            let (t, w) = l.split_once('\t')?;
            Some((t.to_string(), w.parse().ok()?))
        })
        .collect()
}

/// Per label, the `n` tokens with the highest mean mask weight over all
/// their occurrences. Ties go to the lexicographically smaller token.
pub fn top_tokens<'a, I>(examples: I, n: usize) -> BTreeMap<String, Vec<(String, f64)>>
where
    I: IntoIterator<Item = (&'a [String], &'a [f64], &'a str)>,
{
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for (tokens, mask, label) in examples {
        let per = sums.entry(label.to_string()).or_default();
        for (t, &m) in tokens.iter().zip(mask) {
            let e = per.entry(t.clone()).or_insert((0.0, 0));
            e.0 += m;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(label, per)| {
            let mut means: Vec<(String, f64)> = per.into_iter().map(|(t, (s, c))| (t, s / c as f64)).collect();
            means.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            means.truncate(n);
            (label, means)
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "label\trank\ttoken\tmean_weight";

pub fn summary_string(top: &BTreeMap<String, Vec<(String, f64)>>) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for (label, list) in top {
        for (rank, (t, m)) in list.iter().enumerate() {
            writeln!(s, "{label}\t{}\t{t}\t{m:.6}", rank + 1).unwrap();
        }
    }
    s
}

/// JSON shape of [`MetricsReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsJson {
    pub base_metric: f64,
    pub masked_metric: f64,
    pub fidelity_delta: f64,
    pub mean_mask: f64,
    pub mask_l0_at_half: f64,
    pub topk_attr_acc: f64,
    pub topk_overlap_frac: f64,
    pub k: usize,
    pub n_examples: usize,
}

pub const METRIC_KEYS: [&str; 9] = [
    "base_metric",
    "masked_metric",
    "fidelity_delta",
    "mean_mask",
    "mask_l0_at_half",
    "topk_attr_acc",
    "topk_overlap_frac",
    "k",
    "n_examples",
];

impl From<&MetricsReport> for MetricsJson {
    fn from(r: &MetricsReport) -> Self {
        MetricsJson {
            base_metric: r.base_metric,
            masked_metric: r.masked_metric,
            fidelity_delta: r.fidelity_delta,
            mean_mask: r.mean_mask,
            mask_l0_at_half: r.mask_l0_at_half,
            topk_attr_acc: r.topk_attr_acc,
            topk_overlap_frac: r.topk_overlap_frac,
            k: r.k,
            n_examples: r.n_examples,
        }
    }
}

pub fn metrics_string(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(&MetricsJson::from(report)).expect("plain struct serializes");
    s.push('\n');
    s
}

pub fn export_metrics(report: &MetricsReport, path: &Path) -> CliResult<()> {
    fs::write(path, metrics_string(report)).map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> CliResult<MetricsJson> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}
