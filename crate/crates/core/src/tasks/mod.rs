//! Synthetic tasks with planted ground-truth relevance, and dataset files.

mod files;
pub mod idx;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Batch, TokenBatch};
use crate::tensor::Tensor;

pub use files::{read_dataset, write_dataset, MANIFEST_NAME};

/// Side of the square planted patch.
pub const PATCH: usize = 3;
/// Tokens `0..5` are positive keywords, `5..10` negative; the rest is filler.
pub const KEYWORDS_PER_POLARITY: usize = 5;
/// Character set of the counting task. `C`, `N` and `O` come first.
pub const CHAR_ALPHABET: &str = "CNOHSPFBIKLMQRTUVWXYZ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    PlantedPatch,
    KeywordSeq,
    CharCount,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PlantedPatch => "planted_patch",
            TaskKind::KeywordSeq => "keyword_seq",
            TaskKind::CharCount => "char_count",
        }
    }

    pub fn is_regression(self) -> bool {
        self == TaskKind::CharCount
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted_patch" => Ok(TaskKind::PlantedPatch),
            "keyword_seq" => Ok(TaskKind::KeywordSeq),
            "char_count" => Ok(TaskKind::CharCount),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Generation parameters. Fields irrelevant to a kind are ignored by its
/// generator but still recorded in manifests.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_examples: usize,
    /// Image side for the patch task.
    pub image_size: usize,
    pub classes: usize,
    /// Sequence length for the token tasks.
    pub seq_len: usize,
    /// Vocabulary (keyword task) or alphabet (counting task) size.
    pub vocab: usize,
    /// Background amplitude (patch task) or target noise σ (counting task).
    pub noise: f64,
    pub seed: u64,
}

impl TaskSpec {
    /// Toy-scale defaults for `kind`.
    pub fn new(kind: TaskKind, n_examples: usize, seed: u64) -> Self {
        let (seq_len, vocab, noise) = match kind {
            TaskKind::PlantedPatch => (0, 0, 0.2),
            TaskKind::KeywordSeq => (30, 50, 0.0),
            TaskKind::CharCount => (16, 12, 0.1),
        };
        TaskSpec { kind, n_examples, image_size: 16, classes: 2, seq_len, vocab, noise, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(Error::Config("n_examples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 1], got {}", self.noise)));
        }
        match self.kind {
            TaskKind::PlantedPatch => {
                if self.image_size < PATCH {
                    return Err(Error::Config(format!(
                        "a {PATCH}x{PATCH} patch does not fit a {0}x{0} image",
                        self.image_size
                    )));
                }
                if self.classes < 2 {
                    return Err(Error::Config("need at least 2 classes".into()));
                }
            }
            TaskKind::KeywordSeq => {
                if self.vocab <= 2 * KEYWORDS_PER_POLARITY {
                    return Err(Error::Config(format!(
                        "vocab {} leaves no filler beside {} keywords",
                        self.vocab,
                        2 * KEYWORDS_PER_POLARITY
                    )));
                }
                if self.seq_len < 8 {
                    return Err(Error::Config(format!("sequence length {} is below 8", self.seq_len)));
                }
            }
            TaskKind::CharCount => {
                if self.vocab < 6 || self.vocab > CHAR_ALPHABET.len() {
                    return Err(Error::Config(format!(
                        "alphabet size must lie in 6..={}, got {}",
                        CHAR_ALPHABET.len(),
                        self.vocab
                    )));
                }
                if self.seq_len == 0 {
                    return Err(Error::Config("sequence length must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Full,
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Split::Full),
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `[N, C, H, W]`.
    Images(Tensor),
    Tokens(TokenBatch),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs, targets and ground-truth relevant positions (flat pixel or
/// timestep indices) of a set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Inputs,
    targets: Targets,
    relevance: Vec<Vec<usize>>,
    split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Inputs, targets: Targets, relevance: Vec<Vec<usize>>, split: Split) -> Result<Self> {
        let n = match &inputs {
            Inputs::Images(t) => {
                if t.rank() != 4 {
                    return Err(Error::size(format!("images must be [N, C, H, W], got {:?}", t.shape())));
                }
                t.shape()[0]
            }
            Inputs::Tokens(t) => t.batch(),
        };
        if targets.len() != n || relevance.len() != n {
            return Err(Error::size(format!(
                "{n} inputs, {} targets, {} relevance sets",
                targets.len(),
                relevance.len()
            )));
        }
        let ds = LabeledDataset { inputs, targets, relevance, split };
        let positions = ds.positions();
        if let Some((i, _)) = ds.relevance.iter().enumerate().find(|(_, r)| r.iter().any(|&p| p >= positions)) {
            return Err(Error::Index(format!("example {i} has a relevant index outside {positions} positions")));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Inputs {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn relevance(&self) -> &[Vec<usize>] {
        &self.relevance
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-example model input shape.
    pub fn example_shape(&self) -> Vec<usize> {
        match &self.inputs {
            Inputs::Images(t) => t.shape()[1..].to_vec(),
            Inputs::Tokens(t) => vec![t.len()],
        }
    }

    /// Number of maskable positions per example (pixels or timesteps).
    pub fn positions(&self) -> usize {
        match &self.inputs {
            Inputs::Images(t) => t.shape()[2] * t.shape()[3],
            Inputs::Tokens(t) => t.len(),
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self.targets, Targets::Values(_))
    }

    /// Model input for the examples at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        match &self.inputs {
            Inputs::Images(t) => Ok(Batch::Values(t.gather_rows(idx)?)),
            Inputs::Tokens(t) => {
                let rows: Vec<&[usize]> = idx.iter().map(|&i| t.row(i)).collect();
                Ok(Batch::Tokens(TokenBatch::from_rows(&rows)?))
            }
        }
    }

    /// Model input for every example.
    pub fn full_batch(&self) -> Batch {
        match &self.inputs {
            Inputs::Images(t) => Batch::Values(t.clone()),
            Inputs::Tokens(t) => Batch::Tokens(t.clone()),
        }
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Result<LabeledDataset> {
        if idx.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!("example {i} of {}", self.len())));
        }
        let inputs = match self.batch(idx)? {
            Batch::Values(t) => Inputs::Images(t),
            Batch::Tokens(t) => Inputs::Tokens(t),
        };
        let relevance = idx.iter().map(|&i| self.relevance[i].clone()).collect();
        LabeledDataset::new(inputs, self.targets.subset(idx), relevance, split)
    }

    /// The first `round(n · (1 − test_fraction))` examples train, the rest
    /// test. Generated examples are already in random order.
    pub fn train_test_split(&self, test_fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(Error::Config(format!("test fraction must lie in (0, 1), got {test_fraction}")));
        }
        let n = self.len();
        let n_train = ((n as f64) * (1.0 - test_fraction)).round() as usize;
        if n_train == 0 || n_train == n {
            return Err(Error::Config(format!("{n} examples cannot be split at {test_fraction}")));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..n).collect();
        Ok((self.subset(&train, Split::Train)?, self.subset(&test, Split::Test)?))
    }
}

pub fn generate(spec: &TaskSpec) -> Result<LabeledDataset> {
    match spec.kind {
        TaskKind::PlantedPatch => gen_planted_patch(spec),
        TaskKind::KeywordSeq => gen_keyword_seq(spec),
        TaskKind::CharCount => gen_char_count(spec),
    }
}

/// Fixed ±1 class templates, independent of any task seed. Distinct ±1
/// patterns differ by at least 2 in L2 distance.
pub fn patch_templates(classes: usize) -> Vec<[f64; PATCH * PATCH]> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_7e3a);
    let mut out: Vec<[f64; PATCH * PATCH]> = Vec::with_capacity(classes);
    while out.len() < classes {
        let mut t = [0.0; PATCH * PATCH];
        t.iter_mut().for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { -1.0 });
        if out.iter().all(|o| o != &t) {
            out.push(t);
        }
    }
    out
}

/// Balanced labels `i mod classes` in seeded random order.
fn balanced_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// `1 × S × S` images: uniform background in `[-noise, noise)` and one
/// class template at a uniformly random position.
pub fn gen_planted_patch(spec: &TaskSpec) -> Result<LabeledDataset> {
    if spec.kind != TaskKind::PlantedPatch {
        return Err(Error::Config(format!("{} spec passed to the patch generator", spec.kind)));
    }
    spec.validate()?;
    let s = spec.image_size;
    let n = spec.n_examples;
    let templates = patch_templates(spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = balanced_labels(&mut rng, n, spec.classes);
    let mut data = vec![0.0; n * s * s];
    let mut relevance = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let img = &mut data[i * s * s..(i + 1) * s * s];
        if spec.noise > 0.0 {
            img.iter_mut().for_each(|v| *v = rng.random_range(-spec.noise..spec.noise));
        }
        let r0 = rng.random_range(0..=s - PATCH);
        let c0 = rng.random_range(0..=s - PATCH);
        let mut rel = Vec::with_capacity(PATCH * PATCH);
        for dr in 0..PATCH {
            for dc in 0..PATCH {
                let p = (r0 + dr) * s + c0 + dc;
                img[p] = templates[label][dr * PATCH + dc];
                rel.push(p);
            }
        }
        relevance.push(rel);
    }
    let images = Tensor::from_vec(&[n, 1, s, s], data)?;
    LabeledDataset::new(Inputs::Images(images), Targets::Classes(labels), relevance, Split::Full)
}

/// Filler token sequences with 1 to 3 planted keywords; label 1 when
/// positive keywords are in the majority. Tied draws are redrawn.
pub fn gen_keyword_seq(spec: &TaskSpec) -> Result<LabeledDataset> {
    if spec.kind != TaskKind::KeywordSeq {
        return Err(Error::Config(format!("{} spec passed to the keyword generator", spec.kind)));
    }
    spec.validate()?;
    let (n, t, k) = (spec.n_examples, spec.seq_len, KEYWORDS_PER_POLARITY);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = Vec::with_capacity(n * t);
    let mut labels = Vec::with_capacity(n);
    let mut relevance = Vec::with_capacity(n);
    for _ in 0..n {
        let polarities: Vec<bool> = loop {
            let count = rng.random_range(1..=3);
            let p: Vec<bool> = (0..count).map(|_| rng.random()).collect();
            let pos = p.iter().filter(|&&b| b).count();
            if 2 * pos != count {
                break p;
            }
        };
        let mut row: Vec<usize> = (0..t).map(|_| rng.random_range(2 * k..spec.vocab)).collect();
        let mut positions = sample(&mut rng, t, polarities.len()).into_vec();
        for (&pos, &positive) in positions.iter().zip(&polarities) {
            let base = if positive { 0 } else { k };
            row[pos] = base + rng.random_range(0..k);
        }
        positions.sort_unstable();
        let pos_count = polarities.iter().filter(|&&b| b).count();
        labels.push(usize::from(2 * pos_count > polarities.len()));
        ids.extend(row);
        relevance.push(positions);
    }
    let tokens = TokenBatch::new(ids, n, t)?;
    LabeledDataset::new(Inputs::Tokens(tokens), Targets::Classes(labels), relevance, Split::Full)
}

/// Token ids of `s` under [`CHAR_ALPHABET`].
pub fn encode_chars(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|c| CHAR_ALPHABET.find(c).ok_or_else(|| Error::Config(format!("character {c:?} not in alphabet"))))
        .collect()
}

pub fn decode_chars(ids: &[usize]) -> String {
    ids.iter().map(|&i| CHAR_ALPHABET.as_bytes().get(i).map_or('?', |&b| b as char)).collect()
}

/// `#O + #N − #C` of a token row.
pub fn char_score(ids: &[usize]) -> f64 {
    ids.iter()
        .map(|&i| match i {
            0 => -1.0,
            1 | 2 => 1.0,
            _ => 0.0,
        })
        .sum()
}

/// Uniform random strings over the first `vocab` alphabet characters, each
/// holding at least one `C`, `N` or `O`. The target is [`char_score`] plus
/// Gaussian noise.
pub fn gen_char_count(spec: &TaskSpec) -> Result<LabeledDataset> {
    if spec.kind != TaskKind::CharCount {
        return Err(Error::Config(format!("{} spec passed to the counting generator", spec.kind)));
    }
    spec.validate()?;
    let (n, t) = (spec.n_examples, spec.seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut ids = Vec::with_capacity(n * t);
    let mut targets = Vec::with_capacity(n);
    let mut relevance = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<usize> = loop {
            let r: Vec<usize> = (0..t).map(|_| rng.random_range(0..spec.vocab)).collect();
            if r.iter().any(|&c| c < 3) {
                break r;
            }
        };
        let eps = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        targets.push(char_score(&row) + eps);
        relevance.push((0..t).filter(|&p| row[p] < 3).collect());
        ids.extend(row);
    }
    let tokens = TokenBatch::new(ids, n, t)?;
    LabeledDataset::new(Inputs::Tokens(tokens), Targets::Values(targets), relevance, Split::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind, n: usize, seed: u64) -> TaskSpec {
        TaskSpec::new(kind, n, seed)
    }

    #[test]
    fn patch_construction() {
        let ds = gen_planted_patch(&spec(TaskKind::PlantedPatch, 100, 1)).unwrap();
        let Targets::Classes(labels) = ds.targets() else { panic!() };
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 50);
        assert!(ds.relevance().iter().all(|r| r.len() == 9));
        let t = patch_templates(4);
        for i in 0..4 {
            for j in 0..i {
                let d: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 1.0);
            }
        }
    }

    #[test]
    fn patch_zero_noise_and_template_oracle() {
        let mut s = spec(TaskKind::PlantedPatch, 60, 2);
        s.noise = 0.0;
        let ds = gen_planted_patch(&s).unwrap();
        let Inputs::Images(img) = ds.inputs() else { panic!() };
        let Targets::Classes(labels) = ds.targets() else { panic!() };
        let templates = patch_templates(2);
        for i in 0..ds.len() {
            let x = &img.data()[i * 256..(i + 1) * 256];
            for (p, &v) in x.iter().enumerate() {
                if !ds.relevance()[i].contains(&p) {
                    assert_eq!(v, 0.0);
                }
            }
            // scan every position for the best-matching template
            let mut best = (f64::NEG_INFINITY, 0);
            for r in 0..=13 {
                for c in 0..=13 {
                    for (k, tpl) in templates.iter().enumerate() {
                        let score: f64 = (0..9).map(|q| x[(r + q / 3) * 16 + c + q % 3] * tpl[q]).sum();
                        if score > best.0 {
                            best = (score, k);
                        }
                    }
                }
            }
            assert_eq!(best.1, labels[i]);
        }
    }

    #[test]
    fn keyword_construction_and_oracle() {
        let ds = gen_keyword_seq(&spec(TaskKind::KeywordSeq, 600, 3)).unwrap();
        let Inputs::Tokens(tok) = ds.inputs() else { panic!() };
        let Targets::Classes(labels) = ds.targets() else { panic!() };
        for i in 0..ds.len() {
            let rel = &ds.relevance()[i];
            assert!((1..=3).contains(&rel.len()));
            let row = tok.row(i);
            let pos = row.iter().filter(|&&t| t < 5).count();
            let neg = row.iter().filter(|&&t| (5..10).contains(&t)).count();
            assert_eq!(pos + neg, rel.len());
            assert_eq!(labels[i], usize::from(pos > neg));
        }
        let frac = labels.iter().sum::<usize>() as f64 / labels.len() as f64;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
        let mut small = spec(TaskKind::KeywordSeq, 5, 0);
        small.vocab = 10;
        assert!(matches!(gen_keyword_seq(&small), Err(Error::Config(_))));
    }

    #[test]
    fn char_examples() {
        assert_eq!(char_score(&encode_chars("OONC").unwrap()), 2.0);
        assert_eq!(char_score(&encode_chars("HSPF").unwrap()), 0.0);
        let mut s = spec(TaskKind::CharCount, 50, 4);
        s.noise = 0.0;
        let ds = gen_char_count(&s).unwrap();
        let Inputs::Tokens(tok) = ds.inputs() else { panic!() };
        let Targets::Values(y) = ds.targets() else { panic!() };
        for i in 0..ds.len() {
            assert_eq!(y[i], char_score(tok.row(i)));
            assert!(!ds.relevance()[i].is_empty());
        }
    }

    #[test]
    fn generation_is_pure_and_split_is_partition() {
        for kind in [TaskKind::PlantedPatch, TaskKind::KeywordSeq, TaskKind::CharCount] {
            let s = spec(kind, 50, 9);
            let a = generate(&s).unwrap();
            assert_eq!(a, generate(&s).unwrap());
            let (tr, te) = a.train_test_split(0.2).unwrap();
            assert_eq!((tr.len(), te.len()), (40, 10));
            let idx: Vec<usize> = (0..50).collect();
            let whole = tr.relevance().iter().chain(te.relevance()).cloned().collect::<Vec<_>>();
            assert_eq!(whole, a.subset(&idx, Split::Full).unwrap().relevance());
        }
    }
}
