//! Dataset directories: three IDX files plus a `key=value` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::idx::{read_idx, write_idx, IdxData};
use super::{Inputs, LabeledDataset, Split, Targets, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::TokenBatch;

pub const MANIFEST_NAME: &str = "manifest.txt";
const FILES: [(&str, &str); 3] = [("inputs", "inputs.idx"), ("targets", "targets.idx"), ("relevance", "relevance.idx")];

fn to_i32(v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::size(format!("{v} does not fit int32")))
}

/// Writes `inputs.idx`, `targets.idx`, `relevance.idx` and the manifest into
/// `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &LabeledDataset, spec: &TaskSpec) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let inputs = match data.inputs() {
        Inputs::Images(t) => IdxData::F64(t.clone()),
        Inputs::Tokens(t) => IdxData::I32 {
            shape: vec![t.batch(), t.len()],
            data: t.ids().iter().map(|&v| to_i32(v)).collect::<Result<_>>()?,
        },
    };
    let targets = match data.targets() {
        Targets::Classes(c) => {
            IdxData::I32 { shape: vec![c.len()], data: c.iter().map(|&v| to_i32(v)).collect::<Result<_>>()? }
        }
        Targets::Values(v) => IdxData::F64(crate::Tensor::from_vec(&[v.len()], v.clone())?),
    };
    let width = data.relevance().iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut rel = Vec::with_capacity(data.len() * width);
    for r in data.relevance() {
        for &p in r {
            rel.push(to_i32(p)?);
        }
        rel.extend(std::iter::repeat_n(-1, width - r.len()));
    }
    let relevance = IdxData::I32 { shape: vec![data.len(), width], data: rel };
    for ((_, file), content) in FILES.iter().zip([inputs, targets, relevance]) {
        write_idx(&dir.join(file), &content)?;
    }

    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        m.push_str(k);
        m.push('=');
        m.push_str(&v);
        m.push('\n');
    };
    kv("kind", spec.kind.as_str().into());
    kv("split", data.split().as_str().into());
    for (key, file) in FILES {
        kv(key, file.into());
    }
    kv("count", data.len().to_string());
    kv("n_examples", spec.n_examples.to_string());
    kv("image_size", spec.image_size.to_string());
    kv("classes", spec.classes.to_string());
    kv("seq_len", spec.seq_len.to_string());
    kv("vocab", spec.vocab.to_string());
    kv("noise", format!("{:?}", spec.noise));
    kv("seed", spec.seed.to_string());
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, m).map_err(|e| Error::io(path, e))
}

struct Manifest {
    entries: BTreeMap<String, (u64, String)>,
    len: u64,
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches(['\n', '\r']);
            if !body.trim().is_empty() && !body.starts_with('#') {
                let (k, v) = body
                    .split_once('=')
                    .ok_or_else(|| Error::format(offset, format!("manifest line {body:?} is not key=value")))?;
                entries.insert(k.trim().to_string(), (offset, v.trim().to_string()));
            }
            offset += line.len() as u64;
        }
        Ok(Manifest { entries, len: offset })
    }

    fn get(&self, key: &str) -> Result<(u64, &str)> {
        self.entries
            .get(key)
            .map(|(o, v)| (*o, v.as_str()))
            .ok_or_else(|| Error::format(self.len, format!("manifest lacks {key:?}")))
    }

    fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (off, v) = self.get(key)?;
        v.parse().map_err(|_| Error::format(off, format!("bad value {v:?} for {key}")))
    }
}

fn as_usizes(data: &[i32], off: u64, what: &str) -> Result<Vec<usize>> {
    data.iter()
        .map(|&v| usize::try_from(v).map_err(|_| Error::format(off, format!("negative entry {v} in {what}"))))
        .collect()
}

/// Loads a directory written by [`write_dataset`]. A missing or malformed
/// component file is a format error pointing at its manifest line.
pub fn read_dataset(dir: &Path) -> Result<(TaskSpec, LabeledDataset)> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = Manifest::parse(&text)?;
    let (koff, kind) = m.get("kind")?;
    let kind: TaskKind = kind.parse().map_err(|_| Error::format(koff, format!("unknown task kind {kind:?}")))?;
    let (soff, split) = m.get("split")?;
    let split = Split::parse(split).ok_or_else(|| Error::format(soff, format!("unknown split {split:?}")))?;
    let spec = TaskSpec {
        kind,
        n_examples: m.parse_value("n_examples")?,
        image_size: m.parse_value("image_size")?,
        classes: m.parse_value("classes")?,
        seq_len: m.parse_value("seq_len")?,
        vocab: m.parse_value("vocab")?,
        noise: m.parse_value("noise")?,
        seed: m.parse_value("seed")?,
    };

    let mut loaded = Vec::with_capacity(3);
    for (key, _) in FILES {
        let (off, file) = m.get(key)?;
        let path = dir.join(file);
        if !path.is_file() {
            return Err(Error::format(off, format!("referenced file {} is missing", path.display())));
        }
        loaded.push((off, read_idx(&path)?));
    }
    let mut it = loaded.into_iter();
    let (ioff, inputs) = it.next().unwrap();
    let (toff, targets) = it.next().unwrap();
    let (roff, relevance) = it.next().unwrap();

    let inputs = match inputs {
        IdxData::F64(t) => Inputs::Images(t),
        IdxData::I32 { shape, data } if shape.len() == 2 => {
            Inputs::Tokens(TokenBatch::new(as_usizes(&data, ioff, "inputs")?, shape[0], shape[1])?)
        }
        other => {
            return Err(Error::format(
                ioff,
                format!("inputs of shape {:?} are neither images nor tokens", other.shape()),
            ))
        }
    };
    let targets = match targets {
        IdxData::F64(t) if t.rank() == 1 => Targets::Values(t.into_data()),
        IdxData::I32 { shape, data } if shape.len() == 1 => Targets::Classes(as_usizes(&data, toff, "targets")?),
        other => return Err(Error::format(toff, format!("targets must be a vector, got {:?}", other.shape()))),
    };
    let relevance = match relevance {
        IdxData::I32 { shape, data } if shape.len() == 2 => data
            .chunks(shape[1].max(1))
            .take(shape[0])
            .map(|row| as_usizes(&row.iter().copied().filter(|&v| v != -1).collect::<Vec<_>>(), roff, "relevance"))
            .collect::<Result<Vec<_>>>()?,
        other => {
            return Err(Error::format(roff, format!("relevance must be an int32 matrix, got {:?}", other.shape())))
        }
    };
    let ds = LabeledDataset::new(inputs, targets, relevance, split)?;
    let count: usize = m.parse_value("count")?;
    if count != ds.len() {
        return Err(Error::format(m.get("count")?.0, format!("manifest count {count} but files hold {}", ds.len())));
    }
    Ok((spec, ds))
}
