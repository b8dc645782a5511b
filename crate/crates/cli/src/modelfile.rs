//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSKM"  u16 version
//! u32 header length, header text (role, split metadata, one layer per line)
//! u32 parameter count, then per parameter:
//!     u16 name length, name, u8 trainable, u8 dim count, u32 dims, f64 payload
//! u32 CRC32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use maskwright::mask::MaskPoint;
use maskwright::nn::{Layer, LayerSpec, ModelGraph, Param};
use maskwright::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"MSKM";
pub const VERSION: u16 = 1;

/// What a stored graph is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Base,
    /// An explanation network for a base model cut at `split_index`.
    Explainer {
        split_index: usize,
        mask_point: MaskPoint,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub role: Role,
    pub graph: ModelGraph,
}

fn header(file: &ModelFile) -> String {
    let mut h = String::new();
    match file.role {
        Role::Base => h.push_str("role=base\n"),
        Role::Explainer { split_index, mask_point } => {
            h.push_str("role=explainer\n");
            h.push_str(&format!("split_index={split_index}\nmask_point={}\n", mask_point.as_str()));
        }
    }
    h.push_str(&format!("dropout_seed={}\n", file.graph.dropout_seed()));
    h.push_str(&format!("layers={}\n", file.graph.len()));
    for spec in file.graph.specs() {
        h.push_str(&spec.to_line());
        h.push('\n');
    }
    h
}

pub fn encode(file: &ModelFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let h = header(file);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(h.as_bytes());
    let params: Vec<(String, &Param)> = file.graph.params().collect();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::from(p.trainable));
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_header(text: &str) -> Result<(Role, u64, Vec<LayerSpec>), String> {
    let mut lines = text.lines();
    let mut kv = std::collections::BTreeMap::new();
    let mut count = None;
    for line in lines.by_ref() {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("bad header line {line:?}"))?;
        if k == "layers" {
            count = Some(v.parse::<usize>().map_err(|_| format!("bad layer count {v:?}"))?);
            break;
        }
        kv.insert(k.to_string(), v.to_string());
    }
    let count = count.ok_or("header lacks a layer count")?;
    let get = |k: &str| kv.get(k).ok_or_else(|| format!("header lacks {k}"));
    let role = match get("role")?.as_str() {
        "base" => Role::Base,
        "explainer" => Role::Explainer {
            split_index: get("split_index")?.parse().map_err(|_| "bad split_index".to_string())?,
            mask_point: MaskPoint::parse(get("mask_point")?).ok_or("bad mask_point")?,
        },
        other => return Err(format!("unknown role {other:?}")),
    };
    let seed = get("dropout_seed")?.parse().map_err(|_| "bad dropout_seed".to_string())?;
    let specs: Vec<LayerSpec> =
        lines.map(|l| LayerSpec::parse_line(l).map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    if specs.len() != count {
        return Err(format!("header declares {count} layers but lists {}", specs.len()));
    }
    Ok((role, seed, specs))
}

/// Parses and verifies a model file; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> CliResult<ModelFile> {
    let corrupt = |msg: String| CliError::Corrupt { path: path.to_path_buf(), msg };
    if bytes.len() < 4 + 2 + 4 {
        return Err(corrupt("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("CRC32 mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16().map_err(corrupt)?;
    if version > VERSION {
        return Err(CliError::Version { path: path.to_path_buf(), found: version, supported: VERSION });
    }
    let hlen = r.u32().map_err(corrupt)? as usize;
    let text = std::str::from_utf8(r.take(hlen).map_err(corrupt)?).map_err(|e| corrupt(e.to_string()))?;
    let (role, seed, specs) = parse_header(text).map_err(corrupt)?;

    let count = r.u32().map_err(corrupt)? as usize;
    let mut stored_params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u16().map_err(corrupt)? as usize;
        let name = std::str::from_utf8(r.take(nlen).map_err(corrupt)?).map_err(|e| corrupt(e.to_string()))?;
        let trainable = r.u8().map_err(corrupt)? != 0;
        let ndim = r.u8().map_err(corrupt)? as usize;
        let shape: Vec<usize> =
            (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>().map_err(corrupt)?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("shape overflow".into()))?).map_err(corrupt)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let value = Tensor::from_vec(&shape, data).map_err(|e| corrupt(e.to_string()))?;
        stored_params.push((name.to_string(), trainable, value));
    }
    if r.pos != body.len() {
        return Err(corrupt(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }

    let mut it = stored_params.into_iter();
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.into_iter().enumerate() {
        let mut params = Vec::new();
        for (name, _, buffer) in spec.param_shapes() {
            let (full, trainable, value) = it.next().ok_or_else(|| corrupt("missing parameters".into()))?;
            if full != format!("layer{i}.{name}") {
                return Err(corrupt(format!("expected parameter layer{i}.{name}, found {full}")));
            }
            params.push(Param { name, value, trainable: trainable && !buffer, buffer, grad: None });
        }
        layers.push(Layer { spec, params });
    }
    if it.next().is_some() {
        return Err(corrupt("more parameters than the layers declare".into()));
    }
    let graph = ModelGraph::from_layers(layers, seed).map_err(|e| corrupt(e.to_string()))?;
    Ok(ModelFile { role, graph })
}

pub fn save_model(path: &Path, file: &ModelFile) -> CliResult<()> {
    fs::write(path, encode(file)).map_err(|e| CliError::io(path, e))
}

pub fn load_model(path: &Path) -> CliResult<ModelFile> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskwright::nn::{Activation, Batch};
    use maskwright::Padding;

    fn sample() -> ModelFile {
        let mut graph = ModelGraph::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    filters: 2,
                    kernel: 3,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                LayerSpec::AvgPool2x,
                LayerSpec::Reshape { shape: vec![8] },
                LayerSpec::BatchNorm { features: 8 },
                LayerSpec::Dense { input: 8, units: 2, activation: Activation::Identity },
            ],
            3,
        )
        .unwrap();
        graph.layers_mut()[0].params[0].trainable = false;
        ModelFile { role: Role::Explainer { split_index: 2, mask_point: MaskPoint::RawInput }, graph }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let f = sample();
        let back = decode(&encode(&f), Path::new("m")).unwrap();
        assert_eq!(back.role, f.role);
        assert_eq!(back.graph.checksum(), f.graph.checksum());
        assert_eq!(back.graph.specs(), f.graph.specs());
        let flags = |g: &ModelGraph| g.params().map(|(_, p)| p.trainable).collect::<Vec<_>>();
        assert_eq!(flags(&back.graph), flags(&f.graph));
        assert!(!back.graph.layers()[0].params[0].trainable);
        assert_eq!(encode(&back), encode(&f));
        for seed in 0..20 {
            let x = maskwright::gradcheck::random_tensor(&[2, 1, 4, 4], -1.0, 1.0, seed);
            let a = f.graph.predict(&Batch::Values(x.clone())).unwrap();
            let b = back.graph.predict(&Batch::Values(x)).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn flipped_byte_is_corruption() {
        let bytes = encode(&sample());
        for pos in [7, bytes.len() / 2, bytes.len() - 12] {
            let mut b = bytes.clone();
            b[pos] ^= 0x01;
            assert!(matches!(decode(&b, Path::new("m")), Err(CliError::Corrupt { .. })), "{pos}");
        }
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut b = encode(&sample());
        b.truncate(b.len() - 4);
        b[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&b, Path::new("m")), Err(CliError::Version { .. })));
    }
}
