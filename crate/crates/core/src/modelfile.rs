//! Self-contained binary model files.
//!
//! Layout: `b"GFRG"`, format version (u32 LE), payload length (u64 LE),
//! SHA-256 of the payload (32 bytes), payload. The payload is a u32 LE
//! header length, a JSON header describing architecture and metadata, and
//! then every weight tensor as raw f64 LE in a fixed order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{EmbeddingConfig, EmbeddingModel};
use crate::error::{Error, Result};
use crate::fingerspell::{FingerspellModel, FEATURE_DIM};
use crate::gesture::{GestureHeadConfig, GestureModel, TrainingMeta};
use crate::landmark::NormalizationConfig;
use crate::nn::{Affine, Lstm};

pub const MAGIC: &[u8; 4] = b"GFRG";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Gesture(GestureModel),
    Embedder(EmbeddingModel),
    Fingerspell(FingerspellModel),
}

impl Artifact {
    pub fn kind(&self) -> &'static str {
        match self {
            Artifact::Gesture(_) => "gesture",
            Artifact::Embedder(_) => "embedder",
            Artifact::Fingerspell(_) => "fingerspell",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    embedding: EmbeddingConfig,
    embedder_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normalization: Option<NormalizationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<GestureHeadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_map: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alphabet: Option<Vec<char>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lstm_hidden: Option<usize>,
    tensor_lengths: Vec<usize>,
}

fn affine_tensors(a: &Affine) -> [&[f64]; 2] {
    [a.w.data(), a.b.data()]
}

fn lstm_tensors(l: &Lstm) -> [&[f64]; 3] {
    [l.wx.data(), l.wh.data(), l.b.data()]
}

fn header_and_tensors(artifact: &Artifact) -> (Header, Vec<&[f64]>) {
    let embedder = match artifact {
        Artifact::Gesture(m) => &m.embedder,
        Artifact::Embedder(e) => e,
        Artifact::Fingerspell(f) => &f.embedder,
    };
    let mut header = Header {
        kind: artifact.kind().to_string(),
        embedding: embedder.config.clone(),
        embedder_version: embedder.version,
        normalization: None,
        head: None,
        label_map: None,
        training: None,
        alphabet: None,
        lstm_hidden: None,
        tensor_lengths: Vec::new(),
    };
    let mut tensors = embedder.tensors();
    match artifact {
        Artifact::Gesture(m) => {
            header.normalization = Some(m.norm_cfg);
            header.head = Some(m.head_config.clone());
            header.label_map = Some(m.label_map.clone());
            header.training = m.meta.clone();
            for layer in &m.head {
                tensors.extend(affine_tensors(layer));
            }
        }
        Artifact::Embedder(_) => {}
        Artifact::Fingerspell(f) => {
            header.alphabet = Some(f.alphabet.clone());
            header.lstm_hidden = Some(f.hidden_size());
            tensors.extend(lstm_tensors(&f.lstm_forward));
            tensors.extend(lstm_tensors(&f.lstm_backward));
            tensors.extend(affine_tensors(&f.char_proj));
        }
    }
    header.tensor_lengths = tensors.iter().map(|t| t.len()).collect();
    (header, tensors)
}

pub fn to_bytes(artifact: &Artifact) -> Result<Vec<u8>> {
    let (header, tensors) = header_and_tensors(artifact);
    let json = serde_json::to_vec(&header).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let floats: usize = tensors.iter().map(|t| t.len()).sum();
    let mut payload = Vec::with_capacity(4 + json.len() + 8 * floats);
    payload.extend_from_slice(&(json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&json);
    for t in tensors {
        for v in t {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREAMBLE + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Hex SHA-256 of a serialized model file.
pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::ModelFormat(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn fill(dst: Vec<&mut [f64]>, lengths: &mut std::slice::Iter<'_, usize>, data: &mut &[u8]) -> Result<()> {
    for slot in dst {
        let expected = lengths
            .next()
            .copied()
            .ok_or_else(|| Error::ModelFormat("fewer tensors than the architecture needs".into()))?;
        if expected != slot.len() {
            return Err(Error::ModelFormat(format!(
                "tensor of {expected} values where {} expected",
                slot.len()
            )));
        }
        let raw = take(data, 8 * expected, "tensor data")?;
        for (v, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunks_exact yields 8 bytes"));
        }
    }
    Ok(())
}

/// Parses a model file, checking magic, version and checksum in that order.
pub fn from_bytes(bytes: &[u8]) -> Result<Artifact> {
    let mut buf = bytes;
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(take(&mut buf, 8, "payload length")?.try_into().expect("8 bytes"));
    let digest = take(&mut buf, 32, "checksum")?;
    if buf.len() as u64 != len {
        return Err(Error::ModelFormat(format!(
            "payload is {} bytes, header says {len}",
            buf.len()
        )));
    }
    if Sha256::digest(buf).as_slice() != digest {
        return Err(Error::Checksum);
    }

    let header_len = u32::from_le_bytes(take(&mut buf, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(&mut buf, header_len, "header")?).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let mut lengths = header.tensor_lengths.iter();
    let mut embedder = EmbeddingModel::new(header.embedding.clone(), 0)?;
    embedder.version = header.embedder_version;
    fill(embedder.tensors_mut(), &mut lengths, &mut buf)?;

    let missing = |field: &str| Error::ModelFormat(format!("{} header lacks {field}", header.kind));
    let artifact = match header.kind.as_str() {
        "embedder" => Artifact::Embedder(embedder),
        "gesture" => {
            let head_config = header.head.clone().ok_or_else(|| missing("head"))?;
            let label_map = header.label_map.clone().ok_or_else(|| missing("label_map"))?;
            let mut model = GestureModel::new(embedder, label_map, head_config, 0)?;
            model.norm_cfg = header.normalization.ok_or_else(|| missing("normalization"))?;
            model.meta = header.training;
            for layer in &mut model.head {
                fill(vec![layer.w.data_mut(), layer.b.data_mut()], &mut lengths, &mut buf)?;
            }
            Artifact::Gesture(model)
        }
        "fingerspell" => {
            let alphabet = header.alphabet.clone().ok_or_else(|| missing("alphabet"))?;
            let hidden = header.lstm_hidden.ok_or_else(|| missing("lstm_hidden"))?;
            let mut model = FingerspellModel {
                embedder,
                lstm_forward: Lstm::zeros(FEATURE_DIM, hidden),
                lstm_backward: Lstm::zeros(FEATURE_DIM, hidden),
                char_proj: Affine::zeros(2 * hidden, alphabet.len() + 1),
                alphabet,
            };
            for l in [&mut model.lstm_forward, &mut model.lstm_backward] {
                fill(
                    vec![l.wx.data_mut(), l.wh.data_mut(), l.b.data_mut()],
                    &mut lengths,
                    &mut buf,
                )?;
            }
            let p = &mut model.char_proj;
            fill(vec![p.w.data_mut(), p.b.data_mut()], &mut lengths, &mut buf)?;
            Artifact::Fingerspell(model)
        }
        other => return Err(Error::ModelFormat(format!("unknown model kind {other:?}"))),
    };
    if lengths.next().is_some() || !buf.is_empty() {
        return Err(Error::ModelFormat("trailing tensor data".into()));
    }
    Ok(artifact)
}

/// Writes via a temporary sibling file and a rename.
pub fn save(artifact: &Artifact, path: &Path) -> Result<()> {
    let bytes = to_bytes(artifact)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Artifact> {
    from_bytes(&std::fs::read(path)?)
}

pub fn save_model(model: &GestureModel, path: &Path) -> Result<()> {
    save(&Artifact::Gesture(model.clone()), path)
}

pub fn load_model(path: &Path) -> Result<GestureModel> {
    match load(path)? {
        Artifact::Gesture(m) => Ok(m),
        other => Err(Error::ModelFormat(format!(
            "expected a gesture model, found {}",
            other.kind()
        ))),
    }
}

pub fn load_embedder(path: &Path) -> Result<EmbeddingModel> {
    match load(path)? {
        Artifact::Embedder(e) => Ok(e),
        Artifact::Fingerspell(f) => Ok(f.embedder),
        Artifact::Gesture(g) => Ok(g.embedder),
    }
}
