//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TCRFCKPT"  u32 version  u64 header_len  header (JSON)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims.., f64 data..
//! sha256 of every preceding byte (32 bytes)
//! ```
//!
//! Model tensors keep their parameter names; optimizer moments are stored
//! as `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::label_scheme::LabelSet;
use crate::model::{ModelShape, TaggerModel};
use crate::tensor::ParamSet;
use crate::trainer::{AdamState, TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"TCRFCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train_config: TrainConfig,
    /// Token vocabulary for encoder shapes.
    pub vocabulary: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: ModelShape,
    encoder: Option<EncoderConfig>,
    train: TrainConfig,
    parameter_count: usize,
    seed: u64,
    constrain_bioes: bool,
    labels: String,
    vocabulary: Option<Vec<String>>,
    min_frequency: Option<usize>,
    epoch: usize,
    step: u64,
    best_dev_f1: Option<f64>,
    best_epoch: usize,
}

impl Checkpoint {
    pub fn model(&self) -> &TaggerModel {
        &self.state.model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.state.model;
        let header = Header {
            shape: model.shape,
            encoder: model.encoder_config().cloned(),
            train: self.train_config.clone(),
            parameter_count: model.parameter_count(),
            seed: self.train_config.seed,
            constrain_bioes: model.crf.as_ref().map_or(false, |c| c.is_constrained()),
            labels: LabelSet::clinical().joined(),
            vocabulary: self.vocabulary.as_ref().map(|v| v.tokens().to_vec()),
            min_frequency: self.vocabulary.as_ref().map(|v| v.min_frequency()),
            epoch: self.state.epoch,
            step: self.state.adam.step,
            best_dev_f1: self.state.best_dev_f1.is_finite().then_some(self.state.best_dev_f1),
            best_epoch: self.state.best_epoch,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");

        let tensors = model.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&((tensors.len() * 3) as u32).to_le_bytes());
        for t in &tensors {
            write_tensor(&mut out, &t.name, &t.shape, t.data);
        }
        for (prefix, moments) in [("adam.m/", &self.state.adam.m), ("adam.v/", &self.state.adam.v)] {
            for (t, data) in tensors.iter().zip(moments) {
                write_tensor(&mut out, &format!("{prefix}{}", t.name), &t.shape, data);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.labels != LabelSet::clinical().joined() {
            return Err(corrupt("label set does not match"));
        }

        let mut model = TaggerModel::new(header.shape, header.encoder.as_ref(), header.constrain_bioes)?;
        let count = r.u32()? as usize;
        let n = model.tensors().len();
        if count != 3 * n {
            return Err(corrupt(&format!("expected {} tensors, found {count}", 3 * n)));
        }
        for t in model.tensors_mut() {
            r.tensor_into(&t.name, &t.shape, t.data)?;
        }
        let mut adam = AdamState::new(&model);
        adam.step = header.step;
        let shapes: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        for (prefix, moments) in [("adam.m/", &mut adam.m), ("adam.v/", &mut adam.v)] {
            for ((name, shape), data) in shapes.iter().zip(moments.iter_mut()) {
                r.tensor_into(&format!("{prefix}{name}"), shape, data)?;
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensors"));
        }
        if model.parameter_count() != header.parameter_count {
            return Err(corrupt("parameter count does not match header"));
        }
        let vocabulary = match (header.vocabulary, header.min_frequency) {
            (Some(tokens), Some(min)) => Some(Vocabulary::from_tokens(tokens, min)?),
            (None, None) => None,
            _ => return Err(corrupt("incomplete vocabulary")),
        };
        Ok(Checkpoint {
            state: TrainState {
                model,
                adam,
                epoch: header.epoch,
                best_dev_f1: header.best_dev_f1.unwrap_or(f64::NEG_INFINITY),
                best_epoch: header.best_epoch,
            },
            train_config: header.train,
            vocabulary,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn corrupt(msg: &str) -> Error {
    Error::Checkpoint(msg.to_string())
}

fn write_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor_into(&mut self, name: &str, shape: &[usize], data: &mut [f64]) -> Result<()> {
        let len = self.u32()? as usize;
        let found = self.take(len)?;
        if found != name.as_bytes() {
            return Err(corrupt(&format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(found)
            )));
        }
        let ndim = self.u32()? as usize;
        let dims = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(corrupt(&format!("tensor {name}: shape {dims:?}, expected {shape:?}")));
        }
        let raw = self.take(data.len() * 8)?;
        for (x, chunk) in data.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, Dataset, Sentence};
    use crate::label_scheme::Label;

    fn sample() -> Checkpoint {
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            max_sequence: 8,
            dropout: 0.1,
            token_embedding_dim: 4,
            vocabulary_size: 5,
            seed: 3,
        };
        let model = TaggerModel::new(ModelShape::TransformerCrf, Some(&cfg), true).unwrap();
        let mut state = TrainState::new(model);
        state.adam.step = 7;
        state.adam.m[0][1] = 0.25;
        state.adam.v[2][0] = 1.5e-9;
        state.epoch = 3;
        state.best_dev_f1 = 0.625;
        state.best_epoch = 2;
        let d = Dataset::new(
            "t",
            vec![Sentence::new(vec!["a".into(), "b".into(), "a".into()], vec![Label::Outside; 3]).unwrap()],
        );
        Checkpoint {
            state,
            train_config: TrainConfig {
                seed: 11,
                grad_clip_norm: Some(1.0),
                ..TrainConfig::default()
            },
            vocabulary: Some(build_vocabulary(&d, 1).unwrap()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn fresh_state_round_trips() {
        let model = TaggerModel::new(ModelShape::FrozenEmissionsCrf, None, false).unwrap();
        let c = Checkpoint {
            state: TrainState::new(model),
            train_config: TrainConfig::default(),
            vocabulary: None,
        };
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.state.best_dev_f1, f64::NEG_INFINITY);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let good = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 40]).is_err());
    }
}
