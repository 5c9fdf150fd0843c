//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field        | type                          |
//! |--------------|-------------------------------|
//! | magic        | `b"ETCK"`                     |
//! | version      | `u32` = 1                     |
//! | header_len   | `u32`                         |
//! | header       | UTF-8 JSON, [`CheckpointHeader`] |
//! | count        | `u32` number of tensors       |
//! | tensor × count | see below                   |
//!
//! Each tensor: `u32` name length, name bytes, `u8` group (0 encoder,
//! 1 decoder), `u8` trainable flag, `u32` rank, `rank × u32` dims, then
//! `numel × f64` values row-major. Values are always stored as `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{Group, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::train::Stage;

pub const MAGIC: &[u8; 4] = b"ETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Non-reserved tokens in id order.
    pub vocab: Vec<String>,
    /// Last completed stage.
    pub stage: Option<Stage>,
    /// Precision the model was trained in.
    pub scalar: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: Model<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.header.vocab.iter().cloned())
    }
}

pub fn encode<T: Scalar>(model: &Model<T>, vocab: &Vocabulary, stage: Option<Stage>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        vocab: vocab.words().to_vec(),
        stage,
        scalar: T::NAME.to_string(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(match p.group {
            Group::Encoder => 0,
            Group::Decoder => 1,
        });
        buf.push(p.trainable as u8);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, vocab: &Vocabulary, stage: Option<Stage>) -> Result<()> {
    let bytes = encode(model, vocab, stage)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::<T>::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let group = match r.u8()? {
            0 => Group::Encoder,
            1 => Group::Decoder,
            g => return Err(Error::Checkpoint(format!("{name}: unknown group {g}"))),
        };
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
        let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if trainable {
            store.add(name, group, value);
        } else {
            store.add_buffer(name, group, value);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    if header.model.decoder.vocab_size != header.vocab.len() + crate::text::NUM_RESERVED {
        return Err(Error::Checkpoint("vocabulary does not match the decoder size".into()));
    }
    let model = Model::from_store(header.model.clone(), store)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let expected = Model::<T>::new(header.model.clone(), &mut rng)?;
    if model.store.len() != expected.store.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, the configured model has {}",
            model.store.len(),
            expected.store.len()
        )));
    }
    for (id, p) in expected.store.iter() {
        let got = model.store.get(id);
        if got.name != p.name || got.value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} does not match the configured model",
                p.name
            )));
        }
    }
    Ok(Checkpoint { header, model })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
