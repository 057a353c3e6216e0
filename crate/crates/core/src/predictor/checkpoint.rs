//! Binary checkpoint: magic, format version, a JSON header describing the
//! model and every parameter block, then the blocks as little-endian f64.

use super::{Predictor, PredictorConfig};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FGCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    v: u32,
    feature_dim: usize,
    n_hid: usize,
    n_layers: usize,
    n_heads: usize,
    seed: u64,
    config: PredictorConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<W: Write>(model: &Predictor, mut w: W) -> Result<()> {
    let store = model.params();
    let header = Header {
        v: CHECKPOINT_VERSION,
        feature_dim: model.feature_dim,
        n_hid: model.config.n_hid,
        n_layers: model.config.n_layers,
        n_heads: model.config.n_heads,
        seed: model.seed,
        config: model.config.clone(),
        params: store.ids().map(|id| ParamEntry { name: store.name(id).to_string(), shape: store.get(id).shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in store.tensors() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Predictor> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 26 {
        return Err(Error::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut model = Predictor::new(header.config.clone(), header.feature_dim, header.seed)?;
    let store = model.params_mut();
    let expected: Vec<ParamEntry> =
        store.ids().map(|id| ParamEntry { name: store.name(id).to_string(), shape: store.get(id).shape().to_vec() }).collect();
    if expected != header.params {
        return Err(Error::Checkpoint("parameter layout does not match the declared configuration".into()));
    }
    let mut buf = [0u8; 8];
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            r.read_exact(&mut buf).map_err(|_| Error::Checkpoint("truncated parameter data".into()))?;
            *x = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Predictor, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Predictor> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
