//! Checkpoint file: magic, format version, JSON header, then the parameters
//! as little-endian f32.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use incoforge_core::embedder::ProviderSpec;
use incoforge_core::Mode;

use crate::config::TransformerConfig;
use crate::error::{DetectorError, Result};
use crate::model::DetectorModel;
use crate::params::ParamSpec;
use crate::scalar::Scalar;
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"IFDETCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: Option<Mode>,
    pub vocab: Option<Vocab>,
    pub provider: Option<ProviderSpec>,
    pub extra: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    manifest: Vec<ParamSpec>,
    param_count: usize,
    meta: CheckpointMeta,
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, model: &DetectorModel<T>, meta: &CheckpointMeta) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        manifest: model.manifest().to_vec(),
        param_count: model.num_params(),
        meta: meta.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(header.len() as u64)?;
    w.write_all(&header)?;
    for &p in model.params() {
        w.write_f32::<LittleEndian>(p.f64() as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(DetectorModel<T>, CheckpointMeta)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| DetectorError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(DetectorError::Checkpoint("not a detector checkpoint".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(DetectorError::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 30 {
        return Err(DetectorError::Checkpoint("header length is implausible".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let header: Header = serde_json::from_slice(&buf)?;
    let mut params = Vec::with_capacity(header.param_count);
    for _ in 0..header.param_count {
        let x = r.read_f32::<LittleEndian>().map_err(|_| DetectorError::Checkpoint("truncated parameter block".into()))?;
        params.push(T::of(x as f64));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DetectorError::Checkpoint("trailing bytes after parameters".into()));
    }
    let model = DetectorModel::from_params(header.config, &header.manifest, params)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &DetectorModel<T>, meta: &CheckpointMeta) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, meta)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(DetectorModel<T>, CheckpointMeta)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
