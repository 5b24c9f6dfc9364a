//! Versioned parameter checkpoints.
//!
//! Layout: `LICK`, format version (u32 BE), metadata length (u32 BE), JSON
//! metadata, then every parameter's values as little-endian f64 in store
//! order.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::CodecConfig;
use crate::model::Model;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"LICK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch_hash: String,
    pub config: CodecConfig,
    /// Training stage that produced the weights (0 = untrained).
    pub stage: u8,
    pub step: usize,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub digest: String,
}

pub fn save_checkpoint(path: &Path, model: &Model, stage: u8, step: usize) -> Result<()> {
    let store = &model.store;
    let meta = CheckpointMeta {
        arch_hash: model.cfg.arch_hash(),
        config: model.cfg.clone(),
        stage,
        step,
        names: store.names().to_vec(),
        shapes: (0..store.len()).map(|i| store.shape(i).to_vec()).collect(),
        digest: store.digest(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.write_u32::<BigEndian>(FORMAT_VERSION)?;
    out.write_u32::<BigEndian>(json.len() as u32)?;
    out.extend_from_slice(&json);
    for t in store.values() {
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Metadata and raw values, without building a model.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<Vec<f64>>)> {
    let bytes = fs::read(path)?;
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.read_u32::<BigEndian>().map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u32::<BigEndian>().map_err(|_| Error::Checkpoint("truncated header".into()))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::Checkpoint("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if meta.names.len() != meta.shapes.len() {
        return Err(Error::Checkpoint("metadata lists differ in length".into()));
    }
    let mut values = Vec::with_capacity(meta.shapes.len());
    for (name, shape) in meta.names.iter().zip(&meta.shapes) {
        let n: usize = shape.iter().product();
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut v)
            .map_err(|_| Error::Checkpoint(format!("truncated values of {name}")))?;
        values.push(v);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((meta, values))
}

/// Overwrites `model`'s parameters. Refuses checkpoints of another
/// architecture.
pub fn load_into(path: &Path, model: &mut Model) -> Result<CheckpointMeta> {
    let (meta, values) = read_checkpoint(path)?;
    let want = model.cfg.arch_hash();
    if meta.arch_hash != want {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint {} ({}), model {want} ({})",
            meta.arch_hash, meta.config.name, model.cfg.name
        )));
    }
    let store = &mut model.store;
    if meta.names.as_slice() != store.names() {
        return Err(Error::Checkpoint("parameter names differ".into()));
    }
    for (id, (shape, v)) in meta.shapes.iter().zip(values).enumerate() {
        if shape.as_slice() != store.shape(id) {
            return Err(Error::Checkpoint(format!("shape of {} differs", meta.names[id])));
        }
        store.value_mut(id).data_mut().copy_from_slice(&v);
    }
    if store.digest() != meta.digest {
        return Err(Error::Checkpoint("digest mismatch".into()));
    }
    Ok(meta)
}

/// Builds the model recorded in the checkpoint (with its stored λ and metric).
pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let (meta, _) = read_checkpoint(path)?;
    let mut model = Model::new(meta.config.clone())?;
    let meta = load_into(path, &mut model)?;
    Ok((model, meta))
}
