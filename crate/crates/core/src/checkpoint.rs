//! Model checkpoints: a binary tensor file plus a JSON sidecar holding the
//! configuration needed to rebuild the network.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{GreatModel, ModelConfig};

/// Format tag written to every sidecar.
pub const CHECKPOINT_FORMAT: &str = "great-checkpoint/1";
const MAGIC: &[u8; 8] = b"GRTCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: ModelConfig,
    /// Training configuration as written by the trainer.
    #[serde(default)]
    pub train: serde_json::Value,
    pub epoch: usize,
    pub loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, train: serde_json::Value, epoch: usize, loss: Option<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            model,
            train,
            epoch,
            loss,
        }
    }
}

/// `<checkpoint>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".{}.tmp", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::with_capacity(16 + store.scalar_count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, value) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
        for v in value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    let json = serde_json::to_string_pretty(meta)? + "\n";
    write_atomic(&sidecar_path(path), json.as_bytes())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated tensor file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads the named tensors in file order.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u64()? as usize, r.u64()? as usize);
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let data = r.take(n * 8)?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Array2::from_shape_vec((rows, cols), values).expect("length checked")));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: format `{}`, expected `{CHECKPOINT_FORMAT}`",
            side.display(),
            meta.format
        )));
    }
    Ok(meta)
}

/// Rebuilds the model described by the sidecar and fills in the stored
/// parameters. Every parameter must be present with its expected shape.
pub fn load_checkpoint(path: &Path) -> Result<(GreatModel, ParamStore, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let (model, mut store) = GreatModel::new(&meta.model, 0)?;
    let tensors = read_tensors(path)?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, value) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        if store.get(id).dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                value.dim(),
                store.get(id).dim()
            )));
        }
        *store.get_mut(id) = value;
    }
    Ok((model, store, meta))
}
