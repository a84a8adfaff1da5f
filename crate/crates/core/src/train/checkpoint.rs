//! Binary checkpoint: `REARM`, u32 version, u64 header length, JSON header,
//! then every tensor as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{RearmError, Result};

use super::params::ParameterStore;
use super::{Ablation, HyperParams};

const MAGIC: &[u8; 5] = b"REARM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub hyperparams: HyperParams,
    pub ablation: Ablation,
    pub dataset_digest: String,
    pub best_epoch: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParameterStore,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParameterStore,
    hp: &HyperParams,
    ablation: &Ablation,
    dataset_digest: &str,
    best_epoch: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        hyperparams: hp.clone(),
        ablation: *ablation,
        dataset_digest: dataset_digest.to_string(),
        best_epoch,
        tensors: store
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: [t.value.nrows(), t.value.ncols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(64 + json.len() + 4 * store.tensors().iter().map(|t| t.value.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in store.tensors() {
        for x in t.value.iter() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| RearmError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| RearmError::io(path, e))?;
    let bad = |msg: &str| RearmError::format(path, msg.to_string());
    if bytes.len() < 17 || &bytes[..5] != MAGIC {
        return Err(bad("not a checkpoint (missing REARM magic)"));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(17..17 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut pos = 17 + len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let [r, c] = entry.shape;
        let n = r * c;
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad(&format!("truncated tensor {}", entry.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((entry.name.clone(), Array2::from_shape_vec((r, c), data).expect("length checked")));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(Checkpoint {
        header,
        store: ParameterStore::from_tensors(tensors)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::StoreShape;

    #[test]
    fn roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let shape = StoreShape {
            n_users: 3,
            n_items: 4,
            dim: 4,
            rank: 1,
            modal_dims: [2, 3],
        };
        let mut store = ParameterStore::init(&shape, 5).unwrap();
        store.round_to_f32();
        let hp = HyperParams::default();
        save_checkpoint(&path, &store, &hp, &Ablation::default(), "abc", 7).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.header.dataset_digest, "abc");
        assert_eq!(ck.header.best_epoch, 7);
        assert_eq!(ck.header.hyperparams, hp);
        assert_eq!(ck.store.snapshot(), store.snapshot());
        ck.store.check_layout(&shape).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
