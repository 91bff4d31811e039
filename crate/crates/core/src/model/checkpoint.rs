//! Single-file weight checkpoints.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "FSCK" | version u8 | round u64 | tensor count u32
//! per tensor: name length u32 | name bytes | rank u32 | dims u32 * rank
//! value count u32 | values f32 * count | crc32 u32 (over everything before it)
//! ```
//!
//! The same container carries estimator snapshots.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::weights::{flatten_weights, load_flat_weights, FlatWeights, ModelWeights, TensorSpec};
use super::ModelError;

const MAGIC: &[u8; 4] = b"FSCK";
const VERSION: u8 = 1;

/// Serialises weights and a round index into the checkpoint container.
pub fn encode_container(w: &ModelWeights, round_index: u64) -> Result<Vec<u8>, ModelError> {
    let flat = flatten_weights(w)?;
    let mut buf = Vec::with_capacity(32 + 4 * flat.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&round_index.to_le_bytes());
    buf.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for spec in w.manifest() {
        let name = spec.node_name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for v in flat.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Corrupt("truncated container".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and checksums a container produced by [`encode_container`].
pub fn decode_container(bytes: &[u8]) -> Result<(ModelWeights, u64), ModelError> {
    if bytes.len() < 4 + 1 + 8 + 4 + 4 + 4 {
        return Err(ModelError::Corrupt("container too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::Corrupt("checksum mismatch".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let version = cur.take(1)?[0];
    if version != VERSION {
        return Err(ModelError::Corrupt(format!("unsupported version {version}")));
    }
    let round = cur.u64()?;
    let n_tensors = cur.u32()? as usize;
    let mut manifest = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ModelError::Corrupt("node name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        manifest.push(TensorSpec::new(name, shape));
    }
    let count = cur.u32()? as usize;
    let raw = cur.take(
        count
            .checked_mul(4)
            .ok_or_else(|| ModelError::Corrupt("value count overflow".into()))?,
    )?;
    if cur.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let weights = load_flat_weights(&FlatWeights(values), &manifest)?;
    Ok((weights, round))
}

/// A client's one and only checkpoint file, overwritten on every save.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    path: PathBuf,
}

impl Checkpoint {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes to a sibling temp file, then renames over the checkpoint.
    pub fn save(&self, w: &ModelWeights, round_index: u64) -> Result<(), ModelError> {
        let bytes = encode_container(w, round_index)?;
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn load(&self) -> Result<(ModelWeights, u64), ModelError> {
        let bytes = fs::read(&self.path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ModelError::MissingCheckpoint(self.path.clone()),
            _ => ModelError::Io(e.to_string()),
        })?;
        decode_container(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::surrogate::{init_weights, SurrogateShape};

    #[test]
    fn save_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new(dir.path().join("client.ckpt"));
        let w = init_weights(SurrogateShape::default(), 4);
        ck.save(&w, 3).unwrap();
        let (back, round) = ck.load().unwrap();
        assert!(back.bit_eq(&w));
        assert_eq!(round, 3);
    }

    #[test]
    fn second_save_overwrites_first() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new(dir.path().join("client.ckpt"));
        let a = init_weights(SurrogateShape::default(), 1);
        let b = init_weights(SurrogateShape::default(), 2);
        ck.save(&a, 0).unwrap();
        ck.save(&b, 1).unwrap();
        let (back, round) = ck.load().unwrap();
        assert!(back.bit_eq(&b));
        assert_eq!(round, 1);
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1, "exactly one checkpoint file");
    }

    #[test]
    fn load_before_save_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new(dir.path().join("none.ckpt"));
        assert!(matches!(ck.load(), Err(ModelError::MissingCheckpoint(_))));
    }

    #[test]
    fn truncated_or_flipped_files_are_rejected() {
        let w = init_weights(SurrogateShape::default(), 7);
        let bytes = encode_container(&w, 0).unwrap();
        assert!(decode_container(&bytes[..bytes.len() - 9]).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(
            decode_container(&flipped),
            Err(ModelError::Corrupt(_))
        ));
    }
}
