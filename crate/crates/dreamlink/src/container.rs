//! On-disk tensor container and atomic file IO.
//!
//! Every persisted tensor (checkpoints, simulated brain-signal vectors)
//! uses one self-describing binary file: magic bytes `DCT1`, a little-endian
//! u32 rank, `rank` little-endian u32 dims, then the values as row-major
//! little-endian f32. A directory of tensors is indexed by `index.json`,
//! which maps logical names to file names and carries arbitrary metadata
//! (config hash, architecture manifest). All writes go through a
//! temp-file-plus-rename so readers never observe partial files.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"DCT1";
const MAX_RANK: u32 = 8;

/// Write `bytes` to `path` atomically: temp file in the same directory,
/// then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("not a file path: {}", path.display())))?;
    let mut tmp = PathBuf::from(dir);
    tmp.push(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize one tensor into the container byte layout.
pub fn tensor_to_bytes(t: &ArrayD<f64>) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() as u32 > MAX_RANK {
        return Err(Error::Container(format!(
            "rank {} exceeds maximum {MAX_RANK}",
            shape.len()
        )));
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(4 + 4 + 4 * shape.len() + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    // Row-major traversal; `iter` follows logical order for standard layout.
    for &v in t.as_standard_layout().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parse container bytes back into a tensor (values widen to f64).
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<ArrayD<f64>> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Container("missing DCT1 magic".into()));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if rank > MAX_RANK {
        return Err(Error::Container(format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let header = 8 + 4 * rank as usize;
    if bytes.len() < header {
        return Err(Error::Container("truncated dim header".into()));
    }
    let mut dims = Vec::with_capacity(rank as usize);
    for i in 0..rank as usize {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let n: usize = dims.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(Error::Container(format!(
            "payload length {} does not match shape {dims:?}",
            bytes.len() - header
        )));
    }
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let off = header + 4 * i;
        vals.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    ArrayD::from_shape_vec(IxDyn(&dims), vals)
        .map_err(|e| Error::Container(format!("shape error: {e}")))
}

pub fn write_tensor(path: &Path, t: &ArrayD<f64>) -> Result<()> {
    atomic_write(path, &tensor_to_bytes(t)?)
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f64>> {
    tensor_from_bytes(&fs::read(path)?)
}

#[derive(Debug, Serialize, Deserialize, Default)]
struct Index {
    /// Logical tensor name → relative file name.
    tensors: BTreeMap<String, String>,
    /// Free-form metadata (config hash, architecture description, ...).
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// A directory of named tensors with a JSON index.
#[derive(Debug)]
pub struct TensorStore {
    dir: PathBuf,
    index: Index,
}

impl TensorStore {
    /// Create (or reset) a store at `dir`.
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let store = Self {
            dir: dir.to_path_buf(),
            index: Index::default(),
        };
        store.write_index()?;
        Ok(store)
    }

    /// Open an existing store.
    pub fn open(dir: &Path) -> Result<Self> {
        let raw = fs::read(dir.join("index.json"))
            .map_err(|e| Error::Container(format!("no index.json in {}: {e}", dir.display())))?;
        let index: Index = serde_json::from_slice(&raw)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn write_index(&self) -> Result<()> {
        let body = serde_json::to_vec_pretty(&self.index)?;
        atomic_write(&self.dir.join("index.json"), &body)
    }

    /// File-system-safe file name for a logical tensor name.
    fn file_for(&self, name: &str) -> String {
        let safe: String = name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{safe}.dct")
    }

    pub fn save(&mut self, name: &str, t: &ArrayD<f64>) -> Result<()> {
        let file = self.file_for(name);
        write_tensor(&self.dir.join(&file), t)?;
        self.index.tensors.insert(name.to_string(), file);
        self.write_index()
    }

    pub fn load(&self, name: &str) -> Result<ArrayD<f64>> {
        let file = self
            .index
            .tensors
            .get(name)
            .ok_or_else(|| Error::Container(format!("tensor {name:?} not in index")))?;
        read_tensor(&self.dir.join(file))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.tensors.contains_key(name)
    }

    /// Logical names in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.index.tensors.keys().cloned().collect()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        self.index.meta.insert(key.into(), value.into());
        self.write_index()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.index.meta.get(key).map(|s| s.as_str())
    }

    /// SHA-256 over every tensor's serialized bytes, in sorted name order.
    ///
    /// Frozen-weight guards compare this before and after training steps.
    pub fn checksum(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, file) in &self.index.tensors {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(fs::read(self.dir.join(file))?);
        }
        Ok(hex(&h.finalize()))
    }
}

/// Lowercase hex encoding.
pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a byte slice as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let t = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![0.5, -1.25, 3.0, 0.0, 0.001953125, -7.5],
        )
        .unwrap();
        let back = tensor_from_bytes(&tensor_to_bytes(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        // All chosen values are exactly representable in f32.
        assert_eq!(back, t);
    }

    #[test]
    fn layout_is_exactly_specified() {
        let t = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 2.0]).unwrap();
        let b = tensor_to_bytes(&t).unwrap();
        assert_eq!(&b[..4], b"DCT1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2, "rank");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1, "dim 0");
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2, "dim 1");
        assert_eq!(f32::from_le_bytes(b[16..20].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 2.0);
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn rejects_malformed_bytes() {
        assert!(tensor_from_bytes(b"NOPE").is_err());
        assert!(tensor_from_bytes(b"DCT1").is_err(), "missing rank");
        let t = ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap();
        let mut b = tensor_to_bytes(&t).unwrap();
        b.pop();
        assert!(tensor_from_bytes(&b).is_err(), "truncated payload");
    }

    #[test]
    fn store_round_trip_and_checksum_stability() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TensorStore::create(dir.path()).unwrap();
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 0.25, 0.125]).unwrap();
        store.save("layer.weight", &a).unwrap();
        store.save("layer.bias", &b).unwrap();
        store.set_meta("config_hash", "deadbeef").unwrap();

        let reopened = TensorStore::open(dir.path()).unwrap();
        assert_eq!(reopened.load("layer.weight").unwrap(), a);
        assert_eq!(reopened.load("layer.bias").unwrap(), b);
        assert_eq!(reopened.meta("config_hash"), Some("deadbeef"));
        assert_eq!(reopened.names(), vec!["layer.bias", "layer.weight"]);

        let c1 = store.checksum().unwrap();
        assert_eq!(c1, reopened.checksum().unwrap(), "checksum stable across reopen");
        store.save("layer.bias", &a).unwrap();
        assert_ne!(c1, store.checksum().unwrap(), "checksum must react to changes");
    }

    #[test]
    fn atomic_write_replaces_existing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        // No stray temp files left behind.
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["x.bin"]);
    }
}
