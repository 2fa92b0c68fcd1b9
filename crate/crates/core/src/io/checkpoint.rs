//! `CKP1` checkpoint container.
//!
//! Layout (little-endian): magic `CKP1`, u32 version, u32 metadata length,
//! UTF-8 metadata (a TOML document), u64 step, u64 seed, u32 tensor count,
//! then per tensor: u32 name length, name, u32 rank, u64 dims, f64 payload.
//! A SHA-256 digest of everything before it closes the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoding::WavelengthEncoder;
use crate::error::{CarlError, Result};
use crate::optim::AdamW;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>, step: u64, seed: u64) -> Self {
        Checkpoint {
            metadata: metadata.into(),
            step,
            seed,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    /// Adds every tensor of `store` under `prefix/`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CarlError::MissingTensor(name.to_string()))
    }

    /// Tensor `name`, which must have `shape`.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(CarlError::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Overwrites every tensor of `store` with `prefix/<name>`.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let t = self.get_shaped(&name, store.value(id).shape())?.clone();
            *store.value_mut(id) = t;
        }
        Ok(())
    }

    /// Frozen wavelength frequencies under `name`.
    pub fn push_encoder(&mut self, name: &str, encoder: &WavelengthEncoder) {
        self.push(name, Tensor::from_parts(vec![encoder.freqs().len()], encoder.freqs().to_vec()));
    }

    /// Replaces the frequencies of `encoder`, keeping its scale settings.
    pub fn load_encoder(&self, name: &str, encoder: &WavelengthEncoder) -> Result<WavelengthEncoder> {
        let freqs = self.get_shaped(name, &[encoder.freqs().len()])?;
        WavelengthEncoder::from_parts(freqs.data().to_vec(), encoder.alpha(), encoder.sigma())
    }

    /// Adam moments for each tensor of `store`, plus the update count.
    pub fn push_optimizer(&mut self, prefix: &str, store: &ParamStore, opt: &AdamW) {
        let (m, v) = opt.moments();
        for id in store.ids() {
            self.push(format!("{prefix}.m/{}", store.name(id)), m[id.index()].clone());
            self.push(format!("{prefix}.v/{}", store.name(id)), v[id.index()].clone());
        }
        self.push(format!("{prefix}.steps"), Tensor::scalar(opt.steps_taken() as f64));
    }

    pub fn load_optimizer(&self, prefix: &str, store: &ParamStore, opt: &mut AdamW) -> Result<()> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for id in store.ids() {
            let shape = store.value(id).shape();
            m.push(self.get_shaped(&format!("{prefix}.m/{}", store.name(id)), shape)?.clone());
            v.push(self.get_shaped(&format!("{prefix}.v/{}", store.name(id)), shape)?.clone());
        }
        let steps = self.get_shaped(&format!("{prefix}.steps"), &[])?.item();
        opt.restore(steps as u64, m, v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(CarlError::BadMagic {
                path: path.to_path_buf(),
                expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        let mut r = Reader { bytes, pos: 4, path };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CarlError::UnsupportedVersion {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| r.malformed("metadata is not UTF-8"))?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.malformed("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| r.malformed(&format!("tensor {name:?} has an impossible shape {shape:?}")))?;
            let raw = r.take(numel * 8)?;
            let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let body = r.pos;
        let digest = r.take(DIGEST_LEN)?;
        if r.pos != bytes.len() {
            return Err(r.malformed(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if Sha256::digest(&bytes[..body]).as_slice() != digest {
            return Err(r.malformed("checksum mismatch"));
        }
        Ok(Checkpoint {
            metadata,
            step,
            seed,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CarlError::io(parent, e))?;
        }
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| CarlError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CarlError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CarlError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CarlError::Truncated {
            path: self.path.to_path_buf(),
            expected: self.pos.saturating_add(n) as u64,
            actual: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn malformed(&self, reason: &str) -> CarlError {
        CarlError::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("[model]\ndim = 4\n", 17, 99);
        ck.push("a/w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25));
        ck.push("b", Tensor::scalar(f64::MIN_POSITIVE));
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.metadata, ck.metadata);
        assert_eq!((back.step, back.seed), (17, 99));
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn corruption_is_typed() {
        let bytes = sample().to_bytes();
        let p = Path::new("x");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(CarlError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(CarlError::UnsupportedVersion { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 40], p), Err(CarlError::Truncated { .. })));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(CarlError::Malformed { .. })));
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(CarlError::Malformed { .. })));
    }

    #[test]
    fn store_loading_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 3]));
        let mut ck = Checkpoint::new("", 0, 0);
        ck.push("a/w", Tensor::ones(&[2, 3]));
        ck.load_store("a", &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0; 6]);
        assert!(matches!(ck.load_store("b", &mut store), Err(CarlError::MissingTensor(n)) if n == "b/w"));
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(&[3, 2]));
        assert!(matches!(
            ck.load_store("a", &mut other),
            Err(CarlError::TensorShape { name, .. }) if name == "a/w"
        ));
    }
}
