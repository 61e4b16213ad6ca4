//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "REDC"
//! version u32
//! config  u32 length + that many bytes of key=value snapshot text
//! count   u32 number of tensors
//! tensor  repeated: name length u16, name bytes, dtype tag u8,
//!         rank u8, dims u32 × rank, payload (little-endian scalars)
//! check   u64 FNV-1a hash of every preceding byte
//! ```
//!
//! Saving then loading restores every parameter bitwise; any flipped bit in
//! the file fails the checksum before anything is interpreted.

use std::path::Path;

use revfuse_core::params::ParamStore;
use revfuse_core::scalar::{Dtype, Scalar};
use revfuse_core::Tensor;

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"REDC";
pub const VERSION: u32 = 1;

/// FNV-1a, 64-bit: tiny, dependency-free, and plenty to catch corruption
/// (this is an integrity check, not a cryptographic seal).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One stored tensor, still in raw bytes (decoded lazily per precision).
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

/// A parsed checkpoint: the config it was trained with plus every tensor.
#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub config: RunConfig,
    pub tensors: Vec<RawTensor>,
}

/// Serializes the config snapshot and every parameter in the store.
pub fn encode<T: Scalar>(config: &RunConfig, store: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let snap = config.snapshot();
    buf.extend_from_slice(&(snap.len() as u32).to_le_bytes());
    buf.extend_from_slice(snap.as_bytes());
    let ids: Vec<_> = store.ids().collect();
    buf.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = store.name(id);
        let tensor = store.get(id);
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.tag());
        let shape = tensor.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.as_slice() {
            v.write_le(&mut buf);
        }
    }
    let sum = fnv1a64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

pub fn save<T: Scalar>(path: &Path, config: &RunConfig, store: &ParamStore<T>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, "create", e))?;
        }
    }
    std::fs::write(path, encode(config, store)).map_err(|e| io_err(path, "write checkpoint", e))
}

/// A bounds-checked cursor over the checkpoint body.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CliError::data(format!(
                "{}: truncated checkpoint while reading {what}",
                self.origin.display()
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> CliResult<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> CliResult<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses checkpoint bytes. The checksum is verified over the whole body
/// before any field is interpreted.
pub fn decode(bytes: &[u8], origin: &Path) -> CliResult<RawCheckpoint> {
    let tail_err = || {
        CliError::data(format!(
            "{}: not a checkpoint (too short for header and checksum)",
            origin.display()
        ))
    };
    if bytes.len() < MAGIC.len() + 4 + 4 + 4 + 8 {
        return Err(tail_err());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(CliError::data(format!(
            "{}: checksum mismatch (stored {stored:016x}, computed {actual:016x}) — \
             the checkpoint is corrupted",
            origin.display()
        )));
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        origin,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CliError::data(format!(
            "{}: bad magic {magic:?}, expected {MAGIC:?}",
            origin.display()
        )));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CliError::data(format!(
            "{}: unsupported checkpoint version {version} (this build reads {VERSION})",
            origin.display()
        )));
    }
    let cfg_len = cur.u32("config length")? as usize;
    let cfg_bytes = cur.take(cfg_len, "config snapshot")?;
    let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|_| {
        CliError::data(format!(
            "{}: config snapshot is not valid UTF-8",
            origin.display()
        ))
    })?;
    let config = RunConfig::from_snapshot(cfg_text, origin)?;
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for k in 0..count {
        let ctx = format!("tensor {k}");
        let name_len = cur.u16(&format!("{ctx} name length"))? as usize;
        let name_bytes = cur.take(name_len, &format!("{ctx} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| {
                CliError::data(format!(
                    "{}: {ctx} name is not valid UTF-8",
                    origin.display()
                ))
            })?
            .to_string();
        let tag = cur.u8(&format!("{ctx} dtype"))?;
        let dtype = Dtype::from_tag(tag).ok_or_else(|| {
            CliError::data(format!(
                "{}: tensor {name:?} has unknown dtype tag {tag}",
                origin.display()
            ))
        })?;
        let rank = cur.u8(&format!("{ctx} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for d in 0..rank {
            let dim = cur.u32(&format!("{ctx} dim {d}"))? as usize;
            numel = numel.checked_mul(dim).ok_or_else(|| {
                CliError::data(format!(
                    "{}: tensor {name:?} dimensions overflow",
                    origin.display()
                ))
            })?;
            shape.push(dim);
        }
        let payload = cur
            .take(numel * dtype.size(), &format!("tensor {name:?} payload"))?
            .to_vec();
        tensors.push(RawTensor {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if cur.pos != body.len() {
        return Err(CliError::data(format!(
            "{}: {} trailing bytes after the tensor table",
            origin.display(),
            body.len() - cur.pos
        )));
    }
    Ok(RawCheckpoint { config, tensors })
}

pub fn load(path: &Path) -> CliResult<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, "read checkpoint", e))?;
    decode(&bytes, path)
}

impl RawCheckpoint {
    /// Copies every stored tensor into a freshly registered parameter store.
    /// The store must hold exactly the same named parameters (that is, it was
    /// registered from this checkpoint's own config snapshot).
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> CliResult<()> {
        if self.tensors.len() != store.len() {
            return Err(CliError::data(format!(
                "checkpoint holds {} tensors but the model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if t.dtype != T::DTYPE {
                return Err(CliError::data(format!(
                    "tensor {:?} is stored as {:?} but the run uses {:?}",
                    t.name,
                    t.dtype,
                    T::DTYPE
                )));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(CliError::data(format!(
                    "checkpoint names tensor {:?} twice",
                    t.name
                )));
            }
            let id = store.id_of(&t.name).ok_or_else(|| {
                CliError::data(format!(
                    "checkpoint tensor {:?} matches no model parameter",
                    t.name
                ))
            })?;
            let size = T::DTYPE.size();
            let vals: Vec<T> = t
                .payload
                .chunks_exact(size)
                .map(|c| T::read_le(c))
                .collect();
            let tensor = Tensor::from_fn(&t.shape, |k| vals[k]);
            store
                .set(id, tensor)
                .map_err(|e| CliError::data(format!("tensor {:?}: {e}", t.name)))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use revfuse_core::chain::FusionModel;
    use revfuse_core::revnet::InitMode;
    use revfuse_core::rng::SplitMix64;

    fn small_store() -> (RunConfig, ParamStore<f32>) {
        let mut cfg = RunConfig::default();
        cfg.blocks = 1;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(3);
        FusionModel::register(
            &mut store,
            cfg.model_options(),
            InitMode::FullRandom,
            &mut rng,
        )
        .unwrap();
        (cfg, store)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (cfg, store) = small_store();
        let bytes = encode(&cfg, &store);
        let raw = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(raw.tensors.len(), store.len());
        // restore into a twin store and compare every coordinate bitwise
        let (_, mut twin) = small_store();
        // perturb the twin so restore() has real work to do
        let first = twin.ids().next().unwrap();
        let zeros = Tensor::zeros(twin.get(first).shape());
        twin.set(first, zeros).unwrap();
        raw.restore(&mut twin).unwrap();
        for id in store.ids() {
            let a = store.get(id).as_slice();
            let b = twin.get(id).as_slice();
            assert_eq!(a.len(), b.len(), "{}", store.name(id));
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", store.name(id));
            }
        }
        // and the config snapshot survives
        assert_eq!(raw.config, {
            let mut c = cfg.clone();
            c.data = None;
            c.out = RunConfig::default().out;
            c
        });
    }

    #[test]
    fn every_flipped_bit_is_detected() {
        let (cfg, store) = small_store();
        let bytes = encode(&cfg, &store);
        // flip one bit in a spread of positions, including the checksum itself
        let step = (bytes.len() / 23).max(1);
        for pos in (0..bytes.len()).step_by(step) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            let err = decode(&bad, Path::new("mem"));
            assert!(err.is_err(), "flip at byte {pos} went unnoticed");
        }
    }

    #[test]
    fn truncation_is_detected() {
        let (cfg, store) = small_store();
        let bytes = encode(&cfg, &store);
        for keep in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..keep], Path::new("mem")).is_err());
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let (cfg, store) = small_store();
        let bytes = encode(&cfg, &store);
        let raw = decode(&bytes, Path::new("mem")).unwrap();
        let mut f64_store: ParamStore<f64> = store.cast();
        let err = raw.restore(&mut f64_store).unwrap_err();
        assert!(err.message.contains("stored as"));
    }

    #[test]
    fn unknown_tensor_and_missing_tensor_are_rejected() {
        let (cfg, store) = small_store();
        let bytes = encode(&cfg, &store);
        let mut raw = decode(&bytes, Path::new("mem")).unwrap();
        raw.tensors[0].name = "nonexistent.weight".into();
        let (_, mut twin) = small_store();
        let err = raw.restore(&mut twin).unwrap_err();
        assert!(err.message.contains("matches no model parameter"));

        let raw2 = {
            let mut r = decode(&bytes, Path::new("mem")).unwrap();
            r.tensors.pop();
            r
        };
        let err = raw2.restore(&mut twin).unwrap_err();
        assert!(err.message.contains("parameters"));
    }
}
