//! Binary checkpoint format.
//!
//! A single file: magic + version, the expanded config (JSON), a manifest of
//! tensor names/shapes/dtypes, a CRC-32-guarded payload of raw little-endian
//! f32 values, an opaque optimizer-state blob (also CRC-guarded), and the
//! epoch counter. Loading reproduces every tensor bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::ArrayD;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;

const MAGIC: &[u8; 8] = b"ADUNCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub store: ParameterStore,
    pub optimizer_state: Vec<u8>,
    pub epoch: u32,
}

pub fn save_checkpoint(
    config: &NetworkConfig,
    store: &ParameterStore,
    optimizer_state: &[u8],
    epoch: u32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config_json = serde_json::to_string(config).expect("config serializes");
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&store.config_hash.to_le_bytes());
    out.extend_from_slice(&store.seed.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());

    // manifest: learnable params then buffers, both in name order
    let entries: Vec<(&String, &ArrayD<f32>, u8)> = store
        .params()
        .map(|(n, a)| (n, a, 0u8))
        .chain(store.buffers().map(|(n, a)| (n, a, 1u8)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut payload: Vec<u8> = Vec::new();
    for (name, arr, kind) in &entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(*kind);
        out.push(DTYPE_F32);
        out.push(arr.ndim() as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.as_slice().expect("standard layout") {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&(optimizer_state.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(optimizer_state).to_le_bytes());
    out.extend_from_slice(optimizer_state);

    std::fs::write(path, &out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };

    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file is v{version}, reader supports v{VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_json = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config block is not utf-8".into()))?;
    let config: NetworkConfig = serde_json::from_str(cfg_json)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let config_hash = r.u64()?;
    let seed = r.u64()?;
    let epoch = r.u32()?;

    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let kind = r.u8()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype {dtype}"
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        manifest.push((name, kind, shape));
    }

    let payload_len = r.u64()? as usize;
    let payload_crc = r.u32()?;
    let payload = r.take(payload_len)?;
    if crc32fast::hash(payload) != payload_crc {
        return Err(Error::Checkpoint("payload checksum mismatch".into()));
    }
    let opt_len = r.u64()? as usize;
    let opt_crc = r.u32()?;
    let opt = r.take(opt_len)?;
    if crc32fast::hash(opt) != opt_crc {
        return Err(Error::Checkpoint("optimizer state checksum mismatch".into()));
    }

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut offset = 0usize;
    for (name, kind, shape) in manifest {
        let n: usize = shape.iter().product();
        let bytes = payload
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for tensor {name}")))?;
        offset += 4 * n;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        match kind {
            0 => {
                params.insert(name, arr);
            }
            1 => {
                buffers.insert(name, arr);
            }
            k => return Err(Error::Checkpoint(format!("tensor {name}: bad kind {k}"))),
        }
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint("payload length disagrees with manifest".into()));
    }
    if config.hash() != config_hash {
        return Err(Error::Checkpoint(
            "embedded config does not match stored hash".into(),
        ));
    }

    let store = ParameterStore::from_parts(params, buffers, config_hash, seed);
    Ok(Checkpoint {
        config,
        store,
        optimizer_state: opt.to_vec(),
        epoch,
    })
}

// ---- tensor blob helpers (used for the opaque optimizer state) -----------

/// Serialize a name->tensor map with the same primitive encoding as the
/// checkpoint body.
pub fn encode_tensor_map(map: &BTreeMap<String, ArrayD<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, arr) in map {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(arr.ndim() as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.as_slice().expect("standard layout") {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensor_map(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = r.u32()? as usize;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("blob name is not utf-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        map.insert(
            name,
            ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NetworkConfig;

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("adunet_ckpt_tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig::tiny();
        let store = ParameterStore::init(&cfg);
        let path = tmpdir("rt").join("a.ckpt");
        save_checkpoint(&cfg, &store, b"opaque-state", 7, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.optimizer_state, b"opaque-state");
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.store.num_tensors(), store.num_tensors());
        for ((na, va), (nb, vb)) in store.params().zip(ck.store.params()) {
            assert_eq!(na, nb);
            // bit-exact comparison
            let ba: Vec<u32> = va.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = vb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "tensor {na} changed across round trip");
        }
        for ((na, va), (nb, vb)) in store.buffers().zip(ck.store.buffers()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn truncated_file_fails_integrity() {
        let cfg = NetworkConfig::tiny();
        let store = ParameterStore::init(&cfg);
        let dir = tmpdir("trunc");
        let path = dir.join("full.ckpt");
        save_checkpoint(&cfg, &store, b"", 1, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 1024]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let cfg = NetworkConfig::tiny();
        let store = ParameterStore::init(&cfg);
        let dir = tmpdir("corrupt");
        let path = dir.join("full.ckpt");
        save_checkpoint(&cfg, &store, b"", 1, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("checksum") || msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn version_mismatch_reported() {
        let cfg = NetworkConfig::tiny();
        let store = ParameterStore::init(&cfg);
        let dir = tmpdir("version");
        let path = dir.join("v.ckpt");
        save_checkpoint(&cfg, &store, b"", 1, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn tensor_map_blob_round_trip() {
        let mut map = BTreeMap::new();
        map.insert(
            "m.a".to_string(),
            ArrayD::from_shape_vec(ndarray::IxDyn(&[2, 3]), vec![1.0f32; 6]).unwrap(),
        );
        map.insert(
            "t".to_string(),
            ArrayD::from_elem(ndarray::IxDyn(&[]), 5.0f32),
        );
        let bytes = encode_tensor_map(&map);
        let back = decode_tensor_map(&bytes).unwrap();
        assert_eq!(map, back);
    }
}
