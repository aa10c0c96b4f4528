//! Binary checkpoints: magic, version, JSON metadata, named tensor table, CRC32.
//!
//! ```text
//! "RXF1" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//! u64 count | count × { u32 name_len | name | u8 dtype | u32 rank | rank × u64 dim | values (LE) }
//! u32 crc32(tensor table)
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::network::{Aggregation, ArchSpec, Network};
use crate::tensor::{DType, Real, Tensor};
use crate::transfer::{BnPolicy, TransferMode};

pub const MAGIC: &[u8; 4] = b"RXF1";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a network plus the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    /// Fine-tuned block count of the current split, if split.
    pub split_k: Option<usize>,
    /// Split the source was trained with a feature-distance penalty at.
    pub fdm_k: Option<usize>,
    pub bn_policy: Option<BnPolicy>,
    /// `standard`, `adversarial`, `fdm` or `transfer`.
    pub training_mode: String,
    pub seed: u64,
    pub attack: Option<AttackConfig>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_d: Option<f64>,
    pub transfer_mode: Option<TransferMode>,
    pub convex_blocks: Vec<usize>,
    /// Weights already hold their normalized values.
    pub baked: bool,
    /// Parameters flagged non-trainable.
    pub frozen_params: Vec<String>,
    /// Batch-norm layers whose running statistics are frozen.
    pub frozen_stats: Vec<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    /// Metadata mirroring the structural state of `net`.
    pub fn describe<T: Real>(net: &Network<T>, training_mode: &str, seed: u64) -> Self {
        CheckpointMeta {
            arch: net.arch().clone(),
            split_k: (net.split_index() > 0).then(|| net.k()),
            fdm_k: net.fdm_k,
            bn_policy: None,
            training_mode: training_mode.to_string(),
            seed,
            attack: None,
            lambda: None,
            beta: None,
            lambda_d: None,
            transfer_mode: None,
            convex_blocks: net.convex_blocks(),
            baked: false,
            frozen_params: net
                .params()
                .iter()
                .filter(|p| !p.trainable)
                .map(|p| p.name.clone())
                .collect(),
            frozen_stats: net
                .batch_norms()
                .iter()
                .filter(|(_, bn)| bn.stats_frozen)
                .map(|(_, bn)| bn.name.clone())
                .collect(),
            extra: BTreeMap::new(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `net` and `meta` to bytes.
pub fn encode<T: Real>(net: &Network<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    let table_start = out.len();
    let state = net.state();
    put_u64(&mut out, state.len() as u64);
    for (name, t) in &state {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        put_u32(&mut out, t.rank() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out[table_start..]);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

/// Parses bytes produced by [`encode`], validating every tensor against the
/// network rebuilt from the metadata's architecture descriptor.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(Network<T>, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let meta_len = r.usize("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;

    let table_start = r.pos;
    if bytes.len() < table_start + 4 {
        return Err(Error::Checkpoint("truncated before tensor table".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[table_start..body_end]);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    r.buf = &bytes[..body_end];

    let count = r.usize("tensor count")?;
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{name} stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank).map(|_| r.usize("dimension")).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * dtype.size(), "tensor values")?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != r.buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensor table", r.buf.len() - r.pos)));
    }

    let mut net = Network::<T>::build(&meta.arch, 0).map_err(|e| Error::Checkpoint(format!("architecture: {e}")))?;
    for (name, slot) in net.state_mut() {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, architecture expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("tensor {extra} not part of the architecture")));
    }
    if let Some(k) = meta.split_k {
        net.split(k).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    for p in net.params_mut() {
        p.trainable = !meta.frozen_params.contains(&p.name);
    }
    for (_, bn) in net.batch_norms_mut() {
        bn.stats_frozen = meta.frozen_stats.contains(&bn.name);
    }
    for &b in &meta.convex_blocks {
        if b >= net.num_blocks() {
            return Err(Error::Checkpoint(format!("convex block {b} out of range")));
        }
        net.set_aggregation(b..b + 1, Aggregation::Convex);
    }
    net.fdm_k = meta.fdm_k;
    Ok((net, meta))
}

pub fn save_checkpoint<T: Real>(net: &Network<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(net, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Network<f32>, CheckpointMeta) {
        let mut net = Network::<f32>::build(&ArchSpec::mini_resnet(5, 1, 3, [1, 8, 8]), 2).unwrap();
        net.split(3).unwrap();
        net.set_aggregation(2..5, Aggregation::Convex);
        let mut meta = CheckpointMeta::describe(&net, "transfer", 2);
        meta.beta = Some(0.4);
        (net, meta)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (net, meta) = sample();
        let a = encode(&net, &meta).unwrap();
        let (back, meta2) = decode::<f32>(&a).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(meta2.split_k, Some(3));
        assert!(back.state_bits_eq(&net));
        assert_eq!(back.convex_blocks(), net.convex_blocks());
        let b = encode(&back, &meta2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_is_detected() {
        let (net, meta) = sample();
        let good = encode(&net, &meta).unwrap();
        let mut bad = good.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("checksum"));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("version"));
        assert!(decode::<f32>(&good[..good.len() / 2]).is_err());
        assert!(decode::<f64>(&good).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (net, mut meta) = sample();
        meta.arch.classes = 4;
        assert!(decode::<f32>(&encode(&net, &meta).unwrap()).is_err());
    }
}
