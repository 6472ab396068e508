//! Versioned, checksummed network container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "GPCK"
//! version      u32
//! descriptor   u64 length + JSON architecture
//! tensors      per weight/bias tensor: u64 element count + f64 values
//! checksum     32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Architecture, Network};

const MAGIC: &[u8; 4] = b"GPCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Serializes `net` into the checkpoint byte layout.
pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let descriptor = serde_json::to_vec(&net.architecture())
        .map_err(|e| Error::Internal(format!("architecture does not serialize: {e}")))?;
    let mut out = Vec::with_capacity(64 + descriptor.len() + net.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u64).to_le_bytes());
    out.extend_from_slice(&descriptor);
    for tensor in net.params() {
        out.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses checkpoint bytes. `origin` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Network> {
    let bad = |detail: String| Error::format(origin, detail);
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    if bytes.len() < 8 + CHECKSUM_LEN {
        return Err(bad("truncated checkpoint".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(bad("checksum mismatch".into()));
    }

    let mut cursor = Cursor { bytes: body, pos: 8 };
    let descriptor_len = cursor.u64().ok_or_else(|| bad("truncated descriptor length".into()))? as usize;
    let descriptor = cursor.take(descriptor_len).ok_or_else(|| bad("truncated descriptor".into()))?;
    let architecture: Architecture =
        serde_json::from_slice(descriptor).map_err(|e| bad(format!("bad architecture descriptor: {e}")))?;

    let mut net = architecture.build(0).map_err(|e| bad(format!("descriptor does not build: {e}")))?;
    for (k, slot) in net.params_mut().into_iter().enumerate() {
        let count = cursor.u64().ok_or_else(|| bad(format!("truncated tensor {k}")))? as usize;
        if count != slot.len() {
            return Err(bad(format!("tensor {k} holds {count} values, architecture expects {}", slot.len())));
        }
        let raw = cursor.take(count * 8).ok_or_else(|| bad(format!("truncated tensor {k}")))?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cursor.pos != body.len() {
        return Err(bad(format!("{} trailing bytes after the last tensor", body.len() - cursor.pos)));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};
    use crate::pruning::{prune_network, PruneConfig};
    use proptest::prelude::*;

    fn conv_arch() -> Architecture {
        Architecture {
            input_shape: vec![2, 6, 6],
            layers: vec![
                LayerSpec::Conv2d { channels: 3, kernel: [3, 3], stride: [1, 1], padding: [1, 1], activation: Activation::Relu },
                LayerSpec::MaxPool { size: [2, 2], stride: None },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 5, activation: Activation::Tanh },
                LayerSpec::Dense { units: 4, activation: Activation::Softmax },
            ],
        }
    }

    fn same_bits(a: &Network, b: &Network) -> bool {
        a.architecture() == b.architecture()
            && a.params().iter().zip(b.params()).all(|(x, y)| {
                x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn conv_round_trip_is_bit_exact() {
        let net = conv_arch().build(9).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&net).unwrap(), Path::new("mem")).unwrap();
        assert!(same_bits(&net, &back));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = Architecture::mlp(&[4, 3, 2], Activation::Relu).build(1).unwrap();
        save_checkpoint(&net, &path).unwrap();
        assert!(same_bits(&net, &load_checkpoint(&path).unwrap()));
    }

    #[test]
    fn tampered_byte_fails_checksum() {
        let net = Architecture::mlp(&[4, 3, 2], Activation::Relu).build(1).unwrap();
        let mut bytes = encode_checkpoint(&net).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        let err = decode_checkpoint(&bytes, Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let net = Architecture::mlp(&[2, 2], Activation::Relu).build(1).unwrap();
        let mut bytes = encode_checkpoint(&net).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_checkpoint(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("version 7"), "{err}");
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_checkpoint(b"hello", Path::new("x")).is_err());
        assert!(decode_checkpoint(b"", Path::new("x")).is_err());
    }

    #[test]
    fn pruned_checkpoint_is_smaller() {
        let net = Architecture::mlp(&[6, 8, 8, 3], Activation::Relu).build(4).unwrap();
        let (reduced, report) = prune_network(&net, &PruneConfig::all_hidden(&net, 0.9).unwrap()).unwrap();
        assert!(report.reduced_param_count < report.original_param_count);
        let full = encode_checkpoint(&net).unwrap().len();
        let small = encode_checkpoint(&reduced).unwrap().len();
        // Each dropped parameter frees exactly 8 bytes; the descriptor only changes in its digits.
        let dropped = (report.original_param_count - report.reduced_param_count) * 8;
        assert!(small < full);
        assert!(full - small + 8 >= dropped && full - small <= dropped + 8, "{full} {small} {dropped}");
    }

    proptest! {
        #[test]
        fn random_mlps_round_trip(sizes in proptest::collection::vec(1usize..7, 2..5), seed in any::<u64>()) {
            let net = Architecture::mlp(&sizes, Activation::Relu).build(seed).unwrap();
            let back = decode_checkpoint(&encode_checkpoint(&net).unwrap(), Path::new("mem")).unwrap();
            prop_assert!(same_bits(&net, &back));
        }
    }
}
