//! Versioned binary container for named tensors.
//!
//! ```text
//! offset 0   b"C3CK"
//! offset 4   u32 LE  format version
//! offset 8   u32 LE  header length H
//! offset 12  H bytes JSON header (see `Header`)
//! offset 12+H payload: tensors back to back, little endian
//! ```
//!
//! The header is parsed and checked in full (bounds, sizes, payload SHA-256)
//! before any tensor is materialized.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"C3CK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub step: u64,
    #[serde(default)]
    pub stage: String,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is 68 bits wide).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |m: &str| Error::CheckpointMismatch(format!("rng state: {m}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed is not hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("bad word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    architecture: serde_json::Value,
    #[serde(default)]
    meta: serde_json::Value,
    provenance: Provenance,
    #[serde(default)]
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
    payload_len: u64,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
struct RawTensor {
    shape: Vec<usize>,
    dtype: DType,
    bytes: Vec<u8>,
}

/// In-memory checkpoint: tensors by name plus descriptive metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the file holds, e.g. `"encoders"` or `"diffusion"`.
    pub kind: String,
    /// Configuration of the stored model(s), checked on load.
    pub architecture: serde_json::Value,
    /// Free-form settings that travel with the weights.
    pub meta: serde_json::Value,
    pub provenance: Provenance,
    pub rng: Option<RngState>,
    names: Vec<String>,
    tensors: Vec<RawTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, architecture: serde_json::Value, provenance: Provenance) -> Self {
        Self {
            kind: kind.to_string(),
            architecture,
            meta: serde_json::Value::Null,
            provenance,
            rng: None,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate checkpoint tensor `{name}`"
        );
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.names.push(name.to_string());
        self.tensors.push(RawTensor {
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            bytes,
        });
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{name}`")))?;
        let raw = &self.tensors[i];
        if raw.dtype != T::DTYPE {
            return Err(Error::CheckpointMismatch(format!(
                "tensor `{name}` is {:?}, expected {:?}",
                raw.dtype,
                T::DTYPE
            )));
        }
        let data = raw.bytes.chunks(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(raw.shape.clone(), data)
    }

    /// Stores every tensor of `set` as `prefix + name`.
    pub fn add_params<T: Scalar>(&mut self, prefix: &str, set: &ParamSet<T>) {
        for (_, name, t) in set.iter() {
            self.insert(&format!("{prefix}{name}"), t);
        }
    }

    /// Overwrites every tensor of `set` from `prefix + name`; names, shapes
    /// and dtypes must all match.
    pub fn load_params<T: Scalar>(&self, prefix: &str, set: &mut ParamSet<T>) -> Result<()> {
        let named = set
            .iter()
            .map(|(_, name, _)| {
                let t = self.get::<T>(&format!("{prefix}{name}"))?;
                Ok((name.to_string(), t))
            })
            .collect::<Result<Vec<_>>>()?;
        set.load_named(named)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))
    }

    /// Fails unless the stored architecture equals `expected`.
    pub fn expect_architecture<A: Serialize>(&self, expected: &A) -> Result<()> {
        let want = serde_json::to_value(expected)?;
        if want != self.architecture {
            return Err(Error::CheckpointMismatch(format!(
                "architecture differs: file has {}, model expects {}",
                self.architecture, want
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.len());
        for (name, raw) in self.names.iter().zip(&self.tensors) {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: raw.shape.clone(),
                dtype: raw.dtype,
                offset: payload.len() as u64,
                nbytes: raw.bytes.len() as u64,
            });
            payload.extend_from_slice(&raw.bytes);
        }
        let header = Header {
            kind: self.kind.clone(),
            architecture: self.architecture.clone(),
            meta: self.meta.clone(),
            provenance: self.provenance.clone(),
            rng: self.rng.clone(),
            tensors: entries,
            payload_len: payload.len() as u64,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::invalid("checkpoint header too large"))?;
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::CorruptCheckpoint {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt(0, "missing C3CK magic".into()));
        }
        if bytes.len() < 8 {
            return Err(corrupt(4, "truncated before format version".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < PREAMBLE {
            return Err(corrupt(8, "truncated before header length".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = PREAMBLE + hlen;
        if bytes.len() < body {
            return Err(corrupt(
                bytes.len(),
                format!(
                    "header truncated: declares {hlen} bytes, file ends {} bytes in",
                    bytes.len() - PREAMBLE
                ),
            ));
        }
        let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body]).map_err(|e| {
            corrupt(
                PREAMBLE + e.column().saturating_sub(1),
                format!("invalid header JSON: {e}"),
            )
        })?;
        let payload = &bytes[body..];
        if (payload.len() as u64) < header.payload_len {
            return Err(corrupt(
                bytes.len(),
                format!(
                    "payload truncated: expected {} bytes, found {}",
                    header.payload_len,
                    payload.len()
                ),
            ));
        }
        if payload.len() as u64 != header.payload_len {
            return Err(corrupt(
                body + header.payload_len as usize,
                "trailing bytes after payload".into(),
            ));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt(body, "payload SHA-256 does not match header".into()));
        }
        let mut names = Vec::with_capacity(header.tensors.len());
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let want = (numel * e.dtype.size()) as u64;
            let end = e.offset.checked_add(e.nbytes);
            if e.shape.is_empty() && numel != 1 || want != e.nbytes || end.is_none_or(|end| end > header.payload_len) {
                return Err(corrupt(
                    PREAMBLE,
                    format!("tensor `{}` has inconsistent size or offset", e.name),
                ));
            }
            if names.contains(&e.name) {
                return Err(corrupt(PREAMBLE, format!("duplicate tensor `{}`", e.name)));
            }
            names.push(e.name.clone());
            tensors.push(RawTensor {
                shape: e.shape.clone(),
                dtype: e.dtype,
                bytes: payload[e.offset as usize..(e.offset + e.nbytes) as usize].to_vec(),
            });
        }
        Ok(Self {
            kind: header.kind,
            architecture: header.architecture,
            meta: header.meta,
            provenance: header.provenance,
            rng: header.rng,
            names,
            tensors,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::CheckpointNotFound(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new("test", serde_json::json!({"w": 3}), Provenance::default());
        c.insert(
            "a",
            &Tensor::<f32>::from_f64([2, 3], &[1., 2., 3., 4., 5., -0.0]).unwrap(),
        );
        c.insert("b", &Tensor::<f64>::scalar(std::f64::consts::PI));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let a: Tensor<f32> = back.get("a").unwrap();
        assert_eq!(a.data()[5].to_bits(), (-0.0f32).to_bits());
        assert!(back.get::<f32>("b").is_err());
    }

    #[test]
    fn every_truncation_is_rejected_with_offset() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_bump_is_refused() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn flipped_payload_bit_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = rng_from_seed(11);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let a: u64 = rng.random();
        let mut resumed = state.restore().unwrap();
        assert_eq!(resumed.random::<u64>(), a);
    }

    #[test]
    fn missing_file() {
        let e = load_checkpoint(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert_eq!(e.to_string(), "checkpoint not found: /nonexistent/x.ckpt");
    }
}
