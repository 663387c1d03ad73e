//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian. Field order:
//!
//! ```text
//! magic        8 bytes   "SEQCALCK"
//! version      u32       CHECKPOINT_VERSION
//! config_len   u32
//! config       config_len bytes, UTF-8 JSON of ModelConfig
//! step         u64       training-step counter
//! rng_seed     32 bytes  ChaCha8 key of the training stream
//! rng_stream   u64
//! rng_word_pos u128
//! n_tensors    u32
//! n_tensors × {
//!   name_len u32, name (UTF-8), rank u32, dims u64 × rank, values f64 × Π dims
//! }
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Tensors appear in parameter-store order. `f64` values are stored as raw
//! bits, so a round trip is bit-exact.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelConfig, Seq2SeqModel};
use crate::diffmath::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SEQCALCK";

/// Snapshot of a ChaCha8 stream position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(seed))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(model: Seq2SeqModel, step: u64, rng: RngState) -> Self {
        Self { model, step, rng }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(self.model.config())?;
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptFile(format!("checkpoint: {m}"));
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let config_len = r.u32()? as usize;
        let config: ModelConfig =
            serde_json::from_slice(r.take(config_len)?).map_err(|e| corrupt(&e.to_string()))?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let data = (0..count)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(dims, data).map_err(|e| corrupt(&e.to_string()))?;
            params.insert(name, t).map_err(|e| corrupt(&e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let model = Seq2SeqModel::from_params(config, params).map_err(|e| corrupt(&e.to_string()))?;
        Ok(Self {
            model,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptFile("checkpoint: truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
