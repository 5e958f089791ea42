//! Checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MDLMCKPT"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header (config, vocabulary hash, stage tag,
//!               rng state, tensor table, parameter count and hash)
//! 20+H    8·N   N parameters, IEEE-754 f64 little-endian, in the order of
//!               the header's tensor table
//! ```
//!
//! Loading then saving reproduces the file byte for byte.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig, TensorInfo};
use crate::error::{Error, Result};
use crate::seed::RngState;

pub const MAGIC: &[u8; 8] = b"MDLMCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Which fine-tuning stages produced a checkpoint: `None` before training,
/// then stage kinds joined by `+` in the order they ran (`FS`, `FS+RO`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageTag(String);

impl StageTag {
    pub fn untrained() -> Self {
        Self("None".into())
    }

    pub fn then(&self, stage: &str) -> Self {
        if self.0 == "None" {
            Self(stage.to_string())
        } else {
            Self(format!("{}+{stage}", self.0))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// File-name friendly form (`FS+RO` becomes `FS-RO`).
    pub fn file_stem(&self) -> String {
        self.0.replace('+', "-")
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DenoiserConfig,
    vocab_hash: String,
    stage: StageTag,
    rng_state: Option<RngState>,
    tensors: Vec<TensorInfo>,
    param_count: usize,
    param_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub vocab_hash: String,
    pub stage: StageTag,
    pub rng_state: Option<RngState>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &Denoiser, vocab_hash: &str, stage: StageTag, rng_state: Option<RngState>) -> Self {
        Self {
            config: *model.config(),
            vocab_hash: vocab_hash.to_string(),
            stage,
            rng_state,
            params: model.params().to_vec(),
        }
    }

    pub fn model(&self) -> Result<Denoiser> {
        Denoiser::from_params(self.config, self.params.clone())
    }

    pub fn param_hash(&self) -> Result<String> {
        Ok(self.model()?.param_hash())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config,
            vocab_hash: self.vocab_hash.clone(),
            stage: self.stage.clone(),
            rng_state: self.rng_state,
            tensors: self.config.tensors(),
            param_count: self.params.len(),
            param_hash: self.param_hash()?,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.tensors != header.config.tensors() {
            return Err(bad("tensor table does not match config"));
        }
        let data = &bytes[20 + hlen..];
        if data.len() != header.param_count * 8 || header.param_count != header.config.num_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {} bytes",
                header.param_count,
                data.len()
            )));
        }
        let params: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ckpt = Self {
            config: header.config,
            vocab_hash: header.vocab_hash,
            stage: header.stage,
            rng_state: header.rng_state,
            params,
        };
        if ckpt.param_hash()? != header.param_hash {
            return Err(bad("parameter hash mismatch"));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file and renames, so a failed write never
    /// leaves a partial checkpoint at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
