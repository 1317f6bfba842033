//! Checkpoint encoding shared by the embedder and the denoiser.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "cogen-embedder" | "cogen-denoiser",
//!   "version": 1,
//!   ... model-specific header fields ...,
//!   "parameters": { "count": N, "encoding": "f64-le-base64", "data": "<base64>" }
//! }
//! ```
//!
//! Parameters are stored bit-exactly as little-endian IEEE-754 doubles, so a
//! save/load cycle is lossless and identical models serialize to identical bytes.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
pub const ENCODING: &str = "f64-le-base64";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlob {
    pub count: usize,
    pub encoding: String,
    pub data: String,
}

impl ParamBlob {
    pub fn encode(params: &[f64]) -> Self {
        let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
        ParamBlob {
            count: params.len(),
            encoding: ENCODING.into(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        if self.encoding != ENCODING {
            return Err(Error::Checkpoint(format!("unknown parameter encoding {}", self.encoding)));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if bytes.len() != self.count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} bytes, found {}",
                self.count * 8,
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}
