//! Checkpoint files.
//!
//! ```text
//! offset  size        content
//! 0       8           magic  b"IRDROCK\0"
//! 8       8           header length H, u64 little-endian
//! 16      H           JSON header (UTF-8), see `Header`
//! 16+H    8*P         parameters, f64 little-endian, flat layout of `model`
//! ...     8*P         AdamW first moment   (only if header.optimizer.kind == "adamw")
//! ...     8*P         AdamW second moment  (same condition)
//! ```
//!
//! `P` is `header.param_count`. Serialization is deterministic, so equal
//! checkpoints produce equal files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{OptimizerConfig, OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 8] = b"IRDROCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    param_count: usize,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: OptimizerConfig,
    step_count: u64,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model: *self.params.config(),
            param_count: self.params.len(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step_count: o.step_count,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 24 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_f64s(&mut out, self.params.values());
        if let Some(o) = &self.optimizer {
            if o.config.kind == OptimizerKind::AdamW {
                push_f64s(&mut out, &o.first_moment);
                push_f64s(&mut out, &o.second_moment);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file (bad magic)".into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + header_len)
            .ok_or("truncated checkpoint header")?;
        let header: Header = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        if header.format_version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {}", header.format_version));
        }
        if header.param_count != header.model.param_count() {
            return Err(format!(
                "header declares {} parameters, model needs {}",
                header.param_count,
                header.model.param_count()
            ));
        }
        let p = header.param_count;
        let mut cursor = 16 + header_len;
        let mut read_block = |what: &str| -> std::result::Result<Vec<f64>, String> {
            let end = cursor + 8 * p;
            let block = bytes
                .get(cursor..end)
                .ok_or_else(|| format!("truncated checkpoint: missing {what}"))?;
            cursor = end;
            Ok(block
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let values = read_block("parameters")?;
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let (first_moment, second_moment) = match h.config.kind {
                    OptimizerKind::AdamW => (read_block("first moment")?, read_block("second moment")?),
                    OptimizerKind::Sgd => (Vec::new(), Vec::new()),
                };
                Some(OptimizerState {
                    config: h.config,
                    step_count: h.step_count,
                    first_moment,
                    second_moment,
                })
            }
        };
        if cursor != bytes.len() {
            return Err(format!("{} trailing bytes after checkpoint", bytes.len() - cursor));
        }
        let params = ModelParams::from_values(header.model, values).map_err(|e| e.to_string())?;
        Ok(Checkpoint { params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            vocab_size: 256,
            context_window: 2,
            embed_dim: 3,
            hidden_dim: 4,
        }
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), steps in 0u64..5, adam in any::<bool>()) {
            let params = ModelParams::init(config(), seed, 1.0).unwrap();
            let optimizer = (steps > 0).then(|| {
                let cfg = if adam { OptimizerConfig::adamw(1e-3) } else { OptimizerConfig::sgd(0.1) };
                let mut s = OptimizerState::new(cfg, params.len()).unwrap();
                let mut p = params.values().to_vec();
                let g: Vec<f64> = p.iter().map(|x| x.sin()).collect();
                for _ in 0..steps {
                    s.step(&mut p, &g).unwrap();
                }
                s
            });
            let ck = Checkpoint { params, optimizer };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let ck = Checkpoint::new(ModelParams::zeros(config()).unwrap());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/ck.bin")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.bin"));
    }
}
