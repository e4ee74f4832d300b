//! Binary checkpoint: `DGCK`, version, length-prefixed JSON header, then
//! little-endian f32 parameters and optional f64 optimizer moments.
//! Training logs go to a JSON sidecar next to the checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState};
use super::{ModelConfig, ModelParams, ParamLayout};
use crate::driving_language::VocabLayout;
use crate::error::{Error, Result};
use crate::train::LogEntry;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Vocabulary the model was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub image_vocab: u32,
    pub action_bins: u32,
    pub tokens_per_frame: usize,
    /// Rows of the image token grid.
    pub grid_rows: usize,
}

impl LanguageInfo {
    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            image_vocab: self.image_vocab,
            action_bins: self.action_bins,
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.tokens_per_frame - 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    language: LanguageInfo,
    optimizer: Option<AdamWConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub language: LanguageInfo,
    pub optimizer: Option<(AdamWConfig, OptimizerState)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model: self.params.config.clone(),
            language: self.language,
            optimizer: self.optimizer.as_ref().map(|(c, _)| *c),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let n = self.params.values.len();
        let mut out = Vec::with_capacity(32 + json.len() + n * 20);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some((_, st)) = &self.optimizer {
            out.extend_from_slice(&st.step.to_le_bytes());
            for v in st.m.iter().chain(&st.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut at = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if at + n > bytes.len() {
                return Err(Error::format(path, "truncated checkpoint"));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(take(hlen)?).map_err(|e| Error::json(path, e))?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let expected = ParamLayout::new(&header.model).total;
        if n != expected {
            return Err(Error::format(
                path,
                format!("{n} parameters stored, config needs {expected}"),
            ));
        }
        let values = take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let optimizer = match header.optimizer {
            Some(cfg) => {
                let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
                let mut read = |k: usize| -> Result<Vec<f64>> {
                    Ok(take(k * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect())
                };
                let m = read(n)?;
                let v = read(n)?;
                Some((cfg, OptimizerState { step, m, v }))
            }
            None => None,
        };
        if at != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        let params = ModelParams::from_values(header.model, values)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Self {
            params,
            language: header.language,
            optimizer,
        })
    }
}

/// `model.ckpt` -> `model.log.json`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.json")
}

pub fn save_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(log).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init;

    #[test]
    fn round_trip_with_optimizer() {
        let mut cfg = ModelConfig::desk_default();
        cfg.vocab = 30;
        cfg.context = 10;
        cfg.layers = 1;
        cfg.width = 8;
        cfg.heads = 2;
        cfg.ffn_hidden = 24;
        let params = init::<f32>(&cfg).unwrap();
        let n = params.len();
        let mut st = OptimizerState::new(n);
        st.step = 7;
        st.m[3] = 0.25;
        st.v[n - 1] = 1e-9;
        let ck = Checkpoint {
            params,
            language: LanguageInfo {
                image_vocab: 20,
                action_bins: 3,
                tokens_per_frame: 5,
                grid_rows: 1,
            },
            optimizer: Some((AdamWConfig::default(), st)),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn log_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = log_path(&dir.path().join("m.ckpt"));
        assert!(p.ends_with("m.log.json"));
        let log = vec![
            LogEntry {
                iteration: 1,
                loss: 2.5,
                grad_norm: 0.75,
                eval_loss: None,
            },
            LogEntry {
                iteration: 2,
                loss: 2.25,
                grad_norm: 0.5,
                eval_loss: Some(2.0),
            },
        ];
        save_log(&p, &log).unwrap();
        assert_eq!(load_log(&p).unwrap(), log);
    }
}
