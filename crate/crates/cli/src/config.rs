//! Run configuration: one JSON document with a section per pipeline stage.
//!
//! Files and `--set a.b=value` overrides are merged onto the defaults as JSON
//! trees, so an unknown key is reported instead of silently ignored.

use std::path::{Path, PathBuf};

use drivelang::driving_language::PositionScheme;
use drivelang::evaluator::EvalConfig;
use drivelang::model::ModelConfig;
use drivelang::pipeline::TokenizerConfig;
use drivelang::sampler::{RolloutConfig, SamplerConfig};
use drivelang::train::TrainConfig;
use drivelang::world_sim::{frame_stride, WorldConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Consulted when `--config` is absent.
pub const CONFIG_ENV: &str = "DRIVELANG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub train_sequences: usize,
    pub train_frames: usize,
    pub train_hz: f64,
    pub eval_scenarios: usize,
    pub eval_frames: usize,
    pub eval_hz: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train_sequences: 32,
            train_frames: 16,
            train_hz: 10.0,
            eval_scenarios: 64,
            eval_frames: 12,
            eval_hz: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageTokenizerSection {
    /// Codebook size D.
    pub image_vocab: usize,
    /// Patch side S.
    pub patch: usize,
    pub kmeans_iters: usize,
}

impl Default for ImageTokenizerSection {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        Self {
            image_vocab: t.image_vocab,
            patch: t.patch,
            kmeans_iters: t.kmeans_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSection {
    /// Bins per component M.
    pub action_bins: usize,
    pub lo_pct: f64,
    pub hi_pct: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let t = TokenizerConfig::default();
        Self {
            action_bins: t.action_bins,
            lo_pct: t.lo_pct,
            hi_pct: t.hi_pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub run: TrainConfig,
    /// Add a left-right mirrored copy of every training sequence.
    pub flip_augment: bool,
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub tokenizer: u64,
    pub model: u64,
    pub train: u64,
    pub sampler: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(0)
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            tokenizer: seed,
            model: seed,
            train: seed,
            sampler: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub eval_data: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "runs/data".into(),
            eval_data: "runs/eval".into(),
            checkpoint: "runs/model.ckpt".into(),
        }
    }
}

/// Everything a command needs. Seeds live in their own section and are
/// copied into the stage configs by [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world_sim: WorldConfig,
    pub dataset: DatasetSection,
    pub tokenizer: ImageTokenizerSection,
    pub codec: CodecSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    /// Decoding for world-model generation.
    pub sampler: SamplerConfig,
    /// Decoding for planning (plan, evaluate, ablate). Greedy keeps scores deterministic.
    pub planner: SamplerConfig,
    pub rollout: RolloutConfig,
    pub evaluator: EvalConfig,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world_sim: WorldConfig::default(),
            dataset: DatasetSection::default(),
            tokenizer: ImageTokenizerSection::default(),
            codec: CodecSection::default(),
            model: ModelConfig::desk_default(),
            train: TrainSection::default(),
            sampler: SamplerConfig::default(),
            planner: SamplerConfig::greedy(),
            rollout: RolloutConfig::default(),
            evaluator: EvalConfig::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

/// Recursively overlays `patch` onto `base`, rejecting keys `base` lacks.
fn merge(base: &mut Value, patch: Value, at: &str, bad: &mut Vec<String>) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path, bad),
                    None => bad.push(format!("{path}: unknown key")),
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn nest(path: &str, value: Value) -> Value {
    path.rsplit('.').fold(value, |acc, key| {
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), acc);
        Value::Object(m)
    })
}

impl RunConfig {
    /// Defaults, then the file (if any), then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        let mut bad = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| CliError::Config {
                fields: vec![format!("{}: {e}", path.display())],
            })?;
            merge(&mut tree, patch, "", &mut bad);
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) if !k.is_empty() => merge(&mut tree, nest(k, parse_value(v)), "", &mut bad),
                _ => bad.push(format!("{o}: override must look like section.key=value")),
            }
        }
        if !bad.is_empty() {
            return Err(CliError::Config { fields: bad });
        }
        serde_json::from_value(tree).map_err(|e| CliError::Config {
            fields: vec![format!("type mismatch: {e}")],
        })
    }

    /// Config with the seeds section pushed into every stage.
    pub fn resolved(mut self) -> Self {
        self.model.seed = self.seeds.model;
        self.train.run.seed = self.seeds.train;
        self.sampler.seed = self.seeds.sampler;
        self.planner.seed = self.seeds.sampler;
        self
    }

    pub fn tokenizer_config(&self) -> TokenizerConfig {
        TokenizerConfig {
            image_vocab: self.tokenizer.image_vocab,
            patch: self.tokenizer.patch,
            action_bins: self.codec.action_bins,
            kmeans_iters: self.tokenizer.kmeans_iters,
            lo_pct: self.codec.lo_pct,
            hi_pct: self.codec.hi_pct,
            seed: self.seeds.tokenizer,
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        let g = self.world_sim.image_size / self.tokenizer.patch.max(1);
        g * g + 3
    }

    /// Every violated constraint, each naming the offending fields.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |field: &str, r: drivelang::Result<()>| {
            if let Err(e) = r {
                out.push(format!("{field}: {e}"));
            }
        };
        check("world_sim", self.world_sim.validate());
        check("model", self.model.validate());
        check("train", self.train.run.validate());
        check("sampler", self.sampler.validate());
        check("planner", self.planner.validate());
        check("dataset.train_hz", frame_stride(&self.world_sim, self.dataset.train_hz).map(|_| ()));
        check("dataset.eval_hz", frame_stride(&self.world_sim, self.dataset.eval_hz).map(|_| ()));

        let s = self.tokenizer.patch;
        let size = self.world_sim.image_size;
        if s == 0 || !size.is_multiple_of(s) {
            out.push(format!(
                "world_sim.image_size, tokenizer.patch: image size {size} not divisible by patch {s}"
            ));
        }
        if self.tokenizer.image_vocab == 0 {
            out.push("tokenizer.image_vocab: must be positive".into());
        }
        if self.codec.action_bins < 2 {
            out.push("codec.action_bins: need at least 2 bins".into());
        }
        if !(0.0 <= self.codec.lo_pct && self.codec.lo_pct < self.codec.hi_pct && self.codec.hi_pct <= 100.0) {
            out.push("codec.lo_pct, codec.hi_pct: need 0 <= lo < hi <= 100".into());
        }
        let vocab = self.tokenizer.image_vocab + 3 * self.codec.action_bins;
        if self.model.vocab != vocab {
            out.push(format!(
                "model.vocab, tokenizer.image_vocab, codec.action_bins: vocab {} != D + 3M = {vocab}",
                self.model.vocab
            ));
        }
        if s == 0 || !size.is_multiple_of(s) {
            return out;
        }
        let tpf = self.tokens_per_frame();
        let ctx = self.model.context;
        let need = self.dataset.train_frames * tpf - 1;
        if ctx < need {
            out.push(format!(
                "model.context, dataset.train_frames: context {ctx} < {need} tokens for training clips"
            ));
        }
        let r = &self.rollout;
        if r.window_generate == 0 || r.window_condition == 0 {
            out.push("rollout.window_generate, rollout.window_condition: must be positive".into());
        }
        let need = (r.window_condition + r.window_generate) * tpf - 1;
        if ctx < need {
            out.push(format!(
                "model.context, rollout.window_condition, rollout.window_generate: context {ctx} < {need} tokens per window"
            ));
        }
        let e = &self.evaluator;
        if e.history_frames == 0 || e.horizon == 0 {
            out.push("evaluator.history_frames, evaluator.horizon: must be positive".into());
        } else {
            if self.dataset.eval_frames < e.history_frames + e.horizon - 1 {
                out.push(format!(
                    "dataset.eval_frames, evaluator.history_frames, evaluator.horizon: {} frames cannot hold {} history and {} future",
                    self.dataset.eval_frames, e.history_frames, e.horizon
                ));
            }
            let need = (e.history_frames + e.horizon - 1) * tpf - 1;
            if ctx < need {
                out.push(format!(
                    "model.context, evaluator.history_frames, evaluator.horizon: context {ctx} < {need} tokens for planning"
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fields = self.problems();
        if fields.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config { fields })
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Same config with zeroed action positions.
    pub fn no_action_positions(&self) -> Self {
        let mut c = self.clone();
        c.model.positions = PositionScheme::NoActionPositions;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        assert_eq!(RunConfig::default().problems(), Vec::<String>::new());
        assert_eq!(RunConfig::default().tokens_per_frame(), 19);
    }

    #[test]
    fn overrides_apply_and_parse_types() {
        let c = RunConfig::load(
            None,
            &["model.layers=2".into(), "sampler.greedy=true".into(), "paths.data=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(c.model.layers, 2);
        assert!(c.sampler.greedy);
        assert_eq!(c.paths.data, PathBuf::from("/tmp/x"));
        let c = RunConfig::load(None, &["train.max_steps=7".into(), "train.flip_augment=true".into()]).unwrap();
        assert_eq!(c.train.run.max_steps, 7);
        assert!(c.train.flip_augment);
    }

    #[test]
    fn unknown_keys_all_reported() {
        let err = RunConfig::load(None, &["model.depth=2".into(), "nope=1".into(), "junk".into()]).unwrap_err();
        let CliError::Config { fields } = err else {
            panic!("wrong error")
        };
        assert_eq!(fields.len(), 3);
        assert!(fields[0].starts_with("model.depth"));
    }

    #[test]
    fn cross_field_problems_list_every_field() {
        let c = RunConfig::load(
            None,
            &["tokenizer.patch=5".into(), "codec.action_bins=8".into(), "rollout.window_generate=16".into()],
        )
        .unwrap();
        let p = c.problems().join("\n");
        assert!(p.contains("tokenizer.patch"));
        assert!(p.contains("model.vocab"));
        let c = RunConfig::load(None, &["rollout.window_generate=16".into()]).unwrap();
        let p = c.problems();
        assert_eq!(p.len(), 1);
        assert!(p[0].contains("rollout.window_generate"));
    }

    #[test]
    fn file_merges_and_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"model": {"layers": 3}, "seeds": {"model": 9}}"#).unwrap();
        let c = RunConfig::load(Some(&f), &[]).unwrap().resolved();
        assert_eq!(c.model.layers, 3);
        assert_eq!(c.model.seed, 9);
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert_eq!(c.hash(), RunConfig::load(Some(&f), &[]).unwrap().resolved().hash());
    }
}
