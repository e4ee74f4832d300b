//! On-disk plumbing shared by the commands: datasets, tokenizers, stamps, images.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use drivelang::action_codec::{ActionCodec, CODEC_FORMAT_VERSION};
use drivelang::driving_language::container::{read_raw, read_sequence, Manifest, RawRecord, SequenceRecord, MANIFEST_SCHEMA, RECORD_VERSION};
use drivelang::driving_language::{deserialize, DrivingSequence};
use drivelang::evaluator::EvalCase;
use drivelang::model::checkpoint::{LanguageInfo, CHECKPOINT_VERSION};
use drivelang::obs_tokenizer::{Codebook, Image, CODEBOOK_VERSION};
use drivelang::pipeline::Tokenizers;
use drivelang::world_sim::{clip_from_scenario, frame_stride, Scenario, WorldConfig};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CODEC_FILE: &str = "codec.json";
pub const CODEBOOK_FILE: &str = "codebook.dgcb";
pub const STAMP_FILE: &str = "stamp.json";

pub fn scenario_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.scenario.json"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reproducibility record: config hash, seeds, format versions and input digests.
pub fn write_stamp(path: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<()> {
    let mut digests = BTreeMap::new();
    for p in inputs {
        digests.insert(p.display().to_string(), file_sha256(p)?);
    }
    let stamp = json!({
        "tool": "drivelang",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg,
        "seeds": cfg.seeds,
        "artifact_versions": {
            "dataset": MANIFEST_SCHEMA,
            "sequence_record": RECORD_VERSION,
            "codec": CODEC_FORMAT_VERSION,
            "codebook": CODEBOOK_VERSION,
            "checkpoint": CHECKPOINT_VERSION,
        },
        "inputs": digests,
    });
    write_json(path, &stamp)
}

/// Stamp path for a single-file output: `plan.json` -> `plan.stamp.json`.
pub fn stamp_beside(file: &Path) -> PathBuf {
    file.with_extension("stamp.json")
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Ok(Manifest::load(dir)?)
}

pub fn load_raw(dir: &Path, m: &Manifest) -> Result<Vec<RawRecord>> {
    m.sequences
        .iter()
        .map(|s| Ok(read_raw(&dir.join(&s.raw))?))
        .collect()
}

/// Codec and codebook referenced by a fitted dataset.
pub fn load_tokenizers(dir: &Path) -> Result<Tokenizers> {
    let m = load_manifest(dir)?;
    let (Some(codec), Some(codebook)) = (&m.codec, &m.codebook) else {
        return Err(CliError::Usage(format!(
            "dataset {} has no fitted tokenizers; run `fit` first",
            dir.display()
        )));
    };
    let codec = ActionCodec::load(&dir.join(codec))?;
    let codebook = Codebook::load(&dir.join(codebook))?;
    Ok(Tokenizers::new(codebook, codec)?)
}

pub fn language(m: &Manifest) -> Result<LanguageInfo> {
    match (m.image_vocab, m.action_bins, m.patch, m.tokens_per_frame()) {
        (Some(d), Some(b), Some(s), Some(tpf)) => Ok(LanguageInfo {
            image_vocab: d,
            action_bins: b,
            tokens_per_frame: tpf,
            grid_rows: m.height as usize / s as usize,
        }),
        _ => Err(CliError::Usage("dataset is not tokenized; run `fit` first".into())),
    }
}

/// Token records of a fitted dataset with their frame sequences.
pub fn load_sequences(dir: &Path, m: &Manifest) -> Result<Vec<(SequenceRecord, DrivingSequence)>> {
    let lang = language(m)?;
    m.sequences
        .iter()
        .map(|s| {
            let file = s
                .tokens
                .as_ref()
                .ok_or_else(|| CliError::Usage(format!("sequence {} has no token record", s.name)))?;
            let rec = read_sequence(&dir.join(file))?;
            let seq = deserialize(&rec.ids, &lang.layout(), rec.tokens_per_frame)?;
            Ok((rec, seq))
        })
        .collect()
}

/// Evaluation cases rebuilt from the scenario files of a dataset.
pub fn load_cases(dir: &Path, cfg: &RunConfig) -> Result<Vec<EvalCase>> {
    let m = load_manifest(dir)?;
    let frames = m.frames_per_seq as usize;
    let stride = frame_stride(&cfg.world_sim, m.frame_rate_hz)?;
    m.sequences
        .iter()
        .map(|s| {
            let scenario = Scenario::load(&scenario_file(dir, &s.name))?;
            case_from_scenario(scenario, frames, stride, &cfg.world_sim, cfg)
        })
        .collect()
}

pub fn case_from_scenario(
    scenario: Scenario,
    frames: usize,
    stride: usize,
    world: &WorldConfig,
    cfg: &RunConfig,
) -> Result<EvalCase> {
    let clip = clip_from_scenario(scenario, frames, stride, world)?;
    Ok(EvalCase::from_clip(&clip, &cfg.evaluator)?)
}

/// Binary PPM of images placed side by side.
pub fn write_strip(path: &Path, images: &[Image]) -> Result<()> {
    let (h, w) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    let mut out = format!("P6\n{} {}\n255\n", w * images.len(), h).into_bytes();
    for r in 0..h {
        for img in images {
            for c in 0..w {
                out.extend(img.pixel(r, c).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&out).map_err(|e| CliError::io(path, e))
}
