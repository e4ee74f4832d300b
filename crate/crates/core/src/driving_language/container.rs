//! On-disk dataset container.
//!
//! A dataset is a directory with `manifest.json` plus, per sequence, a raw
//! record (`DGRW`: rendered frames and float actions) written at generation
//! time and a token record (`DGSQ`: global token ids and float actions)
//! written once a codec and codebook have been fitted. All binary fields are
//! little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::RelativeAction;
use crate::obs_tokenizer::{Image, CHANNELS};

pub const MANIFEST_SCHEMA: &str = "drivelang-dataset/1";
pub const SEQUENCE_MAGIC: &[u8; 4] = b"DGSQ";
pub const RAW_MAGIC: &[u8; 4] = b"DGRW";
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub seed: u64,
    /// Raw record file name, relative to the dataset directory.
    pub raw: String,
    /// Token record file name, present once the dataset is tokenized.
    #[serde(default)]
    pub tokens: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub image_vocab: Option<u32>,
    pub action_bins: Option<u32>,
    pub patch: Option<u32>,
    pub height: u32,
    pub width: u32,
    pub frames_per_seq: u32,
    pub frame_rate_hz: f64,
    pub total_frames: u64,
    #[serde(default)]
    pub codec: Option<String>,
    #[serde(default)]
    pub codebook: Option<String>,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.schema_version != MANIFEST_SCHEMA {
            return Err(Error::format(
                &path,
                format!("unsupported dataset schema {:?}", m.schema_version),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = Self::path(dir);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn tokens_per_frame(&self) -> Option<usize> {
        let s = self.patch? as usize;
        Some((self.height as usize / s) * (self.width as usize / s) + 3)
    }
}

/// Rendered frames of one sequence with the ego motion out of each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub images: Vec<Image>,
    pub actions: Vec<RelativeAction>,
}

/// Tokenized sequence with its float actions kept as ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub tokens_per_frame: usize,
    pub ids: Vec<u32>,
    pub actions: Vec<RelativeAction>,
}

impl SequenceRecord {
    pub fn frames(&self) -> usize {
        self.actions.len()
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated record"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::format(
                self.path,
                format!("expected magic {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let version = self.u32()?;
        if version != RECORD_VERSION {
            return Err(Error::format(self.path, format!("unsupported record version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes after record"));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn put_actions(out: &mut Vec<u8>, actions: &[RelativeAction]) {
    for a in actions {
        for v in a.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn get_actions(r: &mut Reader<'_>, n: usize) -> Result<Vec<RelativeAction>> {
    (0..n)
        .map(|_| Ok(RelativeAction::new(r.f64()?, r.f64()?, r.f64()?)))
        .collect()
}

pub fn write_sequence(path: &Path, rec: &SequenceRecord) -> Result<()> {
    let frames = rec.frames();
    if rec.ids.len() != frames * rec.tokens_per_frame {
        return Err(invalid("token count does not match frames * tokens_per_frame"));
    }
    let mut out = Vec::with_capacity(16 + rec.ids.len() * 4 + frames * 24);
    out.extend_from_slice(SEQUENCE_MAGIC);
    for v in [RECORD_VERSION, frames as u32, rec.tokens_per_frame as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for id in &rec.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    put_actions(&mut out, &rec.actions);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_sequence(path: &Path) -> Result<SequenceRecord> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        at: 0,
    };
    r.header(SEQUENCE_MAGIC)?;
    let frames = r.u32()? as usize;
    let tpf = r.u32()? as usize;
    let ids = (0..frames * tpf).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let actions = get_actions(&mut r, frames)?;
    r.finish()?;
    Ok(SequenceRecord {
        tokens_per_frame: tpf,
        ids,
        actions,
    })
}

pub fn write_raw(path: &Path, rec: &RawRecord) -> Result<()> {
    if rec.images.len() != rec.actions.len() {
        return Err(invalid("raw record needs one action per frame"));
    }
    let (h, w) = rec
        .images
        .first()
        .map(|i| (i.height, i.width))
        .unwrap_or((0, 0));
    if rec.images.iter().any(|i| i.height != h || i.width != w) {
        return Err(invalid("raw record frames differ in size"));
    }
    let mut out = Vec::with_capacity(20 + rec.images.len() * (h * w * CHANNELS * 4 + 24));
    out.extend_from_slice(RAW_MAGIC);
    for v in [RECORD_VERSION, rec.images.len() as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for img in &rec.images {
        for v in &img.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_actions(&mut out, &rec.actions);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<RawRecord> {
    let bytes = read_file(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        at: 0,
    };
    r.header(RAW_MAGIC)?;
    let frames = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut images = Vec::with_capacity(frames);
    for _ in 0..frames {
        let data = (0..h * w * CHANNELS).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        images.push(Image::from_data(h, w, data)?);
    }
    let actions = get_actions(&mut r, frames)?;
    r.finish()?;
    Ok(RawRecord { images, actions })
}
