//! Clamp-then-uniform-bin quantization of relative actions.
//!
//! Each action component is clamped to its fitted 1st/99th percentile range
//! and mapped to `floor(u * (M - 1))` with `u` the normalized position inside
//! that range. The three components use independent bounds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::RelativeAction;

pub const CODEC_FORMAT_VERSION: &str = "drivelang-codec/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ComponentBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(invalid(format!("bad component bounds [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }

    /// Width of one quantization bin.
    pub fn bin_width(&self, bins: usize) -> f64 {
        (self.hi - self.lo) / (bins - 1) as f64
    }

    pub fn mirrored(&self) -> Self {
        Self {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

/// Per-component action tokens `(qx, qy, qtheta)`, each in `[0, M)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ActionTokens {
    pub qx: u32,
    pub qy: u32,
    pub qtheta: u32,
}

impl ActionTokens {
    pub fn new(qx: u32, qy: u32, qtheta: u32) -> Self {
        Self { qx, qy, qtheta }
    }

    pub fn to_array(self) -> [u32; 3] {
        [self.qx, self.qy, self.qtheta]
    }

    pub fn from_array(a: [u32; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Nearest-rank percentile: sort ascending, take index `ceil(p/100 * n) - 1`.
pub fn percentile(samples: &[f64], pct: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(invalid(format!("percentile {pct} outside [0, 100]")));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("percentile over non-finite samples"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank_index(sorted.len(), pct)])
}

fn rank_index(n: usize, pct: f64) -> usize {
    let idx = (pct / 100.0 * n as f64).ceil() as i64 - 1;
    idx.clamp(0, n as i64 - 1) as usize
}

pub fn fit_bounds(samples: &[f64], lo_pct: f64, hi_pct: f64) -> Result<ComponentBounds> {
    if lo_pct > hi_pct {
        return Err(invalid(format!("lo percentile {lo_pct} above hi {hi_pct}")));
    }
    let lo = percentile(samples, lo_pct)?;
    let hi = percentile(samples, hi_pct)?;
    ComponentBounds::new(lo, hi)
}

pub fn encode_component(v: f64, b: ComponentBounds, bins: usize) -> u32 {
    debug_assert!(bins >= 2);
    let span = b.hi - b.lo;
    if span <= 0.0 || v.is_nan() {
        return 0;
    }
    let u = (b.clamp(v) - b.lo) / span;
    let q = (u * (bins - 1) as f64).floor() as i64;
    q.clamp(0, bins as i64 - 1) as u32
}

/// Bin-center decode; the top bin clamps to `hi`.
pub fn decode_component(q: u32, b: ComponentBounds, bins: usize) -> Result<f64> {
    if q as usize >= bins {
        return Err(invalid(format!("action bin {q} outside [0, {bins})")));
    }
    if b.hi <= b.lo {
        return Ok(b.lo);
    }
    let u = ((q as f64 + 0.5) / (bins - 1) as f64).min(1.0);
    Ok(b.lo + u * (b.hi - b.lo))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCodec {
    pub bounds_x: ComponentBounds,
    pub bounds_y: ComponentBounds,
    pub bounds_theta: ComponentBounds,
    pub bins: usize,
}

/// On-disk JSON form of a fitted codec.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodecFile {
    format_version: String,
    bins: usize,
    lo_percentile: f64,
    hi_percentile: f64,
    x: ComponentBounds,
    y: ComponentBounds,
    theta: ComponentBounds,
}

impl ActionCodec {
    pub fn new(
        bounds_x: ComponentBounds,
        bounds_y: ComponentBounds,
        bounds_theta: ComponentBounds,
        bins: usize,
    ) -> Result<Self> {
        if bins < 2 {
            return Err(invalid(format!("codec needs at least 2 bins, got {bins}")));
        }
        Ok(Self {
            bounds_x,
            bounds_y,
            bounds_theta,
            bins,
        })
    }

    /// Fits independent percentile bounds for each component.
    pub fn fit(actions: &[RelativeAction], bins: usize, lo_pct: f64, hi_pct: f64) -> Result<Self> {
        let col = |f: fn(&RelativeAction) -> f64| actions.iter().map(f).collect::<Vec<_>>();
        Self::new(
            fit_bounds(&col(|a| a.dx), lo_pct, hi_pct)?,
            fit_bounds(&col(|a| a.dy), lo_pct, hi_pct)?,
            fit_bounds(&col(|a| a.dtheta), lo_pct, hi_pct)?,
            bins,
        )
    }

    pub fn bounds(&self) -> [ComponentBounds; 3] {
        [self.bounds_x, self.bounds_y, self.bounds_theta]
    }

    pub fn encode_action(&self, a: RelativeAction) -> ActionTokens {
        let b = self.bounds();
        let v = a.to_array();
        ActionTokens::new(
            encode_component(v[0], b[0], self.bins),
            encode_component(v[1], b[1], self.bins),
            encode_component(v[2], b[2], self.bins),
        )
    }

    pub fn decode_action(&self, t: ActionTokens) -> Result<RelativeAction> {
        let b = self.bounds();
        let q = t.to_array();
        Ok(RelativeAction::new(
            decode_component(q[0], b[0], self.bins)?,
            decode_component(q[1], b[1], self.bins)?,
            decode_component(q[2], b[2], self.bins)?,
        ))
    }

    /// Codec for horizontally mirrored data: y and theta bounds negate and swap.
    pub fn mirrored(&self) -> Self {
        Self {
            bounds_x: self.bounds_x,
            bounds_y: self.bounds_y.mirrored(),
            bounds_theta: self.bounds_theta.mirrored(),
            bins: self.bins,
        }
    }

    pub fn save(&self, path: &Path, lo_pct: f64, hi_pct: f64) -> Result<()> {
        let file = CodecFile {
            format_version: CODEC_FORMAT_VERSION.to_string(),
            bins: self.bins,
            lo_percentile: lo_pct,
            hi_percentile: hi_pct,
            x: self.bounds_x,
            y: self.bounds_y,
            theta: self.bounds_theta,
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CodecFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.format_version != CODEC_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported codec version {:?}", file.format_version),
            ));
        }
        let check = |b: ComponentBounds| ComponentBounds::new(b.lo, b.hi);
        Self::new(check(file.x)?, check(file.y)?, check(file.theta)?, file.bins)
    }
}

/// Horizontal-flip counterpart of an action: `(dx, -dy, -dtheta)`.
pub fn flip_action(a: RelativeAction) -> RelativeAction {
    RelativeAction::new(a.dx, -a.dy, -a.dtheta)
}
