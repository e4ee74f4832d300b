//! Causal decoder-only transformer over the unified driving vocabulary.
//!
//! Llama-style blocks: pre-norm RMSNorm, multi-head causal self-attention with
//! rotary position encoding on queries and keys, and a SiLU-gated feed-forward.
//! All parameters live in one flat buffer described by [`ParamLayout`], which
//! keeps the optimizer, gradient clipping and checkpointing trivial.

pub mod checkpoint;
mod forward;
pub mod infer;
pub mod linalg;
pub mod optim;
pub mod rotary;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::driving_language::PositionScheme;
use crate::error::{invalid, Result};

pub use forward::{backward, forward, loss_and_grad, nll_loss, ForwardCache};
pub use infer::InferenceSession;
pub use linalg::Float;
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use rotary::{apply_rotary, RopeTable};

pub const DEFAULT_TOKEN_DROPOUT: f64 = 0.1;
pub const RMS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    /// Maximum stream length in tokens.
    pub context: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub token_dropout: f64,
    pub seed: u64,
    pub rope_base: f64,
    #[serde(default)]
    pub positions: PositionScheme,
    /// Learned embedding per intra-frame slot (`t % frame_slots`), added to
    /// the token embedding. 0 disables it.
    #[serde(default)]
    pub frame_slots: usize,
}

/// Feed-forward width for a multiplier, rounded up to a multiple of 8.
pub fn ffn_hidden_for(width: usize, mult: f64) -> usize {
    let raw = (mult * width as f64).round() as usize;
    raw.div_ceil(8) * 8
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, width 128, 4 heads, 16 frames of 19 tokens,
    /// one slot embedding per token of a frame.
    pub fn desk_default() -> Self {
        Self {
            vocab: 304,
            context: 16 * 19,
            layers: 4,
            width: 128,
            heads: 4,
            ffn_hidden: ffn_hidden_for(128, 8.0 / 3.0),
            token_dropout: DEFAULT_TOKEN_DROPOUT,
            seed: 0,
            rope_base: 10_000.0,
            positions: PositionScheme::FrameWise,
            frame_slots: 19,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.context == 0 || self.layers == 0 || self.width == 0 {
            return Err(invalid(format!(
                "model dimensions must be positive (vocab {}, context {}, layers {}, width {})",
                self.vocab, self.context, self.layers, self.width
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(invalid(format!("head dim {} must be even", self.head_dim())));
        }
        if self.ffn_hidden == 0 {
            return Err(invalid("feed-forward width must be positive"));
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return Err(invalid(format!("token dropout {} outside [0, 1)", self.token_dropout)));
        }
        if !(self.rope_base > 1.0) {
            return Err(invalid("rotary base must exceed 1"));
        }
        Ok(())
    }
}

/// Offsets of one transformer block inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLayout {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ffn_norm: Range<usize>,
    pub w_gate: Range<usize>,
    pub w_up: Range<usize>,
    pub w_down: Range<usize>,
}

/// Parameter order: embedding, slot embedding, then per layer (attn norm, Wq, Wk, Wv, Wo,
/// ffn norm, W_gate, W_up, W_down), then final norm and output projection.
/// Matrices are row-major `[in x out]`; the embedding is `[vocab x width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub embed: Range<usize>,
    /// `[frame_slots x width]`, empty when slot embeddings are off.
    pub slot_embed: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub final_norm: Range<usize>,
    pub output: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (w, f) = (cfg.width, cfg.ffn_hidden);
        let embed = take(cfg.vocab * w);
        let slot_embed = take(cfg.frame_slots * w);
        let layers = (0..cfg.layers)
            .map(|_| LayerLayout {
                attn_norm: take(w),
                wq: take(w * w),
                wk: take(w * w),
                wv: take(w * w),
                wo: take(w * w),
                ffn_norm: take(w),
                w_gate: take(w * f),
                w_up: take(w * f),
                w_down: take(f * w),
            })
            .collect();
        let final_norm = take(w);
        let output = take(w * cfg.vocab);
        ParamLayout {
            embed,
            slot_embed,
            layers,
            final_norm,
            output,
            total: at,
        }
    }

    /// Norm gains, which are exempt from weight decay.
    pub fn norm_ranges(&self) -> Vec<Range<usize>> {
        let mut r: Vec<_> = self
            .layers
            .iter()
            .flat_map(|l| [l.attn_norm.clone(), l.ffn_norm.clone()])
            .collect();
        r.push(self.final_norm.clone());
        r
    }

    /// Per-parameter weight-decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.total];
        for r in self.norm_ranges() {
            mask[r].iter_mut().for_each(|m| *m = false);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub values: Vec<F>,
}

impl<F: Float> ModelParams<F> {
    pub fn from_values(config: ModelConfig, values: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.total {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                layout.total,
                values.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same parameters in another precision.
    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Seeded initialization: N(0, 0.02) for matrices, residual output projections
/// scaled by `1/sqrt(2 * layers)`, unit norm gains.
pub fn init<F: Float>(cfg: &ModelConfig) -> Result<ModelParams<F>> {
    cfg.validate()?;
    let layout = ParamLayout::new(cfg);
    let mut values = vec![F::zero(); layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = 0.02;
    let resid_std = std / (2.0 * cfg.layers as f64).sqrt();
    let mut fill = |r: Range<usize>, s: f64, rng: &mut ChaCha8Rng| {
        let dist = Normal::new(0.0, s).expect("positive std");
        for v in &mut values[r] {
            *v = F::from_f64(dist.sample(rng));
        }
    };
    fill(layout.embed.clone(), std, &mut rng);
    fill(layout.slot_embed.clone(), std, &mut rng);
    for l in &layout.layers {
        for r in [&l.wq, &l.wk, &l.wv, &l.w_gate, &l.w_up] {
            fill(r.clone(), std, &mut rng);
        }
        fill(l.wo.clone(), resid_std, &mut rng);
        fill(l.w_down.clone(), resid_std, &mut rng);
    }
    fill(layout.output.clone(), std, &mut rng);
    for r in layout.norm_ranges() {
        values[r].iter_mut().for_each(|v| *v = F::one());
    }
    Ok(ModelParams {
        config: cfg.clone(),
        layout,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 20,
            context: 12,
            layers: 2,
            width: 8,
            heads: 2,
            ffn_hidden: 16,
            token_dropout: 0.1,
            seed: 3,
            rope_base: 10_000.0,
            positions: PositionScheme::FrameWise,
            frame_slots: 0,
        }
    }

    #[test]
    fn ffn_hidden_rounding() {
        assert_eq!(ffn_hidden_for(128, 8.0 / 3.0), 344);
        assert_eq!(ffn_hidden_for(64, 8.0 / 3.0), 176);
        assert_eq!(ffn_hidden_for(32, 8.0 / 3.0), 88);
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = tiny();
        let l = ParamLayout::new(&cfg);
        let per_layer = 8 + 4 * 64 + 8 + 3 * 8 * 16;
        assert_eq!(l.total, 20 * 8 + 2 * per_layer + 8 + 8 * 20);
        assert_eq!(l.output.end, l.total);
        let mask = l.decay_mask();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 5 * 8);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init::<f64>(&tiny()).unwrap();
        let b = init::<f64>(&tiny()).unwrap();
        assert_eq!(a.values, b.values);
        let mut other = tiny();
        other.seed = 4;
        assert_ne!(init::<f64>(&other).unwrap().values, a.values);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny();
        c.width = 0;
        assert!(init::<f32>(&c).is_err());
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.width = 6;
        c.heads = 2; // head dim 3 is odd
        assert!(c.validate().is_err());
    }
}
