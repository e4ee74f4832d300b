//! Guided autoregressive decoding.
//!
//! Every slot's logits are restricted to its modality's id range before
//! top-k and temperature are applied, so a decoded stream always parses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action_codec::{ActionCodec, ActionTokens};
use crate::driving_language::{allowed_range, DrivingSequence, Frame, PositionScheme, VocabLayout};
use crate::error::{invalid, Error, Result};
use crate::geometry::{integrate, RelativeAction, Trajectory};
use crate::model::checkpoint::LanguageInfo;
use crate::model::{Float, InferenceSession, ModelParams};
use crate::obs_tokenizer::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 2000,
            greedy: false,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature {} must be positive", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(invalid("top-k must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub window_generate: usize,
    pub window_condition: usize,
    pub total_frames: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            window_generate: 8,
            window_condition: 8,
            total_frames: 64,
        }
    }
}

/// Draws one id from `logits[lo..hi]`; ids outside the range are never returned.
pub fn sample_token<F: Float>(
    logits: &[F],
    allowed: (u32, u32),
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<u32> {
    let (lo, hi) = (allowed.0 as usize, allowed.1 as usize);
    if lo >= hi || hi > logits.len() {
        return Err(invalid(format!(
            "allowed range [{lo}, {hi}) invalid for {} logits",
            logits.len()
        )));
    }
    let mut cand: Vec<(usize, f64)> = (lo..hi)
        .map(|i| (i, logits[i].as_f64()))
        .filter(|(_, v)| v.is_finite())
        .collect();
    if cand.is_empty() {
        return Err(Error::Decoding(format!("no finite logits in [{lo}, {hi})")));
    }
    // descending logit, ascending id on ties
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if cfg.greedy {
        return Ok(cand[0].0 as u32);
    }
    cand.truncate(cfg.top_k.max(1));
    let max = cand[0].1;
    let weights: Vec<f64> = cand.iter().map(|(_, v)| ((v - max) / cfg.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for ((id, _), w) in cand.iter().zip(&weights) {
        if u < *w {
            return Ok(*id as u32);
        }
        u -= w;
    }
    Ok(cand.last().unwrap().0 as u32)
}

/// Incremental decoder over one context window.
struct Decoder<'a, F> {
    session: InferenceSession<'a, F>,
    layout: VocabLayout,
    tpf: usize,
    scheme: PositionScheme,
    /// Tokens fed so far.
    fed: usize,
    /// A generated token not yet pushed through the model.
    pending: Option<u32>,
    logits: Option<Vec<F>>,
}

impl<'a, F: Float> Decoder<'a, F> {
    fn new(params: &'a ModelParams<F>, lang: &LanguageInfo) -> Self {
        Self {
            session: InferenceSession::new(params),
            layout: lang.layout(),
            tpf: lang.tokens_per_frame,
            scheme: params.config.positions,
            fed: 0,
            pending: None,
            logits: None,
        }
    }

    fn push(&mut self, token: u32) -> Result<()> {
        let (frame, slot) = (self.fed / self.tpf, self.fed % self.tpf);
        let pos = self.scheme.position(frame, slot, self.tpf);
        self.logits = Some(self.session.step(token, pos)?);
        self.fed += 1;
        Ok(())
    }

    fn feed(&mut self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            self.push(t)?;
        }
        Ok(())
    }

    /// Samples the token for the next slot without feeding it yet.
    fn next(&mut self, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<u32> {
        if let Some(t) = self.pending.take() {
            self.push(t)?;
        }
        let logits = self
            .logits
            .as_ref()
            .ok_or_else(|| invalid("decoding needs a non-empty context"))?;
        let slot = self.fed % self.tpf;
        let range = allowed_range(slot, self.tpf, &self.layout)?;
        let t = sample_token(logits, range, cfg, rng)?;
        self.pending = Some(t);
        Ok(t)
    }

    /// Global ids for the slots of the current frame from `from_slot` on.
    fn finish_frame(&mut self, from_slot: usize, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
        (from_slot..self.tpf).map(|_| self.next(cfg, rng)).collect()
    }
}

fn split_frame(ids: &[u32], lang: &LanguageInfo) -> Frame {
    let n = lang.image_tokens();
    let l = lang.layout();
    let q = |k: usize| ids[n + k] - l.action_offset(k);
    Frame {
        image: ids[..n].to_vec(),
        action: ActionTokens::new(q(0), q(1), q(2)),
    }
}

fn frame_ids(frame: &Frame, lang: &LanguageInfo) -> Vec<u32> {
    let l = lang.layout();
    let mut ids = frame.image.clone();
    ids.extend(frame.action.to_array().iter().enumerate().map(|(k, q)| q + l.action_offset(k)));
    ids
}

fn check_fits<F: Float>(params: &ModelParams<F>, tokens: usize) -> Result<()> {
    if tokens > params.config.context {
        return Err(invalid(format!(
            "decoding needs {tokens} tokens of context, model holds {}",
            params.config.context
        )));
    }
    Ok(())
}

/// Emits one frame after `context` (whole frames, in frame order).
pub fn generate_frame<F: Float>(
    params: &ModelParams<F>,
    lang: &LanguageInfo,
    context: &DrivingSequence,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenGrid, ActionTokens)> {
    cfg.validate()?;
    if context.is_empty() {
        return Err(invalid("generate_frame needs at least one context frame"));
    }
    check_fits(params, (context.len() + 1) * lang.tokens_per_frame - 1)?;
    let mut dec = Decoder::new(params, lang);
    for f in &context.frames {
        dec.feed(&frame_ids(f, lang))?;
    }
    let frame = split_frame(&dec.finish_frame(0, cfg, rng)?, lang);
    let rows = lang.grid_rows;
    let grid = TokenGrid::new(rows, lang.image_tokens() / rows, frame.image)?;
    Ok((grid, frame.action))
}

/// Generates `rc.total_frames` frames after `seed_frames`, re-conditioning on
/// the last `window_condition` frames every `window_generate` frames. Returns
/// only the generated frames.
pub fn long_rollout<F: Float>(
    params: &ModelParams<F>,
    lang: &LanguageInfo,
    seed_frames: &DrivingSequence,
    rc: &RolloutConfig,
    cfg: &SamplerConfig,
) -> Result<DrivingSequence> {
    cfg.validate()?;
    if rc.window_condition == 0 || rc.window_generate == 0 {
        return Err(invalid("rollout windows must be positive"));
    }
    if seed_frames.len() < rc.window_condition {
        return Err(invalid(format!(
            "{} seed frames, rollout conditions on {}",
            seed_frames.len(),
            rc.window_condition
        )));
    }
    let tpf = lang.tokens_per_frame;
    check_fits(params, (rc.window_condition + rc.window_generate) * tpf - 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut all = seed_frames.frames.clone();
    let mut out = Vec::with_capacity(rc.total_frames);
    let mut chunk = 0;
    while out.len() < rc.total_frames {
        let n = rc.window_generate.min(rc.total_frames - out.len());
        let wrap = |e: Error| match e {
            Error::Decoding(m) => Error::Decoding(format!("chunk {chunk}: {m}")),
            other => other,
        };
        let mut dec = Decoder::new(params, lang);
        for f in &all[all.len() - rc.window_condition..] {
            dec.feed(&frame_ids(f, lang)).map_err(wrap)?;
        }
        for _ in 0..n {
            let frame = split_frame(&dec.finish_frame(0, cfg, &mut rng).map_err(wrap)?, lang);
            all.push(frame.clone());
            out.push(frame);
        }
        chunk += 1;
    }
    DrivingSequence::new(out)
}

/// Planned motion: decoded actions, their bins and the integrated poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub tokens: Vec<ActionTokens>,
    pub actions: Vec<RelativeAction>,
    pub trajectory: Trajectory,
}

/// Plans `horizon` actions from the current (last) history frame.
///
/// The action tokens of the last history frame are not read: that frame's
/// action is the first one predicted. Future frames are generated in full
/// (image then action) and only their decoded actions are kept. Poses are
/// relative to the last history frame.
pub fn plan<F: Float>(
    params: &ModelParams<F>,
    lang: &LanguageInfo,
    codec: &ActionCodec,
    history: &DrivingSequence,
    horizon: usize,
    cfg: &SamplerConfig,
) -> Result<Plan> {
    cfg.validate()?;
    if history.is_empty() || horizon == 0 {
        return Err(invalid("planning needs history frames and a positive horizon"));
    }
    let tpf = lang.tokens_per_frame;
    check_fits(params, (history.len() + horizon - 1) * tpf - 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = Decoder::new(params, lang);
    let mut ids: Vec<u32> = history.frames.iter().flat_map(|f| frame_ids(f, lang)).collect();
    ids.truncate(ids.len() - 3);
    dec.feed(&ids)?;
    let l = lang.layout();
    let mut tokens = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let from = if k == 0 { tpf - 3 } else { 0 };
        let emitted = dec.finish_frame(from, cfg, &mut rng)?;
        let a = &emitted[emitted.len() - 3..];
        tokens.push(ActionTokens::new(
            a[0] - l.action_offset(0),
            a[1] - l.action_offset(1),
            a[2] - l.action_offset(2),
        ));
    }
    let actions = tokens
        .iter()
        .map(|t| codec.decode_action(*t))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = integrate(&actions)?;
    Ok(Plan {
        tokens,
        actions,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = vec![0.0f64; 10];
        logits[6] = 1e4;
        let cfg = SamplerConfig::default();
        for _ in 0..100 {
            assert_eq!(sample_token(&logits, (4, 8), &cfg, &mut rng).unwrap(), 6);
        }
        let logits = vec![5.0f64, 1.0, 3.0, 3.0, 2.0];
        // id 0 is masked out; 2 and 3 tie and the lower id wins
        assert_eq!(sample_token(&logits, (1, 5), &SamplerConfig::greedy(), &mut rng).unwrap(), 2);
    }

    #[test]
    fn top_k_keeps_best_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = vec![9.0f64, 0.0, 2.0, 2.0, 1.5, 8.0];
        let cfg = SamplerConfig {
            top_k: 2,
            ..Default::default()
        };
        for _ in 0..500 {
            let t = sample_token(&logits, (1, 5), &cfg, &mut rng).unwrap();
            assert!(t == 2 || t == 3);
        }
    }

    #[test]
    fn non_finite_range_is_decoding_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = vec![0.0f64, f64::NAN, f64::NEG_INFINITY];
        let err = sample_token(&logits, (1, 3), &SamplerConfig::default(), &mut rng);
        assert!(matches!(err, Err(Error::Decoding(_))));
        assert!(sample_token(&logits, (2, 2), &SamplerConfig::default(), &mut rng).is_err());
    }
}
