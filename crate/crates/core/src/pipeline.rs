//! Fitting the tokenizers on rendered clips and turning clips into token streams.

use serde::{Deserialize, Serialize};

use crate::action_codec::{flip_action, ActionCodec};
use crate::driving_language::{layout, serialize_with, DrivingSequence, Frame, PositionScheme, TokenStream, VocabLayout};
use crate::error::{invalid, Result};
use crate::evaluator::EvalCase;
use crate::geometry::RelativeAction;
use crate::model::checkpoint::LanguageInfo;
use crate::model::{Float, ModelParams};
use crate::obs_tokenizer::{hflip, Codebook, Image, KMeansOptions};
use crate::sampler::{plan, Plan, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Codebook size D.
    pub image_vocab: usize,
    /// Patch side S in pixels.
    pub patch: usize,
    /// Bins per action component M.
    pub action_bins: usize,
    pub kmeans_iters: usize,
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_vocab: 256,
            patch: 8,
            action_bins: 16,
            kmeans_iters: 20,
            lo_pct: 1.0,
            hi_pct: 99.0,
            seed: 0,
        }
    }
}

/// Fitted observation and action tokenizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizers {
    pub codebook: Codebook,
    pub codec: ActionCodec,
    pub layout: VocabLayout,
}

impl Tokenizers {
    pub fn new(codebook: Codebook, codec: ActionCodec) -> Result<Self> {
        let layout = layout(codebook.size as u32, codec.bins as u32)?;
        Ok(Self {
            codebook,
            codec,
            layout,
        })
    }

    pub fn fit(images: &[Image], actions: &[RelativeAction], cfg: &TokenizerConfig) -> Result<Self> {
        let codebook = Codebook::fit(
            images,
            KMeansOptions {
                size: cfg.image_vocab,
                patch: cfg.patch,
                seed: cfg.seed,
                iters: cfg.kmeans_iters,
            },
        )?;
        let codec = ActionCodec::fit(actions, cfg.action_bins, cfg.lo_pct, cfg.hi_pct)?;
        Self::new(codebook, codec)
    }

    /// Image tokens plus three action tokens.
    pub fn tokens_per_frame(&self, height: usize, width: usize) -> usize {
        (height / self.codebook.patch) * (width / self.codebook.patch) + 3
    }

    /// Vocabulary description stored with models trained on these tokenizers.
    pub fn language(&self, height: usize, width: usize) -> LanguageInfo {
        LanguageInfo {
            image_vocab: self.layout.image_vocab,
            action_bins: self.layout.action_bins,
            tokens_per_frame: self.tokens_per_frame(height, width),
            grid_rows: height / self.codebook.patch,
        }
    }

    pub fn frame(&self, image: &Image, action: RelativeAction) -> Result<Frame> {
        Ok(Frame {
            image: self.codebook.encode(image)?.tokens,
            action: self.codec.encode_action(action),
        })
    }

    pub fn sequence(&self, images: &[Image], actions: &[RelativeAction]) -> Result<DrivingSequence> {
        if images.len() != actions.len() {
            return Err(invalid("one action per image required"));
        }
        let frames = images
            .iter()
            .zip(actions)
            .map(|(i, a)| self.frame(i, *a))
            .collect::<Result<Vec<_>>>()?;
        DrivingSequence::new(frames)
    }

    /// Left-right mirrored copy of a clip, tokenized.
    pub fn mirrored_sequence(&self, images: &[Image], actions: &[RelativeAction]) -> Result<DrivingSequence> {
        let imgs: Vec<Image> = images.iter().map(hflip).collect();
        let acts: Vec<RelativeAction> = actions.iter().map(|a| flip_action(*a)).collect();
        self.sequence(&imgs, &acts)
    }

    /// History frames of an evaluation case. The current frame's action is
    /// not known yet; it is filled with a zero action that planning never reads.
    pub fn history(&self, case: &EvalCase) -> Result<DrivingSequence> {
        let mut actions = case.history_actions.clone();
        actions.push(RelativeAction::new(0.0, 0.0, 0.0));
        self.sequence(&case.history_images, &actions)
    }

    /// Model plan for an evaluation case, `horizon` frames ahead.
    pub fn plan_case<F: Float>(
        &self,
        params: &ModelParams<F>,
        lang: &LanguageInfo,
        case: &EvalCase,
        horizon: usize,
        cfg: &SamplerConfig,
    ) -> Result<Plan> {
        if lang.layout() != self.layout {
            return Err(invalid("tokenizers do not match the model vocabulary"));
        }
        plan(params, lang, &self.codec, &self.history(case)?, horizon, cfg)
    }

    pub fn stream(&self, seq: &DrivingSequence, scheme: PositionScheme) -> Result<TokenStream> {
        serialize_with(seq, &self.layout, scheme)
    }
}
