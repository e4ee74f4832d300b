//! The unified token vocabulary and frame-by-frame stream layout.
//!
//! Global ids `[0, D)` are image codes; the action components follow as three
//! blocks of `M` ids each, in `(x, y, theta)` order. A frame serializes as its
//! image tokens followed by its three action tokens.

pub mod container;

use serde::{Deserialize, Serialize};

use crate::action_codec::ActionTokens;
use crate::error::{invalid, Error, Result};

/// Offsets of the four vocabulary ranges inside the unified vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub image_vocab: u32,
    pub action_bins: u32,
}

/// Modality of one slot in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Image(usize),
    /// Action component index: 0 = x, 1 = y, 2 = theta.
    Action(usize),
}

impl VocabLayout {
    pub fn new(image_vocab: u32, action_bins: u32) -> Result<Self> {
        if image_vocab < 1 {
            return Err(invalid("image vocabulary must be non-empty"));
        }
        if action_bins < 2 {
            return Err(invalid("action components need at least 2 bins"));
        }
        Ok(Self {
            image_vocab,
            action_bins,
        })
    }

    pub fn total(&self) -> u32 {
        self.image_vocab + 3 * self.action_bins
    }

    /// First global id of action component `k`.
    pub fn action_offset(&self, k: usize) -> u32 {
        self.image_vocab + k as u32 * self.action_bins
    }

    pub fn action_range(&self, k: usize) -> (u32, u32) {
        let lo = self.action_offset(k);
        (lo, lo + self.action_bins)
    }

    pub fn image_range(&self) -> (u32, u32) {
        (0, self.image_vocab)
    }
}

pub fn layout(image_vocab: u32, action_bins: u32) -> Result<VocabLayout> {
    VocabLayout::new(image_vocab, action_bins)
}

pub fn slot_kind(slot: usize, tokens_per_frame: usize) -> Slot {
    let image = tokens_per_frame - 3;
    if slot < image {
        Slot::Image(slot)
    } else {
        Slot::Action(slot - image)
    }
}

/// Global id range `[lo, hi)` a slot may emit.
pub fn allowed_range(slot: usize, tokens_per_frame: usize, layout: &VocabLayout) -> Result<(u32, u32)> {
    if tokens_per_frame < 4 {
        return Err(invalid(format!("tokens_per_frame {tokens_per_frame} < 4")));
    }
    if slot >= tokens_per_frame {
        return Err(invalid(format!(
            "slot {slot} outside frame of {tokens_per_frame} tokens"
        )));
    }
    Ok(match slot_kind(slot, tokens_per_frame) {
        Slot::Image(_) => layout.image_range(),
        Slot::Action(k) => layout.action_range(k),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    /// Image codes, row-major, each `< D`.
    pub image: Vec<u32>,
    /// Unshifted action bins, each `< M`.
    pub action: ActionTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DrivingSequence {
    pub frames: Vec<Frame>,
}

impl DrivingSequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if let Some(first) = frames.first() {
            let n = first.image.len();
            if let Some((i, _)) = frames.iter().enumerate().find(|(_, f)| f.image.len() != n) {
                return Err(invalid(format!(
                    "frame {i} has a different image token count than frame 0"
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn tokens_per_frame(&self) -> Option<usize> {
        self.frames.first().map(|f| f.image.len() + 3)
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            frames: self.frames[start..end].to_vec(),
        }
    }
}

/// Flat global token ids plus one position index per token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub positions: Vec<u32>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, position: u32) {
        self.ids.push(id);
        self.positions.push(position);
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            ids: self.ids[..len].to_vec(),
            positions: self.positions[..len].to_vec(),
        }
    }
}

/// How position indices are assigned to the tokens of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionScheme {
    /// Every token of frame `t` gets position `t`.
    #[default]
    FrameWise,
    /// Image tokens get their frame index, action tokens get position 0.
    NoActionPositions,
}

impl PositionScheme {
    pub fn position(&self, frame: usize, slot: usize, tokens_per_frame: usize) -> u32 {
        match (self, slot_kind(slot, tokens_per_frame)) {
            (PositionScheme::NoActionPositions, Slot::Action(_)) => 0,
            _ => frame as u32,
        }
    }
}

/// Frame-wise positions: all `tokens_per_frame` tokens of frame `t` share index `t`.
pub fn positions(frames: usize, tokens_per_frame: usize) -> Vec<u32> {
    positions_with(PositionScheme::FrameWise, frames, tokens_per_frame)
}

pub fn positions_with(scheme: PositionScheme, frames: usize, tokens_per_frame: usize) -> Vec<u32> {
    (0..frames)
        .flat_map(|t| (0..tokens_per_frame).map(move |s| scheme.position(t, s, tokens_per_frame)))
        .collect()
}

pub fn serialize(seq: &DrivingSequence, layout: &VocabLayout) -> Result<TokenStream> {
    serialize_with(seq, layout, PositionScheme::FrameWise)
}

pub fn serialize_with(
    seq: &DrivingSequence,
    layout: &VocabLayout,
    scheme: PositionScheme,
) -> Result<TokenStream> {
    let Some(tpf) = seq.tokens_per_frame() else {
        return Ok(TokenStream::default());
    };
    let mut ids = Vec::with_capacity(seq.len() * tpf);
    for (t, frame) in seq.frames.iter().enumerate() {
        if frame.image.len() + 3 != tpf {
            return Err(invalid(format!("frame {t} has inconsistent token count")));
        }
        for (j, &z) in frame.image.iter().enumerate() {
            if z >= layout.image_vocab {
                return Err(invalid(format!(
                    "image token {z} at frame {t} slot {j} exceeds image vocabulary {}",
                    layout.image_vocab
                )));
            }
            ids.push(z);
        }
        for (k, q) in frame.action.to_array().into_iter().enumerate() {
            if q >= layout.action_bins {
                return Err(invalid(format!(
                    "action bin {q} at frame {t} component {k} exceeds {} bins",
                    layout.action_bins
                )));
            }
            ids.push(q + layout.action_offset(k));
        }
    }
    Ok(TokenStream {
        ids,
        positions: positions_with(scheme, seq.len(), tpf),
    })
}

pub fn deserialize(stream: &[u32], layout: &VocabLayout, tokens_per_frame: usize) -> Result<DrivingSequence> {
    if tokens_per_frame < 4 {
        return Err(invalid(format!("tokens_per_frame {tokens_per_frame} < 4")));
    }
    if !stream.len().is_multiple_of(tokens_per_frame) {
        return Err(invalid(format!(
            "stream of {} tokens is not a whole number of {tokens_per_frame}-token frames",
            stream.len()
        )));
    }
    let image = tokens_per_frame - 3;
    let mut frames = Vec::with_capacity(stream.len() / tokens_per_frame);
    for (t, chunk) in stream.chunks_exact(tokens_per_frame).enumerate() {
        for (slot, &id) in chunk.iter().enumerate() {
            let (lo, hi) = allowed_range(slot, tokens_per_frame, layout)?;
            if id < lo || id >= hi {
                return Err(Error::MalformedStream {
                    frame: t,
                    slot,
                    token: id,
                    lo,
                    hi,
                });
            }
        }
        let q = |k: usize| chunk[image + k] - layout.action_offset(k);
        frames.push(Frame {
            image: chunk[..image].to_vec(),
            action: ActionTokens::new(q(0), q(1), q(2)),
        });
    }
    Ok(DrivingSequence { frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(image: Vec<u32>, q: [u32; 3]) -> Frame {
        Frame {
            image,
            action: ActionTokens::from_array(q),
        }
    }

    #[test]
    fn layout_sizes() {
        assert_eq!(layout(16384, 128).unwrap().total(), 16768);
        let l = layout(256, 16).unwrap();
        assert_eq!(l.total(), 304);
        assert_eq!(l.action_range(2), (288, 304));
        assert_eq!(l.action_range(0), (256, 272));
        assert!(layout(0, 16).is_err());
        assert!(layout(4, 1).is_err());
    }

    #[test]
    fn ranges_partition_vocabulary() {
        let l = layout(10, 3).unwrap();
        let ranges = [l.image_range(), l.action_range(0), l.action_range(1), l.action_range(2)];
        let mut next = 0;
        for (lo, hi) in ranges {
            assert_eq!(lo, next);
            assert!(hi > lo);
            next = hi;
        }
        assert_eq!(next, l.total());
    }

    #[test]
    fn serialize_offsets() {
        let l = layout(256, 16).unwrap();
        let seq = DrivingSequence::new(vec![frame((0..16).collect(), [0, 0, 0])]).unwrap();
        let s = serialize(&seq, &l).unwrap();
        assert_eq!(s.len(), 19);
        assert_eq!(&s.ids[16..], &[256, 272, 288]);
        assert_eq!(deserialize(&s.ids, &l, 19).unwrap(), seq);
    }

    #[test]
    fn serialize_rejects_out_of_range() {
        let l = layout(8, 4).unwrap();
        let bad_img = DrivingSequence::new(vec![frame(vec![8], [0, 0, 0])]).unwrap();
        assert!(serialize(&bad_img, &l).is_err());
        let bad_act = DrivingSequence::new(vec![frame(vec![1], [0, 4, 0])]).unwrap();
        assert!(serialize(&bad_act, &l).is_err());
    }

    #[test]
    fn deserialize_errors() {
        let l = layout(8, 4).unwrap();
        assert!(deserialize(&[], &l, 5).unwrap().is_empty());
        assert!(deserialize(&[1, 2, 8, 12, 16, 0], &l, 5).is_err());
        // image id in the x action slot
        match deserialize(&[1, 2, 3, 12, 16], &l, 5) {
            Err(Error::MalformedStream { frame, slot, .. }) => assert_eq!((frame, slot), (0, 2)),
            other => panic!("expected malformed stream, got {other:?}"),
        }
        // action id in an image slot of the second frame
        match deserialize(&[1, 2, 8, 12, 16, 9, 2, 8, 12, 16], &l, 5) {
            Err(Error::MalformedStream { frame, slot, .. }) => assert_eq!((frame, slot), (1, 0)),
            other => panic!("expected malformed stream, got {other:?}"),
        }
    }

    #[test]
    fn frame_wise_positions() {
        let p = positions(2, 19);
        assert_eq!(p.len(), 38);
        assert!(p[..19].iter().all(|&x| x == 0));
        assert!(p[19..].iter().all(|&x| x == 1));
        assert!(positions(1, 7).iter().all(|&x| x == 0));
        assert_eq!(*positions(5, 4).iter().max().unwrap(), 4);

        let p = positions_with(PositionScheme::NoActionPositions, 3, 5);
        assert_eq!(p, vec![0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 2, 2, 0, 0, 0]);
    }

    #[test]
    fn allowed_range_slots() {
        let l = layout(256, 16).unwrap();
        assert_eq!(allowed_range(0, 19, &l).unwrap(), (0, 256));
        assert_eq!(allowed_range(16, 19, &l).unwrap(), (256, 272));
        assert_eq!(allowed_range(17, 19, &l).unwrap(), (272, 288));
        assert_eq!(allowed_range(18, 19, &l).unwrap(), (288, 304));
        assert!(allowed_range(19, 19, &l).is_err());
    }

    #[test]
    fn images_precede_actions_in_every_frame() {
        let l = layout(256, 16).unwrap();
        let seq = DrivingSequence::new(vec![
            frame(vec![3; 16], [1, 2, 3]),
            frame(vec![200; 16], [15, 0, 7]),
        ])
        .unwrap();
        let s = serialize(&seq, &l).unwrap();
        for (i, &id) in s.ids.iter().enumerate() {
            let is_image = id < l.image_vocab;
            assert_eq!(is_image, i % 19 < 16);
        }
    }
}
