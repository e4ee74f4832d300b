//! Incremental decoding with a per-layer key/value cache.

use super::forward::{add_slot_embedding, rms_norm};
use super::linalg::{matmul, Float};
use super::rotary::RopeTable;
use super::ModelParams;
use crate::error::{invalid, Result};

pub struct InferenceSession<'a, F> {
    params: &'a ModelParams<F>,
    rope: RopeTable<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<'a, F: Float> InferenceSession<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Self {
        let cfg = &params.config;
        Self {
            params,
            rope: RopeTable::new(cfg.head_dim(), cfg.context, cfg.rope_base),
            keys: vec![Vec::with_capacity(cfg.context * cfg.width); cfg.layers],
            values: vec![Vec::with_capacity(cfg.context * cfg.width); cfg.layers],
            len: 0,
        }
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reset(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
        self.len = 0;
    }

    /// Feeds all tokens and returns the logits after the last one.
    pub fn prefill(&mut self, tokens: &[u32], positions: &[u32]) -> Result<Vec<F>> {
        if tokens.is_empty() || tokens.len() != positions.len() {
            return Err(invalid("prefill needs matching non-empty tokens and positions"));
        }
        let mut last = Vec::new();
        for (&t, &p) in tokens.iter().zip(positions) {
            last = self.step(t, p)?;
        }
        Ok(last)
    }

    /// Appends one token at `position` and returns next-token logits.
    pub fn step(&mut self, token: u32, position: u32) -> Result<Vec<F>> {
        let p = self.params;
        let cfg = &p.config;
        let lay = &p.layout;
        let vals = &p.values;
        if token as usize >= cfg.vocab {
            return Err(invalid(format!("token {token} outside vocabulary {}", cfg.vocab)));
        }
        if self.len >= cfg.context {
            return Err(invalid(format!("context of {} tokens is full", cfg.context)));
        }
        if position as usize >= cfg.context {
            return Err(invalid(format!("position {position} beyond context {}", cfg.context)));
        }
        let (w, f, heads, hd) = (cfg.width, cfg.ffn_hidden, cfg.heads, cfg.head_dim());
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let n = self.len + 1;
        let tok = token as usize;
        let mut x = vals[lay.embed.clone()][tok * w..(tok + 1) * w].to_vec();
        add_slot_embedding(p, &mut x, self.len);
        let mut normed = vec![F::zero(); w];

        for (li, l) in lay.layers.iter().enumerate() {
            rms_norm(&x, &vals[l.attn_norm.clone()], w, &mut normed);
            let mut q = vec![F::zero(); w];
            let mut k = vec![F::zero(); w];
            let mut v = vec![F::zero(); w];
            matmul(&mut q, &normed, &vals[l.wq.clone()], 1, w, w, false);
            matmul(&mut k, &normed, &vals[l.wk.clone()], 1, w, w, false);
            matmul(&mut v, &normed, &vals[l.wv.clone()], 1, w, w, false);
            self.rope.rotate_row(&mut q, position);
            self.rope.rotate_row(&mut k, position);
            self.keys[li].extend_from_slice(&k);
            self.values[li].extend_from_slice(&v);
            let (kc, vc) = (&self.keys[li], &self.values[li]);

            let mut attn = vec![F::zero(); w];
            let mut scores = vec![F::zero(); n];
            for h in 0..heads {
                let qh = &q[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &kc[j * w + h * hd..j * w + (h + 1) * hd];
                    *s = qh.iter().zip(kh).map(|(a, b)| *a * *b).sum::<F>() * scale;
                }
                let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut attn[h * hd..(h + 1) * hd];
                for (j, s) in scores.iter().enumerate() {
                    let pj = *s / sum;
                    let vh = &vc[j * w + h * hd..j * w + (h + 1) * hd];
                    for (o, vv) in out.iter_mut().zip(vh) {
                        *o += pj * *vv;
                    }
                }
            }
            matmul(&mut x, &attn, &vals[l.wo.clone()], 1, w, w, true);

            rms_norm(&x, &vals[l.ffn_norm.clone()], w, &mut normed);
            let mut gate = vec![F::zero(); f];
            let mut up = vec![F::zero(); f];
            matmul(&mut gate, &normed, &vals[l.w_gate.clone()], 1, w, f, false);
            matmul(&mut up, &normed, &vals[l.w_up.clone()], 1, w, f, false);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = *g / (F::one() + (-*g).exp()) * *u;
            }
            matmul(&mut x, &gate, &vals[l.w_down.clone()], 1, f, w, true);
        }
        rms_norm(&x, &vals[lay.final_norm.clone()], w, &mut normed);
        let mut logits = vec![F::zero(); cfg.vocab];
        matmul(&mut logits, &normed, &vals[lay.output.clone()], 1, w, cfg.vocab, false);
        self.len = n;
        Ok(logits)
    }
}
