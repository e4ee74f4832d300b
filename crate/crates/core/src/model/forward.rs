use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{gemm, matmul, matmul_at, matmul_bt, Float, View, ViewMut};
use super::rotary::RopeTable;
use super::{ModelParams, RMS_EPS};
use crate::driving_language::TokenStream;
use crate::error::{invalid, Result};

/// Activations kept from the forward pass for the backward pass.
pub struct ForwardCache<F> {
    tokens: Vec<u32>,
    positions: Vec<u32>,
    dropped: Vec<bool>,
    layers: Vec<LayerCache<F>>,
    final_in: Vec<F>,
    final_inv_rms: Vec<F>,
    final_normed: Vec<F>,
}

struct LayerCache<F> {
    x_in: Vec<F>,
    inv_rms1: Vec<F>,
    n1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `heads x T x T` attention probabilities.
    probs: Vec<F>,
    attn: Vec<F>,
    h1: Vec<F>,
    inv_rms2: Vec<F>,
    n2: Vec<F>,
    gate: Vec<F>,
    up: Vec<F>,
    act: Vec<F>,
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise RMS normalization with gain; returns per-row inverse RMS.
pub(crate) fn rms_norm<F: Float>(x: &[F], gain: &[F], width: usize, out: &mut [F]) -> Vec<F> {
    let eps = F::from_f64(RMS_EPS);
    let w = F::from_f64(width as f64);
    x.chunks_exact(width)
        .zip(out.chunks_exact_mut(width))
        .map(|(row, o)| {
            let ms = row.iter().map(|v| *v * *v).sum::<F>() / w;
            let inv = F::one() / (ms + eps).sqrt();
            for ((oi, xi), gi) in o.iter_mut().zip(row).zip(gain) {
                *oi = *xi * inv * *gi;
            }
            inv
        })
        .collect()
}

/// Accumulates the input gradient into `dx` and the gain gradient into `dgain`.
fn rms_norm_backward<F: Float>(
    dout: &[F],
    x: &[F],
    inv_rms: &[F],
    gain: &[F],
    width: usize,
    dx: &mut [F],
    dgain: &mut [F],
) {
    let w = F::from_f64(width as f64);
    for (t, ((drow, xrow), dxrow)) in dout
        .chunks_exact(width)
        .zip(x.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .enumerate()
    {
        let inv = inv_rms[t];
        let mut dot = F::zero();
        for j in 0..width {
            let xhat = xrow[j] * inv;
            dgain[j] += drow[j] * xhat;
            dot += drow[j] * gain[j] * xhat;
        }
        let mean = dot / w;
        for j in 0..width {
            let xhat = xrow[j] * inv;
            dxrow[j] += inv * (drow[j] * gain[j] - xhat * mean);
        }
    }
}

pub(crate) fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![false; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen::<f64>() < rate).collect()
}

fn check_stream<F: Float>(params: &ModelParams<F>, stream: &TokenStream) -> Result<()> {
    let cfg = &params.config;
    if stream.ids.is_empty() {
        return Err(invalid("empty token stream"));
    }
    if stream.ids.len() != stream.positions.len() {
        return Err(invalid("token and position counts differ"));
    }
    if stream.ids.len() > cfg.context {
        return Err(invalid(format!(
            "stream of {} tokens exceeds context {}",
            stream.ids.len(),
            cfg.context
        )));
    }
    if let Some(&bad) = stream.ids.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(invalid(format!("token {bad} outside vocabulary {}", cfg.vocab)));
    }
    if let Some(&p) = stream.positions.iter().find(|&&p| p as usize >= cfg.context) {
        return Err(invalid(format!("position {p} beyond context {}", cfg.context)));
    }
    Ok(())
}

/// Adds the slot embedding to rows of `x`, the first row being stream index `start`.
pub(crate) fn add_slot_embedding<F: Float>(params: &ModelParams<F>, x: &mut [F], start: usize) {
    let (slots, w) = (params.config.frame_slots, params.config.width);
    if slots == 0 {
        return;
    }
    let table = &params.values[params.layout.slot_embed.clone()];
    for (t, row) in x.chunks_exact_mut(w).enumerate() {
        let s = (start + t) % slots;
        row.iter_mut().zip(&table[s * w..(s + 1) * w]).for_each(|(a, b)| *a += *b);
    }
}

pub(crate) fn rope_for<F: Float>(params: &ModelParams<F>, positions: &[u32]) -> RopeTable<F> {
    let max = positions.iter().copied().max().unwrap_or(0) as usize + 1;
    RopeTable::new(params.config.head_dim(), max, params.config.rope_base)
}

fn forward_cached<F: Float>(
    params: &ModelParams<F>,
    stream: &TokenStream,
    dropped: Vec<bool>,
) -> (Vec<F>, ForwardCache<F>) {
    let cfg = &params.config;
    let lay = &params.layout;
    let p = &params.values;
    let (t_len, w, f, heads) = (stream.len(), cfg.width, cfg.ffn_hidden, cfg.heads);
    let hd = cfg.head_dim();
    let rope = rope_for(params, &stream.positions);
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());

    let mut x = vec![F::zero(); t_len * w];
    let emb = &p[lay.embed.clone()];
    for (t, &tok) in stream.ids.iter().enumerate() {
        if !dropped[t] {
            let tok = tok as usize;
            x[t * w..(t + 1) * w].copy_from_slice(&emb[tok * w..(tok + 1) * w]);
        }
    }
    add_slot_embedding(params, &mut x, 0);

    let mut layers = Vec::with_capacity(cfg.layers);
    for l in &lay.layers {
        let mut n1 = vec![F::zero(); t_len * w];
        let inv_rms1 = rms_norm(&x, &p[l.attn_norm.clone()], w, &mut n1);
        let mut q = vec![F::zero(); t_len * w];
        let mut k = vec![F::zero(); t_len * w];
        let mut v = vec![F::zero(); t_len * w];
        matmul(&mut q, &n1, &p[l.wq.clone()], t_len, w, w, false);
        matmul(&mut k, &n1, &p[l.wk.clone()], t_len, w, w, false);
        matmul(&mut v, &n1, &p[l.wv.clone()], t_len, w, w, false);
        for (t, &pos) in stream.positions.iter().enumerate() {
            rope.rotate_row(&mut q[t * w..(t + 1) * w], pos);
            rope.rotate_row(&mut k[t * w..(t + 1) * w], pos);
        }

        let mut probs = vec![F::zero(); heads * t_len * t_len];
        let mut attn = vec![F::zero(); t_len * w];
        for h in 0..heads {
            let sc = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            gemm(
                t_len,
                hd,
                t_len,
                scale,
                View::rows(&q, h * hd, w),
                View::rows(&k, h * hd, w).t(),
                F::zero(),
                ViewMut::rows(sc, 0, t_len),
            );
            for i in 0..t_len {
                let row = &mut sc[i * t_len..(i + 1) * t_len];
                let max = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for r in row[..=i].iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                let inv = F::one() / sum;
                row[..=i].iter_mut().for_each(|r| *r *= inv);
                row[i + 1..].iter_mut().for_each(|r| *r = F::zero());
            }
            gemm(
                t_len,
                t_len,
                hd,
                F::one(),
                View::rows(sc, 0, t_len),
                View::rows(&v, h * hd, w),
                F::zero(),
                ViewMut::rows(&mut attn, h * hd, w),
            );
        }
        let mut h1 = x.clone();
        matmul(&mut h1, &attn, &p[l.wo.clone()], t_len, w, w, true);

        let mut n2 = vec![F::zero(); t_len * w];
        let inv_rms2 = rms_norm(&h1, &p[l.ffn_norm.clone()], w, &mut n2);
        let mut gate = vec![F::zero(); t_len * f];
        let mut up = vec![F::zero(); t_len * f];
        matmul(&mut gate, &n2, &p[l.w_gate.clone()], t_len, w, f, false);
        matmul(&mut up, &n2, &p[l.w_up.clone()], t_len, w, f, false);
        let act: Vec<F> = gate
            .iter()
            .zip(&up)
            .map(|(&g, &u)| g * sigmoid(g) * u)
            .collect();
        let mut out = h1.clone();
        matmul(&mut out, &act, &p[l.w_down.clone()], t_len, f, w, true);

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, out),
            inv_rms1,
            n1,
            q,
            k,
            v,
            probs,
            attn,
            h1,
            inv_rms2,
            n2,
            gate,
            up,
            act,
        });
    }

    let mut final_normed = vec![F::zero(); t_len * w];
    let final_inv_rms = rms_norm(&x, &p[lay.final_norm.clone()], w, &mut final_normed);
    let mut logits = vec![F::zero(); t_len * cfg.vocab];
    matmul(&mut logits, &final_normed, &p[lay.output.clone()], t_len, w, cfg.vocab, false);

    let cache = ForwardCache {
        tokens: stream.ids.clone(),
        positions: stream.positions.clone(),
        dropped,
        layers,
        final_in: x,
        final_inv_rms,
        final_normed,
    };
    (logits, cache)
}

/// Logits `[len x vocab]` for a token stream. Token dropout (zeroed input
/// embeddings) is applied only in `train_mode`, seeded by `dropout_seed`.
pub fn forward<F: Float>(
    params: &ModelParams<F>,
    stream: &TokenStream,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<Vec<F>> {
    check_stream(params, stream)?;
    let rate = if train_mode { params.config.token_dropout } else { 0.0 };
    let dropped = dropout_mask(stream.len(), rate, dropout_seed);
    Ok(forward_cached(params, stream, dropped).0)
}

fn log_softmax_at<F: Float>(row: &[F], target: usize) -> f64 {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
    let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    row[target].as_f64() - max - sum.ln()
}

/// Mean of `-log softmax(logits[t])[targets[t]]` over positions.
pub fn nll_loss<F: Float>(logits: &[F], vocab: usize, targets: &[u32]) -> Result<f64> {
    if vocab == 0 || logits.len() != targets.len() * vocab {
        return Err(invalid(format!(
            "logits of length {} do not match {} targets over vocab {vocab}",
            logits.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(invalid("no targets"));
    }
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(vocab).zip(targets) {
        if t as usize >= vocab {
            return Err(invalid(format!("target {t} outside vocabulary {vocab}")));
        }
        total -= log_softmax_at(row, t as usize);
    }
    Ok(total / targets.len() as f64)
}

/// Sum of per-position cross-entropy and the gradient of `loss_scale * sum`.
pub fn loss_and_grad<F: Float>(
    params: &ModelParams<F>,
    stream: &TokenStream,
    targets: &[u32],
    train_mode: bool,
    dropout_seed: u64,
    loss_scale: f64,
) -> Result<(f64, Vec<F>)> {
    check_stream(params, stream)?;
    if targets.len() != stream.len() {
        return Err(invalid(format!(
            "{} targets for a stream of {} tokens",
            targets.len(),
            stream.len()
        )));
    }
    let vocab = params.config.vocab;
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!("target {bad} outside vocabulary {vocab}")));
    }
    let rate = if train_mode { params.config.token_dropout } else { 0.0 };
    let dropped = dropout_mask(stream.len(), rate, dropout_seed);
    let (mut logits, cache) = forward_cached(params, stream, dropped);

    // logits become d(loss)/d(logits) in place
    let mut total = 0.0;
    let s = F::from_f64(loss_scale);
    for (row, &t) in logits.chunks_exact_mut(vocab).zip(targets) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        total -= (row[t as usize] / sum).as_f64().ln();
        let inv = s / sum;
        row.iter_mut().for_each(|r| *r *= inv);
        row[t as usize] -= s;
    }
    let grads = backprop(params, &cache, &logits);
    Ok((total, grads))
}

/// Gradient of the mean next-token loss with respect to every parameter.
pub fn backward<F: Float>(
    params: &ModelParams<F>,
    stream: &TokenStream,
    targets: &[u32],
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(f64, Vec<F>)> {
    let n = targets.len().max(1) as f64;
    let (sum, grads) = loss_and_grad(params, stream, targets, train_mode, dropout_seed, 1.0 / n)?;
    Ok((sum / n, grads))
}

fn backprop<F: Float>(params: &ModelParams<F>, cache: &ForwardCache<F>, dlogits: &[F]) -> Vec<F> {
    let cfg = &params.config;
    let lay = &params.layout;
    let p = &params.values;
    let (t_len, w, f, heads) = (cache.tokens.len(), cfg.width, cfg.ffn_hidden, cfg.heads);
    let hd = cfg.head_dim();
    let rope = rope_for(params, &cache.positions);
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut g = vec![F::zero(); lay.total];

    matmul_at(&mut g[lay.output.clone()], &cache.final_normed, dlogits, w, t_len, cfg.vocab, false);
    let mut dnorm = vec![F::zero(); t_len * w];
    matmul_bt(&mut dnorm, dlogits, &p[lay.output.clone()], t_len, cfg.vocab, w, false);
    let mut dx = vec![F::zero(); t_len * w];
    {
        let (gain, dgain) = (&p[lay.final_norm.clone()], &mut g[lay.final_norm.clone()]);
        rms_norm_backward(&dnorm, &cache.final_in, &cache.final_inv_rms, gain, w, &mut dx, dgain);
    }

    for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // feed-forward
        matmul_at(&mut g[l.w_down.clone()], &c.act, &dx, f, t_len, w, false);
        let mut dact = vec![F::zero(); t_len * f];
        matmul_bt(&mut dact, &dx, &p[l.w_down.clone()], t_len, w, f, false);
        let mut dgate = vec![F::zero(); t_len * f];
        let mut dup = vec![F::zero(); t_len * f];
        for i in 0..t_len * f {
            let (a, u) = (c.gate[i], c.up[i]);
            let sg = sigmoid(a);
            dup[i] = dact[i] * a * sg;
            dgate[i] = dact[i] * u * sg * (F::one() + a * (F::one() - sg));
        }
        matmul_at(&mut g[l.w_gate.clone()], &c.n2, &dgate, w, t_len, f, false);
        matmul_at(&mut g[l.w_up.clone()], &c.n2, &dup, w, t_len, f, false);
        let mut dn2 = vec![F::zero(); t_len * w];
        matmul_bt(&mut dn2, &dgate, &p[l.w_gate.clone()], t_len, f, w, false);
        matmul_bt(&mut dn2, &dup, &p[l.w_up.clone()], t_len, f, w, true);
        let mut dh1 = dx;
        rms_norm_backward(
            &dn2,
            &c.h1,
            &c.inv_rms2,
            &p[l.ffn_norm.clone()],
            w,
            &mut dh1,
            &mut g[l.ffn_norm.clone()],
        );

        // attention
        matmul_at(&mut g[l.wo.clone()], &c.attn, &dh1, w, t_len, w, false);
        let mut dattn = vec![F::zero(); t_len * w];
        matmul_bt(&mut dattn, &dh1, &p[l.wo.clone()], t_len, w, w, false);
        let mut dq = vec![F::zero(); t_len * w];
        let mut dk = vec![F::zero(); t_len * w];
        let mut dv = vec![F::zero(); t_len * w];
        let mut dp = vec![F::zero(); t_len * t_len];
        for h in 0..heads {
            let probs = &c.probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            // dP = dO_h V_h^T
            gemm(
                t_len,
                hd,
                t_len,
                F::one(),
                View::rows(&dattn, h * hd, w),
                View::rows(&c.v, h * hd, w).t(),
                F::zero(),
                ViewMut::rows(&mut dp, 0, t_len),
            );
            // dV_h = P^T dO_h
            gemm(
                t_len,
                t_len,
                hd,
                F::one(),
                View::rows(probs, 0, t_len).t(),
                View::rows(&dattn, h * hd, w),
                F::zero(),
                ViewMut::rows(&mut dv, h * hd, w),
            );
            // dS = P * (dP - rowsum(P * dP)) * scale
            for i in 0..t_len {
                let pr = &probs[i * t_len..(i + 1) * t_len];
                let dr = &mut dp[i * t_len..(i + 1) * t_len];
                let dot: F = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| *a * *b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
                dr[i + 1..].iter_mut().for_each(|v| *v = F::zero());
            }
            gemm(
                t_len,
                t_len,
                hd,
                F::one(),
                View::rows(&dp, 0, t_len),
                View::rows(&c.k, h * hd, w),
                F::zero(),
                ViewMut::rows(&mut dq, h * hd, w),
            );
            gemm(
                t_len,
                t_len,
                hd,
                F::one(),
                View::rows(&dp, 0, t_len).t(),
                View::rows(&c.q, h * hd, w),
                F::zero(),
                ViewMut::rows(&mut dk, h * hd, w),
            );
        }
        for (t, &pos) in cache.positions.iter().enumerate() {
            rope.rotate_row_back(&mut dq[t * w..(t + 1) * w], pos);
            rope.rotate_row_back(&mut dk[t * w..(t + 1) * w], pos);
        }
        matmul_at(&mut g[l.wq.clone()], &c.n1, &dq, w, t_len, w, false);
        matmul_at(&mut g[l.wk.clone()], &c.n1, &dk, w, t_len, w, false);
        matmul_at(&mut g[l.wv.clone()], &c.n1, &dv, w, t_len, w, false);
        let mut dn1 = vec![F::zero(); t_len * w];
        matmul_bt(&mut dn1, &dq, &p[l.wq.clone()], t_len, w, w, false);
        matmul_bt(&mut dn1, &dk, &p[l.wk.clone()], t_len, w, w, true);
        matmul_bt(&mut dn1, &dv, &p[l.wv.clone()], t_len, w, w, true);
        let mut dxn = dh1;
        rms_norm_backward(
            &dn1,
            &c.x_in,
            &c.inv_rms1,
            &p[l.attn_norm.clone()],
            w,
            &mut dxn,
            &mut g[l.attn_norm.clone()],
        );
        dx = dxn;
    }

    if cfg.frame_slots > 0 {
        let ds = &mut g[lay.slot_embed.clone()];
        for (t, row) in dx.chunks_exact(w).enumerate() {
            let s = t % cfg.frame_slots;
            ds[s * w..(s + 1) * w].iter_mut().zip(row).for_each(|(d, v)| *d += *v);
        }
    }
    let demb = &mut g[lay.embed.clone()];
    for (t, &tok) in cache.tokens.iter().enumerate() {
        if !cache.dropped[t] {
            let tok = tok as usize;
            for (d, s) in demb[tok * w..(tok + 1) * w].iter_mut().zip(&dx[t * w..(t + 1) * w]) {
                *d += *s;
            }
        }
    }
    g
}
