//! Rotary position encoding on consecutive dimension pairs.
//!
//! Pair `(2i, 2i+1)` of a head vector at position `p` is rotated by
//! `p * base^(-2i / head_dim)`.

use super::linalg::Float;
use crate::error::{invalid, Result};

fn frequency(i: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * i as f64 / head_dim as f64)
}

fn rotate<F: Float>(v: &mut [F], cos: &[F], sin: &[F]) {
    for (i, pair) in v.chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos[i] - b * sin[i];
        pair[1] = a * sin[i] + b * cos[i];
    }
}

fn rotate_back<F: Float>(v: &mut [F], cos: &[F], sin: &[F]) {
    for (i, pair) in v.chunks_exact_mut(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos[i] + b * sin[i];
        pair[1] = b * cos[i] - a * sin[i];
    }
}

/// Rotates one query and one key head vector in place for `position`.
pub fn apply_rotary<F: Float>(q: &mut [F], k: &mut [F], position: u32, base: f64) -> Result<()> {
    let d = q.len();
    if !d.is_multiple_of(2) || k.len() != d {
        return Err(invalid(format!(
            "rotary needs equal even head dims, got {} and {}",
            d,
            k.len()
        )));
    }
    let (cos, sin): (Vec<F>, Vec<F>) = (0..d / 2)
        .map(|i| {
            let (s, c) = (position as f64 * frequency(i, d, base)).sin_cos();
            (F::from_f64(c), F::from_f64(s))
        })
        .unzip();
    rotate(q, &cos, &sin);
    rotate(k, &cos, &sin);
    Ok(())
}

/// Precomputed cos/sin for positions `[0, max_positions)`.
#[derive(Debug, Clone)]
pub struct RopeTable<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Float> RopeTable<F> {
    pub fn new(head_dim: usize, max_positions: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for p in 0..max_positions {
            for i in 0..half {
                let (s, c) = (p as f64 * frequency(i, head_dim, base)).sin_cos();
                cos.push(F::from_f64(c));
                sin.push(F::from_f64(s));
            }
        }
        Self { half, cos, sin }
    }

    pub fn max_positions(&self) -> usize {
        self.cos.len() / self.half.max(1)
    }

    fn at(&self, position: u32) -> (&[F], &[F]) {
        let p = position as usize;
        assert!(p < self.max_positions(), "position {p} beyond rotary table");
        let r = p * self.half..(p + 1) * self.half;
        (&self.cos[r.clone()], &self.sin[r])
    }

    /// Rotates every head of a `width`-wide row.
    pub fn rotate_row(&self, row: &mut [F], position: u32) {
        let (c, s) = self.at(position);
        for head in row.chunks_exact_mut(2 * self.half) {
            rotate(head, c, s);
        }
    }

    /// Applies the transpose rotation, used to pull gradients back through.
    pub fn rotate_row_back(&self, row: &mut [F], position: u32) {
        let (c, s) = self.at(position);
        for head in row.chunks_exact_mut(2 * self.half) {
            rotate_back(head, c, s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn position_zero_is_identity() {
        let mut q = vec![0.3, -0.2, 0.9, 0.1];
        let mut k = vec![1.0, 2.0, 3.0, 4.0];
        let (q0, k0) = (q.clone(), k.clone());
        apply_rotary(&mut q, &mut k, 0, 10_000.0).unwrap();
        assert_eq!(q, q0);
        assert_eq!(k, k0);
    }

    #[test]
    fn preserves_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pos in [1u32, 7, 300, 5000] {
            let mut q = randv(&mut rng, 16);
            let mut k = randv(&mut rng, 16);
            let (nq, nk) = (dot(&q, &q), dot(&k, &k));
            apply_rotary(&mut q, &mut k, pos, 10_000.0).unwrap();
            assert!((dot(&q, &q) - nq).abs() < 1e-12);
            assert!((dot(&k, &k) - nk).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_product_depends_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let q = randv(&mut rng, 8);
            let k = randv(&mut rng, 8);
            let m: u32 = rng.gen_range(0..40);
            let n: u32 = rng.gen_range(0..40);
            let score = |pm: u32, pn: u32| {
                let (mut q1, mut k1) = (q.clone(), k.clone());
                let (mut q2, mut k2) = (q.clone(), k.clone());
                apply_rotary(&mut q1, &mut k1, pm, 10_000.0).unwrap();
                apply_rotary(&mut q2, &mut k2, pn, 10_000.0).unwrap();
                dot(&q1, &k2)
            };
            assert!((score(m, n) - score(m + 5, n + 5)).abs() < 1e-9);
        }
    }

    #[test]
    fn odd_head_dim_rejected() {
        let mut q = vec![0.0; 3];
        let mut k = vec![0.0; 3];
        assert!(apply_rotary(&mut q, &mut k, 1, 10_000.0).is_err());
    }

    #[test]
    fn table_matches_direct_and_inverts() {
        let table = RopeTable::<f64>::new(4, 10, 10_000.0);
        let mut row = vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let orig = row.clone();
        let (mut q, mut k) = (orig[..4].to_vec(), orig[4..].to_vec());
        apply_rotary(&mut q, &mut k, 7, 10_000.0).unwrap();
        table.rotate_row(&mut row, 7);
        assert!(row[..4].iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(row[4..].iter().zip(&k).all(|(a, b)| (a - b).abs() < 1e-15));
        table.rotate_row_back(&mut row, 7);
        assert!(row.iter().zip(&orig).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
