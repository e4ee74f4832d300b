//! Patch codebook tokenizer for observation images.
//!
//! An image is cut into non-overlapping `S x S` patches; each patch becomes the
//! index of its nearest codeword. The codebook is fitted with k-means over all
//! training patches.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"DGCB";
pub const CODEBOOK_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;

/// Interleaved `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(invalid(format!(
                "image buffer of {} values does not match {height}x{width}x{CHANNELS}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    fn patch(&self, s: usize, gr: usize, gc: usize, out: &mut [f32]) {
        let row_len = s * CHANNELS;
        for dy in 0..s {
            let src = ((gr * s + dy) * self.width + gc * s) * CHANNELS;
            out[dy * row_len..(dy + 1) * row_len].copy_from_slice(&self.data[src..src + row_len]);
        }
    }

    fn put_patch(&mut self, s: usize, gr: usize, gc: usize, patch: &[f32]) {
        let row_len = s * CHANNELS;
        for dy in 0..s {
            let dst = ((gr * s + dy) * self.width + gc * s) * CHANNELS;
            self.data[dst..dst + row_len].copy_from_slice(&patch[dy * row_len..(dy + 1) * row_len]);
        }
    }
}

/// Mirrors an image left-to-right.
pub fn hflip(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    for r in 0..img.height {
        for c in 0..img.width {
            out.set_pixel(r, c, img.pixel(r, img.width - 1 - c));
        }
    }
    out
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    sum / a.data.len() as f64
}

/// Grid of codeword indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != rows * cols {
            return Err(invalid(format!(
                "token grid {rows}x{cols} given {} tokens",
                tokens.len()
            )));
        }
        Ok(Self { rows, cols, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Column-reversed copy.
    pub fn mirrored(&self) -> Self {
        let mut tokens = Vec::with_capacity(self.tokens.len());
        for r in 0..self.rows {
            tokens.extend(self.tokens[r * self.cols..(r + 1) * self.cols].iter().rev());
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub patch: usize,
    pub size: usize,
    /// `size` codewords of `patch * patch * 3` values each.
    pub codewords: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub size: usize,
    pub patch: usize,
    pub seed: u64,
    pub iters: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` (lowest index on ties) and its distance.
fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl Codebook {
    pub fn dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn codeword(&self, k: usize) -> &[f32] {
        let d = self.dim();
        &self.codewords[k * d..(k + 1) * d]
    }

    pub fn from_codewords(patch: usize, codewords: Vec<f32>) -> Result<Self> {
        let dim = patch * patch * CHANNELS;
        if patch == 0 || codewords.is_empty() || !codewords.len().is_multiple_of(dim) {
            return Err(invalid("codeword buffer does not tile into S*S*3 vectors"));
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return Err(invalid("codebook has non-finite entries"));
        }
        Ok(Self {
            patch,
            size: codewords.len() / dim,
            codewords,
        })
    }

    /// k-means over every `S x S` patch in `images`.
    ///
    /// Identical patches are merged with a multiplicity before clustering;
    /// this is exactly equivalent to clustering the raw patch list.
    pub fn fit(images: &[Image], opts: KMeansOptions) -> Result<Self> {
        let KMeansOptions {
            size,
            patch: s,
            seed,
            iters,
        } = opts;
        if images.is_empty() {
            return Err(invalid("cannot fit a codebook on an empty dataset"));
        }
        if size == 0 || s == 0 {
            return Err(invalid("codebook size and patch size must be positive"));
        }
        let dim = s * s * CHANNELS;

        let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut points: Vec<f32> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut buf = vec![0.0f32; dim];
        for img in images {
            check_dims(img, s)?;
            for gr in 0..img.height / s {
                for gc in 0..img.width / s {
                    img.patch(s, gr, gc, &mut buf);
                    let key: Vec<u32> = buf.iter().map(|v| v.to_bits()).collect();
                    match index.get(&key) {
                        Some(&i) => weights[i] += 1.0,
                        None => {
                            index.insert(key, weights.len());
                            points.extend_from_slice(&buf);
                            weights.push(1.0);
                        }
                    }
                }
            }
        }
        let n = weights.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = kmeans_pp_init(&points, &weights, dim, size, &mut rng);
        let mut assign = vec![usize::MAX; n];

        for _ in 0..iters.max(1) {
            let found: Vec<(usize, f32)> = points
                .par_chunks_exact(dim)
                .map(|x| nearest(x, &centroids, dim))
                .collect();
            let mut changed = false;
            for (a, (k, _)) in assign.iter_mut().zip(&found) {
                if *a != *k {
                    *a = *k;
                    changed = true;
                }
            }
            let mut sums = vec![0.0f64; size * dim];
            let mut mass = vec![0.0f64; size];
            for (i, x) in points.chunks_exact(dim).enumerate() {
                let k = assign[i];
                mass[k] += weights[i];
                for (acc, v) in sums[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                    *acc += weights[i] * *v as f64;
                }
            }
            let mut dist: Vec<f32> = found.iter().map(|f| f.1).collect();
            for k in 0..size {
                let c = &mut centroids[k * dim..(k + 1) * dim];
                if mass[k] > 0.0 {
                    for (cv, sv) in c.iter_mut().zip(&sums[k * dim..(k + 1) * dim]) {
                        *cv = (*sv / mass[k]) as f32;
                    }
                } else {
                    // reseed an empty cluster with the worst-fit patch
                    let mut far = 0;
                    for i in 1..n {
                        if dist[i] > dist[far] {
                            far = i;
                        }
                    }
                    if dist[far] > 0.0 {
                        c.copy_from_slice(&points[far * dim..(far + 1) * dim]);
                        dist[far] = 0.0;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Codebook::from_codewords(s, centroids)
    }

    pub fn encode(&self, img: &Image) -> Result<TokenGrid> {
        check_dims(img, self.patch)?;
        let (rows, cols) = (img.height / self.patch, img.width / self.patch);
        let dim = self.dim();
        let mut buf = vec![0.0f32; dim];
        let mut tokens = Vec::with_capacity(rows * cols);
        for gr in 0..rows {
            for gc in 0..cols {
                img.patch(self.patch, gr, gc, &mut buf);
                tokens.push(nearest(&buf, &self.codewords, dim).0 as u32);
            }
        }
        TokenGrid::new(rows, cols, tokens)
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        let mut img = Image::new(grid.rows * self.patch, grid.cols * self.patch);
        for gr in 0..grid.rows {
            for gc in 0..grid.cols {
                let k = grid.tokens[gr * grid.cols + gc] as usize;
                if k >= self.size {
                    return Err(invalid(format!(
                        "token {k} outside codebook of size {}",
                        self.size
                    )));
                }
                img.put_patch(self.patch, gr, gc, self.codeword(k));
            }
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(20 + self.codewords.len() * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        for v in [CODEBOOK_VERSION, self.size as u32, self.patch as u32, CHANNELS as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.codewords {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[0..4] != CODEBOOK_MAGIC {
            return Err(Error::format(path, "missing DGCB header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, size, patch, channels) = (word(0), word(1) as usize, word(2) as usize, word(3));
        if version != CODEBOOK_VERSION {
            return Err(Error::format(path, format!("unsupported codebook version {version}")));
        }
        if channels as usize != CHANNELS {
            return Err(Error::format(path, format!("expected 3 channels, got {channels}")));
        }
        let count = size * patch * patch * CHANNELS;
        if bytes.len() != 20 + 4 * count {
            return Err(Error::format(path, "codebook payload length mismatch"));
        }
        let codewords = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Codebook::from_codewords(patch, codewords).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn check_dims(img: &Image, s: usize) -> Result<()> {
    if !img.height.is_multiple_of(s) || !img.width.is_multiple_of(s) {
        return Err(invalid(format!(
            "image {}x{} not divisible by patch size {s}",
            img.height, img.width
        )));
    }
    if img.data.len() != img.height * img.width * CHANNELS {
        return Err(invalid("image buffer length does not match its dimensions"));
    }
    Ok(())
}

/// Weighted k-means++ seeding. Once every distinct point is taken the
/// remaining centroids repeat the first one and get reseeded or stay dead.
fn kmeans_pp_init(
    points: &[f32],
    weights: &[f64],
    dim: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut ChaCha8Rng, w: &[f64], total: f64| -> usize {
        let mut r = rng.gen::<f64>() * total;
        for (i, wi) in w.iter().enumerate() {
            if r < *wi {
                return i;
            }
            r -= wi;
        }
        w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    };
    let first = pick(rng, weights, total);
    let mut centroids = Vec::with_capacity(size * dim);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut best: Vec<f64> = points
        .chunks_exact(dim)
        .map(|x| sq_dist(x, &centroids[..dim]) as f64)
        .collect();
    for _ in 1..size {
        let w: Vec<f64> = best.iter().zip(weights).map(|(d, w)| d * w).collect();
        let mass: f64 = w.iter().sum();
        let i = if mass > 0.0 { pick(rng, &w, mass) } else { first };
        let start = centroids.len();
        centroids.extend_from_slice(&points[i * dim..(i + 1) * dim]);
        for (j, x) in points.chunks_exact(dim).enumerate().take(n) {
            let d = sq_dist(x, &centroids[start..start + dim]) as f64;
            if d < best[j] {
                best[j] = d;
            }
        }
    }
    centroids
}
