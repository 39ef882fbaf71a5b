//! Multi-head (product) vector quantisation with EMA codebook training.
//!
//! A `D`-dimensional vector is split into `H` contiguous sub-vectors of
//! `D / H` dims; each head owns `K` codewords and quantises its sub-vector
//! independently. Codewords are running means of their assigned inputs,
//! tracked by exponentially decayed counts and sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::par::Executor;

/// Smoothed counts below this mark a codeword as unused.
pub const DEAD_COUNT: f64 = 1e-3;
/// Consecutive unused updates after which a codeword is reseeded.
pub const DEAD_PATIENCE: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    pub decay: f64,
    pub laplace_eps: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self {
            decay: 0.99,
            laplace_eps: 1e-5,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ema decay must be in (0, 1), got {}",
                self.decay
            )));
        }
        if !(self.laplace_eps > 0.0 && self.laplace_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "laplace eps must be positive, got {}",
                self.laplace_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    heads: usize,
    codewords: usize,
    sub_dim: usize,
    /// `heads × codewords × sub_dim`, row-major.
    tables: Vec<f32>,
    /// `heads × codewords`
    ema_counts: Vec<f64>,
    /// `heads × codewords × sub_dim`
    ema_sums: Vec<f64>,
    /// `heads × codewords`; consecutive updates spent below [`DEAD_COUNT`].
    dead_streak: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub indices: Vec<usize>,
    pub quantized: Vec<f32>,
    pub sq_error: f64,
}

/// Per-head assignment histogram and sub-vector sums for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignStats {
    heads: usize,
    codewords: usize,
    sub_dim: usize,
    counts: Vec<u64>,
    sums: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

impl Codebook {
    /// Codebook with the given tables, EMA state primed as if each codeword
    /// had been seen once.
    pub fn from_tables(heads: usize, codewords: usize, sub_dim: usize, tables: Vec<f32>) -> Result<Self> {
        if heads == 0 || codewords == 0 || sub_dim == 0 {
            return Err(Error::InvalidArgument("codebook dimensions must be positive".into()));
        }
        if tables.len() != heads * codewords * sub_dim {
            return Err(Error::ShapeMismatch(format!(
                "{heads}x{codewords}x{sub_dim} codebook needs {} values, got {}",
                heads * codewords * sub_dim,
                tables.len()
            )));
        }
        if tables.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite codeword".into()));
        }
        Ok(Self {
            heads,
            codewords,
            sub_dim,
            ema_sums: tables.iter().map(|&v| f64::from(v)).collect(),
            tables,
            ema_counts: vec![1.0; heads * codewords],
            dead_streak: vec![0; heads * codewords],
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn dim(&self) -> usize {
        self.heads * self.sub_dim
    }

    pub fn codeword(&self, head: usize, k: usize) -> &[f32] {
        let off = (head * self.codewords + k) * self.sub_dim;
        &self.tables[off..off + self.sub_dim]
    }

    pub fn ema_count(&self, head: usize, k: usize) -> f64 {
        self.ema_counts[head * self.codewords + k]
    }

    pub fn ema_sum(&self, head: usize, k: usize) -> &[f64] {
        let off = (head * self.codewords + k) * self.sub_dim;
        &self.ema_sums[off..off + self.sub_dim]
    }

    pub fn tables(&self) -> &[f32] {
        &self.tables
    }

    /// Structural checks used after deserialisation.
    pub fn validate(&self) -> Result<()> {
        let (h, k, d) = (self.heads, self.codewords, self.sub_dim);
        if h == 0 || k == 0 || d == 0 {
            return Err(Error::InvalidModel("codebook dimensions must be positive".into()));
        }
        if self.tables.len() != h * k * d
            || self.ema_sums.len() != h * k * d
            || self.ema_counts.len() != h * k
            || self.dead_streak.len() != h * k
        {
            return Err(Error::InvalidModel(format!(
                "codebook arrays inconsistent with {h} heads x {k} codewords x {d} dims"
            )));
        }
        if self.tables.iter().any(|v| !v.is_finite())
            || self.ema_sums.iter().any(|v| !v.is_finite())
            || self.ema_counts.iter().any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidModel("non-finite or negative codebook state".into()));
        }
        Ok(())
    }

    fn nearest(&self, head: usize, sub: &[f32]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.codewords {
            let e = sq_dist(sub, self.codeword(head, k));
            // strict comparison keeps the smallest index on ties
            if e < best.1 {
                best = (k, e);
            }
        }
        best
    }

    /// Looks up the concatenated codewords for one index per head.
    pub fn lookup(&self, indices: &[usize]) -> Result<Vec<f32>> {
        if indices.len() != self.heads {
            return Err(Error::DimensionMismatch {
                expected: self.heads,
                actual: indices.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dim());
        for (h, &k) in indices.iter().enumerate() {
            if k >= self.codewords {
                return Err(Error::InvalidArgument(format!(
                    "token {k} out of range for {} codewords",
                    self.codewords
                )));
            }
            out.extend_from_slice(self.codeword(h, k));
        }
        Ok(out)
    }

    fn smoothed_counts(&self, head: usize, eps: f64) -> Vec<f64> {
        let range = head * self.codewords..(head + 1) * self.codewords;
        let counts = &self.ema_counts[range];
        let total: f64 = counts.iter().sum();
        let denom = total + self.codewords as f64 * eps;
        counts.iter().map(|&c| (c + eps) / denom * total).collect()
    }

    /// Replaces codewords that have stayed unused for [`DEAD_PATIENCE`]
    /// updates with sub-vectors of random rows of `batch`. Returns how many
    /// codewords were reseeded.
    pub fn reseed_dead(&mut self, batch: &FeatureSequence, rng: &mut impl Rng) -> Result<usize> {
        if batch.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: batch.cols(),
            });
        }
        if batch.rows() == 0 {
            return Ok(0);
        }
        let d = self.sub_dim;
        let mut n = 0;
        for h in 0..self.heads {
            for k in 0..self.codewords {
                let i = h * self.codewords + k;
                if self.dead_streak[i] < DEAD_PATIENCE {
                    continue;
                }
                let row = batch.row(rng.random_range(0..batch.rows()));
                let sub = &row[h * d..(h + 1) * d];
                self.tables[i * d..(i + 1) * d].copy_from_slice(sub);
                for (s, &v) in self.ema_sums[i * d..(i + 1) * d].iter_mut().zip(sub) {
                    *s = f64::from(v);
                }
                self.ema_counts[i] = 1.0;
                self.dead_streak[i] = 0;
                n += 1;
            }
        }
        Ok(n)
    }

    /// One EMA step: decayed counts and sums absorb the batch statistics,
    /// then every codeword that received assignments is reset to its
    /// Laplace-smoothed running mean. Unassigned codewords keep their value.
    pub fn ema_update(&mut self, stats: &AssignStats, cfg: &EmaConfig) -> Result<()> {
        cfg.validate()?;
        if (stats.heads, stats.codewords, stats.sub_dim) != (self.heads, self.codewords, self.sub_dim) {
            return Err(Error::ShapeMismatch(format!(
                "stats {}x{}x{} vs codebook {}x{}x{}",
                stats.heads, stats.codewords, stats.sub_dim, self.heads, self.codewords, self.sub_dim
            )));
        }
        let g = cfg.decay;
        let d = self.sub_dim;
        for (c, &n) in self.ema_counts.iter_mut().zip(&stats.counts) {
            *c = g * *c + (1.0 - g) * n as f64;
        }
        for (s, &b) in self.ema_sums.iter_mut().zip(&stats.sums) {
            *s = g * *s + (1.0 - g) * b;
        }
        for h in 0..self.heads {
            let smoothed = self.smoothed_counts(h, cfg.laplace_eps);
            for (k, &n) in smoothed.iter().enumerate() {
                let i = h * self.codewords + k;
                if n < DEAD_COUNT {
                    self.dead_streak[i] = self.dead_streak[i].saturating_add(1);
                } else {
                    self.dead_streak[i] = 0;
                }
                if stats.counts[i] == 0 || n <= 0.0 {
                    continue;
                }
                for j in 0..d {
                    self.tables[i * d + j] = (self.ema_sums[i * d + j] / n) as f32;
                }
            }
        }
        Ok(())
    }

    pub fn quantize(&self, vec: &[f32]) -> Result<QuantResult> {
        if vec.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: vec.len(),
            });
        }
        let d = self.sub_dim;
        let mut indices = Vec::with_capacity(self.heads);
        let mut quantized = Vec::with_capacity(self.dim());
        let mut sq_error = 0.0;
        for h in 0..self.heads {
            let (k, e) = self.nearest(h, &vec[h * d..(h + 1) * d]);
            indices.push(k);
            quantized.extend_from_slice(self.codeword(h, k));
            sq_error += e;
        }
        Ok(QuantResult {
            indices,
            quantized,
            sq_error,
        })
    }

    pub fn quantize_batch(&self, frames: &FeatureSequence) -> Result<(Vec<QuantResult>, AssignStats)> {
        self.quantize_batch_with(&Executor::sequential(), frames)
    }

    /// Row-parallel batch quantisation. Statistics are accumulated in row
    /// order afterwards, so the output does not depend on the executor.
    pub fn quantize_batch_with(
        &self,
        exec: &Executor,
        frames: &FeatureSequence,
    ) -> Result<(Vec<QuantResult>, AssignStats)> {
        if frames.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: frames.cols(),
            });
        }
        let results: Vec<QuantResult> = exec
            .map_range(frames.rows(), |t| self.quantize(frames.row(t)))
            .into_iter()
            .collect::<Result<_>>()?;
        let mut stats = AssignStats::new(self.heads, self.codewords, self.sub_dim);
        for (t, r) in results.iter().enumerate() {
            stats.record(frames.row(t), &r.indices);
        }
        Ok((results, stats))
    }
}

impl AssignStats {
    pub fn new(heads: usize, codewords: usize, sub_dim: usize) -> Self {
        Self {
            heads,
            codewords,
            sub_dim,
            counts: vec![0; heads * codewords],
            sums: vec![0.0; heads * codewords * sub_dim],
        }
    }

    pub fn for_codebook(cb: &Codebook) -> Self {
        Self::new(cb.heads, cb.codewords, cb.sub_dim)
    }

    /// Adds one input row assigned to `indices` (one per head).
    pub fn record(&mut self, row: &[f32], indices: &[usize]) {
        let d = self.sub_dim;
        for (h, &k) in indices.iter().enumerate() {
            let i = h * self.codewords + k;
            self.counts[i] += 1;
            for (s, &v) in self.sums[i * d..(i + 1) * d].iter_mut().zip(&row[h * d..(h + 1) * d]) {
                *s += f64::from(v);
            }
        }
    }

    pub fn merge(&mut self, other: &AssignStats) -> Result<()> {
        if (self.heads, self.codewords, self.sub_dim) != (other.heads, other.codewords, other.sub_dim) {
            return Err(Error::ShapeMismatch("cannot merge stats of different shapes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(&self, head: usize, k: usize) -> u64 {
        self.counts[head * self.codewords + k]
    }

    pub fn sum(&self, head: usize, k: usize) -> &[f64] {
        let off = (head * self.codewords + k) * self.sub_dim;
        &self.sums[off..off + self.sub_dim]
    }

    pub fn head_total(&self, head: usize) -> u64 {
        self.counts[head * self.codewords..(head + 1) * self.codewords].iter().sum()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn codewords(&self) -> usize {
        self.codewords
    }

    /// Exponential of the entropy of each head's assignment histogram.
    pub fn perplexity(&self) -> Result<Vec<f64>> {
        (0..self.heads)
            .map(|h| {
                let total = self.head_total(h);
                if total == 0 {
                    return Err(Error::Empty("assignment histogram"));
                }
                let total = total as f64;
                let entropy: f64 = self.counts[h * self.codewords..(h + 1) * self.codewords]
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / total;
                        -p * p.ln()
                    })
                    .sum();
                Ok(entropy.exp())
            })
            .collect()
    }
}

/// Greedy k-means++ seeding of `k` centres from `points` (each of length
/// `dim`, packed). Draws `2 + ln k` candidates per step and keeps the one
/// that most reduces the potential.
fn kmeans_pp(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    let mut cand_d2 = vec![0.0; n];
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // fewer distinct points than centres
            let i = rng.random_range(0..n);
            centers.extend_from_slice(point(i));
            continue;
        }
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            if d2[pick] <= 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            let c = point(pick);
            let mut potential = 0.0;
            for (i, slot) in cand_d2.iter_mut().enumerate() {
                *slot = d2[i].min(sq_dist(point(i), c));
                potential += *slot;
            }
            if best.as_ref().is_none_or(|b| potential < b.1) {
                best = Some((pick, potential, cand_d2.clone()));
            }
        }
        let (pick, _, new_d2) = best.expect("at least one trial");
        centers.extend_from_slice(point(pick));
        d2 = new_d2;
    }
    centers
}

/// Seeds one codebook per head by k-means++ over that head's sub-vectors.
pub fn init_codebook(frames: &FeatureSequence, heads: usize, codewords: usize, seed: u64) -> Result<Codebook> {
    if heads == 0 || codewords == 0 {
        return Err(Error::InvalidArgument("heads and codewords must be positive".into()));
    }
    let dim = frames.cols();
    if dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "feature dim {dim} is not divisible by {heads} heads"
        )));
    }
    if frames.rows() < codewords {
        return Err(Error::InsufficientData {
            needed: codewords,
            available: frames.rows(),
        });
    }
    let d = dim / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tables = Vec::with_capacity(heads * codewords * d);
    for h in 0..heads {
        let sub: Vec<f32> = frames
            .iter_rows()
            .flat_map(|r| r[h * d..(h + 1) * d].iter().copied())
            .collect();
        tables.extend(kmeans_pp(&sub, d, codewords, &mut rng));
    }
    Codebook::from_tables(heads, codewords, d, tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn random_frames(rows: usize, cols: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureSequence::new(rows, cols, data).unwrap()
    }

    fn brute_nearest(cb: &Codebook, h: usize, sub: &[f32]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for k in 0..cb.codewords() {
            let c = cb.codeword(h, k);
            let mut e = 0.0;
            for j in 0..sub.len() {
                let diff = f64::from(sub[j]) - f64::from(c[j]);
                e += diff * diff;
            }
            if e < best.1 {
                best = (k, e);
            }
        }
        best
    }

    #[test]
    fn exact_codeword_hit() {
        let cb = init_codebook(&random_frames(32, 8, 1), 2, 8, 5).unwrap();
        let mut v = cb.codeword(0, 3).to_vec();
        v.extend_from_slice(cb.codeword(1, 7));
        let q = cb.quantize(&v).unwrap();
        assert_eq!(q.indices, vec![3, 7]);
        assert_eq!(q.sq_error, 0.0);
    }

    #[test]
    fn matches_per_head_brute_force() {
        let cb = init_codebook(&random_frames(16, 8, 2), 2, 4, 9).unwrap();
        let probes = random_frames(200, 8, 3);
        for v in probes.iter_rows() {
            let q = cb.quantize(v).unwrap();
            let mut err = 0.0;
            for h in 0..2 {
                let (k, e) = brute_nearest(&cb, h, &v[h * 4..(h + 1) * 4]);
                assert_eq!(q.indices[h], k);
                err += e;
            }
            assert_eq!(q.sq_error, err);
        }
    }

    #[test]
    fn deployed_shape() {
        let cb = init_codebook(&random_frames(200, 80, 4), 4, 64, 1).unwrap();
        assert_eq!(cb.sub_dim(), 20);
        let q = cb.quantize(random_frames(1, 80, 5).row(0)).unwrap();
        assert!(q.indices.iter().all(|&k| k < 64));
        assert!(cb.quantize(&[0.0; 79]).is_err());
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let cb = Codebook::from_tables(1, 3, 1, vec![1.0, -1.0, 1.0]).unwrap();
        assert_eq!(cb.quantize(&[0.0]).unwrap().indices, vec![0]);
        assert_eq!(cb.quantize(&[1.0]).unwrap().indices, vec![0]);
    }

    #[test]
    fn init_recovers_distinct_subvectors() {
        // 8 distinct sub-vectors per head, each repeated 5 times
        let protos: Vec<[f32; 4]> = (0..8)
            .map(|i| {
                let x = i as f32;
                [x, -x, x * 0.5, 10.0 + x, 2.0 * x, x * x, 1.0, -3.0 * x]
            })
            .map(|r| [r[0], r[1], r[2], r[3]])
            .collect();
        let rows: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let a = protos[i % 8];
                let b = protos[(i * 3 + 1) % 8];
                a.iter().chain(b.iter()).copied().collect()
            })
            .collect();
        let frames = FeatureSequence::from_rows(&rows).unwrap();
        let cb = init_codebook(&frames, 2, 8, 17).unwrap();
        for h in 0..2 {
            let mut got: Vec<Vec<f32>> = (0..8).map(|k| cb.codeword(h, k).to_vec()).collect();
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut want: Vec<Vec<f32>> = protos.iter().map(|p| p.to_vec()).collect();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want);
        }
        assert_eq!(cb.ema_count(0, 0), 1.0);
        assert_eq!(cb.ema_sum(1, 2), cb.codeword(1, 2).iter().map(|&v| f64::from(v)).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn init_finds_separated_gaussians() {
        let means = [[-20.0f64, -20.0], [20.0, -20.0], [-20.0, 20.0], [20.0, 20.0]];
        let sigma = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rows = Vec::new();
        let mut sums = [[0.0f64; 2]; 4];
        for i in 0..1000 {
            let m = means[i % 4];
            let r = [(m[0] + noise.sample(&mut rng)) as f32, (m[1] + noise.sample(&mut rng)) as f32];
            sums[i % 4][0] += f64::from(r[0]);
            sums[i % 4][1] += f64::from(r[1]);
            rows.push(r);
        }
        // oracle: exact empirical means of the generated clusters
        let exact: Vec<[f64; 2]> = sums.iter().map(|s| [s[0] / 250.0, s[1] / 250.0]).collect();
        let cb = init_codebook(&FeatureSequence::from_rows(&rows).unwrap(), 1, 4, 3).unwrap();
        let mut used = [false; 4];
        for k in 0..4 {
            let c = cb.codeword(0, k);
            let (j, dist) = exact
                .iter()
                .enumerate()
                .map(|(j, m)| (j, (f64::from(c[0]) - m[0]).hypot(f64::from(c[1]) - m[1])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(dist < 3.0 * sigma * 2f64.sqrt(), "codeword {k} is {dist} from its mean");
            assert!(!used[j]);
            used[j] = true;
        }
    }

    #[test]
    fn init_is_deterministic_and_checks_size() {
        let f = random_frames(100, 8, 7);
        assert_eq!(init_codebook(&f, 2, 16, 4).unwrap(), init_codebook(&f, 2, 16, 4).unwrap());
        let err = init_codebook(&random_frames(10, 8, 7), 2, 16, 4).unwrap_err();
        assert!(err.to_string().contains("insufficient data for initialization"));
        assert!(init_codebook(&f, 3, 4, 0).is_err());
    }

    #[test]
    fn batch_of_one_equals_single() {
        let cb = init_codebook(&random_frames(20, 8, 1), 2, 4, 2).unwrap();
        let f = random_frames(1, 8, 9);
        let (res, stats) = cb.quantize_batch(&f).unwrap();
        assert_eq!(res[0], cb.quantize(f.row(0)).unwrap());
        assert_eq!(stats.head_total(0), 1);
    }

    #[test]
    fn batch_stats_match_naive_grouping() {
        let cb = init_codebook(&random_frames(40, 8, 1), 2, 4, 2).unwrap();
        let f = random_frames(100, 8, 10);
        let (res, stats) = cb.quantize_batch_with(&Executor::new(3), &f).unwrap();
        for h in 0..2 {
            assert_eq!(stats.head_total(h), 100);
            for k in 0..4 {
                let members: Vec<usize> = (0..100).filter(|&t| res[t].indices[h] == k).collect();
                assert_eq!(stats.count(h, k), members.len() as u64);
                for j in 0..4 {
                    let mut s = 0.0;
                    for &t in &members {
                        s += f64::from(f.row(t)[h * 4 + j]);
                    }
                    assert_eq!(stats.sum(h, k)[j], s);
                }
            }
        }
        assert_eq!(cb.quantize_batch(&f).unwrap().1, stats);
    }

    #[test]
    fn ema_zero_stats_keep_codewords() {
        let mut cb = init_codebook(&random_frames(40, 8, 1), 2, 4, 2).unwrap();
        let before = cb.clone();
        cb.ema_update(&AssignStats::for_codebook(&cb), &EmaConfig::default()).unwrap();
        assert_eq!(cb.tables(), before.tables());
        for h in 0..2 {
            for k in 0..4 {
                assert!((cb.ema_count(h, k) - 0.99 * before.ema_count(h, k)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_hand_computed_step() {
        let mut cb = Codebook::from_tables(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let mut stats = AssignStats::for_codebook(&cb);
        stats.record(&[3.0, 3.0], &[0]);
        stats.record(&[3.0, 3.0], &[0]);
        cb.ema_update(&stats, &EmaConfig::default()).unwrap();
        assert!((cb.ema_count(0, 0) - 1.01).abs() < 1e-12);
        assert!((cb.ema_sum(0, 0)[0] - 1.05).abs() < 1e-12);
        let want = 1.05 / 1.01;
        assert!((f64::from(cb.codeword(0, 0)[0]) - want).abs() < 1e-6);
        assert!((want - 1.0396).abs() < 1e-4);
    }

    #[test]
    fn ema_rejects_mismatched_stats() {
        let mut cb = Codebook::from_tables(1, 2, 2, vec![0.0; 4]).unwrap();
        let stats = AssignStats::new(1, 3, 2);
        assert!(cb.ema_update(&stats, &EmaConfig::default()).is_err());
        let bad = EmaConfig { decay: 1.0, laplace_eps: 1e-5 };
        assert!(cb.ema_update(&AssignStats::for_codebook(&cb), &bad).is_err());
    }

    /// Classical Lloyd iterations from the same starting centres.
    fn lloyd(points: &FeatureSequence, mut centers: Vec<Vec<f64>>, iters: usize) -> Vec<Vec<f64>> {
        for _ in 0..iters {
            let mut sums = vec![vec![0.0; points.cols()]; centers.len()];
            let mut counts = vec![0usize; centers.len()];
            for r in points.iter_rows() {
                let k = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da: f64 = r.iter().zip(&centers[a]).map(|(&x, c)| (f64::from(x) - c).powi(2)).sum();
                        let db: f64 = r.iter().zip(&centers[b]).map(|(&x, c)| (f64::from(x) - c).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                counts[k] += 1;
                for (s, &x) in sums[k].iter_mut().zip(r) {
                    *s += f64::from(x);
                }
            }
            for k in 0..centers.len() {
                if counts[k] > 0 {
                    centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
                }
            }
        }
        centers
    }

    #[test]
    fn ema_converges_to_lloyd_centroids() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let means = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [6.0, 6.0], [-6.0, 3.0]];
        let rows: Vec<[f32; 2]> = (0..500)
            .map(|i| {
                let m = means[i % 5];
                [(m[0] + noise.sample(&mut rng)) as f32, (m[1] + noise.sample(&mut rng)) as f32]
            })
            .collect();
        let data = FeatureSequence::from_rows(&rows).unwrap();
        let mut cb = init_codebook(&data, 1, 5, 8).unwrap();
        let start: Vec<Vec<f64>> = (0..5).map(|k| cb.codeword(0, k).iter().map(|&v| f64::from(v)).collect()).collect();
        let want = lloyd(&data, start, 100);
        let cfg = EmaConfig { decay: 0.9, laplace_eps: 1e-5 };
        for _ in 0..400 {
            let (_, stats) = cb.quantize_batch(&data).unwrap();
            cb.ema_update(&stats, &cfg).unwrap();
        }
        for (k, w) in want.iter().enumerate() {
            let c = cb.codeword(0, k);
            for j in 0..2 {
                assert!((f64::from(c[j]) - w[j]).abs() < 1e-3, "codeword {k}: {c:?} vs {w:?}");
            }
        }
    }

    #[test]
    fn training_lowers_error() {
        let data = random_frames(300, 8, 30);
        let mut cb = init_codebook(&random_frames(16, 8, 31), 2, 8, 1).unwrap();
        let cfg = EmaConfig::default();
        let mean_err = |cb: &Codebook| {
            let (res, _) = cb.quantize_batch(&data).unwrap();
            res.iter().map(|r| r.sq_error).sum::<f64>() / res.len() as f64
        };
        let mut after_first = 0.0;
        for round in 0..50 {
            let (_, stats) = cb.quantize_batch(&data).unwrap();
            cb.ema_update(&stats, &cfg).unwrap();
            if round == 0 {
                after_first = mean_err(&cb);
            }
        }
        assert!(mean_err(&cb) < after_first);
    }

    #[test]
    fn perplexity_cases() {
        let mut s = AssignStats::new(1, 64, 1);
        for k in 0..64 {
            s.record(&[0.0], &[k]);
        }
        assert!((s.perplexity().unwrap()[0] - 64.0).abs() < 1e-9);

        let mut s = AssignStats::new(1, 4, 1);
        for _ in 0..10 {
            s.record(&[0.0], &[2]);
        }
        assert!((s.perplexity().unwrap()[0] - 1.0).abs() < 1e-12);

        let mut s = AssignStats::new(1, 4, 1);
        for k in [0, 0, 1, 2] {
            s.record(&[0.0], &[k]);
        }
        // oracle: -sum p ln p for (1/2, 1/4, 1/4, 0)
        let h = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((s.perplexity().unwrap()[0] - h.exp()).abs() < 1e-12);
        assert!((h.exp() - 2.828).abs() < 1e-3);

        assert!(AssignStats::new(1, 4, 1).perplexity().is_err());
    }

    #[test]
    fn dead_codewords_are_reseeded() {
        let mut cb = Codebook::from_tables(1, 2, 1, vec![0.0, 100.0]).unwrap();
        let batch = FeatureSequence::from_rows(&[[0.5f32], [0.25]]).unwrap();
        let cfg = EmaConfig { decay: 0.5, laplace_eps: 1e-5 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut reseeded = 0;
        for _ in 0..30 {
            let (_, stats) = cb.quantize_batch(&batch).unwrap();
            cb.ema_update(&stats, &cfg).unwrap();
            reseeded += cb.reseed_dead(&batch, &mut rng).unwrap();
        }
        assert!(reseeded >= 1);
        let c = cb.codeword(0, 1)[0];
        assert!(c < 1.0, "codeword 1 still at {c}");
    }

    proptest! {
        #[test]
        fn product_separability(seed in 0u64..500) {
            // H=2, K=8: per-head argmin equals the argmin over all 64 pairs
            let cb = init_codebook(&random_frames(32, 4, seed), 2, 8, seed).unwrap();
            let v = random_frames(1, 4, seed + 1000);
            let q = cb.quantize(v.row(0)).unwrap();
            let mut best = (0, 0, f64::INFINITY);
            for a in 0..8 {
                for b in 0..8 {
                    let mut full = cb.codeword(0, a).to_vec();
                    full.extend_from_slice(cb.codeword(1, b));
                    let e = sq_dist(v.row(0), &full);
                    if e < best.2 - 1e-12 {
                        best = (a, b, e);
                    }
                }
            }
            prop_assert_eq!(q.indices, vec![best.0, best.1]);
            prop_assert!((q.sq_error - best.2).abs() <= 1e-12 * best.2.max(1.0));
        }

        #[test]
        fn quantize_is_idempotent(seed in 0u64..500) {
            let cb = init_codebook(&random_frames(24, 6, seed), 3, 4, seed).unwrap();
            let q = cb.quantize(random_frames(1, 6, seed ^ 77).row(0)).unwrap();
            let again = cb.quantize(&q.quantized).unwrap();
            prop_assert_eq!(again.sq_error, 0.0);
            // duplicate codewords may remap to a smaller index with the same value
            prop_assert_eq!(cb.lookup(&again.indices).unwrap(), q.quantized);
        }

        #[test]
        fn sq_error_is_additive(seed in 0u64..500) {
            let cb = init_codebook(&random_frames(24, 8, seed), 4, 4, seed).unwrap();
            let v = random_frames(1, 8, seed + 3);
            let q = cb.quantize(v.row(0)).unwrap();
            let per_head: f64 = (0..4).map(|h| sq_dist(&v.row(0)[h * 2..h * 2 + 2], cb.codeword(h, q.indices[h]))).sum();
            prop_assert!((q.sq_error - per_head).abs() <= 1e-12 * per_head.max(1.0));
            prop_assert!((q.sq_error - sq_dist(v.row(0), &q.quantized)).abs() <= 1e-12 * per_head.max(1.0));
        }

        #[test]
        fn ema_step_stays_in_convex_hull(seed in 0u64..300) {
            let mut cb = init_codebook(&random_frames(24, 4, seed), 2, 4, seed).unwrap();
            let batch = random_frames(30, 4, seed + 9);
            let (_, stats) = cb.quantize_batch(&batch).unwrap();
            let before = cb.clone();
            let cfg = EmaConfig::default();
            cb.ema_update(&stats, &cfg).unwrap();
            for h in 0..2 {
                let total: f64 = (0..4).map(|k| cb.ema_count(h, k)).sum();
                for k in 0..4 {
                    let n = stats.count(h, k);
                    if n == 0 {
                        prop_assert_eq!(cb.codeword(h, k), before.codeword(h, k));
                        continue;
                    }
                    let old: Vec<f64> = before.ema_sum(h, k).iter().map(|s| s / before.ema_count(h, k)).collect();
                    let mean: Vec<f64> = stats.sum(h, k).iter().map(|s| s / n as f64).collect();
                    let new = cb.codeword(h, k);
                    let norm = new.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
                    let slack = cfg.laplace_eps * norm * 4.0 / total + 1e-6;
                    // the new codeword lies on the segment old -> mean
                    let lambda_num: f64 = (0..2).map(|j| (f64::from(new[j]) - old[j]) * (mean[j] - old[j])).sum();
                    let seg2: f64 = (0..2).map(|j| (mean[j] - old[j]).powi(2)).sum();
                    let lambda = if seg2 > 0.0 { (lambda_num / seg2).clamp(0.0, 1.0) } else { 0.0 };
                    for j in 0..2 {
                        let proj = old[j] + lambda * (mean[j] - old[j]);
                        prop_assert!((f64::from(new[j]) - proj).abs() <= slack, "off segment by {}", (f64::from(new[j]) - proj).abs());
                    }
                }
            }
        }
    }
}
