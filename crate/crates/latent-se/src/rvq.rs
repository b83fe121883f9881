//! Residual vector quantization: codebooks, tokenization, soft labels, and
//! the EMA codebook learning used during codec pretraining.
//!
//! Token indices are 0-based throughout. When `reserve_zero` is set, index 0
//! of every stage is pinned to the zero vector and excluded from learning,
//! which makes the per-stage residual norm non-increasing.

use crate::error::{Error, Result};
use crate::mat::Mat;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Continuous latent sequence, stored time-major (num_frames × latent_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub frames: Mat,
}

impl LatentSeq {
    pub fn new(frames: Mat) -> Result<Self> {
        if !frames.is_finite() {
            return Err(Error::NonFinite("latent sequence".into()));
        }
        Ok(Self { frames })
    }

    pub fn zeros(num_frames: usize, latent_dim: usize) -> Self {
        Self {
            frames: Mat::zeros(num_frames, latent_dim),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn latent_dim(&self) -> usize {
        self.frames.cols
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// Mean over frames of the squared distance to `other`.
    pub fn mse(&self, other: &LatentSeq) -> f64 {
        assert_eq!(self.frames.shape(), other.frames.shape());
        let mut total = 0.0;
        for (a, b) in self.frames.data.iter().zip(&other.frames.data) {
            total += (a - b) * (a - b);
        }
        total / self.num_frames() as f64
    }
}

/// Discrete token grid: one codebook index per (stage, frame).
/// `stages[n][t]` is the stage-n token at frame t.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub stages: Vec<Vec<usize>>,
}

impl TokenGrid {
    pub fn new(stages: Vec<Vec<usize>>, codebook_size: usize) -> Result<Self> {
        let num_frames = stages.first().map(|s| s.len()).unwrap_or(0);
        for (n, stage) in stages.iter().enumerate() {
            if stage.len() != num_frames {
                return Err(Error::ShapeMismatch {
                    context: "token grid".into(),
                    expected: format!("{num_frames} frames per stage"),
                    got: format!("{} in stage {n}", stage.len()),
                });
            }
            for &index in stage {
                if index >= codebook_size {
                    return Err(Error::IndexOutOfRange {
                        index,
                        size: codebook_size,
                        stage: n,
                    });
                }
            }
        }
        Ok(Self { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_frames(&self) -> usize {
        self.stages.first().map(|s| s.len()).unwrap_or(0)
    }

    pub fn token(&self, stage: usize, frame: usize) -> usize {
        self.stages[stage][frame]
    }
}

/// How soft-label logits derive from codeword distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftLabelExponent {
    /// logits = −‖v − c‖² / τ (consistent with the nearest-neighbor rule).
    #[default]
    SquaredDistance,
    /// logits = −‖v − c‖ / τ.
    Distance,
}

/// N ordered codebooks, each codebook_size × latent_dim.
#[derive(Debug, Clone)]
pub struct CodebookSet {
    pub stages: Vec<Mat>,
    pub frozen: bool,
    pub reserve_zero: bool,
}

impl CodebookSet {
    pub fn new(stages: Vec<Mat>, reserve_zero: bool) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::InvalidArgument("codebook set needs at least one stage".into()));
        }
        let (k, l) = stages[0].shape();
        if k < 2 {
            return Err(Error::InvalidArgument("codebooks need at least 2 entries".into()));
        }
        for (n, stage) in stages.iter().enumerate() {
            if stage.shape() != (k, l) {
                return Err(Error::ShapeMismatch {
                    context: "codebook set".into(),
                    expected: format!("{k}×{l}"),
                    got: format!("{:?} in stage {n}", stage.shape()),
                });
            }
            if !stage.is_finite() {
                return Err(Error::NonFinite(format!("codebook stage {n}")));
            }
        }
        Ok(Self {
            stages,
            frozen: false,
            reserve_zero,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.stages[0].rows
    }

    pub fn latent_dim(&self) -> usize {
        self.stages[0].cols
    }

    pub fn codeword(&self, stage: usize, index: usize) -> &[f64] {
        self.stages[stage].row(index)
    }

    /// True if some codebook contains two identical codewords.
    pub fn has_duplicate_codewords(&self) -> bool {
        for stage in &self.stages {
            for a in 0..stage.rows {
                for b in (a + 1)..stage.rows {
                    if stage.row(a) == stage.row(b) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and codeword of the nearest entry by squared Euclidean distance.
/// Ties break to the lowest index.
pub fn nearest_codeword<'c>(v: &[f64], codebook: &'c Mat) -> Result<(usize, &'c [f64])> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("nearest_codeword input".into()));
    }
    assert_eq!(v.len(), codebook.cols, "vector dim must match codeword dim");
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows {
        let d = squared_distance(v, codebook.row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    Ok((best, codebook.row(best)))
}

/// Stage-wise residual quantization. Returns the token grid and the
/// reconstruction (sum of selected codewords per frame).
pub fn rvq_quantize(latent: &LatentSeq, cb: &CodebookSet) -> Result<(TokenGrid, LatentSeq)> {
    if latent.latent_dim() != cb.latent_dim() {
        return Err(Error::ShapeMismatch {
            context: "rvq_quantize".into(),
            expected: format!("latent dim {}", cb.latent_dim()),
            got: format!("{}", latent.latent_dim()),
        });
    }
    let t_len = latent.num_frames();
    let mut stages = vec![vec![0usize; t_len]; cb.num_stages()];
    let mut recon = Mat::zeros(t_len, latent.latent_dim());
    let mut residual = vec![0.0; latent.latent_dim()];
    for t in 0..t_len {
        residual.copy_from_slice(latent.frame(t));
        for (n, stage_cb) in cb.stages.iter().enumerate() {
            let (index, codeword) = nearest_codeword(&residual, stage_cb)?;
            stages[n][t] = index;
            for (r, c) in residual.iter_mut().zip(codeword) {
                *r -= c;
            }
            let rrow = recon.row_mut(t);
            for (o, c) in rrow.iter_mut().zip(codeword) {
                *o += c;
            }
        }
    }
    Ok((
        TokenGrid::new(stages, cb.codebook_size())?,
        LatentSeq::new(recon)?,
    ))
}

/// Sum of the selected codewords per frame.
pub fn rvq_dequantize(tokens: &TokenGrid, cb: &CodebookSet) -> Result<LatentSeq> {
    if tokens.num_stages() != cb.num_stages() {
        return Err(Error::ShapeMismatch {
            context: "rvq_dequantize".into(),
            expected: format!("{} stages", cb.num_stages()),
            got: format!("{}", tokens.num_stages()),
        });
    }
    let t_len = tokens.num_frames();
    let mut out = Mat::zeros(t_len, cb.latent_dim());
    for (n, stage) in tokens.stages.iter().enumerate() {
        let book = &cb.stages[n];
        for (t, &index) in stage.iter().enumerate() {
            if index >= book.rows {
                return Err(Error::IndexOutOfRange {
                    index,
                    size: book.rows,
                    stage: n,
                });
            }
            let row = out.row_mut(t);
            for (o, c) in row.iter_mut().zip(book.row(index)) {
                *o += c;
            }
        }
    }
    LatentSeq::new(out)
}

/// Per-stage residual norms for one frame: ‖r_0‖, ‖r_1‖, …, ‖r_N‖.
pub fn residual_norms(frame: &[f64], cb: &CodebookSet) -> Result<Vec<f64>> {
    let mut residual = frame.to_vec();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut norms = vec![norm(&residual)];
    for stage_cb in &cb.stages {
        let (_, codeword) = nearest_codeword(&residual, stage_cb)?;
        for (r, c) in residual.iter_mut().zip(codeword) {
            *r -= c;
        }
        norms.push(norm(&residual));
    }
    Ok(norms)
}

/// Probabilities over codebook entries: softmax of negative distances
/// scaled by `temperature`. Argmax matches [`nearest_codeword`].
pub fn soft_labels(
    v: &[f64],
    codebook: &Mat,
    temperature: f64,
    exponent: SoftLabelExponent,
) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("soft_labels input".into()));
    }
    let mut logits: Vec<f64> = (0..codebook.rows)
        .map(|k| {
            let d2 = squared_distance(v, codebook.row(k));
            let d = match exponent {
                SoftLabelExponent::SquaredDistance => d2,
                SoftLabelExponent::Distance => d2.sqrt(),
            };
            -d / temperature
        })
        .collect();
    crate::mat::softmax_in_place(&mut logits);
    Ok(logits)
}

/// k-means++ seeding followed by a few Lloyd refinement passes.
/// Returns `k` centers drawn from `points` (each of dim `dim`).
pub fn kmeans_pp(
    points: &[Vec<f64>],
    k: usize,
    dim: usize,
    lloyd_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    assert!(!points.is_empty());
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with chosen centers; fall back to uniform.
            points[rng.gen_range(0..points.len())].clone()
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            points[chosen].clone()
        };
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, &next));
        }
        centers.push(next);
    }
    for _ in 0..lloyd_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = squared_distance(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            counts[best] += 1;
            for (s, x) in sums[best].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }
    }
    centers
}

/// Exponential-moving-average codebook learning for one RVQ stage set,
/// with dead-code reinitialization from a reservoir of encoder outputs.
#[derive(Debug, Clone)]
pub struct CodebookTrainer {
    pub decay: f64,
    ema_counts: Vec<Vec<f64>>,
    ema_sums: Vec<Mat>,
    epoch_usage: Vec<Vec<u64>>,
    epochs_unused: Vec<Vec<u32>>,
}

impl CodebookTrainer {
    pub fn new(cb: &CodebookSet, decay: f64) -> Self {
        let n = cb.num_stages();
        let k = cb.codebook_size();
        let l = cb.latent_dim();
        let mut trainer = Self {
            decay,
            ema_counts: vec![vec![0.0; k]; n],
            ema_sums: vec![Mat::zeros(k, l); n],
            epoch_usage: vec![vec![0; k]; n],
            epochs_unused: vec![vec![0; k]; n],
        };
        // Seed EMA state from the current codebooks so early updates
        // move smoothly from the initialization.
        for stage in 0..n {
            for idx in 0..k {
                trainer.ema_counts[stage][idx] = 1.0;
                trainer.ema_sums[stage]
                    .row_mut(idx)
                    .copy_from_slice(cb.stages[stage].row(idx));
            }
        }
        trainer
    }

    /// Accumulate one batch of latent frames and update the codebooks.
    /// Quantizes each frame stage by stage with the current codebooks.
    pub fn update_batch(&mut self, cb: &mut CodebookSet, frames: &[&[f64]]) -> Result<()> {
        assert!(!cb.frozen, "cannot update a frozen codebook set");
        let n = cb.num_stages();
        let k = cb.codebook_size();
        let l = cb.latent_dim();
        let mut counts = vec![vec![0.0f64; k]; n];
        let mut sums = vec![Mat::zeros(k, l); n];
        for &frame in frames {
            let mut residual = frame.to_vec();
            for stage in 0..n {
                let (index, codeword) = nearest_codeword(&residual, &cb.stages[stage])?;
                counts[stage][index] += 1.0;
                for (s, x) in sums[stage].row_mut(index).iter_mut().zip(&residual) {
                    *s += x;
                }
                self.epoch_usage[stage][index] += 1;
                for (r, c) in residual.iter_mut().zip(codeword.to_vec()) {
                    *r -= c;
                }
            }
        }
        let start = if cb.reserve_zero { 1 } else { 0 };
        for stage in 0..n {
            for idx in start..k {
                self.ema_counts[stage][idx] =
                    self.decay * self.ema_counts[stage][idx] + (1.0 - self.decay) * counts[stage][idx];
                let sum_row = sums[stage].row(idx).to_vec();
                let ema_row = self.ema_sums[stage].row_mut(idx);
                for (e, s) in ema_row.iter_mut().zip(sum_row) {
                    *e = self.decay * *e + (1.0 - self.decay) * s;
                }
                let denom = self.ema_counts[stage][idx].max(1e-9);
                let ema_row = self.ema_sums[stage].row(idx).to_vec();
                for (c, e) in cb.stages[stage].row_mut(idx).iter_mut().zip(ema_row) {
                    *c = e / denom;
                }
            }
        }
        Ok(())
    }

    /// End-of-epoch housekeeping: reinitialize entries unused for two
    /// consecutive epochs from `reservoir` frames, then clear usage.
    pub fn end_epoch(
        &mut self,
        cb: &mut CodebookSet,
        reservoir: &[Vec<f64>],
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let start = if cb.reserve_zero { 1 } else { 0 };
        let mut reinit = 0;
        for stage in 0..cb.num_stages() {
            for idx in start..cb.codebook_size() {
                if self.epoch_usage[stage][idx] == 0 {
                    self.epochs_unused[stage][idx] += 1;
                } else {
                    self.epochs_unused[stage][idx] = 0;
                }
                if self.epochs_unused[stage][idx] >= 2 && !reservoir.is_empty() {
                    let source = reservoir.choose(rng).unwrap();
                    cb.stages[stage].row_mut(idx).copy_from_slice(source);
                    self.ema_counts[stage][idx] = 1.0;
                    self.ema_sums[stage].row_mut(idx).copy_from_slice(source);
                    self.epochs_unused[stage][idx] = 0;
                    reinit += 1;
                }
            }
            self.epoch_usage[stage].iter_mut().for_each(|u| *u = 0);
        }
        ensure_distinct(cb, rng);
        reinit
    }

    /// Fraction of entries used at least once this epoch, per stage.
    pub fn epoch_usage_fraction(&self, cb: &CodebookSet) -> Vec<f64> {
        let start = if cb.reserve_zero { 1 } else { 0 };
        self.epoch_usage
            .iter()
            .map(|usage| {
                let used = usage[start..].iter().filter(|&&u| u > 0).count();
                used as f64 / (usage.len() - start) as f64
            })
            .collect()
    }
}

/// Nudge duplicate codewords apart with tiny deterministic jitter.
pub fn ensure_distinct(cb: &mut CodebookSet, rng: &mut ChaCha8Rng) {
    for stage in cb.stages.iter_mut() {
        ensure_distinct_stage(stage, rng);
    }
}

/// One-codebook version of [`ensure_distinct`].
pub fn ensure_distinct_stage(stage: &mut Mat, rng: &mut ChaCha8Rng) {
    loop {
        let mut fixed = false;
        for a in 0..stage.rows {
            for b in (a + 1)..stage.rows {
                if stage.row(a) == stage.row(b) {
                    for v in stage.row_mut(b).iter_mut() {
                        *v += rng.gen_range(-1e-6..1e-6);
                    }
                    fixed = true;
                }
            }
        }
        if !fixed {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_frame(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_codebooks(rng: &mut ChaCha8Rng, n: usize, k: usize, l: usize, zero: bool) -> CodebookSet {
        let stages = (0..n)
            .map(|_| {
                Mat::from_fn(k, l, |r, _| {
                    if zero && r == 0 {
                        0.0
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
            })
            .collect();
        CodebookSet::new(stages, zero).unwrap()
    }

    /// Independent stage-wise exhaustive oracle: enumerate every codeword
    /// at every stage, never calling the implementation under test.
    fn oracle_quantize(frame: &[f64], cb: &CodebookSet) -> (Vec<usize>, Vec<f64>) {
        let mut residual = frame.to_vec();
        let mut tokens = Vec::new();
        let mut recon = vec![0.0; frame.len()];
        for stage in &cb.stages {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..stage.rows {
                let d: f64 = residual
                    .iter()
                    .zip(stage.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            tokens.push(best);
            for i in 0..residual.len() {
                residual[i] -= stage.at(best, i);
                recon[i] += stage.at(best, i);
            }
        }
        (tokens, recon)
    }

    #[test]
    fn nearest_exact_codeword_is_found() {
        let cb = Mat::from_vec(4, 2, vec![0.5, 0.5, -1.0, 2.0, 0.0, 0.0, 3.0, -0.5]);
        let (idx, cw) = nearest_codeword(&[3.0, -0.5], &cb).unwrap();
        assert_eq!(idx, 3);
        assert_eq!(cw, &[3.0, -0.5]);
        assert_eq!(squared_distance(&[3.0, -0.5], cw), 0.0);
    }

    #[test]
    fn nearest_worked_instance() {
        // Codebook rows: (0,0), (1,0), (0,1), (1,1); query (0.9, 0.2).
        // Brute-force distances²: 0.85, 0.05, 1.45, 0.65 → row 1.
        let cb = Mat::from_vec(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v = [0.9, 0.2];
        let dists: Vec<f64> = (0..4).map(|k| squared_distance(&v, cb.row(k))).collect();
        assert!((dists[0] - 0.85).abs() < 1e-12);
        assert!((dists[1] - 0.05).abs() < 1e-12);
        assert!((dists[2] - 1.45).abs() < 1e-12);
        assert!((dists[3] - 0.65).abs() < 1e-12);
        let (idx, cw) = nearest_codeword(&v, &cb).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(cw, &[1.0, 0.0]);
    }

    #[test]
    fn nearest_tie_breaks_to_lowest_index() {
        let cb = Mat::from_vec(3, 1, vec![1.0, -1.0, 5.0]);
        let (idx, _) = nearest_codeword(&[0.0], &cb).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn nearest_rejects_non_finite() {
        let cb = Mat::from_vec(2, 1, vec![0.0, 1.0]);
        assert!(nearest_codeword(&[f64::NAN], &cb).is_err());
    }

    #[test]
    fn quantize_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cb = rand_codebooks(&mut rng, 2, 4, 2, false);
        for _ in 0..100 {
            let frame = rand_frame(&mut rng, 2);
            let latent = LatentSeq::new(Mat::from_vec(1, 2, frame.clone())).unwrap();
            let (tokens, recon) = rvq_quantize(&latent, &cb).unwrap();
            let (otokens, orecon) = oracle_quantize(&frame, &cb);
            assert_eq!(
                (0..2).map(|n| tokens.token(n, 0)).collect::<Vec<_>>(),
                otokens
            );
            for (a, b) in recon.frame(0).iter().zip(&orecon) {
                assert_eq!(a, b, "reconstruction must be bit-exact vs oracle");
            }
        }
    }

    #[test]
    fn telescoping_roundtrip_is_exact() {
        // Frame = codeword a (stage 0) + codeword b (stage 1), where a and b
        // are the greedy nearest choices and deeper residual hits zero.
        let stage0 = Mat::from_vec(3, 2, vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0]);
        let stage1 = Mat::from_vec(3, 2, vec![0.0, 0.0, 0.25, 0.0, 0.0, 0.25]);
        let cb = CodebookSet::new(vec![stage0, stage1], true).unwrap();
        let frame = vec![2.25, 0.0]; // row 1 of stage 0 plus row 1 of stage 1
        let latent = LatentSeq::new(Mat::from_vec(1, 2, frame.clone())).unwrap();
        let (tokens, recon) = rvq_quantize(&latent, &cb).unwrap();
        assert_eq!(tokens.token(0, 0), 1);
        assert_eq!(tokens.token(1, 0), 1);
        assert_eq!(recon.frame(0), &frame[..]);
        let deq = rvq_dequantize(&tokens, &cb).unwrap();
        assert_eq!(deq.frame(0), &frame[..]);
    }

    #[test]
    fn dequantize_matches_quantize_reconstruction_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cb = rand_codebooks(&mut rng, 4, 8, 3, true);
        let latent = LatentSeq::new(Mat::from_fn(7, 3, |_, _| rng.gen_range(-2.0..2.0))).unwrap();
        let (tokens, recon) = rvq_quantize(&latent, &cb).unwrap();
        let deq = rvq_dequantize(&tokens, &cb).unwrap();
        assert_eq!(deq.frames.data, recon.frames.data);
    }

    #[test]
    fn zero_tokens_dequantize_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cb = rand_codebooks(&mut rng, 3, 5, 2, true);
        let tokens = TokenGrid::new(vec![vec![0; 4]; 3], 5).unwrap();
        let deq = rvq_dequantize(&tokens, &cb).unwrap();
        assert!(deq.frames.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_stage_dequantize_is_codeword_lookup() {
        let stage = Mat::from_vec(3, 2, vec![0.0, 0.0, 1.5, -0.5, 2.0, 2.0]);
        let cb = CodebookSet::new(vec![stage], false).unwrap();
        let tokens = TokenGrid::new(vec![vec![2, 1]], 3).unwrap();
        let deq = rvq_dequantize(&tokens, &cb).unwrap();
        assert_eq!(deq.frame(0), &[2.0, 2.0]);
        assert_eq!(deq.frame(1), &[1.5, -0.5]);
    }

    #[test]
    fn out_of_range_token_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cb = rand_codebooks(&mut rng, 1, 4, 2, false);
        assert!(TokenGrid::new(vec![vec![4]], 4).is_err());
        let grid = TokenGrid { stages: vec![vec![7]] };
        assert!(rvq_dequantize(&grid, &cb).is_err());
    }

    #[test]
    fn residual_norm_non_increasing_with_zero_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cb = rand_codebooks(&mut rng, 4, 16, 4, true);
        for _ in 0..100 {
            let frame = rand_frame(&mut rng, 4);
            let norms = residual_norms(&frame, &cb).unwrap();
            for w in norms.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "residual norm increased: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn quantize_energy_never_exceeds_input_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cb = rand_codebooks(&mut rng, 4, 64, 16, true);
        for _ in 0..100 {
            let frame = rand_frame(&mut rng, 16);
            let latent = LatentSeq::new(Mat::from_vec(1, 16, frame.clone())).unwrap();
            let (_, recon) = rvq_quantize(&latent, &cb).unwrap();
            let err: f64 = frame
                .iter()
                .zip(recon.frame(0))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let energy: f64 = frame.iter().map(|x| x * x).sum();
            assert!(err <= energy + 1e-12);
        }
    }

    #[test]
    fn dequantize_is_linear_in_codebooks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cb = rand_codebooks(&mut rng, 3, 6, 4, false);
        let alpha = 1.7;
        let scaled = CodebookSet::new(
            cb.stages.iter().map(|s| s.map(|v| v * alpha)).collect(),
            false,
        )
        .unwrap();
        let tokens = TokenGrid::new(vec![vec![1, 3], vec![0, 5], vec![2, 2]], 6).unwrap();
        let a = rvq_dequantize(&tokens, &cb).unwrap();
        let b = rvq_dequantize(&tokens, &scaled).unwrap();
        for (x, y) in a.frames.data.iter().zip(&b.frames.data) {
            assert!((x * alpha - y).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_labels_worked_instance() {
        // Distances² (0.1, 0.5, 2.0) at temperature 1:
        // softmax(−0.1, −0.5, −2.0) ≈ (0.549478, 0.368325, 0.082196),
        // recomputed directly from exp sums.
        let cb = Mat::from_vec(3, 1, vec![(0.1f64).sqrt(), (0.5f64).sqrt(), (2.0f64).sqrt()]);
        let p = soft_labels(&[0.0], &cb, 1.0, SoftLabelExponent::SquaredDistance).unwrap();
        let e: Vec<f64> = [-0.1f64, -0.5, -2.0].iter().map(|d| d.exp()).collect();
        let z: f64 = e.iter().sum();
        for (pi, ei) in p.iter().zip(&e) {
            assert!((pi - ei / z).abs() < 1e-12);
        }
        assert!((p[0] - 0.549478).abs() < 1e-4);
        assert!((p[1] - 0.368325).abs() < 1e-4);
        assert!((p[2] - 0.082196).abs() < 1e-4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn soft_labels_equidistant_pair_splits_evenly() {
        let cb = Mat::from_vec(3, 1, vec![1.0, -1.0, 1e6]);
        let p = soft_labels(&[0.0], &cb, 1.0, SoftLabelExponent::SquaredDistance).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-9);
        assert!((p[1] - 0.5).abs() < 1e-9);
        assert!(p[2] < 1e-12);
    }

    #[test]
    fn soft_labels_sharpen_as_temperature_drops() {
        let cb = Mat::from_vec(2, 1, vec![0.1, 0.9]);
        let p1 = soft_labels(&[0.1], &cb, 1.0, SoftLabelExponent::SquaredDistance).unwrap();
        assert!(p1[0] > p1[1], "on-codeword entry must dominate at τ=1");
        let p0 = soft_labels(&[0.1], &cb, 1e-4, SoftLabelExponent::SquaredDistance).unwrap();
        assert!(p0[0] > 1.0 - 1e-9);
    }

    #[test]
    fn soft_labels_argmax_matches_nearest_codeword() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cb = Mat::from_fn(12, 3, |_, _| rng.gen_range(-1.0..1.0));
        for _ in 0..200 {
            let v = rand_frame(&mut rng, 3);
            for exponent in [SoftLabelExponent::SquaredDistance, SoftLabelExponent::Distance] {
                let p = soft_labels(&v, &cb, 0.7, exponent).unwrap();
                let argmax = p
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0;
                let (nearest, _) = nearest_codeword(&v, &cb).unwrap();
                assert_eq!(argmax, nearest);
            }
        }
    }

    #[test]
    fn soft_labels_reject_bad_temperature() {
        let cb = Mat::from_vec(2, 1, vec![0.0, 1.0]);
        assert!(soft_labels(&[0.5], &cb, 0.0, SoftLabelExponent::SquaredDistance).is_err());
        assert!(soft_labels(&[0.5], &cb, -1.0, SoftLabelExponent::SquaredDistance).is_err());
    }

    #[test]
    fn paper_scale_shapes_accepted() {
        // N=12 stages of K=1024 codewords with L=1024 dims.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let stages: Vec<Mat> = (0..12)
            .map(|_| Mat::from_fn(1024, 8, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        // Keep the latent dim small here; the full 1024-dim shape check is
        // covered by the acceptance suite where runtime budget allows.
        let cb = CodebookSet::new(stages, false).unwrap();
        let latent = LatentSeq::new(Mat::from_fn(3, 8, |_, _| rng.gen_range(-1.0..1.0))).unwrap();
        let (tokens, _) = rvq_quantize(&latent, &cb).unwrap();
        assert_eq!(tokens.num_stages(), 12);
        assert_eq!(tokens.num_frames(), 3);
    }

    #[test]
    fn ema_training_moves_codewords_toward_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut cb = rand_codebooks(&mut rng, 1, 4, 2, false);
        let mut trainer = CodebookTrainer::new(&cb, 0.5);
        // Two tight clusters.
        let cluster_a = vec![5.0, 5.0];
        let cluster_b = vec![-5.0, -5.0];
        for _ in 0..50 {
            let frames: Vec<&[f64]> = vec![&cluster_a, &cluster_b, &cluster_a, &cluster_b];
            trainer.update_batch(&mut cb, &frames).unwrap();
        }
        let (ia, _) = nearest_codeword(&cluster_a, &cb.stages[0]).unwrap();
        let (ib, _) = nearest_codeword(&cluster_b, &cb.stages[0]).unwrap();
        assert!(squared_distance(cb.stages[0].row(ia), &cluster_a) < 0.1);
        assert!(squared_distance(cb.stages[0].row(ib), &cluster_b) < 0.1);
    }

    #[test]
    fn dead_codes_reinitialized_after_two_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut cb = CodebookSet::new(
            vec![Mat::from_vec(3, 1, vec![0.0, 100.0, -100.0])],
            false,
        )
        .unwrap();
        let mut trainer = CodebookTrainer::new(&cb, 0.9);
        let reservoir = vec![vec![1.0], vec![2.0]];
        for _ in 0..2 {
            let frame = vec![0.1];
            trainer.update_batch(&mut cb, &[&frame]).unwrap();
            trainer.end_epoch(&mut cb, &reservoir, &mut rng);
        }
        // Entries 1 and 2 were never selected; both must be re-seeded near data.
        for idx in 1..3 {
            assert!(cb.stages[0].at(idx, 0).abs() < 10.0, "entry {idx} not reinitialized");
        }
        assert!(!cb.has_duplicate_codewords());
    }

    #[test]
    fn kmeans_pp_centers_cover_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut points = Vec::new();
        for _ in 0..50 {
            points.push(vec![3.0 + rng.gen_range(-0.1..0.1), 0.0]);
            points.push(vec![-3.0 + rng.gen_range(-0.1..0.1), 0.0]);
        }
        let centers = kmeans_pp(&points, 2, 2, 5, &mut rng);
        let signs: Vec<bool> = centers.iter().map(|c| c[0] > 0.0).collect();
        assert_ne!(signs[0], signs[1], "one center per cluster expected");
    }
}
