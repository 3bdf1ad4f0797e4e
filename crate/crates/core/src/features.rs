//! Semantic target construction: per-character context embeddings, Lanczos
//! resampling onto the acquisition grid, and the delayed weighted sum.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights applied to the stimulus features 1..=5 acquisitions in the past.
pub const DELAY_WEIGHTS: [f64; 5] = [1.0, 0.7, 0.5, 0.3, 0.1];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranscriptEntry {
    pub char_id: u32,
    pub onset: f64,
    pub offset: f64,
}

impl TranscriptEntry {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.onset + self.offset)
    }
}

/// Time-stamped character sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn new(entries: Vec<TranscriptEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if !(e.onset.is_finite() && e.offset.is_finite()) || e.offset < e.onset {
                return Err(Error::Data(format!(
                    "entry {i}: invalid interval [{}, {}]",
                    e.onset, e.offset
                )));
            }
            if i > 0 && e.onset <= entries[i - 1].onset {
                return Err(Error::Data(format!(
                    "entry {i}: onset {} not after previous onset {}",
                    e.onset,
                    entries[i - 1].onset
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Characters with zero-length intervals at the given instants.
    pub fn from_points(chars: &[u32], times: &[f64]) -> Result<Self> {
        if chars.len() != times.len() {
            return Err(Error::shape("one time per character"));
        }
        Self::new(
            chars
                .iter()
                .zip(times)
                .map(|(&c, &t)| TranscriptEntry {
                    char_id: c,
                    onset: t,
                    offset: t,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn chars(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.char_id).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.entries.iter().map(TranscriptEntry::midpoint).collect()
    }

    pub fn end_time(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.offset))
    }

    /// Entries whose midpoint lies in `[start, end)`, shifted so `start` becomes 0.
    pub fn slice_time(&self, start: f64, end: f64) -> Transcript {
        Transcript {
            entries: self
                .entries
                .iter()
                .filter(|e| {
                    let m = e.midpoint();
                    m >= start && m < end
                })
                .map(|e| TranscriptEntry {
                    char_id: e.char_id,
                    onset: e.onset - start,
                    offset: e.offset - start,
                })
                .collect(),
        }
    }

    /// Number of characters whose midpoint falls in each acquisition interval
    /// `[t_k, t_k + TR)`.
    pub fn counts_per_acquisition(&self, grid: &AcquisitionGrid) -> Vec<usize> {
        let mut counts = vec![0; grid.count];
        for e in &self.entries {
            let k = (e.midpoint() / grid.tr).floor();
            if k >= 0.0 && (k as usize) < grid.count {
                counts[k as usize] += 1;
            }
        }
        counts
    }
}

/// Static per-character embeddings, `V x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab_size: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dim must be positive"));
        }
        if rows.len() != vocab_size * dim {
            return Err(Error::shape(format!(
                "embedding table {vocab_size}x{dim} needs {} values, got {}",
                vocab_size * dim,
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(
                "embedding table contains non-finite values".into(),
            ));
        }
        Ok(Self {
            vocab_size,
            dim,
            rows,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, c: u32) -> Result<&[f64]> {
        let c = c as usize;
        if c >= self.vocab_size {
            return Err(Error::Lookup(c as u32));
        }
        Ok(&self.rows[c * self.dim..(c + 1) * self.dim])
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }
}

/// Source of per-position semantic vectors for a character sequence.
pub trait FeatureProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Feature of `chars[i]` given its left context.
    fn context_feature(&self, chars: &[u32], i: usize) -> Result<Vec<f64>>;

    /// Features of every position, in order.
    fn sequence_features(&self, chars: &[u32]) -> Result<Vec<Vec<f64>>> {
        (0..chars.len())
            .map(|i| self.context_feature(chars, i))
            .collect()
    }
}

/// Exponentially weighted mean of the static embeddings of the last `window`
/// characters (the current one included), weight `decay^(i - j)`.
#[derive(Debug, Clone)]
pub struct WindowedContext {
    table: Arc<EmbeddingTable>,
    pub window: usize,
    pub decay: f64,
}

impl WindowedContext {
    pub fn new(table: Arc<EmbeddingTable>) -> Self {
        Self {
            table,
            window: 6,
            decay: 0.7,
        }
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }
}

impl FeatureProvider for WindowedContext {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn context_feature(&self, chars: &[u32], i: usize) -> Result<Vec<f64>> {
        if i >= chars.len() {
            return Err(Error::shape(format!(
                "position {i} outside sequence of length {}",
                chars.len()
            )));
        }
        let start = (i + 1).saturating_sub(self.window.max(1));
        let mut out = vec![0.0; self.dim()];
        let mut total = 0.0;
        for j in start..=i {
            let w = self.decay.powi((i - j) as i32);
            total += w;
            for (o, e) in out.iter_mut().zip(self.table.row(chars[j])?) {
                *o += w * e;
            }
        }
        for o in &mut out {
            *o /= total;
        }
        Ok(out)
    }
}

/// Acquisition times `t_k = k * tr` for `k in 0..count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionGrid {
    pub tr: f64,
    pub count: usize,
}

impl AcquisitionGrid {
    pub fn new(tr: f64, count: usize) -> Result<Self> {
        if !(tr > 0.0 && tr.is_finite()) {
            return Err(Error::config(format!("TR must be positive, got {tr}")));
        }
        if count == 0 {
            return Err(Error::config(
                "acquisition grid needs at least one time point",
            ));
        }
        Ok(Self { tr, count })
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.tr
    }

    pub fn duration(&self) -> f64 {
        self.count as f64 * self.tr
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else if x == x.round() {
        // sin(pi * n) is not exactly zero in floating point.
        0.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Lanczos kernel with `lobes` lobes, argument in units of the grid spacing.
pub fn lanczos_kernel(x: f64, lobes: f64) -> f64 {
    if x.abs() >= lobes {
        0.0
    } else {
        sinc(x) * sinc(x / lobes)
    }
}

/// Below this weight sum a row is treated as having no support.
const MIN_WEIGHT_SUM: f64 = 1e-9;

/// Resample time-stamped vectors onto the acquisition grid with a
/// renormalized Lanczos filter whose cutoff is the grid's Nyquist frequency.
/// Only rows `0..rows` are produced.
pub fn lanczos_resample_rows(
    times: &[f64],
    vectors: &[Vec<f64>],
    dim: usize,
    grid: &AcquisitionGrid,
    lobes: usize,
    rows: usize,
) -> Result<Tensor> {
    let rows = rows.min(grid.count);
    if rows == 0 {
        return Ok(Tensor::zeros(&[1, dim]));
    }
    let data = lanczos_resample_range(times, vectors, dim, grid, lobes, 0, rows)?;
    Tensor::from_vec(&[rows, dim], data)
}

/// Rows `start..end` of the resampled signal, flattened row-major. Rows
/// outside the grid are zero.
pub fn lanczos_resample_range(
    times: &[f64],
    vectors: &[Vec<f64>],
    dim: usize,
    grid: &AcquisitionGrid,
    lobes: usize,
    start: usize,
    end: usize,
) -> Result<Vec<f64>> {
    if times.len() != vectors.len() {
        return Err(Error::shape("one time per sample vector"));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::shape(format!(
            "sample vector of length {} in a {dim}-dim resample",
            v.len()
        )));
    }
    let end = end.max(start);
    let mut data = vec![0.0; (end - start) * dim];
    if times.is_empty() {
        return Ok(data);
    }
    let a = lobes as f64;
    let sorted = times.windows(2).all(|w| w[0] <= w[1]);
    let support = a * grid.tr;
    let mut weights = Vec::new();
    for k in start..end.min(grid.count) {
        let t = grid.time(k);
        let (lo, hi) = if sorted {
            (
                times.partition_point(|&ti| ti <= t - support),
                times.partition_point(|&ti| ti < t + support),
            )
        } else {
            (0, times.len())
        };
        weights.clear();
        let mut total = 0.0;
        for i in lo..hi {
            let w = lanczos_kernel((t - times[i]) / grid.tr, a);
            total += w;
            weights.push((i, w));
        }
        if total.abs() < MIN_WEIGHT_SUM {
            continue;
        }
        let row = &mut data[(k - start) * dim..(k - start + 1) * dim];
        for &(i, w) in &weights {
            if w == 0.0 {
                continue;
            }
            for (o, v) in row.iter_mut().zip(&vectors[i]) {
                *o += w * v;
            }
        }
        for o in row.iter_mut() {
            *o /= total;
        }
    }
    Ok(data)
}

/// [`lanczos_resample_rows`] over the whole grid.
pub fn lanczos_resample(
    times: &[f64],
    vectors: &[Vec<f64>],
    dim: usize,
    grid: &AcquisitionGrid,
    lobes: usize,
) -> Result<Tensor> {
    lanczos_resample_rows(times, vectors, dim, grid, lobes, grid.count)
}

/// `y_t = sum_d weights[d-1] * x[t-d]` for `d = 1..=weights.len()`.
pub fn delayed_sum(resampled: &Tensor, weights: &[f64]) -> Result<Tensor> {
    resampled.expect_rank(2, "delayed_sum input")?;
    let (t_n, dim) = (resampled.dims()[0], resampled.dims()[1]);
    let src = resampled.data();
    let mut out = Tensor::zeros(&[t_n, dim]);
    let dst = out.data_mut();
    for t in 0..t_n {
        let row = &mut dst[t * dim..(t + 1) * dim];
        for (d, &w) in weights.iter().enumerate() {
            let Some(s) = t.checked_sub(d + 1) else { break };
            for (o, v) in row.iter_mut().zip(&src[s * dim..(s + 1) * dim]) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Concatenate the delayed rows instead of summing them: `[T, delays * D]`.
pub fn delayed_concat(resampled: &Tensor, delays: usize) -> Result<Tensor> {
    resampled.expect_rank(2, "delayed_concat input")?;
    let (t_n, dim) = (resampled.dims()[0], resampled.dims()[1]);
    let src = resampled.data();
    let width = delays * dim;
    let mut out = Tensor::zeros(&[t_n, width]);
    let dst = out.data_mut();
    for t in 0..t_n {
        for d in 1..=delays {
            if let Some(s) = t.checked_sub(d) {
                dst[t * width + (d - 1) * dim..t * width + d * dim]
                    .copy_from_slice(&src[s * dim..(s + 1) * dim]);
            }
        }
    }
    Ok(out)
}

/// Settings for the three-step target pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetConfig {
    pub lobes: usize,
    pub delay_weights: Vec<f64>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            lobes: 3,
            delay_weights: DELAY_WEIGHTS.to_vec(),
        }
    }
}

/// Targets for rows `0..rows` from characters placed at `times`.
pub fn targets_from_points(
    chars: &[u32],
    times: &[f64],
    provider: &dyn FeatureProvider,
    grid: &AcquisitionGrid,
    cfg: &TargetConfig,
    rows: usize,
) -> Result<Tensor> {
    let dim = provider.dim();
    let rows = rows.min(grid.count).max(1);
    if chars.is_empty() {
        return Ok(Tensor::zeros(&[rows, dim]));
    }
    // Rows < rows only read resampled rows < rows - 1; characters beyond that
    // row's filter support cannot contribute.
    let horizon = grid.time(rows.saturating_sub(1)) + cfg.lobes as f64 * grid.tr;
    let sorted = times.windows(2).all(|w| w[0] <= w[1]);
    let used = if sorted {
        times.partition_point(|&t| t < horizon)
    } else {
        chars.len()
    };
    let feats = (0..used)
        .map(|i| provider.context_feature(chars, i))
        .collect::<Result<Vec<_>>>()?;
    let resampled = lanczos_resample_rows(&times[..used], &feats, dim, grid, cfg.lobes, rows)?;
    delayed_sum(&resampled, &cfg.delay_weights)
}

/// One semantic target per acquisition for a transcript, using character midpoints.
pub fn build_targets(
    transcript: &Transcript,
    provider: &dyn FeatureProvider,
    grid: &AcquisitionGrid,
    cfg: &TargetConfig,
) -> Result<Tensor> {
    targets_from_points(
        &transcript.chars(),
        &transcript.midpoints(),
        provider,
        grid,
        cfg,
        grid.count,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_2d() -> Arc<EmbeddingTable> {
        Arc::new(EmbeddingTable::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap())
    }

    #[test]
    fn context_feature_cases() {
        let ctx = WindowedContext::new(table_2d());
        assert_eq!(ctx.context_feature(&[2, 1], 0).unwrap(), vec![0.5, 0.5]);
        let two = ctx.context_feature(&[0, 1], 1).unwrap();
        assert!((two[0] - 0.7 / 1.7).abs() < 1e-15);
        assert!((two[1] - 1.0 / 1.7).abs() < 1e-15);
        assert!((two[0] - 0.4118).abs() < 1e-4 && (two[1] - 0.5882).abs() < 1e-4);
        let same = ctx.context_feature(&[1; 8], 7).unwrap();
        assert!((same[0]).abs() < 1e-15 && (same[1] - 1.0).abs() < 1e-15);
        assert!(matches!(
            ctx.context_feature(&[0, 9], 1),
            Err(Error::Lookup(9))
        ));
    }

    #[test]
    fn context_window_truncates_to_six() {
        let ctx = WindowedContext::new(table_2d());
        // Position 6 with a window of 6 ignores position 0.
        let a = ctx.context_feature(&[0, 1, 1, 1, 1, 1, 1], 6).unwrap();
        let b = ctx.context_feature(&[2, 1, 1, 1, 1, 1, 1], 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kernel_zero_crossings_are_exact() {
        for n in 1..3 {
            assert_eq!(lanczos_kernel(n as f64, 3.0), 0.0);
            assert_eq!(lanczos_kernel(-(n as f64), 3.0), 0.0);
        }
        assert_eq!(lanczos_kernel(0.0, 3.0), 1.0);
        assert_eq!(lanczos_kernel(3.0, 3.0), 0.0);
        assert_eq!(lanczos_kernel(3.5, 3.0), 0.0);
    }

    #[test]
    fn single_sample_on_grid_point() {
        let grid = AcquisitionGrid::new(1.5, 6).unwrap();
        let out = lanczos_resample(&[3.0], &[vec![2.0, -1.0]], 2, &grid, 3).unwrap();
        assert_eq!(&out.data()[4..6], &[2.0, -1.0]);
        for k in [0, 1, 3, 4, 5] {
            assert_eq!(&out.data()[2 * k..2 * k + 2], &[0.0, 0.0], "row {k}");
        }
    }

    #[test]
    fn constant_field_reproduced() {
        let grid = AcquisitionGrid::new(1.5, 20).unwrap();
        let times: Vec<f64> = (0..300).map(|i| i as f64 * 0.1 + 0.013).collect();
        let vecs = vec![vec![0.25, -3.0]; times.len()];
        let out = lanczos_resample(&times, &vecs, 2, &grid, 3).unwrap();
        for k in 0..20 {
            let r = &out.data()[2 * k..2 * k + 2];
            assert!(
                (r[0] - 0.25).abs() < 1e-12 && (r[1] + 3.0).abs() < 1e-12,
                "row {k}: {r:?}"
            );
        }
    }

    #[test]
    fn delayed_sum_cases() {
        let rows = Tensor::full(&[8, 2], 1.0);
        let y = delayed_sum(&rows, &DELAY_WEIGHTS).unwrap();
        assert_eq!(&y.data()[0..2], &[0.0, 0.0]);
        for t in 5..8 {
            assert!((y.data()[2 * t] - 2.6).abs() < 1e-12);
        }

        let mut impulse = Tensor::zeros(&[10, 1]);
        impulse.data_mut()[3] = 1.0;
        let y = delayed_sum(&impulse, &DELAY_WEIGHTS).unwrap();
        assert_eq!(
            y.data(),
            &[0.0, 0.0, 0.0, 0.0, 1.0, 0.7, 0.5, 0.3, 0.1, 0.0]
        );
    }

    #[test]
    fn delayed_concat_layout() {
        let x = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let y = delayed_concat(&x, 2).unwrap();
        assert_eq!(y.dims(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 0.0, 1.0, 0.0, 2.0, 1.0]);
    }

    #[test]
    fn build_targets_impulse_and_empty() {
        let ctx = WindowedContext::new(table_2d());
        let grid = AcquisitionGrid::new(1.5, 10).unwrap();
        let cfg = TargetConfig::default();
        let empty = build_targets(&Transcript::default(), &ctx, &grid, &cfg).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));

        let one = Transcript::from_points(&[0], &[1.5]).unwrap();
        let y = build_targets(&one, &ctx, &grid, &cfg).unwrap();
        for k in 0..10 {
            let nonzero = y.data()[2 * k] != 0.0;
            let t = grid.time(k);
            assert_eq!(nonzero, (3.0..=9.0).contains(&t), "t = {t}");
        }
        let again = build_targets(&one, &ctx, &grid, &cfg).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn counts_per_acquisition_uses_midpoints() {
        let t = Transcript::from_points(&[0, 1, 2, 0], &[0.1, 1.4, 1.6, 4.6]).unwrap();
        let grid = AcquisitionGrid::new(1.5, 4).unwrap();
        assert_eq!(t.counts_per_acquisition(&grid), vec![2, 1, 0, 1]);
    }

    proptest! {
        #[test]
        fn delayed_sum_is_linear(
            a in proptest::collection::vec(-5.0f64..5.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 12),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let ta = Tensor::from_vec(&[6, 2], a.clone()).unwrap();
            let tb = Tensor::from_vec(&[6, 2], b.clone()).unwrap();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
            let lhs = delayed_sum(&Tensor::from_vec(&[6, 2], mix).unwrap(), &DELAY_WEIGHTS).unwrap();
            let ya = delayed_sum(&ta, &DELAY_WEIGHTS).unwrap();
            let yb = delayed_sum(&tb, &DELAY_WEIGHTS).unwrap();
            for i in 0..12 {
                let rhs = alpha * ya.data()[i] + beta * yb.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-9);
            }
        }

        #[test]
        fn interior_resampled_norms_bounded(
            chars in proptest::collection::vec(0u32..3, 12..40),
            gaps in proptest::collection::vec(0.2f64..0.6, 40),
        ) {
            // Context features are convex combinations of unit-or-smaller rows.
            // Negative Lanczos side lobes let a renormalized row overshoot that
            // hull; inside densely sampled speech the overshoot stays small.
            // Near the ends of the sample span it is unbounded.
            let ctx = WindowedContext::new(table_2d());
            let mut t = 0.0;
            let times: Vec<f64> = gaps.iter().take(chars.len()).map(|g| { t += g; t }).collect();
            let feats = ctx.sequence_features(&chars).unwrap();
            let grid = AcquisitionGrid::new(1.5, 16).unwrap();
            let f = lanczos_resample(&times, &feats, 2, &grid, 3).unwrap();
            let (first, last) = (times[0], times[times.len() - 1]);
            for (k, row) in f.data().chunks(2).enumerate() {
                let tk = grid.time(k);
                if tk < first + 4.5 || tk > last - 4.5 {
                    continue;
                }
                let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
                prop_assert!(norm <= 1.25, "row {} norm {}", k, norm);
            }
        }

        #[test]
        fn target_norms_bounded_on_grid_samples(
            chars in proptest::collection::vec(0u32..3, 1..12),
        ) {
            // Samples on grid points see a single unit weight per row.
            let ctx = WindowedContext::new(table_2d());
            let times: Vec<f64> = (0..chars.len()).map(|i| 1.5 * i as f64).collect();
            let grid = AcquisitionGrid::new(1.5, 16).unwrap();
            let tr = Transcript::from_points(&chars, &times).unwrap();
            let y = build_targets(&tr, &ctx, &grid, &TargetConfig::default()).unwrap();
            for row in y.data().chunks(2) {
                let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
                prop_assert!(norm <= 2.6 + 1e-12, "norm {}", norm);
            }
        }
    }
}
