//! Rate-paced beam search over character continuations, scored by cosine
//! similarity between candidate semantic targets and encoder means, and the
//! brain-blind null generator that shares the same search.

use std::collections::HashSet;

use rand::Rng;
use rayon::prelude::*;

use crate::encoder::{encode_means, EncoderParams};
use crate::error::{Error, Result};
use crate::features::{
    lanczos_resample_range, targets_from_points, AcquisitionGrid, FeatureProvider, TargetConfig,
    Transcript,
};
use crate::lm::{nucleus_filter, sample_from, AllowedSet, LanguageModel, NucleusConfig};
use crate::rate::{place_onsets, predict_counts, RateModel};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::volume::VolumeSeries;

/// Longest scoring horizon past the acquisition being decoded.
pub const MAX_LOOKAHEAD: usize = 2;

/// Hard cap on continuations enumerated per candidate in exhaustive mode.
const MAX_EXHAUSTIVE: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Expansion {
    /// `m` continuations drawn by sequential nucleus sampling.
    #[default]
    Sampled,
    /// Every continuation over the allowed set; for oracle checks.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub nucleus: NucleusConfig,
    pub expansions: usize,
    pub seed: u64,
    pub lookahead: usize,
    pub expansion: Expansion,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 200,
            nucleus: NucleusConfig::default(),
            expansions: 8,
            seed: 0,
            lookahead: 1,
            expansion: Expansion::Sampled,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.expansions == 0 {
            return Err(Error::config("beam size and expansions must be at least 1"));
        }
        if self.lookahead > MAX_LOOKAHEAD {
            return Err(Error::config(format!(
                "lookahead {} exceeds {MAX_LOOKAHEAD}",
                self.lookahead
            )));
        }
        Ok(())
    }
}

/// Running sum of per-row cosines over rows that no later character can change.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreCache {
    pub rows: usize,
    pub sum: f64,
    pub count: usize,
}

/// Scores a candidate after the characters of acquisition `step` were appended.
pub trait CandidateScorer: Sync {
    fn score(
        &self,
        chars: &[u32],
        cache: &ScoreCache,
        step: usize,
        key: [u64; 2],
    ) -> Result<(f64, ScoreCache)>;
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

fn check_scoring_inputs(
    chars: &[u32],
    onsets: &[f64],
    z: &Tensor,
    provider: &dyn FeatureProvider,
    grid: &AcquisitionGrid,
) -> Result<()> {
    z.expect_rank(2, "encoder means")?;
    if z.dims()[1] != provider.dim() {
        return Err(Error::shape(format!(
            "encoder means have dim {} but features have dim {}",
            z.dims()[1],
            provider.dim()
        )));
    }
    if z.dims()[0] != grid.count {
        return Err(Error::shape(format!(
            "{} encoder rows for a grid of {}",
            z.dims()[0],
            grid.count
        )));
    }
    if onsets.len() < chars.len() {
        return Err(Error::shape(format!(
            "{} onsets for {} characters",
            onsets.len(),
            chars.len()
        )));
    }
    Ok(())
}

/// Mean cosine between encoder means and the candidate's targets over rows
/// `1..=upto`, skipping rows where the candidate target is all zero.
pub fn score_candidate(
    chars: &[u32],
    onsets: &[f64],
    z: &Tensor,
    upto: usize,
    provider: &dyn FeatureProvider,
    grid: &AcquisitionGrid,
    targets: &TargetConfig,
) -> Result<f64> {
    check_scoring_inputs(chars, onsets, z, provider, grid)?;
    if upto >= grid.count {
        return Err(Error::shape(format!(
            "row {upto} outside grid of {}",
            grid.count
        )));
    }
    let y = targets_from_points(
        chars,
        &onsets[..chars.len()],
        provider,
        grid,
        targets,
        upto + 1,
    )?;
    let d = provider.dim();
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 1..=upto {
        let yr = &y.data()[r * d..(r + 1) * d];
        if yr.iter().all(|&v| v == 0.0) {
            continue;
        }
        sum += cosine(&z.data()[r * d..(r + 1) * d], yr);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Cosine scorer against encoder means, evaluated incrementally: rows that
/// no future character can reach are cached per candidate.
pub struct BrainScorer<'a> {
    z: &'a Tensor,
    onsets: &'a [f64],
    grid: AcquisitionGrid,
    provider: &'a dyn FeatureProvider,
    targets: &'a TargetConfig,
    lookahead: usize,
}

impl<'a> BrainScorer<'a> {
    pub fn new(
        z: &'a Tensor,
        onsets: &'a [f64],
        grid: AcquisitionGrid,
        provider: &'a dyn FeatureProvider,
        targets: &'a TargetConfig,
        lookahead: usize,
    ) -> Result<Self> {
        check_scoring_inputs(&[], onsets, z, provider, &grid)?;
        Ok(Self {
            z,
            onsets,
            grid,
            provider,
            targets,
            lookahead,
        })
    }

    /// Per-row cosines for target rows `lo..=hi`, `None` for skipped rows.
    fn row_cosines(&self, chars: &[u32], lo: usize, hi: usize) -> Result<Vec<Option<f64>>> {
        let d = self.provider.dim();
        let lags = self.targets.delay_weights.len();
        let lobes = self.targets.lobes as f64;
        let (r0, r1) = (lo.saturating_sub(lags), hi);
        let times = &self.onsets[..chars.len()];
        let support = lobes * self.grid.tr;
        let first = times.partition_point(|&t| t <= self.grid.time(r0) - support);
        let last = times.partition_point(|&t| t < self.grid.time(r1.max(1) - 1) + support);
        let last = last.max(first);
        let feats = (first..last)
            .map(|i| self.provider.context_feature(chars, i))
            .collect::<Result<Vec<_>>>()?;
        let res = lanczos_resample_range(
            &times[first..last],
            &feats,
            d,
            &self.grid,
            self.targets.lobes,
            r0,
            r1,
        )?;
        let mut row = vec![0.0; d];
        let mut out = Vec::with_capacity(hi + 1 - lo);
        for r in lo..=hi {
            row.iter_mut().for_each(|v| *v = 0.0);
            for (k, &w) in self.targets.delay_weights.iter().enumerate() {
                let Some(s) = r.checked_sub(k + 1) else { break };
                let src = &res[(s - r0) * d..(s - r0 + 1) * d];
                for (o, v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
            out.push(if row.iter().all(|&v| v == 0.0) {
                None
            } else {
                Some(cosine(&self.z.data()[r * d..(r + 1) * d], &row))
            });
        }
        Ok(out)
    }
}

impl CandidateScorer for BrainScorer<'_> {
    fn score(
        &self,
        chars: &[u32],
        cache: &ScoreCache,
        step: usize,
        _key: [u64; 2],
    ) -> Result<(f64, ScoreCache)> {
        let upto = (step + self.lookahead).min(self.grid.count - 1);
        // Characters appended later sit at or after the next acquisition, so
        // resampled rows within `lobes` of it, and targets one row later, are settled.
        let settled = (step + 2).saturating_sub(self.targets.lobes).min(upto);
        let mut next = *cache;
        let (mut sum, mut count) = (cache.sum, cache.count);
        let lo = cache.rows + 1;
        if lo <= upto {
            for (i, c) in self.row_cosines(chars, lo, upto)?.into_iter().enumerate() {
                if let Some(c) = c {
                    sum += c;
                    count += 1;
                }
                if lo + i <= settled {
                    next = ScoreCache {
                        rows: lo + i,
                        sum,
                        count,
                    };
                }
            }
        }
        let score = if count == 0 { 0.0 } else { sum / count as f64 };
        Ok((score, next))
    }
}

/// Uniform random scores: the brain-blind null.
pub struct RandomScorer {
    pub seed: u64,
}

impl CandidateScorer for RandomScorer {
    fn score(
        &self,
        _chars: &[u32],
        cache: &ScoreCache,
        step: usize,
        key: [u64; 2],
    ) -> Result<(f64, ScoreCache)> {
        let mut rng = stream(self.seed, &[step as u64, key[0], key[1]]);
        Ok((rng.random::<f64>(), *cache))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamCandidate {
    pub chars: Vec<u32>,
    pub score: f64,
    pub cache: ScoreCache,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub count: usize,
    pub best_score: f64,
    pub beam_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    /// Final beam, best first.
    pub beam: Vec<BeamCandidate>,
    pub steps: Vec<StepTrace>,
}

impl BeamOutcome {
    pub fn best(&self) -> &BeamCandidate {
        &self.beam[0]
    }
}

fn continuations(
    parent: &[u32],
    n: usize,
    lm: &dyn LanguageModel,
    allowed: &AllowedSet,
    cfg: &DecodeConfig,
    step: usize,
    rank: usize,
) -> Result<Vec<Vec<u32>>> {
    if n == 0 {
        return Ok(vec![Vec::new()]);
    }
    match cfg.expansion {
        Expansion::Exhaustive => {
            let ids = allowed.ids();
            let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(ids.len()));
            match total {
                Some(t) if t <= MAX_EXHAUSTIVE => {}
                _ => {
                    return Err(Error::config(format!(
                        "exhaustive expansion of {} characters over {} ids is too large",
                        n,
                        ids.len()
                    )))
                }
            }
            let mut out = vec![Vec::with_capacity(n)];
            for _ in 0..n {
                out = out
                    .into_iter()
                    .flat_map(|p| {
                        ids.iter().map(move |&c| {
                            let mut q = p.clone();
                            q.push(c);
                            q
                        })
                    })
                    .collect();
            }
            Ok(out)
        }
        Expansion::Sampled => {
            let mut rng = stream(cfg.seed, &[step as u64, rank as u64]);
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            let mut ctx = parent.to_vec();
            for _ in 0..cfg.expansions {
                ctx.truncate(parent.len());
                for _ in 0..n {
                    let dist = nucleus_filter(&lm.next_dist(&ctx), cfg.nucleus, allowed)?;
                    ctx.push(sample_from(&dist, &mut rng));
                }
                let cont = ctx[parent.len()..].to_vec();
                if seen.insert(cont.clone()) {
                    out.push(cont);
                }
            }
            Ok(out)
        }
    }
}

/// Beam search paced by `counts`: at acquisition `t` every candidate is
/// extended by exactly `counts[t]` characters, all children are rescored,
/// and the best `cfg.beam` distinct sequences survive (ties by ascending ids).
pub fn beam_search(
    counts: &[usize],
    lm: &dyn LanguageModel,
    allowed: &AllowedSet,
    scorer: &dyn CandidateScorer,
    cfg: &DecodeConfig,
) -> Result<BeamOutcome> {
    cfg.validate()?;
    let mut beam = vec![BeamCandidate {
        chars: Vec::new(),
        score: 0.0,
        cache: ScoreCache::default(),
    }];
    let mut steps = Vec::with_capacity(counts.len());
    for (t, &n) in counts.iter().enumerate() {
        let expanded = beam
            .par_iter()
            .enumerate()
            .map(|(rank, parent)| {
                let conts = continuations(&parent.chars, n, lm, allowed, cfg, t, rank)?;
                conts
                    .into_iter()
                    .enumerate()
                    .map(|(j, cont)| {
                        let mut chars = parent.chars.clone();
                        chars.extend(cont);
                        let (score, cache) =
                            scorer.score(&chars, &parent.cache, t, [rank as u64, j as u64])?;
                        if !score.is_finite() {
                            return Err(Error::Numeric(format!(
                                "non-finite candidate score at acquisition {t}"
                            )));
                        }
                        Ok(BeamCandidate {
                            chars,
                            score,
                            cache,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next: Vec<BeamCandidate> = expanded.into_iter().flatten().collect();
        next.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.chars.cmp(&b.chars))
        });
        next.dedup_by(|a, b| a.chars == b.chars);
        next.truncate(cfg.beam);
        steps.push(StepTrace {
            step: t,
            count: n,
            best_score: next[0].score,
            beam_size: next.len(),
        });
        beam = next;
    }
    Ok(BeamOutcome { beam, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub chars: Vec<u32>,
    pub onsets: Vec<f64>,
    pub score: f64,
    pub counts: Vec<usize>,
    pub steps: Vec<StepTrace>,
    pub warnings: Vec<String>,
}

impl DecodeOutput {
    /// Decoded characters as zero-length intervals at their placed onsets.
    pub fn transcript(&self) -> Result<Transcript> {
        Transcript::from_points(&self.chars, &self.onsets)
    }
}

/// Decode from encoder means and per-acquisition character counts.
#[allow(clippy::too_many_arguments)]
pub fn decode_counts(
    z: &Tensor,
    counts: &[usize],
    grid: &AcquisitionGrid,
    lm: &dyn LanguageModel,
    allowed: &AllowedSet,
    provider: &dyn FeatureProvider,
    targets: &TargetConfig,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    cfg.validate()?;
    let onsets = place_onsets(counts, grid)?;
    let mut warnings = Vec::new();
    if onsets.is_empty() {
        warnings.push("rate model predicts no characters; output is empty".to_string());
        return Ok(DecodeOutput {
            chars: Vec::new(),
            onsets,
            score: 0.0,
            counts: counts.to_vec(),
            steps: Vec::new(),
            warnings,
        });
    }
    let scorer = BrainScorer::new(z, &onsets, *grid, provider, targets, cfg.lookahead)?;
    let outcome = beam_search(counts, lm, allowed, &scorer, cfg)?;
    let best = outcome.best().clone();
    Ok(DecodeOutput {
        chars: best.chars,
        onsets,
        score: best.score,
        counts: counts.to_vec(),
        steps: outcome.steps,
        warnings,
    })
}

/// Encode every volume, predict counts with the rate model, and decode.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    volumes: &VolumeSeries,
    encoder: &EncoderParams,
    lm: &dyn LanguageModel,
    rate: &RateModel,
    allowed: &AllowedSet,
    provider: &dyn FeatureProvider,
    targets: &TargetConfig,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput> {
    let z = encode_means(&volumes.volumes(), encoder)?;
    let counts = predict_counts(volumes, rate)?;
    decode_counts(
        &z,
        &counts,
        &volumes.grid()?,
        lm,
        allowed,
        provider,
        targets,
        cfg,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct NullConfig {
    pub count: usize,
    pub beam: usize,
    pub nucleus: NucleusConfig,
    pub expansions: usize,
    pub seed: u64,
}

impl Default for NullConfig {
    fn default() -> Self {
        Self {
            count: 200,
            beam: 10,
            nucleus: NucleusConfig::default(),
            expansions: 8,
            seed: 0,
        }
    }
}

/// Null sequences from the same paced beam with uniform random scores; the
/// brain data enters only through `counts`.
pub fn generate_nulls(
    lm: &dyn LanguageModel,
    allowed: &AllowedSet,
    counts: &[usize],
    cfg: &NullConfig,
) -> Result<Vec<Vec<u32>>> {
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let dc = DecodeConfig {
                beam: cfg.beam,
                nucleus: cfg.nucleus,
                expansions: cfg.expansions,
                seed: derive_seed(cfg.seed, &[i as u64, 0]),
                lookahead: 0,
                expansion: Expansion::Sampled,
            };
            let scorer = RandomScorer {
                seed: derive_seed(cfg.seed, &[i as u64, 1]),
            };
            let out = beam_search(counts, lm, allowed, &scorer, &dc)?;
            Ok(out
                .beam
                .into_iter()
                .next()
                .map(|c| c.chars)
                .unwrap_or_default())
        })
        .collect()
}
