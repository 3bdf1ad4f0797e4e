//! Language-similarity metrics over character-id sequences, sliding-window
//! scoring of time-stamped transcripts, and the null-distribution p-value.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{FeatureProvider, Transcript};

fn counts(seq: &[u32]) -> HashMap<u32, usize> {
    let mut m = HashMap::new();
    for &c in seq {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}

/// Clipped unigram precision times the brevity penalty.
pub fn bleu1(candidate: &[u32], reference: &[u32]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let rc = counts(reference);
    let clipped: usize = counts(candidate)
        .iter()
        .map(|(c, &n)| n.min(rc.get(c).copied().unwrap_or(0)))
        .sum();
    let precision = clipped as f64 / candidate.len() as f64;
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64)
        .min(0.0)
        .exp();
    precision * bp
}

/// Exact-match alignment built by repeatedly taking the longest common run
/// of still-unmatched positions (earliest candidate, then reference, position
/// on ties). Every matchable unigram ends up matched. Returns
/// `(candidate, reference)` index pairs sorted by candidate position.
pub fn align(candidate: &[u32], reference: &[u32]) -> Vec<(usize, usize)> {
    let (n, m) = (candidate.len(), reference.len());
    let mut cu = vec![false; n];
    let mut ru = vec![false; m];
    let mut pairs = Vec::new();
    // Run length of free matching positions ending at (i, j).
    let mut run = vec![0usize; (n + 1) * (m + 1)];
    loop {
        let mut best = (0, 0, 0);
        for i in 1..=n {
            for j in 1..=m {
                let v = if !cu[i - 1] && !ru[j - 1] && candidate[i - 1] == reference[j - 1] {
                    run[(i - 1) * (m + 1) + j - 1] + 1
                } else {
                    0
                };
                run[i * (m + 1) + j] = v;
                if v > 0 {
                    let (si, sj) = (i - v, j - v);
                    if v > best.0 || (v == best.0 && (si, sj) < (best.1, best.2)) {
                        best = (v, si, sj);
                    }
                }
            }
        }
        let (len, si, sj) = best;
        if len == 0 {
            break;
        }
        for k in 0..len {
            cu[si + k] = true;
            ru[sj + k] = true;
            pairs.push((si + k, sj + k));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Number of maximal runs adjacent in both sequences.
pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// `F = 10PR / (R + 9P)` times the fragmentation penalty `1 - 0.5 (chunks / matches)^3`.
pub fn meteor(candidate: &[u32], reference: &[u32]) -> f64 {
    let pairs = align(candidate, reference);
    if pairs.is_empty() {
        return 0.0;
    }
    let m = pairs.len() as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks(&pairs) as f64 / m;
    f * (1.0 - 0.5 * frag.powi(3))
}

/// Smoothed inverse document frequency per character.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    docs: usize,
    df: HashMap<u32, usize>,
}

impl IdfTable {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut df = HashMap::new();
        let mut n = 0;
        for d in docs {
            n += 1;
            let mut seen: Vec<u32> = d.to_vec();
            seen.sort_unstable();
            seen.dedup();
            for c in seen {
                *df.entry(c).or_insert(0) += 1;
            }
        }
        Self { docs: n, df }
    }

    /// Weights every character 1.
    pub fn uniform() -> Self {
        Self {
            docs: 0,
            df: HashMap::new(),
        }
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn df(&self, c: u32) -> usize {
        self.df.get(&c).copied().unwrap_or(0)
    }

    /// `ln((N + 1) / (df + 1))`; with no documents every weight is 1.
    pub fn idf(&self, c: u32) -> f64 {
        if self.docs == 0 {
            return 1.0;
        }
        ((self.docs as f64 + 1.0) / (self.df(c) as f64 + 1.0)).ln()
    }

    /// Weights for `seq`, falling back to uniform when they all vanish.
    fn weights(&self, seq: &[u32]) -> Vec<f64> {
        let w: Vec<f64> = seq.iter().map(|&c| self.idf(c)).collect();
        if w.iter().sum::<f64>() > 0.0 {
            w
        } else {
            vec![1.0; seq.len()]
        }
    }
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
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

fn features(seq: &[u32], provider: &dyn FeatureProvider) -> Result<Vec<Vec<f64>>> {
    (0..seq.len())
        .map(|i| match provider.context_feature(seq, i) {
            Err(Error::Lookup(_)) => Ok(vec![0.0; provider.dim()]),
            other => other,
        })
        .collect()
}

/// IDF-weighted mean over reference positions of the best cosine against any
/// candidate position.
pub fn embed_recall(
    candidate: &[u32],
    reference: &[u32],
    provider: &dyn FeatureProvider,
    idf: &IdfTable,
) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InsufficientData(
            "embed_recall: empty reference".into(),
        ));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let fc = features(candidate, provider)?;
    let fr = features(reference, provider)?;
    let w = idf.weights(reference);
    let (mut num, mut den) = (0.0, 0.0);
    for (e, &wi) in fr.iter().zip(&w) {
        let best = fc
            .iter()
            .map(|c| cosine(e, c))
            .fold(f64::NEG_INFINITY, f64::max);
        num += wi * best;
        den += wi;
    }
    Ok(num / den)
}

fn sequence_embedding(
    seq: &[u32],
    provider: &dyn FeatureProvider,
    idf: &IdfTable,
) -> Result<Vec<f64>> {
    let w = idf.weights(seq);
    let total: f64 = w.iter().sum();
    let mut out = vec![0.0; provider.dim()];
    for (f, wi) in features(seq, provider)?.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(f) {
            *o += wi * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// Cosine between IDF-weighted mean embeddings of the two sequences.
pub fn seq_cosine(
    candidate: &[u32],
    reference: &[u32],
    provider: &dyn FeatureProvider,
    idf: &IdfTable,
) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::InsufficientData("seq_cosine: empty sequence".into()));
    }
    Ok(cosine(
        &sequence_embedding(candidate, provider, idf)?,
        &sequence_embedding(reference, provider, idf)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Bleu1,
    Meteor,
    EmbedRecall,
    SeqCosine,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Bleu1,
        Metric::Meteor,
        Metric::EmbedRecall,
        Metric::SeqCosine,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Bleu1 => "bleu1",
            Metric::Meteor => "meteor",
            Metric::EmbedRecall => "embed-recall",
            Metric::SeqCosine => "seq-cosine",
        }
    }

    pub fn needs_embeddings(&self) -> bool {
        matches!(self, Metric::EmbedRecall | Metric::SeqCosine)
    }

    /// Score two non-empty sequences.
    pub fn score(
        &self,
        candidate: &[u32],
        reference: &[u32],
        embed: Option<(&dyn FeatureProvider, &IdfTable)>,
    ) -> Result<f64> {
        let need = || {
            embed.ok_or_else(|| {
                Error::config(format!("metric {} needs an embedding table", self.name()))
            })
        };
        match self {
            Metric::Bleu1 => Ok(bleu1(candidate, reference)),
            Metric::Meteor => Ok(meteor(candidate, reference)),
            Metric::EmbedRecall => {
                let (p, idf) = need()?;
                embed_recall(candidate, reference, p, idf)
            }
            Metric::SeqCosine => {
                let (p, idf) = need()?;
                seq_cosine(candidate, reference, p, idf)
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown metric {s:?} (expected bleu1, meteor, embed-recall or seq-cosine)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub width: f64,
    pub stride: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            width: 20.0,
            stride: 1.0,
        }
    }
}

impl WindowSpec {
    pub fn new(width: f64, stride: f64) -> Result<Self> {
        if !(width > 0.0 && stride > 0.0 && width.is_finite() && stride.is_finite()) {
            return Err(Error::config(format!(
                "window width and stride must be positive, got {width} and {stride}"
            )));
        }
        Ok(Self { width, stride })
    }

    /// Centers `k * stride` for every `k` with `k * stride < duration`.
    pub fn centers(&self, duration: f64) -> Vec<f64> {
        (0..)
            .map(|k| k as f64 * self.stride)
            .take_while(|&c| c < duration)
            .collect()
    }
}

fn window_chars(t: &Transcript, lo: f64, hi: f64) -> Vec<u32> {
    t.entries()
        .iter()
        .filter(|e| {
            let m = e.midpoint();
            m >= lo && m < hi
        })
        .map(|e| e.char_id)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedScore {
    pub mean: f64,
    /// `(center, score)`; `None` where both windows were empty.
    pub windows: Vec<(f64, Option<f64>)>,
}

/// Average the metric over sliding windows of characters grouped by midpoint.
pub fn windowed_score(
    candidate: &Transcript,
    reference: &Transcript,
    metric: Metric,
    embed: Option<(&dyn FeatureProvider, &IdfTable)>,
    spec: &WindowSpec,
    duration: f64,
) -> Result<WindowedScore> {
    let half = spec.width / 2.0;
    let windows = spec
        .centers(duration)
        .into_par_iter()
        .map(|c| {
            let a = window_chars(candidate, c - half, c + half);
            let b = window_chars(reference, c - half, c + half);
            let s = match (a.is_empty(), b.is_empty()) {
                (true, true) => None,
                (true, false) | (false, true) => Some(0.0),
                (false, false) => Some(metric.score(&a, &b, embed)?),
            };
            Ok((c, s))
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = windows.iter().filter_map(|w| w.1).collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(WindowedScore { mean, windows })
}

/// Windowed mean for several candidate sequences sharing the same onsets.
pub fn windowed_means(
    candidates: &[Vec<u32>],
    onsets: &[f64],
    reference: &Transcript,
    metric: Metric,
    embed: Option<(&dyn FeatureProvider, &IdfTable)>,
    spec: &WindowSpec,
    duration: f64,
) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|c| {
            let t = Transcript::from_points(c, &onsets[..c.len().min(onsets.len())])?;
            Ok(windowed_score(&t, reference, metric, embed, spec, duration)?.mean)
        })
        .collect()
}

/// Fraction of null scores greater than or equal to the observed score.
pub fn p_value(observed: f64, nulls: &[f64]) -> Result<f64> {
    if nulls.is_empty() {
        return Err(Error::InsufficientData("p_value: no null scores".into()));
    }
    Ok(nulls.iter().filter(|&&n| n >= observed).count() as f64 / nulls.len() as f64)
}
