//! Character n-gram language model with interpolated absolute discounting,
//! plus the nucleus (rho, eta) proposal filter used by the decoder.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{CharFilter, Vocab};

/// Next-character distribution provider.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Probability of every vocabulary id after `context`.
    fn next_dist(&self, context: &[u32]) -> Vec<f64>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextStats {
    pub total: u64,
    pub next: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab_size: usize,
    discount: f64,
    max_context: usize,
    /// `tables[l]` maps length-`l` contexts to follower counts.
    tables: Vec<HashMap<Vec<u32>, ContextStats>>,
}

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_DISCOUNT: f64 = 0.75;
pub const MAX_CONTEXT: usize = 50;

impl NgramModel {
    pub fn empty(order: usize, vocab_size: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::config("n-gram order must be >= 1"));
        }
        if vocab_size == 0 {
            return Err(Error::config("vocabulary is empty"));
        }
        Ok(Self {
            order,
            vocab_size,
            discount: DEFAULT_DISCOUNT,
            max_context: MAX_CONTEXT,
            tables: vec![HashMap::new(); order],
        })
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::config(format!(
                "discount must be in (0, 1], got {discount}"
            )));
        }
        self.discount = discount;
        Ok(self)
    }

    pub(crate) fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    pub fn tables(&self) -> &[HashMap<Vec<u32>, ContextStats>] {
        &self.tables
    }

    /// Training count of each character (the unigram table).
    pub fn char_counts(&self) -> Vec<u64> {
        let mut out = vec![0; self.vocab_size];
        if let Some(root) = self.tables[0].get(&Vec::new()) {
            for (&c, &n) in &root.next {
                out[c as usize] = n;
            }
        }
        out
    }

    pub fn add_sequence(&mut self, seq: &[u32]) -> Result<()> {
        if let Some(&bad) = seq.iter().find(|&&c| c as usize >= self.vocab_size) {
            return Err(Error::Lookup(bad));
        }
        for i in 0..seq.len() {
            for len in 0..self.order.min(i + 1) {
                let ctx = seq[i - len..i].to_vec();
                self.add_count(len, ctx, seq[i], 1);
            }
        }
        Ok(())
    }

    pub(crate) fn add_count(&mut self, len: usize, ctx: Vec<u32>, next: u32, n: u64) {
        let stats = self.tables[len].entry(ctx).or_default();
        stats.total += n;
        *stats.next.entry(next).or_insert(0) += n;
    }

    /// Add another model's counts into this one.
    pub fn merge(&mut self, other: &NgramModel) -> Result<()> {
        if other.order != self.order || other.vocab_size != self.vocab_size {
            return Err(Error::config("merging n-gram models of different shape"));
        }
        for (len, table) in other.tables.iter().enumerate() {
            for (ctx, stats) in table {
                for (&c, &n) in &stats.next {
                    self.add_count(len, ctx.clone(), c, n);
                }
            }
        }
        Ok(())
    }

    /// Usable context: the last `min(order - 1, 50)` ids, cut after the last
    /// id outside the vocabulary.
    fn effective_context<'a>(&self, context: &'a [u32]) -> &'a [u32] {
        let keep = (self.order - 1).min(self.max_context);
        let ctx = &context[context.len().saturating_sub(keep)..];
        match ctx.iter().rposition(|&c| c as usize >= self.vocab_size) {
            Some(p) => &ctx[p + 1..],
            None => ctx,
        }
    }

    pub fn log_prob(&self, context: &[u32], c: u32) -> f64 {
        self.next_dist(context)
            .get(c as usize)
            .copied()
            .unwrap_or(0.0)
            .ln()
    }

    /// Per-character perplexity over `docs`, each scored from an empty history.
    pub fn perplexity(&self, docs: &[Vec<u32>]) -> f64 {
        let mut nll = 0.0;
        let mut n = 0usize;
        for doc in docs {
            for i in 0..doc.len() {
                nll -= self.log_prob(&doc[..i], doc[i]);
                n += 1;
            }
        }
        if n == 0 {
            return 1.0;
        }
        (nll / n as f64).exp()
    }
}

impl LanguageModel for NgramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[u32]) -> Vec<f64> {
        let ctx = self.effective_context(context);
        let v = self.vocab_size;
        let mut probs = vec![1.0 / v as f64; v];
        for len in 0..=ctx.len() {
            let key = &ctx[ctx.len() - len..];
            let Some(stats) = self.tables[len].get(key) else {
                break;
            };
            let total = stats.total as f64;
            let backoff = self.discount * stats.next.len() as f64 / total;
            for p in probs.iter_mut() {
                *p *= backoff;
            }
            for (&c, &n) in &stats.next {
                probs[c as usize] += (n as f64 - self.discount).max(0.0) / total;
            }
        }
        probs
    }
}

/// Train on documents of character ids; n-grams never cross document boundaries.
pub fn train_ngram(docs: &[Vec<u32>], order: usize, vocab_size: usize) -> Result<NgramModel> {
    if docs.iter().all(|d| d.is_empty()) {
        return Err(Error::InsufficientData("empty training corpus".into()));
    }
    let mut model = NgramModel::empty(order, vocab_size)?;
    for d in docs {
        model.add_sequence(d)?;
    }
    Ok(model)
}

/// Train on raw text documents, dropping characters rejected by `filter`.
pub fn train_ngram_text(
    texts: &[&str],
    vocab: &Vocab,
    filter: &CharFilter,
    order: usize,
) -> Result<NgramModel> {
    let docs = texts
        .iter()
        .map(|t| vocab.encode(t, filter))
        .collect::<Result<Vec<_>>>()?;
    train_ngram(&docs, order, vocab.len())
}

/// Characters the decoder may propose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowedSet {
    allowed: Vec<bool>,
}

impl AllowedSet {
    pub fn all(vocab_size: usize) -> Self {
        Self {
            allowed: vec![true; vocab_size],
        }
    }

    pub fn from_mask(allowed: Vec<bool>) -> Self {
        Self { allowed }
    }

    /// Characters seen at least `min_count` times in `seqs`.
    pub fn from_sequences<'a>(
        seqs: impl IntoIterator<Item = &'a [u32]>,
        vocab_size: usize,
        min_count: usize,
    ) -> Self {
        let mut counts = vec![0usize; vocab_size];
        for s in seqs {
            for &c in s {
                if let Some(n) = counts.get_mut(c as usize) {
                    *n += 1;
                }
            }
        }
        Self {
            allowed: counts.into_iter().map(|n| n >= min_count).collect(),
        }
    }

    pub fn contains(&self, c: u32) -> bool {
        self.allowed.get(c as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<u32> {
        (0..self.allowed.len() as u32)
            .filter(|&c| self.contains(c))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NucleusConfig {
    pub rho: f64,
    pub eta: f64,
}

impl Default for NucleusConfig {
    fn default() -> Self {
        Self { rho: 0.9, eta: 0.1 }
    }
}

/// Slack for the cumulative-mass comparison against `rho`.
const MASS_TOL: f64 = 1e-12;

/// Smallest descending-probability prefix reaching mass `rho` (ties by
/// ascending id), minus members below `eta * p_max` or outside `allowed`,
/// renormalized. Falls back to the most probable allowed character when
/// nothing survives.
pub fn nucleus_filter(
    probs: &[f64],
    cfg: NucleusConfig,
    allowed: &AllowedSet,
) -> Result<Vec<(u32, f64)>> {
    if !(cfg.rho > 0.0 && cfg.rho <= 1.0) || !(cfg.eta > 0.0 && cfg.eta <= 1.0) {
        return Err(Error::config(format!(
            "nucleus parameters out of range: rho {}, eta {}",
            cfg.rho, cfg.eta
        )));
    }
    if allowed.is_empty() {
        return Err(Error::config("allowed character set is empty"));
    }
    let mut ranked: Vec<(u32, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (i as u32, p))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let p_max = ranked.first().map(|r| r.1).unwrap_or(0.0);

    let mut cum = 0.0;
    let mut cut = ranked.len();
    for (i, &(_, p)) in ranked.iter().enumerate() {
        cum += p;
        if cum >= cfg.rho - MASS_TOL {
            cut = i + 1;
            break;
        }
    }
    let kept: Vec<(u32, f64)> = ranked[..cut]
        .iter()
        .copied()
        .filter(|&(c, p)| p >= cfg.eta * p_max && allowed.contains(c))
        .collect();

    let kept = if kept.is_empty() {
        let best = ranked
            .iter()
            .find(|&&(c, _)| allowed.contains(c))
            .copied()
            .ok_or_else(|| Error::config("no allowed character in distribution"))?;
        vec![(best.0, 1.0)]
    } else {
        kept
    };
    let total: f64 = kept.iter().map(|k| k.1).sum();
    if !(total > 0.0) {
        // All surviving mass is zero: spread uniformly.
        let n = kept.len() as f64;
        return Ok(kept.into_iter().map(|(c, _)| (c, 1.0 / n)).collect());
    }
    Ok(kept.into_iter().map(|(c, p)| (c, p / total)).collect())
}

/// Draw from a filtered distribution.
pub fn sample_from<R: Rng + ?Sized>(dist: &[(u32, f64)], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(c, p) in dist {
        cum += p;
        if u < cum {
            return c;
        }
    }
    dist.last().map(|d| d.0).expect("non-empty distribution")
}
