//! Synthetic subjects: a topic-structured character language with clustered
//! embeddings, paced speech timing, a labelled atlas, and a linear forward
//! model from semantic targets to noisy volumes.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attribution::AtlasVolume;
use crate::error::{Error, Result};
use crate::features::{
    build_targets, AcquisitionGrid, EmbeddingTable, FeatureProvider, TargetConfig, Transcript,
    TranscriptEntry, WindowedContext, DELAY_WEIGHTS,
};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::vocab::Vocab;
use crate::volume::VolumeSeries;

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub vocab: usize,
    pub topics: usize,
    pub dim: usize,
    /// Probability of staying in the current topic at each character.
    pub stay: f64,
    /// Spread of character embeddings around their topic centroid.
    pub spread: f64,
    /// Concentration of within-topic transitions; smaller is more predictable.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        Self {
            vocab: 50,
            topics: 5,
            dim: 16,
            stay: 0.97,
            spread: 0.35,
            concentration: 0.3,
            seed: 0,
        }
    }
}

/// A sticky topic process emitting characters from per-topic Markov chains.
#[derive(Debug, Clone)]
pub struct Language {
    pub table: Arc<EmbeddingTable>,
    pub topic_of: Vec<usize>,
    members: Vec<Vec<u32>>,
    /// Per character, a distribution over the members of its topic.
    transitions: Vec<Vec<f64>>,
    stay: f64,
}

fn dirichlet(rng: &mut ChaCha8Rng, n: usize, alpha: f64) -> Vec<f64> {
    let g = rand_distr::Gamma::new(alpha, 1.0).expect("positive shape");
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample(g).max(1e-12)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn draw(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut c = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        c += pi;
        if u < c {
            return i;
        }
    }
    p.len() - 1
}

impl Language {
    pub fn new(spec: &LanguageSpec) -> Result<Self> {
        if spec.topics == 0 || spec.vocab < spec.topics || spec.dim == 0 {
            return Err(Error::config(format!(
                "language needs 1 <= topics <= vocab and dim > 0, got {} topics, {} chars, dim {}",
                spec.topics, spec.vocab, spec.dim
            )));
        }
        if !(0.0..=1.0).contains(&spec.stay) || !(spec.concentration > 0.0) {
            return Err(Error::config(
                "stay must be in [0, 1], concentration positive",
            ));
        }
        let mut rng = stream(spec.seed, &[0x1a46]);
        let centroids: Vec<Vec<f64>> = (0..spec.topics)
            .map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let topic_of: Vec<usize> = (0..spec.vocab).map(|c| c % spec.topics).collect();
        let mut rows = Vec::with_capacity(spec.vocab * spec.dim);
        for &k in &topic_of {
            for &m in &centroids[k] {
                rows.push(m + spec.spread * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let members: Vec<Vec<u32>> = (0..spec.topics)
            .map(|k| {
                (0..spec.vocab as u32)
                    .filter(|&c| topic_of[c as usize] == k)
                    .collect()
            })
            .collect();
        let transitions = topic_of
            .iter()
            .map(|&k| dirichlet(&mut rng, members[k].len(), spec.concentration))
            .collect();
        Ok(Self {
            table: Arc::new(EmbeddingTable::new(spec.vocab, spec.dim, rows)?),
            topic_of,
            members,
            transitions,
            stay: spec.stay,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.topic_of.len()
    }

    pub fn topics(&self) -> usize {
        self.members.len()
    }

    /// Printable characters for the ids, for vocabulary files.
    pub fn vocab(&self) -> Vocab {
        Vocab::new(synthetic_alphabet(self.vocab_size())).expect("distinct characters")
    }

    pub fn provider(&self) -> WindowedContext {
        WindowedContext::new(self.table.clone())
    }

    /// `len` characters starting in a random topic.
    pub fn generate(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut topic = rng.random_range(0..self.topics());
        let mut c = *self.members[topic].choose(rng).expect("non-empty topic");
        out.push(c);
        while out.len() < len {
            if rng.random::<f64>() >= self.stay {
                topic = rng.random_range(0..self.topics());
                c = *self.members[topic].choose(rng).expect("non-empty topic");
            } else {
                let next = draw(&self.transitions[c as usize], rng);
                c = self.members[self.topic_of[c as usize]][next];
            }
            out.push(c);
        }
        out
    }
}

/// ASCII letters and digits, then CJK ideographs from U+4E00.
pub fn synthetic_alphabet(n: usize) -> Vec<char> {
    const ASCII: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
    ASCII
        .chars()
        .chain((0x4E00u32..).filter_map(char::from_u32))
        .take(n)
        .collect()
}

/// Speech pacing: phrases spoken at a constant rate separated by pauses.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingSpec {
    /// Characters per second, drawn uniformly per phrase.
    pub rate: (f64, f64),
    pub phrase_len: (usize, usize),
    /// Seconds of silence after each phrase.
    pub pause: (f64, f64),
}

impl Default for TimingSpec {
    fn default() -> Self {
        Self {
            rate: (1.0, 4.0),
            phrase_len: (4, 20),
            pause: (0.2, 3.0),
        }
    }
}

/// Consecutive intervals for `chars` starting at `start`; returns the end time.
pub fn time_characters(
    chars: &[u32],
    start: f64,
    timing: &TimingSpec,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<TranscriptEntry>,
) -> f64 {
    let mut t = start;
    let mut i = 0;
    while i < chars.len() {
        let n =
            rng.random_range(timing.phrase_len.0..=timing.phrase_len.1.max(timing.phrase_len.0));
        let rate = rng.random_range(timing.rate.0..=timing.rate.1);
        let dur = 1.0 / rate;
        for &c in &chars[i..(i + n).min(chars.len())] {
            out.push(TranscriptEntry {
                char_id: c,
                onset: t,
                offset: t + dur,
            });
            t += dur;
        }
        i += n;
        t += rng.random_range(timing.pause.0..=timing.pause.1);
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArticleSpan {
    pub start: f64,
    pub end: f64,
}

/// A session of consecutive articles heard by every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus {
    pub transcript: Transcript,
    pub articles: Vec<ArticleSpan>,
    pub texts: Vec<Vec<u32>>,
    pub grid: AcquisitionGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSpec {
    pub articles: usize,
    pub chars_per_article: usize,
    pub timing: TimingSpec,
    pub tr: f64,
    /// Silence at the start and after every article, seconds.
    pub gap: f64,
    pub seed: u64,
}

impl Default for StimulusSpec {
    fn default() -> Self {
        Self {
            articles: 20,
            chars_per_article: 180,
            timing: TimingSpec::default(),
            tr: 1.5,
            gap: 3.0,
            seed: 0,
        }
    }
}

pub fn make_stimulus(language: &Language, spec: &StimulusSpec) -> Result<Stimulus> {
    if spec.articles == 0 || spec.chars_per_article == 0 {
        return Err(Error::config(
            "stimulus needs at least one non-empty article",
        ));
    }
    let mut rng = stream(spec.seed, &[0x57]);
    let mut entries = Vec::new();
    let mut articles = Vec::new();
    let mut texts = Vec::new();
    let mut t = spec.gap;
    for _ in 0..spec.articles {
        let text = language.generate(spec.chars_per_article, &mut rng);
        let start = t;
        t = time_characters(&text, t, &spec.timing, &mut rng, &mut entries);
        articles.push(ArticleSpan { start, end: t });
        texts.push(text);
        t += spec.gap;
    }
    let count = (t / spec.tr).ceil() as usize + DELAY_WEIGHTS.len();
    Ok(Stimulus {
        transcript: Transcript::new(entries)?,
        articles,
        texts,
        grid: AcquisitionGrid::new(spec.tr, count)?,
    })
}

/// Voronoi parcellation of an ellipsoidal brain mask. Labels are numbered by
/// decreasing region size; voxels outside the mask are background.
pub fn make_atlas(extents: [usize; 3], regions: u32, seed: u64) -> Result<AtlasVolume> {
    if regions == 0 {
        return Err(Error::config("atlas needs at least one region"));
    }
    let center = extents.map(|e| (e as f64 - 1.0) / 2.0);
    let radius = extents.map(|e| e as f64 * 0.48);
    let mut inside = Vec::new();
    for x in 0..extents[0] {
        for y in 0..extents[1] {
            for z in 0..extents[2] {
                let p = [x as f64, y as f64, z as f64];
                let r: f64 = (0..3)
                    .map(|i| ((p[i] - center[i]) / radius[i]).powi(2))
                    .sum();
                if r <= 1.0 {
                    inside.push(((x * extents[1] + y) * extents[2] + z, p));
                }
            }
        }
    }
    if inside.len() < regions as usize {
        return Err(Error::config(format!(
            "{} mask voxels cannot hold {regions} regions",
            inside.len()
        )));
    }
    let mut rng = stream(seed, &[0xa71a5]);
    let centers: Vec<[f64; 3]> = inside
        .choose_multiple(&mut rng, regions as usize)
        .map(|v| v.1)
        .collect();
    let mut raw = vec![0u32; inside.len()];
    let mut sizes = vec![0usize; regions as usize];
    for (k, (_, p)) in inside.iter().enumerate() {
        let nearest = (0..centers.len())
            .min_by(|&a, &b| {
                let da: f64 = (0..3).map(|i| (p[i] - centers[a][i]).powi(2)).sum();
                let db: f64 = (0..3).map(|i| (p[i] - centers[b][i]).powi(2)).sum();
                da.total_cmp(&db)
            })
            .expect("at least one center");
        raw[k] = nearest as u32;
        sizes[nearest] += 1;
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut relabel = vec![0u32; sizes.len()];
    for (rank, &r) in order.iter().enumerate() {
        relabel[r] = rank as u32 + 1;
    }
    let mut labels = vec![0u32; extents.iter().product()];
    for (k, (flat, _)) in inside.iter().enumerate() {
        labels[*flat] = relabel[raw[k] as usize];
    }
    AtlasVolume::with_regions(extents, labels, regions)
}

fn gaussian_blur(field: &mut [f64], extents: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let strides = [extents[1] * extents[2], extents[2], 1];
    let mut tmp = vec![0.0; field.len()];
    for axis in 0..3 {
        let n = extents[axis] as isize;
        for (flat, out) in tmp.iter_mut().enumerate() {
            let pos = (flat / strides[axis] % extents[axis]) as isize;
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, &w) in kernel.iter().enumerate() {
                let q = pos + k as isize - radius;
                if q < 0 || q >= n {
                    continue;
                }
                let src = (flat as isize + (q - pos) * strides[axis] as isize) as usize;
                acc += w * field[src];
                wsum += w;
            }
            *out = acc / wsum;
        }
        field.copy_from_slice(&tmp);
    }
}

/// Spatially smooth white noise.
pub fn smooth_field(extents: [usize; 3], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = extents.iter().product();
    let mut f: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    gaussian_blur(&mut f, extents, sigma);
    f
}

fn unit_rms(v: &mut [f64]) {
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
}

/// Anatomy and projections shared by every synthetic subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub atlas: AtlasVolume,
    pub signal_regions: Vec<u32>,
    pub signal_voxels: Vec<usize>,
    /// `signal_voxels.len() x dim`, row-major.
    pub projection: Vec<f64>,
    pub dim: usize,
    pub rate_voxels: Vec<usize>,
    pub rate_pattern: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSpec {
    pub signal_regions: Vec<u32>,
    pub dim: usize,
    /// Gaussian smoothing of the projection fields, in voxels.
    pub smoothness: f64,
    pub rate_region: Option<u32>,
    pub seed: u64,
}

impl Template {
    pub fn new(atlas: AtlasVolume, spec: &TemplateSpec) -> Result<Self> {
        if spec.signal_regions.is_empty() || spec.dim == 0 {
            return Err(Error::config(
                "template needs signal regions and a positive dim",
            ));
        }
        if let Some(&r) = spec
            .signal_regions
            .iter()
            .find(|&&r| r == 0 || r > atlas.regions())
        {
            return Err(Error::config(format!(
                "signal region {r} not in atlas 1..={}",
                atlas.regions()
            )));
        }
        let signal_voxels = atlas.voxels_in(&spec.signal_regions);
        let ext = atlas.extents();
        let mut rng = stream(spec.seed, &[0x9e0]);
        let fields: Vec<Vec<f64>> = (0..spec.dim)
            .map(|_| {
                let f = smooth_field(ext, spec.smoothness, &mut rng);
                let mut v: Vec<f64> = signal_voxels.iter().map(|&i| f[i]).collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter_mut().for_each(|x| *x -= m);
                unit_rms(&mut v);
                v
            })
            .collect();
        let mut projection = Vec::with_capacity(signal_voxels.len() * spec.dim);
        for i in 0..signal_voxels.len() {
            projection.extend(fields.iter().map(|f| f[i]));
        }
        let (rate_voxels, rate_pattern) = match spec.rate_region {
            None => (Vec::new(), Vec::new()),
            Some(r) => {
                if r == 0 || r > atlas.regions() || spec.signal_regions.contains(&r) {
                    return Err(Error::config(format!(
                        "rate region {r} must be an atlas region outside the signal regions"
                    )));
                }
                let vox = atlas.voxels_in(&[r]);
                let f = smooth_field(ext, spec.smoothness, &mut rng);
                let mut p: Vec<f64> = vox.iter().map(|&i| f[i].abs() + 0.5).collect();
                unit_rms(&mut p);
                (vox, p)
            }
        };
        Ok(Self {
            atlas,
            signal_regions: spec.signal_regions.clone(),
            signal_voxels,
            projection,
            dim: spec.dim,
            rate_voxels,
            rate_pattern,
        })
    }

    pub fn projection_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.signal_voxels.len(), self.dim, &self.projection)
    }
}

/// Per-subject parameters of the forward model.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSpec {
    pub seed: u64,
    /// `dim x dim` row-major mixing `A = I + eps * G`.
    pub mixing: Vec<f64>,
    pub dim: usize,
    pub noise: f64,
    pub gain: f64,
    pub rate_gain: f64,
}

/// `G` has `N(0, 1/dim)` entries so its spectral norm stays near 2 at any dim.
pub fn make_subject(
    seed: u64,
    template: &Template,
    noise: f64,
    epsilon: f64,
    gain: f64,
    rate_gain: f64,
) -> Result<SubjectSpec> {
    if !(noise >= 0.0 && gain >= 0.0 && epsilon >= 0.0 && rate_gain >= 0.0) {
        return Err(Error::config(
            "noise, gain, epsilon and rate gain must be non-negative",
        ));
    }
    let d = template.dim;
    let mut rng = stream(seed, &[0x5b1]);
    let scale = epsilon / (d as f64).sqrt();
    let mixing = (0..d * d)
        .map(|i| {
            let g: f64 = rng.sample(StandardNormal);
            f64::from(u8::from(i / d == i % d)) + scale * g
        })
        .collect();
    Ok(SubjectSpec {
        seed,
        mixing,
        dim: d,
        noise,
        gain,
        rate_gain,
    })
}

impl SubjectSpec {
    pub fn mixing_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.mixing)
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.mixing_matrix().singular_values();
        sv.max() / sv.min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    pub signal_norm: f64,
    pub noise_norm: f64,
    pub measured: f64,
    pub configured: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub volumes: VolumeSeries,
    pub targets: Tensor,
    /// Factor applied to `P A y_t`.
    pub scale: f64,
    pub snr: SnrReport,
}

/// Volumes for one session: semantic signal `scale * P A y_t` in the signal
/// regions (scaled so its RMS over all voxels and acquisitions equals the
/// subject gain), the optional rate channel, and i.i.d. Gaussian noise.
pub fn simulate_session(
    transcript: &Transcript,
    provider: &dyn FeatureProvider,
    grid: &AcquisitionGrid,
    template: &Template,
    subject: &SubjectSpec,
    session: u64,
) -> Result<Session> {
    if provider.dim() != template.dim || subject.dim != template.dim {
        return Err(Error::shape(format!(
            "feature dim {}, template dim {}, subject dim {}",
            provider.dim(),
            template.dim,
            subject.dim
        )));
    }
    let d = template.dim;
    let ext = template.atlas.extents();
    let n_vox: usize = ext.iter().product();
    let t_n = grid.count;
    let targets = build_targets(transcript, provider, grid, &TargetConfig::default())?;
    let a = &subject.mixing;
    let p = &template.projection;
    let n_sig = template.signal_voxels.len();

    let raw: Vec<Vec<f64>> = (0..t_n)
        .into_par_iter()
        .map(|t| {
            let y = &targets.data()[t * d..(t + 1) * d];
            let s: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| a[i * d + j] * y[j]).sum())
                .collect();
            (0..n_sig)
                .map(|v| (0..d).map(|j| p[v * d + j] * s[j]).sum())
                .collect()
        })
        .collect();
    let sq: f64 = raw.iter().flatten().map(|x| x * x).sum();
    let rms = (sq / (t_n * n_vox) as f64).sqrt();
    let scale = if rms > 0.0 { subject.gain / rms } else { 0.0 };

    let rate = if template.rate_voxels.is_empty() || subject.rate_gain == 0.0 {
        None
    } else {
        let counts = transcript.counts_per_acquisition(grid);
        let mut r: Vec<f64> = (0..t_n)
            .map(|t| {
                DELAY_WEIGHTS
                    .iter()
                    .enumerate()
                    .filter_map(|(k, w)| t.checked_sub(k + 1).map(|s| w * counts[s] as f64))
                    .sum()
            })
            .collect();
        let m = r.iter().sum::<f64>() / t_n as f64;
        r.iter_mut().for_each(|x| *x -= m);
        unit_rms(&mut r);
        Some(r)
    };

    let frames: Vec<(Vec<f64>, f64, f64)> = (0..t_n)
        .into_par_iter()
        .map(|t| {
            let mut frame = vec![0.0; n_vox];
            let mut sig2 = 0.0;
            for (k, &v) in template.signal_voxels.iter().enumerate() {
                let s = scale * raw[t][k];
                frame[v] = s;
                sig2 += s * s;
            }
            if let Some(r) = &rate {
                for (&v, &q) in template.rate_voxels.iter().zip(&template.rate_pattern) {
                    frame[v] += subject.rate_gain * q * r[t];
                }
            }
            let mut noise2 = 0.0;
            if subject.noise > 0.0 {
                let mut rng = stream(subject.seed, &[0x4015e, session, t as u64]);
                for x in frame.iter_mut() {
                    let e = subject.noise * rng.sample::<f64, _>(StandardNormal);
                    *x += e;
                    noise2 += e * e;
                }
            }
            (frame, sig2, noise2)
        })
        .collect();
    let signal_norm = frames.iter().map(|f| f.1).sum::<f64>().sqrt();
    let noise_norm = frames.iter().map(|f| f.2).sum::<f64>().sqrt();
    let data: Vec<f64> = frames.into_iter().flat_map(|f| f.0).collect();
    Ok(Session {
        volumes: VolumeSeries::new(ext, grid.tr, data)?,
        targets,
        scale,
        snr: SnrReport {
            signal_norm,
            noise_norm,
            measured: if noise_norm > 0.0 {
                signal_norm / noise_norm
            } else {
                f64::INFINITY
            },
            configured: if subject.noise > 0.0 {
                subject.gain / subject.noise
            } else {
                f64::INFINITY
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(rate: Option<u32>) -> (Language, Stimulus, Template) {
        let lang = Language::new(&LanguageSpec {
            dim: 6,
            ..Default::default()
        })
        .unwrap();
        let stim = make_stimulus(
            &lang,
            &StimulusSpec {
                articles: 3,
                chars_per_article: 60,
                ..Default::default()
            },
        )
        .unwrap();
        let atlas = make_atlas([10, 10, 10], 10, 3).unwrap();
        let tpl = Template::new(
            atlas,
            &TemplateSpec {
                signal_regions: vec![7],
                dim: 6,
                smoothness: 1.5,
                rate_region: rate,
                seed: 4,
            },
        )
        .unwrap();
        (lang, stim, tpl)
    }

    #[test]
    fn atlas_regions_sized_in_order() {
        let a = make_atlas([16, 16, 16], 10, 1).unwrap();
        let sizes: Vec<usize> = (1..=10).map(|r| a.voxel_count(r)).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        assert!(sizes[0] > sizes[9]);
        assert!(a.voxel_count(0) > 0);
    }

    #[test]
    fn language_is_topic_sticky() {
        let lang = Language::new(&LanguageSpec::default()).unwrap();
        let mut rng = stream(1, &[]);
        let s = lang.generate(2000, &mut rng);
        let switches = s
            .windows(2)
            .filter(|w| lang.topic_of[w[0] as usize] != lang.topic_of[w[1] as usize])
            .count();
        assert!(switches < 120, "{switches}");
        assert!(s.iter().all(|&c| (c as usize) < 50));
    }

    #[test]
    fn mixing_identity_and_conditioning() {
        let (_, _, tpl) = setup(None);
        let s = make_subject(1, &tpl, 1.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(s.mixing_matrix(), DMatrix::identity(6, 6));
        assert_eq!(
            make_subject(5, &tpl, 1.0, 0.1, 1.0, 0.0).unwrap(),
            make_subject(5, &tpl, 1.0, 0.1, 1.0, 0.0).unwrap()
        );
        let mut wide = tpl.clone();
        wide.dim = 32;
        let good = (0..200)
            .filter(|&seed| {
                make_subject(seed, &wide, 1.0, 0.1, 1.0, 0.0)
                    .unwrap()
                    .condition_number()
                    < 2.0
            })
            .count();
        assert!(good >= 198, "{good}");
    }

    #[test]
    fn noiseless_signal_inverts_through_pseudo_inverse() {
        let (lang, stim, tpl) = setup(None);
        let subj = make_subject(2, &tpl, 0.0, 0.1, 1.0, 0.0).unwrap();
        let sess = simulate_session(
            &stim.transcript,
            &lang.provider(),
            &stim.grid,
            &tpl,
            &subj,
            0,
        )
        .unwrap();
        let pa = tpl.projection_matrix() * subj.mixing_matrix();
        let pinv = pa.pseudo_inverse(1e-12).unwrap();
        let d = tpl.dim;
        let mut worst: f64 = 0.0;
        for t in 0..stim.grid.count {
            let frame = sess.volumes.frame(t);
            let x = nalgebra::DVector::from_iterator(
                tpl.signal_voxels.len(),
                tpl.signal_voxels.iter().map(|&v| frame[v] / sess.scale),
            );
            let y = &pinv * x;
            for j in 0..d {
                worst = worst.max((y[j] - sess.targets.data()[t * d + j]).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
        // Nothing outside the signal region.
        for t in 0..stim.grid.count {
            for (i, &v) in sess.volumes.frame(t).iter().enumerate() {
                if !tpl.signal_voxels.contains(&i) {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn empty_transcript_without_noise_is_silent() {
        let (lang, stim, tpl) = setup(Some(2));
        let subj = make_subject(2, &tpl, 0.0, 0.1, 1.0, 1.0).unwrap();
        let sess = simulate_session(
            &Transcript::default(),
            &lang.provider(),
            &stim.grid,
            &tpl,
            &subj,
            0,
        )
        .unwrap();
        assert!(sess.volumes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snr_matches_configuration_and_is_deterministic() {
        let (lang, _, tpl) = setup(None);
        let stim = make_stimulus(
            &lang,
            &StimulusSpec {
                articles: 6,
                chars_per_article: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(stim.grid.count >= 400);
        let subj = make_subject(3, &tpl, 2.0, 0.1, 1.0, 0.0).unwrap();
        let run = || {
            simulate_session(
                &stim.transcript,
                &lang.provider(),
                &stim.grid,
                &tpl,
                &subj,
                1,
            )
            .unwrap()
        };
        let s = run();
        assert!(
            (s.snr.measured / s.snr.configured - 1.0).abs() < 0.05,
            "{:?}",
            s.snr
        );
        assert_eq!(s, run());
    }

    #[test]
    fn subjects_differ_only_by_mixing() {
        let (lang, stim, tpl) = setup(None);
        let a = make_subject(1, &tpl, 0.0, 0.0, 1.0, 0.0).unwrap();
        let mut b = make_subject(1, &tpl, 0.0, 0.1, 1.0, 0.0).unwrap();
        let sa =
            simulate_session(&stim.transcript, &lang.provider(), &stim.grid, &tpl, &a, 0).unwrap();
        b.mixing = a.mixing.clone();
        let sb =
            simulate_session(&stim.transcript, &lang.provider(), &stim.grid, &tpl, &b, 0).unwrap();
        assert_eq!(sa.volumes, sb.volumes);
    }

    #[test]
    fn rate_channel_tracks_counts() {
        let (lang, stim, tpl) = setup(Some(2));
        let subj = make_subject(1, &tpl, 0.0, 0.0, 1.0, 1.0).unwrap();
        let s = simulate_session(
            &stim.transcript,
            &lang.provider(),
            &stim.grid,
            &tpl,
            &subj,
            0,
        )
        .unwrap();
        let counts = stim.transcript.counts_per_acquisition(&stim.grid);
        let v = tpl.rate_voxels[0];
        let chan: Vec<f64> = (0..stim.grid.count - 1)
            .map(|t| s.volumes.frame(t + 1)[v])
            .collect();
        let c: Vec<f64> = counts[..stim.grid.count - 1]
            .iter()
            .map(|&x| x as f64)
            .collect();
        assert!(crate::stats::pearson(&chan, &c).unwrap() > 0.5);
    }
}
