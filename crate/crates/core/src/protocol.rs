//! Within-subject and cross-subject pipelines on synthetic subjects: train on
//! every article but one, decode the held-out article, score it against
//! language-model nulls, and repeat over a seed sweep.

use std::ops::Range;

use serde::Serialize;

use crate::attribution::{make_region_scores, AtlasVolume, RegionScores};
use crate::beam::{decode_counts, generate_nulls, DecodeOutput};
use crate::config::RunConfig;
use crate::encoder::{encode_means, train_encoder, EncoderParams, Example, TrainHistory};
use crate::error::{Error, Result};
use crate::eval::{p_value, windowed_means, IdfTable};
use crate::features::{AcquisitionGrid, FeatureProvider, Transcript, WindowedContext};
use crate::lm::{train_ngram, AllowedSet, NgramModel};
use crate::rate::{fit_rate_model_on, predict_counts, RateModel};
use crate::rng::{derive_seed, stream};
use crate::stats::pearson;
use crate::synth::{
    make_atlas, make_stimulus, make_subject, simulate_session, ArticleSpan, Language, LanguageSpec,
    Session, Stimulus, StimulusSpec, SubjectSpec, Template, TemplateSpec, TimingSpec,
};
use crate::volume::VolumeSeries;

/// Stimulus, anatomy and sessions for every synthetic subject.
#[derive(Debug, Clone)]
pub struct World {
    pub language: Language,
    pub stimulus: Stimulus,
    pub template: Template,
    pub subjects: Vec<SubjectSpec>,
    pub sessions: Vec<Session>,
}

impl World {
    pub fn provider(&self, cfg: &RunConfig) -> WindowedContext {
        let mut p = self.language.provider();
        p.window = cfg.context_window;
        p.decay = cfg.context_decay;
        p
    }
}

pub fn language_spec(cfg: &RunConfig) -> LanguageSpec {
    LanguageSpec {
        vocab: cfg.vocab,
        topics: cfg.topics,
        dim: cfg.dim,
        stay: cfg.stay,
        spread: cfg.spread,
        concentration: cfg.concentration,
        seed: derive_seed(cfg.seed, &[1]),
    }
}

pub fn stimulus_spec(cfg: &RunConfig) -> StimulusSpec {
    StimulusSpec {
        articles: cfg.articles,
        chars_per_article: cfg.chars_per_article,
        timing: TimingSpec {
            rate: (cfg.rate_min, cfg.rate_max),
            phrase_len: (cfg.phrase_min, cfg.phrase_max),
            pause: (cfg.pause_min, cfg.pause_max),
        },
        tr: cfg.tr,
        gap: cfg.gap,
        seed: derive_seed(cfg.seed, &[2]),
    }
}

pub fn build_atlas(cfg: &RunConfig) -> Result<AtlasVolume> {
    make_atlas(cfg.extents, cfg.regions, derive_seed(cfg.seed, &[3]))
}

pub fn build_template(cfg: &RunConfig, atlas: AtlasVolume) -> Result<Template> {
    Template::new(
        atlas,
        &TemplateSpec {
            signal_regions: cfg.signal_regions.clone(),
            dim: cfg.dim,
            smoothness: cfg.smoothness,
            rate_region: (cfg.rate_region > 0).then_some(cfg.rate_region),
            seed: derive_seed(cfg.seed, &[4]),
        },
    )
}

pub fn build_subject(cfg: &RunConfig, template: &Template, index: usize) -> Result<SubjectSpec> {
    make_subject(
        derive_seed(cfg.seed, &[5, index as u64]),
        template,
        cfg.noise,
        cfg.epsilon,
        cfg.gain,
        cfg.rate_gain,
    )
}

pub fn build_world(cfg: &RunConfig) -> Result<World> {
    cfg.validate()?;
    let language = Language::new(&language_spec(cfg))?;
    let stimulus = make_stimulus(&language, &stimulus_spec(cfg))?;
    let template = build_template(cfg, build_atlas(cfg)?)?;
    let subjects = (0..cfg.subjects)
        .map(|i| build_subject(cfg, &template, i))
        .collect::<Result<Vec<_>>>()?;
    let mut world = World {
        language,
        stimulus,
        template,
        subjects,
        sessions: Vec::new(),
    };
    let provider = world.provider(cfg);
    world.sessions = world
        .subjects
        .iter()
        .map(|s| {
            simulate_session(
                &world.stimulus.transcript,
                &provider,
                &world.stimulus.grid,
                &world.template,
                s,
                0,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(world)
}

/// Acquisitions of the held-out article plus the following `delays`, whose
/// responses still carry its characters.
pub fn test_rows(stimulus: &Stimulus, article: usize, delays: usize) -> Result<Range<usize>> {
    let span = stimulus.articles.get(article).ok_or_else(|| {
        Error::config(format!(
            "article {article} outside {} articles",
            stimulus.articles.len()
        ))
    })?;
    Ok(segment_rows(span, &stimulus.grid, delays))
}

pub fn segment_rows(span: &ArticleSpan, grid: &AcquisitionGrid, delays: usize) -> Range<usize> {
    let lo = ((span.start / grid.tr).floor() as usize).min(grid.count);
    let hi = ((span.end / grid.tr).ceil() as usize + delays).min(grid.count);
    lo..hi.max(lo)
}

pub fn train_rows(count: usize, test: &Range<usize>) -> Vec<usize> {
    (0..count).filter(|t| !test.contains(t)).collect()
}

pub fn examples(session: &Session, rows: &[usize]) -> Vec<Example> {
    let d = session.targets.dims()[1];
    rows.iter()
        .map(|&t| Example {
            volume: session.volumes.volume(t),
            target: session.targets.data()[t * d..(t + 1) * d].to_vec(),
        })
        .collect()
}

/// Texts of every article but the held-out one, plus auxiliary text drawn
/// from the same language.
pub fn lm_documents(world: &World, cfg: &RunConfig) -> Vec<Vec<u32>> {
    let mut docs: Vec<Vec<u32>> = world
        .stimulus
        .texts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != cfg.test_article)
        .map(|(_, t)| t.clone())
        .collect();
    if cfg.lm_corpus > 0 {
        docs.push(auxiliary_corpus(world, cfg));
    }
    docs
}

/// `cfg.lm_corpus` characters of extra text, independent of the stimulus.
pub fn auxiliary_corpus(world: &World, cfg: &RunConfig) -> Vec<u32> {
    world
        .language
        .generate(cfg.lm_corpus, &mut stream(cfg.seed, &[6]))
}

pub fn train_lm(world: &World, cfg: &RunConfig) -> Result<NgramModel> {
    train_ngram(&lm_documents(world, cfg), cfg.lm_order, cfg.vocab)
}

/// Counts from the transcript, as regression targets.
pub fn true_counts(world: &World) -> Vec<f64> {
    world
        .stimulus
        .transcript
        .counts_per_acquisition(&world.stimulus.grid)
        .into_iter()
        .map(|c| c as f64)
        .collect()
}

/// Rate model fit on the given subjects' training rows, sessions stacked.
pub fn fit_rate(
    world: &World,
    subjects: &[usize],
    rows: &[usize],
    rates: &[f64],
    cfg: &RunConfig,
) -> Result<RateModel> {
    let sessions: Vec<&VolumeSeries> = subjects
        .iter()
        .map(|&s| &world.sessions[s].volumes)
        .collect();
    fit_rate_stacked(&sessions, rows, rates, cfg)
}

/// Rate model over several sessions sharing one stimulus, fit on `rows` of
/// each.
pub fn fit_rate_stacked(
    sessions: &[&VolumeSeries],
    rows: &[usize],
    rates: &[f64],
    cfg: &RunConfig,
) -> Result<RateModel> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::InsufficientData("no sessions to fit".into()))?;
    let t_n = first.frames();
    let mut data = Vec::new();
    let mut keep = Vec::new();
    let mut all_rates = Vec::new();
    for (k, v) in sessions.iter().enumerate() {
        if v.extents() != first.extents() || v.frames() != t_n || rates.len() != t_n {
            return Err(Error::shape(format!(
                "session {k}: {:?}x{} volumes, {} rates, expected {:?}x{t_n}",
                v.extents(),
                v.frames(),
                rates.len(),
                first.extents()
            )));
        }
        data.extend_from_slice(v.data());
        keep.extend(rows.iter().filter(|&&t| t < t_n).map(|&t| k * t_n + t));
        all_rates.extend_from_slice(rates);
    }
    // Rows near the end of one session would read the next session.
    keep.retain(|&r| r % t_n + cfg.delays < t_n);
    let stacked = VolumeSeries::new(first.extents(), first.tr(), data)?;
    fit_rate_model_on(&stacked, &all_rates, Some(&keep), &cfg.rate())
}

/// Pearson r between rounded predictions and true counts over `rows`.
pub fn rate_correlation(
    session: &Session,
    model: &RateModel,
    truth: &[f64],
    rows: &[usize],
) -> Result<f64> {
    let pred = predict_counts(&session.volumes, model)?;
    let p: Vec<f64> = rows.iter().map(|&t| pred[t] as f64).collect();
    let y: Vec<f64> = rows.iter().map(|&t| truth[t]).collect();
    Ok(pearson(&p, &y).unwrap_or(0.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub test_subject: usize,
    pub score: f64,
    pub null_mean: f64,
    pub p_value: f64,
    pub final_kl: f64,
    pub final_alignment: f64,
    pub rate_r: f64,
    pub decoded: Vec<u32>,
    pub onsets: Vec<f64>,
    pub reference: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolReport {
    pub mode: String,
    pub runs: Vec<RunResult>,
    pub mean_score: f64,
    pub mean_p_value: f64,
}

/// Artifacts of one trained pipeline, kept for reuse by callers.
pub struct Trained {
    pub encoder: EncoderParams,
    pub history: TrainHistory,
    pub rate: RateModel,
    pub lm: NgramModel,
}

pub fn run_seed(cfg: &RunConfig, run: usize) -> u64 {
    derive_seed(cfg.seed, &[100, run as u64])
}

fn train_pipeline(
    world: &World,
    cfg: &RunConfig,
    train_subjects: &[usize],
    rows: &[usize],
    seed: u64,
) -> Result<Trained> {
    let dataset: Vec<Example> = train_subjects
        .iter()
        .flat_map(|&s| examples(&world.sessions[s], rows))
        .collect();
    let init = EncoderParams::init(cfg.encoder(), derive_seed(seed, &[1]))?;
    let mut train = cfg.train()?;
    train.seed = derive_seed(seed, &[2]);
    let (encoder, history) = train_encoder(&dataset, init, &train)?;
    let rate = fit_rate(world, train_subjects, rows, &true_counts(world), cfg)?;
    let lm = train_lm(world, cfg)?;
    Ok(Trained {
        encoder,
        history,
        rate,
        lm,
    })
}

/// Decode the held-out segment of `session` and score it against nulls.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_segment(
    world: &World,
    cfg: &RunConfig,
    trained: &Trained,
    session: &Session,
    test: &Range<usize>,
    seed: u64,
) -> Result<(DecodeOutput, Vec<f64>, f64, Transcript)> {
    let provider = world.provider(cfg);
    let volumes = session.volumes.slice(test.start, test.end)?;
    let z = encode_means(&volumes.volumes(), &trained.encoder)?;
    let counts = predict_counts(&session.volumes, &trained.rate)?[test.clone()].to_vec();
    let grid = AcquisitionGrid::new(cfg.tr, test.len())?;
    let allowed = AllowedSet::all(cfg.vocab);
    let mut dc = cfg.decode()?;
    dc.seed = derive_seed(seed, &[3]);
    let out = decode_counts(
        &z,
        &counts,
        &grid,
        &trained.lm,
        &allowed,
        &provider,
        &cfg.targets(),
        &dc,
    )?;
    let mut nc = cfg.null_config();
    nc.seed = derive_seed(seed, &[4]);
    let nulls = generate_nulls(&trained.lm, &allowed, &counts, &nc)?;
    let reference = world.stimulus.transcript.slice_time(
        grid_start(cfg, test),
        grid_start(cfg, test) + grid.duration(),
    );
    let docs = lm_documents(world, cfg);
    let idf = IdfTable::from_documents(docs.iter().map(|d| d.as_slice()));
    let embed: Option<(&dyn FeatureProvider, &IdfTable)> = Some((&provider, &idf));
    let spec = cfg.window_spec()?;
    let score = windowed_means(
        std::slice::from_ref(&out.chars),
        &out.onsets,
        &reference,
        cfg.metric,
        embed,
        &spec,
        grid.duration(),
    )?[0];
    let null_scores = windowed_means(
        &nulls,
        &out.onsets,
        &reference,
        cfg.metric,
        embed,
        &spec,
        grid.duration(),
    )?;
    Ok((out, null_scores, score, reference))
}

fn grid_start(cfg: &RunConfig, test: &Range<usize>) -> f64 {
    test.start as f64 * cfg.tr
}

fn result(
    run: usize,
    seed: u64,
    test_subject: usize,
    trained: &Trained,
    rate_r: f64,
    eval: (DecodeOutput, Vec<f64>, f64, Transcript),
) -> Result<RunResult> {
    let (out, nulls, score, reference) = eval;
    let last = trained.history.epochs.last();
    Ok(RunResult {
        run,
        seed,
        test_subject,
        score,
        null_mean: nulls.iter().sum::<f64>() / nulls.len().max(1) as f64,
        p_value: p_value(score, &nulls)?,
        final_kl: last.map_or(f64::NAN, |e| e.kl),
        final_alignment: last.map_or(f64::NAN, |e| e.alignment),
        rate_r,
        decoded: out.chars,
        onsets: out.onsets,
        reference: reference.chars(),
    })
}

/// Train and test on one subject, holding out `cfg.test_article`.
pub fn within_run(world: &World, cfg: &RunConfig, subject: usize, run: usize) -> Result<RunResult> {
    let session = world.sessions.get(subject).ok_or_else(|| {
        Error::config(format!(
            "subject {subject} outside {}",
            world.sessions.len()
        ))
    })?;
    let test = test_rows(&world.stimulus, cfg.test_article, cfg.delays)?;
    let rows = train_rows(world.stimulus.grid.count, &test);
    let seed = run_seed(cfg, run);
    let trained = train_pipeline(world, cfg, &[subject], &rows, seed)?;
    let test_idx: Vec<usize> = test.clone().collect();
    let rate_r = rate_correlation(session, &trained.rate, &true_counts(world), &test_idx)?;
    let eval = evaluate_segment(world, cfg, &trained, session, &test, seed)?;
    result(run, seed, subject, &trained, rate_r, eval)
}

/// Train on every subject except `held_out`, then decode its held-out article.
pub fn cross_run(world: &World, cfg: &RunConfig, held_out: usize, run: usize) -> Result<RunResult> {
    let n = world.sessions.len();
    if held_out >= n || n < 2 {
        return Err(Error::config(format!(
            "cross-subject needs >= 2 subjects and a held-out index below {n}"
        )));
    }
    let train: Vec<usize> = (0..n).filter(|&s| s != held_out).collect();
    let test = test_rows(&world.stimulus, cfg.test_article, cfg.delays)?;
    let rows = train_rows(world.stimulus.grid.count, &test);
    let seed = run_seed(cfg, run);
    let trained = train_pipeline(world, cfg, &train, &rows, seed)?;
    let session = &world.sessions[held_out];
    let test_idx: Vec<usize> = test.clone().collect();
    let rate_r = rate_correlation(session, &trained.rate, &true_counts(world), &test_idx)?;
    let eval = evaluate_segment(world, cfg, &trained, session, &test, seed)?;
    result(run, seed, held_out, &trained, rate_r, eval)
}

fn report(mode: &str, runs: Vec<RunResult>) -> ProtocolReport {
    let n = runs.len().max(1) as f64;
    ProtocolReport {
        mode: mode.to_string(),
        mean_score: runs.iter().map(|r| r.score).sum::<f64>() / n,
        mean_p_value: runs.iter().map(|r| r.p_value).sum::<f64>() / n,
        runs,
    }
}

/// `cfg.runs` seeds on subject 0.
pub fn within_protocol(world: &World, cfg: &RunConfig) -> Result<ProtocolReport> {
    let runs = (0..cfg.runs)
        .map(|r| within_run(world, cfg, 0, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(report("within", runs))
}

/// `cfg.runs` seeds holding out the last subject.
pub fn cross_protocol(world: &World, cfg: &RunConfig) -> Result<ProtocolReport> {
    let held = world.sessions.len().saturating_sub(1);
    let runs = (0..cfg.runs)
        .map(|r| cross_run(world, cfg, held, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(report("cross", runs))
}

/// Train on one subject's training rows and aggregate saliency per region.
pub fn attribute_subject(
    world: &World,
    cfg: &RunConfig,
    subject: usize,
    seed: u64,
) -> Result<(RegionScores, EncoderParams)> {
    let session = &world.sessions[subject];
    let test = test_rows(&world.stimulus, cfg.test_article, cfg.delays)?;
    let rows = train_rows(world.stimulus.grid.count, &test);
    let dataset = examples(session, &rows);
    let init = EncoderParams::init(cfg.encoder(), derive_seed(seed, &[1]))?;
    let mut train = cfg.train()?;
    train.seed = derive_seed(seed, &[2]);
    let (encoder, _) = train_encoder(&dataset, init, &train)?;
    let scores = make_region_scores(
        &encoder,
        &dataset,
        &world.template.atlas,
        &format!("subject-{subject}"),
    )?;
    Ok((scores, encoder))
}
