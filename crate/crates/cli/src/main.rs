mod data;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brainchar::attribution::{make_region_scores, top_regions};
use brainchar::beam::{decode_counts, generate_nulls};
use brainchar::config::RunConfig;
use brainchar::encoder::{
    encode_means, gradient_check, train_encoder, EncoderConfig, EncoderParams,
};
use brainchar::eval::{p_value, windowed_means, windowed_score, Metric};
use brainchar::features::{AcquisitionGrid, FeatureProvider};
use brainchar::formats::{
    encode_region_scores, encode_transcript, encode_windows, first_difference, read_ckpt,
    read_transcript, reencode, vocab_path, write_atls, write_bvol, write_ckpt, write_embt,
    write_transcript, write_vocab,
};
use brainchar::lm::{train_ngram, AllowedSet};
use brainchar::manifest::{sha256_hex, Manifest};
use brainchar::persist::{
    encoder_from_ckpt, encoder_to_ckpt, lm_from_ckpt, lm_to_ckpt, rate_from_ckpt, rate_to_ckpt,
};
use brainchar::protocol::{
    auxiliary_corpus, build_world, cross_protocol, fit_rate_stacked, run_seed, within_protocol,
};
use brainchar::rate::predict_counts;
use brainchar::rng::derive_seed;
use brainchar::stats::pearson;
use brainchar::tensor::GradCheckOptions;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use data::DataDir;
use run::{CliError, CliResult, Ctx, MANIFEST};

#[derive(Parser)]
#[command(
    name = "brainchar",
    version,
    about = "Decode character sequences from fMRI-like volume series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives the artifacts and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Within,
    Cross,
}

#[derive(Subcommand)]
enum Command {
    /// Generate stimulus, embeddings, atlas and one BVOL per synthetic subject.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Character n-gram model on every article but the held-out one.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Bottleneck encoder on the training rows of the listed subjects.
    TrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        subjects: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Ridge rate model on the training rows of the listed subjects.
    TrainRate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        subjects: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Decode the held-out article of one subject.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        rate: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Language-model null sequences paced by the predicted counts.
    Nulls {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long)]
        rate: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Windowed score of a candidate transcript, optionally against nulls.
    Eval {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// One null sequence per line, placed at the candidate's onsets.
        #[arg(long)]
        nulls: Option<PathBuf>,
        /// Data directory; needed for embedding metrics and for --nulls.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the `metric` key.
        #[arg(long)]
        metric: Option<String>,
        /// Scored span in seconds; defaults to the later transcript end.
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Gradient saliency per atlas region.
    Attribute {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long)]
        encoder: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on a tiny encoder.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Full seed sweep: synthesize, train, decode and score.
    Protocol {
        #[arg(value_enum)]
        mode: Mode,
        #[command(flatten)]
        common: Common,
    },
    /// Read, re-encode and byte-compare BVOL/EMBT/CKPT/ATLS files.
    Roundtrip {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Rerun a manifest's command and compare output digests.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn common(&self) -> Option<&Common> {
        match self {
            Command::Synth { common }
            | Command::TrainLm { common, .. }
            | Command::TrainEncoder { common, .. }
            | Command::TrainRate { common, .. }
            | Command::Decode { common, .. }
            | Command::Nulls { common, .. }
            | Command::Eval { common, .. }
            | Command::Attribute { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Protocol { common, .. } => Some(common),
            Command::Roundtrip { .. } | Command::Replay { .. } => None,
        }
    }
}

fn resolve_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) if !p.is_file() => {
            return Err(CliError::Usage(format!("{}: no such file", p.display())))
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Arguments after the program name, minus the flags the manifest records
/// separately (configuration and output directory).
fn recorded_command(args: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if matches!(a.as_str(), "--out" | "--config" | "--seed") {
            it.next();
        } else if !["--out=", "--config=", "--seed="]
            .iter()
            .any(|p| a.starts_with(p))
        {
            out.push(a.clone());
        }
    }
    out
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Replay { manifest, out } => replay(&manifest, &out),
        Command::Roundtrip { paths } => roundtrip(&paths),
        command => {
            let common = command.common().cloned().unwrap_or_default();
            resolve_config(&common).and_then(|cfg| {
                let ctx = Ctx::new(cfg, common.out.clone(), recorded_command(&args[1..]))?;
                execute(command, ctx).map(|_| ())
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(command: Command, ctx: Ctx) -> CliResult<Manifest> {
    match command {
        Command::Synth { .. } => synth(ctx),
        Command::TrainLm { data, .. } => train_lm(ctx, &data),
        Command::TrainEncoder {
            data,
            subjects,
            run,
            ..
        } => train_enc(ctx, &data, &subjects, run),
        Command::TrainRate { data, subjects, .. } => train_rate(ctx, &data, &subjects),
        Command::Decode {
            data,
            subject,
            encoder,
            rate,
            lm,
            run,
            ..
        } => decode(ctx, &data, subject, &encoder, &rate, &lm, run),
        Command::Nulls {
            data,
            subject,
            rate,
            lm,
            run,
            ..
        } => nulls(ctx, &data, subject, &rate, &lm, run),
        Command::Eval {
            candidate,
            reference,
            nulls,
            data,
            metric,
            duration,
            ..
        } => eval(
            ctx,
            &candidate,
            &reference,
            nulls.as_deref(),
            data.as_deref(),
            metric.as_deref(),
            duration,
        ),
        Command::Attribute {
            data,
            subject,
            encoder,
            ..
        } => attribute(ctx, &data, subject, &encoder),
        Command::Gradcheck { tolerance, .. } => gradcheck(ctx, tolerance),
        Command::Protocol { mode, .. } => protocol(ctx, mode),
        Command::Roundtrip { .. } | Command::Replay { .. } => {
            unreachable!("handled before configuration")
        }
    }
}

fn synth(mut ctx: Ctx) -> CliResult<Manifest> {
    ctx.out_dir()?;
    let cfg = ctx.cfg.clone();
    let world = build_world(&cfg)?;
    let vocab = world.language.vocab();
    ctx.write_with(data::STIMULUS, |p| {
        write_transcript(p, &world.stimulus.transcript)
    })?;
    ctx.write(
        data::ARTICLES,
        data::encode_articles(&world.stimulus.articles).as_bytes(),
    )?;
    ctx.write(
        data::TEXTS,
        data::encode_sequences(&world.stimulus.texts, &vocab).as_bytes(),
    )?;
    let aux = if cfg.lm_corpus > 0 {
        vec![auxiliary_corpus(&world, &cfg)]
    } else {
        Vec::new()
    };
    ctx.write(
        data::AUXILIARY,
        data::encode_sequences(&aux, &vocab).as_bytes(),
    )?;
    let embt = ctx.write_with(data::EMBEDDINGS, |p| write_embt(p, &world.language.table))?;
    write_vocab(&vocab_path(&embt), &vocab)?;
    ctx.record_output(&vocab_path(&embt))?;
    ctx.write_with(data::ATLAS, |p| write_atls(p, &world.template.atlas))?;
    let mut snr = Vec::new();
    for (i, s) in world.sessions.iter().enumerate() {
        ctx.write_with(&data::subject_file(i), |p| write_bvol(p, &s.volumes))?;
        ctx.seed(&format!("subject-{i}"), world.subjects[i].seed);
        snr.push(s.snr.measured);
    }
    println!(
        "synthesized {} subjects, {} acquisitions, {} characters",
        world.sessions.len(),
        world.stimulus.grid.count,
        world.stimulus.transcript.len()
    );
    ctx.finish(json!({
        "acquisitions": world.stimulus.grid.count,
        "characters": world.stimulus.transcript.len(),
        "snr": snr,
    }))
}

fn train_lm(mut ctx: Ctx, data: &Path) -> CliResult<Manifest> {
    ctx.out_dir()?;
    let d = DataDir::new(data)?;
    let vocab = d.vocab(&mut ctx)?;
    let docs = d.lm_documents(&mut ctx, &vocab)?;
    let lm = train_ngram(&docs, ctx.cfg.lm_order, vocab.len())?;
    ctx.write_with("lm.ckpt", |p| write_ckpt(p, &lm_to_ckpt(&lm)))?;
    let chars: usize = docs.iter().map(Vec::len).sum();
    println!("trained order-{} model on {chars} characters", lm.order());
    ctx.finish(json!({ "documents": docs.len(), "characters": chars }))
}

fn check_subjects(subjects: &[usize]) -> CliResult<()> {
    if subjects.is_empty() {
        return Err(CliError::Usage("--subjects is empty".into()));
    }
    Ok(())
}

fn train_enc(mut ctx: Ctx, data: &Path, subjects: &[usize], run: usize) -> CliResult<Manifest> {
    ctx.out_dir()?;
    check_subjects(subjects)?;
    let d = DataDir::new(data)?;
    let transcript = d.transcript(&mut ctx)?;
    let articles = d.articles(&mut ctx)?;
    let provider = d.provider(&mut ctx)?;
    let mut dataset = Vec::new();
    for &s in subjects {
        let volumes = d.session(&mut ctx, s)?;
        let (_, rows) = data::split_rows(&articles, &volumes.grid()?, &ctx.cfg)?;
        dataset.extend(data::examples(
            &volumes,
            &transcript,
            &provider,
            &ctx.cfg,
            &rows,
        )?);
    }
    let seed = run_seed(&ctx.cfg, run);
    ctx.seed("run", seed);
    let init = EncoderParams::init(ctx.cfg.encoder(), derive_seed(seed, &[1]))?;
    let mut train = ctx.cfg.train()?;
    train.seed = derive_seed(seed, &[2]);
    let (params, history) = train_encoder(&dataset, init, &train)?;
    ctx.write_with("encoder.ckpt", |p| write_ckpt(p, &encoder_to_ckpt(&params)))?;
    let mut tsv = String::from("epoch\tloss\talignment\tkl\n");
    for (i, e) in history.epochs.iter().enumerate() {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            i + 1,
            e.loss,
            e.alignment,
            e.kl
        ));
    }
    ctx.write("history.tsv", tsv.as_bytes())?;
    let last = history.last().copied();
    println!(
        "trained encoder on {} examples; final loss {}",
        dataset.len(),
        last.map_or(f64::NAN, |e| e.loss)
    );
    ctx.finish(json!({
        "examples": dataset.len(),
        "final_loss": last.map(|e| e.loss),
        "final_kl": last.map(|e| e.kl),
        "final_alignment": last.map(|e| e.alignment),
    }))
}

fn train_rate(mut ctx: Ctx, data: &Path, subjects: &[usize]) -> CliResult<Manifest> {
    ctx.out_dir()?;
    check_subjects(subjects)?;
    let d = DataDir::new(data)?;
    let transcript = d.transcript(&mut ctx)?;
    let articles = d.articles(&mut ctx)?;
    let sessions = subjects
        .iter()
        .map(|&s| d.session(&mut ctx, s))
        .collect::<CliResult<Vec<_>>>()?;
    let grid = sessions[0].grid()?;
    let (test, rows) = data::split_rows(&articles, &grid, &ctx.cfg)?;
    let truth = data::true_counts(&transcript, &grid);
    let refs: Vec<_> = sessions.iter().collect();
    let model = fit_rate_stacked(&refs, &rows, &truth, &ctx.cfg)?;
    ctx.write_with("rate.ckpt", |p| write_ckpt(p, &rate_to_ckpt(&model)))?;
    let pred = predict_counts(&sessions[0], &model)?;
    let p: Vec<f64> = test.clone().map(|t| pred[t] as f64).collect();
    let y: Vec<f64> = test.clone().map(|t| truth[t]).collect();
    let r = pearson(&p, &y);
    println!(
        "rate model: lambda {}, held-out r {}",
        model.lambda,
        r.map_or("undefined".into(), |r| format!("{r:.4}"))
    );
    ctx.finish(json!({ "lambda": model.lambda, "held_out_r": r }))
}

struct Segment {
    grid: AcquisitionGrid,
    counts: Vec<usize>,
    start: usize,
    end: usize,
}

fn segment(
    ctx: &mut Ctx,
    d: &DataDir,
    subject: usize,
    rate: &Path,
) -> CliResult<(brainchar::VolumeSeries, Segment)> {
    let volumes = d.session(ctx, subject)?;
    let articles = d.articles(ctx)?;
    let (test, _) = data::split_rows(&articles, &volumes.grid()?, &ctx.cfg)?;
    let model = rate_from_ckpt(&read_ckpt(&ctx.input(rate)?)?)?;
    let counts = predict_counts(&volumes, &model)?[test.clone()].to_vec();
    let grid = AcquisitionGrid::new(ctx.cfg.tr, test.len())?;
    Ok((
        volumes,
        Segment {
            grid,
            counts,
            start: test.start,
            end: test.end,
        },
    ))
}

fn decode(
    mut ctx: Ctx,
    data: &Path,
    subject: usize,
    encoder: &Path,
    rate: &Path,
    lm: &Path,
    run: usize,
) -> CliResult<Manifest> {
    ctx.out_dir()?;
    let d = DataDir::new(data)?;
    let (volumes, seg) = segment(&mut ctx, &d, subject, rate)?;
    let params = encoder_from_ckpt(&read_ckpt(&ctx.input(encoder)?)?)?;
    let lm = lm_from_ckpt(&read_ckpt(&ctx.input(lm)?)?)?;
    let provider = d.provider(&mut ctx)?;
    let transcript = d.transcript(&mut ctx)?;
    let z = encode_means(&volumes.slice(seg.start, seg.end)?.volumes(), &params)?;
    let seed = run_seed(&ctx.cfg, run);
    ctx.seed("run", seed);
    let mut dc = ctx.cfg.decode()?;
    dc.seed = derive_seed(seed, &[3]);
    let allowed = AllowedSet::all(provider.table().vocab_size());
    let out = decode_counts(
        &z,
        &seg.counts,
        &seg.grid,
        &lm,
        &allowed,
        &provider,
        &ctx.cfg.targets(),
        &dc,
    )?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let start = seg.start as f64 * ctx.cfg.tr;
    let reference = transcript.slice_time(start, start + seg.grid.duration());
    ctx.write(
        "decoded.tsv",
        encode_transcript(&out.transcript()?).as_bytes(),
    )?;
    ctx.write("reference.tsv", encode_transcript(&reference).as_bytes())?;
    println!(
        "decoded {} characters over {} acquisitions ({} s)",
        out.chars.len(),
        seg.grid.count,
        seg.grid.duration()
    );
    ctx.finish(json!({
        "characters": out.chars.len(),
        "beam_score": out.score,
        "rows": [seg.start, seg.end],
        "duration": seg.grid.duration(),
        "warnings": out.warnings,
    }))
}

fn nulls(
    mut ctx: Ctx,
    data: &Path,
    subject: usize,
    rate: &Path,
    lm: &Path,
    run: usize,
) -> CliResult<Manifest> {
    ctx.out_dir()?;
    let d = DataDir::new(data)?;
    let (_, seg) = segment(&mut ctx, &d, subject, rate)?;
    let lm = lm_from_ckpt(&read_ckpt(&ctx.input(lm)?)?)?;
    let vocab = d.vocab(&mut ctx)?;
    let seed = run_seed(&ctx.cfg, run);
    ctx.seed("run", seed);
    let mut nc = ctx.cfg.null_config();
    nc.seed = derive_seed(seed, &[4]);
    let seqs = generate_nulls(&lm, &AllowedSet::all(vocab.len()), &seg.counts, &nc)?;
    ctx.write(
        "nulls.txt",
        data::encode_sequences(&seqs, &vocab).as_bytes(),
    )?;
    println!("generated {} null sequences", seqs.len());
    ctx.finish(json!({ "nulls": seqs.len(), "characters": seg.counts.iter().sum::<usize>() }))
}

fn eval(
    mut ctx: Ctx,
    candidate: &Path,
    reference: &Path,
    nulls: Option<&Path>,
    data: Option<&Path>,
    metric: Option<&str>,
    duration: Option<f64>,
) -> CliResult<Manifest> {
    let metric: Metric = match metric {
        Some(m) => m
            .parse()
            .map_err(|e| CliError::Usage(format!("--metric: {e}")))?,
        None => ctx.cfg.metric,
    };
    let cand = read_transcript(&ctx.input(candidate)?)?;
    let refr = read_transcript(&ctx.input(reference)?)?;
    let data = data.map(DataDir::new).transpose()?;
    let need = |what: &str| CliError::Usage(format!("{what} needs --data"));
    let embed = match (&data, metric.needs_embeddings()) {
        (Some(d), true) => {
            let vocab = d.vocab(&mut ctx)?;
            Some((d.provider(&mut ctx)?, d.idf(&mut ctx, &vocab)?))
        }
        (None, true) => return Err(need(&format!("metric {}", metric.name()))),
        (_, false) => None,
    };
    let embed_ref = embed.as_ref().map(|(p, i)| (p as &dyn FeatureProvider, i));
    let duration = duration.unwrap_or_else(|| cand.end_time().max(refr.end_time()));
    let spec = ctx.cfg.window_spec()?;
    let scored = windowed_score(&cand, &refr, metric, embed_ref, &spec, duration)?;
    ctx.write("windows.tsv", encode_windows(&scored).as_bytes())?;
    let mut metrics = json!({
        "metric": metric.name(),
        "mean": scored.mean,
        "windows": scored.windows.len(),
        "duration": duration,
    });
    print!(
        "{} mean {} over {} windows",
        metric.name(),
        scored.mean,
        scored.windows.len()
    );
    if let Some(path) = nulls {
        let d = data.as_ref().ok_or_else(|| need("--nulls"))?;
        let vocab = d.vocab(&mut ctx)?;
        let p = ctx.input(path)?;
        let seqs = data::decode_sequences(
            &std::fs::read_to_string(&p)?,
            &p.display().to_string(),
            &vocab,
        )?;
        let onsets = cand.midpoints();
        let scores = windowed_means(&seqs, &onsets, &refr, metric, embed_ref, &spec, duration)?;
        let pv = p_value(scored.mean, &scores)?;
        let null_mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let mut tsv = String::from("null\tscore\n");
        for (i, s) in scores.iter().enumerate() {
            tsv.push_str(&format!("{i}\t{s}\n"));
        }
        ctx.write("null_scores.tsv", tsv.as_bytes())?;
        print!("; null mean {null_mean}, p = {pv}");
        metrics["p_value"] = json!(pv);
        metrics["null_mean"] = json!(null_mean);
    }
    println!();
    ctx.finish(metrics)
}

fn attribute(mut ctx: Ctx, data: &Path, subject: usize, encoder: &Path) -> CliResult<Manifest> {
    ctx.out_dir()?;
    let d = DataDir::new(data)?;
    let params = encoder_from_ckpt(&read_ckpt(&ctx.input(encoder)?)?)?;
    let transcript = d.transcript(&mut ctx)?;
    let articles = d.articles(&mut ctx)?;
    let provider = d.provider(&mut ctx)?;
    let atlas = d.atlas(&mut ctx)?;
    let volumes = d.session(&mut ctx, subject)?;
    let (_, rows) = data::split_rows(&articles, &volumes.grid()?, &ctx.cfg)?;
    let dataset = data::examples(&volumes, &transcript, &provider, &ctx.cfg, &rows)?;
    let scores = make_region_scores(&params, &dataset, &atlas, &format!("subject-{subject}"))?;
    ctx.write("regions.tsv", encode_region_scores(&scores)?.as_bytes())?;
    let top = top_regions(&scores, 3)?;
    let labels: Vec<u32> = top.iter().map(|r| r.label).collect();
    println!("top regions {labels:?}");
    ctx.finish(json!({ "top_regions": labels, "scores": scores.scores }))
}

fn gradcheck(mut ctx: Ctx, tolerance: f64) -> CliResult<Manifest> {
    let seed = ctx.cfg.seed;
    ctx.seed("gradcheck", seed);
    let err = gradient_check(
        EncoderConfig::tiny(),
        seed,
        &GradCheckOptions {
            max_coords_per_tensor: usize::MAX,
            ..Default::default()
        },
    )?;
    println!("max relative error {err:.3e}");
    let m = ctx.finish(json!({ "max_relative_error": err, "tolerance": tolerance }))?;
    if err < tolerance {
        Ok(m)
    } else {
        Err(CliError::Numeric(format!(
            "max relative error {err:.3e} exceeds {tolerance:.1e}"
        )))
    }
}

fn protocol(mut ctx: Ctx, mode: Mode) -> CliResult<Manifest> {
    ctx.out_dir()?;
    let cfg = ctx.cfg.clone();
    let world = build_world(&cfg)?;
    let report = match mode {
        Mode::Within => within_protocol(&world, &cfg)?,
        Mode::Cross => cross_protocol(&world, &cfg)?,
    };
    for r in &report.runs {
        ctx.seed(&format!("run-{}", r.run), r.seed);
        println!(
            "run {} subject {}: {} {:.4} (null mean {:.4}, p = {:.3}), rate r {:.3}",
            r.run,
            r.test_subject,
            cfg.metric.name(),
            r.score,
            r.null_mean,
            r.p_value,
            r.rate_r
        );
    }
    println!(
        "{}: mean score {:.4}, mean p {:.3}",
        report.mode, report.mean_score, report.mean_p_value
    );
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    ctx.write("report.json", text.as_bytes())?;
    ctx.finish(json!({
        "mode": report.mode,
        "mean_score": report.mean_score,
        "mean_p_value": report.mean_p_value,
        "scores": report.runs.iter().map(|r| r.score).collect::<Vec<_>>(),
        "p_values": report.runs.iter().map(|r| r.p_value).collect::<Vec<_>>(),
    }))
}

fn roundtrip(paths: &[PathBuf]) -> CliResult<()> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::Usage(format!("{}: no such file", p.display())));
        }
        let bytes = std::fs::read(p)?;
        let again = reencode(&bytes, &p.display().to_string())?;
        if let Some(at) = first_difference(&bytes, &again) {
            return Err(CliError::Mismatch(format!(
                "{}: re-encoded bytes differ at offset {at} ({} bytes read, {} written)",
                p.display(),
                bytes.len(),
                again.len()
            )));
        }
        println!("{}: ok ({} bytes)", p.display(), bytes.len());
    }
    Ok(())
}

fn replay(manifest: &Path, out: &Path) -> CliResult<()> {
    if !manifest.is_file() {
        return Err(CliError::Usage(format!(
            "{}: no such file",
            manifest.display()
        )));
    }
    let recorded = Manifest::read(manifest)?;
    for input in &recorded.inputs {
        let now = std::fs::read(&input.path)
            .map_err(|_| CliError::Usage(format!("{}: input missing", input.path)))?;
        if sha256_hex(&now) != input.sha256 {
            return Err(CliError::Mismatch(format!(
                "{}: input changed since the run",
                input.path
            )));
        }
    }
    let cfg = recorded.run_config()?;
    let mut args = vec!["brainchar".to_string()];
    args.extend(recorded.command.iter().cloned());
    let cli = Cli::try_parse_from(&args)
        .map_err(|e| CliError::Usage(format!("manifest command: {e}")))?;
    if matches!(
        cli.command,
        Command::Replay { .. } | Command::Roundtrip { .. }
    ) {
        return Err(CliError::Usage(
            "manifest command cannot be replayed".into(),
        ));
    }
    let ctx = Ctx::new(cfg, Some(out.to_path_buf()), recorded.command.clone())?;
    let fresh = execute(cli.command, ctx)?;
    let (want, got) = (recorded.output_digests(), fresh.output_digests());
    let mut bad: Vec<String> = want
        .iter()
        .filter(|(k, v)| got.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    bad.extend(got.keys().filter(|k| !want.contains_key(*k)).cloned());
    if bad.is_empty() {
        println!(
            "replayed {}: {} outputs identical; manifest at {}",
            recorded.command.join(" "),
            want.len(),
            out.join(MANIFEST).display()
        );
        Ok(())
    } else {
        Err(CliError::Mismatch(format!(
            "outputs differ: {}",
            bad.join(", ")
        )))
    }
}
