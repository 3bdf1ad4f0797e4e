//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --release -p brainchar --test acceptance`; pass criterion
//! numbers as arguments to run a subset.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use brainchar::attribution::{spearman, top_regions, AtlasVolume};
use brainchar::beam::{decode_counts, score_candidate, DecodeConfig, Expansion};
use brainchar::config::RunConfig;
use brainchar::encoder::{
    gradient_check, kl_gaussians, train_encoder, EncoderConfig, EncoderParams,
};
use brainchar::eval::{
    align, bleu1, chunks, embed_recall, meteor, p_value, seq_cosine, windowed_score, IdfTable,
    Metric, WindowSpec,
};
use brainchar::features::{
    lanczos_resample, AcquisitionGrid, EmbeddingTable, TargetConfig, Transcript, WindowedContext,
};
use brainchar::formats::{
    decode_atls, decode_bvol, decode_ckpt, decode_embt, decode_vocab, encode_atls, encode_bvol,
    encode_ckpt, encode_embt, encode_vocab, write_bvol, write_ckpt, Checkpoint, Dtype, NamedTensor,
};
use brainchar::lm::{nucleus_filter, train_ngram, AllowedSet, NucleusConfig};
use brainchar::manifest::Manifest;
use brainchar::persist::{encoder_to_ckpt, lm_to_ckpt};
use brainchar::protocol::{
    attribute_subject, build_world, cross_run, examples, fit_rate, stimulus_spec, test_rows,
    train_lm, train_rows, true_counts, within_run,
};
use brainchar::rate::{place_onsets, predict_rates};
use brainchar::rng::stream;
use brainchar::stats::pearson;
use brainchar::synth::{make_stimulus, simulate_session};
use brainchar::tensor::GradCheckOptions;
use brainchar::vocab::Vocab;
use brainchar::{Tensor, VolumeSeries};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Lines go straight to stderr so they show even when output is captured.
fn report(line: &str) {
    let mut e = std::io::stderr().lock();
    let _ = writeln!(e, "{line}");
    let _ = e.flush();
}

/// Settings shared by the learned criteria: the hyper-parameter defaults
/// learn too slowly at desk scale.
fn desk() -> RunConfig {
    RunConfig {
        lr: 1e-3,
        batch: 32,
        ..RunConfig::default()
    }
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let opts = GradCheckOptions {
        max_coords_per_tensor: usize::MAX,
        ..Default::default()
    };
    let worst = (0..3)
        .map(|seed| gradient_check(EncoderConfig::tiny(), seed, &opts).unwrap())
        .fold(0.0f64, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.2e} over 3 seeds, every coordinate, {secs:.1} s"),
    )
}

fn c2_kl() -> Outcome {
    let same = kl_gaussians(
        &[0.3, -1.2, 2.0],
        &[0.5, 2.0, 1.0],
        &[0.3, -1.2, 2.0],
        &[0.5, 2.0, 1.0],
    )
    .unwrap();
    let shift = kl_gaussians(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap();
    let mut rng = stream(2, &[]);
    let mut min = f64::INFINITY;
    for _ in 0..1000 {
        let d = rng.random_range(1..8);
        let mut draw =
            |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
        let (m1, v1, m2, v2) = (
            draw(-3.0, 3.0),
            draw(0.05, 5.0),
            draw(-3.0, 3.0),
            draw(0.05, 5.0),
        );
        min = min.min(kl_gaussians(&m1, &v1, &m2, &v2).unwrap());
    }
    outcome(
        same.abs() < 1e-12 && (shift - 0.5).abs() < 1e-12 && min >= 0.0,
        format!("identical {same:e}, unit shift {shift}, min over 1000 random pairs {min:.3e}"),
    )
}

fn c3_lanczos() -> Outcome {
    let tr = 1.5;
    let lobes = 3;
    let span = 120.0;
    let f = 0.1;
    let times: Vec<f64> = (0..1200).map(|i| i as f64 * 0.1).collect();
    let vals: Vec<Vec<f64>> = times
        .iter()
        .map(|t| vec![(2.0 * std::f64::consts::PI * f * t).sin()])
        .collect();
    let grid = AcquisitionGrid::new(tr, 80).unwrap();
    let out = lanczos_resample(&times, &vals, 1, &grid, lobes).unwrap();
    let reach = lobes as f64 * tr;
    let mut worst = 0.0f64;
    let mut rows = 0;
    for k in 0..grid.count {
        let t = grid.time(k);
        if t - reach < 0.0 || t + reach > span - 0.1 {
            continue;
        }
        rows += 1;
        worst = worst.max((out.data()[k] - (2.0 * std::f64::consts::PI * f * t).sin()).abs());
    }

    // Irregular sampling, with a silent stretch whose rows get no weight.
    let mut rng = stream(3, &[]);
    let mut ctimes = Vec::new();
    let mut t = 0.2;
    while t < 60.0 {
        if !(25.0..40.0).contains(&t) {
            ctimes.push(t);
        }
        t += rng.random_range(0.05..0.6);
    }
    let constant = [0.25, -3.0, 1.0 / 3.0];
    let cvals = vec![constant.to_vec(); ctimes.len()];
    let cgrid = AcquisitionGrid::new(tr, 40).unwrap();
    let cout = lanczos_resample(&ctimes, &cvals, 3, &cgrid, lobes).unwrap();
    let mut exact = true;
    let mut weighted = 0;
    let mut worst_const = 0.0f64;
    for k in 0..cgrid.count {
        let row = &cout.data()[3 * k..3 * k + 3];
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        weighted += 1;
        exact &= row[0] == 0.25;
        for (a, b) in row.iter().zip(constant) {
            worst_const = worst_const.max((a - b).abs());
        }
    }
    outcome(
        worst < 1e-2 && exact && worst_const < 1e-12 && weighted > 25,
        format!(
            "sinusoid max error {worst:.2e} over {rows} interior rows; constant reproduced on \
             {weighted} weighted rows (power-of-two exact: {exact}, max error {worst_const:.1e})"
        ),
    )
}

fn all_sequences(v: u32, len: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|p: Vec<u32>| {
                (0..v).map(move |c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

fn c4_beam_oracle() -> Outcome {
    let mut agree = 0;
    let mut sizes = Vec::new();
    for seed in 0..50u64 {
        let mut rng = stream(4, &[seed]);
        let v: u32 = if seed % 2 == 0 { 3 } else { 2 };
        let max_len = if v == 3 { 6 } else { 9 };
        let len = rng.random_range(1..=max_len);
        let rows = rng.random_range(4..=9);
        let mut counts = vec![0usize; rows];
        for _ in 0..len {
            counts[rng.random_range(0..rows)] += 1;
        }
        let d = 4;
        let table: Vec<f64> = (0..v as usize * d)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let provider =
            WindowedContext::new(Arc::new(EmbeddingTable::new(v as usize, d, table).unwrap()));
        let z = Tensor::from_vec(
            &[rows, d],
            (0..rows * d).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap();
        let corpus: Vec<u32> = (0..40).map(|_| rng.random_range(0..v)).collect();
        let lm = train_ngram(&[corpus], 3, v as usize).unwrap();
        let grid = AcquisitionGrid::new(1.5, rows).unwrap();
        let onsets = place_onsets(&counts, &grid).unwrap();
        let tc = TargetConfig::default();
        let cfg = DecodeConfig {
            beam: (v as usize).pow(len as u32),
            expansion: Expansion::Exhaustive,
            lookahead: 2,
            seed,
            ..Default::default()
        };
        let out = decode_counts(
            &z,
            &counts,
            &grid,
            &lm,
            &AllowedSet::all(v as usize),
            &provider,
            &tc,
            &cfg,
        )
        .unwrap();
        let mut best: Option<(f64, Vec<u32>)> = None;
        for s in all_sequences(v, len) {
            let sc = score_candidate(&s, &onsets, &z, rows - 1, &provider, &grid, &tc).unwrap();
            if best.as_ref().is_none_or(|b| sc > b.0) {
                best = Some((sc, s));
            }
        }
        let (sc, seq) = best.unwrap();
        if out.chars == seq && (out.score - sc).abs() <= 1e-12 {
            agree += 1;
        }
        sizes.push((v as usize).pow(len as u32));
    }
    outcome(
        agree == 50,
        format!(
            "{agree}/50 instances match brute force (|V|^L from {} to {})",
            sizes.iter().min().unwrap(),
            sizes.iter().max().unwrap()
        ),
    )
}

fn c5_nucleus() -> Outcome {
    let a = [0.5, 0.3, 0.15, 0.05];
    let u = [0.1; 10];
    let b = [0.6, 0.3, 0.1];
    let tie = [0.4, 0.4, 0.2];
    let cases: Vec<(&[f64], f64, f64, Vec<(u32, f64)>)> = vec![
        (
            &a,
            0.9,
            0.1,
            vec![(0, 0.5 / 0.95), (1, 0.3 / 0.95), (2, 0.15 / 0.95)],
        ),
        (&a, 0.35, 0.1, vec![(0, 1.0)]),
        (&a, 1.0, 0.1, vec![(0, 0.5), (1, 0.3), (2, 0.15), (3, 0.05)]),
        (&a, 1.0, 1.0, vec![(0, 1.0)]),
        (
            &a,
            0.9,
            0.05,
            vec![(0, 0.5 / 0.95), (1, 0.3 / 0.95), (2, 0.15 / 0.95)],
        ),
        (&u, 0.35, 0.1, (0..4).map(|i| (i, 0.25)).collect()),
        (&u, 1.0, 1.0, (0..10).map(|i| (i, 0.1)).collect()),
        (&[0.25; 4], 0.9, 0.1, (0..4).map(|i| (i, 0.25)).collect()),
        (&b, 0.9, 0.05, vec![(0, 2.0 / 3.0), (1, 1.0 / 3.0)]),
        (&b, 1.0, 0.1, vec![(0, 0.6), (1, 0.3), (2, 0.1)]),
        (&b, 1.0, 1.0, vec![(0, 1.0)]),
        (&tie, 0.35, 0.05, vec![(0, 1.0)]),
        (&tie, 0.9, 0.1, vec![(0, 0.4), (1, 0.4), (2, 0.2)]),
        (
            &[0.05, 0.7, 0.25],
            0.9,
            0.1,
            vec![(1, 0.7 / 0.95), (2, 0.25 / 0.95)],
        ),
        (
            &[0.7, 0.2, 0.05, 0.05],
            1.0,
            0.1,
            vec![(0, 0.7 / 0.9), (1, 0.2 / 0.9)],
        ),
    ];
    let mut failed = Vec::new();
    for (i, (p, rho, eta, want)) in cases.iter().enumerate() {
        let got = nucleus_filter(
            p,
            NucleusConfig {
                rho: *rho,
                eta: *eta,
            },
            &AllowedSet::all(p.len()),
        )
        .unwrap();
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(want)
                .all(|(g, w)| g.0 == w.0 && (g.1 - w.1).abs() < 1e-12);
        if !same {
            failed.push(i);
        }
    }
    let reference = nucleus_filter(
        &a,
        NucleusConfig { rho: 0.9, eta: 0.1 },
        &AllowedSet::all(4),
    )
    .unwrap();
    let rounded: Vec<f64> = reference
        .iter()
        .map(|r| (r.1 * 1e4).round() / 1e4)
        .collect();
    let reference_ok = rounded == [0.5263, 0.3158, 0.1579];
    outcome(
        failed.is_empty() && reference_ok,
        format!(
            "{}/{} hand-enumerated cases match, reference case {rounded:?}",
            cases.len() - failed.len(),
            cases.len()
        ),
    )
}

fn c6_within() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig {
        epochs: 10,
        subjects: 1,
        ..desk()
    };
    let world = build_world(&cfg).unwrap();
    let r = within_run(&world, &cfg, 0, 0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        r.p_value <= 0.05 && secs < 15.0 * 60.0,
        format!(
            "T = {}, extents {:?}; seq-cosine {:.4} vs null mean {:.4}, p = {:.3} ({} nulls); {secs:.0} s",
            world.stimulus.grid.count, cfg.extents, r.score, r.null_mean, r.p_value, cfg.nulls
        ),
    )
}

fn c7_cross() -> Outcome {
    let cfg = RunConfig {
        epochs: 6,
        subjects: 4,
        ..desk()
    };
    let world = build_world(&cfg).unwrap();
    let r = cross_run(&world, &cfg, 3, 0).unwrap();
    outcome(
        r.p_value <= 0.05,
        format!(
            "trained on subjects 0-2 (epsilon {}), held-out subject 3: seq-cosine {:.4} vs null mean {:.4}, p = {:.3}",
            cfg.epsilon, r.score, r.null_mean, r.p_value
        ),
    )
}

fn c8_ablation() -> Outcome {
    let base = RunConfig {
        epochs: 20,
        noise: 2.0,
        subjects: 1,
        ..desk()
    };
    let world = build_world(&base).unwrap();
    let snr = world.sessions[0].snr.measured;
    let mut kl_lower = 0;
    let (mut s1, mut s0) = (0.0, 0.0);
    let mut rows = Vec::new();
    for run in 0..5 {
        let with = within_run(
            &world,
            &RunConfig {
                beta: 1.0,
                ..base.clone()
            },
            0,
            run,
        )
        .unwrap();
        let without = within_run(
            &world,
            &RunConfig {
                beta: 0.0,
                ..base.clone()
            },
            0,
            run,
        )
        .unwrap();
        kl_lower += (with.final_kl < without.final_kl) as usize;
        s1 += with.score / 5.0;
        s0 += without.score / 5.0;
        rows.push(format!("{:.1}/{:.1}", with.final_kl, without.final_kl));
    }
    outcome(
        kl_lower == 5 && s1 >= s0,
        format!(
            "SNR {snr:.2}; final KL beta=1/beta=0 per seed [{}], lower in {kl_lower}/5; mean score {s1:.4} vs {s0:.4}",
            rows.join(", ")
        ),
    )
}

fn c9_rate() -> Outcome {
    let cfg = RunConfig {
        subjects: 1,
        ..RunConfig::default()
    };
    let world = build_world(&cfg).unwrap();
    let rows: Vec<usize> = (0..world.stimulus.grid.count).collect();
    let counts = true_counts(&world);
    let model = fit_rate(&world, &[0], &rows, &counts, &cfg).unwrap();

    // Held-out data: a new story heard by the same subject in a second session.
    let mut spec = stimulus_spec(&cfg);
    spec.seed ^= 0x5eed;
    let story = make_stimulus(&world.language, &spec).unwrap();
    let session = simulate_session(
        &story.transcript,
        &world.provider(&cfg),
        &story.grid,
        &world.template,
        &world.subjects[0],
        1,
    )
    .unwrap();
    let truth: Vec<f64> = story
        .transcript
        .counts_per_acquisition(&story.grid)
        .into_iter()
        .map(|c| c as f64)
        .collect();
    let r = pearson(&predict_rates(&session.volumes, &model).unwrap(), &truth).unwrap_or(0.0);

    let mut shuffled = counts.clone();
    shuffled.shuffle(&mut stream(9, &[]));
    let control = fit_rate(&world, &[0], &rows, &shuffled, &cfg).unwrap();
    let rc = pearson(&predict_rates(&session.volumes, &control).unwrap(), &truth).unwrap_or(0.0);
    outcome(
        r > 0.5 && rc.abs() < 0.2,
        format!(
            "held-out r {r:.3} over {} acquisitions (lambda {}); permuted-label r {rc:.3}",
            truth.len(),
            model.lambda
        ),
    )
}

fn c10_attribution() -> Outcome {
    let mut hits = 0;
    let mut rhos = Vec::new();
    for seed in 0..20 {
        let cfg = RunConfig {
            seed,
            extents: [20, 20, 20],
            noise: 0.5,
            rate_region: 0,
            articles: 8,
            test_article: 7,
            epochs: 3,
            subjects: 2,
            ..desk()
        };
        assert_eq!(cfg.signal_regions, vec![7]);
        let world = build_world(&cfg).unwrap();
        let (a, _) = attribute_subject(&world, &cfg, 0, 11).unwrap();
        let (b, _) = attribute_subject(&world, &cfg, 1, 11).unwrap();
        hits += (top_regions(&a, 1).unwrap()[0].label == 7) as usize;
        rhos.push(spearman(&a, &b).unwrap());
    }
    let min = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    outcome(
        hits >= 19 && min > 0.8,
        format!(
            "region 7 top-1 in {hits}/20 seeds; subject-pair Spearman min {min:.3}, mean {mean:.3}"
        ),
    )
}

fn static_provider(rows: Vec<f64>, v: usize, d: usize) -> WindowedContext {
    let mut p = WindowedContext::new(Arc::new(EmbeddingTable::new(v, d, rows).unwrap()));
    p.window = 1;
    p
}

fn c11_metrics() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    checks.push(("bleu1 identical", bleu1(&[0, 1, 2], &[0, 1, 2]) == 1.0));
    checks.push((
        "bleu1 abc/abd",
        close(bleu1(&[0, 1, 2], &[0, 1, 3]), 2.0 / 3.0),
    ));
    checks.push(("bleu1 disjoint", bleu1(&[0, 1], &[2, 3]) == 0.0));
    checks.push(("bleu1 empty", bleu1(&[], &[1]) == 0.0));
    let s = [3, 1, 4, 1, 5];
    checks.push(("meteor identical", close(meteor(&s, &s), 1.0 - 0.5 / 125.0)));
    checks.push(("meteor identical chunks", chunks(&align(&s, &s)) == 1));
    checks.push(("meteor disjoint", meteor(&[0, 1], &[2, 3]) == 0.0));
    checks.push(("meteor ab/ba", close(meteor(&[0, 1], &[1, 0]), 0.5)));

    let p = static_provider(vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8], 3, 2);
    let u = IdfTable::uniform();
    checks.push((
        "embed-recall identical",
        embed_recall(&[0, 1, 2], &[0, 1, 2], &p, &u).unwrap() == 1.0,
    ));
    checks.push((
        "embed-recall orthogonal",
        embed_recall(&[0], &[1], &p, &u).unwrap() == 0.0,
    ));
    checks.push((
        "embed-recall empty reference",
        embed_recall(&[0], &[], &p, &u).is_err(),
    ));

    let q = static_provider(vec![1.0, 0.2, 0.3, 1.0, -1.0, -0.2, -0.3, -1.0], 4, 2);
    let idf = IdfTable::from_documents([&[0u32, 1][..], &[2, 3, 1]]);
    checks.push((
        "seq-cosine identical",
        close(seq_cosine(&[0, 1, 1], &[0, 1, 1], &q, &idf).unwrap(), 1.0),
    ));
    checks.push((
        "seq-cosine negated",
        close(seq_cosine(&[0, 1], &[2, 3], &q, &u).unwrap(), -1.0),
    ));
    checks.push((
        "seq-cosine permutation",
        close(
            seq_cosine(&[1, 0, 1, 0], &[0, 0, 1, 1], &q, &idf).unwrap(),
            1.0,
        ),
    ));
    let zero = static_provider(vec![0.0; 4], 2, 2);
    checks.push((
        "seq-cosine zero norm",
        seq_cosine(&[0], &[1], &zero, &u).unwrap() == 0.0,
    ));

    let chars: Vec<u32> = (0..60).map(|i| i % 5).collect();
    let times: Vec<f64> = (0..60).map(|i| i as f64 * 0.5 + 0.1).collect();
    let t = Transcript::from_points(&chars, &times).unwrap();
    let spec = WindowSpec::new(20.0, 1.0).unwrap();
    let w = windowed_score(&t, &t, Metric::Bleu1, None, &spec, 30.0).unwrap();
    let centers: Vec<f64> = w.windows.iter().map(|x| x.0).collect();
    checks.push(("30 windows", w.windows.len() == 30));
    checks.push((
        "centers 0..29",
        centers == (0..30).map(f64::from).collect::<Vec<_>>(),
    ));
    checks.push(("windowed identical", w.mean == 1.0));
    let r = Transcript::from_points(&[0, 1, 2], &[1.0, 2.0, 3.0]).unwrap();
    let c = Transcript::from_points(&[3, 4, 5], &[21.0, 22.0, 23.0]).unwrap();
    checks.push((
        "windowed shifted disjoint",
        windowed_score(&c, &r, Metric::Bleu1, None, &spec, 45.0)
            .unwrap()
            .mean
            == 0.0,
    ));

    let nulls: Vec<f64> = (0..200).map(|i| i as f64 / 200.0).collect();
    checks.push(("p above all", p_value(2.0, &nulls).unwrap() == 0.0));
    checks.push((
        "p at max",
        p_value(199.0 / 200.0, &nulls).unwrap() >= 1.0 / 200.0,
    ));
    checks.push(("p below all", p_value(-1.0, &nulls).unwrap() == 1.0));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!(
                "{} metric examples exact; 30 s at stride 1 s gives {} windows",
                checks.len(),
                w.windows.len()
            )
        } else {
            format!("failed: {}", failed.join(", "))
        },
    )
}

fn random_volume(rng: &mut impl Rng) -> VolumeSeries {
    let ext = [
        rng.random_range(1..7),
        rng.random_range(1..7),
        rng.random_range(1..7),
    ];
    let frames = rng.random_range(1..6);
    let n = ext.iter().product::<usize>() * frames;
    let tr = rng.random_range(1..5000) as f64 / 1000.0;
    VolumeSeries::new(
        ext,
        tr,
        (0..n).map(|_| rng.random_range(-1e3..1e3)).collect(),
    )
    .unwrap()
}

fn random_checkpoint(rng: &mut impl Rng) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for i in 0..rng.random_range(0..6) {
        let rank = rng.random_range(0..4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
        let n = dims.iter().product();
        let mut t = NamedTensor::new(
            format!("layer{i}.{}", ["w", "b", "μ", "γ"][rng.random_range(0..4)]),
            dims,
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 10f64.powi(rng.random_range(-5..5)))
                .collect(),
        )
        .unwrap();
        t.dtype = if rng.random_bool(0.5) {
            Dtype::F32
        } else {
            Dtype::F64
        };
        ckpt.push(t);
    }
    ckpt
}

fn random_atlas(rng: &mut impl Rng) -> AtlasVolume {
    let ext = [
        rng.random_range(1..9),
        rng.random_range(1..9),
        rng.random_range(1..9),
    ];
    let n: usize = ext.iter().product();
    let regions = rng.random_range(0..=n.min(12)) as u32;
    let mut labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..=regions)).collect();
    for r in 1..=regions {
        labels[r as usize - 1] = r;
    }
    labels.shuffle(rng);
    AtlasVolume::new(ext, labels).unwrap()
}

fn random_vocab(rng: &mut impl Rng, v: usize) -> Vocab {
    let mut pool: Vec<char> = "abcXYZ019\t\\ \n日本語中文字符éß".chars().collect();
    pool.extend((0..200).map(|i| char::from_u32(0x5000 + i).unwrap()));
    pool.shuffle(rng);
    Vocab::new(pool[..v].to_vec()).unwrap()
}

fn manifest_reproduces() -> Result<usize, String> {
    let cfg = RunConfig {
        seed: 21,
        articles: 4,
        test_article: 3,
        chars_per_article: 40,
        extents: [12, 12, 12],
        subjects: 2,
        epochs: 1,
        lm_corpus: 500,
        ..desk()
    };
    let run = |cfg: &RunConfig, dir: &std::path::Path| -> Manifest {
        let mut m = Manifest::new(vec!["acceptance".into()], cfg);
        let world = build_world(cfg).unwrap();
        for (i, s) in world.sessions.iter().enumerate() {
            let p = dir.join(format!("subject-{i}.bvol"));
            write_bvol(&p, &s.volumes).unwrap();
            m.add_output(&p).unwrap();
        }
        let lm = dir.join("lm.ckpt");
        write_ckpt(&lm, &lm_to_ckpt(&train_lm(&world, cfg).unwrap())).unwrap();
        m.add_output(&lm).unwrap();
        let test = test_rows(&world.stimulus, cfg.test_article, cfg.delays).unwrap();
        let data = examples(
            &world.sessions[0],
            &train_rows(world.stimulus.grid.count, &test),
        );
        let init = EncoderParams::init(cfg.encoder(), 5).unwrap();
        let (enc, _) = train_encoder(&data, init, &cfg.train().unwrap()).unwrap();
        let p = dir.join("encoder.ckpt");
        write_ckpt(&p, &encoder_to_ckpt(&enc)).unwrap();
        m.add_output(&p).unwrap();
        m
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = run(&cfg, a.path());
    first.write(&a.path().join("manifest.json")).unwrap();
    let recorded = Manifest::read(&a.path().join("manifest.json")).unwrap();
    let again = run(&recorded.run_config().unwrap(), b.path());
    if again.output_digests() == first.output_digests() {
        Ok(first.outputs.len())
    } else {
        Err("outputs differ after reloading the manifest configuration".into())
    }
}

fn c12_formats() -> Outcome {
    let mut rng = stream(12, &[]);
    let mut bad = Vec::new();
    for i in 0..100 {
        let v = random_volume(&mut rng);
        let once = encode_bvol(&v).unwrap();
        if encode_bvol(&decode_bvol(&once, "r").unwrap()).unwrap() != once {
            bad.push(format!("bvol#{i}"));
        }

        let (n, d) = (rng.random_range(1..30), rng.random_range(1..9));
        let table = EmbeddingTable::new(
            n,
            d,
            (0..n * d).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .unwrap();
        let once = encode_embt(&table).unwrap();
        let vocab = random_vocab(&mut rng, n);
        let text = encode_vocab(&vocab);
        let back = decode_embt(&once, "r").unwrap();
        if encode_embt(&back).unwrap() != once
            || encode_vocab(&decode_vocab(&text, "r").unwrap()) != text
            || back.vocab_size() != decode_vocab(&text, "r").unwrap().len()
        {
            bad.push(format!("embt#{i}"));
        }

        let ckpt = random_checkpoint(&mut rng);
        let once = encode_ckpt(&ckpt).unwrap();
        if encode_ckpt(&decode_ckpt(&once, "r").unwrap()).unwrap() != once {
            bad.push(format!("ckpt#{i}"));
        }

        let atlas = random_atlas(&mut rng);
        let once = encode_atls(&atlas).unwrap();
        if encode_atls(&decode_atls(&once, "r").unwrap()).unwrap() != once {
            bad.push(format!("atls#{i}"));
        }
    }
    let manifest = manifest_reproduces();
    outcome(
        bad.is_empty() && manifest.is_ok(),
        format!(
            "100 randomized instances each of BVOL/EMBT(+vocab)/CKPT/ATLS: {} mismatches; manifest rerun: {}",
            bad.len(),
            match &manifest {
                Ok(n) => format!("{n} outputs bit-identical"),
                Err(e) => e.clone(),
            }
        ),
    )
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "gradient correctness", c1_gradients),
    (2, "KL exactness", c2_kl),
    (3, "Lanczos fidelity", c3_lanczos),
    (4, "beam-oracle equivalence", c4_beam_oracle),
    (5, "nucleus filter", c5_nucleus),
    (6, "within-subject decoding", c6_within),
    (7, "cross-subject decoding", c7_cross),
    (8, "bottleneck ablation", c8_ablation),
    (9, "rate model", c9_rate),
    (10, "attribution", c10_attribution),
    (11, "metric unit suite", c11_metrics),
    (12, "format round-trips", c12_formats),
];

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    // Listing mode used by test runners.
    if std::env::args().any(|a| a == "--list") {
        for (n, name, _) in CRITERIA {
            println!("criterion_{n:02}_{}: test", name.replace([' ', '-'], "_"));
        }
        return ExitCode::SUCCESS;
    }
    std::panic::set_hook(Box::new(|_| {}));
    let total = Instant::now();
    let mut failures = 0;
    let mut ran = 0;
    for (n, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            outcome(false, format!("panicked: {msg}"))
        });
        failures += !result.pass as usize;
        report(&format!(
            "criterion {n:>2} {:<24} {}  {} [{}]",
            name,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            secs(t.elapsed())
        ));
    }
    report(&format!(
        "acceptance: {} of {ran} criteria passed in {}",
        ran - failures,
        secs(total.elapsed())
    ));
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
