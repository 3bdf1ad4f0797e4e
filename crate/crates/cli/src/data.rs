//! Layout of a synthesized data directory and the readers the pipeline
//! stages share.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use brainchar::attribution::AtlasVolume;
use brainchar::config::RunConfig;
use brainchar::encoder::Example;
use brainchar::eval::IdfTable;
use brainchar::features::{
    build_targets, AcquisitionGrid, EmbeddingTable, Transcript, WindowedContext,
};
use brainchar::formats::{
    read_atls, read_bvol, read_embt, read_transcript, read_vocab, vocab_path,
};
use brainchar::protocol::segment_rows;
use brainchar::synth::ArticleSpan;
use brainchar::vocab::{CharFilter, Vocab};
use brainchar::{Error, VolumeSeries};

use crate::run::{CliError, CliResult, Ctx};

pub const STIMULUS: &str = "stimulus.tsv";
pub const ARTICLES: &str = "articles.tsv";
pub const TEXTS: &str = "texts.txt";
pub const AUXILIARY: &str = "auxiliary.txt";
pub const EMBEDDINGS: &str = "embeddings.embt";
pub const ATLAS: &str = "atlas.atls";

pub fn subject_file(i: usize) -> String {
    format!("subject-{i}.bvol")
}

pub fn encode_articles(spans: &[ArticleSpan]) -> String {
    let mut s = String::from("article\tstart\tend\n");
    for (i, a) in spans.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{}\t{}", a.start, a.end);
    }
    s
}

fn decode_articles(text: &str, path: &str) -> brainchar::Result<Vec<ArticleSpan>> {
    let bad = |line: usize, msg: String| Error::ParseLine {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "article\tstart\tend")) => {}
        _ => return Err(bad(1, "expected header article<TAB>start<TAB>end".into())),
    }
    let mut spans = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        let parsed = match f.as_slice() {
            [idx, start, end] => idx
                .parse::<usize>()
                .ok()
                .filter(|&k| k == spans.len())
                .and(start.parse::<f64>().ok().zip(end.parse::<f64>().ok())),
            _ => None,
        };
        let (start, end) = parsed
            .filter(|(s, e)| s.is_finite() && e >= s)
            .ok_or_else(|| bad(i + 1, format!("malformed article row {line:?}")))?;
        spans.push(ArticleSpan { start, end });
    }
    Ok(spans)
}

/// A directory written by `synth`; every read is recorded as a manifest input.
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: &Path) -> CliResult<Self> {
        if !root.is_dir() {
            return Err(CliError::Usage(format!(
                "{}: not a directory",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn transcript(&self, ctx: &mut Ctx) -> CliResult<Transcript> {
        Ok(read_transcript(&ctx.input(&self.path(STIMULUS))?)?)
    }

    pub fn articles(&self, ctx: &mut Ctx) -> CliResult<Vec<ArticleSpan>> {
        let p = ctx.input(&self.path(ARTICLES))?;
        Ok(decode_articles(
            &std::fs::read_to_string(&p)?,
            &p.display().to_string(),
        )?)
    }

    pub fn vocab(&self, ctx: &mut Ctx) -> CliResult<Vocab> {
        Ok(read_vocab(
            &ctx.input(&vocab_path(&self.path(EMBEDDINGS)))?,
        )?)
    }

    pub fn embeddings(&self, ctx: &mut Ctx) -> CliResult<EmbeddingTable> {
        self.vocab(ctx)?;
        Ok(read_embt(&ctx.input(&self.path(EMBEDDINGS))?)?)
    }

    pub fn provider(&self, ctx: &mut Ctx) -> CliResult<WindowedContext> {
        let mut p = WindowedContext::new(Arc::new(self.embeddings(ctx)?));
        p.window = ctx.cfg.context_window;
        p.decay = ctx.cfg.context_decay;
        Ok(p)
    }

    pub fn atlas(&self, ctx: &mut Ctx) -> CliResult<AtlasVolume> {
        Ok(read_atls(&ctx.input(&self.path(ATLAS))?)?)
    }

    pub fn session(&self, ctx: &mut Ctx, subject: usize) -> CliResult<VolumeSeries> {
        let v = read_bvol(&ctx.input(&self.path(&subject_file(subject)))?)?;
        if (v.tr() - ctx.cfg.tr).abs() > 5e-4 {
            return Err(CliError::Core(Error::Data(format!(
                "subject {subject}: TR {} s in file, {} s configured",
                v.tr(),
                ctx.cfg.tr
            ))));
        }
        Ok(v)
    }

    fn lines(&self, ctx: &mut Ctx, name: &str, vocab: &Vocab) -> CliResult<Vec<Vec<u32>>> {
        let p = ctx.input(&self.path(name))?;
        let text = std::fs::read_to_string(&p)?;
        text.lines()
            .enumerate()
            .map(|(i, l)| {
                vocab.encode(l, &CharFilter::keep_all()).map_err(|e| {
                    CliError::Core(Error::ParseLine {
                        path: p.display().to_string(),
                        line: i + 1,
                        msg: e.to_string(),
                    })
                })
            })
            .collect()
    }

    /// Article texts except the held-out one, plus the auxiliary corpus.
    pub fn lm_documents(&self, ctx: &mut Ctx, vocab: &Vocab) -> CliResult<Vec<Vec<u32>>> {
        let texts = self.lines(ctx, TEXTS, vocab)?;
        let held = ctx.cfg.test_article;
        if held >= texts.len() {
            return Err(CliError::Usage(format!(
                "test_article {held} outside {} articles",
                texts.len()
            )));
        }
        let mut docs: Vec<Vec<u32>> = texts
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != held)
            .map(|(_, t)| t)
            .collect();
        docs.extend(
            self.lines(ctx, AUXILIARY, vocab)?
                .into_iter()
                .filter(|d| !d.is_empty()),
        );
        Ok(docs)
    }

    pub fn idf(&self, ctx: &mut Ctx, vocab: &Vocab) -> CliResult<IdfTable> {
        let docs = self.lm_documents(ctx, vocab)?;
        Ok(IdfTable::from_documents(docs.iter().map(|d| d.as_slice())))
    }
}

/// Held-out rows of the configured test article, and the complement.
pub fn split_rows(
    articles: &[ArticleSpan],
    grid: &AcquisitionGrid,
    cfg: &RunConfig,
) -> CliResult<(Range<usize>, Vec<usize>)> {
    let span = articles.get(cfg.test_article).ok_or_else(|| {
        CliError::Usage(format!(
            "test_article {} outside {} articles",
            cfg.test_article,
            articles.len()
        ))
    })?;
    let test = segment_rows(span, grid, cfg.delays);
    let train = (0..grid.count).filter(|t| !test.contains(t)).collect();
    Ok((test, train))
}

/// Volume and semantic target for each listed row.
pub fn examples(
    volumes: &VolumeSeries,
    transcript: &Transcript,
    provider: &WindowedContext,
    cfg: &RunConfig,
    rows: &[usize],
) -> CliResult<Vec<Example>> {
    let grid = volumes.grid()?;
    let targets = build_targets(transcript, provider, &grid, &cfg.targets())?;
    let d = targets.dims()[1];
    Ok(rows
        .iter()
        .map(|&t| Example {
            volume: volumes.volume(t),
            target: targets.data()[t * d..(t + 1) * d].to_vec(),
        })
        .collect())
}

pub fn true_counts(transcript: &Transcript, grid: &AcquisitionGrid) -> Vec<f64> {
    transcript
        .counts_per_acquisition(grid)
        .into_iter()
        .map(|c| c as f64)
        .collect()
}

pub fn encode_sequences(seqs: &[Vec<u32>], vocab: &Vocab) -> String {
    let mut s = String::new();
    for q in seqs {
        s.push_str(&vocab.decode(q));
        s.push('\n');
    }
    s
}

pub fn decode_sequences(text: &str, path: &str, vocab: &Vocab) -> brainchar::Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            vocab
                .encode(l, &CharFilter::keep_all())
                .map_err(|e| Error::ParseLine {
                    path: path.to_string(),
                    line: i + 1,
                    msg: e.to_string(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn articles_round_trip() {
        let spans = vec![
            ArticleSpan {
                start: 0.0,
                end: 12.25,
            },
            ArticleSpan {
                start: 21.5,
                end: 40.0,
            },
        ];
        let back = decode_articles(&encode_articles(&spans), "a").unwrap();
        assert_eq!(back, spans);
        let err = decode_articles("article\tstart\tend\n0\t1\tx\n", "a").unwrap_err();
        assert!(err.to_string().contains("a:2"), "{err}");
    }
}
