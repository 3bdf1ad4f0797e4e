//! Run configuration: a flat `key = value` file with typed, validated keys.
//! Environment variables `BRAINCHAR_<KEY>` override file values.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::beam::{DecodeConfig, Expansion, NullConfig};
use crate::encoder::{EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{Metric, WindowSpec};
use crate::features::TargetConfig;
use crate::lm::NucleusConfig;
use crate::rate::{RateConfig, VoxelMask};

pub const ENV_PREFIX: &str = "BRAINCHAR_";

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("{s:?}: {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(f64, usize, u64, u32);

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

impl Value for [usize; 3] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v = Vec::<usize>::parse_value(s)?;
        v.try_into()
            .map_err(|v: Vec<usize>| format!("expected 3 values, got {}", v.len()))
    }
    fn render(&self) -> String {
        self.to_vec().render()
    }
}

impl Value for Metric {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Metric::from_str(s).map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Expansion {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sampled" => Ok(Expansion::Sampled),
            "exhaustive" => Ok(Expansion::Exhaustive),
            _ => Err(format!("{s:?}: expected sampled or exhaustive")),
        }
    }
    fn render(&self) -> String {
        match self {
            Expansion::Sampled => "sampled",
            Expansion::Exhaustive => "exhaustive",
        }
        .into()
    }
}

impl Value for VoxelMask {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(VoxelMask::All);
        }
        if let Some(n) = s.strip_prefix("top:") {
            return usize::parse_value(n).map(VoxelMask::TopVariance);
        }
        if let Some(v) = s.strip_prefix("voxels:") {
            return Vec::<usize>::parse_value(v).map(VoxelMask::Explicit);
        }
        Err(format!("{s:?}: expected all, top:N or voxels:i,j,..."))
    }
    fn render(&self) -> String {
        match self {
            VoxelMask::All => "all".into(),
            VoxelMask::TopVariance(n) => format!("top:{n}"),
            VoxelMask::Explicit(v) => format!("voxels:{}", v.render()),
        }
    }
}

macro_rules! run_config {
    ($( $(#[$doc:meta])* $key:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of the pipeline. Keys match field names.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( $(#[$doc])* pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $( stringify!($key) => {
                        self.$key = <$ty as Value>::parse_value(value.trim())?;
                    } )*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// `(key, value)` for every key, in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($key), Value::render(&self.$key)), )*]
            }
        }
    };
}

run_config! {
    seed: u64 = 0,
    runs: usize = 5,

    lr: f64 = 1e-5,
    weight_decay: f64 = 0.01,
    batch: usize = 128,
    epochs: usize = 100,
    beta: f64 = 1.0,
    kl_scale: f64 = 0.01,
    clip_min: f64 = -1.0,
    clip_max: f64 = 1.0,
    filters: [usize; 3] = [8, 16, 32],
    kernels: [usize; 3] = [3, 1, 1],
    logvar_clamp: f64 = 10.0,

    tr: f64 = 1.5,
    delays: usize = 5,
    weights: Vec<f64> = vec![1.0, 0.7, 0.5, 0.3, 0.1],
    context_window: usize = 6,
    context_decay: f64 = 0.7,
    lobes: usize = 3,

    /// Beam width.
    k: usize = 200,
    rho: f64 = 0.9,
    eta: f64 = 0.1,
    expansions: usize = 8,
    lookahead: usize = 1,
    expansion: Expansion = Expansion::Sampled,
    lm_order: usize = 4,
    /// Characters of auxiliary text added to the language-model corpus.
    lm_corpus: usize = 20000,

    ridge_lambdas: Vec<f64> = vec![1.0, 10.0, 100.0, 1e3, 1e4],
    ridge_folds: usize = 5,
    rate_mask: VoxelMask = VoxelMask::TopVariance(256),

    metric: Metric = Metric::SeqCosine,
    /// Scoring window width, seconds.
    window: f64 = 20.0,
    stride: f64 = 1.0,
    nulls: usize = 200,
    null_beam: usize = 10,

    /// Zero-based index of the held-out article.
    test_article: usize = 13,
    subjects: usize = 4,

    vocab: usize = 50,
    topics: usize = 5,
    dim: usize = 16,
    stay: f64 = 0.97,
    spread: f64 = 0.35,
    concentration: f64 = 0.3,
    articles: usize = 20,
    chars_per_article: usize = 130,
    rate_min: f64 = 1.0,
    rate_max: f64 = 4.0,
    phrase_min: usize = 4,
    phrase_max: usize = 20,
    pause_min: f64 = 0.2,
    pause_max: f64 = 3.0,
    gap: f64 = 9.0,
    extents: [usize; 3] = [16, 16, 16],
    regions: u32 = 10,
    signal_regions: Vec<u32> = vec![7],
    /// Atlas label carrying the speech-rate channel; 0 disables it.
    rate_region: u32 = 2,
    smoothness: f64 = 1.5,
    noise: f64 = 1.0,
    gain: f64 = 1.0,
    epsilon: f64 = 0.1,
    rate_gain: f64 = 1.0,
}

impl RunConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ParseLine {
                path: path.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(k.trim(), v).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// Apply `BRAINCHAR_<KEY>` overrides; unknown `BRAINCHAR_` names are rejected.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut env: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|s| (s.to_ascii_lowercase(), v.as_ref().to_string()))
            })
            .collect();
        env.sort();
        for (k, v) in env {
            self.set(&k, &v).map_err(|m| {
                Error::config(format!("{ENV_PREFIX}{}: {m}", k.to_ascii_uppercase()))
            })?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.weights.len() != self.delays {
            return bad(format!(
                "{} delay weights for {} delays",
                self.weights.len(),
                self.delays
            ));
        }
        if self.runs == 0 || self.subjects == 0 {
            return bad("runs and subjects must be at least 1".into());
        }
        if self.test_article >= self.articles {
            return bad(format!(
                "test_article {} outside {} articles",
                self.test_article, self.articles
            ));
        }
        if !(self.rate_min > 0.0 && self.rate_min <= self.rate_max) {
            return bad("need 0 < rate_min <= rate_max".into());
        }
        if self.phrase_min == 0 || self.phrase_min > self.phrase_max {
            return bad("need 1 <= phrase_min <= phrase_max".into());
        }
        if !(0.0 <= self.pause_min && self.pause_min <= self.pause_max) {
            return bad("need 0 <= pause_min <= pause_max".into());
        }
        if self.lm_order == 0 || self.context_window == 0 {
            return bad("lm_order and context_window must be at least 1".into());
        }
        self.train()?.validate()?;
        self.decode()?.validate()?;
        WindowSpec::new(self.window, self.stride)?;
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            input: self.extents,
            filters: self.filters,
            kernels: self.kernels,
            latent_dim: self.dim,
            logvar_clamp: self.logvar_clamp,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch: self.batch,
            epochs: self.epochs,
            beta: self.beta,
            kl_scale: self.kl_scale,
            clip: (self.clip_min, self.clip_max),
            seed: self.seed,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn nucleus(&self) -> NucleusConfig {
        NucleusConfig {
            rho: self.rho,
            eta: self.eta,
        }
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        let d = DecodeConfig {
            beam: self.k,
            nucleus: self.nucleus(),
            expansions: self.expansions,
            seed: self.seed,
            lookahead: self.lookahead,
            expansion: self.expansion,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn null_config(&self) -> NullConfig {
        NullConfig {
            count: self.nulls,
            beam: self.null_beam,
            nucleus: self.nucleus(),
            expansions: self.expansions,
            seed: self.seed,
        }
    }

    pub fn targets(&self) -> TargetConfig {
        TargetConfig {
            lobes: self.lobes,
            delay_weights: self.weights.clone(),
        }
    }

    pub fn rate(&self) -> RateConfig {
        RateConfig {
            delays: self.delays,
            lambdas: self.ridge_lambdas.clone(),
            folds: self.ridge_folds,
            mask: self.rate_mask.clone(),
        }
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.window, self.stride)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
