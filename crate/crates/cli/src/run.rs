use std::fmt;
use std::path::{Path, PathBuf};

use brainchar::config::RunConfig;
use brainchar::formats::write_atomic;
use brainchar::manifest::Manifest;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(brainchar::Error),
    /// Inputs parsed but failed a comparison or check.
    Mismatch(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Mismatch(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(e) if e.is_data() => 2,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Mismatch(m) | CliError::Numeric(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<brainchar::Error> for CliError {
    fn from(e: brainchar::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Resolved configuration, output directory and the manifest being built.
pub struct Ctx {
    pub cfg: RunConfig,
    out: Option<PathBuf>,
    pub manifest: Manifest,
}

impl Ctx {
    pub fn new(cfg: RunConfig, out: Option<PathBuf>, command: Vec<String>) -> CliResult<Self> {
        if let Some(dir) = &out {
            std::fs::create_dir_all(dir)?;
        }
        let mut manifest = Manifest::new(command, &cfg);
        manifest.seeds.insert("seed".into(), cfg.seed);
        Ok(Self { cfg, out, manifest })
    }

    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    /// Record an input file; missing files are usage errors.
    pub fn input(&mut self, path: &Path) -> CliResult<PathBuf> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("{}: no such file", path.display())));
        }
        self.manifest.add_input(path)?;
        Ok(path.to_path_buf())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.out_dir()?.join(name);
        write_atomic(&path, bytes)?;
        self.manifest.add_output(&path)?;
        Ok(path)
    }

    /// Write with a format-specific writer, then record the file.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&Path) -> brainchar::Result<()>,
    ) -> CliResult<PathBuf> {
        let path = self.out_dir()?.join(name);
        f(&path)?;
        self.manifest.add_output(&path)?;
        Ok(path)
    }

    pub fn record_output(&mut self, path: &Path) -> CliResult<()> {
        self.manifest.add_output(path)?;
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.into(), value);
    }

    pub fn finish(mut self, metrics: serde_json::Value) -> CliResult<Manifest> {
        self.manifest.metrics = metrics;
        if let Some(dir) = &self.out {
            self.manifest.write(&dir.join(MANIFEST))?;
        }
        Ok(self.manifest)
    }
}
