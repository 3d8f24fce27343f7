//! Operator configuration, read from `rade.config.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, CorpusError};
use crate::graph::{build_graph, GraphError};
use crate::pipeline::{Layout, OpsTest, OpsTestConfig, Pipeline};
use crate::target::MatrixConfig;

pub const CONFIG_FILE: &str = "rade.config.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("malformed config {0}: {1}")]
    Parse(PathBuf, String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn default_width() -> usize {
    1
}

fn default_timeout() -> u64 {
    600
}

/// The config file as written; paths may be relative to its directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub corpus_root: PathBuf,
    pub workdir: PathBuf,
    pub integration_root: PathBuf,
    pub deploy_root: PathBuf,
    pub repo_path: PathBuf,
    pub matrix: MatrixConfig,
    #[serde(default)]
    pub ops_tests: Vec<OpsTestConfig>,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_timeout")]
    pub phase_timeout_s: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrchestratorConfig {
    pub corpus_root: PathBuf,
    pub workdir: PathBuf,
    pub integration_root: PathBuf,
    pub deploy_root: PathBuf,
    pub repo_path: PathBuf,
    pub matrix: MatrixConfig,
    pub ops_tests: Vec<OpsTest>,
    pub width: usize,
    pub phase_timeout: Duration,
}

impl OrchestratorConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let file: ConfigFile =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(path.to_path_buf(), e.to_string()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| ConfigError::Read(base.to_path_buf(), e))?;
        Self::from_file(file, &base)
    }

    /// Resolves relative paths against `base` and checks the invariants.
    pub fn from_file(file: ConfigFile, base: &Path) -> Result<Self, ConfigError> {
        let ops_tests = file
            .ops_tests
            .iter()
            .map(|c| OpsTest::from_config(c, base))
            .collect::<Result<_, _>>()
            .map_err(ConfigError::Invalid)?;
        let cfg = OrchestratorConfig {
            corpus_root: base.join(file.corpus_root),
            workdir: base.join(file.workdir),
            integration_root: base.join(file.integration_root),
            deploy_root: base.join(file.deploy_root),
            repo_path: base.join(file.repo_path),
            matrix: file.matrix,
            ops_tests,
            width: file.width,
            phase_timeout: Duration::from_secs(file.phase_timeout_s),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let paths = self.paths();
        for (i, (a, pa)) in paths.iter().enumerate() {
            for (b, pb) in &paths[i + 1..] {
                if pa == pb {
                    return Err(ConfigError::Invalid(format!("{a} and {b} are the same path {}", pa.display())));
                }
            }
        }
        if self.width == 0 {
            return Err(ConfigError::Invalid("width must be at least 1".into()));
        }
        if self.phase_timeout.is_zero() {
            return Err(ConfigError::Invalid("phase_timeout_s must be positive".into()));
        }
        self.matrix.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.corpus_root.is_dir() {
            return Err(ConfigError::Invalid(format!("corpus_root {} is not a directory", self.corpus_root.display())));
        }
        Ok(())
    }

    pub fn paths(&self) -> [(&'static str, &Path); 5] {
        [
            ("corpus_root", &self.corpus_root),
            ("workdir", &self.workdir),
            ("integration_root", &self.integration_root),
            ("deploy_root", &self.deploy_root),
            ("repo_path", &self.repo_path),
        ]
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.workdir, &self.integration_root, &self.deploy_root)
    }

    /// Loads the corpus, resolves the graph and assembles a pipeline.
    pub fn pipeline(&self) -> Result<Pipeline, ConfigError> {
        let corpus = load_corpus(&self.corpus_root)?;
        let graph = build_graph(&corpus)?;
        let mut p = Pipeline::new(corpus, graph, self.matrix.clone(), self.layout());
        p.ops_tests = self.ops_tests.clone();
        p.phase_timeout = self.phase_timeout;
        Ok(p)
    }
}
