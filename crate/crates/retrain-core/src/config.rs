//! Run configuration: one structured file plus flag overrides drives every
//! CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus, load_queries, Datastore, Query};
use crate::env::{EnvironmentClient, MockEnv, MockEnvSpec, RemoteEnv, RemoteEnvConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub train_queries: PathBuf,
    pub test_queries: PathBuf,
    /// Mock-environment fixture (helpful tokens per query).
    pub mock_fixture: PathBuf,
    pub index: PathBuf,
    pub pools: PathBuf,
    pub cache: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.jsonl".into(),
            train_queries: "data/train_queries.jsonl".into(),
            test_queries: "data/test_queries.jsonl".into(),
            mock_fixture: "data/helpful_tokens.jsonl".into(),
            index: "artifacts/bot_index.bin".into(),
            pools: "artifacts/pools.jsonl".into(),
            cache: "artifacts/prob_cache.jsonl".into(),
            checkpoint_dir: "artifacts/checkpoints".into(),
            metrics: "artifacts/metrics.jsonl".into(),
            report: "artifacts/report.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSettings {
    pub backend: Backend,
    pub epsilon: f64,
    pub gen_threshold: f64,
    pub remote: Option<RemoteEnvConfig>,
}

impl Default for EnvSettings {
    fn default() -> Self {
        Self { backend: Backend::Mock, epsilon: 0.05, gen_threshold: 0.5, remote: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub shots: usize,
    pub eval_every: usize,
    pub dataset_id: String,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { shots: 1, eval_every: 4, dataset_id: "default".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub env: EnvSettings,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub vocab_max_size: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if config.vocab_max_size == 0 {
            config.vocab_max_size = 50_000;
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Loaded data plus the environment, ready for any subcommand.
pub struct Loaded {
    pub datastore: Datastore,
    pub train_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
    pub env: Box<dyn EnvironmentClient>,
}

pub fn load_all(config: &RunConfig) -> Result<Loaded> {
    let mut train_queries = load_queries(&config.paths.train_queries)?;
    let mut test_queries = load_queries(&config.paths.test_queries)?;
    let mut all = train_queries.clone();
    all.extend(test_queries.iter().cloned());
    let datastore = load_corpus(&config.paths.corpus, &mut all, config.vocab_max_size)?;
    let (tok_train, tok_test) = all.split_at(train_queries.len());
    for (q, t) in train_queries.iter_mut().zip(tok_train) {
        q.token_ids = t.token_ids.clone();
    }
    for (q, t) in test_queries.iter_mut().zip(tok_test) {
        q.token_ids = t.token_ids.clone();
    }

    let env: Box<dyn EnvironmentClient> = match config.env.backend {
        Backend::Mock => {
            let fixture = MockEnv::load_fixture(&config.paths.mock_fixture)?;
            let spec = MockEnvSpec {
                epsilon: config.env.epsilon,
                gen_threshold: config.env.gen_threshold,
            };
            Box::new(MockEnv::new(spec, &datastore, &all, &fixture)?)
        }
        Backend::Remote => {
            let remote = config.env.remote.clone().ok_or_else(|| {
                Error::Config("remote backend selected but [env.remote] is missing".into())
            })?;
            Box::new(RemoteEnv::new(remote)?)
        }
    };
    Ok(Loaded { datastore, train_queries, test_queries, env })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut config = RunConfig::default();
        config.vocab_max_size = 123;
        config.train = TrainConfig::desk_scale();
        config.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.vocab_max_size, 123);
        assert_eq!(loaded.train.batch_size, 16);
        assert_eq!(loaded.eval.eval_every, 4);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nseed = 7\n").unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(loaded.train.seed, 7);
        assert_eq!(loaded.train.epochs, 80);
        assert_eq!(loaded.vocab_max_size, 50_000);
        assert_eq!(loaded.env.backend, Backend::Mock);
    }
}
