//! Run configuration: one TOML file, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use zner_core::{ConditioningMode, KeySampler};

use crate::Failure;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    /// Directory holding ZNRK files; defaults to `output`.
    pub embeddings: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Extra TREC run files to include in `eval`.
    #[serde(default)]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub dim: usize,
    pub k_values: Vec<usize>,
    pub bucket_count: usize,
    pub bucket_relation: Option<String>,
    pub sampler: String,
    pub samplers: Vec<String>,
    pub mode: String,
    pub modes: Vec<String>,
    pub seed: u64,
    pub workers: usize,
    pub bm25: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            dim: 64,
            k_values: vec![20, 100],
            bucket_count: 5,
            bucket_relation: None,
            sampler: "full".into(),
            samplers: vec!["full".into(), "random".into(), "max-idf".into()],
            mode: "entity-in-context".into(),
            modes: ConditioningMode::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            seed: 0,
            workers: 1,
            bm25: true,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    paths: Paths,
    #[serde(default)]
    run: RunSection,
}

/// Validated configuration with paths resolved against the config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub paths: Paths,
    pub dim: usize,
    pub k_values: Vec<usize>,
    pub bucket_count: usize,
    pub bucket_relation: Option<String>,
    pub sampler: KeySampler,
    pub samplers: Vec<KeySampler>,
    pub mode: ConditioningMode,
    pub modes: Vec<ConditioningMode>,
    pub seed: u64,
    pub workers: usize,
    pub bm25: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub dim: Option<usize>,
    pub mode: Option<String>,
    pub sampler: Option<String>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_raw(raw, base, overrides)
    }

    fn from_raw(raw: RawConfig, base: &Path, o: &Overrides) -> Result<Self, Failure> {
        let resolve = |p: Option<PathBuf>| p.map(|p| if p.is_absolute() { p } else { base.join(p) });
        let mut paths = raw.paths;
        paths.corpus = resolve(paths.corpus);
        paths.annotations = resolve(paths.annotations);
        paths.templates = resolve(paths.templates);
        paths.questions = resolve(paths.questions);
        paths.output = match &o.output {
            Some(out) => Some(out.clone()),
            None => resolve(paths.output),
        };
        paths.embeddings = resolve(paths.embeddings);
        paths.runs = paths.runs.into_iter().map(|p| resolve(Some(p)).unwrap()).collect();

        let run = raw.run;
        let seed = o.seed.unwrap_or(run.seed);
        let parse_mode = |s: &str| {
            s.parse::<ConditioningMode>()
                .map_err(|_| Failure::config(format!("unknown conditioning mode {s:?}")))
        };
        let parse_sampler = |s: &str| {
            KeySampler::parse_with_seed(s, seed).map_err(|_| Failure::config(format!("unknown sampler {s:?}")))
        };

        let k_values = run.k_values;
        if k_values.is_empty() || k_values.contains(&0) {
            return Err(Failure::config("k_values must be non-empty and every k must be at least 1"));
        }
        if k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Failure::config("k_values must be strictly ascending"));
        }
        let dim = o.dim.unwrap_or(run.dim);
        if dim == 0 {
            return Err(Failure::config("dim must be at least 1"));
        }
        if run.bucket_count == 0 {
            return Err(Failure::config("bucket_count must be at least 1"));
        }
        Ok(Self {
            paths,
            dim,
            k_values,
            bucket_count: run.bucket_count,
            bucket_relation: run.bucket_relation,
            sampler: parse_sampler(o.sampler.as_deref().unwrap_or(&run.sampler))?,
            samplers: run.samplers.iter().map(|s| parse_sampler(s)).collect::<Result<_, _>>()?,
            mode: parse_mode(o.mode.as_deref().unwrap_or(&run.mode))?,
            modes: run.modes.iter().map(|s| parse_mode(s)).collect::<Result<_, _>>()?,
            seed,
            workers: o.workers.unwrap_or(run.workers).max(1),
            bm25: run.bm25,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn embeddings_dir(&self) -> PathBuf {
        self.paths.embeddings.clone().unwrap_or_else(|| self.output_dir())
    }

    pub fn max_k(&self) -> usize {
        *self.k_values.last().unwrap()
    }
}

/// Resolve a required input path, failing when unset or missing.
pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    let p = path
        .as_ref()
        .ok_or_else(|| Failure::config(format!("paths.{what} is not set")))?;
    if !p.exists() {
        return Err(Failure::config(format!("{what} path {} does not exist", p.display())));
    }
    Ok(p.clone())
}
