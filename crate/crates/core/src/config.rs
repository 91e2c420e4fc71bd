//! Run configuration: one TOML document with `[model]`, `[train]`, `[data]`,
//! `[decode]`, `[compress]` and `[output]` sections. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, load_corpus, CorpusFiles, ParallelCorpus, Task, Vocab};
use crate::decoding::Averaging;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::training::TrainConfig;
use crate::transformer::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
    pub compress: CompressConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            decode: DecodeConfig::default(),
            compress: CompressConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<CorpusPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<CorpusPaths>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub min_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            synthetic: None,
            min_freq: 1,
        }
    }
}

/// Either `tsv`, `src` + `tgt`, or `features` (a list file) + `tgt`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tsv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tgt: Option<PathBuf>,
}

impl CorpusPaths {
    pub fn files(&self) -> Result<CorpusFiles<'_>> {
        match (&self.tsv, &self.src, &self.features, &self.tgt) {
            (Some(t), None, None, None) => Ok(CorpusFiles::Tsv(t)),
            (None, Some(s), None, Some(t)) => Ok(CorpusFiles::Parallel { src: s, tgt: t }),
            (None, None, Some(f), Some(t)) => Ok(CorpusFiles::Features { list: f, tgt: t }),
            _ => Err(Error::Config(
                "corpus needs exactly one of: tsv; src and tgt; features and tgt".into(),
            )),
        }
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.tsv, &mut self.src, &mut self.features, &mut self.tgt].into_iter().flatten() {
            *p = resolve_path(base, p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub task: Task,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            vocab: 20,
            min_len: 3,
            max_len: 10,
            train_size: 2000,
            dev_size: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Beam width; 1 or absent means greedy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam: Option<usize>,
    /// Posterior draws averaged at each step; absent means the model's own count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub length_penalty: f64,
    /// Output length cap; absent means the model's target limit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    pub averaging: Averaging,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: None,
            samples: None,
            length_penalty: 1.0,
            max_len: None,
            averaging: Averaging::Logits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    /// Confidence multiplier on the largest sigma when sizing the exponent range.
    pub z: f64,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self { z: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.slwt"),
            log: None,
        }
    }
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Training and development sets plus their vocabularies.
pub struct RunData {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Parse `path`, apply `key=value` overrides (dotted keys, TOML values;
    /// bare words are taken as strings), resolve relative paths against the
    /// file's directory and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for c in [&mut self.data.train, &mut self.data.dev].into_iter().flatten() {
            c.resolve(base);
        }
        self.output.checkpoint = resolve_path(base, &self.output.checkpoint);
        if let Some(l) = &mut self.output.log {
            *l = resolve_path(base, l);
        }
    }

    /// Checks everything that does not depend on the data; vocabulary sizes
    /// and feature width are filled in from the corpus.
    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        if m.src_vocab.is_none() && m.feature_dim.is_none() {
            m.src_vocab = Some(5);
        }
        if m.tgt_vocab <= 4 {
            m.tgt_vocab = 5;
        }
        m.validate()?;
        self.train.validate()?;
        if self.data.synthetic.is_some() == self.data.train.is_some() {
            return Err(Error::Config("[data] needs exactly one of `train` or `synthetic`".into()));
        }
        if self.data.train.is_some() && self.data.dev.is_none() {
            return Err(Error::Config("[data] `train` needs a matching `dev` corpus".into()));
        }
        for c in [&self.data.train, &self.data.dev].into_iter().flatten() {
            c.files()?;
        }
        if let Some(s) = &self.data.synthetic {
            if s.vocab < 5 || s.min_len == 0 || s.min_len > s.max_len || s.train_size == 0 || s.dev_size == 0 {
                return Err(Error::Config("degenerate [data.synthetic] settings".into()));
            }
        }
        if self.data.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if self.decode.beam == Some(0) || self.decode.samples == Some(0) || self.decode.max_len == Some(0) {
            return Err(Error::Config("[decode] beam, samples and max_len must be positive".into()));
        }
        if !(self.compress.z >= 0.0) || !self.compress.z.is_finite() {
            return Err(Error::Config("[compress] z must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Load or generate the corpora. Vocabularies come from the training
    /// split only.
    pub fn load_data(&self) -> Result<RunData> {
        if let Some(s) = &self.data.synthetic {
            let train = gen_synthetic(s.task, s.vocab, s.min_len, s.max_len, s.train_size, derive_seed(self.seed, &[1]))?;
            let dev = gen_synthetic(s.task, s.vocab, s.min_len, s.max_len, s.dev_size, derive_seed(self.seed, &[2]))?;
            return Ok(RunData { train, dev });
        }
        let (Some(tr), Some(dv)) = (&self.data.train, &self.data.dev) else {
            return Err(Error::Config("[data] has no corpus".into()));
        };
        let train = load_corpus(tr.files()?, None, self.data.min_freq)?;
        let vocabs: (Option<&Vocab>, &Vocab) = (train.src_vocab.as_ref(), &train.tgt_vocab);
        let dev = load_corpus(dv.files()?, Some(vocabs), self.data.min_freq)?;
        Ok(RunData { train, dev })
    }

    /// Model configuration with vocabulary sizes and feature width taken
    /// from the corpus and length limits widened to fit the training data.
    pub fn model_for(&self, corpus: &ParallelCorpus) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        match &corpus.src_vocab {
            Some(v) => {
                m.src_vocab = Some(v.len());
                m.feature_dim = None;
            }
            None => {
                m.src_vocab = None;
                m.feature_dim = Some(corpus.feature_dim().ok_or(Error::Empty("corpus has no pairs".into()))?);
            }
        }
        m.tgt_vocab = corpus.tgt_vocab.len();
        m.validate()?;
        Ok(m)
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value = raw.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().unwrap();
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

/// Apply overrides to an in-memory configuration.
pub fn with_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = cfg.to_toml_string().parse().expect("own output parses");
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let out: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    out.validate()?;
    Ok(out)
}
