//! Corpora, vocabularies, feature sequences and synthetic tasks.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Matrix;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;
const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Vocabulary from an explicit token list; the first four entries must be
    /// the reserved symbols.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[..RESERVED].iter().zip(RESERVED_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Format("vocabulary must start with <pad> <s> </s> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Build from training sentences: tokens with count ≥ `min_freq`, ordered
    /// by descending frequency then lexicographically.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED_TOKENS.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix is always present")
    }

    /// `<pad> <s> </s> <unk> w4 w5 …` with `size` entries in total.
    pub fn synthetic(size: usize) -> Self {
        let tokens = RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain((RESERVED..size).map(|i| format!("w{i}")))
            .collect();
        Self::from_tokens(tokens).expect("reserved prefix is always present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, skipping reserved ids other than `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i == UNK || i as usize >= RESERVED)
            .map(|&i| self.tokens.get(i as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// `T × D` matrix of per-step input features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    values: Matrix,
}

const FEATURE_MAGIC: &[u8; 4] = b"SLFT";

impl FeatureSequence {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::Empty("feature sequence has no steps".into()));
        }
        if values.cols() == 0 {
            return Err(Error::Empty("feature sequence has zero width".into()));
        }
        if !values.all_finite() {
            return Err(Error::Format("feature sequence contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn steps(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.steps() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.values.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Length(format!("feature file of {} bytes has no header", bytes.len())));
        }
        if &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::Format("bad feature file magic".into()));
        }
        let steps = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if steps == 0 {
            return Err(Error::Empty("feature sequence has no steps".into()));
        }
        let expected = steps
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Length("feature header overflows".into()))?;
        let payload = &bytes[12..];
        if payload.len() != expected {
            return Err(Error::Length(format!(
                "header declares {steps}x{dim} floats ({expected} bytes), payload has {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(Matrix::from_vec(steps, dim, data))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::load(path)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Tokens(Vec<u32>),
    Features(FeatureSequence),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Tokens(t) => t.len(),
            Source::Features(f) => f.steps(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub source: Source,
    /// `BOS payload… EOS`.
    pub target: Vec<u32>,
}

impl Pair {
    /// Target without the BOS/EOS markers.
    pub fn payload(&self) -> &[u32] {
        &self.target[1..self.target.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    /// `None` for feature-sequence sources.
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Vocab,
    pub pairs: Vec<Pair>,
}

pub fn wrap_target(payload: &[u32]) -> Vec<u32> {
    let mut t = Vec::with_capacity(payload.len() + 2);
    t.push(BOS);
    t.extend_from_slice(payload);
    t.push(EOS);
    t
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Token-to-token corpus from raw sentence pairs. Vocabularies are built
    /// from these sentences unless given.
    pub fn from_text_pairs(pairs: &[(String, String)], vocabs: Option<(&Vocab, &Vocab)>, min_freq: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("corpus has no sentence pairs".into()));
        }
        let (src_vocab, tgt_vocab) = match vocabs {
            Some((s, t)) => (s.clone(), t.clone()),
            None => (
                Vocab::build(pairs.iter().map(|p| p.0.as_str()), min_freq),
                Vocab::build(pairs.iter().map(|p| p.1.as_str()), min_freq),
            ),
        };
        let pairs = pairs
            .iter()
            .map(|(s, t)| Pair {
                source: Source::Tokens(src_vocab.encode(s)),
                target: wrap_target(&tgt_vocab.encode(t)),
            })
            .collect();
        Ok(Self {
            src_vocab: Some(src_vocab),
            tgt_vocab,
            pairs,
        })
    }

    /// Feature-to-token corpus.
    pub fn from_feature_pairs(
        sources: Vec<FeatureSequence>,
        targets: &[String],
        tgt_vocab: Option<&Vocab>,
        min_freq: usize,
    ) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::LineCount {
                left: sources.len(),
                right: targets.len(),
            });
        }
        if sources.is_empty() {
            return Err(Error::Empty("corpus has no pairs".into()));
        }
        let tgt_vocab = match tgt_vocab {
            Some(v) => v.clone(),
            None => Vocab::build(targets.iter().map(String::as_str), min_freq),
        };
        let pairs = sources
            .into_iter()
            .zip(targets)
            .map(|(f, t)| Pair {
                source: Source::Features(f),
                target: wrap_target(&tgt_vocab.encode(t)),
            })
            .collect();
        Ok(Self {
            src_vocab: None,
            tgt_vocab,
            pairs,
        })
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.pairs.iter().find_map(|p| match &p.source {
            Source::Features(f) => Some(f.dim()),
            Source::Tokens(_) => None,
        })
    }

    /// First `n` pairs and the rest.
    pub fn split(mut self, n: usize) -> (Self, Self) {
        let rest = self.pairs.split_off(n.min(self.pairs.len()));
        let tail = Self {
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            pairs: rest,
        };
        (self, tail)
    }
}

/// Read a UTF-8 text file as NFC-normalized lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Utf8(path.display().to_string()))?;
    let lines: Vec<String> = text.lines().map(|l| l.nfc().collect::<String>().trim().to_string()).collect();
    if lines.is_empty() {
        return Err(Error::Empty(path.display().to_string()));
    }
    Ok(lines)
}

/// Sentence pairs from two line-aligned files.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::LineCount {
            left: s.len(),
            right: t.len(),
        });
    }
    Ok(s.into_iter().zip(t).collect())
}

/// Sentence pairs from a `source<TAB>target` file.
pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: missing tab separator", path.display(), i + 1)))?;
            Ok((s.trim().to_string(), t.trim().to_string()))
        })
        .collect()
}

/// Corpus from either a TSV file or a pair of aligned files.
pub enum CorpusFiles<'a> {
    Tsv(&'a Path),
    Parallel { src: &'a Path, tgt: &'a Path },
    /// A list of feature-file paths (one per line, relative to the list) and targets.
    Features { list: &'a Path, tgt: &'a Path },
}

pub fn load_corpus(files: CorpusFiles<'_>, vocabs: Option<(Option<&Vocab>, &Vocab)>, min_freq: usize) -> Result<ParallelCorpus> {
    match files {
        CorpusFiles::Tsv(p) => {
            let pairs = read_tsv(p)?;
            ParallelCorpus::from_text_pairs(&pairs, token_vocabs(vocabs)?, min_freq)
        }
        CorpusFiles::Parallel { src, tgt } => {
            let pairs = read_parallel(src, tgt)?;
            ParallelCorpus::from_text_pairs(&pairs, token_vocabs(vocabs)?, min_freq)
        }
        CorpusFiles::Features { list, tgt } => {
            let paths = read_lines(list)?;
            let targets = read_lines(tgt)?;
            if paths.len() != targets.len() {
                return Err(Error::LineCount {
                    left: paths.len(),
                    right: targets.len(),
                });
            }
            let base = list.parent().map(Path::to_path_buf).unwrap_or_default();
            let feats = paths
                .iter()
                .map(|p| FeatureSequence::load(&resolve(&base, p)))
                .collect::<Result<Vec<_>>>()?;
            ParallelCorpus::from_feature_pairs(feats, &targets, vocabs.map(|v| v.1), min_freq)
        }
    }
}

fn token_vocabs<'a>(v: Option<(Option<&'a Vocab>, &'a Vocab)>) -> Result<Option<(&'a Vocab, &'a Vocab)>> {
    match v {
        None => Ok(None),
        Some((Some(s), t)) => Ok(Some((s, t))),
        Some((None, _)) => Err(Error::Format("token corpus needs a source vocabulary".into())),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    Sort,
    FeatureToLabel,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "sort" => Ok(Task::Sort),
            "feature_to_label" | "feature-to-label" => Ok(Task::FeatureToLabel),
            other => Err(Error::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

/// Shape of the continuous inputs emitted by [`Task::FeatureToLabel`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureShape {
    pub dim: usize,
    pub frames_per_label: usize,
    pub noise: f64,
}

impl Default for FeatureShape {
    fn default() -> Self {
        Self {
            dim: 16,
            frames_per_label: 3,
            noise: 0.05,
        }
    }
}

/// Reproducible toy corpus. `vocab` counts the four reserved ids; payload
/// tokens are drawn uniformly from `4..vocab`.
pub fn gen_synthetic(task: Task, vocab: usize, min_len: usize, max_len: usize, n: usize, seed: u64) -> Result<ParallelCorpus> {
    gen_synthetic_with(task, vocab, min_len, max_len, n, seed, FeatureShape::default())
}

pub fn gen_synthetic_with(
    task: Task,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    n: usize,
    seed: u64,
    shape: FeatureShape,
) -> Result<ParallelCorpus> {
    if vocab < RESERVED + 1 {
        return Err(Error::InvalidArgument(format!("vocabulary of {vocab} leaves no payload tokens")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::InvalidArgument(format!("degenerate length range {min_len}..={max_len}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    if task == Task::FeatureToLabel && (shape.dim == 0 || shape.frames_per_label == 0) {
        return Err(Error::InvalidArgument("feature shape must be nonzero".into()));
    }
    let mut rng = RngStream::new(seed);
    let classes = vocab - RESERVED;
    let tgt_vocab = Vocab::synthetic(vocab);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = min_len + rng.below(max_len - min_len + 1);
        let seq: Vec<u32> = (0..len).map(|_| (RESERVED + rng.below(classes)) as u32).collect();
        let pair = match task {
            Task::Copy => Pair {
                target: wrap_target(&seq),
                source: Source::Tokens(seq),
            },
            Task::Reverse => {
                let rev: Vec<u32> = seq.iter().rev().copied().collect();
                Pair {
                    target: wrap_target(&rev),
                    source: Source::Tokens(seq),
                }
            }
            Task::Sort => {
                let mut sorted = seq.clone();
                sorted.sort_unstable();
                Pair {
                    target: wrap_target(&sorted),
                    source: Source::Tokens(seq),
                }
            }
            Task::FeatureToLabel => {
                let steps = len * shape.frames_per_label;
                let mut m = Matrix::zeros(steps, shape.dim);
                for (i, &c) in seq.iter().enumerate() {
                    let center = (c as usize - RESERVED) as f64 * shape.dim as f64 / classes as f64;
                    for f in 0..shape.frames_per_label {
                        let row = m.row_mut(i * shape.frames_per_label + f);
                        for (d, v) in row.iter_mut().enumerate() {
                            let z = (d as f64 - center) / 1.5;
                            *v = (-0.5 * z * z).exp() + shape.noise * rng.normal();
                        }
                    }
                }
                Pair {
                    source: Source::Features(FeatureSequence::new(m)?),
                    target: wrap_target(&seq),
                }
            }
        };
        pairs.push(pair);
    }
    Ok(ParallelCorpus {
        src_vocab: (task != Task::FeatureToLabel).then(|| tgt_vocab.clone()),
        tgt_vocab,
        pairs,
    })
}
