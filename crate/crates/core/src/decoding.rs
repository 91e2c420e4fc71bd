//! Bayesian-averaged decoding over one or more trained models.

use crate::data::{Source, BOS, EOS};
use crate::error::{Error, Result};
use crate::lwta::Phase;
use crate::rng::{derive_seed, RngStream};
use crate::tensor::{log_sum_exp, Matrix};
use crate::transformer::{Memory, Network, TransformerModel, WinnerNoise};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of pre-softmax logits.
    #[default]
    Logits,
    /// Log of the mean predictive distribution.
    Probabilities,
}

/// The `models × samples` fixed networks averaged at every step.
///
/// Each network is one coherent posterior draw (weights and winner noise)
/// held for the whole decode.
pub struct Decoder<'m> {
    networks: Vec<Network<'m>>,
    averaging: Averaging,
    vocab: usize,
}

impl<'m> Decoder<'m> {
    /// `samples` posterior draws per model, seeded from `seed`.
    pub fn new(models: &[&'m TransformerModel], samples: usize, seed: u64, phase: Phase) -> Result<Self> {
        let vocab = check_models(models)?;
        if samples == 0 {
            return Err(Error::InvalidArgument("samples must be at least 1".into()));
        }
        let mut networks = Vec::with_capacity(models.len() * samples);
        for (m, model) in models.iter().enumerate() {
            for s in 0..samples {
                let mut rng = RngStream::new(derive_seed(seed, &[m as u64, s as u64]));
                networks.push(model.sample_network(&mut rng, phase));
            }
        }
        Ok(Self {
            networks,
            averaging: Averaging::Logits,
            vocab,
        })
    }

    /// Posterior means with no winner noise: one deterministic network per model.
    pub fn deterministic(models: &[&'m TransformerModel]) -> Result<Self> {
        let vocab = check_models(models)?;
        let networks = models
            .iter()
            .map(|m| m.network(m.mean_weights(), WinnerNoise::Zero, Phase::Infer))
            .collect();
        Ok(Self {
            networks,
            averaging: Averaging::Logits,
            vocab,
        })
    }

    pub fn from_networks(networks: Vec<Network<'m>>) -> Result<Self> {
        let models: Vec<&TransformerModel> = networks.iter().map(|n| n.model()).collect();
        let vocab = check_models(&models)?;
        Ok(Self {
            networks,
            averaging: Averaging::Logits,
            vocab,
        })
    }

    pub fn with_averaging(mut self, averaging: Averaging) -> Self {
        self.averaging = averaging;
        self
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn network_count(&self) -> usize {
        self.networks.len()
    }

    /// Encoder memories, one per network.
    pub fn encode(&self, sources: &[&Source], keys: &[u64]) -> Result<Vec<Memory>> {
        self.networks.iter().map(|n| n.encode(sources, keys)).collect()
    }

    /// Averaged next-token logits (or log mean probabilities), one row per prefix.
    pub fn averaged_logits(&self, memories: &[Memory], items: &[usize], prefixes: &[&[u32]]) -> Result<Matrix> {
        let mut acc = Matrix::zeros(prefixes.len(), self.vocab);
        for (net, mem) in self.networks.iter().zip(memories) {
            let mut logits = net.decode_last(mem, items, prefixes)?;
            if self.averaging == Averaging::Probabilities {
                log_softmax_rows(&mut logits);
                logits.data_mut().iter_mut().for_each(|v| *v = v.exp());
            }
            acc.add_assign(&logits);
        }
        acc.scale_assign(1.0 / self.networks.len() as f64);
        if self.averaging == Averaging::Probabilities {
            acc.data_mut().iter_mut().for_each(|v| *v = v.ln());
        }
        Ok(acc)
    }

    /// Next-token log-probabilities under the averaged prediction.
    pub fn step_scores(&self, memories: &[Memory], items: &[usize], prefixes: &[&[u32]]) -> Result<Matrix> {
        let mut s = self.averaged_logits(memories, items, prefixes)?;
        log_softmax_rows(&mut s);
        Ok(s)
    }
}

fn check_models(models: &[&TransformerModel]) -> Result<usize> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one model required".into()))?;
    let vocab = first.config().tgt_vocab;
    if let Some(m) = models.iter().find(|m| m.config().tgt_vocab != vocab) {
        return Err(Error::InvalidArgument(format!(
            "ensemble vocabulary mismatch: {vocab} vs {}",
            m.config().tgt_vocab
        )));
    }
    Ok(vocab)
}

pub fn log_softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a batch. Returns payload tokens (no BOS/EOS) per
/// source; `keys` identify items for winner noise.
pub fn greedy_decode(decoder: &Decoder<'_>, sources: &[&Source], keys: &[u64], max_len: usize) -> Result<Vec<Vec<u32>>> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let memories = decoder.encode(sources, keys)?;
    let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; sources.len()];
    let mut active: Vec<usize> = (0..sources.len()).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let views: Vec<&[u32]> = active.iter().map(|&i| prefixes[i].as_slice()).collect();
        let scores = decoder.averaged_logits(&memories, &active, &views)?;
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let tok = argmax(scores.row(r)) as u32;
            prefixes[i].push(tok);
            if tok != EOS {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(prefixes
        .into_iter()
        .map(|mut p| {
            if p.last() == Some(&EOS) {
                p.pop();
            }
            p.remove(0);
            p
        })
        .collect())
}

/// Next-token log-probabilities for a set of prefixes of one sequence.
pub trait StepScorer {
    fn vocab(&self) -> usize;
    fn scores(&mut self, prefixes: &[&[u32]]) -> Result<Matrix>;
}

#[derive(Clone, Copy, Debug)]
pub struct BeamConfig {
    pub width: usize,
    /// Maximum number of generated tokens.
    pub max_len: usize,
    /// `α` in the `((5 + len) / 6)^α` normalizer.
    pub length_penalty: f64,
    /// Token that finishes a hypothesis; `None` runs every hypothesis to `max_len`.
    pub eos: Option<u32>,
    pub bos: u32,
}

impl BeamConfig {
    pub fn new(width: usize, max_len: usize) -> Self {
        Self {
            width,
            max_len,
            length_penalty: 1.0,
            eos: Some(EOS),
            bos: BOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, BOS excluded, EOS included when finished.
    pub tokens: Vec<u32>,
    /// Accumulated log-probability.
    pub score: f64,
    pub finished: bool,
}

fn length_norm(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

impl BeamHypothesis {
    fn normalized(&self, alpha: f64) -> f64 {
        self.score / length_norm(self.tokens.len().max(1), alpha)
    }
}

/// Beam search. Finished hypotheses keep their beam slots; the result is
/// the best finished hypothesis under length normalization, else the best
/// unfinished one.
pub fn beam_search(scorer: &mut dyn StepScorer, cfg: &BeamConfig) -> Result<BeamHypothesis> {
    if cfg.width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let vocab = scorer.vocab();
    let mut beam = vec![BeamHypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    for _ in 0..cfg.max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let open: Vec<usize> = (0..beam.len()).filter(|&i| !beam[i].finished).collect();
        let prefixes: Vec<Vec<u32>> = open
            .iter()
            .map(|&i| {
                let mut p = Vec::with_capacity(beam[i].tokens.len() + 1);
                p.push(cfg.bos);
                p.extend_from_slice(&beam[i].tokens);
                p
            })
            .collect();
        let views: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let scores = scorer.scores(&views)?;
        let mut candidates: Vec<BeamHypothesis> = Vec::with_capacity(beam.len() * vocab);
        let mut row = 0;
        for h in &beam {
            if h.finished {
                candidates.push(h.clone());
                continue;
            }
            let s = scores.row(row);
            row += 1;
            for (v, &lp) in s.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v as u32);
                candidates.push(BeamHypothesis {
                    tokens,
                    score: h.score + lp,
                    finished: cfg.eos == Some(v as u32),
                });
            }
        }
        // stable sort keeps earlier beams and lower token ids first on ties
        candidates.sort_by(|a, b| b.normalized(cfg.length_penalty).total_cmp(&a.normalized(cfg.length_penalty)));
        candidates.truncate(cfg.width);
        beam = candidates;
    }
    // the beam is sorted, so the first match is the best of its kind
    let pick = |finished: bool| beam.iter().find(|h| h.finished == finished).cloned();
    Ok(pick(true).or_else(|| pick(false)).expect("beam is never empty"))
}

struct SourceScorer<'d, 'm> {
    decoder: &'d Decoder<'m>,
    memories: &'d [Memory],
}

impl StepScorer for SourceScorer<'_, '_> {
    fn vocab(&self) -> usize {
        self.decoder.vocab
    }

    fn scores(&mut self, prefixes: &[&[u32]]) -> Result<Matrix> {
        let items = vec![0; prefixes.len()];
        self.decoder.step_scores(self.memories, &items, prefixes)
    }
}

/// Beam decoding of one source; returns payload tokens.
pub fn beam_decode(decoder: &Decoder<'_>, source: &Source, key: u64, cfg: &BeamConfig) -> Result<Vec<u32>> {
    let memories = decoder.encode(&[source], &[key])?;
    let mut scorer = SourceScorer {
        decoder,
        memories: &memories,
    };
    let mut best = beam_search(&mut scorer, cfg)?;
    if best.finished {
        best.tokens.pop();
    }
    Ok(best.tokens)
}

/// Decode many sources: greedily without a beam configuration, by beam
/// search otherwise. Item `i` uses noise key `i`.
pub fn decode_corpus(decoder: &Decoder<'_>, sources: &[&Source], beam: Option<&BeamConfig>, max_len: usize) -> Result<Vec<Vec<u32>>> {
    match beam {
        None => {
            let keys: Vec<u64> = (0..sources.len() as u64).collect();
            let mut out = Vec::with_capacity(sources.len());
            for (chunk, ks) in sources.chunks(64).zip(keys.chunks(64)) {
                out.extend(greedy_decode(decoder, chunk, ks, max_len)?);
            }
            Ok(out)
        }
        Some(cfg) => sources
            .iter()
            .enumerate()
            .map(|(i, s)| beam_decode(decoder, s, i as u64, cfg))
            .collect(),
    }
}
