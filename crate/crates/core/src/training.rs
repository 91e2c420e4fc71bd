//! ELBO objective, Adam, and the plateau-scheduled training loop.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bleu::bleu;
use crate::data::{Pair, ParallelCorpus, PAD};
use crate::decoding::{decode_corpus, Decoder};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::lwta::Phase;
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Matrix;
use crate::transformer::{ParamStore, PassContext, TransformerModel, WinnerNoise};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub eval_every: u64,
    /// Evaluations without improvement before the rate is cut.
    pub patience: u32,
    pub decay: f64,
    pub clip_norm: f64,
    pub kl_weight: f64,
    /// Posterior draws averaged during validation decoding.
    pub val_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// Stop once the best dev score reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_bleu: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            min_lr: 0.0001,
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-8,
            batch_size: 32,
            eval_every: 80,
            patience: 5,
            decay: 0.8,
            clip_norm: 5.0,
            kl_weight: 1.0,
            val_samples: 4,
            max_steps: None,
            target_bleu: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.eval_every > 0
            && self.patience > 0
            && self.decay > 0.0
            && self.decay < 1.0
            && self.clip_norm > 0.0
            && self.kl_weight >= 0.0
            && self.val_samples > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("training hyperparameters out of range".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// Mean cross-entropy per target token.
    pub nll: f64,
    pub kl_w: f64,
    /// Winner KL per target token.
    pub kl_xi: f64,
    pub tokens: usize,
}

/// A recorded ELBO graph: the tape, its scalar root, and the parameter leaves.
pub struct LossGraph<'a> {
    pub tape: Tape<'a>,
    pub root: Var,
    pub leaves: Vec<(Var, Option<Var>)>,
    pub parts: LossParts,
}

/// Gradients per parameter tensor: `(d/dμ, d/dρ)`.
pub type ParamGrads = Vec<(Matrix, Option<Matrix>)>;

/// Build the negative ELBO for one minibatch:
/// `nll + kl_weight · (kl_w + kl_xi) / n_train`.
///
/// Weight noise is drawn from `rng` in parameter order, then the winner
/// noise seed. Items are keyed by their batch position.
pub fn elbo_graph<'a>(
    model: &'a TransformerModel,
    pairs: &[&Pair],
    n_train: usize,
    kl_weight: f64,
    rng: &mut RngStream,
) -> Result<LossGraph<'a>> {
    if pairs.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    if n_train == 0 {
        return Err(Error::InvalidArgument("training set size must be positive".into()));
    }
    let mut tape = Tape::new();
    let tb = model.bind_training(&mut tape, rng);
    let noise = WinnerNoise::Keyed(rng.next_u64());
    let mut ctx = PassContext::new(noise, model.config().t_train);
    let keys: Vec<u64> = (0..pairs.len() as u64).collect();
    let sources: Vec<_> = pairs.iter().map(|p| &p.source).collect();
    let enc = model.encode_on_tape(&mut tape, &tb.binding, &sources, &keys, &mut ctx)?;

    let inputs: Vec<&[u32]> = pairs.iter().map(|p| &p.target[..p.target.len() - 1]).collect();
    if inputs.iter().any(|i| i.is_empty()) {
        return Err(Error::InvalidArgument("target must hold BOS and EOS".into()));
    }
    let t_len = inputs.iter().map(|i| i.len()).max().unwrap();
    let mut labels = Vec::with_capacity(pairs.len() * t_len);
    for p in pairs {
        let out = &p.target[1..];
        for t in 0..t_len {
            labels.push(out.get(t).copied().filter(|&id| id != PAD).map(|id| id as usize));
        }
    }
    let tokens = labels.iter().filter(|l| l.is_some()).count();
    let logits = model.decode_on_tape(
        &mut tape,
        &tb.binding,
        enc.memory,
        &enc.lens,
        enc.max_len,
        &inputs,
        &keys,
        &mut ctx,
    )?;
    let nll = tape.cross_entropy(logits, labels, tokens as f64);

    let units = model.config().units;
    let xi_terms: Vec<Var> = ctx
        .winners
        .iter()
        .map(|(pre, w)| tape.kl_winners(*pre, units, w.clone()))
        .collect();
    let xi_sum = tape.weighted_sum(xi_terms.iter().map(|&v| (v, 1.0)).collect());
    let kl_nodes: Vec<Var> = tb
        .leaves
        .iter()
        .filter_map(|&(m, r)| r.map(|r| (m, r)))
        .map(|(m, r)| tape.kl_gaussian(m, r))
        .collect();
    let kl_w = tape.weighted_sum(kl_nodes.iter().map(|&v| (v, 1.0)).collect());

    let c = kl_weight / n_train as f64;
    let root = tape.weighted_sum(vec![(nll, 1.0), (kl_w, c), (xi_sum, c / tokens as f64)]);
    let parts = LossParts {
        total: tape.value(root).item(),
        nll: tape.value(nll).item(),
        kl_w: tape.value(kl_w).item(),
        kl_xi: tape.value(xi_sum).item() / tokens as f64,
        tokens,
    };
    Ok(LossGraph {
        tape,
        root,
        leaves: tb.leaves,
        parts,
    })
}

/// Loss parts only.
pub fn elbo_loss(model: &TransformerModel, pairs: &[&Pair], n_train: usize, kl_weight: f64, rng: &mut RngStream) -> Result<LossParts> {
    Ok(elbo_graph(model, pairs, n_train, kl_weight, rng)?.parts)
}

/// Loss parts and gradients with respect to every mean and scale.
pub fn elbo_gradients(
    model: &TransformerModel,
    pairs: &[&Pair],
    n_train: usize,
    kl_weight: f64,
    rng: &mut RngStream,
) -> Result<(LossParts, ParamGrads)> {
    let g = elbo_graph(model, pairs, n_train, kl_weight, rng)?;
    let mut grads = g.tape.backward(g.root);
    let out = g
        .leaves
        .iter()
        .zip(model.params().iter())
        .map(|(&(m, r), (_, t))| {
            let gm = grads
                .take(m)
                .unwrap_or_else(|| Matrix::zeros(t.mean.rows(), t.mean.cols()));
            let gr = r.map(|r| grads.take(r).unwrap_or_else(|| Matrix::zeros(t.mean.rows(), t.mean.cols())));
            (gm, gr)
        })
        .collect();
    Ok((g.parts, out))
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn zeros_like(x: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(x.rows(), x.cols()),
            v: Matrix::zeros(x.rows(), x.cols()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalOutcome {
    Improved,
    Stale,
    /// No improvement for `patience` evaluations; the rate was cut.
    Decayed,
}

/// Optimizer and schedule state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub lr: f64,
    pub best_bleu: Option<f64>,
    pub best_step: u64,
    pub stale_evals: u32,
    pub kl_weight: f64,
    cfg: TrainConfig,
    moments: Vec<(Moments, Option<Moments>)>,
}

impl TrainState {
    pub fn new(model: &TransformerModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let moments = model
            .params()
            .iter()
            .map(|(_, t)| (Moments::zeros_like(&t.mean), t.rho.as_ref().map(Moments::zeros_like)))
            .collect();
        Ok(Self {
            step: 0,
            lr: cfg.lr,
            best_bleu: None,
            best_step: 0,
            stale_evals: 0,
            kl_weight: cfg.kl_weight,
            cfg: cfg.clone(),
            moments,
        })
    }

    pub fn finished(&self) -> bool {
        self.lr < self.cfg.min_lr
    }

    /// Apply the plateau rule to a validation score. Ties are not improvements.
    pub fn record_eval(&mut self, score: f64) -> EvalOutcome {
        if self.best_bleu.is_none_or(|b| score > b) {
            self.best_bleu = Some(score);
            self.best_step = self.step;
            self.stale_evals = 0;
            return EvalOutcome::Improved;
        }
        self.stale_evals += 1;
        if self.stale_evals >= self.cfg.patience {
            self.lr *= self.cfg.decay;
            self.stale_evals = 0;
            EvalOutcome::Decayed
        } else {
            EvalOutcome::Stale
        }
    }
}

/// One Adam update from a minibatch. Returns `None`, without touching the
/// model, once the rate has fallen below the minimum.
pub fn train_step(state: &mut TrainState, model: &mut TransformerModel, pairs: &[&Pair], n_train: usize, rng: &mut RngStream) -> Result<Option<LossParts>> {
    if state.finished() {
        return Ok(None);
    }
    let (parts, grads) = elbo_gradients(model, pairs, n_train, state.kl_weight, rng)?;
    if !parts.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {} (nll {}, kl_w {}, kl_xi {})",
            state.step, parts.nll, parts.kl_w, parts.kl_xi
        )));
    }
    let sq: f64 = grads
        .iter()
        .map(|(m, r)| m.data().iter().chain(r.iter().flat_map(|r| r.data())).map(|g| g * g).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient at step {}", state.step)));
    }
    let clip = if norm > state.cfg.clip_norm {
        state.cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr) = (state.cfg.beta1, state.cfg.beta2, state.cfg.adam_eps, state.lr);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = |p: &mut Matrix, g: &Matrix, mo: &mut Moments| {
        for (((x, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mo.m.data_mut())
            .zip(mo.v.data_mut())
        {
            let g = g * clip;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    };
    for (((_, t), (gm, gr)), (mm, mr)) in model
        .params_mut()
        .iter_mut()
        .zip(&grads)
        .zip(state.moments.iter_mut())
    {
        update(&mut t.mean, gm, mm);
        if let (Some(rho), Some(gr), Some(mr)) = (t.rho.as_mut(), gr, mr.as_mut()) {
            update(rho, gr, mr);
        }
        // parameters live on the f32 grid so checkpoints round-trip exactly
        t.round_to_f32();
    }
    Ok(Some(parts))
}

/// Greedy dev-set BLEU-4 with `samples` posterior draws.
pub fn dev_bleu(model: &TransformerModel, dev: &ParallelCorpus, samples: usize, seed: u64) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Empty("empty dev set".into()));
    }
    let decoder = Decoder::new(&[model], samples, seed, Phase::Infer)?;
    corpus_bleu(&decoder, dev, model.config().max_tgt_len - 1)
}

/// Greedy BLEU-4 of any decoder (single model or ensemble) on `corpus`.
pub fn corpus_bleu(decoder: &Decoder<'_>, corpus: &ParallelCorpus, max_len: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("empty evaluation set".into()));
    }
    let sources: Vec<_> = corpus.pairs.iter().map(|p| &p.source).collect();
    let hyps = decode_corpus(decoder, &sources, None, max_len)?;
    let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.payload().to_vec()).collect();
    Ok(bleu(&hyps, &refs)?.bleu4())
}

/// Largest relative error between backprop gradients of the ELBO and
/// central differences (step `1e-5`, noise pinned by `seed`), over up to
/// `coords_per_tensor` evenly spaced coordinates of every mean and scale
/// tensor. Relative errors use a floor of `1e-4` on the magnitude.
pub fn finite_difference_error(
    model: &TransformerModel,
    pairs: &[&Pair],
    n_train: usize,
    kl_weight: f64,
    seed: u64,
    coords_per_tensor: usize,
) -> Result<f64> {
    let (_, grads) = elbo_gradients(model, pairs, n_train, kl_weight, &mut RngStream::new(seed))?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for (ti, name) in names.iter().enumerate() {
        let len = model.params().tensor(ti).len();
        let stride = (len / coords_per_tensor.max(1)).max(1);
        for which in 0..2 {
            let analytic = match (which, &grads[ti]) {
                (0, (g, _)) => g,
                (_, (_, Some(g))) => g,
                _ => continue,
            };
            for idx in (0..len).step_by(stride).take(coords_per_tensor) {
                let mut eval = |delta: f64| -> Result<f64> {
                    let set = |probe: &mut TransformerModel, v: Option<f64>| -> f64 {
                        let t = probe.params_mut().get_mut(name).expect("tensor exists");
                        let slot = if which == 0 { &mut t.mean } else { t.rho.as_mut().expect("scale exists") };
                        let orig = slot.data()[idx];
                        slot.data_mut()[idx] = v.unwrap_or(orig);
                        orig
                    };
                    let orig = set(&mut probe, None);
                    set(&mut probe, Some(orig + delta));
                    let v = elbo_loss(&probe, pairs, n_train, kl_weight, &mut RngStream::new(seed));
                    set(&mut probe, Some(orig));
                    Ok(v?.total)
                };
                let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

/// Score the dev set and apply the plateau rule.
pub fn validate_and_schedule(
    state: &mut TrainState,
    model: &TransformerModel,
    dev: &ParallelCorpus,
    seed: u64,
) -> Result<(f64, EvalOutcome)> {
    let score = dev_bleu(model, dev, state.cfg.val_samples, seed)?;
    Ok((score, state.record_eval(score)))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation score.
    pub best: ParamStore,
    pub best_bleu: f64,
    pub best_step: u64,
    pub steps: u64,
    pub final_lr: f64,
}

/// The full protocol: shuffled minibatches, evaluation every `eval_every`
/// steps, plateau decay, stop when the rate falls below the minimum (or at
/// `max_steps`, or once `target_bleu` is reached). `model` is left at the
/// final parameters; the best are returned.
pub fn train(
    model: &mut TransformerModel,
    train_set: &ParallelCorpus,
    dev: &ParallelCorpus,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Empty("empty training set".into()));
    }
    if dev.is_empty() {
        return Err(Error::Empty("empty dev set".into()));
    }
    let mut state = TrainState::new(model, cfg)?;
    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut shuffle_rng = RngStream::new(derive_seed(seed, &[0x5348]));
    let mut best = model.params().clone();
    let mut window = (LossParts::default(), 0usize);
    let log_err = |e: std::io::Error| Error::Io {
        path: "<training log>".into(),
        source: e,
    };
    writeln!(log, "# step lr nll kl_w kl_xi dev_bleu4").map_err(log_err)?;

    while !state.finished() && cfg.max_steps.is_none_or(|m| state.step < m) {
        if cursor + cfg.batch_size > n {
            for i in (1..n).rev() {
                order.swap(i, shuffle_rng.below(i + 1));
            }
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let batch: Vec<&Pair> = order[cursor..end].iter().map(|&i| &train_set.pairs[i]).collect();
        cursor = end;
        let mut step_rng = RngStream::new(derive_seed(seed, &[0x5354, state.step]));
        let parts = train_step(&mut state, model, &batch, n, &mut step_rng)?.expect("rate checked above");
        window.0.nll += parts.nll;
        window.0.kl_w += parts.kl_w;
        window.0.kl_xi += parts.kl_xi;
        window.1 += 1;

        if state.step % cfg.eval_every == 0 {
            let (score, outcome) = validate_and_schedule(&mut state, model, dev, derive_seed(seed, &[0x4556]))?;
            if outcome == EvalOutcome::Improved {
                best = model.params().clone();
            }
            let k = window.1 as f64;
            writeln!(
                log,
                "{} {:.6} {:.6} {:.4} {:.6} {:.4}",
                state.step,
                state.lr,
                window.0.nll / k,
                window.0.kl_w / k,
                window.0.kl_xi / k,
                score
            )
            .map_err(log_err)?;
            window = (LossParts::default(), 0);
            if cfg.target_bleu.is_some_and(|t| state.best_bleu.is_some_and(|b| b >= t)) {
                break;
            }
        }
    }
    if state.best_bleu.is_none() {
        let (_, outcome) = validate_and_schedule(&mut state, model, dev, derive_seed(seed, &[0x4556]))?;
        if outcome == EvalOutcome::Improved {
            best = model.params().clone();
        }
    }
    Ok(TrainOutcome {
        best,
        best_bleu: state.best_bleu.unwrap_or(0.0),
        best_step: state.best_step,
        steps: state.step,
        final_lr: state.lr,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::data::{gen_synthetic, wrap_target, Source, Task};
    use crate::lwta::Activation;
    use crate::tensor::softplus_inv;
    use crate::transformer::ModelConfig;
    use crate::var_weights::WeightMode;

    pub(crate) fn gradient_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            enc_depth: 1,
            dec_depth: 1,
            ff_width: 8,
            units: 2,
            src_vocab: Some(11),
            tgt_vocab: 11,
            max_src_len: 8,
            max_tgt_len: 8,
            ..ModelConfig::default()
        }
    }

    fn pair(src: &[u32], tgt: &[u32]) -> Pair {
        Pair {
            source: Source::Tokens(src.to_vec()),
            target: wrap_target(tgt),
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let model = TransformerModel::new(gradient_config(), 1).unwrap();
        let a = pair(&[4, 5], &[6, 7]);
        let b = pair(&[8], &[9, 10, 4]);
        let err = finite_difference_error(&model, &[&a, &b], 10, 1.0, 77, 3).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn untrained_zero_network_nll_is_log_vocab() {
        let mut c = gradient_config();
        c.tgt_vocab = 20;
        c.weight_mode = WeightMode::PointEstimate;
        let mut m = TransformerModel::new(c, 2).unwrap();
        for t in ["out.w", "out.b"] {
            m.params_mut().get_mut(t).unwrap().mean.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let p = pair(&[4, 5, 6], &[7, 8, 9]);
        let parts = elbo_loss(&m, &[&p], 1, 1.0, &mut RngStream::new(0)).unwrap();
        assert!((parts.nll - 20f64.ln()).abs() < 0.05);
        assert_eq!(parts.kl_w, 0.0);
        assert_eq!(parts.tokens, 4);
    }

    #[test]
    fn prior_matched_weights_have_zero_weight_kl() {
        let mut m = TransformerModel::new(gradient_config(), 3).unwrap();
        let one = softplus_inv(1.0);
        for (_, t) in m.params_mut().iter_mut() {
            if let Some(r) = t.rho.as_mut() {
                t.mean.data_mut().iter_mut().for_each(|v| *v = 0.0);
                r.data_mut().iter_mut().for_each(|v| *v = one);
            }
        }
        let p = pair(&[4], &[5]);
        let parts = elbo_loss(&m, &[&p], 1, 1.0, &mut RngStream::new(0)).unwrap();
        assert!(parts.kl_w.abs() < 1e-9);
        assert!(parts.nll >= 0.0 && parts.kl_xi >= 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = TransformerModel::new(gradient_config(), 3).unwrap();
        assert!(matches!(elbo_loss(&m, &[], 1, 1.0, &mut RngStream::new(0)), Err(Error::Empty(_))));
    }

    #[test]
    fn point_mode_drops_weight_kl_and_sampling() {
        let mut c = gradient_config();
        c.weight_mode = WeightMode::PointEstimate;
        let m = TransformerModel::new(c, 4).unwrap();
        let p = pair(&[4, 5], &[6]);
        let g = elbo_graph(&m, &[&p], 5, 1.0, &mut RngStream::new(9)).unwrap();
        assert!(g.leaves.iter().all(|(_, r)| r.is_none()));
        assert_eq!(g.parts.kl_w, 0.0);
        assert!(g.parts.kl_xi > 0.0);
        // same result regardless of the weight-noise stream
        let a = elbo_loss(&m, &[&p], 5, 1.0, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, g.parts);
    }

    #[test]
    fn schedule_rules() {
        let m = TransformerModel::new(gradient_config(), 5).unwrap();
        let mut s = TrainState::new(&m, &TrainConfig::default()).unwrap();
        for i in 0..20 {
            assert_eq!(s.record_eval(i as f64), EvalOutcome::Improved);
        }
        assert_eq!(s.lr, 0.001);

        let mut s = TrainState::new(&m, &TrainConfig::default()).unwrap();
        s.record_eval(10.0);
        for _ in 0..4 {
            assert_eq!(s.record_eval(10.0), EvalOutcome::Stale);
        }
        assert_eq!(s.record_eval(9.0), EvalOutcome::Decayed);
        assert!((s.lr - 0.0008).abs() < 1e-15);

        let mut decays = 1;
        while !s.finished() {
            for _ in 0..5 {
                s.record_eval(0.0);
            }
            decays += 1;
        }
        assert_eq!(decays, 11);
        assert!((s.lr - 0.001 * 0.8f64.powi(11)).abs() < 1e-15);
    }

    #[test]
    fn finished_state_does_not_update() {
        let mut m = TransformerModel::new(gradient_config(), 6).unwrap();
        let mut s = TrainState::new(&m, &TrainConfig::default()).unwrap();
        s.lr = 0.9e-4;
        let before = m.clone();
        let p = pair(&[4], &[5]);
        assert!(train_step(&mut s, &mut m, &[&p], 1, &mut RngStream::new(0)).unwrap().is_none());
        assert_eq!(m, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let run = || {
            let mut m = TransformerModel::new(gradient_config(), 7).unwrap();
            let mut s = TrainState::new(&m, &TrainConfig::default()).unwrap();
            let a = pair(&[4, 5], &[5, 4]);
            let b = pair(&[6], &[6]);
            for step in 0..5 {
                train_step(&mut s, &mut m, &[&a, &b], 2, &mut RngStream::new(step)).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_pair_is_memorized() {
        let mut c = gradient_config();
        c.activation = Activation::Lwta;
        c.rho_offset = -5.0;
        let mut m = TransformerModel::new(c, 8).unwrap();
        let cfg = TrainConfig {
            lr: 0.01,
            kl_weight: 0.01,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(&m, &cfg).unwrap();
        let p = pair(&[4, 5, 6], &[6, 5, 4]);
        let mut last = LossParts::default();
        for step in 0..500 {
            last = train_step(&mut s, &mut m, &[&p], 1000, &mut RngStream::new(step)).unwrap().unwrap();
        }
        assert!(last.nll < 0.05, "nll after 500 steps: {}", last.nll);
    }

    #[test]
    fn training_loop_logs_and_keeps_best() {
        let corpus = gen_synthetic(Task::Copy, 8, 1, 3, 40, 1).unwrap();
        let (train_set, dev) = corpus.split(32);
        let mut c = gradient_config();
        c.src_vocab = Some(8);
        c.tgt_vocab = 8;
        let mut m = TransformerModel::new(c, 9).unwrap();
        let cfg = TrainConfig {
            eval_every: 5,
            max_steps: Some(20),
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        let out = train(&mut m, &train_set, &dev, &cfg, 3, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(out.steps, 20);
        let best = TransformerModel::from_params(m.config().clone(), out.best.clone()).unwrap();
        let again = dev_bleu(&best, &dev, 1, derive_seed(3, &[0x4556])).unwrap();
        assert_eq!(again, out.best_bleu);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn loss_parts_are_nonnegative(
            model_seed in 0u64..1000,
            draw in any::<u64>(),
            src in prop::collection::vec(4u32..11, 1..6),
            tgt in prop::collection::vec(4u32..11, 0..5),
        ) {
            let m = TransformerModel::new(gradient_config(), model_seed).unwrap();
            let p = pair(&src, &tgt);
            let parts = elbo_loss(&m, &[&p], 100, 1.0, &mut RngStream::new(draw)).unwrap();
            prop_assert!(parts.nll >= 0.0 && parts.kl_w >= 0.0 && parts.kl_xi >= -1e-12);
            prop_assert!(parts.total.is_finite());
            prop_assert_eq!(parts.tokens, tgt.len() + 1);
        }
    }
}
