//! Local winner-takes-all layers.
//!
//! A layer with `J` inputs holds `K` blocks of `U` linear units. Each block
//! draws one winner from a categorical distribution given by the softmax of
//! its units' pre-activations; only the winner's linear output is passed
//! on. Training uses the Gumbel-softmax relaxation of that draw.
//!
//! All block-structured arrays are stored as rows of width `K·U`, with the
//! units of block `k` in columns `k·U .. (k+1)·U`.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::Pointwise;
use crate::rng::RngStream;
use crate::tensor::{softmax_in_place, Matrix};
use crate::var_weights::{VariationalTensor, WeightMode};

pub const DEFAULT_UNITS: usize = 4;
pub const T_TRAIN: f64 = 1.69;
pub const T_INFER: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Temperatures {
    pub train: f64,
    pub infer: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            train: T_TRAIN,
            infer: T_INFER,
        }
    }
}

impl Temperatures {
    pub fn for_phase(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Train => self.train,
            Phase::Infer => self.infer,
        }
    }
}

/// Softmax over each block of `units` consecutive columns.
pub fn block_softmax(pre: &Matrix, units: usize) -> Matrix {
    assert!(units > 0 && pre.cols() % units == 0, "width not divisible by units");
    let mut out = pre.clone();
    for i in 0..out.rows() {
        for block in out.row_mut(i).chunks_mut(units) {
            softmax_in_place(block);
        }
    }
    out
}

/// Gumbel-softmax sample `softmax((log π + g) / T)` with `π = softmax(pre)`.
///
/// The block log-normalizer of `log π` cancels inside the outer softmax, so
/// this is computed directly from `pre + g`.
pub fn relaxed_winners(pre: &Matrix, noise: &Matrix, units: usize, temperature: f64) -> Matrix {
    assert_eq!(pre.shape(), noise.shape(), "noise shape mismatch");
    let mut out = pre.zip_map(noise, |p, g| (p + g) / temperature);
    for i in 0..out.rows() {
        for block in out.row_mut(i).chunks_mut(units) {
            softmax_in_place(block);
        }
    }
    out
}

/// One-hot of the per-block argmax; the lowest index wins exact ties.
pub fn hard_winners(relaxed: &Matrix, units: usize) -> Matrix {
    let mut out = Matrix::zeros(relaxed.rows(), relaxed.cols());
    for i in 0..relaxed.rows() {
        let src = relaxed.row(i).to_vec();
        for (block, dst) in src.chunks(units).zip(out.row_mut(i).chunks_mut(units)) {
            let mut best = 0;
            for (u, &v) in block.iter().enumerate() {
                if v > block[best] {
                    best = u;
                }
            }
            dst[best] = 1.0;
        }
    }
    out
}

/// KL of each block's winner distribution to the uniform prior, summed.
/// `probs` holds the rows of block probabilities; `0 · log 0 = 0`.
pub fn kl_winners(probs: &Matrix, units: usize) -> f64 {
    let log_u = (units as f64).ln();
    probs
        .data()
        .iter()
        .map(|&q| if q > 0.0 { q * (q.ln() + log_u) } else { 0.0 })
        .sum()
}

/// Winner posterior per block: row-wise softmax over each block of `units`.
pub fn winner_probs(pre: &Matrix, units: usize) -> Matrix {
    block_softmax(pre, units)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WinnerSample {
    pub relaxed: Matrix,
    pub hard: Matrix,
}

/// Draw winners for every block of `probs` at temperature `temperature`.
pub fn sample_winner(probs: &Matrix, units: usize, temperature: f64, rng: &mut RngStream) -> Result<WinnerSample> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mut noise = Matrix::zeros(probs.rows(), probs.cols());
    noise.data_mut().iter_mut().for_each(|g| *g = rng.gumbel());
    Ok(sample_winner_with_noise(probs, units, temperature, &noise))
}

/// [`sample_winner`] with explicit Gumbel noise.
pub fn sample_winner_with_noise(probs: &Matrix, units: usize, temperature: f64, noise: &Matrix) -> WinnerSample {
    let logp = probs.map(|p| if p > 0.0 { p.ln() } else { -1e300 });
    let relaxed = relaxed_winners(&logp, noise, units, temperature);
    let hard = hard_winners(&relaxed, units);
    WinnerSample { relaxed, hard }
}

/// Weights and bias drawn for one pass through an [`LwtaLayer`].
#[derive(Clone, Debug)]
pub struct LayerSample {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl LayerSample {
    /// Entry `(k, u)` is `Σ_j w[j,k,u] x[j] + b[k,u]`, returned as a `1 × K·U` row.
    pub fn preactivations(&self, x: &[f64]) -> Result<Matrix> {
        if x.len() != self.weights.rows() {
            return Err(Error::Shape(format!(
                "input of length {} for a layer with {} inputs",
                x.len(),
                self.weights.rows()
            )));
        }
        let xm = Matrix::from_vec(1, x.len(), x.to_vec());
        let mut out = xm.matmul(&self.weights);
        out.add_assign(&self.bias);
        Ok(out)
    }
}

/// A stand-alone LWTA dense layer with variational weights.
#[derive(Clone, Debug)]
pub struct LwtaLayer {
    pub blocks: usize,
    pub units: usize,
    /// `J × (K·U)`.
    pub weights: VariationalTensor,
    /// `1 × (K·U)`.
    pub bias: VariationalTensor,
    pub temperatures: Temperatures,
}

impl LwtaLayer {
    pub fn new(inputs: usize, blocks: usize, units: usize, mode: WeightMode, rng: &mut RngStream) -> Result<Self> {
        if units == 0 || blocks == 0 {
            return Err(Error::InvalidArgument("LWTA layer needs at least one block and unit".into()));
        }
        let width = blocks * units;
        let (weights, bias) = match mode {
            WeightMode::Variational => (
                VariationalTensor::init_kaiming_uniform(&[inputs, blocks, units], inputs, rng)?,
                VariationalTensor::init_kaiming_uniform(&[1, width], inputs, rng)?,
            ),
            WeightMode::PointEstimate => (
                VariationalTensor::init_xavier_normal(&[inputs, blocks, units], inputs, width, rng)?,
                VariationalTensor::point(&[1, width], vec![0.0; width])?,
            ),
        };
        Ok(Self {
            blocks,
            units,
            weights,
            bias,
            temperatures: Temperatures::default(),
        })
    }

    pub fn from_parts(weights: VariationalTensor, bias: VariationalTensor, units: usize) -> Result<Self> {
        let width = weights.mean.cols();
        if units == 0 || width % units != 0 || bias.mean.shape() != (1, width) {
            return Err(Error::Shape(format!(
                "weights {:?} / bias {:?} incompatible with {units} units",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            blocks: width / units,
            units,
            weights,
            bias,
            temperatures: Temperatures::default(),
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.mean.rows()
    }

    pub fn width(&self) -> usize {
        self.blocks * self.units
    }

    pub fn sample(&self, rng: &mut RngStream) -> LayerSample {
        LayerSample {
            weights: self.weights.sample(rng),
            bias: self.bias.sample(rng),
        }
    }

    /// Mean weights, no sampling.
    pub fn mean_sample(&self) -> LayerSample {
        LayerSample {
            weights: self.weights.mean.clone(),
            bias: self.bias.mean.clone(),
        }
    }

    /// Full stochastic forward: draw weights, then winners at the phase temperature.
    pub fn forward(&self, x: &[f64], phase: Phase, rng: &mut RngStream) -> Result<Vec<f64>> {
        let sample = self.sample(rng);
        let pre = sample.preactivations(x)?;
        let mut noise = Matrix::zeros(1, pre.cols());
        noise.data_mut().iter_mut().for_each(|g| *g = rng.gumbel());
        Ok(masked_output(&pre, &noise, self.units, self.temperatures.for_phase(phase)))
    }
}

/// `pre ⊙ relaxed` for pinned Gumbel noise, flattened.
pub fn masked_output(pre: &Matrix, noise: &Matrix, units: usize, temperature: f64) -> Vec<f64> {
    let relaxed = relaxed_winners(pre, noise, units, temperature);
    pre.zip_map(&relaxed, |p, r| p * r).into_vec()
}

/// `pre ⊙ ξ` for an explicit winner indicator (hard or relaxed).
pub fn apply_winners(pre: &Matrix, winners: &Matrix) -> Vec<f64> {
    pre.zip_map(winners, |p, w| p * w).into_vec()
}

/// Feed-forward activation choice for every LWTA slot in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Lwta,
    Relu,
    Elu,
    Silu,
    Linear,
}

impl Activation {
    pub fn pointwise(self) -> Option<Pointwise> {
        match self {
            Activation::Lwta => None,
            Activation::Relu => Some(Pointwise::Relu),
            Activation::Elu => Some(Pointwise::Elu),
            Activation::Silu => Some(Pointwise::Silu),
            Activation::Linear => Some(Pointwise::Linear),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Lwta => "lwta",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Silu => "silu",
            Activation::Linear => "linear",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lwta" => Ok(Activation::Lwta),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "silu" => Ok(Activation::Silu),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

/// Elementwise replacement activation for ablations.
pub fn ablation_activation(x: &[f64], kind: &str) -> Result<Vec<f64>> {
    let f = match kind {
        "relu" => Pointwise::Relu,
        "elu" => Pointwise::Elu,
        "silu" => Pointwise::Silu,
        other => return Err(Error::InvalidArgument(format!("unknown ablation activation '{other}'"))),
    };
    Ok(x.iter().map(|&v| f.apply(v)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec())
    }

    #[test]
    fn preactivation_examples() {
        let s = LayerSample {
            weights: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
            bias: Matrix::zeros(1, 2),
        };
        assert_eq!(s.preactivations(&[3.0, -4.0]).unwrap().data(), &[3.0, -4.0]);
        assert_eq!(s.preactivations(&[0.0, 0.0]).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(s.preactivations(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn preactivations_match_triple_loop() {
        let mut rng = RngStream::new(11);
        let (j, k, u) = (5, 3, 4);
        let layer = LwtaLayer::new(j, k, u, WeightMode::Variational, &mut rng).unwrap();
        let s = layer.sample(&mut rng);
        let x: Vec<f64> = (0..j).map(|_| rng.normal()).collect();
        let pre = s.preactivations(&x).unwrap();
        for kk in 0..k {
            for uu in 0..u {
                let mut acc = s.bias[(0, kk * u + uu)];
                for (jj, xj) in x.iter().enumerate() {
                    acc += s.weights[(jj, kk * u + uu)] * xj;
                }
                assert!((pre[(0, kk * u + uu)] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn winner_probability_examples() {
        let p = winner_probs(&row(&[0.7, 0.7, 0.7, 0.7]), 4);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        let p = winner_probs(&row(&[2.0, 1.0, 0.0, -1.0]), 4);
        let expected = [0.6439, 0.2369, 0.0871, 0.0321];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let shifted = winner_probs(&row(&[7.0, 6.0, 5.0, 4.0]), 4);
        assert!(shifted.max_abs_diff(&p) < 1e-9);
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sampling_rejects_nonpositive_temperature() {
        let p = row(&[0.5, 0.5]);
        let mut rng = RngStream::new(0);
        assert!(sample_winner(&p, 2, 0.0, &mut rng).is_err());
        assert!(sample_winner(&p, 2, -1.0, &mut rng).is_err());
    }

    #[test]
    fn degenerate_categorical_always_wins() {
        let p = row(&[1.0 - 3e-9, 1e-9, 1e-9, 1e-9]);
        let mut rng = RngStream::new(2);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_winner(&p, 4, 0.01, &mut rng).unwrap().hard[(0, 0)] == 1.0)
            .count();
        assert!(hits as f64 / n as f64 >= 0.999);
    }

    #[test]
    fn winner_frequencies_follow_probabilities() {
        let probs = [0.6439, 0.2369, 0.0871, 0.0321];
        let p = row(&probs);
        for t in [0.01, 1.69] {
            let mut rng = RngStream::new(3);
            let n = 100_000;
            let mut counts = [0usize; 4];
            for _ in 0..n {
                let s = sample_winner(&p, 4, t, &mut rng).unwrap();
                let w = s.hard.data().iter().position(|&v| v == 1.0).unwrap();
                counts[w] += 1;
            }
            for (c, q) in counts.iter().zip(probs) {
                assert!((*c as f64 / n as f64 - q).abs() < 0.01, "T={t}: {counts:?}");
            }
        }
    }

    /// Fraction of draws whose relaxed sample peaks at ≥ 0.99, computed from an
    /// exponential race (`E_i ~ Exp(p_i)`, winner = smallest arrival), which
    /// never touches Gumbel variates.
    fn concentration_oracle(probs: &[f64], t: f64, n: usize, rng: &mut RngStream) -> f64 {
        let mut hits = 0;
        for _ in 0..n {
            let z: Vec<f64> = probs
                .iter()
                .map(|p| {
                    let u = rng.uniform(0.0, 1.0).max(f64::MIN_POSITIVE);
                    -(-u.ln() / p).ln()
                })
                .collect();
            let w = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
            let tail: f64 = (0..z.len()).filter(|&j| j != w).map(|j| ((z[j] - z[w]) / t).exp()).sum();
            if 1.0 / (1.0 + tail) >= 0.99 {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn low_temperature_concentration_matches_oracle() {
        let probs = [0.6439, 0.2369, 0.0871, 0.0321];
        let p = row(&probs);
        let mut rng = RngStream::new(4);
        let n = 200_000;
        let peaked = (0..n)
            .filter(|_| {
                let s = sample_winner(&p, 4, 0.01, &mut rng).unwrap();
                s.relaxed.data().iter().copied().fold(0.0, f64::max) >= 0.99
            })
            .count() as f64
            / n as f64;
        let oracle = concentration_oracle(&probs, 0.01, n, &mut RngStream::new(99));
        assert!((peaked - oracle).abs() < 0.003, "sampled {peaked} vs oracle {oracle}");
        // The relaxed sample is near one-hot in the vast majority of draws,
        // but not 99% of them at this temperature.
        assert!(peaked > 0.95 && peaked < 0.99, "{peaked}");
    }

    #[test]
    fn single_unit_blocks_pass_through() {
        let mut rng = RngStream::new(5);
        let layer = LwtaLayer::new(3, 6, 1, WeightMode::PointEstimate, &mut rng).unwrap();
        let s = layer.mean_sample();
        let x = [0.3, -1.2, 2.0];
        let pre = s.preactivations(&x).unwrap();
        let noise = Matrix::from_vec(1, 6, (0..6).map(|_| rng.gumbel()).collect());
        let out = masked_output(&pre, &noise, 1, T_TRAIN);
        assert_eq!(out, pre.data());
    }

    #[test]
    fn forced_winner_masks_block() {
        let pre = row(&[2.0, 1.0, 0.0, -1.0]);
        let hard = row(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(apply_winners(&pre, &hard), vec![2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pinned_zero_noise_relaxed_path() {
        let pre = row(&[2.0, 1.0, 0.0, -1.0, 0.5, 0.5, -0.3, 1.1]);
        let out = masked_output(&pre, &Matrix::zeros(1, 8), 4, T_TRAIN);
        for blk in 0..2 {
            let pr = &pre.data()[blk * 4..blk * 4 + 4];
            // softmax(log softmax(pre) / T) evaluated directly
            let lse = pr.iter().map(|v| v.exp()).sum::<f64>().ln();
            let z: Vec<f64> = pr.iter().map(|v| ((v - lse) / T_TRAIN).exp()).collect();
            let zs: f64 = z.iter().sum();
            for u in 0..4 {
                let expected = pr[u] * z[u] / zs;
                assert!((out[blk * 4 + u] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_sparsity_and_ties() {
        let relaxed = row(&[0.25, 0.25, 0.25, 0.25, 0.1, 0.7, 0.1, 0.1]);
        let hard = hard_winners(&relaxed, 4);
        assert_eq!(hard.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let out = apply_winners(&row(&[0.0; 8]), &hard);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn winner_kl_examples() {
        let uniform = row(&[0.25; 4]);
        assert!(kl_winners(&uniform, 4).abs() < 1e-12);
        let one_hot = row(&[0.0, 1.0, 0.0, 0.0]);
        assert!((kl_winners(&one_hot, 4) - 4f64.ln()).abs() < 1e-12);
        let k = 7;
        let many = Matrix::from_vec(1, 4 * k, (0..4 * k).map(|i| if i % 4 == 2 { 1.0 } else { 0.0 }).collect());
        assert!((kl_winners(&many, 4) - k as f64 * 1.386_294_361).abs() < 1e-6);
    }

    #[test]
    fn ablation_activation_definitions() {
        assert_eq!(ablation_activation(&[-1.0, 2.0], "relu").unwrap(), vec![0.0, 2.0]);
        assert_eq!(ablation_activation(&[0.0], "elu").unwrap(), vec![0.0]);
        assert_eq!(ablation_activation(&[0.0], "silu").unwrap(), vec![0.0]);
        let s = ablation_activation(&[1.0], "silu").unwrap()[0];
        assert!((s - 0.7311).abs() < 1e-4);
        assert!(ablation_activation(&[1.0], "tanh").is_err());
        assert!("gelu".parse::<Activation>().is_err());
    }

    proptest! {
        #[test]
        fn winner_kl_within_bounds(units in 1usize..6, blocks in 1usize..5, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let pre = Matrix::from_vec(1, units * blocks, (0..units * blocks).map(|_| 4.0 * rng.normal()).collect());
            let kl = kl_winners(&winner_probs(&pre, units), units);
            prop_assert!(kl >= -1e-12);
            prop_assert!(kl <= blocks as f64 * (units as f64).ln() + 1e-12);
        }

        #[test]
        fn hard_output_has_one_active_unit_per_block(units in 1usize..6, blocks in 1usize..5, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let n = units * blocks;
            let pre = Matrix::from_vec(1, n, (0..n).map(|_| rng.normal()).collect());
            let noise = Matrix::from_vec(1, n, (0..n).map(|_| rng.gumbel()).collect());
            let probs = winner_probs(&pre, units);
            let s = sample_winner_with_noise(&probs, units, 0.01, &noise);
            let out = apply_winners(&pre, &s.hard);
            for b in 0..blocks {
                let block = &s.hard.data()[b * units..(b + 1) * units];
                prop_assert_eq!(block.iter().filter(|&&h| h == 1.0).count(), 1);
                prop_assert!(block.iter().all(|&h| h == 0.0 || h == 1.0));
                prop_assert!(out[b * units..(b + 1) * units].iter().filter(|&&v| v != 0.0).count() <= 1);
            }
        }
    }
}
