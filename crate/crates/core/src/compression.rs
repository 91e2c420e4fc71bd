//! Posterior-driven bit-width reduction.
//!
//! Each layer gets a reduced float format `(sign, eb exponent bits, pb
//! mantissa bits, bias)`. Precision bits below half the smallest posterior
//! standard deviation are dropped, and the exponent window only spans the
//! `z`-sigma confidence range of the weights. Values are stored normalized
//! (`±2^(E−bias)·(1 + m/2^pb)`), `E = 0` encodes zero, magnitudes below
//! the window flush to zero and magnitudes above it clamp.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::softplus;
use crate::transformer::TransformerModel;
use crate::var_weights::VariationalTensor;

const MAGIC: &[u8; 4] = b"SLWC";
pub const FORMAT_VERSION: u16 = 1;
const MAX_BITS: u32 = 32;

/// Statistics of one layer's posterior that drive its budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Largest `|rho|`; the exponent window is widened to hold the scales too.
    pub rho_abs_max: f64,
}

impl LayerStats {
    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = &'a VariationalTensor>) -> Result<Self> {
        let mut s = LayerStats {
            sigma_min: f64::INFINITY,
            sigma_max: 0.0,
            mu_min: f64::INFINITY,
            mu_max: f64::NEG_INFINITY,
            rho_abs_max: 0.0,
        };
        let mut any = false;
        for t in tensors {
            let rho = t
                .rho
                .as_ref()
                .ok_or(Error::UnsupportedMode("budget of a point-estimate tensor"))?;
            for &m in t.mean.data() {
                s.mu_min = s.mu_min.min(m);
                s.mu_max = s.mu_max.max(m);
            }
            for &r in rho.data() {
                let sigma = softplus(r);
                s.sigma_min = s.sigma_min.min(sigma);
                s.sigma_max = s.sigma_max.max(sigma);
                s.rho_abs_max = s.rho_abs_max.max(r.abs());
            }
            any |= !t.is_empty();
        }
        if !any {
            return Err(Error::Empty("layer has no values".into()));
        }
        Ok(s)
    }

    pub fn mu_abs_max(&self) -> f64 {
        self.mu_min.abs().max(self.mu_max.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitFormat {
    pub eb: u8,
    pub pb: u8,
    pub bias: i32,
}

impl BitFormat {
    /// The 32-bit layout (`eb = 8`, `pb = 23`, standard bias).
    pub const FULL: BitFormat = BitFormat { eb: 8, pb: 23, bias: 127 };

    pub fn with_standard_bias(eb: u8, pb: u8) -> Result<Self> {
        let f = BitFormat {
            eb,
            pb,
            bias: (1i32 << (eb.max(1) - 1)) - 1,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eb == 0 || self.eb > 11 || self.pb > 52 || self.bits() > MAX_BITS {
            return Err(Error::Format(format!(
                "invalid bit format eb={} pb={} (at most {MAX_BITS} bits, eb in 1..=11)",
                self.eb, self.pb
            )));
        }
        Ok(())
    }

    pub fn bits(&self) -> u32 {
        1 + self.eb as u32 + self.pb as u32
    }

    fn max_code(&self) -> i64 {
        (1i64 << self.eb) - 1
    }

    /// Smallest and largest unbiased exponents.
    pub fn exponent_range(&self) -> (i64, i64) {
        (1 - self.bias as i64, self.max_code() - self.bias as i64)
    }

    pub fn max_value(&self) -> f64 {
        let (_, hi) = self.exponent_range();
        exp2i(hi) * (2.0 - exp2i(-(self.pb as i64)))
    }

    pub fn min_normal(&self) -> f64 {
        exp2i(self.exponent_range().0)
    }
}

/// Budget of one layer and the statistics it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerBitBudget {
    pub format: BitFormat,
    pub stats: LayerStats,
    pub z: f64,
}

fn exp2i(e: i64) -> f64 {
    2f64.powi(e as i32)
}

fn ceil_log2(x: f64) -> i64 {
    let (e, frac_is_zero) = frexp_exp(x);
    if frac_is_zero {
        e
    } else {
        e + 1
    }
}

fn floor_log2(x: f64) -> i64 {
    frexp_exp(x).0
}

/// `(⌊log2 x⌋, x is a power of two)` for positive finite `x`.
fn frexp_exp(x: f64) -> (i64, bool) {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 {
        // subnormal
        let lz = mant.leading_zeros() as i64 - 12;
        let e = -1022 - lz - 1;
        (e, mant.is_power_of_two())
    } else {
        (exp - 1023, mant == 0)
    }
}

/// Exponent and precision bits for one layer:
/// `e_max = ⌈log2(|μ|max + z·σmax)⌉`, `δ = σmin/2`,
/// `pb = max(0, e_max − ⌊log2 δ⌋)`, and the fewest exponent bits whose
/// window covers `[⌊log2 δ⌋, e_max]` (widened to hold `|ρ|max`), with the
/// bias centring the window. The total is clamped to 32 bits.
pub fn derive_budget(stats: &LayerStats, z: f64) -> Result<LayerBitBudget> {
    if !(stats.sigma_min > 0.0) {
        return Err(Error::UnsupportedMode("budget needs a positive minimum sigma"));
    }
    if !(z >= 0.0) || !z.is_finite() {
        return Err(Error::InvalidArgument(format!("confidence multiplier must be finite and nonnegative, got {z}")));
    }
    let reach = stats.mu_abs_max() + z * stats.sigma_max;
    let e_max = ceil_log2(reach);
    let e_lo = floor_log2(stats.sigma_min / 2.0);
    let pb = (e_max - e_lo).max(0);
    let e_hi = if stats.rho_abs_max > 0.0 {
        e_max.max(ceil_log2(stats.rho_abs_max))
    } else {
        e_max
    };
    let needed = (e_hi - e_lo + 1).max(1);
    let mut eb = 1i64;
    while (1i64 << eb) - 1 < needed {
        eb += 1;
    }
    let eb = eb.min(11);
    let pb = pb.min(MAX_BITS as i64 - 1 - eb).max(0);
    let spare = ((1i64 << eb) - 1 - needed).max(0);
    let bias = 1 - e_lo + spare / 2;
    let format = BitFormat {
        eb: eb as u8,
        pb: pb as u8,
        bias: bias as i32,
    };
    format.validate()?;
    Ok(LayerBitBudget {
        format,
        stats: *stats,
        z,
    })
}

/// Nearest representable code for `x` (round half to even).
pub fn encode_value(x: f64, f: &BitFormat) -> Result<u32> {
    if x.is_nan() {
        return Err(Error::Numerical("cannot encode NaN".into()));
    }
    let sign = if x.is_sign_negative() && x != 0.0 { 1u32 } else { 0 };
    let a = x.abs();
    if a == 0.0 {
        return Ok(0);
    }
    let (lo, hi) = f.exponent_range();
    let pb = f.pb as i64;
    let scale = exp2i(pb);
    let mut e = if a.is_infinite() { hi + 1 } else { floor_log2(a) };
    let mut m = 0u64;
    if e <= hi {
        let frac = a / exp2i(e) - 1.0;
        m = (frac * scale).round_ties_even() as u64;
        if m == 1u64 << pb {
            m = 0;
            e += 1;
        }
    }
    let (code_e, code_m) = if e > hi {
        (f.max_code() as u32, ((1u64 << pb) - 1) as u32)
    } else if e < lo {
        return Ok(0);
    } else {
        ((e + f.bias as i64) as u32, m as u32)
    };
    Ok((sign << (f.eb as u32 + f.pb as u32)) | (code_e << f.pb) | code_m)
}

pub fn decode_value(code: u32, f: &BitFormat) -> f64 {
    let pb = f.pb as u32;
    let e_code = (code >> pb) & ((1u32 << f.eb) - 1);
    if e_code == 0 {
        return 0.0;
    }
    let m = (code as u64) & ((1u64 << pb) - 1);
    let sign = (code >> (f.eb as u32 + pb)) & 1;
    let v = exp2i(e_code as i64 - f.bias as i64) * (1.0 + m as f64 / exp2i(pb as i64));
    if sign == 1 {
        -v
    } else {
        v
    }
}

pub fn quantize(x: f64, f: &BitFormat) -> Result<f64> {
    Ok(decode_value(encode_value(x, f)?, f))
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    n: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            acc: 0,
            n: 0,
        }
    }

    fn push(&mut self, value: u32, bits: u32) {
        self.acc = (self.acc << bits) | (value as u64 & ((1u64 << bits) - 1));
        self.n += bits;
        while self.n >= 8 {
            self.n -= 8;
            self.bytes.push((self.acc >> self.n) as u8);
        }
        self.acc &= (1u64 << self.n) - 1;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.n > 0 {
            self.bytes.push((self.acc << (8 - self.n)) as u8);
        }
        self.bytes
    }
}

fn read_bits(bytes: &[u8], bit_pos: usize, bits: u32) -> u32 {
    let mut v = 0u32;
    for i in 0..bits as usize {
        let p = bit_pos + i;
        let bit = (bytes[p / 8] >> (7 - p % 8)) & 1;
        v = (v << 1) | bit as u32;
    }
    v
}

pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Mean = 0,
    Rho = 1,
}

/// One bit-packed parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedLayer {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
    pub format: BitFormat,
    pub count: usize,
    pub packed: Vec<u8>,
}

impl CompressedLayer {
    pub fn encode(name: &str, role: Role, shape: &[usize], values: &[f64], format: BitFormat) -> Result<Self> {
        format.validate()?;
        let bits = format.bits();
        let mut w = BitWriter::new();
        for &v in values {
            w.push(encode_value(v, &format)?, bits);
        }
        Ok(Self {
            name: name.to_string(),
            role,
            shape: shape.to_vec(),
            format,
            count: values.len(),
            packed: w.finish(),
        })
    }

    pub fn decode(&self) -> Vec<f64> {
        let bits = self.format.bits();
        (0..self.count)
            .map(|i| decode_value(read_bits(&self.packed, i * bits as usize, bits), &self.format))
            .collect()
    }
}

/// Compressed parameters plus the budget report.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub layers: Vec<CompressedLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionReport {
    pub budgets: Vec<(String, LayerBitBudget)>,
    pub avg_bits: f64,
    pub reduction_percent: f64,
    pub values: usize,
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, b) in &self.budgets {
            writeln!(
                f,
                "{name}: eb={} pb={} bias={} sigma_min={:.3e} sigma_max={:.3e} mu=[{:.4}, {:.4}]",
                b.format.eb, b.format.pb, b.format.bias, b.stats.sigma_min, b.stats.sigma_max, b.stats.mu_min, b.stats.mu_max
            )?;
        }
        write!(
            f,
            "average bits = {:.2}  reduction = {:.1}%  values = {}",
            self.avg_bits, self.reduction_percent, self.values
        )
    }
}

/// Layer a tensor belongs to: its name without the trailing `.w`/`.b`.
pub fn layer_of(name: &str) -> &str {
    name.strip_suffix(".w").or_else(|| name.strip_suffix(".b")).unwrap_or(name)
}

fn group_layers(model: &TransformerModel) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (name, t)) in model.params().iter().enumerate() {
        if t.rho.is_some() {
            groups.entry(layer_of(name).to_string()).or_default().push(i);
        }
    }
    groups
}

/// Per-layer budgets, iterated to a fixed point on the quantized values so
/// that compressing a decompressed model reproduces the same bits.
pub fn layer_budgets(model: &TransformerModel, z: f64) -> Result<Vec<(String, LayerBitBudget)>> {
    let mut out = Vec::new();
    for (layer, idx) in group_layers(model) {
        let mut tensors: Vec<VariationalTensor> = idx.iter().map(|&i| model.params().tensor(i).clone()).collect();
        let mut budget = derive_budget(&LayerStats::from_tensors(&tensors)?, z)?;
        let mut settled = false;
        for _ in 0..16 {
            for t in tensors.iter_mut() {
                quantize_tensor(t, &budget.format)?;
            }
            let next = derive_budget(&LayerStats::from_tensors(&tensors)?, z)?;
            if next.format == budget.format {
                settled = true;
                break;
            }
            budget = next;
        }
        if !settled {
            return Err(Error::Numerical(format!("bit budget of layer '{layer}' did not settle")));
        }
        out.push((layer, budget));
    }
    Ok(out)
}

fn quantize_tensor(t: &mut VariationalTensor, f: &BitFormat) -> Result<()> {
    for v in t.mean.data_mut() {
        *v = quantize(*v, f)?;
    }
    if let Some(r) = t.rho.as_mut() {
        for v in r.data_mut() {
            *v = quantize(*v, f)?;
        }
    }
    Ok(())
}

/// Quantize every tensor: variational means and scales under their layer's
/// budget, point estimates at the full 32-bit layout.
pub fn compress_model(model: &TransformerModel, z: f64) -> Result<(CompressedModel, CompressionReport)> {
    let budgets = layer_budgets(model, z)?;
    let by_layer: BTreeMap<&str, BitFormat> = budgets.iter().map(|(n, b)| (n.as_str(), b.format)).collect();
    let mut layers = Vec::new();
    let mut bits_total = 0u64;
    let mut values = 0usize;
    for (name, t) in model.params().iter() {
        let format = match t.rho {
            Some(_) => by_layer[layer_of(name)],
            None => BitFormat::FULL,
        };
        layers.push(CompressedLayer::encode(name, Role::Mean, t.shape(), t.mean.data(), format)?);
        bits_total += format.bits() as u64 * t.len() as u64;
        values += t.len();
        if let Some(rho) = &t.rho {
            layers.push(CompressedLayer::encode(name, Role::Rho, t.shape(), rho.data(), format)?);
            bits_total += format.bits() as u64 * t.len() as u64;
            values += t.len();
        }
    }
    let avg_bits = bits_total as f64 / values.max(1) as f64;
    Ok((
        CompressedModel { layers },
        CompressionReport {
            budgets,
            avg_bits,
            reduction_percent: 100.0 * (1.0 - avg_bits / 32.0),
            values,
        },
    ))
}

/// Replace the model's parameters with the dequantized artifact values.
pub fn load_compressed(model: &mut TransformerModel, artifact: &CompressedModel) -> Result<()> {
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut rhos: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for l in &artifact.layers {
        let slot = match l.role {
            Role::Mean => &mut means,
            Role::Rho => &mut rhos,
        };
        if slot.insert(&l.name, l.decode()).is_some() {
            return Err(Error::Format(format!("duplicate record for '{}'", l.name)));
        }
    }
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let current = model.params().get(&name).unwrap();
        let shape = current.shape().to_vec();
        let mean = means
            .remove(name.as_str())
            .ok_or_else(|| Error::Format(format!("artifact lacks tensor '{name}'")))?;
        let t = match current.rho {
            Some(_) => {
                let rho = rhos
                    .remove(name.as_str())
                    .ok_or_else(|| Error::Format(format!("artifact lacks scales of '{name}'")))?;
                VariationalTensor::variational(&shape, mean, rho)?
            }
            None => VariationalTensor::point(&shape, mean)?,
        };
        model.params_mut().replace(&name, t)?;
    }
    if let Some(extra) = means.keys().chain(rhos.keys()).next() {
        return Err(Error::Format(format!("artifact has unknown tensor '{extra}'")));
    }
    Ok(())
}

impl CompressedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
            out.extend_from_slice(l.name.as_bytes());
            out.push(l.role as u8);
            out.extend_from_slice(&(l.shape.len() as u32).to_le_bytes());
            for &d in &l.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(l.format.eb);
            out.push(l.format.pb);
            out.extend_from_slice(&l.format.bias.to_le_bytes());
            out.extend_from_slice(&(l.count as u64).to_le_bytes());
            out.extend_from_slice(&l.packed);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad compressed-artifact magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let role = match r.u8()? {
                0 => Role::Mean,
                1 => Role::Rho,
                t => return Err(Error::Format(format!("unknown role tag {t}"))),
            };
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("implausible tensor rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let format = BitFormat {
                eb: r.u8()?,
                pb: r.u8()?,
                bias: r.i32()?,
            };
            format.validate()?;
            let count = r.u64()? as usize;
            if count != shape.iter().product::<usize>() {
                return Err(Error::Format(format!("'{name}': count {count} does not match shape {shape:?}")));
            }
            let packed = r.take(packed_len(count, format.bits()))?.to_vec();
            layers.push(CompressedLayer {
                name,
                role,
                shape,
                format,
                count,
                packed,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Length(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { layers })
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Length(format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::transformer::ModelConfig;
    use proptest::prelude::*;

    fn stats(sigma_min: f64, sigma_max: f64, mu: f64) -> LayerStats {
        LayerStats {
            sigma_min,
            sigma_max,
            mu_min: -mu,
            mu_max: mu,
            rho_abs_max: 0.0,
        }
    }

    fn small_model() -> TransformerModel {
        let c = ModelConfig {
            d_model: 8,
            heads: 2,
            enc_depth: 1,
            dec_depth: 1,
            ff_width: 8,
            units: 2,
            src_vocab: Some(9),
            tgt_vocab: 9,
            max_src_len: 8,
            max_tgt_len: 8,
            rho_offset: -4.0,
            ..ModelConfig::default()
        };
        TransformerModel::new(c, 3).unwrap()
    }

    #[test]
    fn full_format_identity_cases() {
        let f = BitFormat::FULL;
        let one = encode_value(1.0, &f).unwrap();
        assert_eq!(one >> 23 & 0xff, 127);
        assert_eq!(one & ((1 << 23) - 1), 0);
        assert_eq!(decode_value(one, &f), 1.0);
        assert_eq!(quantize(-0.15625, &f).unwrap(), -0.15625);
        assert_eq!(BitFormat::with_standard_bias(8, 23).unwrap(), f);
        // agrees with f32 rounding for normal values
        let mut rng = RngStream::new(1);
        for _ in 0..10_000 {
            let x = rng.normal() * 10f64.powi(rng.below(10) as i32 - 5);
            assert_eq!(quantize(x, &f).unwrap(), x as f32 as f64);
        }
        assert!(encode_value(f64::NAN, &f).is_err());
    }

    #[test]
    fn budget_examples() {
        // σ_min dwarfs the weights: every mantissa bit is noise
        let b = derive_budget(&stats(4.0, 4.0, 0.5), 0.0).unwrap();
        assert_eq!(b.format.pb, 0);
        // μ ∈ [−1, 1], σ_min = 2^-8, z = 3, reach 1 + 3·0.5 → e_max = 2
        let b = derive_budget(&stats(2f64.powi(-8), 0.5, 1.0), 3.0).unwrap();
        assert_eq!(b.format.pb, 11);
        assert!(b.format.max_value() >= 2.5);
        assert!(b.format.min_normal() <= 2f64.powi(-9));
        // clamp
        let b = derive_budget(&stats(1e-300, 1e300, 1e300), 3.0).unwrap();
        assert!(b.format.bits() <= 32);
        assert!(matches!(derive_budget(&stats(0.0, 1.0, 1.0), 3.0), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn budget_monotone_in_z() {
        let s = stats(1e-3, 0.2, 0.8);
        let mut prev = derive_budget(&s, 0.0).unwrap();
        for z in [1.0, 3.0, 10.0, 100.0, 1e4, 1e6] {
            let b = derive_budget(&s, z).unwrap();
            assert!(b.format.eb >= prev.format.eb);
            assert!(b.format.pb >= prev.format.pb);
            prev = b;
        }
    }

    #[test]
    fn half_ulp_bound_on_random_values() {
        let mut rng = RngStream::new(7);
        for trial in 0..1000 {
            let s = LayerStats {
                sigma_min: 2f64.powf(rng.uniform(-14.0, -2.0)),
                sigma_max: rng.uniform(0.01, 1.0),
                mu_min: -rng.uniform(0.01, 4.0),
                mu_max: rng.uniform(0.01, 4.0),
                rho_abs_max: rng.uniform(0.0, 9.0),
            };
            let b = derive_budget(&s, 3.0).unwrap();
            let f = b.format;
            let reach = s.mu_abs_max() + 3.0 * s.sigma_max;
            assert!(f.max_value() >= reach, "trial {trial}: range {} < {reach}", f.max_value());
            for _ in 0..1000 {
                let x = rng.uniform(-reach, reach);
                let q = quantize(x, &f).unwrap();
                if x.abs() >= f.min_normal() {
                    let e = floor_log2(x.abs());
                    assert!((q - x).abs() <= exp2i(e - f.pb as i64 - 1), "x={x} q={q} {f:?}");
                }
                // the defining property: never more than half the smallest sigma
                assert!((q - x).abs() <= s.sigma_min / 2.0, "x={x} q={q} {f:?}");
            }
        }
    }

    #[test]
    fn flush_and_clamp() {
        let f = BitFormat { eb: 2, pb: 3, bias: 1 };
        // exponents 0..=2, max = 4·(2 − 1/8) = 7.5
        assert_eq!(f.max_value(), 7.5);
        assert_eq!(quantize(100.0, &f).unwrap(), 7.5);
        assert_eq!(quantize(-100.0, &f).unwrap(), -7.5);
        assert_eq!(quantize(0.4, &f).unwrap(), 0.0);
        assert_eq!(quantize(1.0625, &f).unwrap(), 1.0); // tie rounds to even
        assert_eq!(quantize(1.1875, &f).unwrap(), 1.25);
        assert_eq!(quantize(1.97, &f).unwrap(), 2.0); // mantissa carry
    }

    #[test]
    fn bit_packing_round_trip() {
        let f = BitFormat { eb: 3, pb: 4, bias: 3 };
        let vals: Vec<f64> = (0..37).map(|i| (i as f64 - 18.0) / 4.0).collect();
        let l = CompressedLayer::encode("x", Role::Mean, &[37], &vals, f).unwrap();
        assert_eq!(l.packed.len(), packed_len(37, 8));
        let back = l.decode();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(quantize(*a, &f).unwrap(), *b);
        }
    }

    #[test]
    fn model_round_trip_is_idempotent() {
        let model = small_model();
        let (art, report) = compress_model(&model, 3.0).unwrap();
        assert!(report.avg_bits < 32.0);
        let bytes = art.to_bytes();
        let parsed = CompressedModel::from_bytes(&bytes).unwrap();
        assert_eq!(parsed, art);
        for (l, p) in art.layers.iter().zip(&parsed.layers) {
            assert_eq!(l.format, p.format);
        }

        let mut loaded = model.clone();
        load_compressed(&mut loaded, &parsed).unwrap();
        let (again, report2) = compress_model(&loaded, 3.0).unwrap();
        assert_eq!(again.to_bytes(), bytes);
        assert_eq!(report2.avg_bits, report.avg_bits);

        // size accounting: payload bits within one byte per record
        let payload: usize = art.layers.iter().map(|l| l.packed.len()).sum();
        let ideal = report.avg_bits * report.values as f64 / 8.0;
        assert!((payload as f64 - ideal).abs() <= art.layers.len() as f64);
    }

    #[test]
    fn mean_error_within_half_sigma_min_on_model() {
        let model = small_model();
        let (art, report) = compress_model(&model, 3.0).unwrap();
        let mut loaded = model.clone();
        load_compressed(&mut loaded, &art).unwrap();
        let budgets: BTreeMap<_, _> = report.budgets.iter().cloned().collect();
        for ((name, a), (_, b)) in model.params().iter().zip(loaded.params().iter()) {
            if a.rho.is_none() {
                assert_eq!(a, b, "point tensor {name} must be unchanged");
                continue;
            }
            let s = budgets[layer_of(name)].stats;
            for (x, y) in a.mean.data().iter().zip(b.mean.data()) {
                assert!((x - y).abs() <= s.sigma_min / 2.0);
            }
        }
    }

    #[test]
    fn corrupt_artifacts_are_rejected() {
        let (art, _) = compress_model(&small_model(), 3.0).unwrap();
        let bytes = art.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(CompressedModel::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(CompressedModel::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Length(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(CompressedModel::from_bytes(&v), Err(Error::Version { .. })));
    }

    proptest! {
        #[test]
        fn representable_values_are_fixed_points(eb in 1u8..9, pb in 0u8..20, bias in -20i32..20, code in any::<u32>()) {
            prop_assume!(1 + eb as u32 + pb as u32 <= 32);
            let f = BitFormat { eb, pb, bias };
            let mask = if f.bits() == 32 { u32::MAX } else { (1u32 << f.bits()) - 1 };
            let v = decode_value(code & mask, &f);
            prop_assert_eq!(quantize(v, &f).unwrap(), v);
        }
    }
}
