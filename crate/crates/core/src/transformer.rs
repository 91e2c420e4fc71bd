//! Encoder-decoder assembly.
//!
//! Every forward pass runs on a [`Tape`]. Training binds the variational
//! means and scales as trainable leaves and reparameterizes them on the
//! tape; inference binds one fixed draw of every tensor as borrowed
//! constants. Both paths share the same layer code.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::positional_table;
use crate::data::{Source, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::graph::{AttentionLayout, Tape, Var};
use crate::lwta::{Activation, Phase, T_INFER, T_TRAIN};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Matrix;
use crate::var_weights::{VariationalTensor, WeightMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `LN(x + f(x))`.
    Post,
    /// `x + f(LN(x))`, with a final normalization after each stack.
    Pre,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    /// Feed-forward hidden width (`K·U` for competing units).
    pub ff_width: usize,
    pub units: usize,
    pub activation: Activation,
    pub weight_mode: WeightMode,
    pub t_train: f64,
    pub t_infer: f64,
    /// Posterior draws averaged at inference.
    pub samples: usize,
    /// Added to every initial `rho`; zero keeps the plain Kaiming-uniform draw.
    pub rho_offset: f64,
    pub norm: NormPlacement,
    /// Token-id sources: source vocabulary size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src_vocab: Option<usize>,
    /// Feature-sequence sources: per-step feature width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    pub tgt_vocab: usize,
    pub max_src_len: usize,
    /// Longest decoder input, BOS included.
    pub max_tgt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            enc_depth: 2,
            dec_depth: 2,
            ff_width: 2048,
            units: 4,
            activation: Activation::Lwta,
            weight_mode: WeightMode::Variational,
            t_train: T_TRAIN,
            t_infer: T_INFER,
            samples: 4,
            rho_offset: 0.0,
            norm: NormPlacement::Post,
            src_vocab: None,
            feature_dim: None,
            tgt_vocab: 0,
            max_src_len: 64,
            max_tgt_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be positive and even, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.units == 0 || self.ff_width == 0 {
            return bad("units and ff_width must be positive".into());
        }
        if self.activation == Activation::Lwta {
            if self.ff_width % self.units != 0 {
                return bad(format!("ff_width {} not divisible by units {}", self.ff_width, self.units));
            }
            if self.d_model % self.units != 0 {
                return bad(format!("d_model {} not divisible by units {}", self.d_model, self.units));
            }
        }
        match (self.src_vocab, self.feature_dim) {
            (Some(v), None) if v > 0 => {}
            (None, Some(d)) if d > 0 => {}
            _ => return bad("exactly one of src_vocab / feature_dim must be set and positive".into()),
        }
        if self.tgt_vocab <= RESERVED {
            return bad(format!("tgt_vocab {} leaves no payload tokens", self.tgt_vocab));
        }
        if !(self.t_train > 0.0 && self.t_infer > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !self.rho_offset.is_finite() {
            return bad("rho_offset must be finite".into());
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.max_src_len == 0 || self.max_tgt_len == 0 {
            return bad("maximum lengths must be positive".into());
        }
        Ok(())
    }

    pub fn temperature(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Train => self.t_train,
            Phase::Infer => self.t_infer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Weight,
    Bias,
    Embedding,
    Gain,
    Shift,
}

#[derive(Clone, Debug)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    role: Role,
}

fn layout(c: &ModelConfig) -> Vec<TensorSpec> {
    let d = c.d_model;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize, role: Role| {
        out.push(TensorSpec {
            name,
            shape,
            fan_in,
            fan_out,
            role,
        })
    };
    // competing-unit weights keep their J×K×U shape
    let hidden_shape = |inputs: usize, width: usize| {
        if c.activation == Activation::Lwta {
            vec![inputs, width / c.units, c.units]
        } else {
            vec![inputs, width]
        }
    };
    let src_in = match c.src_vocab {
        Some(v) => {
            push("src.embed".into(), vec![v, d], d, d, Role::Embedding);
            d
        }
        None => c.feature_dim.unwrap_or(0),
    };
    push("src.lwta.w".into(), hidden_shape(src_in, d), src_in, d, Role::Weight);
    push("src.lwta.b".into(), vec![d], src_in, d, Role::Bias);

    let attn = |push: &mut dyn FnMut(String, Vec<usize>, usize, usize, Role), p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.{m}.w"), vec![d, d], d, d, Role::Weight);
            push(format!("{p}.{m}.b"), vec![d], d, d, Role::Bias);
        }
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, usize, usize, Role), p: &str| {
        push(format!("{p}.gain"), vec![d], d, d, Role::Gain);
        push(format!("{p}.shift"), vec![d], d, d, Role::Shift);
    };
    let ff = |push: &mut dyn FnMut(String, Vec<usize>, usize, usize, Role), p: &str| {
        push(format!("{p}.in.w"), hidden_shape(d, c.ff_width), d, c.ff_width, Role::Weight);
        push(format!("{p}.in.b"), vec![c.ff_width], d, c.ff_width, Role::Bias);
        push(format!("{p}.out.w"), vec![c.ff_width, d], c.ff_width, d, Role::Weight);
        push(format!("{p}.out.b"), vec![d], c.ff_width, d, Role::Bias);
    };
    for l in 0..c.enc_depth {
        attn(&mut push, &format!("enc.{l}.self"));
        norm(&mut push, &format!("enc.{l}.ln1"));
        ff(&mut push, &format!("enc.{l}.ff"));
        norm(&mut push, &format!("enc.{l}.ln2"));
    }
    if c.norm == NormPlacement::Pre && c.enc_depth > 0 {
        norm(&mut push, "enc.final_ln");
    }
    push("tgt.embed".into(), vec![c.tgt_vocab, d], d, d, Role::Embedding);
    for l in 0..c.dec_depth {
        attn(&mut push, &format!("dec.{l}.self"));
        norm(&mut push, &format!("dec.{l}.ln1"));
        attn(&mut push, &format!("dec.{l}.cross"));
        norm(&mut push, &format!("dec.{l}.ln2"));
        ff(&mut push, &format!("dec.{l}.ff"));
        norm(&mut push, &format!("dec.{l}.ln3"));
    }
    if c.norm == NormPlacement::Pre && c.dec_depth > 0 {
        norm(&mut push, "dec.final_ln");
    }
    push("out.w".into(), vec![d, c.tgt_vocab], d, c.tgt_vocab, Role::Weight);
    push("out.b".into(), vec![c.tgt_vocab], d, c.tgt_vocab, Role::Bias);
    out
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, VariationalTensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: VariationalTensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&VariationalTensor> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut VariationalTensor> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &VariationalTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut VariationalTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, i: usize) -> &VariationalTensor {
        &self.entries[i].1
    }

    /// Replace a tensor, keeping its position. Shapes and modes must agree.
    pub fn replace(&mut self, name: &str, t: VariationalTensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("unknown tensor '{name}'")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "tensor '{name}': expected shape {:?}, found {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        if slot.mode() != t.mode() {
            return Err(Error::Shape(format!(
                "tensor '{name}': expected {:?} mode, found {:?}",
                slot.mode(),
                t.mode()
            )));
        }
        *slot = t;
        Ok(())
    }

    /// Total stored scalars (means plus scales).
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, t)| t.len() * if t.rho.is_some() { 2 } else { 1 })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    pe: Matrix,
}

impl TransformerModel {
    /// Freshly initialized model: Kaiming-uniform means and scales in
    /// variational mode, Xavier-normal weights and zero biases otherwise.
    /// Normalization gains start at one, shifts at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed);
        let mut params = ParamStore::new();
        for spec in layout(&config) {
            let t = match (spec.role, config.weight_mode) {
                (Role::Gain, _) => VariationalTensor::constant(&spec.shape, 1.0, WeightMode::PointEstimate, 0.0)?,
                (Role::Shift, _) => VariationalTensor::constant(&spec.shape, 0.0, WeightMode::PointEstimate, 0.0)?,
                (_, WeightMode::Variational) => {
                    let mut t = VariationalTensor::init_kaiming_uniform(&spec.shape, spec.fan_in, &mut rng)?;
                    if let Some(r) = t.rho.as_mut() {
                        r.data_mut().iter_mut().for_each(|v| *v += config.rho_offset);
                    }
                    t
                }
                (Role::Bias, WeightMode::PointEstimate) => {
                    VariationalTensor::constant(&spec.shape, 0.0, WeightMode::PointEstimate, 0.0)?
                }
                (_, WeightMode::PointEstimate) => {
                    VariationalTensor::init_xavier_normal(&spec.shape, spec.fan_in, spec.fan_out, &mut rng)?
                }
            };
            let mut t = t;
            t.round_to_f32();
            params.insert(spec.name, t)?;
        }
        Self::from_params(config, params)
    }

    /// Assemble from existing tensors; every expected tensor must be present
    /// with the expected shape and mode.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = layout(&config);
        if specs.len() != params.len() {
            return Err(Error::Shape(format!(
                "configuration expects {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Shape(format!("missing tensor '{}'", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor '{}': expected shape {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
            let want = match spec.role {
                Role::Gain | Role::Shift => WeightMode::PointEstimate,
                _ => config.weight_mode,
            };
            if t.mode() != want {
                return Err(Error::Shape(format!("tensor '{}': expected {want:?} mode", spec.name)));
            }
        }
        // reorder to the canonical layout
        let mut ordered = ParamStore::new();
        for spec in &specs {
            ordered.insert(spec.name.clone(), params.get(&spec.name).unwrap().clone())?;
        }
        let pe = positional_table(config.max_src_len.max(config.max_tgt_len), config.d_model)?;
        Ok(Self {
            config,
            params: ordered,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// One posterior draw of every tensor (means for point estimates).
    pub fn sample_weights(&self, rng: &mut RngStream) -> WeightSample {
        WeightSample {
            values: self.params.iter().map(|(_, t)| t.sample(rng)).collect(),
        }
    }

    /// The posterior means.
    pub fn mean_weights(&self) -> WeightSample {
        WeightSample {
            values: self.params.iter().map(|(_, t)| t.mean.clone()).collect(),
        }
    }

    /// Bind one fixed weight draw as tape constants.
    pub fn bind_sample<'a>(&self, tape: &mut Tape<'a>, sample: &'a WeightSample) -> Binding {
        Binding {
            vars: sample.values.iter().map(|m| tape.constant_ref(m)).collect(),
        }
    }

    /// Bind the trainable parameters, reparameterizing variational tensors
    /// with noise drawn from `rng` in parameter order.
    pub fn bind_training<'a>(&'a self, tape: &mut Tape<'a>, rng: &mut RngStream) -> TrainBinding {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut leaves = Vec::with_capacity(self.params.len());
        for (_, t) in self.params.iter() {
            let mean = tape.param_ref(&t.mean);
            match &t.rho {
                Some(rho) => {
                    let rho_v = tape.param_ref(rho);
                    let eps = t.draw_noise(rng).expect("variational tensor draws noise");
                    vars.push(tape.reparam(mean, rho_v, eps));
                    leaves.push((mean, Some(rho_v)));
                }
                None => {
                    vars.push(mean);
                    leaves.push((mean, None));
                }
            }
        }
        TrainBinding {
            binding: Binding { vars },
            leaves,
        }
    }

    fn var(&self, b: &Binding, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("tensor '{name}' missing from layout"));
        b.vars[i]
    }

    fn linear(&self, tape: &mut Tape<'_>, b: &Binding, x: Var, prefix: &str) -> Var {
        let w = self.var(b, &format!("{prefix}.w"));
        let bias = self.var(b, &format!("{prefix}.b"));
        tape.linear(x, w, bias)
    }

    fn layer_norm(&self, tape: &mut Tape<'_>, b: &Binding, x: Var, prefix: &str) -> Var {
        let g = self.var(b, &format!("{prefix}.gain"));
        let s = self.var(b, &format!("{prefix}.shift"));
        tape.layer_norm(x, g, s)
    }

    fn activate(&self, tape: &mut Tape<'_>, pre: Var, layer: u64, rows: &RowInfo, ctx: &mut PassContext) -> Var {
        match self.config.activation.pointwise() {
            Some(kind) => tape.pointwise(pre, kind),
            None => {
                let width = tape.value(pre).cols();
                let noise = ctx.noise.matrix_masked(layer, &rows.keys, Some(&rows.valid), width);
                ctx.winners.push((pre, rows.weights.clone()));
                tape.lwta(pre, &noise, self.config.units, ctx.temperature)
            }
        }
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        xq: Var,
        xkv: Var,
        prefix: &str,
        layout: AttentionLayout,
    ) -> Var {
        let q = self.linear(tape, b, xq, &format!("{prefix}.q"));
        let k = self.linear(tape, b, xkv, &format!("{prefix}.k"));
        let v = self.linear(tape, b, xkv, &format!("{prefix}.v"));
        let a = tape.attention(q, k, v, layout);
        self.linear(tape, b, a, &format!("{prefix}.o"))
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        x: Var,
        prefix: &str,
        layer: u64,
        rows: &RowInfo,
        ctx: &mut PassContext,
    ) -> Var {
        let pre = self.linear(tape, b, x, &format!("{prefix}.in"));
        let h = self.activate(tape, pre, layer, rows, ctx);
        self.linear(tape, b, h, &format!("{prefix}.out"))
    }

    fn sublayer_input(&self, tape: &mut Tape<'_>, b: &Binding, x: Var, ln: &str) -> Var {
        match self.config.norm {
            NormPlacement::Pre => self.layer_norm(tape, b, x, ln),
            NormPlacement::Post => x,
        }
    }

    fn sublayer_output(&self, tape: &mut Tape<'_>, b: &Binding, x: Var, s: Var, ln: &str) -> Var {
        let sum = tape.add(x, s);
        match self.config.norm {
            NormPlacement::Post => self.layer_norm(tape, b, sum, ln),
            NormPlacement::Pre => sum,
        }
    }

    fn position_rows(&self, batch: usize, len: usize) -> Matrix {
        let d = self.config.d_model;
        let mut m = Matrix::zeros(batch * len, d);
        for i in 0..batch {
            for p in 0..len {
                m.row_mut(i * len + p).copy_from_slice(self.pe.row(p));
            }
        }
        m
    }

    /// Encode a padded batch of sources. Rows of the result are
    /// `item × max_len`, item-major.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        sources: &[&Source],
        keys: &[u64],
        ctx: &mut PassContext,
    ) -> Result<Encoded> {
        if sources.is_empty() {
            return Err(Error::Empty("no sources to encode".into()));
        }
        let lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        if let Some(&l) = lens.iter().find(|&&l| l == 0) {
            return Err(Error::Empty(format!("source of length {l}")));
        }
        let max_len = *lens.iter().max().unwrap();
        if max_len > self.config.max_src_len {
            return Err(Error::Length(format!(
                "source length {max_len} exceeds maximum {}",
                self.config.max_src_len
            )));
        }
        let n = sources.len();
        let rows = RowInfo::new(keys, &lens, max_len);
        let d = self.config.d_model;

        let input = match self.config.src_vocab {
            Some(vocab) => {
                let mut ids = Vec::with_capacity(n * max_len);
                for s in sources {
                    let Source::Tokens(t) = s else {
                        return Err(Error::InvalidArgument("model expects token sources".into()));
                    };
                    if let Some(&bad) = t.iter().find(|&&id| id as usize >= vocab) {
                        return Err(Error::InvalidArgument(format!("source id {bad} outside vocabulary of {vocab}")));
                    }
                    ids.extend(t.iter().map(|&i| i as usize));
                    ids.extend(std::iter::repeat_n(PAD as usize, max_len - t.len()));
                }
                let table = self.var(b, "src.embed");
                tape.gather(table, ids)
            }
            None => {
                let dim = self.config.feature_dim.unwrap_or(0);
                let mut m = Matrix::zeros(n * max_len, dim);
                for (i, s) in sources.iter().enumerate() {
                    let Source::Features(f) = s else {
                        return Err(Error::InvalidArgument("model expects feature sources".into()));
                    };
                    if f.dim() != dim {
                        return Err(Error::Shape(format!("feature width {} != model input width {dim}", f.dim())));
                    }
                    for p in 0..f.steps() {
                        m.row_mut(i * max_len + p).copy_from_slice(f.values().row(p));
                    }
                }
                tape.constant(m)
            }
        };
        let pre = self.linear(tape, b, input, "src.lwta");
        let emb = self.activate(tape, pre, 0, &rows, ctx);
        let scaled = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.constant(self.position_rows(n, max_len));
        let mut x = tape.add(scaled, pe);

        let key_valid = rows.valid.clone();
        for l in 0..self.config.enc_depth {
            let p = format!("enc.{l}");
            let layout = AttentionLayout {
                batch: n,
                q_len: max_len,
                k_len: max_len,
                heads: self.config.heads,
                causal: false,
                key_valid: key_valid.clone(),
            };
            let h = self.sublayer_input(tape, b, x, &format!("{p}.ln1"));
            let a = self.attention(tape, b, h, h, &format!("{p}.self"), layout);
            x = self.sublayer_output(tape, b, x, a, &format!("{p}.ln1"));
            let h = self.sublayer_input(tape, b, x, &format!("{p}.ln2"));
            let f = self.feed_forward(tape, b, h, &format!("{p}.ff"), 1 + l as u64, &rows, ctx);
            x = self.sublayer_output(tape, b, x, f, &format!("{p}.ln2"));
        }
        if self.config.norm == NormPlacement::Pre && self.config.enc_depth > 0 {
            x = self.layer_norm(tape, b, x, "enc.final_ln");
        }
        Ok(Encoded {
            memory: x,
            lens,
            max_len,
        })
    }

    /// Decoder logits for every position of every prefix. `memory` holds one
    /// `mem_len`-row block per prefix. Rows of the result are
    /// `item × max_prefix_len`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<'_>,
        b: &Binding,
        memory: Var,
        mem_lens: &[usize],
        mem_len: usize,
        prefixes: &[&[u32]],
        keys: &[u64],
        ctx: &mut PassContext,
    ) -> Result<Var> {
        let n = prefixes.len();
        if n == 0 || mem_lens.len() != n || keys.len() != n {
            return Err(Error::InvalidArgument("decoder batch sizes disagree".into()));
        }
        let lens: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        if lens.contains(&0) {
            return Err(Error::Empty("decoder prefix must start with BOS".into()));
        }
        let t_len = *lens.iter().max().unwrap();
        if t_len > self.config.max_tgt_len {
            return Err(Error::Length(format!(
                "prefix length {t_len} exceeds maximum {}",
                self.config.max_tgt_len
            )));
        }
        let vocab = self.config.tgt_vocab;
        let mut ids = Vec::with_capacity(n * t_len);
        for p in prefixes {
            if let Some(&bad) = p.iter().find(|&&id| id as usize >= vocab) {
                return Err(Error::InvalidArgument(format!("target id {bad} outside vocabulary of {vocab}")));
            }
            ids.extend(p.iter().map(|&i| i as usize));
            ids.extend(std::iter::repeat_n(PAD as usize, t_len - p.len()));
        }
        let d = self.config.d_model;
        let rows = RowInfo::new(keys, &lens, t_len);
        let mem_valid: Vec<bool> = mem_lens
            .iter()
            .flat_map(|&l| (0..mem_len).map(move |j| j < l))
            .collect();

        let table = self.var(b, "tgt.embed");
        let emb = tape.gather(table, ids);
        let scaled = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.constant(self.position_rows(n, t_len));
        let mut x = tape.add(scaled, pe);
        for l in 0..self.config.dec_depth {
            let p = format!("dec.{l}");
            let self_layout = AttentionLayout {
                batch: n,
                q_len: t_len,
                k_len: t_len,
                heads: self.config.heads,
                causal: true,
                key_valid: rows.valid.clone(),
            };
            let h = self.sublayer_input(tape, b, x, &format!("{p}.ln1"));
            let a = self.attention(tape, b, h, h, &format!("{p}.self"), self_layout);
            x = self.sublayer_output(tape, b, x, a, &format!("{p}.ln1"));

            let cross_layout = AttentionLayout {
                batch: n,
                q_len: t_len,
                k_len: mem_len,
                heads: self.config.heads,
                causal: false,
                key_valid: mem_valid.clone(),
            };
            let h = self.sublayer_input(tape, b, x, &format!("{p}.ln2"));
            let a = self.attention(tape, b, h, memory, &format!("{p}.cross"), cross_layout);
            x = self.sublayer_output(tape, b, x, a, &format!("{p}.ln2"));

            let h = self.sublayer_input(tape, b, x, &format!("{p}.ln3"));
            let f = self.feed_forward(tape, b, h, &format!("{p}.ff"), 100 + l as u64, &rows, ctx);
            x = self.sublayer_output(tape, b, x, f, &format!("{p}.ln3"));
        }
        if self.config.norm == NormPlacement::Pre && self.config.dec_depth > 0 {
            x = self.layer_norm(tape, b, x, "dec.final_ln");
        }
        Ok(self.linear(tape, b, x, "out"))
    }

    /// A fixed network for inference: one weight draw (or the means) and
    /// keyed winner noise.
    pub fn network(&self, weights: WeightSample, noise: WinnerNoise, phase: Phase) -> Network<'_> {
        Network {
            model: self,
            weights,
            noise,
            temperature: self.config.temperature(phase),
        }
    }

    /// Draw a full posterior network from `rng`.
    pub fn sample_network(&self, rng: &mut RngStream, phase: Phase) -> Network<'_> {
        let weights = self.sample_weights(rng);
        let noise = WinnerNoise::Keyed(rng.next_u64());
        self.network(weights, noise, phase)
    }
}

/// Sampled tensors, aligned with the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSample {
    values: Vec<Matrix>,
}

impl WeightSample {
    pub fn values(&self) -> &[Matrix] {
        &self.values
    }
}

/// Tape variables for each parameter tensor, in parameter order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct TrainBinding {
    pub binding: Binding,
    /// `(mean, rho)` leaves per tensor, in parameter order.
    pub leaves: Vec<(Var, Option<Var>)>,
}

/// Source of the Gumbel noise that perturbs winner selection.
///
/// Keyed noise is a pure function of `(seed, layer, item, position)`, so a
/// row sees the same noise whether it is computed alone, in a batch, or as
/// part of a longer prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WinnerNoise {
    Zero,
    Keyed(u64),
}

impl WinnerNoise {
    pub fn matrix(&self, layer: u64, keys: &[(u64, u64)], width: usize) -> Matrix {
        self.matrix_masked(layer, keys, None, width)
    }

    /// Like `matrix`, leaving rows with `valid[r] == false` noise-free.
    pub fn matrix_masked(&self, layer: u64, keys: &[(u64, u64)], valid: Option<&[bool]>, width: usize) -> Matrix {
        let mut m = Matrix::zeros(keys.len(), width);
        if let WinnerNoise::Keyed(seed) = *self {
            for (r, &(item, pos)) in keys.iter().enumerate() {
                if valid.is_some_and(|v| !v[r]) {
                    continue;
                }
                let mut rng = RngStream::new(derive_seed(seed, &[layer, item, pos]));
                m.row_mut(r).iter_mut().for_each(|g| *g = rng.gumbel());
            }
        }
        m
    }
}

/// Per-pass settings and the competing-unit pre-activations it produced.
pub struct PassContext {
    pub noise: WinnerNoise,
    pub temperature: f64,
    /// `(pre-activation, per-row weight)` for every competing layer.
    pub winners: Vec<(Var, Vec<f64>)>,
}

impl PassContext {
    pub fn new(noise: WinnerNoise, temperature: f64) -> Self {
        Self {
            noise,
            temperature,
            winners: Vec::new(),
        }
    }
}

struct RowInfo {
    keys: Vec<(u64, u64)>,
    valid: Vec<bool>,
    weights: Vec<f64>,
}

impl RowInfo {
    fn new(items: &[u64], lens: &[usize], max_len: usize) -> Self {
        let mut keys = Vec::with_capacity(lens.len() * max_len);
        let mut valid = Vec::with_capacity(lens.len() * max_len);
        for (&item, &len) in items.iter().zip(lens) {
            for p in 0..max_len {
                keys.push((item, p as u64));
                valid.push(p < len);
            }
        }
        let weights = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Self { keys, valid, weights }
    }
}

pub struct Encoded {
    pub memory: Var,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

/// Encoder output kept outside a tape for incremental decoding.
#[derive(Clone, Debug)]
pub struct Memory {
    values: Matrix,
    lens: Vec<usize>,
    max_len: usize,
    keys: Vec<u64>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    /// Encoder states of item `i`, `source_len × d_model`.
    pub fn item(&self, i: usize) -> Matrix {
        let d = self.values.cols();
        let rows = self.lens[i];
        let start = i * self.max_len * d;
        Matrix::from_vec(rows, d, self.values.data()[start..start + rows * d].to_vec())
    }
}

/// A single fixed network drawn from the posterior.
pub struct Network<'m> {
    model: &'m TransformerModel,
    weights: WeightSample,
    noise: WinnerNoise,
    temperature: f64,
}

impl<'m> Network<'m> {
    pub fn model(&self) -> &'m TransformerModel {
        self.model
    }

    /// Encode a batch; `keys` identify items for winner noise.
    pub fn encode(&self, sources: &[&Source], keys: &[u64]) -> Result<Memory> {
        let mut tape = Tape::new();
        let b = self.model.bind_sample(&mut tape, &self.weights);
        let mut ctx = PassContext::new(self.noise, self.temperature);
        let enc = self.model.encode_on_tape(&mut tape, &b, sources, keys, &mut ctx)?;
        Ok(Memory {
            values: tape.value(enc.memory).clone(),
            lens: enc.lens,
            max_len: enc.max_len,
            keys: keys.to_vec(),
        })
    }

    /// Logits at every position of each prefix; `items` selects the memory
    /// entry for each prefix.
    pub fn decode(&self, memory: &Memory, items: &[usize], prefixes: &[&[u32]]) -> Result<Vec<Matrix>> {
        let (logits, t_len) = self.decode_rows(memory, items, prefixes)?;
        let v = logits.cols();
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let start = i * t_len * v;
                Matrix::from_vec(p.len(), v, logits.data()[start..start + p.len() * v].to_vec())
            })
            .collect())
    }

    /// Next-token logits after each prefix, one row per prefix.
    pub fn decode_last(&self, memory: &Memory, items: &[usize], prefixes: &[&[u32]]) -> Result<Matrix> {
        let (logits, t_len) = self.decode_rows(memory, items, prefixes)?;
        let v = logits.cols();
        let mut out = Matrix::zeros(prefixes.len(), v);
        for (i, p) in prefixes.iter().enumerate() {
            out.row_mut(i).copy_from_slice(logits.row(i * t_len + p.len() - 1));
        }
        Ok(out)
    }

    fn decode_rows(&self, memory: &Memory, items: &[usize], prefixes: &[&[u32]]) -> Result<(Matrix, usize)> {
        if items.len() != prefixes.len() {
            return Err(Error::InvalidArgument("items and prefixes differ in length".into()));
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= memory.len()) {
            return Err(Error::InvalidArgument(format!("memory has no item {bad}")));
        }
        let d = memory.values.cols();
        let ml = memory.max_len;
        let mut mem = Matrix::zeros(items.len() * ml, d);
        for (k, &i) in items.iter().enumerate() {
            let src = &memory.values.data()[i * ml * d..(i + 1) * ml * d];
            mem.data_mut()[k * ml * d..(k + 1) * ml * d].copy_from_slice(src);
        }
        let lens: Vec<usize> = items.iter().map(|&i| memory.lens[i]).collect();
        let keys: Vec<u64> = items.iter().map(|&i| memory.keys[i]).collect();
        let t_len = prefixes.iter().map(|p| p.len()).max().unwrap_or(0);

        let mut tape = Tape::new();
        let b = self.model.bind_sample(&mut tape, &self.weights);
        let mut ctx = PassContext::new(self.noise, self.temperature);
        let mem_var = tape.constant(mem);
        let logits = self
            .model
            .decode_on_tape(&mut tape, &b, mem_var, &lens, ml, prefixes, &keys, &mut ctx)?;
        Ok((tape.value(logits).clone(), t_len))
    }

    /// Single-source convenience: encoder states for one source.
    pub fn encode_one(&self, source: &Source) -> Result<Memory> {
        self.encode(&[source], &[0])
    }

    /// Next-token logits for one prefix.
    pub fn decode_step(&self, memory: &Memory, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.decode_last(memory, &[0], &[prefix])?.into_vec())
    }
}
