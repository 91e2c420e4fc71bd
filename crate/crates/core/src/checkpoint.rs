//! Checkpoint container.
//!
//! Layout, all little-endian: magic `SLWT`, version u16, the run
//! configuration as TOML text (u32 length + UTF-8), best dev score f64, best
//! step u64, steps taken u64, source vocabulary (u8 presence flag, then u32
//! count and length-prefixed tokens), target vocabulary, u32 tensor count,
//! then per tensor: u32 name length + name, u32 rank + u32 dims, mode u8
//! (0 point, 1 variational), the means as f32, and the scales as f32 when
//! variational.

use std::path::Path;

use crate::compression::Reader;
use crate::config::RunConfig;
use crate::data::{write_atomic, Vocab};
use crate::error::{Error, Result};
use crate::transformer::{ParamStore, TransformerModel};
use crate::var_weights::VariationalTensor;

const MAGIC: &[u8; 4] = b"SLWT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub src_vocab: Option<Vocab>,
    pub tgt_vocab: Vocab,
    pub best_bleu: f64,
    pub best_step: u64,
    pub steps: u64,
    pub params: ParamStore,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

fn put_vocab(out: &mut Vec<u8>, v: &Vocab) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for t in v.tokens() {
        put_str(out, t);
    }
}

fn get_vocab(r: &mut Reader<'_>) -> Result<Vocab> {
    let n = r.u32()? as usize;
    let tokens = (0..n).map(|_| get_str(r)).collect::<Result<Vec<_>>>()?;
    Vocab::from_tokens(tokens)
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn get_f32s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f64>> {
    let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Length("tensor too large".into()))?)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

impl Checkpoint {
    /// Snapshot of `model` with the given training metadata. Vocabularies
    /// must match the model's embedding sizes.
    pub fn new(
        run: RunConfig,
        model: &TransformerModel,
        src_vocab: Option<Vocab>,
        tgt_vocab: Vocab,
        best_bleu: f64,
        best_step: u64,
        steps: u64,
    ) -> Result<Self> {
        let mut run = run;
        run.model = model.config().clone();
        if src_vocab.as_ref().map(Vocab::len) != run.model.src_vocab || tgt_vocab.len() != run.model.tgt_vocab {
            return Err(Error::Config("vocabulary sizes disagree with the model".into()));
        }
        Ok(Self {
            run,
            src_vocab,
            tgt_vocab,
            best_bleu,
            best_step,
            steps,
            params: model.params().clone(),
        })
    }

    pub fn model(&self) -> Result<TransformerModel> {
        TransformerModel::from_params(self.run.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.run.to_toml_string());
        out.extend_from_slice(&self.best_bleu.to_le_bytes());
        out.extend_from_slice(&self.best_step.to_le_bytes());
        out.extend_from_slice(&self.steps.to_le_bytes());
        match &self.src_vocab {
            Some(v) => {
                out.push(1);
                put_vocab(&mut out, v);
            }
            None => out.push(0),
        }
        put_vocab(&mut out, &self.tgt_vocab);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(t.rho.is_some() as u8);
            put_f32s(&mut out, t.mean.data());
            if let Some(r) = &t.rho {
                put_f32s(&mut out, r.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::Format("not a checkpoint".into()))? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let run = RunConfig::from_toml_str(&get_str(&mut r)?)?;
        let best_bleu = r.f64()?;
        let best_step = r.u64()?;
        let steps = r.u64()?;
        let src_vocab = match r.u8()? {
            0 => None,
            1 => Some(get_vocab(&mut r)?),
            f => return Err(Error::Format(format!("bad vocabulary flag {f}"))),
        };
        let tgt_vocab = get_vocab(&mut r)?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("'{name}': implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().product::<usize>();
            let t = match r.u8()? {
                0 => VariationalTensor::point(&shape, get_f32s(&mut r, count)?)?,
                1 => {
                    let mean = get_f32s(&mut r, count)?;
                    VariationalTensor::variational(&shape, mean, get_f32s(&mut r, count)?)?
                }
                m => return Err(Error::Format(format!("'{name}': unknown mode flag {m}"))),
            };
            params.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Length(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            run,
            src_vocab,
            tgt_vocab,
            best_bleu,
            best_step,
            steps,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
