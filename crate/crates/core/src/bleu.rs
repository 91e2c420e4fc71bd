//! Corpus-level BLEU with clipped n-gram precision and brevity penalty.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Cumulative BLEU-1 … BLEU-4, in percent.
    pub bleu: [f64; MAX_ORDER],
    /// Modified n-gram precisions, in percent.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn bleu4(&self) -> f64 {
        self.bleu[3]
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BLEU-4 = {:.2}", self.bleu[3])?;
        writeln!(
            f,
            "BLEU-1 = {:.2}  BLEU-2 = {:.2}  BLEU-3 = {:.2}",
            self.bleu[0], self.bleu[1], self.bleu[2]
        )?;
        writeln!(
            f,
            "precisions = {:.2}/{:.2}/{:.2}/{:.2}",
            self.precisions[0], self.precisions[1], self.precisions[2], self.precisions[3]
        )?;
        write!(
            f,
            "BP = {:.4}  ratio = {:.4}  hyp_len = {}  ref_len = {}",
            self.brevity_penalty,
            if self.ref_len == 0 {
                0.0
            } else {
                self.hyp_len as f64 / self.ref_len as f64
            },
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over token sequences, one reference per hypothesis.
pub fn bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::LineCount {
            left: hyps.len(),
            right: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU needs at least one segment".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut scores = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..MAX_ORDER {
        if precisions[n] == 0.0 {
            zero = true;
        } else {
            log_sum += precisions[n].ln();
        }
        scores[n] = if zero {
            0.0
        } else {
            100.0 * bp * (log_sum / (n + 1) as f64).exp()
        };
    }
    Ok(BleuReport {
        bleu: scores,
        precisions: precisions.map(|p| 100.0 * p),
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// BLEU over whitespace-tokenized, case-sensitive text lines.
pub fn bleu_text(hyps: &[String], refs: &[String]) -> Result<BleuReport> {
    let split = |v: &[String]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(hyps), &split(refs))
}
