//! Instruction-following set used for adapter training and pretraining mix.
//!
//! Two templates over the span alphabet, which the QA task never touches:
//!
//! ```text
//! BOS_INSTR INSTR_COPY    s1 .. sm SEP_INSTR   →  s1 .. sm EOS
//! BOS_INSTR INSTR_REVERSE s1 .. sm SEP_INSTR   →  sm .. s1 EOS
//! ```
//!
//! These examples carry no hallucination labels on purpose: the adapter
//! training loop must not be able to see benchmark labels even by accident.

use serde::{Deserialize, Serialize};

use super::vocab::{BOS_INSTR, EOS, INSTR_COPY, INSTR_REVERSE, SEP_INSTR, SPAN_RANGE};
use crate::error::{CorvusError, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnlabeledExample {
    pub id: String,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl UnlabeledExample {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodConfig {
    pub n_examples: usize,
    pub span_min: usize,
    pub span_max: usize,
    pub seed: u64,
}

impl Default for OodConfig {
    fn default() -> Self {
        OodConfig { n_examples: 1000, span_min: 4, span_max: 8, seed: 17 }
    }
}

impl OodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return Err(CorvusError::input("instruction set is empty"));
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return Err(CorvusError::input("bad span length range"));
        }
        Ok(())
    }
}

pub fn generate_ood_instructions(cfg: &OodConfig) -> Result<Vec<UnlabeledExample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n_examples);
    for i in 0..cfg.n_examples {
        let mut stream = rng::stream(cfg.seed, &format!("ood.{i}"));
        let m = cfg.span_min + rng::index(&mut stream, cfg.span_max - cfg.span_min + 1);
        let span: Vec<usize> = (0..m)
            .map(|_| SPAN_RANGE.start + rng::index(&mut stream, SPAN_RANGE.len()))
            .collect();
        let reverse = rng::index(&mut stream, 2) == 1;

        let mut prompt = Vec::with_capacity(m + 3);
        prompt.push(BOS_INSTR);
        prompt.push(if reverse { INSTR_REVERSE } else { INSTR_COPY });
        prompt.extend_from_slice(&span);
        prompt.push(SEP_INSTR);

        let mut answer: Vec<usize> = if reverse {
            span.iter().rev().copied().collect()
        } else {
            span.clone()
        };
        answer.push(EOS);

        out.push(UnlabeledExample { id: format!("instr-{i:05}"), prompt, answer });
    }
    Ok(out)
}

/// Fraction of token 4-grams (over prompt+answer) that two corpora share.
/// The disjoint alphabets should force this to zero against the benchmark.
pub fn four_gram_overlap(a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    use std::collections::HashSet;
    let grams = |seqs: &[Vec<usize>]| -> HashSet<[usize; 4]> {
        let mut s = HashSet::new();
        for seq in seqs {
            for w in seq.windows(4) {
                s.insert([w[0], w[1], w[2], w[3]]);
            }
        }
        s
    };
    let ga = grams(a);
    if ga.is_empty() {
        return 0.0;
    }
    let gb = grams(b);
    ga.intersection(&gb).count() as f64 / ga.len() as f64
}
