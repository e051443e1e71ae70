//! Grounded key-value QA benchmark with planted hallucinations.
//!
//! A prompt lists key/value facts, then asks for one key:
//!
//! ```text
//! BOS_QA k1 v1a v1b v1c k2 v2a ... QUERY kq SEP_QA
//! ```
//!
//! The faithful answer copies the queried value verbatim; the hallucinated
//! answer is the same length and alphabet but spelled with value tokens
//! that appear nowhere in the prompt, so it cannot be grounded. Labels are
//! exactly balanced, and examples split 40/10/50 into train/validation/
//! test by a seeded shuffle within each label.

use serde::{Deserialize, Serialize};

use super::vocab::{BOS_QA, EOS, KEY_RANGE, QUERY, SEP_QA, VALUE_RANGE};
use crate::error::{CorvusError, Result};
use crate::rng;

/// One benchmark item. `answer` always ends with EOS; `hallucinated` is
/// the ground-truth detector label (positive class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub hallucinated: bool,
}

impl LabeledExample {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.answer);
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub n_examples: usize,
    /// Facts listed per prompt.
    pub n_pairs: usize,
    /// Tokens per value.
    pub value_len: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig { n_examples: 400, n_pairs: 4, value_len: 3, seed: 11 }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples < 20 {
            return Err(CorvusError::input("benchmark needs at least 20 examples"));
        }
        if self.n_examples % 2 != 0 {
            return Err(CorvusError::input("benchmark size must be even for balanced labels"));
        }
        if self.n_pairs == 0 || self.n_pairs > KEY_RANGE.len() {
            return Err(CorvusError::input("n_pairs out of range"));
        }
        if self.value_len == 0 {
            return Err(CorvusError::input("value_len must be positive"));
        }
        // hallucinated answers need unused value tokens to draw from
        if self.n_pairs * self.value_len + self.value_len > VALUE_RANGE.len() {
            return Err(CorvusError::input("value alphabet too small for this shape"));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        1 + self.n_pairs * (1 + self.value_len) + 2 + 1
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len() + self.value_len + 1
    }
}

/// The three disjoint subsets. Probes fit on `train`, thresholds and layer
/// choices come from `validation`, and every reported number is `test`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSplits {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl BenchmarkSplits {
    pub fn all(&self) -> impl Iterator<Item = &LabeledExample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Generates one example. Deterministic in (seed, index); even indices are
/// faithful, odd ones hallucinated. Public so pretraining can stream fresh
/// questions from a disjoint seed without materializing a corpus.
pub fn generate_example(cfg: &BenchmarkConfig, i: usize) -> LabeledExample {
    let mut stream = rng::stream(cfg.seed, &format!("bench.{i}"));
    // distinct keys for this prompt
    let mut keys: Vec<usize> = KEY_RANGE.collect();
    rng::shuffle(&mut stream, &mut keys);
    keys.truncate(cfg.n_pairs);

    let values: Vec<Vec<usize>> = (0..cfg.n_pairs)
        .map(|_| {
            (0..cfg.value_len)
                .map(|_| VALUE_RANGE.start + rng::index(&mut stream, VALUE_RANGE.len()))
                .collect()
        })
        .collect();
    let q = rng::index(&mut stream, cfg.n_pairs);

    let mut prompt = Vec::with_capacity(cfg.prompt_len());
    prompt.push(BOS_QA);
    for (k, v) in keys.iter().zip(&values) {
        prompt.push(*k);
        prompt.extend_from_slice(v);
    }
    prompt.push(QUERY);
    prompt.push(keys[q]);
    prompt.push(SEP_QA);

    let hallucinated = i % 2 == 1;
    let mut answer = if hallucinated {
        // spell the answer with value tokens absent from the prompt
        let mut unused: Vec<usize> = VALUE_RANGE.filter(|t| !prompt.contains(t)).collect();
        rng::shuffle(&mut stream, &mut unused);
        unused.truncate(cfg.value_len);
        debug_assert_eq!(unused.len(), cfg.value_len);
        unused
    } else {
        values[q].clone()
    };
    answer.push(EOS);

    LabeledExample { id: format!("qa-{i:05}"), prompt, answer, hallucinated }
}

/// Full benchmark: generate, then stratified 40/10/50 split.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkSplits> {
    cfg.validate()?;
    let examples: Vec<LabeledExample> =
        (0..cfg.n_examples).map(|i| generate_example(cfg, i)).collect();

    let mut faithful: Vec<LabeledExample> = Vec::new();
    let mut hallucinated: Vec<LabeledExample> = Vec::new();
    for e in examples {
        if e.hallucinated {
            hallucinated.push(e);
        } else {
            faithful.push(e);
        }
    }
    let mut stream = rng::stream(cfg.seed, "bench.split");
    rng::shuffle(&mut stream, &mut faithful);
    rng::shuffle(&mut stream, &mut hallucinated);

    let mut splits = BenchmarkSplits { train: vec![], validation: vec![], test: vec![] };
    for stratum in [faithful, hallucinated] {
        let n = stratum.len();
        let n_train = (n as f64 * 0.4).round() as usize;
        let n_val = (n as f64 * 0.1).round() as usize;
        for (j, e) in stratum.into_iter().enumerate() {
            if j < n_train {
                splits.train.push(e);
            } else if j < n_train + n_val {
                splits.validation.push(e);
            } else {
                splits.test.push(e);
            }
        }
    }
    // interleave strata deterministically rather than leaving them blocked
    for part in [&mut splits.train, &mut splits.validation, &mut splits.test] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(splits)
}
