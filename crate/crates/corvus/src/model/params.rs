//! Base model parameters: storage, initialization, hashing.

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::linalg::Mat;
use crate::rng;

/// One transformer block's tensors. Attention projections carry no bias;
/// the feed-forward does.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Full parameter set. The output head is its own matrix, not tied to the
/// token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Mat,
    pub lnf_bias: Mat,
    pub head: Mat,
}

pub const INIT_STD: f64 = 0.02;

impl Params {
    /// Fresh parameters: weights N(0, 0.02²), norm gains 1, biases 0. Each
    /// tensor draws from its own named stream so layouts can change without
    /// silently reshuffling unrelated tensors.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let f = config.ff_dim();
        let gauss = |rows, cols, tag: &str| {
            let mut m = Mat::zeros(rows, cols);
            let mut r = rng::stream(seed, tag);
            rng::fill_normal(&mut r, INIT_STD, &mut m.data);
            m
        };
        let ones = |cols| Mat::from_vec(1, cols, vec![1.0; cols]);
        let layers = (0..config.n_layers)
            .map(|l| LayerParams {
                ln1_gain: ones(d),
                ln1_bias: Mat::zeros(1, d),
                wq: gauss(d, d, &format!("init.layers.{l}.wq")),
                wk: gauss(d, d, &format!("init.layers.{l}.wk")),
                wv: gauss(d, d, &format!("init.layers.{l}.wv")),
                wo: gauss(d, d, &format!("init.layers.{l}.wo")),
                ln2_gain: ones(d),
                ln2_bias: Mat::zeros(1, d),
                w1: gauss(d, f, &format!("init.layers.{l}.w1")),
                b1: Mat::zeros(1, f),
                w2: gauss(f, d, &format!("init.layers.{l}.w2")),
                b2: Mat::zeros(1, d),
            })
            .collect();
        Params {
            config,
            tok_emb: gauss(config.vocab_size, d, "init.tok_emb"),
            pos_emb: gauss(config.max_seq_len, d, "init.pos_emb"),
            layers,
            lnf_gain: ones(d),
            lnf_bias: Mat::zeros(1, d),
            head: gauss(d, config.vocab_size, "init.head"),
        }
    }

    /// Stable (name, tensor) listing; the order defines the checkpoint
    /// layout and the hash.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (l, lp) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gain"), &lp.ln1_gain));
            out.push((format!("layers.{l}.ln1.bias"), &lp.ln1_bias));
            out.push((format!("layers.{l}.attn.wq"), &lp.wq));
            out.push((format!("layers.{l}.attn.wk"), &lp.wk));
            out.push((format!("layers.{l}.attn.wv"), &lp.wv));
            out.push((format!("layers.{l}.attn.wo"), &lp.wo));
            out.push((format!("layers.{l}.ln2.gain"), &lp.ln2_gain));
            out.push((format!("layers.{l}.ln2.bias"), &lp.ln2_bias));
            out.push((format!("layers.{l}.ff.w1"), &lp.w1));
            out.push((format!("layers.{l}.ff.b1"), &lp.b1));
            out.push((format!("layers.{l}.ff.w2"), &lp.w2));
            out.push((format!("layers.{l}.ff.b2"), &lp.b2));
        }
        out.push(("ln_f.gain".into(), &self.lnf_gain));
        out.push(("ln_f.bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (l, lp) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.ln1.gain"), &mut lp.ln1_gain));
            out.push((format!("layers.{l}.ln1.bias"), &mut lp.ln1_bias));
            out.push((format!("layers.{l}.attn.wq"), &mut lp.wq));
            out.push((format!("layers.{l}.attn.wk"), &mut lp.wk));
            out.push((format!("layers.{l}.attn.wv"), &mut lp.wv));
            out.push((format!("layers.{l}.attn.wo"), &mut lp.wo));
            out.push((format!("layers.{l}.ln2.gain"), &mut lp.ln2_gain));
            out.push((format!("layers.{l}.ln2.bias"), &mut lp.ln2_bias));
            out.push((format!("layers.{l}.ff.w1"), &mut lp.w1));
            out.push((format!("layers.{l}.ff.b1"), &mut lp.b1));
            out.push((format!("layers.{l}.ff.w2"), &mut lp.w2));
            out.push((format!("layers.{l}.ff.b2"), &mut lp.b2));
        }
        out.push(("ln_f.gain".into(), &mut self.lnf_gain));
        out.push(("ln_f.bias".into(), &mut self.lnf_bias));
        out.push(("head".into(), &mut self.head));
        out
    }

    /// Content hash over names, shapes, and raw f64 bytes. Used to prove
    /// the base stayed frozen across adapter training.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for v in &m.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, m)| m.data.len()).sum()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig { vocab_size: 32, d_model: 16, n_layers: 2, n_heads: 2, max_seq_len: 8 };
        let a = Params::init(c, 5);
        let b = Params::init(c, 5);
        assert_eq!(a.content_hash(), b.content_hash());
        let c2 = Params::init(c, 6);
        assert_ne!(a.content_hash(), c2.content_hash());
    }

    #[test]
    fn hash_sees_every_tensor() {
        let c = ModelConfig { vocab_size: 32, d_model: 16, n_layers: 2, n_heads: 2, max_seq_len: 8 };
        let a = Params::init(c, 5);
        let mut b = a.clone();
        b.layers[1].b2.data[3] += 1e-9;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn parameter_count_matches_formula() {
        let c = ModelConfig { vocab_size: 32, d_model: 16, n_layers: 2, n_heads: 2, max_seq_len: 8 };
        let p = Params::init(c, 0);
        let d = 16;
        let per_layer = 2 * d + 4 * d * d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
        let want = 32 * d + 8 * d + 2 * per_layer + 2 * d + d * 32;
        assert_eq!(p.num_parameters(), want);
    }
}
