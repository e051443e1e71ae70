//! Instrumented forward pass built on the autodiff tape.
//!
//! There is exactly one forward implementation. Analysis runs, gradient
//! passes, and generation all record the same ops in the same order, so a
//! value observed during analysis is bit-identical to the value the
//! training step differentiates through.
//!
//! Block layout (pre-norm): x ← x + Attn(LN1(x)); x ← x + FF(LN2(x)).
//! Attention is causal with self-attention allowed (row t sees columns
//! 0..=t). Positions come from a learned table added to token embeddings.

use super::adapter::{AdapterState, TargetModule};
use super::config::ModelConfig;
use super::params::Params;
use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::tape::{NodeId, Tape};

pub const LN_EPS: f64 = 1e-5;

/// Tape leaves for one block's tensors.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub ln1_gain: NodeId,
    pub ln1_bias: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ln2_gain: NodeId,
    pub ln2_bias: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

/// Tape leaves for the whole base model.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub config: ModelConfig,
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<LayerNodes>,
    pub lnf_gain: NodeId,
    pub lnf_bias: NodeId,
    pub head: NodeId,
}

/// Tape leaves for one low-rank pair.
#[derive(Debug, Clone, Copy)]
pub struct PairNodes {
    pub a: NodeId,
    pub b: NodeId,
}

/// Tape leaves for the adapter stack; slot order is q, k, v, o.
#[derive(Debug, Clone)]
pub struct AdapterNodes {
    pub scaling: f64,
    pub layers: Vec<[Option<PairNodes>; 4]>,
}

impl AdapterNodes {
    fn slot(&self, layer: usize, t: TargetModule) -> Option<PairNodes> {
        let i = match t {
            TargetModule::Query => 0,
            TargetModule::Key => 1,
            TargetModule::Value => 2,
            TargetModule::Output => 3,
        };
        self.layers[layer][i]
    }
}

/// Node ids of everything the telemetry and losses read.
#[derive(Debug, Clone)]
pub struct TraceNodes {
    /// Token+position embeddings, the input to block 0.
    pub embedded: NodeId,
    /// hidden[0] is `embedded`; hidden[l] for l ≥ 1 is block l's output.
    pub hidden: Vec<NodeId>,
    /// attn[l][h] is the causal attention probability matrix (T×T).
    pub attn: Vec<Vec<NodeId>>,
    /// Final logits (T×V) after the last norm and untied head.
    pub logits: NodeId,
}

/// Plain-value snapshot of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Mat,
    pub hidden: Vec<Mat>,
    pub attn: Vec<Vec<Mat>>,
}

/// Copies every traced value out of the tape.
pub fn extract_trace(tape: &Tape, nodes: &TraceNodes) -> ForwardTrace {
    ForwardTrace {
        logits: tape.value(nodes.logits).clone(),
        hidden: nodes.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        attn: nodes
            .attn
            .iter()
            .map(|heads| heads.iter().map(|&a| tape.value(a).clone()).collect())
            .collect(),
    }
}

/// Registers every base tensor as a tape leaf. `trainable` controls whether
/// gradients flow into them (full-parameter training wants that, adapter
/// training does not).
pub fn stage_params(tape: &mut Tape, params: &Params, trainable: bool) -> ParamNodes {
    let mut leaf = |m: &Mat| tape.leaf(m.clone(), trainable);
    let tok_emb = leaf(&params.tok_emb);
    let pos_emb = leaf(&params.pos_emb);
    let layers = params
        .layers
        .iter()
        .map(|lp| LayerNodes {
            ln1_gain: leaf(&lp.ln1_gain),
            ln1_bias: leaf(&lp.ln1_bias),
            wq: leaf(&lp.wq),
            wk: leaf(&lp.wk),
            wv: leaf(&lp.wv),
            wo: leaf(&lp.wo),
            ln2_gain: leaf(&lp.ln2_gain),
            ln2_bias: leaf(&lp.ln2_bias),
            w1: leaf(&lp.w1),
            b1: leaf(&lp.b1),
            w2: leaf(&lp.w2),
            b2: leaf(&lp.b2),
        })
        .collect();
    let lnf_gain = leaf(&params.lnf_gain);
    let lnf_bias = leaf(&params.lnf_bias);
    let head = leaf(&params.head);
    ParamNodes { config: params.config, tok_emb, pos_emb, layers, lnf_gain, lnf_bias, head }
}

/// Registers adapter tensors as tape leaves.
pub fn stage_adapters(tape: &mut Tape, adapter: &AdapterState, trainable: bool) -> AdapterNodes {
    let layers = adapter
        .layers
        .iter()
        .map(|la| {
            let mut slots = [None; 4];
            for (i, pair) in [&la.q, &la.k, &la.v, &la.o].into_iter().enumerate() {
                if let Some(p) = pair {
                    slots[i] = Some(PairNodes {
                        a: tape.leaf(p.a.clone(), trainable),
                        b: tape.leaf(p.b.clone(), trainable),
                    });
                }
            }
            slots
        })
        .collect();
    AdapterNodes { scaling: adapter.config.scaling(), layers }
}

/// Node ids in `Params::named_tensors` order.
pub fn param_node_ids(nodes: &ParamNodes) -> Vec<NodeId> {
    let mut out = vec![nodes.tok_emb, nodes.pos_emb];
    for ln in &nodes.layers {
        out.extend([
            ln.ln1_gain, ln.ln1_bias, ln.wq, ln.wk, ln.wv, ln.wo, ln.ln2_gain, ln.ln2_bias,
            ln.w1, ln.b1, ln.w2, ln.b2,
        ]);
    }
    out.extend([nodes.lnf_gain, nodes.lnf_bias, nodes.head]);
    out
}

/// Reads back d(objective)/d(tensor) for every base leaf, in
/// `named_tensors` order. Missing grads come back as zeros.
pub fn param_grads(tape: &Tape, nodes: &ParamNodes) -> Vec<Mat> {
    param_node_ids(nodes)
        .into_iter()
        .map(|id| {
            let v = tape.value(id);
            tape.grad(id).cloned().unwrap_or_else(|| Mat::zeros(v.rows, v.cols))
        })
        .collect()
}

/// Reads back d(objective)/d(tensor) for every staged adapter leaf, in
/// `named_tensors` order.
pub fn adapter_grads(tape: &Tape, nodes: &AdapterNodes) -> Vec<Mat> {
    let mut out = Vec::new();
    for slots in &nodes.layers {
        for pn in slots.iter().flatten() {
            for id in [pn.a, pn.b] {
                let v = tape.value(id);
                out.push(
                    tape.grad(id).cloned().unwrap_or_else(|| Mat::zeros(v.rows, v.cols)),
                );
            }
        }
    }
    out
}

fn check_tokens(config: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(CorvusError::input("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(CorvusError::input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(CorvusError::input(format!(
            "token id {bad} out of range for vocab {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Token+position embedding rows for a sequence.
pub fn embed_tokens(tape: &mut Tape, nodes: &ParamNodes, tokens: &[usize]) -> Result<NodeId> {
    check_tokens(&nodes.config, tokens)?;
    let tok = tape.gather_rows(nodes.tok_emb, tokens);
    let pos = tape.slice_rows(nodes.pos_emb, 0, tokens.len());
    Ok(tape.add(tok, pos))
}

/// Projection with an optional low-rank bypass: h·W + s·(h·B)·A.
fn project(
    tape: &mut Tape,
    h: NodeId,
    w: NodeId,
    adapter: Option<(PairNodes, f64)>,
) -> NodeId {
    let base = tape.matmul(h, w);
    match adapter {
        None => base,
        Some((pn, scaling)) => {
            let hb = tape.matmul(h, pn.b);
            let hba = tape.matmul(hb, pn.a);
            let scaled = tape.scale(hba, scaling);
            tape.add(base, scaled)
        }
    }
}

/// Runs the blocks over already-embedded rows `e` (T×D). The embedding node
/// can be a leaf, which is how the embedding-space attack takes gradients
/// with respect to the input.
pub fn forward_from_embeddings(
    tape: &mut Tape,
    nodes: &ParamNodes,
    adapters: Option<&AdapterNodes>,
    e: NodeId,
) -> Result<TraceNodes> {
    let cfg = &nodes.config;
    let t_len = tape.value(e).rows;
    if t_len == 0 || t_len > cfg.max_seq_len {
        return Err(CorvusError::input("embedded sequence length out of range"));
    }
    if tape.value(e).cols != cfg.d_model {
        return Err(CorvusError::input("embedding width does not match d_model"));
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
    let mut attn = Vec::with_capacity(cfg.n_layers);
    hidden.push(e);
    let mut x = e;

    for (l, lp) in nodes.layers.iter().enumerate() {
        let slot = |t| adapters.and_then(|a| a.slot(l, t).map(|p| (p, a.scaling)));
        let h = tape.layer_norm(x, lp.ln1_gain, lp.ln1_bias, LN_EPS);
        let q = project(tape, h, lp.wq, slot(TargetModule::Query));
        let k = project(tape, h, lp.wk, slot(TargetModule::Key));
        let v = project(tape, h, lp.wv, slot(TargetModule::Value));

        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut ctxs = Vec::with_capacity(cfg.n_heads);
        for hh in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, hh * dh, dh);
            let kh = tape.slice_cols(k, hh * dh, dh);
            let vh = tape.slice_cols(v, hh * dh, dh);
            let scores = tape.matmul_transb(qh, kh);
            let scaled = tape.scale(scores, scale);
            let probs = tape.causal_softmax(scaled);
            heads.push(probs);
            ctxs.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&ctxs);
        let attn_out = project(tape, ctx, lp.wo, slot(TargetModule::Output));
        let x_mid = tape.add(x, attn_out);

        let h2 = tape.layer_norm(x_mid, lp.ln2_gain, lp.ln2_bias, LN_EPS);
        let ff1 = tape.matmul(h2, lp.w1);
        let ff1b = tape.add_row_broadcast(ff1, lp.b1);
        let act = tape.gelu(ff1b);
        let ff2 = tape.matmul(act, lp.w2);
        let ff2b = tape.add_row_broadcast(ff2, lp.b2);
        x = tape.add(x_mid, ff2b);

        if !tape.value(x).is_finite() {
            return Err(CorvusError::Numeric {
                layer: l + 1,
                detail: "non-finite hidden state".into(),
            });
        }
        hidden.push(x);
        attn.push(heads);
    }

    let xf = tape.layer_norm(x, nodes.lnf_gain, nodes.lnf_bias, LN_EPS);
    let logits = tape.matmul(xf, nodes.head);
    if !tape.value(logits).is_finite() {
        return Err(CorvusError::Numeric {
            layer: cfg.n_layers,
            detail: "non-finite logits".into(),
        });
    }
    Ok(TraceNodes { embedded: e, hidden, attn, logits })
}

/// Embed then run the blocks; the standard teacher-forced pass.
pub fn forward_tokens(
    tape: &mut Tape,
    nodes: &ParamNodes,
    adapters: Option<&AdapterNodes>,
    tokens: &[usize],
) -> Result<TraceNodes> {
    let e = embed_tokens(tape, nodes, tokens)?;
    forward_from_embeddings(tape, nodes, adapters, e)
}

/// One-shot forward for analysis: stages frozen leaves on a private tape
/// and returns plain matrices.
pub fn run_forward(
    params: &Params,
    adapter: Option<&AdapterState>,
    tokens: &[usize],
) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let nodes = stage_params(&mut tape, params, false);
    let ad_nodes = adapter.map(|a| stage_adapters(&mut tape, a, false));
    let trace = forward_tokens(&mut tape, &nodes, ad_nodes.as_ref(), tokens)?;
    Ok(extract_trace(&tape, &trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::adapter::AdapterConfig;
    use crate::rng;

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 24, d_model: 16, n_layers: 2, n_heads: 2, max_seq_len: 12 }
    }

    /// Straight-line reference forward with no tape involvement; verifies
    /// the recorded graph computes the intended architecture.
    fn reference_forward(p: &Params, tokens: &[usize]) -> Mat {
        let c = &p.config;
        let (t_len, d, dh) = (tokens.len(), c.d_model, c.head_dim());
        let ln = |x: &Mat, g: &Mat, b: &Mat| {
            let mut out = Mat::zeros(x.rows, x.cols);
            for i in 0..x.rows {
                let row = x.row(i);
                let mu = row.iter().sum::<f64>() / x.cols as f64;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / x.cols as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                for j in 0..x.cols {
                    out.set(i, j, g.data[j] * (row[j] - mu) * rs + b.data[j]);
                }
            }
            out
        };
        let mm = |a: &Mat, b: &Mat| {
            let mut out = Mat::zeros(a.rows, b.cols);
            for i in 0..a.rows {
                for kk in 0..a.cols {
                    for j in 0..b.cols {
                        out.data[i * b.cols + j] += a.get(i, kk) * b.get(kk, j);
                    }
                }
            }
            out
        };

        let mut x = Mat::zeros(t_len, d);
        for (i, &tok) in tokens.iter().enumerate() {
            for j in 0..d {
                x.set(i, j, p.tok_emb.get(tok, j) + p.pos_emb.get(i, j));
            }
        }
        for lp in &p.layers {
            let h = ln(&x, &lp.ln1_gain, &lp.ln1_bias);
            let q = mm(&h, &lp.wq);
            let k = mm(&h, &lp.wk);
            let v = mm(&h, &lp.wv);
            let mut ctx = Mat::zeros(t_len, d);
            for head in 0..c.n_heads {
                let off = head * dh;
                for i in 0..t_len {
                    // softmax over j <= i of q_i · k_j / sqrt(dh)
                    let mut scores = vec![0.0; i + 1];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for e in 0..dh {
                            acc += q.get(i, off + e) * k.get(j, off + e);
                        }
                        *s = acc / (dh as f64).sqrt();
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|&s| (s - m).exp()).sum();
                    for (j, &s) in scores.iter().enumerate() {
                        let pij = (s - m).exp() / z;
                        for e in 0..dh {
                            let cur = ctx.get(i, off + e);
                            ctx.set(i, off + e, cur + pij * v.get(j, off + e));
                        }
                    }
                }
            }
            let attn_out = mm(&ctx, &lp.wo);
            for (xv, av) in x.data.iter_mut().zip(&attn_out.data) {
                *xv += av;
            }
            let h2 = ln(&x, &lp.ln2_gain, &lp.ln2_bias);
            let mut ff1 = mm(&h2, &lp.w1);
            for i in 0..t_len {
                for j in 0..c.ff_dim() {
                    let v = ff1.get(i, j) + lp.b1.data[j];
                    let u = 0.7978845608028654 * (v + 0.044715 * v * v * v);
                    ff1.set(i, j, 0.5 * v * (1.0 + u.tanh()));
                }
            }
            let mut ff2 = mm(&ff1, &lp.w2);
            for i in 0..t_len {
                for j in 0..d {
                    let v = ff2.get(i, j) + lp.b2.data[j];
                    ff2.set(i, j, v);
                }
            }
            for (xv, fv) in x.data.iter_mut().zip(&ff2.data) {
                *xv += fv;
            }
        }
        let xf = ln(&x, &p.lnf_gain, &p.lnf_bias);
        mm(&xf, &p.head)
    }

    #[test]
    fn logits_match_reference() {
        let p = Params::init(cfg(), 9);
        let tokens = [3usize, 17, 5, 5, 0, 21, 8];
        let trace = run_forward(&p, None, &tokens).unwrap();
        let want = reference_forward(&p, &tokens);
        assert!(trace.logits.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn trace_shapes() {
        let c = cfg();
        let p = Params::init(c, 9);
        let tokens = [1usize, 2, 3, 4, 5];
        let tr = run_forward(&p, None, &tokens).unwrap();
        assert_eq!(tr.hidden.len(), c.n_layers + 1);
        assert_eq!(tr.attn.len(), c.n_layers);
        assert_eq!(tr.attn[0].len(), c.n_heads);
        assert_eq!((tr.logits.rows, tr.logits.cols), (5, c.vocab_size));
        assert_eq!((tr.hidden[0].rows, tr.hidden[0].cols), (5, c.d_model));
        assert_eq!((tr.attn[1][1].rows, tr.attn[1][1].cols), (5, 5));
    }

    #[test]
    fn causality_future_tokens_do_not_change_past_logits() {
        let p = Params::init(cfg(), 9);
        let a = run_forward(&p, None, &[3, 17, 5, 9, 2, 11]).unwrap();
        let b = run_forward(&p, None, &[3, 17, 5, 20, 20, 20]).unwrap();
        for t in 0..3 {
            for j in 0..p.config.vocab_size {
                assert_eq!(a.logits.get(t, j), b.logits.get(t, j), "row {t} col {j}");
            }
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let c = cfg();
        let p = Params::init(c, 9);
        let ad = AdapterState::init(&c, AdapterConfig::default_qk(), 4).unwrap();
        let tokens = [3usize, 17, 5, 9, 2];
        let plain = run_forward(&p, None, &tokens).unwrap();
        let adapted = run_forward(&p, Some(&ad), &tokens).unwrap();
        assert_eq!(plain.logits, adapted.logits);
        for (h1, h2) in plain.hidden.iter().zip(&adapted.hidden) {
            assert_eq!(h1, h2);
        }
    }

    #[test]
    fn adapted_forward_matches_merged_weights() {
        let c = cfg();
        let p = Params::init(c, 9);
        let mut ad = AdapterState::init(&c, AdapterConfig::default_qk(), 4).unwrap();
        // push nonzero mass into every B so the bypass actually fires
        for la in &mut ad.layers {
            for pair in [la.q.as_mut(), la.k.as_mut()].into_iter().flatten() {
                let mut r = rng::stream(77, "bfill");
                rng::fill_normal(&mut r, 0.05, &mut pair.b.data);
            }
        }
        let tokens = [3usize, 17, 5, 9, 2, 0, 7];
        let factored = run_forward(&p, Some(&ad), &tokens).unwrap();
        let merged = crate::model::adapter::effective_weights(&p, &ad).unwrap();
        let dense = run_forward(&merged, None, &tokens).unwrap();
        assert!(factored.logits.max_abs_diff(&dense.logits) < 1e-10);
    }

    #[test]
    fn embedding_path_equals_token_path() {
        let c = cfg();
        let p = Params::init(c, 9);
        let tokens = [3usize, 17, 5, 9];
        let mut tape = Tape::new();
        let nodes = stage_params(&mut tape, &p, false);
        let via_tokens = forward_tokens(&mut tape, &nodes, None, &tokens).unwrap();

        let mut tape2 = Tape::new();
        let nodes2 = stage_params(&mut tape2, &p, false);
        let e = embed_tokens(&mut tape2, &nodes2, &tokens).unwrap();
        let e_mat = tape2.value(e).clone();
        let e_leaf = tape2.leaf(e_mat, true);
        let via_emb = forward_from_embeddings(&mut tape2, &nodes2, None, e_leaf).unwrap();

        assert_eq!(tape.value(via_tokens.logits), tape2.value(via_emb.logits));
    }

    #[test]
    fn rejects_bad_tokens() {
        let p = Params::init(cfg(), 9);
        assert!(run_forward(&p, None, &[]).is_err());
        assert!(run_forward(&p, None, &[99]).is_err());
        assert!(run_forward(&p, None, &vec![1; 13]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let p = Params::init(cfg(), 9);
        let tokens = [3usize, 17, 5, 9, 2];
        let a = run_forward(&p, None, &tokens).unwrap();
        let b = run_forward(&p, None, &tokens).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}
