//! Single-pass telemetry over the answer window.
//!
//! Three signals per teacher-forced pass, all computed from positions
//! W = prompt_len .. seq_len (the answer tokens):
//!
//! * TE: mean categorical entropy of softmax(logits_i), i ∈ W.
//! * HV per layer: log det(ZᵀZ/|W| + η·I) with Z the window rows of that
//!   layer's hidden state, column-centered. η = 1e-3.
//! * AD per layer: head average of mean_i log(A_ii + δ) over window rows
//!   of each head's attention matrix. δ = 1e-8. The log applies per head
//!   before the head average.
//!
//! The same formulas exist once: the plain-matrix entry points below stage
//! a throwaway tape and reuse the node builders the trainer differentiates
//! through, so analysis and training can never drift apart.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{CorvusError, Result};
use crate::linalg::Mat;
use crate::model::forward::{ForwardTrace, TraceNodes};
use crate::tape::{NodeId, Tape};

pub const HV_ETA: f64 = 1e-3;
pub const AD_DELTA: f64 = 1e-8;

/// Default fractional band (lo, hi) of layers whose telemetry is tracked.
pub const LAYER_BAND: (f64, f64) = (0.5, 0.75);

/// Which model produced a record. Fitted auditors must only ever see
/// `Clean` during fitting; the enum exists so that rule is checkable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Clean,
    Adapted,
}

impl ModelVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::Clean => "clean",
            ModelVariant::Adapted => "adapted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ModelVariant::Clean),
            "adapted" => Ok(ModelVariant::Adapted),
            other => Err(CorvusError::input(format!("unknown variant '{other}'"))),
        }
    }
}

/// Answer positions for a sequence: prompt_len .. seq_len. The window must
/// be nonempty and leave at least one prompt position before it so shifted
/// losses have a predecessor row.
pub fn answer_window(prompt_len: usize, seq_len: usize) -> Result<Range<usize>> {
    if prompt_len == 0 {
        return Err(CorvusError::input("prompt must be nonempty"));
    }
    if prompt_len >= seq_len {
        return Err(CorvusError::input(format!(
            "no answer positions: prompt_len {prompt_len} >= seq_len {seq_len}"
        )));
    }
    Ok(prompt_len..seq_len)
}

/// 1-based indices of the layers in the fractional band
/// {⌈lo·L⌉ .. ⌊hi·L⌋} ∩ {1..L}; if that is empty the bounds round outward
/// instead.
pub fn select_layer_band(n_layers: usize, lo: f64, hi: f64) -> Result<Vec<usize>> {
    if n_layers == 0 {
        return Err(CorvusError::input("model has no layers"));
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(CorvusError::input(format!("bad layer band ({lo}, {hi})")));
    }
    let l = n_layers as f64;
    let clamp = |v: f64| (v.max(1.0) as usize).min(n_layers);
    let mut start = clamp((lo * l).ceil());
    let mut end = clamp((hi * l).floor());
    if start > end {
        start = clamp((lo * l).floor());
        end = clamp((hi * l).ceil());
    }
    if start > end {
        return Err(CorvusError::input("layer band selects no layers"));
    }
    Ok((start..=end).collect())
}

// ── tape-side builders ──────────────────────────────────────────────────

/// Mean softmax entropy of the window's logit rows. Scalar node.
pub fn te_node(tape: &mut Tape, trace: &TraceNodes, window: &Range<usize>) -> NodeId {
    let rows = tape.slice_rows(trace.logits, window.start, window.len());
    tape.mean_entropy_rows(rows)
}

/// Log-volume of layer `layer` (1-based) over the window. Scalar node.
pub fn hv_node(
    tape: &mut Tape,
    trace: &TraceNodes,
    layer: usize,
    window: &Range<usize>,
    eta: f64,
) -> Result<NodeId> {
    if layer == 0 || layer >= trace.hidden.len() {
        return Err(CorvusError::input(format!("layer {layer} out of range")));
    }
    let rows = tape.slice_rows(trace.hidden[layer], window.start, window.len());
    tape.log_det_cov(rows, eta)
}

/// Diagonality of layer `layer` (1-based) over the window: per-head mean
/// log-diagonal, then averaged across heads. Scalar node.
pub fn ad_node(
    tape: &mut Tape,
    trace: &TraceNodes,
    layer: usize,
    window: &Range<usize>,
    delta: f64,
) -> Result<NodeId> {
    if layer == 0 || layer > trace.attn.len() {
        return Err(CorvusError::input(format!("layer {layer} out of range")));
    }
    let heads = &trace.attn[layer - 1];
    let per_head: Vec<NodeId> = heads
        .iter()
        .map(|&h| tape.mean_log_diag(h, window.start, window.len(), delta))
        .collect();
    let w = 1.0 / per_head.len() as f64;
    let parts: Vec<(NodeId, f64)> = per_head.into_iter().map(|n| (n, w)).collect();
    Ok(tape.lin_comb(&parts))
}

/// Uniform average of scalar nodes.
pub fn mean_node(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    assert!(!nodes.is_empty());
    let w = 1.0 / nodes.len() as f64;
    let parts: Vec<(NodeId, f64)> = nodes.iter().map(|&n| (n, w)).collect();
    tape.lin_comb(&parts)
}

// ── plain-matrix entry points ───────────────────────────────────────────

fn on_private_tape(mats: Vec<Mat>, build: impl FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = mats.into_iter().map(|m| tape.leaf(m, false)).collect();
    let out = build(&mut tape, &ids)?;
    Ok(tape.scalar(out))
}

/// TE from a logits matrix (T×V).
pub fn token_entropy(logits: &Mat, window: &Range<usize>) -> Result<f64> {
    check_window(window, logits.rows)?;
    on_private_tape(vec![logits.clone()], |t, ids| {
        let rows = t.slice_rows(ids[0], window.start, window.len());
        Ok(t.mean_entropy_rows(rows))
    })
}

/// HV from one layer's hidden state (T×D).
pub fn hidden_log_volume(hidden: &Mat, window: &Range<usize>, eta: f64) -> Result<f64> {
    check_window(window, hidden.rows)?;
    on_private_tape(vec![hidden.clone()], |t, ids| {
        let rows = t.slice_rows(ids[0], window.start, window.len());
        t.log_det_cov(rows, eta)
    })
}

/// AD from one layer's per-head attention matrices (each T×T).
pub fn attention_diagonality(heads: &[Mat], window: &Range<usize>, delta: f64) -> Result<f64> {
    if heads.is_empty() {
        return Err(CorvusError::input("no attention heads"));
    }
    check_window(window, heads[0].rows)?;
    on_private_tape(heads.to_vec(), |t, ids| {
        let per: Vec<NodeId> = ids
            .iter()
            .map(|&id| t.mean_log_diag(id, window.start, window.len(), delta))
            .collect();
        let w = 1.0 / per.len() as f64;
        let parts: Vec<(NodeId, f64)> = per.into_iter().map(|n| (n, w)).collect();
        Ok(t.lin_comb(&parts))
    })
}

fn check_window(window: &Range<usize>, rows: usize) -> Result<()> {
    if window.is_empty() || window.end > rows || window.start == 0 {
        return Err(CorvusError::input(format!(
            "window {window:?} invalid for {rows} rows"
        )));
    }
    Ok(())
}

// ── records ─────────────────────────────────────────────────────────────

/// One example's telemetry: TE plus per-layer HV and AD over the tracked
/// band, and the band means.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub example_id: String,
    pub variant: ModelVariant,
    pub te: f64,
    /// (1-based layer, value), ascending by layer.
    pub hv: Vec<(usize, f64)>,
    pub ad: Vec<(usize, f64)>,
    pub hv_mean: f64,
    pub ad_mean: f64,
}

impl TelemetryRecord {
    pub fn hv_at(&self, layer: usize) -> Option<f64> {
        self.hv.iter().find(|(l, _)| *l == layer).map(|(_, v)| *v)
    }

    pub fn ad_at(&self, layer: usize) -> Option<f64> {
        self.ad.iter().find(|(l, _)| *l == layer).map(|(_, v)| *v)
    }
}

/// Computes the full record for one traced pass.
pub fn extract_record(
    trace: &ForwardTrace,
    window: &Range<usize>,
    band: &[usize],
    example_id: &str,
    variant: ModelVariant,
) -> Result<TelemetryRecord> {
    if band.is_empty() {
        return Err(CorvusError::input("empty layer band"));
    }
    let te = token_entropy(&trace.logits, window)?;
    let mut hv = Vec::with_capacity(band.len());
    let mut ad = Vec::with_capacity(band.len());
    for &l in band {
        if l == 0 || l >= trace.hidden.len() {
            return Err(CorvusError::input(format!("band layer {l} out of range")));
        }
        hv.push((l, hidden_log_volume(&trace.hidden[l], window, HV_ETA)?));
        ad.push((l, attention_diagonality(&trace.attn[l - 1], window, AD_DELTA)?));
    }
    let hv_mean = hv.iter().map(|(_, v)| v).sum::<f64>() / hv.len() as f64;
    let ad_mean = ad.iter().map(|(_, v)| v).sum::<f64>() / ad.len() as f64;
    Ok(TelemetryRecord { example_id: example_id.to_string(), variant, te, hv, ad, hv_mean, ad_mean })
}

/// Float formatting used in every JSONL artifact: 17 significant digits,
/// enough for exact f64 round trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn record_to_json(r: &TelemetryRecord) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{{\"example_id\":{},\"variant\":\"{}\",\"te\":{}",
        serde_json::to_string(&r.example_id).expect("string encodes"),
        r.variant.as_str(),
        fmt_f64(r.te)
    ));
    for (l, v) in &r.hv {
        s.push_str(&format!(",\"hv.{l}\":{}", fmt_f64(*v)));
    }
    for (l, v) in &r.ad {
        s.push_str(&format!(",\"ad.{l}\":{}", fmt_f64(*v)));
    }
    s.push_str(&format!(
        ",\"hv_mean\":{},\"ad_mean\":{}}}",
        fmt_f64(r.hv_mean),
        fmt_f64(r.ad_mean)
    ));
    s
}

pub fn write_records(path: &Path, records: &[TelemetryRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", record_to_json(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|e| CorvusError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

fn parse_record(line: &str) -> Result<TelemetryRecord> {
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| CorvusError::input(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| CorvusError::input("record is not an object"))?;
    let get_f = |key: &str| -> Result<f64> {
        obj.get(key)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| CorvusError::input(format!("missing number '{key}'")))
    };
    let example_id = obj
        .get("example_id")
        .and_then(|x| x.as_str())
        .ok_or_else(|| CorvusError::input("missing example_id"))?
        .to_string();
    let variant = ModelVariant::parse(
        obj.get("variant")
            .and_then(|x| x.as_str())
            .ok_or_else(|| CorvusError::input("missing variant"))?,
    )?;
    let mut hv = Vec::new();
    let mut ad = Vec::new();
    for (k, val) in obj {
        if let Some(layer) = k.strip_prefix("hv.") {
            let l: usize = layer.parse().map_err(|_| CorvusError::input("bad hv layer key"))?;
            let f = val.as_f64().ok_or_else(|| CorvusError::input("bad hv value"))?;
            hv.push((l, f));
        } else if let Some(layer) = k.strip_prefix("ad.") {
            let l: usize = layer.parse().map_err(|_| CorvusError::input("bad ad layer key"))?;
            let f = val.as_f64().ok_or_else(|| CorvusError::input("bad ad value"))?;
            ad.push((l, f));
        }
    }
    hv.sort_by_key(|(l, _)| *l);
    ad.sort_by_key(|(l, _)| *l);
    Ok(TelemetryRecord {
        example_id,
        variant,
        te: get_f("te")?,
        hv,
        ad,
        hv_mean: get_f("hv_mean")?,
        ad_mean: get_f("ad_mean")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn random_mat(rows: usize, cols: usize, tag: &str) -> Mat {
        let mut r = rng::stream(21, tag);
        let mut m = Mat::zeros(rows, cols);
        rng::fill_normal(&mut r, 1.0, &mut m.data);
        m
    }

    #[test]
    fn te_of_flat_logits_is_log_vocab() {
        let logits = Mat::zeros(5, 4);
        let te = token_entropy(&logits, &(2..5)).unwrap();
        assert!((te - 1.3862943611198906).abs() < 1e-15, "{te}");
    }

    #[test]
    fn te_of_peaked_logits_is_near_zero() {
        let mut logits = Mat::zeros(4, 6);
        for i in 0..4 {
            logits.set(i, i % 6, 60.0);
        }
        let te = token_entropy(&logits, &(1..4)).unwrap();
        assert!(te >= 0.0 && te < 1e-12, "{te}");
    }

    #[test]
    fn hv_single_row_window_is_pure_regularizer() {
        let hidden = random_mat(6, 4, "hv1");
        let hv = hidden_log_volume(&hidden, &(3..4), 1e-3).unwrap();
        let want = 4.0 * (1e-3f64).ln(); // -27.631021115928547
        assert!((hv - want).abs() < 1e-12, "{hv} vs {want}");
    }

    #[test]
    fn hv_matches_eigenvalue_oracle() {
        let hidden = random_mat(10, 5, "hv2");
        let window = 2..9;
        let hv = hidden_log_volume(&hidden, &window, 1e-3).unwrap();

        // independent route: centered covariance + symmetric eigenvalues
        let m = window.len();
        let d = 5;
        let mut z = nalgebra::DMatrix::zeros(m, d);
        for (k, i) in window.clone().enumerate() {
            for j in 0..d {
                z[(k, j)] = hidden.get(i, j);
            }
        }
        let means = z.row_mean();
        for k in 0..m {
            for j in 0..d {
                z[(k, j)] -= means[j];
            }
        }
        let mut c = (z.transpose() * &z) / m as f64;
        for j in 0..d {
            c[(j, j)] += 1e-3;
        }
        let eig = nalgebra::SymmetricEigen::new(c);
        let want: f64 = eig.eigenvalues.iter().map(|&e| e.ln()).sum();
        assert!((hv - want).abs() < 1e-9, "{hv} vs {want}");
    }

    #[test]
    fn ad_uniform_attention_oracle() {
        // row i uniform over 0..=i, so A_ii = 1/(i+1)
        let t = 6;
        let mut a = Mat::zeros(t, t);
        for i in 0..t {
            for j in 0..=i {
                a.set(i, j, 1.0 / (i + 1) as f64);
            }
        }
        let window = 2..6;
        let delta = 1e-8;
        let got = attention_diagonality(&[a.clone(), a], &window, delta).unwrap();
        let want: f64 =
            window.clone().map(|i| (1.0 / (i + 1) as f64 + delta).ln()).sum::<f64>() / 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ad_log_before_head_average() {
        // two heads with different diagonals; averaging after the log gives
        // (ln d1 + ln d2)/2, not ln((d1+d2)/2)
        let mk = |diag: f64| {
            let mut a = Mat::zeros(2, 2);
            a.set(0, 0, 1.0);
            a.set(1, 1, diag);
            a.set(1, 0, 1.0 - diag);
            a
        };
        let got = attention_diagonality(&[mk(0.9), mk(0.1)], &(1..2), 0.0).unwrap();
        let want = (0.9f64.ln() + 0.1f64.ln()) / 2.0;
        let wrong = (0.5f64).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - wrong).abs() > 1e-3);
    }

    #[test]
    fn band_selection_cases() {
        assert_eq!(select_layer_band(4, 0.5, 0.75).unwrap(), vec![2, 3]);
        assert_eq!(select_layer_band(2, 0.5, 0.75).unwrap(), vec![1]);
        assert_eq!(select_layer_band(1, 0.5, 0.75).unwrap(), vec![1]);
        assert_eq!(select_layer_band(12, 0.5, 0.75).unwrap(), vec![6, 7, 8, 9]);
        // empty inner range rounds outward
        assert_eq!(select_layer_band(4, 0.55, 0.6).unwrap(), vec![2, 3]);
        assert!(select_layer_band(0, 0.5, 0.75).is_err());
        assert!(select_layer_band(4, 0.8, 0.2).is_err());
    }

    #[test]
    fn window_validation() {
        assert!(answer_window(0, 5).is_err());
        assert!(answer_window(5, 5).is_err());
        assert_eq!(answer_window(2, 5).unwrap(), 2..5);
    }

    #[test]
    fn records_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("telemetry.jsonl");
        let records = vec![
            TelemetryRecord {
                example_id: "ex-0001".into(),
                variant: ModelVariant::Clean,
                te: 1.234567890123456e-3,
                hv: vec![(2, -27.631021115928547), (3, 0.1)],
                ad: vec![(2, -1.5), (3, -2.25e-7)],
                hv_mean: -13.765510557964273,
                ad_mean: -0.7500001125,
            },
            TelemetryRecord {
                example_id: "ex-0002".into(),
                variant: ModelVariant::Adapted,
                te: f64::MIN_POSITIVE,
                hv: vec![(2, 1.0 / 3.0), (3, -1.0 / 7.0)],
                ad: vec![(2, -0.1), (3, -0.2)],
                hv_mean: 2.0 / 21.0,
                ad_mean: -0.15000000000000002,
            },
        ];
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(records, back);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"example_id\":\"a\",\"variant\":\"clean\",\"te\":0.1,\"hv_mean\":0,\"ad_mean\":0}\nnot json\n").unwrap();
        match read_records(&path) {
            Err(CorvusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn te_bounds(rows in 2usize..6, cols in 2usize..8, seed in 0u64..500) {
            let mut r = rng::stream(seed, "te_prop");
            let mut m = Mat::zeros(rows, cols);
            rng::fill_normal(&mut r, 3.0, &mut m.data);
            let te = token_entropy(&m, &(1..rows)).unwrap();
            prop_assert!(te >= -1e-12);
            prop_assert!(te <= (cols as f64).ln() + 1e-12);
        }

        #[test]
        fn hv_monotone_in_eta(rows in 3usize..8, cols in 2usize..6, seed in 0u64..500) {
            let mut r = rng::stream(seed, "hv_prop");
            let mut m = Mat::zeros(rows, cols);
            rng::fill_normal(&mut r, 1.0, &mut m.data);
            let small = hidden_log_volume(&m, &(1..rows), 1e-4).unwrap();
            let big = hidden_log_volume(&m, &(1..rows), 1e-2).unwrap();
            prop_assert!(small <= big + 1e-12);
        }

        #[test]
        fn hv_invariant_under_window_row_permutation(seed in 0u64..200) {
            let mut r = rng::stream(seed, "hv_perm");
            let mut m = Mat::zeros(7, 4);
            rng::fill_normal(&mut r, 1.0, &mut m.data);
            let base = hidden_log_volume(&m, &(2..7), 1e-3).unwrap();
            let mut swapped = m.clone();
            for j in 0..4 {
                let a = swapped.get(3, j);
                let b = swapped.get(5, j);
                swapped.set(3, j, b);
                swapped.set(5, j, a);
            }
            let after = hidden_log_volume(&swapped, &(2..7), 1e-3).unwrap();
            prop_assert!((base - after).abs() < 1e-9);
        }

        #[test]
        fn ad_upper_bound(seed in 0u64..300) {
            // random causal attention rows
            let t = 5;
            let mut r = rng::stream(seed, "ad_prop");
            let mut a = Mat::zeros(t, t);
            for i in 0..t {
                let mut total = 0.0;
                let mut raw = vec![0.0; i + 1];
                for v in raw.iter_mut() {
                    *v = rng::normal(&mut r).exp();
                    total += *v;
                }
                for (j, v) in raw.iter().enumerate() {
                    a.set(i, j, v / total);
                }
            }
            let ad = attention_diagonality(&[a], &(1..t), AD_DELTA).unwrap();
            prop_assert!(ad <= (1.0 + AD_DELTA).ln() + 1e-12);
        }
    }
}
