//! Flat binary checkpoint container.
//!
//! Layout, all integers little-endian u32 unless noted:
//!
//! ```text
//! magic   8 bytes  "CRVSCKPT"
//! version u32      currently 1
//! config  5 × u32  vocab_size, d_model, n_layers, n_heads, max_seq_len
//! n_meta  u32
//!   n_meta × { key_len u32, key utf-8, val_len u32, val utf-8 }
//! n_tensors u32
//!   n_tensors × { name_len u32, name utf-8, rows u32, cols u32,
//!                 rows·cols × f32 LE }
//! ```
//!
//! Tensors are stored in f32; in-memory math stays f64, so a load right
//! after a save reproduces the f32-rounded values exactly and a second
//! save/load round trip is bit-stable.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adapter::{AdapterConfig, AdapterPair, AdapterState, LayerAdapters, TargetModule};
use super::config::ModelConfig;
use super::params::{LayerParams, Params};
use crate::error::{CorvusError, Result};
use crate::linalg::Mat;

const MAGIC: &[u8; 8] = b"CRVSCKPT";
const VERSION: u32 = 1;

/// What actually travels through the file: shape header, free-form
/// metadata, named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Mat)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [
        c.config.vocab_size,
        c.config.d_model,
        c.config.n_layers,
        c.config.n_heads,
        c.config.max_seq_len,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(c.metadata.len() as u32).to_le_bytes())?;
    for (k, v) in &c.metadata {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, m) in &c.tensors {
        write_str(&mut w, name)?;
        w.write_all(&(m.rows as u32).to_le_bytes())?;
        w.write_all(&(m.cols as u32).to_le_bytes())?;
        for &v in &m.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CorvusError::contract("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CorvusError::contract(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config = ModelConfig {
        vocab_size: read_u32(&mut r)? as usize,
        d_model: read_u32(&mut r)? as usize,
        n_layers: read_u32(&mut r)? as usize,
        n_heads: read_u32(&mut r)? as usize,
        max_seq_len: read_u32(&mut r)? as usize,
    };
    let n_meta = read_u32(&mut r)? as usize;
    let mut metadata = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        metadata.push((k, v));
    }
    let n_tensors = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = read_str(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf) as f64;
        }
        tensors.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(Container { config, metadata, tensors })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(CorvusError::contract("unreasonable string length in checkpoint"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CorvusError::contract("non-utf8 string in checkpoint"))
}

pub fn save_model(path: &Path, params: &Params, metadata: &[(String, String)]) -> Result<()> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    write_container(
        path,
        &Container { config: params.config, metadata: metadata.to_vec(), tensors },
    )
}

pub fn load_model(path: &Path) -> Result<(Params, Vec<(String, String)>)> {
    let c = read_container(path)?;
    c.config.validate()?;
    let take = |name: &str| -> Result<Mat> {
        c.tensor(name)
            .cloned()
            .ok_or_else(|| CorvusError::contract(format!("checkpoint missing tensor {name}")))
    };
    let d = c.config.d_model;
    let f = c.config.ff_dim();
    let expect = |m: &Mat, rows: usize, cols: usize, name: &str| -> Result<()> {
        if (m.rows, m.cols) != (rows, cols) {
            return Err(CorvusError::contract(format!(
                "tensor {name} has shape {}×{}, expected {rows}×{cols}",
                m.rows, m.cols
            )));
        }
        Ok(())
    };
    let mut layers = Vec::with_capacity(c.config.n_layers);
    for l in 0..c.config.n_layers {
        let g = |suffix: &str| take(&format!("layers.{l}.{suffix}"));
        let lp = LayerParams {
            ln1_gain: g("ln1.gain")?,
            ln1_bias: g("ln1.bias")?,
            wq: g("attn.wq")?,
            wk: g("attn.wk")?,
            wv: g("attn.wv")?,
            wo: g("attn.wo")?,
            ln2_gain: g("ln2.gain")?,
            ln2_bias: g("ln2.bias")?,
            w1: g("ff.w1")?,
            b1: g("ff.b1")?,
            w2: g("ff.w2")?,
            b2: g("ff.b2")?,
        };
        expect(&lp.wq, d, d, "attn.wq")?;
        expect(&lp.w1, d, f, "ff.w1")?;
        expect(&lp.w2, f, d, "ff.w2")?;
        layers.push(lp);
    }
    let params = Params {
        config: c.config,
        tok_emb: take("tok_emb")?,
        pos_emb: take("pos_emb")?,
        layers,
        lnf_gain: take("ln_f.gain")?,
        lnf_bias: take("ln_f.bias")?,
        head: take("head")?,
    };
    expect(&params.tok_emb, c.config.vocab_size, d, "tok_emb")?;
    expect(&params.pos_emb, c.config.max_seq_len, d, "pos_emb")?;
    expect(&params.head, d, c.config.vocab_size, "head")?;
    Ok((params, c.metadata))
}

pub fn save_adapter(
    path: &Path,
    model: &ModelConfig,
    adapter: &AdapterState,
    metadata: &[(String, String)],
) -> Result<()> {
    let mut meta = vec![
        ("adapter.rank".to_string(), adapter.config.rank.to_string()),
        ("adapter.alpha".to_string(), format!("{}", adapter.config.alpha)),
        (
            "adapter.targets".to_string(),
            adapter.config.targets.iter().map(|t| t.tag()).collect::<Vec<_>>().join(","),
        ),
    ];
    meta.extend(metadata.iter().cloned());
    let tensors = adapter
        .named_tensors()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();
    write_container(path, &Container { config: *model, metadata: meta, tensors })
}

pub fn load_adapter(path: &Path) -> Result<(ModelConfig, AdapterState, Vec<(String, String)>)> {
    let c = read_container(path)?;
    c.config.validate()?;
    let rank: usize = c
        .meta("adapter.rank")
        .ok_or_else(|| CorvusError::contract("adapter checkpoint missing rank"))?
        .parse()
        .map_err(|_| CorvusError::contract("bad adapter.rank"))?;
    let alpha: f64 = c
        .meta("adapter.alpha")
        .ok_or_else(|| CorvusError::contract("adapter checkpoint missing alpha"))?
        .parse()
        .map_err(|_| CorvusError::contract("bad adapter.alpha"))?;
    let targets = c
        .meta("adapter.targets")
        .ok_or_else(|| CorvusError::contract("adapter checkpoint missing targets"))?
        .split(',')
        .map(TargetModule::from_tag)
        .collect::<Result<Vec<_>>>()?;
    let config = AdapterConfig { rank, alpha, targets: targets.clone() };
    config.validate(c.config.d_model)?;
    let mut layers = Vec::with_capacity(c.config.n_layers);
    for l in 0..c.config.n_layers {
        let mut la = LayerAdapters::default();
        for &t in &targets {
            let a = c
                .tensor(&format!("adapter.{l}.{}.a", t.tag()))
                .cloned()
                .ok_or_else(|| CorvusError::contract(format!("missing adapter.{l}.{}.a", t.tag())))?;
            let b = c
                .tensor(&format!("adapter.{l}.{}.b", t.tag()))
                .cloned()
                .ok_or_else(|| CorvusError::contract(format!("missing adapter.{l}.{}.b", t.tag())))?;
            if (a.rows, a.cols) != (rank, c.config.d_model)
                || (b.rows, b.cols) != (c.config.d_model, rank)
            {
                return Err(CorvusError::contract(format!(
                    "adapter tensor shape mismatch at layer {l} target {}",
                    t.tag()
                )));
            }
            let pair = AdapterPair { a, b };
            match t {
                TargetModule::Query => la.q = Some(pair),
                TargetModule::Key => la.k = Some(pair),
                TargetModule::Value => la.v = Some(pair),
                TargetModule::Output => la.o = Some(pair),
            }
        }
        layers.push(la);
    }
    let metadata = c
        .metadata
        .iter()
        .filter(|(k, _)| !k.starts_with("adapter."))
        .cloned()
        .collect();
    Ok((c.config, AdapterState { config, layers }, metadata))
}
