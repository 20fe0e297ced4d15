//! Transformer encoding of task formulas.
//!
//! A formula is serialized as `CLS` followed by its prefix (Polish)
//! traversal, padded to a fixed length. Tokens are embedded, summed with a
//! sinusoidal positional table, and passed through self-attention blocks
//! (attention → residual → ReLU feed-forward → residual). The `CLS` row of
//! the last block is the task embedding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ltl::{Formula, Proposition};
use crate::nn::{xavier, Checkpoint, NnError, TensorSpec};

pub const PAD: usize = 0;
pub const CLS: usize = 1;

const OPERATORS: [&str; 8] = ["&", "|", "!", "X", "F", "U", "true", "false"];

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("proposition {0} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token sequence of length {len} exceeds the maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Injective token → index map with `PAD = 0` and `CLS = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenVocab {
    map: BTreeMap<String, usize>,
}

impl TokenVocab {
    pub fn new<'a>(propositions: impl IntoIterator<Item = &'a Proposition>) -> Self {
        let mut map = BTreeMap::new();
        map.insert("<pad>".to_string(), PAD);
        map.insert("<cls>".to_string(), CLS);
        for op in OPERATORS {
            let next = map.len();
            map.insert(op.to_string(), next);
        }
        let mut props: Vec<_> = propositions.into_iter().map(|p| p.as_str().to_string()).collect();
        props.sort();
        props.dedup();
        for p in props {
            let next = map.len();
            map.entry(p).or_insert(next);
        }
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.map.get(token).copied()
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.map.get("<pad>") != Some(&PAD) || self.map.get("<cls>") != Some(&CLS) {
            return Err(EncoderError::Vocab("PAD must be 0 and CLS must be 1".into()));
        }
        let mut seen = vec![false; self.map.len()];
        for &i in self.map.values() {
            if i >= seen.len() || seen[i] {
                return Err(EncoderError::Vocab("indices must be a permutation of 0..len".into()));
            }
            seen[i] = true;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, EncoderError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, EncoderError> {
        let vocab: TokenVocab = serde_json::from_str(text)?;
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// `CLS` + prefix traversal of `phi`, padded with `PAD` to `max_len`.
pub fn tokenize(phi: &Formula, vocab: &TokenVocab, max_len: usize) -> Result<Vec<usize>, EncoderError> {
    let mut out = vec![CLS];
    push_prefix(phi, vocab, &mut out)?;
    if out.len() > max_len {
        return Err(EncoderError::TooLong {
            len: out.len(),
            max: max_len,
        });
    }
    out.resize(max_len, PAD);
    Ok(out)
}

fn push_prefix(phi: &Formula, vocab: &TokenVocab, out: &mut Vec<usize>) -> Result<(), EncoderError> {
    let op = |name: &str| vocab.index(name).expect("operators are always in the vocabulary");
    let prop = |p: &Proposition| vocab.index(p.as_str()).ok_or_else(|| EncoderError::UnknownToken(p.to_string()));
    match phi {
        Formula::True => out.push(op("true")),
        Formula::False => out.push(op("false")),
        Formula::Atom(p) => out.push(prop(p)?),
        Formula::Not(p) => {
            out.push(op("!"));
            out.push(prop(p)?);
        }
        Formula::And(a, b) | Formula::Or(a, b) | Formula::Until(a, b) => {
            out.push(op(match phi {
                Formula::And(..) => "&",
                Formula::Or(..) => "|",
                _ => "U",
            }));
            push_prefix(a, vocab, out)?;
            push_prefix(b, vocab, out)?;
        }
        Formula::Next(a) | Formula::Eventually(a) => {
            out.push(op(if matches!(phi, Formula::Next(_)) { "X" } else { "F" }));
            push_prefix(a, vocab, out)?;
        }
    }
    Ok(())
}

/// Sinusoidal table: `(pos, 2i) = sin(pos / 10000^(2i/D))`,
/// `(pos, 2i+1) = cos(pos / 10000^(2i/D))`.
pub fn positional_embedding(max_len: usize, dim: usize) -> Array2<f64> {
    assert!(dim.is_multiple_of(2), "positional embedding dimension must be even");
    Array2::from_shape_fn((max_len, dim), |(pos, j)| {
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub ffn_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            layers: 2,
            max_len: 24,
            ffn_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(EncoderError::Config("d_model must be a positive multiple of heads".into()));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(EncoderError::Config("d_model must be even".into()));
        }
        if self.max_len < 2 || self.ffn_dim == 0 {
            return Err(EncoderError::Config("max_len ≥ 2 and ffn_dim ≥ 1 required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Block {
    fn new<R: Rng + ?Sized>(d: usize, f: usize, rng: &mut R) -> Self {
        Self {
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            wo: xavier(d, d, rng),
            w1: xavier(d, f, rng),
            b1: Array1::zeros(f),
            w2: xavier(f, d, rng),
            b2: Array1::zeros(d),
        }
    }

    fn zeros(d: usize, f: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
        }
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.wq.as_slice_mut().expect("contiguous"),
            self.wk.as_slice_mut().expect("contiguous"),
            self.wv.as_slice_mut().expect("contiguous"),
            self.wo.as_slice_mut().expect("contiguous"),
            self.w1.as_slice_mut().expect("contiguous"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
            self.b2.as_slice_mut().expect("contiguous"),
        ]
    }

    fn tensors(&self) -> [&[f64]; 8] {
        [
            self.wq.as_slice().expect("contiguous"),
            self.wk.as_slice().expect("contiguous"),
            self.wv.as_slice().expect("contiguous"),
            self.wo.as_slice().expect("contiguous"),
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
        ]
    }
}

/// The task embedding φ_θ.
pub type LtlEmbedding = Array1<f64>;

struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    y: Array2<f64>,
    hidden: Array2<f64>,
}

/// Intermediates of one [`TaskEncoder::encode_traced`] call.
pub struct EncoderTrace {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEncoder {
    config: EncoderConfig,
    embed: Array2<f64>,
    blocks: Vec<Block>,
    pos: Array2<f64>,
}

impl TaskEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(EncoderError::Config("vocabulary must hold PAD and CLS".into()));
        }
        let d = config.d_model;
        let embed = xavier(vocab_size, d, rng);
        let blocks = (0..config.layers).map(|_| Block::new(d, config.ffn_dim, rng)).collect();
        Ok(Self {
            config,
            embed,
            blocks,
            pos: positional_embedding(config.max_len, d),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn dim(&self) -> usize {
        self.config.d_model
    }

    pub fn num_params(&self) -> usize {
        let d = self.config.d_model;
        let f = self.config.ffn_dim;
        self.embed.len() + self.blocks.len() * (4 * d * d + 2 * d * f + f + d)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.embed.iter());
        for b in &self.blocks {
            for t in b.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), EncoderError> {
        if params.len() != self.num_params() {
            return Err(EncoderError::Shape(format!(
                "expected {} encoder parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let n = self.embed.len();
        self.embed.as_slice_mut().expect("contiguous").copy_from_slice(&params[..n]);
        let mut off = n;
        for b in &mut self.blocks {
            for t in b.tensors_mut() {
                let len = t.len();
                t.copy_from_slice(&params[off..off + len]);
                off += len;
            }
        }
        Ok(())
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<LtlEmbedding, EncoderError> {
        Ok(self.encode_traced(tokens)?.0)
    }

    /// Runs the encoder and keeps the intermediates for [`Self::backward`].
    ///
    /// PAD positions are masked as attention keys, so their own rows never
    /// reach the `CLS` readout; they are dropped before the blocks run.
    pub fn encode_traced(&self, tokens: &[usize]) -> Result<(LtlEmbedding, EncoderTrace), EncoderError> {
        if tokens.len() != self.config.max_len {
            return Err(EncoderError::Shape(format!(
                "expected {} tokens, got {}",
                self.config.max_len,
                tokens.len()
            )));
        }
        if tokens.first() != Some(&CLS) {
            return Err(EncoderError::Shape("sequence must start with CLS".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(EncoderError::Shape(format!("token index {bad} out of range")));
        }
        let live: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != PAD).collect();
        let d = self.config.d_model;
        let mut x = Array2::zeros((live.len(), d));
        for (r, &i) in live.iter().enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&self.embed.row(tokens[i]));
            row += &self.pos.row(i);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = self.block_forward(block, x);
            caches.push(cache);
            x = next;
        }
        let phi = x.row(0).to_owned();
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("task embedding").into());
        }
        let live_tokens = live.iter().map(|&i| tokens[i]).collect();
        Ok((
            phi,
            EncoderTrace {
                tokens: live_tokens,
                blocks: caches,
                rows: live.len(),
            },
        ))
    }

    fn block_forward(&self, b: &Block, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = x.dot(&b.wq);
        let k = x.dot(&b.wk);
        let v = x.dot(&b.wv);
        let mut o = Array2::zeros(x.raw_dim());
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for mut row in scores.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            o.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            attn.push(scores);
        }
        let y = &x + &o.dot(&b.wo);
        let mut hidden = y.dot(&b.w1) + &b.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let out = &y + &(hidden.dot(&b.w2) + &b.b2);
        (
            out,
            BlockCache {
                x,
                q,
                k,
                v,
                attn,
                o,
                y,
                hidden,
            },
        )
    }

    /// Parameter gradient of `<dphi, φ_θ>` for the traced call.
    pub fn backward(&self, trace: &EncoderTrace, dphi: &ArrayView1<f64>) -> Result<Vec<f64>, EncoderError> {
        let mut grads = vec![0.0; self.num_params()];
        self.backward_into(trace, dphi, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradient of `<dphi, φ_θ>` into `grads`.
    pub fn backward_into(&self, trace: &EncoderTrace, dphi: &ArrayView1<f64>, grads: &mut [f64]) -> Result<(), EncoderError> {
        let d = self.config.d_model;
        if dphi.len() != d || trace.blocks.len() != self.blocks.len() {
            return Err(EncoderError::Shape("embedding gradient does not match trace".into()));
        }
        if grads.len() != self.num_params() {
            return Err(EncoderError::Shape("gradient buffer length".into()));
        }
        let f = self.config.ffn_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = Array2::zeros((trace.rows, d));
        dx.row_mut(0).assign(dphi);
        let block_len = 4 * d * d + 2 * d * f + f + d;
        for (bi, (b, c)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let mut g = Block::zeros(d, f);
            // out = y + relu(y W1 + b1) W2 + b2
            let mut dy = dx.clone();
            g.w2 = c.hidden.t().dot(&dx);
            g.b2 = dx.sum_axis(Axis(0));
            let mut dz = dx.dot(&b.w2.t());
            dz.zip_mut_with(&c.hidden, |g, &h| {
                if h <= 0.0 {
                    *g = 0.0
                }
            });
            g.w1 = c.y.t().dot(&dz);
            g.b1 = dz.sum_axis(Axis(0));
            dy += &dz.dot(&b.w1.t());
            // y = x + o Wo
            let mut dxin = dy.clone();
            g.wo = c.o.t().dot(&dy);
            let d_o = dy.dot(&b.wo.t());
            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dk = Array2::zeros(c.k.raw_dim());
            let mut dv = Array2::zeros(c.v.raw_dim());
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = &c.attn[h];
                let doh = d_o.slice(cols);
                let da = doh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&a.t().dot(&doh));
                let mut ds = a * &da;
                let row_dot = ds.sum_axis(Axis(1));
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let ai = a.row(i);
                    row.zip_mut_with(&ai, |v, &av| *v -= av * row_dot[i]);
                }
                ds *= scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            g.wq = c.x.t().dot(&dq);
            g.wk = c.x.t().dot(&dk);
            g.wv = c.x.t().dot(&dv);
            dxin += &dq.dot(&b.wq.t());
            dxin += &dk.dot(&b.wk.t());
            dxin += &dv.dot(&b.wv.t());
            dx = dxin;

            let mut off = self.embed.len() + bi * block_len;
            for t in g.tensors() {
                for (dst, src) in grads[off..off + t.len()].iter_mut().zip(t) {
                    *dst += src;
                }
                off += t.len();
            }
        }
        for (r, &tok) in trace.tokens.iter().enumerate() {
            let base = tok * d;
            for (j, v) in dx.row(r).iter().enumerate() {
                grads[base + j] += v;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, EncoderError> {
        let d = self.config.d_model;
        let f = self.config.ffn_dim;
        let mut specs = vec![TensorSpec::new("embed", vec![self.vocab_size(), d], None)];
        for i in 0..self.blocks.len() {
            for (name, dims) in [
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("w1", vec![d, f]),
                ("b1", vec![f]),
                ("w2", vec![f, d]),
                ("b2", vec![d]),
            ] {
                specs.push(TensorSpec::new(format!("block{i}.{name}"), dims, None));
            }
        }
        let meta = serde_json::to_string(&self.config)?;
        Ok(Checkpoint::new("task_encoder", meta, specs, self.params())?)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, EncoderError> {
        ckpt.expect_kind("task_encoder")?;
        let config: EncoderConfig = serde_json::from_str(&ckpt.meta)?;
        let vocab = ckpt
            .tensors
            .first()
            .map(|t| t.dims[0])
            .ok_or_else(|| EncoderError::Shape("missing embedding tensor".into()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut enc = Self::new(config, vocab, &mut rng)?;
        enc.set_params(&ckpt.params)?;
        Ok(enc)
    }
}
