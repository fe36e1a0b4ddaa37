//! Encoder-only transformer with an MLM head and an option-scoring head.
//!
//! Pre-LayerNorm blocks with learned absolute positions. The MLM projection
//! reuses the token embedding table, so task-prefix rows are trained both as
//! inputs and as prediction targets. The option score is a linear map of the
//! final `[CLS]` state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::seed;
use crate::tokenizer::Encoded;

const CHECKPOINT_MAGIC: &[u8; 8] = b"PMTLCKPT";
const CHECKPOINT_VERSION: u32 = 1;
const LN_EPS: f64 = 1e-5;
const EMBEDDING_STD: f64 = 0.02;
const ATTENTION_FILL: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Default desk-scale configuration: 4 layers, hidden 128, 4 heads, ffn 256, 64 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn: 256,
            max_len: 64,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.layers, self.hidden, self.heads, self.ffn, self.max_len, self.vocab_size];
        if counts.contains(&0) {
            return Err(Error::Config(format!("all sizes must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

const PER_LAYER: usize = 16;

/// Offsets of a block's parameters relative to its first parameter.
mod slot {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const BQ: usize = 3;
    pub const WK: usize = 4;
    pub const BK: usize = 5;
    pub const WV: usize = 6;
    pub const BV: usize = 7;
    pub const WO: usize = 8;
    pub const BO: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
    pub const W1: usize = 12;
    pub const B1: usize = 13;
    pub const W2: usize = 14;
    pub const B2: usize = 15;
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Sequences of equal length laid out row-major as `[n, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub n: usize,
    pub len: usize,
}

impl SeqBatch {
    /// Stacks encoded sequences, trimming trailing columns that are padding in every row.
    pub fn from_encoded<'a>(seqs: impl IntoIterator<Item = &'a Encoded>) -> Self {
        let seqs: Vec<&Encoded> = seqs.into_iter().collect();
        let len = seqs.iter().map(|s| s.real_len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut mask = Vec::with_capacity(seqs.len() * len);
        for s in &seqs {
            ids.extend_from_slice(&s.ids[..len]);
            mask.extend_from_slice(&s.attention_mask[..len]);
        }
        Self {
            ids,
            mask,
            n: seqs.len(),
            len,
        }
    }

    pub fn single(ids: &[usize], mask: &[u8]) -> Self {
        Self {
            ids: ids.to_vec(),
            mask: mask.to_vec(),
            n: 1,
            len: ids.len(),
        }
    }
}

/// Dropout stream identity: one counter-based stream per `(seed, step, layer)`.
#[derive(Clone, Copy, Debug)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
}

/// Parameters bound to a graph for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    vocab_hash: String,
    params: Vec<(String, Vec<usize>)>,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(&[seed, seed::hash_str("encoder-init")]);
        let (h, f) = (config.hidden, config.ffn);
        let wstd = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let e = EMBEDDING_STD;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor| {
            names.push(name);
            params.push(t);
        };
        add("tok_emb".into(), Tensor::randn(&[config.vocab_size, h], e, &mut rng));
        add("pos_emb".into(), Tensor::randn(&[config.max_len, h], e, &mut rng));
        for l in 0..config.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            add(p("ln1.gamma"), Tensor::full(&[h], 1.0));
            add(p("ln1.beta"), Tensor::zeros(&[h]));
            for w in ["q", "k", "v", "o"] {
                add(p(&format!("attn.w{w}")), Tensor::randn(&[h, h], wstd(h), &mut rng));
                add(p(&format!("attn.b{w}")), Tensor::zeros(&[h]));
            }
            add(p("ln2.gamma"), Tensor::full(&[h], 1.0));
            add(p("ln2.beta"), Tensor::zeros(&[h]));
            add(p("ffn.w1"), Tensor::randn(&[h, f], wstd(h), &mut rng));
            add(p("ffn.b1"), Tensor::zeros(&[f]));
            add(p("ffn.w2"), Tensor::randn(&[f, h], wstd(f), &mut rng));
            add(p("ffn.b2"), Tensor::zeros(&[h]));
        }
        add("final_ln.gamma".into(), Tensor::full(&[h], 1.0));
        add("final_ln.beta".into(), Tensor::zeros(&[h]));
        add("mlm.dense.w".into(), Tensor::randn(&[h, h], wstd(h), &mut rng));
        add("mlm.dense.b".into(), Tensor::zeros(&[h]));
        add("mlm.ln.gamma".into(), Tensor::full(&[h], 1.0));
        add("mlm.ln.beta".into(), Tensor::zeros(&[h]));
        add("mlm.bias".into(), Tensor::zeros(&[config.vocab_size]));
        add("score.w".into(), Tensor::randn(&[h, 1], wstd(h), &mut rng));
        add("score.b".into(), Tensor::zeros(&[1]));
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Token embedding table, `[vocab_size, hidden]`. Prefix rows live here.
    pub fn embeddings(&self) -> &Tensor {
        &self.params[TOK_EMB]
    }

    pub fn embedding_row(&self, id: usize) -> &[f64] {
        self.params[TOK_EMB].row(id)
    }

    fn head_base(&self) -> usize {
        2 + self.config.layers * PER_LAYER
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(p.clone(), requires_grad)).collect(),
        }
    }

    /// Final hidden states, `[n * len, hidden]`.
    pub fn forward_hidden(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &SeqBatch,
        dropout: Option<DropoutKey>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if batch.len > cfg.max_len {
            return Err(Error::LengthExceeded {
                len: batch.len,
                max: cfg.max_len,
            });
        }
        if batch.ids.len() != batch.n * batch.len || batch.mask.len() != batch.ids.len() {
            return Err(Error::shape("encode", &[batch.ids.len()], &[batch.mask.len()]));
        }
        let (n, len, h) = (batch.n, batch.len, cfg.hidden);
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let v = &p.vars;
        let rate = if dropout.is_some() { cfg.dropout } else { 0.0 };
        let drop = |g: &mut Graph, x: Var, site: u64| -> Result<Var> {
            match dropout {
                Some(key) if rate > 0.0 => {
                    let mut rng = seed::rng(&[key.seed, key.step, site]);
                    g.dropout(x, rate, &mut rng)
                }
                _ => Ok(x),
            }
        };

        let tok = g.embedding(v[TOK_EMB], &batch.ids)?;
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = g.embedding(v[POS_EMB], &positions)?;
        let mut x = g.add(tok, pos)?;
        x = drop(g, x, 0)?;

        // key padding mask, repeated for every head and query position
        let mut key_pad = Vec::with_capacity(n * heads * len * len);
        for s in 0..n {
            let row = &batch.mask[s * len..(s + 1) * len];
            for _ in 0..heads * len {
                key_pad.extend(row.iter().map(|&m| m == 0));
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();

        for l in 0..cfg.layers {
            let b = 2 + l * PER_LAYER;
            let site = 1 + l as u64 * 3;
            let hn = g.layer_norm(x, v[b + slot::LN1_G], v[b + slot::LN1_B], 1, LN_EPS)?;
            let project = |g: &mut Graph, w: usize, bias: usize| -> Result<Var> {
                let y = g.matmul(hn, v[b + w])?;
                let y = g.add_row(y, v[b + bias])?;
                let y = g.reshape(y, &[n, len, heads, dh])?;
                let y = g.permute_0213(y)?;
                g.reshape(y, &[n * heads, len, dh])
            };
            let q = project(g, slot::WQ, slot::BQ)?;
            let k = project(g, slot::WK, slot::BK)?;
            let val = project(g, slot::WV, slot::BV)?;
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.masked_fill(scores, &key_pad, ATTENTION_FILL)?;
            let attn = g.softmax(scores, 2)?;
            let attn = drop(g, attn, site)?;
            let ctx = g.batch_matmul(attn, val, false)?;
            let ctx = g.reshape(ctx, &[n, heads, len, dh])?;
            let ctx = g.permute_0213(ctx)?;
            let ctx = g.reshape(ctx, &[n * len, h])?;
            let out = g.matmul(ctx, v[b + slot::WO])?;
            let out = g.add_row(out, v[b + slot::BO])?;
            let out = drop(g, out, site + 1)?;
            x = g.add(x, out)?;

            let hn = g.layer_norm(x, v[b + slot::LN2_G], v[b + slot::LN2_B], 1, LN_EPS)?;
            let f = g.matmul(hn, v[b + slot::W1])?;
            let f = g.add_row(f, v[b + slot::B1])?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, v[b + slot::W2])?;
            let f = g.add_row(f, v[b + slot::B2])?;
            let f = drop(g, f, site + 2)?;
            x = g.add(x, f)?;
        }
        let hb = self.head_base();
        g.layer_norm(x, v[hb], v[hb + 1], 1, LN_EPS)
    }

    /// Option scores from the `[CLS]` rows of `hidden`, `[n, 1]`.
    pub fn forward_scores(&self, g: &mut Graph, p: &Bound, hidden: Var, batch: &SeqBatch) -> Result<Var> {
        let hb = self.head_base();
        let cls_rows: Vec<usize> = (0..batch.n).map(|s| s * batch.len).collect();
        let cls = g.gather_rows(hidden, &cls_rows)?;
        let s = g.matmul(cls, p.vars[hb + 7])?;
        g.add_row(s, p.vars[hb + 8])
    }

    /// Vocabulary logits for the selected rows of `hidden`, `[rows.len(), vocab_size]`.
    pub fn forward_mlm(&self, g: &mut Graph, p: &Bound, hidden: Var, rows: &[usize]) -> Result<Var> {
        let hb = self.head_base();
        let v = &p.vars;
        let x = g.gather_rows(hidden, rows)?;
        let x = g.matmul(x, v[hb + 2])?;
        let x = g.add_row(x, v[hb + 3])?;
        let x = g.gelu(x)?;
        let x = g.layer_norm(x, v[hb + 4], v[hb + 5], 1, LN_EPS)?;
        let logits = g.matmul_t(x, v[TOK_EMB], true)?;
        g.add_row(logits, v[hb + 6])
    }

    /// Per-position hidden states of one sequence, `[len, hidden]`.
    pub fn encode(&self, ids: &[usize], mask: &[u8]) -> Result<Tensor> {
        if ids.len() != mask.len() {
            return Err(Error::shape("encode", &[ids.len()], &[mask.len()]));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let h = self.forward_hidden(&mut g, &p, &SeqBatch::single(ids, mask), None)?;
        Ok(g.value(h).clone())
    }

    /// MLM logits at every position of one sequence, `[len, vocab_size]`.
    pub fn mlm_logits(&self, ids: &[usize], mask: &[u8]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let batch = SeqBatch::single(ids, mask);
        let h = self.forward_hidden(&mut g, &p, &batch, None)?;
        let rows: Vec<usize> = (0..ids.len()).collect();
        let logits = self.forward_mlm(&mut g, &p, h, &rows)?;
        Ok(g.value(logits).clone())
    }

    /// Matching score of one assembled option sequence.
    pub fn score_option(&self, seq: &Encoded) -> Result<f64> {
        Ok(self.scores(std::slice::from_ref(seq))?[0])
    }

    /// Scores of several sequences, computed as one batch.
    pub fn scores(&self, seqs: &[Encoded]) -> Result<Vec<f64>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let batch = SeqBatch::from_encoded(seqs);
        let h = self.forward_hidden(&mut g, &p, &batch, None)?;
        let s = self.forward_scores(&mut g, &p, h, &batch)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Index of the highest-scoring option sequence.
    pub fn predict(&self, option_seqs: &[Encoded]) -> Result<usize> {
        Ok(argmax(&self.scores(option_seqs)?))
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab_hash: vocab_hash.to_string(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| (n.clone(), p.shape().to_vec()))
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for x in p.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and returns it with the vocabulary hash it was saved with.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse {
            file: path.to_path_buf(),
            line: 0,
            message: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                expected: format!("checkpoint v{CHECKPOINT_VERSION}"),
                found: format!("checkpoint v{version}"),
            });
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_end = 16 + header_len;
        let header: CheckpointHeader =
            serde_json::from_slice(bytes.get(16..header_end).ok_or_else(|| bad("truncated header"))?)?;
        let mut model = Self::new(header.config, 0)?;
        let mut offset = header_end;
        if header.params.len() != model.params.len() {
            return Err(bad("parameter count does not match the configuration"));
        }
        for (i, (name, shape)) in header.params.iter().enumerate() {
            if *name != model.names[i] || shape.as_slice() != model.params[i].shape() {
                return Err(bad(&format!("unexpected parameter {name} {shape:?}")));
            }
            for x in model.params[i].data_mut() {
                let chunk = bytes.get(offset..offset + 8).ok_or_else(|| bad("truncated parameters"))?;
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                offset += 8;
            }
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok((model, header.vocab_hash))
    }
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
