//! Decoder-only transformer over corpus token ids, trained from scratch, with
//! trie-constrained beam search.
//!
//! Blocks are pre-norm: `x += Attn(LN(x))`, `x += MLP(LN(x))`, followed by a
//! final layer norm and an output head tied to the token embedding.
//! Training runs on the gradient tape; generation uses the same kernels
//! without a tape and caches the prompt's keys and values.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use struid_numerics::kernels::{gemm, layer_norm_rows, log_softmax, softmax_rows};
use struid_numerics::{Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward block as a multiple of `d_model`.
    pub ff_mult: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ff_mult: 4,
            dropout: 0.0,
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            clip_norm: 1.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::config("lm d_model, n_heads and n_layers must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "lm d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("lm dropout must be in [0, 1)"));
        }
        if self.batch_size == 0 || self.ff_mult == 0 {
            return Err(Error::config("lm batch_size and ff_mult must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lm lr must be positive"));
        }
        Ok(())
    }
}

/// Sizes fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl ModelShape {
    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

const TOK: &str = "lm/tok";
const POS: &str = "lm/pos";
const LNF_G: &str = "lm/lnf_g";
const LNF_B: &str = "lm/lnf_b";
const LAYER_PARAMS: [&str; 12] = ["ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"];

fn layer_name(l: usize, p: &str) -> String {
    format!("lm/layer{l}/{p}")
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Ids {
    tok: usize,
    pos: usize,
    lnf_g: usize,
    lnf_b: usize,
    layers: Vec<LayerIds>,
}

impl Ids {
    fn resolve(p: &ParamStore, layers: usize) -> Result<Self> {
        let id = |n: &str| p.id(n).ok_or_else(|| Error::data(format!("language model is missing parameter {n}")));
        let layers = (0..layers)
            .map(|l| {
                let g = |n: &str| id(&layer_name(l, n));
                Ok(LayerIds {
                    ln1_g: g("ln1_g")?,
                    ln1_b: g("ln1_b")?,
                    wq: g("wq")?,
                    wk: g("wk")?,
                    wv: g("wv")?,
                    wo: g("wo")?,
                    ln2_g: g("ln2_g")?,
                    ln2_b: g("ln2_b")?,
                    w1: g("w1")?,
                    b1: g("b1")?,
                    w2: g("w2")?,
                    b2: g("b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ids {
            tok: id(TOK)?,
            pos: id(POS)?,
            lnf_g: id(LNF_G)?,
            lnf_b: id(LNF_B)?,
            layers,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub shape: ModelShape,
    pub config: LmConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// A training sequence: `labels[t]` is the token to predict at position `t`;
/// only positions `loss_from..` contribute to the loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSequence {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss_from: usize,
}

impl From<&TokenSequence> for TrainSequence {
    fn from(ex: &TokenSequence) -> Self {
        let mut full = ex.input_ids.clone();
        full.extend_from_slice(&ex.target_ids);
        TrainSequence {
            tokens: full[..full.len() - 1].to_vec(),
            labels: full[1..].to_vec(),
            loss_from: ex.input_ids.len() - 1,
        }
    }
}

impl LanguageModel {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, max_len: usize, config: &LmConfig, rng: &mut R) -> Self {
        let shape = ModelShape {
            vocab_size,
            max_len,
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            d_ff: config.d_model * config.ff_mult,
        };
        let (d, f) = (shape.d_model, shape.d_ff);
        let mut p = ParamStore::new();
        p.insert(TOK, Tensor::uniform(&[vocab_size, d], 0.1, rng));
        p.insert(POS, Tensor::uniform(&[max_len, d], 0.1, rng));
        for l in 0..shape.n_layers {
            for name in LAYER_PARAMS {
                let t = match name {
                    "ln1_g" | "ln2_g" => Tensor::filled(&[d], 1.0),
                    "ln1_b" | "ln2_b" => Tensor::zeros(&[d]),
                    "wq" | "wk" | "wv" | "wo" => Tensor::fan_in_uniform(&[d, d], d, rng),
                    "w1" => Tensor::fan_in_uniform(&[f, d], d, rng),
                    "b1" => Tensor::zeros(&[f]),
                    "w2" => Tensor::fan_in_uniform(&[d, f], f, rng),
                    "b2" => Tensor::zeros(&[d]),
                    _ => unreachable!(),
                };
                p.insert(layer_name(l, name), t);
            }
        }
        p.insert(LNF_G, Tensor::filled(&[d], 1.0));
        p.insert(LNF_B, Tensor::zeros(&[d]));
        Self::from_params(shape, config.clone(), p).expect("fresh parameters resolve")
    }

    fn from_params(shape: ModelShape, config: LmConfig, params: ParamStore) -> Result<Self> {
        let ids = Ids::resolve(&params, shape.n_layers)?;
        let tok = params.by_id(ids.tok).shape();
        if tok != [shape.vocab_size, shape.d_model] {
            return Err(Error::data(format!("token embedding shape {tok:?} disagrees with {shape:?}")));
        }
        Ok(LanguageModel {
            shape,
            config,
            params,
            ids,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64, step: u64) -> Result<()> {
        let extra = serde_json::json!({ "shape": self.shape, "config": self.config });
        struid_numerics::save_checkpoint(dir, &self.params, seed, step, extra)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, manifest) = struid_numerics::load_checkpoint(dir)?;
        let bad = |e: serde_json::Error| Error::data(format!("{}: language model header: {e}", dir.display()));
        let shape: ModelShape = serde_json::from_value(manifest.extra["shape"].clone()).map_err(bad)?;
        let config: LmConfig = serde_json::from_value(manifest.extra["config"].clone()).map_err(bad)?;
        Self::from_params(shape, config, params)
    }

    fn check_len(&self, len: usize) {
        assert!(
            len <= self.shape.max_len,
            "sequence of {len} tokens exceeds model max_len {}",
            self.shape.max_len
        );
    }

    /// Final hidden states (after the last layer norm) of every position of
    /// every sequence, stacked, on the tape.
    fn tape_hidden(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        seqs: &[&[usize]],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Var {
        let s = &self.shape;
        let dh = s.head_dim();
        let tokens: Vec<usize> = seqs.iter().flat_map(|q| q.iter().copied()).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|q| 0..q.len()).collect();
        for q in seqs {
            self.check_len(q.len());
        }
        let te = tape.embedding(bound.var(self.ids.tok), &tokens);
        let pe = tape.embedding(bound.var(self.ids.pos), &positions);
        let mut x = tape.add(te, pe);
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &self.ids.layers {
            let a = tape.layer_norm(x, bound.var(l.ln1_g), bound.var(l.ln1_b));
            let q = tape.matmul_bt(a, bound.var(l.wq));
            let k = tape.matmul_bt(a, bound.var(l.wk));
            let v = tape.matmul_bt(a, bound.var(l.wv));
            let mut per_seq = Vec::with_capacity(seqs.len());
            let mut start = 0;
            for seq in seqs {
                let n = seq.len();
                let (qs, ks, vs) = (tape.slice(q, 0, start, n), tape.slice(k, 0, start, n), tape.slice(v, 0, start, n));
                let heads: Vec<Var> = (0..s.n_heads)
                    .map(|h| {
                        let qh = tape.slice(qs, 1, h * dh, dh);
                        let kh = tape.slice(ks, 1, h * dh, dh);
                        let vh = tape.slice(vs, 1, h * dh, dh);
                        let scores = tape.matmul_bt(qh, kh);
                        let scores = tape.scale(scores, scale);
                        let p = tape.causal_softmax(scores);
                        tape.matmul(p, vh)
                    })
                    .collect();
                per_seq.push(if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1) });
                start += n;
            }
            let att = if per_seq.len() == 1 { per_seq[0] } else { tape.concat(&per_seq, 0) };
            let mut o = tape.matmul_bt(att, bound.var(l.wo));
            if let Some((rate, rng)) = dropout.as_mut() {
                o = apply_dropout(tape, o, *rate, rng);
            }
            x = tape.add(x, o);
            let m = tape.layer_norm(x, bound.var(l.ln2_g), bound.var(l.ln2_b));
            let hdn = tape.matmul_bt(m, bound.var(l.w1));
            let hdn = tape.add_row(hdn, bound.var(l.b1));
            let hdn = tape.relu(hdn);
            let f = tape.matmul_bt(hdn, bound.var(l.w2));
            let mut f = tape.add_row(f, bound.var(l.b2));
            if let Some((rate, rng)) = dropout.as_mut() {
                f = apply_dropout(tape, f, *rate, rng);
            }
            x = tape.add(x, f);
        }
        tape.layer_norm(x, bound.var(self.ids.lnf_g), bound.var(self.ids.lnf_b))
    }

    /// Mean next-token cross-entropy over the loss positions of `batch`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&TrainSequence],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Var {
        let seqs: Vec<&[usize]> = batch.iter().map(|b| b.tokens.as_slice()).collect();
        let h = self.tape_hidden(tape, bound, &seqs, dropout);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut start = 0;
        for b in batch {
            assert_eq!(b.tokens.len(), b.labels.len(), "one label per position");
            assert!(b.loss_from < b.tokens.len(), "sequence without loss positions");
            for t in b.loss_from..b.tokens.len() {
                rows.push(start + t);
                labels.push(b.labels[t]);
            }
            start += b.tokens.len();
        }
        let target_rows = tape.embedding(h, &rows);
        let logits = tape.matmul_bt(target_rows, bound.var(self.ids.tok));
        tape.cross_entropy(logits, &labels)
    }

    /// Logits of every position, computed on the tape (test reference).
    pub fn tape_logits(&self, tokens: &[usize]) -> Tensor {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let h = self.tape_hidden(&mut tape, &bound, &[tokens], None);
        let logits = tape.matmul_bt(h, bound.var(self.ids.tok));
        tape.value(logits).clone()
    }

    /// Logits of every position without a tape.
    pub fn logits(&self, tokens: &[usize]) -> Tensor {
        let out = self.forward_block(None, &[tokens], 0, None);
        let v = self.shape.vocab_size;
        let mut data = vec![0.0; tokens.len() * v];
        gemm(tokens.len(), self.shape.d_model, v, 1.0, &out.hidden, false, self.p(self.ids.tok), true, 0.0, &mut data);
        Tensor::matrix(tokens.len(), v, data)
    }

    /// Post-softmax attention weights, indexed `[layer][head]`, each a
    /// `len x len` matrix.
    pub fn attention_maps(&self, tokens: &[usize]) -> Vec<Vec<Tensor>> {
        let mut maps = Vec::new();
        self.forward_block(None, &[tokens], 0, Some(&mut maps));
        maps
    }

    fn p(&self, id: usize) -> &[f64] {
        self.params.by_id(id).data()
    }

    /// Runs `seqs` (equal lengths) as continuations of `past`, starting at
    /// position `pos0`.
    fn forward_block(
        &self,
        past: Option<&PromptCache>,
        seqs: &[&[usize]],
        pos0: usize,
        mut maps: Option<&mut Vec<Vec<Tensor>>>,
    ) -> BlockOutput {
        let s = &self.shape;
        let (d, dh, f) = (s.d_model, s.head_dim(), s.d_ff);
        let n = seqs[0].len();
        assert!(seqs.iter().all(|q| q.len() == n), "block sequences must have equal length");
        self.check_len(pos0 + n);
        let rows = seqs.len() * n;
        let plen = past.map_or(0, |c| c.len);
        let tok = self.p(self.ids.tok);
        let pos = self.p(self.ids.pos);
        let mut x = vec![0.0; rows * d];
        for (r, (&t, i)) in seqs.iter().flat_map(|q| q.iter().zip(0..n)).enumerate() {
            for j in 0..d {
                x[r * d + j] = tok[t * d + j] + pos[(pos0 + i) * d + j];
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut keys = Vec::with_capacity(s.n_layers);
        let mut values = Vec::with_capacity(s.n_layers);
        let mut a = vec![0.0; rows * d];
        let mut scratch = (vec![0.0; rows * d], vec![0.0; rows]);
        for (li, l) in self.ids.layers.iter().enumerate() {
            layer_norm_rows(&x, d, self.p(l.ln1_g), self.p(l.ln1_b), &mut a, &mut scratch.0, &mut scratch.1);
            let mut q = vec![0.0; rows * d];
            let mut k = vec![0.0; rows * d];
            let mut v = vec![0.0; rows * d];
            gemm(rows, d, d, 1.0, &a, false, self.p(l.wq), true, 0.0, &mut q);
            gemm(rows, d, d, 1.0, &a, false, self.p(l.wk), true, 0.0, &mut k);
            gemm(rows, d, d, 1.0, &a, false, self.p(l.wv), true, 0.0, &mut v);
            let total = plen + n;
            let mut att = vec![0.0; rows * d];
            let mut layer_maps = Vec::new();
            for b in 0..seqs.len() {
                for h in 0..s.n_heads {
                    let gather = |src: &[f64], past: Option<&Vec<f64>>| {
                        let mut m = Vec::with_capacity(total * dh);
                        if let Some(p) = past {
                            for r in 0..plen {
                                m.extend_from_slice(&p[r * d + h * dh..r * d + (h + 1) * dh]);
                            }
                        }
                        for r in 0..n {
                            let r = b * n + r;
                            m.extend_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
                        }
                        m
                    };
                    let kh = gather(&k, past.map(|c| &c.keys[li]));
                    let vh = gather(&v, past.map(|c| &c.values[li]));
                    let qh: Vec<f64> = (0..n)
                        .flat_map(|r| q[(b * n + r) * d + h * dh..(b * n + r) * d + (h + 1) * dh].iter().copied())
                        .collect();
                    let mut scores = vec![0.0; n * total];
                    gemm(n, dh, total, 1.0, &qh, false, &kh, true, 0.0, &mut scores);
                    scores.iter_mut().for_each(|v| *v *= scale);
                    let mut probs = vec![0.0; n * total];
                    softmax_rows(&scores, n, total, true, &mut probs);
                    let mut out = vec![0.0; n * dh];
                    gemm(n, total, dh, 1.0, &probs, false, &vh, false, 0.0, &mut out);
                    for r in 0..n {
                        let dst = (b * n + r) * d + h * dh;
                        att[dst..dst + dh].copy_from_slice(&out[r * dh..(r + 1) * dh]);
                    }
                    if maps.is_some() {
                        layer_maps.push(Tensor::matrix(n, total, probs));
                    }
                }
            }
            if let Some(m) = maps.as_deref_mut() {
                m.push(layer_maps);
            }
            gemm(rows, d, d, 1.0, &att, false, self.p(l.wo), true, 1.0, &mut x);
            layer_norm_rows(&x, d, self.p(l.ln2_g), self.p(l.ln2_b), &mut a, &mut scratch.0, &mut scratch.1);
            let mut hdn = vec![0.0; rows * f];
            gemm(rows, d, f, 1.0, &a, false, self.p(l.w1), true, 0.0, &mut hdn);
            let b1 = self.p(l.b1);
            for row in hdn.chunks_mut(f) {
                for (v, b) in row.iter_mut().zip(b1) {
                    *v = (*v + b).max(0.0);
                }
            }
            let mut ff = vec![0.0; rows * d];
            gemm(rows, f, d, 1.0, &hdn, false, self.p(l.w2), true, 0.0, &mut ff);
            let b2 = self.p(l.b2);
            for (row, xr) in ff.chunks(d).zip(x.chunks_mut(d)) {
                for j in 0..d {
                    xr[j] += row[j] + b2[j];
                }
            }
            keys.push(k);
            values.push(v);
        }
        let mut hidden = vec![0.0; rows * d];
        layer_norm_rows(&x, d, self.p(self.ids.lnf_g), self.p(self.ids.lnf_b), &mut hidden, &mut scratch.0, &mut scratch.1);
        BlockOutput { hidden, keys, values }
    }

    fn next_token_logprobs(&self, hidden_row: &[f64]) -> Vec<f64> {
        let v = self.shape.vocab_size;
        let mut logits = vec![0.0; v];
        gemm(1, self.shape.d_model, v, 1.0, hidden_row, false, self.p(self.ids.tok), true, 0.0, &mut logits);
        log_softmax(&logits)
    }

    /// Encodes a prompt once for repeated continuation.
    pub fn prompt(&self, tokens: &[usize]) -> PromptCache {
        assert!(!tokens.is_empty(), "empty prompt");
        let out = self.forward_block(None, &[tokens], 0, None);
        let d = self.shape.d_model;
        let last = &out.hidden[(tokens.len() - 1) * d..];
        PromptCache {
            len: tokens.len(),
            last_logprobs: self.next_token_logprobs(last),
            keys: out.keys,
            values: out.values,
        }
    }

    /// Next-token log-probabilities after each continuation of the prompt.
    /// Continuations must share one length.
    pub fn continuation_logprobs(&self, cache: &PromptCache, suffixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        if suffixes.is_empty() {
            return Vec::new();
        }
        let n = suffixes[0].len();
        if n == 0 {
            return vec![cache.last_logprobs.clone(); suffixes.len()];
        }
        let seqs: Vec<&[usize]> = suffixes.iter().map(Vec::as_slice).collect();
        let out = self.forward_block(Some(cache), &seqs, cache.len, None);
        let d = self.shape.d_model;
        (0..suffixes.len())
            .map(|b| {
                let r = b * n + n - 1;
                self.next_token_logprobs(&out.hidden[r * d..(r + 1) * d])
            })
            .collect()
    }

    /// Sum of log-probabilities of `continuation` following `prompt`,
    /// computed without caching.
    pub fn sequence_logprob(&self, prompt: &[usize], continuation: &[usize]) -> f64 {
        let mut all = prompt.to_vec();
        all.extend_from_slice(continuation);
        let logits = self.logits(&all[..all.len() - 1]);
        continuation
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(logits.row(prompt.len() - 1 + i))[t])
            .sum()
    }
}

fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let m = tape.constant(Tensor::new(shape, mask));
    tape.mul(x, m)
}

struct BlockOutput {
    hidden: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Keys and values of every layer for a prompt, plus the next-token
/// distribution after it.
#[derive(Clone, Debug)]
pub struct PromptCache {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    last_logprobs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub skipped_steps: u64,
}

#[derive(Debug)]
pub struct LmTraining {
    pub model: LanguageModel,
    pub log: Vec<LmEpochLog>,
    pub steps: u64,
}

/// Training stopped on a non-finite loss; `last_good` holds the parameters
/// from the start of the failing epoch.
#[derive(Debug)]
pub struct LmAbort {
    pub last_good: LanguageModel,
    pub log: Vec<LmEpochLog>,
    pub reason: String,
}

/// Trains a fresh model on `data` for the configured number of epochs,
/// shuffling with `seed` every epoch.
pub fn train_lm(
    data: &[TrainSequence],
    vocab_size: usize,
    max_len: usize,
    config: &LmConfig,
    seed: u64,
) -> std::result::Result<LmTraining, LmAbort> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LanguageModel::new(vocab_size, max_len, config, &mut rng);
    train_from(model, data, &mut rng)
}

fn train_from(
    mut model: LanguageModel,
    data: &[TrainSequence],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<LmTraining, LmAbort> {
    let cfg = model.config.clone();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.clip_norm),
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        order.shuffle(rng);
        let (mut total, mut weight) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSequence> = chunk.iter().map(|&i| &data[i]).collect();
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let dropout = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut *rng));
            let loss = model.batch_loss(&mut tape, &bound, &batch, dropout);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(LmAbort {
                    last_good,
                    log,
                    reason: format!("non-finite loss {value} in epoch {}", epoch + 1),
                });
            }
            let targets: usize = batch.iter().map(|b| b.tokens.len() - b.loss_from).sum();
            total += value * targets as f64;
            weight += targets;
            let mut grads = tape.backward(loss);
            let grads = bound.collect(&mut grads);
            drop(tape);
            adam.step(&mut model.params, &grads);
        }
        let loss = if weight == 0 { 0.0 } else { total / weight as f64 };
        log::info!("lm epoch {}: loss {loss:.4}", epoch + 1);
        log.push(LmEpochLog {
            epoch: epoch + 1,
            loss,
            skipped_steps: adam.skipped_steps(),
        });
    }
    Ok(LmTraining {
        model,
        log,
        steps: adam.steps_taken(),
    })
}

/// Prefix trie over the token sequences of one entity type. Each complete
/// id continues with `eos` into a leaf holding the entity index.
#[derive(Clone, Debug)]
pub struct DecodingTrie {
    nodes: Vec<TrieNode>,
    eos: usize,
    leaves: usize,
}

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    entity: Option<usize>,
}

impl DecodingTrie {
    pub fn new(ids: &[Vec<usize>], eos: usize) -> Result<Self> {
        let mut nodes = vec![TrieNode::default()];
        for (entity, id) in ids.iter().enumerate() {
            if id.is_empty() || id.contains(&eos) {
                return Err(Error::data(format!("entity {entity} has an invalid id {id:?}")));
            }
            let mut cur = 0;
            for &t in id.iter().chain(std::iter::once(&eos)) {
                cur = match nodes[cur].children.get(&t) {
                    Some(&c) => c,
                    None => {
                        nodes.push(TrieNode::default());
                        let c = nodes.len() - 1;
                        nodes[cur].children.insert(t, c);
                        c
                    }
                };
            }
            if let Some(other) = nodes[cur].entity {
                return Err(Error::data(format!("entities {other} and {entity} share id {id:?}")));
            }
            nodes[cur].entity = Some(entity);
        }
        Ok(DecodingTrie {
            nodes,
            eos,
            leaves: ids.len(),
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves
    }

    /// Entity named by `tokens` (without EOS), if it is a complete id.
    pub fn lookup(&self, tokens: &[usize]) -> Option<usize> {
        let mut cur = 0;
        for t in tokens.iter().chain(std::iter::once(&self.eos)) {
            cur = *self.nodes[cur].children.get(t)?;
        }
        self.nodes[cur].entity
    }

    /// Every root-to-leaf path (without EOS) and its entity.
    pub fn paths(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, prefix)) = stack.pop() {
            if let Some(e) = self.nodes[n].entity {
                out.push((prefix[..prefix.len() - 1].to_vec(), e));
            }
            for (&t, &c) in &self.nodes[n].children {
                let mut p = prefix.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out.sort_by_key(|(_, e)| *e);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Id tokens without EOS.
    pub tokens: Vec<usize>,
    pub entity: usize,
    /// Log-probability of the id and EOS divided by their token count.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub candidates: Vec<Candidate>,
    /// Fewer than K complete ids were found.
    pub short: bool,
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Length-normalised beam search restricted to trie paths.
pub fn generate_topk(model: &LanguageModel, input: &[usize], trie: &DecodingTrie, k: usize, beam_width: usize) -> Generation {
    assert!(beam_width >= k && k > 0, "beam width {beam_width} must be at least K = {k} > 0");
    let cache = model.prompt(input);
    // (tokens, trie node, summed log-probability)
    let mut beams: Vec<(Vec<usize>, usize, f64)> = vec![(Vec::new(), 0, 0.0)];
    let mut finished: Vec<Candidate> = Vec::new();
    while !beams.is_empty() {
        let suffixes: Vec<Vec<usize>> = beams.iter().map(|b| b.0.clone()).collect();
        let lps = model.continuation_logprobs(&cache, &suffixes);
        let mut next = Vec::new();
        for ((tokens, node, lp), dist) in beams.into_iter().zip(lps) {
            for (&t, &child) in &trie.nodes[node].children {
                let total = lp + dist[t];
                if t == trie.eos {
                    finished.push(Candidate {
                        score: total / (tokens.len() + 1) as f64,
                        entity: trie.nodes[child].entity.expect("eos leads to a leaf"),
                        tokens: tokens.clone(),
                    });
                } else {
                    let mut extended = tokens.clone();
                    extended.push(t);
                    next.push((extended, child, total));
                }
            }
        }
        next.sort_by(|a, b| rank((a.2, &a.0), (b.2, &b.0)));
        next.truncate(beam_width);
        beams = next;
    }
    finished.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    finished.truncate(k);
    Generation {
        short: finished.len() < k,
        candidates: finished,
    }
}
