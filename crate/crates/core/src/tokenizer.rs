//! Graph-supervised residual quantisation.
//!
//! Node encodings from the relational encoder are quantised level by level
//! against per-type codebooks. Training minimises a triple-classification
//! loss over quantised vectors (bilinear score per relation, one sampled
//! corrupted tail per positive) plus the usual commitment-style quantisation
//! loss. Quantisation is bridged with a straight-through estimator.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use struid_numerics::kernels::{sigmoid, squared_distance};
use struid_numerics::{Adam, AdamConfig, NeighborLists, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::kg::{EntityType, KnowledgeGraph, Relation, Triple};
use crate::rgcn::{self, Activation, RgcnConfig, RgcnParamIds};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookSizes {
    pub user: usize,
    pub poi: usize,
    pub category: usize,
    pub region: usize,
}

impl Default for CodebookSizes {
    fn default() -> Self {
        CodebookSizes {
            user: 256,
            poi: 256,
            category: 64,
            region: 64,
        }
    }
}

impl CodebookSizes {
    pub fn get(&self, ty: EntityType) -> usize {
        match ty {
            EntityType::User => self.user,
            EntityType::Poi => self.poi,
            EntityType::Category => self.category,
            EntityType::Region => self.region,
        }
    }

    pub fn uniform(k: usize) -> Self {
        CodebookSizes {
            user: k,
            poi: k,
            category: k,
            region: k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub rgcn_layers: usize,
    pub dim: usize,
    /// Quantisation depth L.
    pub levels: usize,
    pub codebook_sizes: CodebookSizes,
    pub beta: f64,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Positive triples per optimisation step.
    pub triples_per_step: usize,
    pub kmeans_iters: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            rgcn_layers: 3,
            dim: 64,
            levels: 3,
            codebook_sizes: CodebookSizes::default(),
            beta: 0.25,
            negatives_per_positive: 1,
            epochs: 40,
            lr: 0.01,
            triples_per_step: 1024,
            kmeans_iters: 20,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("tokenizer: {m}")));
        if self.dim == 0 || self.levels == 0 {
            return bad("dim and levels must be positive");
        }
        if EntityType::ALL.iter().any(|&t| self.codebook_sizes.get(t) == 0) {
            return bad("codebook sizes must be positive");
        }
        if self.negatives_per_positive == 0 || self.triples_per_step == 0 {
            return bad("negatives_per_positive and triples_per_step must be positive");
        }
        if !(self.lr > 0.0) || !(self.beta >= 0.0) {
            return bad("lr must be positive and beta non-negative");
        }
        Ok(())
    }

    pub fn rgcn(&self) -> RgcnConfig {
        RgcnConfig {
            layers: self.rgcn_layers,
            dim: self.dim,
        }
    }
}

pub fn codebook_name(ty: EntityType, level: usize) -> String {
    format!("codebook/{ty}/level{level}")
}

pub fn score_name(r: Relation) -> String {
    format!("score/{}", r.name())
}

/// Index of the nearest code; ties go to the lowest index.
pub fn nearest_code(z: &[f64], book: &Tensor) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..book.rows() {
        let d = squared_distance(z, book.row(k));
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    /// Sum of the selected codes.
    pub quantized: Vec<f64>,
    /// Residuals `z_1 .. z_L`, with `z_1` the input.
    pub residuals: Vec<Vec<f64>>,
    /// `z_{L+1}`: what remains after the last level.
    pub final_residual: Vec<f64>,
}

pub fn quantize(h: &[f64], books: &[&Tensor]) -> Quantized {
    let mut z = h.to_vec();
    let mut quantized = vec![0.0; h.len()];
    let mut indices = Vec::with_capacity(books.len());
    let mut residuals = Vec::with_capacity(books.len());
    for book in books {
        let n = nearest_code(&z, book);
        let code = book.row(n);
        let next: Vec<f64> = z.iter().zip(code).map(|(a, b)| a - b).collect();
        for (q, &c) in quantized.iter_mut().zip(code) {
            *q += c;
        }
        residuals.push(std::mem::replace(&mut z, next));
        indices.push(n);
    }
    Quantized {
        indices,
        quantized,
        residuals,
        final_residual: z,
    }
}

/// Logistic bilinear score `sigmoid(h^T W t)`.
pub fn score_triple(head: &[f64], tail: &[f64], w: &Tensor) -> f64 {
    let d = head.len();
    let mut s = 0.0;
    for i in 0..d {
        let row = w.row(i);
        let dot: f64 = row.iter().zip(tail).map(|(a, b)| a * b).sum();
        s += head[i] * dot;
    }
    sigmoid(s)
}

/// Quantisation loss `sum_l ||sg[z_l] - b_l||^2 + beta ||sg[b_l] - z_l||^2`
/// for one vector, evaluated without a tape.
pub fn loss_rq(residuals: &[Vec<f64>], codes: &[Vec<f64>], beta: f64) -> f64 {
    residuals
        .iter()
        .zip(codes)
        .map(|(z, b)| (1.0 + beta) * squared_distance(z, b))
        .sum()
}

/// Tape form of the quantisation loss for a block of rows.
///
/// `z1` holds one encoding per row, `books[l]` is level `l`'s codebook and
/// `indices[l][row]` the selected code. Returns (sum over rows of the loss,
/// sum of selected codes per row). Residuals advance as
/// `z_{l+1} = z_l - sg[b_l]`, so the commitment term reaches the encoder
/// through every level while codebooks learn only from the first term.
pub fn rq_terms(tape: &mut Tape, z1: Var, books: &[Var], indices: &[Vec<usize>], beta: f64) -> (Var, Var) {
    let mut z = z1;
    let mut loss: Option<Var> = None;
    let mut q: Option<Var> = None;
    for (&book, idx) in books.iter().zip(indices) {
        let b = tape.embedding(book, idx);
        let z_sg = tape.stop_gradient(z);
        let b_sg = tape.stop_gradient(b);
        let codebook_term = tape.squared_distance(z_sg, b);
        let commit = tape.squared_distance(b_sg, z);
        let commit = tape.scale(commit, beta);
        let level = tape.add(codebook_term, commit);
        let level = tape.sum(level);
        loss = Some(match loss {
            Some(l) => tape.add(l, level),
            None => level,
        });
        q = Some(match q {
            Some(acc) => tape.add(acc, b),
            None => b,
        });
        z = tape.sub(z, b_sg);
    }
    (loss.expect("at least one level"), q.expect("at least one level"))
}

/// Mean binary cross-entropy of labelled triples scored from the rows of
/// `hhat` (global node order).
pub fn kg_loss(tape: &mut Tape, hhat: Var, kg: &KnowledgeGraph, batch: &[(Triple, f64)], w: &[Var]) -> Var {
    let mut probs = Vec::new();
    let mut labels = Vec::with_capacity(batch.len());
    for r in Relation::ALL {
        let group: Vec<&(Triple, f64)> = batch.iter().filter(|(t, _)| t.relation == r).collect();
        if group.is_empty() {
            continue;
        }
        let heads: Vec<usize> = group.iter().map(|(t, _)| kg.node(t.head)).collect();
        let tails: Vec<usize> = group.iter().map(|(t, _)| kg.node(t.tail)).collect();
        labels.extend(group.iter().map(|(_, y)| *y));
        let eh = tape.embedding(hhat, &heads);
        let et = tape.embedding(hhat, &tails);
        let hw = tape.matmul(eh, w[r.index()]);
        let prod = tape.mul(hw, et);
        let logits = tape.sum_rows(prod);
        probs.push(tape.sigmoid(logits));
    }
    let p = if probs.len() == 1 { probs[0] } else { tape.concat(&probs, 0) };
    tape.binary_cross_entropy(p, &labels)
}

/// One corrupted copy of each positive per `per_positive`, replacing the
/// tail with a uniformly drawn entity of the same type. Draws that hit a
/// true triple are retried a bounded number of times.
pub fn sample_negatives<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    positives: &[Triple],
    per_positive: usize,
    truth: &HashSet<Triple>,
    rng: &mut R,
) -> Vec<Triple> {
    const MAX_TRIES: usize = 100;
    let mut out = Vec::with_capacity(positives.len() * per_positive);
    for t in positives {
        let n = kg.count(t.tail.ty);
        for _ in 0..per_positive {
            let mut cand = *t;
            for _ in 0..MAX_TRIES {
                cand.tail.index = rng.gen_range(0..n);
                if !truth.contains(&cand) {
                    break;
                }
            }
            out.push(cand);
        }
    }
    out
}

/// Lloyd's k-means with k-means++ seeding. With fewer points than centres
/// the surplus centres duplicate existing points and stay unused until
/// reseeded.
pub fn kmeans<R: Rng + ?Sized>(points: &Tensor, k: usize, iters: usize, rng: &mut R) -> Tensor {
    let n = points.rows();
    let d = points.cols();
    let mut centers = Tensor::zeros(&[k, d]);
    let mut nearest_d: Vec<f64> = vec![f64::INFINITY; n];
    for c in 0..k {
        let pick = if c == 0 {
            rng.gen_range(0..n)
        } else {
            let total: f64 = nearest_d.iter().sum();
            if total > 0.0 {
                let mut target = rng.gen::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &w) in nearest_d.iter().enumerate() {
                    if target < w {
                        chosen = i;
                        break;
                    }
                    target -= w;
                }
                chosen
            } else {
                rng.gen_range(0..n)
            }
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, nd) in nearest_d.iter_mut().enumerate() {
            *nd = nd.min(squared_distance(points.row(i), centers.row(c)));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let c = nearest_code(points.row(i), &centers);
            changed |= c != *a;
            *a = c;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centers.row_mut(c).iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    centers
}

/// Encoder, codebooks and relation scoring matrices.
#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub config: TokenizerConfig,
    pub params: ParamStore,
}

/// Quantised view of every node.
#[derive(Clone, Debug)]
pub struct QuantizedGraph {
    /// Encoder output, one row per node.
    pub encodings: Tensor,
    /// Sum of selected codes, one row per node.
    pub quantized: Tensor,
    /// Selected code index per node and level.
    pub indices: Vec<Vec<usize>>,
}

impl TokenizerModel {
    /// Random encoder and scoring matrices; codebooks are zero until
    /// [`TokenizerModel::init_codebooks`] runs.
    pub fn new<R: Rng + ?Sized>(kg: &KnowledgeGraph, config: TokenizerConfig, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        rgcn::init_params(&mut params, kg.num_nodes(), config.rgcn(), rng);
        for ty in EntityType::ALL {
            for l in 0..config.levels {
                params.insert(codebook_name(ty, l), Tensor::zeros(&[config.codebook_sizes.get(ty), config.dim]));
            }
        }
        for r in Relation::ALL {
            params.insert(score_name(r), Tensor::fan_in_uniform(&[config.dim, config.dim], config.dim, rng));
        }
        TokenizerModel { config, params }
    }

    pub fn books(&self, ty: EntityType) -> Vec<&Tensor> {
        (0..self.config.levels)
            .map(|l| self.params.expect(&codebook_name(ty, l)))
            .collect()
    }

    pub fn score_matrix(&self, r: Relation) -> &Tensor {
        self.params.expect(&score_name(r))
    }

    pub fn encode(&self, lists: &[Arc<NeighborLists>]) -> Tensor {
        rgcn::encode_frozen(&self.params, self.config.rgcn_layers, lists)
    }

    pub fn quantize_graph(&self, kg: &KnowledgeGraph, lists: &[Arc<NeighborLists>]) -> QuantizedGraph {
        let encodings = self.encode(lists);
        let mut quantized = Tensor::zeros(encodings.shape());
        let mut indices = Vec::with_capacity(kg.num_nodes());
        for ty in EntityType::ALL {
            let books = self.books(ty);
            let off = kg.offset(ty);
            for i in off..off + kg.count(ty) {
                let q = quantize(encodings.row(i), &books);
                quantized.row_mut(i).copy_from_slice(&q.quantized);
                indices.push(q.indices);
            }
        }
        QuantizedGraph {
            encodings,
            quantized,
            indices,
        }
    }

    /// k-means over each level's residuals of the current encodings.
    pub fn init_codebooks<R: Rng + ?Sized>(&mut self, kg: &KnowledgeGraph, lists: &[Arc<NeighborLists>], rng: &mut R) {
        let h = self.encode(lists);
        for ty in EntityType::ALL {
            let n = kg.count(ty);
            if n == 0 {
                continue;
            }
            let off = kg.offset(ty);
            let mut z = Tensor::from_rows(&(off..off + n).map(|i| h.row(i).to_vec()).collect::<Vec<_>>());
            for l in 0..self.config.levels {
                let k = self.config.codebook_sizes.get(ty);
                let book = kmeans(&z, k, self.config.kmeans_iters, rng);
                for i in 0..n {
                    let c = nearest_code(z.row(i), &book);
                    for (a, b) in z.row_mut(i).iter_mut().zip(book.row(c)) {
                        *a -= b;
                    }
                }
                self.params.set(&codebook_name(ty, l), book);
            }
        }
    }

    pub fn save(&self, dir: &Path, seed: u64, step: u64) -> Result<()> {
        let extra = serde_json::to_value(&self.config).expect("config serializes");
        struid_numerics::save_checkpoint(dir, &self.params, seed, step, extra)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, manifest) = struid_numerics::load_checkpoint(dir)?;
        let config: TokenizerConfig = serde_json::from_value(manifest.extra)
            .map_err(|e| Error::data(format!("{}: tokenizer config: {e}", dir.display())))?;
        Ok(TokenizerModel { config, params })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kg_loss: f64,
    pub rq_loss: f64,
    pub dead_codes_reseeded: usize,
    pub skipped_steps: u64,
}

#[derive(Clone, Debug)]
pub struct TokenizerTraining {
    pub model: TokenizerModel,
    pub log: Vec<EpochLog>,
}

/// Training stopped on a non-finite loss; `last_good` is the state at the
/// start of the failing epoch.
#[derive(Clone, Debug)]
pub struct TokenizerAbort {
    pub last_good: TokenizerModel,
    pub log: Vec<EpochLog>,
    pub reason: String,
}

struct StepResult {
    kg_loss: f64,
    rq_loss: f64,
    /// Per type, per level: selected code of every entity this step.
    indices: Vec<Vec<Vec<usize>>>,
    /// Per type, per level: residual rows this step.
    residuals: Vec<Vec<Tensor>>,
}

fn train_step(
    model: &mut TokenizerModel,
    adam: &mut Adam,
    kg: &KnowledgeGraph,
    lists: &[Arc<NeighborLists>],
    ids: &RgcnParamIds,
    batch: &[(Triple, f64)],
) -> std::result::Result<StepResult, String> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let h = rgcn::encode(&mut tape, &bound, ids, lists, Activation::Relu);
    let mut parts = Vec::new();
    let mut rq_total: Option<Var> = None;
    let mut all_indices = Vec::new();
    let mut all_residuals = Vec::new();
    for ty in EntityType::ALL {
        let n = kg.count(ty);
        if n == 0 {
            all_indices.push(Vec::new());
            all_residuals.push(Vec::new());
            continue;
        }
        let ht = tape.slice(h, 0, kg.offset(ty), n);
        let books: Vec<&Tensor> = (0..cfg.levels)
            .map(|l| model.params.expect(&codebook_name(ty, l)))
            .collect();
        let mut idx = vec![vec![0usize; n]; cfg.levels];
        let mut res: Vec<Tensor> = (0..cfg.levels).map(|_| Tensor::zeros(&[n, cfg.dim])).collect();
        let hv = tape.value(ht);
        for i in 0..n {
            let q = quantize(hv.row(i), &books);
            for l in 0..cfg.levels {
                idx[l][i] = q.indices[l];
                res[l].row_mut(i).copy_from_slice(&q.residuals[l]);
            }
        }
        let book_vars: Vec<Var> = (0..cfg.levels)
            .map(|l| bound.var(model.params.id(&codebook_name(ty, l)).expect("codebook")))
            .collect();
        let (rq, q) = rq_terms(&mut tape, ht, &book_vars, &idx, cfg.beta);
        rq_total = Some(match rq_total {
            Some(acc) => tape.add(acc, rq),
            None => rq,
        });
        let gap = tape.sub(q, ht);
        let gap = tape.stop_gradient(gap);
        parts.push(tape.add(ht, gap));
        all_indices.push(idx);
        all_residuals.push(res);
    }
    let hhat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0) };
    // Mean over nodes and dimensions, so the balance against the triple loss
    // does not depend on the embedding width.
    let rq = tape.scale(rq_total.expect("graph has nodes"), 1.0 / (kg.num_nodes() * cfg.dim) as f64);
    let w: Vec<Var> = Relation::ALL
        .iter()
        .map(|&r| bound.var(model.params.id(&score_name(r)).expect("score matrix")))
        .collect();
    let kgl = kg_loss(&mut tape, hhat, kg, batch, &w);
    let loss = tape.add(kgl, rq);
    let (kg_v, rq_v) = (tape.value(kgl).item(), tape.value(rq).item());
    if !(kg_v.is_finite() && rq_v.is_finite()) {
        return Err(format!("non-finite tokenizer loss (kg {kg_v}, rq {rq_v})"));
    }
    let mut grads = tape.backward(loss);
    let grads = bound.collect(&mut grads);
    drop(tape);
    adam.step(&mut model.params, &grads);
    Ok(StepResult {
        kg_loss: kg_v,
        rq_loss: rq_v,
        indices: all_indices,
        residuals: all_residuals,
    })
}

/// Jointly trains encoder, codebooks and scoring matrices on `kg`.
pub fn train_tokenizer(
    kg: &KnowledgeGraph,
    config: &TokenizerConfig,
    seed: u64,
) -> std::result::Result<TokenizerTraining, TokenizerAbort> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TokenizerModel::new(kg, config.clone(), &mut rng);
    let lists = kg.neighbor_lists();
    model.init_codebooks(kg, &lists, &mut rng);
    train_from(model, kg, &lists, &mut rng)
}

fn train_from(
    mut model: TokenizerModel,
    kg: &KnowledgeGraph,
    lists: &[Arc<NeighborLists>],
    rng: &mut ChaCha8Rng,
) -> std::result::Result<TokenizerTraining, TokenizerAbort> {
    let cfg = model.config.clone();
    let ids = RgcnParamIds::resolve(&model.params, cfg.rgcn_layers);
    let truth = kg.triple_set();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut log = Vec::new();
    let mut order: Vec<Triple> = kg.triples.clone();
    for epoch in 0..cfg.epochs {
        let last_good = model.clone();
        order.shuffle(rng);
        let mut usage: Vec<Vec<Vec<bool>>> = EntityType::ALL
            .iter()
            .map(|&t| vec![vec![false; cfg.codebook_sizes.get(t)]; cfg.levels])
            .collect();
        let (mut kg_sum, mut rq_sum, mut steps) = (0.0, 0.0, 0usize);
        let mut last_residuals = Vec::new();
        let skipped_before = adam.skipped_steps();
        for chunk in order.chunks(cfg.triples_per_step) {
            let negs = sample_negatives(kg, chunk, cfg.negatives_per_positive, &truth, rng);
            let batch: Vec<(Triple, f64)> = chunk
                .iter()
                .map(|&t| (t, 1.0))
                .chain(negs.into_iter().map(|t| (t, 0.0)))
                .collect();
            let step = match train_step(&mut model, &mut adam, kg, lists, &ids, &batch) {
                Ok(s) => s,
                Err(reason) => {
                    log::error!("epoch {epoch}: {reason}; keeping the last good state");
                    return Err(TokenizerAbort {
                        last_good,
                        log,
                        reason,
                    });
                }
            };
            kg_sum += step.kg_loss;
            rq_sum += step.rq_loss;
            steps += 1;
            for (t, per_level) in step.indices.iter().enumerate() {
                for (l, idx) in per_level.iter().enumerate() {
                    for &k in idx {
                        usage[t][l][k] = true;
                    }
                }
            }
            last_residuals = step.residuals;
        }
        let mut reseeded = 0;
        if epoch + 1 < cfg.epochs {
            for ty in EntityType::ALL {
                let res = &last_residuals[ty.index()];
                if res.is_empty() {
                    continue;
                }
                for l in 0..cfg.levels {
                    let name = codebook_name(ty, l);
                    let id = model.params.id(&name).expect("codebook");
                    let book = model.params.by_id_mut(id);
                    for (k, used) in usage[ty.index()][l].iter().enumerate() {
                        if !used {
                            let src = rng.gen_range(0..res[l].rows());
                            book.row_mut(k).copy_from_slice(res[l].row(src));
                            reseeded += 1;
                        }
                    }
                }
            }
        }
        let entry = EpochLog {
            epoch,
            kg_loss: kg_sum / steps.max(1) as f64,
            rq_loss: rq_sum / steps.max(1) as f64,
            dead_codes_reseeded: reseeded,
            skipped_steps: adam.skipped_steps() - skipped_before,
        };
        log::info!(
            "tokenizer epoch {epoch}: L_KG {:.5} L_RQ {:.5} reseeded {reseeded}",
            entry.kg_loss,
            entry.rq_loss
        );
        log.push(entry);
    }
    Ok(TokenizerTraining { model, log })
}

/// Discrete identifier of one entity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StruId {
    pub indices: Vec<usize>,
    /// Set only for entities whose indices collide with another entity of
    /// the same type.
    pub disambiguator: Option<usize>,
}

/// Adds disambiguators 0, 1, ... (in entity order) to every group of
/// entities that share all code indices.
pub fn disambiguate(indices: Vec<Vec<usize>>) -> Vec<StruId> {
    let mut groups: HashMap<&[usize], usize> = HashMap::new();
    for idx in &indices {
        *groups.entry(idx.as_slice()).or_default() += 1;
    }
    let mut next: HashMap<Vec<usize>, usize> = HashMap::new();
    let sizes: Vec<usize> = indices.iter().map(|i| groups[i.as_slice()]).collect();
    indices
        .into_iter()
        .zip(sizes)
        .map(|(idx, size)| {
            let disambiguator = if size > 1 {
                let slot = next.entry(idx.clone()).or_default();
                *slot += 1;
                Some(*slot - 1)
            } else {
                None
            };
            StruId {
                indices: idx,
                disambiguator,
            }
        })
        .collect()
}

/// Quantises each row of `encodings` and resolves collisions.
pub fn assign_struids(encodings: &Tensor, books: &[&Tensor]) -> Vec<StruId> {
    disambiguate((0..encodings.rows()).map(|i| quantize(encodings.row(i), books).indices).collect())
}

/// StruIds of every entity, per type in entity order.
#[derive(Clone, Debug, PartialEq)]
pub struct StruIdTable {
    pub levels: usize,
    pub ids: [Vec<StruId>; 4],
}

impl StruIdTable {
    pub fn from_graph(model: &TokenizerModel, kg: &KnowledgeGraph, qg: &QuantizedGraph) -> Self {
        let ids = EntityType::ALL.map(|ty| {
            let off = kg.offset(ty);
            disambiguate((off..off + kg.count(ty)).map(|i| qg.indices[i].clone()).collect())
        });
        StruIdTable {
            levels: model.config.levels,
            ids,
        }
    }

    pub fn get(&self, ty: EntityType) -> &[StruId] {
        &self.ids[ty.index()]
    }

    /// Largest collision group per type (0 when no collisions).
    pub fn max_disambiguator(&self, ty: EntityType) -> usize {
        self.get(ty)
            .iter()
            .filter_map(|s| s.disambiguator.map(|d| d + 1))
            .max()
            .unwrap_or(0)
    }

    /// TSV with columns entity_type, raw_id, n1..nL, disambiguator (`-` when
    /// absent). `names[t][i]` is the raw id of entity `i` of type `t`.
    pub fn to_tsv(&self, names: &[Vec<String>; 4]) -> String {
        let mut out = String::from("entity_type\traw_id");
        for l in 1..=self.levels {
            out.push_str(&format!("\tn{l}"));
        }
        out.push_str("\tdisambiguator\n");
        for ty in EntityType::ALL {
            for (sid, name) in self.get(ty).iter().zip(&names[ty.index()]) {
                out.push_str(ty.name());
                out.push('\t');
                out.push_str(name);
                for n in &sid.indices {
                    out.push_str(&format!("\t{n}"));
                }
                match sid.disambiguator {
                    Some(d) => out.push_str(&format!("\t{d}\n")),
                    None => out.push_str("\t-\n"),
                }
            }
        }
        out
    }

    /// Parses [`StruIdTable::to_tsv`] output; returns the table and the raw
    /// ids in file order per type.
    pub fn from_tsv(text: &str) -> Result<(Self, [Vec<String>; 4])> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::data("empty StruID table"))?;
        let cols = header.split('\t').count();
        if cols < 4 {
            return Err(Error::data("StruID table header too short"));
        }
        let levels = cols - 3;
        let mut ids: [Vec<StruId>; 4] = Default::default();
        let mut names: [Vec<String>; 4] = Default::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::data(format!("StruID table line {}: malformed", i + 2));
            if f.len() != cols {
                return Err(bad());
            }
            let ty = EntityType::parse(f[0]).ok_or_else(bad)?;
            let indices = f[2..2 + levels]
                .iter()
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<Vec<usize>>>()?;
            let disambiguator = match f[cols - 1] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad())?),
            };
            ids[ty.index()].push(StruId {
                indices,
                disambiguator,
            });
            names[ty.index()].push(f[1].to_string());
        }
        Ok((StruIdTable { levels, ids }, names))
    }
}
