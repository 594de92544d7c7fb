//! Relational graph convolution encoder.
//!
//! Each layer computes, for every node `i`,
//! `h_i' = act(W_self h_i + sum_r mean_{j in N_r(i)} W_r h_j)`
//! over the eight directed relation slots of [`KnowledgeGraph::neighbor_lists`].
//! Matrices act on column vectors, so with node vectors stored as rows the
//! products are `H W^T`.
//!
//! [`KnowledgeGraph::neighbor_lists`]: crate::kg::KnowledgeGraph::neighbor_lists

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use struid_numerics::{Bound, NeighborLists, ParamStore, Tape, Tensor, Var};

use crate::kg::NUM_DIRECTED_RELATIONS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgcnConfig {
    pub layers: usize,
    pub dim: usize,
}

impl Default for RgcnConfig {
    fn default() -> Self {
        RgcnConfig { layers: 3, dim: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Linear layers, for testing.
    Identity,
}

pub const EMBEDDING: &str = "rgcn/embedding";

pub fn self_name(layer: usize) -> String {
    format!("rgcn/layer{layer}/self")
}

pub fn rel_name(layer: usize, slot: usize) -> String {
    format!("rgcn/layer{layer}/rel_{slot}")
}

/// Adds base embeddings and all layer matrices to `store`. Matrices are
/// uniform in `±1/sqrt(dim)`; a lookup table has fan-in 1 (one-hot input),
/// so embeddings are uniform in `±1`.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, num_nodes: usize, cfg: RgcnConfig, rng: &mut R) {
    let d = cfg.dim;
    store.insert(EMBEDDING, Tensor::fan_in_uniform(&[num_nodes, d], 1, rng));
    for l in 0..cfg.layers {
        store.insert(self_name(l), Tensor::fan_in_uniform(&[d, d], d, rng));
        for k in 0..NUM_DIRECTED_RELATIONS {
            store.insert(rel_name(l, k), Tensor::fan_in_uniform(&[d, d], d, rng));
        }
    }
}

/// Parameter ids of an encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct RgcnParamIds {
    pub embedding: usize,
    /// Per layer: (self matrix, one matrix per directed relation slot).
    pub layers: Vec<(usize, Vec<usize>)>,
}

impl RgcnParamIds {
    /// Panics if a parameter is missing.
    pub fn resolve(store: &ParamStore, layers: usize) -> Self {
        let id = |n: &str| store.id(n).unwrap_or_else(|| panic!("missing parameter {n}"));
        RgcnParamIds {
            embedding: id(EMBEDDING),
            layers: (0..layers)
                .map(|l| {
                    let rel = (0..NUM_DIRECTED_RELATIONS).map(|k| id(&rel_name(l, k))).collect();
                    (id(&self_name(l)), rel)
                })
                .collect(),
        }
    }
}

/// One convolution. `w_rel[k]` pairs with `lists[k]`.
pub fn rgcn_layer(
    tape: &mut Tape,
    h: Var,
    lists: &[Arc<NeighborLists>],
    w_self: Var,
    w_rel: &[Var],
    act: Activation,
) -> Var {
    assert_eq!(lists.len(), w_rel.len(), "one matrix per relation slot");
    let mut acc = tape.matmul_bt(h, w_self);
    for (l, &w) in lists.iter().zip(w_rel) {
        if l.indices.is_empty() {
            continue;
        }
        let m = tape.neighbor_mean(h, l);
        let msg = tape.matmul_bt(m, w);
        acc = tape.add(acc, msg);
    }
    match act {
        Activation::Relu => tape.relu(acc),
        Activation::Identity => acc,
    }
}

/// Stacks the configured layers on top of the base embeddings.
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    ids: &RgcnParamIds,
    lists: &[Arc<NeighborLists>],
    act: Activation,
) -> Var {
    let mut h = bound.var(ids.embedding);
    for (s, rel) in &ids.layers {
        let w_rel: Vec<Var> = rel.iter().map(|&k| bound.var(k)).collect();
        h = rgcn_layer(tape, h, lists, bound.var(*s), &w_rel, act);
    }
    h
}

/// Encodes every node with frozen parameters.
pub fn encode_frozen(store: &ParamStore, layers: usize, lists: &[Arc<NeighborLists>]) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let ids = RgcnParamIds::resolve(store, layers);
    let h = encode(&mut tape, &bound, &ids, lists, Activation::Relu);
    tape.value(h).clone()
}
