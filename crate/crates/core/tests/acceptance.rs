//! End-to-end acceptance checks. Each check prints one PASS/FAIL line with
//! its wall time against the budget; the process exits non-zero if any fail.
//!
//! Positional arguments select checks by number (`acceptance 2 8`); flags
//! passed through by `cargo test` are ignored.

#[path = "../../numerics/tests/support/op_cases.rs"]
mod op_cases;

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use struid_core::config::RunConfig;
use struid_core::corpus::{Task, Variant, EOS, SPECIALS};
use struid_core::eval::{aggregate, hr_at_k, ndcg_at_k, subset_masks, COLD_START_VISITORS};
use struid_core::ingest::{index_events, split_chronological};
use struid_core::io::write_jsonl;
use struid_core::kg::{
    adjacent_pairs, build_kg_from_parts, haversine_km, EntityRef, EntityType, KnowledgeGraph, PoiSite, Relation,
    Triple, NUM_DIRECTED_RELATIONS,
};
use struid_core::lm::{generate_topk, DecodingTrie, LanguageModel, LmConfig};
use struid_core::pipeline::Pipeline;
use struid_core::rgcn::{rgcn_layer, Activation};
use struid_core::synth::{cyclic_routes, negatives_for, synthetic_city, two_block_kg, SynthCityConfig};
use struid_core::tokenizer::{
    disambiguate, kg_loss, quantize, rq_terms, score_triple, train_tokenizer, CodebookSizes, TokenizerConfig,
};
use struid_numerics::gradcheck::{check_gradients, RELATIVE_FLOOR};
use struid_numerics::{NeighborLists, Tape, Tensor, Var};

type Outcome = Result<String, String>;

struct Check {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fixture_config(name: &str, workdir: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&configs_dir().join(name)).expect("fixture config loads");
    cfg.paths.workdir = workdir.join("work");
    cfg.paths.raw = workdir.join("raw/checkins.jsonl");
    cfg
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

// ---------------------------------------------------------------- 1

fn small_kg(rng: &mut ChaCha8Rng) -> (KnowledgeGraph, Vec<(Triple, f64)>) {
    let sites: Vec<PoiSite> = (0..4)
        .map(|i| PoiSite {
            lat: 40.7 + 0.001 * i as f64,
            lon: -74.0,
            category: Some(rng.gen_range(0..2)),
            region: Some(rng.gen_range(0..2)),
        })
        .collect();
    let visits: Vec<(usize, usize)> = (0..3).flat_map(|u| (0..4).map(move |p| (u, p))).collect();
    let visits: Vec<(usize, usize)> = visits.into_iter().filter(|_| rng.gen_bool(0.5)).collect();
    let kg = build_kg_from_parts(3, 2, 2, &sites, visits, 0.2).expect("valid graph");
    let mut batch: Vec<(Triple, f64)> = kg.triples.iter().map(|t| (*t, 1.0)).collect();
    for t in kg.triples.clone() {
        let mut neg = t;
        neg.tail.index = rng.gen_range(0..kg.count(t.tail.ty));
        batch.push((neg, 0.0));
    }
    (kg, batch)
}

fn kg_loss_gradients(instances: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (kg, batch) = small_kg(rng);
        let d = 3;
        let mut inputs = vec![Tensor::uniform(&[kg.num_nodes(), d], 1.0, rng)];
        inputs.extend((0..Relation::ALL.len()).map(|_| Tensor::uniform(&[d, d], 1.0, rng)));
        let g = check_gradients(&inputs, 1e-5, |tape, v| kg_loss(tape, v[0], &kg, &batch, &v[1..]));
        worst = worst.max(g.max_rel_error);
    }
    worst
}

/// The quantisation loss with every stop-gradient replaced by a constant
/// captured at the evaluation point, so finite differences see exactly the
/// function whose gradient the tape is meant to produce.
fn frozen_rq_loss(tape: &mut Tape, z: Var, books: &[Var], frozen_z: &[Tensor], frozen_b: &[Tensor], idx: &[Vec<usize>], beta: f64) -> Var {
    let mut total: Option<Var> = None;
    let mut zl = z;
    for l in 0..books.len() {
        let b = tape.embedding(books[l], &idx[l]);
        let zc = tape.constant(frozen_z[l].clone());
        let bc = tape.constant(frozen_b[l].clone());
        let first = tape.squared_distance(zc, b);
        let commit = tape.squared_distance(bc, zl);
        let commit = tape.scale(commit, beta);
        let level = tape.add(first, commit);
        let level = tape.sum(level);
        total = Some(match total {
            Some(t) => tape.add(t, level),
            None => level,
        });
        zl = tape.sub(zl, bc);
    }
    total.expect("levels")
}

fn rq_loss_gradients(instances: usize, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (rows, d, k, levels, beta) = (4, 3, 5, 3, 0.25);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let z = Tensor::uniform(&[rows, d], 1.0, rng);
        let books: Vec<Tensor> = (0..levels).map(|_| Tensor::uniform(&[k, d], 1.0, rng)).collect();
        let refs: Vec<&Tensor> = books.iter().collect();
        let qs: Vec<_> = (0..rows).map(|r| quantize(z.row(r), &refs)).collect();
        let idx: Vec<Vec<usize>> = (0..levels).map(|l| qs.iter().map(|q| q.indices[l]).collect()).collect();
        let frozen_z: Vec<Tensor> = (0..levels)
            .map(|l| Tensor::from_rows(&qs.iter().map(|q| q.residuals[l].clone()).collect::<Vec<_>>()))
            .collect();
        let frozen_b: Vec<Tensor> = (0..levels)
            .map(|l| Tensor::from_rows(&idx[l].iter().map(|&i| books[l].row(i).to_vec()).collect::<Vec<_>>()))
            .collect();

        let mut inputs = vec![z.clone()];
        inputs.extend(books.iter().cloned());
        let reference = check_gradients(&inputs, 1e-5, |tape, v| {
            frozen_rq_loss(tape, v[0], &v[1..], &frozen_z, &frozen_b, &idx, beta)
        });

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let (loss, _) = rq_terms(&mut tape, vars[0], &vars[1..], &idx, beta);
        let expected: f64 = qs
            .iter()
            .map(|q| {
                let codes: Vec<Vec<f64>> = (0..levels).map(|l| books[l].row(q.indices[l]).to_vec()).collect();
                struid_core::tokenizer::loss_rq(&q.residuals, &codes, beta)
            })
            .sum();
        ensure(rel_error(tape.value(loss).item(), expected) < 1e-12, || {
            format!("quantisation loss value {} differs from {expected}", tape.value(loss).item())
        })?;
        let grads = tape.backward(loss);
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.get(v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            for (a, n) in analytic.data().iter().zip(reference.numeric[i].data()) {
                worst = worst.max(rel_error(*a, *n));
            }
        }
    }
    Ok(worst)
}

fn gradient_suite() -> Outcome {
    let mut report = Vec::new();
    let mut worst: f64 = 0.0;
    for (name, err) in op_cases::run_all(10, 1e-5, 101) {
        ensure(err < 1e-4, || format!("{name}: relative error {err:.2e}"))?;
        worst = worst.max(err);
    }
    report.push(format!("ops {worst:.1e}"));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kg = kg_loss_gradients(10, &mut rng);
    ensure(kg < 1e-4, || format!("graph reconstruction loss: relative error {kg:.2e}"))?;
    let rq = rq_loss_gradients(10, &mut rng)?;
    ensure(rq < 1e-4, || format!("quantisation loss: relative error {rq:.2e}"))?;
    report.push(format!("kg loss {kg:.1e}"));
    report.push(format!("rq loss {rq:.1e}"));
    Ok(format!("worst relative error: {}", report.join(", ")))
}

// ---------------------------------------------------------------- 2

fn quantizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, levels, k) = (16, 3, 8);
    let books: Vec<Tensor> = (0..levels)
        .map(|l| Tensor::uniform(&[k, d], 1.0 / (l + 1) as f64, &mut rng))
        .collect();
    let refs: Vec<&Tensor> = books.iter().collect();
    let mut worst: f64 = 0.0;
    for n in 0..1000 {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let q = quantize(&x, &refs);
        let mut z = x.clone();
        for (l, book) in books.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let dist: f64 = z.iter().zip(book.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            ensure(q.indices[l] == best.1, || {
                format!("vector {n} level {l}: picked {} but scan found {}", q.indices[l], best.1)
            })?;
            for (zi, bi) in z.iter_mut().zip(book.row(best.1)) {
                *zi -= bi;
            }
        }
        for j in 0..d {
            let codes: f64 = (0..levels).map(|l| books[l].row(q.indices[l])[j]).sum();
            worst = worst.max((codes + q.final_residual[j] - x[j]).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("reconstruction error {worst:.2e}"))?;
    Ok(format!("1000 vectors, reconstruction error {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn run_layers(h0: &Tensor, lists: &[Arc<NeighborLists>], w_self: &[Tensor], w_rel: &[Vec<Tensor>]) -> Tensor {
    let mut tape = Tape::new();
    let mut h = tape.constant(h0.clone());
    for (s, rel) in w_self.iter().zip(w_rel) {
        let s = tape.constant(s.clone());
        let r: Vec<Var> = rel.iter().map(|w| tape.constant(w.clone())).collect();
        h = rgcn_layer(&mut tape, h, lists, s, &r, Activation::Relu);
    }
    tape.value(h).clone()
}

fn random_lists(n: usize, reach: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<usize>>> {
    (0..NUM_DIRECTED_RELATIONS)
        .map(|_| {
            (0..n)
                .map(|i| {
                    let lo = i.saturating_sub(reach);
                    let hi = (i + reach).min(n - 1);
                    (0..rng.gen_range(0..3)).map(|_| rng.gen_range(lo..=hi)).collect()
                })
                .collect()
        })
        .collect()
}

fn to_arcs(lists: &[Vec<Vec<usize>>]) -> Vec<Arc<NeighborLists>> {
    lists.iter().map(|l| Arc::new(NeighborLists::from_lists(l))).collect()
}

fn random_weights(layers: usize, d: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Vec<Tensor>>) {
    let s = (0..layers).map(|_| Tensor::uniform(&[d, d], 0.6, rng)).collect();
    let r = (0..layers)
        .map(|_| (0..NUM_DIRECTED_RELATIONS).map(|_| Tensor::uniform(&[d, d], 0.6, rng)).collect())
        .collect();
    (s, r)
}

fn hand_computed_forward() -> Result<(), String> {
    // user 0 -visit-> poi 1 -categorized-> category 2, single linear layer
    let poi = EntityRef::new(EntityType::Poi, 0);
    let kg = KnowledgeGraph::new(
        [1, 1, 1, 0],
        vec![
            Triple {
                head: EntityRef::new(EntityType::User, 0),
                relation: Relation::Visit,
                tail: poi,
            },
            Triple {
                head: poi,
                relation: Relation::Categorized,
                tail: EntityRef::new(EntityType::Category, 0),
            },
        ],
    )
    .map_err(|e| e.to_string())?;
    let lists = kg.neighbor_lists();
    let h0 = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.3, -0.7]]);
    let w_self = Tensor::from_rows(&[vec![0.5, -0.2], vec![0.1, 0.3]]);
    let mut w_rel = vec![Tensor::filled(&[2, 2], 100.0); NUM_DIRECTED_RELATIONS];
    w_rel[0] = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
    w_rel[1] = Tensor::from_rows(&[vec![0.2, 0.4], vec![-0.3, 0.1]]);
    w_rel[4] = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
    w_rel[5] = Tensor::from_rows(&[vec![-0.5, 0.2], vec![0.3, 0.6]]);
    // user:     W_self h_u + W_visit h_p           = (0.1, 0.7) + (-1.0, -0.5)
    // poi:      W_self h_p + W_visit^-1 h_u + W_cat h_c = (-0.6, 0.05) + (1.0, -0.1) + (-0.7, 0.3)
    // category: W_self h_c + W_cat^-1 h_p          = (0.29, -0.18) + (0.6, 0.0)
    let expected = [-0.9, 0.2, -0.3, 0.25, 0.89, -0.18];
    let mut tape = Tape::new();
    let h = tape.constant(h0);
    let s = tape.constant(w_self);
    let r: Vec<Var> = w_rel.iter().map(|w| tape.constant(w.clone())).collect();
    let out = rgcn_layer(&mut tape, h, &lists, s, &r, Activation::Identity);
    for (i, (a, b)) in tape.value(out).data().iter().zip(expected).enumerate() {
        ensure((a - b).abs() < 1e-6, || format!("hand-computed forward component {i}: {a} vs {b}"))?;
    }
    Ok(())
}

fn rgcn_correctness() -> Outcome {
    hand_computed_forward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, layers) = (30, 6, 3);
    for trial in 0..20 {
        let lists = random_lists(n, n, &mut rng);
        let h0 = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let (ws, wr) = random_weights(layers, d, &mut rng);
        let out = run_layers(&h0, &to_arcs(&lists), &ws, &wr);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut permuted = vec![vec![Vec::new(); n]; NUM_DIRECTED_RELATIONS];
        for (k, slot) in lists.iter().enumerate() {
            for (i, nb) in slot.iter().enumerate() {
                permuted[k][perm[i]] = nb.iter().map(|&j| perm[j]).collect();
            }
        }
        let mut h0p = Tensor::zeros(&[n, d]);
        for i in 0..n {
            h0p.row_mut(perm[i]).copy_from_slice(h0.row(i));
        }
        let outp = run_layers(&h0p, &to_arcs(&permuted), &ws, &wr);
        for i in 0..n {
            ensure(outp.row(perm[i]) == out.row(i), || format!("relabelling {trial}: node {i} changed"))?;
        }
    }

    let mut far_nodes = 0;
    for trial in 0..20 {
        let n = 60;
        let lists = random_lists(n, 2, &mut rng);
        let arcs = to_arcs(&lists);
        let h0 = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let (ws, wr) = random_weights(layers, d, &mut rng);
        let out = run_layers(&h0, &arcs, &ws, &wr);
        let centre = rng.gen_range(0..n);
        let mut undirected = vec![BTreeSet::new(); n];
        for slot in &lists {
            for (i, nb) in slot.iter().enumerate() {
                for &j in nb {
                    undirected[i].insert(j);
                    undirected[j].insert(i);
                }
            }
        }
        let mut dist = vec![usize::MAX; n];
        dist[centre] = 0;
        let mut queue = VecDeque::from([centre]);
        while let Some(i) = queue.pop_front() {
            for &j in &undirected[i] {
                if dist[j] == usize::MAX {
                    dist[j] = dist[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        let mut h1 = h0.clone();
        for i in 0..n {
            if dist[i] > layers {
                far_nodes += 1;
                for v in h1.row_mut(i) {
                    *v = rng.gen_range(-5.0..5.0);
                }
            }
        }
        let out1 = run_layers(&h1, &arcs, &ws, &wr);
        ensure(out1.row(centre) == out.row(centre), || {
            format!("locality trial {trial}: nodes beyond {layers} hops changed node {centre}")
        })?;
    }
    ensure(far_nodes > 0, || "locality fixture had no distant nodes".into())?;
    Ok(format!("hand forward ok, 20 relabellings exact, {far_nodes} distant nodes perturbed"))
}

// ---------------------------------------------------------------- 4

fn adjacency_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 500;
    let sites: Vec<PoiSite> = (0..n)
        .map(|_| PoiSite {
            lat: 40.70 + rng.gen_range(0.0..0.02),
            lon: -74.00 + rng.gen_range(0.0..0.025),
            category: Some(0),
            region: Some(0),
        })
        .collect();
    let coords: Vec<(f64, f64)> = sites.iter().map(|s| (s.lat, s.lon)).collect();
    let mut brute = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if haversine_km(coords[i], coords[j]) < 0.2 {
                brute.push((i, j));
            }
        }
    }
    let fast = adjacent_pairs(&coords, 0.2);
    ensure(fast == brute, || format!("spatial hash found {} pairs, brute force {}", fast.len(), brute.len()))?;
    let kg = build_kg_from_parts(0, 1, 1, &sites, [], 0.2).map_err(|e| e.to_string())?;
    let from_kg: BTreeSet<(usize, usize)> = kg
        .triples
        .iter()
        .filter(|t| t.relation == Relation::Adjacent)
        .map(|t| (t.head.index, t.tail.index))
        .collect();
    let symmetric: BTreeSet<(usize, usize)> = brute.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect();
    ensure(from_kg == symmetric, || "graph adjacency triples differ from brute force".into())?;
    Ok(format!("{} adjacent pairs among {n} POIs", brute.len()))
}

// ---------------------------------------------------------------- 5

fn tokenizer_learning() -> Outcome {
    let fx = two_block_kg(30, 20, 0.9, 0.1, 11);
    let cfg = TokenizerConfig {
        dim: 32,
        codebook_sizes: CodebookSizes::uniform(4),
        epochs: 60,
        triples_per_step: 256,
        lr: 0.01,
        ..TokenizerConfig::default()
    };
    let out = train_tokenizer(&fx.train, &cfg, 3).map_err(|a| a.reason)?;
    let lists = fx.train.neighbor_lists();
    let qg = out.model.quantize_graph(&fx.train, &lists);
    let w = out.model.score_matrix(Relation::Visit);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let negs = negatives_for(&fx.full, &fx.held_out, &mut rng);
    let score =
        |t: &Triple| score_triple(qg.quantized.row(fx.train.node(t.head)), qg.quantized.row(fx.train.node(t.tail)), w);
    let pos: Vec<f64> = fx.held_out.iter().map(score).collect();
    let neg: Vec<f64> = negs.iter().map(score).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    let auc = wins / (pos.len() * neg.len()) as f64;

    let off = fx.train.offset(EntityType::Poi);
    let n_pois = fx.poi_block.len();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n_pois {
        for j in i + 1..n_pois {
            let same = f64::from(u8::from(qg.indices[off + i][0] == qg.indices[off + j][0]));
            if fx.poi_block[i] == fx.poi_block[j] {
                intra += same;
                n_intra += 1.0;
            } else {
                inter += same;
                n_inter += 1.0;
            }
        }
    }
    let gap = intra / n_intra - inter / n_inter;
    let summary = format!("AUC {auc:.3}, first-token agreement gap {gap:.3}");
    ensure(auc >= 0.9 && gap >= 0.15, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 6

fn cyclic_routes_sanity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = fixture_config("cyclic.toml", dir.path());
    let events = cyclic_routes(24, 48, 4, 20, cfg.seed);
    write_jsonl(&cfg.paths.raw, &events).map_err(|e| e.to_string())?;
    let report = Pipeline::new(cfg, false).run_all().map_err(|e| e.to_string())?;
    let hr1 = report.metric(Task::Poi, "all", "HR@1").ok_or("no POI HR@1")?;
    ensure(hr1 >= 0.95, || format!("test HR@1 {hr1:.3}"))?;
    Ok(format!("test HR@1 {hr1:.3}"))
}

// ---------------------------------------------------------------- 7

struct IdFixture {
    vocab_size: usize,
    eos: usize,
    ids: Vec<Vec<usize>>,
    trie: DecodingTrie,
}

/// Three code levels of four tokens each; colliding tuples get a fourth
/// disambiguating token, so ids have mixed lengths.
fn id_fixture(n: usize, rng: &mut ChaCha8Rng) -> IdFixture {
    let eos = SPECIALS.iter().position(|&t| t == EOS).expect("eos is special");
    let base = SPECIALS.len();
    let codes: Vec<Vec<usize>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(0..4)).collect()).collect();
    let ids: Vec<Vec<usize>> = disambiguate(codes)
        .into_iter()
        .map(|s| {
            let mut t: Vec<usize> = s.indices.iter().enumerate().map(|(l, &c)| base + 4 * l + c).collect();
            if let Some(j) = s.disambiguator {
                t.push(base + 12 + j);
            }
            t
        })
        .collect();
    let max_dis = ids.iter().map(|t| t.len()).max().unwrap_or(0);
    let vocab_size = base + 12 + n.max(max_dis);
    let trie = DecodingTrie::new(&ids, eos).expect("distinct ids");
    IdFixture {
        vocab_size,
        eos,
        ids,
        trie,
    }
}

fn tiny_model(vocab: usize, d_model: usize, rng: &mut ChaCha8Rng) -> LanguageModel {
    let cfg = LmConfig {
        d_model,
        n_layers: 1,
        n_heads: 2,
        ..LmConfig::default()
    };
    LanguageModel::new(vocab, 40, &cfg, rng)
}

fn constrained_decoding() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fx = id_fixture(64, &mut rng);
    let known: HashSet<&[usize]> = fx.ids.iter().map(Vec::as_slice).collect();
    let model = tiny_model(fx.vocab_size, 16, &mut rng);
    let mut malformed = 0;
    for _ in 0..10_000 {
        let len = rng.gen_range(1..20);
        let prompt: Vec<usize> = (0..len).map(|_| rng.gen_range(0..fx.vocab_size)).collect();
        let g = generate_topk(&model, &prompt, &fx.trie, 5, 10);
        let mut seen = HashSet::new();
        for c in &g.candidates {
            let ok = known.contains(c.tokens.as_slice())
                && fx.ids[c.entity] == c.tokens
                && !c.tokens.contains(&fx.eos)
                && seen.insert(c.entity);
            malformed += usize::from(!ok);
        }
        malformed += usize::from(g.short || g.candidates.len() != 5);
    }
    ensure(malformed == 0, || format!("{malformed} malformed ids"))?;

    let model = tiny_model(fx.vocab_size, 32, &mut rng);
    let beam = fx.ids.len();
    for trial in 0..40 {
        let len = rng.gen_range(2..16);
        let prompt: Vec<usize> = (0..len).map(|_| rng.gen_range(0..fx.vocab_size)).collect();
        let mut best: Option<(f64, &Vec<usize>, usize)> = None;
        for (e, id) in fx.ids.iter().enumerate() {
            let mut cont = id.clone();
            cont.push(fx.eos);
            let s = model.sequence_logprob(&prompt, &cont) / cont.len() as f64;
            let better = match best {
                None => true,
                Some((bs, bt, _)) => s > bs || (s == bs && id < bt),
            };
            if better {
                best = Some((s, id, e));
            }
        }
        let (score, _, entity) = best.expect("non-empty catalogue");
        let g = generate_topk(&model, &prompt, &fx.trie, 1, beam);
        let top = &g.candidates[0];
        ensure(top.entity == entity && (top.score - score).abs() < 1e-9, || {
            format!(
                "prompt {trial}: beam picked {} ({:.6}), exhaustive {entity} ({score:.6})",
                top.entity, top.score
            )
        })?;
    }
    Ok(format!("10000 generations well formed, 40 exhaustive top-1 matches over {beam} ids"))
}

// ---------------------------------------------------------------- 8

fn scripted_metrics(ranked: &[usize], truth: usize, k: usize) -> (f64, f64) {
    for (i, &r) in ranked.iter().take(k).enumerate() {
        if r == truth {
            return (1.0, 1.0 / ((i + 2) as f64).log2());
        }
    }
    (0.0, 0.0)
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let universe: Vec<usize> = (0..30).collect();
    let ks = [1, 5, 10];
    let mut rankings = Vec::new();
    for _ in 0..1000 {
        let len = rng.gen_range(0..=20);
        let ranked: Vec<usize> = universe.choose_multiple(&mut rng, len).copied().collect();
        let truth = rng.gen_range(0..30);
        for k in ks {
            let (hr, ndcg) = scripted_metrics(&ranked, truth, k);
            let got = (hr_at_k(&ranked, truth, k).map_err(|e| e.to_string())?, ndcg_at_k(&ranked, truth, k).map_err(|e| e.to_string())?);
            ensure(got == (hr, ndcg), || format!("{ranked:?} truth {truth} K {k}: {got:?} vs {:?}", (hr, ndcg)))?;
        }
        rankings.push((ranked, truth));
    }
    let borrowed: Vec<(&[usize], usize)> = rankings.iter().map(|(r, t)| (r.as_slice(), *t)).collect();
    let agg = aggregate(&borrowed, &ks).map_err(|e| e.to_string())?.ok_or("empty aggregate")?;
    for k in ks {
        let (mut hr, mut ndcg) = (0.0, 0.0);
        for (r, t) in &rankings {
            let (h, n) = scripted_metrics(r, *t, k);
            hr += h;
            ndcg += n;
        }
        ensure(agg[&format!("HR@{k}")] == hr / 1000.0 && agg[&format!("NDCG@{k}")] == ndcg / 1000.0, || {
            format!("aggregate at K {k} differs")
        })?;
    }

    let spot = |ranked: &[usize], k: usize| ndcg_at_k(ranked, 0, k).expect("distinct");
    ensure(spot(&[5, 6, 0], 5) == 0.5, || "rank 3 should give NDCG 0.5".into())?;
    ensure(spot(&[0, 1], 1) == 1.0, || "rank 1 should give NDCG 1".into())?;
    ensure(spot(&[1, 2, 3, 4, 5, 6, 0], 10) == 1.0 / 3.0, || "rank 7 should give NDCG 1/3".into())?;
    ensure(spot(&[1, 2, 3, 4, 5, 0], 5) == 0.0, || "rank 6 is outside the top 5".into())?;
    ensure(hr_at_k(&[1, 2, 0], 0, 3).ok() == Some(1.0) && hr_at_k(&[1, 2, 0], 0, 2).ok() == Some(0.0), || "HR cutoff".into())?;
    Ok("1000 rankings at K 1/5/10 match exactly".into())
}

// ---------------------------------------------------------------- 9

fn ablation_direction() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = Pipeline::new(fixture_config("ablation.toml", dir.path()), false);
    let table = p.ablate().map_err(|e| e.to_string())?;
    let n5 = |v: Variant| {
        table
            .rows
            .iter()
            .find(|r| r.variant == v)
            .and_then(|r| r.metrics.get("NDCG@5").copied())
    };
    let full = n5(Variant::Full).ok_or("no full row")?;
    let no_struid = n5(Variant::NoStruId).ok_or("no w/o StruID row")?;
    let no_regcat = n5(Variant::NoRegCat).ok_or("no w/o RegCat row")?;
    let summary = format!("N@5 full {full:.4}, w/o StruID {no_struid:.4}, w/o RegCat {no_regcat:.4}");
    ensure(full >= no_struid && full >= no_regcat, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = fixture_config("determinism.toml", dir.path());
        let workdir = cfg.paths.workdir.clone();
        Pipeline::new(cfg, false).run_all().map_err(|e| e.to_string())?;
        let path = workdir.join("evaluate/full/report.json");
        bytes.push(std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    ensure(bytes[0] == bytes[1], || "reports differ between identical runs".into())?;
    Ok(format!("two runs, identical {}-byte reports", bytes[0].len()))
}

// ---------------------------------------------------------------- 11

fn subset_protocols() -> Outcome {
    let cfg = fixture_config("ablation.toml", Path::new("."));
    let city = cfg.synth.clone().unwrap_or_else(SynthCityConfig::default);
    let events = synthetic_city(&city, cfg.seed);
    let ds = index_events(&events, cfg.ingest.cells_per_axis).map_err(|e| e.to_string())?;
    let split = split_chronological(&ds.visits, ds.catalog.users.len());
    let targets: Vec<(usize, usize)> = split
        .test
        .iter()
        .flat_map(|seq| seq.iter().map(|v| (v.user, v.poi)))
        .collect();
    let masks = subset_masks(&targets, &split.train);
    let (mut cold, mut unseen) = (0, 0);
    for (i, &(u, p)) in targets.iter().enumerate() {
        let mut visitors = 0;
        for seq in &split.train {
            if seq.iter().any(|v| v.poi == p) {
                visitors += 1;
            }
        }
        let is_cold = visitors < COLD_START_VISITORS;
        let is_unseen = !split.train[u].iter().any(|v| v.poi == p);
        ensure(masks.cold_start[i] == is_cold && masks.unseen[i] == is_unseen, || {
            format!("target {i} (user {u}, POI {p}): masks disagree with recount")
        })?;
        cold += usize::from(is_cold);
        unseen += usize::from(is_unseen);
    }
    ensure(cold > 0 && unseen > 0 && cold < targets.len(), || {
        format!("fixture does not exercise both subsets ({cold} cold, {unseen} unseen)")
    })?;
    Ok(format!("{} targets, {cold} cold-start, {unseen} unseen", targets.len()))
}

fn main() {
    let checks = [
        Check { id: 1, name: "gradient suite", budget: Duration::from_secs(30), run: gradient_suite },
        Check { id: 2, name: "quantizer oracle", budget: Duration::from_secs(10), run: quantizer_oracle },
        Check { id: 3, name: "graph convolution", budget: Duration::from_secs(10), run: rgcn_correctness },
        Check { id: 4, name: "adjacency oracle", budget: Duration::from_secs(10), run: adjacency_oracle },
        Check { id: 5, name: "tokenizer learning", budget: Duration::from_secs(120), run: tokenizer_learning },
        Check { id: 6, name: "cyclic routes", budget: Duration::from_secs(300), run: cyclic_routes_sanity },
        Check { id: 7, name: "constrained decoding", budget: Duration::from_secs(60), run: constrained_decoding },
        Check { id: 8, name: "metric oracle", budget: Duration::from_secs(10), run: metric_oracle },
        Check { id: 9, name: "ablation direction", budget: Duration::from_secs(1200), run: ablation_direction },
        Check { id: 10, name: "determinism", budget: Duration::from_secs(1500), run: determinism },
        Check { id: 11, name: "subset protocols", budget: Duration::from_secs(10), run: subset_protocols },
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in checks.iter().filter(|c| selected.is_empty() || selected.contains(&c.id)) {
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= c.budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {:<22} {:>7.1}s / {:>4}s  {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
