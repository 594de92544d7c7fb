//! Ranking metrics, evaluation subsets, reports and id projections.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SplitPart, Task, Variant};
use crate::error::{Error, Result};
use crate::ingest::Visit;
use crate::lm::{generate_topk, DecodingTrie, LanguageModel};

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

fn check_distinct(ranked: &[usize]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ranked.len());
    for &r in ranked {
        if !seen.insert(r) {
            return Err(Error::data(format!("ranking lists id {r} twice")));
        }
    }
    Ok(())
}

/// 1-based rank of `truth` in `ranked`.
fn rank_of(ranked: &[usize], truth: usize) -> Option<usize> {
    ranked.iter().position(|&r| r == truth).map(|p| p + 1)
}

pub fn hr_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_distinct(ranked)?;
    Ok(match rank_of(ranked, truth) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    })
}

pub fn ndcg_at_k(ranked: &[usize], truth: usize, k: usize) -> Result<f64> {
    check_distinct(ranked)?;
    Ok(match rank_of(ranked, truth) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    })
}

/// Per-target subset membership for POI targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetMasks {
    /// Target POI has fewer than [`COLD_START_VISITORS`] distinct train visitors.
    pub cold_start: Vec<bool>,
    /// The predicting user never visited the target POI in train.
    pub unseen: Vec<bool>,
}

pub const COLD_START_VISITORS: usize = 5;

/// `targets` are (user, POI) pairs; `train[u]` is user `u`'s train sequence.
pub fn subset_masks(targets: &[(usize, usize)], train: &[Vec<Visit>]) -> SubsetMasks {
    let mut visitors: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut visited: Vec<HashSet<usize>> = Vec::with_capacity(train.len());
    for (u, seq) in train.iter().enumerate() {
        visited.push(seq.iter().map(|v| v.poi).collect());
        for v in seq {
            visitors.entry(v.poi).or_default().insert(u);
        }
    }
    let cold_start = targets
        .iter()
        .map(|(_, p)| visitors.get(p).map_or(0, BTreeSet::len) < COLD_START_VISITORS)
        .collect();
    let unseen = targets
        .iter()
        .map(|&(u, p)| visited.get(u).map_or(true, |s| !s.contains(&p)))
        .collect();
    SubsetMasks { cold_start, unseen }
}

/// Metrics of one subset. `metrics` is absent when the subset is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub examples: usize,
    /// Generations that returned fewer than the largest K ids.
    pub short_generations: usize,
    pub subsets: BTreeMap<String, SubsetReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    /// Hash of the data split the model was trained and evaluated on.
    pub split_hash: String,
    pub ks: Vec<usize>,
    pub tasks: BTreeMap<String, TaskReport>,
}

impl EvalReport {
    pub fn metric(&self, task: Task, subset: &str, name: &str) -> Option<f64> {
        self.tasks.get(task.name())?.subsets.get(subset)?.metrics.as_ref()?.get(name).copied()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let names: Vec<String> = self
            .ks
            .iter()
            .flat_map(|k| [format!("HR@{k}"), format!("NDCG@{k}")])
            .collect();
        let _ = write!(out, "{:<10} {:<11} {:>6}", "task", "subset", "n");
        for n in &names {
            let _ = write!(out, " {n:>8}");
        }
        out.push('\n');
        for (task, tr) in &self.tasks {
            for (subset, sr) in &tr.subsets {
                let _ = write!(out, "{task:<10} {subset:<11} {:>6}", sr.count);
                for n in &names {
                    match sr.metrics.as_ref().and_then(|m| m.get(n)) {
                        Some(v) => {
                            let _ = write!(out, " {v:>8.4}");
                        }
                        None => {
                            let _ = write!(out, " {:>8}", "-");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn metric_names(ks: &[usize]) -> Vec<String> {
    ks.iter().flat_map(|k| [format!("HR@{k}"), format!("NDCG@{k}")]).collect()
}

/// Mean HR@K and NDCG@K over rankings. Empty input gives `None`.
pub fn aggregate(rankings: &[(&[usize], usize)], ks: &[usize]) -> Result<Option<BTreeMap<String, f64>>> {
    if rankings.is_empty() {
        return Ok(None);
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let (mut hr, mut ndcg) = (0.0, 0.0);
        for &(ranked, truth) in rankings {
            hr += hr_at_k(ranked, truth, k)?;
            ndcg += ndcg_at_k(ranked, truth, k)?;
        }
        let n = rankings.len() as f64;
        out.insert(format!("HR@{k}"), hr / n);
        out.insert(format!("NDCG@{k}"), ndcg / n);
    }
    Ok(Some(out))
}

/// Everything needed to rank test targets for one corpus variant.
pub struct EvalInputs<'a> {
    pub model: &'a LanguageModel,
    pub corpus: &'a Corpus,
    pub train: &'a [Vec<Visit>],
    pub ks: &'a [usize],
    pub beam_width: usize,
    pub seed: u64,
    pub config_hash: String,
    pub split_hash: String,
}

/// Generates rankings for every test example of the corpus, in corpus order.
pub fn rank_test_examples(inp: &EvalInputs<'_>, tries: &BTreeMap<Task, DecodingTrie>) -> Vec<(usize, RankedExample)> {
    let kmax = inp.ks.iter().copied().max().unwrap_or(1);
    let test: Vec<usize> = (0..inp.corpus.examples.len())
        .filter(|&i| inp.corpus.examples[i].split == SplitPart::Test)
        .collect();
    test.par_iter()
        .map(|&i| {
            let ex = &inp.corpus.examples[i];
            let g = generate_topk(inp.model, &ex.input_ids, &tries[&ex.task], kmax, inp.beam_width.max(kmax));
            (
                i,
                RankedExample {
                    ranked: g.candidates.iter().map(|c| c.entity).collect(),
                    short: g.short,
                },
            )
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct RankedExample {
    pub ranked: Vec<usize>,
    pub short: bool,
}

pub fn build_tries(corpus: &Corpus) -> Result<BTreeMap<Task, DecodingTrie>> {
    let eos = corpus.vocab.expect(crate::corpus::EOS);
    corpus
        .variant
        .tasks()
        .into_iter()
        .map(|t| Ok((t, DecodingTrie::new(&corpus.entity_tokens.tokens[t.target_type().index()], eos)?)))
        .collect()
}

pub fn run_eval(inp: &EvalInputs<'_>) -> Result<EvalReport> {
    let tries = build_tries(inp.corpus)?;
    let ranked = rank_test_examples(inp, &tries);
    let mut tasks = BTreeMap::new();
    for task in inp.corpus.variant.tasks() {
        let rows: Vec<(&RankedExample, usize, usize)> = ranked
            .iter()
            .filter(|(i, _)| inp.corpus.examples[*i].task == task)
            .map(|(i, r)| {
                let ex = &inp.corpus.examples[*i];
                (r, ex.user, ex.target)
            })
            .collect();
        let all: Vec<(&[usize], usize)> = rows.iter().map(|(r, _, t)| (r.ranked.as_slice(), *t)).collect();
        let mut subsets = BTreeMap::new();
        subsets.insert(
            "all".to_string(),
            SubsetReport {
                count: all.len(),
                metrics: aggregate(&all, inp.ks)?,
            },
        );
        if task == Task::Poi {
            let pairs: Vec<(usize, usize)> = rows.iter().map(|(_, u, t)| (*u, *t)).collect();
            let masks = subset_masks(&pairs, inp.train);
            for (name, mask) in [("cold_start", &masks.cold_start), ("unseen", &masks.unseen)] {
                let sel: Vec<(&[usize], usize)> = all.iter().zip(mask).filter(|(_, &m)| m).map(|(r, _)| *r).collect();
                subsets.insert(
                    name.to_string(),
                    SubsetReport {
                        count: sel.len(),
                        metrics: aggregate(&sel, inp.ks)?,
                    },
                );
            }
        }
        tasks.insert(
            task.name().to_string(),
            TaskReport {
                examples: rows.len(),
                short_generations: rows.iter().filter(|(r, _, _)| r.short).count(),
                subsets,
            },
        );
    }
    Ok(EvalReport {
        variant: inp.corpus.variant,
        seed: inp.seed,
        config_hash: inp.config_hash.clone(),
        split_hash: inp.split_hash.clone(),
        ks: inp.ks.to_vec(),
        tasks,
    })
}

/// POI-task metrics of every variant, side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split_hash: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: BTreeMap<String, f64>,
}

pub fn ablation_table(reports: &[EvalReport]) -> Result<AblationTable> {
    let first = reports.first().ok_or_else(|| Error::data("no ablation reports"))?;
    for r in reports {
        if r.split_hash != first.split_hash {
            return Err(Error::data(format!(
                "variant {} was evaluated on a different split ({} vs {})",
                r.variant, r.split_hash, first.split_hash
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|r| AblationRow {
            variant: r.variant,
            metrics: r
                .tasks
                .get(Task::Poi.name())
                .and_then(|t| t.subsets.get("all"))
                .and_then(|s| s.metrics.clone())
                .unwrap_or_default(),
        })
        .collect();
    Ok(AblationTable {
        split_hash: first.split_hash.clone(),
        rows,
    })
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let names: Vec<String> = self.rows.first().map(|r| r.metrics.keys().cloned().collect()).unwrap_or_default();
        let mut out = format!("{:<12}", "variant");
        for n in &names {
            let _ = write!(out, " {n:>8}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<12}", r.variant.label());
            for n in &names {
                let _ = write!(out, " {:>8.4}", r.metrics.get(n).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}

/// 2-D principal-component coordinates of labelled vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Mean silhouette of the input vectors grouped by label; `None` with a
    /// single label.
    pub silhouette: Option<f64>,
}

/// Rows of `vectors` projected on their top two principal components. Each
/// component's sign is fixed so its largest-magnitude entry is positive.
pub fn project_ids(vectors: &[Vec<f64>], labels: &[usize]) -> Result<Projection> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::data(format!("projection needs at least 3 POIs, got {n}")));
    }
    assert_eq!(labels.len(), n, "one label per vector");
    let d = vectors[0].len();
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::new();
    for &c in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        axes.push(v);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]);
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |a: &Vec<f64>| row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    Ok(Projection {
        coords,
        silhouette: silhouette(vectors, labels),
    })
}

/// Mean silhouette coefficient under Euclidean distance. Points alone in
/// their label score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return None;
    }
    let dist = |a: &[f64], b: &[f64]| struid_numerics::kernels::squared_distance(a, b).sqrt();
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for j in 0..n {
            if i != j {
                let e = sums.entry(labels[j]).or_default();
                e.0 += dist(&points[i], &points[j]);
                e.1 += 1;
            }
        }
        let own = sums.get(&labels[i]).copied().unwrap_or((0.0, 0));
        if own.1 == 0 {
            continue;
        }
        let a = own.0 / own.1 as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / n as f64)
}

/// Projection rows as TSV with header `x y label poi_id`.
pub fn projection_tsv(p: &Projection, labels: &[String], poi_ids: &[String]) -> String {
    let mut out = String::from("x\ty\tlabel\tpoi_id\n");
    for ((c, l), id) in p.coords.iter().zip(labels).zip(poi_ids) {
        let _ = writeln!(out, "{}\t{}\t{l}\t{id}", c[0], c[1]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_metrics() {
        assert_eq!(hr_at_k(&[4, 2, 9], 4, 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[4, 2, 9], 4, 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&[1, 2, 3], 3, 5).unwrap(), 0.5);
        assert_eq!(hr_at_k(&[1, 2, 3], 3, 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&[1, 2], 7, 10).unwrap(), 0.0);
    }

    #[test]
    fn duplicate_ranking_is_fatal() {
        assert!(hr_at_k(&[1, 2, 1], 2, 3).is_err());
    }

    #[test]
    fn cold_start_threshold_is_five_distinct_visitors() {
        let v = |user, poi| Visit { user, poi, ts: 0 };
        let mut train = vec![Vec::new(); 6];
        for u in 0..4 {
            train[u].push(v(u, 0));
            train[u].push(v(u, 0));
        }
        for u in 0..5 {
            train[u].push(v(u, 1));
        }
        let m = subset_masks(&[(5, 0), (5, 1), (0, 0)], &train);
        assert_eq!(m.cold_start, vec![true, false, true]);
        assert_eq!(m.unseen, vec![true, true, false]);
    }

    #[test]
    fn empty_subset_has_no_metrics() {
        assert_eq!(aggregate(&[], &DEFAULT_KS).unwrap(), None);
        let r = SubsetReport { count: 0, metrics: None };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"count":0}"#);
    }

    #[test]
    fn too_few_points_cannot_be_projected() {
        assert!(project_ids(&[vec![1.0], vec![2.0]], &[0, 1]).is_err());
    }

    #[test]
    fn separated_clusters_have_positive_silhouette() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        let s = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.9);
        let p = project_ids(&pts, &[0, 0, 1, 1]).unwrap();
        assert_eq!(p.coords.len(), 4);
        let d01 = (p.coords[0][0] - p.coords[1][0]).abs();
        let d02 = (p.coords[0][0] - p.coords[2][0]).abs();
        assert!(d01 < d02);
    }
}
