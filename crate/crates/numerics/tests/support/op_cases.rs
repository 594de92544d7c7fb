//! Random instances for every differentiable tape op. Non-scalar outputs are
//! reduced with a random projection so every output component contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use struid_numerics::{NeighborLists, Tape, Tensor, Var};

pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: fn(&mut Tape, &[Var]) -> Var,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Values bounded away from zero so a finite-difference step never crosses
/// the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn project(tape: &mut Tape, out: Var, r: Var) -> Var {
    let p = tape.mul(out, r);
    tape.sum(p)
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2]), rand_t(r, &[3, 2])],
            f: |t, v| {
                let o = t.matmul(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "matmul_bt",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[5, 4]), rand_t(r, &[3, 5])],
            f: |t, v| {
                let o = t.matmul_bt(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "transpose",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 3])],
            f: |t, v| {
                let o = t.transpose(v[0]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "add",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.add(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "sub",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.sub(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "mul",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.mul(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "add_row",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4]), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.add_row(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "scale",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.scale(v[0], -1.7);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![away_from_zero(r, &[3, 4]), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.relu(v[0]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| vec![Tensor::uniform(&[3, 4], 3.0, r), rand_t(r, &[3, 4])],
            f: |t, v| {
                let o = t.sigmoid(v[0]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "softmax",
            inputs: |r| vec![Tensor::uniform(&[4, 5], 2.0, r), rand_t(r, &[4, 5])],
            f: |t, v| {
                let o = t.softmax(v[0]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "causal_softmax",
            inputs: |r| vec![Tensor::uniform(&[4, 5], 2.0, r), rand_t(r, &[4, 5])],
            f: |t, v| {
                let o = t.causal_softmax(v[0]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| {
                vec![
                    Tensor::uniform(&[3, 5], 2.0, r),
                    rand_t(r, &[5]),
                    rand_t(r, &[5]),
                    rand_t(r, &[3, 5]),
                ]
            },
            f: |t, v| {
                let o = t.layer_norm(v[0], v[1], v[2]);
                project(t, o, v[3])
            },
        },
        OpCase {
            name: "embedding",
            inputs: |r| vec![rand_t(r, &[5, 3]), rand_t(r, &[4, 3])],
            f: |t, v| {
                let o = t.embedding(v[0], &[0, 2, 2, 4]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "concat_rows",
            inputs: |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[1, 3]), rand_t(r, &[3, 3])],
            f: |t, v| {
                let o = t.concat(&[v[0], v[1]], 0);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "concat_cols",
            inputs: |r| vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 1]), rand_t(r, &[3, 3])],
            f: |t, v| {
                let o = t.concat(&[v[0], v[1]], 1);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "concat_vectors",
            inputs: |r| vec![rand_t(r, &[2]), rand_t(r, &[3]), rand_t(r, &[5])],
            f: |t, v| {
                let o = t.concat(&[v[0], v[1]], 0);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "slice_rows",
            inputs: |r| vec![rand_t(r, &[4, 3]), rand_t(r, &[2, 3])],
            f: |t, v| {
                let o = t.slice(v[0], 0, 1, 2);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "slice_cols",
            inputs: |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[3, 2])],
            f: |t, v| {
                let o = t.slice(v[0], 1, 2, 2);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![rand_t(r, &[3, 4])],
            f: |t, v| t.sum(v[0]),
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![rand_t(r, &[3, 4])],
            f: |t, v| t.mean(v[0]),
        },
        OpCase {
            name: "sum_rows",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3])],
            f: |t, v| {
                let o = t.sum_rows(v[0]);
                project(t, o, v[1])
            },
        },
        OpCase {
            name: "squared_distance",
            inputs: |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4]), rand_t(r, &[3])],
            f: |t, v| {
                let o = t.squared_distance(v[0], v[1]);
                project(t, o, v[2])
            },
        },
        OpCase {
            name: "cross_entropy",
            inputs: |r| vec![Tensor::uniform(&[4, 6], 2.0, r)],
            f: |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2]),
        },
        OpCase {
            name: "binary_cross_entropy",
            inputs: |r| vec![Tensor::uniform(&[6], 3.0, r)],
            f: |t, v| {
                let p = t.sigmoid(v[0]);
                t.binary_cross_entropy(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
            },
        },
        OpCase {
            name: "neighbor_mean",
            inputs: |r| vec![rand_t(r, &[5, 3]), rand_t(r, &[4, 3])],
            f: |t, v| {
                let lists = Arc::new(NeighborLists::from_lists(&[
                    vec![1, 2],
                    vec![],
                    vec![0, 3, 4],
                    vec![4],
                ]));
                let o = t.neighbor_mean(v[0], &lists);
                project(t, o, v[1])
            },
        },
    ]
}

/// Runs `instances` random instances of every case; returns the worst
/// relative error per op.
pub fn run_all(instances: usize, eps: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|case| {
            let worst = (0..instances)
                .map(|_| {
                    let inputs = (case.inputs)(&mut rng);
                    struid_numerics::gradcheck::check_gradients(&inputs, eps, case.f).max_rel_error
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
