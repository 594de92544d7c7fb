mod support {
    pub mod op_cases;
}

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use struid_numerics::{Adam, AdamConfig, ParamStore, Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in support::op_cases::run_all(10, 1e-4, 11) {
        assert!(err < 1e-4, "{name}: relative error {err:.3e}");
    }
}

#[test]
fn adam_solves_random_convex_quadratic() {
    // f(x) = 0.5 x^T A x - b^T x with A = M^T M + I; minimiser solves A x = b.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4;
    let m = Tensor::uniform(&[n, n], 1.0, &mut rng);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| m.data()[k * n + i] * m.data()[k * n + j]).sum::<f64>()
                + if i == j { 1.0 } else { 0.0 };
        }
    }
    let a = Tensor::matrix(n, n, a);
    let b = Tensor::matrix(n, 1, Tensor::uniform(&[n], 1.0, &mut rng).into_data());

    let mut store = ParamStore::new();
    store.insert("x", Tensor::zeros(&[n, 1]));
    let mut adam = Adam::new(AdamConfig::default());
    let grad_norm = |store: &ParamStore| {
        let x = store.expect("x");
        (0..n)
            .map(|i| {
                let ax: f64 = (0..n).map(|j| a.data()[i * n + j] * x.data()[j]).sum();
                (ax - b.data()[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    for step in 0..200 {
        // Exponentially decayed step size lets Adam settle instead of orbiting
        // the optimum at a fixed radius.
        adam.config.lr = 0.1 * 0.95f64.powi(step);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = bound.var(0);
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let ax = tape.matmul(av, x);
        let xax = tape.mul(x, ax);
        let quad = tape.sum(xax);
        let half = tape.scale(quad, 0.5);
        let bx = tape.mul(bv, x);
        let lin = tape.sum(bx);
        let loss = tape.sub(half, lin);
        let mut g = tape.backward(loss);
        let grads = bound.collect(&mut g);
        drop(tape);
        adam.step(&mut store, &grads);
    }
    let gn = grad_norm(&store);
    assert!(gn < 1e-3, "gradient norm {gn:.3e}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs: Vec<Tensor> = (0..2).map(|_| Tensor::uniform(&[6, 6], 1.0, &mut rng)).collect();
        let mut tape = Tape::new();
        let a = tape.var(inputs[0].clone());
        let b = tape.var(inputs[1].clone());
        let p = tape.matmul(a, b);
        let s = tape.softmax(p);
        let l = tape.cross_entropy(s, &[0, 1, 2, 3, 4, 5]);
        let g = tape.backward(l);
        (g.get(a).unwrap(), g.get(b).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, data));
        let s = tape.softmax(x);
        for r in 0..3 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(
        data in proptest::collection::vec(-20.0f64..20.0, 8),
        t0 in 0usize..4,
        t1 in 0usize..4,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, data));
        let ce = tape.cross_entropy(x, &[t0, t1]);
        prop_assert!(tape.value(ce).item() >= 0.0);
    }
}
