//! Reverse-mode gradients against central finite differences on small
//! composite graphs.

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use tidpo_core::autodiff::{Tape, Tensor, Var};

const H: f64 = 1e-5;

fn random(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Three dense layers with sigmoid, layernorm and log-softmax, reduced to
/// the log-probability of fixed targets.
fn mlp(tape: &mut Tape, x: &Tensor, params: &[Tensor]) -> (Var, Vec<Var>) {
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let x = tape.constant(x.clone());
    let h = tape.matmul(x, leaves[0]).unwrap();
    let h = tape.add(h, leaves[1]).unwrap();
    let h = tape.sigmoid(h).unwrap();
    let h = tape.matmul(h, leaves[2]).unwrap();
    let h = tape.add(h, leaves[3]).unwrap();
    let h = tape.layernorm_rows(h).unwrap();
    let h = tape.matmul(h, leaves[4]).unwrap();
    let h = tape.add(h, leaves[5]).unwrap();
    let lp = tape.log_softmax_rows(h).unwrap();
    let picked = tape.pick(lp, &[(0, 1), (1, 0), (2, 3), (3, 2)]).unwrap();
    (tape.sum(picked).unwrap(), leaves)
}

fn mlp_value(x: &Tensor, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let (out, _) = mlp(&mut tape, x, params);
    tape.value(out).item()
}

fn check_mlp(seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let x = random(&mut rng, 4, 5, 1.0);
    let params = vec![
        random(&mut rng, 5, 8, 0.8),
        random(&mut rng, 1, 8, 0.2),
        random(&mut rng, 8, 6, 0.8),
        random(&mut rng, 1, 6, 0.2),
        random(&mut rng, 6, 4, 0.8),
        random(&mut rng, 1, 4, 0.2),
    ];
    let mut tape = Tape::new();
    let (out, leaves) = mlp(&mut tape, &x, &params);
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        for i in 0..params[k].len() {
            let mut up = params.clone();
            up[k].data_mut()[i] += H;
            let mut down = params.clone();
            down[k].data_mut()[i] -= H;
            let fd = (mlp_value(&x, &up) - mlp_value(&x, &down)) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}

#[test]
fn three_layer_mlp_matches_central_differences() {
    for seed in 0..5 {
        let err = check_mlp(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exp_log_mul_chain(vals in prop::collection::vec(0.2f64..3.0, 6)) {
        let t = Tensor::new(2, 3, vals.clone()).unwrap();
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(t.clone());
            let l = tape.log(a).unwrap();
            let e = tape.exp(l).unwrap();
            let m = tape.mul(e, a).unwrap();
            let s = tape.sum(m).unwrap();
            (tape.value(s).item(), tape.backward(s).unwrap().get(a))
        };
        let (_, g) = f(&t);
        // d/dx sum(exp(log x) * x) = 2x
        for (gi, xi) in g.data().iter().zip(&vals) {
            prop_assert!((gi - 2.0 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_gradient_matches_differences(vals in prop::collection::vec(-2.0f64..2.0, 8), w in prop::collection::vec(-1.0f64..1.0, 8)) {
        let wt = Tensor::new(2, 4, w).unwrap();
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let a = tape.leaf(t.clone());
            let c = tape.constant(wt.clone());
            let s = tape.softmax_rows(a).unwrap();
            let m = tape.mul(s, c).unwrap();
            let out = tape.sum(m).unwrap();
            (tape.value(out).item(), tape.backward(out).unwrap().get(a))
        };
        let t = Tensor::new(2, 4, vals).unwrap();
        let (_, g) = f(&t);
        for i in 0..8 {
            let mut up = t.clone();
            up.data_mut()[i] += H;
            let mut down = t.clone();
            down.data_mut()[i] -= H;
            let fd = (f(&up).0 - f(&down).0) / (2.0 * H);
            prop_assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
