//! Central finite-difference checks of every differentiable op at f64.

use nar_tensor::check::{central_differences, max_relative_error};
use nar_tensor::{Segments, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks `d/dinputs sum(build(inputs) ⊙ R)` for a random projection `R`.
fn check_op(seed: u64, inputs: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<Tensor<f64>> = inputs.iter().map(|s| random(&mut rng, s)).collect();
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = build(&mut tape, &vars);
        random(&mut rng, tape.shape(out))
    };
    let eval = |vals: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = if tape.value(out).len() == 1 {
            let c = tape.constant(probe.clone());
            tape.mul(out, c).unwrap()
        } else {
            tape.mul_const(out, probe.data().to_vec()).unwrap()
        };
        let loss = tape.sum(loss);
        let value = tape.value(loss).data()[0];
        let grads = grad.then(|| {
            tape.backward(loss).unwrap();
            vars.iter()
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, analytic) = eval(&values, true);
    let analytic = analytic.unwrap();
    for (i, v) in values.iter().enumerate() {
        let numeric = central_differences(v.data(), STEP, |x| {
            let mut vals = values.clone();
            vals[i] = Tensor::new(v.shape().to_vec(), x.to_vec()).unwrap();
            eval(&vals, false).0
        });
        let err = max_relative_error(&analytic[i], &numeric, FLOOR);
        assert!(err < TOL, "input {i}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check_op(1, &[&[5, 4], &[4, 3]], |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn add_mul_scale() {
    check_op(2, &[&[3, 4], &[3, 4]], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let p = t.mul(s, v[1]).unwrap();
        t.scale(p, -1.7)
    });
}

#[test]
fn add_row_and_relu() {
    check_op(3, &[&[6, 3], &[3]], |t, v| {
        let s = t.add_row(v[0], v[1]).unwrap();
        t.relu(s)
    });
}

#[test]
fn softmax_both_axes() {
    check_op(4, &[&[3, 5]], |t, v| t.softmax(v[0], 1).unwrap());
    check_op(5, &[&[3, 5]], |t, v| t.softmax(v[0], 0).unwrap());
}

#[test]
fn layer_norm() {
    check_op(6, &[&[4, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn cross_entropy() {
    check_op(7, &[&[5, 7]], |t, v| {
        t.cross_entropy(v[0], &[0, 6, 3, 3, 1], &[1.0, 0.0, 2.0, 0.5, 1.0]).unwrap()
    });
}

#[test]
fn cross_entropy_smoothed() {
    check_op(17, &[&[4, 6]], |t, v| {
        t.cross_entropy_smoothed(v[0], &[5, 0, 2, 2], &[1.0, 1.0, 0.0, 3.0], 0.1).unwrap()
    });
}

#[test]
fn attention_multi_segment() {
    let qs = Segments::from_lengths(&[3, 2]);
    let ks = Segments::from_lengths(&[4, 3]);
    let valid = [true, true, false, true, true, true, false];
    check_op(8, &[&[5, 4], &[7, 4], &[7, 4]], |t, v| {
        t.attention(v[0], v[1], v[2], 2, &qs, &ks, Some(&valid)).unwrap()
    });
}

#[test]
fn gather_unfold_select() {
    check_op(9, &[&[5, 3]], |t, v| t.gather(v[0], &[4, 0, 4, 2]).unwrap());
    check_op(10, &[&[7, 2]], |t, v| {
        t.unfold(v[0], &Segments::from_lengths(&[4, 3]), 3, 2).unwrap().0
    });
    check_op(11, &[&[3, 2], &[3, 2]], |t, v| t.select_rows(v[0], v[1], &[false, true, false]).unwrap());
}

#[test]
fn fan_out_accumulates() {
    // x feeds both operands of the product and the attention query/key/value.
    check_op(12, &[&[3, 4]], |t, v| {
        let w = t.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
        let sq = t.matmul(v[0], w).unwrap();
        let s = t.softmax(sq, 1).unwrap();
        let a = t
            .attention(v[0], v[0], v[0], 1, &Segments::single(3), &Segments::single(3), None)
            .unwrap();
        let b = t.matmul(s, a).unwrap();
        t.add(b, v[0]).unwrap()
    });
}
