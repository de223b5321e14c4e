//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fsrl::autodiff::{Tape, Tensor, Var};
use fsrl::SampleMatrix;

pub fn normal_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> SampleMatrix {
    let data = (0..n * d).map(|_| StandardNormal.sample(&mut *rng)).collect();
    SampleMatrix::new(n, d, data).unwrap()
}

/// Worst violation ratio of analytic vs central-difference gradients,
/// `|g - fd| / (1e-8 + 1e-5 |fd|)` (the usual `rtol = 1e-5, atol = 1e-8`
/// closeness test). Values at most 1 pass.
pub fn fd_compare<E>(inputs: &[Tensor], analytic: &[Tensor], eval: E) -> f64
where
    E: Fn(&[Tensor]) -> f64,
{
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let x = t.data()[i];
            let h = 1e-6 * x.abs().max(1.0);
            let shifted = |delta: f64| {
                let mut ts = inputs.to_vec();
                let mut d = ts[k].data().to_vec();
                d[i] = x + delta;
                ts[k] = Tensor::new(t.shape().to_vec(), d).unwrap();
                eval(&ts)
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = analytic[k].data()[i];
            let ratio = (a - fd).abs() / (1e-8 + 1e-5 * fd.abs());
            worst = worst.max(ratio);
        }
    }
    worst
}

pub fn fd_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &leaves);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v)).collect();
    fd_compare(inputs, &analytic, |ts| {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
        let l = build(&mut tape, &leaves);
        tape.value(l).item()
    })
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect(),
    )
    .unwrap()
}

/// Contracts a tensor output with fixed random weights to get a scalar.
pub fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&shape, &mut rng));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}
