//! Test-only oracles shared by integration tests.
#![allow(dead_code)]

use editor_core::tensor::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite differences of a scalar function of several tensors.
pub fn numeric_grads(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Worst relative discrepancy, with relative error measured against
/// `max(|analytic|, |numeric|, floor)`.
pub fn worst_rel_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Builds the graph with `build` on fresh inputs, returns analytic and
/// numeric gradients for every input.
pub fn grad_check(
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss, &store).unwrap();
    let analytic = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .input(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    let f = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let l = build(&mut tape, &vars);
        tape.value(l).item()
    };
    let numeric = numeric_grads(&f, inputs, 1e-5);
    (analytic, numeric)
}
