//! Central finite-difference gradient oracle shared by the integration
//! suites.

#![allow(dead_code)]

pub mod eer;
pub mod encoder_grads;
pub mod mi;
pub mod prims;
pub mod runs;

use lim::numcore::{Real, Tape, Tensor, Var};
use lim::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]` kept at least `margin` away from zero.
pub fn away_from_zero(r: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = r.random_range(margin..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn tensor<F: Real>(shape: &[usize], data: &[f64]) -> Tensor<F> {
    Tensor::from_f64(shape, data).unwrap()
}

/// Finite-difference step and pass threshold per precision.
pub fn tolerance<F: Real>() -> (f64, f64) {
    if F::BYTES == 4 {
        (1e-3, 1e-3)
    } else {
        (1e-6, 1e-6)
    }
}

/// Result of one gradient comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: f64,
}

type Forward<'a, F> = &'a dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>;

/// Random projection weights for an output of `n` elements.
pub fn projection(n: usize, seed: u64) -> Vec<f64> {
    uniform(&mut rng(seed ^ 0x5eed), n, -1.0, 1.0)
}

fn projected<F: Real>(f: Forward<'_, F>, inputs: &[Tensor<F>], proj: &[f64]) -> f64 {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.value(out).data().iter().zip(proj).map(|(v, p)| v.f64() * p).sum()
}

/// Tape gradient of `sum(f(inputs) * proj)`, flattened over all inputs, and
/// the projection used.
pub fn analytic<F: Real>(inputs: &[Tensor<F>], f: Forward<'_, F>, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let proj = projection(tape.value(out).len(), seed);
    let pt = tape.constant(Tensor::from_f64(tape.value(out).shape(), &proj).unwrap());
    let prod = tape.mul(out, pt).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();
    let mut grads = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => grads.extend(g.to_f64()),
            None => grads.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    (grads, proj)
}

/// Central differences of the projected output, one element at a time.
/// The step actually taken is measured after rounding to `F`.
pub fn numeric<F: Real>(inputs: &[Tensor<F>], f: Forward<'_, F>, proj: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = F::of(orig.f64() + h);
            let up = work[k].data()[j].f64() - orig.f64();
            let fp = projected(f, &work, proj);
            work[k].data_mut()[j] = F::of(orig.f64() - h);
            let down = orig.f64() - work[k].data()[j].f64();
            let fm = projected(f, &work, proj);
            work[k].data_mut()[j] = orig;
            out.push((fp - fm) / (up + down));
        }
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares the tape gradient of `sum(f(inputs) * proj)` with central
/// differences of step `h` at the same precision.
pub fn check<F: Real>(inputs: &[Tensor<F>], f: Forward<'_, F>, seed: u64, h: f64) -> GradCheck {
    let (analytic, proj) = analytic(inputs, f, seed);
    let numeric = numeric(inputs, f, &proj, h);
    let rel_err = rel_err(&analytic, &numeric);
    GradCheck {
        analytic,
        numeric,
        rel_err,
    }
}
