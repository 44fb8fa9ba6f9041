//! Whole-encoder gradient check on the reduced configuration.

use lim::encoder::{chunk_batch, Encoder, EncoderConfig};
use lim::numcore::{Real, Tape, Tensor, Var};
use lim::params::Bound;
use rand::Rng;

use super::{analytic, numeric, rel_err, tolerance, uniform};

pub const SEEDS: u64 = 20;
const BATCH: usize = 4;

pub fn random_chunks(seed: u64, cfg: &EncoderConfig, n: usize) -> Vec<Vec<f32>> {
    let mut r = super::rng(seed);
    (0..n)
        .map(|_| uniform(&mut r, cfg.chunk_len, -0.8, 0.8).into_iter().map(|x| x as f32).collect())
        .collect()
}

/// The mel grid puts the top filter's upper edge exactly on Nyquist, where
/// the cutoff clip has a kink. Shrinking the cutoffs a little keeps every
/// filter strictly inside the band for the finite-difference probe.
fn off_boundary<F: Real>(mut enc: Encoder<F>, seed: u64) -> Encoder<F> {
    let mut r = super::rng(seed ^ 0x51c);
    for name in ["encoder.sinc.low", "encoder.sinc.band"] {
        for v in enc.params.get_mut(name).unwrap().data_mut() {
            *v = F::of(v.f64() * r.random_range(0.9..0.97));
        }
    }
    enc
}

struct Probe<F: Real> {
    enc: Encoder<F>,
    names: Vec<String>,
    inputs: Vec<Tensor<F>>,
}

fn probe<F: Real>(seed: u64) -> Probe<F> {
    let cfg = EncoderConfig::reduced();
    let enc = off_boundary(Encoder::<F>::init(cfg.clone(), seed).unwrap(), seed);
    let chunks = random_chunks(seed + 100, &cfg, BATCH);
    let refs: Vec<&[f32]> = chunks.iter().map(|c| c.as_slice()).collect();
    let names = enc.params.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs = vec![chunk_batch(&refs, cfg.chunk_len).unwrap()];
    inputs.extend(enc.params.iter().map(|(_, t)| t.clone()));
    Probe { enc, names, inputs }
}

impl<F: Real> Probe<F> {
    fn forward(&self, train_mode: bool) -> impl Fn(&mut Tape<F>, &[Var]) -> lim::Result<Var> + '_ {
        move |tape: &mut Tape<F>, vars: &[Var]| {
            let bound: Bound = self.names.iter().cloned().zip(vars[1..].iter().copied()).collect();
            if train_mode {
                let mut e = self.enc.clone();
                e.forward_train(tape, &bound, vars[0])
            } else {
                self.enc.forward_eval(tape, &bound, vars[0])
            }
        }
    }
}

/// Whole-encoder check of a scalar projection with respect to the input and
/// every parameter. The oracle is always evaluated in f64 at the same point,
/// so the 32-bit run measures the error of the 32-bit tape gradient.
pub fn failures<F: Real>(train_mode: bool) -> Vec<(u64, f64)> {
    let threshold = tolerance::<F>().1;
    let (h, _) = tolerance::<f64>();
    let mut failures = Vec::new();
    for seed in 0..SEEDS {
        let p = probe::<F>(seed);
        let (grad, proj) = analytic(&p.inputs, &p.forward(train_mode), seed);
        let wide = Probe {
            enc: p.enc.cast::<f64>(),
            names: p.names.clone(),
            inputs: p.inputs.iter().map(|t| t.cast()).collect(),
        };
        let fd = numeric(&wide.inputs, &wide.forward(train_mode), &proj, h);
        let err = rel_err(&grad, &fd);
        if err >= threshold {
            failures.push((seed, err));
        }
    }
    failures
}
