//! Gradient checks of every tape primitive.

use lim::numcore::{BatchNormState, Real, Reduce, Tape, Tensor, Var};
use lim::Result;
use rand::Rng;

use super::{away_from_zero, check, tensor, tolerance, uniform};

pub const SEEDS: u64 = 20;

type Op<F> = Box<dyn Fn(&mut Tape<F>, &[Var]) -> Result<Var>>;

/// Inputs for one primitive, drawn from a seed so that every case stays a
/// safe distance from kinks and ties.
struct Case<F: Real> {
    name: &'static str,
    inputs: Vec<Tensor<F>>,
    op: Op<F>,
}

/// Distinct, well-separated values so max-pool never switches winners.
fn spread(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    v.shuffle(r);
    v.iter().map(|x| x + r.random_range(-0.01..0.01)).collect()
}

fn cases<F: Real>(seed: u64) -> Vec<Case<F>> {
    let mut r = super::rng(seed);
    let mut v = |n: usize| uniform(&mut r, n, -1.0, 1.0);
    let a = v(6);
    let b = v(6);
    let bias3 = v(3);
    let w34 = v(12);
    let x24 = v(8);
    let conv_x = v(2 * 2 * 9);
    let conv_w = v(3 * 2 * 3);
    let ln_x = v(3 * 5);
    let gain5 = v(5);
    let off5 = v(5);
    let bn_x = v(4 * 3);
    let gain3 = v(3);
    let off3 = v(3);
    let rows = v(4 * 3);
    let cols = v(2 * 3);
    let mut r = super::rng(seed ^ 0xabc);
    let kinked = away_from_zero(&mut r, 6, 0.05);
    let positive = uniform(&mut r, 6, 0.2, 2.0);
    let pool_x = spread(&mut r, 2 * 2 * 6);
    let norm_rows: Vec<f64> = away_from_zero(&mut r, 6, 0.3);

    let mut out: Vec<Case<F>> = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor<F>>, op: Op<F>| out.push(Case { name, inputs, op });

    add("add", vec![tensor(&[2, 3], &a), tensor(&[2, 3], &b)], Box::new(|t, v| t.add(v[0], v[1])));
    add("sub", vec![tensor(&[2, 3], &a), tensor(&[2, 3], &b)], Box::new(|t, v| t.sub(v[0], v[1])));
    add("mul", vec![tensor(&[2, 3], &a), tensor(&[2, 3], &b)], Box::new(|t, v| t.mul(v[0], v[1])));
    add("scale", vec![tensor(&[6], &a)], Box::new(|t, v| Ok(t.scale(v[0], -1.7))));
    add("add_scalar", vec![tensor(&[6], &a)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))));
    add("relu", vec![tensor(&[6], &kinked)], Box::new(|t, v| Ok(t.relu(v[0]))));
    add("leaky_relu", vec![tensor(&[6], &kinked)], Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2))));
    add("abs", vec![tensor(&[6], &kinked)], Box::new(|t, v| Ok(t.abs(v[0]))));
    add("sigmoid", vec![tensor(&[6], &a)], Box::new(|t, v| Ok(t.sigmoid(v[0]))));
    add("exp", vec![tensor(&[6], &a)], Box::new(|t, v| Ok(t.exp(v[0]))));
    add("log", vec![tensor(&[6], &positive)], Box::new(|t, v| t.log(v[0])));
    add("softplus", vec![tensor(&[6], &a)], Box::new(|t, v| Ok(t.softplus(v[0]))));
    add("neg", vec![tensor(&[6], &a)], Box::new(|t, v| Ok(t.neg(v[0]))));
    add(
        "linear",
        vec![tensor(&[2, 4], &x24), tensor(&[3, 4], &w34), tensor(&[3], &bias3)],
        Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    );
    add(
        "conv1d",
        vec![tensor(&[2, 2, 9], &conv_x), tensor(&[3, 2, 3], &conv_w)],
        Box::new(|t, v| t.conv1d(v[0], v[1], 1)),
    );
    add(
        "conv1d_stride2",
        vec![tensor(&[2, 2, 9], &conv_x), tensor(&[3, 2, 3], &conv_w)],
        Box::new(|t, v| t.conv1d(v[0], v[1], 2)),
    );
    add(
        "layer_norm",
        vec![tensor(&[3, 5], &ln_x), tensor(&[5], &gain5), tensor(&[5], &off5)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
    );
    add(
        "batch_norm_train",
        vec![tensor(&[4, 3], &bn_x), tensor(&[3], &gain3), tensor(&[3], &off3)],
        Box::new(|t, v| {
            let mut st = BatchNormState::new(3);
            t.batch_norm_train(v[0], v[1], v[2], &mut st, 0.1, 1e-5)
        }),
    );
    add(
        "batch_norm_eval",
        vec![tensor(&[4, 3], &bn_x), tensor(&[3], &gain3), tensor(&[3], &off3)],
        Box::new(|t, v| {
            let st = BatchNormState {
                mean: vec![F::of(0.1), F::of(-0.2), F::of(0.0)],
                var: vec![F::of(0.5), F::of(1.5), F::of(1.0)],
            };
            t.batch_norm_eval(v[0], v[1], v[2], &st, 1e-5)
        }),
    );
    add("max_pool1d", vec![tensor(&[2, 2, 6], &pool_x)], Box::new(|t, v| t.max_pool1d(v[0], 3)));
    add(
        "reshape",
        vec![tensor(&[2, 3], &a)],
        Box::new(|t, v| {
            let s = t.reshape(v[0], &[3, 2])?;
            let w = t.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])?);
            t.mul(s, w)
        }),
    );
    add(
        "concat_cols",
        vec![tensor(&[2, 3], &a), tensor(&[2, 3], &b)],
        Box::new(|t, v| t.concat_cols(v[0], v[1])),
    );
    add("select_rows", vec![tensor(&[4, 3], &rows)], Box::new(|t, v| t.select_rows(v[0], &[2, 0, 2, 3])));
    add("slice_cols", vec![tensor(&[4, 3], &rows)], Box::new(|t, v| t.slice_cols(v[0], 1, 3)));
    add(
        "pairwise_add",
        vec![tensor(&[4, 3], &rows), tensor(&[2, 3], &cols)],
        Box::new(|t, v| t.pairwise_add(v[0], v[1])),
    );
    add("sum", vec![tensor(&[2, 3], &a)], Box::new(|t, v| Ok(t.sum(v[0]))));
    add("mean", vec![tensor(&[2, 3], &a)], Box::new(|t, v| t.mean(v[0])));
    add("reduce_axis0", vec![tensor(&[4, 3], &rows)], Box::new(|t, v| t.reduce(v[0], Reduce::Mean, Some(0))));
    add("logsumexp_axis1", vec![tensor(&[4, 3], &rows)], Box::new(|t, v| t.reduce(v[0], Reduce::LogSumExp, Some(1))));
    add("log_softmax", vec![tensor(&[4, 3], &rows)], Box::new(|t, v| t.log_softmax(v[0])));
    add("pick", vec![tensor(&[4, 3], &rows)], Box::new(|t, v| t.pick(v[0], &[2, 0, 1, 1])));
    add("l2_normalize_rows", vec![tensor(&[2, 3], &norm_rows)], Box::new(|t, v| t.l2_normalize_rows(v[0])));
    out
}

/// Names of the primitives whose gradient check fails, over 20 seeds.
pub fn failures<F: Real>() -> Vec<String> {
    let (h, threshold) = tolerance::<F>();
    let mut worst = Vec::new();
    for seed in 0..SEEDS {
        for c in cases::<F>(seed) {
            let g = check(&c.inputs, &*c.op, seed, h);
            if g.rel_err >= threshold {
                worst.push(format!("{} seed {seed}: {:.2e}", c.name, g.rel_err));
            }
        }
    }
    worst
}
