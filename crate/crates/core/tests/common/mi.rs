//! Critic training on correlated Gaussian pairs, where the mutual
//! information is known in closed form: `-0.5 ln(1 - rho^2)`.

use lim::numcore::{Tape, Tensor, Var};
use lim::params::Bound;
use lim::objectives::{pair_objective, Discriminator, LossKind, ObjectiveConfig};
use lim::trainer::RmsProp;
use lim::Result;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::rng;

pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

pub struct CriticRun {
    pub loss: LossKind,
    pub rho: f64,
    pub hidden: usize,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
}

/// Joint pairs `(x, y)` plus an independent `y'` for the product of marginals.
fn draw(r: &mut ChaCha8Rng, n: usize, rho: f64) -> [Tensor<f64>; 3] {
    let mut normal = || -> f64 { StandardNormal.sample(r) };
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y_ind = Vec::with_capacity(n);
    let s = (1.0 - rho * rho).sqrt();
    for _ in 0..n {
        let a = normal();
        x.push(a);
        y.push(rho * a + s * normal());
        let b = normal();
        y_ind.push(rho * b + s * normal());
    }
    let col = |v: Vec<f64>| Tensor::new(vec![n, 1], v).expect("column");
    [col(x), col(y), col(y_ind)]
}

fn objective(
    disc: &Discriminator<f64>,
    cfg: &ObjectiveConfig,
    batch: [Tensor<f64>; 3],
    tape: &mut Tape<f64>,
    train: bool,
) -> Result<(Var, Bound)> {
    let vars = disc.bind(tape, train);
    let [x, y, y_ind] = batch;
    let z1 = tape.constant(x);
    let z2 = tape.constant(y);
    let zr = tape.constant(y_ind);
    let l = pair_objective(tape, cfg, Some(&vars), z1, z2, zr)?;
    Ok((l, vars))
}

impl CriticRun {
    /// Trains a fresh critic and returns its MI estimate averaged over
    /// `eval_batches` fresh batches: the bound itself for MINE, `L + ln K`
    /// for NCE.
    pub fn estimate(&self, eval_batches: usize) -> Result<f64> {
        let mut disc = Discriminator::<f64>::init(1, self.hidden, self.seed)?;
        let cfg = ObjectiveConfig {
            loss: self.loss,
            ..Default::default()
        };
        let mut opt = RmsProp::default();
        let mut r = rng(self.seed);
        for step in 0..self.steps {
            let mut tape = Tape::new();
            let (l, vars) = objective(&disc, &cfg, draw(&mut r, self.batch, self.rho), &mut tape, true)?;
            tape.backward(l)?;
            opt.step(&mut disc.params, &vars.grads(&tape), 1.0, step)?;
        }
        let offset = match self.loss {
            LossKind::Nce => ((self.batch + 1) as f64).ln(),
            _ => 0.0,
        };
        let mut total = 0.0;
        for _ in 0..eval_batches {
            let mut tape = Tape::inference();
            let (l, _) = objective(&disc, &cfg, draw(&mut r, self.batch, self.rho), &mut tape, false)?;
            total += tape.value(l).item().expect("scalar");
        }
        Ok(total / eval_batches as f64 + offset)
    }
}
