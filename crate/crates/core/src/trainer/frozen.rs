//! Head training on a frozen encoder. Embeddings of every chunk on a fixed
//! hop grid are computed once in eval mode; each step then draws rows from
//! this table instead of re-encoding waveforms.

use rand::Rng as _;

use super::{log_likelihood, ModelBundle, StepValues, TrainConfig};
use crate::dsp_io::Utterance;
use crate::error::{Error, Result};
use crate::numcore::{BatchNormState, Real, Tape, Tensor};
use crate::params::Grads;
use crate::sampler::batch_rng;

const ENCODE_BATCH: usize = 64;

pub(crate) struct FeatureTable<F> {
    dim: usize,
    rows: Vec<F>,
    targets: Vec<usize>,
}

impl<F: Real> FeatureTable<F> {
    /// Encodes chunks starting every `hop` samples of each utterance.
    pub fn build(bundle: &ModelBundle<F>, utts: &[Utterance], targets: &[usize], hop: usize) -> Result<Self> {
        let chunk_len = bundle.encoder.config().chunk_len;
        let dim = bundle.encoder.config().embedding_dim();
        let mut chunks: Vec<&[f32]> = Vec::new();
        let mut labels = Vec::new();
        for (u, &t) in utts.iter().zip(targets) {
            let len = u.samples.len();
            if len < chunk_len {
                return Err(Error::TooShort {
                    id: u.id.clone(),
                    len,
                    chunk: chunk_len,
                });
            }
            for o in (0..=len - chunk_len).step_by(hop.max(1)) {
                chunks.push(&u.samples[o..o + chunk_len]);
                labels.push(t);
            }
        }
        let mut rows = Vec::with_capacity(chunks.len() * dim);
        for group in chunks.chunks(ENCODE_BATCH) {
            rows.extend_from_slice(bundle.encoder.embed(group)?.data());
        }
        Ok(FeatureTable {
            dim,
            rows,
            targets: labels,
        })
    }

    /// Per-feature mean and variance over every row.
    pub fn stats(&self) -> BatchNormState<F> {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0f64; self.dim];
        let mut var = vec![0.0f64; self.dim];
        for row in self.rows.chunks(self.dim) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x.f64() / n);
        }
        for row in self.rows.chunks(self.dim) {
            for j in 0..self.dim {
                var[j] += (row[j].f64() - mean[j]).powi(2) / n;
            }
        }
        BatchNormState {
            mean: mean.into_iter().map(F::of).collect(),
            var: var.into_iter().map(F::of).collect(),
        }
    }

    fn len(&self) -> usize {
        self.targets.len()
    }

    /// Head gradients on `n_samp` rows drawn with the step's own stream.
    pub fn step_grads(&self, bundle: &ModelBundle<F>, cfg: &TrainConfig, step: u64) -> Result<(StepValues, Grads<F>)> {
        let head = bundle
            .head
            .as_ref()
            .ok_or_else(|| Error::Invalid("frozen-encoder training needs a speaker head".into()))?;
        let mut r = batch_rng(cfg.seed, "train/labeled", step);
        let mut x = Vec::with_capacity(cfg.n_samp * self.dim);
        let mut y = Vec::with_capacity(cfg.n_samp);
        for _ in 0..cfg.n_samp {
            let i = r.random_range(0..self.len());
            x.extend_from_slice(&self.rows[i * self.dim..(i + 1) * self.dim]);
            y.push(self.targets[i]);
        }
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape, true);
        let z = tape.constant(Tensor::new(vec![cfg.n_samp, self.dim], x)?);
        let out = head.forward(&mut tape, &vars, z)?;
        let ll = log_likelihood(&mut tape, out.logits, &y)?;
        tape.backward(ll)?;
        let value = tape.value(ll).item().map(|v| v.f64()).unwrap_or(f64::NAN);
        Ok((
            StepValues {
                total: value,
                supervised: Some(value),
                unsupervised: None,
            },
            vars.grads(&tape),
        ))
    }
}
