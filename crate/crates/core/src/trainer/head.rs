use crate::encoder::fan_in_bound;
use crate::error::{Error, Result};
use crate::numcore::{BatchNormState, Real, Tape, Tensor, Var};
use crate::objectives::uniform;
use crate::params::{Bound, ParamStore};
use crate::rng;

/// Speaker-id classifier on top of the encoder: an optional ReLU hidden
/// layer followed by a softmax output over the training speakers.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerHead<F: Real> {
    /// Speaker label of each output unit.
    pub labels: Vec<String>,
    pub hidden: usize,
    pub params: ParamStore<F>,
    /// Fixed standardization of the head input, set when the head is fit
    /// on a frozen encoder.
    pub input_stats: Option<BatchNormState<F>>,
}

const INPUT_EPS: f64 = 1e-8;

/// Head activations for a batch.
pub struct HeadOutput {
    /// ReLU hidden layer, absent for a linear head.
    pub hidden: Option<Var>,
    pub logits: Var,
}

impl<F: Real> SpeakerHead<F> {
    pub fn init(dim: usize, hidden: usize, labels: Vec<String>, seed: u64) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::LabelMap("speaker head needs at least one label".into()));
        }
        let mut r = rng::stream(seed, "init/head", 0);
        let mut p = ParamStore::default();
        let mut width = dim;
        if hidden > 0 {
            p.insert("head.hidden.w", uniform(&[hidden, dim], fan_in_bound(dim, 0.0), &mut r));
            p.insert("head.hidden.b", Tensor::zeros(&[hidden]));
            width = hidden;
        }
        let bound = 1.0 / (width as f64).sqrt();
        p.insert("head.out.w", uniform(&[labels.len(), width], bound, &mut r));
        p.insert("head.out.b", Tensor::zeros(&[labels.len()]));
        Ok(SpeakerHead {
            labels,
            hidden,
            params: p,
            input_stats: None,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn class_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::LabelMap(format!("speaker {label} unknown to the head")))
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape<F>, vars: &Bound, z: Var) -> Result<HeadOutput> {
        let z = match &self.input_stats {
            Some(st) => {
                let n = st.mean.len();
                let gain = tape.constant(Tensor::filled(&[n], F::one()));
                let offset = tape.constant(Tensor::zeros(&[n]));
                tape.batch_norm_eval(z, gain, offset, st, INPUT_EPS)?
            }
            None => z,
        };
        let (h, hidden) = if self.hidden > 0 {
            let h = tape.linear(z, vars.var("head.hidden.w"), vars.var("head.hidden.b"))?;
            let h = tape.relu(h);
            (h, Some(h))
        } else {
            (z, None)
        };
        let logits = tape.linear(h, vars.var("head.out.w"), vars.var("head.out.b"))?;
        Ok(HeadOutput { hidden, logits })
    }
}

/// Mean log-probability of the target classes (negated cross-entropy).
pub fn log_likelihood<F: Real>(tape: &mut Tape<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let p = tape.pick(ls, targets)?;
    tape.mean(p)
}
