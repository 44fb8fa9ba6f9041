//! The pair discriminator and the four unsupervised objectives. Every loss
//! here is a quantity to be maximized.

use serde::{Deserialize, Serialize};

use crate::encoder::fan_in_bound;
use crate::error::{Error, Result};
use crate::numcore::{Real, Reduce, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Bce,
    Mine,
    Nce,
    Triplet,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Mine => "mine",
            LossKind::Nce => "nce",
            LossKind::Triplet => "triplet",
        }
    }

    pub fn uses_discriminator(self) -> bool {
        self != LossKind::Triplet
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "mine" => Ok(LossKind::Mine),
            "nce" => Ok(LossKind::Nce),
            "triplet" => Ok(LossKind::Triplet),
            other => Err(Error::Config {
                key: "train.loss".into(),
                msg: format!("unknown loss {other:?}"),
            }),
        }
    }
}

/// Discriminator output: unbounded logit, or squashed into (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Raw,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub loss: LossKind,
    pub triplet_margin: f64,
    /// Use the NCE ratio exactly as printed, `log(g_pos / sum g)` over
    /// sigmoid scores, instead of the log-softmax form.
    pub nce_literal: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            loss: LossKind::Bce,
            triplet_margin: 0.5,
            nce_literal: false,
        }
    }
}

/// One-hidden-layer ReLU network scoring a concatenated embedding pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<F: Real> {
    dim: usize,
    hidden: usize,
    pub params: ParamStore<F>,
}

impl<F: Real> Discriminator<F> {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Invalid("discriminator widths must be positive".into()));
        }
        let mut r = rng::stream(seed, "init/discriminator", 0);
        let mut p = ParamStore::default();
        p.insert(
            "disc.hidden.w",
            uniform(&[hidden, 2 * dim], fan_in_bound(2 * dim, 0.0), &mut r),
        );
        p.insert("disc.hidden.b", Tensor::zeros(&[hidden]));
        p.insert("disc.out.w", uniform(&[1, hidden], 1.0 / (hidden as f64).sqrt(), &mut r));
        p.insert("disc.out.b", Tensor::zeros(&[1]));
        Ok(Discriminator { dim, hidden, params: p })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }
}

pub(crate) fn uniform<F: Real>(shape: &[usize], bound: f64, r: &mut rng::Rng) -> Tensor<F> {
    use rand_distr::{Distribution, Uniform};
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(dist.sample(r))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn check_pair<F: Real>(tape: &Tape<F>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::dim(op, format!("embeddings {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Scores row pairs `(za[i], zb[i])`; returns `[n]`.
pub fn discriminate<F: Real>(tape: &mut Tape<F>, vars: &Bound, za: Var, zb: Var, head: Head) -> Result<Var> {
    check_pair(tape, "discriminate", za, zb)?;
    if tape.shape(za)[0] != tape.shape(zb)[0] {
        return Err(Error::dim(
            "discriminate",
            format!("{} vs {} rows", tape.shape(za)[0], tape.shape(zb)[0]),
        ));
    }
    let n = tape.shape(za)[0];
    let x = tape.concat_cols(za, zb)?;
    let h = tape.linear(x, vars.var("disc.hidden.w"), vars.var("disc.hidden.b"))?;
    let h = tape.relu(h);
    let s = tape.linear(h, vars.var("disc.out.w"), vars.var("disc.out.b"))?;
    let s = tape.reshape(s, &[n])?;
    Ok(match head {
        Head::Raw => s,
        Head::Sigmoid => tape.sigmoid(s),
    })
}

/// Raw scores for every pair `(za[i], zb[j])`, shape `[n, m]`. The hidden
/// pre-activation splits as `W_a za + W_b zb + b`, so each side passes
/// through its half of the first layer once.
pub fn pairwise_scores<F: Real>(tape: &mut Tape<F>, vars: &Bound, za: Var, zb: Var) -> Result<Var> {
    check_pair(tape, "pairwise_scores", za, zb)?;
    let (n, m, dim) = (tape.shape(za)[0], tape.shape(zb)[0], tape.shape(za)[1]);
    let w = vars.var("disc.hidden.w");
    if tape.shape(w)[1] != 2 * dim {
        return Err(Error::dim(
            "pairwise_scores",
            format!("discriminator expects width {}, got {dim}", tape.shape(w)[1] / 2),
        ));
    }
    let hidden = tape.shape(w)[0];
    let wa = tape.slice_cols(w, 0, dim)?;
    let wb = tape.slice_cols(w, dim, 2 * dim)?;
    let ha = tape.linear(za, wa, vars.var("disc.hidden.b"))?;
    let zero = tape.constant(Tensor::zeros(&[hidden]));
    let hb = tape.linear(zb, wb, zero)?;
    let h = tape.pairwise_add(ha, hb)?;
    let h = tape.relu(h);
    let h = tape.reshape(h, &[n * m, hidden])?;
    let s = tape.linear(h, vars.var("disc.out.w"), vars.var("disc.out.b"))?;
    tape.reshape(s, &[n, m])
}

fn non_empty<F: Real>(tape: &Tape<F>, v: Var, what: &'static str) -> Result<()> {
    if tape.value(v).is_empty() {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

/// Binary cross-entropy from logits:
/// `mean(log sigmoid(pos)) + mean(log(1 - sigmoid(neg)))`, at most 0.
pub fn bce_loss<F: Real>(tape: &mut Tape<F>, pos_logits: Var, neg_logits: Var) -> Result<Var> {
    non_empty(tape, pos_logits, "bce positives")?;
    non_empty(tape, neg_logits, "bce negatives")?;
    let np = tape.neg(pos_logits);
    let lp = tape.softplus(np);
    let lp = tape.mean(lp)?;
    let ln = tape.softplus(neg_logits);
    let ln = tape.mean(ln)?;
    let s = tape.add(lp, ln)?;
    Ok(tape.neg(s))
}

/// Donsker-Varadhan bound `mean(pos) - log mean(exp(neg))`.
pub fn mine_loss<F: Real>(tape: &mut Tape<F>, pos: Var, neg: Var) -> Result<Var> {
    non_empty(tape, pos, "mine positives")?;
    non_empty(tape, neg, "mine negatives")?;
    let n = tape.value(neg).len() as f64;
    let mp = tape.mean(pos)?;
    let lse = tape.reduce(neg, Reduce::LogSumExp, None)?;
    let lme = tape.add_scalar(lse, -n.ln());
    tape.sub(mp, lme)
}

/// Mean log-softmax of the positive column: `scores: [n, K]`, positive of
/// row `i` at column `positive[i]`. Lies in `[-log K, 0]`.
pub fn nce_loss<F: Real>(tape: &mut Tape<F>, scores: Var, positive: &[usize]) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 {
        return Err(Error::Rank {
            op: "nce_loss",
            expected: 2,
            shape: s,
        });
    }
    if s[1] < 2 {
        return Err(Error::InsufficientCandidates(s[1]));
    }
    if s[0] == 0 {
        return Err(Error::EmptyBatch("nce rows"));
    }
    let ls = tape.log_softmax(scores)?;
    let p = tape.pick(ls, positive)?;
    tape.mean(p)
}

/// The ratio form `mean log(g_pos / sum_k g_k)` over positive scores
/// `[n, K]` (use sigmoid outputs).
pub fn nce_literal_loss<F: Real>(tape: &mut Tape<F>, scores: Var, positive: &[usize]) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::InsufficientCandidates(s.get(1).copied().unwrap_or(0)));
    }
    let p = tape.pick(scores, positive)?;
    let lp = tape.log(p)?;
    let tot = tape.reduce(scores, Reduce::Sum, Some(1))?;
    let lt = tape.log(tot)?;
    let d = tape.sub(lp, lt)?;
    tape.mean(d)
}

/// Negated cosine-similarity hinge `-mean(max(0, margin - s(a,p) + s(a,n)))`.
pub fn triplet_loss<F: Real>(tape: &mut Tape<F>, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var> {
    if margin < 0.0 {
        return Err(Error::Domain { op: "triplet_loss", value: margin });
    }
    check_pair(tape, "triplet_loss", anchor, positive)?;
    check_pair(tape, "triplet_loss", anchor, negative)?;
    non_empty(tape, anchor, "triplet anchors")?;
    let a = tape.l2_normalize_rows(anchor)?;
    let p = tape.l2_normalize_rows(positive)?;
    let n = tape.l2_normalize_rows(negative)?;
    let ap = tape.mul(a, p)?;
    let sp = tape.reduce(ap, Reduce::Sum, Some(1))?;
    let an = tape.mul(a, n)?;
    let sn = tape.reduce(an, Reduce::Sum, Some(1))?;
    let d = tape.sub(sn, sp)?;
    let d = tape.add_scalar(d, margin);
    let h = tape.relu(d);
    let m = tape.mean(h)?;
    Ok(tape.neg(m))
}

/// The unsupervised objective on embeddings of anchor, positive and random
/// chunks (each `[n, M]`). `disc` is ignored by the triplet loss.
///
/// NCE candidates for anchor `i` are its positive plus the pairings with
/// every random chunk of the batch, so `K = n + 1`.
pub fn pair_objective<F: Real>(
    tape: &mut Tape<F>,
    cfg: &ObjectiveConfig,
    disc: Option<&Bound>,
    z1: Var,
    z2: Var,
    zr: Var,
) -> Result<Var> {
    let need = || Error::Invalid(format!("{} loss needs a discriminator", cfg.loss.name()));
    match cfg.loss {
        LossKind::Triplet => triplet_loss(tape, z1, z2, zr, cfg.triplet_margin),
        LossKind::Bce => {
            let d = disc.ok_or_else(need)?;
            let pos = discriminate(tape, d, z1, z2, Head::Raw)?;
            let neg = discriminate(tape, d, z1, zr, Head::Raw)?;
            bce_loss(tape, pos, neg)
        }
        LossKind::Mine => {
            let d = disc.ok_or_else(need)?;
            let pos = discriminate(tape, d, z1, z2, Head::Raw)?;
            let neg = discriminate(tape, d, z1, zr, Head::Raw)?;
            mine_loss(tape, pos, neg)
        }
        LossKind::Nce => {
            let d = disc.ok_or_else(need)?;
            let n = tape.shape(z1)[0];
            let pos = discriminate(tape, d, z1, z2, Head::Raw)?;
            let pos = tape.reshape(pos, &[n, 1])?;
            let neg = pairwise_scores(tape, d, z1, zr)?;
            let scores = tape.concat_cols(pos, neg)?;
            let idx = vec![0; n];
            if cfg.nce_literal {
                let s = tape.sigmoid(scores);
                nce_literal_loss(tape, s, &idx)
            } else {
                nce_loss(tape, scores, &idx)
            }
        }
    }
}

/// Fraction of correctly classified pairs at logit 0 (probability 0.5).
pub fn pair_accuracy(pos_logits: &[f64], neg_logits: &[f64]) -> f64 {
    let total = pos_logits.len() + neg_logits.len();
    if total == 0 {
        return 0.0;
    }
    let hit = pos_logits.iter().filter(|&&s| s > 0.0).count() + neg_logits.iter().filter(|&&s| s < 0.0).count();
    hit as f64 / total as f64
}
