//! Optimization loops for the unsupervised, supervised and semi-supervised
//! modes, plus checkpointing.

pub mod checkpoint;
mod frozen;
mod head;
mod optim;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dsp_io::Utterance;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numcore::{BatchNormState, Real, Tape, Tensor};
use crate::objectives::{pair_objective, Discriminator, LossKind, ObjectiveConfig};
use crate::params::{Grads, ParamStore};
use crate::rng;
use crate::sampler::{batch_rng, sample_pair_batch, PairBatch, SamplerConfig};
use checkpoint::{Archive, CHECKPOINT_MAGIC};
use frozen::FeatureTable;

pub use head::{log_likelihood, HeadOutput, SpeakerHead};
pub use optim::RmsProp;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Unsupervised,
    Supervised,
    SemiPretrain,
    SemiJoint,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Unsupervised => "unsupervised",
            TrainMode::Supervised => "supervised",
            TrainMode::SemiPretrain => "semi_pretrain",
            TrainMode::SemiJoint => "semi_joint",
        }
    }

    pub fn uses_labels(self) -> bool {
        self != TrainMode::Unsupervised
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub loss: LossKind,
    pub triplet_margin: f64,
    pub nce_literal: bool,
    /// Pairs per unsupervised batch; also the labeled batch size.
    pub n_samp: usize,
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub seed: u64,
    /// Weight of the unsupervised term in semi_joint.
    pub lambda: f64,
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Multiplier on the encoder learning rate in the supervised modes;
    /// 0 freezes the encoder (eval-mode batch norm, no updates).
    pub encoder_lr_scale: f64,
    pub min_separation: usize,
    pub strict_speaker: bool,
    /// Background batch producers; 1 samples inline.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Unsupervised,
            loss: LossKind::Bce,
            triplet_margin: 0.5,
            nce_literal: false,
            n_samp: 128,
            epochs: 10,
            steps_per_epoch: 100,
            seed: 0,
            lambda: 1.0,
            lr: 1e-3,
            alpha: 0.95,
            eps: 1e-7,
            encoder_lr_scale: 1.0,
            min_separation: 0,
            strict_speaker: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            loss: self.loss,
            triplet_margin: self.triplet_margin,
            nce_literal: self.nce_literal,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            min_separation: self.min_separation,
            strict_speaker: self.strict_speaker,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                msg: msg.into(),
            })
        };
        if self.n_samp < 2 {
            return bad("n_samp", "must be at least 2");
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be positive");
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.alpha) || !(self.eps > 0.0) {
            return bad("lr", "need lr >= 0, 0 <= alpha < 1, eps > 0");
        }
        if !(self.lambda >= 0.0) || !(self.encoder_lr_scale >= 0.0) {
            return bad("lambda", "lambda and encoder_lr_scale must be non-negative");
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1");
        }
        Ok(())
    }

    /// Whether the encoder stays fixed in this run.
    pub fn encoder_frozen(&self) -> bool {
        self.mode != TrainMode::Unsupervised && self.encoder_lr_scale == 0.0
    }

    fn uses_pairs(&self) -> bool {
        match self.mode {
            TrainMode::Unsupervised => true,
            TrainMode::SemiJoint => self.lambda != 0.0,
            _ => false,
        }
    }

    /// Name written to the step log.
    pub fn objective_name(&self) -> String {
        match self.mode {
            TrainMode::Unsupervised => self.loss.name().to_string(),
            TrainMode::Supervised | TrainMode::SemiPretrain => "xent".to_string(),
            TrainMode::SemiJoint => format!("xent+{}*{}", self.lambda, self.loss.name()),
        }
    }
}

/// Widths of the networks attached to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub disc_hidden: usize,
    /// Hidden ReLU units of the speaker head; 0 gives a linear head.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            disc_hidden: 256,
            head_hidden: 256,
        }
    }
}

/// Everything a training run owns: networks, optimizer state and counters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<F: Real> {
    pub encoder: Encoder<F>,
    pub disc: Option<Discriminator<F>>,
    pub head: Option<SpeakerHead<F>>,
    pub optim: RmsProp<F>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub seed: u64,
    /// Free-form text stored with the checkpoint (the resolved run config).
    pub note: String,
}

/// Sorted distinct speaker labels.
pub fn speaker_labels(utts: &[Utterance]) -> Vec<String> {
    let mut l: Vec<String> = utts.iter().map(|u| u.speaker.clone()).collect();
    l.sort();
    l.dedup();
    l
}

/// Keeps at most `max_seconds` of audio per speaker, taking utterances in
/// order and cutting the last one short. Pieces shorter than `min_len` are
/// dropped. `max_seconds <= 0` keeps everything.
pub fn limit_speaker_audio(utts: &[Utterance], max_seconds: f64, min_len: usize) -> Vec<Utterance> {
    if max_seconds <= 0.0 {
        return utts.to_vec();
    }
    let mut used: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for u in utts {
        let cap = (max_seconds * u.sample_rate as f64).round() as usize;
        let taken = used.entry(&u.speaker).or_default();
        let n = u.samples.len().min(cap.saturating_sub(*taken));
        if n >= min_len.max(1) {
            *taken += n;
            let mut v = u.clone();
            v.samples.truncate(n);
            out.push(v);
        }
    }
    out
}

impl<F: Real> ModelBundle<F> {
    /// Fresh networks for `cfg.mode`. `labels` are the speaker classes of
    /// the head (ignored in unsupervised mode).
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, labels: Vec<String>) -> Result<Self> {
        let encoder = Encoder::init(model.encoder.clone(), cfg.seed)?;
        let dim = model.encoder.embedding_dim();
        let disc = if cfg.uses_pairs() && cfg.loss.uses_discriminator() {
            Some(Discriminator::init(dim, model.disc_hidden, cfg.seed)?)
        } else {
            None
        };
        let head = if cfg.mode.uses_labels() {
            Some(SpeakerHead::init(dim, model.head_hidden, labels, cfg.seed)?)
        } else {
            None
        };
        Ok(ModelBundle {
            encoder,
            disc,
            head,
            optim: RmsProp::new(cfg.lr, cfg.alpha, cfg.eps),
            epoch: 0,
            step: 0,
            seed: cfg.seed,
            note: String::new(),
        })
    }

    /// Starts a fine-tuning run from a pretrained encoder: the encoder and
    /// its batch-norm statistics are kept, the discriminator is dropped and
    /// a fresh head and optimizer are created.
    pub fn from_pretrained(pretrained: &ModelBundle<F>, model: &ModelConfig, cfg: &TrainConfig, labels: Vec<String>) -> Result<Self> {
        if pretrained.encoder.config().digest() != model.encoder.digest() {
            return Err(Error::Incompatible(
                "pretrained encoder architecture differs from the configured one".into(),
            ));
        }
        let mut fresh = ModelBundle::new(model, cfg, labels)?;
        fresh.encoder = pretrained.encoder.clone();
        if cfg.mode == TrainMode::SemiPretrain {
            fresh.disc = None;
        }
        Ok(fresh)
    }

    fn stores(&self) -> Vec<&ParamStore<F>> {
        let mut s = vec![&self.encoder.params];
        s.extend(self.disc.as_ref().map(|d| &d.params));
        s.extend(self.head.as_ref().map(|h| &h.params));
        s
    }

    pub fn param_count(&self) -> usize {
        self.stores().iter().map(|s| s.count()).sum()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive {
            digest: self.encoder.config().digest(),
            rng: rng::save_state(&batch_rng(self.seed, "train/pairs", self.step)),
            records: Vec::new(),
        };
        let enc_text = toml::to_string(self.encoder.config()).expect("encoder config serializes");
        a.push_text("meta.encoder_config", &enc_text);
        a.push_u64("meta.epoch", &[self.epoch]);
        a.push_u64("meta.step", &[self.step]);
        a.push_u64("meta.seed", &[self.seed]);
        a.push_text("meta.note", &self.note);
        if let Some(h) = &self.head {
            a.push_text("meta.head_labels", &h.labels.join("\n"));
            a.push_u64("meta.head_hidden", &[h.hidden as u64]);
            if let Some(st) = &h.input_stats {
                a.push_tensor("state.head_in.mean", &Tensor::vector(st.mean.clone()));
                a.push_tensor("state.head_in.var", &Tensor::vector(st.var.clone()));
            }
        }
        for store in self.stores() {
            for (name, t) in store.iter() {
                a.push_tensor(name.clone(), t);
            }
        }
        for (i, st) in self.encoder.bn.iter().enumerate() {
            a.push_tensor(format!("state.bn{}.mean", i + 1), &Tensor::vector(st.mean.clone()));
            a.push_tensor(format!("state.bn{}.var", i + 1), &Tensor::vector(st.var.clone()));
        }
        a.push_tensor(
            "optim.hyper",
            &Tensor::<f64>::vector(vec![self.optim.lr, self.optim.alpha, self.optim.eps]),
        );
        for (name, v) in &self.optim.v {
            a.push_tensor(format!("optim.v.{name}"), v);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let enc_cfg: EncoderConfig = toml::from_str(&a.text("meta.encoder_config")?)
            .map_err(|e| Error::Format(format!("encoder config: {e}")))?;
        if enc_cfg.digest() != a.digest {
            return Err(Error::Incompatible("architecture digest does not match stored encoder config".into()));
        }
        let seed = a.u64s("meta.seed")?[0];
        let mut encoder = Encoder::<F>::init(enc_cfg, seed)?;
        fill(&mut encoder.params, a)?;
        for (i, st) in encoder.bn.iter_mut().enumerate() {
            let mean: Tensor<F> = a.tensor(&format!("state.bn{}.mean", i + 1))?;
            let var: Tensor<F> = a.tensor(&format!("state.bn{}.var", i + 1))?;
            if mean.len() != st.mean.len() || var.len() != st.var.len() {
                return Err(Error::Incompatible(format!("batch-norm state {} has the wrong size", i + 1)));
            }
            *st = BatchNormState {
                mean: mean.into_data(),
                var: var.into_data(),
            };
        }
        let dim = encoder.config().embedding_dim();
        let disc = if a.has("disc.hidden.w") {
            let hidden = a.get("disc.hidden.w")?.shape[0];
            let mut d = Discriminator::init(dim, hidden, seed)?;
            fill(&mut d.params, a)?;
            Some(d)
        } else {
            None
        };
        let head = if a.has("meta.head_labels") {
            let labels = a.text("meta.head_labels")?.lines().map(str::to_string).collect();
            let hidden = a.u64s("meta.head_hidden")?[0] as usize;
            let mut h = SpeakerHead::init(dim, hidden, labels, seed)?;
            fill(&mut h.params, a)?;
            if a.has("state.head_in.mean") {
                let mean: Tensor<F> = a.tensor("state.head_in.mean")?;
                let var: Tensor<F> = a.tensor("state.head_in.var")?;
                if mean.len() != dim || var.len() != dim {
                    return Err(Error::Incompatible("head input statistics have the wrong size".into()));
                }
                h.input_stats = Some(BatchNormState {
                    mean: mean.into_data(),
                    var: var.into_data(),
                });
            }
            Some(h)
        } else {
            None
        };
        let hyper: Tensor<f64> = a.tensor("optim.hyper")?;
        let hp = hyper.data();
        if hp.len() != 3 {
            return Err(Error::Format("optim.hyper must hold 3 values".into()));
        }
        let mut optim = RmsProp::new(hp[0], hp[1], hp[2]);
        for r in a.with_prefix("optim.v.") {
            optim
                .v
                .insert(r.name["optim.v.".len()..].to_string(), checkpoint::record_tensor(r)?);
        }
        Ok(ModelBundle {
            encoder,
            disc,
            head,
            optim,
            epoch: a.u64s("meta.epoch")?[0],
            step: a.u64s("meta.step")?[0],
            seed,
            note: a.text("meta.note")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path, CHECKPOINT_MAGIC)?)
    }
}

fn fill<F: Real>(store: &mut ParamStore<F>, a: &Archive) -> Result<()> {
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        store.assign(&name, a.tensor(&name)?)?;
    }
    Ok(())
}

/// Inputs of one optimizer step, fully determined by (seed, step).
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    pub step: u64,
    /// Pair batch with its samples: anchors, then positives, then randoms,
    /// each `n_samp` rows.
    pub pairs: Option<(PairBatch, Vec<f32>)>,
    /// Labeled chunks and their class indices.
    pub labeled: Option<(Vec<f32>, Vec<usize>)>,
}

/// Builds the batch for `step`. Every step owns its rng streams, so any
/// number of producers yields the same sequence.
pub fn make_step_batch(cfg: &TrainConfig, utts: &[Utterance], targets: &[usize], chunk_len: usize, step: u64) -> Result<StepBatch> {
    let pairs = if cfg.uses_pairs() {
        let mut r = batch_rng(cfg.seed, "train/pairs", step);
        let b = sample_pair_batch(utts, cfg.n_samp, chunk_len, &cfg.sampler(), &mut r)?;
        let mut x = b.gather(utts, &b.anchor);
        x.extend(b.gather(utts, &b.positive));
        x.extend(b.gather(utts, &b.random));
        Some((b, x))
    } else {
        None
    };
    let labeled = if cfg.mode.uses_labels() {
        let mut r = batch_rng(cfg.seed, "train/labeled", step);
        let mut x = Vec::with_capacity(cfg.n_samp * chunk_len);
        let mut y = Vec::with_capacity(cfg.n_samp);
        for _ in 0..cfg.n_samp {
            let u = r.random_range(0..utts.len());
            let len = utts[u].samples.len();
            if len < chunk_len {
                return Err(Error::TooShort {
                    id: utts[u].id.clone(),
                    len,
                    chunk: chunk_len,
                });
            }
            let o = r.random_range(0..=len - chunk_len);
            x.extend_from_slice(&utts[u].samples[o..o + chunk_len]);
            y.push(targets[u]);
        }
        Some((x, y))
    } else {
        None
    };
    Ok(StepBatch { step, pairs, labeled })
}

/// Objective values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepValues {
    pub total: f64,
    pub supervised: Option<f64>,
    pub unsupervised: Option<f64>,
}

/// Forward and backward pass on a fixed batch. Returns the objective values
/// and the gradients of every trainable parameter. Train-mode batch norm
/// updates the encoder's running statistics.
pub fn objective_grads<F: Real>(bundle: &mut ModelBundle<F>, cfg: &TrainConfig, batch: &StepBatch) -> Result<(StepValues, Grads<F>)> {
    let frozen = cfg.encoder_frozen();
    let chunk_len = bundle.encoder.config().chunk_len;
    let mut tape = Tape::new();
    let enc_vars = bundle.encoder.bind(&mut tape, !frozen);
    let disc_vars = bundle.disc.as_ref().map(|d| d.bind(&mut tape, true));
    let head_vars = bundle.head.as_ref().map(|h| h.bind(&mut tape, true));

    let mut encode = |tape: &mut Tape<F>, x: &[f32]| -> Result<crate::numcore::Var> {
        let rows = x.len() / chunk_len;
        let t = Tensor::new(vec![rows, chunk_len], x.iter().map(|&s| F::of(s as f64)).collect())?;
        let xv = tape.constant(t);
        if frozen {
            bundle.encoder.forward_eval(tape, &enc_vars, xv)
        } else {
            bundle.encoder.forward_train(tape, &enc_vars, xv)
        }
    };

    let mut sup = None;
    if let Some((x, y)) = &batch.labeled {
        let head = bundle.head.as_ref().ok_or_else(|| Error::Invalid("labeled batch without a speaker head".into()))?;
        let z = encode(&mut tape, x)?;
        let out = head.forward(&mut tape, head_vars.as_ref().expect("bound with head"), z)?;
        sup = Some(log_likelihood(&mut tape, out.logits, y)?);
    }
    let mut unsup = None;
    if let Some((b, x)) = &batch.pairs {
        let n = b.len();
        let z = encode(&mut tape, x)?;
        let rows: Vec<usize> = (0..n).collect();
        let z1 = tape.select_rows(z, &rows)?;
        let z2 = tape.select_rows(z, &rows.iter().map(|i| i + n).collect::<Vec<_>>())?;
        let zr = tape.select_rows(z, &rows.iter().map(|i| i + 2 * n).collect::<Vec<_>>())?;
        unsup = Some(pair_objective(&mut tape, &cfg.objective(), disc_vars.as_ref(), z1, z2, zr)?);
    }
    let total = match (sup, unsup) {
        (Some(s), Some(u)) if cfg.mode == TrainMode::SemiJoint => {
            let w = tape.scale(u, cfg.lambda);
            tape.add(s, w)?
        }
        (Some(s), None) => s,
        (None, Some(u)) => u,
        _ => return Err(Error::Invalid("batch does not match the training mode".into())),
    };
    tape.backward(total)?;
    let item = |tape: &Tape<F>, v| tape.value(v).item().map(|x: F| x.f64()).unwrap_or(f64::NAN);
    let values = StepValues {
        total: item(&tape, total),
        supervised: sup.map(|v| item(&tape, v)),
        unsupervised: unsup.map(|v| item(&tape, v)),
    };
    let mut grads = Grads::default();
    if !frozen {
        grads.merge(enc_vars.grads(&tape));
    }
    if let Some(v) = &disc_vars {
        grads.merge(v.grads(&tape));
    }
    if let Some(v) = &head_vars {
        grads.merge(v.grads(&tape));
    }
    Ok((values, grads))
}

/// Applies one RMSprop ascent step to every network of the bundle.
pub fn apply_step<F: Real>(bundle: &mut ModelBundle<F>, cfg: &TrainConfig, grads: &Grads<F>) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            step: bundle.step,
            tensor: name.to_string(),
        });
    }
    let step = bundle.step;
    let enc_scale = if cfg.mode == TrainMode::Unsupervised { 1.0 } else { cfg.encoder_lr_scale };
    if !cfg.encoder_frozen() {
        bundle.optim.step(&mut bundle.encoder.params, grads, enc_scale, step)?;
    }
    if let Some(d) = &mut bundle.disc {
        bundle.optim.step(&mut d.params, grads, 1.0, step)?;
    }
    if let Some(h) = &mut bundle.head {
        bundle.optim.step(&mut h.params, grads, 1.0, step)?;
    }
    bundle.step += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub values: StepValues,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub objective: String,
    pub trace: Vec<StepRecord>,
    /// Mean objective of each epoch run in this call.
    pub epoch_means: Vec<f64>,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.values.total).collect()
    }
}

/// Where and how much of a run to persist.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `checkpoint.lim`, `best.lim` and `train_log.tsv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (counting resumed ones).
    pub stop_after_epoch: Option<u64>,
}

/// Runs epochs `bundle.epoch .. cfg.epochs` on the training utterances.
/// Resuming a bundle loaded from a checkpoint continues the same step and
/// batch sequence as an uninterrupted run.
pub fn train<F: Real>(bundle: &mut ModelBundle<F>, cfg: &TrainConfig, utts: &[Utterance], opts: &RunOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let chunk_len = bundle.encoder.config().chunk_len;
    let targets: Vec<usize> = match &bundle.head {
        Some(h) if cfg.mode.uses_labels() => utts.iter().map(|u| h.class_of(&u.speaker)).collect::<Result<_>>()?,
        None if cfg.mode.uses_labels() => return Err(Error::Invalid(format!("{} training needs a speaker head", cfg.mode.name()))),
        _ => vec![0; utts.len()],
    };
    if utts.is_empty() {
        return Err(Error::InsufficientData("no training utterances".into()));
    }
    if cfg.uses_pairs() && cfg.loss.uses_discriminator() && bundle.disc.is_none() {
        return Err(Error::Invalid(format!("{} loss needs a discriminator", cfg.loss.name())));
    }
    let last_epoch = opts.stop_after_epoch.map_or(cfg.epochs, |e| e.min(cfg.epochs));
    let mut report = TrainReport {
        objective: cfg.objective_name(),
        ..Default::default()
    };
    if bundle.epoch >= last_epoch {
        return Ok(report);
    }
    let first_step = bundle.epoch * cfg.steps_per_epoch;
    if bundle.step != first_step {
        return Err(Error::Incompatible(format!(
            "checkpoint at step {} does not sit on an epoch boundary ({first_step})",
            bundle.step
        )));
    }
    let end_step = last_epoch * cfg.steps_per_epoch;
    // Accumulators carry over; the step hyperparameters follow the config.
    bundle.optim.lr = cfg.lr;
    bundle.optim.alpha = cfg.alpha;
    bundle.optim.eps = cfg.eps;

    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.tsv");
            let f = File::options()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };
    let mut best = f64::NEG_INFINITY;
    let mut epoch_sum = 0.0;

    let table = if cfg.encoder_frozen() {
        let t = FeatureTable::build(bundle, utts, &targets, chunk_len / 2)?;
        if let Some(h) = &mut bundle.head {
            h.input_stats = Some(t.stats());
        }
        Some(t)
    } else {
        None
    };

    let mut consume = |batch: StepBatch| -> Result<()> {
        let (values, grads) = match &table {
            Some(t) => t.step_grads(bundle, cfg, batch.step)?,
            None => objective_grads(bundle, cfg, &batch)?,
        };
        apply_step(bundle, cfg, &grads)?;
        let epoch = batch.step / cfg.steps_per_epoch;
        if let Some((p, f)) = &mut log {
            writeln!(f, "{}\t{}\t{}\t{}", batch.step, epoch, report.objective, values.total)
                .map_err(|e| Error::io(p.as_path(), e))?;
        }
        report.trace.push(StepRecord {
            step: batch.step,
            epoch,
            values,
        });
        epoch_sum += values.total;
        if bundle.step % cfg.steps_per_epoch == 0 {
            let mean = epoch_sum / cfg.steps_per_epoch as f64;
            epoch_sum = 0.0;
            report.epoch_means.push(mean);
            bundle.epoch = epoch + 1;
            if let Some(dir) = &opts.out_dir {
                bundle.save(dir.join("checkpoint.lim"))?;
                if mean > best {
                    best = mean;
                    bundle.save(dir.join("best.lim"))?;
                }
            }
        }
        Ok(())
    };

    if table.is_some() {
        for step in first_step..end_step {
            consume(StepBatch {
                step,
                pairs: None,
                labeled: None,
            })?;
        }
    } else if cfg.workers <= 1 {
        for step in first_step..end_step {
            consume(make_step_batch(cfg, utts, &targets, chunk_len, step)?)?;
        }
    } else {
        let workers = cfg.workers as u64;
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<StepBatch>>(2 * cfg.workers);
            for w in 0..workers {
                let tx = tx.clone();
                let targets = &targets;
                s.spawn(move || {
                    let mut step = first_step + w;
                    while step < end_step {
                        let b = make_step_batch(cfg, utts, targets, chunk_len, step);
                        if tx.send(b).is_err() {
                            return;
                        }
                        step += workers;
                    }
                });
            }
            drop(tx);
            let mut pending = BTreeMap::new();
            let mut next = first_step;
            for b in rx.iter() {
                let b = b?;
                pending.insert(b.step, b);
                while let Some(b) = pending.remove(&next) {
                    consume(b)?;
                    next += 1;
                }
            }
            Ok(())
        })?;
    }
    Ok(report)
}
