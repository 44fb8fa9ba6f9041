//! Small training setups for determinism and persistence checks.

use lim::dsp_io::{synth_utterances, SynthConfig, Utterance};
use lim::encoder::EncoderConfig;
use lim::objectives::LossKind;
use lim::trainer::{speaker_labels, train, ModelBundle, ModelConfig, RunOptions, TrainConfig, TrainMode};
use lim::Result;

pub fn tiny_corpus() -> Vec<Utterance> {
    let cfg = SynthConfig {
        n_speakers: 3,
        utts_per_speaker: 3,
        utt_seconds: 0.1,
        seed: 9,
        ..Default::default()
    };
    synth_utterances(&cfg).expect("synth").into_iter().map(|(u, _)| u).collect()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::reduced(),
        disc_hidden: 8,
        head_hidden: 6,
    }
}

pub fn tiny_train(mode: TrainMode, loss: LossKind) -> TrainConfig {
    TrainConfig {
        mode,
        loss,
        n_samp: 4,
        epochs: 4,
        steps_per_epoch: 3,
        seed: 17,
        ..Default::default()
    }
}

pub fn fresh(cfg: &TrainConfig, utts: &[Utterance]) -> Result<ModelBundle<f32>> {
    let labels = if cfg.mode.uses_labels() { speaker_labels(utts) } else { vec![] };
    ModelBundle::new(&tiny_model(), cfg, labels)
}

/// Every (mode, loss) combination worth exercising.
pub fn all_setups() -> Vec<TrainConfig> {
    let mut v: Vec<TrainConfig> = [LossKind::Bce, LossKind::Mine, LossKind::Nce, LossKind::Triplet]
        .into_iter()
        .map(|l| tiny_train(TrainMode::Unsupervised, l))
        .collect();
    v.push(tiny_train(TrainMode::Supervised, LossKind::Bce));
    v.push(tiny_train(TrainMode::SemiJoint, LossKind::Bce));
    v.push(tiny_train(TrainMode::SemiJoint, LossKind::Nce));
    v
}

/// Runs the whole budget twice from scratch; true when the traces and the
/// final bundles are bit-identical.
pub fn reproducible(cfg: &TrainConfig, utts: &[Utterance]) -> Result<bool> {
    let mut a = fresh(cfg, utts)?;
    let mut b = fresh(cfg, utts)?;
    let ra = train(&mut a, cfg, utts, &RunOptions::default())?;
    let rb = train(&mut b, cfg, utts, &RunOptions::default())?;
    let same_trace = ra.totals().iter().map(|x| x.to_bits()).eq(rb.totals().iter().map(|x| x.to_bits()));
    Ok(same_trace && a == b)
}

/// Stops after `split_epoch`, reloads the checkpoint from disk, finishes,
/// and compares with one uninterrupted run.
pub fn resume_matches(cfg: &TrainConfig, utts: &[Utterance], split_epoch: u64) -> Result<bool> {
    let whole_dir = tempfile::tempdir().expect("tempdir");
    let mut whole = fresh(cfg, utts)?;
    let full = train(&mut whole, cfg, utts, &RunOptions { out_dir: Some(whole_dir.path().to_path_buf()), stop_after_epoch: None })?;

    let dir = tempfile::tempdir().expect("tempdir");
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after_epoch: Some(split_epoch),
    };
    let mut first = fresh(cfg, utts)?;
    let head = train(&mut first, cfg, utts, &opts)?;
    let mut resumed = ModelBundle::<f32>::load(dir.path().join("checkpoint.lim"))?;
    let tail = train(&mut resumed, cfg, utts, &RunOptions { out_dir: Some(dir.path().to_path_buf()), stop_after_epoch: None })?;

    let joined: Vec<u64> = head.totals().iter().chain(&tail.totals()).map(|x| x.to_bits()).collect();
    let straight: Vec<u64> = full.totals().iter().map(|x| x.to_bits()).collect();
    let log_a = std::fs::read_to_string(whole_dir.path().join("train_log.tsv")).expect("log");
    let log_b = std::fs::read_to_string(dir.path().join("train_log.tsv")).expect("log");
    Ok(joined == straight && resumed == whole && log_a == log_b)
}

/// Save, load and save again; true when both files and the bundles match.
pub fn checkpoint_round_trips(bundle: &ModelBundle<f32>) -> Result<bool> {
    let dir = tempfile::tempdir().expect("tempdir");
    let (p1, p2) = (dir.path().join("a.lim"), dir.path().join("b.lim"));
    bundle.save(&p1)?;
    let back = ModelBundle::<f32>::load(&p1)?;
    back.save(&p2)?;
    let same_bytes = std::fs::read(&p1).expect("read") == std::fs::read(&p2).expect("read");
    Ok(same_bytes && &back == bundle)
}
