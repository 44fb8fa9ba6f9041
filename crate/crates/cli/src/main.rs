mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lim::dsp_io::{
    load_corpus, load_manifest, reverberate, synth_corpus, write_manifest, write_wav, Framing, Manifest, Split, SynthConfig,
    Utterance,
};
use lim::eval::{compute_cer, eer_of_scores, enroll_speakers, extract_dvector, format_report, score_trials, write_scores, DvectorLayer};
use lim::numcore::{Real, Tensor};
use lim::rng;
use lim::sampler::{make_trials, read_trials, Trial};
use lim::trainer::checkpoint::{Archive, Values, CHECKPOINT_MAGIC, VECTORS_MAGIC};
use lim::trainer::{speaker_labels, train, ModelBundle, RunOptions};

use config::{ConfigError, Precision, RunConfig};

/// Speaker label marking audio without a known speaker.
const UNLABELED: &str = "-";

#[derive(Parser)]
#[command(name = "lim", version, about = "Speaker embeddings by local mutual-information maximization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-speaker corpus and its manifest.
    Synth {
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 8)]
        utts: usize,
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Utterances per speaker in the enroll split.
        #[arg(long, default_value_t = 1)]
        enroll: usize,
        /// Utterances per speaker in the test split.
        #[arg(long, default_value_t = 1)]
        test: usize,
        /// Reverberation time of per-utterance synthetic rooms; 0 keeps the
        /// corpus dry.
        #[arg(long, default_value_t = 0.0)]
        t60: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train according to a config file.
    Train {
        config: PathBuf,
        /// Override one key, e.g. `--set train.lr=0.002`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Speaker identification error or verification EER of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Config whose [eval] section sets framing and trial counts.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Split scored by the id task.
        #[arg(long, default_value = "test")]
        split: Split,
        /// Trial list to score instead of drawing one.
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Score file; defaults to `scores.tsv` next to the checkpoint.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, value_enum)]
        layer: Option<Layer>,
    },
    /// Write one d-vector per manifest utterance.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum)]
        layer: Option<Layer>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Id,
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layer {
    HeadHidden,
    Encoder,
}

impl From<Layer> for DvectorLayer {
    fn from(l: Layer) -> Self {
        match l {
            Layer::HeadHidden => DvectorLayer::HeadHidden,
            Layer::Encoder => DvectorLayer::Encoder,
        }
    }
}

/// Exit code 2 for usage and config problems, 1 for everything else.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<lim::Error> for Failure {
    fn from(e: lim::Error) -> Self {
        match e {
            lim::Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => Failure::Usage(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            speakers,
            utts,
            seconds,
            seed,
            enroll,
            test,
            t60,
            out,
        } => cmd_synth(
            SynthConfig {
                n_speakers: speakers,
                utts_per_speaker: utts,
                utt_seconds: seconds,
                seed,
                enroll_per_speaker: enroll,
                test_per_speaker: test,
            },
            t60,
            &out,
        ),
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Eval {
            checkpoint,
            manifest,
            task,
            config,
            overrides,
            split,
            trials,
            scores,
            layer,
        } => cmd_eval(EvalArgs {
            checkpoint,
            manifest,
            task,
            eval: eval_config(config.as_deref(), &overrides),
            split,
            trials,
            scores,
            layer: layer.map(Into::into),
        }),
        Command::Extract {
            checkpoint,
            manifest,
            out,
            config,
            overrides,
            layer,
        } => cmd_extract(
            &checkpoint,
            &manifest,
            &out,
            eval_config(config.as_deref(), &overrides),
            layer.map(Into::into),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn eval_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => RunConfig::load(p, overrides),
        None => RunConfig::parse("", overrides),
    }
}

fn split_counts(m: &Manifest) -> String {
    [Split::Train, Split::Enroll, Split::Test]
        .iter()
        .map(|&s| format!("{s}={}", m.split(s).count()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_synth(cfg: SynthConfig, t60: f64, out: &Path) -> Outcome {
    if cfg.utts_per_speaker < cfg.enroll_per_speaker + cfg.test_per_speaker + 1 {
        return Err(Failure::Usage(format!(
            "cannot satisfy a train/enroll/test split with {} utterances per speaker ({} enroll + {} test + at least 1 train)",
            cfg.utts_per_speaker, cfg.enroll_per_speaker, cfg.test_per_speaker
        )));
    }
    if !(t60 >= 0.0) {
        return Err(Failure::Usage(format!("--t60 must be non-negative, got {t60}")));
    }
    let manifest = synth_corpus(&cfg, out)?;
    if t60 > 0.0 {
        let dry = load_corpus(&manifest, &[Split::Train, Split::Enroll, Split::Test])?;
        let wet = reverberate(&dry, t60, (1.5 * t60).min(1.0), cfg.seed)?;
        for (u, e) in wet.iter().zip(&manifest.entries) {
            write_wav(&e.path, &u.samples, u.sample_rate)?;
        }
        write_manifest(out.join("manifest.tsv"), &manifest)?;
    }
    print!(
        "{}",
        format_report(&[
            ("manifest", out.join("manifest.tsv").display().to_string()),
            ("entries", manifest.entries.len().to_string()),
            ("splits", split_counts(&manifest)),
        ])
    );
    Ok(())
}

fn cmd_train(path: &Path, overrides: &[String]) -> Outcome {
    let cfg = RunConfig::load(path, overrides)?;
    let manifest = load_manifest(&cfg.data.manifest).with_context(|| format!("loading manifest {}", cfg.data.manifest.display()))?;
    let utts = load_corpus(&manifest, &[Split::Train])?;
    if utts.is_empty() {
        return Err(Failure::Runtime(anyhow!("manifest has no train entries")));
    }
    if cfg.train.mode.uses_labels() && utts.iter().any(|u| u.speaker == UNLABELED) {
        return Err(Failure::Usage(format!(
            "config error at `train.mode`: {} needs speaker labels on every train entry",
            cfg.train.mode.name()
        )));
    }
    std::fs::create_dir_all(&cfg.run.out_dir).with_context(|| format!("creating {}", cfg.run.out_dir.display()))?;
    let resolved = cfg.run.out_dir.join("config.toml");
    std::fs::write(&resolved, cfg.to_toml()).with_context(|| format!("writing {}", resolved.display()))?;
    match cfg.run.precision {
        Precision::F32 => run_training::<f32>(&cfg, &utts),
        Precision::F64 => run_training::<f64>(&cfg, &utts),
    }
}

fn run_training<F: Real>(cfg: &RunConfig, utts: &[Utterance]) -> Outcome {
    let model = cfg.model();
    let labels = if cfg.train.mode.uses_labels() { speaker_labels(utts) } else { vec![] };
    let ckpt = cfg.run.out_dir.join("checkpoint.lim");
    let mut bundle = if cfg.run.resume && ckpt.is_file() {
        ModelBundle::<F>::load(&ckpt)?
    } else if let (lim::trainer::TrainMode::SemiPretrain, Some(init)) = (cfg.train.mode, &cfg.run.init_from) {
        let pre = ModelBundle::<F>::load(init).with_context(|| format!("loading {}", init.display()))?;
        ModelBundle::from_pretrained(&pre, &model, &cfg.train, labels)?
    } else {
        ModelBundle::<F>::new(&model, &cfg.train, labels)?
    };
    let opts = RunOptions {
        out_dir: Some(cfg.run.out_dir.clone()),
        stop_after_epoch: None,
    };
    let report = train(&mut bundle, &cfg.train, utts, &opts)?;
    let first_epoch = bundle.epoch - report.epoch_means.len() as u64;
    for (i, m) in report.epoch_means.iter().enumerate() {
        println!("epoch={} objective={} mean={m:.6}", first_epoch + i as u64, report.objective);
    }
    print!(
        "{}",
        format_report(&[
            ("mode", cfg.train.mode.name().to_string()),
            ("objective", report.objective.clone()),
            ("steps", bundle.step.to_string()),
            ("parameters", bundle.param_count().to_string()),
            ("checkpoint", cfg.run.out_dir.join("checkpoint.lim").display().to_string()),
        ])
    );
    Ok(())
}

fn usage_if_missing(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

/// Precision the checkpoint was trained in, read off its encoder tensors.
fn checkpoint_precision(path: &Path) -> Result<Precision, Failure> {
    let a = Archive::load(path, CHECKPOINT_MAGIC)?;
    let rec = a
        .with_prefix("encoder.")
        .next()
        .ok_or_else(|| anyhow!("{} holds no encoder tensors", path.display()))?;
    match rec.values {
        Values::F64(_) => Ok(Precision::F64),
        _ => Ok(Precision::F32),
    }
}

struct EvalArgs {
    checkpoint: PathBuf,
    manifest: PathBuf,
    task: Task,
    eval: Result<RunConfig, ConfigError>,
    split: Split,
    trials: Option<PathBuf>,
    scores: Option<PathBuf>,
    layer: Option<DvectorLayer>,
}

fn cmd_eval(args: EvalArgs) -> Outcome {
    usage_if_missing(&args.checkpoint, "checkpoint")?;
    usage_if_missing(&args.manifest, "manifest")?;
    let cfg = args.eval.as_ref().map_err(|e| Failure::Usage(e.to_string()))?.clone();
    match checkpoint_precision(&args.checkpoint)? {
        Precision::F32 => eval_with::<f32>(&args, &cfg),
        Precision::F64 => eval_with::<f64>(&args, &cfg),
    }
}

/// The requested layer, or the head's hidden layer when the model has one
/// and the encoder output otherwise.
fn pick_layer<F: Real>(bundle: &ModelBundle<F>, requested: Option<DvectorLayer>) -> DvectorLayer {
    requested.unwrap_or(match &bundle.head {
        Some(h) if h.hidden > 0 => DvectorLayer::HeadHidden,
        _ => DvectorLayer::Encoder,
    })
}

fn layer_name(l: DvectorLayer) -> &'static str {
    match l {
        DvectorLayer::HeadHidden => "head_hidden",
        DvectorLayer::Encoder => "encoder",
    }
}

fn eval_with<F: Real>(args: &EvalArgs, cfg: &RunConfig) -> Outcome {
    let bundle = ModelBundle::<F>::load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let framing = framing_for(cfg, &bundle)?;
    match args.task {
        Task::Id => {
            let head = bundle
                .head
                .as_ref()
                .ok_or_else(|| Failure::Usage("the id task needs a checkpoint with a speaker head".into()))?;
            let utts = load_corpus(&manifest, &[args.split])?;
            let cer = compute_cer(&utts, &bundle.encoder, head, &framing)?;
            print!(
                "{}",
                format_report(&[
                    ("task", "id".into()),
                    ("split", args.split.to_string()),
                    ("utterances", cer.total.to_string()),
                    ("errors", cer.errors.to_string()),
                    ("cer_pct", format!("{:.4}", cer.cer_pct)),
                ])
            );
        }
        Task::Verify => {
            let layer = pick_layer(&bundle, args.layer.or(cfg.eval.dvector_layer));
            let by_id: BTreeMap<String, Utterance> = load_corpus(&manifest, &[Split::Enroll, Split::Test])?
                .into_iter()
                .map(|u| (u.id.clone(), u))
                .collect();
            let (enrollment, trials) = match &args.trials {
                Some(p) => (enroll_from_manifest(&manifest, cfg.eval.enroll_per_speaker), read_trials(p)?),
                None => {
                    let mut r = rng::stream(cfg.eval.seed, "eval/trials", 0);
                    let list = make_trials(
                        &manifest,
                        cfg.eval.enroll_per_speaker,
                        cfg.eval.genuine_trials,
                        cfg.eval.impostor_trials,
                        &mut r,
                    )?;
                    (list.enrollment, list.trials)
                }
            };
            let lookup = |id: &str| by_id.get(id).ok_or_else(|| anyhow!("utterance {id} is not in the enroll or test split"));
            let mut groups: BTreeMap<String, Vec<&Utterance>> = BTreeMap::new();
            for (spk, ids) in &enrollment {
                for id in ids {
                    groups.entry(spk.clone()).or_default().push(lookup(id)?);
                }
            }
            let models = enroll_speakers(&groups, &bundle.encoder, bundle.head.as_ref(), layer, &framing)?;
            let mut tests = BTreeMap::new();
            for t in &trials {
                if !tests.contains_key(&t.test_utterance) {
                    let v = extract_dvector(lookup(&t.test_utterance)?, &bundle.encoder, bundle.head.as_ref(), layer, &framing)?;
                    tests.insert(t.test_utterance.clone(), v);
                }
            }
            let scores = score_trials(&trials, &models, &tests)?;
            let eer = eer_of_scores(&scores)?;
            let out = args.scores.clone().unwrap_or_else(|| {
                args.checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("scores.tsv")
            });
            write_scores(&out, &scores)?;
            let genuine = trials.iter().filter(|t: &&Trial| t.genuine).count();
            print!(
                "{}",
                format_report(&[
                    ("task", "verify".into()),
                    ("layer", layer_name(layer).into()),
                    ("genuine", genuine.to_string()),
                    ("impostor", (trials.len() - genuine).to_string()),
                    ("eer_pct", format!("{:.4}", eer.eer_pct)),
                    ("threshold", format!("{:.6}", eer.threshold)),
                    ("scores", out.display().to_string()),
                ])
            );
        }
    }
    Ok(())
}

/// Enrollment lists when trials come from a file: the first
/// `per_speaker` enroll utterances of each speaker in manifest order.
fn enroll_from_manifest(manifest: &Manifest, per_speaker: usize) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in manifest.split(Split::Enroll) {
        let ids = out.entry(e.speaker.clone()).or_default();
        if ids.len() < per_speaker {
            ids.push(e.utterance_id.clone());
        }
    }
    out
}

fn framing_for<F: Real>(cfg: &RunConfig, bundle: &ModelBundle<F>) -> Result<Framing, Failure> {
    let framing = cfg.eval.framing();
    let want = bundle.encoder.config().chunk_len;
    if framing.chunk_len() != want {
        return Err(Failure::Usage(format!(
            "config error at `eval.chunk_ms`: {} ms gives {} samples, the checkpoint expects {want}",
            framing.chunk_ms,
            framing.chunk_len()
        )));
    }
    Ok(framing)
}

fn cmd_extract(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    cfg: Result<RunConfig, ConfigError>,
    layer: Option<DvectorLayer>,
) -> Outcome {
    usage_if_missing(checkpoint, "checkpoint")?;
    usage_if_missing(manifest, "manifest")?;
    let cfg = cfg?;
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => extract_with::<f32>(checkpoint, manifest, out, &cfg, layer),
        Precision::F64 => extract_with::<f64>(checkpoint, manifest, out, &cfg, layer),
    }
}

fn extract_with<F: Real>(checkpoint: &Path, manifest: &Path, out: &Path, cfg: &RunConfig, layer: Option<DvectorLayer>) -> Outcome {
    let bundle = ModelBundle::<F>::load(checkpoint)?;
    let manifest = load_manifest(manifest)?;
    let framing = framing_for(cfg, &bundle)?;
    let layer = pick_layer(&bundle, layer.or(cfg.eval.dvector_layer));
    let mut archive = Archive {
        digest: bundle.encoder.config().digest(),
        rng: Vec::new(),
        records: Vec::new(),
    };
    archive.push_text("meta.layer", layer_name(layer));
    let mut dim = 0;
    for u in load_corpus(&manifest, &[Split::Train, Split::Enroll, Split::Test])? {
        let v = extract_dvector(&u, &bundle.encoder, bundle.head.as_ref(), layer, &framing)?;
        dim = v.len();
        archive.push_tensor(u.id.clone(), &Tensor::<F>::from_f64(&[v.len()], &v)?);
    }
    archive.save(out, VECTORS_MAGIC)?;
    print!(
        "{}",
        format_report(&[
            ("vectors", (archive.records.len() - 1).to_string()),
            ("dim", dim.to_string()),
            ("layer", layer_name(layer).into()),
            ("out", out.display().to_string()),
        ])
    );
    Ok(())
}
