//! Closed-set speaker identification (sentence CER) and verification
//! (d-vectors, cosine scoring, EER).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp_io::{frame_chunks, Framing, Utterance};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numcore::{softmax_rows, Real, Tape, Tensor};
use crate::objectives::{discriminate, pair_accuracy, Discriminator, Head};
use crate::sampler::{batch_rng, sample_pair_batch, SamplerConfig, Trial};
use crate::trainer::SpeakerHead;

/// Layer whose activations form the d-vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvectorLayer {
    /// Hidden ReLU layer of the speaker-id head.
    #[default]
    HeadHidden,
    /// Encoder output feeding the head.
    Encoder,
}

fn chunk_slices<'a>(utt: &'a Utterance, framing: &Framing) -> Result<Vec<&'a [f32]>> {
    Ok(frame_chunks(utt, framing)?.into_iter().map(|c| c.samples).collect())
}

/// Class index of the largest mean posterior; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of per-chunk posterior rows (`classes` columns).
pub fn mean_posterior(rows: &[f64], classes: usize) -> Vec<f64> {
    let n = rows.len() / classes;
    let mut mean = vec![0.0; classes];
    for r in rows.chunks(classes) {
        for (m, &p) in mean.iter_mut().zip(r) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

/// Averages the frame posteriors of an utterance and picks the best class.
pub fn sentence_classify<F: Real>(utt: &Utterance, encoder: &Encoder<F>, head: &SpeakerHead<F>, framing: &Framing) -> Result<(usize, Vec<f64>)> {
    let chunks = chunk_slices(utt, framing)?;
    let z = encoder.embed(&chunks)?;
    let mut tape = Tape::inference();
    let vars = head.bind(&mut tape, false);
    let zv = tape.constant(z);
    let out = head.forward(&mut tape, &vars, zv)?;
    let logits = tape.value(out.logits).to_f64();
    let post = softmax_rows(&logits, head.n_classes());
    let mean = mean_posterior(&post, head.n_classes());
    Ok((argmax(&mean), mean))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CerReport {
    pub errors: usize,
    pub total: usize,
    pub cer_pct: f64,
}

pub fn cer_from_predictions(predicted: &[usize], truth: &[usize]) -> Result<CerReport> {
    if predicted.is_empty() {
        return Err(Error::EmptyEval("no sentences to classify".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::dim("cer", format!("{} predictions, {} labels", predicted.len(), truth.len())));
    }
    let errors = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(CerReport {
        errors,
        total: predicted.len(),
        cer_pct: 100.0 * errors as f64 / predicted.len() as f64,
    })
}

/// Sentence-level classification error rate over `utts`.
pub fn compute_cer<F: Real>(utts: &[Utterance], encoder: &Encoder<F>, head: &SpeakerHead<F>, framing: &Framing) -> Result<CerReport> {
    let mut pred = Vec::with_capacity(utts.len());
    let mut truth = Vec::with_capacity(utts.len());
    for u in utts {
        truth.push(head.class_of(&u.speaker)?);
        pred.push(sentence_classify(u, encoder, head, framing)?.0);
    }
    cer_from_predictions(&pred, &truth)
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Normalizes each row of `rows` (width `dim`), averages them and
/// normalizes the mean. `None` if any row or the mean has zero norm.
pub fn average_unit_rows(rows: &[f64], dim: usize) -> Option<Vec<f64>> {
    if rows.is_empty() || dim == 0 {
        return None;
    }
    let mut acc = vec![0.0; dim];
    for r in rows.chunks(dim) {
        for (a, x) in acc.iter_mut().zip(unit(r)?) {
            *a += x;
        }
    }
    unit(&acc)
}

/// Per-chunk activations of the d-vector layer, row-major with their width.
pub fn chunk_activations<F: Real>(utt: &Utterance, encoder: &Encoder<F>, head: Option<&SpeakerHead<F>>, layer: DvectorLayer, framing: &Framing) -> Result<(Vec<f64>, usize)> {
    let chunks = chunk_slices(utt, framing)?;
    let z = encoder.embed(&chunks)?;
    match layer {
        DvectorLayer::Encoder => {
            let dim = z.shape()[1];
            Ok((z.to_f64(), dim))
        }
        DvectorLayer::HeadHidden => {
            let head = head.ok_or_else(|| Error::Invalid("head-hidden d-vectors need a trained speaker head".into()))?;
            if head.hidden == 0 {
                return Err(Error::Invalid("speaker head has no hidden layer; use the encoder layer".into()));
            }
            let mut tape = Tape::inference();
            let vars = head.bind(&mut tape, false);
            let zv = tape.constant(z);
            let out = head.forward(&mut tape, &vars, zv)?;
            let h = out.hidden.expect("hidden layer present");
            Ok((tape.value(h).to_f64(), head.hidden))
        }
    }
}

/// Unit-norm d-vector of one utterance.
pub fn extract_dvector<F: Real>(utt: &Utterance, encoder: &Encoder<F>, head: Option<&SpeakerHead<F>>, layer: DvectorLayer, framing: &Framing) -> Result<Vec<f64>> {
    let (rows, dim) = chunk_activations(utt, encoder, head, layer, framing)?;
    average_unit_rows(&rows, dim).ok_or_else(|| Error::DegenerateDvector(utt.id.clone()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub speaker: String,
    pub dvector: Vec<f64>,
}

/// Speaker models from enrollment utterances: every chunk of every
/// enrollment utterance contributes one normalized vector to the average.
pub fn enroll_speakers<F: Real>(enrollment: &BTreeMap<String, Vec<&Utterance>>, encoder: &Encoder<F>, head: Option<&SpeakerHead<F>>, layer: DvectorLayer, framing: &Framing) -> Result<BTreeMap<String, SpeakerModel>> {
    let mut out = BTreeMap::new();
    for (spk, utts) in enrollment {
        let mut rows = Vec::new();
        let mut dim = 0;
        for u in utts {
            let (r, d) = chunk_activations(u, encoder, head, layer, framing)?;
            rows.extend(r);
            dim = d;
        }
        let dvector = average_unit_rows(&rows, dim).ok_or_else(|| Error::DegenerateDvector(format!("speaker {spk}")))?;
        out.insert(
            spk.clone(),
            SpeakerModel {
                speaker: spk.clone(),
                dvector,
            },
        );
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialScore {
    pub trial: Trial,
    pub score: f64,
}

/// Cosine similarity between each trial's speaker model and test d-vector.
/// A trial is accepted when its score is at least the threshold.
pub fn score_trials(trials: &[Trial], models: &BTreeMap<String, SpeakerModel>, tests: &BTreeMap<String, Vec<f64>>) -> Result<Vec<TrialScore>> {
    trials
        .iter()
        .map(|t| {
            let m = models
                .get(&t.enroll_speaker)
                .ok_or_else(|| Error::Lookup(format!("no model for speaker {}", t.enroll_speaker)))?;
            let d = tests
                .get(&t.test_utterance)
                .ok_or_else(|| Error::Lookup(format!("no d-vector for utterance {}", t.test_utterance)))?;
            if m.dvector.len() != d.len() {
                return Err(Error::dim("score_trials", format!("model width {} vs test width {}", m.dvector.len(), d.len())));
            }
            Ok(TrialScore {
                trial: t.clone(),
                score: cosine(&m.dvector, d),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer_pct: f64,
    pub threshold: f64,
}

/// Equal error rate. Thresholds sweep the sorted distinct scores plus one
/// point above them all; FAR(t) counts impostors scoring at least t, FRR(t)
/// genuines below t. The crossing of FAR and FRR is interpolated linearly
/// between the two sweep points where FAR - FRR changes sign.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<Eer> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InsufficientTrials);
    }
    if let Some(bad) = genuine.iter().chain(impostor).find(|s| !s.is_finite()) {
        return Err(Error::Domain { op: "compute_eer", value: *bad });
    }
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);

    // At the lowest threshold nothing is rejected.
    let mut below_gen = 0usize;
    let mut below_imp = 0usize;
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    loop {
        let t = if i < all.len() { all[i].0 } else { f64::INFINITY };
        let far = (ni - below_imp as f64) / ni;
        let frr = below_gen as f64 / ng;
        let d = far - frr;
        if d <= 0.0 {
            return Ok(match prev {
                Some((pt, pfar, pfrr)) if d < 0.0 => {
                    let pd = pfar - pfrr;
                    let a = pd / (pd - d);
                    let threshold = if t.is_finite() { pt + a * (t - pt) } else { pt };
                    Eer {
                        eer_pct: 100.0 * (pfar + a * (far - pfar)),
                        threshold,
                    }
                }
                _ => Eer {
                    eer_pct: 100.0 * far,
                    threshold: t,
                },
            });
        }
        prev = Some((t, far, frr));
        if i >= all.len() {
            unreachable!("FAR - FRR reaches -1 above every score");
        }
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                below_gen += 1;
            } else {
                below_imp += 1;
            }
            i += 1;
        }
    }
}

pub fn eer_of_scores(scores: &[TrialScore]) -> Result<Eer> {
    let g: Vec<f64> = scores.iter().filter(|s| s.trial.genuine).map(|s| s.score).collect();
    let i: Vec<f64> = scores.iter().filter(|s| !s.trial.genuine).map(|s| s.score).collect();
    compute_eer(&g, &i)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[TrialScore]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in scores {
        let label = if s.trial.genuine { "genuine" } else { "impostor" };
        text.push_str(&format!("{}\t{}\t{:.9}\t{}\n", s.trial.enroll_speaker, s.trial.test_utterance, s.score, label));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Flat `key=value` lines.
pub fn format_report(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Share of correctly separated pairs (logit threshold 0) on `n_samp`
/// positive and negative pairs drawn from `utts`.
pub fn pair_discrimination_accuracy<F: Real>(encoder: &Encoder<F>, disc: &Discriminator<F>, utts: &[Utterance], n_samp: usize, seed: u64) -> Result<f64> {
    let chunk_len = encoder.config().chunk_len;
    let mut r = batch_rng(seed, "eval/pairs", 0);
    let b = sample_pair_batch(utts, n_samp, chunk_len, &SamplerConfig::default(), &mut r)?;
    let embed = |refs| -> Result<Tensor<F>> {
        let x = b.gather(utts, refs);
        let slices: Vec<&[f32]> = x.chunks(chunk_len).collect();
        encoder.embed(&slices)
    };
    let (z1, z2, zr) = (embed(&b.anchor)?, embed(&b.positive)?, embed(&b.random)?);
    let mut tape = Tape::inference();
    let v = disc.bind(&mut tape, false);
    let (a, p, n) = (tape.constant(z1), tape.constant(z2), tape.constant(zr));
    let pos = discriminate(&mut tape, &v, a, p, Head::Raw)?;
    let neg = discriminate(&mut tape, &v, a, n, Head::Raw)?;
    Ok(pair_accuracy(&tape.value(pos).to_f64(), &tape.value(neg).to_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_posterior_example() {
        let rows = [0.6, 0.4, 0.2, 0.8, 0.9, 0.1];
        let m = mean_posterior(&rows, 2);
        assert!((m[0] - 0.566_666_666_7).abs() < 1e-9);
        assert!((m[1] - 0.433_333_333_3).abs() < 1e-9);
        assert_eq!(argmax(&m), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn cer_counts() {
        assert_eq!(cer_from_predictions(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap().cer_pct, 0.0);
        assert_eq!(cer_from_predictions(&[0, 1, 2, 0], &[0, 1, 2, 3]).unwrap().cer_pct, 25.0);
        assert!(matches!(cer_from_predictions(&[], &[]), Err(Error::EmptyEval(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[-2.0, -2.0]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn eer_examples() {
        let e = compute_eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(e.eer_pct, 0.0);
        let e = compute_eer(&[0.8, 0.2], &[0.7, 0.3]).unwrap();
        assert_eq!(e.eer_pct, 50.0);
        let e = compute_eer(&[0.1, 0.2], &[0.9, 0.8]).unwrap();
        assert_eq!(e.eer_pct, 100.0);
        assert!(matches!(compute_eer(&[0.5], &[]), Err(Error::InsufficientTrials)));
    }

    #[test]
    fn dvector_average_and_degenerate_rows() {
        let v = average_unit_rows(&[3.0, 4.0, 3.0, 4.0], 2).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(average_unit_rows(&[0.0, 0.0, 1.0, 0.0], 2).is_none());
        assert!(average_unit_rows(&[1.0, 0.0, -1.0, 0.0], 2).is_none());
    }

    #[test]
    fn missing_model_is_a_lookup_error() {
        let t = Trial {
            enroll_speaker: "a".into(),
            test_utterance: "u".into(),
            genuine: true,
        };
        let r = score_trials(&[t], &BTreeMap::new(), &BTreeMap::new());
        assert!(matches!(r, Err(Error::Lookup(_))));
    }
}
