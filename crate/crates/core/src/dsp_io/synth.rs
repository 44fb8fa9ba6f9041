use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, write_wav, Manifest, ManifestEntry, Split, Utterance, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng;

const PEAK: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub utt_seconds: f64,
    pub seed: u64,
    /// Utterances per speaker assigned to the enroll split.
    pub enroll_per_speaker: usize,
    /// Utterances per speaker assigned to the test split.
    pub test_per_speaker: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 20,
            utts_per_speaker: 8,
            utt_seconds: 3.0,
            seed: 0,
            enroll_per_speaker: 1,
            test_per_speaker: 1,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("synth: {what} must be positive")));
        if self.n_speakers == 0 {
            return bad("n_speakers");
        }
        if self.utts_per_speaker == 0 {
            return bad("utts_per_speaker");
        }
        if !(self.utt_seconds > 0.0) || !self.utt_seconds.is_finite() {
            return bad("utt_seconds");
        }
        Ok(())
    }

    /// Split of utterance `u` of a speaker. The last utterances go to test,
    /// the ones before to enroll, always leaving at least one for training.
    pub fn split_of(&self, u: usize) -> Split {
        let n = self.utts_per_speaker;
        let test = self.test_per_speaker.min(n.saturating_sub(1));
        let enroll = self.enroll_per_speaker.min(n.saturating_sub(1 + test));
        if u >= n - test {
            Split::Test
        } else if u >= n - test - enroll {
            Split::Enroll
        } else {
            Split::Train
        }
    }
}

/// Fixed voice parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub f0: f64,
    pub formants: [f64; 3],
    /// Pole of the one-pole glottal low-pass; larger is darker.
    pub tilt: f64,
    /// Aspiration noise level relative to the pulse train.
    pub breathiness: f64,
}

impl SpeakerProfile {
    pub fn draw(seed: u64, speaker: usize) -> Self {
        let mut r = rng::stream(seed, "synth/speaker", speaker as u64);
        SpeakerProfile {
            f0: r.random_range(80.0..300.0),
            formants: [
                r.random_range(300.0..900.0),
                r.random_range(900.0..2400.0),
                r.random_range(2400.0..3500.0),
            ],
            tilt: r.random_range(0.5..0.95),
            breathiness: r.random_range(0.02..0.3),
        }
    }
}

/// Two-pole resonator with unity gain near its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, sr: f64) -> Self {
        let mut res = Resonator {
            a1: 0.0,
            a2: 0.0,
            gain: 0.0,
            y1: 0.0,
            y2: 0.0,
        };
        res.retune(freq, sr);
        res
    }

    fn retune(&mut self, freq: f64, sr: f64) {
        let bw = 50.0 + 0.06 * freq;
        let r = (-PI * bw / sr).exp();
        self.a1 = 2.0 * r * (2.0 * PI * freq / sr).cos();
        self.a2 = -r * r;
        self.gain = 1.0 - r;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn render(profile: &SpeakerProfile, n: usize, r: &mut rng::Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    // Slow f0 drift: two sinusoids whose amplitudes sum to 10%.
    let share: f64 = r.random_range(0.3..0.7);
    let (rate1, rate2): (f64, f64) = (r.random_range(0.3..1.5), r.random_range(2.0..5.0));
    let (ph1, ph2): (f64, f64) = (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI));

    let mut res: Vec<Resonator> = profile.formants.iter().map(|&f| Resonator::new(f, sr)).collect();
    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0;
    let mut glottal = 0.0;
    let mut syl_left = 0usize;
    let mut syl_len = 1usize;
    for i in 0..n {
        if syl_left == 0 {
            // New syllable: duration 150-300 ms, formants shifted by up to 8%.
            syl_len = (r.random_range(0.15..0.3) * sr) as usize;
            syl_left = syl_len;
            let shift: f64 = r.random_range(0.92..1.08);
            for (rs, &f) in res.iter_mut().zip(&profile.formants) {
                rs.retune(f * shift, sr);
            }
        }
        let pos = (syl_len - syl_left) as f64 / syl_len as f64;
        syl_left -= 1;
        let env = 0.1 + 0.9 * (PI * pos).sin().powi(2);

        let t = i as f64 / sr;
        let drift = share * (2.0 * PI * rate1 * t + ph1).sin() + (1.0 - share) * (2.0 * PI * rate2 * t + ph2).sin();
        let f0 = profile.f0 * (1.0 + 0.1 * drift);
        phase += f0 / sr;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        glottal = (1.0 - profile.tilt) * pulse + profile.tilt * glottal;
        let noise: f64 = StandardNormal.sample(r);
        let mut s = env * (glottal + profile.breathiness * (1.0 - profile.tilt) * noise);
        for rs in res.iter_mut() {
            s = rs.step(s);
        }
        out.push(s);
    }
    let peak = out.iter().fold(0f64, |m, s| m.max(s.abs()));
    let gain = if peak > 0.0 { PEAK / peak } else { 0.0 };
    out.into_iter()
        .map(|s| super::wav::quantize((s * gain) as f32) as f32 / 32768.0)
        .collect()
}

pub fn speaker_label(s: usize) -> String {
    format!("spk{s:03}")
}

pub fn utterance_id(s: usize, u: usize) -> String {
    format!("spk{s:03}_u{u:03}")
}

/// Generates the corpus in memory. Samples are already quantized to 16 bits,
/// so they equal what [`synth_corpus`] writes to disk.
pub fn synth_utterances(cfg: &SynthConfig) -> Result<Vec<(Utterance, Split)>> {
    cfg.validate()?;
    let n = (cfg.utt_seconds * SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for s in 0..cfg.n_speakers {
        let profile = SpeakerProfile::draw(cfg.seed, s);
        for u in 0..cfg.utts_per_speaker {
            let idx = (s * cfg.utts_per_speaker + u) as u64;
            let mut r = rng::stream(cfg.seed, "synth/utterance", idx);
            let utt = Utterance {
                id: utterance_id(s, u),
                speaker: speaker_label(s),
                samples: render(&profile, n, &mut r),
                sample_rate: SAMPLE_RATE,
            };
            out.push((utt, cfg.split_of(u)));
        }
    }
    Ok(out)
}

/// Writes one WAV per utterance under `out_dir/wav/` plus
/// `out_dir/manifest.tsv`.
pub fn synth_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::new();
    for (utt, split) in synth_utterances(cfg)? {
        let path = wav_dir.join(format!("{}.wav", utt.id));
        write_wav(&path, &utt.samples, utt.sample_rate)?;
        entries.push(ManifestEntry {
            utterance_id: utt.id,
            speaker: utt.speaker,
            path,
            split,
        });
    }
    let manifest = Manifest { entries };
    write_manifest(out_dir.join("manifest.tsv"), &manifest)?;
    Ok(manifest)
}
