use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Utterance;
use crate::error::{Error, Result};
use crate::rng;

/// Scale of the diffuse tail relative to the unit direct-path tap.
const TAIL_GAIN: f64 = 0.05;

const DIRECT_CONV_MAX: usize = 64;

/// Energy envelope of the synthetic tail, `exp(-6 ln(10) t / t60)`: down
/// 60 dB at `t = t60`.
pub fn rir_envelope(t: f64, t60: f64) -> f64 {
    (-6.0 * std::f64::consts::LN_10 * t / t60).exp()
}

/// Exponentially decaying white-noise impulse response at 16 kHz with a unit
/// leading tap. The noise amplitude follows the square root of
/// [`rir_envelope`], so tap energy decays by 60 dB over `t60`.
pub fn make_rir(t60: f64, length_seconds: f64, seed: u64) -> Result<Vec<f32>> {
    if !(t60 > 0.0) || !t60.is_finite() {
        return Err(Error::Domain { op: "make_rir", value: t60 });
    }
    if !(length_seconds > 0.0) || !length_seconds.is_finite() {
        return Err(Error::Domain { op: "make_rir", value: length_seconds });
    }
    let sr = super::SAMPLE_RATE as f64;
    let n = ((length_seconds * sr).round() as usize).max(1);
    let mut r = rng::stream(seed, "reverb/rir", 0);
    let mut out = Vec::with_capacity(n);
    out.push(1.0);
    for i in 1..n {
        let z: f64 = StandardNormal.sample(&mut r);
        out.push((TAIL_GAIN * z * rir_envelope(i as f64 / sr, t60).sqrt()) as f32);
    }
    Ok(out)
}

/// Full linear convolution (length `x.len() + h.len() - 1`).
pub fn convolve(x: &[f32], h: &[f32]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let n = x.len() + h.len() - 1;
    if h.len().min(x.len()) <= DIRECT_CONV_MAX {
        let mut out = vec![0.0; n];
        for (i, &xi) in x.iter().enumerate() {
            for (j, &hj) in h.iter().enumerate() {
                out[i + j] += xi as f64 * hj as f64;
            }
        }
        return out;
    }
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f32]| {
        let mut buf: Vec<Complex<f64>> = v.iter().map(|&s| Complex::new(s as f64, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        buf
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    inv.process(&mut a);
    a.truncate(n);
    a.into_iter().map(|c| c.re / size as f64).collect()
}

/// Convolves with `rir`, truncates to the input length and rescales so the
/// output peak matches the input peak.
pub fn apply_reverb(utt: &Utterance, rir: &[f32]) -> Result<Utterance> {
    if rir.is_empty() || rir.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("impulse response must be non-empty and finite".into()));
    }
    if rir.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateRir);
    }
    let mut wet = convolve(&utt.samples, rir);
    wet.truncate(utt.samples.len());
    let peak_in = utt.samples.iter().fold(0f32, |m, s| m.max(s.abs())) as f64;
    let peak_out = wet.iter().fold(0f64, |m, s| m.max(s.abs()));
    let gain = if peak_out > 0.0 { peak_in / peak_out } else { 0.0 };
    Ok(Utterance {
        id: utt.id.clone(),
        speaker: utt.speaker.clone(),
        samples: wet.into_iter().map(|s| (s * gain) as f32).collect(),
        sample_rate: utt.sample_rate,
    })
}

/// Gives every utterance its own impulse response of `rir_seconds`, the
/// i-th drawn from stream `(seed, i)`.
pub fn reverberate(utts: &[Utterance], t60: f64, rir_seconds: f64, seed: u64) -> Result<Vec<Utterance>> {
    utts.iter()
        .enumerate()
        .map(|(i, u)| {
            let rir_seed: u64 = rng::stream(seed, "reverb/corpus", i as u64).random();
            apply_reverb(u, &make_rir(t60, rir_seconds, rir_seed)?)
        })
        .collect()
}
