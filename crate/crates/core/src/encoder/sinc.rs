//! Parametric band-pass filters: only the two cutoffs of each filter are
//! learned, the taps are a windowed difference of two low-pass sincs.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numcore::{CustomOp, Real, Tape, Tensor, Var};

/// Normalized sinc, `sin(pi x) / (pi x)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Hamming window `0.54 - 0.46 cos(2 pi n / (klen - 1))`.
pub fn hamming(klen: usize) -> Vec<f64> {
    if klen == 1 {
        return vec![1.0];
    }
    // Mirrored indices share one evaluation so the window is exactly symmetric.
    (0..klen)
        .map(|n| {
            let k = n.min(klen - 1 - n);
            0.54 - 0.46 * (2.0 * PI * k as f64 / (klen - 1) as f64).cos()
        })
        .collect()
}

/// Maps unconstrained parameters to cutoffs `0 <= f1 <= f2 <= 0.5`
/// (cycles/sample): `f1 = |low|`, `f2 = f1 + |band|`, both clipped.
pub fn constrain_cutoffs(raw_low: f64, raw_band: f64) -> (f64, f64) {
    let f1 = raw_low.abs().min(0.5);
    let f2 = (f1 + raw_band.abs()).min(0.5);
    (f1, f2)
}

/// Derivatives of `constrain_cutoffs`: `(df1/dlow, df2/dlow, df2/dband)`.
fn constrain_jacobian(raw_low: f64, raw_band: f64) -> (f64, f64, f64) {
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let f1_free = raw_low.abs() < 0.5;
    let d1 = if f1_free { sign(raw_low) } else { 0.0 };
    let f2_free = raw_low.abs().min(0.5) + raw_band.abs() < 0.5;
    if f2_free {
        (d1, d1, sign(raw_band))
    } else {
        (d1, 0.0, 0.0)
    }
}

/// Windowed band-pass taps for normalized cutoffs `f1 <= f2`; `klen` must be
/// odd so the filter is symmetric about its centre tap.
pub fn sinc_taps(f1: f64, f2: f64, klen: usize) -> Result<Vec<f64>> {
    if klen % 2 == 0 {
        return Err(Error::Invalid(format!("sinc length {klen} must be odd")));
    }
    if !(0.0..=0.5).contains(&f1) || !(0.0..=0.5).contains(&f2) || f1 > f2 {
        return Err(Error::Invalid(format!(
            "cutoffs must satisfy 0 <= f1 <= f2 <= 0.5, got ({f1}, {f2})"
        )));
    }
    Ok(taps_unchecked(f1, f2, &hamming(klen)))
}

fn taps_unchecked(f1: f64, f2: f64, window: &[f64]) -> Vec<f64> {
    let half = (window.len() / 2) as isize;
    window
        .iter()
        .enumerate()
        .map(|(n, w)| {
            // Evaluated from the centre outward so mirrored taps share the
            // exact same arithmetic.
            let m = (n as isize - half).unsigned_abs() as f64;
            (2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m)) * w
        })
        .collect()
}

/// Initial cutoffs on a mel-spaced grid between `min_hz` and `max_hz`,
/// returned as (low, bandwidth) in cycles/sample, sorted by low cutoff.
pub fn mel_cutoffs(n_filters: usize, sample_rate: f64, min_hz: f64, max_hz: f64) -> (Vec<f64>, Vec<f64>) {
    let to_mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let to_hz = |mel: f64| 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    let (lo, hi) = (to_mel(min_hz), to_mel(max_hz));
    let edges: Vec<f64> = (0..=n_filters)
        .map(|i| to_hz(lo + (hi - lo) * i as f64 / n_filters as f64) / sample_rate)
        .collect();
    let lows = edges[..n_filters].to_vec();
    let bands = edges.windows(2).map(|w| w[1] - w[0]).collect();
    (lows, bands)
}

struct SincBankOp {
    window: Vec<f64>,
}

impl<F: Real> CustomOp<F> for SincBankOp {
    fn name(&self) -> &'static str {
        "sinc_bank"
    }

    fn vjp(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &[F]) -> Vec<Vec<F>> {
        let (low, band) = (inputs[0].data(), inputs[1].data());
        let klen = self.window.len();
        let half = (klen / 2) as isize;
        let mut g_low = Vec::with_capacity(low.len());
        let mut g_band = Vec::with_capacity(low.len());
        for (j, g) in grad.chunks(klen).enumerate() {
            let (rl, rb) = (low[j].f64(), band[j].f64());
            let (f1, f2) = constrain_cutoffs(rl, rb);
            let (d1_low, d2_low, d2_band) = constrain_jacobian(rl, rb);
            // d/df [2 f sinc(2 f m)] = 2 cos(2 pi f m), including m = 0.
            let mut gf1 = 0.0;
            let mut gf2 = 0.0;
            for (n, gv) in g.iter().enumerate() {
                let m = (n as isize - half) as f64;
                let w = self.window[n] * gv.f64();
                gf2 += 2.0 * (2.0 * PI * f2 * m).cos() * w;
                gf1 -= 2.0 * (2.0 * PI * f1 * m).cos() * w;
            }
            g_low.push(F::of(gf1 * d1_low + gf2 * d2_low));
            g_band.push(F::of(gf2 * d2_band));
        }
        vec![g_low, g_band]
    }
}

/// Builds the `[n_filters, 1, klen]` kernel bank from raw low-cutoff and
/// bandwidth parameters (each `[n_filters]`).
pub fn sinc_bank<F: Real>(tape: &mut Tape<F>, raw_low: Var, raw_band: Var, klen: usize) -> Result<Var> {
    if klen % 2 == 0 {
        return Err(Error::Invalid(format!("sinc length {klen} must be odd")));
    }
    let (low, band) = (tape.value(raw_low), tape.value(raw_band));
    if low.rank() != 1 || low.shape() != band.shape() {
        return Err(Error::dim(
            "sinc_bank",
            format!("low {:?} vs band {:?}", low.shape(), band.shape()),
        ));
    }
    let window = hamming(klen);
    let n = low.len();
    let mut data = Vec::with_capacity(n * klen);
    for (l, b) in low.data().iter().zip(band.data()) {
        let (f1, f2) = constrain_cutoffs(l.f64(), b.f64());
        data.extend(taps_unchecked(f1, f2, &window).into_iter().map(F::of));
    }
    let out = Tensor::new(vec![n, 1, klen], data)?;
    Ok(tape.custom(&[raw_low, raw_band], out, Box::new(SincBankOp { window })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_examples() {
        assert_eq!(constrain_cutoffs(0.4, 0.4), (0.4, 0.5));
        assert_eq!(constrain_cutoffs(0.0, 0.0), (0.0, 0.0));
        let (f1, f2) = constrain_cutoffs(-0.1, 0.2);
        assert!((f1 - 0.1).abs() < 1e-15 && (f2 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_width_band_is_silent() {
        let taps = sinc_taps(0.2, 0.2, 51).unwrap();
        assert!(taps.iter().all(|&t| t == 0.0));
        let (f1, f2) = constrain_cutoffs(0.0, 0.0);
        assert!(sinc_taps(f1, f2, 31).unwrap().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn centre_tap_closed_form() {
        for klen in [3, 31, 251] {
            let taps = sinc_taps(0.1, 0.3, klen).unwrap();
            assert!((taps[klen / 2] - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_even_length_and_bad_order() {
        assert!(sinc_taps(0.1, 0.2, 4).is_err());
        assert!(sinc_taps(0.3, 0.2, 5).is_err());
    }

    #[test]
    fn mel_grid_sorted_and_in_band() {
        let (lows, bands) = mel_cutoffs(80, 16000.0, 30.0, 8000.0);
        assert_eq!(lows.len(), 80);
        assert!(lows.windows(2).all(|w| w[0] < w[1]));
        assert!((lows[0] - 30.0 / 16000.0).abs() < 1e-12);
        let top = lows[79] + bands[79];
        assert!((top - 0.5).abs() < 1e-9);
        assert!(bands.iter().all(|&b| b > 0.0));
    }
}
