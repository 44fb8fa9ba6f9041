//! Brute-force equal-error-rate oracle and random trial sets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent EER estimate: every midpoint between consecutive distinct
/// scores (plus one threshold beyond each end) is tried and the point where
/// FAR and FRR are closest is reported as their mean.
pub fn brute_force_eer(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut all: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut thresholds = vec![all[0] - 1.0, all[all.len() - 1] + 1.0];
    thresholds.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    let mut g = genuine.to_vec();
    let mut i = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    i.sort_by(f64::total_cmp);
    let below = |v: &[f64], t: f64| v.partition_point(|&x| x < t) as f64;
    let mut best = (f64::INFINITY, 0.0);
    for t in thresholds {
        let far = (i.len() as f64 - below(&i, t)) / i.len() as f64;
        let frr = below(&g, t) / g.len() as f64;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, 100.0 * 0.5 * (far + frr));
        }
    }
    best.1
}

pub fn random_trials(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let ng = r.random_range(1200..2000);
    let ni = r.random_range(1200..2000);
    let shift: f64 = r.random_range(0.0..3.0);
    let spread: f64 = r.random_range(0.5..2.0);
    let g = (0..ng)
        .map(|_| shift + spread * Distribution::<f64>::sample(&StandardNormal, r))
        .collect();
    let i = (0..ni).map(|_| Distribution::<f64>::sample(&StandardNormal, r)).collect();
    (g, i)
}
