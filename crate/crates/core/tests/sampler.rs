use lim::dsp_io::Utterance;
use lim::sampler::{batch_rng, collision_probability, sample_pair_batch, PairBatch, SamplerConfig};

fn corpus(n_spk: usize, per: usize, len: usize) -> Vec<Utterance> {
    (0..n_spk * per)
        .map(|i| Utterance {
            id: format!("spk{:03}_u{:03}", i / per, i % per),
            speaker: format!("spk{:03}", i / per),
            samples: vec![0.0; len + i % 7],
            sample_rate: 16000,
        })
        .collect()
}

fn check_invariants(b: &PairBatch, utts: &[Utterance]) {
    assert_eq!(b.anchor.len(), b.positive.len());
    assert_eq!(b.anchor.len(), b.random.len());
    for ((a, p), (a2, r)) in b.positives().zip(b.negatives()) {
        assert_eq!(a, a2, "negative must reuse the anchor");
        assert_eq!(utts[a.utt].id, utts[p.utt].id);
        assert_ne!(utts[a.utt].id, utts[r.utt].id);
        for c in [a, p, r] {
            assert!(c.offset + b.chunk_len <= utts[c.utt].samples.len());
        }
    }
}

#[test]
fn invariants_over_a_thousand_draws() {
    let utts = corpus(20, 8, 4000);
    for seed in 0..1000 {
        let mut r = batch_rng(seed, "test/pairs", 0);
        let b = sample_pair_batch(&utts, 16, 3200, &SamplerConfig::default(), &mut r).unwrap();
        check_invariants(&b, &utts);
    }
}

#[test]
fn selection_counts_are_uniform() {
    let utts = corpus(20, 8, 4000);
    let n = utts.len();
    let mut anchors = vec![0usize; n];
    let mut randoms = vec![0usize; n];
    let mut same_speaker = 0usize;
    let mut total = 0usize;
    for step in 0..100 {
        let mut r = batch_rng(3, "test/pairs", step);
        let b = sample_pair_batch(&utts, 100, 3200, &SamplerConfig::default(), &mut r).unwrap();
        check_invariants(&b, &utts);
        for (a, c) in b.negatives() {
            anchors[a.utt] += 1;
            randoms[c.utt] += 1;
            total += 1;
            if utts[a.utt].speaker == utts[c.utt].speaker {
                same_speaker += 1;
            }
        }
    }
    assert_eq!(total, 10_000);
    // Pearson statistic against the uniform multinomial: with n - 1 degrees
    // of freedom it has mean n - 1 and standard deviation sqrt(2 (n - 1)).
    let expected = total as f64 / n as f64;
    let df = (n - 1) as f64;
    for counts in [&anchors, &randoms] {
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!((chi2 - df).abs() <= 3.0 * (2.0 * df).sqrt(), "chi2 {chi2} with {df} dof");
    }
    // 7/159 of negatives share the anchor speaker.
    let expected = collision_probability(&utts);
    assert!((expected - 7.0 / 159.0).abs() < 1e-12);
    let observed = same_speaker as f64 / total as f64;
    let sd = (expected * (1.0 - expected) / total as f64).sqrt();
    assert!((observed - expected).abs() <= 3.0 * sd, "{observed} vs {expected}");
}

#[test]
fn offsets_cover_the_utterance() {
    let utts = corpus(1, 2, 3300);
    let mut seen_first = false;
    let mut seen_last = false;
    for step in 0..200 {
        let mut r = batch_rng(1, "test/pairs", step);
        let b = sample_pair_batch(&utts, 50, 3200, &SamplerConfig::default(), &mut r).unwrap();
        for c in b.anchor.iter().chain(&b.positive) {
            seen_first |= c.offset == 0;
            seen_last |= c.offset + 3200 == utts[c.utt].samples.len();
        }
    }
    assert!(seen_first && seen_last);
}

#[test]
fn steps_draw_independent_batches() {
    let utts = corpus(4, 4, 4000);
    let cfg = SamplerConfig::default();
    let a = sample_pair_batch(&utts, 8, 3200, &cfg, &mut batch_rng(5, "train/pairs", 0)).unwrap();
    let b = sample_pair_batch(&utts, 8, 3200, &cfg, &mut batch_rng(5, "train/pairs", 1)).unwrap();
    let c = sample_pair_batch(&utts, 8, 3200, &cfg, &mut batch_rng(5, "train/pairs", 0)).unwrap();
    assert_ne!(a, b);
    assert_eq!(a, c);
}
