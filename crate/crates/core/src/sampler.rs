//! Joint (same-utterance) and product-of-marginals (different-utterance)
//! chunk pairs, plus verification trial lists.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dsp_io::{Manifest, Split, Utterance};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A chunk location: utterance index into the sampled slice plus offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkRef {
    pub utt: usize,
    pub offset: usize,
}

/// `n_samp` positives `(anchor[i], positive[i])` and negatives
/// `(anchor[i], random[i])`; both sides share the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub chunk_len: usize,
    pub anchor: Vec<ChunkRef>,
    pub positive: Vec<ChunkRef>,
    pub random: Vec<ChunkRef>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = (ChunkRef, ChunkRef)> + '_ {
        self.anchor.iter().copied().zip(self.positive.iter().copied())
    }

    pub fn negatives(&self) -> impl Iterator<Item = (ChunkRef, ChunkRef)> + '_ {
        self.anchor.iter().copied().zip(self.random.iter().copied())
    }

    /// Samples of the given chunks, concatenated row-major `[n, chunk_len]`.
    pub fn gather(&self, utts: &[Utterance], refs: &[ChunkRef]) -> Vec<f32> {
        let mut out = Vec::with_capacity(refs.len() * self.chunk_len);
        for r in refs {
            out.extend_from_slice(&utts[r.utt].samples[r.offset..r.offset + self.chunk_len]);
        }
        out
    }

    /// Fraction of negative pairs whose utterances share a speaker.
    pub fn same_speaker_fraction(&self, utts: &[Utterance]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let same = self
            .negatives()
            .filter(|(a, b)| utts[a.utt].speaker == utts[b.utt].speaker)
            .count();
        same as f64 / self.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Minimum distance in samples between the anchor and positive offsets.
    pub min_separation: usize,
    /// Require negatives to come from a different speaker, not just a
    /// different utterance.
    pub strict_speaker: bool,
}

/// Probability that a uniformly drawn negative shares the anchor's speaker
/// under utterance-level sampling.
pub fn collision_probability(utts: &[Utterance]) -> f64 {
    let n = utts.len();
    if n < 2 {
        return 0.0;
    }
    let mut per_spk: BTreeMap<&str, usize> = BTreeMap::new();
    for u in utts {
        *per_spk.entry(&u.speaker).or_default() += 1;
    }
    let pairs: usize = per_spk.values().map(|&k| k * (k - 1)).sum();
    pairs as f64 / (n * (n - 1)) as f64
}

/// Rng for the batch at a given step; each step owns its stream so the batch
/// sequence does not depend on how many workers produce it.
pub fn batch_rng(seed: u64, name: &str, step: u64) -> Rng {
    rng::stream(seed, name, step)
}

pub fn sample_pair_batch(
    utts: &[Utterance],
    n_samp: usize,
    chunk_len: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<PairBatch> {
    if utts.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "pair sampling needs at least 2 utterances, got {}",
            utts.len()
        )));
    }
    if let Some(u) = utts.iter().find(|u| u.samples.len() < chunk_len) {
        return Err(Error::TooShort {
            id: u.id.clone(),
            len: u.samples.len(),
            chunk: chunk_len,
        });
    }
    if cfg.min_separation > 0 {
        if let Some(u) = utts.iter().find(|u| u.samples.len() - chunk_len < cfg.min_separation) {
            return Err(Error::InsufficientData(format!(
                "utterance {} too short for a positive separation of {} samples",
                u.id, cfg.min_separation
            )));
        }
    }
    // Per-speaker candidate lists for the strict mode.
    let others: Option<Vec<Vec<usize>>> = if cfg.strict_speaker {
        let lists: Vec<Vec<usize>> = utts
            .iter()
            .map(|a| (0..utts.len()).filter(|&j| utts[j].speaker != a.speaker).collect())
            .collect();
        if lists.iter().any(|l| l.is_empty()) {
            return Err(Error::InsufficientData(
                "strict-speaker negatives need at least 2 speakers".into(),
            ));
        }
        Some(lists)
    } else {
        None
    };

    let offset = |rng: &mut Rng, u: usize| rng.random_range(0..=utts[u].samples.len() - chunk_len);
    let mut batch = PairBatch {
        chunk_len,
        anchor: Vec::with_capacity(n_samp),
        positive: Vec::with_capacity(n_samp),
        random: Vec::with_capacity(n_samp),
    };
    for _ in 0..n_samp {
        let u = rng.random_range(0..utts.len());
        let o1 = offset(rng, u);
        let o2 = loop {
            let o = offset(rng, u);
            if o.abs_diff(o1) >= cfg.min_separation {
                break o;
            }
        };
        let v = match &others {
            Some(lists) => *lists[u].choose(rng).expect("non-empty"),
            None => {
                let v = rng.random_range(0..utts.len() - 1);
                if v >= u {
                    v + 1
                } else {
                    v
                }
            }
        };
        let o3 = offset(rng, v);
        batch.anchor.push(ChunkRef { utt: u, offset: o1 });
        batch.positive.push(ChunkRef { utt: u, offset: o2 });
        batch.random.push(ChunkRef { utt: v, offset: o3 });
    }
    Ok(batch)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll_speaker: String,
    pub test_utterance: String,
    pub genuine: bool,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = if self.genuine { "genuine" } else { "impostor" };
        write!(f, "{}\t{}\t{}", self.enroll_speaker, self.test_utterance, label)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialList {
    /// Enrollment utterance ids per speaker.
    pub enrollment: BTreeMap<String, Vec<String>>,
    pub trials: Vec<Trial>,
}

/// Builds a verification trial list from the enroll and test splits.
/// Each speaker is enrolled with up to `n_enroll_per_spk` of its enroll
/// utterances; genuine and impostor trials are drawn without replacement.
pub fn make_trials(
    manifest: &Manifest,
    n_enroll_per_spk: usize,
    n_genuine: usize,
    n_impostor: usize,
    rng: &mut Rng,
) -> Result<TrialList> {
    if n_enroll_per_spk == 0 {
        return Err(Error::Invalid("enrollment needs at least one utterance per speaker".into()));
    }
    let mut by_spk: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in manifest.split(Split::Enroll) {
        by_spk.entry(e.speaker.clone()).or_default().push(e.utterance_id.clone());
    }
    let tests: Vec<(&str, &str)> = manifest
        .split(Split::Test)
        .map(|e| (e.speaker.as_str(), e.utterance_id.as_str()))
        .collect();
    if by_spk.is_empty() || tests.is_empty() {
        return Err(Error::InsufficientData("enroll and test splits must be non-empty".into()));
    }
    if let Some((spk, _)) = tests.iter().find(|(s, _)| !by_spk.contains_key(*s)) {
        return Err(Error::Coverage(format!("speaker {spk} has no enrollment utterances")));
    }
    let mut enrollment = BTreeMap::new();
    for (spk, mut ids) in by_spk {
        ids.shuffle(rng);
        ids.truncate(n_enroll_per_spk);
        ids.sort();
        enrollment.insert(spk, ids);
    }

    let genuine: Vec<Trial> = tests
        .iter()
        .map(|(s, u)| Trial {
            enroll_speaker: s.to_string(),
            test_utterance: u.to_string(),
            genuine: true,
        })
        .collect();
    let impostor: Vec<Trial> = tests
        .iter()
        .flat_map(|(s, u)| {
            enrollment.keys().filter(move |k| k.as_str() != *s).map(move |k| Trial {
                enroll_speaker: k.clone(),
                test_utterance: u.to_string(),
                genuine: false,
            })
        })
        .collect();
    let pick = |pool: Vec<Trial>, n: usize, kind: &'static str, rng: &mut Rng| {
        if n > pool.len() {
            return Err(Error::TrialCount {
                kind,
                requested: n,
                available: pool.len(),
            });
        }
        Ok(pool.choose_multiple(rng, n).cloned().collect::<Vec<_>>())
    };
    let mut trials = pick(genuine, n_genuine, "genuine", rng)?;
    trials.extend(pick(impostor, n_impostor, "impostor", rng)?);
    if !trials.iter().any(|t| t.genuine) || !trials.iter().any(|t| !t.genuine) {
        return Err(Error::InsufficientTrials);
    }
    Ok(TrialList { enrollment, trials })
}

pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<()> {
    let path = path.as_ref();
    let text: String = trials.iter().map(|t| format!("{t}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err("expected 3 tab-separated fields"));
        }
        let genuine = match f[2] {
            "genuine" => true,
            "impostor" => false,
            _ => return Err(err("label must be genuine or impostor")),
        };
        out.push(Trial {
            enroll_speaker: f[0].to_string(),
            test_utterance: f[1].to_string(),
            genuine,
        });
    }
    Ok(out)
}

/// Speakers appearing in the trial list, in sorted order.
pub fn trial_speakers(trials: &[Trial]) -> BTreeSet<&str> {
    trials.iter().map(|t| t.enroll_speaker.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp_io::ManifestEntry;
    use proptest::prelude::*;

    fn corpus(n: usize, spk: usize, len: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance {
                id: format!("u{i}"),
                speaker: format!("s{}", i % spk),
                samples: (0..len).map(|t| (i * 100_000 + t) as f32).collect(),
                sample_rate: 16000,
            })
            .collect()
    }

    #[test]
    fn two_utterances_force_the_negative() {
        let utts = corpus(2, 2, 4000);
        let b = sample_pair_batch(&utts, 64, 3200, &SamplerConfig::default(), &mut rng::stream(1, "t", 0)).unwrap();
        for (a, r) in b.negatives() {
            assert_eq!(a.utt + r.utt, 1);
        }
    }

    #[test]
    fn seeded_batches_repeat() {
        let utts = corpus(10, 3, 5000);
        let cfg = SamplerConfig::default();
        let a = sample_pair_batch(&utts, 32, 3200, &cfg, &mut batch_rng(5, "pairs", 3)).unwrap();
        let b = sample_pair_batch(&utts, 32, 3200, &cfg, &mut batch_rng(5, "pairs", 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn needs_two_utterances() {
        let utts = corpus(1, 1, 5000);
        let r = sample_pair_batch(&utts, 4, 3200, &SamplerConfig::default(), &mut rng::stream(1, "t", 0));
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn gather_copies_the_right_samples() {
        let utts = corpus(3, 3, 4000);
        let b = sample_pair_batch(&utts, 5, 100, &SamplerConfig::default(), &mut rng::stream(2, "t", 0)).unwrap();
        let x = b.gather(&utts, &b.random);
        for (i, r) in b.random.iter().enumerate() {
            assert_eq!(x[i * 100], (r.utt * 100_000 + r.offset) as f32);
        }
    }

    #[test]
    fn strict_mode_and_min_separation() {
        let utts = corpus(8, 4, 8000);
        let cfg = SamplerConfig {
            min_separation: 2000,
            strict_speaker: true,
        };
        let b = sample_pair_batch(&utts, 200, 3200, &cfg, &mut rng::stream(3, "t", 0)).unwrap();
        assert_eq!(b.same_speaker_fraction(&utts), 0.0);
        assert!(b.positives().all(|(a, p)| a.offset.abs_diff(p.offset) >= 2000));
        let single = corpus(4, 1, 8000);
        assert!(sample_pair_batch(&single, 2, 3200, &cfg, &mut rng::stream(3, "t", 0)).is_err());
    }

    #[test]
    fn collision_probability_matches_counting() {
        // 4 speakers x 2 utterances: each anchor has 1 same-speaker partner of 7.
        let utts = corpus(8, 4, 4000);
        assert!((collision_probability(&utts) - 1.0 / 7.0).abs() < 1e-12);
    }

    fn manifest(spk: usize, enroll: usize, test: usize) -> Manifest {
        let mut entries = Vec::new();
        for s in 0..spk {
            for (split, n) in [(Split::Enroll, enroll), (Split::Test, test)] {
                for k in 0..n {
                    entries.push(ManifestEntry {
                        utterance_id: format!("s{s}_{split}_{k}"),
                        speaker: format!("s{s}"),
                        path: "x.wav".into(),
                        split,
                    });
                }
            }
        }
        Manifest { entries }
    }

    #[test]
    fn trial_counts_are_bounded() {
        let m = manifest(2, 1, 1);
        let t = make_trials(&m, 1, 2, 2, &mut rng::stream(0, "t", 0)).unwrap();
        assert_eq!(t.trials.len(), 4);
        assert!(matches!(
            make_trials(&m, 1, 3, 2, &mut rng::stream(0, "t", 0)),
            Err(Error::TrialCount { kind: "genuine", .. })
        ));
    }

    #[test]
    fn enroll_and_test_never_share_an_utterance() {
        let m = manifest(5, 2, 3);
        let t = make_trials(&m, 2, 15, 40, &mut rng::stream(0, "t", 0)).unwrap();
        let enrolled: BTreeSet<&String> = t.enrollment.values().flatten().collect();
        assert!(t.trials.iter().all(|x| !enrolled.contains(&x.test_utterance)));
        for x in &t.trials {
            let spk = x.test_utterance.split('_').next().unwrap();
            assert_eq!(x.genuine, spk == x.enroll_speaker);
        }
    }

    #[test]
    fn missing_enrollment_is_a_coverage_error() {
        let mut m = manifest(2, 1, 1);
        m.entries.retain(|e| !(e.speaker == "s1" && e.split == Split::Enroll));
        assert!(matches!(
            make_trials(&m, 1, 1, 1, &mut rng::stream(0, "t", 0)),
            Err(Error::Coverage(msg)) if msg.contains("s1")
        ));
    }

    #[test]
    fn trial_file_round_trip() {
        let m = manifest(3, 1, 2);
        let t = make_trials(&m, 1, 6, 12, &mut rng::stream(0, "t", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.tsv");
        write_trials(&p, &t.trials).unwrap();
        assert_eq!(read_trials(&p).unwrap(), t.trials);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn batch_invariants(seed in any::<u64>(), n in 2usize..12, n_samp in 1usize..40) {
            let utts = corpus(n, 3, 3300 + 37 * n);
            let b = sample_pair_batch(&utts, n_samp, 3200, &SamplerConfig::default(), &mut rng::stream(seed, "p", 0)).unwrap();
            prop_assert_eq!(b.len(), n_samp);
            for ((a, p), (a2, r)) in b.positives().zip(b.negatives()) {
                prop_assert_eq!(a, a2);
                prop_assert_eq!(a.utt, p.utt);
                prop_assert_ne!(a.utt, r.utt);
                for c in [a, p, r] {
                    prop_assert!(c.offset + 3200 <= utts[c.utt].samples.len());
                }
            }
        }
    }
}
