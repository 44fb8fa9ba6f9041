//! Audio ingestion, manifests, chunk framing, the synthetic speaker corpus
//! and synthetic reverberation.

mod framing;
mod manifest;
mod reverb;
mod synth;
mod wav;

pub use framing::{frame_chunks, Chunk, Framing};
pub use manifest::{load_corpus, load_manifest, write_manifest, Manifest, ManifestEntry, Split};
pub use reverb::{apply_reverb, convolve, make_rir, reverberate, rir_envelope};
pub use synth::{speaker_label, utterance_id, synth_corpus, synth_utterances, SpeakerProfile, SynthConfig};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16000;

/// A single-speaker recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Utterance {
    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}
