use super::Utterance;
use crate::error::{Error, Result};

/// Chunking parameters. The hop is `chunk - overlap`; the defaults give
/// 3200-sample chunks every 3040 samples at 16 kHz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Framing {
    pub chunk_ms: f64,
    pub overlap_ms: f64,
    pub sample_rate: u32,
}

impl Default for Framing {
    fn default() -> Self {
        Framing {
            chunk_ms: 200.0,
            overlap_ms: 10.0,
            sample_rate: super::SAMPLE_RATE,
        }
    }
}

impl Framing {
    pub fn chunk_len(&self) -> usize {
        (self.chunk_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        let overlap = (self.overlap_ms * self.sample_rate as f64 / 1000.0).round() as usize;
        self.chunk_len().saturating_sub(overlap).max(1)
    }

    /// Number of whole chunks in `len` samples (0 if shorter than a chunk).
    pub fn count(&self, len: usize) -> usize {
        let n = self.chunk_len();
        if len < n {
            0
        } else {
            (len - n) / self.hop() + 1
        }
    }
}

/// A fixed-length window into an utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chunk<'a> {
    pub utterance_id: &'a str,
    pub offset: usize,
    pub samples: &'a [f32],
}

/// Splits an utterance into consecutive chunks; the trailing remainder is
/// dropped.
pub fn frame_chunks<'a>(utt: &'a Utterance, framing: &Framing) -> Result<Vec<Chunk<'a>>> {
    let n = framing.chunk_len();
    let count = framing.count(utt.samples.len());
    if count == 0 {
        return Err(Error::TooShort {
            id: utt.id.clone(),
            len: utt.samples.len(),
            chunk: n,
        });
    }
    let hop = framing.hop();
    Ok((0..count)
        .map(|k| {
            let offset = k * hop;
            Chunk {
                utterance_id: &utt.id,
                offset,
                samples: &utt.samples[offset..offset + n],
            }
        })
        .collect())
}
