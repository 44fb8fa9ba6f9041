use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{read_wav, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Enroll,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "enroll" => Ok(Split::Enroll),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Enroll => "enroll",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker: String,
    /// Resolved path (relative entries are joined to the manifest directory).
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Sorted distinct speaker labels over the whole manifest.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.entries.iter().map(|e| e.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Parses `utterance_id \t speaker \t path \t split` lines. Blank lines and
/// lines starting with `#` are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(parse_err("empty field".into()));
        }
        let split: Split = fields[3].parse().map_err(parse_err)?;
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Uniqueness { id, line: lineno });
        }
        let p = Path::new(fields[2]);
        let resolved = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        };
        if !resolved.is_file() {
            return Err(parse_err(format!("audio file {} not found", resolved.display())));
        }
        entries.push(ManifestEntry {
            utterance_id: id,
            speaker: fields[1].to_string(),
            path: resolved,
            split,
        });
    }
    Ok(Manifest { entries })
}

/// Writes a manifest; paths under the manifest's directory are stored
/// relative to it.
pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::from("# utterance_id\tspeaker\tpath\tsplit\n");
    for e in &manifest.entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.utterance_id,
            e.speaker,
            p.display(),
            e.split
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the audio of every entry in `splits`, in manifest order.
pub fn load_corpus(manifest: &Manifest, splits: &[Split]) -> Result<Vec<Utterance>> {
    manifest
        .entries
        .iter()
        .filter(|e| splits.contains(&e.split))
        .map(|e| {
            let (samples, sample_rate) = read_wav(&e.path)?;
            Ok(Utterance {
                id: e.utterance_id.clone(),
                speaker: e.speaker.clone(),
                samples,
                sample_rate,
            })
        })
        .collect()
}
