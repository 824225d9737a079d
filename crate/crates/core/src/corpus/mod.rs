//! Corpus loading, synthetic corpus generation, and the on-disk formats
//! shared by the pipeline.
//!
//! All binary artifacts use little-endian payloads behind an 8-byte magic
//! plus a `u32` version; see [`files`] for the per-format layouts. Every
//! writer/reader pair round-trips exactly.

pub mod files;
pub mod synth;
pub mod wav;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use synth::{synth_corpus, SynthClass, SynthSpec};
pub use wav::{load_wav, write_wav};

/// A mono utterance. Samples are nominally in `[-1, 1]`; 16-bit PCM input
/// maps sample `s` to exactly `s / 32768`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub utt_id: String,
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidParameter("sample_rate must be > 0".into()));
        }
        if !self.samples.iter().all(|s| s.is_finite()) {
            return Err(Error::Input(format!(
                "waveform {} contains non-finite samples",
                self.utt_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub path: PathBuf,
    /// Attribute labels for the utterance (e.g. class/speaker/gender).
    pub attrs: BTreeMap<String, String>,
}

/// Utterance inventory: one audio path plus attribute labels per utterance.
///
/// Text format, one line per entry: `utt_id<TAB>path<TAB>key=value;key=value`,
/// sorted by utterance id. Relative audio paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        for pair in entries.windows(2) {
            if pair[0].utt_id == pair[1].utt_id {
                return Err(Error::Format(format!(
                    "duplicate utt_id {}",
                    pair[0].utt_id
                )));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serialize to the manifest text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let attrs: Vec<String> = e.attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                e.utt_id,
                e.path.display(),
                attrs.join(";")
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parse and validate a manifest. Every referenced audio path must be
    /// resolvable relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Dependency(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let manifest = Self::parse(&text)?;
        for e in &manifest.entries {
            if !resolve_audio_path(base, &e.path).is_file() {
                return Err(Error::Format(format!(
                    "manifest entry {} references missing file {}",
                    e.utt_id,
                    e.path.display()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let utt_id = fields.next().unwrap_or_default();
            let path = fields.next().ok_or_else(|| {
                Error::Format(format!("manifest line {}: missing path", lineno + 1))
            })?;
            let attr_field = fields.next().unwrap_or("");
            let mut attrs = BTreeMap::new();
            for kv in attr_field.split(';').filter(|s| !s.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::Format(format!(
                        "manifest line {}: bad attribute `{kv}`",
                        lineno + 1
                    ))
                })?;
                attrs.insert(k.to_string(), v.to_string());
            }
            entries.push(ManifestEntry {
                utt_id: utt_id.to_string(),
                path: PathBuf::from(path),
                attrs,
            });
        }
        Manifest::new(entries)
    }
}

/// Resolve a manifest audio path against the manifest's directory.
pub fn resolve_audio_path(manifest_dir: &Path, audio: &Path) -> PathBuf {
    if audio.is_absolute() {
        audio.to_path_buf()
    } else {
        manifest_dir.join(audio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_text_roundtrip() {
        let entries = vec![
            ManifestEntry {
                utt_id: "b".into(),
                path: PathBuf::from("wav/b.wav"),
                attrs: [("class".to_string(), "hi".to_string())]
                    .into_iter()
                    .collect(),
            },
            ManifestEntry {
                utt_id: "a".into(),
                path: PathBuf::from("wav/a.wav"),
                attrs: [
                    ("class".to_string(), "lo".to_string()),
                    ("speaker".to_string(), "s1".to_string()),
                ]
                .into_iter()
                .collect(),
            },
        ];
        let m = Manifest::new(entries).unwrap();
        assert_eq!(m.entries[0].utt_id, "a"); // sorted
        let text = m.to_text();
        assert_eq!(
            text,
            "a\twav/a.wav\tclass=lo;speaker=s1\nb\twav/b.wav\tclass=hi\n"
        );
        let back = Manifest::parse(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_duplicate_id_rejected() {
        let text = "a\tx.wav\t\na\ty.wav\t\n";
        assert!(matches!(Manifest::parse(text), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_load_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mpath = dir.path().join("manifest.tsv");
        std::fs::write(&mpath, "a\tmissing.wav\tclass=x\n").unwrap();
        assert!(matches!(Manifest::load(&mpath), Err(Error::Format(_))));
        std::fs::write(dir.path().join("missing.wav"), b"stub").unwrap();
        assert!(Manifest::load(&mpath).is_ok());
    }
}
