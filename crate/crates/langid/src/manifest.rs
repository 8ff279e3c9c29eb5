//! Manifest I/O: one JSON record per line describing a labeled audio segment.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labeled audio segment. `audio_filepath` may be relative, in which
/// case it is resolved against the directory the manifest was read from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub audio_filepath: String,
    #[serde(default)]
    pub offset: f64,
    pub duration: f64,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recording_id: Option<String>,
}

impl UtteranceRecord {
    /// Grouping key for leakage-free splits: the recording id when present,
    /// otherwise the audio path.
    pub fn recording_key(&self) -> &str {
        self.recording_id
            .as_deref()
            .unwrap_or(&self.audio_filepath)
    }
}

/// Ordered list of utterance records plus the directory they resolve
/// relative paths against.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: Option<PathBuf>,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>) -> Self {
        Manifest {
            records,
            base_dir: None,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            if rec.duration <= 0.0 {
                return Err(Error::Manifest(format!(
                    "{}:{}: non-positive duration {}",
                    path.display(),
                    lineno + 1,
                    rec.duration
                )));
            }
            records.push(rec);
        }
        Ok(Manifest {
            records,
            base_dir: path.parent().map(Path::to_path_buf),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // Relative audio paths only stay valid if the manifest lands in the
        // directory they are relative to; otherwise pin them down.
        let keep_relative = match (&self.base_dir, path.parent()) {
            (Some(base), Some(parent)) => base == parent,
            (None, _) => true,
            _ => false,
        };
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for rec in &self.records {
            let mut rec = rec.clone();
            if !keep_relative && !Path::new(&rec.audio_filepath).is_absolute() {
                rec.audio_filepath = self
                    .resolve_path(&rec)
                    .to_string_lossy()
                    .into_owned();
            }
            let line = serde_json::to_string(&rec)
                .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Absolute path for one record.
    pub fn resolve_path(&self, rec: &UtteranceRecord) -> PathBuf {
        let p = Path::new(&rec.audio_filepath);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            match &self.base_dir {
                Some(base) => base.join(p),
                None => p.to_path_buf(),
            }
        }
    }

    /// Distinct labels in sorted order.
    pub fn labels(&self) -> Vec<String> {
        let mut set: Vec<String> = self.records.iter().map(|r| r.label.clone()).collect();
        set.sort();
        set.dedup();
        set
    }

    /// Record count per label.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for rec in &self.records {
            *counts.entry(rec.label.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// New manifest with the same base_dir and the given records.
    pub fn with_records(&self, records: Vec<UtteranceRecord>) -> Manifest {
        Manifest {
            records,
            base_dir: self.base_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, label: &str, dur: f64) -> UtteranceRecord {
        UtteranceRecord {
            audio_filepath: path.to_string(),
            offset: 0.0,
            duration: dur,
            label: label.to_string(),
            recording_id: None,
        }
    }

    #[test]
    fn roundtrip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = Manifest::new(vec![rec("a.wav", "en", 1.0), rec("b.wav", "zh", 2.5)]);
        m.write(&path).unwrap();
        let back = Manifest::read(&path).unwrap();
        assert_eq!(back.records, m.records);
        assert_eq!(back.base_dir.as_deref(), Some(dir.path()));
    }

    #[test]
    fn field_names_are_exact() {
        let line = serde_json::to_string(&rec("x.wav", "en", 0.5)).unwrap();
        assert!(line.contains("\"audio_filepath\""));
        assert!(line.contains("\"offset\""));
        assert!(line.contains("\"duration\""));
        assert!(line.contains("\"label\""));
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let m = Manifest {
            records: vec![rec("wavs/a.wav", "en", 1.0)],
            base_dir: Some(PathBuf::from("/data/corpus")),
        };
        assert_eq!(
            m.resolve_path(&m.records[0]),
            PathBuf::from("/data/corpus/wavs/a.wav")
        );
    }

    #[test]
    fn labels_sorted_and_counted() {
        let m = Manifest::new(vec![
            rec("a", "zh", 1.0),
            rec("b", "en", 1.0),
            rec("c", "zh", 1.0),
        ]);
        assert_eq!(m.labels(), vec!["en", "zh"]);
        assert_eq!(m.label_counts()["zh"], 2);
    }

    #[test]
    fn rejects_non_positive_duration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"audio_filepath\":\"a.wav\",\"duration\":0.0,\"label\":\"en\"}\n",
        )
        .unwrap();
        assert!(Manifest::read(&path).is_err());
    }
}
