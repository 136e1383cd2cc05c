use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Category,
    Caption,
    Unlabelled,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Category, Source::Caption, Source::Unlabelled];

    pub fn name(self) -> &'static str {
        match self {
            Source::Category => "category",
            Source::Caption => "caption",
            Source::Unlabelled => "unlabelled",
        }
    }
}

/// One line of a JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub source: Source,
    /// Multi-hot class vector; only for category records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    /// `[BOS, w_1 .. w_T, EOS]`; only for caption records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
}

impl SampleRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        match (self.source, &self.labels, &self.tokens) {
            (Source::Category, Some(labels), None) => {
                if labels.is_empty() || labels.iter().any(|&v| v > 1) {
                    return Err(format!("labels {labels:?} must be a non-empty 0/1 vector"));
                }
            }
            (Source::Caption, None, Some(tokens)) => {
                if tokens.len() < 2 {
                    return Err("a caption needs at least BOS and EOS".into());
                }
            }
            (Source::Unlabelled, None, None) => {}
            (s, l, t) => {
                return Err(format!(
                    "{} record with labels {} and tokens {}",
                    s.name(),
                    if l.is_some() { "present" } else { "absent" },
                    if t.is_some() { "present" } else { "absent" }
                ))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Relative paths in records are resolved against this directory.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn by_source(&self, source: Source) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.source == source).collect()
    }

    pub fn count(&self, source: Source) -> usize {
        self.records.iter().filter(|r| r.source == source).count()
    }
}

/// Reads and validates a JSON-lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest { path: path.to_path_buf(), line: i + 1, msg };
        let record: SampleRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        record.validate().map_err(err)?;
        records.push(record);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest { root, records };
    if manifest.records.is_empty() {
        log::warn!("manifest {} holds no records", path.display());
    } else {
        log::info!(
            "{}: {} category, {} caption, {} unlabelled records",
            path.display(),
            manifest.count(Source::Category),
            manifest.count(Source::Caption),
            manifest.count(Source::Unlabelled)
        );
    }
    Ok(manifest)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_file_partitions_by_source() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","image":"a.png","source":"category","labels":[0,1,0,0]}"#,
                "\n",
                r#"{"id":"b","image":"b.png","source":"caption","tokens":[1,5,2]}"#,
                "\n\n",
                r#"{"id":"c","image":"/abs/c.png","source":"unlabelled","gt_mask":"c_mask.png"}"#,
                "\n"
            ),
        )
        .unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(
            Source::ALL.map(|s| m.count(s)),
            [1, 1, 1]
        );
        assert_eq!(m.resolve(&m.records[0].image), dir.path().join("a.png"));
        assert_eq!(m.resolve(&m.records[2].image), PathBuf::from("/abs/c.png"));

        let copy = dir.path().join("copy.jsonl");
        write_manifest(&copy, &m.records).unwrap();
        assert_eq!(load_manifest(&copy).unwrap().records, m.records);
    }

    #[test]
    fn empty_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().records.is_empty());
    }

    #[test]
    fn invariant_violations_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","image":"a.png","source":"unlabelled"}"#,
                "\n",
                r#"{"id":"b","image":"b.png","source":"category","labels":[1],"tokens":[1,2]}"#,
                "\n"
            ),
        )
        .unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");

        std::fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), Error::Manifest { line: 1, .. }));

        std::fs::write(&path, r#"{"id":"a","image":"a.png","source":"caption"}"#).unwrap();
        assert!(load_manifest(&path).is_err());
    }
}
