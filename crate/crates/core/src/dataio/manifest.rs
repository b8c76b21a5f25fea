//! Line-delimited dataset manifests. Each line is a JSON record pointing
//! at a window of a recording plus its task and class label; recordings
//! are referenced by path relative to the manifest file.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataIoError, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub recording: String,
    pub offset: u64,
    pub task: String,
    pub label: usize,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|e| DataIoError::Format(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// A validated dataset: entries whose task exists, whose label is in range
/// for that task, and whose recording file is present on disk.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub entries: Vec<ManifestEntry>,
    /// Absolute (manifest-relative resolved) recording paths, one per entry.
    pub recording_paths: Vec<PathBuf>,
}

/// Read and validate a manifest. `task_classes` maps a task id to its
/// class count; unknown tasks, out-of-range labels, and missing recording
/// files are errors that carry the offending line number.
pub fn read_instruction_manifest(
    path: &Path,
    task_classes: &dyn Fn(&str) -> Option<usize>,
) -> Result<ManifestDataset> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut recording_paths = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            DataIoError::ManifestLine { line: lineno, detail: e.to_string() }
        })?;
        let n_classes = task_classes(&entry.task).ok_or_else(|| DataIoError::ManifestLine {
            line: lineno,
            detail: format!("unknown task {:?}", entry.task),
        })?;
        if entry.label >= n_classes {
            return Err(DataIoError::ManifestLine {
                line: lineno,
                detail: format!(
                    "label {} out of range for task {:?} with {} classes",
                    entry.label, entry.task, n_classes
                ),
            });
        }
        let rec_path = base.join(&entry.recording);
        if !rec_path.is_file() {
            return Err(DataIoError::ManifestLine {
                line: lineno,
                detail: format!("missing recording file {:?}", rec_path),
            });
        }
        entries.push(entry);
        recording_paths.push(rec_path);
    }
    Ok(ManifestDataset { entries, recording_paths })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(task: &str) -> Option<usize> {
        match task {
            "abnormal" => Some(2),
            "event" => Some(6),
            _ => None,
        }
    }

    #[test]
    fn roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let rec = dir.path().join("r0.nlm");
        std::fs::write(&rec, b"placeholder").unwrap();
        let manifest = dir.path().join("train.manifest");
        let entries = vec![
            ManifestEntry { recording: "r0.nlm".into(), offset: 0, task: "abnormal".into(), label: 1 },
            ManifestEntry { recording: "r0.nlm".into(), offset: 800, task: "event".into(), label: 5 },
        ];
        write_manifest(&manifest, &entries).unwrap();
        let ds = read_instruction_manifest(&manifest, &classes).unwrap();
        assert_eq!(ds.entries, entries);
        assert!(ds.recording_paths[0].ends_with("r0.nlm"));
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("empty.manifest");
        std::fs::write(&manifest, "").unwrap();
        let ds = read_instruction_manifest(&manifest, &classes).unwrap();
        assert!(ds.entries.is_empty());
    }

    #[test]
    fn bad_label_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let rec = dir.path().join("r0.nlm");
        std::fs::write(&rec, b"x").unwrap();
        let manifest = dir.path().join("bad.manifest");
        let entries = vec![
            ManifestEntry { recording: "r0.nlm".into(), offset: 0, task: "abnormal".into(), label: 0 },
            ManifestEntry { recording: "r0.nlm".into(), offset: 0, task: "abnormal".into(), label: 9 },
        ];
        write_manifest(&manifest, &entries).unwrap();
        match read_instruction_manifest(&manifest, &classes) {
            Err(DataIoError::ManifestLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_task_and_missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.manifest");
        write_manifest(
            &manifest,
            &[ManifestEntry { recording: "r0.nlm".into(), offset: 0, task: "nope".into(), label: 0 }],
        )
        .unwrap();
        assert!(matches!(
            read_instruction_manifest(&manifest, &classes),
            Err(DataIoError::ManifestLine { line: 1, .. })
        ));

        let rec_missing = vec![ManifestEntry {
            recording: "gone.nlm".into(),
            offset: 0,
            task: "abnormal".into(),
            label: 0,
        }];
        write_manifest(&manifest, &rec_missing).unwrap();
        assert!(matches!(
            read_instruction_manifest(&manifest, &classes),
            Err(DataIoError::ManifestLine { line: 1, .. })
        ));
    }
}
