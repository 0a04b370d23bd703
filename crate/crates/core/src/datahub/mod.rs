//! Dataset plumbing: manifests, the binary flow format, the synthetic
//! generator that stands in for the license-restricted source databases, and
//! the evaluation protocols.
//!
//! Adapters for real CASME II / SAMM directory layouts would slot in behind
//! [`Manifest`]; they are documented in the README and intentionally not
//! implemented here.

mod flow;
mod protocol;
mod synth;

pub use flow::{read_flow, write_flow, FlowField};
pub use protocol::{hde_protocol, loso_protocol, Fold};
pub use synth::{au_template, synth_dataset, SynthSpec};

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::augment::FramePositions;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("record `{id}`: {reason}")]
    Validation { id: String, reason: String },
    #[error("record `{id}`: flow file {path} missing")]
    MissingFlow { id: String, path: PathBuf },
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Source database of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DatabaseTag {
    Casme2,
    Samm,
    Synth,
}

impl DatabaseTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatabaseTag::Casme2 => "casme2",
            DatabaseTag::Samm => "samm",
            DatabaseTag::Synth => "synth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "casme2" => Some(DatabaseTag::Casme2),
            "samm" => Some(DatabaseTag::Samm),
            "synth" => Some(DatabaseTag::Synth),
            _ => None,
        }
    }
}

impl fmt::Display for DatabaseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One micro-expression instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub subject_id: String,
    pub database: DatabaseTag,
    /// Relative to the manifest's directory.
    pub flow_path: PathBuf,
    /// Multi-hot over the manifest's node order.
    pub au_labels: Vec<u8>,
    /// Objective class, 0-based (0..=4 for classes I..V).
    pub class_label: usize,
    pub positions: FramePositions,
}

/// A dataset: node order shared by every record plus the records themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub nodes: Vec<u32>,
    pub records: Vec<SampleRecord>,
    /// Directory that relative flow paths resolve against.
    pub base_dir: PathBuf,
}

pub const MANIFEST_CLASSES: usize = 5;

impl Manifest {
    pub fn au_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn flow_path(&self, record: &SampleRecord) -> PathBuf {
        self.base_dir.join(&record.flow_path)
    }

    /// Header plus one tab-separated record per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let ids: Vec<String> = self.nodes.iter().map(|n| n.to_string()).collect();
        out.push_str(&format!(
            "AUMANIFEST v1 K={} nodes={}\n",
            self.nodes.len(),
            ids.join(",")
        ));
        for r in &self.records {
            let bits: String = r.au_labels.iter().map(|&b| char::from(b'0' + b)).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.sample_id,
                r.subject_id,
                r.database,
                r.flow_path.display(),
                bits,
                r.class_label,
                r.positions.onset,
                r.positions.apex,
                r.positions.offset,
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.serialize()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Full validation: header sanity, unique ids, label widths, class range,
    /// ordered frame positions, and existence of every referenced flow file.
    pub fn validate(&self) -> Result<(), DataError> {
        let k = self.nodes.len();
        if k == 0 {
            return Err(DataError::Spec("empty node list".into()));
        }
        for w in self.nodes.windows(2) {
            if w[0] >= w[1] {
                return Err(DataError::Spec(
                    "node ids must be strictly ascending".into(),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.sample_id.clone()) {
                return Err(DataError::Validation {
                    id: r.sample_id.clone(),
                    reason: "duplicate sample id".into(),
                });
            }
            if r.au_labels.len() != k {
                return Err(DataError::Validation {
                    id: r.sample_id.clone(),
                    reason: format!("label length {} != K={k}", r.au_labels.len()),
                });
            }
            if r.au_labels.iter().any(|&b| b > 1) {
                return Err(DataError::Validation {
                    id: r.sample_id.clone(),
                    reason: "labels must be 0/1".into(),
                });
            }
            if r.class_label >= MANIFEST_CLASSES {
                return Err(DataError::Validation {
                    id: r.sample_id.clone(),
                    reason: format!("class {} out of range", r.class_label),
                });
            }
            let flow = self.flow_path(r);
            if !flow.is_file() {
                return Err(DataError::MissingFlow {
                    id: r.sample_id.clone(),
                    path: flow,
                });
            }
        }
        Ok(())
    }
}

/// Parse and fully validate a manifest file.
pub fn parse_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = parse_manifest_text(&text, path, base_dir)?;
    manifest.validate()?;
    Ok(manifest)
}

fn parse_manifest_text(text: &str, src: &Path, base_dir: PathBuf) -> Result<Manifest, DataError> {
    let bad = |reason: String| DataError::Format {
        path: src.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let rest = header
        .strip_prefix("AUMANIFEST v1 K=")
        .ok_or_else(|| bad(format!("bad header `{header}`")))?;
    let (k_str, nodes_str) = rest
        .split_once(" nodes=")
        .ok_or_else(|| bad("header missing nodes=".into()))?;
    let k: usize = k_str
        .trim()
        .parse()
        .map_err(|_| bad(format!("bad K `{k_str}`")))?;
    let nodes: Vec<u32> = nodes_str
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad(format!("bad node `{t}`"))))
        .collect::<Result<_, _>>()?;
    if nodes.len() != k {
        return Err(bad(format!("K={k} but {} node ids", nodes.len())));
    }

    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(bad(format!(
                "record line {}: expected 9 tab-separated fields, got {}",
                idx + 2,
                fields.len()
            )));
        }
        let sample_id = fields[0].to_string();
        let vield = |reason: String| DataError::Validation {
            id: sample_id.clone(),
            reason,
        };
        let database = DatabaseTag::parse(fields[2])
            .ok_or_else(|| vield(format!("unknown database tag `{}`", fields[2])))?;
        let au_labels: Vec<u8> = fields[4]
            .bytes()
            .map(|b| match b {
                b'0' => Ok(0u8),
                b'1' => Ok(1u8),
                other => Err(vield(format!("bad label bit `{}`", other as char))),
            })
            .collect::<Result<_, _>>()?;
        let class_label: usize = fields[5]
            .parse()
            .map_err(|_| vield(format!("bad class `{}`", fields[5])))?;
        let pos: Vec<u32> = fields[6..9]
            .iter()
            .map(|t| t.parse().map_err(|_| vield(format!("bad frame index `{t}`"))))
            .collect::<Result<_, _>>()?;
        let positions = FramePositions::new(pos[0], pos[1], pos[2])
            .map_err(|e| vield(e.to_string()))?;
        records.push(SampleRecord {
            sample_id,
            subject_id: fields[1].to_string(),
            database,
            flow_path: PathBuf::from(fields[3]),
            au_labels,
            class_label,
            positions,
        });
    }
    Ok(Manifest {
        nodes,
        records,
        base_dir,
    })
}

/// Re-express a multi-hot label vector over a different node order; AUs not
/// present in the target order are dropped, new ones read as absent.
pub fn project_labels(labels: &[u8], from_nodes: &[u32], to_nodes: &[u32]) -> Vec<u8> {
    to_nodes
        .iter()
        .map(|au| {
            from_nodes
                .iter()
                .position(|f| f == au)
                .map(|i| labels[i])
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest(dir: &Path) -> Manifest {
        let flow = FlowField::from_raw(2, 2, vec![0.0; 8]);
        for name in ["a.oflw", "b.oflw", "c.oflw"] {
            write_flow(&dir.join(name), &flow).unwrap();
        }
        Manifest {
            nodes: vec![1, 2, 4],
            records: vec![
                SampleRecord {
                    sample_id: "s1".into(),
                    subject_id: "p01".into(),
                    database: DatabaseTag::Synth,
                    flow_path: "a.oflw".into(),
                    au_labels: vec![1, 0, 1],
                    class_label: 0,
                    positions: FramePositions::new(0, 5, 9).unwrap(),
                },
                SampleRecord {
                    sample_id: "s2".into(),
                    subject_id: "p02".into(),
                    database: DatabaseTag::Synth,
                    flow_path: "b.oflw".into(),
                    au_labels: vec![0, 1, 0],
                    class_label: 1,
                    positions: FramePositions::new(0, 4, 8).unwrap(),
                },
                SampleRecord {
                    sample_id: "s3".into(),
                    subject_id: "p01".into(),
                    database: DatabaseTag::Casme2,
                    flow_path: "c.oflw".into(),
                    au_labels: vec![1, 1, 0],
                    class_label: 4,
                    positions: FramePositions::new(1, 3, 6).unwrap(),
                },
            ],
            base_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn well_formed_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = toy_manifest(dir.path());
        let path = dir.path().join("manifest.txt");
        manifest.write(&path).unwrap();

        let parsed = parse_manifest(&path).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(parsed, manifest);

        // Fixed point: serialize(parse(serialize(m))) == serialize(m).
        let again_path = dir.path().join("again.txt");
        parsed.write(&again_path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            std::fs::read_to_string(&again_path).unwrap()
        );
    }

    #[test]
    fn duplicate_sample_id_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.records[1].sample_id = "s1".into();
        let err = manifest.validate().unwrap_err();
        match err {
            DataError::Validation { id, .. } => assert_eq!(id, "s1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_width_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.records[0].au_labels = vec![1, 0];
        assert!(matches!(
            manifest.validate(),
            Err(DataError::Validation { .. })
        ));
    }

    #[test]
    fn missing_flow_file_is_io_class_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = toy_manifest(dir.path());
        manifest.records[2].flow_path = "gone.oflw".into();
        assert!(matches!(
            manifest.validate(),
            Err(DataError::MissingFlow { .. })
        ));
    }

    #[test]
    fn label_projection_drops_and_zero_fills() {
        let from = vec![1, 2, 4];
        let to = vec![2, 4, 9];
        assert_eq!(project_labels(&[1, 0, 1], &from, &to), vec![0, 1, 0]);
    }
}
