//! Evaluation fold construction: holdout-database (HDE) and
//! leave-one-subject-out (LOSO).

use std::collections::{BTreeMap, BTreeSet};

use super::{DataError, DatabaseTag, Manifest};

/// Train/test split by record index into the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub name: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Two folds: train on one database, test on the other, then reversed.
/// The manifest must contain exactly two distinct databases.
pub fn hde_protocol(manifest: &Manifest) -> Result<Vec<Fold>, DataError> {
    let databases: BTreeSet<DatabaseTag> =
        manifest.records.iter().map(|r| r.database).collect();
    if databases.len() < 2 {
        return Err(DataError::Protocol(format!(
            "HDE needs two databases, manifest has {}",
            databases.len()
        )));
    }
    if databases.len() > 2 {
        return Err(DataError::Protocol(format!(
            "HDE is a two-database protocol, manifest has {}",
            databases.len()
        )));
    }
    let dbs: Vec<DatabaseTag> = databases.into_iter().collect();
    let indices = |db: DatabaseTag| -> Vec<usize> {
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.database == db)
            .map(|(i, _)| i)
            .collect()
    };
    let (a, b) = (indices(dbs[0]), indices(dbs[1]));
    Ok(vec![
        Fold {
            name: format!("{}_to_{}", dbs[0], dbs[1]),
            train: a.clone(),
            test: b.clone(),
        },
        Fold {
            name: format!("{}_to_{}", dbs[1], dbs[0]),
            train: b,
            test: a,
        },
    ])
}

/// One fold per subject: that subject's samples are the test set. Folds are
/// ordered by subject id.
pub fn loso_protocol(manifest: &Manifest) -> Result<Vec<Fold>, DataError> {
    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_subject.entry(&r.subject_id).or_default().push(i);
    }
    if by_subject.len() < 2 {
        return Err(DataError::Protocol(format!(
            "LOSO needs at least two subjects, manifest has {}",
            by_subject.len()
        )));
    }
    Ok(by_subject
        .iter()
        .map(|(subject, test)| Fold {
            name: format!("loso_{subject}"),
            train: (0..manifest.records.len())
                .filter(|i| !test.contains(i))
                .collect(),
            test: test.clone(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::FramePositions;
    use crate::datahub::SampleRecord;
    use std::path::PathBuf;

    fn manifest(specs: &[(&str, &str, DatabaseTag)]) -> Manifest {
        Manifest {
            nodes: vec![1, 2],
            records: specs
                .iter()
                .map(|(id, subject, db)| SampleRecord {
                    sample_id: id.to_string(),
                    subject_id: subject.to_string(),
                    database: *db,
                    flow_path: PathBuf::from("x.oflw"),
                    au_labels: vec![0, 1],
                    class_label: 0,
                    positions: FramePositions::new(0, 1, 2).unwrap(),
                })
                .collect(),
            base_dir: PathBuf::from("."),
        }
    }

    #[test]
    fn hde_builds_two_reversed_folds() {
        let m = manifest(&[
            ("a", "s1", DatabaseTag::Casme2),
            ("b", "s2", DatabaseTag::Samm),
            ("c", "s3", DatabaseTag::Casme2),
        ]);
        let folds = hde_protocol(&m).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].name, "casme2_to_samm");
        assert_eq!(folds[0].train, vec![0, 2]);
        assert_eq!(folds[0].test, vec![1]);
        assert_eq!(folds[1].name, "samm_to_casme2");
        assert_eq!(folds[1].train, vec![1]);
        assert_eq!(folds[1].test, vec![0, 2]);
    }

    #[test]
    fn hde_rejects_single_database() {
        let m = manifest(&[("a", "s1", DatabaseTag::Synth), ("b", "s2", DatabaseTag::Synth)]);
        assert!(matches!(hde_protocol(&m), Err(DataError::Protocol(_))));
    }

    #[test]
    fn loso_partitions_by_subject() {
        let m = manifest(&[
            ("a", "s2", DatabaseTag::Synth),
            ("b", "s1", DatabaseTag::Synth),
            ("c", "s2", DatabaseTag::Synth),
        ]);
        let folds = loso_protocol(&m).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(folds[0].name, "loso_s1");
        assert_eq!(folds[0].test, vec![1]);
        assert_eq!(folds[0].train, vec![0, 2]);
        assert_eq!(folds[1].test, vec![0, 2]);

        // Disjoint and exhaustive.
        for fold in &folds {
            let mut all: Vec<usize> = fold.train.iter().chain(&fold.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2]);
        }
    }

    #[test]
    fn loso_rejects_single_subject() {
        let m = manifest(&[("a", "s1", DatabaseTag::Synth), ("b", "s1", DatabaseTag::Synth)]);
        assert!(matches!(loso_protocol(&m), Err(DataError::Protocol(_))));
    }
}
