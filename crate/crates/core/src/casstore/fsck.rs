use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::os::unix::fs::MetadataExt;

use serde::Serialize;

use super::object::{hash_bytes, CommitObject, EntryKind, TreeObject};
use super::{hash_file, is_executable, ObjectId, ObjectKind, Repo};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorruptObject {
    pub id: ObjectId,
    pub kind: ObjectKind,
    pub reason: String,
}

/// `from` refers to `missing`, which is not in the store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DanglingReference {
    pub from: String,
    pub missing: ObjectId,
    pub kind: ObjectKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FsckReport {
    pub objects_scanned: usize,
    pub digest_mismatches: Vec<CorruptObject>,
    pub dangling: Vec<DanglingReference>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.digest_mismatches.is_empty() && self.dangling.is_empty()
    }
}

impl fmt::Display for FsckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} objects scanned, {} corrupt, {} dangling",
            self.objects_scanned,
            self.digest_mismatches.len(),
            self.dangling.len()
        )?;
        for c in &self.digest_mismatches {
            write!(f, "; corrupt {}.{}: {}", c.id, c.kind, c.reason)?;
        }
        for d in &self.dangling {
            write!(f, "; {} -> missing {}.{}", d.from, d.missing, d.kind)?;
        }
        Ok(())
    }
}

impl Serialize for ObjectKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

pub(super) fn run(repo: &Repo) -> Result<FsckReport> {
    let objects = repo.list_objects()?;
    let mut report = FsckReport {
        objects_scanned: objects.len(),
        ..Default::default()
    };
    let present: HashSet<(ObjectId, ObjectKind)> = objects.iter().copied().collect();
    let mut references: Vec<(String, ObjectId, ObjectKind)> = Vec::new();

    for (id, kind) in &objects {
        let path = repo.object_path(id, *kind);
        let corrupt = |reason: String| CorruptObject {
            id: *id,
            kind: *kind,
            reason,
        };
        match kind {
            ObjectKind::File => {
                let meta = fs::metadata(&path)
                    .map_err(|e| Error::io(format!("inspecting {}", path.display()), e))?;
                match hash_file(&path, is_executable(meta.mode()), meta.len())? {
                    Some(actual) if actual == *id => {}
                    Some(actual) => report
                        .digest_mismatches
                        .push(corrupt(format!("digest is {actual}"))),
                    None => report
                        .digest_mismatches
                        .push(corrupt("file changed during scan".into())),
                }
            }
            ObjectKind::Tree | ObjectKind::Commit => {
                let bytes =
                    fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                let actual = hash_bytes(&bytes);
                if actual != *id {
                    // A corrupt object's references are untrustworthy; don't follow them.
                    report
                        .digest_mismatches
                        .push(corrupt(format!("digest is {actual}")));
                    continue;
                }
                let from = format!("{id}.{kind}");
                if *kind == ObjectKind::Tree {
                    let tree = TreeObject::decode(&bytes).map_err(|e| corrupt(e.0));
                    match tree {
                        Ok(tree) => {
                            for entry in tree.entries() {
                                match &entry.kind {
                                    EntryKind::File { id, .. } => {
                                        references.push((from.clone(), *id, ObjectKind::File))
                                    }
                                    EntryKind::Dir { id } => {
                                        references.push((from.clone(), *id, ObjectKind::Tree))
                                    }
                                    EntryKind::Symlink { .. } => {}
                                }
                            }
                        }
                        Err(c) => report.digest_mismatches.push(c),
                    }
                } else {
                    match CommitObject::decode(&bytes) {
                        Ok(commit) => {
                            references.push((from.clone(), commit.tree, ObjectKind::Tree));
                            if let Some(parent) = commit.parent {
                                references.push((from, parent, ObjectKind::Commit));
                            }
                        }
                        Err(e) => report.digest_mismatches.push(corrupt(e.0)),
                    }
                }
            }
        }
    }

    for (reference, id) in repo.list_refs()? {
        references.push((format!("refs/{reference}"), id, ObjectKind::Commit));
    }
    for (remote, reference, id) in repo.list_remote_refs()? {
        references.push((
            format!("refs/remotes/{remote}/{reference}"),
            id,
            ObjectKind::Commit,
        ));
    }

    let mut seen = HashSet::new();
    for (from, missing, kind) in references {
        if !present.contains(&(missing, kind)) && seen.insert((from.clone(), missing, kind)) {
            report.dangling.push(DanglingReference { from, missing, kind });
        }
    }
    Ok(report)
}
