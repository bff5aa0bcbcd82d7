use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::casstore::object::{hash_bytes, CommitObject, EntryKind, TreeObject};
use crate::casstore::{
    file_mode, hash_file, object_rel_path, parse_ref_contents, ref_rel_path, ObjectId, ObjectKind, Repo,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::refmodel::RuntimeRef;

use super::transport::{Fetched, Transport};
use super::{fetch_text, get_remote, transport_for, with_retry, PullOptions};

#[derive(Debug, Clone, Copy)]
struct Want {
    id: ObjectId,
    kind: ObjectKind,
    executable: bool,
}

/// Fetch `reference` from the named remote and record it as
/// `refs/remotes/<remote>/<reference>`. Returns the commit id.
pub fn pull(repo: &Repo, remote: &str, reference: &RuntimeRef, opts: &PullOptions) -> Result<ObjectId> {
    let config = get_remote(repo, remote)?;
    let transport = transport_for(&config.url)?;
    pull_with(repo, transport.as_ref(), remote, reference, opts)
}

/// [`pull`] over an explicit transport.
pub fn pull_with(
    repo: &Repo,
    transport: &dyn Transport,
    remote: &str,
    reference: &RuntimeRef,
    opts: &PullOptions,
) -> Result<ObjectId> {
    let rel = ref_rel_path(reference);
    let text = fetch_text(transport, &rel, opts)?.ok_or_else(|| Error::RefNotFound(reference.to_string()))?;
    let commit = parse_ref_contents(&text).ok_or_else(|| Error::NetworkError {
        path: transport.locate(&rel),
        reason: "ref file does not contain a commit id".into(),
    })?;
    fetch_closure(repo, transport, &commit, opts)?;
    repo.update_remote_ref(remote, reference, &commit)?;
    Ok(commit)
}

/// Fetch everything reachable from `commit` that is absent locally.
///
/// Trees and commits are downloaded first into staging, walked breadth first,
/// then file objects are downloaded and admitted, and finally the staged
/// trees and commits are admitted children-first. The store therefore never
/// holds an object whose references are missing, even if the pull is killed,
/// and a rerun only repeats the (small) metadata downloads.
fn fetch_closure(
    repo: &Repo,
    transport: &dyn Transport,
    commit: &ObjectId,
    opts: &PullOptions,
) -> Result<()> {
    let mut staged: Vec<Staged> = Vec::new();
    let result = (|| {
        let mut seen = HashSet::new();
        let mut missing_files = Vec::new();
        let mut frontier = vec![Want {
            id: *commit,
            kind: ObjectKind::Commit,
            executable: false,
        }];
        seen.insert((*commit, ObjectKind::Commit));
        while !frontier.is_empty() {
            let missing: Vec<Want> = frontier
                .iter()
                .filter(|w| !repo.has_object(&w.id, w.kind))
                .copied()
                .collect();
            let mut downloaded = download_all(repo, transport, &missing, opts)?;

            let mut next = Vec::new();
            for want in &frontier {
                let bytes = match downloaded.remove(&(want.id, want.kind)) {
                    Some(path) => {
                        let bytes = fs::read(&path).map_err(|e| Error::io("reading download", e))?;
                        staged.push(Staged {
                            want: *want,
                            path,
                            children: Vec::new(),
                        });
                        Some(bytes)
                    }
                    None => None,
                };
                let children = children_of(repo, want, bytes.as_deref())?;
                if bytes.is_some() {
                    staged.last_mut().unwrap().children = children.iter().map(|c| (c.id, c.kind)).collect();
                }
                for child in children {
                    if !seen.insert((child.id, child.kind)) {
                        continue;
                    }
                    if child.kind == ObjectKind::File {
                        if !repo.has_object(&child.id, child.kind) {
                            missing_files.push(child);
                        }
                    } else {
                        next.push(child);
                    }
                }
            }
            frontier = next;
        }
        download_all(repo, transport, &missing_files, opts)?;
        admit_children_first(repo, &mut staged)
    })();
    for s in &staged {
        let _ = fs::remove_file(&s.path);
    }
    result
}

struct Staged {
    want: Want,
    path: std::path::PathBuf,
    children: Vec<(ObjectId, ObjectKind)>,
}

/// References of a tree or commit, read from `bytes` when it was just
/// downloaded or from the store otherwise.
fn children_of(repo: &Repo, want: &Want, bytes: Option<&[u8]>) -> Result<Vec<Want>> {
    let undecodable = |e: crate::casstore::object::DecodeError| Error::NetworkError {
        path: object_rel_path(&want.id, want.kind),
        reason: format!("object does not decode: {}", e.0),
    };
    let mut out = Vec::new();
    match want.kind {
        ObjectKind::Commit => {
            let commit = match bytes {
                Some(b) => CommitObject::decode(b).map_err(undecodable)?,
                None => repo.read_commit(&want.id)?,
            };
            out.push(Want {
                id: commit.tree,
                kind: ObjectKind::Tree,
                executable: false,
            });
            if let Some(parent) = commit.parent {
                out.push(Want {
                    id: parent,
                    kind: ObjectKind::Commit,
                    executable: false,
                });
            }
        }
        ObjectKind::Tree => {
            let tree = match bytes {
                Some(b) => TreeObject::decode(b).map_err(undecodable)?,
                None => repo.read_tree(&want.id)?,
            };
            for entry in tree.entries() {
                match entry.kind {
                    EntryKind::File { id, executable } => out.push(Want {
                        id,
                        kind: ObjectKind::File,
                        executable,
                    }),
                    EntryKind::Dir { id } => out.push(Want {
                        id,
                        kind: ObjectKind::Tree,
                        executable: false,
                    }),
                    EntryKind::Symlink { .. } => {}
                }
            }
        }
        ObjectKind::File => {}
    }
    Ok(out)
}

fn admit_children_first(repo: &Repo, staged: &mut Vec<Staged>) -> Result<()> {
    let _lock = repo.lock()?;
    while !staged.is_empty() {
        let before = staged.len();
        let mut i = 0;
        while i < staged.len() {
            let ready = staged[i]
                .children
                .iter()
                .all(|(id, kind)| repo.has_object(id, *kind));
            if ready {
                let s = staged.swap_remove(i);
                repo.admit(&s.path, &s.want.id, s.want.kind, 0o444)?;
            } else {
                i += 1;
            }
        }
        if staged.len() == before {
            return Err(Error::NetworkError {
                path: object_rel_path(&staged[0].want.id, staged[0].want.kind),
                reason: "object graph contains a cycle".into(),
            });
        }
    }
    Ok(())
}

/// Download `wants` concurrently. File objects are admitted as they arrive;
/// staged paths of trees and commits are returned for the caller to admit.
fn download_all(
    repo: &Repo,
    transport: &dyn Transport,
    wants: &[Want],
    opts: &PullOptions,
) -> Result<HashMap<(ObjectId, ObjectKind), std::path::PathBuf>> {
    let staged = Mutex::new(HashMap::new());
    if wants.is_empty() {
        return Ok(HashMap::new());
    }
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = opts.workers.clamp(1, wants.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let Some(want) = wants.get(next.fetch_add(1, Ordering::SeqCst)) else {
                    return;
                };
                let outcome = download_one(repo, transport, want, opts).and_then(|path| {
                    if want.kind == ObjectKind::File {
                        let _lock = repo.lock()?;
                        repo.admit(&path, &want.id, want.kind, file_mode(want.executable))
                    } else {
                        staged.lock().unwrap().insert((want.id, want.kind), path);
                        Ok(())
                    }
                });
                if let Err(e) = outcome {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
            });
        }
    });
    let staged = staged.into_inner().unwrap();
    match failure.into_inner().unwrap() {
        Some(e) => {
            for path in staged.values() {
                let _ = fs::remove_file(path);
            }
            Err(e)
        }
        None => Ok(staged),
    }
}

/// Download one object into staging and verify its digest.
fn download_one(
    repo: &Repo,
    transport: &dyn Transport,
    want: &Want,
    opts: &PullOptions,
) -> Result<std::path::PathBuf> {
    let rel = object_rel_path(&want.id, want.kind);
    let staged = fsutil::temp_name_in(&repo.tmp_dir(), "dl");
    let result = (|| {
        let fetched = with_retry(transport, &rel, opts, || {
            let mut file = File::create(&staged).map_err(|e| Error::io("creating download file", e))?;
            Ok(transport.fetch(&rel, &mut file))
        })?;
        if fetched == Fetched::NotFound {
            return Err(Error::IncompleteClosure {
                id: want.id,
                kind: want.kind.as_str(),
            });
        }
        let actual = match want.kind {
            ObjectKind::File => {
                let len = fs::metadata(&staged)
                    .map_err(|e| Error::io("inspecting download", e))?
                    .len();
                hash_file(&staged, want.executable, len)?
                    .ok_or_else(|| Error::io("hashing download", std::io::Error::other("file changed")))?
            }
            _ => hash_bytes(&fs::read(&staged).map_err(|e| Error::io("reading download", e))?),
        };
        if actual != want.id {
            return Err(Error::DigestMismatch { id: want.id, actual });
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(staged),
        Err(e) => {
            let _ = fs::remove_file(&staged);
            Err(e)
        }
    }
}
