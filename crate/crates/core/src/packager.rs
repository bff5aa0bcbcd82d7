//! Authoring new runtimes: prepare a tree, work inside it, commit it.
//!
//! An authoring tree is marked by `.runtimebox-work` at its top level. The
//! marker is line-oriented:
//!
//! ```text
//! runtimebox-work-v1
//! session <pid>        (only while an authoring sandbox is open)
//! ```
//!
//! The marker is never part of a committed tree.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::casstore::{ObjectId, Repo};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, pid_alive};
use crate::refmodel::{parse_manifest, RuntimeRef, MANIFEST_PATH};
use crate::sandbox::{self, Helper, HostContext};

pub const MARKER: &str = ".runtimebox-work";
const MARKER_FORMAT: &str = "runtimebox-work-v1";
const SKELETON_MANIFEST: &str = "[Core]\n\n[Meta]\n";

fn marker(tree: &Path) -> PathBuf {
    tree.join(MARKER)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn looks_like_root(tree: &Path) -> bool {
    ["bin", "usr/bin"].iter().any(|d| tree.join(d).is_dir())
}

/// Mark `tree` for authoring and add a skeleton manifest if it has none.
/// Returns whether anything was written.
pub fn initialise(tree: &Path) -> Result<bool> {
    if !tree.is_dir() || !looks_like_root(tree) {
        return Err(Error::NotARootTree {
            path: tree.to_path_buf(),
        });
    }
    let mut changed = false;
    if !marker(tree).is_file() {
        write_file(&marker(tree), &format!("{MARKER_FORMAT}\n"))?;
        changed = true;
    }
    let manifest = tree.join(MANIFEST_PATH);
    if fs::symlink_metadata(&manifest).is_err() {
        write_file(&manifest, SKELETON_MANIFEST)?;
        changed = true;
    }
    Ok(changed)
}

pub fn is_initialised(tree: &Path) -> bool {
    fs::read_to_string(marker(tree)).is_ok_and(|t| t.lines().next() == Some(MARKER_FORMAT))
}

fn require_initialised(tree: &Path) -> Result<()> {
    if is_initialised(tree) {
        Ok(())
    } else {
        Err(Error::NotInitialised {
            path: tree.to_path_buf(),
        })
    }
}

/// Pid of the open authoring session on `tree`, if one is alive.
pub fn session_pid(tree: &Path) -> Option<i32> {
    let text = fs::read_to_string(marker(tree)).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("session ")?.trim().parse().ok())
        .filter(|&pid| pid_alive(pid))
}

fn set_session(tree: &Path, pid: Option<i32>) -> Result<()> {
    let mut text = format!("{MARKER_FORMAT}\n");
    if let Some(pid) = pid {
        text.push_str(&format!("session {pid}\n"));
    }
    write_file(&marker(tree), &text)
}

/// Plan an authoring session: `tree` itself is the writable root.
pub fn author_plan(
    tree: &Path,
    cli_override: Option<&str>,
    host: &HostContext,
) -> Result<sandbox::ExecutionPlan> {
    require_initialised(tree)?;
    let tree = fs::canonicalize(tree).map_err(|e| Error::io(format!("resolving {}", tree.display()), e))?;
    sandbox::build_direct_plan(&tree, cli_override, host)
}

/// Open a sandbox with `tree` as its writable root and wait for it.
pub fn author_sandbox(
    tree: &Path,
    cli_override: Option<&str>,
    host: &HostContext,
    helper: &Helper,
) -> Result<i32> {
    let plan = author_plan(tree, cli_override, host)?;
    if let Some(pid) = session_pid(tree) {
        return Err(Error::SandboxRunning {
            path: tree.to_path_buf(),
            pid,
        });
    }
    set_session(tree, Some(std::process::id() as i32))?;
    let status = sandbox::run_plan(&plan, helper);
    // The session may have removed the marker; only restore it if present.
    if marker(tree).exists() {
        set_session(tree, None)?;
    }
    status
}

/// Snapshot `tree` (without the marker) as the next commit of `reference`.
pub fn commit_runtime(
    repo: &Repo,
    reference: &RuntimeRef,
    tree: &Path,
    subject: &str,
    timestamp: i64,
) -> Result<ObjectId> {
    require_initialised(tree)?;
    let manifest_path = tree.join(MANIFEST_PATH);
    let metadata = match fs::symlink_metadata(&manifest_path) {
        Ok(meta) if meta.is_file() => {
            let bytes = fs::read(&manifest_path)
                .map_err(|e| Error::io(format!("reading {}", manifest_path.display()), e))?;
            parse_manifest(&bytes)?.meta
        }
        Ok(_) => BTreeMap::new(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(Error::io(format!("inspecting {}", manifest_path.display()), e)),
    };
    let root = repo.store_tree_excluding(tree, &[MARKER])?;
    let parent = repo.read_ref(reference)?;
    if let Some(parent) = &parent {
        if repo.read_commit(parent)?.tree == root {
            return Err(Error::EmptyCommit {
                reference: reference.to_string(),
                tree: root,
            });
        }
    }
    let commit = repo.commit(&root, parent.as_ref(), subject, &metadata, timestamp)?;
    repo.update_ref(reference, &commit)?;
    Ok(commit)
}
