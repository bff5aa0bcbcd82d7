//! Deployments: a pulled runtime checked out under the state root.
//!
//! ```text
//! <state>/<name>/<arch>/<version>/
//!     rofs/              checkout of the commit (hardlinks into the store)
//!     rwfs/              overlay upper layer: local edits
//!     tmpfs/             overlay work directory
//!     live/              merged view while a sandbox runs
//!     deployment.state   key=value lines: ref, resolved, commit, remote, deployed-at
//!     deployment.lock    serialises mutating operations
//!     sandbox.pid        present while a sandbox runs
//! ```
//!
//! The version directory is the one that was requested, so a deployment of
//! `…/latest` keeps that name across updates; `resolved` records the concrete
//! version last installed.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::casstore::{compute_tree_id, CheckoutMode, ObjectId, Repo};
use crate::error::{Error, Result};
use crate::fsutil::{self, WriteLock};
use crate::refmodel::RuntimeRef;
use crate::remote::{self, PullOptions};

pub const STATE_FILE: &str = "deployment.state";
pub const LOCK_FILE: &str = "deployment.lock";
pub const PID_FILE: &str = "sandbox.pid";
pub const LAYOUT_DIRS: [&str; 4] = ["rofs", "rwfs", "tmpfs", "live"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Deployment {
    /// The reference as requested, e.g. `…/latest`.
    pub reference: RuntimeRef,
    /// The concrete version checked out.
    pub resolved: RuntimeRef,
    pub base: PathBuf,
    pub commit: ObjectId,
    /// Remote the deployment was pulled from, if any.
    pub remote: Option<String>,
    /// Seconds since the epoch of the last deploy or update.
    pub deployed_at: i64,
}

/// A listed deployment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeploymentInfo {
    pub reference: RuntimeRef,
    pub commit: ObjectId,
    pub pristine: bool,
}

/// Directory of the deployment of `reference` under `state_root`.
pub fn base_for(state_root: &Path, reference: &RuntimeRef) -> PathBuf {
    state_root
        .join(reference.name())
        .join(reference.arch())
        .join(reference.version())
}

impl Deployment {
    /// Load the deployment of `reference`.
    pub fn open(state_root: &Path, reference: &RuntimeRef) -> Result<Deployment> {
        Deployment::load(&base_for(state_root, reference))?.ok_or_else(|| Error::NotDeployed {
            reference: reference.to_string(),
        })
    }

    fn load(base: &Path) -> Result<Option<Deployment>> {
        let path = base.join(STATE_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        };
        let corrupt = |reason: &str| Error::CorruptRepo {
            path: path.clone(),
            reason: reason.to_string(),
        };
        let fields: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let reference: RuntimeRef = fields
            .get("ref")
            .ok_or_else(|| corrupt("missing ref"))?
            .parse()
            .map_err(|_| corrupt("malformed ref"))?;
        let resolved = match fields.get("resolved") {
            Some(r) => r.parse().map_err(|_| corrupt("malformed resolved ref"))?,
            None => reference.clone(),
        };
        let commit = fields
            .get("commit")
            .ok_or_else(|| corrupt("missing commit"))?
            .parse()
            .map_err(|_| corrupt("malformed commit"))?;
        let deployed_at = fields
            .get("deployed-at")
            .and_then(|t| t.parse().ok())
            .unwrap_or(0);
        let remote = fields
            .get("remote")
            .filter(|r| !r.is_empty())
            .map(|r| r.to_string());
        Ok(Some(Deployment {
            reference,
            resolved,
            base: base.to_path_buf(),
            commit,
            remote,
            deployed_at,
        }))
    }

    fn save(&self) -> Result<()> {
        let mut text = format!(
            "ref={}\nresolved={}\ncommit={}\n",
            self.reference, self.resolved, self.commit
        );
        if let Some(remote) = &self.remote {
            text.push_str(&format!("remote={remote}\n"));
        }
        text.push_str(&format!("deployed-at={}\n", self.deployed_at));
        fsutil::atomic_write(&self.base.join(STATE_FILE), text.as_bytes())
    }

    pub fn rofs(&self) -> PathBuf {
        self.base.join("rofs")
    }

    pub fn rwfs(&self) -> PathBuf {
        self.base.join("rwfs")
    }

    pub fn tmpfs(&self) -> PathBuf {
        self.base.join("tmpfs")
    }

    pub fn live(&self) -> PathBuf {
        self.base.join("live")
    }

    pub fn pid_file(&self) -> PathBuf {
        self.base.join(PID_FILE)
    }

    /// Take the per-deployment lock.
    pub fn lock(&self) -> Result<WriteLock> {
        WriteLock::acquire(&self.base.join(LOCK_FILE))
    }

    /// Pid of the running sandbox. A pid file naming a dead process is removed.
    pub fn running_pid(&self) -> Result<Option<i32>> {
        let path = self.pid_file();
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        };
        match text.trim().parse::<i32>() {
            Ok(pid) if fsutil::pid_alive(pid) => Ok(Some(pid)),
            _ => {
                let _ = fs::remove_file(&path);
                Ok(None)
            }
        }
    }

    pub fn ensure_not_running(&self) -> Result<()> {
        match self.running_pid()? {
            Some(pid) => Err(Error::SandboxRunning {
                path: self.base.clone(),
                pid,
            }),
            None => Ok(()),
        }
    }

    /// Record `pid` as the running sandbox until the returned guard drops.
    /// Caller holds the deployment lock and has checked
    /// [`Deployment::ensure_not_running`].
    pub fn write_pid_file(&self, pid: i32) -> Result<PidFile> {
        let path = self.pid_file();
        fsutil::atomic_write(&path, format!("{pid}\n").as_bytes())?;
        Ok(PidFile { path, pid })
    }

    /// True when no local edits exist.
    pub fn is_pristine(&self) -> Result<bool> {
        let rwfs = self.rwfs();
        if !rwfs.exists() {
            return Ok(true);
        }
        fsutil::dir_is_empty(&rwfs)
    }

    /// Re-hash `rofs` and compare with the commit's tree.
    pub fn verify(&self, repo: &Repo) -> Result<bool> {
        let expected = repo.read_commit(&self.commit)?.tree;
        Ok(compute_tree_id(&self.rofs())? == expected)
    }
}

/// Removes the pid file on drop, unless another sandbox replaced it.
#[derive(Debug)]
pub struct PidFile {
    path: PathBuf,
    pid: i32,
}

impl Drop for PidFile {
    fn drop(&mut self) {
        if fs::read_to_string(&self.path).is_ok_and(|t| t.trim() == self.pid.to_string()) {
            let _ = fs::remove_file(&self.path);
        }
    }
}

fn now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

/// Find the commit for `resolved`: pulled from `remote`, or from local refs.
fn fetch_commit(
    repo: &Repo,
    remote: Option<&str>,
    resolved: &RuntimeRef,
    opts: &PullOptions,
) -> Result<ObjectId> {
    if let Some(remote) = remote {
        return remote::pull(repo, remote, resolved, opts);
    }
    if let Some(id) = repo.read_ref(resolved)? {
        return Ok(id);
    }
    repo.list_remote_refs()?
        .into_iter()
        .find(|(_, r, _)| r == resolved)
        .map(|(_, _, id)| id)
        .ok_or_else(|| Error::RefNotFound(resolved.to_string()))
}

/// Check `commit` out at `dest`, hardlinking when possible.
fn checkout_rofs(repo: &Repo, commit: &ObjectId, dest: &Path) -> Result<()> {
    fsutil::remove_tree(dest)?;
    match repo.checkout(commit, dest, CheckoutMode::Hardlink) {
        Err(Error::CrossDevice { .. }) => {
            fsutil::remove_tree(dest)?;
            repo.checkout(commit, dest, CheckoutMode::Copy)
        }
        other => other,
    }
    .inspect_err(|_| {
        let _ = fsutil::remove_tree(dest);
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::NotWritable {
        path: path.to_path_buf(),
        source,
    })
}

/// Pull `reference` (resolving `latest`) and lay it out under `state_root`.
/// Deploying the same commit again is a no-op.
pub fn deploy(
    repo: &Repo,
    state_root: &Path,
    remote: Option<&str>,
    reference: &RuntimeRef,
    opts: &PullOptions,
) -> Result<Deployment> {
    create_dir(state_root)?;
    fsutil::probe_xattrs(state_root)?;
    let resolved = remote::resolve_version(repo, remote, reference, opts)?;
    let commit = fetch_commit(repo, remote, &resolved, opts)?;

    let base = base_for(state_root, reference);
    create_dir(&base)?;
    let _lock = WriteLock::acquire(&base.join(LOCK_FILE))?;
    if let Some(existing) = Deployment::load(&base)? {
        if existing.commit == commit {
            return Ok(existing);
        }
        return Err(Error::AlreadyDeployed {
            reference: reference.to_string(),
            current: existing.commit,
        });
    }
    let staging = base.join("rofs.new");
    checkout_rofs(repo, &commit, &staging)?;
    let rofs = base.join("rofs");
    fsutil::remove_tree(&rofs)?;
    fs::rename(&staging, &rofs).map_err(|e| Error::io(format!("moving {} into place", rofs.display()), e))?;
    for dir in ["rwfs", "tmpfs", "live"] {
        create_dir(&base.join(dir))?;
    }
    let deployment = Deployment {
        reference: reference.clone(),
        resolved,
        base,
        commit,
        remote: remote.map(str::to_string),
        deployed_at: now(),
    };
    deployment.save()?;
    Ok(deployment)
}

/// Move to the newest commit of the deployment's ref. `rwfs` is kept.
/// Returns the new state and whether anything changed.
pub fn update(
    repo: &Repo,
    deployment: &Deployment,
    remote: Option<&str>,
    opts: &PullOptions,
) -> Result<(Deployment, bool)> {
    let _lock = deployment.lock()?;
    deployment.ensure_not_running()?;
    let remote = remote.or(deployment.remote.as_deref());
    let resolved = remote::resolve_version(repo, remote, &deployment.reference, opts)?;
    let commit = fetch_commit(repo, remote, &resolved, opts)?;
    if commit == deployment.commit {
        return Ok((deployment.clone(), false));
    }
    let staging = deployment.base.join("rofs.new");
    checkout_rofs(repo, &commit, &staging)?;
    swap_dirs(&staging, &deployment.rofs())?;
    fsutil::remove_tree(&staging)?;
    // The work directory only holds transient overlay state.
    fsutil::clear_dir(&deployment.tmpfs())?;
    let updated = Deployment {
        resolved,
        commit,
        remote: remote.map(str::to_string),
        deployed_at: now(),
        ..deployment.clone()
    };
    updated.save()?;
    Ok((updated, true))
}

/// Exchange two directories atomically where the kernel allows it.
fn swap_dirs(a: &Path, b: &Path) -> Result<()> {
    #[cfg(target_os = "linux")]
    {
        use std::ffi::CString;
        use std::os::unix::ffi::OsStrExt;
        let ca = CString::new(a.as_os_str().as_bytes()).map_err(|e| Error::io("path", e.into()))?;
        let cb = CString::new(b.as_os_str().as_bytes()).map_err(|e| Error::io("path", e.into()))?;
        // SAFETY: both paths are valid NUL-terminated strings.
        let rc = unsafe {
            libc::renameat2(
                libc::AT_FDCWD,
                ca.as_ptr(),
                libc::AT_FDCWD,
                cb.as_ptr(),
                libc::RENAME_EXCHANGE,
            )
        };
        if rc == 0 {
            return Ok(());
        }
        let err = io::Error::last_os_error();
        if !matches!(err.raw_os_error(), Some(libc::EINVAL) | Some(libc::ENOSYS)) {
            return Err(Error::io(
                format!("swapping {} and {}", a.display(), b.display()),
                err,
            ));
        }
    }
    // Fallback: two renames, briefly leaving `b` absent.
    let old = b.with_extension("old");
    fsutil::remove_tree(&old)?;
    fs::rename(b, &old).map_err(|e| Error::io(format!("moving {}", b.display()), e))?;
    fs::rename(a, b).map_err(|e| Error::io(format!("moving {}", a.display()), e))?;
    fs::rename(&old, a).map_err(|e| Error::io(format!("moving {}", old.display()), e))
}

/// Discard local edits.
pub fn reset(deployment: &Deployment) -> Result<()> {
    let _lock = deployment.lock()?;
    deployment.ensure_not_running()?;
    fsutil::clear_dir(&deployment.rwfs())?;
    fsutil::clear_dir(&deployment.tmpfs())
}

/// Delete the deployment directory. Store objects are kept.
pub fn remove(deployment: &Deployment) -> Result<()> {
    {
        let _lock = deployment.lock()?;
        deployment.ensure_not_running()?;
        fs::remove_file(deployment.base.join(STATE_FILE))
            .map_err(|e| Error::io(format!("removing {}", deployment.base.display()), e))?;
    }
    fsutil::remove_tree(&deployment.base)?;
    // Drop now-empty <arch> and <name> directories.
    for dir in deployment.base.ancestors().skip(1).take(2) {
        if fs::remove_dir(dir).is_err() {
            break;
        }
    }
    Ok(())
}

/// Every deployment under `state_root`, sorted by reference.
pub fn list_deployments(state_root: &Path) -> Result<Vec<DeploymentInfo>> {
    let mut out = Vec::new();
    for name in subdirs(state_root) {
        for arch in subdirs(&name) {
            for version in subdirs(&arch) {
                if let Some(d) = Deployment::load(&version)? {
                    out.push(DeploymentInfo {
                        pristine: d.is_pristine()?,
                        reference: d.reference,
                        commit: d.commit,
                    });
                }
            }
        }
    }
    out.sort_by_key(|d| d.reference.to_string());
    Ok(out)
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    entries
        .flatten()
        .filter(|e| e.file_type().is_ok_and(|t| t.is_dir()))
        .map(|e| e.path())
        .collect()
}
