//! Content-addressed repository of filesystem trees.
//!
//! On-disk layout:
//!
//! ```text
//! <repo>/config                                  first line: runtimebox-repo-v1
//! <repo>/objects/<2 hex>/<62 hex>.<file|tree|commit>
//! <repo>/refs/<name>/<arch>/<version>             one 64-hex line
//! <repo>/refs/remotes/<remote>/<name>/<arch>/<version>
//! <repo>/lock                                     writer lock
//! <repo>/tmp/                                     staging for new objects
//! ```
//!
//! File objects hold raw file content, so checkouts can hardlink them. Their
//! id is the SHA-256 of the canonical encoding described in [`object`], which
//! covers the content and the executable bit and nothing else.
//!
//! Mutations take the writer lock and stage through `tmp/` before a rename,
//! so readers never observe partial objects or refs.

mod fsck;
pub mod object;

use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use self::fsck::{CorruptObject, DanglingReference, FsckReport};
use self::object::{hash_bytes, CommitObject, EntryKind, FileHasher, TreeEntry, TreeObject};
use crate::error::{Error, Result};
use crate::fsutil::{self, WriteLock};
use crate::refmodel::RuntimeRef;

/// First line of `<repo>/config`.
pub const REPO_FORMAT: &str = "runtimebox-repo-v1";

/// Top-level directory under `refs/` holding remote-tracking refs. Not
/// usable as a local runtime name.
pub const REMOTE_REFS_DIR: &str = "remotes";

const COPY_BUF: usize = 64 * 1024;

/// SHA-256 digest of an object's canonical encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub(crate) [u8; 32]);

impl ObjectId {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        ObjectId(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First 12 hex digits, for tables.
    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseObjectIdError(String);

impl fmt::Display for ParseObjectIdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid object id {:?}", self.0)
    }
}

impl std::error::Error for ParseObjectIdError {}

impl FromStr for ObjectId {
    type Err = ParseObjectIdError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let err = || ParseObjectIdError(s.to_string());
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(err());
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| err())?;
        Ok(ObjectId(out))
    }
}

impl Serialize for ObjectId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ObjectId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectKind {
    File,
    Tree,
    Commit,
}

impl ObjectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::File => "file",
            ObjectKind::Tree => "tree",
            ObjectKind::Commit => "commit",
        }
    }

    pub fn from_ext(ext: &str) -> Option<Self> {
        match ext {
            "file" => Some(ObjectKind::File),
            "tree" => Some(ObjectKind::Tree),
            "commit" => Some(ObjectKind::Commit),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relative path of an object inside a repository or export.
pub fn object_rel_path(id: &ObjectId, kind: ObjectKind) -> String {
    let hex = id.to_hex();
    format!("objects/{}/{}.{}", &hex[..2], &hex[2..], kind)
}

/// Relative path of a ref inside a repository or export.
pub fn ref_rel_path(reference: &RuntimeRef) -> String {
    format!("refs/{reference}")
}

pub(crate) fn file_mode(executable: bool) -> u32 {
    if executable {
        0o555
    } else {
        0o444
    }
}

/// Whether a file's mode counts as executable for object identity.
pub fn is_executable(mode: u32) -> bool {
    mode & 0o100 != 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckoutMode {
    Hardlink,
    Copy,
}

/// Handle to an initialised repository.
#[derive(Debug, Clone)]
pub struct Repo {
    root: PathBuf,
}

impl Repo {
    /// Create the repository skeleton at `path`, or open it if it already
    /// exists.
    pub fn init(path: &Path) -> Result<Repo> {
        let mut created = false;
        match fs::symlink_metadata(path) {
            Ok(meta) if !meta.is_dir() => {
                return Err(Error::CorruptRepo {
                    path: path.to_path_buf(),
                    reason: "exists and is not a directory".into(),
                })
            }
            Ok(_) => {
                if path.join("config").exists() {
                    fsutil::probe_xattrs(path)?;
                    return Repo::open(path);
                }
                if !fsutil::dir_is_empty(path)? {
                    return Err(Error::CorruptRepo {
                        path: path.to_path_buf(),
                        reason: "directory is not empty and has no config".into(),
                    });
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::create_dir_all(path).map_err(|source| Error::NotWritable {
                    path: path.to_path_buf(),
                    source,
                })?;
                created = true;
            }
            Err(e) => return Err(Error::io(format!("inspecting {}", path.display()), e)),
        }

        let skeleton = || -> Result<()> {
            fsutil::probe_xattrs(path)?;
            for dir in ["objects", "refs", "tmp"] {
                fs::create_dir_all(path.join(dir)).map_err(|source| Error::NotWritable {
                    path: path.join(dir),
                    source,
                })?;
            }
            File::create(path.join("lock"))
                .map_err(|e| Error::io(format!("creating lock in {}", path.display()), e))?;
            fsutil::atomic_write(&path.join("config"), format!("{REPO_FORMAT}\n").as_bytes())
        };
        if let Err(e) = skeleton() {
            if created {
                let _ = fsutil::remove_tree(path);
            }
            return Err(e);
        }
        Repo::open(path)
    }

    /// Open an existing repository.
    pub fn open(path: &Path) -> Result<Repo> {
        let config = fs::read_to_string(path.join("config")).map_err(|e| Error::CorruptRepo {
            path: path.to_path_buf(),
            reason: format!("cannot read config: {e}"),
        })?;
        if config.lines().next() != Some(REPO_FORMAT) {
            return Err(Error::CorruptRepo {
                path: path.to_path_buf(),
                reason: format!("config does not start with {REPO_FORMAT}"),
            });
        }
        let repo = Repo {
            root: path.to_path_buf(),
        };
        fs::create_dir_all(repo.tmp_dir())
            .map_err(|e| Error::io(format!("creating {}", repo.tmp_dir().display()), e))?;
        repo.clean_stale_temps();
        Ok(repo)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub(crate) fn tmp_dir(&self) -> PathBuf {
        self.root.join("tmp")
    }

    /// Take the repository writer lock.
    pub fn lock(&self) -> Result<WriteLock> {
        WriteLock::acquire(&self.root.join("lock"))
    }

    fn clean_stale_temps(&self) {
        let Ok(entries) = fs::read_dir(self.tmp_dir()) else {
            return;
        };
        for entry in entries.flatten() {
            let name = entry.file_name();
            let pid = name
                .to_str()
                .and_then(|n| n.split('-').nth(1))
                .and_then(|p| p.parse::<i32>().ok());
            if pid.is_some_and(|pid| !fsutil::pid_alive(pid)) {
                let _ = fs::remove_file(entry.path());
            }
        }
    }

    pub fn object_path(&self, id: &ObjectId, kind: ObjectKind) -> PathBuf {
        self.root.join(object_rel_path(id, kind))
    }

    pub fn has_object(&self, id: &ObjectId, kind: ObjectKind) -> bool {
        self.object_path(id, kind).exists()
    }

    /// Every object in the store, sorted by (id, kind).
    pub fn list_objects(&self) -> Result<Vec<(ObjectId, ObjectKind)>> {
        let objects = self.root.join("objects");
        let mut out = Vec::new();
        let read = |p: &Path| fs::read_dir(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
        for shard in read(&objects)? {
            let shard = shard.map_err(|e| Error::io("reading objects", e))?;
            let prefix = shard.file_name();
            let Some(prefix) = prefix.to_str().filter(|p| p.len() == 2) else {
                continue;
            };
            for entry in read(&shard.path())? {
                let entry = entry.map_err(|e| Error::io("reading objects", e))?;
                let name = entry.file_name();
                let Some((rest, ext)) = name.to_str().and_then(|n| n.split_once('.')) else {
                    continue;
                };
                let (Some(kind), Ok(id)) = (ObjectKind::from_ext(ext), format!("{prefix}{rest}").parse())
                else {
                    continue;
                };
                out.push((id, kind));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn object_count(&self) -> Result<usize> {
        Ok(self.list_objects()?.len())
    }

    /// Move a fully written, verified staging file into place. Caller holds
    /// the writer lock.
    pub(crate) fn admit(&self, staged: &Path, id: &ObjectId, kind: ObjectKind, mode: u32) -> Result<()> {
        let dest = self.object_path(id, kind);
        if dest.exists() {
            let _ = fs::remove_file(staged);
            return Ok(());
        }
        let parent = dest.parent().expect("object paths have a shard directory");
        let admit = || -> io::Result<()> {
            fs::create_dir_all(parent)?;
            fs::set_permissions(staged, fs::Permissions::from_mode(mode))?;
            fs::rename(staged, &dest)
        };
        admit().map_err(|e| {
            let _ = fs::remove_file(staged);
            Error::io(format!("storing object {id}"), e)
        })
    }

    fn write_metadata_object(&self, kind: ObjectKind, bytes: &[u8]) -> Result<ObjectId> {
        let id = hash_bytes(bytes);
        if self.has_object(&id, kind) {
            return Ok(id);
        }
        let staged = fsutil::temp_name_in(&self.tmp_dir(), "obj");
        let write = || -> io::Result<()> {
            let mut f = OpenOptions::new().write(true).create_new(true).open(&staged)?;
            f.write_all(bytes)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&staged);
            Error::io(format!("writing {kind} object"), e)
        })?;
        self.admit(&staged, &id, kind, 0o444)?;
        Ok(id)
    }

    /// Store a byte stream as a file object.
    pub fn store_file(&self, mut content: impl Read, executable: bool) -> Result<ObjectId> {
        let _lock = self.lock()?;
        let staged = fsutil::temp_name_in(&self.tmp_dir(), "obj");
        let result = (|| {
            let mut f = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&staged)
                .map_err(|e| Error::io("creating staging file", e))?;
            let len = io::copy(&mut content, &mut f).map_err(|e| Error::io("reading content", e))?;
            drop(f);
            let id = hash_file(&staged, executable, len)?
                .ok_or_else(|| Error::io("hashing staged content", io::Error::other("length changed")))?;
            self.admit(&staged, &id, ObjectKind::File, file_mode(executable))?;
            Ok(id)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&staged);
        }
        result
    }

    fn store_file_from_path(&self, path: &Path, executable: bool, len: u64) -> Result<ObjectId> {
        let id = hash_file(path, executable, len)?.ok_or_else(|| changed_while_reading(path))?;
        if self.has_object(&id, ObjectKind::File) {
            return Ok(id);
        }
        let staged = fsutil::temp_name_in(&self.tmp_dir(), "obj");
        let copy = || -> Result<()> {
            let mut src =
                File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let mut dst = OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&staged)
                .map_err(|e| Error::io("creating staging file", e))?;
            let mut hasher = FileHasher::new(executable, len);
            let mut buf = vec![0u8; COPY_BUF];
            loop {
                let n = src
                    .read(&mut buf)
                    .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
                dst.write_all(&buf[..n])
                    .map_err(|e| Error::io("writing staging file", e))?;
            }
            if hasher.finish() != Some(id) {
                return Err(changed_while_reading(path));
            }
            Ok(())
        };
        if let Err(e) = copy() {
            let _ = fs::remove_file(&staged);
            return Err(e);
        }
        self.admit(&staged, &id, ObjectKind::File, file_mode(executable))?;
        Ok(id)
    }

    /// Snapshot a directory tree into the store and return its root tree id.
    pub fn store_tree(&self, dir: &Path) -> Result<ObjectId> {
        self.store_tree_excluding(dir, &[])
    }

    /// Like [`Repo::store_tree`], skipping the named entries at the top level.
    pub fn store_tree_excluding(&self, dir: &Path, exclude: &[&str]) -> Result<ObjectId> {
        let _lock = self.lock()?;
        snapshot_dir(dir, exclude, &mut StoreSink { repo: self })
    }

    pub fn commit(
        &self,
        tree: &ObjectId,
        parent: Option<&ObjectId>,
        subject: &str,
        metadata: &BTreeMap<String, String>,
        timestamp: i64,
    ) -> Result<ObjectId> {
        let _lock = self.lock()?;
        if !self.has_object(tree, ObjectKind::Tree) {
            return Err(Error::MissingObject {
                id: *tree,
                kind: "tree",
            });
        }
        if let Some(parent) = parent {
            if !self.has_object(parent, ObjectKind::Commit) {
                return Err(Error::MissingObject {
                    id: *parent,
                    kind: "commit",
                });
            }
        }
        let commit = CommitObject {
            tree: *tree,
            parent: parent.copied(),
            timestamp,
            subject: subject.to_string(),
            metadata: metadata.clone(),
        };
        self.write_metadata_object(ObjectKind::Commit, &commit.encode())
    }

    fn read_verified(&self, id: &ObjectId, kind: ObjectKind) -> Result<Vec<u8>> {
        let path = self.object_path(id, kind);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(Error::MissingObject {
                    id: *id,
                    kind: kind.as_str(),
                })
            }
            Err(e) => return Err(Error::io(format!("reading {}", path.display()), e)),
        };
        let actual = hash_bytes(&bytes);
        if actual != *id {
            return Err(Error::DigestMismatch { id: *id, actual });
        }
        Ok(bytes)
    }

    pub fn read_tree(&self, id: &ObjectId) -> Result<TreeObject> {
        let bytes = self.read_verified(id, ObjectKind::Tree)?;
        TreeObject::decode(&bytes).map_err(|e| self.corrupt(format!("tree {id}: {e}")))
    }

    pub fn read_commit(&self, id: &ObjectId) -> Result<CommitObject> {
        let bytes = self.read_verified(id, ObjectKind::Commit)?;
        CommitObject::decode(&bytes).map_err(|e| self.corrupt(format!("commit {id}: {e}")))
    }

    fn corrupt(&self, reason: String) -> Error {
        Error::CorruptRepo {
            path: self.root.clone(),
            reason,
        }
    }

    /// Walk first-parent history starting at `head`, newest first.
    pub fn history(&self, head: &ObjectId) -> Result<Vec<ObjectId>> {
        let mut out = vec![*head];
        let mut commit = self.read_commit(head)?;
        while let Some(parent) = commit.parent {
            out.push(parent);
            commit = self.read_commit(&parent)?;
        }
        Ok(out)
    }

    fn ref_path(&self, reference: &RuntimeRef) -> PathBuf {
        self.root.join(ref_rel_path(reference))
    }

    fn remote_ref_path(&self, remote: &str, reference: &RuntimeRef) -> PathBuf {
        self.root
            .join("refs")
            .join(REMOTE_REFS_DIR)
            .join(remote)
            .join(reference.to_string())
    }

    /// Point a local ref at a commit.
    pub fn update_ref(&self, reference: &RuntimeRef, commit: &ObjectId) -> Result<()> {
        if reference.name() == REMOTE_REFS_DIR {
            return Err(Error::MalformedRef {
                input: reference.to_string(),
                reason: format!("the name {REMOTE_REFS_DIR:?} is reserved"),
            });
        }
        let path = self.ref_path(reference);
        self.write_ref_file(&path, commit)
    }

    pub fn read_ref(&self, reference: &RuntimeRef) -> Result<Option<ObjectId>> {
        if reference.name() == REMOTE_REFS_DIR {
            return Ok(None);
        }
        self.read_ref_file(&self.ref_path(reference))
    }

    /// Local refs sorted by their `name/arch/version` form.
    pub fn list_refs(&self) -> Result<Vec<(RuntimeRef, ObjectId)>> {
        self.scan_refs(&self.root.join("refs"), true)
    }

    pub(crate) fn update_remote_ref(
        &self,
        remote: &str,
        reference: &RuntimeRef,
        commit: &ObjectId,
    ) -> Result<()> {
        self.write_ref_file(&self.remote_ref_path(remote, reference), commit)
    }

    pub fn read_remote_ref(&self, remote: &str, reference: &RuntimeRef) -> Result<Option<ObjectId>> {
        self.read_ref_file(&self.remote_ref_path(remote, reference))
    }

    /// Remote-tracking refs, as `(remote, ref, commit)`, sorted.
    pub fn list_remote_refs(&self) -> Result<Vec<(String, RuntimeRef, ObjectId)>> {
        let base = self.root.join("refs").join(REMOTE_REFS_DIR);
        let mut out = Vec::new();
        let Ok(remotes) = fs::read_dir(&base) else {
            return Ok(out);
        };
        for remote in remotes.flatten() {
            let Some(name) = remote.file_name().to_str().map(str::to_string) else {
                continue;
            };
            for (reference, id) in self.scan_refs(&remote.path(), false)? {
                out.push((name.clone(), reference, id));
            }
        }
        out.sort_by(|a, b| (&a.0, a.1.to_string()).cmp(&(&b.0, b.1.to_string())));
        Ok(out)
    }

    fn write_ref_file(&self, path: &Path, commit: &ObjectId) -> Result<()> {
        let _lock = self.lock()?;
        if !self.has_object(commit, ObjectKind::Commit) {
            return Err(Error::MissingObject {
                id: *commit,
                kind: "commit",
            });
        }
        let parent = path.parent().expect("ref paths are nested");
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        fsutil::atomic_write(path, format!("{commit}\n").as_bytes())
    }

    fn read_ref_file(&self, path: &Path) -> Result<Option<ObjectId>> {
        match fs::read_to_string(path) {
            Ok(text) => parse_ref_contents(&text)
                .map(Some)
                .ok_or_else(|| self.corrupt(format!("ref {} is malformed", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) if e.raw_os_error() == Some(libc::EISDIR) => Ok(None),
            Err(e) => Err(Error::io(format!("reading {}", path.display()), e)),
        }
    }

    fn scan_refs(&self, base: &Path, skip_remotes: bool) -> Result<Vec<(RuntimeRef, ObjectId)>> {
        let mut out = Vec::new();
        for name in sorted_dir_names(base) {
            if skip_remotes && name == REMOTE_REFS_DIR {
                continue;
            }
            for arch in sorted_dir_names(&base.join(&name)) {
                for version in sorted_dir_names(&base.join(&name).join(&arch)) {
                    let Ok(reference) = RuntimeRef::new(name.as_str(), arch.as_str(), version.as_str())
                    else {
                        continue;
                    };
                    let path = base.join(&name).join(&arch).join(&version);
                    if let Some(id) = self.read_ref_file(&path)? {
                        out.push((reference, id));
                    }
                }
            }
        }
        out.sort_by_key(|(r, _)| r.to_string());
        Ok(out)
    }

    /// Materialise `commit` at `dest`, which must be absent or empty.
    pub fn checkout(&self, commit: &ObjectId, dest: &Path, mode: CheckoutMode) -> Result<()> {
        let commit = self.read_commit(commit)?;
        self.checkout_tree(&commit.tree, dest, mode)
    }

    pub fn checkout_tree(&self, tree: &ObjectId, dest: &Path, mode: CheckoutMode) -> Result<()> {
        match fs::symlink_metadata(dest) {
            Ok(meta) if !meta.is_dir() || !fsutil::dir_is_empty(dest)? => {
                return Err(Error::DestNotEmpty {
                    path: dest.to_path_buf(),
                })
            }
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                fs::create_dir_all(dest).map_err(|e| Error::io(format!("creating {}", dest.display()), e))?
            }
            Err(e) => return Err(Error::io(format!("inspecting {}", dest.display()), e)),
        }
        self.materialize(tree, dest, mode)
    }

    fn materialize(&self, tree: &ObjectId, dir: &Path, mode: CheckoutMode) -> Result<()> {
        let tree = self.read_tree(tree)?;
        for entry in tree.entries() {
            let path = dir.join(OsStr::from_bytes(&entry.name));
            match &entry.kind {
                EntryKind::File { id, .. } => self.place_file(id, &path, mode)?,
                EntryKind::Dir { id } => {
                    fs::create_dir(&path)
                        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
                    self.materialize(id, &path, mode)?;
                }
                EntryKind::Symlink { target } => {
                    std::os::unix::fs::symlink(OsStr::from_bytes(target), &path)
                        .map_err(|e| Error::io(format!("creating symlink {}", path.display()), e))?;
                }
            }
        }
        Ok(())
    }

    fn place_file(&self, id: &ObjectId, path: &Path, mode: CheckoutMode) -> Result<()> {
        let src = self.object_path(id, ObjectKind::File);
        if !src.exists() {
            return Err(Error::MissingObject {
                id: *id,
                kind: "file",
            });
        }
        if mode == CheckoutMode::Hardlink {
            match fs::hard_link(&src, path) {
                Ok(()) => return Ok(()),
                Err(e) if e.raw_os_error() == Some(libc::EXDEV) => {
                    return Err(Error::CrossDevice {
                        path: path.to_path_buf(),
                    })
                }
                // Link count exhausted: this one file gets its own copy.
                Err(e) if e.raw_os_error() == Some(libc::EMLINK) => {}
                Err(e) => return Err(Error::io(format!("linking {}", path.display()), e)),
            }
        }
        fs::copy(&src, path).map_err(|e| Error::io(format!("copying to {}", path.display()), e))?;
        Ok(())
    }

    /// Verify every object digest and every reference.
    pub fn fsck(&self) -> Result<FsckReport> {
        fsck::run(self)
    }
}

pub(crate) fn parse_ref_contents(text: &str) -> Option<ObjectId> {
    let line = text.strip_suffix('\n').unwrap_or(text);
    line.parse().ok()
}

fn sorted_dir_names(dir: &Path) -> Vec<String> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Vec::new();
    };
    let mut names: Vec<String> = entries
        .flatten()
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    names
}

fn changed_while_reading(path: &Path) -> Error {
    Error::io(
        format!("reading {}", path.display()),
        io::Error::other("file changed while being stored"),
    )
}

/// Hash a file on disk as a file object. `None` if its length is not `len`.
pub(crate) fn hash_file(path: &Path, executable: bool, len: u64) -> Result<Option<ObjectId>> {
    let mut f = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut hasher = FileHasher::new(executable, len);
    let mut buf = vec![0u8; COPY_BUF];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finish())
}

/// Where snapshotted objects go.
trait ObjectSink {
    fn file(&mut self, path: &Path, executable: bool, len: u64) -> Result<ObjectId>;
    fn tree(&mut self, tree: &TreeObject) -> Result<ObjectId>;
}

struct StoreSink<'a> {
    repo: &'a Repo,
}

impl ObjectSink for StoreSink<'_> {
    fn file(&mut self, path: &Path, executable: bool, len: u64) -> Result<ObjectId> {
        self.repo.store_file_from_path(path, executable, len)
    }

    fn tree(&mut self, tree: &TreeObject) -> Result<ObjectId> {
        self.repo.write_metadata_object(ObjectKind::Tree, &tree.encode())
    }
}

struct HashSink;

impl ObjectSink for HashSink {
    fn file(&mut self, path: &Path, executable: bool, len: u64) -> Result<ObjectId> {
        hash_file(path, executable, len)?.ok_or_else(|| changed_while_reading(path))
    }

    fn tree(&mut self, tree: &TreeObject) -> Result<ObjectId> {
        Ok(tree.id())
    }
}

/// Tree id `dir` would get if stored, without writing anything.
pub fn compute_tree_id(dir: &Path) -> Result<ObjectId> {
    snapshot_dir(dir, &[], &mut HashSink)
}

fn snapshot_dir(dir: &Path, exclude: &[&str], sink: &mut dyn ObjectSink) -> Result<ObjectId> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut tree_entries = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        let name = entry.file_name();
        if exclude.iter().any(|x| OsStr::new(x) == name) {
            continue;
        }
        let path = entry.path();
        let meta = fs::symlink_metadata(&path)
            .map_err(|e| Error::io(format!("inspecting {}", path.display()), e))?;
        let ft = meta.file_type();
        let kind = if ft.is_dir() {
            EntryKind::Dir {
                id: snapshot_dir(&path, &[], sink)?,
            }
        } else if ft.is_file() {
            let executable = is_executable(meta.mode());
            EntryKind::File {
                id: sink.file(&path, executable, meta.len())?,
                executable,
            }
        } else if ft.is_symlink() {
            let target =
                fs::read_link(&path).map_err(|e| Error::io(format!("reading link {}", path.display()), e))?;
            EntryKind::Symlink {
                target: target.into_os_string().into_vec(),
            }
        } else {
            return Err(Error::UnsupportedEntry {
                path,
                kind: special_kind(&ft),
            });
        };
        tree_entries.push(TreeEntry {
            name: name.into_vec(),
            kind,
        });
    }
    let tree = TreeObject::new(tree_entries)
        .map_err(|e| Error::io(format!("snapshotting {}", dir.display()), io::Error::other(e.0)))?;
    sink.tree(&tree)
}

fn special_kind(ft: &fs::FileType) -> &'static str {
    use std::os::unix::fs::FileTypeExt;
    if ft.is_fifo() {
        "fifo"
    } else if ft.is_socket() {
        "socket"
    } else if ft.is_block_device() {
        "block device"
    } else if ft.is_char_device() {
        "character device"
    } else {
        "unknown"
    }
}

#[cfg(test)]
mod tests;
