use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;

use crate::casstore::{object_rel_path, ref_rel_path, ObjectId, Repo, REPO_FORMAT};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::refmodel::RuntimeRef;

use super::{compare_versions, is_repo_layout};

/// Write every object and ref of `repo` to `dest` in the mirror layout.
///
/// Local refs are exported as is; remote-tracking refs are flattened into the
/// same namespace unless a local ref of the same name exists. `dest` must be
/// absent, empty, or an earlier export. Objects are written before refs, so a
/// client pulling from `dest` during the export never sees a ref whose
/// objects are missing.
pub fn export(repo: &Repo, dest: &Path) -> Result<()> {
    let report = repo.fsck()?;
    if !report.is_clean() {
        return Err(Error::FsckFailed(report));
    }
    match fs::symlink_metadata(dest) {
        Ok(meta) if meta.is_dir() && (fsutil::dir_is_empty(dest)? || is_repo_layout(dest)) => {}
        Ok(_) => {
            return Err(Error::DestNotEmpty {
                path: dest.to_path_buf(),
            })
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            fs::create_dir_all(dest).map_err(|source| Error::NotWritable {
                path: dest.to_path_buf(),
                source,
            })?
        }
        Err(e) => return Err(Error::io(format!("inspecting {}", dest.display()), e)),
    }

    for (id, kind) in repo.list_objects()? {
        let rel = object_rel_path(&id, kind);
        let target = dest.join(&rel);
        let src = repo.object_path(&id, kind);
        let src_len = fs::metadata(&src)
            .map_err(|e| Error::io(format!("reading {}", src.display()), e))?
            .len();
        if fs::metadata(&target).is_ok_and(|m| m.len() == src_len) {
            continue;
        }
        copy_published(&src, &target)?;
    }

    let mut refs: BTreeMap<String, (RuntimeRef, ObjectId)> = BTreeMap::new();
    for (reference, id) in repo.list_refs()? {
        refs.insert(reference.to_string(), (reference, id));
    }
    for (_, reference, id) in repo.list_remote_refs()? {
        refs.entry(reference.to_string()).or_insert((reference, id));
    }

    let mut ref_files = BTreeSet::new();
    let mut versions: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (reference, id) in refs.values() {
        let rel = ref_rel_path(reference);
        write_published(&dest.join(&rel), format!("{id}\n").as_bytes())?;
        ref_files.insert(dest.join(rel));
        versions
            .entry(format!("versions/{}/{}", reference.name(), reference.arch()))
            .or_default()
            .push(reference.version().to_string());
    }
    let mut index_files = BTreeSet::new();
    for (rel, mut list) in versions {
        list.sort_by(|a, b| compare_versions(a, b));
        let mut text = list.join("\n");
        text.push('\n');
        write_published(&dest.join(&rel), text.as_bytes())?;
        index_files.insert(dest.join(rel));
    }
    prune_files(&dest.join("refs"), &ref_files)?;
    prune_files(&dest.join("versions"), &index_files)?;
    write_published(&dest.join("config"), format!("{REPO_FORMAT}\n").as_bytes())
}

fn copy_published(src: &Path, target: &Path) -> Result<()> {
    let parent = target.parent().expect("mirror paths are nested");
    fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    let tmp = fsutil::temp_sibling(target);
    let copy = || -> io::Result<()> {
        fs::copy(src, &tmp)?;
        fs::set_permissions(&tmp, fs::Permissions::from_mode(0o644))?;
        fs::rename(&tmp, target)
    };
    copy().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("exporting {}", target.display()), e)
    })
}

fn write_published(path: &Path, contents: &[u8]) -> Result<()> {
    let parent = path.parent().expect("mirror paths are nested");
    fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    if fs::read(path).is_ok_and(|old| old == contents) {
        return Ok(());
    }
    fsutil::atomic_write(path, contents)?;
    fs::set_permissions(path, fs::Permissions::from_mode(0o644))
        .map_err(|e| Error::io(format!("exporting {}", path.display()), e))
}

/// Remove files under `root` that are not in `keep`, then empty directories.
fn prune_files(root: &Path, keep: &BTreeSet<std::path::PathBuf>) -> Result<()> {
    fn walk(dir: &Path, keep: &BTreeSet<std::path::PathBuf>) -> io::Result<bool> {
        let mut empty = true;
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                if walk(&path, keep)? {
                    fs::remove_dir(&path)?;
                } else {
                    empty = false;
                }
            } else if keep.contains(&path) {
                empty = false;
            } else {
                fs::remove_file(&path)?;
            }
        }
        Ok(empty)
    }
    if !root.exists() {
        return Ok(());
    }
    walk(root, keep)
        .map(|_| ())
        .map_err(|e| Error::io(format!("pruning {}", root.display()), e))
}
