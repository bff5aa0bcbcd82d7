//! Recursive directory comparison: entry types, file bytes, owner exec bit,
//! symlink targets.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

#[derive(Debug, PartialEq, Eq)]
enum Node {
    Dir,
    File { exec: bool, bytes: Vec<u8> },
    Link(PathBuf),
    Other,
}

fn scan(root: &Path) -> BTreeMap<PathBuf, Node> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(root).follow_links(false).min_depth(1) {
        let entry = entry.expect("walk");
        let rel = entry.path().strip_prefix(root).unwrap().to_path_buf();
        let ft = entry.file_type();
        let node = if ft.is_dir() {
            Node::Dir
        } else if ft.is_symlink() {
            Node::Link(fs::read_link(entry.path()).unwrap())
        } else if ft.is_file() {
            let mode = entry.metadata().unwrap().permissions().mode();
            Node::File {
                exec: mode & 0o100 != 0,
                bytes: fs::read(entry.path()).unwrap(),
            }
        } else {
            Node::Other
        };
        out.insert(rel, node);
    }
    out
}

/// Human-readable differences between two trees; empty when identical.
pub fn diff_dirs(a: &Path, b: &Path) -> Vec<String> {
    let left = scan(a);
    let right = scan(b);
    let mut diffs = Vec::new();
    for (path, node) in &left {
        match right.get(path) {
            None => diffs.push(format!("only in left: {}", path.display())),
            Some(other) if other != node => diffs.push(format!("differs: {}", path.display())),
            Some(_) => {}
        }
    }
    for path in right.keys() {
        if !left.contains_key(path) {
            diffs.push(format!("only in right: {}", path.display()));
        }
    }
    diffs
}

/// SHA-256 over every entry of `root` in path order: relative path, entry
/// type, permission bits, and file bytes, symlink target or device number.
pub fn tree_digest(root: &Path) -> String {
    use std::os::unix::fs::{FileTypeExt, MetadataExt};

    use sha2::{Digest, Sha256};

    let mut entries: Vec<_> = WalkDir::new(root)
        .follow_links(false)
        .min_depth(1)
        .into_iter()
        .map(|e| e.expect("walk"))
        .collect();
    entries.sort_by(|a, b| a.path().cmp(b.path()));
    let mut hasher = Sha256::new();
    for entry in entries {
        let rel = entry.path().strip_prefix(root).unwrap();
        let meta = entry.metadata().unwrap();
        let ft = meta.file_type();
        hasher.update(rel.as_os_str().as_encoded_bytes());
        hasher.update([0]);
        let (tag, payload): (u8, Vec<u8>) = if ft.is_dir() {
            (b'd', Vec::new())
        } else if ft.is_symlink() {
            (
                b'l',
                fs::read_link(entry.path())
                    .unwrap()
                    .into_os_string()
                    .into_encoded_bytes(),
            )
        } else if ft.is_file() {
            (b'f', fs::read(entry.path()).unwrap())
        } else if ft.is_char_device() || ft.is_block_device() {
            (b'c', meta.rdev().to_le_bytes().to_vec())
        } else {
            (b'o', Vec::new())
        };
        let mode = if ft.is_symlink() { 0 } else { meta.mode() & 0o7777 };
        hasher.update([tag]);
        hasher.update(mode.to_le_bytes());
        hasher.update((payload.len() as u64).to_le_bytes());
        hasher.update(&payload);
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
