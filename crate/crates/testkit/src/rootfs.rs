//! Minimal root filesystem trees assembled from host binaries.
//!
//! Each requested program is copied into `<dest>/bin/` together with the
//! shared libraries `ldd` reports for it, placed at the same absolute paths
//! inside the tree.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;

/// Programs every fixture gets.
pub const DEFAULT_PROGRAMS: &[&str] = &["sh", "cat", "id", "touch", "ls", "rm", "mkdir", "env", "sleep"];

fn find_program(name: &str) -> io::Result<PathBuf> {
    let path = std::env::var_os("PATH").unwrap_or_else(|| "/usr/bin:/bin".into());
    std::env::split_paths(&path)
        .map(|dir| dir.join(name))
        .find(|candidate| candidate.is_file())
        .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("{name} not on PATH")))
}

fn shared_libraries(binary: &Path) -> io::Result<BTreeSet<PathBuf>> {
    let output = Command::new("ldd").arg(binary).output()?;
    let text = String::from_utf8_lossy(&output.stdout);
    let mut libs = BTreeSet::new();
    for line in text.lines() {
        let line = line.trim();
        let candidate = match line.split_once("=>") {
            Some((_, rhs)) => rhs.split_whitespace().next(),
            None => line.split_whitespace().next(),
        };
        if let Some(path) = candidate.filter(|p| p.starts_with('/')) {
            libs.insert(PathBuf::from(path));
        }
    }
    Ok(libs)
}

fn copy_into(dest_root: &Path, host_path: &Path) -> io::Result<()> {
    let rel = host_path.strip_prefix("/").unwrap_or(host_path);
    let target = dest_root.join(rel);
    if target.exists() {
        return Ok(());
    }
    fs::create_dir_all(target.parent().unwrap())?;
    fs::copy(host_path, &target)?;
    Ok(())
}

/// Build a tree at `dest` containing `programs` (or [`DEFAULT_PROGRAMS`]).
pub fn build_fixture_rootfs(dest: &Path, programs: Option<&[&str]>) -> io::Result<()> {
    fs::create_dir_all(dest.join("bin"))?;
    for dir in ["etc", "proc", "dev", "tmp", "home/runtime/Public"] {
        fs::create_dir_all(dest.join(dir))?;
    }
    fs::write(dest.join("etc/passwd"), "root:x:0:0:root:/home/runtime:/bin/sh\n")?;
    fs::write(dest.join("etc/group"), "root:x:0:\n")?;
    for name in programs.unwrap_or(DEFAULT_PROGRAMS) {
        let host = find_program(name)?;
        fs::copy(&host, dest.join("bin").join(name))?;
        for lib in shared_libraries(&host)? {
            copy_into(dest, &lib)?;
        }
    }
    Ok(())
}
