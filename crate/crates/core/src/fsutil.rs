//! Filesystem helpers shared by the store and the deployment manager.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A unique sibling name for `path`, used for write-then-rename.
pub(crate) fn temp_sibling(path: &Path) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

/// Unique file name inside `dir`, tagged with our pid so stale leftovers of
/// dead processes can be recognised.
pub(crate) fn temp_name_in(dir: &Path, prefix: &str) -> PathBuf {
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    dir.join(format!("{prefix}-{}-{n}", std::process::id()))
}

/// Replace `path` with `contents` so that readers only ever see the old or
/// the new file.
pub(crate) fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let write = || -> io::Result<()> {
        let mut file = OpenOptions::new().write(true).create_new(true).open(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(format!("writing {}", path.display()), e)
    })
}

/// Exclusive advisory lock held until drop.
#[derive(Debug)]
pub struct WriteLock {
    _file: File,
}

impl WriteLock {
    pub(crate) fn acquire(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening lock {}", path.display()), e))?;
        file.lock()
            .map_err(|e| Error::io(format!("locking {}", path.display()), e))?;
        Ok(WriteLock { _file: file })
    }
}

pub(crate) fn dir_is_empty(path: &Path) -> Result<bool> {
    let mut entries = fs::read_dir(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(entries.next().is_none())
}

/// Remove `path` and everything below it. Directories left unreadable by the
/// overlay driver (e.g. `work/work`, mode 000) are made accessible first.
pub fn remove_tree(path: &Path) -> Result<()> {
    let meta = match fs::symlink_metadata(path) {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(format!("inspecting {}", path.display()), e)),
    };
    if meta.is_dir() {
        clear_dir(path)?;
        fs::remove_dir(path).map_err(|e| Error::io(format!("removing {}", path.display()), e))
    } else {
        fs::remove_file(path).map_err(|e| Error::io(format!("removing {}", path.display()), e))
    }
}

/// Empty a directory without removing it.
pub fn clear_dir(path: &Path) -> Result<()> {
    let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o755));
    let entries = fs::read_dir(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        remove_tree(&entry.path())?;
    }
    Ok(())
}

/// True when `pid` names a live process.
pub(crate) fn pid_alive(pid: i32) -> bool {
    if pid <= 0 {
        return false;
    }
    // SAFETY: kill with signal 0 performs only the existence/permission check.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

const PROBE_ATTR: &str = "user.runtimebox.probe";

/// Check that `dir` lives on a filesystem with working user extended
/// attributes.
pub fn probe_xattrs(dir: &Path) -> Result<()> {
    let probe = temp_name_in(dir, ".xattr-probe");
    File::create(&probe).map_err(|e| Error::NotWritable {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let outcome = set_and_get_xattr(&probe);
    let _ = fs::remove_file(&probe);
    match outcome {
        Ok(()) => Ok(()),
        Err(e)
            if e.raw_os_error()
                .is_some_and(|c| [libc::ENOTSUP, libc::EOPNOTSUPP, libc::ENOSYS].contains(&c)) =>
        {
            Err(Error::XattrUnsupported {
                path: dir.to_path_buf(),
            })
        }
        Err(e) => Err(Error::io(format!("probing xattrs in {}", dir.display()), e)),
    }
}

#[cfg(target_os = "linux")]
fn set_and_get_xattr(path: &Path) -> io::Result<()> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;

    let cpath = CString::new(path.as_os_str().as_bytes())?;
    let name = CString::new(PROBE_ATTR).expect("static attribute name");
    let value = b"1";
    // SAFETY: all pointers reference live, NUL-terminated buffers of the given sizes.
    let rc = unsafe {
        libc::setxattr(
            cpath.as_ptr(),
            name.as_ptr(),
            value.as_ptr().cast(),
            value.len(),
            0,
        )
    };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    let mut buf = [0u8; 4];
    // SAFETY: buf is writable for buf.len() bytes.
    let n = unsafe { libc::getxattr(cpath.as_ptr(), name.as_ptr(), buf.as_mut_ptr().cast(), buf.len()) };
    if n < 0 {
        return Err(io::Error::last_os_error());
    }
    if &buf[..n as usize] != value {
        return Err(io::Error::other("extended attribute read back differently"));
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
fn set_and_get_xattr(_path: &Path) -> io::Result<()> {
    let _ = PROBE_ATTR;
    Ok(())
}
