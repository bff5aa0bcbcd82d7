//! Host side of the keeper process that owns the overlay mount.

use std::ffi::OsString;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};

use super::{check_kernel, decode_status, ExecutionPlan, Helper, RootLayer, HELPER_ARG};
use crate::error::{Error, Result};

/// Characters the overlay option string cannot carry.
const OPTION_UNSAFE: &[char] = &[',', ':', '\\', '\n'];

/// Keeps a sandbox root mounted. The mount lives in a private namespace held
/// by a helper process; dropping the guard ends that process, which removes
/// the mount.
#[derive(Debug)]
pub struct MountGuard {
    child: Option<Child>,
    stdin: Option<ChildStdin>,
    merged: PathBuf,
}

impl MountGuard {
    /// Start a keeper for `plan` and wait until its root is mounted.
    pub fn mount(plan: &ExecutionPlan, helper: &Helper) -> Result<MountGuard> {
        check_kernel()?;
        for path in plan.overlay_paths() {
            let text = path.to_string_lossy();
            if !path.is_absolute() || text.contains(OPTION_UNSAFE) {
                return Err(Error::MountFailed(format!(
                    "{} cannot be used as an overlay path (absolute paths without ',', ':' or '\\' only)",
                    path.display()
                )));
            }
        }
        let mut args: Vec<OsString> = vec![HELPER_ARG.into(), "keeper".into()];
        match &plan.root {
            RootLayer::Overlay { lower, upper, work } => {
                args.push("overlay".into());
                args.extend([
                    plan.uid_map.outside.to_string().into(),
                    plan.gid_map.outside.to_string().into(),
                ]);
                args.extend([lower, upper, work].map(|p| p.as_os_str().to_owned()));
            }
            RootLayer::Direct => {
                args.push("direct".into());
                args.extend([
                    plan.uid_map.outside.to_string().into(),
                    plan.gid_map.outside.to_string().into(),
                ]);
            }
        }
        args.push(plan.merged.as_os_str().to_owned());

        let mut child = Command::new(helper.path())
            .args(&args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                Error::LaunchFailed(format!("cannot start helper {}: {e}", helper.path().display()))
            })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut line = String::new();
        let read = BufReader::new(stdout).read_line(&mut line);
        let mut guard = MountGuard {
            child: Some(child),
            stdin,
            merged: plan.merged.clone(),
        };
        match (read, line.trim_end()) {
            (Ok(_), "ready") => Ok(guard),
            (Ok(_), reply) if reply.starts_with("error ") => {
                let _ = guard.finish();
                Err(decode_status(&reply["error ".len()..]).expect("non-empty reply"))
            }
            (_, reply) => {
                let status = guard.finish();
                Err(Error::MountFailed(format!(
                    "helper exited before mounting ({}){}",
                    match status {
                        Ok(code) => format!("status {code}"),
                        Err(e) => e.to_string(),
                    },
                    if reply.is_empty() {
                        String::new()
                    } else {
                        format!(": {reply}")
                    }
                )))
            }
        }
    }

    /// Pid of the process holding the namespaces.
    pub fn keeper_pid(&self) -> i32 {
        self.child.as_ref().map_or(0, |c| c.id() as i32)
    }

    /// The mounted root as seen from the host.
    pub fn view(&self) -> PathBuf {
        Path::new("/proc")
            .join(self.keeper_pid().to_string())
            .join("root")
            .join(self.merged.strip_prefix("/").unwrap_or(&self.merged))
    }

    /// Unmount and report whether the keeper shut down cleanly.
    pub fn release(mut self) -> Result<()> {
        match self.finish()? {
            0 => Ok(()),
            code => Err(Error::MountFailed(format!(
                "unmounting {} failed (status {code})",
                self.merged.display()
            ))),
        }
    }

    fn finish(&mut self) -> Result<i32> {
        drop(self.stdin.take());
        let Some(mut child) = self.child.take() else {
            return Ok(0);
        };
        let status = child
            .wait()
            .map_err(|e| Error::MountFailed(format!("waiting for helper: {e}")))?;
        Ok(status.code().unwrap_or(128))
    }
}

impl Drop for MountGuard {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}
