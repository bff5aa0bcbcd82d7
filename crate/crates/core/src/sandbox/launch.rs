//! Host side of the launcher, plus signal forwarding while it runs.

use std::fs::File;
use std::io::Read;
use std::os::fd::AsRawFd;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::Command;
use std::sync::atomic::{AtomicI32, Ordering};
use std::sync::Mutex;

use super::{decode_status, ExecutionPlan, Helper, MountGuard, HELPER_ARG};
use crate::error::{Error, Result};

/// Descriptor on which helpers report failures as `Kind\tmessage`.
pub(crate) const STATUS_FD: i32 = 3;

/// Run `plan` inside the namespaces held by `guard` and wait for it.
/// Returns the command's exit status, or 128 + N if it died of signal N.
pub fn launch(plan: &ExecutionPlan, guard: &MountGuard, helper: &Helper) -> Result<i32> {
    let plan_json = serde_json::to_string(plan).expect("plans always serialize");
    let (read_end, write_end) = pipe()?;
    let write_fd = write_end.as_raw_fd();
    let mut command = Command::new(helper.path());
    command
        .arg(HELPER_ARG)
        .arg("launch")
        .arg(guard.keeper_pid().to_string())
        .arg(plan_json);
    // SAFETY: only async-signal-safe calls between fork and exec.
    unsafe {
        command.pre_exec(move || {
            let rc = if write_fd == STATUS_FD {
                libc::fcntl(STATUS_FD, libc::F_SETFD, 0)
            } else {
                libc::dup2(write_fd, STATUS_FD)
            };
            if rc < 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }

    let forwarder = SignalForwarder::install();
    let mut child = command
        .spawn()
        .map_err(|e| Error::LaunchFailed(format!("cannot start helper {}: {e}", helper.path().display())))?;
    let watch = forwarder.watch(child.id() as i32);
    drop(write_end);
    let waited = child.wait();
    drop(watch);
    drop(forwarder);

    let mut report = String::new();
    let _ = File::from(read_end).read_to_string(&mut report);
    if let Some(err) = decode_status(&report) {
        return Err(err);
    }
    let status = waited.map_err(|e| Error::LaunchFailed(format!("waiting for helper: {e}")))?;
    Ok(status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0)))
}

fn pipe() -> Result<(std::os::fd::OwnedFd, std::os::fd::OwnedFd)> {
    #[cfg(target_os = "linux")]
    {
        nix::unistd::pipe2(nix::fcntl::OFlag::O_CLOEXEC)
            .map_err(|e| Error::LaunchFailed(format!("cannot create status pipe: {e}")))
    }
    #[cfg(not(target_os = "linux"))]
    {
        Err(Error::KernelUnsupported("sandboxes require Linux".into()))
    }
}

const SLOTS: usize = 32;
static WATCHED: [AtomicI32; SLOTS] = [const { AtomicI32::new(0) }; SLOTS];
static INSTALLED: Mutex<Option<(usize, Saved)>> = Mutex::new(None);

const FORWARDED: [i32; 2] = [libc::SIGTERM, libc::SIGHUP];
const IGNORED: [i32; 2] = [libc::SIGINT, libc::SIGQUIT];

struct Saved([libc::sigaction; 4]);

// SAFETY: plain C data.
unsafe impl Send for Saved {}

extern "C" fn forward(sig: libc::c_int) {
    for slot in &WATCHED {
        let pid = slot.load(Ordering::SeqCst);
        if pid > 0 {
            // SAFETY: kill is async-signal-safe.
            unsafe { libc::kill(pid, sig) };
        }
    }
}

/// While alive, SIGTERM and SIGHUP sent to this process are passed on to
/// every watched child, and SIGINT/SIGQUIT are ignored (the terminal
/// delivers them to the sandboxed command directly). Previous handlers are
/// restored when the last forwarder is dropped.
pub struct SignalForwarder(());

impl SignalForwarder {
    pub fn install() -> SignalForwarder {
        let mut installed = INSTALLED.lock().unwrap_or_else(|e| e.into_inner());
        match installed.as_mut() {
            Some((count, _)) => *count += 1,
            None => {
                // SAFETY: zeroed sigaction is a valid initial value; the
                // handler only touches atomics and calls kill.
                let saved = unsafe {
                    let mut saved: [libc::sigaction; 4] = std::mem::zeroed();
                    for (i, sig) in FORWARDED.iter().chain(&IGNORED).enumerate() {
                        let mut action: libc::sigaction = std::mem::zeroed();
                        action.sa_sigaction = if i < FORWARDED.len() {
                            forward as extern "C" fn(libc::c_int) as usize
                        } else {
                            libc::SIG_IGN
                        };
                        action.sa_flags = libc::SA_RESTART;
                        libc::sigemptyset(&mut action.sa_mask);
                        libc::sigaction(*sig, &action, &mut saved[i]);
                    }
                    saved
                };
                *installed = Some((1, Saved(saved)));
            }
        }
        SignalForwarder(())
    }

    /// Forward signals to `pid` until the returned watch is dropped.
    pub fn watch(&self, pid: i32) -> Watch {
        for (i, slot) in WATCHED.iter().enumerate() {
            if slot
                .compare_exchange(0, pid, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                return Watch(Some(i));
            }
        }
        Watch(None)
    }
}

impl Drop for SignalForwarder {
    fn drop(&mut self) {
        let mut installed = INSTALLED.lock().unwrap_or_else(|e| e.into_inner());
        let Some((count, saved)) = installed.as_mut() else {
            return;
        };
        *count -= 1;
        if *count == 0 {
            for (i, sig) in FORWARDED.iter().chain(&IGNORED).enumerate() {
                // SAFETY: restoring a previously returned action.
                unsafe { libc::sigaction(*sig, &saved.0[i], std::ptr::null_mut()) };
            }
            *installed = None;
        }
    }
}

/// A registered pid; unregistered on drop.
pub struct Watch(Option<usize>);

impl Drop for Watch {
    fn drop(&mut self) {
        if let Some(i) = self.0 {
            WATCHED[i].store(0, Ordering::SeqCst);
        }
    }
}
