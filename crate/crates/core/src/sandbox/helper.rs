//! Helper-mode entry points: the keeper, the launcher and pid 1.
//!
//! Everything here runs in a freshly executed, single-threaded process, so
//! forking and namespace changes are safe.

use std::convert::Infallible;
use std::ffi::{CString, OsStr, OsString};
use std::fs::{self, File};
use std::io::{Read, Write};
use std::os::fd::BorrowedFd;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{symlink, PermissionsExt};
use std::path::{Path, PathBuf};
use std::process::Command;

use nix::errno::Errno;
use nix::mount::{mount, umount2, MntFlags, MsFlags};
use nix::sched::{setns, unshare, CloneFlags};
use nix::sys::prctl::set_pdeathsig;
use nix::sys::signal::{kill, sigaction, SaFlags, SigAction, SigHandler, SigSet, SigmaskHow, Signal};
use nix::sys::statvfs::{statvfs, FsFlags};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::{chdir, execve, fork, pivot_root, sethostname, ForkResult, Pid};

use super::launch::STATUS_FD;
use super::ExecutionPlan;

/// A failure to report upstream as `Kind\tmessage`.
struct Fail {
    kind: &'static str,
    message: String,
}

type Step<T = ()> = std::result::Result<T, Fail>;

fn fail(kind: &'static str, message: impl Into<String>) -> Fail {
    Fail {
        kind,
        message: message.into().replace(['\n', '\t'], " "),
    }
}

fn mount_fail(what: impl std::fmt::Display, e: Errno) -> Fail {
    fail("MountFailed", format!("{what}: {}", e.desc()))
}

const DEVICES: [&str; 6] = ["null", "zero", "full", "random", "urandom", "tty"];
const SIGNALS: [Signal; 5] = [
    Signal::SIGTERM,
    Signal::SIGHUP,
    Signal::SIGINT,
    Signal::SIGQUIT,
    Signal::SIGCHLD,
];

pub(super) fn main(args: Vec<OsString>) -> i32 {
    let (role, rest) = match args.split_first() {
        Some((role, rest)) => (role.to_string_lossy().into_owned(), rest),
        None => (String::new(), &[][..]),
    };
    match role.as_str() {
        "keeper" => keeper(rest),
        "launch" => launcher(rest),
        _ => {
            eprintln!("runtimebox helper: expected `keeper` or `launch`");
            2
        }
    }
}

// keeper

struct KeeperArgs {
    overlay: Option<[PathBuf; 3]>,
    uid: u32,
    gid: u32,
    merged: PathBuf,
}

fn parse_keeper(args: &[OsString]) -> Step<KeeperArgs> {
    let bad = || fail("LaunchFailed", "malformed keeper arguments");
    let text = |i: usize| args.get(i).and_then(|a| a.to_str()).ok_or_else(bad);
    let id = |i: usize| text(i)?.parse::<u32>().map_err(|_| bad());
    let path = |i: usize| args.get(i).map(PathBuf::from).ok_or_else(bad);
    match (text(0)?, args.len()) {
        ("overlay", 7) => Ok(KeeperArgs {
            overlay: Some([path(3)?, path(4)?, path(5)?]),
            uid: id(1)?,
            gid: id(2)?,
            merged: path(6)?,
        }),
        ("direct", 4) => Ok(KeeperArgs {
            overlay: None,
            uid: id(1)?,
            gid: id(2)?,
            merged: path(3)?,
        }),
        _ => Err(bad()),
    }
}

fn keeper(args: &[OsString]) -> i32 {
    let _ = set_pdeathsig(Signal::SIGKILL);
    let setup = parse_keeper(args).and_then(|a| keeper_setup(&a).map(|_| a));
    let mut stdout = std::io::stdout();
    let parsed = match setup {
        Ok(parsed) => parsed,
        Err(f) => {
            let _ = writeln!(stdout, "error {}\t{}", f.kind, f.message);
            return 1;
        }
    };
    if writeln!(stdout, "ready").and_then(|_| stdout.flush()).is_err() {
        return 1;
    }
    let mut sink = [0u8; 64];
    let mut stdin = std::io::stdin();
    while matches!(stdin.read(&mut sink), Ok(n) if n > 0) {}
    if parsed.overlay.is_some() && umount2(&parsed.merged, MntFlags::MNT_DETACH).is_err() {
        return 1;
    }
    0
}

fn enter_user_namespace(uid: u32, gid: u32) -> Step {
    unshare(CloneFlags::CLONE_NEWUSER | CloneFlags::CLONE_NEWNS).map_err(|e| {
        fail(
            "KernelUnsupported",
            format!(
                "cannot create a user namespace ({}); unprivileged user namespaces may be disabled",
                e.desc()
            ),
        )
    })?;
    let write = |file: &str, text: String| {
        fs::write(format!("/proc/self/{file}"), text).map_err(|e| {
            fail(
                "KernelUnsupported",
                format!("cannot write /proc/self/{file}: {e}"),
            )
        })
    };
    write("setgroups", "deny".into())?;
    write("uid_map", format!("0 {uid} 1"))?;
    write("gid_map", format!("0 {gid} 1"))?;
    Ok(())
}

fn keeper_setup(args: &KeeperArgs) -> Step {
    enter_user_namespace(args.uid, args.gid)?;
    mount(
        None::<&str>,
        "/",
        None::<&str>,
        MsFlags::MS_REC | MsFlags::MS_PRIVATE,
        None::<&str>,
    )
    .map_err(|e| mount_fail("making / private", e))?;
    let Some([lower, upper, work]) = &args.overlay else {
        return Ok(());
    };
    let options = format!(
        "lowerdir={},upperdir={},workdir={}",
        lower.display(),
        upper.display(),
        work.display()
    );
    let native = mount(
        Some("overlay"),
        &args.merged,
        Some("overlay"),
        MsFlags::empty(),
        Some(format!("{options},userxattr").as_str()),
    );
    match native {
        Ok(()) => Ok(()),
        Err(e) => fuse_overlay(&options, &args.merged)
            .map_err(|fuse| mount_fail(format!("overlay on {} ({fuse})", args.merged.display()), e)),
    }
}

/// Userspace overlay for kernels that refuse unprivileged overlay mounts.
fn fuse_overlay(options: &str, merged: &Path) -> Result<(), String> {
    let status = Command::new("fuse-overlayfs")
        .arg("-o")
        .arg(options)
        .arg(merged)
        .status()
        .map_err(|_| "fuse-overlayfs unavailable".to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("fuse-overlayfs failed with {status}"))
    }
}

// launcher

fn report(f: &Fail) {
    // SAFETY: the status descriptor is owned by this process tree for its
    // whole lifetime; a closed descriptor only makes the write fail.
    let fd = unsafe { BorrowedFd::borrow_raw(STATUS_FD) };
    let _ = nix::unistd::write(fd, format!("{}\t{}\n", f.kind, f.message).as_bytes());
}

fn blocked_set() -> SigSet {
    let mut set = SigSet::empty();
    for sig in SIGNALS {
        set.add(sig);
    }
    set
}

fn launcher(args: &[OsString]) -> i32 {
    let _ = set_pdeathsig(Signal::SIGKILL);
    // SAFETY: plain fcntl on a descriptor number.
    if unsafe { libc::fcntl(STATUS_FD, libc::F_SETFD, libc::FD_CLOEXEC) } < 0 {
        eprintln!("runtimebox helper: status descriptor missing");
        return 125;
    }
    let plan = match launcher_setup(args) {
        Ok(plan) => plan,
        Err(f) => {
            report(&f);
            return 125;
        }
    };
    let set = blocked_set();
    let _ = set.thread_block();
    // SAFETY: single-threaded process.
    match unsafe { fork() } {
        Ok(ForkResult::Child) => {
            let code = reaper(&plan, &set);
            // SAFETY: leave without running the parent's exit path twice.
            unsafe { libc::_exit(code) }
        }
        Ok(ForkResult::Parent { child }) => monitor(child, &set),
        Err(e) => {
            report(&fail("LaunchFailed", format!("fork failed: {}", e.desc())));
            125
        }
    }
}

fn launcher_setup(args: &[OsString]) -> Step<ExecutionPlan> {
    let bad = || fail("LaunchFailed", "malformed launcher arguments");
    let [keeper, plan] = args else {
        return Err(bad());
    };
    let keeper: u32 = keeper.to_str().and_then(|k| k.parse().ok()).ok_or_else(bad)?;
    let plan: ExecutionPlan = serde_json::from_slice(plan.as_bytes())
        .map_err(|e| fail("LaunchFailed", format!("malformed plan: {e}")))?;
    for (ns, flag) in [
        ("user", CloneFlags::CLONE_NEWUSER),
        ("mnt", CloneFlags::CLONE_NEWNS),
    ] {
        let path = format!("/proc/{keeper}/ns/{ns}");
        let file = File::open(&path).map_err(|e| fail("LaunchFailed", format!("cannot open {path}: {e}")))?;
        setns(&file, flag).map_err(|e| fail("LaunchFailed", format!("cannot join {path}: {}", e.desc())))?;
    }
    unshare(CloneFlags::CLONE_NEWNS | CloneFlags::CLONE_NEWPID | CloneFlags::CLONE_NEWUTS).map_err(|e| {
        fail(
            "KernelUnsupported",
            format!("cannot create pid namespace: {}", e.desc()),
        )
    })?;
    Ok(plan)
}

fn exit_code(status: WaitStatus) -> Option<i32> {
    match status {
        WaitStatus::Exited(_, code) => Some(code),
        WaitStatus::Signaled(_, sig, _) => Some(128 + sig as i32),
        _ => None,
    }
}

/// Wait for pid 1, passing on termination requests.
fn monitor(child: Pid, set: &SigSet) -> i32 {
    loop {
        match waitpid(child, Some(WaitPidFlag::WNOHANG)) {
            Ok(status) => {
                if let Some(code) = exit_code(status) {
                    return code;
                }
            }
            Err(Errno::EINTR) => continue,
            Err(_) => return 125,
        }
        if let Ok(sig @ (Signal::SIGTERM | Signal::SIGHUP)) = set.wait() {
            let _ = kill(child, sig);
        }
    }
}

// pid 1

fn reaper(plan: &ExecutionPlan, set: &SigSet) -> i32 {
    let _ = set_pdeathsig(Signal::SIGKILL);
    if let Err(f) = prepare_root(plan) {
        report(&f);
        return 125;
    }
    // SAFETY: single-threaded process.
    let payload = match unsafe { fork() } {
        Ok(ForkResult::Child) => {
            let Err(f) = exec_payload(plan);
            report(&f);
            // SAFETY: exec failed; leave immediately.
            unsafe { libc::_exit(127) }
        }
        Ok(ForkResult::Parent { child }) => child,
        Err(e) => {
            report(&fail("LaunchFailed", format!("fork failed: {}", e.desc())));
            return 125;
        }
    };
    loop {
        loop {
            match waitpid(Pid::from_raw(-1), Some(WaitPidFlag::WNOHANG)) {
                Ok(WaitStatus::StillAlive) => break,
                Ok(status) => {
                    if status.pid() == Some(payload) {
                        if let Some(code) = exit_code(status) {
                            // Exiting pid 1 kills whatever is left.
                            return code;
                        }
                    }
                }
                Err(Errno::EINTR) => {}
                Err(_) => return 125,
            }
        }
        if let Ok(sig @ (Signal::SIGTERM | Signal::SIGHUP)) = set.wait() {
            let _ = kill(payload, sig);
        }
    }
}

fn inside(root: &Path, runtime: &Path) -> PathBuf {
    root.join(runtime.strip_prefix("/").unwrap_or(runtime))
}

fn bind(host: &Path, target: &Path) -> Step {
    mount(
        Some(host),
        target,
        None::<&str>,
        MsFlags::MS_BIND | MsFlags::MS_REC,
        None::<&str>,
    )
    .map_err(|e| mount_fail(format!("binding {} to {}", host.display(), target.display()), e))
}

fn remount_read_only(target: &Path) -> Step {
    let mut flags = MsFlags::MS_REMOUNT | MsFlags::MS_BIND | MsFlags::MS_RDONLY;
    if let Ok(stat) = statvfs(target) {
        for (st, ms) in [
            (FsFlags::ST_NOSUID, MsFlags::MS_NOSUID),
            (FsFlags::ST_NODEV, MsFlags::MS_NODEV),
            (FsFlags::ST_NOEXEC, MsFlags::MS_NOEXEC),
            (FsFlags::ST_NOATIME, MsFlags::MS_NOATIME),
            (FsFlags::ST_NODIRATIME, MsFlags::MS_NODIRATIME),
            (FsFlags::ST_RELATIME, MsFlags::MS_RELATIME),
        ] {
            if stat.flags().contains(st) {
                flags |= ms;
            }
        }
    }
    mount(None::<&str>, target, None::<&str>, flags, None::<&str>)
        .map_err(|e| mount_fail(format!("making {} read-only", target.display()), e))
}

fn ensure_target(host: &Path, target: &Path) -> Step {
    if target.symlink_metadata().is_ok() {
        return Ok(());
    }
    let made = if host.is_dir() {
        fs::create_dir_all(target)
    } else {
        target
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .and_then(|_| File::create(target).map(drop))
    };
    made.map_err(|e| {
        fail(
            "MountFailed",
            format!("cannot create bind target {}: {e}", target.display()),
        )
    })
}

fn mount_dev(dev: &Path) -> Step {
    mount(
        Some("tmpfs"),
        dev,
        Some("tmpfs"),
        MsFlags::MS_NOSUID | MsFlags::MS_NOEXEC,
        Some("mode=0755,size=65536k"),
    )
    .map_err(|e| mount_fail("mounting /dev", e))?;
    for name in DEVICES {
        let host = Path::new("/dev").join(name);
        if !host.exists() {
            continue;
        }
        let target = dev.join(name);
        ensure_target(&host, &target)?;
        bind(&host, &target)?;
    }
    let links = [
        ("fd", "/proc/self/fd"),
        ("stdin", "/proc/self/fd/0"),
        ("stdout", "/proc/self/fd/1"),
        ("stderr", "/proc/self/fd/2"),
    ];
    for (name, target) in links {
        symlink(target, dev.join(name))
            .map_err(|e| fail("MountFailed", format!("creating /dev/{name}: {e}")))?;
    }
    let shm = dev.join("shm");
    fs::create_dir(&shm)
        .and_then(|_| fs::set_permissions(&shm, fs::Permissions::from_mode(0o1777)))
        .map_err(|e| fail("MountFailed", format!("creating /dev/shm: {e}")))
}

fn prepare_root(plan: &ExecutionPlan) -> Step {
    let root = plan.merged.as_path();
    sethostname(&plan.hostname).map_err(|e| {
        fail(
            "LaunchFailed",
            format!("cannot set hostname {:?}: {}", plan.hostname, e.desc()),
        )
    })?;
    mount(
        None::<&str>,
        "/",
        None::<&str>,
        MsFlags::MS_REC | MsFlags::MS_PRIVATE,
        None::<&str>,
    )
    .map_err(|e| mount_fail("making / private", e))?;
    // pivot_root needs the new root to be a mount point.
    bind(root, root)?;

    if inside(root, Path::new("/proc")).is_dir() {
        mount(
            Some("proc"),
            &inside(root, Path::new("/proc")),
            Some("proc"),
            MsFlags::MS_NOSUID | MsFlags::MS_NODEV | MsFlags::MS_NOEXEC,
            None::<&str>,
        )
        .map_err(|e| mount_fail("mounting /proc", e))?;
    }
    let dev = inside(root, Path::new("/dev"));
    if dev.is_dir() {
        mount_dev(&dev)?;
    }
    let tmp = inside(root, Path::new("/tmp"));
    if tmp.is_dir() {
        mount(
            Some("tmpfs"),
            &tmp,
            Some("tmpfs"),
            MsFlags::MS_NOSUID | MsFlags::MS_NODEV,
            Some("mode=1777"),
        )
        .map_err(|e| mount_fail("mounting /tmp", e))?;
    }
    for b in &plan.binds {
        let target = inside(root, &b.runtime);
        ensure_target(&b.host, &target)?;
        bind(&b.host, &target)?;
        if !b.writable {
            remount_read_only(&target)?;
        }
    }

    chdir(root).map_err(|e| mount_fail(format!("entering {}", root.display()), e))?;
    pivot_root(".", ".").map_err(|e| mount_fail("pivot_root", e))?;
    umount2(".", MntFlags::MNT_DETACH).map_err(|e| mount_fail("detaching the host root", e))?;
    chdir("/").map_err(|e| mount_fail("entering /", e))
}

fn cstring(bytes: &[u8]) -> Step<CString> {
    CString::new(bytes).map_err(|_| fail("LaunchFailed", "argument contains a NUL byte"))
}

fn find_program(name: &str, path: &str) -> Option<PathBuf> {
    if name.contains('/') {
        return Some(PathBuf::from(name));
    }
    path.split(':')
        .filter(|dir| !dir.is_empty())
        .map(|dir| Path::new(dir).join(name))
        .find(|candidate| {
            fs::metadata(candidate).is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        })
}

fn exec_payload(plan: &ExecutionPlan) -> Step<Infallible> {
    let _ = nix::sys::signal::sigprocmask(SigmaskHow::SIG_SETMASK, Some(&SigSet::empty()), None);
    let default = SigAction::new(SigHandler::SigDfl, SaFlags::empty(), SigSet::empty());
    for sig in SIGNALS {
        // SAFETY: restoring the default disposition.
        let _ = unsafe { sigaction(sig, &default) };
    }
    let home = plan.env.get("HOME").map(String::as_str).unwrap_or("/");
    if chdir(home).is_err() {
        let _ = chdir("/");
    }
    let argv0 = plan
        .argv
        .argv
        .first()
        .ok_or_else(|| fail("LaunchFailed", "empty command"))?;
    let search = plan
        .env
        .get("PATH")
        .map(String::as_str)
        .unwrap_or(super::DEFAULT_PATH);
    let program = find_program(argv0, search).ok_or_else(|| {
        fail(
            "LaunchFailed",
            format!("{argv0}: command not found in the runtime"),
        )
    })?;
    let argv = plan
        .argv
        .argv
        .iter()
        .map(|a| cstring(a.as_bytes()))
        .collect::<Step<Vec<_>>>()?;
    let env = plan
        .env
        .iter()
        .map(|(k, v)| cstring(format!("{k}={v}").as_bytes()))
        .collect::<Step<Vec<_>>>()?;
    let program_c = cstring(OsStr::new(&program).as_bytes())?;
    execve(&program_c, &argv, &env)
        .map_err(|e| fail("LaunchFailed", format!("cannot execute {argv0}: {}", e.desc())))
}
