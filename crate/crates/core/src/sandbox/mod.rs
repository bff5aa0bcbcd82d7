//! Copy-on-write sandboxes.
//!
//! A sandbox is assembled by two short-lived helper processes, both started
//! from the helper binary (see [`Helper`]):
//!
//! - the *keeper* creates a user and mount namespace, maps the caller to
//!   uid 0, mounts the overlay (`rofs` below `rwfs`, work dir `tmpfs`) on
//!   `live` inside that namespace and then waits. The host mount table never
//!   shows the overlay; the merged view stays reachable from the host as
//!   `/proc/<keeper>/root/<live>`. Dropping the [`MountGuard`] ends the keeper
//!   and with it the mount.
//! - the *launcher* joins the keeper's namespaces, unshares mount, pid and
//!   UTS namespaces and forks pid 1, which mounts `/proc`, a minimal `/dev`
//!   and a fresh `/tmp`, applies bind mounts, pivots into the merged tree and
//!   runs the command, reaping every orphan until the namespace is empty.
//!
//! [`ExecutionPlan`] captures every decision up front. Its canonical text
//! form (see [`ExecutionPlan::to_text`]) is what `--dry-run` prints:
//!
//! ```text
//! runtimebox-plan-v1
//! mode overlay
//! lower <path>
//! upper <path>
//! work <path>
//! merged <path>
//! uid-map 0 <host uid> 1
//! gid-map 0 <host gid> 1
//! hostname <name>
//! bind rw|ro <host path> <runtime path>    (one line per bind)
//! env KEY=VALUE                            (one line per variable, sorted)
//! command-source cli-override|manifest|default-shell
//! argv <word>                              (one line per word)
//! ```
//!
//! A `mode direct` plan has no `lower`/`upper`/`work` lines and runs with
//! `merged` itself as the writable root. Backslashes and newlines in values
//! are written as `\\` and `\n`.

#[cfg(target_os = "linux")]
mod helper;
mod launch;
mod mount;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::deploy::Deployment;
use crate::error::{Error, Result};
use crate::paths::Paths;
use crate::refmodel::{parse_manifest, resolve_command, CommandSpec, Manifest, MANIFEST_PATH};

pub use launch::{launch, SignalForwarder, Watch};
pub use mount::MountGuard;

/// First argument that switches a binary into helper mode.
pub const HELPER_ARG: &str = "__runtimebox-helper";
/// Environment variable naming the helper binary.
pub const HELPER_ENV: &str = "RUNTIMEBOX_HELPER";
pub const PLAN_FORMAT: &str = "runtimebox-plan-v1";
pub const RUNTIME_HOME: &str = "/home/runtime";
pub const PUBLIC_MOUNT: &str = "/home/runtime/Public";
pub const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";
/// Oldest kernel with unprivileged overlay mounts.
pub const MIN_KERNEL: (u32, u32) = (5, 11);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bind {
    pub host: PathBuf,
    pub runtime: PathBuf,
    pub writable: bool,
}

impl Bind {
    /// Parse `HOST:RUNTIME`, optionally suffixed with `:ro` or `:rw`. Paths
    /// containing ':' cannot be expressed.
    pub fn parse(spec: &str) -> Result<Bind> {
        let malformed = || Error::MalformedBind(spec.to_string());
        let parts: Vec<&str> = spec.split(':').collect();
        let (host, runtime, writable) = match parts[..] {
            [host, runtime] => (host, runtime, true),
            [host, runtime, "rw"] => (host, runtime, true),
            [host, runtime, "ro"] => (host, runtime, false),
            _ => return Err(malformed()),
        };
        let bind = Bind {
            host: PathBuf::from(host),
            runtime: PathBuf::from(runtime),
            writable,
        };
        bind.validate().map_err(|_| malformed())?;
        Ok(bind)
    }

    fn validate(&self) -> Result<()> {
        let spec = || format!("{}:{}", self.host.display(), self.runtime.display());
        let clean = |p: &Path| {
            p.is_absolute()
                && p.components()
                    .all(|c| matches!(c, Component::RootDir | Component::Normal(_)))
        };
        if !clean(&self.host) || !clean(&self.runtime) || self.runtime == Path::new("/") {
            return Err(Error::MalformedBind(spec()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub inside: u32,
    pub outside: u32,
    pub count: u32,
}

impl IdMap {
    fn root_to(outside: u32) -> IdMap {
        IdMap {
            inside: 0,
            outside,
            count: 1,
        }
    }
}

/// How the root of the sandbox is provided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum RootLayer {
    /// `lower` below `upper`, with `work` as the overlay work directory.
    Overlay {
        lower: PathBuf,
        upper: PathBuf,
        work: PathBuf,
    },
    /// The merged path itself, writable, with no overlay.
    Direct,
}

/// Everything needed to mount and launch a sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub root: RootLayer,
    /// Root directory of the process tree.
    pub merged: PathBuf,
    pub binds: Vec<Bind>,
    pub env: BTreeMap<String, String>,
    pub uid_map: IdMap,
    pub gid_map: IdMap,
    pub argv: CommandSpec,
    pub hostname: String,
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n")
}

fn escape_path(path: &Path) -> String {
    escape(&path.to_string_lossy())
}

impl ExecutionPlan {
    /// Canonical line-oriented form; identical plans give identical bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };
        line(PLAN_FORMAT.to_string());
        match &self.root {
            RootLayer::Overlay { lower, upper, work } => {
                line("mode overlay".into());
                line(format!("lower {}", escape_path(lower)));
                line(format!("upper {}", escape_path(upper)));
                line(format!("work {}", escape_path(work)));
            }
            RootLayer::Direct => line("mode direct".into()),
        }
        line(format!("merged {}", escape_path(&self.merged)));
        for (label, map) in [("uid-map", self.uid_map), ("gid-map", self.gid_map)] {
            line(format!("{label} {} {} {}", map.inside, map.outside, map.count));
        }
        line(format!("hostname {}", escape(&self.hostname)));
        for bind in &self.binds {
            line(format!(
                "bind {} {} {}",
                if bind.writable { "rw" } else { "ro" },
                escape_path(&bind.host),
                escape_path(&bind.runtime)
            ));
        }
        for (key, value) in &self.env {
            line(format!("env {}={}", escape(key), escape(value)));
        }
        line(format!("command-source {}", self.argv.source.as_str()));
        for word in &self.argv.argv {
            line(format!("argv {}", escape(word)));
        }
        out
    }

    /// Pretty-printed JSON with the same content as [`ExecutionPlan::to_text`].
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plans always serialize");
        text.push('\n');
        text
    }

    pub(crate) fn overlay_paths(&self) -> Vec<&Path> {
        let mut paths = vec![self.merged.as_path()];
        if let RootLayer::Overlay { lower, upper, work } = &self.root {
            paths.extend([lower.as_path(), upper.as_path(), work.as_path()]);
        }
        paths
    }
}

/// Facts about the invoking user that enter a plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostContext {
    pub uid: u32,
    pub gid: u32,
    /// Host side of the `/home/runtime/Public` bind.
    pub public_dir: PathBuf,
    /// Passed through as `TERM`.
    pub term: Option<String>,
}

impl HostContext {
    pub fn current(paths: &Paths) -> HostContext {
        // SAFETY: getuid/getgid cannot fail.
        let (uid, gid) = unsafe { (libc::getuid(), libc::getgid()) };
        HostContext {
            uid,
            gid,
            public_dir: paths.public_dir(),
            term: std::env::var("TERM").ok().filter(|t| !t.is_empty()),
        }
    }

    fn env(&self) -> BTreeMap<String, String> {
        let mut env = BTreeMap::new();
        env.insert("FAKEROOTDONTTRYCHOWN".into(), "1".into());
        env.insert("HOME".into(), RUNTIME_HOME.into());
        env.insert("LOGNAME".into(), "root".into());
        env.insert("PATH".into(), DEFAULT_PATH.into());
        env.insert("USER".into(), "root".into());
        if let Some(term) = &self.term {
            env.insert("TERM".into(), term.clone());
        }
        env
    }

    fn binds(&self, extra: &[Bind]) -> Result<Vec<Bind>> {
        let mut binds = vec![Bind {
            host: self.public_dir.clone(),
            runtime: PathBuf::from(PUBLIC_MOUNT),
            writable: true,
        }];
        for bind in extra {
            bind.validate()?;
            binds.push(bind.clone());
        }
        Ok(binds)
    }
}

/// Turn a name into something `sethostname` accepts.
fn hostname_from(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '-'
            }
        })
        .take(63)
        .collect();
    let trimmed = cleaned.trim_matches('-');
    if trimmed.is_empty() {
        "runtime".into()
    } else {
        trimmed.to_string()
    }
}

/// Plan a run of `deployment`. Does not touch the filesystem beyond reaping a
/// stale pid file.
pub fn build_plan(
    deployment: &Deployment,
    manifest: Option<&Manifest>,
    cli_override: Option<&str>,
    extra_binds: &[Bind],
    host: &HostContext,
) -> Result<ExecutionPlan> {
    deployment.ensure_not_running()?;
    Ok(ExecutionPlan {
        root: RootLayer::Overlay {
            lower: deployment.rofs(),
            upper: deployment.rwfs(),
            work: deployment.tmpfs(),
        },
        merged: deployment.live(),
        binds: host.binds(extra_binds)?,
        env: host.env(),
        uid_map: IdMap::root_to(host.uid),
        gid_map: IdMap::root_to(host.gid),
        argv: resolve_command(manifest, cli_override)?,
        hostname: hostname_from(deployment.reference.short_name()),
    })
}

/// Plan a session with `tree` itself as the writable root.
pub fn build_direct_plan(
    tree: &Path,
    cli_override: Option<&str>,
    host: &HostContext,
) -> Result<ExecutionPlan> {
    let name = tree
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ExecutionPlan {
        root: RootLayer::Direct,
        merged: tree.to_path_buf(),
        binds: host.binds(&[])?,
        env: host.env(),
        uid_map: IdMap::root_to(host.uid),
        gid_map: IdMap::root_to(host.gid),
        argv: resolve_command(None, cli_override)?,
        hostname: hostname_from(&name),
    })
}

/// Read `/manifest.toml` as the merged view would show it: an entry in
/// `rwfs` (including a whiteout) takes precedence over `rofs`.
pub fn read_manifest(deployment: &Deployment) -> Result<Option<Manifest>> {
    let upper = deployment.rwfs().join(MANIFEST_PATH);
    let source = match fs::symlink_metadata(&upper) {
        Ok(meta) if meta.is_file() => upper,
        Ok(_) => return Ok(None),
        Err(e) if e.kind() == io::ErrorKind::NotFound => deployment.rofs().join(MANIFEST_PATH),
        Err(e) => return Err(Error::io(format!("inspecting {}", upper.display()), e)),
    };
    match fs::symlink_metadata(&source) {
        Ok(meta) if meta.is_file() => {
            let bytes =
                fs::read(&source).map_err(|e| Error::io(format!("reading {}", source.display()), e))?;
            parse_manifest(&bytes).map(Some)
        }
        Ok(_) => Ok(None),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(format!("inspecting {}", source.display()), e)),
    }
}

/// The program that acts as keeper and launcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Helper {
    path: PathBuf,
}

impl Helper {
    pub fn new(path: impl Into<PathBuf>) -> Helper {
        Helper { path: path.into() }
    }

    /// `$RUNTIMEBOX_HELPER`, else the running executable (which must then
    /// dispatch [`HELPER_ARG`] to [`helper_main`]).
    pub fn locate() -> Result<Helper> {
        if let Some(path) = std::env::var_os(HELPER_ENV).filter(|p| !p.is_empty()) {
            return Ok(Helper::new(path));
        }
        std::env::current_exe()
            .map(Helper::new)
            .map_err(|e| Error::LaunchFailed(format!("cannot locate helper executable: {e}")))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Entry point for helper mode. `args` are the arguments after
/// [`HELPER_ARG`]. Returns the process exit code.
pub fn helper_main(args: Vec<OsString>) -> i32 {
    #[cfg(target_os = "linux")]
    {
        helper::main(args)
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = args;
        eprintln!("runtimebox helper: sandboxes require Linux");
        125
    }
}

fn parse_release(release: &str) -> Option<(u32, u32)> {
    let mut parts = release.split(|c: char| !c.is_ascii_digit());
    let major = parts.next()?.parse().ok()?;
    let minor = parts.next()?.parse().ok()?;
    Some((major, minor))
}

/// Fail with `KernelUnsupported` unless unprivileged user namespaces and
/// overlay mounts are available.
pub fn check_kernel() -> Result<()> {
    #[cfg(target_os = "linux")]
    {
        let uts =
            nix::sys::utsname::uname().map_err(|e| Error::KernelUnsupported(format!("uname failed: {e}")))?;
        let release = uts.release().to_string_lossy().into_owned();
        check_release(&release)?;
        for (knob, what) in [
            (
                "/proc/sys/kernel/unprivileged_userns_clone",
                "unprivileged user namespaces are disabled",
            ),
            (
                "/proc/sys/user/max_user_namespaces",
                "user namespaces are disabled",
            ),
        ] {
            if fs::read_to_string(knob).is_ok_and(|v| v.trim() == "0") {
                return Err(Error::KernelUnsupported(format!("{what} ({knob} is 0)")));
            }
        }
        Ok(())
    }
    #[cfg(not(target_os = "linux"))]
    {
        Err(Error::KernelUnsupported(
            "sandboxes need Linux user namespaces and overlay mounts".into(),
        ))
    }
}

fn check_release(release: &str) -> Result<()> {
    match parse_release(release) {
        Some(v) if v >= MIN_KERNEL => Ok(()),
        _ => Err(Error::KernelUnsupported(format!(
            "Linux {release} found, {}.{} or newer is required",
            MIN_KERNEL.0, MIN_KERNEL.1
        ))),
    }
}

/// Create host-side bind sources that are expected to exist.
fn prepare_host(plan: &ExecutionPlan) -> Result<()> {
    if let Some(public) = plan.binds.iter().find(|b| b.runtime == Path::new(PUBLIC_MOUNT)) {
        fs::create_dir_all(&public.host)
            .map_err(|e| Error::io(format!("creating {}", public.host.display()), e))?;
    }
    for bind in &plan.binds {
        if !bind.host.exists() {
            return Err(Error::LaunchFailed(format!(
                "bind source {} does not exist",
                bind.host.display()
            )));
        }
    }
    Ok(())
}

/// Mount, launch and tear down a sandbox for `deployment`. Returns the
/// command's exit status (128 + N when it was killed by signal N).
pub fn run(
    deployment: &Deployment,
    cli_override: Option<&str>,
    extra_binds: &[Bind],
    host: &HostContext,
    helper: &Helper,
) -> Result<i32> {
    let lock = deployment.lock()?;
    let manifest = read_manifest(deployment)?;
    let plan = build_plan(deployment, manifest.as_ref(), cli_override, extra_binds, host)?;
    prepare_host(&plan)?;
    let guard = MountGuard::mount(&plan, helper)?;
    let pid_file = deployment.write_pid_file(guard.keeper_pid())?;
    drop(lock);
    let status = launch(&plan, &guard, helper);
    let released = guard.release();
    drop(pid_file);
    let status = status?;
    released?;
    Ok(status)
}

/// Run `plan` without a deployment (used for authoring sessions).
pub fn run_plan(plan: &ExecutionPlan, helper: &Helper) -> Result<i32> {
    prepare_host(plan)?;
    let guard = MountGuard::mount(plan, helper)?;
    let status = launch(plan, &guard, helper);
    let released = guard.release();
    let status = status?;
    released?;
    Ok(status)
}

/// Text appended to the status channel by helpers: `Kind\tmessage`.
pub(crate) fn decode_status(text: &str) -> Option<Error> {
    let line = text.lines().next()?;
    let (kind, message) = line.split_once('\t').unwrap_or((line, ""));
    let message = message.to_string();
    Some(match kind {
        "KernelUnsupported" => Error::KernelUnsupported(message),
        "MountFailed" => Error::MountFailed(message),
        "XattrUnsupported" => Error::XattrUnsupported {
            path: PathBuf::from(message),
        },
        _ => Error::LaunchFailed(message),
    })
}

#[cfg(test)]
mod tests;
