//! Static mirrors: remote configuration, pull, export and `latest`
//! resolution.
//!
//! A mirror is a directory tree laid out like the local repository and served
//! by any static file server:
//!
//! ```text
//! refs/<name>/<arch>/<version>     one 64-hex commit id line
//! objects/<aa>/<62 hex>.<kind>     canonical object bytes
//! versions/<name>/<arch>           known versions, one per line (written by export)
//! ```
//!
//! Remotes are recorded in the repository `config` as `remote <name> <url>`
//! lines.

mod export;
mod pull;
pub mod transport;
pub mod version;

use std::fmt;
use std::fs;
use std::sync::Arc;
use std::time::Duration;

use url::Url;

use crate::casstore::{Repo, REPO_FORMAT};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::refmodel::RuntimeRef;

pub use export::export;
pub use pull::{pull, pull_with};
pub use transport::{transport_for, Fetched, Transport, TransportError};
pub use version::{compare_versions, latest_of};

/// The version string resolved against the list of published versions.
pub const LATEST: &str = "latest";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    pub name: String,
    pub url: String,
}

fn valid_remote_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

/// Validate `url` and strip trailing slashes.
pub fn normalize_url(url: &str) -> Result<String> {
    let malformed = |reason: String| Error::MalformedUrl {
        url: url.to_string(),
        reason,
    };
    let parsed = Url::parse(url).map_err(|e| malformed(e.to_string()))?;
    match parsed.scheme() {
        "http" | "https" => {
            if parsed.host_str().is_none_or(str::is_empty) {
                return Err(malformed("missing host".into()));
            }
        }
        "file" => {
            if parsed.to_file_path().is_err() {
                return Err(malformed("not a local path".into()));
            }
        }
        other => {
            return Err(malformed(format!(
                "unsupported scheme {other:?}; use http, https or file"
            )))
        }
    }
    if parsed.query().is_some() || parsed.fragment().is_some() {
        return Err(malformed("query strings and fragments are not supported".into()));
    }
    let text = parsed.as_str().trim_end_matches('/');
    Ok(text.to_string())
}

fn read_config(repo: &Repo) -> Result<Vec<String>> {
    let text = fs::read_to_string(repo.config_path())
        .map_err(|e| Error::io(format!("reading {}", repo.config_path().display()), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_config(repo: &Repo, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fsutil::atomic_write(&repo.config_path(), text.as_bytes())
}

fn parse_remote_line(line: &str) -> Option<RemoteConfig> {
    let rest = line.strip_prefix("remote ")?;
    let (name, url) = rest.split_once(' ')?;
    Some(RemoteConfig {
        name: name.to_string(),
        url: url.to_string(),
    })
}

/// Configured remotes in the order they were added.
pub fn list_remotes(repo: &Repo) -> Result<Vec<RemoteConfig>> {
    Ok(read_config(repo)?
        .iter()
        .filter_map(|l| parse_remote_line(l))
        .collect())
}

/// Register a remote. Re-adding an identical entry is a no-op.
pub fn add_remote(repo: &Repo, name: &str, url: &str) -> Result<RemoteConfig> {
    if !valid_remote_name(name) {
        return Err(Error::InvalidRemoteName(name.to_string()));
    }
    let url = normalize_url(url)?;
    let _lock = repo.lock()?;
    let mut lines = read_config(repo)?;
    if let Some(existing) = lines
        .iter()
        .filter_map(|l| parse_remote_line(l))
        .find(|r| r.name == name)
    {
        if existing.url == url {
            return Ok(existing);
        }
        return Err(Error::DuplicateRemote {
            name: name.to_string(),
            url: existing.url,
        });
    }
    lines.push(format!("remote {name} {url}"));
    write_config(repo, &lines)?;
    Ok(RemoteConfig {
        name: name.to_string(),
        url,
    })
}

pub fn remove_remote(repo: &Repo, name: &str) -> Result<()> {
    let _lock = repo.lock()?;
    let lines = read_config(repo)?;
    let kept: Vec<String> = lines
        .iter()
        .filter(|l| parse_remote_line(l).is_none_or(|r| r.name != name))
        .cloned()
        .collect();
    if kept.len() == lines.len() {
        return Err(Error::UnknownRemote(name.to_string()));
    }
    write_config(repo, &kept)
}

pub fn get_remote(repo: &Repo, name: &str) -> Result<RemoteConfig> {
    list_remotes(repo)?
        .into_iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::UnknownRemote(name.to_string()))
}

/// Delay between attempts.
pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Tuning for network operations.
#[derive(Clone)]
pub struct PullOptions {
    /// Concurrent object downloads.
    pub workers: usize,
    /// Attempts per file before giving up.
    pub attempts: u32,
    /// Delay after the first failed attempt; doubles after each further one.
    pub base_delay: Duration,
    pub sleeper: Sleeper,
}

impl Default for PullOptions {
    fn default() -> Self {
        PullOptions {
            workers: 4,
            attempts: 3,
            base_delay: Duration::from_millis(500),
            sleeper: Arc::new(std::thread::sleep),
        }
    }
}

impl fmt::Debug for PullOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PullOptions")
            .field("workers", &self.workers)
            .field("attempts", &self.attempts)
            .field("base_delay", &self.base_delay)
            .finish_non_exhaustive()
    }
}

/// Run `attempt` until it succeeds, fails fatally, or runs out of attempts.
pub(crate) fn with_retry(
    transport: &dyn Transport,
    rel: &str,
    opts: &PullOptions,
    mut attempt: impl FnMut() -> Result<std::result::Result<Fetched, TransportError>>,
) -> Result<Fetched> {
    let attempts = opts.attempts.max(1);
    let mut delay = opts.base_delay;
    for n in 1..=attempts {
        match attempt()? {
            Ok(fetched) => return Ok(fetched),
            Err(e) if e.retryable && n < attempts => {
                (opts.sleeper)(delay);
                delay *= 2;
            }
            Err(e) => {
                return Err(Error::NetworkError {
                    path: transport.locate(rel),
                    reason: e.reason,
                })
            }
        }
    }
    unreachable!("loop returns on the final attempt")
}

/// Fetch a small text file into memory.
pub(crate) fn fetch_text(transport: &dyn Transport, rel: &str, opts: &PullOptions) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let fetched = with_retry(transport, rel, opts, || {
        buf.clear();
        Ok(transport.fetch(rel, &mut buf))
    })?;
    if fetched == Fetched::NotFound {
        return Ok(None);
    }
    String::from_utf8(buf).map(Some).map_err(|_| Error::NetworkError {
        path: transport.locate(rel),
        reason: "response is not UTF-8 text".into(),
    })
}

fn remote_versions(
    transport: &dyn Transport,
    reference: &RuntimeRef,
    opts: &PullOptions,
) -> Result<Vec<String>> {
    let index = format!("versions/{}/{}", reference.name(), reference.arch());
    if let Some(text) = fetch_text(transport, &index, opts)? {
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect());
    }
    let dir = format!("refs/{}/{}", reference.name(), reference.arch());
    Ok(transport.list_dir(&dir).unwrap_or_default())
}

fn local_versions(repo: &Repo, reference: &RuntimeRef) -> Result<Vec<String>> {
    let same = |r: &RuntimeRef| r.name() == reference.name() && r.arch() == reference.arch();
    let mut versions: Vec<String> = repo
        .list_refs()?
        .into_iter()
        .map(|(r, _)| r)
        .chain(repo.list_remote_refs()?.into_iter().map(|(_, r, _)| r))
        .filter(same)
        .map(|r| r.version().to_string())
        .collect();
    versions.sort();
    versions.dedup();
    Ok(versions)
}

/// Resolve `latest` to the greatest published version; any other version
/// resolves to itself. With `remote` unset, local refs are consulted.
pub fn resolve_version(
    repo: &Repo,
    remote: Option<&str>,
    reference: &RuntimeRef,
    opts: &PullOptions,
) -> Result<RuntimeRef> {
    if reference.version() != LATEST {
        return Ok(reference.clone());
    }
    let versions = match remote {
        Some(name) => {
            let config = get_remote(repo, name)?;
            let transport = transport_for(&config.url)?;
            remote_versions(transport.as_ref(), reference, opts)?
        }
        None => local_versions(repo, reference)?,
    };
    // Mirror content is untrusted; skip names that are not valid components.
    let versions: Vec<String> = versions
        .into_iter()
        .filter(|v| reference.with_version(v).is_ok())
        .collect();
    match latest_of(versions.iter().map(String::as_str)) {
        Some(v) => reference.with_version(v),
        // Only a literal `latest` was published.
        None if versions.iter().any(|v| v == LATEST) => Ok(reference.clone()),
        None => Err(Error::RefNotFound(reference.to_string())),
    }
}

/// Check that `repo` carries the expected format line; used by export to
/// recognise its own earlier output.
pub(crate) fn is_repo_layout(dir: &std::path::Path) -> bool {
    fs::read_to_string(dir.join("config")).is_ok_and(|c| c.lines().next() == Some(REPO_FORMAT))
}

#[cfg(test)]
mod tests;
