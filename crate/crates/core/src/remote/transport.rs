//! Read-only access to a static mirror: HTTP(S) via `ureq`, or a local
//! directory via `file://`.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::PathBuf;
use std::time::Duration;

use url::Url;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fetched {
    Found,
    NotFound,
}

#[derive(Debug, Clone)]
pub struct TransportError {
    pub reason: String,
    pub retryable: bool,
}

impl TransportError {
    fn retryable(reason: impl Into<String>) -> Self {
        TransportError {
            reason: reason.into(),
            retryable: true,
        }
    }

    fn fatal(reason: impl Into<String>) -> Self {
        TransportError {
            reason: reason.into(),
            retryable: false,
        }
    }
}

pub trait Transport: Send + Sync {
    /// Stream the file at `rel` (relative to the mirror root) into `out`.
    fn fetch(&self, rel: &str, out: &mut dyn Write) -> std::result::Result<Fetched, TransportError>;

    /// Names inside directory `rel`, when the mirror can enumerate them.
    fn list_dir(&self, _rel: &str) -> Option<Vec<String>> {
        None
    }

    /// Absolute location of `rel`, for diagnostics.
    fn locate(&self, rel: &str) -> String;
}

/// Pick a transport for a normalized remote URL.
pub fn transport_for(url: &str) -> Result<Box<dyn Transport>> {
    let parsed = Url::parse(url).map_err(|e| Error::MalformedUrl {
        url: url.to_string(),
        reason: e.to_string(),
    })?;
    match parsed.scheme() {
        "http" | "https" => Ok(Box::new(HttpTransport::new(url))),
        "file" => {
            let base = parsed.to_file_path().map_err(|()| Error::MalformedUrl {
                url: url.to_string(),
                reason: "not a local path".into(),
            })?;
            Ok(Box::new(FileTransport { base }))
        }
        other => Err(Error::MalformedUrl {
            url: url.to_string(),
            reason: format!("unsupported scheme {other:?}"),
        }),
    }
}

pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .try_proxy_from_env(true)
            .timeout_connect(Duration::from_secs(30))
            .timeout_read(Duration::from_secs(120))
            .build();
        HttpTransport {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl Transport for HttpTransport {
    fn fetch(&self, rel: &str, out: &mut dyn Write) -> std::result::Result<Fetched, TransportError> {
        let url = self.locate(rel);
        match self.agent.get(&url).call() {
            Ok(response) => {
                let mut body = response.into_reader();
                io::copy(&mut body, out)
                    .map_err(|e| TransportError::retryable(format!("reading body: {e}")))?;
                Ok(Fetched::Found)
            }
            Err(ureq::Error::Status(404 | 410, _)) => Ok(Fetched::NotFound),
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(TransportError::retryable(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(TransportError::fatal(format!("HTTP {code}"))),
            Err(ureq::Error::Transport(t)) => Err(TransportError::retryable(t.to_string())),
        }
    }

    fn locate(&self, rel: &str) -> String {
        format!("{}/{}", self.base, rel)
    }
}

pub struct FileTransport {
    base: PathBuf,
}

impl Transport for FileTransport {
    fn fetch(&self, rel: &str, out: &mut dyn Write) -> std::result::Result<Fetched, TransportError> {
        let path = self.base.join(rel);
        let mut file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Fetched::NotFound),
            Err(e) if e.raw_os_error() == Some(libc::EISDIR) => return Ok(Fetched::NotFound),
            Err(e) => return Err(TransportError::fatal(e.to_string())),
        };
        io::copy(&mut file, out).map_err(|e| TransportError::retryable(e.to_string()))?;
        Ok(Fetched::Found)
    }

    fn list_dir(&self, rel: &str) -> Option<Vec<String>> {
        let entries = fs::read_dir(self.base.join(rel)).ok()?;
        let mut names: Vec<String> = entries
            .flatten()
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| !n.starts_with('.'))
            .collect();
        names.sort();
        Some(names)
    }

    fn locate(&self, rel: &str) -> String {
        self.base.join(rel).display().to_string()
    }
}
