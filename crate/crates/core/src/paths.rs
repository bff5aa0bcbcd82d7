//! Where the repository and deployments live.
//!
//! | variable                | default                                         |
//! |-------------------------|-------------------------------------------------|
//! | `RUNTIMEBOX_DATA_HOME`  | `$XDG_DATA_HOME/org.mardi.maps/ostree/repo`     |
//! | `XDG_DATA_HOME`         | `$HOME/.local/share`                            |
//! | `RUNTIMEBOX_STATE_HOME` | `$HOME/.var/org.mardi.maps`                     |
//!
//! `RUNTIMEBOX_DATA_HOME` names the repository directory itself and
//! `RUNTIMEBOX_STATE_HOME` the deployment root itself.

use std::ffi::OsString;
use std::path::PathBuf;

use crate::error::{Error, Result};

pub const APP_ID: &str = "org.mardi.maps";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paths {
    pub home: PathBuf,
    pub repo: PathBuf,
    pub state_root: PathBuf,
}

impl Paths {
    pub fn from_env() -> Result<Paths> {
        Paths::from_lookup(|key| std::env::var_os(key))
    }

    /// Resolve paths using `lookup` in place of the process environment.
    pub fn from_lookup(lookup: impl Fn(&str) -> Option<OsString>) -> Result<Paths> {
        let get = |key: &str| lookup(key).filter(|v| !v.is_empty()).map(PathBuf::from);
        let home = get("HOME").ok_or_else(|| Error::NotWritable {
            path: PathBuf::from("$HOME"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "HOME is not set"),
        })?;
        let repo = match get("RUNTIMEBOX_DATA_HOME") {
            Some(p) => p,
            None => get("XDG_DATA_HOME")
                .unwrap_or_else(|| home.join(".local/share"))
                .join(APP_ID)
                .join("ostree/repo"),
        };
        let state_root = get("RUNTIMEBOX_STATE_HOME").unwrap_or_else(|| home.join(".var").join(APP_ID));
        Ok(Paths {
            home,
            repo,
            state_root,
        })
    }

    /// The host directory shared with every runtime as `/home/runtime/Public`.
    pub fn public_dir(&self) -> PathBuf {
        self.home.join("Public")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn resolve(vars: &[(&str, &str)]) -> Result<Paths> {
        let map: HashMap<String, OsString> = vars
            .iter()
            .map(|(k, v)| (k.to_string(), OsString::from(v)))
            .collect();
        Paths::from_lookup(|k| map.get(k).cloned())
    }

    #[test]
    fn defaults_follow_home() {
        let p = resolve(&[("HOME", "/h")]).unwrap();
        assert_eq!(
            p.repo,
            PathBuf::from("/h/.local/share/org.mardi.maps/ostree/repo")
        );
        assert_eq!(p.state_root, PathBuf::from("/h/.var/org.mardi.maps"));
        assert_eq!(p.public_dir(), PathBuf::from("/h/Public"));
    }

    #[test]
    fn xdg_and_overrides() {
        let p = resolve(&[("HOME", "/h"), ("XDG_DATA_HOME", "/x")]).unwrap();
        assert_eq!(p.repo, PathBuf::from("/x/org.mardi.maps/ostree/repo"));
        let p = resolve(&[
            ("HOME", "/h"),
            ("XDG_DATA_HOME", "/x"),
            ("RUNTIMEBOX_DATA_HOME", "/r"),
            ("RUNTIMEBOX_STATE_HOME", "/s"),
        ])
        .unwrap();
        assert_eq!(p.repo, PathBuf::from("/r"));
        assert_eq!(p.state_root, PathBuf::from("/s"));
    }

    #[test]
    fn home_is_required() {
        assert!(resolve(&[]).is_err());
        assert!(resolve(&[("HOME", "")]).is_err());
    }
}
