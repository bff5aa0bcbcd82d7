//! Runtime identities, manifests and command resolution.
//!
//! A runtime is named `name/arch/version`, e.g.
//! `org.oscar_system.oscar/x86_64/1.0.0`. Each component ends up as a path
//! component on disk and in remote URLs, so the accepted alphabet is
//! deliberately narrow.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shell launched when neither the command line nor the manifest names a
/// command.
pub const DEFAULT_SHELL: [&str; 2] = ["/bin/sh", "-l"];

/// Path of the manifest inside a runtime.
pub const MANIFEST_PATH: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuntimeRef {
    name: String,
    arch: String,
    version: String,
}

impl RuntimeRef {
    pub fn new(name: impl Into<String>, arch: impl Into<String>, version: impl Into<String>) -> Result<Self> {
        let (name, arch, version) = (name.into(), arch.into(), version.into());
        let display = format!("{name}/{arch}/{version}");
        for component in [&name, &arch, &version] {
            check_component(component).map_err(|reason| Error::MalformedRef {
                input: display.clone(),
                reason,
            })?;
        }
        Ok(RuntimeRef { name, arch, version })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Same name and arch, different version.
    pub fn with_version(&self, version: &str) -> Result<Self> {
        RuntimeRef::new(self.name.clone(), self.arch.clone(), version)
    }

    /// Last dot-separated segment of the name: `org.oscar_system.oscar` gives
    /// `oscar`.
    pub fn short_name(&self) -> &str {
        self.name.rsplit('.').next().unwrap_or(&self.name)
    }

    /// The three components, for joining onto filesystem paths.
    pub fn components(&self) -> [&str; 3] {
        [&self.name, &self.arch, &self.version]
    }
}

fn check_component(component: &str) -> std::result::Result<(), String> {
    if component.is_empty() {
        return Err("empty component".into());
    }
    if component.starts_with('.') {
        return Err(format!("component {component:?} starts with '.'"));
    }
    if component.contains("..") {
        return Err(format!("component {component:?} contains '..'"));
    }
    if let Some(c) = component
        .chars()
        .find(|c| *c == '/' || c.is_whitespace() || c.is_control())
    {
        return Err(format!("component {component:?} contains {c:?}"));
    }
    Ok(())
}

pub fn parse_runtime_ref(text: &str) -> Result<RuntimeRef> {
    let parts: Vec<&str> = text.split('/').collect();
    if parts.len() != 3 {
        return Err(Error::MalformedRef {
            input: text.to_string(),
            reason: format!(
                "expected name/arch/version, found {} separator(s)",
                parts.len() - 1
            ),
        });
    }
    RuntimeRef::new(parts[0], parts[1], parts[2])
}

pub fn format_runtime_ref(reference: &RuntimeRef) -> String {
    format!("{}/{}/{}", reference.name, reference.arch, reference.version)
}

impl fmt::Display for RuntimeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.name, self.arch, self.version)
    }
}

impl FromStr for RuntimeRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_runtime_ref(s)
    }
}

impl Serialize for RuntimeRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RuntimeRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_runtime_ref(&text).map_err(serde::de::Error::custom)
    }
}

/// Parsed `/manifest.toml`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    /// `[Core] command`. `None` when the key is absent; never empty.
    pub command: Option<String>,
    /// Every other key, flattened to dotted paths such as `Meta.URL`.
    pub meta: BTreeMap<String, String>,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::ManifestSyntax(format!("not UTF-8: {e}")))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::ManifestSyntax(e.message().to_string()))?;

    let mut manifest = Manifest::default();
    for (key, value) in &table {
        if key == "Core" {
            let core = value
                .as_table()
                .ok_or_else(|| Error::ManifestType("[Core] must be a table".into()))?;
            for (core_key, core_value) in core {
                if core_key == "command" {
                    let command = core_value.as_str().ok_or_else(|| {
                        Error::ManifestType(format!(
                            "Core.command must be a string, found {}",
                            core_value.type_str()
                        ))
                    })?;
                    if command.is_empty() {
                        return Err(Error::ManifestType("Core.command is empty".into()));
                    }
                    manifest.command = Some(command.to_string());
                } else {
                    flatten_into(&mut manifest.meta, format!("Core.{core_key}"), core_value);
                }
            }
        } else {
            flatten_into(&mut manifest.meta, key.clone(), value);
        }
    }
    Ok(manifest)
}

fn flatten_into(meta: &mut BTreeMap<String, String>, path: String, value: &toml::Value) {
    match value {
        toml::Value::Table(table) => {
            for (key, inner) in table {
                flatten_into(meta, format!("{path}.{key}"), inner);
            }
        }
        toml::Value::String(s) => {
            meta.insert(path, s.clone());
        }
        other => {
            meta.insert(path, other.to_string());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandSource {
    CliOverride,
    Manifest,
    DefaultShell,
}

impl CommandSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandSource::CliOverride => "cli-override",
            CommandSource::Manifest => "manifest",
            CommandSource::DefaultShell => "default-shell",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub argv: Vec<String>,
    pub source: CommandSource,
}

/// Pick the command to run: CLI override, then manifest, then the default
/// login shell. The chosen string is split with POSIX quoting rules, never
/// handed to a host shell.
pub fn resolve_command(manifest: Option<&Manifest>, cli_override: Option<&str>) -> Result<CommandSpec> {
    let (text, source) = match (cli_override, manifest.and_then(|m| m.command.as_deref())) {
        (Some(cmd), _) => (cmd, CommandSource::CliOverride),
        (None, Some(cmd)) => (cmd, CommandSource::Manifest),
        (None, None) => {
            return Ok(CommandSpec {
                argv: DEFAULT_SHELL.iter().map(|s| s.to_string()).collect(),
                source: CommandSource::DefaultShell,
            })
        }
    };
    let argv = shlex::split(text).ok_or_else(|| Error::EmptyCommand(text.to_string()))?;
    if argv.first().is_none_or(|w| w.is_empty()) {
        return Err(Error::EmptyCommand(text.to_string()));
    }
    Ok(CommandSpec { argv, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    const OSCAR_MANIFEST: &str = r#"[Core]
command = "julia -J /tmp/jl_UuXQwY/Oscar.so --banner=no"

[Meta]
Project = "OSCAR -- Open Source Computer Algebra Research system, Version 1.0.0, The OSCAR Team, 2024. (https://www.oscar-system.org)"
URL = "https://www.oscar-system.org/"
"#;

    #[test]
    fn parses_oscar_ref() {
        let r = parse_runtime_ref("org.oscar_system.oscar/x86_64/1.0.0").unwrap();
        assert_eq!(r.name(), "org.oscar_system.oscar");
        assert_eq!(r.arch(), "x86_64");
        assert_eq!(r.version(), "1.0.0");
        assert_eq!(r.short_name(), "oscar");
    }

    #[test]
    fn minimal_ref() {
        let r = parse_runtime_ref("a/b/c").unwrap();
        assert_eq!(r.components(), ["a", "b", "c"]);
        assert_eq!(format_runtime_ref(&r), "a/b/c");
    }

    #[test]
    fn formats_vibrant_ref() {
        let r = RuntimeRef::new("github.anantharaman.vibrant", "x86_64", "1.2.1").unwrap();
        assert_eq!(format_runtime_ref(&r), "github.anantharaman.vibrant/x86_64/1.2.1");
    }

    #[test]
    fn rejects_malformed_refs() {
        for bad in [
            "org.example/x86_64",
            "a/b/c/d",
            "",
            "a//c",
            "a/b/",
            "a b/c/d",
            "../b/c",
            ".hidden/b/c",
            "a/b/1..2",
            "a/b\t/c",
            "a/b/c\n",
        ] {
            match parse_runtime_ref(bad) {
                Err(Error::MalformedRef { .. }) => {}
                other => panic!("{bad:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn parses_oscar_manifest() {
        let m = parse_manifest(OSCAR_MANIFEST.as_bytes()).unwrap();
        assert_eq!(
            m.command.as_deref(),
            Some("julia -J /tmp/jl_UuXQwY/Oscar.so --banner=no")
        );
        assert_eq!(m.meta["Meta.URL"], "https://www.oscar-system.org/");
        assert!(m.meta["Meta.Project"].starts_with("OSCAR -- Open Source"));
        assert_eq!(m.meta.len(), 2);
    }

    #[test]
    fn empty_manifest() {
        assert_eq!(parse_manifest(b"").unwrap(), Manifest::default());
    }

    #[test]
    fn manifest_type_errors() {
        for bad in [
            "[Core]\ncommand = 42",
            "[Core]\ncommand = \"\"",
            "[Core]\ncommand = [\"a\"]",
            "Core = 1",
        ] {
            assert!(
                matches!(parse_manifest(bad.as_bytes()), Err(Error::ManifestType(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn manifest_syntax_errors() {
        for bad in [&b"[Core"[..], b"command = ", b"\xff\xfe", b"a = 1\na = 2"] {
            assert!(matches!(parse_manifest(bad), Err(Error::ManifestSyntax(_))));
        }
    }

    #[test]
    fn manifest_flattens_nested_and_non_string_values() {
        let m = parse_manifest(b"top = 1\n[Core]\nextra = true\n[Meta.deep]\nk = \"v\"\n").unwrap();
        assert_eq!(m.command, None);
        assert_eq!(m.meta["top"], "1");
        assert_eq!(m.meta["Core.extra"], "true");
        assert_eq!(m.meta["Meta.deep.k"], "v");
    }

    #[test]
    fn resolution_matrix() {
        let manifest = Manifest {
            command: Some("julia --banner=no".into()),
            meta: BTreeMap::new(),
        };
        let spec = resolve_command(Some(&manifest), None).unwrap();
        assert_eq!(spec.argv, ["julia", "--banner=no"]);
        assert_eq!(spec.source, CommandSource::Manifest);

        let spec = resolve_command(None, None).unwrap();
        assert_eq!(spec.argv, ["/bin/sh", "-l"]);
        assert_eq!(spec.source, CommandSource::DefaultShell);

        let spec = resolve_command(Some(&manifest), Some(r#"bash -c "echo hi""#)).unwrap();
        assert_eq!(spec.argv, ["bash", "-c", "echo hi"]);
        assert_eq!(spec.source, CommandSource::CliOverride);

        let spec = resolve_command(None, Some("true")).unwrap();
        assert_eq!(spec.source, CommandSource::CliOverride);

        // A manifest without a command falls through to the shell.
        let spec = resolve_command(Some(&Manifest::default()), None).unwrap();
        assert_eq!(spec.source, CommandSource::DefaultShell);
    }

    #[test]
    fn empty_override_is_rejected() {
        for bad in ["", "   ", "\"unterminated", "''"] {
            assert!(
                matches!(resolve_command(None, Some(bad)), Err(Error::EmptyCommand(_))),
                "{bad:?}"
            );
        }
    }
}
