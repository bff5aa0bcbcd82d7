use std::os::unix::fs::symlink;

use proptest::prelude::*;

use super::*;
use crate::casstore::ObjectId;
use crate::refmodel::{CommandSource, RuntimeRef};

fn host() -> HostContext {
    HostContext {
        uid: 1000,
        gid: 1001,
        public_dir: PathBuf::from("/home/user/Public"),
        term: Some("xterm-256color".into()),
    }
}

fn deployment(base: &Path) -> Deployment {
    let reference = RuntimeRef::new("org.example.Oscar", "x86_64", "latest").unwrap();
    Deployment {
        resolved: reference.with_version("1.2.0").unwrap(),
        reference,
        base: base.to_path_buf(),
        commit: ObjectId([7; 32]),
        remote: None,
        deployed_at: 0,
    }
}

fn made(base: &Path) -> Deployment {
    for dir in ["rofs", "rwfs", "tmpfs", "live"] {
        fs::create_dir_all(base.join(dir)).unwrap();
    }
    deployment(base)
}

#[test]
fn plan_text_is_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let d = made(dir.path());
    let binds = [Bind::parse("/data:/mnt/data:ro").unwrap()];
    let plan = build_plan(&d, None, Some("julia --threads 4"), &binds, &host()).unwrap();
    let base = dir.path().display();
    let expected = format!(
        "runtimebox-plan-v1\n\
         mode overlay\n\
         lower {base}/rofs\n\
         upper {base}/rwfs\n\
         work {base}/tmpfs\n\
         merged {base}/live\n\
         uid-map 0 1000 1\n\
         gid-map 0 1001 1\n\
         hostname Oscar\n\
         bind rw /home/user/Public /home/runtime/Public\n\
         bind ro /data /mnt/data\n\
         env FAKEROOTDONTTRYCHOWN=1\n\
         env HOME=/home/runtime\n\
         env LOGNAME=root\n\
         env PATH={DEFAULT_PATH}\n\
         env TERM=xterm-256color\n\
         env USER=root\n\
         command-source cli-override\n\
         argv julia\n\
         argv --threads\n\
         argv 4\n"
    );
    assert_eq!(plan.to_text(), expected);
    let again = build_plan(&d, None, Some("julia --threads 4"), &binds, &host()).unwrap();
    assert_eq!(plan.to_text(), again.to_text());
}

#[test]
fn plan_json_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let plan = build_plan(&made(dir.path()), None, None, &[], &host()).unwrap();
    assert_eq!(plan.argv.source, CommandSource::DefaultShell);
    let back: ExecutionPlan = serde_json::from_str(&plan.to_json()).unwrap();
    assert_eq!(back, plan);
    let direct = build_direct_plan(Path::new("/work/my tree!"), Some("sh"), &host()).unwrap();
    assert_eq!(direct.hostname, "my-tree");
    assert!(direct
        .to_text()
        .contains("\nmode direct\nmerged /work/my tree!\n"));
    let back: ExecutionPlan = serde_json::from_str(&direct.to_json()).unwrap();
    assert_eq!(back, direct);
}

#[test]
fn plan_escapes_newlines_and_backslashes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = build_plan(&made(dir.path()), None, Some("printf 'a\nb\\\\c'"), &[], &host()).unwrap();
    assert!(
        plan.to_text().contains("argv a\\nb\\\\\\\\c\n"),
        "{}",
        plan.to_text()
    );
    assert_eq!(
        plan.to_text().lines().filter(|l| l.starts_with("argv ")).count(),
        2
    );
}

#[test]
fn build_plan_refuses_when_running() {
    let dir = tempfile::tempdir().unwrap();
    let d = made(dir.path());
    let _pid = d.write_pid_file(std::process::id() as i32).unwrap();
    let err = build_plan(&d, None, None, &[], &host()).unwrap_err();
    assert_eq!(err.kind_name(), "SandboxRunning");
}

#[test]
fn bind_parsing() {
    let b = Bind::parse("/a:/b").unwrap();
    assert_eq!(
        (b.host.as_path(), b.runtime.as_path(), b.writable),
        (Path::new("/a"), Path::new("/b"), true)
    );
    assert!(!Bind::parse("/a:/b:ro").unwrap().writable);
    assert!(Bind::parse("/a:/b:rw").unwrap().writable);
    for bad in [
        "",
        "/a",
        "a:/b",
        "/a:b",
        "/a/../x:/b",
        "/a:/b/..",
        "/a:/",
        "/a:/b:xx",
        ":/b",
        "/a:",
    ] {
        assert_eq!(
            Bind::parse(bad).map_err(|e| e.kind_name()),
            Err("MalformedBind"),
            "{bad}"
        );
    }
    let dir = tempfile::tempdir().unwrap();
    let extra = [Bind {
        host: "relative".into(),
        runtime: "/x".into(),
        writable: true,
    }];
    let err = build_plan(&made(dir.path()), None, None, &extra, &host()).unwrap_err();
    assert_eq!(err.kind_name(), "MalformedBind");
}

proptest! {
    #[test]
    fn bind_parse_roundtrips(
        host in proptest::collection::vec("[a-zA-Z0-9._-]{1,8}", 1..4),
        runtime in proptest::collection::vec("[a-zA-Z0-9._-]{1,8}", 1..4),
        mode in prop_oneof![Just(""), Just(":ro"), Just(":rw")],
    ) {
        prop_assume!(host.iter().chain(&runtime).all(|s| s != "." && s != ".."));
        let host = format!("/{}", host.join("/"));
        let runtime = format!("/{}", runtime.join("/"));
        let bind = Bind::parse(&format!("{host}:{runtime}{mode}")).unwrap();
        prop_assert_eq!(bind.host, PathBuf::from(&host));
        prop_assert_eq!(bind.runtime, PathBuf::from(&runtime));
        prop_assert_eq!(bind.writable, mode != ":ro");
    }

    #[test]
    fn hostnames_are_always_valid(name in ".{0,100}") {
        let h = hostname_from(&name);
        prop_assert!(!h.is_empty() && h.len() <= 63);
        prop_assert!(h.chars().all(|c| c.is_ascii_alphanumeric() || c == '-'));
        prop_assert!(!h.starts_with('-') && !h.ends_with('-'));
    }
}

#[test]
fn kernel_release_gate() {
    for ok in ["5.11.0", "6.18.44-fc-v139", "10.0"] {
        assert!(check_release(ok).is_ok(), "{ok}");
    }
    for old in ["5.10.200", "4.19.0-generic", "3.2", "garbage", ""] {
        assert_eq!(
            check_release(old).map_err(|e| e.kind_name()),
            Err("KernelUnsupported"),
            "{old}"
        );
    }
}

#[test]
fn status_lines_decode_to_errors() {
    assert!(decode_status("").is_none());
    assert_eq!(
        decode_status("MountFailed\tno overlay\n").unwrap().kind_name(),
        "MountFailed"
    );
    assert_eq!(
        decode_status("KernelUnsupported\told").unwrap().kind_name(),
        "KernelUnsupported"
    );
    let err = decode_status("LaunchFailed\tfoo: not found\n").unwrap();
    assert_eq!(err.to_string(), "launch failed: foo: not found");
    assert_eq!(decode_status("Weird").unwrap().kind_name(), "LaunchFailed");
}

#[test]
fn manifest_follows_overlay_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = made(dir.path());
    assert!(read_manifest(&d).unwrap().is_none());

    fs::write(d.rofs().join(MANIFEST_PATH), "[Core]\ncommand = \"lower\"\n").unwrap();
    assert_eq!(
        read_manifest(&d).unwrap().unwrap().command.as_deref(),
        Some("lower")
    );

    fs::write(d.rwfs().join(MANIFEST_PATH), "[Core]\ncommand = \"upper\"\n").unwrap();
    assert_eq!(
        read_manifest(&d).unwrap().unwrap().command.as_deref(),
        Some("upper")
    );

    // Anything other than a regular file in the upper layer hides the lower one.
    fs::remove_file(d.rwfs().join(MANIFEST_PATH)).unwrap();
    symlink("elsewhere", d.rwfs().join(MANIFEST_PATH)).unwrap();
    assert!(read_manifest(&d).unwrap().is_none());

    fs::remove_file(d.rwfs().join(MANIFEST_PATH)).unwrap();
    fs::write(d.rofs().join(MANIFEST_PATH), "[Core\n").unwrap();
    assert_eq!(read_manifest(&d).unwrap_err().kind_name(), "ManifestSyntax");
}

#[test]
fn dry_run_and_run_agree_on_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = made(dir.path());
    fs::write(
        d.rofs().join(MANIFEST_PATH),
        "[Core]\ncommand = \"oscar --quiet\"\n",
    )
    .unwrap();
    let m = read_manifest(&d).unwrap();
    let plan = build_plan(&d, m.as_ref(), None, &[], &host()).unwrap();
    assert_eq!(plan.argv.argv, ["oscar", "--quiet"]);
    assert_eq!(plan.argv.source, CommandSource::Manifest);
    let plan = build_plan(&d, m.as_ref(), Some("sh"), &[], &host()).unwrap();
    assert_eq!(plan.argv.source, CommandSource::CliOverride);
}
