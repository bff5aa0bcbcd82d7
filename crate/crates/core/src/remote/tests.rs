use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use runtimebox_testkit::{diff_dirs, random_tree, StaticServer, TreeGenConfig};

use super::*;
use crate::casstore::{ObjectId, ObjectKind};

fn no_sleep() -> PullOptions {
    PullOptions {
        sleeper: Arc::new(|_| {}),
        ..PullOptions::default()
    }
}

fn fresh_repo(dir: &Path, name: &str) -> Repo {
    Repo::init(&dir.join(name)).unwrap()
}

/// A repo holding `fixture/x86_64/<v>` for every version, each a random tree.
fn publisher(dir: &Path, versions: &[&str]) -> Repo {
    let repo = fresh_repo(dir, "publisher");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (i, v) in versions.iter().enumerate() {
        let src = dir.join(format!("src-{i}"));
        fs::create_dir_all(&src).unwrap();
        random_tree(&mut rng, &src, TreeGenConfig::default());
        fs::write(src.join("version"), v).unwrap();
        let tree = repo.store_tree(&src).unwrap();
        let commit = repo.commit(&tree, None, v, &BTreeMap::new(), i as i64).unwrap();
        repo.update_ref(&fixture_ref(v), &commit).unwrap();
    }
    repo
}

fn fixture_ref(version: &str) -> RuntimeRef {
    RuntimeRef::new("fixture", "x86_64", version).unwrap()
}

fn object_set(repo: &Repo) -> BTreeSet<(ObjectId, ObjectKind)> {
    repo.list_objects().unwrap().into_iter().collect()
}

fn file_url(path: &Path) -> String {
    url::Url::from_file_path(path).unwrap().to_string()
}

#[test]
fn add_list_and_remove_remotes() {
    let dir = tempfile::tempdir().unwrap();
    let repo = fresh_repo(dir.path(), "r");
    assert!(list_remotes(&repo).unwrap().is_empty());
    add_remote(&repo, "official", "https://example.org/repo").unwrap();
    assert_eq!(
        list_remotes(&repo).unwrap(),
        vec![RemoteConfig {
            name: "official".into(),
            url: "https://example.org/repo".into()
        }]
    );
    // Same url again is accepted, a different one is not.
    add_remote(&repo, "official", "https://example.org/repo/").unwrap();
    assert!(matches!(
        add_remote(&repo, "official", "https://example.org/other"),
        Err(Error::DuplicateRemote { .. })
    ));
    let local = add_remote(&repo, "local", "file:///tmp/r").unwrap();
    assert_eq!(local.url, "file:///tmp/r");
    assert_eq!(list_remotes(&repo).unwrap().len(), 2);
    assert!(fs::read_to_string(repo.config_path())
        .unwrap()
        .starts_with("runtimebox-repo-v1\n"));
    Repo::open(repo.root()).unwrap();

    remove_remote(&repo, "official").unwrap();
    assert!(matches!(
        remove_remote(&repo, "official"),
        Err(Error::UnknownRemote(_))
    ));
    assert_eq!(list_remotes(&repo).unwrap(), vec![local]);
}

#[test]
fn bad_remotes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let repo = fresh_repo(dir.path(), "r");
    for url in ["not a url", "ftp://example.org/x", "https://", "http://h/x?q=1"] {
        assert!(
            matches!(add_remote(&repo, "x", url), Err(Error::MalformedUrl { .. })),
            "{url}"
        );
    }
    for name in ["", ".hidden", "a b", "a/b"] {
        assert!(matches!(
            add_remote(&repo, name, "https://example.org"),
            Err(Error::InvalidRemoteName(_))
        ));
    }
    assert!(matches!(
        pull(&repo, "nope", &fixture_ref("1"), &no_sleep()),
        Err(Error::UnknownRemote(_))
    ));
}

#[test]
fn export_then_pull_over_file_url() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1.0.0"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();

    let client = fresh_repo(dir.path(), "client");
    add_remote(&client, "origin", &file_url(&mirror)).unwrap();
    let commit = pull(&client, "origin", &fixture_ref("1.0.0"), &no_sleep()).unwrap();
    assert_eq!(Some(commit), publisher.read_ref(&fixture_ref("1.0.0")).unwrap());
    assert_eq!(object_set(&client), object_set(&publisher));
    assert_eq!(
        client.read_remote_ref("origin", &fixture_ref("1.0.0")).unwrap(),
        Some(commit)
    );
    assert!(client.fsck().unwrap().is_clean());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    publisher
        .checkout(&commit, &a, crate::CheckoutMode::Copy)
        .unwrap();
    client.checkout(&commit, &b, crate::CheckoutMode::Copy).unwrap();
    assert!(diff_dirs(&a, &b).is_empty());
}

#[test]
fn export_is_deterministic_and_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["0.9.9", "1.0.0-rc1", "1.0.0"]);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    export(&publisher, &first).unwrap();
    export(&publisher, &second).unwrap();
    assert_eq!(diff_dirs(&first, &second), Vec::<String>::new());
    assert_eq!(
        fs::read_to_string(first.join("versions/fixture/x86_64")).unwrap(),
        "0.9.9\n1.0.0-rc1\n1.0.0\n"
    );
    // Exporting into the previous export is allowed and changes nothing.
    export(&publisher, &first).unwrap();
    assert_eq!(diff_dirs(&first, &second), Vec::<String>::new());

    let client = fresh_repo(dir.path(), "client");
    add_remote(&client, "origin", &file_url(&first)).unwrap();
    for v in ["0.9.9", "1.0.0-rc1", "1.0.0"] {
        pull(&client, "origin", &fixture_ref(v), &no_sleep()).unwrap();
    }
    let third = dir.path().join("third");
    export(&client, &third).unwrap();
    assert_eq!(diff_dirs(&first, &third), Vec::<String>::new());
}

#[test]
fn export_refuses_broken_repo_and_foreign_dest() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1"]);
    let foreign = dir.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("notes.txt"), "x").unwrap();
    assert!(matches!(
        export(&publisher, &foreign),
        Err(Error::DestNotEmpty { .. })
    ));

    let (id, kind) = publisher.list_objects().unwrap()[0];
    let path = publisher.object_path(&id, kind);
    fs::set_permissions(&path, fs::Permissions::from_mode(0o644)).unwrap();
    fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(b"x")
        .unwrap();
    match export(&publisher, &dir.path().join("out")) {
        Err(Error::FsckFailed(report)) => assert_eq!(report.digest_mismatches.len(), 1),
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn http_pull_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1.0.0"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();
    let server = StaticServer::serve(&mirror).unwrap();

    let client = fresh_repo(dir.path(), "client");
    add_remote(&client, "origin", &server.url()).unwrap();
    let commit = pull(&client, "origin", &fixture_ref("1.0.0"), &no_sleep()).unwrap();
    assert_eq!(server.object_requests(), publisher.object_count().unwrap());
    assert_eq!(object_set(&client), object_set(&publisher));

    server.reset_counters();
    assert_eq!(
        pull(&client, "origin", &fixture_ref("1.0.0"), &no_sleep()).unwrap(),
        commit
    );
    assert_eq!(server.object_requests(), 0);
    assert_eq!(
        server.request_log(),
        vec!["/refs/fixture/x86_64/1.0.0".to_string()]
    );
}

#[test]
fn missing_ref_and_missing_object() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();
    let server = StaticServer::serve(&mirror).unwrap();
    let client = fresh_repo(dir.path(), "client");
    add_remote(&client, "origin", &server.url()).unwrap();
    assert!(matches!(
        pull(&client, "origin", &fixture_ref("2"), &no_sleep()),
        Err(Error::RefNotFound(r)) if r == "fixture/x86_64/2"
    ));

    let (id, kind) = publisher
        .list_objects()
        .unwrap()
        .into_iter()
        .find(|(_, k)| *k == ObjectKind::File)
        .unwrap();
    fs::remove_file(mirror.join(crate::casstore::object_rel_path(&id, kind))).unwrap();
    match pull(&client, "origin", &fixture_ref("1"), &no_sleep()) {
        Err(Error::IncompleteClosure {
            id: missing,
            kind: "file",
        }) => assert_eq!(missing, id),
        other => panic!("{other:?}"),
    }
    assert_eq!(client.read_remote_ref("origin", &fixture_ref("1")).unwrap(), None);
    assert!(client.fsck().unwrap().is_clean());
}

#[test]
fn tampered_object_is_never_admitted() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();
    for (n, (id, kind)) in publisher.list_objects().unwrap().into_iter().enumerate() {
        let served = mirror.join(crate::casstore::object_rel_path(&id, kind));
        let original = fs::read(&served).unwrap();
        if original.is_empty() {
            continue;
        }
        let mut bad = original.clone();
        let bit = (n * 7919) % (bad.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        fs::write(&served, &bad).unwrap();

        let client = fresh_repo(dir.path(), &format!("client{n}"));
        add_remote(&client, "origin", &file_url(&mirror)).unwrap();
        match pull(&client, "origin", &fixture_ref("1"), &no_sleep()) {
            Err(Error::DigestMismatch { id: named, .. }) => assert_eq!(named, id),
            other => panic!("{other:?}"),
        }
        assert!(!client.has_object(&id, kind));
        assert!(client.fsck().unwrap().is_clean());
        fs::write(&served, &original).unwrap();
        if n > 12 {
            break;
        }
    }
}

/// Fails the first `failures` requests for every path, then delegates.
struct Flaky {
    inner: Box<dyn Transport>,
    failures: usize,
    seen: Mutex<BTreeMap<String, usize>>,
}

impl Transport for Flaky {
    fn fetch(&self, rel: &str, out: &mut dyn Write) -> std::result::Result<Fetched, TransportError> {
        let mut seen = self.seen.lock().unwrap();
        let count = seen.entry(rel.to_string()).or_insert(0);
        *count += 1;
        if *count <= self.failures {
            // Write garbage first: a retry must start from a clean file.
            let _ = out.write_all(b"partial garbage");
            return Err(TransportError {
                reason: "connection reset".into(),
                retryable: true,
            });
        }
        drop(seen);
        self.inner.fetch(rel, out)
    }

    fn locate(&self, rel: &str) -> String {
        self.inner.locate(rel)
    }
}

#[test]
fn retries_with_exponential_backoff() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();
    let client = fresh_repo(dir.path(), "client");
    let delays = Arc::new(Mutex::new(Vec::new()));
    let opts = PullOptions {
        workers: 1,
        sleeper: {
            let delays = Arc::clone(&delays);
            Arc::new(move |d| delays.lock().unwrap().push(d))
        },
        ..PullOptions::default()
    };

    let flaky = Flaky {
        inner: transport_for(&file_url(&mirror)).unwrap(),
        failures: 2,
        seen: Mutex::new(BTreeMap::new()),
    };
    pull_with(&client, &flaky, "origin", &fixture_ref("1"), &opts).unwrap();
    assert_eq!(object_set(&client), object_set(&publisher));
    let delays = delays.lock().unwrap().clone();
    assert_eq!(delays.len(), 2 * (publisher.object_count().unwrap() + 1));
    assert_eq!(
        &delays[..2],
        &[Duration::from_millis(500), Duration::from_millis(1000)]
    );

    let hopeless = Flaky {
        inner: transport_for(&file_url(&mirror)).unwrap(),
        failures: 3,
        seen: Mutex::new(BTreeMap::new()),
    };
    let other = fresh_repo(dir.path(), "other");
    assert!(matches!(
        pull_with(&other, &hopeless, "origin", &fixture_ref("1"), &no_sleep()),
        Err(Error::NetworkError { .. })
    ));
}

#[test]
fn unreachable_server_is_a_network_error() {
    let dir = tempfile::tempdir().unwrap();
    let client = fresh_repo(dir.path(), "client");
    // Bind and drop a listener to get a port that refuses connections.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    add_remote(&client, "origin", &format!("http://127.0.0.1:{port}")).unwrap();
    let sleeps = Arc::new(AtomicUsize::new(0));
    let opts = PullOptions {
        sleeper: {
            let sleeps = Arc::clone(&sleeps);
            Arc::new(move |_| {
                sleeps.fetch_add(1, Ordering::SeqCst);
            })
        },
        ..PullOptions::default()
    };
    let err = pull(&client, "origin", &fixture_ref("1"), &opts).unwrap_err();
    assert_eq!(err.kind_name(), "NetworkError");
    assert!(err.is_environmental());
    assert_eq!(sleeps.load(Ordering::SeqCst), 2);
}

/// Serves objects until `budget` object downloads have happened, then fails
/// every request fatally, standing in for a killed transfer.
struct Cutoff {
    inner: Box<dyn Transport>,
    budget: usize,
    used: AtomicUsize,
}

impl Transport for Cutoff {
    fn fetch(&self, rel: &str, out: &mut dyn Write) -> std::result::Result<Fetched, TransportError> {
        if rel.starts_with("objects/") && self.used.fetch_add(1, Ordering::SeqCst) >= self.budget {
            let _ = out.write_all(b"half");
            return Err(TransportError {
                reason: "killed".into(),
                retryable: false,
            });
        }
        self.inner.fetch(rel, out)
    }

    fn locate(&self, rel: &str) -> String {
        self.inner.locate(rel)
    }
}

#[test]
fn interrupted_pull_resumes_to_identical_state() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();
    let total = publisher.object_count().unwrap();
    let expected = object_set(&publisher);
    for budget in [0, 1, total / 3, total / 2, total - 1] {
        let client = fresh_repo(dir.path(), &format!("client{budget}"));
        let cut = Cutoff {
            inner: transport_for(&file_url(&mirror)).unwrap(),
            budget,
            used: AtomicUsize::new(0),
        };
        assert!(pull_with(&client, &cut, "origin", &fixture_ref("1"), &no_sleep()).is_err());
        assert!(object_set(&client).len() < total);
        add_remote(&client, "origin", &file_url(&mirror)).unwrap();
        pull(&client, "origin", &fixture_ref("1"), &no_sleep()).unwrap();
        assert_eq!(object_set(&client), expected);
        assert!(client.fsck().unwrap().is_clean());
        assert_eq!(fs::read_dir(client.root().join("tmp")).unwrap().count(), 0);
    }
}

#[test]
fn resolve_latest_from_index_listing_and_local_refs() {
    let dir = tempfile::tempdir().unwrap();
    let publisher = publisher(dir.path(), &["1.0.0", "1.0.0-rc1", "0.9.9"]);
    let mirror = dir.path().join("mirror");
    export(&publisher, &mirror).unwrap();
    let server = StaticServer::serve(&mirror).unwrap();
    let client = fresh_repo(dir.path(), "client");
    add_remote(&client, "http", &server.url()).unwrap();
    add_remote(&client, "file", &file_url(&mirror)).unwrap();
    let opts = no_sleep();

    for remote in ["http", "file"] {
        let got = resolve_version(&client, Some(remote), &fixture_ref("latest"), &opts).unwrap();
        assert_eq!(got, fixture_ref("1.0.0"));
        let pinned = resolve_version(&client, Some(remote), &fixture_ref("0.9.9"), &opts).unwrap();
        assert_eq!(pinned, fixture_ref("0.9.9"));
    }
    // Without an index, a file mirror is listed directly.
    fs::remove_dir_all(mirror.join("versions")).unwrap();
    let got = resolve_version(&client, Some("file"), &fixture_ref("latest"), &opts).unwrap();
    assert_eq!(got, fixture_ref("1.0.0"));
    // An HTTP mirror without an index cannot be listed.
    assert!(matches!(
        resolve_version(&client, Some("http"), &fixture_ref("latest"), &opts),
        Err(Error::RefNotFound(_))
    ));
    let other = RuntimeRef::new("other", "x86_64", "latest").unwrap();
    assert!(matches!(
        resolve_version(&client, Some("file"), &other, &opts),
        Err(Error::RefNotFound(_))
    ));
    assert_eq!(
        resolve_version(&publisher, None, &fixture_ref("latest"), &opts).unwrap(),
        fixture_ref("1.0.0")
    );
}
