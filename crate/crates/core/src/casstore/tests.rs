use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::{MetadataExt, PermissionsExt};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use runtimebox_testkit::{diff_dirs, random_tree, TreeGenConfig};

use super::*;

fn new_repo() -> (tempfile::TempDir, Repo) {
    let dir = tempfile::tempdir().unwrap();
    let repo = Repo::init(&dir.path().join("repo")).unwrap();
    (dir, repo)
}

fn commit_dir(repo: &Repo, dir: &Path) -> ObjectId {
    let tree = repo.store_tree(dir).unwrap();
    repo.commit(&tree, None, "snapshot", &BTreeMap::new(), 0).unwrap()
}

#[test]
fn init_creates_empty_repo_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("repo");
    let repo = Repo::init(&path).unwrap();
    assert_eq!(repo.object_count().unwrap(), 0);
    assert!(repo.list_refs().unwrap().is_empty());
    assert_eq!(
        fs::read_to_string(path.join("config")).unwrap(),
        "runtimebox-repo-v1\n"
    );
    let again = Repo::init(&path).unwrap();
    assert_eq!(again.root(), repo.root());
    assert_eq!(again.object_count().unwrap(), 0);
}

#[test]
fn init_rejects_foreign_content() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("stuff"), b"x").unwrap();
    assert!(matches!(Repo::init(dir.path()), Err(Error::CorruptRepo { .. })));
    let file = dir.path().join("stuff");
    assert!(matches!(Repo::init(&file), Err(Error::CorruptRepo { .. })));
    let bad = dir.path().join("bad");
    fs::create_dir(&bad).unwrap();
    fs::write(bad.join("config"), "something-else\n").unwrap();
    assert!(matches!(Repo::init(&bad), Err(Error::CorruptRepo { .. })));
}

#[test]
fn init_in_unwritable_parent_fails() {
    if unsafe { libc::geteuid() } == 0 {
        // root bypasses permission bits; nothing to observe
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    fs::set_permissions(dir.path(), fs::Permissions::from_mode(0o555)).unwrap();
    let result = Repo::init(&dir.path().join("repo"));
    fs::set_permissions(dir.path(), fs::Permissions::from_mode(0o755)).unwrap();
    assert!(matches!(result, Err(Error::NotWritable { .. })));
}

#[test]
fn store_file_dedups_and_matches_oracle() {
    let (_d, repo) = new_repo();
    let empty = repo.store_file(&b""[..], false).unwrap();
    assert_eq!(
        empty.to_hex(),
        "96eeff563b3135e3f77964e8c062328fd207c8bc9e754fc423abaf83eb3f1490"
    );
    let again = repo.store_file(&b""[..], false).unwrap();
    assert_eq!(empty, again);
    assert_eq!(repo.object_count().unwrap(), 1);

    let hello = repo.store_file(&b"hello\n"[..], false).unwrap();
    assert_eq!(
        hello.to_hex(),
        "64c02e4eaf304c4bd62a6ae505cef79381d39cdbe5a5ab73dbeaa272e5f90895"
    );
    let hello_x = repo.store_file(&b"hello\n"[..], true).unwrap();
    assert_ne!(hello, hello_x);
    assert_eq!(repo.object_count().unwrap(), 3);

    let meta = fs::metadata(repo.object_path(&hello_x, ObjectKind::File)).unwrap();
    assert_eq!(meta.mode() & 0o777, 0o555);
    assert_eq!(
        fs::read(repo.object_path(&hello, ObjectKind::File)).unwrap(),
        b"hello\n"
    );
}

#[test]
fn empty_tree_and_dedup_of_identical_files() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    let empty = repo.store_tree(&src).unwrap();
    assert_eq!(
        empty.to_hex(),
        "395c2f5598a1643a205154c6f4c46ce36895b28e6c35660a95e5c6fd5ef9aeab"
    );
    let before = repo.object_count().unwrap();
    let payload = vec![0xabu8; 1 << 20];
    fs::write(src.join("one"), &payload).unwrap();
    fs::write(src.join("two"), &payload).unwrap();
    repo.store_tree(&src).unwrap();
    assert_eq!(repo.object_count().unwrap(), before + 2);
}

#[test]
fn symlinks_are_stored_as_targets() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    std::os::unix::fs::symlink("b/c", src.join("a")).unwrap();
    let tree = repo.store_tree(&src).unwrap();
    let entries = repo.read_tree(&tree).unwrap().entries().to_vec();
    assert_eq!(entries.len(), 1);
    assert_eq!(
        entries[0].kind,
        object::EntryKind::Symlink {
            target: b"b/c".to_vec()
        }
    );
    let commit = repo.commit(&tree, None, "s", &BTreeMap::new(), 0).unwrap();
    let out = d.path().join("out");
    repo.checkout(&commit, &out, CheckoutMode::Copy).unwrap();
    assert!(diff_dirs(&src, &out).is_empty());
}

#[test]
fn special_files_are_rejected() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    let fifo = src.join("pipe");
    let c = std::ffi::CString::new(fifo.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { libc::mkfifo(c.as_ptr(), 0o644) }, 0);
    match repo.store_tree(&src) {
        Err(Error::UnsupportedEntry { path, kind }) => {
            assert_eq!(path, fifo);
            assert_eq!(kind, "fifo");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn traversal_order_does_not_matter() {
    let (d, repo) = new_repo();
    let a = d.path().join("a");
    let b = d.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    for name in ["z", "m", "a"] {
        fs::write(a.join(name), name).unwrap();
    }
    for name in ["a", "z", "m"] {
        fs::write(b.join(name), name).unwrap();
    }
    assert_eq!(repo.store_tree(&a).unwrap(), repo.store_tree(&b).unwrap());
    assert_eq!(compute_tree_id(&a).unwrap(), repo.store_tree(&a).unwrap());
}

#[test]
fn commits_are_deterministic_and_timestamped() {
    let (_d, repo) = new_repo();
    let src = tempfile::tempdir().unwrap();
    let tree = repo.store_tree(src.path()).unwrap();
    let c0 = repo.commit(&tree, None, "init", &BTreeMap::new(), 0).unwrap();
    assert_eq!(
        c0.to_hex(),
        "315178faafd66ed2a138611185bba9cc75c6c51f11574a64039bc0afe2c2e680"
    );
    let c1 = repo.commit(&tree, None, "init", &BTreeMap::new(), 1).unwrap();
    assert_ne!(c0, c1);
    assert!(matches!(
        repo.commit(&c0, None, "x", &BTreeMap::new(), 0),
        Err(Error::MissingObject { kind: "tree", .. })
    ));
    assert!(matches!(
        repo.commit(&tree, Some(&tree), "x", &BTreeMap::new(), 0),
        Err(Error::MissingObject { kind: "commit", .. })
    ));
}

#[test]
fn history_walk_matches_brute_force() {
    let (_d, repo) = new_repo();
    let src = tempfile::tempdir().unwrap();
    let tree = repo.store_tree(src.path()).unwrap();
    let mut chain = Vec::new();
    let mut parent = None;
    for t in 0..3 {
        let id = repo
            .commit(&tree, parent.as_ref(), "c", &BTreeMap::new(), t)
            .unwrap();
        chain.push(id);
        parent = Some(id);
    }
    // Brute force: decode every commit object on disk and follow parent pointers.
    let mut by_id = std::collections::HashMap::new();
    for (id, kind) in repo.list_objects().unwrap() {
        if kind == ObjectKind::Commit {
            let bytes = fs::read(repo.object_path(&id, kind)).unwrap();
            by_id.insert(id, object::CommitObject::decode(&bytes).unwrap().parent);
        }
    }
    let mut walked = vec![chain[2]];
    while let Some(Some(p)) = by_id.get(walked.last().unwrap()) {
        walked.push(*p);
    }
    chain.reverse();
    assert_eq!(walked, chain);
    assert_eq!(repo.history(&chain[0]).unwrap(), chain);
}

#[test]
fn refs_update_read_list() {
    let (_d, repo) = new_repo();
    let src = tempfile::tempdir().unwrap();
    let commit = commit_dir(&repo, src.path());
    let a: RuntimeRef = "org.example/x86_64/1.0".parse().unwrap();
    let b: RuntimeRef = "org.example/x86_64/latest".parse().unwrap();
    assert_eq!(repo.read_ref(&a).unwrap(), None);
    repo.update_ref(&a, &commit).unwrap();
    assert_eq!(repo.read_ref(&a).unwrap(), Some(commit));
    let objects = repo.object_count().unwrap();
    repo.update_ref(&b, &commit).unwrap();
    assert_eq!(repo.object_count().unwrap(), objects);
    let listed = repo.list_refs().unwrap();
    assert_eq!(listed, vec![(a.clone(), commit), (b, commit)]);
    assert_eq!(
        fs::read_to_string(repo.root().join("refs/org.example/x86_64/1.0")).unwrap(),
        format!("{commit}\n")
    );
    let missing = ObjectId::from_bytes([1; 32]);
    assert!(matches!(
        repo.update_ref(&a, &missing),
        Err(Error::MissingObject { .. })
    ));
    let reserved: RuntimeRef = "remotes/x/y".parse().unwrap();
    assert!(matches!(
        repo.update_ref(&reserved, &commit),
        Err(Error::MalformedRef { .. })
    ));
}

#[test]
fn remote_refs_are_separate_from_local_refs() {
    let (_d, repo) = new_repo();
    let src = tempfile::tempdir().unwrap();
    let commit = commit_dir(&repo, src.path());
    let r: RuntimeRef = "a/b/c".parse().unwrap();
    repo.update_remote_ref("origin", &r, &commit).unwrap();
    assert!(repo.list_refs().unwrap().is_empty());
    assert_eq!(repo.read_remote_ref("origin", &r).unwrap(), Some(commit));
    assert_eq!(
        repo.list_remote_refs().unwrap(),
        vec![("origin".to_string(), r, commit)]
    );
}

#[test]
fn concurrent_ref_updates_are_never_torn() {
    let (_d, repo) = new_repo();
    let mut commits = Vec::new();
    let src = tempfile::tempdir().unwrap();
    let tree = repo.store_tree(src.path()).unwrap();
    for t in 0..4 {
        commits.push(repo.commit(&tree, None, "c", &BTreeMap::new(), t).unwrap());
    }
    let r: RuntimeRef = "a/b/c".parse().unwrap();
    repo.update_ref(&r, &commits[0]).unwrap();
    let stop = std::sync::atomic::AtomicBool::new(false);
    std::thread::scope(|s| {
        let writer = s.spawn(|| {
            for i in 0..200 {
                repo.update_ref(&r, &commits[i % commits.len()]).unwrap();
            }
            stop.store(true, std::sync::atomic::Ordering::SeqCst);
        });
        while !stop.load(std::sync::atomic::Ordering::SeqCst) {
            let seen = repo.read_ref(&r).unwrap().expect("ref always present");
            assert!(commits.contains(&seen));
        }
        writer.join().unwrap();
    });
}

#[test]
fn checkout_empty_tree_commit() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    let commit = commit_dir(&repo, &src);
    let out = d.path().join("out");
    repo.checkout(&commit, &out, CheckoutMode::Hardlink).unwrap();
    assert!(fsutil::dir_is_empty(&out).unwrap());
}

#[test]
fn checkout_refuses_non_empty_destination() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    let commit = commit_dir(&repo, &src);
    let out = d.path().join("out");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("x"), b"x").unwrap();
    assert!(matches!(
        repo.checkout(&commit, &out, CheckoutMode::Copy),
        Err(Error::DestNotEmpty { .. })
    ));
}

#[test]
fn hardlink_checkout_shares_inodes() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    fs::write(src.join("f"), b"shared bytes").unwrap();
    let commit = commit_dir(&repo, &src);
    let out = d.path().join("out");
    repo.checkout(&commit, &out, CheckoutMode::Hardlink).unwrap();
    let checked = fs::metadata(out.join("f")).unwrap();
    let tree = repo.read_tree(&repo.read_commit(&commit).unwrap().tree).unwrap();
    let object::EntryKind::File { id, .. } = tree.entries()[0].kind else {
        panic!()
    };
    let stored = fs::metadata(repo.object_path(&id, ObjectKind::File)).unwrap();
    assert_eq!(checked.ino(), stored.ino());
    assert!(checked.nlink() >= 2);

    let copied = d.path().join("copied");
    repo.checkout(&commit, &copied, CheckoutMode::Copy).unwrap();
    assert_ne!(fs::metadata(copied.join("f")).unwrap().ino(), stored.ino());
}

#[test]
fn checkout_reports_missing_objects() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir(&src).unwrap();
    fs::write(src.join("f"), b"payload").unwrap();
    let commit = commit_dir(&repo, &src);
    for (id, kind) in repo.list_objects().unwrap() {
        if kind == ObjectKind::File {
            fs::remove_file(repo.object_path(&id, kind)).unwrap();
        }
    }
    assert!(matches!(
        repo.checkout(&commit, &d.path().join("out"), CheckoutMode::Hardlink),
        Err(Error::MissingObject { kind: "file", .. })
    ));
}

#[test]
fn random_trees_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (d, repo) = new_repo();
    for i in 0..20 {
        let src = d.path().join(format!("src{i}"));
        fs::create_dir(&src).unwrap();
        random_tree(&mut rng, &src, TreeGenConfig::default());
        let commit = commit_dir(&repo, &src);
        let out = d.path().join(format!("out{i}"));
        repo.checkout(&commit, &out, CheckoutMode::Hardlink).unwrap();
        assert_eq!(diff_dirs(&src, &out), Vec::<String>::new(), "tree {i}");
        assert_eq!(
            compute_tree_id(&out).unwrap(),
            repo.read_commit(&commit).unwrap().tree
        );
    }
    assert!(repo.fsck().unwrap().is_clean());
}

fn flip_bit(path: &Path, bit: usize) {
    let mode = fs::metadata(path).unwrap().permissions();
    fs::set_permissions(path, fs::Permissions::from_mode(0o644)).unwrap();
    let mut bytes = fs::read(path).unwrap();
    bytes[bit / 8] ^= 1 << (bit % 8);
    fs::write(path, bytes).unwrap();
    fs::set_permissions(path, mode).unwrap();
}

#[test]
fn fsck_clean_then_detects_bitflip_and_dangling() {
    let (d, repo) = new_repo();
    let src = d.path().join("src");
    fs::create_dir_all(src.join("sub")).unwrap();
    fs::write(src.join("sub/a"), b"alpha").unwrap();
    fs::write(src.join("b"), b"beta").unwrap();
    let commit = commit_dir(&repo, &src);
    repo.update_ref(&"x/y/z".parse().unwrap(), &commit).unwrap();
    let report = repo.fsck().unwrap();
    assert!(report.is_clean(), "{report}");
    assert_eq!(report.objects_scanned, 5);

    let target = repo
        .list_objects()
        .unwrap()
        .into_iter()
        .find(|(_, k)| *k == ObjectKind::File)
        .unwrap();
    flip_bit(&repo.object_path(&target.0, target.1), 3);
    let report = repo.fsck().unwrap();
    assert_eq!(report.digest_mismatches.len(), 1);
    assert_eq!(report.digest_mismatches[0].id, target.0);
    assert!(report.dangling.is_empty());
    flip_bit(&repo.object_path(&target.0, target.1), 3);
    assert!(repo.fsck().unwrap().is_clean());

    fs::remove_file(repo.object_path(&target.0, target.1)).unwrap();
    let report = repo.fsck().unwrap();
    assert!(report.digest_mismatches.is_empty());
    assert_eq!(report.dangling.len(), 1);
    assert_eq!(report.dangling[0].missing, target.0);
}

#[test]
fn stale_staging_files_are_cleaned_on_open() {
    let (_d, repo) = new_repo();
    let stale = repo.tmp_dir().join("obj-999999999-0");
    fs::write(&stale, b"partial").unwrap();
    let live = repo.tmp_dir().join(format!("obj-{}-0", std::process::id()));
    fs::write(&live, b"in flight").unwrap();
    Repo::open(repo.root()).unwrap();
    assert!(!stale.exists());
    assert!(live.exists());
}
