use proptest::prelude::*;

use super::*;
use crate::fold::FoldProfile;

fn icase_image() -> (FsImage, Ino) {
    let mut img = FsImage::new();
    let d = img
        .mkdir_folded("/d", Metadata::new(0o755), FoldProfile::ascii())
        .unwrap();
    (img, d)
}

fn file(img: &mut FsImage, dir: Ino, name: &str, body: &[u8]) -> Ino {
    img.create_at(
        dir,
        name,
        NewNode::File(body.to_vec()),
        Metadata::default(),
        CreateOptions::exclusive(),
    )
    .unwrap()
}

#[test]
fn fold_lookup_matches_other_spelling() {
    let (mut img, d) = icase_image();
    let foo = file(&mut img, d, "Foo", b"x");
    assert_eq!(img.lookup("/d/FOO").unwrap(), Some(foo));
    assert_eq!(img.lookup("/d/foo").unwrap(), Some(foo));
    assert_eq!(img.readdir(d).unwrap(), vec!["Foo"]);
}

#[test]
fn sensitive_lookup_is_bytewise() {
    let mut img = FsImage::new();
    let d = img.mkdir("/d", Metadata::new(0o755)).unwrap();
    file(&mut img, d, "Foo", b"x");
    assert_eq!(img.lookup("/d/FOO").unwrap(), None);
    file(&mut img, d, "FOO", b"y");
    assert_eq!(img.readdir(d).unwrap(), vec!["Foo", "FOO"]);
}

#[test]
fn create_options_on_collision() {
    let (mut img, d) = icase_image();
    let foo = file(&mut img, d, "foo", b"old");
    let err = img
        .create_at(d, "FOO", NewNode::File(b"new".to_vec()), Metadata::default(), CreateOptions::exclusive_name())
        .unwrap_err();
    assert!(matches!(err, VfsError::CollidesDifferingName { .. }));
    let err = img
        .create_at(d, "foo", NewNode::File(vec![]), Metadata::default(), CreateOptions::exclusive())
        .unwrap_err();
    assert_eq!(err, VfsError::Exists("foo".into()));
    // Same spelling passes the name check and opens the file.
    let same = img
        .create_at(d, "foo", NewNode::File(b"mid".to_vec()), Metadata::default(), CreateOptions::exclusive_name())
        .unwrap();
    assert_eq!(same, foo);
    let got = img
        .create_at(d, "FOO", NewNode::File(b"new".to_vec()), Metadata::new(0o600), CreateOptions::default())
        .unwrap();
    assert_eq!(got, foo);
    assert_eq!(img.read(foo).unwrap(), b"new");
    assert_eq!(img.meta(foo).unwrap().mode, 0o644);
    assert_eq!(img.readdir(d).unwrap(), vec!["foo"]);
}

#[test]
fn open_follows_final_symlink_unless_nofollow() {
    let (mut img, d) = icase_image();
    let out = img.mkdir("/outside", Metadata::new(0o755)).unwrap();
    let referent = file(&mut img, out, "ref", b"orig");
    img.symlink_at(d, "foo", "../outside/ref", Metadata::new(0o777)).unwrap();
    let err = img
        .create_at(d, "FOO", NewNode::File(b"x".to_vec()), Metadata::default(), CreateOptions::nofollow())
        .unwrap_err();
    assert!(matches!(err, VfsError::SymlinkNotFollowed(_)));
    let got = img
        .create_at(d, "FOO", NewNode::File(b"x".to_vec()), Metadata::default(), CreateOptions::default())
        .unwrap();
    assert_eq!(got, referent);
    assert_eq!(img.read(referent).unwrap(), b"x");
}

#[test]
fn open_through_dangling_symlink_creates_referent() {
    let mut img = FsImage::new();
    img.mkdir("/tmp", Metadata::new(0o777)).unwrap();
    img.mkdir("/d", Metadata::new(0o755)).unwrap();
    img.symlink("/d/s", "/tmp/new", Metadata::new(0o777)).unwrap();
    img.write_file("/d/s", b"leak", Metadata::default()).unwrap();
    let ino = img.lookup("/tmp/new").unwrap().unwrap();
    assert_eq!(img.read(ino).unwrap(), b"leak");
}

#[test]
fn non_file_kinds_never_open_existing() {
    let (mut img, d) = icase_image();
    file(&mut img, d, "foo", b"");
    assert!(matches!(img.mkdir_at(d, "FOO", Metadata::default()), Err(VfsError::Exists(_))));
    assert!(matches!(img.symlink_at(d, "FOO", "x", Metadata::default()), Err(VfsError::Exists(_))));
    assert!(matches!(img.mkfifo_at(d, "FOO", Metadata::default()), Err(VfsError::Exists(_))));
    img.mkdir_at(d, "dir", Metadata::default()).unwrap();
    assert!(matches!(
        img.create_at(d, "DIR", NewNode::File(vec![]), Metadata::default(), CreateOptions::default()),
        Err(VfsError::IsADirectory(_))
    ));
}

#[test]
fn link_repoints_fold_equal_entry() {
    let (mut img, d) = icase_image();
    let zzz = file(&mut img, d, "zzz", b"foo");
    let hbar = file(&mut img, d, "hbar", b"bar");
    img.link_at(hbar, d, "ZZZ", CreateOptions::default()).unwrap();
    assert_eq!(img.readdir(d).unwrap(), vec!["zzz", "hbar"]);
    assert_eq!(img.lookup("/d/zzz").unwrap(), Some(hbar));
    assert_eq!(img.node(hbar).unwrap().nlink, 2);
    assert!(img.node(zzz).is_none());
    assert!(matches!(
        img.link_at(hbar, d, "ZZZ", CreateOptions::exclusive()),
        Err(VfsError::Exists(_))
    ));
    img.check_invariants().unwrap();
}

#[test]
fn unlink_last_name_frees_node() {
    let (mut img, d) = icase_image();
    let a = file(&mut img, d, "a", b"1");
    img.link_at(a, d, "b", CreateOptions::exclusive()).unwrap();
    img.unlink_at(d, "A").unwrap();
    assert_eq!(img.node(a).unwrap().nlink, 1);
    img.unlink("/d/b").unwrap();
    assert!(img.node(a).is_none());
    img.check_invariants().unwrap();
}

#[test]
fn readdir_keeps_raw_names_in_order() {
    let (mut img, d) = icase_image();
    for n in ["a", "B", "c"] {
        file(&mut img, d, n, b"");
    }
    assert_eq!(img.readdir(d).unwrap(), vec!["a", "B", "c"]);
}

#[test]
fn symlink_cycles_hit_the_limit() {
    let mut img = FsImage::new();
    img.symlink("/a", "/b", Metadata::default()).unwrap();
    img.symlink("/b", "/a", Metadata::default()).unwrap();
    assert!(matches!(img.lookup("/a/x"), Err(VfsError::LoopLimitExceeded(_))));
    assert_eq!(img.lookup("/a").unwrap(), img.lookup("/a").unwrap());
}

#[test]
fn traversing_a_file_is_not_a_directory() {
    let mut img = FsImage::new();
    img.write_file("/f", b"", Metadata::default()).unwrap();
    assert!(matches!(img.lookup("/f/x"), Err(VfsError::NotADirectory(_))));
}

#[test]
fn dot_and_dotdot_resolve() {
    let mut img = FsImage::new();
    img.mkdir_p("/a/b", Metadata::default()).unwrap();
    let f = img.write_file("/a/f", b"", Metadata::default()).unwrap();
    assert_eq!(img.lookup("/a/b/../f").unwrap(), Some(f));
    assert_eq!(img.lookup("/a/./b/../../a/f").unwrap(), Some(f));
    assert_eq!(img.lookup("/../..").unwrap(), Some(img.root()));
}

#[test]
fn symlinked_directory_replacing_a_colliding_name() {
    // A checkout writes "A/post-checkout" after "a" became a link to the hooks dir.
    let mut img = FsImage::new();
    img.mkdir_folded("/repo", Metadata::new(0o755), FoldProfile::ascii()).unwrap();
    img.mkdir_p("/repo/.git/hooks", Metadata::new(0o755)).unwrap();
    img.mkdir("/repo/A", Metadata::new(0o755)).unwrap();
    img.remove_tree("/repo/A").unwrap();
    img.symlink("/repo/a", ".git/hooks", Metadata::new(0o777)).unwrap();
    let hook = img.write_file("/repo/A/post-checkout", b"evil", Metadata::new(0o755)).unwrap();
    assert_eq!(img.lookup("/repo/.git/hooks/post-checkout").unwrap(), Some(hook));
    assert_eq!(img.lookup("/repo/A/post-checkout").unwrap(), Some(hook));
}

#[test]
fn rename_onto_fold_equal_keeps_stored_name() {
    let (mut img, d) = icase_image();
    file(&mut img, d, "foo", b"old");
    let tmp = file(&mut img, d, ".FOO.tmp", b"new");
    img.rename_at(d, ".FOO.tmp", d, "FOO").unwrap();
    assert_eq!(img.readdir(d).unwrap(), vec!["foo"]);
    assert_eq!(img.lookup("/d/foo").unwrap(), Some(tmp));
    img.rename_at(d, "foo", d, "Foo").unwrap();
    assert_eq!(img.readdir(d).unwrap(), vec!["Foo"]);
    img.check_invariants().unwrap();
}

#[test]
fn rename_rules() {
    let mut img = FsImage::new();
    img.mkdir_p("/a/b", Metadata::default()).unwrap();
    assert!(matches!(img.rename("/a", "/a/b/c"), Err(VfsError::InvalidRename(_))));
    img.write_file("/f", b"", Metadata::default()).unwrap();
    assert!(matches!(img.rename("/f", "/a"), Err(VfsError::IsADirectory(_))));
    assert!(matches!(img.rename("/a", "/f"), Err(VfsError::NotADirectory(_))));
    img.rename("/a/b", "/c").unwrap();
    assert!(img.exists("/c"));
    img.check_invariants().unwrap();
}

#[test]
fn fold_flag_requires_empty_directory() {
    let mut img = FsImage::new();
    let d = img.mkdir("/d", Metadata::default()).unwrap();
    img.write_file("/d/x", b"", Metadata::default()).unwrap();
    assert!(matches!(img.set_fold(d, Some(FoldProfile::ascii())), Err(VfsError::NotEmpty(_))));
}

#[test]
fn invalid_names_and_modes() {
    let mut img = FsImage::new();
    let r = img.root();
    assert!(matches!(img.mkdir_at(r, "..", Metadata::default()), Err(VfsError::ReservedName(_))));
    assert!(matches!(img.mkdir_at(r, "", Metadata::default()), Err(VfsError::InvalidName(_))));
    assert!(matches!(img.mkdir_at(r, "x", Metadata::new(0o4755)), Err(VfsError::InvalidMode(_))));
    assert!(matches!(img.write_file("/missing/f", b"", Metadata::default()), Err(VfsError::ParentMissing(_))));
}

#[test]
fn pipes_capture_writes() {
    let mut img = FsImage::new();
    let r = img.root();
    let p = img.mkfifo_at(r, "p", Metadata::default()).unwrap();
    img.write(p, b"ab").unwrap();
    img.write_file("/p", b"cd", Metadata::default()).unwrap();
    assert_eq!(img.read(p).unwrap(), b"abcd");
}

#[test]
fn diff_of_identical_images_is_empty() {
    let (img, _) = icase_image();
    assert!(snapshot_diff(&img, &img.clone(), "/").unwrap().is_empty());
}

#[test]
fn diff_reports_kind_and_mode_changes() {
    let mut before = FsImage::new();
    before.mkdir_p("/t/dir", Metadata::new(0o700)).unwrap();
    before.write_file("/t/dir/foo", b"x", Metadata::default()).unwrap();
    let mut after = before.clone();
    after.unlink("/t/dir/foo").unwrap();
    let dir = after.dir_ino("/t/dir").unwrap();
    after.mkfifo_at(dir, "foo", Metadata::default()).unwrap();
    let mut m = after.meta(dir).unwrap().clone();
    m.mode = 0o755;
    after.set_meta(dir, m).unwrap();
    let delta = snapshot_diff(&before, &after, "/t").unwrap();
    let foo = delta.change("dir/foo").unwrap();
    assert!(foo.fields.contains(&"kind"));
    assert!(foo.retargeted());
    assert_eq!(delta.change("dir").unwrap().fields, vec!["mode"]);
}

#[test]
fn dump_is_deterministic_and_escaped() {
    let build = || {
        let (mut img, d) = icase_image();
        file(&mut img, d, "a\tb", b"x");
        img
    };
    let a = build().dump();
    assert_eq!(a, build().dump());
    assert!(a.starts_with("# collide-image device=00:01 root=2 next=5\n"));
    assert!(a.contains("/d/a\\tb"));
    assert!(a.contains("fold=ascii"));
    assert_eq!(a.lines().count(), 4);
}

#[derive(Debug, Clone)]
enum Op {
    File(u8, u8),
    Mkdir(u8, u8),
    Link(u8, u8, u8),
    Unlink(u8, u8),
    Rename(u8, u8, u8, u8),
    Symlink(u8, u8),
    Rmtree(u8),
}

const NAMES: [&str; 6] = ["a", "A", "b", "B", "ab", "Ab"];

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        (any::<u8>(), any::<u8>()).prop_map(|(d, n)| Op::File(d, n)),
        (any::<u8>(), any::<u8>()).prop_map(|(d, n)| Op::Mkdir(d, n)),
        (any::<u8>(), any::<u8>(), any::<u8>()).prop_map(|(s, d, n)| Op::Link(s, d, n)),
        (any::<u8>(), any::<u8>()).prop_map(|(d, n)| Op::Unlink(d, n)),
        (any::<u8>(), any::<u8>(), any::<u8>(), any::<u8>()).prop_map(|(a, b, c, d)| Op::Rename(a, b, c, d)),
        (any::<u8>(), any::<u8>()).prop_map(|(d, n)| Op::Symlink(d, n)),
        any::<u8>().prop_map(Op::Rmtree),
    ]
}

fn dirs(img: &FsImage) -> Vec<Ino> {
    img.nodes().filter(|(_, n)| n.is_dir()).map(|(i, _)| i).collect()
}

fn pick<T: Copy>(v: &[T], i: u8) -> T {
    v[i as usize % v.len()]
}

fn apply(img: &mut FsImage, op: &Op) {
    let ds = dirs(img);
    let name = |n: u8| NAMES[n as usize % NAMES.len()];
    let _ = match *op {
        Op::File(d, n) => img
            .create_at(pick(&ds, d), name(n), NewNode::File(vec![n]), Metadata::default(), CreateOptions::default())
            .map(|_| ()),
        Op::Mkdir(d, n) => img.mkdir_at(pick(&ds, d), name(n), Metadata::default()).map(|_| ()),
        Op::Link(s, d, n) => {
            let files: Vec<Ino> = img.nodes().filter(|(_, x)| !x.is_dir()).map(|(i, _)| i).collect();
            if files.is_empty() {
                Ok(())
            } else {
                img.link_at(pick(&files, s), pick(&ds, d), name(n), CreateOptions::default()).map(|_| ())
            }
        }
        Op::Unlink(d, n) => img.unlink_at(pick(&ds, d), name(n)).map(|_| ()),
        Op::Rename(a, b, c, d) => img.rename_at(pick(&ds, a), name(b), pick(&ds, c), name(d)).map(|_| ()),
        Op::Symlink(d, n) => img.symlink_at(pick(&ds, d), name(n), "a", Metadata::default()).map(|_| ()),
        Op::Rmtree(n) => img.remove_tree(&format!("/f/{}", name(n))),
    };
}

fn seeded() -> FsImage {
    let mut img = FsImage::new();
    img.mkdir_folded("/f", Metadata::default(), FoldProfile::ascii()).unwrap();
    img.mkdir("/s", Metadata::default()).unwrap();
    img
}

proptest! {
    #[test]
    fn invariants_hold_after_every_op(ops in prop::collection::vec(op_strategy(), 0..40)) {
        let mut img = seeded();
        for op in &ops {
            apply(&mut img, op);
            prop_assert!(img.check_invariants().is_ok(), "{:?}: {:?}", op, img.check_invariants());
        }
    }

    #[test]
    fn identical_sequences_dump_identically(ops in prop::collection::vec(op_strategy(), 0..30)) {
        let mut a = seeded();
        let mut b = seeded();
        for op in &ops {
            apply(&mut a, op);
            apply(&mut b, op);
        }
        prop_assert_eq!(a.dump(), b.dump());
    }

    #[test]
    fn diff_replays(pre in prop::collection::vec(op_strategy(), 0..20), post in prop::collection::vec(op_strategy(), 0..20)) {
        let mut before = seeded();
        for op in &pre { apply(&mut before, op); }
        let mut after = before.clone();
        for op in &post { apply(&mut after, op); }
        let delta = snapshot_diff(&before, &after, "/").unwrap();
        let mut replay = Listing::capture(&before, "/").unwrap();
        replay.apply(&delta);
        prop_assert_eq!(replay, Listing::capture(&after, "/").unwrap());
    }
}
