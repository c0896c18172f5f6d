use std::path::Path;
use std::process::{Command, Output};

fn vegoc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vegoc")).args(args).arg("--out").arg(out).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn flat_css_run_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("css");
    let o = vegoc(&["css", "--set", "R=10", "--mesh", "interval:5:50"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("75.08"), "{}", stdout(&o));
    for f in ["css.bin", "css.bin.json", "diagnostics.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(vegoc(&["css", "--set", "R=26"], &a).status.success());
    let m = a.join("manifest.json");
    let o = vegoc(&["run", m.to_str().unwrap()], &b);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["css.bin", "diagnostics.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn private_flat_state() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vegoc(&["private", "css", "--set", "R=60", "--guess", "80,30"], &tmp.path().join("p"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("79.5"), "{}", stdout(&o));
}

#[test]
fn bad_override_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vegoc(&["css", "--set", "R"], &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    let o = vegoc(&["css", "--set", "nonsense=1"], &tmp.path().join("y"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn defective_target_exits_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t");
    assert!(vegoc(&["css", "--set", "R=20"], &t).status.success());
    let target = t.join("css.bin");
    let o = vegoc(&["path", "--set", "R=20", "--target", target.to_str().unwrap(), "--flat", "220,9.6"], &tmp.path().join("p"));
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn branch_crossing_to_path() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);
    let mesh = ["--mesh", "interval:5:24"];
    let o = vegoc(
        &[&["branch", "--set", "R=34", "--bounds", "15,40", "--switch", "0", "--switch-bounds", "15,40", "--no-index"][..], &mesh[..]]
            .concat(),
        &d("b"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seed = d("b").join("switched.bin");
    let o = vegoc(&[&["css", "--set", "R=20", "--seed-file", seed.to_str().unwrap()][..], &mesh[..]].concat(), &d("c"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("crossings"), "{}", stdout(&o));
    let o = vegoc(&[&["css", "--set", "R=20", "--seed-file", seed.to_str().unwrap(), "--crossing", "9"][..], &mesh[..]].concat(), &d("x"));
    assert_eq!(o.status.code(), Some(2));
    let target = d("c").join("css.bin");
    let o = vegoc(&[&["path", "--set", "R=20", "--target", target.to_str().unwrap(), "--flat", "223.59,9.62"][..], &mesh[..]].concat(), &d("p"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d("p").join("path.csv").is_file());
}
