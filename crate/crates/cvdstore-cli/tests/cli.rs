//! End-to-end checks driving the compiled `cvd` binary.

use std::path::Path;
use std::process::{Command, Output};

fn cvd(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvd"))
        .env("CVDSTORE_ROOT", root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn setup(dir: &Path) {
    write(
        &dir.join("schema.txt"),
        "id:int\nname:text\nprice:decimal\n",
    );
    write(
        &dir.join("data.csv"),
        "id,name,price\n1,apple,1.5\n2,banana,0.5\n3,pear,2.0\n",
    );
    let o = cvd(
        dir,
        &[
            "init", "fruit", "-s",
            dir.join("schema.txt").to_str().unwrap(),
            "-f",
            dir.join("data.csv").to_str().unwrap(),
            "--pk", "id",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("v1"));
    assert!(stdout(&o).contains("3 records"));
}

#[test]
fn init_ls_drop_roundtrip() {
    let tmp = tempfile::TempDir::new().unwrap();
    let o = cvd(tmp.path(), &["ls"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");

    setup(tmp.path());
    let o = cvd(tmp.path(), &["ls"]);
    assert_eq!(stdout(&o).trim(), "fruit");

    // a live checkout makes drop warn about the purged staging entry
    let o = cvd(tmp.path(), &["checkout", "fruit", "-v", "v1", "-t", "work"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cvd(tmp.path(), &["drop", "fruit"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("work"), "{}", stderr(&o));
    let o = cvd(tmp.path(), &["ls"]);
    assert_eq!(stdout(&o), "");
}

#[test]
fn checkout_commit_diff_flow() {
    let tmp = tempfile::TempDir::new().unwrap();
    setup(tmp.path());

    let o = cvd(tmp.path(), &["checkout", "fruit", "-v", "1", "-t", "t1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("3 rows"));

    // unchanged commit: new version, zero fresh records
    let o = cvd(tmp.path(), &["commit", "fruit", "-t", "t1", "-m", "copy"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("v2"));

    let o = cvd(tmp.path(), &["diff", "fruit", "v1", "v2"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "", "identical rlists diff to nothing");

    // CSV round trip: checkout to a file, edit a row, commit with schema
    let csv = tmp.path().join("t2.csv");
    let o = cvd(
        tmp.path(),
        &["checkout", "fruit", "-v", "v2", "-f", csv.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let edited = text.replace("banana", "mango");
    assert_ne!(text, edited);
    std::fs::write(&csv, edited).unwrap();

    // commit -f without -s is a user error
    let o = cvd(
        tmp.path(),
        &["commit", "fruit", "-f", csv.to_str().unwrap(), "-m", "edit"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schema file required"), "{}", stderr(&o));

    let o = cvd(
        tmp.path(),
        &[
            "commit", "fruit",
            "-f", csv.to_str().unwrap(),
            "-s", tmp.path().join("schema.txt").to_str().unwrap(),
            "-m", "edit",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("v3"));

    // exactly one record replaced
    let o = cvd(tmp.path(), &["diff", "fruit", "v2", "v3"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with('-')).count(), 1, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with('+')).count(), 1, "{out}");

    let o = cvd(
        tmp.path(),
        &["run", "fruit", "--version", "v3", "--where", "price<1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1, "{out}");
    assert!(out.contains("mango"), "{out}");

    let o = cvd(
        tmp.path(),
        &["optimize", "fruit", "--gamma", "2.0x", "--mu", "1.5", "--check-every", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("avg checkout"), "{}", stdout(&o));
}

#[test]
fn user_errors_exit_one() {
    let tmp = tempfile::TempDir::new().unwrap();
    let o = cvd(tmp.path(), &["checkout", "nope", "-v", "v1", "-t", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).lines().count(), 1, "{}", stderr(&o));

    setup(tmp.path());
    let o = cvd(tmp.path(), &["diff", "fruit", "v1", "v9"]);
    assert_eq!(o.status.code(), Some(1));

    let o = cvd(tmp.path(), &["checkout", "fruit", "-v", "zzz", "-t", "x"]);
    assert_eq!(o.status.code(), Some(1));

    let o = cvd(tmp.path(), &["drop", "nope"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn corruption_exits_two() {
    let tmp = tempfile::TempDir::new().unwrap();
    setup(tmp.path());
    // mangle the data segment beyond what the manifest can explain
    let dir = tmp.path().join("fruit");
    let seg = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "seg"))
        .expect("segment file");
    std::fs::write(&seg, b"\x00").unwrap();
    let o = cvd(tmp.path(), &["run", "fruit", "--version", "v1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn cli_matches_direct_engine_calls() {
    let tmp = tempfile::TempDir::new().unwrap();
    setup(tmp.path());
    let o = cvd(tmp.path(), &["checkout", "fruit", "-v", "v1", "-t", "t1"]);
    assert!(o.status.success());
    let o = cvd(tmp.path(), &["commit", "fruit", "-t", "t1", "-m", "same"]);
    assert!(o.status.success());

    // drive the same flow through the library against a second root
    let lib_root = tempfile::TempDir::new().unwrap();
    std::fs::create_dir_all(lib_root.path().join("fruit")).unwrap();
    let schema = cvdstore::engine::read_schema_file(&tmp.path().join("schema.txt")).unwrap();
    let rows = cvdstore::engine::read_csv(&tmp.path().join("data.csv"), &schema).unwrap();
    let mut lib = cvdstore::engine::init_cvd(
        &lib_root.path().join("fruit"),
        "fruit",
        &schema,
        &["id".to_string()],
        &rows,
    )
    .unwrap();
    let (table, _) =
        cvdstore::engine::checkout(&mut lib, &[cvdstore::graph::VersionId(1)], "t1").unwrap();
    let vid = cvdstore::engine::commit(
        &mut lib,
        &table,
        "same",
        &cvdstore::maintain::MaintenancePolicy::default(),
    )
    .unwrap();
    drop(lib);

    let cli_cvd =
        cvdstore::store::Cvd::open_reader(&tmp.path().join("fruit"), "fruit").unwrap();
    let lib_cvd =
        cvdstore::store::Cvd::open_reader(&lib_root.path().join("fruit"), "fruit").unwrap();
    assert_eq!(vid, cvdstore::graph::VersionId(2));
    assert_eq!(
        cli_cvd.state.versions[&vid].1,
        lib_cvd.state.versions[&vid].1
    );
    assert_eq!(
        cli_cvd.total_stored_records(),
        lib_cvd.total_stored_records()
    );
}
