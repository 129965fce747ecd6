//! End-to-end runs of the `hopon` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Runs the binary inside `cwd` with fixture paths redirected.
fn hopon(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hopon"))
        .args(args)
        .current_dir(cwd)
        .env("HOPON_FIXTURE_DIR", fixture_dir())
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn compose_matches_goldens() {
    let tmp = TempDir::new().unwrap();
    let o = hopon(tmp.path(), &["compose", "fixtures/fig2.scn", "--out", "out"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["routers.txt", "routing.txt", "mapping.txt", "sdra_op.txt", "deployed.json"] {
        let want = fs::read_to_string(fixture_dir().join("golden/fig2").join(f)).unwrap();
        let got = fs::read_to_string(tmp.path().join("out").join(f)).unwrap();
        assert_eq!(got, want, "{f}");
    }
}

#[test]
fn compose_twice_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for dir in ["a", "b"] {
        assert_eq!(code(&hopon(tmp.path(), &["compose", "fixtures/isolation_dedicated.scn", "--out", dir])), 0);
    }
    for f in ["routers.txt", "routing.txt", "mapping.txt", "sdra_op.txt", "deployed.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn validate_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let o = hopon(tmp.path(), &["validate", "fixtures/fig2.scn"]);
    assert_eq!(code(&o), 0);
    assert!(o.stderr.is_empty());
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn trace_flag_does_not_change_metrics() {
    let tmp = TempDir::new().unwrap();
    let plain = hopon(tmp.path(), &["run", "fixtures/handover_multicast.scn", "--metrics", "m1.json"]);
    let traced =
        hopon(tmp.path(), &["run", "fixtures/handover_multicast.scn", "--metrics", "m2.json", "--trace", "t.csv"]);
    assert_eq!((code(&plain), code(&traced)), (0, 0));
    assert_eq!(fs::read(tmp.path().join("m1.json")).unwrap(), fs::read(tmp.path().join("m2.json")).unwrap());
    let trace = fs::read_to_string(tmp.path().join("t.csv")).unwrap();
    assert!(trace.starts_with("time_s,event,vn,packet,node,detail\n"));
    assert!(trace.lines().count() > 100);
}

#[test]
fn compare_reports_session_columns() {
    let tmp = TempDir::new().unwrap();
    for (fixture, flows_times_setups) in [("fig2", 10), ("baseline_moves", 40)] {
        let metrics = format!("{fixture}.json");
        let o = hopon(tmp.path(), &["compare", &format!("fixtures/{fixture}.scn"), "--metrics", &metrics]);
        assert_eq!(code(&o), 0);
        let v = read_json(&tmp.path().join(&metrics));
        let col = &v["signaling"]["session_baseline"];
        assert_eq!(col["hop_on"], 0);
        assert_eq!(col["session_baseline"], flows_times_setups);
        assert!(String::from_utf8_lossy(&o.stdout).contains("signaling.session_baseline"));
    }
}

#[test]
fn export_dot_lists_slice_graph() {
    let tmp = TempDir::new().unwrap();
    let o = hopon(tmp.path(), &["export-dot", "fixtures/fig2.scn", "--out", "g/vn.dot"]);
    assert_eq!(code(&o), 0);
    let dot = fs::read_to_string(tmp.path().join("g/vn.dot")).unwrap();
    assert!(dot.starts_with("digraph hopon {"));
    assert!(dot.contains("vn1_4 -> vn1_1 [label=\"tunnel 17\"]"));
    assert!(dot.contains("vn1_2 -> vn1_an19 [style=dashed, label=\"open 13\"]"));
    assert!(dot.contains("nn11 -> nn16"));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let o = hopon(tmp.path(), &["run", "fixtures/fig2.scn", "--nope"]);
    assert_eq!(code(&o), 3);
    assert!(!o.stderr.is_empty());

    let o = hopon(tmp.path(), &["validate", "fixtures/admission_twin_slices.scn"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("link 7"));

    fs::write(tmp.path().join("bad.scn"), "[sim]\nduration_s = \"long\"\n").unwrap();
    let o = hopon(tmp.path(), &["validate", "bad.scn"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());

    let o = hopon(tmp.path(), &["compose", "missing.scn", "--out", "x"]);
    assert_eq!(code(&o), 2);

    // A directory where the metrics file should go.
    fs::create_dir(tmp.path().join("m.json")).unwrap();
    let o = hopon(tmp.path(), &["run", "fixtures/fig2.scn", "--metrics", "m.json"]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());

    let o = hopon(tmp.path(), &["--version"]);
    assert_eq!(code(&o), 0);
    assert!(o.stderr.is_empty());
}
