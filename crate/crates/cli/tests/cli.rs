use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jsvd_core::model_io::{FactorizedManifest, FACTORIZED_FILE};

fn models() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models")
}

fn jsvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jsvd"))
        .args(args)
        .output()
        .expect("run jsvd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn toy_copy() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    for e in fs::read_dir(models().join("toy")).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            fs::copy(e.path(), dir.path().join(e.file_name())).unwrap();
        }
    }
    let manifest = dir.path().join("model.json").to_string_lossy().into_owned();
    (dir, manifest)
}

fn read_artifact(dir: &Path) -> FactorizedManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(FACTORIZED_FILE)).unwrap()).unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn decompose_then_verify_each_method() {
    for method in ["rjsvd", "ljsvd", "bijsvd"] {
        let (dir, manifest) = toy_copy();
        let o = jsvd(&["decompose", "--manifest", &manifest, "--method", method, "--k", "5"]);
        assert!(o.status.success(), "{method}: {}", stderr(&o));
        assert!(stdout(&o).contains("cf "));
        assert!(dir.path().join("factorized").join(FACTORIZED_FILE).exists());
        let o = jsvd(&["verify", "--manifest", &manifest]);
        assert_eq!(o.status.code(), Some(0), "{method}: {}{}", stdout(&o), stderr(&o));
    }
}

#[test]
fn missing_manifest_exits_2_with_path() {
    let o = jsvd(&["decompose", "--manifest", "/no/such/dir/model.json", "--rank", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/dir/model.json"), "{}", stderr(&o));
}

#[test]
fn corrupted_factor_fails_verify_naming_layer() {
    let (dir, manifest) = toy_copy();
    assert!(jsvd(&["decompose", "--manifest", &manifest, "--method", "rjsvd"]).status.success());
    let file = dir.path().join("factorized/factors/b2_u.bin");
    let mut bytes = fs::read(&file).unwrap();
    bytes[10] ^= 0x01;
    fs::write(&file, bytes).unwrap();
    let o = jsvd(&["verify", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("b2"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("b1"), "{}", stderr(&o));
    assert!(stdout(&o).contains("b2: ") && stdout(&o).contains("digest"));
}

#[test]
fn corrupted_shared_factor_names_every_member() {
    let (dir, manifest) = toy_copy();
    assert!(jsvd(&["decompose", "--manifest", &manifest, "--method", "ljsvd"]).status.success());
    let file = dir.path().join("factorized/factors/g3_shared_u.bin");
    let mut bytes = fs::read(&file).unwrap();
    bytes[0] ^= 0x80;
    fs::write(&file, bytes).unwrap();
    let o = jsvd(&["verify", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("d1") && err.contains("d2") && err.contains("d3"), "{err}");
}

#[test]
fn verify_output_is_deterministic_for_a_seed() {
    let (_dir, manifest) = toy_copy();
    assert!(jsvd(&["decompose", "--manifest", &manifest, "--method", "bijsvd", "--k", "3"]).status.success());
    let a = jsvd(&["verify", "--manifest", &manifest, "--seed", "17"]);
    let b = jsvd(&["verify", "--manifest", &manifest, "--seed", "17", "--threads", "1"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("seed 17"));
}

#[test]
fn dual_with_p0_matches_right_shared() {
    let (dir, manifest) = toy_copy();
    let right = dir.path().join("right");
    let dual = dir.path().join("dual");
    let o = jsvd(&["decompose", "--manifest", &manifest, "--method", "rjsvd", "--rank", "4", "--out", &s(&right)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = jsvd(&["decompose", "--manifest", &manifest, "--method", "bijsvd", "--p", "0", "--rank", "4", "--out", &s(&dual)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (a, b) = (read_artifact(&right), read_artifact(&dual));
    for (x, y) in a.groups.iter().zip(&b.groups) {
        assert_eq!((y.r_r, y.r_l), (4, 0));
        assert!((x.residual_sq - y.residual_sq).abs() <= 1e-10 * x.residual_sq.max(1.0));
    }
    assert_eq!(a.report.cf, b.report.cf);
}

#[test]
fn overwrite_needs_force() {
    let (_dir, manifest) = toy_copy();
    assert!(jsvd(&["decompose", "--manifest", &manifest]).status.success());
    let o = jsvd(&["decompose", "--manifest", &manifest]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("already exists"));
    assert!(jsvd(&["decompose", "--manifest", &manifest, "--force"]).status.success());
}

#[test]
fn thread_count_does_not_change_artifact() {
    let (dir, manifest) = toy_copy();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = ["decompose", "--manifest", &manifest, "--method", "bijsvd", "--k", "4"];
    let o = jsvd(&[&common[..], &["--threads", "1", "--out", &s(&a)]].concat());
    assert!(o.status.success());
    let o = jsvd(&[&common[..], &["--threads", "4", "--out", &s(&b)]].concat());
    assert!(o.status.success());
    assert_eq!(fs::read(a.join(FACTORIZED_FILE)).unwrap(), fs::read(b.join(FACTORIZED_FILE)).unwrap());
}

#[test]
fn f32_artifact_verifies() {
    let (_dir, manifest) = toy_copy();
    let o = jsvd(&["decompose", "--manifest", &manifest, "--method", "ljsvd", "--precision", "f32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = jsvd(&["verify", "--manifest", &manifest]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("threshold 1e-4"));
}

#[test]
fn budget_matches_decompose_report() {
    let (dir, manifest) = toy_copy();
    let o = jsvd(&["decompose", "--manifest", &manifest, "--method", "bijsvd", "--rank", "3", "--p", "0.7"]);
    assert!(o.status.success());
    let artifact = read_artifact(&dir.path().join("factorized"));
    let o = jsvd(&["budget", "--manifest", &manifest, "--method", "bijsvd", "--rank", "3", "--p", "0.7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("budget/report.json")).unwrap()).unwrap();
    assert_eq!(doc["planned"]["cf"].as_f64().unwrap(), artifact.report.cf);
    assert_eq!(doc["planned"]["macs_after"].as_u64().unwrap(), artifact.report.macs_after);
}

#[test]
fn budget_on_bundled_resnet18() {
    let out = tempfile::tempdir().unwrap();
    let o = jsvd(&["budget", "--manifest", &s(&models().join("resnet18.json")), "--out", &s(out.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    let params = doc["baseline"]["params_before"].as_u64().unwrap() as f64;
    let flops = doc["baseline"]["flops_before"].as_u64().unwrap() as f64;
    assert!((params / 11.16e6 - 1.0).abs() < 0.005);
    assert!((flops / 11.11e8 - 1.0).abs() < 0.02);
    assert_eq!(doc["baseline"]["flops_convention"], "two-per-mac");
}

#[test]
fn budget_planned_resnet34_at_target() {
    let out = tempfile::tempdir().unwrap();
    let o = jsvd(&[
        "budget",
        "--manifest",
        &s(&models().join("resnet34.json")),
        "--out",
        &s(out.path()),
        "--method",
        "bijsvd",
        "--target-cf",
        "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("report.json")).unwrap()).unwrap();
    let cf = doc["planned"]["cf"].as_f64().unwrap();
    assert!((10.0..=10.3).contains(&cf), "{cf}");
}

#[test]
fn infeasible_target_fails() {
    let (_dir, manifest) = toy_copy();
    let o = jsvd(&["budget", "--manifest", &manifest, "--target-cf", "1000"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("infeasible"));
}

#[test]
fn rank_and_target_are_exclusive() {
    let (_dir, manifest) = toy_copy();
    let o = jsvd(&["decompose", "--manifest", &manifest, "--rank", "2", "--target-cf", "2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_p_is_rejected() {
    let (_dir, manifest) = toy_copy();
    let o = jsvd(&["decompose", "--manifest", &manifest, "--p", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

/// Two (3, 3, 4, 4) layers in one group on a 4x4 input.
fn pair_manifest(dir: &Path) -> String {
    let text = r#"{
  "format_version": 1,
  "tensors": [
    {"name": "a", "shape": [3, 3, 4, 4], "dtype": "f64", "input_hw": [4, 4]},
    {"name": "b", "shape": [3, 3, 4, 4], "dtype": "f64", "input_hw": [4, 4]}
  ],
  "groups": [{"group_id": 0, "method": "rjsvd", "members": ["a", "b"]}]
}
"#;
    let path = dir.join("model.json");
    fs::write(&path, text).unwrap();
    s(&path)
}

#[test]
fn pair_target_cf_inverts_to_rank() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = pair_manifest(dir.path());
    for (target, rank) in [("8.0", 1), ("4.0", 2)] {
        let o = jsvd(&["budget", "--manifest", &manifest, "--method", "rjsvd", "--target-cf", target]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains(&format!("group 0 rjsvd r_r={rank} r_l=0")), "{out}");
        assert!(out.contains(&format!("cf           {target}00000")), "{out}");
    }
}

#[test]
fn bench_runs_once_after_warmup() {
    let (_dir, manifest) = toy_copy();
    assert!(jsvd(&["decompose", "--manifest", &manifest, "--method", "bijsvd", "--k", "2"]).status.success());
    let o = jsvd(&["bench", "--manifest", &manifest, "--repeats", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1 repeats"));
    assert!(out.contains("dual") && out.contains("mac ratio"));
    assert_eq!(out.lines().filter(|l| l.contains("direct")).count(), 10);
}
