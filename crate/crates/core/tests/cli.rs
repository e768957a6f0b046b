use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gfcsim"));
    c.env("RUST_LOG", "off");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn code(c: &mut Command) -> i32 {
    c.status().expect("binary runs").code().expect("exit code")
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(|s| s.to_string()).collect()
}

#[test]
fn successful_runs_exit_zero_and_write_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.csv");
    let scenario = configs().join("smoke.toml");
    assert_eq!(code(bin().args(["simulate", "--controller", "droop", "--scenario"]).arg(&scenario).arg("--out").arg(&out)), 0);
    let h = header(&out);
    assert_eq!(h[0], "time");
    assert!(h.iter().any(|c| c == "gfc4_v_d"));
    let rows = csv::Reader::from_path(&out).unwrap().records().count();
    assert_eq!(rows, 40);

    let rep = dir.path().join("cmp.csv");
    assert_eq!(
        code(bin().args(["compare", "--controllers", "droop,ref11", "--scenario"]).arg(&scenario).arg("--report").arg(&rep)),
        0
    );
    let h = header(&rep);
    assert_eq!(&h[..3], ["scenario", "controller", "status"]);
    let rows: Vec<csv::StringRecord> = csv::Reader::from_path(&rep).unwrap().records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    // metrics refer to the scenario's own islanding instant
    for r in &rows {
        for field in r.iter().skip(3) {
            assert!(!field.contains("NaN") && !field.contains("inf"), "{r:?}");
        }
    }
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(bin().args(["simulate", "--controller", "droop", "--scenario"]).arg(&missing).arg("--out").arg(&out)), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nmg_load_va = 1e6\nnot_a_field = 3\n").unwrap();
    assert_eq!(code(bin().args(["simulate", "--controller", "droop", "--scenario"]).arg(&bad).arg("--out").arg(&out)), 2);

    let smoke = configs().join("smoke.toml");
    assert_eq!(code(bin().args(["simulate", "--controller", "pinn", "--scenario"]).arg(&smoke).arg("--out").arg(&out)), 2);
    assert_eq!(code(bin().args(["simulate", "--controller", "lqr", "--scenario"]).arg(&smoke).arg("--out").arg(&out)), 2);

    let corrupt = dir.path().join("m.json");
    std::fs::write(&corrupt, "{\"layers\": 3}").unwrap();
    assert_eq!(code(bin().args(["evaluate", "--scenario"]).arg(&smoke).arg("--model").arg(&corrupt).arg("--report").arg(&out)), 2);

    let cfg = dir.path().join("train.toml");
    std::fs::write(&cfg, "iterations = \"many\"\n").unwrap();
    assert_eq!(code(bin().args(["train", "--data"]).arg(dir.path()).arg("--config").arg(&cfg).arg("--out").arg(&corrupt)), 2);
}

#[test]
fn divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(configs().join("smoke.toml")).unwrap().replace("dt = 20e-6", "dt = 2e-3");
    let sc = dir.path().join("coarse.toml");
    std::fs::write(&sc, text).unwrap();
    let out = dir.path().join("run.csv");
    assert_eq!(code(bin().args(["simulate", "--controller", "droop", "--scenario"]).arg(&sc).arg("--out").arg(&out)), 1);
    // the partial record is still written
    assert_eq!(header(&out)[0], "time");
}
