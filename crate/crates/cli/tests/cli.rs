use std::path::Path;
use std::process::{Command, Output};

fn gestalt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gestalt"))
        .args(args)
        .env("GESTALT_OUT", root)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = gestalt(root, args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().iter().map(String::from).collect();
    let rows = rd
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let (header, rows) = read_csv(path);
    let c = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("{name} not in {header:?}"));
    rows.iter().map(|r| r[c].parse().unwrap()).collect()
}

fn train_pendulum(root: &Path, seeds: &str) {
    ok(
        root,
        &["train", "--preset", "pendulum", "--seeds", seeds, "--epochs", "4"],
    );
}

#[test]
fn gen_data_writes_pendulum_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p.csv");
    ok(
        tmp.path(),
        &[
            "gen-data",
            "pendulum",
            "--frames",
            "300",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    let (header, rows) = read_csv(&out);
    assert_eq!(rows.len(), 300);
    // time column plus two joints in the plane
    assert_eq!(header.len(), 5, "{header:?}");
}

#[test]
fn gen_data_applies_disturbance() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    ok(
        tmp.path(),
        &["gen-data", "walker", "--frames", "20", "--out", a.to_str().unwrap()],
    );
    ok(
        tmp.path(),
        &[
            "gen-data",
            "walker",
            "--frames",
            "20",
            "--translation",
            "-2,2.5,-4",
            "--out",
            b.to_str().unwrap(),
        ],
    );
    let (ha, ra) = read_csv(&a);
    let (_, rb) = read_csv(&b);
    assert_eq!(ha.len(), 1 + 15 * 3);
    let x0: f64 = ra[0][1].parse().unwrap();
    let x1: f64 = rb[0][1].parse().unwrap();
    assert!((x1 - x0 + 2.0).abs() < 1e-9, "{x0} {x1}");
}

#[test]
fn train_then_bind_reduces_fbe() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    train_pendulum(root, "0");
    let seed = root.join("pendulum/seed-0");
    for f in ["model.gm", "curve.csv"] {
        assert!(seed.join(f).is_file(), "{f}");
    }
    assert!(root.join("pendulum/manifest.json").is_file());

    let stdout = ok(
        root,
        &["bind", "--preset", "pendulum-exp4", "--seeds", "0", "--steps", "200"],
    );
    assert!(stdout.contains("FBE"), "{stdout}");
    let dir = root.join("pendulum-exp4");
    let fbe = column(&dir.join("seed-0/log.csv"), "FBE");
    assert_eq!(fbe.len(), 201);
    assert!(fbe[200] < fbe[0], "{} -> {}", fbe[0], fbe[200]);
    for f in ["binding.csv", "pose.csv"] {
        assert!(dir.join("seed-0").join(f).is_file(), "{f}");
    }
    for f in ["summary.csv", "fbe.svg", "binding.svg"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
}

#[test]
fn single_run_report_has_zero_std() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    train_pendulum(root, "3");
    ok(
        root,
        &["bind", "--preset", "pendulum-exp4", "--seeds", "3", "--steps", "20"],
    );
    let dir = root.join("pendulum-exp4");
    ok(root, &["report", dir.to_str().unwrap()]);
    let summary = dir.join("summary.csv");
    assert!(column(&summary, "n").iter().all(|&n| n == 1.0));
    assert!(column(&summary, "FBE_std").iter().all(|&s| s == 0.0));
}

#[test]
fn ten_seed_report_aggregates_all_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["train", "--preset", "pendulum", "--epochs", "2"]);
    ok(root, &["bind", "--preset", "pendulum-exp4", "--steps", "10"]);
    let summary = root.join("pendulum-exp4/summary.csv");
    let n = column(&summary, "n");
    assert_eq!(n.len(), 11);
    assert!(n.iter().all(|&n| n == 10.0));
    assert!(column(&summary, "FBE_std")[10] > 0.0);
    assert!(column(&root.join("pendulum/summary.csv"), "n")
        .iter()
        .all(|&n| n == 10.0));
}

#[test]
fn help_lists_hyperparameter_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let bind = ok(tmp.path(), &["bind", "--help"]);
    for flag in [
        "--beta-pos",
        "--beta-dir",
        "--beta-mag",
        "--eta-f",
        "--gamma-f",
        "--steps",
        "--seeds",
        "--preset",
    ] {
        assert!(bind.contains(flag), "{flag}");
    }
    let persp = ok(tmp.path(), &["perspective", "--help"]);
    for flag in [
        "--eta-r",
        "--gamma-r",
        "--eta-b",
        "--gamma-b",
        "--rotation",
        "--translation",
    ] {
        assert!(persp.contains(flag), "{flag}");
    }
    let top = ok(tmp.path(), &["--help"]);
    for cmd in ["gen-data", "train", "bind", "perspective", "joint", "report"] {
        assert!(top.contains(cmd), "{cmd}");
    }
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let code = |args: &[&str]| gestalt(root, args).status.code().unwrap();

    assert_eq!(code(&["bind", "--preset", "walker-exp9"]), 2);
    // no trained model under the root
    assert_eq!(code(&["bind", "--preset", "walker-exp3", "--seeds", "0"]), 2);

    let bad = root.join("bad.json");
    std::fs::write(
        &bad,
        r#"{"kind": "bind", "name": "x", "data": {"walker": {"subject": 5}}, "inference": {"betaz": 1}}"#,
    )
    .unwrap();
    let out = gestalt(root, &["bind", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inference"));

    assert_eq!(code(&["bind", "--preset", "walker-exp3", "--dry-run"]), 0);

    train_pendulum(root, "0");
    ok(
        root,
        &["bind", "--preset", "pendulum-exp4", "--seeds", "0", "--steps", "5"],
    );
    ok(
        root,
        &[
            "bind",
            "--preset",
            "pendulum-exp4",
            "--seeds",
            "0",
            "--steps",
            "6",
            "--name",
            "longer",
        ],
    );
    let dirs = [root.join("pendulum-exp4"), root.join("longer")];
    assert_eq!(
        code(&["report", dirs[0].to_str().unwrap(), dirs[1].to_str().unwrap()]),
        1
    );
}

#[test]
fn manifest_rerun_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    train_pendulum(root, "0,1");
    ok(
        root,
        &["bind", "--preset", "pendulum-exp4", "--seeds", "0,1", "--steps", "30"],
    );
    let first = root.join("pendulum-exp4");
    let manifest = first.join("manifest.json");
    ok(
        root,
        &["bind", "--config", manifest.to_str().unwrap(), "--name", "again"],
    );
    for s in ["seed-0", "seed-1"] {
        for f in ["log.csv", "binding.csv", "pose.csv"] {
            let a = std::fs::read(first.join(s).join(f)).unwrap();
            let b = std::fs::read(root.join("again").join(s).join(f)).unwrap();
            assert_eq!(a, b, "{s}/{f}");
        }
    }
}
