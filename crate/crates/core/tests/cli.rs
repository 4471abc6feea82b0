use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(format!("{name}.json"))
}

fn concatmc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concatmc"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("CONCATMC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn run_example(cmd: &str, name: &str, extra: &[&str], out: &Path) -> Output {
    let cfg = example(name);
    let mut args = vec![cmd, cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    concatmc(&args, out)
}

/// Data rows of a result CSV (the config comment line dropped).
fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# config: {"));
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    csv::Reader::from_reader(body.as_bytes()).records().map(|r| r.unwrap()).collect()
}

#[test]
fn identical_iterations_pass_check_pasting() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("check-pasting", "identical_iterations", &[], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rs = rows(&dir.path().join("identical_iterations.check-pasting.csv"));
    assert!(!rs.is_empty());
    assert!(rs.iter().all(|r| &r[5] == "true"));
}

#[test]
fn violating_pair_fails_check_pasting() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("check-pasting", "violating_pair", &[], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let rs = rows(&dir.path().join("violating_pair.check-pasting.csv"));
    let integral = rs.iter().find(|r| r[6].contains("condition=integral")).unwrap();
    assert_eq!(&integral[5], "false");
    let gap: f64 = integral[1].parse().unwrap();
    assert!((gap - 1.0 / 6.0).abs() < 1e-9);
}

#[test]
fn one_sample_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_example("resolvent", "exponential", &["--samples", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples"));
}

#[test]
fn schema_violations_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(example("exponential")).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, text.replace("\"samples\": 100000", "\"samples\": \"many\"")).unwrap();
    let out = concatmc(&["resolvent", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("params.samples") && err.contains("line"), "{err}");

    let no_seed = dir.path().join("no_seed.json");
    std::fs::write(&no_seed, text.replace("\"seed\": 2024,", "")).unwrap();
    let out = concatmc(&["resolvent", no_seed.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let missing = dir.path().join("missing.json");
    assert_eq!(concatmc(&["resolvent", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));
    assert_eq!(concatmc(&["explode", bad.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn output_is_byte_identical_across_runs_and_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for cmd in ["resolvent", "simulate"] {
        run_example(cmd, "four_state", &["--samples", "3000", "--threads", "1"], a.path());
        run_example(cmd, "four_state", &["--samples", "3000", "--threads", "4"], b.path());
    }
    for file in ["four_state.resolvent.csv", "four_state.simulate.csv", "four_state.paths.csv", "four_state.resolvent.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn reports_embed_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    run_example("resolvent", "two_stage", &["--samples", "500", "--seed", "99"], dir.path());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("two_stage.resolvent.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 99);
    assert_eq!(report["config"]["seed"], 99);
    assert_eq!(report["config"]["params"]["samples"], 500);
    let rs = rows(&dir.path().join("two_stage.resolvent.csv"));
    assert_eq!((&rs[0][3], &rs[0][4]), ("500", "99"));
}

#[test]
fn out_dir_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = example("exponential");
    let out = Command::new(env!("CARGO_BIN_EXE_concatmc"))
        .args(["resolvent", cfg.to_str().unwrap(), "--samples", "100"])
        .env("CONCATMC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("exponential.resolvent.csv").exists());
}

#[test]
fn shipped_examples_run_quickly() {
    let table: &[(&str, &[&str])] = &[
        ("exponential", &["resolvent", "semigroup", "invert-laplace", "simulate"]),
        ("two_stage", &["resolvent", "check-revival", "check-dynkin"]),
        ("four_state", &["resolvent", "semigroup", "check-dynkin", "check-revival"]),
        ("revival_table", &["check-revival"]),
        ("three_state", &["resolvent", "semigroup", "invert-laplace"]),
        ("identical_iterations", &["check-pasting", "check-projection", "resolvent"]),
        ("violating_pair", &["check-pasting", "check-projection"]),
        ("brownian", &["simulate", "resolvent"]),
    ];
    let shipped = std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("examples"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    assert_eq!(shipped, table.len(), "every shipped example needs a row here");
    let dir = tempfile::tempdir().unwrap();
    for (name, cmds) in table {
        for cmd in *cmds {
            let t = Instant::now();
            let out = run_example(cmd, name, &[], dir.path());
            let expected = if *name == "violating_pair" { 1 } else { 0 };
            assert_eq!(
                out.status.code(),
                Some(expected),
                "{cmd} {name}: {}{}",
                String::from_utf8_lossy(&out.stdout),
                String::from_utf8_lossy(&out.stderr)
            );
            assert!(t.elapsed() < Duration::from_secs(60), "{cmd} {name} took {:?}", t.elapsed());
        }
    }
}
