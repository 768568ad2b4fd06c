use std::fs;
use std::path::Path;
use std::process::Command;

use ripa_cli::manifest::RunManifest;
use serde_json::Value;

fn sim(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_ripa-sim"))
        .args(args)
        .env("RIPA_SIM_THREADS", "2")
        .status()
        .expect("binary runs")
        .code()
        .expect("exit code")
}

fn run_in(out: &Path, args: &[&str]) -> i32 {
    let mut all = vec!["--out", out.to_str().unwrap()];
    all.extend_from_slice(args);
    sim(&all)
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn derive_reports_fsr1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["derive"]), 0);
    let v = json(dir.path().join("derived.json"));
    let fsr1 = v["fsr_1"].as_f64().unwrap();
    assert!((fsr1 / 3.19e9 - 1.0).abs() < 0.005, "{fsr1}");
    let m = RunManifest::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(m.subcommand, "derive");
    assert_eq!(m.config_hash.len(), 64);
    assert!(m.artifacts.contains_key("derived.json"));
}

#[test]
fn pulse_rise_time() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["pulse"]), 0);
    let v = json(dir.path().join("pulse.json"));
    let rise = v["rise_ns"].as_f64().unwrap();
    assert!((rise - 44.0).abs() <= 10.0, "{rise}");
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("t_s,intensity\n"));
    assert!(!trace.contains('\r'));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(sim(&["frobnicate"]), 64);
    assert_eq!(sim(&["--help"]), 0);
    assert_eq!(run_in(&out, &["--set", "geometry.n_cols=0", "derive"]), 1);
    assert_eq!(run_in(&out, &["--set", "loss.kappa_1=1.5", "budget"]), 1);
    assert_eq!(run_in(&out, &["--set", "geometry.bogus=1", "derive"]), 1);
    assert_eq!(run_in(&out, &["--set", "nokey", "derive"]), 1);
    assert_eq!(run_in(&out, &["--config", "/nonexistent/ripa.json", "derive"]), 1);
    assert_eq!(run_in(&out, &["focal", "--z", "1e-4"]), 1);
    assert_eq!(run_in(&out, &["pulse", "--detuning", "5e9"]), 1);
    assert_eq!(run_in(&out, &["crosstalk", "--from", "3", "--to", "2"]), 1);
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // The span ends before the pulse starts, so no edge is ever crossed.
    assert_eq!(run_in(dir.path(), &["pulse", "--span", "5e-8"]), 2);
    assert_eq!(run_in(dir.path(), &["calibrate", "--samples", "4"]), 2);
}

#[test]
fn config_file_and_overrides_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"geometry": {"n_cols": 10}}"#).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run_in(
            &out,
            &[
                "--config",
                cfg.to_str().unwrap(),
                "--set",
                "geometry.n_rows=12",
                "derive"
            ]
        ),
        0
    );
    let m = RunManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!((m.config.geometry.n_cols, m.config.geometry.n_rows), (10, 12));
    assert_eq!(m.overrides, vec!["geometry.n_rows=12".to_string()]);
    let f_res = json(out.join("derived.json"))["f_res"].as_f64().unwrap();
    assert!((f_res - m.config.geometry.fsr_2() / 10.0).abs() < 1e-3);
}

#[test]
fn reruns_and_replays_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, r) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("r"));
    let args = ["--seed", "3", "calibrate", "--noise", "0.02", "--model", "smooth"];
    assert_eq!(run_in(&a, &args), 0);
    assert_eq!(run_in(&b, &args), 0);
    let (ma, mb) = (
        RunManifest::load(a.join("manifest.json")).unwrap(),
        RunManifest::load(b.join("manifest.json")).unwrap(),
    );
    assert_eq!(ma.artifacts, mb.artifacts);
    for name in ma.artifacts.keys() {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = a.join("manifest.json");
    assert_eq!(run_in(&r, &["replay", manifest.to_str().unwrap()]), 0);
    assert_eq!(
        RunManifest::load(r.join("manifest.json")).unwrap().artifacts,
        ma.artifacts
    );

    // A different seed changes the aberrations.
    let c = dir.path().join("c");
    assert_eq!(
        run_in(
            &c,
            &["--seed", "4", "calibrate", "--noise", "0.02", "--model", "smooth"]
        ),
        0
    );
    assert_ne!(
        fs::read(a.join("aberration.csv")).unwrap(),
        fs::read(c.join("aberration.csv")).unwrap()
    );
}

#[test]
fn tampered_artifact_fails_replay() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert_eq!(run_in(&a, &["budget"]), 0);
    let mut m = RunManifest::load(a.join("manifest.json")).unwrap();
    m.artifacts.insert("budget.csv".into(), "0".repeat(64));
    fs::write(a.join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
    let r = dir.path().join("r");
    assert_eq!(run_in(&r, &["replay", a.join("manifest.json").to_str().unwrap()]), 2);
}

#[test]
fn move_with_program_file_replays_without_it() {
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("prog.json");
    fs::write(
        &prog,
        r#"{"channels": [{"segments": [
            {"start": 0.0, "duration": 1e-7, "kind": "hold", "detuning_hz": 0.0, "amplitude": 1.0},
            {"start": 1e-7, "duration": 1e-7, "kind": "linear-frequency-ramp", "start_hz": 0.0, "end_hz": 3e7, "amplitude": 1.0}
        ]}]}"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    assert_eq!(
        run_in(&a, &["move", "--program", prog.to_str().unwrap(), "--frame-dt", "2e-8"]),
        0
    );
    fs::remove_file(&prog).unwrap();
    let movie = json(a.join("movie/manifest.json"));
    assert_eq!(movie["frames"].as_array().unwrap().len(), 11);
    let tracks = json(a.join("trajectories.json"));
    assert!(!tracks.as_array().unwrap().is_empty());
    let r = dir.path().join("r");
    assert_eq!(run_in(&r, &["replay", a.join("manifest.json").to_str().unwrap()]), 0);
}

#[test]
fn outputs_stay_inside_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("only");
    assert_eq!(run_in(&out, &["grid", "--n", "3", "--pixels", "64"]), 0);
    let entries: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("only")]);
    let pgm = fs::read(out.join("grid.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n65535\n"));
}
