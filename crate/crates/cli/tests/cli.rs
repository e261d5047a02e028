use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tweezer_cli::output::{sha256_hex, RunManifest};
use tweezer_cli::ScenarioConfig;

fn tweezer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tweezer"))
        .current_dir(dir)
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

/// Defaults scaled down so every scenario finishes in seconds.
fn small_config() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.loading.n_atoms = 200;
    c.loading.map_n_rep = 4;
    c.loading.map_z_um = vec![-1.0, 0.0, 1.0];
    c.loading.map_r_um = vec![0.0, 0.5];
    c.loading.array_sides = vec![3, 4];
    c.cycle.grab_cycles = 50;
    c.cycle.flip_shots = 2000;
    c.cycle.runs = 3;
    c.drive.molasses_atoms = 200;
    c
}

fn write_config(dir: &Path, c: &ScenarioConfig) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, c.to_toml_string()).unwrap();
    p
}

fn csv_files(run: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_defaults_validate() {
    let dir = tempfile::tempdir().unwrap();
    let o = tweezer(dir.path(), &["validate-config"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 diagnostics"));
}

#[test]
fn range_violations_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ScenarioConfig::default();
    c.reservoir.duty_cycle = 1.3;
    c.cavity.r1 = 1.0;
    let p = write_config(dir.path(), &c);
    let o = tweezer(dir.path(), &["validate-config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    assert!(out.contains("reservoir.duty_cycle") && out.contains("[0, 1]"), "{out}");
    assert!(out.contains("cavity.r1") && out.contains("(0, 1)"), "{out}");
}

#[test]
fn parse_errors_carry_a_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[cavity]\nr1 = 0.98\nr2 = = 3\n").unwrap();
    let o = tweezer(dir.path(), &["validate-config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    fs::write(&p, "[reservoir]\nduty = 0.5\n").unwrap();
    let o = tweezer(dir.path(), &["--config", p.to_str().unwrap(), "cavity"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2, column 1"), "{}", stderr(&o));
}

#[test]
fn invalid_config_blocks_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ScenarioConfig::default();
    c.reservoir.duty_cycle = 1.3;
    let p = write_config(dir.path(), &c);
    let o = tweezer(dir.path(), &["--config", p.to_str().unwrap(), "reservoir"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_scenario_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let o = tweezer(dir.path(), &["run-scenario", "fig9"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("fig9") && e.contains("fig2d") && e.contains("fig8-point"), "{e}");
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tweezer(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(tweezer(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn manifest_checksums_match_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = tweezer(dir.path(), &["--seed", "4", "cavity"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("out/cavity/4");
    let m: RunManifest = serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 4);
    assert!(m.error.is_none() && m.missing.is_empty());
    assert!(m.files.contains_key("data.csv") && m.files.contains_key("summary.json"));
    for (name, hash) in &m.files {
        assert_eq!(&sha256_hex(&fs::read(run.join(name)).unwrap()), hash, "{name}");
    }
    let header = fs::read_to_string(run.join("data.csv")).unwrap();
    assert!(header.lines().next().unwrap().contains("z_over_l"), "{header}");
}

#[test]
fn failed_run_records_why() {
    let dir = tempfile::tempdir().unwrap();
    let o = tweezer(dir.path(), &["load-mc", "--duty", "1.5", "--map-reps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let m: RunManifest =
        serde_json::from_slice(&fs::read(dir.path().join("out/load-mc/1/manifest.json")).unwrap()).unwrap();
    assert!(m.error.unwrap().contains("--duty"));
    assert_eq!(m.missing, vec!["data.csv", "summary.json"]);
}

#[test]
fn fit_subcommand_recovers_decay() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("t_s,survival\n");
    for i in 0..15 {
        let t = i as f64 * 0.3;
        csv.push_str(&format!("{t},{}\n", 0.95 * (-t / 1.3f64).exp()));
    }
    fs::write(dir.path().join("decay.csv"), csv).unwrap();
    let o = tweezer(dir.path(), &["fit", "--input", "decay.csv", "--model", "exponential_decay", "--guess", "0.5,2.0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/fit/1/summary.json")).unwrap()).unwrap();
    assert_eq!(s["fit"]["param_names"][1], "tau");
    let tau = s["fit"]["params"][1].as_f64().unwrap();
    assert!((tau - 1.3).abs() < 1e-6, "{s}");

    let o = tweezer(dir.path(), &["fit", "--input", "decay.csv", "--model", "lorentzian", "--guess", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let cfg = cfg.to_str().unwrap();
    let runs: [&[&str]; 4] = [
        &["run-scenario", "fig7b"],
        &["run-scenario", "fig3cde"],
        &["run-scenario", "fig2gh"],
        &["load-mc", "--atoms", "300", "--map-reps", "3", "--molasses"],
    ];
    for args in runs {
        let mut outs = Vec::new();
        for threads in ["1", "2", "3"] {
            let out = format!("out{threads}");
            let mut a = vec!["--config", cfg, "--seed", "9", "--threads", threads, "--out-dir", &out];
            a.extend_from_slice(args);
            let o = tweezer(dir.path(), &a);
            assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
            let run = PathBuf::from(stdout(&o).trim());
            outs.push(csv_files(&dir.path().join(run)));
        }
        assert!(!outs[0].is_empty());
        assert_eq!(outs[0], outs[1], "{args:?}");
        assert_eq!(outs[0], outs[2], "{args:?}");
    }
}

#[test]
fn every_scenario_runs_on_a_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    for name in tweezer_cli::scenarios::SCENARIOS {
        let o = tweezer(dir.path(), &["--config", cfg.to_str().unwrap(), "run-scenario", name]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stderr(&o));
        let run = dir.path().join("out").join(name).join("1");
        assert!(run.join("data.csv").exists() && run.join("summary.json").exists(), "{name}");
    }
}
