use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use phbeam::BeamParams;
use phbeam_cli::config::{GainOverrides, GridConfig, InitialConfig, IntegratorConfig};
use phbeam_cli::{load_config, write_config, ControllerConfig, ScenarioConfig};
use proptest::prelude::*;

const COARSE: &str = r#"{
  "beam": {"sigma": 30, "z_p": 0.4},
  "grid": {"nodes": 61},
  "integrator": {"t_end": 0.1, "stride": 25}
}"#;

fn phbeam(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phbeam"))
        .args(args)
        .current_dir(dir)
        .env_remove("OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn simulate_writes_artifacts_to_out() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", COARSE);
    let o = phbeam(&["simulate", "c.json", "--out", "res"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("equilibrium_error = "));
    for name in ["trace.csv", "snapshots.csv", "profiles.csv", "report.txt"] {
        assert!(dir.path().join("res").join(name).is_file(), "{name}");
    }
    let report = fs::read_to_string(dir.path().join("res/report.txt")).unwrap();
    assert!(report.contains("\"nodes\": 61") && report.contains("defaults:"));

    let e = phbeam(&["energy-report", "res/trace.csv"], dir.path());
    assert!(e.status.success(), "{}", stderr(&e));
    assert!(stdout(&e).starts_with("steps = 100\n"));
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", COARSE);
    let o = phbeam(&["simulate", "c.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/trace.csv").is_file());

    let o = Command::new(env!("CARGO_BIN_EXE_phbeam"))
        .args(["simulate", "c.json"])
        .current_dir(dir.path())
        .env("OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from_env/trace.csv").is_file());

    let with_dir = COARSE.replacen('{', r#"{"output_dir": "from_config","#, 1);
    write(dir.path(), "d.json", &with_dir);
    let o = Command::new(env!("CARGO_BIN_EXE_phbeam"))
        .args(["simulate", "d.json"])
        .current_dir(dir.path())
        .env("OUT_DIR", "from_env2")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from_config/trace.csv").is_file());
    assert!(!dir.path().join("from_env2").exists());
}

#[test]
fn batch_runs_in_parallel_into_per_config_directories() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "one.json", COARSE);
    write(dir.path(), "two.json", COARSE);
    let o = phbeam(&["simulate", "one.json", "two.json", "--out", "batch", "--jobs", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(dir.path().join("batch/one/trace.csv")).unwrap();
    let b = fs::read(dir.path().join("batch/two/trace.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "unknown.json", r#"{"beam": {"EI": 1}}"#);
    write(dir.path(), "patch.json", r#"{"beam": {"z_p": 0.7, "l_p": 0.3}}"#);
    write(dir.path(), "guard.json", r#"{"beam": {"sigma": 400}}"#);
    write(dir.path(), "broken.json", "{");

    let o = phbeam(&["simulate", "unknown.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field `EI`"), "{}", stderr(&o));
    let o = phbeam(&["simulate", "patch.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beam.l_p"));
    let o = phbeam(&["static-solve", "guard.json"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("sigma*h = 1.0000 > 0.5"), "{}", stderr(&o));
    assert_eq!(phbeam(&["check-casimir", "broken.json"], dir.path()).status.code(), Some(2));
    assert_eq!(phbeam(&["check-casimir", "absent.json"], dir.path()).status.code(), Some(4));
    assert_eq!(phbeam(&["energy-report", "absent.csv"], dir.path()).status.code(), Some(4));
    // Nothing is left behind by failed runs.
    assert!(!dir.path().join("out").exists());
}

#[test]
fn check_casimir_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ok.json", COARSE);
    let o = phbeam(&["check-casimir", "ok.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).ends_with("verdict: PASS\n"));

    let k2 = COARSE.replacen(
        '{',
        r#"{"controller": {"preset": "example3", "overrides": {"k": [[2.0]]}},"#,
        1,
    );
    write(dir.path(), "k2.json", &k2);
    let o = phbeam(&["check-casimir", "k2.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("condition (b)") && text.contains("verdict: FAIL"), "{text}");
    let b_line = text.lines().find(|l| l.starts_with("condition (b)")).unwrap();
    assert!(b_line.ends_with("violated"));
}

#[test]
fn static_solve_prints_the_set_point() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", COARSE);
    let o = phbeam(&["static-solve", "c.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let get = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line.split(" = ").nth(1).unwrap().parse().unwrap()
    };
    assert!(get("u_s") < 0.0);
    assert!((get("x1_static") - get("x1_target")).abs() <= 1e-9 * get("x1_target").abs());
}

#[test]
fn default_config_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let o = phbeam(&["default-config"], dir.path());
    assert!(o.status.success());
    write(dir.path(), "d.json", &stdout(&o));
    assert_eq!(load_config(&dir.path().join("d.json")).unwrap(), ScenarioConfig::default());
}

fn valid_config() -> impl Strategy<Value = ScenarioConfig> {
    let beam = (0.1..10.0f64, 0.1..10.0f64, 0.0..10.0f64, 0.05..0.45f64, 0.05..0.45f64, 10.0..100.0f64).prop_map(
        |(ei, rho, theta_p, z_p, l_p, sigma)| BeamParams {
            ei,
            rho_a_beam: rho,
            theta_p,
            z_p,
            l_p,
            sigma,
            ..BeamParams::unit()
        },
    );
    let controller = prop_oneof![
        Just(ControllerConfig::None),
        (-1.0..1.0f64, -1.0..1.0f64, prop::option::of(0.1..5.0f64), prop::option::of(0.01..1.0f64)).prop_map(
            |(a, b, k, c1)| ControllerConfig::Example3 {
                a,
                b,
                overrides: GainOverrides {
                    k: k.map(|k| vec![vec![k]]),
                    c1,
                    ..GainOverrides::default()
                },
            }
        ),
    ];
    let initial = prop_oneof![
        Just(InitialConfig::Zero),
        (-2.0..2.0f64).prop_map(|factor| InitialConfig::ScaledStatic { factor }),
    ];
    (beam, controller, 201usize..1001, 1e-4..1e-2f64, 1.0..50.0f64, 1usize..500, initial).prop_map(
        |(beam, controller, nodes, dt, t_end, stride, initial)| {
            let initial = if controller == ControllerConfig::None { InitialConfig::Zero } else { initial };
            ScenarioConfig {
                beam,
                controller,
                grid: GridConfig { nodes },
                integrator: IntegratorConfig { dt, t_end, stride },
                initial,
                output_dir: None,
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn config_round_trip(cfg in valid_config()) {
        prop_assume!(cfg.validate().is_ok());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        write_config(&cfg, &path).unwrap();
        prop_assert_eq!(load_config(&path).unwrap(), cfg);
    }
}
