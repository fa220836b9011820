use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use stochflow_cli::{parse_config, run, validate, Outcome, RunOptions, Status};

const FOUR_MODE: &str = r#"
dim = 2
stokes_weak_condition = true
table = [ { k = [1, 0], q = 1.0 }, { k = [-1, 0], q = 1.0 }, { k = [0, 1], q = 1.0 }, { k = [0, -1], q = 1.0 } ]
"#;

fn lyapunov_toml(dir: &Path, checkpoint_every: usize, seed: u64) -> String {
    format!(
        r#"
seed = {seed}
[output]
dir = "{}"
checkpoint_every = {checkpoint_every}
[experiment.lyapunov]
horizon = 10.0
transient = 1.0
n_traj = 6
n_batches = 10
n_directions = 4
[experiment.lyapunov.fluid]
variant = "stokes"
dim = 2
dt = 0.02
[experiment.lyapunov.fluid.forcing]
{FOUR_MODE}
"#,
        dir.display()
    )
}

fn simulate_toml(dir: &Path, checkpoint_every: usize) -> String {
    format!(
        r#"
seed = 11
[output]
dir = "{}"
checkpoint_every = {checkpoint_every}
[experiment.simulate]
horizon = 2.0
n_traj = 2
record_every = 0.1
[experiment.simulate.fluid]
variant = "galerkin_nse"
dim = 2
nu = 0.5
cutoff = 3
dt = 0.01
[experiment.simulate.fluid.forcing]
{FOUR_MODE}
"#,
        dir.display()
    )
}

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stochflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn same_seed_gives_identical_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outs = vec![];
    for run_id in ["a", "b"] {
        let out = tmp.path().join(run_id);
        let cfg = write(tmp.path(), "ly.toml", &lyapunov_toml(&out, 0, 5));
        let o = bin(&["run", &cfg]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(read(out.join("summary.json")));
    }
    assert_eq!(outs[0], outs[1]);
    let manifest: Value = serde_json::from_str(&read(tmp.path().join("a/manifest.json"))).unwrap();
    assert_eq!(manifest["kind"], "lyapunov");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outs = vec![];
    for threads in ["1", "3"] {
        let out = tmp.path().join(threads);
        let cfg = write(tmp.path(), "ly.toml", &lyapunov_toml(&out, 0, 9));
        let o = bin(&["lyapunov", "--config", &cfg, "--threads", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(read(out.join("summary.json")));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ly.toml", &lyapunov_toml(&tmp.path().join("x"), 0, 5));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    bin(&["run", &cfg, "--out", a.to_str().unwrap()]);
    bin(&["run", &cfg, "--out", b.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(read(a.join("summary.json")), read(b.join("summary.json")));
}

#[test]
fn missing_field_is_named() {
    let text = lyapunov_toml(Path::new("/tmp/unused"), 0, 1).replace("horizon = 10.0\n", "");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("horizon"), "{err}");
    assert!(err.contains("experiment.lyapunov"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &text);
    let o = bin(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("horizon"));
}

#[test]
fn wrong_type_reports_path() {
    let text = lyapunov_toml(Path::new("/tmp/unused"), 0, 1).replace("n_traj = 6", "n_traj = \"six\"");
    let err = parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("experiment.lyapunov.n_traj"), "{err}");
}

#[test]
fn subcommand_must_match_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ly.toml", &lyapunov_toml(&tmp.path().join("o"), 0, 1));
    let o = bin(&["scalar", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("lyapunov"));
}

#[test]
fn lyapunov_resume_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    let cfg_full = parse_config(&lyapunov_toml(&full, 2, 4)).unwrap();
    let cfg_part = parse_config(&lyapunov_toml(&part, 2, 4)).unwrap();
    assert_eq!(run(&cfg_full, &RunOptions::default()).unwrap().outcome, Outcome::Completed);
    let halted = run(
        &cfg_part,
        &RunOptions {
            resume: false,
            halt_after: Some(1),
        },
    )
    .unwrap();
    assert_eq!(halted.outcome, Outcome::Interrupted);
    assert!(part.join("checkpoint.json").exists());
    let resumed = run(
        &cfg_part,
        &RunOptions {
            resume: true,
            halt_after: None,
        },
    )
    .unwrap();
    assert!(resumed.manifest.resumed);
    assert_eq!(read(full.join("summary.json")), read(part.join("summary.json")));
    assert!(!part.join("checkpoint.json").exists());
}

#[test]
fn simulate_resume_mid_horizon_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    let f = write(tmp.path(), "full.toml", &simulate_toml(&full, 0));
    let p = write(tmp.path(), "part.toml", &simulate_toml(&part, 7));
    assert!(bin(&["simulate", &f]).status.success());
    // the second checkpoint falls inside the first trajectory's horizon
    let o = bin(&["simulate", &p, "--halt-after", "2"]);
    assert_eq!(o.status.code(), Some(3));
    let o = bin(&["simulate", &p, "--resume"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(full.join("series.csv")), read(part.join("series.csv")));
    assert_eq!(read(full.join("summary.json")), read(part.join("summary.json")));
}

#[test]
fn checkpoint_from_other_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let a = parse_config(&lyapunov_toml(&out, 2, 4)).unwrap();
    let b = parse_config(&lyapunov_toml(&out, 2, 5)).unwrap();
    let halt = RunOptions {
        resume: false,
        halt_after: Some(1),
    };
    assert_eq!(run(&a, &halt).unwrap().outcome, Outcome::Interrupted);
    let resume = RunOptions {
        resume: true,
        halt_after: None,
    };
    let err = run(&b, &resume).err().expect("mismatch refused").to_string();
    assert!(err.contains("refusing"), "{err}");
}

fn validate_text(forcing: &str, dt: f64) -> stochflow_cli::ValidationReport {
    let text = format!(
        r#"
[experiment.lyapunov]
horizon = 10.0
n_traj = 2
[experiment.lyapunov.fluid]
variant = "stokes"
dim = 2
dt = {dt}
[experiment.lyapunov.fluid.forcing]
{forcing}
"#
    );
    validate(&parse_config(&text).unwrap())
}

#[test]
fn validate_lists_missing_low_modes() {
    let forcing = r#"
dim = 2
assumption_low_modes = true
table = [ { k = [1, 0], q = 1.0 }, { k = [-1, 0], q = 1.0 } ]
"#;
    let rep = validate_text(forcing, 0.01);
    assert_eq!(rep.status, Status::Fail);
    let msg = &rep.checks.iter().find(|c| c.status == Status::Fail).unwrap().message;
    assert!(msg.contains("[0, 1]"), "{msg}");
}

#[test]
fn validate_accepts_minimal_stokes_set() {
    let rep = validate_text(FOUR_MODE, 0.01);
    assert_eq!(rep.status, Status::Pass, "{rep:?}");
}

#[test]
fn validate_warns_on_large_dt() {
    let rep = validate_text(FOUR_MODE, 1.0);
    assert_eq!(rep.status, Status::Warn);
    let c = rep.checks.iter().find(|c| c.name == "dt").unwrap();
    assert!(c.message.contains("bound"), "{}", c.message);
}

#[test]
fn validate_warns_without_low_mode_hypothesis() {
    let forcing = "dim = 2\ntable = [ { k = [1, 0], q = 1.0 }, { k = [-1, 0], q = 1.0 }, { k = [0, 1], q = 1.0 }, { k = [0, -1], q = 1.0 } ]\n";
    let rep = validate_text(forcing, 0.01);
    assert!(rep.checks.iter().any(|c| c.name == "hypothesis" && c.status == Status::Warn));
}

#[test]
fn control_demo_from_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = bin(&[
        "control-demo",
        "--x0",
        "0.5,1.0",
        "--v0",
        "1,0",
        "--x1",
        "4.0,-2.0",
        "--v1",
        "0.6,0.8",
        "--growth",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: Value = serde_json::from_str(&read(out.join("summary.json"))).unwrap();
    assert!(s["error"]["x_error"].as_f64().unwrap() < 1e-6);
    assert!(s["error"]["v_error"].as_f64().unwrap() < 1e-6);
    assert!(s["pde_residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(s["jacobian_growth"][0]["passed"], true);
    assert!(!s["plan"]["phases"].as_array().unwrap().is_empty());
}

#[test]
fn hormander_check_detects_removed_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("h");
    let text = format!(
        r#"
[output]
dir = "{}"
[experiment.hormander]
dim = 2
target = "projective"
samples = 50
remove = [[0, 1], [0, -1]]
"#,
        out.display()
    );
    let cfg = write(tmp.path(), "h.toml", &text);
    assert!(bin(&["hormander-check", &cfg]).status.success());
    let s: Value = serde_json::from_str(&read(out.join("summary.json"))).unwrap();
    assert_eq!(s["verdict"], "fail");
    assert!(!s["failures"][0]["null_directions"].as_array().unwrap().is_empty());
}

fn scalar_run_toml() -> String {
    format!(
        r#"
kappa = 0.05
cutoff = 8
burn_in = 5.0
horizon = 20.0
sample_every = 5
snapshot_every = 1.0
[fluid]
variant = "stokes"
dim = 2
dt = 0.05
[fluid.forcing]
{FOUR_MODE}
[source]
dim = 2
table = [ {{ k = [1, 0], q = 1.0 }}, {{ k = [-1, 0], q = 1.0 }} ]
"#
    )
}

/// Nest a standalone table body under `prefix`.
fn nest(body: &str, prefix: &str) -> String {
    body.lines()
        .map(|l| match l.strip_prefix('[') {
            Some(rest) => format!("[{prefix}.{rest}"),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn scalar_and_yaglom_runs_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("s");
    let text = format!(
        "[output]\ndir = \"{}\"\n[experiment.scalar.run]\n{}",
        sc.display(),
        nest(&scalar_run_toml(), "experiment.scalar.run")
    );
    let cfg = write(tmp.path(), "s.toml", &text);
    let o = bin(&["scalar", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(sc.join("series.csv")).starts_with("t,g_norm_sq,dissipation"));

    let y = tmp.path().join("y");
    let text = format!(
        "[output]\ndir = \"{}\"\n[experiment.yaglom]\nstore_snapshots = true\n[experiment.yaglom.analysis]\nn_ell = 12\n[experiment.yaglom.run]\n{}",
        y.display(),
        nest(&scalar_run_toml(), "experiment.yaglom.run")
    );
    let cfg = write(tmp.path(), "y.toml", &text);
    let o = bin(&["yaglom", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(y.join("yaglom_0.csv"));
    assert!(csv.starts_with("ell,d_bar,d_bar_se,g_bar,g_bar_se,a_bar,compensated"));
    assert_eq!(csv.lines().count(), 13);

    // reanalysing the stored snapshots reproduces the trend
    let y2 = tmp.path().join("y2");
    let text2 = text.replace(&y.display().to_string(), &y2.display().to_string()).replace(
        "store_snapshots = true",
        &format!("snapshots_from = \"{}\"", y.join("snapshots.jsonl").display()),
    );
    let cfg2 = write(tmp.path(), "y2.toml", &text2);
    let o = bin(&["yaglom", &cfg2]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: Value = serde_json::from_str(&read(y.join("summary.json"))).unwrap();
    let b: Value = serde_json::from_str(&read(y2.join("summary.json"))).unwrap();
    assert_eq!(a["trend"], b["trend"]);
}
