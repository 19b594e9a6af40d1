use std::fs;
use std::process::{Command, Output};

fn soc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soc")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL_TREE: &[&str] = &["tree", "--grid", "2,3,4", "--replications", "6", "--points", "40"];

#[test]
fn tree_csv_is_byte_identical_on_seed_reuse() {
    let a = stdout(&soc(SMALL_TREE));
    let b = stdout(&soc(SMALL_TREE));
    assert_eq!(a, b);
    assert!(a.contains("\nmethod,param_name,param_value,t,bias_sq,variance,mse,R,P,excluded,seed\n"));
    assert!(a.contains("\ntree,n_b,3,2,"));
    let mut other = SMALL_TREE.to_vec();
    other.extend(["--seed", "5"]);
    assert_ne!(a, stdout(&soc(&other)));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("particle.toml");
    fs::write(&config, "grid = [9, 27, 81]\nreplications = 3\npoints = 30\ntol = \"2/N\"\nseed = 11\n").unwrap();
    let out = dir.path().join("particle.csv");
    let o = soc(&["particle", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--points", "25"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.contains("# method = \"particle\""));
    assert!(csv.contains("# points = 25"));
    assert!(csv.contains("# seed = 11"));
    assert!(csv.contains("\nparticle,N,81,3,"));
    assert!(csv.contains("# N variance rate t=0"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("particle variance slope t=0"));

    // the echoed config reproduces the run
    let echo: String = csv.lines().take_while(|l| l.starts_with("# ")).map(|l| format!("{}\n", &l[2..])).collect();
    let replay = dir.path().join("replay.toml");
    fs::write(&replay, echo).unwrap();
    fs::remove_file(&out).unwrap();
    assert!(soc(&["particle", "--config", replay.to_str().unwrap()]).status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), csv);
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "grid = [2]\nbranching = 3\n").unwrap();
    let o = soc(&["tree", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    fs::write(&config, "method = \"particle\"\n").unwrap();
    assert_eq!(soc(&["tree", "--config", config.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(soc(&["tree", "--grid", "0"]).status.code(), Some(2));
    assert_eq!(soc(&["tree", "--config", "/nonexistent/x.toml"]).status.code(), Some(2));
}

#[test]
fn over_budget_values_are_reported() {
    let o = soc(&["tree", "--grid", "2,3,40", "--replications", "2", "--points", "5"]);
    let csv = stdout(&o);
    assert!(csv.contains("# skipped n_b=40:"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tree skipped 40"));
}

#[test]
fn compare_rekeys_trees() {
    let args = [
        "compare",
        "--tree-grid",
        "2,3,4",
        "--particle-grid",
        "27,81,243",
        "--replications",
        "3",
        "--points",
        "20",
    ];
    let a = stdout(&soc(&args));
    assert!(a.contains("\ntree,N,243,0,"));
    assert!(a.contains("\ntree,N,32,3,"));
    assert!(a.contains("\nparticle,N,243,1,"));
    assert!(a.contains("# tree.seed = "));
    assert!(a.contains("# particle.seed = "));
    assert_eq!(a, stdout(&soc(&args)));
}

#[test]
fn compare_rejects_mismatched_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tree.toml");
    fs::write(&config, "epsilon = 0.5\n").unwrap();
    let o = soc(&["compare", "--tree-config", config.to_str().unwrap(), "--replications", "2", "--points", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("benchmarks differ"));
}

#[test]
fn validate_reports_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("checks.csv");
    let o = soc(&["validate", "--horizon", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.lines().all(|l| l.starts_with("PASS ")));
    assert!(stderr.contains("closed_form_vs_grid_dp"));
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), stderr.lines().count() + 1);
}

#[test]
fn help_lists_subcommands() {
    let help = stdout(&soc(&["--help"]));
    for sub in ["tree", "particle", "compare", "validate"] {
        assert!(help.contains(sub));
    }
}
