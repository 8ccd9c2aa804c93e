use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[geometry]
m = 2
n_x = 3

[channel]
model = "geometric"

[sweep]
snr_db = [0.0, 10.0]

[mc]
trials = 4
seed = 1
"#;

fn ris_sim(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ris-sim"))
        .args(&args[..1])
        .arg(config)
        .args(&args[1..])
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn sweep_writes_csv_and_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let out = dir.path().join("r.csv");
    let run = ris_sim(&["crb-sweep", "--out", out.to_str().unwrap()], &cfg);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sweep_var,value,model,mean_diag_db,mse_db,realizations,skipped"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1][2], "crb_structured");
    assert_eq!(rows[1][4], "NaN");
    // 17 significant digits round-trip
    let v: f64 = rows[0][3].parse().unwrap();
    assert_eq!(format!("{v:.16e}"), rows[0][3]);
    let echo = std::fs::read_to_string(dir.path().join("r.csv.config.toml")).unwrap();
    assert!(echo.contains("trials = 4") && echo.contains("points_1d = 256"));
}

#[test]
fn seed_flag_overrides_and_changes_draws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let a = ris_sim(&["crb-sweep"], &cfg);
    let b = ris_sim(&["crb-sweep", "--seed", "2"], &cfg);
    let c = ris_sim(&["crb-sweep", "--seed", "1"], &cfg);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);

    let unseeded = write(dir.path(), "u.toml", &BASE.replace("seed = 1\n", ""));
    assert_eq!(ris_sim(&["crb-sweep"], &unseeded).status.code(), Some(2));
    assert!(ris_sim(&["crb-sweep", "--seed", "9"], &unseeded).status.success());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let two = write(dir.path(), "two.toml", &BASE.replace("snr_db = [0.0, 10.0]", "snr_db = [0.0]\nt = [8]"));
    let run = ris_sim(&["crb-sweep"], &two);
    assert_eq!(run.status.code(), Some(2));
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("snr_db") && err.contains("t"), "{err}");

    let typo = write(dir.path(), "typo.toml", &BASE.replace("trials", "trails"));
    assert_eq!(ris_sim(&["mc-mse"], &typo).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(ris_sim(&["synth"], &missing).status.code(), Some(2));
    let odd_t = write(dir.path(), "odd.toml", &BASE.replace("[sweep]", "[training]\nt = 0\n\n[sweep]"));
    assert_eq!(ris_sim(&["crb-sweep"], &odd_t).status.code(), Some(2));
}

#[test]
fn all_skipped_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // two RIS states for four unknowns: LS is never identifiable
    let text = BASE
        .replace("\"geometric\"", "\"unstructured\"")
        .replace("[sweep]", "[training]\nt = 2\n\n[sweep]");
    let cfg = write(dir.path(), "s.toml", &text);
    let run = ris_sim(&["mc-mse"], &cfg);
    assert_eq!(run.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&run.stderr).contains(",0,4"));
}

#[test]
fn synth_dumps_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BASE);
    let out = dir.path().join("s.json");
    let run = ris_sim(&["synth", "--out", out.to_str().unwrap()], &cfg);
    assert!(run.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["composite"].as_array().unwrap().len(), 2 * 3);
    assert_eq!(v["plan"]["psi"].as_array().unwrap().len(), 4);
    assert!(v["params"]["w_bh"].is_array());
}

#[test]
fn mc_mse_reports_each_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("seed = 1", "seed = 1\nestimators = [\"ls\", \"lmmse\", \"decoupled\"]");
    let cfg = write(dir.path(), "m.toml", &text);
    let run = ris_sim(&["mc-mse", "--threads", "2"], &cfg);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = String::from_utf8(run.stdout).unwrap();
    let models: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(models, ["ls", "lmmse", "decoupled", "ls", "lmmse", "decoupled"]);
}
