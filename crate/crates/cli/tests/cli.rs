use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn metasaem(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasaem")).args(args).current_dir(cwd).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const FIRST_ORDER: &str = "schema_version = 1\nseed = 5\n[scenario]\npreset = \"first_order\"\n";

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_writes_a_deterministic_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", FIRST_ORDER);
    let o = metasaem(&["--config", &cfg, "--out-dir", "a", "simulate"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = metasaem(&["--config", &cfg, "--out-dir", "b", "simulate"], dir.path());
    assert!(o.status.success());
    let a = fs::read(dir.path().join("a/data.csv")).unwrap();
    let b = fs::read(dir.path().join("b/data.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 36 * 9 + 1);
    assert!(text.starts_with("id,time,y\n"));
    assert!(dir.path().join("a/simulate.log").exists());
}

#[test]
fn schema_errors_exit_with_code_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{FIRST_ORDER}[simulate]\nn_individuals = 0\n"));
    let o = metasaem(&["--config", &cfg, "simulate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("simulate.n_individuals"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "d.toml", &format!("{FIRST_ORDER}[saem]\nk_iter = 10\n"));
    let o = metasaem(&["--config", &cfg, "simulate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("saem"), "{}", stderr(&o));

    let o = metasaem(&["simulate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn emulate_reports_solver_calls_and_rejects_duplicate_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "mm.toml",
        "schema_version = 1\n[scenario]\npreset = \"michaelis_menten\"\n[design]\nn_design = 25\n",
    );
    let o = metasaem(&["--config", &cfg, "emulate"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("emulator_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 10);
    assert!(report.lines().skip(1).all(|l| l.ends_with(",25")));
    assert!(dir.path().join("bank.json").exists());

    let dup = write_config(
        dir.path(),
        "dup.toml",
        "schema_version = 1\n[scenario]\npreset = \"michaelis_menten\"\n[design]\npoints = [[2.0, 1.0, -1.0], [2.5, 0.5, -0.5], [2.0, 1.0, -1.0], [3.0, 1.5, -0.8], [1.8, 2.0, -1.2]]\n",
    );
    let o = metasaem(&["--config", &dup, "--out-dir", "dup", "emulate"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn meta_fit_without_bank_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", FIRST_ORDER);
    assert!(metasaem(&["--config", &cfg, "simulate"], dir.path()).status.success());
    let o = metasaem(&["--config", &cfg, "fit", "--data", "data.csv", "--variant", "simple"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bank"), "{}", stderr(&o));
}

#[test]
fn simulate_then_fit_recovers_the_means() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", FIRST_ORDER);
    assert!(metasaem(&["--config", &cfg, "simulate"], dir.path()).status.success());
    let o = metasaem(&["--config", &cfg, "fit", "--data", "data.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit_exact.json")).unwrap()).unwrap();
    let truth = [-2.52, 0.4, -3.22];
    for (k, t) in truth.iter().enumerate() {
        let est = report["estimates"][k].as_f64().unwrap();
        let se = report["std_errors"][k].as_f64().unwrap();
        assert!((est - t).abs() < 3.0 * se, "mu_{} = {est} (se {se}), truth {t}", k + 1);
    }
    let traj = fs::read_to_string(dir.path().join("trajectory_exact.csv")).unwrap();
    assert!(traj.starts_with("iter,mu_1,mu_2,mu_3,omega_11,"));
    assert_eq!(traj.lines().count(), 102);
}

#[test]
fn complete_fit_warns_about_cost() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{FIRST_ORDER}[simulate]\nn_individuals = 6\n[design]\nn_design = 20\n[saem]\nk_iters = 4\nburn_in = 2\nm_mcmc = 2\nfisher_iters = 1\n"),
    );
    assert!(metasaem(&["--config", &cfg, "simulate"], dir.path()).status.success());
    assert!(metasaem(&["--config", &cfg, "emulate"], dir.path()).status.success());
    let o = metasaem(&["--config", &cfg, "fit", "--data", "data.csv", "--variant", "complete", "--bank", "bank.json"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    assert!(dir.path().join("fit_complete.json").exists());
}

#[test]
fn bench_dry_run_and_single_replication() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", FIRST_ORDER);
    let o = metasaem(&["--config", &cfg, "--dry-run", "bench", "--replications", "3", "--variants", "exact,simple:50"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let plan = String::from_utf8_lossy(&o.stdout);
    assert!(plan.contains("replications  3") && plan.contains("simple (n_D=50)"), "{plan}");
    assert!(!dir.path().join("study.csv").exists());

    let o = metasaem(&["--config", &cfg, "bench", "--replications", "1", "--variants", "exact"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("study.csv")).unwrap();
    assert!(csv.starts_with("parameter,variant,n_design,bias_pct,rmse_pct,coverage_pct\n"));
    assert_eq!(csv.lines().count(), 1 + 7);
    let md = fs::read_to_string(dir.path().join("study.md")).unwrap();
    assert!(md.starts_with("| parameter | exact |"));
    assert!(dir.path().join("study.json").exists());

    let o = metasaem(&["--config", &cfg, "bench", "--replications", "1", "--variants", "simple"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
