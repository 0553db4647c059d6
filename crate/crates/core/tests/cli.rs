use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_FIG: &str = r#"
experiment = "fig-grad-vs-rounds"
seed = 4
trials = 2
sizes = [20, 30, 25]
dim = 5
rounds = 30
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedkernel"));
    c.env_remove("FEDKERNEL_OUT");
    c
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn list_shows_every_experiment() {
    let o = bin().arg("list").output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let ids: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(
        ids,
        [
            "fig-grad-vs-rounds",
            "fig-err-vs-rounds",
            "minibatch-sweep",
            "fg-vs-gamma",
            "fg-vs-subspace-r",
            "chebyshev-rate",
            "theory-check-suite"
        ]
    );
}

#[test]
fn missing_config_fails_and_names_the_path() {
    let o = bin()
        .args(["run", "--config", "/no/such/dir/exp.toml"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/no/such/dir/exp.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_experiment_lists_the_registry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"fig-9\"\n");
    let o = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("fig-9") && err.contains("chebyshev-rate"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"fig-grad-vs-rounds\"\nroundz = 3\n");
    let o = bin().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("roundz"), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_identical_output_trees() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_FIG);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin()
            .arg("run")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "plot-grad_norm.svg",
            "results.csv",
            "run-manifest.json",
            "run.log",
            "summary.csv"
        ]
    );
    for n in &names {
        assert_eq!(
            fs::read(a.join(n)).unwrap(),
            fs::read(b.join(n)).unwrap(),
            "{n} differs"
        );
    }

    // A different seed changes the numbers.
    let c = dir.path().join("c");
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "5", "--out"])
        .arg(&c)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_ne!(
        fs::read(a.join("results.csv")).unwrap(),
        fs::read(c.join("results.csv")).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "fig-grad-vs-rounds");
    assert_eq!(manifest["seed"], 4);
    assert!(!a.join(".lock").exists());
}

#[test]
fn results_have_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_FIG);
    let out = dir.path().join("run");
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "experiment",
            "algorithm",
            "local_steps",
            "batch_size",
            "x",
            "metric",
            "trial",
            "value"
        ]
    );
    // 4 algorithms x 2 trials x 31 rounds.
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4 * 2 * 31);
    for r in &rows {
        let v: f64 = r[7].parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
}

#[test]
fn environment_variable_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_FIG);
    let env_out = dir.path().join("from-env");
    let o = bin()
        .env("FEDKERNEL_OUT", &env_out)
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("results.csv").is_file());

    // The flag wins over the environment.
    let flag_out = dir.path().join("from-flag");
    let o = bin()
        .env("FEDKERNEL_OUT", &env_out)
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&flag_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_out.join("results.csv").is_file());
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_FIG);
    let out = dir.path().join("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("locked"), "{}", stderr(&o));
    assert!(!out.join("results.csv").exists());
}

#[test]
fn plot_renders_a_metric_from_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_FIG);
    let out = dir.path().join("run");
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());

    let svg = dir.path().join("g.svg");
    let o = bin()
        .arg("plot")
        .arg("--results")
        .arg(out.join("results.csv"))
        .args(["--metric", "grad_norm", "--log-y", "--x-label", "round", "--out"])
        .arg(&svg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") || text.starts_with("<?xml"));
    assert_eq!(text.matches("<polyline").count(), 4);

    let o = bin()
        .arg("plot")
        .arg("--results")
        .arg(out.join("summary.csv"))
        .args(["--metric", "no_such_metric"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_metric"), "{}", stderr(&o));
}

#[test]
fn dataset_dump_is_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL_FIG}dump_datasets = true\n"));
    let out = dir.path().join("run");
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = fs::read_dir(out.join("datasets"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let back = fedkernel::datagen::read_dataset(&ds).unwrap();
    assert_eq!(back.sizes(), vec![20, 30, 25]);
}
