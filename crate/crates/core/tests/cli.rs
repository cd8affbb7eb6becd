use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

/// Runs the binary with its output root inside `root`.
fn sobirl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sobirl"))
        .args(args)
        .env("SOBIRL_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn config_arg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sobirl(tmp.path(), &["validate", &config_arg("loop1_msobirl.json")]).status.code(), Some(0));

    let bad = fs::read_to_string(configs().join("loop1_msobirl.json"))
        .unwrap()
        .replacen(r#""transitions": [[1.0]]}"#, r#""transitions": [[0.7]]}"#, 1);
    assert!(bad.contains("[[0.7]]"));
    let bad_path = tmp.path().join("bad.json");
    fs::write(&bad_path, bad).unwrap();
    let out = sobirl(tmp.path(), &["validate", bad_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("row (s=0,a=0)"), "{}", stderr(&out));

    let out = sobirl(tmp.path(), &["validate", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(tmp.path().join("junk.json"), "{\"mdp\": 3}").unwrap();
    assert_eq!(sobirl(tmp.path(), &["validate", tmp.path().join("junk.json").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    let tmp = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name == "canonical_constants.json" || name == "canonical_mdp.json" || name == "canonical_upper.json" {
            continue;
        }
        let out = sobirl(tmp.path(), &["validate", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{name}: {}", stderr(&out));
    }
}

fn metric_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn loop1_run_has_zero_gradients() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sobirl(tmp.path(), &["run", &config_arg("loop1_msobirl.json"), "--diagnostics"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let dir = tmp.path().join("loop1_msobirl/seed_0");
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("k,phi,grad_hat_norm2,grad_true_norm2,lower_residual,w_residual,eps_cert,wall_ms\n"));
    let rows = metric_rows(&csv);
    assert_eq!(rows.len(), 10);
    for row in &rows {
        assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
        assert!(row[7].is_empty());
    }
    let state: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("final_state.json")).unwrap()).unwrap();
    assert_eq!(state["k"], 10);
    assert_eq!(state["x"][0], 0.0);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["status"], "ok");
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for root in [a.path(), b.path()] {
        let out = sobirl(root, &["run", &config_arg("preference_sobirl.json"), "--seed", "4"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    for file in ["metrics.csv", "final_state.json"] {
        let pa = fs::read(a.path().join("preference_sobirl/seed_4").join(file)).unwrap();
        let pb = fs::read(b.path().join("preference_sobirl/seed_4").join(file)).unwrap();
        assert_eq!(pa, pb, "{file} differs");
    }
}

#[test]
fn seeds_make_distinct_runs_with_shared_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("canonical_sobirl.json")).unwrap()).unwrap();
    config["solver"]["K"] = 15.into();
    for key in ["mdp", "upper_mdp"] {
        let rel = config[key]["path"].as_str().unwrap().to_string();
        config[key]["path"] = configs().join(rel).to_string_lossy().into_owned().into();
    }
    let path = tmp.path().join("short.json");
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();

    let mut hashes = Vec::new();
    let mut metrics = Vec::new();
    for seed in 0..5 {
        let out = sobirl(tmp.path(), &["run", path.to_str().unwrap(), "--seed", &seed.to_string()]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let dir = tmp.path().join(format!("canonical_sobirl/seed_{seed}"));
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run_meta.json")).unwrap()).unwrap();
        assert_eq!(meta["seed"], seed);
        hashes.push(meta["config_hash"].as_str().unwrap().to_string());
        metrics.push(fs::read_to_string(dir.join("metrics.csv")).unwrap());
    }
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(metrics[i], metrics[j], "seeds {i} and {j}");
        }
    }
}

#[test]
fn solver_abort_flushes_partial_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("loop1_msobirl.json")).unwrap()).unwrap();
    // two self-loop actions; a large step pushes the reward past its declared bound
    config["reward_model"]["c_r"] = 1.5.into();
    for key in ["mdp", "upper_mdp"] {
        config[key]["n_actions"] = 2.into();
        config[key]["transitions"] = serde_json::json!([[1.0], [1.0]]);
    }
    config["upper_mdp"]["reward"] = serde_json::json!([1.0, 0.0]);
    config["solver"]["x0"] = serde_json::json!([1.0, 0.0]);
    config["solver"]["beta"] = 50.0.into();
    config["solver"]["K"] = 50.into();
    let path = tmp.path().join("abort.json");
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    let out = sobirl(tmp.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}{}", stdout(&out), stderr(&out));
    let dir = tmp.path().join("loop1_msobirl/seed_0");
    let rows = metric_rows(&fs::read_to_string(dir.join("metrics.csv")).unwrap());
    assert!(!rows.is_empty() && rows.len() < 50);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["status"], "aborted");
}

#[test]
fn verify_suites() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sobirl(tmp.path(), &["verify", "--suite", "contraction"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("contraction") && stdout(&out).contains("PASS"));
    assert!(tmp.path().join("verify_contraction_seed0.json").exists());

    let r1 = tmp.path().join("r1.json");
    let r2 = tmp.path().join("r2.json");
    for r in [&r1, &r2] {
        let out = sobirl(tmp.path(), &["verify", "--suite", "all", "--seed", "7", "--report", r.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r1).unwrap()).unwrap();
    assert_eq!(report["checks"].as_array().unwrap().len(), 6);

    let out = sobirl(tmp.path(), &["verify", "--suite", "fd", "--objective", "preference"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let table = stdout(&out);
    assert!(table.contains("rel_err"));
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 20);

    assert_eq!(sobirl(tmp.path(), &["verify", "--suite", "nonsense"]).status.code(), Some(2));
}

#[test]
fn constants_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sobirl(tmp.path(), &["constants", &config_arg("canonical_constants.json")]);
    assert_eq!(out.status.code(), Some(0));
    let table = stdout(&out);
    let value = |name: &str| -> f64 {
        let line = table.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        line.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!((value("L_pi") - 80.0).abs() < 1e-9);
    assert_eq!(value("N"), 100.0);
    assert!(!table.contains("FAIL"));
    assert_eq!(stdout(&sobirl(tmp.path(), &["constants", &config_arg("canonical_constants.json")])), table);

    let mut pc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("canonical_constants.json")).unwrap()).unwrap();
    pc["C_rx"] = 0.0.into();
    let path = tmp.path().join("flat.json");
    fs::write(&path, serde_json::to_string(&pc).unwrap()).unwrap();
    let flat = stdout(&sobirl(tmp.path(), &["constants", path.to_str().unwrap()]));
    for name in ["L_V", "L_pi"] {
        let line = flat.lines().find(|l| l.split_whitespace().next() == Some(name)).unwrap();
        assert_eq!(line.split_whitespace().nth(1).unwrap().parse::<f64>().unwrap(), 0.0);
    }

    pc["gamma"] = 1.5.into();
    fs::write(&path, serde_json::to_string(&pc).unwrap()).unwrap();
    assert_eq!(sobirl(tmp.path(), &["constants", path.to_str().unwrap()]).status.code(), Some(2));
}
