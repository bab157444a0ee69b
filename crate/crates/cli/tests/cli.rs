use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fwn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwn"))
        .args(args)
        .current_dir(dir)
        .env_remove("FWN_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn reports(path: &Path) -> Vec<serde_json::Value> {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_one_row_per_path_and_node() {
    let dir = tempfile::tempdir().unwrap();
    let o = fwn(
        &[
            "gen",
            "--hurst",
            "0.75",
            "--T",
            "1",
            "--n",
            "1025",
            "--paths",
            "1000",
            "--method",
            "circulant",
            "--seed",
            "42",
            "--out",
            "p.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,node,t,b,bh"));
    assert_eq!(lines.count(), 1000 * 1025);
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn gen_binary_has_header_and_payload() {
    let dir = tempfile::tempdir().unwrap();
    let o = fwn(
        &[
            "gen",
            "--n",
            "65",
            "--paths",
            "7",
            "--method",
            "m_synthesis",
            "--format",
            "bin",
            "--out",
            "p.bin",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let bytes = fs::read(dir.path().join("p.bin")).unwrap();
    assert_eq!(&bytes[..4], b"FWN1");
    assert_eq!(bytes.len(), 32 + 7 * 2 * 65 * 8);
}

#[test]
fn l2_bound_report_carries_the_bound_constant() {
    let dir = tempfile::tempdir().unwrap();
    let o = fwn(
        &[
            "verify",
            "--experiment",
            "l2_bound",
            "--hurst",
            "0.75",
            "--seed",
            "7",
            "--paths",
            "4000",
            "--n",
            "257",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = reports(&dir.path().join("r.json"));
    let at_one = r
        .iter()
        .find(|x| x["case"] == "const:1" && x["t"] == 1.0)
        .expect("constant integrand at t = 1");
    assert!((at_one["target"].as_f64().unwrap() - 1.9652).abs() < 1e-4);
    assert!(r.iter().all(|x| x["seed"] == 7 && x["pass"] == true));
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&fwn(&["verify", "--experiment", "nosuch"], dir.path())),
        2
    );
    assert_eq!(code(&fwn(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&fwn(&["gen", "--n", "1000"], dir.path())), 2);
}

#[test]
fn spec_files_are_validated_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, body: &str| fs::write(dir.path().join(name), body).unwrap();
    write(
        "ok.json",
        r#"{"alpha":"zero","beta":"zero","sigma":"const:1","Z":"normal:0,1","T":1,"D":0,"C":1}"#,
    );
    write(
        "linear.json",
        r#"{"alpha":"linear:a=-1","beta":"zero","sigma":"const:1","Z":"normal:1,1","T":1,"D":1,"C":2}"#,
    );
    write(
        "bad.json",
        r#"{"alpha":"linear:a=-1","beta":"zero","sigma":"const:1","Z":"normal:1,1","T":1,"D":0,"C":2}"#,
    );
    write(
        "unknown.json",
        r#"{"alpha":"tanh","beta":"zero","sigma":"const:1","Z":"normal:1,1","T":1,"D":1,"C":2}"#,
    );
    write(
        "missing.json",
        r#"{"alpha":"zero","beta":"zero","sigma":"const:1","T":1,"D":1,"C":2}"#,
    );
    for ok in ["ok.json", "linear.json"] {
        let o = fwn(
            &[
                "solve", "--spec", ok, "--n", "65", "--paths", "50", "--out", "x.csv",
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{ok}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for bad in ["bad.json", "unknown.json", "missing.json", "absent.json"] {
        assert_eq!(
            code(&fwn(&["solve", "--spec", bad], dir.path())),
            2,
            "{bad}"
        );
    }
}

#[test]
fn solve_writes_paths_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.json"),
        r#"{"alpha":"linear:a=-1","beta":"zero","sigma":"const:1","Z":"normal:1,1","T":1,"D":1,"C":2}"#,
    )
    .unwrap();
    let o = fwn(
        &[
            "solve", "--spec", "s.json", "--n", "129", "--paths", "100", "--out", "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(dir.path().join("x.csv")).unwrap();
    assert!(csv.starts_with("path,node,t,x\n"));
    assert_eq!(csv.lines().count(), 1 + 100 * 129);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("x.json")).unwrap()).unwrap();
    assert_eq!(side["spec"]["alpha"], "linear:a=-1");
    assert_eq!(side["converged"], true);
    assert!(side["residual"].as_f64().unwrap() < 1e-4);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "verify",
        "--experiment",
        "zero_mean",
        "--paths",
        "3000",
        "--n",
        "129",
        "--seed",
        "3",
    ];
    let mut outputs = Vec::new();
    for (threads, file) in [("1", "a.json"), ("3", "b.json"), ("0", "c.json")] {
        let mut args = base.to_vec();
        args.extend(["--threads", threads, "--out", file]);
        assert_eq!(code(&fwn(&args, dir.path())), 0);
        outputs.push(fs::read(dir.path().join(file)).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn flags_override_config_and_environment_supplies_seed() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"seed": 5, "paths": 500, "n": 65, "hurst": 0.6}"#,
    )
    .unwrap();
    let base = [
        "verify",
        "--experiment",
        "calibration",
        "--config",
        "cfg.json",
    ];
    let run = |extra: &[&str], env_seed: Option<&str>, out: &str| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fwn"));
        cmd.args(base)
            .args(extra)
            .args(["--out", out])
            .current_dir(dir.path())
            .env_remove("FWN_SEED");
        if let Some(s) = env_seed {
            cmd.env("FWN_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        reports(&dir.path().join(out))[0].clone()
    };
    let r = run(&[], None, "a.json");
    assert_eq!(r["seed"], 5);
    assert_eq!(r["hurst"], 0.6);
    assert_eq!(r["nodes"], 65);
    assert_eq!(
        run(&["--seed", "9", "--hurst", "0.7"], None, "b.json")["seed"],
        9
    );
    assert_eq!(run(&[], Some("11"), "c.json")["seed"], 11);
    assert_eq!(run(&["--seed", "2"], Some("11"), "d.json")["seed"], 2);
}

#[test]
fn report_summarizes_and_propagates_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = fwn(
        &["verify", "--experiment", "calibration", "--out", "r.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let o = fwn(&["report", "r.json"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS"));
    let mut r = reports(&dir.path().join("r.json"));
    r[0]["verdict"] = "fail".into();
    r[0]["pass"] = false.into();
    fs::write(
        dir.path().join("f.json"),
        serde_json::to_string(&r).unwrap(),
    )
    .unwrap();
    assert_eq!(code(&fwn(&["report", "f.json"], dir.path())), 1);
}

#[test]
fn csv_reports_are_flat() {
    let dir = tempfile::tempdir().unwrap();
    let o = fwn(
        &["verify", "--experiment", "calibration", "--format", "csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("name,H,estimate,se,target,mode,pass,seed,"));
    assert_eq!(text.lines().count(), 2);
}
