use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn torlamp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_torlamp"))
        .args(args)
        .env_remove("TORLAMP_OUT_DIR")
        .output()
        .expect("spawn torlamp")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = torlamp(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
name = tiny
features = 0,1,2,3,183
profile.0.combo = Downloader
profile.0.count = 40
profile.0.background = 50,15
profile.0.signal.183 = 10,1
profile.1.combo = Ransomware
profile.1.count = 30
profile.1.background = 50,15
profile.1.signal.183 = 30,2
profile.2.combo = Ransomware|Spyware
profile.2.count = 10
profile.2.background = 50,15
profile.2.signal.1 = 90,2
";

/// A small custom corpus at `dir/tiny.csv`.
fn tiny(dir: &Path) -> PathBuf {
    let cfg = dir.join("gen.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let csv = dir.join("tiny.csv");
    ok(&["gen-data", "--profile", "custom", "--config", p(&cfg), "--seed", "3", "--out", p(&csv)]);
    csv
}

#[test]
fn double_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "2")] {
        let d = dir.path().join(run);
        let data = d.join("d5.csv");
        ok(&["gen-data", "--seed", "4", "--out", p(&data)]);
        ok(&["split", "--data", p(&data), "--out", p(&d.join("split"))]);
        let train = d.join("split/train.csv");
        let model = d.join("br.model");
        ok(&["--threads", threads, "train", "--model", "br", "--trees", "5", "--train", p(&train), "--out", p(&model)]);
        let lamp = d.join("lamp.model");
        ok(&[
            "--threads", threads, "train", "--model", "lamp", "--train", p(&train), "--epochs", "1", "--d-model", "8",
            "--d-hidden", "8", "--heads", "2", "--out", p(&lamp),
        ]);
        ok(&["evaluate", "--model", p(&model), "--test", p(&d.join("split/test.csv")), "--out", p(&d.join("eval"))]);
        let files = ["d5.csv", "split/train.csv", "split/test.csv", "br.model", "lamp.model", "lamp.model.loss.csv", "eval/summary.csv", "eval/classwise.csv", "eval/predictions.csv"];
        outputs.push(files.map(|f| std::fs::read(d.join(f)).unwrap()));
    }
    assert!(outputs[0] == outputs[1], "outputs differ between identical runs");
}

#[test]
fn custom_profile_and_config_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let csv = tiny(dir.path());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "feature_000,feature_001,feature_002,feature_003,feature_183,labels");
    assert_eq!(text.lines().count(), 81);
    let run = std::fs::read_to_string(dir.path().join("tiny.csv.run.cfg")).unwrap();
    assert!(run.contains("seed = 3\n") && run.contains("profile.2.combo = Ransomware|Spyware\n"));

    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, format!("model = br\ntrain = {}\ntrees = 4\nseed = 9\n", p(&csv))).unwrap();
    let model = dir.path().join("m.model");
    ok(&["--config", p(&cfg), "train", "--seed", "2", "--out", p(&model)]);
    let resolved = std::fs::read_to_string(dir.path().join("m.model.run.cfg")).unwrap();
    assert!(resolved.contains("seed = 2\n"), "{resolved}");
    assert!(resolved.contains("trees = 4\n"), "{resolved}");
    assert!(!resolved.contains("epochs"), "{resolved}");
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_torlamp"))
        .args(["gen-data", "--seed", "1"])
        .env("TORLAMP_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("data.csv").exists());
    assert_eq!(code(&torlamp(&["gen-data"])), 2);
}

#[test]
fn explain_exact_and_its_limit() {
    let dir = tempfile::tempdir().unwrap();
    let csv = tiny(dir.path());
    let model = dir.path().join("m.model");
    ok(&["train", "--model", "br", "--trees", "10", "--train", p(&csv), "--out", p(&model)]);
    let exp = dir.path().join("exp");
    ok(&[
        "explain", "--model", p(&model), "--data", p(&csv), "--estimator", "exact", "--samples", "5", "--labels",
        "Downloader|Ransomware", "--out", p(&exp),
    ]);
    let importance = std::fs::read_to_string(exp.join("importance_Ransomware.csv")).unwrap();
    assert!(importance.lines().nth(1).unwrap().starts_with("1,feature_183,"), "{importance}");
    assert!(exp.join("manifest.csv").exists() && exp.join("summary_Downloader.csv").exists());

    let wide = dir.path().join("d5.csv");
    ok(&["gen-data", "--out", p(&wide)]);
    let wide_model = dir.path().join("w.model");
    ok(&["train", "--model", "br", "--trees", "2", "--train", p(&wide), "--out", p(&wide_model)]);
    let out = torlamp(&["explain", "--model", p(&wide_model), "--data", p(&wide), "--estimator", "exact", "--out", p(&exp)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn attack_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d5.csv");
    ok(&["gen-data", "--out", p(&data)]);
    let split = dir.path().join("split");
    ok(&["split", "--data", p(&data), "--keep-labels", "Downloader|Grayware|Miner|Ransomware", "--out", p(&split)]);
    let models = dir.path().join("models");
    for m in ["br", "lp"] {
        ok(&["train", "--model", m, "--trees", "10", "--train", p(&split.join("train.csv")), "--out", p(&models.join(format!("{m}.model")))]);
    }
    let runs = dir.path().join("runs");
    ok(&["attack", "--models", p(&models), "--test", p(&split.join("test.csv")), "--out", p(&runs.join("attack"))]);
    let table = std::fs::read_to_string(runs.join("attack/evasion.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "class,BR_E1,BR_E2,BR_E3,LP_E1,LP_E2,LP_E3");
    assert_eq!(lines.len(), 5);
    let provenance = std::fs::read_to_string(runs.join("attack/evasion_provenance.cfg")).unwrap();
    assert!(provenance.contains("e2.feature_183 = ") && provenance.contains("e3.feature_16 = "));

    ok(&["evaluate", "--model", p(&models.join("br.model")), "--test", p(&split.join("test.csv")), "--out", p(&runs.join("br"))]);
    let report = dir.path().join("report");
    ok(&["report", "--runs", p(&runs), "--out", p(&report)]);
    let summary = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.starts_with("run,model,") && summary.contains("\nbr,BR,test,"));
    let long = std::fs::read_to_string(report.join("evasion.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 4 * 6);
}

#[test]
fn featurize_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("s.jsonl");
    let conn = r#"{"start":100.0,"duration":3.0,"pkts_sent":3,"pkts_recv":2,"bytes_sent":300,"bytes_recv":900,"dest_port":9001,"state":"established"}"#;
    let flow = r#"{"packets":[[0.0,"out"],[0.4,"in"],[1.2,"out"]]}"#;
    std::fs::write(
        &sessions,
        format!(
            "{{\"host_id\":\"a\",\"labels\":\"Miner\",\"connections\":[{conn}],\"flows\":[{flow}]}}\n\
             {{\"host_id\":\"b\",\"labels\":\"Backdoor|Virus\",\"connections\":[{conn},{conn}],\"dns_nxdomain\":2}}\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("features.csv");
    ok(&["featurize", "--sessions", p(&sessions), "--out", p(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].split(',').count(), 216);
    assert!(rows[1].ends_with(",Miner") && rows[2].ends_with(",Backdoor|Virus"));

    std::fs::write(&sessions, format!("{{\"host_id\":\"c\",\"connections\":[{conn}]}}\n")).unwrap();
    assert_eq!(code(&torlamp(&["featurize", "--sessions", p(&sessions), "--out", p(&out)])), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // Usage: unknown flag, missing argument, bad value, unknown config key.
    assert_eq!(code(&torlamp(&["train", "--bogus"])), 2);
    assert_eq!(code(&torlamp(&["train", "--model", "br", "--out", "x"])), 2);
    assert_eq!(code(&torlamp(&["train", "--model", "svm", "--train", "x", "--out", "x"])), 2);
    let cfg = d.join("bad.cfg");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(code(&torlamp(&["--config", p(&cfg), "split", "--data", "x", "--out", "y"])), 2);

    // Data: missing file, malformed cell.
    let model = d.join("m.model");
    assert_eq!(code(&torlamp(&["train", "--model", "br", "--train", p(&d.join("none.csv")), "--out", p(&model)])), 3);
    let bad = d.join("bad.csv");
    std::fs::write(&bad, "feature_000,labels\n1.0,Miner\nabc,Miner\n").unwrap();
    assert_eq!(code(&torlamp(&["train", "--model", "br", "--train", p(&bad), "--out", p(&model)])), 3);

    // Training: a single sample cannot grow a forest.
    let one = d.join("one.csv");
    std::fs::write(&one, "feature_000,labels\n1.0,Miner\n").unwrap();
    assert_eq!(code(&torlamp(&["train", "--model", "br", "--train", p(&one), "--out", p(&model)])), 4);

    // Schema mismatch: a model evaluated on differently laid-out data.
    let csv = tiny(d);
    ok(&["train", "--model", "br", "--trees", "3", "--train", p(&csv), "--out", p(&model)]);
    let other = d.join("other.csv");
    std::fs::write(&other, "feature_000,feature_001,labels\n1,2,Miner\n3,4,Worm\n").unwrap();
    assert_eq!(code(&torlamp(&["evaluate", "--model", p(&model), "--test", p(&other), "--out", p(&d.join("e"))])), 5);
}
