use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn timeuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timeuse")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = timeuse(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn kb(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/kb").join(name).display().to_string()
}

fn synth(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", out, "--n", "1500", "--seed", "9"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn noiseless_synth_then_fit_recovers_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "s", &[]);
    let stdout = ok(d, &["fit", "--input", "s/records.csv", "--out", "f", "--truth", "s/metadata.json", "--ols"]);
    assert!(stdout.contains("MAD(theta_hat, theta_star)"));
    let rec = json(d.join("f/recovery.json"));
    assert!(rec["mad"].as_f64().unwrap() < 1e-6, "{rec}");
    assert!(d.join("f/ols.json").exists());
    let cfg = json(d.join("f/run_config.json"));
    assert_eq!(cfg["command"], "fit");
    assert_eq!(cfg["version"], env!("CARGO_PKG_VERSION"));
    assert!(cfg["resolved"]["fit_options"].is_object());
}

#[test]
fn compare_fit_with_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "s", &["--kappa", "400"]);
    ok(d, &["fit", "--input", "s/records.csv", "--out", "f"]);
    ok(d, &["compare", "--human", "f/fit.json", "--model", "self=f/fit.json", "--out", "c"]);
    let report = json(d.join("c/alignment.json"));
    for row in report["activity_cosine"].as_array().unwrap() {
        assert!((row["cosine_all_features"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    assert_eq!(report["model_divergence"][0]["m_cells"].as_f64().unwrap(), 0.0);
    for f in ["cosine_matrix.csv", "deviations.csv", "model_divergence.csv", "attribute_divergence.csv"] {
        assert!(d.join("c").join(f).exists(), "{f}");
    }
}

#[test]
fn zero_magnitude_shift_test_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "s", &["--kappa", "800"]);
    ok(d, &["shift-test", "--input", "s/records.csv", "--out", "z", "--zero"]);
    let mut rdr = csv::Reader::from_path(d.join("z/drift.csv")).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        for i in 2..5 {
            assert!(rec[i].parse::<f64>().unwrap() < 1e-9, "{rec:?}");
        }
        rows += 1;
    }
    assert_eq!(rows, 8);
    assert!(d.join("z/drift_table.csv").exists() && d.join("z/shifts.json").exists());
}

#[test]
fn mock_agent_pipeline_is_cached_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "s", &["--kappa", "400"]);
    let mock = ["--mock", "--mock-kappa", "300", "--cache", "cache"];
    let first = ok(d, &[&["agents", "run", "--input", "s/records.csv", "--out", "a"][..], &mock].concat());
    assert!(first.contains("1500 network calls"), "{first}");
    let second = ok(d, &[&["agents", "run", "--input", "s/records.csv", "--out", "b"][..], &mock].concat());
    assert!(second.contains(" 0 network calls"), "{second}");
    assert_eq!(fs::read(d.join("a/records.csv")).unwrap(), fs::read(d.join("b/records.csv")).unwrap());

    ok(d, &["rerun", "--config", "a/run_config.json", "--out", "again"]);
    for f in ["records.csv", "responses.csv", "responses.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }

    let (marriage, race) = (kb("marriage.json"), kb("race.json"));
    ok(d, &["rag", "run", "--input", "s/records.csv", "--kb", &marriage, "--kb", &race, "--k", "2", "--out", "r", "--mock", "--mock-kappa", "300"]);
    let log = fs::read_to_string(d.join("r/retrieval_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 * 1500);

    ok(d, &["fit", "--input", "s/records.csv", "--out", "fh"]);
    ok(d, &["fit", "--input", "a/records.csv", "--out", "fa"]);
    ok(d, &["fit", "--input", "r/records.csv", "--out", "fr"]);
    ok(d, &["rag", "compare", "--human", "fh/fit.json", "--before", "fa/fit.json", "--after", "fr/fit.json", "--out", "m"]);
    ok(d, &["compare", "--human", "fh/fit.json", "--model", "mock=fa/fit.json", "--out", "c"]);
    ok(d, &["report", "--input", "c", "--input", "m", "--out", "rep"]);
    let summary = fs::read_to_string(d.join("rep/summary.md")).unwrap();
    assert!(summary.contains("cosine_matrix") && summary.contains("mitigation"));
    let svgs = fs::read_dir(d.join("rep")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg")).count();
    assert!(svgs >= 3);
}

#[test]
fn ingest_writes_funnel_and_rejections() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut raw = String::from("CASEID,SEX,RACE,EARNWEEK,EDUCYRS,SPOUSEPRES,AGE,WORK,LEISURE,SLEEP,OTHER\n");
    for i in 0..12 {
        raw += &format!(
            "c{i},{},{},{}.50,{},{},{},{},{},{},{}\n",
            1 + i % 2,
            [100, 110, 131][i % 3],
            300 + 40 * i,
            [110, 200, 217, 316][i % 4],
            1 + i % 3,
            22 + 3 * i,
            400 + 10 * i,
            300 - 10 * i,
            500,
            240
        );
    }
    raw += "bad1,99,100,500,217,1,30,480,240,480,240\n";
    raw += "bad2,1,200,500,217,1,30,480,240,480,240\n";
    raw += "bad3,1,100,500,217,1,30,480,240,480,100\n";
    raw += "bad4,1,100,abc,217,1,30,480,240,480,240\n";
    fs::write(d.join("raw.csv"), raw).unwrap();
    ok(d, &["ingest", "--input", "raw.csv", "--out", "i"]);
    let funnel = json(d.join("i/funnel.json"));
    assert_eq!(funnel["raw"], 16);
    assert_eq!(funnel["accepted"], 12);
    let rejections = fs::read_to_string(d.join("i/rejections.csv")).unwrap();
    assert_eq!(rejections.lines().count(), 5);
    assert!(rejections.contains("bad2,multiracial-excluded"));
    let std = json(d.join("i/standardization.json"));
    assert!(std["age"]["sd"].as_f64().unwrap() > 0.0);
    ok(d, &["fit", "--input", "i/records.csv", "--out", "f", "--features", "intercept,age_z,male"]);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let usage = timeuse(d, &["fit", "--out", "x"]);
    assert_eq!(usage.status.code(), Some(1));
    let no_agent = timeuse(d, &["agents", "run", "--input", "whatever.csv", "--out", "x"]);
    assert_eq!(no_agent.status.code(), Some(2), "missing input is a data error");

    let missing = timeuse(d, &["fit", "--input", "missing.csv", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"]["class"], "data");

    synth(d, "s", &["--kappa", "200"]);
    let usage = timeuse(d, &["agents", "run", "--input", "s/records.csv", "--out", "x"]);
    assert_eq!(usage.status.code(), Some(1));

    fs::write(d.join("opts.json"), r#"{"max_iterations": 1}"#).unwrap();
    let slow = timeuse(d, &["fit", "--input", "s/records.csv", "--out", "nc", "--options", "opts.json"]);
    assert_eq!(slow.status.code(), Some(3));
    assert_eq!(json(d.join("nc/fit.json"))["diagnostics"]["converged"], false);

    fs::write(
        d.join("agent.json"),
        r#"{"endpoint": "http://127.0.0.1:9/v1/chat/completions", "max_retries": 0, "timeout_secs": 2, "requests_per_second": 0}"#,
    )
    .unwrap();
    let down = timeuse(d, &["agents", "run", "--input", "s/records.csv", "--out", "y", "--agent-config", "agent.json"]);
    assert_eq!(down.status.code(), Some(4), "{}", String::from_utf8_lossy(&down.stderr));
}
