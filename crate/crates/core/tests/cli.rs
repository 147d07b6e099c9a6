use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn conflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conflab"))
        .args(args)
        .env_remove("CONFLAB_SEED")
        .output()
        .expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

// Four mislabeled calibration scores in {1, 2, 3, 4}; test rows a, b, c sit
// below all of them (p <= 0.2) and d above (p >= 0.8). At alpha = 0.2 the
// level is 0.2 * 10 / 5 = 0.4, so exactly a, b, c pass.
const CALIBRATION: &str = "\
score,label,predicted
0.1,cat,cat
0.2,dog,dog
0.3,cat,cat
0.4,cat,cat
0.5,dog,dog
1,cat,dog
2,dog,cat
3,cat,dog
4,dog,cat
";
const TEST: &str = "\
id,score,correct
a,0.05,true
b,0.5,true
c,0.3,false
d,10,false
";

#[test]
fn score_examples() {
    let dir = TempDir::new().unwrap();
    let probs = write(
        &dir,
        "probs.csv",
        "id,prob_0,prob_1,prob_2,note\nr1,0.7,0.2,0.1,x\nr2,0,1,0,y\n",
    );
    let out = dir.path().join("msp.csv");
    let o = conflab(&["score", "--input", s(&probs), "--kind", "msp", "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,score,note"));
    let r1: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(r1[0], "r1");
    assert!((r1[1].parse::<f64>().unwrap() - 0.3).abs() < 1e-12);
    assert_eq!(r1[2], "x");

    let o = conflab(&["score", "--input", s(&probs), "--kind", "doctor-alpha"]);
    assert!(o.status.success());
    let row2 = stdout(&o).lines().nth(2).unwrap().to_string();
    assert_eq!(row2, "r2,0,y");

    let logits = write(&dir, "logits.csv", "id,logit_0,logit_1\nz,0,0\n");
    let o = conflab(&["score", "--input", s(&logits), "--kind", "energy"]);
    assert!(o.status.success());
    let v: f64 = stdout(&o).lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

    let o = conflab(&["score", "--input", s(&logits), "--kind", "energy", "--negate-score"]);
    let v: f64 = stdout(&o).lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((v + std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn score_errors_name_file_line_and_column() {
    let dir = TempDir::new().unwrap();
    let bad = write(&dir, "bad.csv", "id,prob_0,prob_1\nr1,0.5,0.5\nr2,oops,0.5\n");
    let o = conflab(&["score", "--input", s(&bad), "--kind", "msp"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bad.csv:3") && err.contains("prob_0"), "{err}");

    let mixed = write(&dir, "mixed.csv", "id,prob_0,prob_1,logit_0,logit_1\nr,0.5,0.5,0,0\n");
    let o = conflab(&["score", "--input", s(&mixed), "--kind", "msp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not both"));

    let unnormalized = write(&dir, "sum.csv", "id,prob_0,prob_1\nr1,0.5,0.6\n");
    let o = conflab(&["score", "--input", s(&unnormalized), "--kind", "msp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sum.csv:2"));
}

#[test]
fn select_example_picks_three() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", CALIBRATION);
    let test = write(&dir, "test.csv", TEST);
    let report = dir.path().join("report.json");
    let ids = dir.path().join("ids.csv");
    let o = conflab(&[
        "select", "--calibration", s(&cal), "--test", s(&test), "--alpha", "0.2",
        "--seed", "5", "--report", s(&report), "--selected-ids", s(&ids),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&report);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["n"], 9);
    assert_eq!(r["n0"], 4);
    assert_eq!(r["m"], 4);
    assert_eq!(r["config"]["seed"], 5);
    assert_eq!(r["outcome"]["selected"], serde_json::json!([0, 1, 2]));
    assert!((r["outcome"]["effective_level"].as_f64().unwrap() - 0.4).abs() < 1e-12);
    assert_eq!(r["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(r["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(fs::read_to_string(&ids).unwrap(), "id\na\nb\nc\n");
    // the test file carried `correct`, so the report is evaluated in place
    let e = &r["evaluation"];
    assert_eq!(e["selected_count"], 3);
    assert_eq!(e["false_count"], 1);
    assert!((e["fdp"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((e["power"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn select_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", CALIBRATION);
    let test = write(&dir, "test.csv", TEST);
    let run = |name: &str, procedure: &str| {
        let out = dir.path().join(name);
        let o = conflab(&[
            "select", "--calibration", s(&cal), "--test", s(&test), "--procedure", procedure,
            "--alpha", "0.2", "--seed", "11", "--report", s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    for procedure in ["conformal-labeling", "bh", "storey-bh", "quantile-bh"] {
        assert_eq!(run("a.json", procedure), run("b.json", procedure), "{procedure}");
    }
}

#[test]
fn empty_null_calibration_warns() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", "score,correct\n0.1,true\n0.2,1\n0.3,yes\n");
    let test = write(&dir, "test.csv", "id,score\nonly,0.5\n");
    let report = dir.path().join("r.json");
    let o = conflab(&[
        "select", "--calibration", s(&cal), "--test", s(&test), "--alpha", "0.1",
        "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&report);
    assert_eq!(r["n0"], 0);
    assert!(r["warnings"][0].as_str().unwrap().contains("n0 = 0"));
    assert_eq!(r["outcome"]["warnings"][0]["warning"], "empty_null_calibration");
    assert!(stderr(&o).contains("warning:"));
}

#[test]
fn seed_precedence_flag_file_env() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", CALIBRATION);
    let test = write(&dir, "test.csv", TEST);
    let config = write(&dir, "cfg.json", r#"{"seed": 21, "alpha": 0.2}"#);
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let out = dir.path().join("r.json");
        let mut args = vec![
            "select", "--calibration", s(&cal), "--test", s(&test), "--report", s(&out),
        ];
        args.extend_from_slice(extra);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_conflab"));
        cmd.args(&args).env_remove("CONFLAB_SEED");
        if let Some(v) = env {
            cmd.env("CONFLAB_SEED", v);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let r = json(&out);
        (r["config"]["seed"].as_u64().unwrap(), r["config"]["alpha"].as_f64().unwrap())
    };
    assert_eq!(seed_of(&[], None), (0, 0.1));
    assert_eq!(seed_of(&[], Some("8")), (8, 0.1));
    assert_eq!(seed_of(&["--config", s(&config)], Some("8")), (21, 0.2));
    assert_eq!(seed_of(&["--config", s(&config), "--seed", "3"], Some("8")), (3, 0.2));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", CALIBRATION);
    let test = write(&dir, "test.csv", TEST);
    let o = conflab(&["select", "--calibration", s(&cal), "--test", s(&test), "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = conflab(&["select", "--calibration", "/nonexistent/cal.csv", "--test", s(&test)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/cal.csv"));
    let o = conflab(&["select", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
    let o = conflab(&["select", "--calibration", s(&cal), "--test", s(&test), "--procedure", "holm"]);
    assert_eq!(o.status.code(), Some(1));
    let o = conflab(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn split_and_select_from_one_file() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("id,score,label,predicted\n");
    for i in 0..40 {
        let wrong = i % 4 == 0;
        let score = if wrong { 0.6 + i as f64 / 100.0 } else { i as f64 / 100.0 };
        text += &format!("r{i},{score},x,{}\n", if wrong { "y" } else { "x" });
    }
    let input = write(&dir, "all.csv", &text);
    let (c1, t1) = (dir.path().join("c1.csv"), dir.path().join("t1.csv"));
    let (c2, t2) = (dir.path().join("c2.csv"), dir.path().join("t2.csv"));
    for (c, t) in [(&c1, &t1), (&c2, &t2)] {
        let o = conflab(&[
            "split", "--input", s(&input), "--fraction", "0.25", "--seed", "9",
            "--calibration-out", s(c), "--test-out", s(t),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    assert_eq!(fs::read_to_string(&c1).unwrap().lines().count(), 1 + 10);
    assert_eq!(fs::read_to_string(&t1).unwrap().lines().count(), 1 + 30);

    let report = dir.path().join("r.json");
    let o = conflab(&[
        "select", "--input", s(&input), "--split-fraction", "0.25", "--split-seed", "9",
        "--alpha", "0.2", "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&report);
    assert_eq!(r["n"], 10);
    assert_eq!(r["m"], 30);
    assert!(r["evaluation"].is_object());
    let o = conflab(&["select", "--input", s(&input)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn regression_select_and_evaluate() {
    let dir = TempDir::new().unwrap();
    let cal = write(
        &dir,
        "cal.csv",
        "y,lower,upper\n0.1,0,0.2\n0.5,0.1,0.3\n0.2,0.1,0.3\n2.0,0,1\n-1.0,0,1.2\n0.0,-0.1,0.1\n",
    );
    let test = write(&dir, "test.csv", "id,lower,upper\nt1,0,0.1\nt2,0,2\nt3,0.3,0.5\n");
    let truth = write(&dir, "truth.csv", "id,y,y_hat\nt3,0.4,0.4\nt1,0.05,0.05\nt2,5,1\n");
    let report = dir.path().join("r.json");
    let o = conflab(&[
        "select", "--calibration", s(&cal), "--test", s(&test), "--loss", "absolute-error",
        "--epsilon", "0.1", "--alpha", "0.3", "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&report);
    assert_eq!(r["n"], 6);
    // |0.5 - 0.2|, |2.0 - 0.5| and |-1.0 - 0.6| exceed 0.1
    assert_eq!(r["n0"], 3);
    assert_eq!(r["config"]["loss"]["loss_kind"], "absolute_error");
    assert_eq!(r["instances"][1]["score"].as_f64(), Some(2.0));

    let out = dir.path().join("eval.json");
    let o = conflab(&["evaluate", "--report", s(&report), "--truth", s(&truth), "--output", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = json(&out);
    let selected: Vec<bool> = r["instances"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["selected"].as_bool().unwrap())
        .collect();
    let false_count = usize::from(selected[1]);
    assert_eq!(e["false_count"].as_u64().unwrap() as usize, false_count);
    assert_eq!(
        e["selected_count"].as_u64().unwrap() as usize,
        selected.iter().filter(|&&b| b).count()
    );
}

#[test]
fn evaluate_joins_on_id_and_lists_missing() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", CALIBRATION);
    let test = write(&dir, "test.csv", "id,score\na,0.05\nb,0.5\nc,0.3\nd,10\n");
    let report = dir.path().join("r.json");
    let o = conflab(&[
        "select", "--calibration", s(&cal), "--test", s(&test), "--alpha", "0.2",
        "--report", s(&report),
    ]);
    assert!(o.status.success());
    assert!(json(&report).get("evaluation").is_none());

    let truth = write(&dir, "truth.csv", "id,correct\nd,false\nc,false\nb,true\na,true\n");
    let o = conflab(&["evaluate", "--report", s(&report), "--truth", s(&truth)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(e["selected_count"], 3);
    assert_eq!(e["false_count"], 1);
    assert!((e["fdp"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((e["ai_labeled_ratio"].as_f64().unwrap() - 3.0 / 13.0).abs() < 1e-12);

    let partial = write(&dir, "partial.csv", "id,label,predicted\na,x,x\n");
    let o = conflab(&["evaluate", "--report", s(&report), "--truth", s(&partial)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("3 report id(s) have no truth row: b, c, d"), "{}", stderr(&o));
}

#[test]
fn evaluate_lists_at_most_ten_missing() {
    let dir = TempDir::new().unwrap();
    let cal = write(&dir, "cal.csv", CALIBRATION);
    let mut text = String::from("id,score\n");
    for i in 0..15 {
        text += &format!("x{i:02},0.5\n");
    }
    let test = write(&dir, "test.csv", &text);
    let report = dir.path().join("r.json");
    assert!(conflab(&["select", "--calibration", s(&cal), "--test", s(&test), "--report", s(&report)])
        .status
        .success());
    let truth = write(&dir, "truth.csv", "id,correct\n");
    let o = conflab(&["evaluate", "--report", s(&report), "--truth", s(&truth)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("15 report id(s)") && err.contains("x09, ...") && !err.contains("x10"), "{err}");
}

#[test]
fn tune_singleton_tie_and_report_input() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("p_value\n");
    for i in 0..50 {
        text += &format!("{}\n", (i as f64 + 0.5) / 50.0);
    }
    let pv = write(&dir, "p.csv", &text);
    let o = conflab(&["tune", "--pvalues", s(&pv), "--kind", "storey", "--grid", "0.4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "lambda=0.4\n");

    // with every p-value below lambda the estimate clips to 1 for each grid
    // entry, so all MSEs are equal
    let small = write(&dir, "small.csv", "p_value\n0.01\n0.02\n0.03\n0.04\n");
    let out = dir.path().join("t.json");
    let o = conflab(&[
        "tune", "--pvalues", s(&small), "--kind", "storey", "--grid", "0.9,0.8,0.85",
        "--replicates", "50", "--seed", "1", "--output", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "lambda=0.8\n");
    let t = json(&out);
    let mse = t["mse"].as_array().unwrap();
    assert_eq!(mse[0], mse[1]);
    assert_eq!(mse[1], mse[2]);
    assert_eq!(t["chosen"]["lambda"], 0.8);

    let o = conflab(&["tune", "--pvalues", s(&pv), "--kind", "quantile", "--grid", "51"]);
    assert_eq!(o.status.code(), Some(1));

    let cal = write(&dir, "cal.csv", CALIBRATION);
    let test = write(&dir, "test.csv", TEST);
    let report = dir.path().join("r.json");
    assert!(conflab(&["select", "--calibration", s(&cal), "--test", s(&test), "--report", s(&report)])
        .status
        .success());
    let o = conflab(&["tune", "--pvalues", s(&report), "--kind", "quantile", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("k0="));
}

#[test]
fn simulate_single_trial() {
    let dir = TempDir::new().unwrap();
    let config = write(
        &dir,
        "sim.json",
        r#"{"n": 50, "m": 40, "trials": 99, "alpha_grid": [0.1, 0.2],
            "procedures": [{"kind": "conformal_labeling"}, {"kind": "storey_bh", "lambda": 0.5}]}"#,
    );
    let (js, csv) = (dir.path().join("s.json"), dir.path().join("s.csv"));
    let o = conflab(&[
        "simulate", "--config", s(&config), "--trials", "1", "--seed", "7", "--threads", "2",
        "--out-json", s(&js), "--out-csv", s(&csv),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&js);
    assert_eq!(r["config"]["trials"], 1);
    assert_eq!(r["config"]["seed"], 7);
    for cell in r["cells"].as_array().unwrap() {
        assert_eq!(cell["fdr"]["mean"], cell["fdp"][0]);
        assert_eq!(cell["fdr"]["std_error"], 0.0);
        assert_eq!(cell["mean_power"]["mean"], cell["power"][0]);
    }
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("procedure,alpha,statistic,mean,std_error,theorem_bound,trials\n"));

    let o = conflab(&["simulate", "--scenario", "procedures", "--trials", "2", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("storey_bh(tuned)"));
    let o = conflab(&["simulate", "--scenario", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    let bad = write(&dir, "bad.json", r#"{"n": 50, "bogus": 1}"#);
    let o = conflab(&["simulate", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
}
