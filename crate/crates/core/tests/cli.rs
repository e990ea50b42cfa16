//! Exit codes, output files and manifests of the command-line tool.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use policy_did::sim::GeneratorTruth;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_policy-did"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).expect("manifest written"))
        .expect("manifest is JSON")
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Writes a 12-hospital truth and its synthetic admissions.
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut truth = GeneratorTruth::default();
        truth.structure.hospitals = 12;
        std::fs::write(dir.path().join("truth.json"), truth.to_json()).expect("truth");
        let ws = Workspace { dir };
        let out = ws.path("gen");
        let o = run(&["simulate", ws.s("truth.json").as_str(), "--emit-dataset"], &out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::copy(out.join("admissions.csv"), ws.path("admissions.csv")).expect("copy");
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

#[test]
fn validate_accepts_clean_input_and_rejects_switching_wards() {
    let ws = Workspace::new();
    let out = ws.path("v1");
    assert_eq!(run(&["validate", &ws.s("admissions.csv")], &out).status.code(), Some(0));
    assert!(out.join("validation.json").exists());
    assert_eq!(manifest(&out)["status"], "ok");

    // flip TREATED for one ward in the last year
    let mut rdr = csv::Reader::from_path(ws.path("admissions.csv")).expect("csv");
    let headers = rdr.headers().expect("header").clone();
    let [hcol, wcol, ycol, tcol] =
        ["hospital_id", "ward_id", "year", "treated"].map(|c| headers.iter().position(|h| h == c).expect("column"));
    let mut w = csv::Writer::from_path(ws.path("switching.csv")).expect("csv out");
    w.write_record(&headers).expect("header");
    for rec in rdr.records() {
        let rec = rec.expect("record");
        let mut fields: Vec<String> = rec.iter().map(str::to_string).collect();
        if fields[hcol] == "H0001" && fields[wcol] == "W01" && fields[ycol] == "2013" {
            fields[tcol] = if fields[tcol] == "1" { "0".into() } else { "1".into() };
        }
        w.write_record(&fields).expect("write");
    }
    w.flush().expect("flush");
    let out = ws.path("v2");
    let o = run(&["validate", &ws.s("switching.csv")], &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&out)["status"], "failed");
}

#[test]
fn missing_input_is_an_io_error_with_a_manifest() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("out");
    let o = run(&["validate", dir.path().join("absent.csv").to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.csv"));
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
    assert!(m["error"].is_string());
}

#[test]
fn adjust_then_did_writes_the_documented_outputs() {
    let ws = Workspace::new();
    let out = ws.path("adj");
    let o = run(&["adjust", &ws.s("admissions.csv")], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let panel = std::fs::read_to_string(out.join("panel.csv")).expect("panel");
    // 12 hospitals x 4 wards x 48 months, none empty at 5 patients per ward-month
    assert_eq!(panel.lines().count(), 1 + 12 * 4 * 48);
    let m = manifest(&out);
    assert!(m["inputs"].as_object().expect("digests").values().all(|d| d.as_str().unwrap().len() == 64));
    std::fs::copy(out.join("panel.csv"), ws.path("panel.csv")).expect("copy");

    let out = ws.path("did");
    let o = run(&["did", &ws.s("panel.csv"), "--replicates", "100"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["coefficients.csv", "bootstrap.csv", "joint_test.json", "margins.csv", "did_summary.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let header = std::fs::read_to_string(out.join("coefficients.csv")).expect("table");
    // term + (estimate, se) per outcome
    assert_eq!(header.lines().next().unwrap().split(',').count(), 1 + 2 * 5);

    let out = ws.path("did-surgical");
    let o = run(&["did", &ws.s("panel.csv"), "--scheme", "surgical", "--replicates", "100"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let header = std::fs::read_to_string(out.join("coefficients.csv")).expect("table");
    assert_eq!(header.lines().next().unwrap().split(',').count(), 1 + 2 * 4);
    assert!(!header.contains("return"));
    assert!(!out.join("joint_test.json").exists());

    let out = ws.path("did-b50");
    assert_eq!(run(&["did", &ws.s("panel.csv"), "--replicates", "50"], &out).status.code(), Some(2));
    assert_eq!(manifest(&out)["status"], "failed");
}

#[test]
fn one_hospital_input_is_a_structure_error() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut truth = GeneratorTruth::default();
    truth.structure.hospitals = 1;
    let t = dir.path().join("truth.json");
    std::fs::write(&t, truth.to_json()).expect("truth");
    let gen = dir.path().join("gen");
    assert_eq!(run(&["simulate", t.to_str().unwrap(), "--emit-dataset"], &gen).status.code(), Some(0));
    let out = dir.path().join("adj");
    let o = run(&["adjust", gen.join("admissions.csv").to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_rejects_small_studies_and_bad_truths() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("out");
    assert_eq!(run(&["simulate", "--replicates", "10"], &out).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"structure": {"treated_fraction": 1.5}}"#).expect("write");
    assert_eq!(run(&["simulate", bad.to_str().unwrap()], &out).status.code(), Some(2));
    std::fs::write(&bad, "not json").expect("write");
    assert_eq!(run(&["simulate", bad.to_str().unwrap()], &out).status.code(), Some(2));
}

#[test]
fn panel_study_reports_coverage_for_every_delta() {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut truth = GeneratorTruth::default();
    truth.structure.hospitals = 20;
    truth.config.outcomes = vec![policy_did::data::Outcome::Readmissions];
    for t in truth.panel.values_mut() {
        t.delta.clear();
    }
    let t = dir.path().join("truth.json");
    std::fs::write(&t, truth.to_json()).expect("truth");
    let out = dir.path().join("out");
    let o = run(
        &["simulate", t.to_str().unwrap(), "--replicates", "50", "--pipeline", "panel", "--bootstrap", "100"],
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("recovery.json")).expect("report")).expect("json");
    let params = report["parameters"].as_array().expect("parameters");
    assert_eq!(params.len(), 3);
    for p in params {
        let c = p["coverage"].as_f64().expect("coverage populated");
        assert!((0.0..=1.0).contains(&c));
    }
    assert!(out.join("recovery.csv").exists());
}
