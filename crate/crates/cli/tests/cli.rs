use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use surrogate_core::data::write_dataset;
use surrogate_core::simulate::generate;
use surrogate_core::{SimulationSetting, TrialDataset};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_surrogate"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_csv(dir: &Path, name: &str, data: &TrialDataset) -> PathBuf {
    let path = dir.join(name);
    write_dataset(data, std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn setting1_csv(dir: &Path) -> PathBuf {
    let data = generate(&SimulationSetting::benchmark(1, None).unwrap(), 2000, 11).unwrap();
    write_csv(dir, "s1.csv", &data)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(schema: &str, doc: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(schema);
    let schema: Value = read_json(&path);
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{schema}: {errors:#?}");
}

#[test]
fn analyze_writes_a_valid_reproducible_report() {
    let dir = TempDir::new().unwrap();
    let csv = setting1_csv(dir.path());
    let out = dir.path().join("report.json");
    let o = run(&[
        "analyze",
        "--data",
        csv.to_str().unwrap(),
        "--B",
        "40",
        "--with-comparators",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("PTE_CV") && text.contains("RP_CV(150)"));

    let rep = read_json(&out);
    assert_valid("analysis_report.schema.json", &rep);
    let pte = rep["cross_validated"]["pte"]["point"].as_f64().unwrap();
    assert!(pte > 0.0 && pte < 1.0);
    assert_eq!(rep["cross_validated"]["rp"].as_array().unwrap().len(), 3);
    assert_eq!(rep["diagnostics"]["conditions"]["u_grid"].as_array().unwrap().len(), 128);
    assert!(!rep["diagnostics"]["reference"]["f_new"].as_array().unwrap().is_empty());
    assert_eq!(rep["config"]["config"]["resample_count"], 40);

    let again = dir.path().join("again.json");
    let o = run(&[
        "analyze",
        "--data",
        csv.to_str().unwrap(),
        "--B",
        "40",
        "--with-comparators",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn n_bar_list_fans_out() {
    let dir = TempDir::new().unwrap();
    let csv = setting1_csv(dir.path());
    for (list, rows) in [("50", 1), ("50,100,150", 3), ("25,50,75,100", 4)] {
        let out = dir.path().join("r.json");
        let o = run(&[
            "analyze",
            "--data",
            csv.to_str().unwrap(),
            "--B",
            "10",
            "--n-bar",
            list,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(read_json(&out)["cross_validated"]["rp"].as_array().unwrap().len(), rows);
    }
}

#[test]
fn input_errors_exit_with_code_1() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,surrogate,a\n1,2.5,1\n0,1.0,0\n").unwrap();
    let o = run(&["analyze", "--data", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing column `s`"), "{}", stderr(&o));

    std::fs::write(&bad, "y,s,a\n1,2.5,1\n0,1.0,2\n").unwrap();
    assert_eq!(code(&run(&["analyze", "--data", bad.to_str().unwrap()])), 1);

    assert_eq!(code(&run(&["analyze", "--data", dir.path().join("absent.csv").to_str().unwrap()])), 1);
    assert_eq!(code(&run(&["analyze"])), 1);
    assert_eq!(code(&run(&["analyze", "--bogus"])), 1);
    assert_eq!(code(&run(&["simulate", "--setting", "9"])), 1);
    assert_eq!(code(&run(&["simulate", "--setting", "abc"])), 1);
}

#[test]
fn lenient_mode_drops_incomplete_rows() {
    let dir = TempDir::new().unwrap();
    let csv = setting1_csv(dir.path());
    let mut text = std::fs::read_to_string(&csv).unwrap();
    text.push_str("1,,1\n");
    std::fs::write(&csv, text).unwrap();
    assert_eq!(code(&run(&["analyze", "--data", csv.to_str().unwrap(), "--B", "5"])), 1);
    let o = run(&["analyze", "--data", csv.to_str().unwrap(), "--B", "5", "--lenient"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn numeric_failures_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let y: Vec<f64> = (0..400).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let a: Vec<u8> = (0..400).map(|i| (i % 2) as u8).collect();
    let flat = TrialDataset::from_columns(&y, &vec![1.0; 400], &a).unwrap();
    let csv = write_csv(dir.path(), "flat.csv", &flat);
    let o = run(&["analyze", "--data", csv.to_str().unwrap(), "--B", "5"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn design_from_data_and_from_report() {
    let dir = TempDir::new().unwrap();
    let csv = setting1_csv(dir.path());
    let out = dir.path().join("design.json");
    let o =
        run(&["design", "--data", csv.to_str().unwrap(), "--B", "100", "--kappa", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("transportability"));
    let d = read_json(&out);
    assert_valid("design.schema.json", &d);
    assert!(d["n_star"].as_u64().unwrap() >= 1);
    assert!(d["achieved"].as_f64().unwrap() >= 1.0);
    assert!(d["achieved_previous"].as_f64().unwrap() < 1.0);

    let report = dir.path().join("report.json");
    let o = run(&["analyze", "--data", csv.to_str().unwrap(), "--B", "100", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rho = dir.path().join("rho.json");
    let o = run(&["design", "--report", report.to_str().unwrap(), "--rho", "1", "--out", rho.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let d = read_json(&rho);
    assert_valid("design.schema.json", &d);
    // Larger surrogate effect size: a smaller trial suffices.
    assert!(d["effect_size_g"].as_f64().unwrap() > d["effect_size_y"].as_f64().unwrap());
    assert!(d["n_star"].as_u64().unwrap() < 50);

    let o = run(&["design", "--report", report.to_str().unwrap(), "--kappa", "10"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn simulate_writes_markdown_and_json() {
    let dir = TempDir::new().unwrap();
    let md = dir.path().join("s4.md");
    let o = run(&[
        "simulate",
        "--setting",
        "4",
        "--reps",
        "3",
        "--n",
        "800",
        "--no-resample",
        "--out",
        md.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&md).unwrap();
    assert!(text.contains("| Estimand | True | Est | ESE | ASE | CP |"));
    assert!(text.contains("Nonempty D0 branch in 3 of 3 replicates"), "{text}");

    let json = dir.path().join("s1.json");
    let o =
        run(&["simulate", "--setting", "1", "--reps", "2", "--n", "800", "--B", "20", "--out", json.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = read_json(&json);
    assert_valid("study_summary.schema.json", &s);
    assert_eq!(s["rows"][0]["estimand"], "PTE");
    assert!(s["rows"][0]["ase"].is_number());
}

#[test]
fn calibrate_t_reports_the_threshold() {
    let o = run(&["calibrate-t", "--setting", "1", "--target", "0.657"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("t = 0.852"));
    assert_eq!(code(&run(&["calibrate-t", "--setting", "5", "--target", "0.3"])), 1);
}
