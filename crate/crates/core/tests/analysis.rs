use std::fs::{self, File};
use std::path::Path;
use std::process::Command;

use fvicm::io::{analyze, ingest, read_report, run_analysis, write_dataset, PenaltyChoice, RunConfig, SUMMARY_JSON};
use fvicm::sim::{generate_dataset, SimDesign};

fn small_config(out: &Path) -> RunConfig {
    RunConfig {
        output_dir: out.to_path_buf(),
        degrees: vec![2],
        knot_counts: vec![2],
        penalty: PenaltyChoice::Fixed(1e-4),
        n_null: 200,
        ..RunConfig::default()
    }
}

fn simulated_csv(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("data.csv");
    let data = generate_dataset(&SimDesign { n_subjects: 80, n_times: 5, ..SimDesign::default() }, 3).unwrap();
    write_dataset(File::create(&path).unwrap(), &data, b',').unwrap();
    path
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn report_round_trips_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = simulated_csv(tmp.path());
    let out = tmp.path().join("out");
    let cfg = small_config(&out);
    let ing = ingest(&csv, true).unwrap();
    let rep = run_analysis(&ing, &cfg).unwrap();
    assert!(rep.linearity.is_some());
    let back = read_report(&out).unwrap();
    assert_eq!(back, rep);
    assert_eq!(back.beta0, rep.beta0);
    let first = read_all(&out);
    assert_eq!(first.len(), 5);
    run_analysis(&ing, &cfg).unwrap();
    assert_eq!(read_all(&out), first);
}

#[test]
fn quadratic_table_is_fit_almost_exactly() {
    let b0 = [5f64.sqrt() / 13f64.sqrt(), 2.0 / 13f64.sqrt(), 2.0 / 13f64.sqrt()];
    let n1 = (1.0f64 + 1.44 + 0.81).sqrt();
    let b1 = [1.0 / n1, 1.2 / n1, 0.9 / n1];
    let mut text = String::from("subject_id,y,g,x1,x2,x3\n");
    let mut state = 12345u64;
    let mut unif = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for i in 0..100 {
        let g = i % 3;
        for _ in 0..6 {
            let x = [unif(), unif(), unif()];
            let u0: f64 = (0..3).map(|c| x[c] * b0[c]).sum();
            let u1: f64 = (0..3).map(|c| x[c] * b1[c]).sum();
            let y = 1.0 - 0.8 * u0 * u0 + g as f64 * (0.5 + u1 - 0.6 * u1 * u1) + 1e-5 * (unif() - 0.5);
            text.push_str(&format!("s{i},{y:e},{g},{:e},{:e},{:e}\n", x[0], x[1], x[2]));
        }
    }
    let ing = fvicm::io::ingest_reader(text.as_bytes(), b',', false).unwrap();
    let cfg = RunConfig {
        knot_counts: vec![0],
        penalty: PenaltyChoice::Fixed(0.0),
        test_linearity: false,
        ..small_config(Path::new("unused"))
    };
    let rep = analyze(&ing, &cfg).unwrap();
    assert!(rep.mse < 1e-8, "mse {}", rep.mse);
    for (e, t) in rep.beta1.iter().zip(b1) {
        assert!((e - t).abs() < 1e-3);
    }
}

fn fvicm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fvicm"))
}

#[test]
fn cli_verbs_exist() {
    for verb in ["fit", "test", "simulate", "power"] {
        let out = fvicm().args([verb, "--help"]).output().unwrap();
        assert!(out.status.success(), "{verb}");
    }
}

#[test]
fn cli_errors_are_categorized() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "subject_id,y,g,x1,x2\na,1.0,1,0.1,0.2\na,oops,1,0.3,0.4\n").unwrap();
    let out = fvicm().args(["fit", "--data"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error["), "{err}");
    assert!(err.contains("]: "), "{err}");

    let out = fvicm().args(["fit", "--data"]).arg(tmp.path().join("missing.csv")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error["));
}

#[test]
fn cli_fit_and_simulate_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("sim.tsv");
    let st = fvicm()
        .args(["simulate", "--subjects", "60", "--times", "5", "--seed", "4", "--dataset"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(st.success());
    let out = tmp.path().join("fit");
    let st = fvicm()
        .args(["test", "--degree", "2", "--knots", "1", "--lambda", "1e-3", "--n-null", "100", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(out.join(SUMMARY_JSON).exists());
    assert!(read_report(&out).unwrap().linearity.is_some());
}
