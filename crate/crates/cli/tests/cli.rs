use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ebvs_core::sim::{generate, ScenarioId, ScenarioSpec};
use ebvs_core::{Dataset64, FitResult64};
use tempfile::TempDir;

fn ebvs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebvs"))
        .args(args)
        .env_remove("EBVS_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes y and Z of `data` as CSV with columns y, z1, z2, ….
fn write_csv(path: &Path, y: &[f64], data: &Dataset64) {
    let mut s = String::from("y");
    for k in 0..data.k() {
        s.push_str(&format!(",z{}", k + 1));
    }
    s.push('\n');
    for i in 0..data.n() {
        s.push_str(&y[i].to_string());
        for k in 0..data.k() {
            s.push_str(&format!(",{}", data.z[[i, k]]));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn small_n1(rep: usize) -> Dataset64 {
    let mut spec = ScenarioSpec::new(ScenarioId::N1);
    spec.k = 60;
    generate(&spec, rep).unwrap().data
}

fn n1_csv(dir: &TempDir) -> PathBuf {
    let data = small_n1(0);
    let path = dir.path().join("n1.csv");
    write_csv(&path, data.y_slice(), &data);
    path
}

#[test]
fn fit_writes_report_and_round_trippable_result() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let out = dir.path().join("out");
    let res = ebvs(&["fit", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));

    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("+ z1"), "{report}");
    assert!(report.contains("AIC:"));
    assert!(report.contains("R-squared:"));
    assert!(report.contains("correlated neighbors"));

    let text = fs::read_to_string(out.join("result.json")).unwrap();
    let fit: FitResult64 = serde_json::from_str(&text).unwrap();
    assert_eq!(fit.selected_names, vec!["z1".to_string()]);
    let again = serde_json::to_string_pretty(&fit).unwrap();
    assert_eq!(again.trim_end(), text.trim_end());
    let leftovers: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| !n.ends_with(".txt") && !n.ends_with(".json"))
        .collect();
    assert!(leftovers.is_empty(), "temporary files left behind: {leftovers:?}");
}

#[test]
fn binomial_on_continuous_response_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let out = dir.path().join("out");
    let res = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--family",
        "binomial",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("glm_family"), "{}", stderr(&res));
    assert!(!out.join("result.json").exists());
}

#[test]
fn sequential_fit_on_noise_selects_nothing() {
    let dir = TempDir::new().unwrap();
    // Response of one replication against the predictors of another.
    let y = small_n1(1).y.to_vec();
    let noise = small_n1(2);
    let input = dir.path().join("noise.csv");
    write_csv(&input, &y, &noise);
    let out = dir.path().join("out");
    let res = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--sequential",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let fit: FitResult64 = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert!(fit.selected().is_empty());
    assert!(fit.rounds.is_empty());
}

#[test]
fn schema_roles_and_locked_in_columns() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let schema = dir.path().join("schema.txt");
    fs::write(&schema, "# roles\ny = response\nz2 = locked_in\nz3 = ignore\n").unwrap();
    let out = dir.path().join("out");
    let res = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let fit: FitResult64 = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(fit.theta_final.beta.len(), 2);
    assert_eq!(fit.gamma_final.len(), 58);
    let summary = fit.refit_summary.unwrap();
    assert_eq!(summary.names[..2], ["(Intercept)".to_string(), "z2".to_string()]);
}

#[test]
fn schema_naming_a_missing_column_fails_in_the_pipeline() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let schema = dir.path().join("schema.txt");
    fs::write(&schema, "y = response\nnot_there = locked_in\n").unwrap();
    let res = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("data_pipeline"), "{}", stderr(&res));
}

#[test]
fn restarts_write_the_union_report() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let out = dir.path().join("out");
    let res = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--mode",
        "weighted",
        "--restarts",
        "3",
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let multi: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("restarts.json")).unwrap()).unwrap();
    assert_eq!(multi["runs"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("selected in any run"));
}

#[test]
fn survival_expansion_runs_as_poisson() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("surv.csv");
    // Higher risk for larger x1; x2 is noise.
    let mut s = String::from("time,event,x1,x2\n");
    for i in 0..40 {
        let x1 = (i % 8) as f64 / 4.0 - 1.0;
        let x2 = ((i * 7) % 11) as f64 / 5.0 - 1.0;
        let time = 1.0 + (40 - i) as f64 * (1.5 - x1) / 10.0;
        let event = u8::from(i % 5 != 0);
        s.push_str(&format!("{time},{event},{x1},{x2}\n"));
    }
    fs::write(&input, s).unwrap();
    let out = dir.path().join("out");
    let res = ebvs(&["fit", "--input", input.to_str().unwrap(), "--survival", "--out", out.to_str().unwrap()]);
    assert!(matches!(res.status.code(), Some(0 | 2)), "{}", stderr(&res));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("family: poisson"));
    assert!(report.contains("residual deviance"));

    let bad = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--survival",
        "--family",
        "normal",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn compositional_reference_must_be_putative() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let res = ebvs(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--compositional-ref",
        "nope",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("data_pipeline"), "{}", stderr(&res));
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = ebvs(&[
            "simulate", "--scenario", "N1", "--reps", "2", "--k", "100", "--seed", "7", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
        (
            fs::read_to_string(out.join("study.tsv")).unwrap(),
            fs::read_to_string(out.join("study.json")).unwrap(),
        )
    };
    let (tsv_a, json_a) = run("a");
    let (tsv_b, json_b) = run("b");
    assert_eq!(tsv_a, tsv_b);
    assert_eq!(json_a, json_b);
    assert!(tsv_a.starts_with("method\tscenario"));
    assert!(tsv_a.contains("SEMMS\tN1\t100\t100\t1\t1\t0\t2"), "{tsv_a}");
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    assert_eq!(ebvs(&["simulate", "--scenario", "N10", "--out", out.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(ebvs(&["fit", "--delta", "0.5"]).status.code(), Some(1));
    assert_eq!(ebvs(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_worker_count_is_rejected() {
    let dir = TempDir::new().unwrap();
    let input = n1_csv(&dir);
    let res = Command::new(env!("CARGO_BIN_EXE_ebvs"))
        .args(["fit", "--input", input.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .env("EBVS_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("EBVS_THREADS"));
}
