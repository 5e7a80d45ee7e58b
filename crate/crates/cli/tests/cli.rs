use std::fs;
use std::process::{Command, Output};

fn bdf2dc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdf2dc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn converge_writes_csv_with_orders() {
    let o = bdf2dc(&["converge", "--N", "640,1280", "--chain", "dc3", "--start", "bdf1,rk2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "N,max_step,err_BDF2,order_BDF2,err_DC3,order_DC3,failure");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "640");
    assert!(first[3].is_empty());
    let second: Vec<&str> = lines.next().unwrap().split(',').collect();
    let order: f64 = second[5].parse().unwrap();
    assert!((order - 3.0).abs() < 0.1, "{order}");
}

#[test]
fn output_is_deterministic() {
    let args = ["converge", "--mesh", "random", "--seed", "4", "--N", "40,80", "--chain", "dc34"];
    assert_eq!(stdout(&bdf2dc(&args)), stdout(&bdf2dc(&args)));
}

#[test]
fn markdown_and_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.md");
    let o = bdf2dc(&["converge", "--N", "20", "--chain", "bdf2", "--format", "md", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("| "));
    assert!(text.lines().nth(1).unwrap().contains("-:"));
}

#[test]
fn invalid_spec_exits_2() {
    for args in [
        &["converge", "--N", "20,10"][..],
        &["converge", "--N", "20", "--chain", "dc5"],
        &["converge", "--N", "20", "--start", "bdf1,rk2,rk3"],
        &["converge", "--N", "20", "--problem", "example9"],
        &["converge", "--N", "20", "--format", "xml"],
        &["converge", "--N", "20", "--bogus"],
    ] {
        assert_eq!(bdf2dc(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn failing_cell_exits_1_and_keeps_other_rows() {
    let o = bdf2dc(&["converge", "--mesh", "graded", "--N", "2,40"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().contains("N >= 3"));
}

#[test]
fn config_file_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.cfg");
    fs::write(&cfg, "# study\nmesh = graded\ngamma = 3\nN = 40, 80\nchain = dc3\nformat = csv\n").unwrap();
    let from_cfg = bdf2dc(&["converge", "--config", cfg.to_str().unwrap()]);
    let from_flags = bdf2dc(&["converge", "--mesh", "graded", "--gamma", "3", "--N", "40,80", "--chain", "dc3"]);
    assert_eq!(from_cfg.status.code(), Some(0), "{}", String::from_utf8_lossy(&from_cfg.stderr));
    assert_eq!(stdout(&from_cfg), stdout(&from_flags));
    let overridden = bdf2dc(&["converge", "--config", cfg.to_str().unwrap(), "--N", "40"]);
    assert_eq!(stdout(&overridden).lines().count(), 2);
}

#[test]
fn starters_matrix_has_expected_orders() {
    let o = bdf2dc(&["starters", "--N", "160,320", "--chain", "dc34", "--start", "bdf1,rk2,rk3", "--start", "rk2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().starts_with("BDF1+RK2+RK3,160"));
    assert!(text.lines().nth(3).unwrap().starts_with("RK2+RK2+RK2,160"));
    assert_eq!(bdf2dc(&["starters", "--N", "160"]).status.code(), Some(2));
}

#[test]
fn perturb_reports_each_amplitude() {
    let o = bdf2dc(&["perturb", "--N", "64", "--chain", "dc34", "--amplitude", "1e-8,1e-6"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("N,max_step,amplitude,dev_BDF2,dev_DC3,dev_DC34,max_dev,amplification,failure"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn doc_report_constant_and_mesh() {
    let o = bdf2dc(&["doc-report", "--mesh", "constant", "--ratio", "1", "--N", "50"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 50);
    assert!(stdout(&o).lines().skip(1).all(|l| l.ends_with("true")));
    let o = bdf2dc(&["doc-report", "--mesh", "geometric", "--ratio", "3", "--N", "40"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(bdf2dc(&["doc-report", "--mesh", "uniform"]).status.code(), Some(2));
}

#[test]
fn adaptive_writes_mesh_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = bdf2dc(&[
        "adaptive",
        "--v0",
        "-0.5,1.5",
        "--horizon",
        "10",
        "--mesh-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("v0,T,levels,rejects,final_value,final_error,failure"));
    let mesh = fs::read_to_string(dir.path().join("adaptive_v0_-0.5_T_10.csv")).unwrap();
    assert!(mesh.starts_with("level,t,tau,estimate,rejects"));
    assert!(mesh.lines().last().unwrap().split(',').nth(1).unwrap().parse::<f64>().unwrap() == 10.0);
}

#[test]
fn derivative_study_flag() {
    let o = bdf2dc(&["converge", "--derivative", "--mesh", "graded", "--horizon", "1", "--N", "100,200", "--start", "bdf1,rk2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("N,max_step,dt_err_BDF2,order_BDF2,final_dt_err_BDF2"));
}
