use bdf2dc::bench::{run_convergence_study, MeshFamily, StudySpec};
use bdf2dc::schemes::Stage;
use bdf2dc::starters::StarterKind;

/// Least-squares slope of log(error) against log(max step).
fn fitted_slope(steps: &[f64], errors: &[f64]) -> f64 {
    let x: Vec<f64> = steps.iter().map(|s| s.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let my = y.iter().sum::<f64>() / y.len() as f64;
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn slopes(spec: &StudySpec, stages: &[Stage]) -> Vec<f64> {
    let table = run_convergence_study(spec).unwrap();
    assert!(!table.has_failures());
    let steps: Vec<f64> = table.rows.iter().map(|r| r.max_step).collect();
    stages
        .iter()
        .map(|&s| {
            let e: Vec<f64> = table.errors(s).into_iter().map(Option::unwrap).collect();
            fitted_slope(&steps, &e)
        })
        .collect()
}

#[test]
fn graded_mesh_slopes() {
    for gamma in [2.0, 3.0] {
        let spec = StudySpec {
            mesh: MeshFamily::Graded { gamma },
            horizon: Some(1.0),
            ns: vec![160, 320, 640, 1280],
            top: Stage::Dc34,
            starters: vec![StarterKind::Exact; 3],
            ..Default::default()
        };
        let s = slopes(&spec, &[Stage::Bdf2, Stage::Dc3, Stage::Dc34]);
        assert!((s[0] - 2.0).abs() < 0.1, "gamma {gamma}: BDF2 slope {}", s[0]);
        assert!((s[1] - 3.0).abs() < 0.1, "gamma {gamma}: DC3 slope {}", s[1]);
        assert!(s[2] >= 3.8, "gamma {gamma}: DC34 slope {}", s[2]);
    }
}

#[test]
fn second_order_start_has_no_aftereffect() {
    let base = StudySpec { ns: vec![640, 1280, 2560], ..Default::default() };
    let good = StudySpec { starters: vec![StarterKind::Bdf1, StarterKind::Rk2], ..base.clone() };
    let poor = StudySpec { starters: vec![StarterKind::Bdf1, StarterKind::Bdf1], ..base };
    let s_good = slopes(&good, &[Stage::Dc3])[0];
    let s_poor = slopes(&poor, &[Stage::Dc3])[0];
    assert!((s_good - 3.0).abs() < 0.1, "BDF1,RK2 start: {s_good}");
    assert!((s_poor - 2.0).abs() < 0.15, "BDF1,BDF1 start: {s_poor}");
}
