use std::process::Command;

fn qscale(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qscale")).args(args).output().unwrap()
}

#[test]
fn theory_prints_effective_sizes() {
    let out = qscale(&["theory", "--family", "mult", "--eps", "0", "--M", "50", "--N", "1000", "--a", "2"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["effective_sizes"]["m_eff"], 50.0);
    assert_eq!(v["effective_sizes"]["n_eff"], 1000.0);
}

#[test]
fn additive_theory_needs_dimension() {
    let out = qscale(&["theory", "--family", "add", "--eps", "1e-8", "--M", "50", "--N", "1000", "--a", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_reads_points_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.csv");
    let mut body = String::from("m_eff,n_eff,mean_excess,stderr,seeds\n");
    for i in 0..8 {
        let n = 100.0 * 2f64.powi(i);
        body.push_str(&format!("200,{n},{},0,10\n", 3.0 / n.sqrt()));
    }
    std::fs::write(&path, body).unwrap();
    let out = qscale(&["fit", "--points", path.to_str().unwrap(), "--axis", "neff", "--a", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["fit"]["exponent"].as_f64().unwrap() + 0.5).abs() < 1e-9);
    assert!(v["abs_gap"].as_f64().unwrap() < 1e-9);
}
