use std::path::Path;
use std::process::{Command, Output};

fn optolev(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optolev"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn overlay(dir: &Path, text: &str) -> String {
    let path = dir.join("overlay.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stability_verdicts_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = optolev(&["stability", "--profile", "toy-stable"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).starts_with("stable"));
    assert!(stdout(&ok).contains("k_x = 5.1850e-5"));
    let csv = std::fs::read_to_string(dir.path().join("stability.csv")).unwrap();
    assert!(csv.starts_with("k_x_Npm,k_z_Npm,k_beta_Nm_per_rad,stable"));

    let cfg = overlay(dir.path(), "[cavity.upper]\npower_w = 0.0\n");
    let bad = optolev(&["stability", "--profile", "toy-stable", "--config", &cfg], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).starts_with("unstable: x"));

    let missing = optolev(&["stability", "--profile", "paper"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("[sandwich]"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = overlay(dir.path(), "[pendulum]\nq_factor = 100.0\n");
    let o = optolev(&["measure", "--profile", "paper", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("q_factor"), "{}", stderr(&o));

    let cfg = overlay(dir.path(), "[cavity.upper]\nfinesse = -1.0\n");
    let o = optolev(&["measure", "--profile", "paper", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("[cavity.upper] at `finesse`"), "{}", stderr(&o));

    assert_eq!(optolev(&["measure"], dir.path()).status.code(), Some(2));
    assert_eq!(optolev(&["measure", "--profile", "nope"], dir.path()).status.code(), Some(2));
    assert_eq!(optolev(&["bode", "--profile", "paper", "--f-min", "2", "--f-max", "1"], dir.path()).status.code(), Some(1));

    let cfg = overlay(dir.path(), "[sweep]\npowers_w = [29.7]\n");
    let o = optolev(&["sweep", "--profile", "paper", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("powers_w"));
}

#[test]
fn bode_filter_dc_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = optolev(
        &["bode", "--profile", "paper", "--target", "filter", "--f-min", "1e-3", "--f-max", "100", "--n-points", "51"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("bode_filter.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("f_Hz,re_G,im_G,mag_dB,phase_deg,confidence"));
    let first: Vec<f64> = lines.next().unwrap().split(',').take(5).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first[0], 1e-3);
    assert!((first[1] - 1.0).abs() < 1e-3);
    assert_eq!(csv.lines().count(), 52);
}

#[test]
fn measure_is_deterministic_across_jobs() {
    let cfg_text = "[loop]\nphase_noise_deg = 5.0\n";
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = overlay(a.path(), cfg_text);
    let run_a = optolev(&["measure", "--profile", "paper", "--config", &cfg, "--seed", "7", "--jobs", "1"], a.path());
    let run_b = optolev(&["measure", "--profile", "paper", "--config", &cfg, "--seed", "7", "--jobs", "3"], b.path());
    assert_eq!(run_a.status.code(), Some(0), "{}", stderr(&run_a));
    assert_eq!(run_b.status.code(), Some(0), "{}", stderr(&run_b));
    for name in ["spring.csv", "response_on_r0.csv", "fits_off.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let other = tempfile::tempdir().unwrap();
    let run_c = optolev(&["measure", "--profile", "paper", "--config", &cfg, "--seed", "8"], other.path());
    assert_eq!(run_c.status.code(), Some(0));
    assert_ne!(
        std::fs::read(a.path().join("spring.csv")).unwrap(),
        std::fs::read(other.path().join("spring.csv")).unwrap()
    );
}

#[test]
fn measure_recovers_spring_within_band() {
    let dir = tempfile::tempdir().unwrap();
    let o = optolev(&["measure", "--profile", "paper", "--timeseries", "0.04"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("verdict: consistent"));
    let csv = std::fs::read_to_string(dir.path().join("spring.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let k: f64 = row[6].parse().unwrap();
    assert!((1.49e-5..3.10e-5).contains(&k));
    let ts = std::fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
    assert!(ts.starts_with("t_s,s_a_V,s_b_V,x_m\n"));
}

#[test]
fn repeats_are_aggregated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = overlay(dir.path(), "[loop]\nphase_noise_deg = 5.0\n[sweep]\npowers_w = [0.0, 29.7]\nrepeats = 3\n");
    let o = optolev(&["measure", "--profile", "paper", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let fits = std::fs::read_to_string(dir.path().join("fits_on.csv")).unwrap();
    assert_eq!(fits.lines().count(), 4);
    for r in 0..3 {
        assert!(dir.path().join(format!("response_on_r{r}.csv")).exists());
    }
    let csv = std::fs::read_to_string(dir.path().join("spring.csv")).unwrap();
    let sigma_f_eff: f64 = csv.lines().nth(1).unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert!(sigma_f_eff > 0.0);
}

#[test]
fn zero_injection_is_low_confidence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = overlay(dir.path(), "[loop]\ninjection_amplitude_v = 0.0\n");
    let o = optolev(&["measure", "--profile", "paper", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("estimate_oltf") && stderr(&o).contains("SNR"), "{}", stderr(&o));
}

#[test]
fn sweep_reports_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let o = optolev(&["sweep", "--profile", "paper"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert!(report.starts_with("P_W,sigma_P_W,k_Npm,sigma_k_Npm,band_lo_Npm,band_hi_Npm,consistent\n"));
    assert_eq!(report.lines().count(), 7);
    let zero: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(zero[0].parse::<f64>().unwrap(), 0.0);
    assert_eq!(zero[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(zero[6], "true");
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("verdict: all points consistent"));
}
