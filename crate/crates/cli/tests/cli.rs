use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clonesim_core::config;
use clonesim_core::protocol::{csv_header, Mode, ProtocolConfig};

fn clonesim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clonesim"))
        .args(args)
        .env_remove(config::SEED_ENV)
        .output()
        .expect("spawn clonesim")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quick_dynamic() -> ProtocolConfig {
    let mut cfg = ProtocolConfig { mode: Mode::Dynamic, mc_trials: 2000, seed: 2024, ..ProtocolConfig::default() };
    cfg.detector.eta = 0.8;
    cfg.detector.dark_rate = 1e-3;
    cfg
}

fn write_config(dir: &Path, cfg: &ProtocolConfig) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, config::to_text(cfg)).unwrap();
    p.to_str().unwrap().to_string()
}

fn value(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_string()))
        .unwrap_or_else(|| panic!("{key} missing from\n{out}"))
}

#[test]
fn ideal_prints_optimal_fidelities() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for (a, b) in [("1", "0"), ("0.6", "0.8"), ("0.6", "0.8i")] {
        let o = clonesim(&["ideal", "--a", a, "--b", b, "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
        let s = stdout(&o);
        assert_eq!(value(&s, "clone_fidelity_1"), "0.833333333333");
        assert_eq!(value(&s, "clone_fidelity_2"), "0.833333333333");
        assert_eq!(value(&s, "telenot_fidelity"), "0.666666666667");
        assert_eq!(value(&s, "p_symmetric"), "0.75");
    }
    for f in ["report.json", "summary.csv", "manifest.json", "config_resolved.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn unnormalized_input_is_renormalized_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let o = clonesim(&["ideal", "--a", "1", "--b", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("renormalizing"), "{}", stderr(&o));
    let cfg = config::parse(&fs::read_to_string(dir.path().join("config_resolved.txt")).unwrap()).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((cfg.input.a.re - h).abs() < 1e-15 && (cfg.input.b.re - h).abs() < 1e-15);
}

#[test]
fn unparseable_amplitude_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = clonesim(&["ideal", "--a", "one", "--b", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--a"));
}

#[test]
fn missing_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = config::to_text(&quick_dynamic())
        .lines()
        .filter(|l| !l.starts_with("bob.kappa"))
        .map(|l| format!("{l}\n"))
        .collect();
    let p = dir.path().join("bad.cfg");
    fs::write(&p, text).unwrap();
    let o = clonesim(&["dynamics", "--config", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bob.kappa"), "{}", stderr(&o));
}

#[test]
fn summary_header_is_pinned() {
    let pinned = "schema_version,mode,a_re,a_im,b_re,b_im,clone_fidelity_1,clone_fidelity_2,telenot_fidelity,\
heralded_clone_fidelity_1,heralded_clone_fidelity_2,heralded_telenot_fidelity,p_symmetric,p_herald,\
p_operational,p_reference,p_detected,false_herald_fraction,overlap_visibility,emission_prob_alice,\
emission_prob_bob,excited_pop_max_alice,excited_pop_max_bob,closure_error_alice,closure_error_bob,\
adiabaticity_warning";
    assert_eq!(csv_header(), pinned);
    let dir = tempfile::tempdir().unwrap();
    let o = clonesim(&["ideal", "--a", "1", "--b", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(pinned));
    assert!(csv.lines().nth(1).unwrap().starts_with("1,analytic,"));
}

#[test]
fn unknown_sweep_parameter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &quick_dynamic());
    let out = dir.path().to_str().unwrap();
    let o = clonesim(&["sweep", "--param", "alice.colour", "--from", "0", "--to", "1", "--steps", "3", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alice.colour"));
}

#[test]
fn sweep_rows_follow_requested_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = quick_dynamic();
    base.mode = Mode::Analytic;
    let cfg = write_config(dir.path(), &base);
    let out = dir.path().join("sw");
    let o = clonesim(&["sweep", "--param", "eta", "--from", "1", "--to", "0.25", "--steps", "4", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    let vals: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(vals, ["1", "0.75", "0.5", "0.25"]);
    assert!(csv.starts_with("param,value,schema_version,"));
}

#[test]
fn dynamics_reruns_from_resolved_config_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &quick_dynamic());
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let o = clonesim(&["dynamics", "--config", &cfg, "--out", first.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = first.join("config_resolved.txt");
    let o = clonesim(&["dynamics", "--config", resolved.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.json", "summary.csv", "config_resolved.txt", "pulse_alice.csv", "pulse_bob.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2024);
    assert_eq!(manifest["config_text"].as_str().unwrap(), fs::read_to_string(&resolved).unwrap());
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &quick_dynamic());
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_clonesim"))
        .args(["dynamics", "--config", &cfg, "--out", out.to_str().unwrap()])
        .env(config::SEED_ENV, "77")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = config::parse(&fs::read_to_string(out.join("config_resolved.txt")).unwrap()).unwrap();
    assert_eq!(resolved.seed, 77);
}

#[test]
fn violated_adiabaticity_exits_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_dynamic();
    for n in [&mut cfg.alice, &mut cfg.bob] {
        n.pulse.t_total = 2.0;
        n.params.gamma = 0.0;
    }
    let path = write_config(dir.path(), &cfg);
    let o = clonesim(&["dynamics", "--config", &path, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).contains("adiabaticity"));
    assert!(dir.path().join("o/report.json").exists());
}

#[test]
fn verify_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = clonesim(&["verify", "--seed", "7", "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
        assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("[PASS]")).count(), 10);
    }
    assert_eq!(fs::read(a.join("verify.json")).unwrap(), fs::read(b.join("verify.json")).unwrap());
}
