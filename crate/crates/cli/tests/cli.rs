use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Value {
    let text = std::fs::read_to_string(configs().join(name)).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.in.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xva-mild"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("XVA_MILD_THREADS")
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn small_heston() -> Value {
    let mut cfg = load("default.json");
    cfg["mc"]["n_paths"] = json!(200);
    cfg["mc"]["master_seed"] = json!(42);
    cfg["grid"]["n_steps"] = json!(10);
    cfg["mc"]["substeps"] = json!(2);
    cfg
}

fn exponential_defaults(lambda: f64) -> Value {
    json!({
        "investor": {"intensity": lambda, "threshold": {"shape": 1.0, "rate": 1.0}},
        "counterparty": {"intensity": lambda}
    })
}

#[test]
fn simulate_twice_gives_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_heston());
    let mut digests = Vec::new();
    for run_dir in ["a", "b"] {
        let out = tmp.path().join(run_dir);
        let o = run(&["simulate"], &config, &out);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let manifest = read_json(&out.join("manifest.json"));
        assert_eq!(manifest["seeds"]["master_seed"], json!(42));
        digests.push(manifest["outputs"].clone());
    }
    assert_eq!(digests[0], digests[1]);
    let files: Vec<&str> = digests[0].as_array().unwrap().iter().map(|d| d["file"].as_str().unwrap()).collect();
    assert!(files.contains(&"paths.csv") && files.contains(&"paths.bin"), "{files:?}");
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_heston());
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_xva-mild"))
        .args(["simulate", "--seed", "7", "--threads", "1"])
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["seeds"]["master_seed"], json!(7));
    assert_eq!(manifest["threads"], json!(1));
}

#[test]
fn black_scholes_variance_stays_at_v0() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = load("bs_capped_call.json");
    cfg["mc"]["n_paths"] = json!(500);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    let o = run(&["simulate"], &config, &out);
    assert_eq!(o.status.code(), Some(0));
    let rep = read_json(&out.join("positivity.json"));
    assert_eq!(rep["min_v"].as_f64().unwrap(), 0.04);
    assert_eq!(rep["frac_nonpositive"].as_f64().unwrap(), 0.0);
}

#[test]
fn collateral_above_close_out_exits_2_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_heston();
    cfg["market"]["alpha_frac"] = json!(0.95);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("manifest.json"), "{}").unwrap();
    let o = run(&["simulate"], &config, &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("market.alpha_frac"), "{err}");
    assert!(!out.join("manifest.json").exists());
    let failed = read_json(&out.join("manifest.failed.json"));
    assert_eq!(failed["exit_code"], json!(2));
}

#[test]
fn unknown_field_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_heston();
    cfg["grid"]["nz"] = json!(3);
    let config = write_config(tmp.path(), &cfg);
    let o = run(&["simulate"], &config, &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid"));
}

#[test]
fn exponential_survival_at_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_heston();
    cfg["defaults"] = exponential_defaults(0.1);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    let o = run(&["defaults"], &config, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv(&out.join("curves.csv"));
    let last = rows.last().unwrap();
    assert_eq!(last[column(&header, "t")], 1.0);
    assert!((last[column(&header, "g_I")] - (-0.1f64).exp()).abs() < 1e-12);
    assert!((last[column(&header, "g_joint")] - (-0.2f64).exp()).abs() < 1e-12);
    assert!(!out.join("defaults_mc.csv").exists());
}

#[test]
fn zero_intensity_has_no_density() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_heston();
    cfg["defaults"] = exponential_defaults(0.0);
    let config = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    let o = run(&["defaults"], &config, &out);
    assert_eq!(o.status.code(), Some(0));
    let d = read_json(&out.join("density.json"));
    for party in ["investor", "counterparty", "first"] {
        assert_eq!(d[party]["atom"].as_f64().unwrap(), 1.0);
        assert!(d[party]["phi"].as_array().unwrap().iter().all(|p| p.as_f64() == Some(0.0)));
    }
}

#[test]
fn sampler_cross_check_within_one_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &small_heston());
    let out = tmp.path().join("o");
    let o = run(&["defaults", "--mc-check", "100000"], &config, &out);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = csv(&out.join("defaults_mc.csv"));
    let sup = column(&header, "sup_gap");
    assert!(rows.iter().all(|r| r[sup] <= 0.01 && r[sup] == rows[0][sup]));
    let gap = column(&header, "gap");
    assert!(rows.iter().all(|r| r[gap] <= r[sup]));
}

#[test]
fn black_scholes_capped_call_price() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["price"], &configs().join("bs_capped_call.json"), &out);
    assert_eq!(o.status.code(), Some(0));
    let p = read_json(&out.join("price.json"));
    // closed-form call minus the call struck at K + cap, 30-digit arithmetic
    let oracle = 10.450583572185567;
    let value = p["value"].as_f64().unwrap();
    assert!((value - oracle).abs() / oracle <= 0.01, "{value}");
    assert_eq!(p["converged"], json!(true));
}

#[test]
fn bond_is_discount_factor_at_every_node() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["solve"], &configs().join("bond.json"), &out);
    assert_eq!(o.status.code(), Some(0));
    let (header, rows) = csv(&out.join("u.csv"));
    let (t, u) = (column(&header, "t"), column(&header, "u"));
    assert!(rows.len() == 5 * 41);
    for r in &rows {
        let exact = (-0.05 * (1.0 - r[t])).exp();
        assert!((r[u] - exact).abs() < 1e-6, "t={} u={}", r[t], r[u]);
    }
}

#[test]
fn manifest_digests_match_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("manifest.failed.json"), "{}").unwrap();
    let o = run(&["solve"], &configs().join("bond.json"), &out);
    assert_eq!(o.status.code(), Some(0));
    assert!(!out.join("manifest.failed.json").exists());
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], json!("solve"));
    assert_eq!(manifest["exit_code"], json!(0));
    let outputs = manifest["outputs"].as_array().unwrap();
    for name in ["config.json", "u.csv", "u.bin", "picard.json", "martingale.csv", "residual.json"] {
        let entry = outputs.iter().find(|d| d["file"] == json!(name)).unwrap();
        let data = std::fs::read(out.join(name)).unwrap();
        let hex: String = Sha256::digest(&data).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(entry["sha256"], json!(hex), "{name}");
    }
}

#[test]
fn written_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    let o = run(&["defaults"], &configs().join("default.json"), &first);
    assert_eq!(o.status.code(), Some(0));
    let second = tmp.path().join("b");
    let o = run(&["defaults"], &first.join("config.json"), &second);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(first.join("config.json")).unwrap(),
        std::fs::read(second.join("config.json")).unwrap()
    );
    let hash = |d: &Path| read_json(&d.join("manifest.json"))["config_hash"].clone();
    assert_eq!(hash(&first), hash(&second));
}

#[test]
fn full_xva_martingale_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["solve"], &configs().join("default.json"), &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv(&out.join("martingale.csv"));
    let (mean, se) = (column(&header, "mean"), column(&header, "stderr"));
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r[mean].abs() <= 3.0 * r[se], "{r:?}");
    }
    assert_eq!(read_json(&out.join("picard.json"))["converged"], json!(true));
}

#[test]
fn default_config_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["verify"], &configs().join("default.json"), &out);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    assert_eq!(read_json(&out.join("verify.json"))["passed"], json!(true));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn positivity_violation_fails_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["verify"], &configs().join("feller_violation.json"), &out);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL variance positivity"), "{stdout}");
    let checks = read_json(&out.join("verify.json"))["checks"].clone();
    let positivity = checks
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == json!("variance positivity"))
        .unwrap()
        .clone();
    assert_eq!(positivity["pass"], json!(false));
    assert_eq!(read_json(&out.join("manifest.json"))["exit_code"], json!(1));
}

#[test]
fn positivity_violation_blocks_solve() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = run(&["solve"], &configs().join("feller_violation.json"), &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(out.join("manifest.failed.json").exists());
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn zero_threads_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_xva-mild"))
        .args(["simulate", "--threads", "0"])
        .arg("--config")
        .arg(configs().join("default.json"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
