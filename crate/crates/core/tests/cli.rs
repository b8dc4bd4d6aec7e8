//! End-to-end runs of the `heatvol` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use heatvol::cli::{manifest_path, RunManifest};
use tempfile::TempDir;

const BNS: &str = r#"
[space]
theta_max = 2.0
rank = 6

[drift]
outer = [1.0, 0.5, 0.3333333333333333, 0.25, 0.2, 0.16666666666666666]
scale = 0.4

[[m_atoms]]
weight = 2.0
jump = { outer = [1.0, 0.5, 0.3333333333333333, 0.25, 0.2, 0.16666666666666666], scale = 0.15 }

[initial]
x0 = { diag = [0.2, 0.1, 0.05] }
f0 = { hump = { level = 0.3, amplitude = 1.0, center = 0.8, width = 0.4 } }

[market]
t = 0.25
tau1 = 0.5
tau2 = 1.0
strike = [0.8, 1.0]

[quad]
n_nodes = 128

[sim]
horizon = 0.5
dt = 0.05
paths = 50
seed = 3
"#;

const DETERMINISTIC: &str = r#"
[space]
theta_max = 2.0
rank = 6

[initial]
f0 = { coeffs = [1.0, 0.3, 0.1] }

[market]
t = 0.25
tau1 = 0.5
tau2 = 1.0
strike = 0.2
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn file(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn heatvol(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heatvol"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("HEATVOL_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn validate_accepts_admissible_config() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let out = s.path("report.json");
    let o = heatvol(&cfg, &["validate", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = stdout_json(&o);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
    assert!(manifest_path(&out).exists());
}

#[test]
fn validate_names_the_violated_drift_condition() {
    let s = Sandbox::new();
    // the drift no longer dominates the compensated small jumps
    let cfg = s.file("bad.toml", &BNS.replace("scale = 0.4", "scale = 0.1"));
    let o = heatvol(&cfg, &["validate"]);
    assert_eq!(code(&o), 1);
    let report = stdout_json(&o);
    let ii = report["checks"].as_array().unwrap().iter().find(|c| c["item"] == "ii").unwrap();
    assert_eq!(ii["passed"], false);
    assert!(String::from_utf8_lossy(&o.stderr).contains("(ii)"));
}

#[test]
fn malformed_toml_is_a_usage_error() {
    let s = Sandbox::new();
    let cfg = s.file("broken.toml", "[space\ntheta_max = ");
    assert_eq!(code(&heatvol(&cfg, &["validate"])), 2);
    let unknown = s.file("unknown.toml", "[space]\ntheta_max = 2.0\nrank = 4\nbogus = 1\n");
    assert_eq!(code(&heatvol(&unknown, &["validate"])), 2);
    let missing = s.path("missing.toml");
    assert_eq!(code(&heatvol(&missing, &["validate"])), 2);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    assert_eq!(code(&heatvol(&cfg, &["simulate", "--bogus"])), 2);
}

#[test]
fn riccati_from_zero_is_zero() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let out = s.path("traj.csv");
    let o = heatvol(&cfg, &["riccati", "--T", "1.0", "--steps", "50", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&out).unwrap();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.unwrap();
        assert!(rec.iter().skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0));
        rows += 1;
    }
    assert_eq!(rows, 51);
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&out)).unwrap()).unwrap();
    assert_eq!(m.command, "riccati");
    assert!(m.args.contains(&"--steps".to_string()));
}

#[test]
fn riccati_reads_u2_file_and_rejects_large_rank() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let rows: Vec<String> = (0..6)
        .map(|i| (0..6).map(|j| if i == j { "1.0" } else { "0.0" }).collect::<Vec<_>>().join(","))
        .collect();
    let u2 = s.file("u2.csv", &rows.join("\n"));
    let out = s.path("traj.csv");
    let o = heatvol(
        &cfg,
        &["riccati", "--u2-file", u2.to_str().unwrap(), "--T", "0.5", "--rank", "4", "--out", out.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    // Phi grows from zero for a nonzero input
    assert!(summary["phi"].as_f64().unwrap() > 0.0);
    let o = heatvol(&cfg, &["riccati", "--T", "0.5", "--rank", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn deterministic_price_is_intrinsic() {
    let s = Sandbox::new();
    let cfg = s.file("det.toml", DETERMINISTIC);
    let o = heatvol(&cfg, &["price", "--n-nodes", "64"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let rec = &v[0];
    let fwd = rec["forward"].as_f64().unwrap();
    let price = rec["price"].as_f64().unwrap();
    assert!((price - (fwd - 0.2).max(0.0)).abs() < 1e-6, "{price} vs {fwd}");
}

#[test]
fn price_window_outside_domain_is_a_usage_error() {
    let s = Sandbox::new();
    let cfg = s.file("det.toml", DETERMINISTIC);
    let o = heatvol(&cfg, &["price", "--tau2", "2.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn price_ladder_is_monotone() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let out = s.path("prices.json");
    let o = heatvol(&cfg, &["price", "--strike", "0.6,0.8,1.0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let prices: Vec<f64> = v.as_array().unwrap().iter().map(|r| r["price"].as_f64().unwrap()).collect();
    assert_eq!(prices.len(), 3);
    assert!(prices.windows(2).all(|w| w[1] <= w[0]), "{prices:?}");
}

#[test]
fn simulate_repeats_byte_for_byte() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let a = s.path("a.csv");
    let b = s.path("b.csv");
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = heatvol(&cfg, &["--threads", threads, "simulate", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m: RunManifest = serde_json::from_slice(&std::fs::read(manifest_path(&a)).unwrap()).unwrap();
    assert_eq!(m.seed, Some(3));
}

#[test]
fn thread_count_falls_back_to_environment() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let a = s.path("a.jsonl");
    let b = s.path("b.jsonl");
    let o = heatvol(&cfg, &["simulate", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_heatvol"))
        .arg("--config")
        .arg(&cfg)
        .args(["simulate", "--out", b.to_str().unwrap()])
        .env("HEATVOL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 50);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["times"].as_array().unwrap().len(), 11);
}

#[test]
fn simulate_without_noise_transports_the_curve() {
    let s = Sandbox::new();
    let cfg = s.file("det.toml", DETERMINISTIC);
    let out = s.path("p.csv");
    let o = heatvol(&cfg, &["simulate", "--T", "0.5", "--dt", "0.1", "--paths", "3", "--record", "terminal", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let basis = heatvol::spectral_basis::EigenBasis::new(heatvol::spectral_basis::SpaceConfig::new(2.0, 6)).unwrap();
    let f0 = heatvol::spectral_basis::CurveCoeffs::from_vec(vec![1.0, 0.3, 0.1, 0.0, 0.0, 0.0]);
    let want = basis.shift_apply(0.5, &f0).unwrap();
    let mut r = csv::Reader::from_path(&out).unwrap();
    let terminal: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).filter(|x| &x[1] == "1").collect();
    assert_eq!(terminal.len(), 3);
    for rec in terminal {
        for i in 0..6 {
            let got: f64 = rec[3 + i].parse().unwrap();
            assert!((got - want.as_slice()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn converge_writes_table_and_plot() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let out = s.path("conv.csv");
    let o = heatvol(&cfg, &["converge", "--ranks", "2,4,6", "--T", "0.5", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["nonincreasing"], true);
    let mut r = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][1].parse::<f64>().unwrap(), 0.0);
    // the C column is the Galerkin error quantity of the same model
    let model = heatvol::cli::ModelConfig::parse(BNS).unwrap().params().unwrap();
    let id = heatvol::operator_space::RealOp::identity(6);
    let c2 = heatvol::riccati::galerkin_error_quantity(&model, &id, 2).unwrap();
    assert!((rows[0][2].parse::<f64>().unwrap() - c2).abs() < 1e-15);
    let svg = std::fs::read_to_string(out.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    assert!(manifest_path(&out).exists());
}

#[test]
fn converge_price_mode() {
    let s = Sandbox::new();
    let cfg = s.file("bns.toml", BNS);
    let out = s.path("rob.csv");
    let o = heatvol(&cfg, &["converge", "--mode", "price", "--ranks", "3,6", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("d,price,abs_diff,c_proxy,runtime_ms"));
    assert_eq!(text.lines().count(), 3);
}
