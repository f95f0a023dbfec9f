use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use integrable::curves::EnsembleConfig;
use integrable::optpde::{LossConfig, RestartResult, SearchResult};
use integrable::presets;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_integrable")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn find_cq_burgers() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    ok(&["find-cq", "--pde", "u*u_x", "--basis", "burgers-kdv", "--seed", "1", "--out", s(&out)]);
    let r = json(&out.join("report.json"));
    let exprs: Vec<&str> = r["solutions"].as_array().unwrap().iter().filter(|x| !x["trivial"].as_bool().unwrap()).map(|x| x["expression"].as_str().unwrap()).collect();
    assert!(exprs.contains(&"1.00*u^2") && exprs.contains(&"1.00*u^3"), "{exprs:?}");
    assert!(out.join("singular_values.csv").exists());
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("seed = 1"));
}

#[test]
fn zero_pde_conserves_the_whole_basis() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    ok(&["find-cq", "--pde", "0", "--seed", "2", "--curves", "40", "--out", s(&out), "--dump-g"]);
    let r = json(&out.join("report.json"));
    assert_eq!(r["M"], 13);
    assert!(out.join("g.csv").exists());
}

#[test]
fn nlse_preset() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("r");
    ok(&["find-cq", "--system", "nlse-preset", "--seed", "1", "--out", s(&out)]);
    assert_eq!(json(&out.join("report.json"))["n_nontrivial"], 2);
}

#[test]
fn parse_errors_exit_2_with_location() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["find-cq", "--pde", "u*u_", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("byte 2"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["search", "--restarts", "0", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("r").exists());
    assert_eq!(run(&["search", "--restarts", "2"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let o = run(&["simulate", "--pde", "u_x", "--ic", "square", "--out", s(&tmp.path().join("q"))]);
    assert_eq!(o.status.code(), Some(2));
}

fn search_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["search", "--restarts", "4", "--epochs", "40", "--curves", "40", "--out", out];
    v.extend_from_slice(extra);
    v
}

fn dir_contents(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn search_is_deterministic_and_resumable() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&search_args(s(&a), &["--seed", "7"]));
    ok(&search_args(s(&b), &["--seed", "7", "--threads", "2"]));
    assert_eq!(dir_contents(&a), dir_contents(&b));

    let r = json(&a.join("search.json"));
    assert_eq!(r["restarts"].as_array().unwrap().len(), 4);

    // interrupted run: drop a restart and the final result, then resume without the seed
    fs::remove_file(b.join("restarts/00002.json")).unwrap();
    fs::remove_file(b.join("search.json")).unwrap();
    ok(&search_args(s(&b), &[]));
    assert_eq!(dir_contents(&a), dir_contents(&b));

    // a different configuration does not silently mix into the directory
    let o = run(&search_args(s(&b), &["--lr", "0.5"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# warmup\nepochs = 50\nk0 = 3\ncurves = 40\nseed = 4\n").unwrap();
    let out = tmp.path().join("w");
    ok(&["warmup", "--config", s(&cfg), "--k0", "2", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(text.contains("k0 = 2") && text.contains("epochs = 50") && text.contains("seed = 4"), "{text}");
    let r = json(&out.join("result.json"));
    assert_eq!(r["k_initial"], 2.0);
    let losses = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 52);
}

#[test]
fn warmup_reaches_kdv() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("w");
    ok(&["warmup", "--seed", "3", "--out", s(&out)]);
    let r = json(&out.join("result.json"));
    assert!(r["k_final"].as_f64().unwrap().abs() < 0.05, "{r}");
    assert!((r["final_loss"].as_f64().unwrap() + 6.0).abs() < 0.5, "{r}");
}

#[test]
fn optimize_from_given_coefficients() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    ok(&["optimize", "--basis", "kdv-diffusion", "--init-coeffs", "1,-6,0.01", "--epochs", "20", "--curves", "40", "--seed", "1", "--out", s(&out)]);
    let r = json(&out.join("result.json"));
    assert_eq!(r["final_coeffs"].as_array().unwrap().len(), 3);
    let o = run(&["optimize", "--basis", "kdv-diffusion", "--init-coeffs", "1,2", "--out", s(&tmp.path().join("p"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_cubic_advection() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    ok(&["simulate", "--pde", "u_x^3", "--ic", "sine", "--monitor", "u*u_xx", "--t-end", "0.5", "--out", s(&out)]);
    let r = json(&out.join("summary.json"));
    let b = &r["break_report"];
    assert!((b["t_b_analytic"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-6);
    let obs = b["t_b_observed"].as_f64().unwrap();
    assert!((1.0 / 6.0..=2.0 / 3.0).contains(&obs));
    assert!(r["monitors"][0]["drift_pre_break"].as_f64().unwrap() < 0.01);
    for f in ["trace.csv", "observables.json", "monitors.csv", "plots/max_u_xx.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let head = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(head.starts_with("t,x,u\n"));
}

#[test]
fn simulate_translation() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    ok(&["simulate", "--pde", "u_x", "--ic", "gaussian", "--n", "512", "--t-end", "2", "--monitor", "u^2", "--out", s(&out)]);
    let r = json(&out.join("summary.json"));
    assert!(r["max_u_change"].as_f64().unwrap() < 1e-3);
    assert!(r["monitors"][0]["drift"].as_f64().unwrap() < 1e-4);
    assert!(r["break_report"].is_null());
}

#[test]
fn blow_up_is_a_partial_success() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("s");
    ok(&["simulate", "--pde", "u^2", "--ic", "sine", "--t-end", "3", "--set", "check_stability=false", "--out", s(&out)]);
    let r = json(&out.join("summary.json"));
    assert!(r["blow_up"].as_f64().unwrap() < 3.0);
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn write_search(dir: &Path, rows: Vec<Vec<f64>>) {
    let terms: Vec<String> = presets::cubic33_pde_basis().iter().map(|e| e.to_string()).collect();
    let restarts = rows
        .into_iter()
        .enumerate()
        .map(|(index, c)| RestartResult {
            index,
            initial_angles: vec![],
            final_angles: vec![],
            final_coeffs: c,
            losses: vec![-1.0],
            final_ncq_smoothed: 1.0,
            final_ncq: 1,
            failed: None,
        })
        .collect();
    let search = SearchResult {
        seed: 0,
        ensemble_seed: 5,
        ensemble: EnsembleConfig { curves: 60, ..Default::default() },
        config: LossConfig::default(),
        pde_basis: terms,
        cq_basis: presets::BURGERS_KDV_CQ.iter().map(|t| integrable::symbolic::parse(t).unwrap().to_string()).collect(),
        restarts,
    };
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("search.json"), serde_json::to_string(&search).unwrap()).unwrap();
}

fn term_vec(terms: &[(&str, f64)]) -> Vec<f64> {
    let names: Vec<String> = presets::cubic33_pde_basis().iter().map(|e| e.to_string()).collect();
    let mut v = vec![0.0; names.len()];
    for (t, c) in terms {
        let want = integrable::symbolic::parse(t).unwrap().to_string();
        v[names.iter().position(|n| *n == want).unwrap()] = *c;
    }
    unit(v)
}

#[test]
fn analyze_synthetic_families() {
    let centers = [
        term_vec(&[("u_xxx", 1.0)]),
        term_vec(&[("u_x^3", 1.0), ("u_x^2*u_xxx", 3.0), ("u_x*u_xxx^2", 3.0), ("u_xxx^3", 1.0)]),
        term_vec(&[("u_xx^2*u_x", 1.0), ("u_xxx", 1.0)]),
        term_vec(&[("u_xxx*u_xx*u", 1.0), ("u_x^2*u_xx", -2.0)]),
    ];
    let mut rng = StdRng::seed_from_u64(11);
    let mut rows = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for i in 0..(8 - k) {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            rows.push(unit(c.iter().map(|x| sign * x * (1.0 + 0.02 * rng.random_range(-1.0..1.0))).collect()));
        }
    }
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("search");
    write_search(&src, rows);
    let out = tmp.path().join("an");
    ok(&["analyze", s(&src), "--out", s(&out)]);
    let cat = json(&out.join("catalog.json"));
    let fams = cat["families"].as_array().unwrap();
    assert_eq!(fams.len(), 4);
    assert_eq!(fams[0]["support"], serde_json::json!(["u_xxx"]));
    assert_eq!(fams[0]["members"], 8);
    assert!(fams[0]["verified"].as_bool().unwrap());
    assert!(out.join("pca.csv").exists() && out.join("families.csv").exists());
}

#[test]
fn analyze_single_solution() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("search");
    write_search(&src, vec![term_vec(&[("u_xxx", 1.0)]); 5]);
    let out = tmp.path().join("an");
    ok(&["analyze", s(&src), "--out", s(&out)]);
    let cat = json(&out.join("catalog.json"));
    assert_eq!(cat["families"].as_array().unwrap().len(), 1);
    assert_eq!(cat["pca"]["degenerate"], true);
}

#[test]
fn analyze_errors() {
    let tmp = TempDir::new().unwrap();
    let o = run(&["analyze", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2));
    let src = tmp.path().join("small");
    write_search(&src, vec![term_vec(&[("u_xxx", 1.0)]); 2]);
    let o = run(&["analyze", s(&src), "--out", s(&tmp.path().join("b"))]);
    assert_eq!(o.status.code(), Some(1));
}
