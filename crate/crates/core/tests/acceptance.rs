//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

use std::io::Write;
use std::time::{Duration, Instant};

use integrable::analysis::{build_catalog, CatalogConfig, SolutionSet};
use integrable::cqfinder::{alignment, find_cqs, CqReport, DEFAULT_EPSILON};
use integrable::curves::EnsembleConfig;
use integrable::optpde::{
    angular_distance, finite_difference_gradient, optimize, random_angles, run_search, unit_coeffs, LossConfig, LossFamily, Parametrization,
};
use integrable::simulator::{
    break_time, cubic_advection, decay_exponent, evolve, monitor_cq, observed_break_time, verify_infinite_cqs, Grid1D, SimConfig,
    BREAK_FACTOR,
};
use integrable::symbolic::parse;
use integrable::{presets, Ensemble, Expr};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 2024;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default_ensemble() -> Ensemble {
    Ensemble::sample(EnsembleConfig::default(), SEED).unwrap()
}

/// Unit vector over `basis` with the given term coefficients.
fn vector(basis: &[Expr], terms: &[(&str, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; basis.len()];
    for (t, c) in terms {
        let e = parse(t).unwrap();
        let j = basis.iter().position(|b| *b == e).unwrap_or_else(|| panic!("{t} not in basis"));
        v[j] = *c;
    }
    v
}

fn coeff(basis: &[Expr], c: &[f64], term: &str) -> f64 {
    let e = parse(term).unwrap();
    c[basis.iter().position(|b| *b == e).unwrap()]
}

fn best_alignment(r: &CqReport, target: &[f64]) -> f64 {
    r.nontrivial().map(|s| alignment(&s.coeffs, target)).fold(0.0, f64::max)
}

fn burgers_report(ens: &Ensemble) -> CqReport {
    find_cqs(&[presets::burgers()], &presets::burgers_kdv_cq_basis(), ens, DEFAULT_EPSILON).unwrap()
}

fn kdv_report(ens: &Ensemble) -> CqReport {
    find_cqs(&[presets::kdv()], &presets::burgers_kdv_cq_basis(), ens, DEFAULT_EPSILON).unwrap()
}

fn nlse_report() -> CqReport {
    let ens = Ensemble::sample(presets::nlse_ensemble_config(), SEED).unwrap();
    find_cqs(&presets::nlse_system(), &presets::nlse_cq_basis(), &ens, DEFAULT_EPSILON).unwrap()
}

fn c1_burgers() -> Outcome {
    let t = Instant::now();
    let ens = default_ensemble();
    let r = burgers_report(&ens);
    let basis = presets::burgers_kdv_cq_basis();
    let u2 = best_alignment(&r, &vector(&basis, &[("u^2", 1.0)]));
    let u3 = best_alignment(&r, &vector(&basis, &[("u^3", 1.0)]));
    let residual = r.nontrivial().map(|s| s.residual).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        u2 > 0.999 && u3 > 0.999 && residual < 1e-3 && secs < 60.0,
        format!("align(u^2) {u2:.6}, align(u^3) {u3:.6}, max residual {residual:.1e}, {secs:.1}s"),
    )
}

fn c2_kdv() -> Outcome {
    let r = kdv_report(&default_ensemble());
    let basis = presets::burgers_kdv_cq_basis();
    // non-trivial part of a solution carrying both u^3 and u_x^2
    let ratio = r
        .nontrivial()
        .filter_map(|s| {
            let a = coeff(&basis, &s.coeffs, "u^3");
            let b = coeff(&basis, &s.coeffs, "u_x^2");
            (a.abs() > 1e-3 && b.abs() > 1e-3).then_some(b / a)
        })
        .next();
    let ok = r.m == 6 && r.m - r.m_t == 3 && ratio.is_some_and(|q| (q / 0.5 - 1.0).abs() < 0.1);
    check(ok, format!("M {}, M - M_T {}, u_x^2/u^3 ratio {ratio:?} (expect 0.5)", r.m, r.m - r.m_t))
}

fn c3_nlse() -> Outcome {
    let r = nlse_report();
    let basis = presets::nlse_cq_basis();
    let mass = best_alignment(&r, &vector(&basis, &[("u^2", 1.0), ("v^2", 1.0)]));
    // ½|ψ_x|² + ½|ψ|⁴ with ψ = u + iv
    let energy = best_alignment(&r, &vector(&basis, &[("u_x^2", 1.0), ("v_x^2", 1.0), ("u^4", 1.0), ("v^4", 1.0), ("u^2*v^2", 2.0)]));
    check(mass > 0.999 && energy > 0.999, format!("non-trivial {}, align(mass) {mass:.6}, align(energy) {energy:.6}", r.n_nontrivial))
}

fn c4_gap() -> Outcome {
    let ens = default_ensemble();
    let gaps = [burgers_report(&ens).gap_ratio, kdv_report(&ens).gap_ratio, nlse_report().gap_ratio];
    let ok = gaps.iter().all(|g| g.is_some_and(|g| g > 1e2));
    check(ok, format!("gap ratios burgers {:.2e}, kdv {:.2e}, nlse {:.2e}", gaps[0].unwrap_or(0.0), gaps[1].unwrap_or(0.0), gaps[2].unwrap_or(0.0)))
}

fn c5_warmup() -> Outcome {
    let t = Instant::now();
    let ens = default_ensemble();
    let fam = LossFamily::new(presets::kdv_diffusion_pde_basis(), presets::burgers_kdv_cq_basis(), &ens, DEFAULT_EPSILON).unwrap();
    let cfg = LossConfig::warmup();
    let traj = optimize(&fam, &Parametrization::kdv_diffusion(), vec![5.0], &cfg).unwrap();
    let k = traj.last.params[0];
    let loss = *traj.losses.last().unwrap();
    let secs = t.elapsed().as_secs_f64();
    check(
        traj.failed.is_none() && k.abs() < 0.05 && (loss + 6.0).abs() < 0.5 && secs < 600.0,
        format!("k 5 -> {k:.2e}, final loss {loss:.4}, {} epochs, lr {}, {secs:.1}s", cfg.epochs, cfg.learning_rate),
    )
}

fn c6_gradient() -> Outcome {
    let ens = default_ensemble();
    let fam = LossFamily::new(presets::cubic33_pde_basis(), presets::burgers_kdv_cq_basis(), &ens, DEFAULT_EPSILON).unwrap();
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut checked, mut worst) = (0, 0.0f64);
    while checked < 20 {
        let phi = random_angles(33, &mut rng);
        let (eval, grad) = fam.loss_and_gradient(&Parametrization::Sphere, &phi, &cfg);
        if eval.degenerate_clusters > 0 {
            continue;
        }
        let fd = finite_difference_gradient(&fam, &Parametrization::Sphere, &phi, &cfg, 1e-5);
        let diff = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
        checked += 1;
    }
    check(worst < 1e-4, format!("{checked} points, worst relative error {worst:.2e}"))
}

fn c7_search() -> Outcome {
    let t = Instant::now();
    let ens = default_ensemble();
    let pde = presets::cubic33_pde_basis();
    let cq = presets::burgers_kdv_cq_basis();
    let fam = LossFamily::new(pde.clone(), cq.clone(), &ens, DEFAULT_EPSILON).unwrap();
    let cfg = LossConfig { epochs: 5000, anneal_period: 5000, ..LossConfig::default() };
    let result = run_search(100, &fam, &ens, &cfg, 7, |_| {}).unwrap();
    let uxxx = unit_coeffs(pde.len(), pde.iter().position(|e| *e == parse("u_xxx").unwrap()).unwrap());
    let converged: Vec<_> = result.restarts.iter().filter(|r| r.converged()).collect();
    let near = converged.iter().filter(|r| angular_distance(&r.final_coeffs, &uxxx) < 0.1).count();
    let closest = converged.iter().map(|r| angular_distance(&r.final_coeffs, &uxxx)).fold(f64::INFINITY, f64::min);

    let set = SolutionSet::from_search(&result).unwrap();
    let catalog = build_catalog(&set, &pde, &cq, &ens, &CatalogConfig::default()).unwrap();
    let verified: Vec<String> = catalog
        .families
        .iter()
        .filter(|f| f.verified)
        .map(|f| format!("{} ({} members, {} non-trivial)", f.pde.clone().unwrap_or_default(), f.members, f.report.as_ref().unwrap().n_nontrivial))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    check(
        near >= 1 && !verified.is_empty(),
        format!(
            "{} of 100 converged, {near} within 0.1 rad of u_xxx (closest {closest:.3}), verified families: [{}], {secs:.0}s",
            converged.len(),
            verified.join("; ")
        ),
    )
}

fn c8_cubic_family() -> Outcome {
    let r = find_cqs(&[presets::cubic_family()], &presets::burgers_kdv_cq_basis(), &default_ensemble(), DEFAULT_EPSILON).unwrap();
    let basis = presets::burgers_kdv_cq_basis();
    let sol = r.nontrivial().next();
    let ratio = sol.map(|s| coeff(&basis, &s.coeffs, "u_xx^2") / coeff(&basis, &s.coeffs, "u_x^2"));
    let ok = r.n_nontrivial == 1 && ratio.is_some_and(|q| (q + 1.0).abs() < 0.1);
    check(ok, format!("non-trivial {}: {}, u_xx^2/u_x^2 ratio {ratio:?} (expect -1)", r.n_nontrivial, sol.map_or("-", |s| s.expression.as_str())))
}

fn c9_conservation() -> Outcome {
    let g = Grid1D::new(-15.0, 15.0, 1024, false).unwrap();
    let u0: Vec<f64> = g.sample(|x| (-x * x / (2.0 * 1.5 * 1.5)).exp());
    let tb = break_time(&u0, &g).unwrap().unwrap();
    let cfg = SimConfig { t_end: tb, dt: 1e-3, snapshot_every: 10, ..Default::default() };
    let tr = evolve(&[cubic_advection()], &[u0], &g, &cfg).unwrap();
    let h = monitor_cq(&tr, &parse("u*u_xx").unwrap()).unwrap().drift_before(tb);
    let powers: Vec<f64> = verify_infinite_cqs(&[1, 2, 3, 4, 5], Some((&tr, tb))).unwrap().iter().map(|c| c.drift.unwrap()).collect();
    let worst = powers.iter().cloned().fold(0.0, f64::max);
    check(h < 0.01 && worst < 0.01, format!("t_b {tb:.4}, drift(u*u_xx) {h:.2e}, max drift(u_x^n, n=1..5) {worst:.2e}"))
}

fn c10_break_time() -> Outcome {
    let g = Grid1D::periodic_2pi(256).unwrap();
    let u0: Vec<f64> = g.sample(f64::sin);
    let tb = break_time(&u0, &g).unwrap().unwrap();
    let cfg = SimConfig { t_end: 1.0, dt: 1e-3, snapshot_every: 10, ..Default::default() };
    let tr = evolve(&[cubic_advection()], &[u0], &g, &cfg).unwrap();
    let seen = observed_break_time(&tr, BREAK_FACTOR).unwrap();
    let ok = (tb - 1.0 / 3.0).abs() < 1e-6 && seen.is_some_and(|t| (1.0 / 6.0..=2.0 / 3.0).contains(&t));
    check(ok, format!("analytic t_b {tb:.9}, observed {seen:?}"))
}

fn c11_decay() -> Outcome {
    let g = Grid1D::periodic_2pi(256).unwrap();
    let cfg = SimConfig { t_end: 100.0, dt: 2e-3, snapshot_every: 50, filter: Some(1.0 / 3.0), viscosity: 0.005, check_stability: true };
    let tr = evolve(&[cubic_advection()], &[g.sample(f64::sin)], &g, &cfg).unwrap();
    let p: f64 = decay_exponent(&tr, 1.0 / 3.0).unwrap();
    check((p + 0.5).abs() <= 0.15, format!("fitted exponent {p:.3} over [2/3, 100]"))
}

fn c12_determinism() -> Outcome {
    let a = burgers_report(&default_ensemble()).to_json();
    let b = burgers_report(&default_ensemble()).to_json();
    let search = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let ens = Ensemble::sample(EnsembleConfig::default().with_curves(40), 3).unwrap();
            let fam = LossFamily::new(presets::cubic33_pde_basis(), presets::burgers_kdv_cq_basis(), &ens, DEFAULT_EPSILON).unwrap();
            let cfg = LossConfig { epochs: 50, ..LossConfig::default() };
            serde_json::to_string(&run_search(6, &fam, &ens, &cfg, 11, |_| {}).unwrap()).unwrap()
        })
    };
    let (s1, s4) = (search(1), search(4));
    check(a == b && s1 == s4, format!("CqReport bytes equal: {}, SearchResult bytes equal (1 vs 4 threads): {}", a == b, s1 == s4))
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 12] = [
        ("burgers rediscovery", c1_burgers),
        ("kdv counts", c2_kdv),
        ("nlse system", c3_nlse),
        ("singular-value gap", c4_gap),
        ("warmup optimization", c5_warmup),
        ("gradient fidelity", c6_gradient),
        ("scaled search", c7_search),
        ("discovered-family cq", c8_cubic_family),
        ("simulation conservation", c9_conservation),
        ("break time", c10_break_time),
        ("decay exponent", c11_decay),
        ("determinism", c12_determinism),
    ];
    let mut failed = Vec::new();
    // written to the real stdout so the lines show up without --nocapture
    let mut out = std::io::stdout();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = fmt_time(t.elapsed());
        let line = match &r {
            Ok(d) => format!("PASS {:>2} {name}: {d} [{took}]", i + 1),
            Err(d) => {
                failed.push(i + 1);
                format!("FAIL {:>2} {name}: {d} [{took}]", i + 1)
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn fmt_time(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
