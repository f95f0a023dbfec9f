//! Subcommand implementations. Each reads resolved [`Settings`] and writes
//! into its run directory only.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{bail, Context};
use integrable::analysis::{build_catalog, CatalogConfig, SolutionSet};
use integrable::cqfinder::{self, find_cqs, required_order, DEFAULT_EPSILON};
use integrable::curves::EnsembleConfig;
use integrable::optpde::{
    cartesian_to_spherical, optimize, restart_angles, run_restarts, Init, LossConfig, LossFamily, Optimizer, Parametrization,
    RestartResult, SearchResult, Trajectory,
};
use integrable::simulator::{self, evolve, monitor_cq, Grid1D, SimConfig};
use integrable::symbolic::{parse, SymbolicError};
use integrable::{presets, Ensemble, Expr};
use log::{info, warn};
use serde::Serialize;

use crate::rundir::{num, RunDir};
use crate::settings::{usage, Settings};

fn parse_expr(src: &str, what: &str) -> anyhow::Result<Expr> {
    parse(src).map_err(|e| match e {
        SymbolicError::Parse { position, message } => {
            usage(format!("cannot parse {what} at byte {position}: {message}\n  {src}\n  {}^", " ".repeat(position.min(src.len()))))
        }
        other => usage(format!("cannot parse {what}: {other}")),
    })
}

/// Comma-separated expressions.
fn parse_list(src: &str, what: &str) -> anyhow::Result<Vec<Expr>> {
    let out: Vec<Expr> = src.split(',').map(|p| parse_expr(p.trim(), what)).collect::<anyhow::Result<_>>()?;
    if out.is_empty() {
        return Err(usage(format!("{what} is empty")));
    }
    Ok(out)
}

fn cq_basis(name: &str) -> anyhow::Result<Vec<Expr>> {
    match presets::cq_basis(name) {
        Some(b) => Ok(b),
        None => parse_list(name, "CQ basis"),
    }
}

fn pde_basis(name: &str) -> anyhow::Result<Vec<Expr>> {
    match presets::pde_basis(name) {
        Some(b) => Ok(b),
        None => parse_list(name, "PDE basis"),
    }
}

fn num_fields(exprs: &[&[Expr]]) -> usize {
    exprs.iter().flat_map(|l| l.iter()).map(Expr::num_fields).max().unwrap_or(1).max(1)
}

fn ensemble_config(s: &Settings, base: EnsembleConfig, fields: usize, order: usize) -> anyhow::Result<EnsembleConfig> {
    let mut c = base;
    c.fields = c.fields.max(fields);
    c.max_order = s.get_or("max_order", order.max(1))?;
    c.curves = s.get_or("curves", c.curves)?;
    c.points = s.get_or("points", c.points)?;
    c.components = s.get_or("components", c.components)?;
    c.width = s.get_or("width", c.width)?;
    c.x_range = (s.get_or("x_min", c.x_range.0)?, s.get_or("x_max", c.x_range.1)?);
    c.mean_range = (s.get_or("mean_min", c.mean_range.0)?, s.get_or("mean_max", c.mean_range.1)?);
    c.amplitude_range = (s.get_or("amplitude_min", c.amplitude_range.0)?, s.get_or("amplitude_max", c.amplitude_range.1)?);
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn seed(s: &Settings) -> anyhow::Result<u64> {
    Ok(s.get("seed")?.expect("seed is resolved before dispatch"))
}

fn ensemble(s: &Settings, cfg: EnsembleConfig) -> anyhow::Result<Ensemble> {
    let es = s.get_or("ensemble_seed", seed(s)?)?;
    info!("sampling {} curves on {} points (seed {es})", cfg.curves, cfg.points);
    Ensemble::sample(cfg, es).context("sampling the curve ensemble")
}

fn loss_config(s: &Settings, base: LossConfig) -> anyhow::Result<LossConfig> {
    let mut c = base;
    c.a = s.get_or("a", c.a)?;
    c.b = s.get_or("b", c.b)?;
    c.epochs = s.get_or("epochs", c.epochs)?;
    c.learning_rate = s.get_or("learning_rate", c.learning_rate)?;
    c.anneal_period = s.get_or("anneal_period", c.anneal_period)?;
    if let Some(o) = s.raw("optimizer") {
        c.optimizer = match o {
            "adam" => Optimizer::adam(),
            "gradient" => Optimizer::Gradient,
            "momentum" => Optimizer::Momentum { beta: s.get_or("momentum", 0.9)? },
            other => return Err(usage(format!("unknown optimizer {other:?} (adam, gradient, momentum)"))),
        };
    }
    if let Some(i) = s.raw("init") {
        c.init = match i {
            "isotropic" => Init::Isotropic,
            "uniform-angles" => Init::UniformAngles,
            other => return Err(usage(format!("unknown init {other:?} (isotropic, uniform-angles)"))),
        };
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn loss_csv(dir: &RunDir, name: &str, losses: &[f64]) -> anyhow::Result<()> {
    dir.write_csv(name, &["epoch", "loss"], losses.iter().enumerate().map(|(i, l)| vec![i.to_string(), num(*l)]))
}

pub fn find_cq(s: &Settings, dir: &RunDir) -> anyhow::Result<()> {
    let (system, base, default_basis) = match s.raw("system") {
        Some(name) => {
            let sys = presets::system(name).ok_or_else(|| usage(format!("unknown system {name:?} (burgers, kdv, nlse-preset, cubic-family)")))?;
            if sys.len() > 1 {
                (sys, presets::nlse_ensemble_config(), "nlse")
            } else {
                (sys, EnsembleConfig::default(), "burgers-kdv")
            }
        }
        None => (parse_list(s.require("pde")?, "PDE")?, EnsembleConfig::default(), "burgers-kdv"),
    };
    let basis = cq_basis(s.raw("basis").unwrap_or(default_basis))?;
    let fields = num_fields(&[&system, &basis]);
    if fields != system.len() {
        return Err(usage(format!("{} equation(s) given for {fields} field(s)", system.len())));
    }
    let cfg = ensemble_config(s, base, fields, required_order(&system, &basis))?;
    let ens = ensemble(s, cfg)?;
    let eps = s.get_or("epsilon", DEFAULT_EPSILON)?;
    let report = find_cqs(&system, &basis, &ens, eps)?;
    dir.write("report.json", format!("{}\n", report.to_json()).as_bytes())?;
    dir.write_csv(
        "singular_values.csv",
        &["index", "sigma", "normalized"],
        report
            .singular_values
            .iter()
            .zip(&report.normalized_singular_values)
            .enumerate()
            .map(|(i, (a, b))| vec![i.to_string(), num(*a), num(*b)]),
    )?;
    let mut files = vec!["config.txt", "report.json", "singular_values.csv"];
    if s.get_or("dump_g", false)? {
        let g = cqfinder::assemble_g(&system, &basis, &ens)?;
        let mut buf = Vec::new();
        g.write_csv(&mut buf)?;
        dir.write("g.csv", &buf)?;
        files.push("g.csv");
    }
    dir.write_manifest("find-cq", Some(seed(s)?), &files)?;
    println!("M = {}, M_T = {}, non-trivial = {}", report.m, report.m_t, report.n_nontrivial);
    for sol in report.nontrivial() {
        println!("  {}", sol.expression);
    }
    Ok(())
}

struct SearchSetup {
    family: LossFamily,
    ens: Ensemble,
    cfg: LossConfig,
}

fn search_setup(s: &Settings) -> anyhow::Result<SearchSetup> {
    let pde = pde_basis(s.raw("pde_basis").unwrap_or("cubic33"))?;
    let cq = cq_basis(s.raw("cq_basis").unwrap_or("burgers-kdv"))?;
    let fields = num_fields(&[&pde, &cq]);
    let ecfg = ensemble_config(s, EnsembleConfig::default(), fields, required_order(&pde, &cq))?;
    let ens = ensemble(s, ecfg)?;
    let cfg = loss_config(s, LossConfig::default())?;
    let family = LossFamily::new(pde, cq, &ens, s.get_or("epsilon", DEFAULT_EPSILON)?)?;
    Ok(SearchSetup { family, ens, cfg })
}

fn restart_file(i: usize) -> String {
    format!("restarts/{i:05}.json")
}

fn completed_restarts(dir: &RunDir, n: usize) -> Vec<RestartResult> {
    (0..n)
        .filter_map(|i| {
            let text = fs::read_to_string(dir.path(&restart_file(i))).ok()?;
            match serde_json::from_str::<RestartResult>(&text) {
                Ok(r) if r.index == i => Some(r),
                _ => {
                    warn!("ignoring unreadable {}", restart_file(i));
                    None
                }
            }
        })
        .collect()
}

pub fn search(s: &Settings, dir: &RunDir) -> anyhow::Result<()> {
    let n: usize = s.get("restarts")?.ok_or_else(|| usage("missing required setting `restarts`"))?;
    if n == 0 {
        return Err(usage("restarts must be at least 1"));
    }
    let seed = seed(s)?;
    let setup = search_setup(s)?;
    let mut done = completed_restarts(dir, n);
    let todo: Vec<usize> = (0..n).filter(|i| !done.iter().any(|r| r.index == *i)).collect();
    if !done.is_empty() {
        info!("resuming: {} of {n} restarts already complete", done.len());
    }
    let write_err = Mutex::new(None);
    let fresh = run_restarts(&setup.family, &setup.cfg, seed, &todo, |r| {
        match &r.failed {
            None => info!("restart {}: loss {:.4}, n_CQ {}", r.index, r.losses.last().copied().unwrap_or(f64::NAN), r.final_ncq),
            Some(why) => warn!("restart {} failed: {why}", r.index),
        }
        if let Err(e) = dir.write_json(&restart_file(r.index), r) {
            write_err.lock().unwrap().get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err.into_inner().unwrap() {
        return Err(e);
    }
    done.extend(fresh);
    done.sort_by_key(|r| r.index);
    let result = SearchResult {
        seed,
        ensemble_seed: setup.ens.seed,
        ensemble: setup.ens.config.clone(),
        config: setup.cfg.clone(),
        pde_basis: setup.family.pde_basis.iter().map(|e| e.to_string()).collect(),
        cq_basis: setup.family.cq_basis.iter().map(|e| e.to_string()).collect(),
        restarts: done,
    };
    dir.write_json("search.json", &result)?;
    dir.write_csv(
        "summary.csv",
        &["index", "final_loss", "n_cq", "failed"],
        result.restarts.iter().map(|r| {
            vec![r.index.to_string(), num(r.losses.last().copied().unwrap_or(f64::NAN)), r.final_ncq.to_string(), r.failed.is_some().to_string()]
        }),
    )?;
    dir.write_manifest("search", Some(seed), &["config.txt", "search.json", "summary.csv", "restarts/"])?;
    let ok = result.restarts.iter().filter(|r| r.converged()).count();
    println!("{ok} of {n} restarts converged");
    if ok == 0 {
        bail!("every restart failed");
    }
    Ok(())
}

#[derive(Serialize)]
struct OptimizeSummary<'a> {
    final_coeffs: &'a [f64],
    final_loss: f64,
    final_ncq: usize,
    pde: String,
    trajectory: &'a Trajectory,
}

pub fn optimize_one(s: &Settings, dir: &RunDir) -> anyhow::Result<()> {
    let setup = search_setup(s)?;
    let n = setup.family.num_terms();
    let init = match s.floats("init_coeffs")? {
        Some(c) => {
            if c.len() != n {
                return Err(usage(format!("init_coeffs has {} entries, the PDE basis has {n}", c.len())));
            }
            cartesian_to_spherical(&c).map_err(|e| usage(e.to_string()))?.1
        }
        None => restart_angles(seed(s)?, s.get_or("restart_index", 0)?, n, setup.cfg.init),
    };
    let traj = optimize(&setup.family, &Parametrization::Sphere, init, &setup.cfg)?;
    if let Some(why) = &traj.failed {
        bail!("optimization failed: {why}");
    }
    let c = &traj.last.coeffs;
    let names: Vec<String> = setup.family.pde_basis.iter().map(|e| e.to_string()).collect();
    let summary = OptimizeSummary {
        final_coeffs: c,
        final_loss: *traj.losses.last().unwrap(),
        final_ncq: setup.family.count(c)?,
        pde: cqfinder::format_combination(c, &names),
        trajectory: &traj,
    };
    dir.write_json("result.json", &summary)?;
    loss_csv(dir, "loss.csv", &traj.losses)?;
    dir.write_manifest("optimize", Some(seed(s)?), &["config.txt", "result.json", "loss.csv"])?;
    println!("final loss {:.4}, n_CQ {}: u_t = {}", summary.final_loss, summary.final_ncq, summary.pde);
    Ok(())
}

#[derive(Serialize)]
struct WarmupSummary {
    k_initial: f64,
    k_final: f64,
    final_loss: f64,
    final_ncq: usize,
    epochs: usize,
}

pub fn warmup(s: &Settings, dir: &RunDir) -> anyhow::Result<()> {
    let pde = presets::kdv_diffusion_pde_basis();
    let cq = cq_basis(s.raw("cq_basis").unwrap_or("burgers-kdv"))?;
    let ecfg = ensemble_config(s, EnsembleConfig::default(), 1, required_order(&pde, &cq))?;
    let ens = ensemble(s, ecfg)?;
    let cfg = loss_config(s, LossConfig::warmup())?;
    let family = LossFamily::new(pde, cq, &ens, s.get_or("epsilon", DEFAULT_EPSILON)?)?;
    let k0 = s.get_or("k0", 5.0)?;
    let param = Parametrization::kdv_diffusion();
    let traj = optimize(&family, &param, vec![k0], &cfg)?;
    if let Some(why) = &traj.failed {
        bail!("warmup failed: {why}");
    }
    let summary = WarmupSummary {
        k_initial: k0,
        k_final: traj.last.params[0],
        final_loss: *traj.losses.last().unwrap(),
        final_ncq: family.count(&traj.last.coeffs)?,
        epochs: cfg.epochs,
    };
    dir.write_json("result.json", &summary)?;
    loss_csv(dir, "loss.csv", &traj.losses)?;
    dir.write_manifest("warmup", Some(seed(s)?), &["config.txt", "result.json", "loss.csv"])?;
    println!("k: {} -> {:.5}, final loss {:.4}", summary.k_initial, summary.k_final, summary.final_loss);
    Ok(())
}

#[derive(Serialize)]
struct Monitor {
    expression: String,
    initial: f64,
    scale: f64,
    drift: f64,
    drift_pre_break: Option<f64>,
}

#[derive(Serialize)]
struct SimSummary {
    system: Vec<String>,
    end_time: f64,
    blow_up: Option<f64>,
    /// Relative change of max|u| over the run.
    max_u_change: f64,
    break_report: Option<simulator::BreakReport>,
    monitors: Vec<Monitor>,
}

fn plot_name(observable: &str) -> String {
    let s: String = observable.replace('|', "_").chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("plots/{}.csv", s.trim_matches('_').replace("__", "_"))
}

pub fn simulate(s: &Settings, dir: &RunDir) -> anyhow::Result<()> {
    let system = parse_list(s.require("pde")?, "PDE")?;
    let fields = num_fields(&[&system]);
    if fields != system.len() {
        return Err(usage(format!("{} equation(s) given for {fields} field(s)", system.len())));
    }
    let n = s.get_or("n", 256usize)?;
    let amplitude = s.get_or("amplitude", 1.0)?;
    let ic = s.raw("ic").unwrap_or("sine");
    let (grid, u0) = match ic {
        "sine" => {
            let g = Grid1D::periodic_2pi(n).map_err(|e| usage(e.to_string()))?;
            let u = g.sample::<f64>(|x| amplitude * x.sin());
            (g, u)
        }
        "gaussian" => {
            let (a, b) = (s.get_or("x_min", -15.0)?, s.get_or("x_max", 15.0)?);
            let g = Grid1D::new(a, b, n, s.get_or("periodic", false)?).map_err(|e| usage(e.to_string()))?;
            let (mu, w) = (s.get_or("center", 0.0)?, s.get_or("width", 1.5)?);
            let u = g.sample::<f64>(|x| amplitude * (-(x - mu) * (x - mu) / (2.0 * w * w)).exp());
            (g, u)
        }
        other => return Err(usage(format!("unknown initial condition {other:?} (sine, gaussian)"))),
    };
    let d = SimConfig::default();
    let cfg = SimConfig {
        t_end: s.get_or("t_end", d.t_end)?,
        dt: s.get_or("dt", d.dt)?,
        snapshot_every: s.get_or("snapshot_every", d.snapshot_every)?,
        filter: s.get("filter")?,
        viscosity: s.get_or("viscosity", d.viscosity)?,
        check_stability: s.get_or("check_stability", d.check_stability)?,
    };
    cfg.validate(&grid).map_err(|e| usage(e.to_string()))?;
    let initial = vec![u0; fields];
    let trace = evolve(&system, &initial, &grid, &cfg)?;
    if let Some(t) = trace.blow_up {
        warn!("solution blew up at t = {t}; trace truncated");
    }

    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    dir.write("trace.csv", &buf)?;
    dir.write_json("observables.json", &trace.observables_json())?;
    for (name, values) in &trace.observables {
        dir.write_csv(&plot_name(name), &["t", name], trace.times.iter().zip(values).map(|(t, v)| vec![num(*t), num(*v)]))?;
    }

    let cubic = system.len() == 1 && system[0] == simulator::cubic_advection();
    let report = if cubic { Some(simulator::break_report(&trace)?) } else { None };
    let tb = report.as_ref().and_then(|r| r.t_b_analytic);
    let monitors_src: Vec<Expr> = match s.raw("monitor") {
        Some(m) => parse_list(m, "monitor")?,
        None => Vec::new(),
    };
    let mut monitors = Vec::new();
    let mut columns = Vec::new();
    for h in &monitors_src {
        let series = monitor_cq(&trace, h)?;
        monitors.push(Monitor {
            expression: h.to_string(),
            initial: series.values[0],
            scale: series.scale(),
            drift: series.drift(),
            drift_pre_break: tb.map(|t| series.drift_before(t)),
        });
        columns.push(series.values);
    }
    if !columns.is_empty() {
        let mut header = vec!["t".to_string()];
        header.extend(monitors.iter().map(|m| m.expression.clone()));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        dir.write_csv("monitors.csv", &header, trace.times.iter().enumerate().map(|(k, t)| {
            let mut row = vec![num(*t)];
            row.extend(columns.iter().map(|c| num(c[k])));
            row
        }))?;
    }

    let max_u = trace.observable("max|u|")?;
    let summary = SimSummary {
        system: trace.system.clone(),
        end_time: trace.end_time(),
        blow_up: trace.blow_up,
        max_u_change: (max_u[max_u.len() - 1] - max_u[0]).abs() / max_u[0].abs().max(f64::MIN_POSITIVE),
        break_report: report,
        monitors,
    };
    dir.write_json("summary.json", &summary)?;
    dir.write_manifest("simulate", s.get("seed")?, &["config.txt", "trace.csv", "observables.json", "plots/", "summary.json"])?;

    println!("simulated to t = {:.4}{}", summary.end_time, if summary.blow_up.is_some() { " (blow-up)" } else { "" });
    if let Some(r) = &summary.break_report {
        println!("break time: analytic {:?}, observed {:?}; decay exponent {:?}", r.t_b_analytic, r.t_b_observed, r.decay_exponent);
    }
    for m in &summary.monitors {
        println!("  {}: drift {:.3e}{}", m.expression, m.drift, m.drift_pre_break.map_or(String::new(), |d| format!(", before break {d:.3e}")));
    }
    Ok(())
}

pub fn analyze(s: &Settings, dir: &RunDir) -> anyhow::Result<()> {
    let src = Path::new(s.require("dir")?);
    if !src.is_dir() {
        return Err(usage(format!("search directory {} does not exist", src.display())));
    }
    let path = src.join("search.json");
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{} is not a search directory: {e}", src.display())))?;
    let search: SearchResult = serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?;
    let set = SolutionSet::from_search(&search)?;
    if set.len() < 4 {
        bail!("need at least 4 completed restarts, found {}", set.len());
    }
    let pde: Vec<Expr> = search.pde_basis.iter().map(|t| parse_expr(t, "PDE basis term")).collect::<anyhow::Result<_>>()?;
    let cq: Vec<Expr> = search.cq_basis.iter().map(|t| parse_expr(t, "CQ basis term")).collect::<anyhow::Result<_>>()?;
    let ens = Ensemble::sample(search.ensemble.clone(), search.ensemble_seed)?;
    let d = CatalogConfig::default();
    let cfg = CatalogConfig {
        cutoff: s.get_or("cutoff", d.cutoff)?,
        max_families: s.get_or("max_families", d.max_families)?,
        epsilon: s.get_or("epsilon", d.epsilon)?,
        a_values: s.floats("a_values")?.unwrap_or(d.a_values),
        pca_components: s.get_or("components", d.pca_components)?,
    };
    let catalog = build_catalog(&set, &pde, &cq, &ens, &cfg)?;
    dir.write("catalog.json", format!("{}\n", catalog.to_json()).as_bytes())?;
    let mut files = vec!["config.txt", "catalog.json", "families.csv"];
    if let Some(p) = &catalog.pca {
        let k = p.components.len();
        let head: Vec<String> = std::iter::once("row".to_string()).chain((1..=k).map(|i| format!("pc{i}"))).collect();
        let head: Vec<&str> = head.iter().map(String::as_str).collect();
        dir.write_csv("pca.csv", &head, p.projections.iter().enumerate().map(|(i, r)| {
            std::iter::once(i.to_string()).chain(r.iter().map(|v| num(*v))).collect()
        }))?;
        let mut head = head;
        head[0] = "term";
        dir.write_csv("pca_components.csv", &head, set.terms.iter().enumerate().map(|(j, t)| {
            std::iter::once(t.clone()).chain(p.components.iter().map(|c| num(c[j]))).collect()
        }))?;
        files.extend(["pca.csv", "pca_components.csv"]);
        if p.degenerate {
            warn!("all solutions coincide; PCA is degenerate");
        }
    }
    dir.write_csv(
        "families.csv",
        &["rank", "members", "support", "pde", "verified", "n_nontrivial"],
        catalog.families.iter().enumerate().map(|(i, f)| {
            vec![
                i.to_string(),
                f.members.to_string(),
                format!("\"{}\"", f.support.join(" ")),
                format!("\"{}\"", f.pde.clone().unwrap_or_default()),
                f.verified.to_string(),
                f.report.as_ref().map_or(0, |r| r.n_nontrivial).to_string(),
            ]
        }),
    )?;
    dir.write_manifest("analyze", Some(search.seed), &files)?;
    println!("{} solutions, {} families", set.len(), catalog.families.len());
    for f in &catalog.families {
        let n = f.report.as_ref().map_or(0, |r| r.n_nontrivial);
        println!("  {:>4}  u_t = {}  ({} non-trivial CQ)", f.members, f.pde.as_deref().unwrap_or("?"), n);
    }
    if catalog.pca.as_ref().is_some_and(|p| p.degenerate) {
        println!("PCA degenerate: all solutions coincide");
    }
    Ok(())
}
