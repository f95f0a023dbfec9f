//! `integrable`: batch runner for conserved-quantity discovery, coefficient
//! search, simulation and family analysis.

mod commands;
mod rundir;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rundir::RunDir;
use settings::{usage, Settings, UsageError};

#[derive(Parser)]
#[command(name = "integrable", version, about = "Find conserved quantities, search for integrable PDEs, simulate and analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Key-value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Extra setting, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Conserved quantities of a PDE or system.
    FindCq {
        /// Equation right-hand sides, comma-separated for systems.
        #[arg(long)]
        pde: Option<String>,
        /// Named system: burgers, kdv, nlse-preset, cubic-family.
        #[arg(long)]
        system: Option<String>,
        /// Named CQ basis or comma-separated expressions.
        #[arg(long)]
        basis: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        curves: Option<usize>,
        /// Also write the conservation matrix.
        #[arg(long)]
        dump_g: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Single coefficient optimization.
    Optimize {
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long)]
        restart_index: Option<usize>,
        /// Comma-separated starting coefficients.
        #[arg(long, allow_hyphen_values = true)]
        init_coeffs: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Multi-restart coefficient search.
    Search {
        #[arg(long)]
        restarts: Option<usize>,
        #[command(flatten)]
        loss: LossArgs,
        #[command(flatten)]
        common: Common,
    },
    /// KdV-with-diffusion warmup.
    Warmup {
        #[arg(long, allow_hyphen_values = true)]
        k0: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        curves: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Method-of-lines simulation with CQ monitoring.
    Simulate {
        #[arg(long)]
        pde: Option<String>,
        /// sine or gaussian.
        #[arg(long)]
        ic: Option<String>,
        /// Densities to monitor, repeatable.
        #[arg(long)]
        monitor: Vec<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        filter: Option<f64>,
        #[arg(long)]
        viscosity: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Family catalog and PCA of a search directory.
    Analyze {
        /// Directory written by `search`.
        dir: Option<PathBuf>,
        #[arg(long)]
        cutoff: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct LossArgs {
    /// Named PDE basis or comma-separated expressions.
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    cq_basis: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    curves: Option<usize>,
    /// isotropic or uniform-angles.
    #[arg(long)]
    init: Option<String>,
}

impl LossArgs {
    fn apply(&self, s: &mut Settings) {
        s.set_opt("pde_basis", self.basis.clone());
        s.set_opt("cq_basis", self.cq_basis.clone());
        s.set_opt("epochs", self.epochs);
        s.set_opt("learning_rate", self.lr);
        s.set_opt("curves", self.curves);
        s.set_opt("init", self.init.clone());
    }
}

type Handler = fn(&Settings, &RunDir) -> anyhow::Result<()>;

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut flags = Settings::default();
    let (name, handler, common, resumable): (&str, Handler, Common, bool) = match cli.command {
        Command::FindCq { pde, system, basis, epsilon, curves, dump_g, common } => {
            flags.set_opt("pde", pde);
            flags.set_opt("system", system);
            flags.set_opt("basis", basis);
            flags.set_opt("epsilon", epsilon);
            flags.set_opt("curves", curves);
            if dump_g {
                flags.set("dump_g", "true");
            }
            ("find-cq", commands::find_cq, common, false)
        }
        Command::Optimize { loss, restart_index, init_coeffs, common } => {
            loss.apply(&mut flags);
            flags.set_opt("restart_index", restart_index);
            flags.set_opt("init_coeffs", init_coeffs);
            ("optimize", commands::optimize_one, common, false)
        }
        Command::Search { restarts, loss, common } => {
            flags.set_opt("restarts", restarts);
            loss.apply(&mut flags);
            ("search", commands::search, common, true)
        }
        Command::Warmup { k0, epochs, lr, curves, common } => {
            flags.set_opt("k0", k0);
            flags.set_opt("epochs", epochs);
            flags.set_opt("learning_rate", lr);
            flags.set_opt("curves", curves);
            ("warmup", commands::warmup, common, false)
        }
        Command::Simulate { pde, ic, monitor, n, dt, t_end, filter, viscosity, common } => {
            flags.set_opt("pde", pde);
            flags.set_opt("ic", ic);
            if !monitor.is_empty() {
                flags.set("monitor", monitor.join(","));
            }
            flags.set_opt("n", n);
            flags.set_opt("dt", dt);
            flags.set_opt("t_end", t_end);
            flags.set_opt("filter", filter);
            flags.set_opt("viscosity", viscosity);
            ("simulate", commands::simulate, common, false)
        }
        Command::Analyze { dir, cutoff, common } => {
            flags.set_opt("dir", dir.map(|d| d.display().to_string()));
            flags.set_opt("cutoff", cutoff);
            ("analyze", commands::analyze, common, false)
        }
    };
    flags.set_opt("seed", common.seed);
    flags.apply_overrides(&common.set)?;

    let mut settings = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    settings.merge(&flags);
    // output location and worker count do not affect results
    let out = common.out.or_else(|| settings.raw("out").map(PathBuf::from)).ok_or_else(|| usage("missing --out directory"))?;
    let threads: Option<usize> = match common.threads {
        Some(t) => Some(t),
        None => settings.get("threads")?,
    };
    let mut settings = settings.without(&["out", "threads"]);
    if name == "search" && settings.get::<usize>("restarts")? == Some(0) {
        return Err(usage("restarts must be at least 1"));
    }

    let dir = RunDir::create(&out)?;
    if let Some(prev) = dir.previous_config()? {
        if resumable {
            // a resumed run keeps the recorded seed unless one is given
            if settings.raw("seed").is_none() {
                if let Some(seed) = prev.raw("seed") {
                    settings.set("seed", seed);
                }
            }
            if prev != settings {
                return Err(usage(format!("{} holds a run with a different configuration", out.display())));
            }
        }
    }
    if settings.raw("seed").is_none() {
        let seed: u64 = rand::random();
        log::info!("no seed given; drew {seed}");
        settings.set("seed", seed.to_string());
    }
    settings.get::<u64>("seed")?;

    if let Some(t) = threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    dir.write_config(&settings)?;
    log::info!("{name}: writing to {}", out.display());
    handler(&settings, &dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
