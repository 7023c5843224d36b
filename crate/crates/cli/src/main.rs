use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use unlinked_cli::config::{parse_methods, ExperimentConfig, Method};
use unlinked_cli::real::{self, Blocking, RealOptions};
use unlinked_cli::study;
use unlinked_core::baselines::{areal_gp_fit, gp_fit, OptimOptions};
use unlinked_core::record::Record;
use unlinked_core::repair::{fit, FitConfig};
use unlinked_core::simulate::{simulate, Dataset, PermSpec, SimConfig};

#[derive(Parser)]
#[command(name = "unlinked", version, about = "Doubly-unlinked regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Comma-separated subset of repair, fullgp, arealgp, oracle.
    #[arg(long)]
    methods: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset from the first grid cell.
    Simulate(Common),
    /// Fit a CSV with columns x1,x2,X,Y,block_id.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Input table.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the simulation grid.
    Study(Common),
    /// Block, shuffle and refit a linked real table.
    Real {
        #[command(flatten)]
        common: Common,
        /// Input table with columns x1,x2,X,Y. Defaults to the file named by
        /// UNLINKED_MEUSE_CSV, or a synthetic stand-in when that is unset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated partitions such as 15x10,30x5.
        #[arg(long, default_value = "15x10,30x5")]
        blockings: String,
        /// Rows dropped at random before blocking.
        #[arg(long, default_value_t = 5)]
        drop: usize,
        /// Replace the outcome by ln(1 + Y).
        #[arg(long)]
        log1p_y: bool,
    },
    /// Re-aggregate replicates.csv in a study directory into metrics.csv.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = &c.methods {
        cfg.methods = parse_methods(m)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_record(path: &Path, r: &Record) -> Result<()> {
    fs::write(path, r.to_string()).with_context(|| format!("writing {}", path.display()))
}

fn cmd_simulate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let (k, b, beta) = cfg.cells()[0];
    let spec = |h| match h {
        unlinked_cli::config::HammingChoice::Fixed(h) => PermSpec::Hamming(h),
        unlinked_cli::config::HammingChoice::Random => PermSpec::RandomHamming,
    };
    let sim = SimConfig { k, b, beta, cov: cfg.cov, perm_x: spec(cfg.h_x), perm_s: spec(cfg.h_s), seed: cfg.seed };
    let d = simulate(&sim)?;
    fs::create_dir_all(&cfg.out_dir)?;
    d.write_csv(File::create(cfg.out_dir.join("data.csv"))?)?;
    let t = d.truth.as_ref().expect("simulated data carry truth");
    let mut r = Record::new();
    r.push_f64("beta", t.beta);
    r.push("pi_x", t.pi_x.to_string());
    r.push("pi_s", t.pi_s.to_string());
    r.push_f64("sigma2", cfg.cov.sigma2);
    r.push_f64("phi", cfg.cov.phi);
    r.push_f64("tau2", cfg.cov.tau2);
    r.push("seed", cfg.seed.to_string());
    write_record(&cfg.out_dir.join("truth.txt"), &r)?;
    println!("wrote {} rows to {}", d.n(), cfg.out_dir.join("data.csv").display());
    Ok(())
}

fn cmd_fit(c: &Common, data: &Path) -> Result<()> {
    let cfg = load_config(c)?;
    let d = Dataset::read_csv(File::open(data).with_context(|| format!("opening {}", data.display()))?)
        .with_context(|| format!("in {}", data.display()))?;
    fs::create_dir_all(&cfg.out_dir)?;
    for &m in &cfg.methods {
        let rec = match m {
            Method::Repair => {
                let fc = FitConfig { seed: cfg.seed, ..cfg.fit.clone() };
                let rep = fit(&d, &cfg.priors, &fc)?;
                rep.write_elbo_csv(File::create(cfg.out_dir.join("repair_elbo.csv"))?)?;
                rep.to_record()
            }
            // the table is taken as correctly linked
            Method::FullGp => gp_fit(&d.points, &d.x, &d.y, &cfg.baseline_init, &OptimOptions::default())?.to_record("fullgp"),
            Method::ArealGp => areal_gp_fit(&d, &cfg.baseline_init)?.to_record("arealgp"),
            Method::Oracle => bail!("the oracle method needs the true covariance and is simulation-only"),
        };
        print!("{rec}");
        write_record(&cfg.out_dir.join(format!("{m}.txt")), &rec)?;
    }
    Ok(())
}

fn cmd_study(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let out = study::run_simulation_study(&cfg, c.jobs)?;
    study::write_metrics_csv(&out.metrics, std::io::stdout())?;
    Ok(())
}

fn cmd_real(c: &Common, data: Option<&Path>, blockings: &str, drop: usize, log1p_y: bool) -> Result<()> {
    let mut cfg = load_config(c)?;
    if c.methods.is_none() {
        cfg.methods = vec![Method::ArealGp, Method::Repair, Method::FullGp];
    }
    let env_path = std::env::var_os(real::MEUSE_ENV).map(PathBuf::from);
    let rows = match data.map(Path::to_path_buf).or(env_path) {
        Some(p) => {
            let f = File::open(&p).with_context(|| format!("opening {}", p.display()))?;
            real::read_table(f).with_context(|| format!("in {}", p.display()))?
        }
        None => {
            eprintln!("no input table given; using the synthetic stand-in");
            real::synthetic_standin(155, -0.3, cfg.seed)?
        }
    };
    let blockings: Vec<Blocking> = blockings.split(',').map(str::parse).collect::<Result<_>>()?;
    let opts = RealOptions {
        blockings,
        drop,
        seed: cfg.seed,
        log1p_outcome: log1p_y,
        methods: cfg.methods.clone(),
        fit: cfg.fit.clone(),
        priors: cfg.priors,
        baseline_init: cfg.baseline_init,
    };
    let table = real::run_real_data(&rows, &opts)?;
    fs::create_dir_all(&cfg.out_dir)?;
    real::write_real_csv(&table, File::create(cfg.out_dir.join("real.csv"))?)?;
    real::write_real_csv(&table, std::io::stdout())?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(c) => cmd_simulate(&c),
        Command::Fit { common, data } => cmd_fit(&common, &data),
        Command::Study(c) => cmd_study(&c),
        Command::Real { common, data, blockings, drop, log1p_y } => {
            cmd_real(&common, data.as_deref(), &blockings, drop, log1p_y)
        }
        Command::Report { out } => {
            let m = study::report(&out)?;
            study::write_metrics_csv(&m, std::io::stdout())
        }
    }
}
