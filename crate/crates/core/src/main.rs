use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lrmt::harness::{fit_power_law, read_csv, run_family, write_csv, ExperimentConfig, ExperimentRecord, Family};
use lrmt::synthdata::{write_dataset, linear_spectrum, make_ground_truth, sample_tasks};
use lrmt::{Error, SeededRng};

#[derive(Parser)]
#[command(name = "lrmt", version, about = "Multi-task linear representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a planted multi-task dataset and write it as a binary container.
    Gen {
        #[arg(long, default_value_t = 20)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Number of tasks.
        #[arg(long = "tasks", short = 't', default_value_t = 40)]
        t_count: usize,
        /// Samples per task.
        #[arg(long = "samples", short = 'n', default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 2.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_k: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment family and write `<out>/<family>.csv`.
    Run {
        family: String,
        /// TOML file with one table per family; missing keys keep defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces the configured seed list (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the configured per-task sample sizes (repeatable).
        #[arg(long = "samples")]
        n_values: Vec<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Record wall-clock time per iteration (makes output non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Fit a power law y ∝ x^slope to seed means of each run's last row.
    Fit {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "N")]
        x: String,
        #[arg(long, default_value = "estimation_error")]
        y: String,
        /// Only rows of this method.
        #[arg(long)]
        method: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { d, k, t_count, n, noise, kappa, sigma_k, seed, out } => {
            gen(d, k, t_count, n, noise, kappa, sigma_k, seed, out)
        }
        Command::Run { family, config, seed, out, n_values, iterations, timing } => {
            run(&family, config, seed, out, n_values, iterations, timing)
        }
        Command::Fit { csv, x, y, method } => fit(csv, &x, &y, method.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gen(
    d: usize,
    k: usize,
    t_count: usize,
    n: usize,
    noise: f64,
    kappa: f64,
    sigma_k: f64,
    seed: u64,
    out: PathBuf,
) -> lrmt::Result<ExitCode> {
    let spectrum = linear_spectrum(k, kappa, sigma_k);
    let gt = make_ground_truth(d, k, t_count, &spectrum, noise, &mut SeededRng::new(seed, 0))?;
    let data = sample_tasks(&gt, n, &mut SeededRng::new(seed, 1))?;
    let file = std::io::BufWriter::new(std::fs::File::create(&out)?);
    write_dataset(file, &data, k)?;
    log::info!("wrote d={d} k={k} T={t_count} N={n} to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run(
    family: &str,
    config: Option<PathBuf>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    n_values: Vec<usize>,
    iterations: Option<usize>,
    timing: bool,
) -> lrmt::Result<ExitCode> {
    let family: Family = family.parse()?;
    let mut cfg = match &config {
        Some(path) => ExperimentConfig::from_file(family, path)?,
        None => ExperimentConfig::defaults(family),
    };
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    if !n_values.is_empty() {
        cfg.n_values = n_values;
    }
    if iterations.is_some() {
        cfg.iteration_budget = iterations;
    }
    if let Some(dir) = out {
        cfg.output = dir;
    }
    cfg.timing |= timing;
    let output = run_family(&cfg)?;
    let path = cfg.output.join(format!("{family}.csv"));
    write_csv(&path, &output.records)?;
    log::info!("wrote {} rows to {}", output.records.len(), path.display());
    if output.diverged {
        log::warn!("at least one run diverged; see rows flagged in the diverged column");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn column(r: &ExperimentRecord, name: &str) -> lrmt::Result<Option<f64>> {
    Ok(match name {
        "d" => Some(r.d as f64),
        "k" => Some(r.k as f64),
        "T" => Some(r.t_count as f64),
        "N" => Some(r.n as f64),
        "iteration" => Some(r.iteration as f64),
        "train_loss" => r.train_loss,
        "estimation_error" => r.estimation_error,
        "balance_gap" => r.balance_gap,
        "dist_to_target" => r.dist_to_target,
        "wall_ms" => r.wall_ms,
        other => return Err(Error::Config(format!("unknown column '{other}'"))),
    })
}

fn fit(csv: PathBuf, x: &str, y: &str, method: Option<&str>) -> lrmt::Result<ExitCode> {
    let records = read_csv(&csv)?;
    // last row of every run, keyed by (method, seed, d, k, T, N)
    let mut last: BTreeMap<(String, Option<u64>, usize, usize, usize, usize), &ExperimentRecord> = BTreeMap::new();
    for r in records.iter().filter(|r| method.is_none_or(|m| r.method == m)) {
        let key = (r.method.clone(), r.seed, r.d, r.k, r.t_count, r.n);
        if last.get(&key).is_none_or(|prev| r.iteration >= prev.iteration) {
            last.insert(key, r);
        }
    }
    let mut groups: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in last.values().filter(|r| !r.diverged && r.seed.is_some()) {
        if let (Some(xv), Some(yv)) = (column(r, x)?, column(r, y)?) {
            let g = groups.entry(xv.to_bits()).or_insert((xv, 0.0, 0));
            g.1 += yv;
            g.2 += 1;
        }
    }
    let points: Vec<(f64, f64)> = groups.values().map(|&(xv, sum, count)| (xv, sum / count as f64)).collect();
    let f = fit_power_law(&points)?;
    for (xv, yv) in &points {
        println!("{x}={xv} mean {y}={yv}");
    }
    println!("slope={} intercept={} r2={}", f.slope, f.intercept, f.r2);
    Ok(ExitCode::SUCCESS)
}
