use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dapr_core::cache_rl::write_training_curve;
use dapr_core::error::Error;
use dapr_core::harness::{
    metrics_report, pretrain_predictor, read_metrics_csv, run, write_metrics_csv, Policy, ScenarioConfig,
};
use dapr_core::twin::write_heatmap_csv;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dapr", version, about = "Vehicular edge caching simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario under one policy and write per-slot metrics.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "dapr")]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode SAC training curve (learning policies only).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Twin popularity heatmap at the final slot.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Federated round log, one JSON object per line.
        #[arg(long)]
        rounds: Option<PathBuf>,
    },
    /// Pretrain the popularity predictor and write its parameters.
    TrainPredictor {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-epoch losses as JSON.
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Repeat a scenario over parameter values and seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds 0..k.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "dapr")]
        policy: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a metrics CSV as JSON.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    /// Cache capacity per RSU in MB.
    CacheCapacity,
    /// Mean vehicles per region.
    Density,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::CacheCapacity => "cache_capacity",
            SweepParam::Density => "density",
        }
    }

    fn apply(self, cfg: &mut ScenarioConfig, v: f64) {
        match self {
            SweepParam::CacheCapacity => cfg.cache.capacity_mb = v,
            SweepParam::Density => cfg.traffic.vehicles_per_region = v,
        }
    }
}

#[derive(Serialize)]
struct SweepRow<'a> {
    param: &'a str,
    value: f64,
    policy: &'a str,
    seed: u64,
    hit_ratio: f64,
    mean_delay_ms: f64,
    mean_reward: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn policies(names: &[String]) -> Result<Vec<Policy>, Error> {
    names.iter().map(|n| n.parse()).collect()
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate {
            config,
            policy,
            seed,
            out,
            curve,
            heatmap,
            rounds,
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let policy: Policy = policy.parse()?;
            let result = run(&cfg, policy, seed)?;
            let mut w = create(&out)?;
            write_metrics_csv(&mut w, &result.rows)?;
            w.flush()?;
            if let Some(path) = curve {
                write_training_curve(&path, &result.curve)?;
            }
            if let Some(path) = heatmap {
                write_heatmap_csv(&path, result.final_slot, &result.heatmap)?;
            }
            if let Some(path) = rounds {
                let mut w = create(&path)?;
                for r in &result.rounds {
                    serde_json::to_writer(&mut w, r)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            let report = metrics_report(&result.rows)?;
            log::info!(
                "{policy} seed {seed}: hit ratio {:.4}, mean delay {:.1} ms, mean reward {:.3}",
                report.hit_ratio,
                report.mean_delay_ms,
                report.mean_reward
            );
        }
        Command::TrainPredictor {
            config,
            out,
            seed,
            losses,
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let p = pretrain_predictor(&cfg, seed)?;
            let mut w = create(&out)?;
            p.params.write_to(&mut w)?;
            w.flush()?;
            if let Some(path) = losses {
                let mut w = create(&path)?;
                serde_json::to_writer_pretty(&mut w, &p.report.epochs)?;
                w.flush()?;
            }
            if let Some(last) = p.report.epochs.last() {
                log::info!("final joint loss {:.6}", last.total);
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            policy,
            out,
        } => {
            let base = ScenarioConfig::load(&config)?;
            let policies = policies(&policy)?;
            std::fs::create_dir_all(&out)?;
            let mut summary = csv::Writer::from_writer(create(&out.join("sweep.csv"))?);
            for &v in &values {
                let mut cfg = base.clone();
                param.apply(&mut cfg, v);
                cfg.validate()?;
                for &p in &policies {
                    for seed in 0..seeds {
                        let result = run(&cfg, p, seed)?;
                        let file = out.join(format!("{}_{}_{}_s{}.csv", param.name(), v, p, seed));
                        let mut w = create(&file)?;
                        write_metrics_csv(&mut w, &result.rows)?;
                        w.flush()?;
                        let r = metrics_report(&result.rows)?;
                        summary.serialize(SweepRow {
                            param: param.name(),
                            value: v,
                            policy: p.name(),
                            seed,
                            hit_ratio: r.hit_ratio,
                            mean_delay_ms: r.mean_delay_ms,
                            mean_reward: r.mean_reward,
                        })?;
                        log::info!("{}={} {} seed {}: hit ratio {:.4}", param.name(), v, p, seed, r.hit_ratio);
                    }
                }
            }
            summary.flush()?;
        }
        Command::Report { input, out } => {
            let file = File::open(&input).map_err(|e| Error::InvalidArgument(format!("{}: {e}", input.display())))?;
            let rows = read_metrics_csv(file)?;
            let report = metrics_report(&rows)?;
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // A scenario names its trace, so a malformed trace is a config problem too.
        Err(e @ (Error::Config(_) | Error::Trace { .. })) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
