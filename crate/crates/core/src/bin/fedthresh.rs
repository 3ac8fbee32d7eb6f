use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use fedthresh::config::{ScenarioConfig, Seeds};
use fedthresh::error::{Error, Result};
use fedthresh::harness::{self, ResultRow, ScenarioOutput};
use fedthresh::nn::ModelParams;
use fedthresh::report;
use fedthresh::thresholds::MethodTag;

#[derive(Parser)]
#[command(name = "fedthresh", version, about = "Federated autoencoder anomaly thresholds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Restrict to a single threshold method.
    #[arg(long)]
    method: Option<String>,
    /// Override the data, model and partition seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir` or `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shared model with FedAvg and save it with its round log.
    Train(Common),
    /// Select thresholds and report test F1, optionally from a saved model.
    Threshold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Full scenario with every configured method and a summary table.
    Bench(Common),
    /// Repeat the scenario for several client counts.
    SweepClients {
        #[command(flatten)]
        common: Common,
        /// Comma-separated client counts; defaults to `sweep.client_counts`.
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Corrupt a growing set of clients' validation data.
    SweepCorruption {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Summary-statistics feature dataset and its correlation matrix.
    FollowupDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
        /// Local method the federated threshold is compared with.
        #[arg(long, default_value = "local_minmax")]
        local: String,
    },
}

fn load(common: &Common) -> Result<(ScenarioConfig, PathBuf)> {
    let mut cfg = ScenarioConfig::load(&common.config).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })?;
    if let Some(seed) = common.seed {
        cfg.seeds = Seeds::all(seed);
    }
    if let Some(m) = &common.method {
        cfg.methods = vec![m.parse::<MethodTag>()?];
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.output_dir = Some(out.clone());
    Ok((cfg, out))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_config(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()?).map_err(|e| Error::Io { path, source: e })
}

fn write_scenario_extras(out: &ScenarioOutput, dir: &Path, label: &str) -> Result<()> {
    if !out.round_log.is_empty() {
        report::write_round_log(&out.round_log, create(&dir.join("round_log.csv"))?)?;
    }
    if let Some(o) = &out.our_method {
        report::write_overlap_csv(label, o, create(&dir.join("overlap.csv"))?)?;
    }
    Ok(())
}

fn finish(rows: &[ResultRow], dir: &Path) -> Result<()> {
    let written = report::emit_report(rows, dir)?;
    for p in &written {
        info!("wrote {}", p.display());
    }
    print!("{}", report::summary_table(rows));
    Ok(())
}

fn counts_or(given: &[usize], fallback: &[usize], what: &str) -> Result<Vec<usize>> {
    let counts = if given.is_empty() { fallback } else { given };
    if counts.is_empty() {
        return Err(Error::Config(format!("no {what} given on the command line or in the config")));
    }
    Ok(counts.to_vec())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = load(&common)?;
            let prepared = harness::prepare(&cfg)?;
            let fed = harness::train(&cfg, &prepared, None)?;
            save_config(&cfg, &out)?;
            fed.model.save(&out.join("model.txt"))?;
            report::write_round_log(&fed.round_log, create(&out.join("round_log.csv"))?)?;
            let last = fed.round_log.iter().rev().take(cfg.num_clients).map(|e| e.local_final_mse);
            let mean = last.clone().sum::<f64>() / cfg.num_clients as f64;
            println!("trained {} rounds; mean final local MSE {mean:.6}", cfg.fed.rounds);
        }
        Command::Threshold { common, model } => {
            let (cfg, out) = load(&common)?;
            let result = match model {
                Some(path) => {
                    let prepared = harness::prepare(&cfg)?;
                    let model = ModelParams::load(&path)?;
                    harness::evaluate(&cfg, &prepared.clients, &model)?
                }
                None => harness::run_scenario(&cfg)?,
            };
            save_config(&cfg, &out)?;
            write_scenario_extras(&result, &out, &cfg.scenario_id)?;
            finish(&result.rows, &out)?;
        }
        Command::Bench(common) => {
            let (cfg, out) = load(&common)?;
            let result = harness::run_scenario(&cfg)?;
            save_config(&cfg, &out)?;
            write_scenario_extras(&result, &out, &cfg.scenario_id)?;
            finish(&result.rows, &out)?;
        }
        Command::SweepClients { common, counts } => {
            let (cfg, out) = load(&common)?;
            let counts = counts_or(&counts, &cfg.sweep.client_counts, "client counts")?;
            let results = harness::sweep_clients(&cfg, &counts)?;
            save_config(&cfg, &out)?;
            let rows: Vec<ResultRow> = results.into_iter().flat_map(|(_, o)| o.rows).collect();
            finish(&rows, &out)?;
        }
        Command::SweepCorruption { common, counts } => {
            let (cfg, out) = load(&common)?;
            let counts = counts_or(&counts, &cfg.sweep.corrupt_counts, "corrupt counts")?;
            let results = harness::sweep_corruption(&cfg, &counts)?;
            save_config(&cfg, &out)?;
            let rows: Vec<ResultRow> = results.into_iter().flat_map(|(_, o)| o.rows).collect();
            finish(&rows, &out)?;
        }
        Command::FollowupDataset { common, counts, local } => {
            let (cfg, out) = load(&common)?;
            let counts = counts_or(&counts, &cfg.sweep.client_counts, "client counts")?;
            let local: MethodTag = local.parse()?;
            let result = harness::followup_dataset(&cfg, &counts, local)?;
            save_config(&cfg, &out)?;
            for p in report::emit_followup(&result, &out)? {
                info!("wrote {}", p.display());
            }
            println!("{} client rows", result.rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("FEDTHRESH_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    error!("could not size the thread pool: {e}");
                }
            }
            _ => {
                error!("FEDTHRESH_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let top = e.to_string();
            error!("{top}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let msg = s.to_string();
                if !top.contains(&msg) {
                    error!("  caused by: {msg}");
                }
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
