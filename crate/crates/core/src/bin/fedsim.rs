use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim_core::harness::{emit_report, run_experiment, ExperimentConfig, RunOptions};
use fedsim_core::{selftest, FedError, Result};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Deterministic federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Output directory for report.json and metrics.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace one named seed (data, init, training, attack), e.g. `data=7`.
    #[arg(long = "seed-override", value_name = "NAME=U64")]
    seed_override: Vec<String>,
    /// Worker threads for client training.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the Cartesian product of `--vary` values, one output directory per cell.
    Sweep {
        config: PathBuf,
        /// Dotted key and comma-separated values, e.g. `adversary.ratio=0.2,0.4`.
        #[arg(long, required = true)]
        vary: Vec<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| FedError::Parse {
        path: String::new(),
        message: e.to_string(),
    })
}

fn finish_config(value: Value, flags: &RunFlags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json_value(value)?;
    let mut seeds = cfg.seeds();
    for spec in &flags.seed_override {
        let (name, raw) = spec
            .split_once('=')
            .ok_or_else(|| FedError::Config(format!("seed override `{spec}` is not NAME=U64")))?;
        let v: u64 = raw
            .parse()
            .map_err(|_| FedError::Config(format!("seed override `{spec}` has a bad value")))?;
        seeds.set(name, v)?;
    }
    cfg.seeds = Some(seeds);
    Ok(cfg)
}

fn run_one(cfg: &ExperimentConfig, flags: &RunFlags, out: &Path) -> Result<()> {
    let report = run_experiment(cfg, &RunOptions { threads: flags.threads })?;
    let files = emit_report(&report, out)?;
    let m = &report.final_metrics;
    println!("final mean accuracy: {:.2}%", 100.0 * m.accuracy.mean);
    if let Some(i) = m.attack_impact {
        println!("attack impact: {i:.2} points");
    }
    if let Some(a) = m.attack_success_rate {
        println!("attack success rate: {:.2}%", 100.0 * a);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// Parses a sweep value as JSON, falling back to a plain string.
fn sweep_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, dotted: &str, v: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| FedError::Config(format!("`{dotted}`: `{key}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*key).to_string(), v);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn sweep(config: &Path, vary: &[String], flags: &RunFlags) -> Result<()> {
    let base = read_value(config)?;
    let mut axes = Vec::new();
    for spec in vary {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| FedError::Config(format!("--vary `{spec}` is not key=v1,v2")))?;
        let vals: Vec<String> = values.split(',').map(str::to_string).collect();
        axes.push((key.to_string(), vals));
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, vals) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                vals.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    for (idx, cell) in cells.iter().enumerate() {
        let mut value = base.clone();
        for (k, v) in cell {
            set_path(&mut value, k, sweep_value(v))?;
        }
        let label: Vec<String> = cell.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let dir = flags.out.join(format!("cell_{idx:03}"));
        println!("[{}/{}] {}", idx + 1, cells.len(), label.join(" "));
        let cfg = finish_config(value, flags)?;
        run_one(&cfg, flags, &dir)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, flags } => read_value(config)
            .and_then(|v| finish_config(v, flags))
            .and_then(|cfg| run_one(&cfg, flags, &flags.out)),
        Command::Sweep { config, vary, flags } => sweep(config, vary, flags),
        Command::Selftest => {
            let checks = selftest::run();
            let mut ok = true;
            for c in &checks {
                println!("{} {:<14} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(FedError::Config("selftest failed".into()))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
