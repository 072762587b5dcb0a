use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kvlab_core::gates::discretize;
use kvlab_core::ledger::replay_check;

use kvlab::checkpoint::{load_model, read_event_log, save_gates, save_masks, save_model, write_metrics, GateKind};
use kvlab::config::LabConfig;
use kvlab::report::{emit_report, read_results, summarize};
use kvlab::sweep::{run_sweep, SweepInputs};
use kvlab::train;

/// KV cache eviction laboratory.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// TOML config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set chunk_sizes=[16,32]`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set steps=N`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model from scratch on the mixed corpus.
    Pretrain,
    /// Learn PruLong head gates on the frozen model.
    Prulong,
    /// Learn DuoAttention-style head gates on the frozen model.
    Duo,
    /// Run the evaluation grid and write the report.
    Sweep,
    /// Rebuild summary and plots from a results CSV.
    Report {
        /// Defaults to `<out_dir>/results.csv`.
        results: Option<PathBuf>,
    },
    /// Replay an event log and print its footprint and peak KV.
    Footprint { log: PathBuf },
    /// Print the effective config as TOML.
    ShowConfig,
}

impl Cli {
    fn lab_config(&self) -> Result<LabConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(s) = self.steps {
            o.push(format!("steps={s}"));
        }
        if let Some(d) = &self.out_dir {
            o.push(format!("out_dir={:?}", d.display().to_string()));
        }
        LabConfig::load(self.config.as_deref(), &o)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = cli.lab_config()?;
    match &cli.command {
        Command::Pretrain => pretrain(&cfg),
        Command::Prulong => prulong(&cfg),
        Command::Duo => duo(&cfg),
        Command::Sweep => sweep(&cfg),
        Command::Report { results } => report(&cfg, results.clone()),
        Command::Footprint { log } => {
            let r = replay_check(&read_event_log(log)?)?;
            println!("footprint {}", r.footprint);
            println!("peak_kv {}", r.peak_kv);
            println!("steps {}", r.resident_series.len());
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn write_curve(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["step", name])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn pretrain(cfg: &LabConfig) -> Result<()> {
    let (model, losses) = train::pretrain(cfg)?;
    save_model(&cfg.model, &model)?;
    write_curve(&cfg.out_dir.join("pretrain_metrics.csv"), "nll", &losses)?;
    println!("saved {} (final nll {:.4})", cfg.model.display(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn prulong(cfg: &LabConfig) -> Result<()> {
    let model = load_model(&cfg.model)?;
    let (gates, metrics) = train::prulong(cfg, &model)?;
    save_gates(&cfg.gates, GateKind::Prulong, &gates)?;
    write_metrics(&cfg.out_dir.join("prulong_metrics.csv"), &metrics)?;
    let masks = cfg.out_dir.join("masks.csv");
    save_masks(&masks, &discretize(&gates.log_alpha, cfg.target_sparsity)?)?;
    let last = metrics.last().context("zero training steps")?;
    println!(
        "saved {} and {} (expected sparsity {:.4}, target {})",
        cfg.gates.display(),
        masks.display(),
        last.expected_sparsity,
        last.target
    );
    Ok(())
}

fn duo(cfg: &LabConfig) -> Result<()> {
    let model = load_model(&cfg.model)?;
    let (z, losses) = train::duo(cfg, &model)?;
    let mut gates = cfg.gate_params();
    gates.log_alpha = z;
    save_gates(&cfg.duo_gates, GateKind::Duo, &gates)?;
    write_curve(&cfg.out_dir.join("duo_metrics.csv"), "loss", &losses)?;
    println!("saved {}", cfg.duo_gates.display());
    Ok(())
}

fn sweep(cfg: &LabConfig) -> Result<()> {
    let inputs = SweepInputs::load(cfg)?;
    let rows = run_sweep(cfg, &inputs)?;
    let mut failed = 0;
    for r in rows.iter().filter(|r| r.outcome.is_err()) {
        eprintln!("row failed: {r}");
        failed += 1;
    }
    let summary = summarize(&rows, cfg.threshold);
    let files = emit_report(&rows, summary.as_deref().unwrap_or(&[]), &cfg.out_dir, cfg.threshold)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    summary?;
    anyhow::ensure!(failed == 0, "{failed} of {} rows failed", rows.len());
    Ok(())
}

fn report(cfg: &LabConfig, results: Option<PathBuf>) -> Result<()> {
    let path = results.unwrap_or_else(|| cfg.out_dir.join("results.csv"));
    let rows = read_results(&path)?;
    let summary = summarize(&rows, cfg.threshold)?;
    for s in &summary {
        match s.critical {
            Some((fp, setting, chunk)) => println!("{} {}: critical footprint {fp:.4} at {setting}, chunk {chunk}", s.method, s.task),
            None => println!("{} {}: not achieved", s.method, s.task),
        }
    }
    emit_report(&rows, &summary, &cfg.out_dir, cfg.threshold)?;
    Ok(())
}
