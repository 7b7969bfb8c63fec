//! Command-line driver for normalization experiments.
//!
//! Subcommands: `fit-gmm`, `train`, `eval`, `gradcheck`, `report`.
//! Exit codes: 0 success, 2 configuration error, 3 data/format error,
//! 4 numerical failure.

use acn_core::error::Error;
use acn_core::net::{
    finite_diff_check, read_checkpoint_file, LossKind, NormChoice, ParamSelector, PresetName,
};
use acn_core::runner::{
    evaluate_checkpoint, fit_gmm_for_config, parse_csv, run_experiment, ExperimentConfig, Split,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "acn",
    version,
    about = "Context/mixture/batch normalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir; default "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// error | warn | info | debug | trace
    #[arg(long, default_value = "info")]
    log_level: String,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the mixture a config calls for and write it as JSON.
    FitGmm {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train every configured seed; writes the metrics CSV, a JSON summary,
    /// and one checkpoint per seed.
    Train {
        #[command(flatten)]
        shared: Shared,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient checks across presets and normalization
    /// choices; fails (exit 4) if any check exceeds 1e-4 relative error.
    Gradcheck {
        #[command(flatten)]
        shared: Shared,
    },
    /// Summarize the metrics CSVs in the output directory.
    Report {
        #[command(flatten)]
        shared: Shared,
    },
}

fn init_logging(level: &str) {
    let mut builder = env_logger::Builder::new();
    builder.parse_filters(level);
    let _ = builder.format_timestamp(None).try_init();
}

fn load_config(shared: &Shared) -> Result<ExperimentConfig, Error> {
    let path = shared
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = shared.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

/// --out flag, then the config's out_dir, then "out".
fn resolve_out(shared: &Shared, config: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(out) = &shared.out {
        return out.clone();
    }
    if let Some(dir) = config.and_then(|c| c.out_dir.as_ref()) {
        return PathBuf::from(dir);
    }
    PathBuf::from("out")
}

fn cmd_fit_gmm(shared: &Shared) -> Result<(), Error> {
    let config = load_config(shared)?;
    let out = resolve_out(shared, Some(&config));
    let seed = *config.seeds.first().unwrap();
    let model = fit_gmm_for_config(&config, seed)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join("gmm.json");
    std::fs::write(&path, model.to_json_string()?)?;
    println!(
        "fitted mixture: k={} d={} loglik={:.6} iters={} -> {}",
        model.k(),
        model.d(),
        model.loglik,
        model.iters,
        path.display()
    );
    Ok(())
}

fn cmd_train(shared: &Shared) -> Result<(), Error> {
    let config = load_config(shared)?;
    let out = resolve_out(shared, Some(&config));
    let output = run_experiment(&config, &out)?;
    println!("metrics: {}", output.csv_path.display());
    println!("summary: {}", output.summary_path.display());
    for (seed, path) in &output.checkpoint_paths {
        println!("checkpoint seed {seed}: {}", path.display());
    }
    if let Some((seed, err)) = output.failures.into_iter().next() {
        eprintln!("seed {seed} failed: {err}");
        return Err(err);
    }
    Ok(())
}

fn cmd_eval(shared: &Shared, checkpoint: &std::path::Path) -> Result<(), Error> {
    let config = load_config(shared)?;
    let seed = *config.seeds.first().unwrap();
    let ck = read_checkpoint_file(checkpoint)?;
    let (loss, metrics) = evaluate_checkpoint(&config, seed, &ck)?;
    println!(
        "val: loss={loss:.6} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4}",
        metrics.accuracy, metrics.precision, metrics.recall, metrics.f1
    );
    if !metrics.absent_classes.is_empty() {
        println!(
            "absent classes (count 0 on both axes): {:?}",
            metrics.absent_classes
        );
    }
    Ok(())
}

fn cmd_gradcheck(_shared: &Shared) -> Result<(), Error> {
    let presets = [
        PresetName::Mlp2,
        PresetName::Convnet4,
        PresetName::DomainClf,
    ];
    let choices = [
        NormChoice::Bn,
        NormChoice::Mn,
        NormChoice::Acn,
        NormChoice::AcnBase,
        NormChoice::Identity,
    ];
    let mut worst = 0.0f64;
    let mut failed = false;
    println!(
        "{:<12} {:<10} {:>12}  {}",
        "preset", "norm", "max rel err", "worst parameter"
    );
    for preset in presets {
        for choice in choices {
            let (net, batch) = acn_core::net::kink_free_fixture(preset, choice, 7)?;
            let report = finite_diff_check(
                &net,
                &batch,
                &ParamSelector::All,
                1e-5,
                LossKind::SoftmaxCrossEntropy,
            )?;
            let ok = report.max_rel_err < 1e-4;
            failed |= !ok;
            worst = worst.max(report.max_rel_err);
            println!(
                "{:<12} {:<10} {:>12.3e}  {} [{}]",
                format!("{preset:?}").to_lowercase(),
                choice.to_string(),
                report.max_rel_err,
                report.worst_param,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    if failed {
        return Err(Error::Numerical(format!(
            "gradient check failed (worst relative error {worst:.3e})"
        )));
    }
    println!("all gradient checks passed (worst relative error {worst:.3e})");
    Ok(())
}

fn cmd_report(shared: &Shared) -> Result<(), Error> {
    let out = resolve_out(shared, None);
    let mut found = false;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&out)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    for path in entries {
        found = true;
        let text = std::fs::read_to_string(&path)?;
        let records = parse_csv(&text)?;
        println!("== {}", path.display());
        let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        for seed in seeds {
            let vals: Vec<_> = records
                .iter()
                .filter(|r| r.seed == seed && r.split == Split::Val)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let best = vals
                .iter()
                .max_by(|a, b| {
                    a.accuracy
                        .partial_cmp(&b.accuracy)
                        .unwrap()
                        .then(b.epoch.cmp(&a.epoch))
                })
                .unwrap();
            let last = vals.iter().max_by_key(|r| r.epoch).unwrap();
            println!(
                "  seed {seed}: final val acc {:.4} (loss {:.4}), best epoch {} acc {:.4}",
                last.accuracy, last.loss, best.epoch, best.accuracy
            );
        }
    }
    if !found {
        println!("no metrics CSVs under {}", out.display());
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match &cli.command {
        Command::FitGmm { shared } => {
            init_logging(&shared.log_level);
            cmd_fit_gmm(shared)
        }
        Command::Train { shared } => {
            init_logging(&shared.log_level);
            cmd_train(shared)
        }
        Command::Eval { shared, checkpoint } => {
            init_logging(&shared.log_level);
            cmd_eval(shared, checkpoint)
        }
        Command::Gradcheck { shared } => {
            init_logging(&shared.log_level);
            cmd_gradcheck(shared)
        }
        Command::Report { shared } => {
            init_logging(&shared.log_level);
            cmd_report(shared)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
