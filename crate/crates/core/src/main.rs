use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cls_core::checkpoint::Checkpoint;
use cls_core::harness::{
    evaluate_with, gradient_suite, load_data, pretrain_to, read_results, render_table, summarize,
    write_manifest, write_report, DataSource, ExperimentConfig, GRADCHECK_EPSILON,
};
use cls_core::ltm::Ltm;
use cls_core::Result;

#[derive(Parser)]
#[command(
    name = "cls",
    version,
    about = "Long-term classifier with a one-shot short-term memory and replay consolidation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Omniglot root (holding images_background/ and images_evaluation/) or `synthetic`.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder and classifier; writes ltm.ckpt.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every configured seed and run; writes results.csv, summary.txt, manifest.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Evaluate this seed only instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Pre-trained checkpoint; defaults to <out>/ltm.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the accuracy table for a results CSV.
    Report {
        #[arg(long, default_value = "out/results.csv")]
        results: PathBuf,
        /// Also write summary.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain { common, seed } => {
            let config = load_config(common.config.as_deref())?;
            let start = Instant::now();
            let dataset = load_data(&config, &DataSource::parse(&common.dataset))?;
            eprintln!("loaded {} classes", dataset.num_classes());
            let pre = pretrain_to(&config, &dataset, seed, &common.out)?;
            let r = &pre.report;
            let text = format!(
                "autoencoder steps: {}\nfinal autoencoder loss: {:.6}\nheld-out reconstruction MSE: {:.6}\nall-zero baseline MSE: {:.6}\nclassifier held-out accuracy: {:.4}\nelapsed: {:.1}s\n",
                r.scae_losses.len(),
                r.scae_losses.last().copied().unwrap_or(f64::NAN),
                r.heldout_mse,
                r.zero_baseline_mse,
                r.heldout_accuracy,
                start.elapsed().as_secs_f64()
            );
            std::fs::write(common.out.join("pretrain.txt"), &text)?;
            let curve: String = r.scae_losses.iter().map(|l| format!("{l}\n")).collect();
            std::fs::write(common.out.join("scae_losses.txt"), curve)?;
            std::fs::write(common.out.join("config.toml"), config.to_toml()?)?;
            print!("{text}");
            Ok(true)
        }
        Command::Evaluate {
            common,
            seed,
            checkpoint,
        } => {
            let mut config = load_config(common.config.as_deref())?;
            if let Some(s) = seed {
                config.seeds = vec![s];
            }
            let dataset = load_data(&config, &DataSource::parse(&common.dataset))?;
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("ltm.ckpt"));
            let ltm = Ltm::from_snapshot(&Checkpoint::load(&ckpt)?)?;
            let start = Instant::now();
            let eval = evaluate_with(&config, &dataset, &ltm, |r| {
                eprintln!(
                    "seed {} run {:>2}: ltm {:.2}/{} sti {:.2}/{} lti {:.2}/{} buffer {} ({} novel) {:?} [{:.0}s]",
                    r.seed,
                    r.run_index,
                    r.ltm_all,
                    r.ltm_oneshot,
                    r.sti_all,
                    r.sti_oneshot,
                    r.lti_all,
                    r.lti_oneshot,
                    r.buffer_size,
                    r.buffer_novel,
                    r.status,
                    start.elapsed().as_secs_f64()
                )
            })?;
            write_report(&eval.results, &common.out)?;
            write_manifest(&config, &common.out)?;
            print!("{}", render_table(&eval.summary));
            Ok(true)
        }
        Command::Report { results, out } => {
            let rows = read_results(&results)?;
            let table = render_table(&summarize(&rows));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("summary.txt"), &table)?;
            }
            print!("{table}");
            Ok(true)
        }
        Command::Gradcheck { seed, seeds } => {
            let mut ok = true;
            for s in seed..seed + seeds {
                for (layer, err) in gradient_suite(s)? {
                    let pass = err < 1e-4;
                    ok &= pass;
                    println!(
                        "seed {s} {layer:<10} max relative error {err:.3e} (eps {GRADCHECK_EPSILON:e}) {}",
                        if pass { "ok" } else { "FAIL" }
                    );
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
