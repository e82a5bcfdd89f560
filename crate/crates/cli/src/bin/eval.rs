//! Evaluation report runner: transfer, ablation, and generalization.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hypercast_core::config::load_config;
use hypercast_core::error::{Error, Result};
use hypercast_core::experiments::{run_ablation, run_generalization, run_transfer_experiment};
use hypercast_core::pipeline::SimIo;

#[derive(Parser)]
#[command(name = "eval", about = "Experiment reports", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Foundation-to-expert transfer efficiency report.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding-pathway ablation report.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Withheld-task generalization report.
    Generalization {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_rows<T: serde::Serialize>(out: &PathBuf, rows: &[T]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    for row in rows {
        let line =
            serde_json::to_string(row).map_err(|e| Error::Config(format!("encode: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Transfer { config, out } => {
            let run = load_config(&config)?;
            let (report, _) = run_transfer_experiment(&run, SimIo::default())?;
            write_rows(&out, &report.rows)?;
            for row in &report.rows {
                println!(
                    "surface {} {:4} {:24} fm {:+.3}%  expert {:+.3}%  tr {}",
                    row.surface,
                    row.task_kind,
                    row.task,
                    row.fm_diff_pct,
                    row.expert_diff_pct,
                    row.transfer_ratio
                        .map(|t| format!("{t:.4}"))
                        .unwrap_or_else(|| "undefined".into()),
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Ablation { config, out } => {
            let run = load_config(&config)?;
            let (report, _) = run_ablation(&run, SimIo::default())?;
            write_rows(&out, &report.rows)?;
            for row in &report.rows {
                println!(
                    "{:24} baseline {:.4}  +ue {:+.3}%  +tae {:+.3}%  +ue+tae {:+.3}%",
                    row.task, row.ne_baseline, row.diff_ue_pct, row.diff_tae_pct, row.diff_ue_tae_pct
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Generalization { config, out } => {
            let run = load_config(&config)?;
            let (report, _) = run_generalization(&run, SimIo::default())?;
            write_rows(&out, &report.rows)?;
            for row in &report.rows {
                println!(
                    "{:24} mean diff {:+.3}%  per-seed {:?}",
                    row.task, row.mean_diff_pct, row.diff_pct_by_seed
                );
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
