use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use prefedit::cli::{self, EditRequest, ReportFormat, RunConfig};
use prefedit::guidance::GuidanceScales;

#[derive(Parser)]
#[command(name = "prefedit", version, about = "Preference-tuned diffusion image editing at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser; writes pretrain.ckpt and pretrain_metrics.csv.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Preference post-training from a base checkpoint.
    Posttrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
    },
    /// Edit one image with a checkpoint.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        style: PathBuf,
        /// Instruction id (1-3) or name (snow, gold, wood).
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value_t = 1.5)]
        s_in: f64,
        #[arg(long, default_value_t = 3.0)]
        s_sty: f64,
        #[arg(long, default_value_t = 7.5)]
        s_t: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional PGM region mask used when printing scores.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out tasks; writes eval.csv and eval.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Pearson correlation and mean maximum rank violation of a policy table.
    Metrics {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
        format: ReportFormat,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            let path = cli::cmd_pretrain(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Posttrain { config, base } => {
            let cfg = RunConfig::load(&config)?;
            let path = cli::cmd_posttrain(&cfg, &base)?;
            println!("wrote {}", path.display());
        }
        Command::Edit {
            ckpt,
            input,
            style,
            instruction,
            s_in,
            s_sty,
            s_t,
            seed,
            out,
            mask,
        } => {
            let req = EditRequest {
                checkpoint: ckpt,
                input,
                style,
                mask,
                instruction,
                scales: GuidanceScales { s_in, s_sty, s_t },
                seed,
                out,
            };
            let scores = cli::cmd_edit(&req)?;
            println!("structural={} semantic={}", scores.structural, scores.semantic);
        }
        Command::Eval { ckpt, config } => {
            let cfg = RunConfig::load(&config)?;
            let r = cli::cmd_eval(&cfg, &ckpt)?;
            println!(
                "tasks={} mean_struct={} mean_sem={} mean_combined={} mean_outside_mse={}",
                r.rows.len(),
                r.mean_struct,
                r.mean_sem,
                r.mean_combined,
                r.mean_outside_mse
            );
        }
        Command::Metrics { table, format } => {
            let m = cli::cmd_metrics(&table).with_context(|| format!("table {}", table.display()))?;
            println!("{}", cli::format_metrics(&m, format));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<prefedit::Error>())
                .map_or("runtime", |e| e.kind());
            let msg = format!("{err:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
