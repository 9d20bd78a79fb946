use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histogen_cli::{
    cmd_ablate, cmd_annotate, cmd_evaluate, cmd_gen_data, cmd_gradcheck, cmd_sample, cmd_train, drop_label, CliError,
    Config, EmbeddingSource, CHECKPOINT,
};

#[derive(Parser)]
#[command(name = "histogen", version, about = "Layout-conditioned diffusion on synthetic histology tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and slide.
    GenData(Common),
    /// Train a denoiser from scratch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Where to write the final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate images for the held-out layouts.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples; defaults to `data.n_eval`.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = EmbeddingSource::Raw)]
        embedding_source: EmbeddingSource,
    },
    /// Score samples against the held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Train, sample and evaluate once per condition drop set.
    Ablate(Common),
    /// Run the annotation pipeline over the slide.
    Annotate {
        #[command(flatten)]
        common: Common,
        /// Serve every agent role from this HTTP endpoint instead of the mocks.
        #[arg(long)]
        endpoint_url: Option<String>,
        /// CSV with a `patch_id,score` header, for agreement statistics.
        #[arg(long)]
        human_scores: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck(Common),
}

fn load(common: &Common) -> Result<Config, CliError> {
    let mut config = Config::load(&common.config)?;
    if let Some(out) = &common.out {
        config.paths.out_dir = out.clone();
    }
    Ok(config)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(common) => {
            let config = load(&common)?;
            let data = cmd_gen_data(&config)?;
            println!(
                "wrote {} train / {} eval samples to {}",
                data.train.len(),
                data.eval.len(),
                config.paths.dataset_dir.display()
            );
        }
        Command::Train { common, checkpoint } => {
            let config = load(&common)?;
            let every = (config.train.steps / 20).max(1);
            let summary = cmd_train(&config, checkpoint.as_deref(), |step, loss| {
                if step % every == 0 {
                    eprintln!("step {step:>6}  loss {loss:.5}");
                }
            })?;
            println!(
                "trained {} steps, final loss {:?}, checkpoint {}",
                summary.steps,
                summary.final_loss,
                summary.checkpoint.display()
            );
        }
        Command::Sample {
            common,
            checkpoint,
            n,
            embedding_source,
        } => {
            let config = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| config.paths.out_dir.join(CHECKPOINT));
            let s = cmd_sample(&config, &ckpt, n, embedding_source)?;
            println!("wrote {} samples to {} and {}", s.n, s.container.display(), s.grid.display());
        }
        Command::Evaluate { common, samples } => {
            let config = load(&common)?;
            let r = cmd_evaluate(&config, samples.as_deref())?;
            println!("fid {:.4}  cosine {:.4}  dice {:.4}", r.fid, r.mean_cosine, r.mean_dice);
        }
        Command::Ablate(common) => {
            let config = load(&common)?;
            for row in cmd_ablate(&config)? {
                println!(
                    "{:<28} fid {:>9.4}  dice {:.4}  cosine {:.4}",
                    drop_label(&row.drop),
                    row.fid,
                    row.mean_dice,
                    row.mean_cosine
                );
            }
        }
        Command::Annotate {
            common,
            endpoint_url,
            human_scores,
            workers,
        } => {
            let config = load(&common)?;
            let s = cmd_annotate(&config, endpoint_url.as_deref(), human_scores.as_deref(), workers)?;
            println!("annotated {} patches, skipped {}", s.records, s.skipped);
            if let Some(a) = s.agreement {
                println!("spearman {:.4}  mean |Δ| {:.4}  n {}", a.spearman_rho, a.mean_abs_diff, a.n);
            }
        }
        Command::Gradcheck(common) => {
            let config = load(&common)?;
            let report = cmd_gradcheck(&config)?;
            for c in &report.checks {
                let verdict = if c.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
                println!("{:<14} {:.3e}  ({} probes)  {verdict}", c.op, c.max_rel_error, c.probed);
            }
            if !report.passed {
                return Err(CliError::Check(format!(
                    "relative error above {:e} at eps {:e}",
                    report.tolerance, report.eps
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
