use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prior_forge::commands::{cmd_ablate, cmd_eval, cmd_fit, cmd_gradcheck, cmd_search};
use prior_forge::config::ExperimentConfig;
use prior_forge::{init_thread_pool, Result};

#[derive(Parser)]
#[command(name = "prior-forge", version, about = "Architecture search for deep image priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a generator architecture on the training images.
    Search {
        #[arg(long)]
        config: PathBuf,
    },
    /// Restore one image with a given genome.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        genome: PathBuf,
    },
    /// Restore every image of a directory with a fixed iteration budget.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        genome: PathBuf,
        #[arg(long)]
        iters: usize,
    },
    /// Compare the baseline, S-U, S-C and full genomes.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

fn run(cli: Cli) -> Result<()> {
    init_thread_pool()?;
    match cli.command {
        Command::Search { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (genome, t_star) = cmd_search(&cfg)?;
            println!("best genome written to {}; t_star = {t_star}", cfg.output_dir.display());
            println!("{}", genome.to_json());
        }
        Command::Fit { config, image, genome } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = cmd_fit(&cfg, &image, &genome)?;
            match r.best_psnr {
                Some(p) => println!("{}: best PSNR {p:.3} dB at iteration {}", r.image_id, r.t_star),
                None => println!("{}: fitted {} iterations", r.image_id, r.t_star),
            }
            println!("restored image: {}", r.restored_png.display());
        }
        Command::Eval { config, dir, genome, iters } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rec = cmd_eval(&cfg, &dir, &genome, iters)?;
            for row in &rec.rows {
                println!("{}: {:.3} dB at {} iterations (best {:.3} dB)", row.image_id, row.psnr_at_iters, iters, row.best_psnr);
            }
            println!("mean: {:.3} dB", rec.aggregate.mean_psnr_at_iters);
        }
        Command::Ablate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{:<9} {:>10} {:>9}", "variant", "mean_psnr", "delta");
            for row in cmd_ablate(&cfg)? {
                println!("{:<9} {:>10.3} {:>+9.3}", row.variant, row.mean_psnr, row.delta_db);
            }
        }
        Command::Gradcheck => {
            cmd_gradcheck(&mut std::io::stdout())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
