use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use pre_lab_core::backbone::FrozenBackbone;
use pre_lab_core::harness::{
    evaluate_checkpoint, load_experiment_config, load_grid, nearest_words, run_ablation_grid,
    run_experiment, run_gradcheck, write_synthetic_task, Checkpoint, Distance, GradCheckConfig,
    SyntheticTaskSpec,
};
use pre_lab_core::train::RunMetrics;
use pre_lab_core::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

/// Prompt learning with a reparameterization encoder, on synthetic tasks.
#[derive(Parser)]
#[command(name = "pre-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task (task.json, features.csv, oracle.json).
    GenData { spec: PathBuf, outdir: PathBuf },
    /// Train one configuration and write metrics, report and checkpoint.
    Train { config: PathBuf },
    /// Score a checkpoint on the config's task.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
    },
    /// Run every cell of an ablation grid.
    Ablate { grid: PathBuf },
    /// Nearest vocabulary words for the raw and reparameterized context.
    Interpret {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, default_value_t = Distance::Euclidean)]
        metric: Distance,
    },
    /// Finite-difference check of the training gradients.
    Gradcheck { config: PathBuf },
}

fn print_metrics(m: &RunMetrics) {
    println!("base accuracy  {:.2}", m.base_acc);
    println!("new accuracy   {:.2}", m.new_acc);
    println!("harmonic mean  {:.2}", m.h_mean);
    println!("final loss     {:.6}", m.final_loss);
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::GenData { spec, outdir } => {
            let spec = SyntheticTaskSpec::load(&spec)?;
            for p in write_synthetic_task(&spec, &outdir)? {
                println!("{}", p.display());
            }
        }
        Command::Train { config } => {
            let cfg = load_experiment_config(&config)?;
            info!("training {} on {}", cfg.run_id, cfg.task_dir.display());
            let out = run_experiment(&cfg)?;
            print_metrics(&out.metrics);
            println!("metrics        {}", out.metrics_path.display());
            println!("checkpoint     {}", out.checkpoint_path.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_experiment_config(&config)?;
            print_metrics(&evaluate_checkpoint(&cfg, &checkpoint)?);
        }
        Command::Ablate { grid } => {
            let grid = load_grid(&grid)?;
            let results = run_ablation_grid(&grid)?;
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            println!(
                "{} cells, {failed} failed, written to {}",
                results.len(),
                grid.output.display()
            );
            if failed > 0 {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Interpret {
            checkpoint,
            top,
            metric,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let backbone = FrozenBackbone::new(ck.backbone.clone(), &ck.class_names)?;
            let state = ck.to_state(backbone.width())?;
            let raw = nearest_words(state.context.vectors(), backbone.vocab(), top, metric)?;
            let encoded = nearest_words(&state.reparameterized()?, backbone.vocab(), top, metric)?;
            println!("V ({metric})");
            print!("{raw}");
            println!("F(V) ({metric})");
            print!("{encoded}");
        }
        Command::Gradcheck { config } => {
            let cfg = GradCheckConfig::load(&config)?;
            let report = run_gradcheck(&cfg)?;
            print!("{report}");
            if !report.passed() {
                eprintln!("gradient check failed (tolerance {:e})", report.tolerance);
                return Ok(EXIT_GRADCHECK);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<Error>())
                .is_some_and(Error::is_validation);
            ExitCode::from(if validation {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            })
        }
    }
}
