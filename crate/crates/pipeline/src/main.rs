use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shallowdiff::config::{RunConfig, SEED_ENV};
use shallowdiff::run::{self, InferRequest, Mode};
use shallowdiff::{PipelineError, Result};

#[derive(Parser)]
#[command(name = "shallowdiff", version, about = "Shallow diffusion spectrogram model: data, training, inference, analysis")]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in base profile: desk (default) or paper.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData,
    /// Warmup, boundary selection and main-stage training.
    Train,
    /// Generate grids from scores.
    Infer {
        /// naive (T denoiser calls) or shallow (k calls from the aux output)
        #[arg(long)]
        mode: Mode,
        /// Shallow start step; defaults to the trained k.
        #[arg(long)]
        k: Option<usize>,
        /// Scores file; defaults to the dataset's held-out items.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Boundary report CSV and both selected k values.
    Boundary,
    /// KL trajectory and classifier margin for one dataset item.
    Analyze {
        /// Dataset item ID
        #[arg(long)]
        item: usize,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::profile(&cli.profile)?;
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    // a closed stdout (e.g. piped into `head`) must not abort a long run
    let mut log = |line: &str| {
        let _ = writeln!(std::io::stdout(), "{line}");
    };
    match &cli.cmd {
        Cmd::GenData => {
            let g = run::gen_data(&cfg)?;
            if g.clipped_harmonics > 0 {
                eprintln!(
                    "warning: {} harmonic frame placements fell beyond bin {} and were dropped",
                    g.clipped_harmonics,
                    cfg.bins - 1
                );
            }
            println!(
                "wrote {} items ({} train, {} holdout) to {}",
                g.items,
                g.train,
                g.holdout,
                cfg.dataset_dir.display()
            );
        }
        Cmd::Train => {
            let sum = run::cmd_train(&cfg, &mut log)?;
            for (stage, d) in &sum.timings {
                println!("{stage} took {:.1}s", d.as_secs_f64());
            }
            println!("k = {}", sum.k);
        }
        Cmd::Infer { mode, k, scores } => {
            let req = InferRequest {
                mode: *mode,
                k: *k,
                scores: scores.as_deref(),
            };
            run::cmd_infer(&cfg, &req, &mut log)?;
        }
        Cmd::Boundary => {
            let rep = run::cmd_boundary(&cfg)?;
            if !rep.kl_crossed {
                eprintln!("warning: mean trajectory KL never reaches the prior KL");
            }
            match rep.k_classifier {
                Some(k) => println!("k_classifier = {k}"),
                None => println!("k_classifier = none"),
            }
            println!("k_kl = {}", rep.k_kl);
            println!("csv = {}", cfg.output_dir.join("boundary.csv").display());
        }
        Cmd::Analyze { item } => {
            let a = run::cmd_analyze(&cfg, *item)?;
            match a.crossing {
                Some(t) => println!("crossing = {t}"),
                None => println!("crossing = none"),
            }
            println!("csv = {}", a.path.display());
        }
        Cmd::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap would exit with 2 on usage errors, which is reserved for divergence
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    e.exit_code() as u8
}
