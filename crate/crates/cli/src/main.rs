//! `madm`: dataset generation, training, sampling, evaluation, and
//! ablation studies for 2.5D multi-view averaging diffusion on synthetic
//! paired phantoms.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing dependency
//! (a prerequisite stage has not been run), 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use madm_core::experiments::{Pipeline, RunConfig, Study, TrainTarget, Variant};
use madm_core::Error;

#[derive(Parser)]
#[command(name = "madm", version, about, max_term_width = 100)]
struct Cli {
    /// Run-config JSON file; omit to use a built-in preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in preset used when --config is not given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    PaperScale,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the paired phantom dataset.
    Dataset {
        /// Replace an existing dataset directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train networks: the prior, one view (co|sa|ax), or everything the
    /// configured studies need.
    Train {
        #[arg(long, default_value = "all")]
        target: String,
        /// Continue from an existing optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Run one sampler variant over the test set, e.g. `madm`,
    /// `madm:views=co,ax:t=100:s=8:seed=1`, `mvsd:order=ax,co,sa`,
    /// `prior`, `noprior`.
    Sample {
        #[arg(long, default_value = "madm")]
        variant: String,
    },
    /// Evaluate the degraded input and every sampled variant.
    Eval,
    /// Run an ablation study: views|sequential|context|ts|all.
    Ablate {
        #[arg(long, default_value = "all")]
        study: String,
    },
    /// Summarize eval and ablation tables as markdown.
    Report,
    /// Print the resolved configuration as JSON.
    Config,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk_preset(),
            Preset::PaperScale => RunConfig::paper_scale_preset(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve_config(cli)?;
    let pipeline = Pipeline::new(cfg)?;
    match &cli.cmd {
        Cmd::Dataset { overwrite } => pipeline.build_dataset(*overwrite),
        Cmd::Train { target, resume } => {
            let target: TrainTarget = target.parse()?;
            pipeline.train(target, *resume)
        }
        Cmd::Sample { variant } => {
            let variant = Variant::parse(variant, &pipeline.cfg)?;
            let dir = pipeline.sample_variant(&variant)?;
            log::info!("samples written to {}", dir.display());
            Ok(())
        }
        Cmd::Eval => {
            let dir = pipeline.eval()?;
            log::info!("evaluation written to {}", dir.display());
            Ok(())
        }
        Cmd::Ablate { study } => {
            let study: Study = study.parse()?;
            pipeline.ablate(study)
        }
        Cmd::Report => {
            let path = pipeline.report()?;
            log::info!("report written to {}", path.display());
            Ok(())
        }
        Cmd::Config => {
            println!(
                "{}",
                serde_json::to_string_pretty(&pipeline.cfg).expect("serializable config")
            );
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidSchedule(_) | Error::BadRange { .. } => 2,
        Error::MissingDependency(_) => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
