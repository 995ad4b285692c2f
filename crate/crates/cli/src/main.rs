use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxfuse::phantom::CohortOptions;
use voxfuse::saliency::Plane;
use voxfuse_cli::commands::{format_summary, phantom_gen, run_from_file, run_gradcam, GradcamArgs, PhantomGenArgs};
use voxfuse_cli::{run_config_schema, CliError, Overrides};

#[derive(Parser)]
#[command(name = "voxfuse", version, about = "Leakage-aware multi-modal 3D CNN experiments on MRI volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a manifest.
    PhantomGen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.43)]
        demented_frac: f64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ventricle radius multiplier for demented phantoms.
        #[arg(long)]
        ventricle_scale: Option<f64>,
        #[arg(long)]
        cortex_thinning: Option<f64>,
        #[arg(long)]
        texture_amplitude: Option<f64>,
        #[arg(long)]
        anatomy_jitter: Option<f64>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Run one experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Export a GradCAM map and overlay for one subject.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        subject: String,
        /// A modality name, or `mean` for the mean over branches.
        #[arg(long, default_value = "T1")]
        branch: String,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value = "axial")]
        plane: Plane,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the JSON Schema of run configs.
    Schema,
}

fn dispatch(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::PhantomGen {
            n,
            demented_frac,
            size,
            seed,
            out,
            ventricle_scale,
            cortex_thinning,
            texture_amplitude,
            anatomy_jitter,
            noise_sigma,
        } => {
            let d = CohortOptions::default();
            let options = CohortOptions {
                size,
                demented_ventricle_scale: ventricle_scale.unwrap_or(d.demented_ventricle_scale),
                cortex_thinning: cortex_thinning.unwrap_or(d.cortex_thinning),
                texture_amplitude: texture_amplitude.unwrap_or(d.texture_amplitude),
                anatomy_jitter: anatomy_jitter.unwrap_or(d.anatomy_jitter),
                noise_sigma: noise_sigma.unwrap_or(d.noise_sigma),
                ..d
            };
            let (manifest, rows) = phantom_gen(&PhantomGenArgs { n, demented_frac, seed, out, options })?;
            print!("{}", format_summary(&manifest, &rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, jobs, output_dir, data_root } => {
            let s = run_from_file(&config, &Overrides { data_root, output_dir, jobs })?;
            match s.roc_auc {
                Some(auc) => println!("{}: accuracy {:.2}%, ROC-AUC {auc:.4}", s.run_dir.display(), s.accuracy),
                None => println!("{}: accuracy {:.2}%", s.run_dir.display(), s.accuracy),
            }
            if s.valid {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("run marked invalid: leakage audit not clean");
                Ok(ExitCode::from(3))
            }
        }
        Command::Gradcam { checkpoint, manifest, data_root, subject, branch, class, plane, index, out } => {
            let o = run_gradcam(&GradcamArgs { checkpoint, manifest, data_root, subject, branch, class, plane, index, out })?;
            println!("{}", o.saliency.display());
            println!("{}", o.overlay.display());
            if let Some(p) = o.stats {
                println!("{}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&run_config_schema()).expect("schema serializes"));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
