use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fewuser::cli::{self, Axis, PreprocessArgs, Replayed};
use fewuser::config::RunConfig;

#[derive(Parser)]
#[command(name = "fewuser", version, about = "Few-shot user geolocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both split.seed and train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Integration,
    Fusion,
    Prompt,
    Tweets,
    Fields,
    Backbone,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Integration => Axis::Integration,
            AxisArg::Fusion => Axis::Fusion,
            AxisArg::Prompt => Axis::Prompt,
            AxisArg::Tweets => Axis::Tweets,
            AxisArg::Fields => Axis::Fields,
            AxisArg::Backbone => Axis::Backbone,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Filter, split and draw shot subsets; writes split_manifest.json.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Shot counts to draw subsets for.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7, 8])]
        shots: Vec<usize>,
    },
    /// Train and evaluate; zero-shot when the shot count is 0.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Sweep one configuration axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Re-run whatever produced a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common, shots: Option<usize>) -> fewuser::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli::apply_overrides(&mut cfg, common.seed, shots)?;
    Ok(cfg)
}

fn execute(command: Command) -> fewuser::Result<String> {
    match command {
        Command::Preprocess { common, shots } => {
            let cfg = load(&common, None)?;
            let m = cli::cmd_preprocess(&PreprocessArgs::from_config(&cfg, shots), &common.out)?;
            Ok(format!(
                "train {} dev {} test {}; subsets for shots {:?}",
                m.split.train_ids.len(),
                m.split.dev_ids.len(),
                m.split.test_ids.len(),
                m.shots
            ))
        }
        Command::Train { common, shots } => {
            let cfg = load(&common, shots)?;
            eprintln!("{}", cli::describe(&cfg));
            cli::cmd_train(&cfg, &common.out)?;
            std::fs::read_to_string(common.out.join("report.txt")).map_err(|e| fewuser::Error::io(&common.out, e))
        }
        Command::Ablate { common, axis, shots } => {
            let cfg = load(&common, shots)?;
            let axis = Axis::from(axis);
            eprintln!("{}", cli::describe(&cfg));
            let entries = cli::cmd_ablate(&cfg, axis, &common.out)?;
            Ok(cli::render_ablation(axis, cli::model_name(&cfg), &entries))
        }
        Command::Replay { manifest, out } => match cli::cmd_replay(&manifest, &out)? {
            Replayed::Split(m) => Ok(format!("split replayed, dataset {}", m.dataset_sha256)),
            Replayed::Run(r) => Ok(format!("run replayed, acc {:.4}", r.averaged.acc)),
            Replayed::Ablation(e) => Ok(format!("ablation replayed, {} columns", e.len())),
        },
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
