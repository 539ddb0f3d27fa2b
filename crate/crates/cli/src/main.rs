use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use ttame::attention::Variant;
use ttame::config::{BackboneKind, Config};
use ttame::pipeline::{self, Ablation, ExplainerKind, Measure, Workspace};
use ttame::training::MaskingRule;

/// Train and evaluate attention explanations for toy image classifiers.
#[derive(Parser, Debug)]
#[command(name = "ttame", version)]
struct Cli {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Artifact directory. The dataset lives here too unless TTAME_DATA_DIR
    /// is set.
    #[arg(long, global = true, default_value = "ttame-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural shape dataset.
    GenData,
    /// Pretrain and freeze a backbone.
    TrainBackbone {
        #[arg(long)]
        backbone: BackboneKind,
    },
    /// Train the attention mechanism, picking the peak learning rate on the
    /// validation split.
    TrainExplainer {
        #[arg(long)]
        backbone: BackboneKind,
    },
    /// Write the explanation of one image as a PGM heatmap.
    Explain {
        #[arg(long)]
        backbone: BackboneKind,
        #[arg(long, default_value = "ttame")]
        explainer: ExplainerKind,
        /// Dataset image id.
        #[arg(long)]
        image: u32,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Faithfulness measures on the test split.
    Evaluate {
        #[arg(long)]
        backbone: BackboneKind,
        #[arg(long, default_value = "ttame")]
        explainer: ExplainerKind,
        #[arg(long, value_delimiter = ',', default_value = "adic")]
        measures: Vec<Measure>,
        /// Thresholds (AD/IC) or removal percentages (ROAD).
        #[arg(long, value_delimiter = ',')]
        v: Option<Vec<f64>>,
    },
    /// Cascading randomization of backbone and attention mechanism.
    Sanity {
        #[arg(long)]
        backbone: BackboneKind,
    },
    /// Train and score architecture variants.
    Ablate {
        #[arg(long)]
        backbone: BackboneKind,
        /// Variant names; defaults to the configured set.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        /// Add the full variant trained with the other kind's masking rule.
        #[arg(long)]
        swapped_masking: bool,
    },
}

#[derive(Serialize)]
struct Failure<'a> {
    error: &'a str,
    message: String,
}

fn fail(kind: &str, message: String) -> ExitCode {
    let report = serde_json::to_string(&Failure { error: kind, message }).expect("error report serializes");
    eprintln!("{report}");
    ExitCode::FAILURE
}

fn print(value: &impl Serialize) -> ttame::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> ttame::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.evaluation.options.workers = workers;
    }
    let data_dir = std::env::var_os("TTAME_DATA_DIR").map(PathBuf::from);
    let ws = Workspace::new(cli.out, data_dir);
    match cli.command {
        Command::GenData => print(&pipeline::gen_data(&cfg, &ws)?),
        Command::TrainBackbone { backbone } => print(&pipeline::train_backbone(&cfg, &ws, backbone)?),
        Command::TrainExplainer { backbone } => print(&pipeline::train_explainer(&cfg, &ws, backbone)?),
        Command::Explain { backbone, explainer, image, class } => {
            print(&pipeline::explain(&cfg, &ws, backbone, explainer, image, class)?)
        }
        Command::Evaluate { backbone, explainer, measures, v } => {
            print(&pipeline::evaluate(&cfg, &ws, backbone, explainer, &measures, v.as_deref())?)
        }
        Command::Sanity { backbone } => print(&pipeline::sanity(&cfg, &ws, backbone)?),
        Command::Ablate { backbone, variants, swapped_masking } => {
            let mut entries = match variants {
                Some(vs) => vs.into_iter().map(|variant| Ablation { variant, masking: MaskingRule::Matched }).collect(),
                None => Ablation::from_config(&cfg),
            };
            let swap = Ablation { variant: Variant::Full, masking: MaskingRule::Swapped };
            if swapped_masking && !entries.contains(&swap) {
                entries.push(swap);
            }
            print(&pipeline::ablate(&cfg, &ws, backbone, &entries)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
