use std::path::PathBuf;
use std::process::ExitCode;

use adas_mtl::model::{BackboneConfig, ModalityConfig};
use adas_mtl::pipeline::{
    run_ablation, run_until, write_ablation_csv, ExperimentConfig, PipelineOutcome, Stage, MANIFEST_FILE,
};
use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adas-mtl", version, about = "Multi-task ADAS-Cog prediction experiments")]
struct Cli {
    /// Log level used when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and phantom volumes.
    Synth(Common),
    /// Register, bias-correct and normalize every volume.
    Preprocess(Common),
    /// Train a model and write the checkpoint, history and split.
    Train(Common),
    /// Score the checkpoint on the validation subjects.
    Evaluate(Common),
    /// Shapley attributions for validation subjects.
    Explain(Common),
    /// Train one model per input modality on a shared split and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Variants to compare, in table order.
        #[arg(long, value_delimiter = ',', default_values = ["clinical", "mri", "both"])]
        variants: Vec<Modality>,
    },
    /// Every stage through the final report.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    modality: Option<Modality>,
    #[arg(long, value_enum)]
    backbone: Option<Backbone>,
    /// Weight of the global-score term in the training loss.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Modality {
    Clinical,
    Mri,
    Both,
}

impl From<Modality> for ModalityConfig {
    fn from(m: Modality) -> Self {
        match m {
            Modality::Clinical => ModalityConfig::clinical_only(),
            Modality::Mri => ModalityConfig::mri_only(),
            Modality::Both => ModalityConfig::combined(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Backbone {
    Vit,
    Swin,
    None,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(m) = self.modality {
            cfg.modality = m.into();
        }
        if let Some(b) = self.backbone {
            let preset = match b {
                Backbone::Vit => BackboneConfig::vit(),
                Backbone::Swin => BackboneConfig::swin(),
                Backbone::None => BackboneConfig::none(),
            };
            cfg.backbone = BackboneConfig {
                input_shape: cfg.backbone.input_shape,
                ..preset
            };
        }
        if let Some(alpha) = self.alpha {
            cfg.train.alpha = alpha;
        }
        Ok(cfg)
    }
}

fn print_outcome(cfg: &ExperimentConfig, outcome: &PipelineOutcome) {
    let names = |v: &[Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
    println!("executed: [{}]", names(&outcome.executed));
    println!("skipped: [{}]", names(&outcome.skipped));
    if !outcome.not_applicable.is_empty() {
        println!("not applicable: [{}]", names(&outcome.not_applicable));
    }
    println!(
        "{} files listed in {}",
        outcome.manifest.files.len(),
        cfg.output_dir.join(MANIFEST_FILE).display()
    );
}

fn stage_command(common: &Common, last: Stage) -> anyhow::Result<()> {
    let cfg = common.load()?;
    let outcome = run_until(&cfg, last).with_context(|| format!("running pipeline into {}", cfg.output_dir.display()))?;
    print_outcome(&cfg, &outcome);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(c) => stage_command(&c, Stage::Synth),
        Command::Preprocess(c) => stage_command(&c, Stage::Preprocess),
        Command::Train(c) => stage_command(&c, Stage::Train),
        Command::Evaluate(c) => stage_command(&c, Stage::Evaluate),
        Command::Explain(c) => stage_command(&c, Stage::Explain),
        Command::Run(c) => stage_command(&c, Stage::Report),
        Command::Ablate { common, variants } => {
            let cfg = common.load()?;
            let variants: Vec<ModalityConfig> = variants.into_iter().map(Into::into).collect();
            let report = run_ablation(&cfg, &variants)?;
            println!("split {} ({} train / {} val)", report.split_hash, report.train_subjects, report.val_subjects);
            write_ablation_csv(std::io::stdout().lock(), &report)?;
            for row in report.rows.iter().filter(|r| r.error.is_some()) {
                eprintln!("{}: {}", row.input_data, row.error.as_deref().unwrap_or_default());
            }
            if report.failed() > 0 {
                anyhow::bail!("{} of {} variants failed", report.failed(), report.rows.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
