use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scnet_core::eval::{
    bias_probe, episode_source, evaluate_params, gen_data, probe_set, run_ablation, run_train, write_metrics_csv,
    AblationAxis, RunConfig,
};
use scnet_core::model::load_checkpoint;

#[derive(Parser)]
#[command(
    name = "scnet",
    version,
    about = "Few-shot segmentation with self-contrastive background prototypes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> scnet_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the fold's train/test scenes as PPM/PGM files with a manifest.
    GenData(Common),
    /// Train, evaluate on the novel fold and write metrics.csv and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the novel fold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// One of n, lambda, source, spp.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0,0.5,1.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Fraction of hidden novel-object pixels a checkpoint labels background.
    BiasProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> scnet_core::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let (train, test) = gen_data(&cfg, &cfg.out_dir)?;
            println!(
                "wrote {train} train and {test} test scenes to {}",
                cfg.out_dir.display()
            );
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            let report = run_train(&cfg)?;
            if let Some(last) = report.losses.last() {
                println!("steps {} final loss {:.6}", last.step + 1, last.loss);
            }
            println!(
                "miou {:.6} bias_rate {:.6}; outputs in {}",
                report.metrics.miou,
                report.metrics.bias_rate,
                cfg.out_dir.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let params = load_checkpoint(&checkpoint)?;
            let source = episode_source(&cfg)?;
            let metrics = evaluate_params(&cfg, &source, &params)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(|e| scnet_core::Error::Io {
                path: cfg.out_dir.clone(),
                source: e,
            })?;
            let path = cfg.out_dir.join("metrics.csv");
            write_metrics_csv(
                &path,
                &[(cfg.run_id.clone(), String::new(), metrics.clone())],
                cfg.record_wall_clock,
            )?;
            for (class, iou) in &metrics.class_iou {
                println!("class {class} iou {iou:.6}");
            }
            println!("miou {:.6} bias_rate {:.6}", metrics.miou, metrics.bias_rate);
        }
        Command::Ablate { common, axis, values } => {
            let cfg = common.load()?;
            let axis: AblationAxis = axis.parse()?;
            for (value, m) in run_ablation(&cfg, axis, &values)? {
                println!(
                    "{}={value} miou {:.6} bias_rate {:.6}",
                    axis.name(),
                    m.miou,
                    m.bias_rate
                );
            }
            println!("table in {}", cfg.out_dir.join("ablation.csv").display());
        }
        Command::BiasProbe { common, checkpoint } => {
            let cfg = common.load()?;
            let params = load_checkpoint(&checkpoint)?;
            let source = episode_source(&cfg)?;
            let cases = probe_set(&cfg, &source)?;
            println!("bias_rate {:.6}", bias_probe(&params, &cases, &cfg.model)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
