use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use msil_core::config::RunConfig;
use msil_core::detector::data::{generate_dataset, write_dataset};
use msil_core::harness::{self, Branch, FeatureStage, GradcheckOptions, HeatmapRequest};
use msil_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "msil",
    version,
    about = "Dense detection heads with branch interaction on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Cls,
    Reg,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Before,
    After,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and evaluate it on the held-out split.
    Train,
    /// Compare backpropagated gradients with finite differences.
    Gradcheck {
        /// Largest number of entries checked per parameter tensor.
        #[arg(long, default_value_t = 32)]
        max_entries: usize,
    },
    /// Train every interaction-block variant and tabulate their AP.
    Ablate,
    /// Export branch-feature heat maps for one image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long, value_enum, default_value = "both")]
        branch: BranchArg,
        /// Features before or after the interaction block.
        #[arg(long, value_enum, default_value = "both")]
        variant: StageArg,
    },
    /// Count object centers per image quadrant and class.
    Centers {
        /// Dataset directory; without it the configured dataset is generated.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset to disk.
    Generate,
}

fn load_config(cli: &Cli, default: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => default,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli, RunConfig::default())?;
            let out = harness::cmd_train(&cfg)?;
            let m = out.metrics;
            println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", m.ap, m.ap50, m.ap75);
            if let Some(dir) = out.run_dir {
                println!("wrote {}", dir.display());
            }
        }
        Command::Gradcheck { max_entries } => {
            let cfg = load_config(cli, harness::gradcheck_config())?;
            let opts = GradcheckOptions {
                max_entries: *max_entries,
                ..GradcheckOptions::default()
            };
            let report = harness::cmd_gradcheck(&cfg, &opts)?;
            for g in &report.groups {
                let status = if g.pass { "PASS" } else { "FAIL" };
                println!(
                    "{status}  {:<32} checked {:>4}  skipped {:>3}  max rel err {:.3e}",
                    g.name, g.checked, g.skipped, g.max_rel_err
                );
            }
            println!("losses: {}", report.variants.join(", "));
            if !report.pass() {
                let failed: Vec<&str> = report
                    .groups
                    .iter()
                    .filter(|g| !g.pass)
                    .map(|g| g.name.as_str())
                    .collect();
                return Err(Error::GradcheckFailed(failed.join(", ")));
            }
        }
        Command::Ablate => {
            let cfg = load_config(cli, RunConfig::default())?;
            let (dir, rows) = harness::cmd_ablate(&cfg)?;
            println!(
                "{:<20} {:>7} {:>7} {:>7} {:>8}",
                "variant", "AP", "AP50", "AP75", "params"
            );
            for r in &rows {
                let m = r.metrics;
                println!(
                    "{:<20} {:>7.4} {:>7.4} {:>7.4} {:>8}",
                    r.variant.name, m.ap, m.ap50, m.ap75, r.params
                );
            }
            println!("wrote {}", dir.display());
        }
        Command::Heatmap {
            checkpoint,
            image,
            branch,
            variant,
        } => {
            let cfg = load_config(cli, RunConfig::default())?;
            let branches = match branch {
                BranchArg::Cls => vec![Branch::Cls],
                BranchArg::Reg => vec![Branch::Reg],
                BranchArg::Both => vec![Branch::Cls, Branch::Reg],
            };
            let stages = match variant {
                StageArg::Before => vec![FeatureStage::Before],
                StageArg::After => vec![FeatureStage::After],
                StageArg::Both => vec![FeatureStage::Before, FeatureStage::After],
            };
            let req = HeatmapRequest {
                checkpoint: checkpoint.clone(),
                image_id: *image,
                branches,
                stages,
            };
            let dir = harness::cmd_heatmap(&cfg, &req)?;
            println!("wrote {}", dir.display());
        }
        Command::Centers { dataset } => {
            let cfg = load_config(cli, RunConfig::default())?;
            let (dir, stats) = harness::cmd_centers(&cfg, dataset.as_deref())?;
            print!("{}", stats.to_csv());
            println!("wrote {}", dir.display());
        }
        Command::Generate => {
            let cfg = load_config(cli, RunConfig::default())?;
            let samples = generate_dataset(cfg.seed, &cfg.gen_params())?;
            let dir = harness::create_run_dir(cfg.out_dir.as_ref(), &format!("{}-dataset", cfg.name))?;
            write_dataset(&dir, &samples)?;
            println!("wrote {} images to {}", samples.len(), dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
