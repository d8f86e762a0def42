use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smae::autodiff::gradcheck::FD_REL_TOL;
use smae::geometry::{read_cloud_file, write_cloud_file};
use smae::masking::Strategy;
use smae::model::SemanticMae;
use smae::pipeline::ablate::ablate;
use smae::pipeline::checkpoint::Checkpoint;
use smae::pipeline::export::export_groups;
use smae::pipeline::finetune::finetune;
use smae::pipeline::gradsuite::gradient_suite;
use smae::pipeline::pretrain::pretrain;
use smae::{oracle, Error, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "smae",
    version,
    about = "Semantic masked autoencoding for point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; a `preset` key in it selects the base
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: paper-default, test-small or toy
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for export-groups)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, default_preset: &str) -> Result<RunConfig> {
        let base = self.preset.as_deref().unwrap_or(default_preset);
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, base)?,
            None => RunConfig::preset(base)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes metrics, masks and a checkpoint
    Pretrain(Common),
    /// Fine-tune a classifier on a pretrained checkpoint
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use the prototype-prompted head instead of the baseline head
        #[arg(long)]
        prompted: bool,
    },
    /// Compare masking strategies under identical initialization and data
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of randm,randbm,csem
        #[arg(long, value_delimiter = ',', default_value = "randm,randbm,csem")]
        strategies: Vec<String>,
    },
    /// Label every point of a cloud with its prototype component
    ExportGroups {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text cloud, one `x y z` per line
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of every training loss
    Gradcheck(Common),
    /// Compare geometric kernels and masking against brute-force references
    OracleSuite(Common),
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

/// Loads a checkpoint and checks it fits the architecture of `cfg`.
fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let mut expected = SemanticMae::init_store(cfg)?;
    ck.load_into(&mut expected)?;
    Ok(ck)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = common.resolve("test-small")?;
            let out = common.out_dir("runs/pretrain");
            write_config(&out, &cfg)?;
            let run = pretrain(&cfg, Some(&out))?;
            if let Some(last) = run.epochs.last() {
                println!(
                    "pretrained {} epochs in {:.1}s: total loss {:.6}",
                    run.epochs.len(),
                    run.seconds,
                    last.loss_total
                );
            }
            println!("checkpoint: {}", out.join("checkpoint.bin").display());
        }
        Command::Finetune {
            common,
            checkpoint,
            prompted,
        } => {
            let cfg = common.resolve("test-small")?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            let out = common.out_dir("runs/finetune");
            write_config(&out, &cfg)?;
            let run = finetune(&cfg, &ck.store, prompted, Some(&out))?;
            if let Some(e) = run.final_epoch() {
                println!(
                    "{} head, {} epochs: train acc {:.3}, val acc {:.3}",
                    if prompted { "prompted" } else { "baseline" },
                    e.epoch,
                    e.train_acc,
                    e.val_acc
                );
            }
        }
        Command::Ablate { common, strategies } => {
            let cfg = common.resolve("test-small")?;
            let strategies = strategies
                .iter()
                .map(|s| {
                    s.parse::<Strategy>()
                        .map_err(|e| Error::Config(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let out = common.out_dir("runs/ablate");
            write_config(&out, &cfg)?;
            for row in ablate(&cfg, &strategies, Some(&out))? {
                println!(
                    "{:<7} loss {:.6} coverage {:.3} val acc {:.3}",
                    row.strategy, row.loss_total, row.coverage_mean, row.val_acc
                );
            }
            println!("table: {}", out.join("ablation.csv").display());
        }
        Command::ExportGroups {
            common,
            checkpoint,
            input,
        } => {
            let cfg = common.resolve("test-small")?;
            let ck = load_checkpoint(&checkpoint, &cfg)?;
            let cloud = read_cloud_file(&input)?;
            let groups = export_groups(&cfg, &ck.store, &cloud)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| input.with_extension("groups.txt"));
            write_cloud_file(&out, &cloud.points, Some(&groups.labels))?;
            println!("wrote {} labelled points to {}", cloud.len(), out.display());
        }
        Command::Gradcheck(common) => {
            let cfg = common.resolve("toy")?;
            let mut worst = 0.0f64;
            for case in gradient_suite(&cfg)? {
                println!(
                    "{:<12} {:>6} entries  max rel err {:.3e}  ({:.1}s)",
                    case.loss, case.report.entries, case.report.max_rel_err, case.seconds
                );
                worst = worst.max(case.report.max_rel_err);
            }
            if worst > FD_REL_TOL {
                return Err(Error::Numeric {
                    op: "gradcheck".into(),
                    detail: format!("max relative error {worst:.3e} exceeds {FD_REL_TOL:e}"),
                });
            }
        }
        Command::OracleSuite(common) => {
            let seed = common.seed.unwrap_or(0);
            let geo = oracle::geometry_suite(200, seed)?;
            println!(
                "geometry: {} instances, fps mismatches {}, knn mismatches {}, chamfer max err {:.3e}",
                geo.instances, geo.fps_mismatches, geo.knn_mismatches, geo.chamfer_max_abs_err
            );
            let csem = oracle::csem_suite(1000, seed)?;
            println!(
                "masking: {} instances, {} violations",
                csem.instances,
                csem.violations.len()
            );
            for v in csem.violations.iter().take(10) {
                println!("  {v}");
            }
            if !geo.passes(1e-12) || !csem.violations.is_empty() {
                return Err(Error::Invariant("oracle suite found mismatches".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
