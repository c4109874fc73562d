//! Command-line pipeline: dataset synthesis, training, evaluation,
//! single-image inference and gradient checking.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use anomaly_distill::checkpoint::{load_checkpoint, save_checkpoint};
use anomaly_distill::config::PipelineConfig;
use anomaly_distill::dataset::{generate_synthetic_dataset, load_dataset_dir, write_dataset_dir};
use anomaly_distill::evaluate::{evaluate, infer_image, write_heatmap, write_report};
use anomaly_distill::gradcheck;
use anomaly_distill::pnm;
use anomaly_distill::train::{train_with_progress, StepInfo};

#[derive(Parser)]
#[command(
    name = "anomaly-distill",
    about = "Unsupervised anomaly detection by teacher-student feature distillation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic texture dataset with ground-truth defect masks.
    GenData {
        /// Output directory (inspection layout).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Normal training images (eval gets a quarter as many normals).
        #[arg(long, default_value_t = 200)]
        n_normal: usize,
        /// Anomalous eval images.
        #[arg(long, default_value_t = 50)]
        n_anomalous: usize,
        /// Square image extent; divisible by 4.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on the normal images of a dataset directory.
    Train {
        /// Dataset directory (overrides data_dir from the config file).
        #[arg(long)]
        data: Option<PathBuf>,
        /// TOML configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Pre-train the teacher on rotation prediction before freezing.
        #[arg(long)]
        teacher_pretext: bool,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric report output path (TOML).
        #[arg(long)]
        report: PathBuf,
    },
    /// Score one image and write its anomaly heatmap.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// PGM/PPM input image.
        #[arg(long)]
        image: PathBuf,
        /// 8-bit PGM heatmap output path.
        #[arg(long)]
        heatmap: PathBuf,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        /// Check a single operation (default: all).
        #[arg(long)]
        op: Option<String>,
        #[arg(long, default_value_t = 25)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn one_line(msg: String) -> String {
    msg.replace('\n', "; ")
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            n_normal,
            n_anomalous,
            size,
        } => {
            let splits = generate_synthetic_dataset(seed, n_normal, n_anomalous, size)
                .map_err(|e| e.to_string())?;
            write_dataset_dir(&out, &splits).map_err(|e| e.to_string())?;
            println!(
                "wrote {} train / {} eval images to {}",
                splits.train.len(),
                splits.eval.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            teacher_pretext,
        } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::load(&path).map_err(|e| e.to_string())?,
                None => PipelineConfig::default(),
            };
            if teacher_pretext {
                cfg.teacher_pretext = true;
            }
            if let Some(data) = data {
                cfg.data_dir = Some(data.display().to_string());
            }
            let data_dir = cfg
                .data_dir
                .clone()
                .ok_or("no dataset: pass --data or set data_dir in the config")?;
            let splits = load_dataset_dir(
                &PathBuf::from(&data_dir),
                cfg.input_extent,
                cfg.channels,
            )
            .map_err(|e| e.to_string())?;

            let mut epoch_seen = usize::MAX;
            let ckpt = train_with_progress(&cfg, &splits.train, &mut |info: &StepInfo| {
                if info.epoch != epoch_seen {
                    epoch_seen = info.epoch;
                    eprintln!(
                        "epoch {:>4}  step {:>6}  L_G {:.4}  L_D {:.4}  L_adv {:.4}  L_S {:.4}",
                        info.epoch,
                        info.step,
                        info.losses.l_g,
                        info.losses.l_d,
                        info.losses.l_adv,
                        info.losses.l_s
                    );
                }
            })
            .map_err(|e| e.to_string())?;
            save_checkpoint(&ckpt, &out).map_err(|e| e.to_string())?;
            println!("saved checkpoint to {} after {} steps", out.display(), ckpt.step);
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let ckpt = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let splits = load_dataset_dir(&data, ckpt.config.input_extent, ckpt.config.channels)
                .map_err(|e| e.to_string())?;
            let outcome = evaluate(&ckpt, &splits.eval).map_err(|e| e.to_string())?;
            write_report(&report, &ckpt, &outcome).map_err(|e| e.to_string())?;
            println!(
                "image_auroc={:.6} pixel_auroc={:.6} report={}",
                outcome.report.image_auroc,
                outcome.report.pixel_auroc,
                report.display()
            );
            Ok(())
        }
        Command::Infer {
            ckpt,
            image,
            heatmap,
        } => {
            let ckpt = load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let img = pnm::read_pnm(&image).map_err(|e| e.to_string())?;
            let result = infer_image(&ckpt, &pnm::to_tensor(&img)).map_err(|e| e.to_string())?;
            let (lo, hi) = write_heatmap(&heatmap, &result.fused).map_err(|e| e.to_string())?;
            println!(
                "score={:.6} heatmap={} heatmap_min={lo:.6} heatmap_max={hi:.6}",
                result.score,
                heatmap.display()
            );
            Ok(())
        }
        Command::Gradcheck {
            op,
            instances,
            seed,
        } => {
            let reports = match op {
                Some(name) => {
                    vec![gradcheck::run_check(&name, instances, seed).map_err(|e| e.to_string())?]
                }
                None => gradcheck::run_all(instances, seed).map_err(|e| e.to_string())?,
            };
            let mut all_ok = true;
            for r in &reports {
                let status = if r.passed() { "pass" } else { "FAIL" };
                println!(
                    "op={} instances={} max_rel_err={:.3e} tol={:.0e} status={status}",
                    r.name, r.instances, r.max_rel_err, r.tol
                );
                all_ok &= r.passed();
            }
            if all_ok {
                Ok(())
            } else {
                Err("gradient check failed".into())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", one_line(msg));
            ExitCode::FAILURE
        }
    }
}
