//! Miniature end-to-end run: synthesize a dataset, distill a student
//! against a frozen random teacher for a few epochs, then evaluate image-
//! and pixel-level AUROC on held-out normal and defective images.
//!
//! Uses a reduced architecture so it finishes in well under a minute;
//! the `anomaly-distill` binary runs the full-size pipeline.
//!
//!     cargo run --release --example train_and_evaluate

use anomaly_distill::backbone::BackboneConfig;
use anomaly_distill::config::PipelineConfig;
use anomaly_distill::dataset::generate_synthetic_dataset;
use anomaly_distill::evaluate::{evaluate, render_report};
use anomaly_distill::train::train_with_progress;

fn main() {
    let cfg = PipelineConfig {
        seed: 11,
        input_extent: 32,
        batch_size: 8,
        epochs: 6,
        backbone: BackboneConfig {
            stem_filters: 8,
            widths: [8, 16, 32, 64],
            blocks_per_stage: 1,
            se_reduction: 4,
            ..Default::default()
        },
        disc_width_factor: 1.0 / 16.0,
        ..Default::default()
    };
    cfg.validate().unwrap();

    let splits = generate_synthetic_dataset(cfg.seed, 64, 24, cfg.input_extent).unwrap();
    println!(
        "training on {} normals, evaluating on {} images",
        splits.train.len(),
        splits.eval.len()
    );

    let mut last_epoch = usize::MAX;
    let ckpt = train_with_progress(&cfg, &splits.train, &mut |info| {
        if info.epoch != last_epoch {
            last_epoch = info.epoch;
            println!(
                "epoch {}  L_G {:.4}  L_D {:.4}  L_adv {:.4}",
                info.epoch, info.losses.l_g, info.losses.l_d, info.losses.l_adv
            );
        }
    })
    .unwrap();

    let outcome = evaluate(&ckpt, &splits.eval).unwrap();
    println!();
    println!("image AUROC: {:.4}", outcome.report.image_auroc);
    println!("pixel AUROC: {:.4}", outcome.report.pixel_auroc);
    println!();
    println!("--- report document ---");
    let report = render_report(&ckpt, &outcome);
    for line in report.lines().take(14) {
        println!("{line}");
    }
    println!("...");
}
