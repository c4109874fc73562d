//! Checkpoint lifecycle: train briefly, save, reload, verify the binary
//! round trip is byte-identical, and resume training with losses matching
//! an uninterrupted run step for step.
//!
//!     cargo run --release --example checkpoint_roundtrip

use anomaly_distill::backbone::BackboneConfig;
use anomaly_distill::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use anomaly_distill::config::PipelineConfig;
use anomaly_distill::dataset::generate_synthetic_dataset;
use anomaly_distill::train::{resume, train};

fn main() {
    let mut cfg = PipelineConfig {
        seed: 3,
        input_extent: 32,
        batch_size: 4,
        epochs: 2,
        backbone: BackboneConfig {
            stem_filters: 4,
            widths: [4, 8, 8, 16],
            blocks_per_stage: 1,
            se_reduction: 2,
            ..Default::default()
        },
        disc_width_factor: 1.0 / 32.0,
        ..Default::default()
    };
    let splits = generate_synthetic_dataset(cfg.seed, 12, 0, cfg.input_extent).unwrap();

    let ckpt = train(&cfg, &splits.train).unwrap();
    println!("trained {} steps", ckpt.step);

    let dir = std::env::temp_dir().join("anomaly-distill-ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(checkpoint_bytes(&ckpt), checkpoint_bytes(&loaded));
    println!(
        "save -> load -> save is byte-identical ({} bytes)",
        checkpoint_bytes(&ckpt).len()
    );

    // Resume for 2 more epochs and compare against a 4-epoch run.
    let resumed = resume(&loaded, &splits.train, 2).unwrap();
    cfg.epochs = 4;
    let uninterrupted = train(&cfg, &splits.train).unwrap();
    assert_eq!(resumed.history.l_s.len(), uninterrupted.history.l_s.len());
    for (i, (a, b)) in resumed
        .history
        .l_s
        .iter()
        .zip(&uninterrupted.history.l_s)
        .enumerate()
    {
        assert_eq!(a.to_bits(), b.to_bits(), "step {i} diverged");
    }
    println!(
        "resumed losses match an uninterrupted run exactly for all {} steps",
        resumed.history.l_s.len()
    );
}
