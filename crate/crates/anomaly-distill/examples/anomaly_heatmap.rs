//! Train a small model, then localize a defect: write the fused anomaly
//! map of one anomalous image as an 8-bit heatmap next to the input, and
//! compare the map's mass inside and outside the ground-truth mask.
//!
//!     cargo run --release --example anomaly_heatmap

use anomaly_distill::backbone::BackboneConfig;
use anomaly_distill::config::PipelineConfig;
use anomaly_distill::dataset::{generate_synthetic_dataset, Label};
use anomaly_distill::evaluate::{infer_image, write_heatmap};
use anomaly_distill::pnm;
use anomaly_distill::train::train;

fn main() {
    let cfg = PipelineConfig {
        seed: 23,
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
    let splits = generate_synthetic_dataset(cfg.seed, 64, 6, cfg.input_extent).unwrap();
    let ckpt = train(&cfg, &splits.train).unwrap();

    let sample = splits
        .eval
        .iter()
        .find(|s| s.label == Label::Anomalous)
        .expect("split has defects");
    let result = infer_image(&ckpt, &sample.image).unwrap();
    println!("{}: anomaly score {:.4}", sample.name, result.score);

    // Heatmap mass inside vs outside the ground-truth defect support.
    let mask = sample.mask.as_ref().unwrap();
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (&v, &m) in result.fused.data().iter().zip(mask.data()) {
        if m > 0.5 {
            inside += v as f64;
            n_in += 1;
        } else {
            outside += v as f64;
            n_out += 1;
        }
    }
    println!(
        "mean fused response: {:.4} inside the defect vs {:.4} outside",
        inside / n_in as f64,
        outside / n_out as f64
    );

    let dir = std::env::temp_dir().join("anomaly-distill-heatmap");
    std::fs::create_dir_all(&dir).unwrap();
    let input_path = dir.join("input.pgm");
    pnm::write_pnm(&input_path, &pnm::from_tensor(&sample.image)).unwrap();
    let heat_path = dir.join("heatmap.pgm");
    let (lo, hi) = write_heatmap(&heat_path, &result.fused).unwrap();
    println!("input:   {}", input_path.display());
    println!("heatmap: {} (normalized from [{lo:.4}, {hi:.4}])", heat_path.display());

    // A normal image for contrast.
    let normal = splits.eval.iter().find(|s| s.label == Label::Normal).unwrap();
    let normal_result = infer_image(&ckpt, &normal.image).unwrap();
    println!(
        "normal image score {:.4} vs defect score {:.4}",
        normal_result.score, result.score
    );
}
