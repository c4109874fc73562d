//! Generate a synthetic texture dataset, print its composition, and write
//! it out in the inspection directory layout.
//!
//!     cargo run --example synthetic_dataset

use anomaly_distill::dataset::{generate_synthetic_dataset, write_dataset_dir, Label};

fn main() {
    let splits = generate_synthetic_dataset(42, 20, 9, 64).unwrap();

    println!("train: {} normal images", splits.train.len());
    let eval_normal = splits
        .eval
        .iter()
        .filter(|s| s.label == Label::Normal)
        .count();
    println!(
        "eval:  {} normal + {} anomalous",
        eval_normal,
        splits.eval.len() - eval_normal
    );

    for sample in splits.eval.iter().filter(|s| s.label == Label::Anomalous) {
        let mask = sample.mask.as_ref().unwrap();
        let positives = mask.data().iter().filter(|&&v| v == 1.0).count();
        let coverage = 100.0 * positives as f64 / mask.numel() as f64;
        println!("  {:<18} defect pixels: {positives:>4} ({coverage:.1}%)", sample.name);
    }

    let out = std::env::temp_dir().join("anomaly-distill-example-dataset");
    write_dataset_dir(&out, &splits).unwrap();
    println!("wrote layout to {}", out.display());
    println!("  train/good/*.pgm, test/good/*.pgm, test/<defect>/*.pgm");
    println!("  ground_truth/<defect>/*_mask.pgm");
}
