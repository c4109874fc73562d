//! Run the backbone on a random image and print the feature pyramid, with
//! and without squeeze-excitation recalibration.
//!
//!     cargo run --example backbone_pyramid

use anomaly_distill::backbone::{forward_pyramid, init_backbone, BackboneConfig};
use anomaly_distill::rng::Rng;
use anomaly_distill::tensor::{BnMode, BnUpdate, Tape, Tensor};

fn run(cfg: &BackboneConfig, image: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut params = init_backbone::<f32>(cfg, 42);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let img = tape.leaf(image.clone(), false);
    let pyr = forward_pyramid(
        &mut tape,
        &mut params,
        &bound,
        cfg,
        img,
        BnMode::Eval,
        BnUpdate::None,
    )
    .unwrap();
    pyr.levels.iter().map(|&v| tape.value(v).clone()).collect()
}

fn main() {
    let cfg = BackboneConfig::default();
    cfg.validate().unwrap();

    let mut rng = Rng::seed_from_u64(3);
    let image = Tensor::<f32>::from_fn(vec![1, 1, 64, 64], || rng.uniform(0.0, 1.0) as f32);

    println!("input: {:?}", image.shape());
    let levels = run(&cfg, &image);
    for (i, lvl) in levels.iter().enumerate() {
        let mean: f32 = lvl.data().iter().sum::<f32>() / lvl.numel() as f32;
        println!(
            "level {} -> shape {:?}  mean activation {:.4}",
            i + 1,
            lvl.shape(),
            mean
        );
    }
    println!("all levels share the same spatial extent: input / 4");

    let no_se = BackboneConfig {
        se_enabled: false,
        ..cfg
    };
    let plain = run(&no_se, &image);
    let delta: f32 = levels[0]
        .data()
        .iter()
        .zip(plain[0].data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f32>()
        / levels[0].numel() as f32;
    println!("mean |difference| of level 1 with SE off: {delta:.5}");
}
