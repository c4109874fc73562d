//! Compute the four training losses for one batch by hand: cosine
//! alignment between teacher and student pyramids, the discriminator's
//! binary cross-entropy, the adversarial term, and the student total.
//!
//!     cargo run --example distillation_losses

use anomaly_distill::backbone::{forward_pyramid, init_backbone, BackboneConfig};
use anomaly_distill::distill::{
    discriminator_forward, init_discriminator, loss_adversarial, loss_discriminator,
    loss_generator, loss_student, normalize_pyramid, DiscMode, DiscriminatorConfig,
};
use anomaly_distill::rng::Rng;
use anomaly_distill::tensor::{BnMode, BnUpdate, Tape, Tensor};

fn main() {
    let cfg = BackboneConfig {
        stem_filters: 8,
        widths: [8, 16, 16, 32],
        blocks_per_stage: 1,
        se_reduction: 4,
        ..Default::default()
    };
    let dcfg = DiscriminatorConfig {
        in_channels: cfg.widths[3],
        spatial: 8,
        width_factor: 1.0 / 16.0,
        dropout_p: 0.3,
        leaky_slope: 0.2,
    };
    let mut teacher = init_backbone::<f32>(&cfg, 1);
    let mut student = init_backbone::<f32>(&cfg, 2);
    let mut disc = init_discriminator::<f32>(&dcfg, 3);
    let lambda = 0.1;

    let mut rng = Rng::seed_from_u64(9);
    let images = Tensor::<f32>::from_fn(vec![4, 1, 32, 32], || rng.uniform(0.0, 1.0) as f32);

    let mut tape = Tape::new();
    let bt = teacher.bind(&mut tape, false); // frozen
    let bs = student.bind(&mut tape, true);
    let bd = disc.bind(&mut tape, false); // frozen for the adversarial term
    let img = tape.leaf(images, false);

    let t_pyr = forward_pyramid(&mut tape, &mut teacher, &bt, &cfg, img, BnMode::Eval, BnUpdate::None).unwrap();
    let s_pyr = forward_pyramid(&mut tape, &mut student, &bs, &cfg, img, BnMode::Train, BnUpdate::None).unwrap();
    let t_norm = normalize_pyramid(&mut tape, &t_pyr).unwrap();
    let s_norm = normalize_pyramid(&mut tape, &s_pyr).unwrap();

    let l_g = loss_generator(&mut tape, &t_norm, &s_norm).unwrap();
    println!("L_G   (cosine alignment over {} levels) = {:.4}", t_norm.levels.len(), tape.value(l_g).item());

    let d_real = discriminator_forward(&mut tape, &mut disc, &bd, &dcfg, t_pyr.levels[3], &mut rng, DiscMode::Frozen).unwrap();
    let d_fake = discriminator_forward(&mut tape, &mut disc, &bd, &dcfg, s_pyr.levels[3], &mut rng, DiscMode::Frozen).unwrap();
    println!("D(teacher maps) = {:?}", tape.value(d_real).data());
    println!("D(student maps) = {:?}", tape.value(d_fake).data());

    let l_d = loss_discriminator(&mut tape, d_real, d_fake).unwrap();
    let l_adv = loss_adversarial(&mut tape, d_fake).unwrap();
    let l_s = loss_student(&mut tape, l_g, l_adv, lambda).unwrap();
    println!("L_D   = {:.4}", tape.value(l_d).item());
    println!("L_adv = {:.4}", tape.value(l_adv).item());
    println!("L_S   = L_G + {lambda} * L_adv = {:.4}", tape.value(l_s).item());

    // Gradients flow into the student only: the teacher is frozen.
    tape.backward(l_s).unwrap();
    let g = tape.grad(bs.var("stage4.block0.conv1.w")).unwrap();
    let gnorm: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("|grad| of a student conv = {gnorm:.5}");
    assert!(tape.grad(bt.var("stage4.block0.conv1.w")).is_none());
    println!("teacher parameters received no gradient");
}
