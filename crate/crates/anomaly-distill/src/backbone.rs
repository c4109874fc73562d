//! Feature-extraction backbone: a wide residual network whose stages keep
//! full post-stem resolution by trading stride for dilation.
//!
//! Layout: a 7x7/stride-2 stem with 3x3/stride-2 max pooling (all spatial
//! reduction lives here), then four stride-1 residual stages with dilation
//! rates (1, 2, 4, 8) and growing widths, each stage optionally capped by a
//! squeeze-excitation block. An optional 1x1 fusion of the first and last
//! stage outputs is appended as a fifth pyramid level. Every level therefore
//! shares the same spatial extent: input / 4.

use serde::{Deserialize, Serialize};

use crate::params::{init_batch_norm, init_he_normal, Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, BnUpdate, ConvSpec, Result, Tape, TensorError, Var};

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// EMA momentum for running statistics in train mode.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_filters: usize,
    pub widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub dilations: [usize; 4],
    pub se_enabled: bool,
    pub fusion_enabled: bool,
    pub se_reduction: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            stem_filters: 16,
            widths: [16, 32, 64, 128],
            blocks_per_stage: 2,
            dilations: [1, 2, 4, 8],
            se_enabled: true,
            fusion_enabled: true,
            se_reduction: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_filters == 0 || self.blocks_per_stage == 0 {
            return Err(TensorError::InvalidArgument(
                "backbone channel counts and block count must be positive".into(),
            ));
        }
        for (&w, &r) in self.widths.iter().zip(&self.dilations) {
            if w == 0 {
                return Err(TensorError::InvalidArgument(
                    "backbone stage widths must be positive".into(),
                ));
            }
            if r == 0 {
                return Err(TensorError::InvalidArgument(
                    "backbone dilations must be >= 1".into(),
                ));
            }
            if self.se_enabled && (self.se_reduction == 0 || w % self.se_reduction != 0) {
                return Err(TensorError::InvalidArgument(format!(
                    "se_reduction {} must divide every stage width (got {w})",
                    self.se_reduction
                )));
            }
        }
        if self.fusion_enabled && self.fused_width() == 0 {
            return Err(TensorError::InvalidArgument(
                "fused width computes to zero".into(),
            ));
        }
        Ok(())
    }

    /// Channel width of the fused level: half the deepest stage.
    pub fn fused_width(&self) -> usize {
        self.widths[3] / 2
    }

    /// Number of pyramid levels (4 stages, plus fusion when enabled).
    pub fn num_levels(&self) -> usize {
        if self.fusion_enabled {
            5
        } else {
            4
        }
    }

    /// Channel width of each pyramid level.
    pub fn level_widths(&self) -> Vec<usize> {
        let mut w = self.widths.to_vec();
        if self.fusion_enabled {
            w.push(self.fused_width());
        }
        w
    }
}

/// Ordered per-stage feature maps from one forward pass; all levels share
/// the spatial extent input / 4.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Initialize all backbone parameters. Convolutions draw He-normal values
/// from per-name streams; batch norms start at identity with (0, 1) running
/// statistics.
pub fn init_backbone<E: Scalar>(cfg: &BackboneConfig, group_seed: u64) -> ParamSet<E> {
    let mut set = ParamSet::new();
    init_he_normal(
        &mut set,
        "stem.conv.w",
        vec![cfg.stem_filters, cfg.in_channels, 7, 7],
        cfg.in_channels * 49,
        group_seed,
    );
    init_batch_norm(&mut set, "stem.bn", cfg.stem_filters);

    let mut in_ch = cfg.stem_filters;
    for (si, &w) in cfg.widths.iter().enumerate() {
        for bj in 0..cfg.blocks_per_stage {
            let prefix = format!("stage{}.block{}", si + 1, bj);
            let block_in = if bj == 0 { in_ch } else { w };
            init_he_normal(
                &mut set,
                &format!("{prefix}.conv1.w"),
                vec![w, block_in, 3, 3],
                block_in * 9,
                group_seed,
            );
            init_batch_norm(&mut set, &format!("{prefix}.bn1"), w);
            init_he_normal(
                &mut set,
                &format!("{prefix}.conv2.w"),
                vec![w, w, 3, 3],
                w * 9,
                group_seed,
            );
            init_batch_norm(&mut set, &format!("{prefix}.bn2"), w);
            if block_in != w {
                init_he_normal(
                    &mut set,
                    &format!("{prefix}.shortcut.w"),
                    vec![w, block_in, 1, 1],
                    block_in,
                    group_seed,
                );
                init_batch_norm(&mut set, &format!("{prefix}.shortcut_bn"), w);
            }
        }
        if cfg.se_enabled {
            let hidden = w / cfg.se_reduction;
            init_he_normal(
                &mut set,
                &format!("stage{}.se.fc1.w", si + 1),
                vec![hidden, w],
                w,
                group_seed,
            );
            init_he_normal(
                &mut set,
                &format!("stage{}.se.fc2.w", si + 1),
                vec![w, hidden],
                hidden,
                group_seed,
            );
        }
        in_ch = w;
    }

    if cfg.fusion_enabled {
        let cat = cfg.widths[0] + cfg.widths[3];
        init_he_normal(
            &mut set,
            "fuse.conv.w",
            vec![cfg.fused_width(), cat, 1, 1],
            cat,
            group_seed,
        );
        init_batch_norm(&mut set, "fuse.bn", cfg.fused_width());
    }
    set
}

/// Batch norm reading (and in train mode updating) the `<prefix>.running`
/// statistics stored in the parameter set.
pub fn batch_norm_named<E: Scalar>(
    tape: &mut Tape<E>,
    params: &mut ParamSet<E>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    mode: BnMode,
    update: BnUpdate,
) -> Result<Var> {
    let running_name = format!("{prefix}.running");
    let mut running = params.get(&running_name).data().to_vec();
    let out = tape.batch_norm(
        x,
        bound.var(&format!("{prefix}.gamma")),
        bound.var(&format!("{prefix}.beta")),
        &mut running,
        mode,
        update,
        BN_EPS,
    )?;
    if matches!(update, BnUpdate::Ema(_)) && mode == BnMode::Train {
        params
            .get_mut(&running_name)
            .data_mut()
            .copy_from_slice(&running);
    }
    Ok(out)
}

/// Stem: 7x7 stride-2 pad-3 convolution, batch norm, ReLU, then 3x3
/// stride-2 pad-1 max pooling. Reduces each spatial extent by exactly 4.
pub fn stem<E: Scalar>(
    tape: &mut Tape<E>,
    params: &mut ParamSet<E>,
    bound: &Bound,
    image: Var,
    mode: BnMode,
    update: BnUpdate,
) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 4 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "stem input extents must be divisible by 4, got {shape:?}"
        )));
    }
    let x = tape.conv2d(image, bound.var("stem.conv.w"), ConvSpec::new(2, 3, 1))?;
    let x = batch_norm_named(tape, params, bound, "stem.bn", x, mode, update)?;
    let x = tape.relu(x);
    tape.max_pool2d(x, 3, 2, 1)
}

/// Squeeze-excitation: global average pool, two bias-free fully connected
/// layers (ReLU between, sigmoid after), then channel-wise rescaling.
pub fn se_block<E: Scalar>(
    tape: &mut Tape<E>,
    bound: &Bound,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let z = tape.global_avg_pool(x)?;
    let a = tape.linear(z, bound.var(&format!("{prefix}.fc1.w")), None)?;
    let a = tape.relu(a);
    let a = tape.linear(a, bound.var(&format!("{prefix}.fc2.w")), None)?;
    let s = tape.sigmoid(a);
    tape.channel_scale(x, s)
}

/// Residual block: conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus an identity
/// shortcut (or 1x1 projection + BN when widths change), then ReLU.
/// Stride 1 with padding = dilation, so spatial extent is preserved.
pub fn res_block<E: Scalar>(
    tape: &mut Tape<E>,
    params: &mut ParamSet<E>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    dilation: usize,
    mode: BnMode,
    update: BnUpdate,
) -> Result<Var> {
    let spec = ConvSpec::new(1, dilation, dilation);
    let h = tape.conv2d(x, bound.var(&format!("{prefix}.conv1.w")), spec)?;
    let h = batch_norm_named(tape, params, bound, &format!("{prefix}.bn1"), h, mode, update)?;
    let h = tape.relu(h);
    let h = tape.conv2d(h, bound.var(&format!("{prefix}.conv2.w")), spec)?;
    let h = batch_norm_named(tape, params, bound, &format!("{prefix}.bn2"), h, mode, update)?;

    let shortcut_name = format!("{prefix}.shortcut.w");
    let short = if params.try_get(&shortcut_name).is_some() {
        let s = tape.conv2d(x, bound.var(&shortcut_name), ConvSpec::unit())?;
        batch_norm_named(
            tape,
            params,
            bound,
            &format!("{prefix}.shortcut_bn"),
            s,
            mode,
            update,
        )?
    } else {
        x
    };
    let sum = tape.add(h, short)?;
    Ok(tape.relu(sum))
}

/// Concatenate a low-level and a high-level map, then 1x1 conv + BN + ReLU.
pub fn fuse_features<E: Scalar>(
    tape: &mut Tape<E>,
    params: &mut ParamSet<E>,
    bound: &Bound,
    f_low: Var,
    f_up: Var,
    mode: BnMode,
    update: BnUpdate,
) -> Result<Var> {
    let cat = tape.concat_channels(&[f_low, f_up])?;
    let x = tape.conv2d(cat, bound.var("fuse.conv.w"), ConvSpec::unit())?;
    let x = batch_norm_named(tape, params, bound, "fuse.bn", x, mode, update)?;
    Ok(tape.relu(x))
}

/// Full backbone pass producing the feature pyramid F1..F4 (+ fused level).
pub fn forward_pyramid<E: Scalar>(
    tape: &mut Tape<E>,
    params: &mut ParamSet<E>,
    bound: &Bound,
    cfg: &BackboneConfig,
    image: Var,
    mode: BnMode,
    update: BnUpdate,
) -> Result<FeaturePyramid> {
    let mut x = stem(tape, params, bound, image, mode, update)?;
    let mut levels = Vec::with_capacity(cfg.num_levels());
    for (si, &dilation) in cfg.dilations.iter().enumerate() {
        for bj in 0..cfg.blocks_per_stage {
            let prefix = format!("stage{}.block{}", si + 1, bj);
            x = res_block(tape, params, bound, &prefix, x, dilation, mode, update)?;
        }
        if cfg.se_enabled {
            x = se_block(tape, bound, &format!("stage{}.se", si + 1), x)?;
        }
        levels.push(x);
    }
    if cfg.fusion_enabled {
        let fused = fuse_features(tape, params, bound, levels[0], levels[3], mode, update)?;
        levels.push(fused);
    }
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_cfg() -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            stem_filters: 4,
            widths: [4, 8, 8, 8],
            blocks_per_stage: 1,
            dilations: [1, 2, 4, 8],
            se_enabled: true,
            fusion_enabled: true,
            se_reduction: 2,
        }
    }

    fn forward_once(
        cfg: &BackboneConfig,
        image: &Tensor<f32>,
        seed: u64,
        mode: BnMode,
    ) -> Vec<Tensor<f32>> {
        let mut params = init_backbone::<f32>(cfg, seed);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let img = tape.leaf(image.clone(), false);
        let pyr = forward_pyramid(&mut tape, &mut params, &bound, cfg, img, mode, BnUpdate::None)
            .unwrap();
        pyr.levels.iter().map(|&v| tape.value(v).clone()).collect()
    }

    #[test]
    fn stem_divides_extent_by_four() {
        for (extent, want) in [(64usize, 16usize), (256, 64)] {
            let cfg = BackboneConfig {
                stem_filters: 2,
                ..toy_cfg()
            };
            let mut params = init_backbone::<f32>(&cfg, 1);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let img = tape.leaf(Tensor::zeros(vec![1, 1, extent, extent]), false);
            let out = stem(&mut tape, &mut params, &bound, img, BnMode::Eval, BnUpdate::None)
                .unwrap();
            assert_eq!(tape.shape(out), &[1, 2, want, want]);
        }
    }

    #[test]
    fn stem_rejects_unaligned_extent() {
        let cfg = toy_cfg();
        let mut params = init_backbone::<f32>(&cfg, 1);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let img = tape.leaf(Tensor::zeros(vec![1, 1, 30, 30]), false);
        assert!(stem(&mut tape, &mut params, &bound, img, BnMode::Eval, BnUpdate::None).is_err());
    }

    #[test]
    fn zero_image_zero_bias_stem_is_zero() {
        let cfg = toy_cfg();
        let mut params = init_backbone::<f32>(&cfg, 1);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let img = tape.leaf(Tensor::zeros(vec![1, 1, 16, 16]), false);
        let out = stem(&mut tape, &mut params, &bound, img, BnMode::Eval, BnUpdate::None).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_with_zero_weights_halves_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::new(vec![1, 2, 1, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let fc1 = tape.leaf(Tensor::zeros(vec![1, 2]), false);
        let fc2 = tape.leaf(Tensor::zeros(vec![2, 1]), false);
        let bound = Bound::from_pairs([
            ("se.fc1.w".to_string(), fc1),
            ("se.fc2.w".to_string(), fc2),
        ]);
        let y = se_block(&mut tape, &bound, "se", x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 1.5, 2.0]);
    }

    #[test]
    fn se_zero_input_stays_zero() {
        let mut set = ParamSet::<f32>::new();
        init_he_normal(&mut set, "se.fc1.w", vec![2, 4], 4, 5);
        init_he_normal(&mut set, "se.fc2.w", vec![4, 2], 2, 5);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, false);
        let x = tape.leaf(Tensor::zeros(vec![2, 4, 3, 3]), false);
        let y = se_block(&mut tape, &bound, "se", x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_output_is_channelwise_scalar_multiple_and_attenuating() {
        let mut set = ParamSet::<f32>::new();
        init_he_normal(&mut set, "se.fc1.w", vec![2, 4], 4, 9);
        init_he_normal(&mut set, "se.fc2.w", vec![4, 2], 2, 9);
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let x_t = Tensor::<f32>::from_fn(vec![2, 4, 3, 3], || rng.uniform(-1.0, 1.0) as f32);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, false);
        let x = tape.leaf(x_t.clone(), false);
        let y = se_block(&mut tape, &bound, "se", x).unwrap();
        let yd = tape.value(y).data().to_vec();
        let xd = x_t.data();
        for p in 0..8 {
            // Recover the per-channel factor from the first nonzero element
            // and check every other site matches it.
            let base = p * 9;
            let mut factor = None;
            for s in 0..9 {
                if xd[base + s].abs() > 1e-6 {
                    factor = Some(yd[base + s] / xd[base + s]);
                    break;
                }
            }
            let f = factor.unwrap();
            assert!(f > 0.0 && f < 1.0, "SE factor {f} out of (0, 1)");
            for s in 0..9 {
                assert!((yd[base + s] - f * xd[base + s]).abs() < 1e-5);
                assert!(yd[base + s].abs() <= xd[base + s].abs() + 1e-6);
            }
        }
    }

    #[test]
    fn res_block_with_dead_branch_is_relu() {
        let mut set = ParamSet::<f32>::new();
        init_he_normal(&mut set, "b.conv1.w", vec![3, 3, 3, 3], 27, 1);
        init_batch_norm(&mut set, "b.bn1", 3);
        init_he_normal(&mut set, "b.conv2.w", vec![3, 3, 3, 3], 27, 1);
        init_batch_norm(&mut set, "b.bn2", 3);
        // Kill the residual branch: zero conv2 makes BN2 output beta = 0.
        set.get_mut("b.conv2.w").data_mut().fill(0.0);

        let mut rng = crate::rng::Rng::seed_from_u64(8);
        let x_t = Tensor::<f32>::from_fn(vec![2, 3, 4, 4], || rng.uniform(-1.0, 1.0) as f32);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, false);
        let x = tape.leaf(x_t.clone(), false);
        let y = res_block(
            &mut tape,
            &mut set,
            &bound,
            "b",
            x,
            1,
            BnMode::Train,
            BnUpdate::None,
        )
        .unwrap();
        for (&got, &xi) in tape.value(y).data().iter().zip(x_t.data()) {
            assert_eq!(got, xi.max(0.0));
        }
    }

    #[test]
    fn res_block_preserves_shape_for_every_dilation() {
        for r in [1usize, 2, 4, 8] {
            let mut set = ParamSet::<f32>::new();
            init_he_normal(&mut set, "b.conv1.w", vec![2, 2, 3, 3], 18, 1);
            init_batch_norm(&mut set, "b.bn1", 2);
            init_he_normal(&mut set, "b.conv2.w", vec![2, 2, 3, 3], 18, 1);
            init_batch_norm(&mut set, "b.bn2", 2);
            let mut tape = Tape::new();
            let bound = set.bind(&mut tape, false);
            let x = tape.leaf(Tensor::full(vec![1, 2, 17, 17], 0.3f32), false);
            let y = res_block(
                &mut tape,
                &mut set,
                &bound,
                "b",
                x,
                r,
                BnMode::Train,
                BnUpdate::None,
            )
            .unwrap();
            assert_eq!(tape.shape(y), &[1, 2, 17, 17], "dilation {r}");
        }
    }

    #[test]
    fn res_block_gradient_reaches_input_through_shortcut() {
        let mut set = ParamSet::<f32>::new();
        init_he_normal(&mut set, "b.conv1.w", vec![2, 2, 3, 3], 18, 1);
        init_batch_norm(&mut set, "b.bn1", 2);
        init_he_normal(&mut set, "b.conv2.w", vec![2, 2, 3, 3], 18, 1);
        init_batch_norm(&mut set, "b.bn2", 2);
        set.get_mut("b.conv1.w").data_mut().fill(0.0);
        set.get_mut("b.conv2.w").data_mut().fill(0.0);

        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, false);
        let x = tape.leaf(Tensor::full(vec![1, 2, 3, 3], 0.5f32), true);
        let y = res_block(
            &mut tape,
            &mut set,
            &bound,
            "b",
            x,
            1,
            BnMode::Train,
            BnUpdate::None,
        )
        .unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pyramid_shapes_match_config() {
        let cfg = BackboneConfig::default();
        cfg.validate().unwrap();
        let levels = forward_once(&cfg, &Tensor::zeros(vec![2, 1, 64, 64]), 3, BnMode::Eval);
        assert_eq!(levels.len(), 5);
        let widths = cfg.level_widths();
        for (lvl, &w) in levels.iter().zip(&widths) {
            assert_eq!(lvl.shape(), &[2, w, 16, 16]);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = toy_cfg();
        let mut rng = crate::rng::Rng::seed_from_u64(12);
        let img = Tensor::<f32>::from_fn(vec![1, 1, 16, 16], || rng.uniform(0.0, 1.0) as f32);
        let a = forward_once(&cfg, &img, 7, BnMode::Eval);
        let b = forward_once(&cfg, &img, 7, BnMode::Eval);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn se_toggle_changes_outputs() {
        let cfg_on = toy_cfg();
        let cfg_off = BackboneConfig {
            se_enabled: false,
            ..toy_cfg()
        };
        let mut rng = crate::rng::Rng::seed_from_u64(21);
        let img = Tensor::<f32>::from_fn(vec![1, 1, 16, 16], || rng.uniform(0.2, 1.0) as f32);
        let on = forward_once(&cfg_on, &img, 7, BnMode::Eval);
        let off = forward_once(&cfg_off, &img, 7, BnMode::Eval);
        assert_ne!(on[0].data(), off[0].data());
    }

    #[test]
    fn zeroed_se_weights_scale_each_stage_by_half() {
        // In eval mode with identity batch norms the network is positively
        // homogeneous, so a dead SE gate (factor 0.5 per stage) must scale
        // level i by 0.5^i exactly (up to float rounding).
        let cfg_on = BackboneConfig {
            fusion_enabled: false,
            ..toy_cfg()
        };
        let cfg_off = BackboneConfig {
            se_enabled: false,
            ..cfg_on.clone()
        };
        let mut params_on = init_backbone::<f32>(&cfg_on, 5);
        for si in 1..=4 {
            params_on
                .get_mut(&format!("stage{si}.se.fc1.w"))
                .data_mut()
                .fill(0.0);
            params_on
                .get_mut(&format!("stage{si}.se.fc2.w"))
                .data_mut()
                .fill(0.0);
        }
        let mut rng = crate::rng::Rng::seed_from_u64(30);
        let img = Tensor::<f32>::from_fn(vec![1, 1, 16, 16], || rng.uniform(0.0, 1.0) as f32);

        let run = |params: &mut ParamSet<f32>, cfg: &BackboneConfig| -> Vec<Tensor<f32>> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let iv = tape.leaf(img.clone(), false);
            let pyr = forward_pyramid(
                &mut tape,
                params,
                &bound,
                cfg,
                iv,
                BnMode::Eval,
                BnUpdate::None,
            )
            .unwrap();
            pyr.levels.iter().map(|&v| tape.value(v).clone()).collect()
        };
        let on = run(&mut params_on, &cfg_on);
        let mut params_off = init_backbone::<f32>(&cfg_off, 5);
        let off = run(&mut params_off, &cfg_off);
        for (i, (a, b)) in on.iter().zip(&off).enumerate() {
            let factor = 0.5f32.powi(i as i32 + 1);
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!(
                    (x - factor * y).abs() <= 1e-4 * y.abs().max(1.0),
                    "level {i}: {x} vs {factor} * {y}"
                );
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_reduction() {
        let cfg = BackboneConfig {
            se_reduction: 3,
            ..BackboneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
