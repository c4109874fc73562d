//! Teacher-student feature alignment and the adversarial discriminator.
//!
//! The student is pulled toward the frozen teacher by a cosine loss over
//! L2-normalized activation vectors at every pyramid level. A convolutional
//! discriminator scores raw deep feature maps as teacher-like or
//! student-like; its binary cross-entropy loss trains the discriminator,
//! and the complementary adversarial term feeds the student total.

use serde::{Deserialize, Serialize};

use crate::backbone::{batch_norm_named, FeaturePyramid, BN_EPS};
use crate::params::{init_batch_norm, init_const, init_he_normal, Bound, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, BnUpdate, ConvSpec, Result, Tape, TensorError, Var};

/// Guard for L2 normalization of near-zero activation vectors.
pub const L2_NORM_EPS: f64 = 1e-12;
/// Probability clamp inside the log losses.
pub const LOG_EPS: f64 = 1e-7;

/// Filter counts of the four discriminator stages before width scaling.
pub const DISC_BASE_WIDTHS: [usize; 4] = [128, 256, 512, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Spatial extent of the input feature maps (square).
    pub spatial: usize,
    /// Multiplier applied to the 128/256/512/1024 stage widths.
    pub width_factor: f64,
    pub dropout_p: f64,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 128,
            spatial: 16,
            width_factor: 0.125,
            dropout_p: 0.3,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn widths(&self) -> [usize; 4] {
        let mut w = [0usize; 4];
        for (i, &base) in DISC_BASE_WIDTHS.iter().enumerate() {
            w[i] = ((base as f64 * self.width_factor).round() as usize).max(1);
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.spatial == 0 {
            return Err(TensorError::InvalidArgument(
                "discriminator input extent must be positive".into(),
            ));
        }
        if self.width_factor <= 0.0 {
            return Err(TensorError::InvalidArgument(
                "discriminator width factor must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TensorError::InvalidArgument(
                "dropout probability must be in [0, 1)".into(),
            ));
        }
        if !(0.0 < self.leaky_slope && self.leaky_slope < 1.0) {
            return Err(TensorError::InvalidArgument(
                "leaky ReLU slope must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// How the discriminator treats batch norm and dropout for one pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscMode {
    /// Batch statistics, running stats updated, dropout active. Used when
    /// optimizing the discriminator itself.
    Train,
    /// Batch statistics and active dropout but no running-stat update. Used
    /// for the adversarial term where the discriminator is held constant.
    Frozen,
    /// Running statistics, dropout off.
    Eval,
}

/// Four 3x3 stride-1 pad-1 conv stages (BN + leaky ReLU), dropout, flatten,
/// and a fully connected layer to one sigmoid probability per sample.
pub fn init_discriminator<E: Scalar>(cfg: &DiscriminatorConfig, group_seed: u64) -> ParamSet<E> {
    let widths = cfg.widths();
    let mut set = ParamSet::new();
    let mut in_ch = cfg.in_channels;
    for (i, &w) in widths.iter().enumerate() {
        init_he_normal(
            &mut set,
            &format!("d.conv{}.w", i + 1),
            vec![w, in_ch, 3, 3],
            in_ch * 9,
            group_seed,
        );
        init_batch_norm(&mut set, &format!("d.bn{}", i + 1), w);
        in_ch = w;
    }
    let fc_in = in_ch * cfg.spatial * cfg.spatial;
    init_he_normal(&mut set, "d.fc.w", vec![1, fc_in], fc_in, group_seed);
    init_const(&mut set, "d.fc.b", vec![1], 0.0, true);
    set
}

/// Probability per sample that the input feature map is teacher-like.
/// Stride-1 pad-1 convs preserve the spatial extent through all stages.
pub fn discriminator_forward<E: Scalar>(
    tape: &mut Tape<E>,
    params: &mut ParamSet<E>,
    bound: &Bound,
    cfg: &DiscriminatorConfig,
    input: Var,
    rng: &mut Rng,
    mode: DiscMode,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.spatial
        || shape[3] != cfg.spatial
    {
        return Err(TensorError::ShapeMismatch(format!(
            "discriminator expects [b, {}, {}, {}], got {shape:?}",
            cfg.in_channels, cfg.spatial, cfg.spatial
        )));
    }
    let b = shape[0];
    let (bn_mode, update) = match mode {
        DiscMode::Train => (BnMode::Train, BnUpdate::Ema(crate::backbone::BN_MOMENTUM)),
        DiscMode::Frozen => (BnMode::Train, BnUpdate::None),
        DiscMode::Eval => (BnMode::Eval, BnUpdate::None),
    };
    let mut x = input;
    for i in 1..=4 {
        x = tape.conv2d(x, bound.var(&format!("d.conv{i}.w")), ConvSpec::new(1, 1, 1))?;
        x = batch_norm_named(tape, params, bound, &format!("d.bn{i}"), x, bn_mode, update)?;
        x = tape.leaky_relu(x, cfg.leaky_slope)?;
    }
    let train_dropout = matches!(mode, DiscMode::Train | DiscMode::Frozen);
    x = tape.dropout(x, cfg.dropout_p, rng, train_dropout)?;
    let flat_len = tape.value(x).numel() / b;
    let flat = tape.reshape(x, vec![b, flat_len])?;
    let logit = tape.linear(flat, bound.var("d.fc.w"), Some(bound.var("d.fc.b")))?;
    let prob = tape.sigmoid(logit);
    tape.reshape(prob, vec![b])
}

/// Per-level L2 normalization of every spatial activation vector.
pub fn normalize_pyramid<E: Scalar>(
    tape: &mut Tape<E>,
    pyramid: &FeaturePyramid,
) -> Result<FeaturePyramid> {
    let mut levels = Vec::with_capacity(pyramid.levels.len());
    for &lvl in &pyramid.levels {
        levels.push(tape.l2_normalize_channels(lvl, L2_NORM_EPS)?);
    }
    Ok(FeaturePyramid { levels })
}

/// Cosine alignment loss between normalized teacher and student pyramids:
/// the mean over levels of the mean over sites of (1 - cos). For unit
/// vectors the cosine is the channel dot product, so the loss lies in
/// [0, 2] and gradients flow only into the (non-constant) student side.
pub fn loss_generator<E: Scalar>(
    tape: &mut Tape<E>,
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
) -> Result<Var> {
    if teacher.levels.len() != student.levels.len() || teacher.levels.is_empty() {
        return Err(TensorError::ShapeMismatch(format!(
            "pyramid level counts differ: {} vs {}",
            teacher.levels.len(),
            student.levels.len()
        )));
    }
    let mut per_level = Vec::with_capacity(teacher.levels.len());
    for (&t, &s) in teacher.levels.iter().zip(&student.levels) {
        let ts = tape.shape(t).to_vec();
        if ts != tape.shape(s) {
            return Err(TensorError::ShapeMismatch(format!(
                "pyramid level shapes differ: {ts:?} vs {:?}",
                tape.shape(s)
            )));
        }
        let sites: usize = ts.iter().product::<usize>() / ts[1];
        let prod = tape.mul(t, s)?;
        let dot_sum = tape.sum(prod);
        // 1 - mean_site(cos) = 1 - sum(t . s) / sites
        per_level.push(tape.affine(dot_sum, -1.0 / sites as f64, 1.0));
    }
    let mut acc = per_level[0];
    for &l in &per_level[1..] {
        acc = tape.add(acc, l)?;
    }
    Ok(tape.affine(acc, 1.0 / per_level.len() as f64, 0.0))
}

/// Binary cross-entropy of the discriminator over one batch of teacher
/// probabilities (label 1) and one of student probabilities (label 0).
pub fn loss_discriminator<E: Scalar>(
    tape: &mut Tape<E>,
    d_real: Var,
    d_fake: Var,
) -> Result<Var> {
    let m_real = tape.value(d_real).numel();
    let m_fake = tape.value(d_fake).numel();
    if m_real == 0 || m_fake == 0 || m_real != m_fake {
        return Err(TensorError::InvalidArgument(format!(
            "loss_discriminator needs equal nonzero batches, got {m_real} and {m_fake}"
        )));
    }
    let ln_real = tape.clamp_ln(d_real, LOG_EPS);
    let mean_real = tape.mean(ln_real);
    let one_minus_fake = tape.affine(d_fake, -1.0, 1.0);
    let ln_fake = tape.clamp_ln(one_minus_fake, LOG_EPS);
    let mean_fake = tape.mean(ln_fake);
    let sum = tape.add(mean_real, mean_fake)?;
    Ok(tape.affine(sum, -1.0, 0.0))
}

/// Adversarial term for the student: -mean log D(student features).
pub fn loss_adversarial<E: Scalar>(tape: &mut Tape<E>, d_fake: Var) -> Result<Var> {
    if tape.value(d_fake).numel() == 0 {
        return Err(TensorError::InvalidArgument(
            "loss_adversarial needs at least one sample".into(),
        ));
    }
    let ln_fake = tape.clamp_ln(d_fake, LOG_EPS);
    let mean = tape.mean(ln_fake);
    Ok(tape.affine(mean, -1.0, 0.0))
}

/// Student total: L_S = L_G + lambda * L_adv.
pub fn loss_student<E: Scalar>(
    tape: &mut Tape<E>,
    l_g: Var,
    l_adv: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let weighted = tape.affine(l_adv, lambda, 0.0);
    tape.add(l_g, weighted)
}

/// Scalar losses of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub l_g: f64,
    pub l_d: f64,
    pub l_adv: f64,
    pub l_s: f64,
    pub lambda: f64,
}

// Re-exported for the pipeline: the eps used by discriminator batch norms.
pub const DISC_BN_EPS: f64 = BN_EPS;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf_pyramid(
        tape: &mut Tape<f64>,
        levels: Vec<Tensor<f64>>,
        requires: bool,
    ) -> FeaturePyramid {
        FeaturePyramid {
            levels: levels.into_iter().map(|t| tape.leaf(t, requires)).collect(),
        }
    }

    #[test]
    fn identical_pyramids_have_zero_generator_loss() {
        let mut rng = Rng::seed_from_u64(4);
        let t = Tensor::<f64>::from_fn(vec![1, 3, 2, 2], || rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let tp = leaf_pyramid(&mut tape, vec![t.clone()], false);
        let sp = leaf_pyramid(&mut tape, vec![t], false);
        let tn = normalize_pyramid(&mut tape, &tp).unwrap();
        let sn = normalize_pyramid(&mut tape, &sp).unwrap();
        let l = loss_generator(&mut tape, &tn, &sn).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_activations_give_loss_one() {
        let mut tape = Tape::<f64>::new();
        // Two sites; teacher along channel 0, student along channel 1.
        let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let s = Tensor::new(vec![1, 2, 1, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let tp = leaf_pyramid(&mut tape, vec![t], false);
        let sp = leaf_pyramid(&mut tape, vec![s], false);
        let tn = normalize_pyramid(&mut tape, &tp).unwrap();
        let sn = normalize_pyramid(&mut tape, &sp).unwrap();
        let l = loss_generator(&mut tape, &tn, &sn).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_mixes_cosines_per_site() {
        // One level, two sites with cosines 1 and 0.2 -> loss 0.4.
        let mut tape = Tape::<f64>::new();
        let t = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let c = 0.2f64;
        let s_vec = vec![c, 1.0, (1.0 - c * c).sqrt(), 0.0];
        let s = Tensor::new(vec![1, 2, 1, 2], s_vec).unwrap();
        let tp = leaf_pyramid(&mut tape, vec![t], false);
        let sp = leaf_pyramid(&mut tape, vec![s], false);
        let tn = normalize_pyramid(&mut tape, &tp).unwrap();
        let sn = normalize_pyramid(&mut tape, &sp).unwrap();
        let l = loss_generator(&mut tape, &tn, &sn).unwrap();
        assert!((tape.value(l).item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_is_scale_invariant() {
        let mut rng = Rng::seed_from_u64(17);
        let t = Tensor::<f64>::from_fn(vec![2, 4, 3, 3], || rng.uniform(-1.0, 1.0));
        let s = Tensor::<f64>::from_fn(vec![2, 4, 3, 3], || rng.uniform(-1.0, 1.0));
        let eval = |alpha: f64, beta: f64| -> f64 {
            let mut tape = Tape::new();
            let tp = leaf_pyramid(&mut tape, vec![t.map(|v| v * alpha)], false);
            let sp = leaf_pyramid(&mut tape, vec![s.map(|v| v * beta)], false);
            let tn = normalize_pyramid(&mut tape, &tp).unwrap();
            let sn = normalize_pyramid(&mut tape, &sp).unwrap();
            let l = loss_generator(&mut tape, &tn, &sn).unwrap();
            tape.value(l).item()
        };
        let base = eval(1.0, 1.0);
        assert!((eval(3.7, 1.0) - base).abs() < 1e-6);
        assert!((eval(1.0, 0.2) - base).abs() < 1e-6);
        assert!((0.0..=2.0).contains(&base));
    }

    #[test]
    fn normalized_pyramid_sites_are_unit_vectors() {
        let mut rng = Rng::seed_from_u64(2);
        let t = Tensor::<f64>::from_fn(vec![1, 5, 4, 4], || rng.uniform(-2.0, 2.0));
        let mut tape = Tape::new();
        let p = leaf_pyramid(&mut tape, vec![t], false);
        let n = normalize_pyramid(&mut tape, &p).unwrap();
        let out = tape.value(n.levels[0]);
        for s in 0..16 {
            let norm2: f64 = (0..5).map(|c| out.data()[c * 16 + s].powi(2)).sum();
            assert!((norm2.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_losses_match_hand_values() {
        let mut tape = Tape::<f64>::new();
        // Perfect discriminator.
        let real = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), false);
        let fake = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let l = loss_discriminator(&mut tape, real, fake).unwrap();
        assert!(tape.value(l).item().abs() < 1e-5);

        // Uninformative discriminator: 2 ln 2.
        let half = tape.leaf(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), false);
        let l2 = loss_discriminator(&mut tape, half, half).unwrap();
        assert!((tape.value(l2).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-9);

        // Adversarial term.
        let fooled = tape.leaf(Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap(), false);
        let la = loss_adversarial(&mut tape, fooled).unwrap();
        assert!(tape.value(la).item().abs() < 1e-6);
        let la2 = loss_adversarial(&mut tape, half).unwrap();
        assert!((tape.value(la2).item() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn bce_loss_is_nonnegative_and_monotone() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut tape = Tape::<f64>::new();
            let r = Tensor::from_fn(vec![4], || rng.uniform(0.01, 0.99));
            let f = Tensor::from_fn(vec![4], || rng.uniform(0.01, 0.99));
            let rv = tape.leaf(r, false);
            let fv = tape.leaf(f.clone(), false);
            let l = loss_discriminator(&mut tape, rv, fv).unwrap();
            assert!(tape.value(l).item() >= 0.0);

            let la = loss_adversarial(&mut tape, fv).unwrap();
            let la_v = tape.value(la).item();
            assert!(la_v >= 0.0);
            // Lowering any probability strictly raises the adversarial loss.
            let mut lower = f.clone();
            lower.data_mut()[1] *= 0.5;
            let lv = tape.leaf(lower, false);
            let la_low = loss_adversarial(&mut tape, lv).unwrap();
            assert!(tape.value(la_low).item() > la_v);
        }
    }

    #[test]
    fn student_total_is_exact_linear_combination() {
        let mut tape = Tape::<f64>::new();
        let lg = tape.leaf(Tensor::scalar(0.4), false);
        let ladv = tape.leaf(Tensor::scalar(0.7), false);
        let ls = loss_student(&mut tape, lg, ladv, 0.1).unwrap();
        assert!((tape.value(ls).item() - 0.47).abs() < 1e-12);

        let ls0 = loss_student(&mut tape, lg, ladv, 0.0).unwrap();
        assert_eq!(tape.value(ls0).item(), 0.4);

        let zero = tape.leaf(Tensor::scalar(0.0), false);
        let lsz = loss_student(&mut tape, zero, zero, 0.5).unwrap();
        assert_eq!(tape.value(lsz).item(), 0.0);

        assert!(loss_student(&mut tape, lg, ladv, -0.1).is_err());
    }

    #[test]
    fn discriminator_outputs_probabilities_and_preserves_extent() {
        let cfg = DiscriminatorConfig {
            in_channels: 3,
            spatial: 5,
            width_factor: 1.0 / 64.0,
            dropout_p: 0.3,
            leaky_slope: 0.2,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.widths(), [2, 4, 8, 16]);
        let mut params = init_discriminator::<f64>(&cfg, 11);
        let mut rng = Rng::seed_from_u64(1);
        let mut data_rng = Rng::seed_from_u64(2);
        let input = Tensor::<f64>::from_fn(vec![3, 3, 5, 5], || data_rng.uniform(-4.0, 4.0));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let iv = tape.leaf(input, false);
        let out = discriminator_forward(
            &mut tape,
            &mut params,
            &bound,
            &cfg,
            iv,
            &mut rng,
            DiscMode::Train,
        )
        .unwrap();
        assert_eq!(tape.shape(out), &[3]);
        for &p in tape.value(out).data() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn zeroed_discriminator_outputs_half() {
        let cfg = DiscriminatorConfig {
            in_channels: 2,
            spatial: 4,
            width_factor: 1.0 / 64.0,
            dropout_p: 0.0,
            leaky_slope: 0.2,
        };
        let mut params = init_discriminator::<f64>(&cfg, 11);
        let names: Vec<String> = params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.name.clone())
            .collect();
        for n in names {
            if n.ends_with(".w") || n.ends_with(".b") {
                params.get_mut(&n).data_mut().fill(0.0);
            }
        }
        let mut rng = Rng::seed_from_u64(1);
        let mut data_rng = Rng::seed_from_u64(9);
        let input = Tensor::<f64>::from_fn(vec![2, 2, 4, 4], || data_rng.uniform(-1.0, 1.0));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let iv = tape.leaf(input, false);
        let out = discriminator_forward(
            &mut tape,
            &mut params,
            &bound,
            &cfg,
            iv,
            &mut rng,
            DiscMode::Eval,
        )
        .unwrap();
        for &p in tape.value(out).data() {
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn discriminator_rejects_wrong_input_shape() {
        let cfg = DiscriminatorConfig {
            in_channels: 2,
            spatial: 4,
            width_factor: 1.0 / 64.0,
            ..DiscriminatorConfig::default()
        };
        let mut params = init_discriminator::<f64>(&cfg, 1);
        let mut rng = Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let bad = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
        assert!(discriminator_forward(
            &mut tape,
            &mut params,
            &bound,
            &cfg,
            bad,
            &mut rng,
            DiscMode::Eval
        )
        .is_err());
    }
}
