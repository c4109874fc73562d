//! End-to-end training orchestration.
//!
//! Per batch: the frozen teacher's features are fetched (precomputed once,
//! since the teacher runs in eval mode they are batch-independent), the
//! student runs a train-mode forward, and the cosine alignment loss is
//! formed. With the discriminator enabled, it first takes a BCE step on
//! detached stage-4 maps, then — held frozen — contributes the adversarial
//! term to the student total before the student's Adam step. After the
//! final epoch a calibration pass over the training normals freezes the
//! refinement statistics.

use thiserror::Error;

use crate::backbone::{forward_pyramid, init_backbone, FeaturePyramid, BN_MOMENTUM};
use crate::checkpoint::{Checkpoint, LossHistory, OptSnapshot};
use crate::config::{ConfigError, PipelineConfig};
use crate::dataset::{rotate_quarter, Label, LabeledSample};
use crate::distill::{
    discriminator_forward, init_discriminator, loss_adversarial, loss_discriminator,
    loss_generator, loss_student, normalize_pyramid, DiscMode, LossReport,
};
use crate::evaluate::batch_level_maps;
use crate::anomaly::RefineCalibrator;
use crate::params::{collect_grads, init_const, init_he_normal, ParamSet};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Adam, AdamHyperparams, BnMode, BnUpdate, Tape, Tensor, TensorError};

/// Teacher feature caches above this size are recomputed per batch instead.
const TEACHER_CACHE_CAP_BYTES: usize = 512 << 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training split rejected: {0}")]
    BadSplit(String),
    #[error("non-finite {term} at step {step}")]
    NonFiniteLoss { step: u64, term: String },
    #[error("checkpoint cannot resume: {0}")]
    BadResume(String),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Per-step progress callback payload.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossReport,
}

/// Per-image teacher features: normalized pyramid levels plus the raw
/// stage-4 map the discriminator consumes.
struct TeacherFeatures {
    norm_levels: Vec<Tensor<f32>>,
    raw_stage4: Tensor<f32>,
}

fn validate_split(config: &PipelineConfig, split: &[LabeledSample]) -> Result<()> {
    if split.is_empty() {
        return Err(TrainError::BadSplit("training split is empty".into()));
    }
    let want = vec![
        config.channels,
        config.input_extent,
        config.input_extent,
    ];
    for s in split {
        if s.label != Label::Normal {
            return Err(TrainError::BadSplit(format!(
                "anomalous sample {} found in training split",
                s.name
            )));
        }
        if s.image.shape() != want.as_slice() {
            return Err(TrainError::BadSplit(format!(
                "sample {} has shape {:?}, config expects {:?}",
                s.name,
                s.image.shape(),
                want
            )));
        }
    }
    Ok(())
}

fn batch_tensor(split: &[LabeledSample], indices: &[usize]) -> Tensor<f32> {
    let parts: Vec<&Tensor<f32>> = indices.iter().map(|&i| &split[i].image).collect();
    Tensor::stack(&parts).expect("validated sample shapes")
}

/// Eval-mode teacher forward over a batch: normalized levels and raw
/// stage-4 maps.
fn teacher_forward_batch(
    teacher: &mut ParamSet<f32>,
    config: &PipelineConfig,
    images: &Tensor<f32>,
) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let img = tape.leaf(images.clone(), false);
    let pyr = forward_pyramid(
        &mut tape,
        teacher,
        &bound,
        &config.backbone,
        img,
        BnMode::Eval,
        BnUpdate::None,
    )?;
    let raw4 = tape.value(pyr.levels[3]).clone();
    let norm = normalize_pyramid(&mut tape, &pyr)?;
    let levels = norm
        .levels
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    Ok((levels, raw4))
}

fn teacher_cache_bytes(config: &PipelineConfig, n_images: usize) -> usize {
    let hw = (config.input_extent / 4) * (config.input_extent / 4);
    let per_image: usize = config
        .backbone
        .level_widths()
        .iter()
        .map(|&c| c * hw)
        .sum::<usize>()
        + config.backbone.widths[3] * hw;
    n_images * per_image * 4
}

fn build_teacher_cache(
    teacher: &mut ParamSet<f32>,
    config: &PipelineConfig,
    split: &[LabeledSample],
) -> Result<Option<Vec<TeacherFeatures>>> {
    if teacher_cache_bytes(config, split.len()) > TEACHER_CACHE_CAP_BYTES {
        return Ok(None);
    }
    let mut cache = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(config.batch_size) {
        let images = batch_tensor(split, chunk);
        let (levels, raw4) = teacher_forward_batch(teacher, config, &images)?;
        for (row, _) in chunk.iter().enumerate() {
            cache.push(TeacherFeatures {
                norm_levels: levels.iter().map(|l| l.index_axis0(row)).collect(),
                raw_stage4: raw4.index_axis0(row),
            });
        }
    }
    Ok(Some(cache))
}

fn gather_teacher(
    cache: &Option<Vec<TeacherFeatures>>,
    teacher: &mut ParamSet<f32>,
    config: &PipelineConfig,
    split: &[LabeledSample],
    indices: &[usize],
) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
    match cache {
        Some(cache) => {
            let n_levels = cache[0].norm_levels.len();
            let mut levels = Vec::with_capacity(n_levels);
            for lvl in 0..n_levels {
                let parts: Vec<&Tensor<f32>> = indices
                    .iter()
                    .map(|&i| &cache[i].norm_levels[lvl])
                    .collect();
                levels.push(Tensor::stack(&parts)?);
            }
            let raw4_parts: Vec<&Tensor<f32>> =
                indices.iter().map(|&i| &cache[i].raw_stage4).collect();
            Ok((levels, Tensor::stack(&raw4_parts)?))
        }
        None => {
            let images = batch_tensor(split, indices);
            teacher_forward_batch(teacher, config, &images)
        }
    }
}

/// One deterministic pass over the training set in dataset order that
/// replaces the teacher's placeholder (0, 1) running statistics with the
/// cumulative average of observed batch statistics. A pre-trained network
/// arrives with converged statistics; a freshly initialized frozen teacher
/// needs them estimated before its eval-mode features mean anything.
/// Consumes no randomness and never touches weights.
fn teacher_stat_warmup(
    teacher: &mut ParamSet<f32>,
    config: &PipelineConfig,
    split: &[LabeledSample],
) -> Result<()> {
    let indices: Vec<usize> = (0..split.len()).collect();
    for (k, chunk) in indices.chunks(config.batch_size).enumerate() {
        let images = batch_tensor(split, chunk);
        let mut tape = Tape::new();
        let bound = teacher.bind(&mut tape, false);
        let img = tape.leaf(images, false);
        // Cumulative-average update: after batch k the stored statistics
        // are the mean over all batches so far.
        forward_pyramid(
            &mut tape,
            teacher,
            &bound,
            &config.backbone,
            img,
            BnMode::Train,
            BnUpdate::Ema(1.0 / (k + 1) as f64),
        )?;
    }
    Ok(())
}

/// Rotation-prediction pretext: train the (future) teacher to classify
/// quarter-turn rotations of normal images, then freeze it. Gives the
/// frozen network data-adapted filters and batch-norm statistics.
fn pretext_train(
    teacher: &mut ParamSet<f32>,
    config: &PipelineConfig,
    split: &[LabeledSample],
) -> Result<()> {
    let w4 = config.backbone.widths[3];
    let head_seed = derive_seed(config.seed, "pretext_head");
    let mut head = ParamSet::<f32>::new();
    init_he_normal(&mut head, "head.fc.w", vec![4, w4], w4, head_seed);
    init_const(&mut head, "head.fc.b", vec![4], 0.0, true);

    let mut rng = Rng::seed_from_u64(derive_seed(config.seed, "pretext"));
    let mut adam = Adam::<f32>::new(AdamHyperparams::with_lr(config.learning_rate));
    for _ in 0..config.pretext_epochs {
        let mut indices: Vec<usize> = (0..split.len()).collect();
        rng.shuffle(&mut indices);
        for chunk in indices.chunks(config.batch_size) {
            let rotations: Vec<usize> = chunk.iter().map(|_| rng.below(4)).collect();
            let parts: Vec<Tensor<f32>> = chunk
                .iter()
                .zip(&rotations)
                .map(|(&i, &k)| rotate_quarter(&split[i].image, k))
                .collect();
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            let images = Tensor::stack(&refs)?;

            let mut tape = Tape::new();
            let bound = teacher.bind(&mut tape, true);
            let bound_head = head.bind(&mut tape, true);
            let img = tape.leaf(images, false);
            let pyr = forward_pyramid(
                &mut tape,
                teacher,
                &bound,
                &config.backbone,
                img,
                BnMode::Train,
                BnUpdate::Ema(BN_MOMENTUM),
            )?;
            let pooled = tape.global_avg_pool(pyr.levels[3])?;
            let logits = tape.linear(
                pooled,
                bound_head.var("head.fc.w"),
                Some(bound_head.var("head.fc.b")),
            )?;
            let loss = tape.cross_entropy_logits(logits, &rotations)?;
            tape.backward(loss)?;
            let mut grads = collect_grads(&tape, &bound);
            grads.extend(collect_grads(&tape, &bound_head));
            let mut pairs = Vec::new();
            for e in teacher.entries_mut().chain(head.entries_mut()) {
                if e.trainable {
                    pairs.push((
                        e.name.as_str(),
                        e.value.data_mut(),
                        grads.get(e.name.as_str()).map(|g| g.as_slice()),
                    ));
                }
            }
            adam.step(pairs)?;
        }
    }
    Ok(())
}

struct TrainState {
    teacher: ParamSet<f32>,
    student: ParamSet<f32>,
    disc: Option<ParamSet<f32>>,
    adam_student: Adam<f32>,
    adam_disc: Option<Adam<f32>>,
    rng: Rng,
    step: u64,
    history: LossHistory,
}

fn adam_step_params(
    adam: &mut Adam<f32>,
    params: &mut ParamSet<f32>,
    grads: &std::collections::HashMap<String, Vec<f32>>,
) -> std::result::Result<(), TensorError> {
    let mut pairs = Vec::new();
    for e in params.entries_mut() {
        if e.trainable {
            pairs.push((
                e.name.as_str(),
                e.value.data_mut(),
                grads.get(e.name.as_str()).map(|g| g.as_slice()),
            ));
        }
    }
    adam.step(pairs)
}

fn run_epochs(
    state: &mut TrainState,
    config: &PipelineConfig,
    split: &[LabeledSample],
    cache: &Option<Vec<TeacherFeatures>>,
    epochs: usize,
    epoch_offset: usize,
    progress: &mut dyn FnMut(&StepInfo),
) -> Result<()> {
    let dcfg = config.discriminator_config();
    for epoch in 0..epochs {
        // Fresh identity permutation each epoch: the visit order is a pure
        // function of the RNG stream position, so resume is exact.
        let mut indices: Vec<usize> = (0..split.len()).collect();
        state.rng.shuffle(&mut indices);
        for chunk in indices.chunks(config.batch_size) {
            let (teacher_levels, teacher_raw4) =
                gather_teacher(cache, &mut state.teacher, config, split, chunk)?;
            let images = batch_tensor(split, chunk);

            // Student forward with gradient tracking.
            let mut tape = Tape::new();
            let bound_student = state.student.bind(&mut tape, true);
            let img = tape.leaf(images, false);
            let student_pyr = forward_pyramid(
                &mut tape,
                &mut state.student,
                &bound_student,
                &config.backbone,
                img,
                BnMode::Train,
                BnUpdate::Ema(BN_MOMENTUM),
            )?;
            let student_norm = normalize_pyramid(&mut tape, &student_pyr)?;
            let teacher_vars = FeaturePyramid {
                levels: teacher_levels
                    .into_iter()
                    .map(|t| tape.leaf(t, false))
                    .collect(),
            };
            let l_g_var = loss_generator(&mut tape, &teacher_vars, &student_norm)?;
            let l_g = tape.value(l_g_var).item() as f64;

            // Discriminator step on detached maps, then the adversarial
            // term against the just-updated, frozen discriminator.
            let mut l_d = 0.0f64;
            let mut l_adv = 0.0f64;
            let l_s_var = if let (Some(disc), Some(adam_disc)) =
                (state.disc.as_mut(), state.adam_disc.as_mut())
            {
                let detached_s4 = tape.value(student_pyr.levels[3]).clone();
                let mut d_tape = Tape::new();
                let bound_d = disc.bind(&mut d_tape, true);
                let t4 = d_tape.leaf(teacher_raw4, false);
                let s4 = d_tape.leaf(detached_s4, false);
                let d_real = discriminator_forward(
                    &mut d_tape,
                    disc,
                    &bound_d,
                    &dcfg,
                    t4,
                    &mut state.rng,
                    DiscMode::Train,
                )?;
                let d_fake = discriminator_forward(
                    &mut d_tape,
                    disc,
                    &bound_d,
                    &dcfg,
                    s4,
                    &mut state.rng,
                    DiscMode::Train,
                )?;
                let l_d_var = loss_discriminator(&mut d_tape, d_real, d_fake)?;
                l_d = d_tape.value(l_d_var).item() as f64;
                if !l_d.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        step: state.step,
                        term: "L_D".into(),
                    });
                }
                d_tape.backward(l_d_var)?;
                let d_grads = collect_grads(&d_tape, &bound_d);
                adam_step_params(adam_disc, disc, &d_grads).map_err(|e| match e {
                    TensorError::NonFinite(_) => TrainError::NonFiniteLoss {
                        step: state.step,
                        term: "discriminator gradient".into(),
                    },
                    other => TrainError::Tensor(other),
                })?;

                let bound_frozen = disc.bind(&mut tape, false);
                let d_fake_s = discriminator_forward(
                    &mut tape,
                    disc,
                    &bound_frozen,
                    &dcfg,
                    student_pyr.levels[3],
                    &mut state.rng,
                    DiscMode::Frozen,
                )?;
                let l_adv_var = loss_adversarial(&mut tape, d_fake_s)?;
                l_adv = tape.value(l_adv_var).item() as f64;
                loss_student(&mut tape, l_g_var, l_adv_var, config.lambda_adv)?
            } else {
                l_g_var
            };

            let l_s = tape.value(l_s_var).item() as f64;
            for (term, value) in [("L_G", l_g), ("L_adv", l_adv), ("L_S", l_s)] {
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        step: state.step,
                        term: term.into(),
                    });
                }
            }
            tape.backward(l_s_var)?;
            let grads = collect_grads(&tape, &bound_student);
            adam_step_params(&mut state.adam_student, &mut state.student, &grads).map_err(
                |e| match e {
                    TensorError::NonFinite(_) => TrainError::NonFiniteLoss {
                        step: state.step,
                        term: "student gradient".into(),
                    },
                    other => TrainError::Tensor(other),
                },
            )?;

            state.history.l_g.push(l_g as f32);
            state.history.l_d.push(l_d as f32);
            state.history.l_adv.push(l_adv as f32);
            state.history.l_s.push(l_s as f32);
            state.step += 1;
            progress(&StepInfo {
                epoch: epoch_offset + epoch,
                step: state.step,
                losses: LossReport {
                    l_g,
                    l_d,
                    l_adv,
                    l_s,
                    lambda: config.lambda_adv,
                },
            });
        }
    }
    Ok(())
}

fn calibrate(
    state: &mut TrainState,
    config: &PipelineConfig,
    split: &[LabeledSample],
) -> Result<crate::anomaly::RefinementParams> {
    let mut cal = RefineCalibrator::new(config.backbone.num_levels());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(config.batch_size) {
        let images = batch_tensor(split, chunk);
        let per_image =
            batch_level_maps(&mut state.teacher, &mut state.student, config, &images)?;
        for maps in &per_image {
            cal.accumulate(maps)
                .map_err(TrainError::Tensor)?;
        }
    }
    cal.finish().map_err(TrainError::Tensor)
}

fn finish(state: TrainState, config: &PipelineConfig, split: &[LabeledSample]) -> Result<Checkpoint> {
    let mut state = state;
    let refinement = if config.mff_enabled {
        Some(calibrate(&mut state, config, split)?)
    } else {
        None
    };
    let opt_student = OptSnapshot::capture(&state.adam_student, &state.student);
    let opt_disc = state
        .adam_disc
        .as_ref()
        .zip(state.disc.as_ref())
        .map(|(a, d)| OptSnapshot::capture(a, d));
    Ok(Checkpoint {
        config: config.clone(),
        teacher: state.teacher,
        student: state.student,
        discriminator: state.disc,
        refinement,
        opt_student,
        opt_disc,
        rng_state: state.rng.state(),
        step: state.step,
        history: state.history,
    })
}

/// Train from scratch for `config.epochs` epochs over an all-normal split.
pub fn train(config: &PipelineConfig, split: &[LabeledSample]) -> Result<Checkpoint> {
    train_with_progress(config, split, &mut |_| {})
}

/// Construct the frozen teacher for a run: He-initialized weights, then
/// either the rotation pretext or a statistics warm-up pass over the
/// training normals. Deterministic in (config, split).
pub fn build_teacher(
    config: &PipelineConfig,
    split: &[LabeledSample],
) -> Result<ParamSet<f32>> {
    let mut teacher = init_backbone::<f32>(
        &config.backbone,
        derive_seed(config.seed, "teacher"),
    );
    if config.teacher_pretext {
        // Running statistics adapt during the pretext itself.
        pretext_train(&mut teacher, config, split)?;
    } else {
        teacher_stat_warmup(&mut teacher, config, split)?;
    }
    Ok(teacher)
}

pub fn train_with_progress(
    config: &PipelineConfig,
    split: &[LabeledSample],
    progress: &mut dyn FnMut(&StepInfo),
) -> Result<Checkpoint> {
    config.validate()?;
    validate_split(config, split)?;

    let mut teacher = build_teacher(config, split)?;
    let student = init_backbone::<f32>(
        &config.backbone,
        derive_seed(config.seed, "student"),
    );
    let (disc, adam_disc) = if config.discriminator_enabled {
        (
            Some(init_discriminator::<f32>(
                &config.discriminator_config(),
                derive_seed(config.seed, "disc"),
            )),
            Some(Adam::new(AdamHyperparams::with_lr(
                config.learning_rate * config.disc_lr_factor,
            ))),
        )
    } else {
        (None, None)
    };
    let cache = build_teacher_cache(&mut teacher, config, split)?;
    let mut state = TrainState {
        teacher,
        student,
        disc,
        adam_student: Adam::new(AdamHyperparams::with_lr(config.learning_rate)),
        adam_disc,
        rng: Rng::seed_from_u64(derive_seed(config.seed, "train")),
        step: 0,
        history: LossHistory::default(),
    };
    run_epochs(&mut state, config, split, &cache, config.epochs, 0, progress)?;
    finish(state, config, split)
}

/// Continue training from a checkpoint for `extra_epochs` more epochs.
/// Parameters, optimizer moments and the RNG stream resume exactly, so the
/// step sequence matches an uninterrupted run (checkpoints are taken at
/// epoch boundaries).
pub fn resume(
    ckpt: &Checkpoint,
    split: &[LabeledSample],
    extra_epochs: usize,
) -> Result<Checkpoint> {
    resume_with_progress(ckpt, split, extra_epochs, &mut |_| {})
}

pub fn resume_with_progress(
    ckpt: &Checkpoint,
    split: &[LabeledSample],
    extra_epochs: usize,
    progress: &mut dyn FnMut(&StepInfo),
) -> Result<Checkpoint> {
    let config = &ckpt.config;
    config.validate()?;
    validate_split(config, split)?;
    let steps_per_epoch = split.len().div_ceil(config.batch_size) as u64;
    if ckpt.step % steps_per_epoch != 0 {
        return Err(TrainError::BadResume(format!(
            "checkpoint step {} is not an epoch boundary for {} steps per epoch",
            ckpt.step, steps_per_epoch
        )));
    }
    let epochs_done = (ckpt.step / steps_per_epoch) as usize;

    let hp = AdamHyperparams::with_lr(config.learning_rate);
    let hp_disc = AdamHyperparams::with_lr(config.learning_rate * config.disc_lr_factor);
    let mut teacher = ckpt.teacher.clone();
    let cache = build_teacher_cache(&mut teacher, config, split)?;
    let mut state = TrainState {
        teacher,
        student: ckpt.student.clone(),
        disc: ckpt.discriminator.clone(),
        adam_student: ckpt.opt_student.restore(hp),
        adam_disc: ckpt.opt_disc.as_ref().map(|s| s.restore(hp_disc)),
        rng: Rng::from_state(ckpt.rng_state),
        step: ckpt.step,
        history: ckpt.history.clone(),
    };
    run_epochs(
        &mut state,
        config,
        split,
        &cache,
        extra_epochs,
        epochs_done,
        progress,
    )?;
    finish(state, config, split)
}
