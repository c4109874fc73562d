//! Finite-difference verification of analytic gradients.
//!
//! Every differentiable operation (and each composite the training loop
//! relies on) has a named check: random small instances are built in f64,
//! the tape's analytic gradient is compared against central differences
//! with step 1e-4, and the worst relative error is reported. The numeric
//! side only ever evaluates forward passes, so it is independent of the
//! backward rules it verifies.

use crate::backbone::{res_block, se_block};
use crate::distill::{
    discriminator_forward, init_discriminator, loss_adversarial, loss_discriminator,
    loss_generator, loss_student, normalize_pyramid, DiscMode, DiscriminatorConfig,
};
use crate::backbone::FeaturePyramid;
use crate::params::{init_batch_norm, Bound, ParamSet};
use crate::rng::Rng;
use crate::tensor::{BnMode, BnUpdate, ConvSpec, Result, Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-3;

pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Minimum distance from any internal kink (in activation space) for an
/// instance to be accepted. A finite-difference probe perturbs one element
/// by 1e-4; activations move by at most that times the local gain, so this
/// margin keeps every probe on one smooth side of each kink.
pub const MIN_KINK_MARGIN: f64 = 5e-3;

/// Compare tape gradients against central finite differences for a scalar
/// loss built by `build` over the given leaf inputs. Returns the maximum
/// relative error over every element of every input.
pub fn max_fd_error(
    inputs: &[Tensor<f64>],
    build: &mut dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    Ok(fd_probe(inputs, build, 0.0)?.expect("margin 0 never rejects"))
}

/// Like [`max_fd_error`], but first measures the instance's kink margin and
/// returns `None` (no check performed) when it falls below `min_margin`.
pub fn fd_probe(
    inputs: &[Tensor<f64>],
    build: &mut dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
    min_margin: f64,
) -> Result<Option<f64>> {
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.kink_margin() < min_margin {
        return Ok(None);
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(Some(worst))
}

fn uniform_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, || rng.uniform(lo, hi))
}

/// Draw random instances until `instances` of them clear the kink margin,
/// tracking the worst error. Networks with internal ReLU-family activations
/// routinely produce pre-activations within a finite-difference step of the
/// kink; those instances are unverifiable by central differences and are
/// redrawn rather than checked.
fn run_rejecting(
    instances: usize,
    mut one: impl FnMut() -> Result<Option<f64>>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut done = 0usize;
    let mut attempts = 0usize;
    while done < instances {
        attempts += 1;
        if attempts > instances * 400 + 400 {
            return Err(TensorError::InvalidArgument(format!(
                "gradcheck generator produced only {done}/{instances} kink-free instances"
            )));
        }
        if let Some(err) = one()? {
            worst = worst.max(err);
            done += 1;
        }
    }
    Ok(worst)
}

/// Uniform values kept away from zero so kinked activations (ReLU family,
/// max pooling ties) never sit within a finite-difference step of the kink.
fn kink_safe_tensor(rng: &mut Rng, shape: Vec<usize>, span: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, || {
        let v = rng.uniform(-span, span);
        if v.abs() < 0.05 {
            0.05 + v.abs()
        } else {
            v
        }
    })
}

fn check_conv2d(dilation: usize, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = 1 + rng.below(2);
        let cin = 1 + rng.below(3);
        let cout = 1 + rng.below(3);
        let kh = 1 + rng.below(2);
        let kw = 1 + rng.below(2);
        let stride = 1 + rng.below(2);
        let pad = rng.below(2) * dilation.min(2);
        let h = (kh - 1) * dilation + 1 + rng.below(4);
        let w = (kw - 1) * dilation + 1 + rng.below(4);
        let x = uniform_tensor(&mut rng, vec![b, cin, h, w], -1.0, 1.0);
        let k = uniform_tensor(&mut rng, vec![cout, cin, kh, kw], -1.0, 1.0);
        let spec = ConvSpec::new(stride, pad, dilation);
        // Random output weighting makes every gradient element distinct.
        let (oh, ow) = {
            let mut t = Tape::<f64>::new();
            let xv = t.leaf(x.clone(), false);
            let kv = t.leaf(k.clone(), false);
            let y = t.conv2d(xv, kv, spec)?;
            (t.shape(y)[2], t.shape(y)[3])
        };
        let wgt = uniform_tensor(&mut rng, vec![b, cout, oh, ow], -1.0, 1.0);
        let err = max_fd_error(&[x, k], &mut |tape, vars| {
            let wv = tape.leaf(wgt.clone(), false);
            let y = tape.conv2d(vars[0], vars[1], spec)?;
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_batch_norm(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = 2 + rng.below(2);
        let c = 1 + rng.below(3);
        let h = 2 + rng.below(2);
        let x = uniform_tensor(&mut rng, vec![b, c, h, h], -2.0, 2.0);
        let gamma = uniform_tensor(&mut rng, vec![c], 0.5, 1.5);
        let beta = uniform_tensor(&mut rng, vec![c], -0.5, 0.5);
        let wgt = uniform_tensor(&mut rng, vec![b, c, h, h], -1.0, 1.0);
        let err = max_fd_error(&[x, gamma, beta], &mut |tape, vars| {
            let mut running = vec![0.0f64; 2 * c];
            let y = tape.batch_norm(
                vars[0],
                vars[1],
                vars[2],
                &mut running,
                BnMode::Train,
                BnUpdate::None,
                crate::backbone::BN_EPS,
            )?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_se_block(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    run_rejecting(instances, || {
        let b = 1 + rng.below(2);
        let c = 4;
        let hidden = 2;
        let h = 2 + rng.below(3);
        let x = uniform_tensor(&mut rng, vec![b, c, h, h], -1.0, 1.0);
        let fc1 = kink_safe_tensor(&mut rng, vec![hidden, c], 1.0);
        let fc2 = uniform_tensor(&mut rng, vec![c, hidden], -1.0, 1.0);
        let wgt = uniform_tensor(&mut rng, vec![b, c, h, h], -1.0, 1.0);
        fd_probe(
            &[x, fc1, fc2],
            &mut |tape, vars| {
                let bound = Bound::from_pairs([
                    ("se.fc1.w".to_string(), vars[1]),
                    ("se.fc2.w".to_string(), vars[2]),
                ]);
                let y = se_block(tape, &bound, "se", vars[0])?;
                let wv = tape.leaf(wgt.clone(), false);
                let weighted = tape.mul(y, wv)?;
                Ok(tape.sum(weighted))
            },
            MIN_KINK_MARGIN,
        )
    })
}

fn check_res_block(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut inst = 0usize;
    run_rejecting(instances, || {
        inst += 1;
        let cin = 2;
        let cout = if inst % 2 == 0 { 2 } else { 3 };
        let dilation = [1, 2, 4][rng.below(3)];
        let h = 3 + rng.below(3);
        let b = 1 + rng.below(2);
        let x = kink_safe_tensor(&mut rng, vec![b, cin, h, h], 1.0);
        let conv1 = uniform_tensor(&mut rng, vec![cout, cin, 3, 3], -0.5, 0.5);
        let g1 = uniform_tensor(&mut rng, vec![cout], 0.5, 1.5);
        let b1 = uniform_tensor(&mut rng, vec![cout], -0.3, 0.3);
        let conv2 = uniform_tensor(&mut rng, vec![cout, cout, 3, 3], -0.5, 0.5);
        let g2 = uniform_tensor(&mut rng, vec![cout], 0.5, 1.5);
        let b2 = uniform_tensor(&mut rng, vec![cout], -0.3, 0.3);
        let wgt = uniform_tensor(&mut rng, vec![b, cout, h, h], -1.0, 1.0);
        let mut inputs = vec![x, conv1, g1, b1, conv2, g2, b2];
        let projecting = cin != cout;
        if projecting {
            inputs.push(uniform_tensor(&mut rng, vec![cout, cin, 1, 1], -0.7, 0.7));
            inputs.push(uniform_tensor(&mut rng, vec![cout], 0.5, 1.5));
            inputs.push(uniform_tensor(&mut rng, vec![cout], -0.3, 0.3));
        }
        fd_probe(&inputs, &mut |tape, vars| {
            let mut pairs = vec![
                ("rb.conv1.w".to_string(), vars[1]),
                ("rb.bn1.gamma".to_string(), vars[2]),
                ("rb.bn1.beta".to_string(), vars[3]),
                ("rb.conv2.w".to_string(), vars[4]),
                ("rb.bn2.gamma".to_string(), vars[5]),
                ("rb.bn2.beta".to_string(), vars[6]),
            ];
            let mut scratch = ParamSet::<f64>::new();
            init_batch_norm(&mut scratch, "rb.bn1", cout);
            init_batch_norm(&mut scratch, "rb.bn2", cout);
            if projecting {
                pairs.push(("rb.shortcut.w".to_string(), vars[7]));
                pairs.push(("rb.shortcut_bn.gamma".to_string(), vars[8]));
                pairs.push(("rb.shortcut_bn.beta".to_string(), vars[9]));
                init_batch_norm(&mut scratch, "rb.shortcut_bn", cout);
                // Mark the projection as present for res_block's lookup.
                scratch.insert("rb.shortcut.w", Tensor::zeros(vec![1]), true);
            }
            let bound = Bound::from_pairs(pairs);
            let y = res_block(
                tape,
                &mut scratch,
                &bound,
                "rb",
                vars[0],
                dilation,
                BnMode::Train,
                BnUpdate::None,
            )?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        }, MIN_KINK_MARGIN)
    })
}

fn tiny_disc_cfg() -> DiscriminatorConfig {
    DiscriminatorConfig {
        in_channels: 2,
        spatial: 3,
        width_factor: 1.0 / 128.0, // widths 1, 2, 4, 8
        dropout_p: 0.25,
        leaky_slope: 0.2,
    }
}

/// Flatten the trainable entries of a parameter set into FD inputs plus the
/// (name, index) mapping needed to rebuild a Bound inside the builder.
fn trainable_inputs(params: &ParamSet<f64>) -> (Vec<Tensor<f64>>, Vec<String>) {
    let mut tensors = Vec::new();
    let mut names = Vec::new();
    for e in params.entries() {
        if e.trainable {
            tensors.push(e.value.clone());
            names.push(e.name.clone());
        }
    }
    (tensors, names)
}

fn check_discriminator(instances: usize, seed: u64) -> Result<f64> {
    let cfg = tiny_disc_cfg();
    let mut rng = Rng::seed_from_u64(seed);
    let mut inst = 0u64;
    run_rejecting(instances, || {
        inst += 1;
        let params = init_discriminator::<f64>(&cfg, seed ^ inst);
        let (mut inputs, names) = trainable_inputs(&params);
        let b = 2;
        let feat = uniform_tensor(&mut rng, vec![b, 2, 3, 3], -1.5, 1.5);
        inputs.push(feat);
        let mask_seed = rng.next_u64();
        fd_probe(&inputs, &mut |tape, vars| {
            let mut scratch = ParamSet::<f64>::new();
            for i in 1..=4 {
                init_batch_norm(&mut scratch, &format!("d.bn{i}"), cfg.widths()[i - 1]);
            }
            let bound = Bound::from_pairs(
                names
                    .iter()
                    .cloned()
                    .zip(vars[..names.len()].iter().copied()),
            );
            // Re-seeded per evaluation: the dropout mask is identical across
            // the analytic pass and every finite-difference probe.
            let mut mask_rng = Rng::seed_from_u64(mask_seed);
            let p = discriminator_forward(
                tape,
                &mut scratch,
                &bound,
                &cfg,
                vars[names.len()],
                &mut mask_rng,
                DiscMode::Frozen,
            )?;
            Ok(tape.sum(p))
        }, MIN_KINK_MARGIN)
    })
}

fn random_pyramid(rng: &mut Rng, levels: usize, b: usize) -> Vec<Tensor<f64>> {
    (0..levels)
        .map(|i| {
            let c = 2 + i;
            let h = 2 + (i % 2);
            // Keep site vectors away from the normalization guard.
            Tensor::from_fn(vec![b, c, h, h], || {
                let v = rng.uniform(-1.0, 1.0);
                if v.abs() < 0.2 {
                    0.2 + v.abs()
                } else {
                    v
                }
            })
        })
        .collect()
}

fn check_loss_generator(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let levels = 1 + rng.below(3);
        let b = 1 + rng.below(2);
        let teacher = random_pyramid(&mut rng, levels, b);
        let student = random_pyramid(&mut rng, levels, b);
        let err = max_fd_error(&student, &mut |tape, vars| {
            let t_levels: Vec<Var> = teacher.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let tp = FeaturePyramid { levels: t_levels };
            let sp = FeaturePyramid {
                levels: vars.to_vec(),
            };
            let tn = normalize_pyramid(tape, &tp)?;
            let sn = normalize_pyramid(tape, &sp)?;
            loss_generator(tape, &tn, &sn)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_loss_discriminator(instances: usize, seed: u64) -> Result<f64> {
    let cfg = tiny_disc_cfg();
    let mut rng = Rng::seed_from_u64(seed);
    let mut inst = 0u64;
    run_rejecting(instances, || {
        inst += 1;
        let params = init_discriminator::<f64>(&cfg, seed ^ (0xD00D + inst));
        let (inputs, names) = trainable_inputs(&params);
        let real = uniform_tensor(&mut rng, vec![1, 2, 3, 3], -1.5, 1.5);
        let fake = uniform_tensor(&mut rng, vec![1, 2, 3, 3], -1.5, 1.5);
        let mask_seed = rng.next_u64();
        fd_probe(&inputs, &mut |tape, vars| {
            let mut scratch = ParamSet::<f64>::new();
            for i in 1..=4 {
                init_batch_norm(&mut scratch, &format!("d.bn{i}"), cfg.widths()[i - 1]);
            }
            let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let mut mask_rng = Rng::seed_from_u64(mask_seed);
            let rv = tape.leaf(real.clone(), false);
            let fv = tape.leaf(fake.clone(), false);
            let d_real =
                discriminator_forward(tape, &mut scratch, &bound, &cfg, rv, &mut mask_rng, DiscMode::Frozen)?;
            let d_fake =
                discriminator_forward(tape, &mut scratch, &bound, &cfg, fv, &mut mask_rng, DiscMode::Frozen)?;
            loss_discriminator(tape, d_real, d_fake)
        }, MIN_KINK_MARGIN)
    })
}

fn check_loss_adversarial(instances: usize, seed: u64) -> Result<f64> {
    let cfg = tiny_disc_cfg();
    let mut rng = Rng::seed_from_u64(seed);
    let mut inst = 0u64;
    run_rejecting(instances, || {
        inst += 1;
        let params = init_discriminator::<f64>(&cfg, seed ^ (0xAD + inst));
        let feat = uniform_tensor(&mut rng, vec![1, 2, 3, 3], -1.5, 1.5);
        let mask_seed = rng.next_u64();
        fd_probe(&[feat], &mut |tape, vars| {
            let mut scratch = ParamSet::<f64>::new();
            for i in 1..=4 {
                init_batch_norm(&mut scratch, &format!("d.bn{i}"), cfg.widths()[i - 1]);
            }
            // Discriminator parameters enter as constants: the adversarial
            // loss only drives the student features.
            let bound = params.bind(tape, false);
            let mut mask_rng = Rng::seed_from_u64(mask_seed);
            let d_fake = discriminator_forward(
                tape,
                &mut scratch,
                &bound,
                &cfg,
                vars[0],
                &mut mask_rng,
                DiscMode::Frozen,
            )?;
            loss_adversarial(tape, d_fake)
        }, MIN_KINK_MARGIN)
    })
}

fn check_loss_student(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let lambda = rng.uniform(0.0, 1.0);
        let lg = Tensor::scalar(rng.uniform(0.1, 1.5));
        let ladv = Tensor::scalar(rng.uniform(0.1, 1.5));
        let err = max_fd_error(&[lg, ladv], &mut |tape, vars| {
            loss_student(tape, vars[0], vars[1], lambda)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_linear(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, n, m) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let x = uniform_tensor(&mut rng, vec![b, n], -1.0, 1.0);
        let w = uniform_tensor(&mut rng, vec![m, n], -1.0, 1.0);
        let bias = uniform_tensor(&mut rng, vec![m], -1.0, 1.0);
        let wgt = uniform_tensor(&mut rng, vec![b, m], -1.0, 1.0);
        let err = max_fd_error(&[x, w, bias], &mut |tape, vars| {
            let y = tape.linear(vars[0], vars[1], Some(vars[2]))?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_unary(
    instances: usize,
    seed: u64,
    kink_safe: bool,
    f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 2 + rng.below(6);
        let x = if kink_safe {
            kink_safe_tensor(&mut rng, vec![1, n], 2.0)
        } else {
            uniform_tensor(&mut rng, vec![1, n], -2.0, 2.0)
        };
        let wgt = uniform_tensor(&mut rng, vec![1, n], -1.0, 1.0);
        let err = max_fd_error(&[x], &mut |tape, vars| {
            let y = f(tape, vars[0])?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_max_pool(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let h = 4 + rng.below(3);
        // Well-separated values: no window ever holds a near-tie, so the
        // argmax is stable across the finite-difference probes.
        let mut grid: Vec<f64> = (0..h * h).map(|i| i as f64 * 0.05).collect();
        rng.shuffle(&mut grid);
        let x = Tensor::new(vec![1, 1, h, h], grid).unwrap();
        let window = 2 + rng.below(2);
        let stride = 1 + rng.below(2);
        let err = max_fd_error(&[x], &mut |tape, vars| {
            let y = tape.max_pool2d(vars[0], window, stride, rng_free_pad(window))?;
            Ok(tape.sum(y))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn rng_free_pad(window: usize) -> usize {
    // Deterministic small padding below the window size.
    window / 2
}

fn check_global_avg_pool(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let x = uniform_tensor(&mut rng, vec![2, 2, 3, 3], -1.0, 1.0);
        let wgt = uniform_tensor(&mut rng, vec![2, 2], -1.0, 1.0);
        let err = max_fd_error(&[x], &mut |tape, vars| {
            let y = tape.global_avg_pool(vars[0])?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_l2_normalize(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c = 2 + rng.below(4);
        let x = Tensor::from_fn(vec![1, c, 2, 2], || {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() < 0.2 {
                0.2 + v.abs()
            } else {
                v
            }
        });
        let wgt = uniform_tensor(&mut rng, vec![1, c, 2, 2], -1.0, 1.0);
        let err = max_fd_error(&[x], &mut |tape, vars| {
            let y = tape.l2_normalize_channels(vars[0], crate::distill::L2_NORM_EPS)?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_bilinear(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let h = 2 + rng.below(3);
        let oh = h + rng.below(5);
        let ow = h + rng.below(5);
        let x = uniform_tensor(&mut rng, vec![1, 2, h, h], -1.0, 1.0);
        let wgt = uniform_tensor(&mut rng, vec![1, 2, oh, ow], -1.0, 1.0);
        let err = max_fd_error(&[x], &mut |tape, vars| {
            let y = tape.bilinear_upsample(vars[0], oh, ow)?;
            let wv = tape.leaf(wgt.clone(), false);
            let weighted = tape.mul(y, wv)?;
            Ok(tape.sum(weighted))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_dropout(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let x = uniform_tensor(&mut rng, vec![3, 5], -1.0, 1.0);
        let mask_seed = rng.next_u64();
        let err = max_fd_error(&[x], &mut |tape, vars| {
            let mut mask_rng = Rng::seed_from_u64(mask_seed);
            let y = tape.dropout(vars[0], 0.4, &mut mask_rng, true)?;
            Ok(tape.sum(y))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_cross_entropy(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, k) = (1 + rng.below(3), 2 + rng.below(3));
        let logits = uniform_tensor(&mut rng, vec![b, k], -2.0, 2.0);
        let targets: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let err = max_fd_error(&[logits], &mut |tape, vars| {
            tape.cross_entropy_logits(vars[0], &targets)
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_elementwise(instances: usize, seed: u64) -> Result<f64> {
    // Covers add, mul, channel_scale, affine, mean and clamp_ln in one
    // composite expression.
    let mut rng = Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let a = uniform_tensor(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let b = uniform_tensor(&mut rng, vec![2, 3, 2, 2], -1.0, 1.0);
        let s = uniform_tensor(&mut rng, vec![2, 3], 0.5, 1.5);
        let err = max_fd_error(&[a, b, s], &mut |tape, vars| {
            let sum = tape.add(vars[0], vars[1])?;
            let prod = tape.mul(sum, vars[0])?;
            let scaled = tape.channel_scale(prod, vars[2])?;
            let shifted = tape.affine(scaled, 0.1, 0.5);
            let sig = tape.sigmoid(shifted);
            let ln = tape.clamp_ln(sig, crate::distill::LOG_EPS);
            Ok(tape.mean(ln))
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

type CheckFn = fn(usize, u64) -> Result<f64>;

/// Every named gradient check, in display order.
pub fn check_table() -> Vec<(&'static str, CheckFn)> {
    vec![
        ("conv2d_r1", (|n, s| check_conv2d(1, n, s)) as CheckFn),
        ("conv2d_r2", |n, s| check_conv2d(2, n, s)),
        ("conv2d_r4", |n, s| check_conv2d(4, n, s)),
        ("batch_norm", check_batch_norm),
        ("se_block", check_se_block),
        ("res_block", check_res_block),
        ("discriminator", check_discriminator),
        ("loss_generator", check_loss_generator),
        ("loss_discriminator", check_loss_discriminator),
        ("loss_adversarial", check_loss_adversarial),
        ("loss_student", check_loss_student),
        ("linear", check_linear),
        ("relu", |n, s| {
            check_unary(n, s, true, |t, v| Ok(t.relu(v)))
        }),
        ("leaky_relu", |n, s| {
            check_unary(n, s, true, |t, v| t.leaky_relu(v, 0.2))
        }),
        ("sigmoid", |n, s| {
            check_unary(n, s, false, |t, v| Ok(t.sigmoid(v)))
        }),
        ("max_pool2d", check_max_pool),
        ("global_avg_pool", check_global_avg_pool),
        ("l2_normalize", check_l2_normalize),
        ("bilinear_upsample", check_bilinear),
        ("dropout", check_dropout),
        ("cross_entropy", check_cross_entropy),
        ("elementwise", check_elementwise),
    ]
}

pub fn check_names() -> Vec<&'static str> {
    check_table().iter().map(|(n, _)| *n).collect()
}

/// Run one named check over `instances` random instances.
pub fn run_check(name: &str, instances: usize, seed: u64) -> Result<CheckReport> {
    for (n, f) in check_table() {
        if n == name {
            let max_rel_err = f(instances, seed)?;
            return Ok(CheckReport {
                name: name.to_string(),
                instances,
                max_rel_err,
                tol: FD_TOL,
            });
        }
    }
    Err(TensorError::InvalidArgument(format!(
        "unknown gradcheck op {name}; known: {}",
        check_names().join(", ")
    )))
}

pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    check_table()
        .iter()
        .map(|(n, _)| run_check(n, instances, seed))
        .collect()
}
