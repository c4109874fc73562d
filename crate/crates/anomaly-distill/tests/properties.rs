//! Property tests for the numeric core: oracle equivalences for the
//! convolution, range and invariance laws for the losses and metrics, and
//! reproducibility of every seeded stream.

use anomaly_distill::anomaly::{
    anomaly_map_layer, auroc, fuse_maps, gaussian_kernel, smooth_map,
};
use anomaly_distill::backbone::se_block;
use anomaly_distill::distill::{loss_generator, loss_student, normalize_pyramid};
use anomaly_distill::backbone::FeaturePyramid;
use anomaly_distill::params::Bound;
use anomaly_distill::rng::Rng;
use anomaly_distill::tensor::{ConvSpec, Tape, Tensor};
use proptest::prelude::*;

/// Naive four-loop convolution, the independent oracle for conv2d. Sums in
/// ascending (channel, ky, kx) order, skipping out-of-bounds taps.
fn conv_oracle(
    x: &Tensor<f32>,
    k: &Tensor<f32>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Tensor<f32> {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - ((kh - 1) * dilation + 1)) / stride + 1;
    let ow = (w + 2 * pad - ((kw - 1) * dilation + 1)) / stride + 1;
    let mut out = vec![0.0f32; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        for m in 0..kh {
                            for n in 0..kw {
                                let iy = (oy * stride + m * dilation) as isize - pad as isize;
                                let ix = (ox * stride + n * dilation) as isize - pad as isize;
                                if iy >= 0
                                    && (iy as usize) < h
                                    && ix >= 0
                                    && (ix as usize) < w
                                {
                                    let xv = x.data()
                                        [((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = k.data()[((co * cin + ci) * kh + m) * kw + n];
                                    acc += xv * kv;
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, cout, oh, ow], out).unwrap()
}

/// Insert dilation-1 zeros between kernel taps.
fn zero_interleave(k: &Tensor<f32>, dilation: usize) -> Tensor<f32> {
    let (cout, cin, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let nh = (kh - 1) * dilation + 1;
    let nw = (kw - 1) * dilation + 1;
    let mut out = vec![0.0f32; cout * cin * nh * nw];
    for co in 0..cout {
        for ci in 0..cin {
            for m in 0..kh {
                for n in 0..kw {
                    out[((co * cin + ci) * nh + m * dilation) * nw + n * dilation] =
                        k.data()[((co * cin + ci) * kh + m) * kw + n];
                }
            }
        }
    }
    Tensor::new(vec![cout, cin, nh, nw], out).unwrap()
}

fn run_conv(x: &Tensor<f32>, k: &Tensor<f32>, spec: ConvSpec) -> Tensor<f32> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let kv = tape.leaf(k.clone(), false);
    let y = tape.conv2d(xv, kv, spec).unwrap();
    tape.value(y).clone()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive_oracle_bit_exactly(
        seed in 0u64..1_000_000,
        b in 1usize..3,
        cin in 1usize..3,
        cout in 1usize..3,
        kh in 1usize..3,
        kw in 1usize..3,
        stride in 1usize..3,
        pad in 0usize..2,
        extra in 0usize..4,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let h = kh + extra;
        let w = kw + extra;
        let x = Tensor::<f32>::from_fn(vec![b, cin, h, w], || rng.uniform(-1.0, 1.0) as f32);
        let k = Tensor::<f32>::from_fn(vec![cout, cin, kh, kw], || rng.uniform(-1.0, 1.0) as f32);
        let spec = ConvSpec::new(stride, pad, 1);
        let fast = run_conv(&x, &k, spec);
        let oracle = conv_oracle(&x, &k, stride, pad, 1);
        prop_assert_eq!(bits(&fast), bits(&oracle));
    }

    #[test]
    fn dilated_conv_equals_zero_interleaved_kernel(
        seed in 0u64..1_000_000,
        cin in 1usize..3,
        cout in 1usize..3,
        kh in 2usize..4,
        dilation in 2usize..5,
        extra in 0usize..3,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let h = (kh - 1) * dilation + 1 + extra;
        let x = Tensor::<f32>::from_fn(vec![1, cin, h, h], || rng.uniform(-1.0, 1.0) as f32);
        let k = Tensor::<f32>::from_fn(vec![cout, cin, kh, kh], || rng.uniform(-1.0, 1.0) as f32);
        let dilated = run_conv(&x, &k, ConvSpec::new(1, 0, dilation));
        let interleaved = run_conv(&x, &zero_interleave(&k, dilation), ConvSpec::unit());
        prop_assert_eq!(bits(&dilated), bits(&interleaved));
    }

    #[test]
    fn sigmoid_range_and_relu_sign(xs in prop::collection::vec(-1e6f64..1e6, 1..32)) {
        let mut tape = Tape::<f32>::new();
        let n = xs.len();
        let x = tape.leaf(
            Tensor::new(vec![n], xs.iter().map(|&v| v as f32).collect()).unwrap(),
            false,
        );
        let s = tape.sigmoid(x);
        for &v in tape.value(s).data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
        let r = tape.relu(x);
        for &v in tape.value(r).data() {
            prop_assert!(v >= 0.0);
        }
    }

    #[test]
    fn l2_normalize_produces_unit_sites(seed in 0u64..1_000_000, c in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        // Norms comfortably above the 1e-12 guard.
        let x = Tensor::<f32>::from_fn(vec![1, c, 3, 3], || {
            let v = rng.uniform(-2.0, 2.0);
            (if v.abs() < 0.1 { 0.1 + v.abs() } else { v }) as f32
        });
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = tape.l2_normalize_channels(xv, 1e-12).unwrap();
        let out = tape.value(y);
        for s in 0..9 {
            let norm: f32 = (0..c).map(|ci| out.data()[ci * 9 + s].powi(2)).sum::<f32>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bilinear_upsample_preserves_bounds(
        seed in 0u64..1_000_000,
        h in 1usize..6,
        up in 0usize..12,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::from_fn(vec![1, 1, h, h], || rng.uniform(-3.0, 3.0) as f32);
        let lo = x.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = x.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let y = tape.bilinear_upsample(xv, h + up, h + up).unwrap();
        for &v in tape.value(y).data() {
            prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transforms(
        seed in 0u64..1_000_000,
        n in 4usize..40,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
        labels[0] = true;
        labels[1] = false;
        let base = auroc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|&x| 2.0 * x + 1.0).collect();
        let cubic: Vec<f64> = scores.iter().map(|&x| x * x * x).collect();
        prop_assert!((auroc(&affine, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((auroc(&cubic, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn gaussian_smoothing_preserves_bounds_and_normalization(
        sigma in 0.3f64..5.0,
        seed in 0u64..1_000_000,
    ) {
        let k = gaussian_kernel(sigma);
        prop_assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rng = Rng::seed_from_u64(seed);
        let m = Tensor::<f32>::from_fn(vec![7, 9], || rng.uniform(0.0, 2.0) as f32);
        let lo = m.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = m.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sm = smooth_map(&m, sigma).unwrap();
        for &v in sm.data() {
            prop_assert!(v >= lo - 1e-4 && v <= hi + 1e-4);
        }
    }

    #[test]
    fn fuse_maps_is_permutation_invariant(seed in 0u64..1_000_000) {
        let mut rng = Rng::seed_from_u64(seed);
        let maps: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::from_fn(vec![2 + i, 2 + i], || rng.uniform(0.0, 1.0) as f32))
            .collect();
        let a = fuse_maps(&maps, (8, 8), None).unwrap();
        let mut perm = maps.clone();
        perm.swap(0, 3);
        perm.swap(1, 2);
        let b = fuse_maps(&perm, (8, 8), None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn se_block_attenuates_elementwise(seed in 0u64..1_000_000) {
        let mut rng = Rng::seed_from_u64(seed);
        let c = 4usize;
        let x = Tensor::<f32>::from_fn(vec![2, c, 3, 3], || rng.uniform(-2.0, 2.0) as f32);
        let fc1 = Tensor::<f32>::from_fn(vec![2, c], || rng.uniform(-1.5, 1.5) as f32);
        let fc2 = Tensor::<f32>::from_fn(vec![c, 2], || rng.uniform(-1.5, 1.5) as f32);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let f1 = tape.leaf(fc1, false);
        let f2 = tape.leaf(fc2, false);
        let bound = Bound::from_pairs([
            ("se.fc1.w".to_string(), f1),
            ("se.fc2.w".to_string(), f2),
        ]);
        let y = se_block(&mut tape, &bound, "se", xv).unwrap();
        for (&o, &i) in tape.value(y).data().iter().zip(x.data()) {
            prop_assert!(o.abs() <= i.abs() + 1e-6);
        }
    }

    #[test]
    fn generator_loss_bounds_and_scale_invariance(
        seed in 0u64..1_000_000,
        alpha in 0.01f64..50.0,
        beta in 0.01f64..50.0,
    ) {
        let mut rng = Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::from_fn(vec![1, 3, 2, 2], || {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() < 0.1 { 0.1 + v.abs() } else { v }
        });
        let s = Tensor::<f64>::from_fn(vec![1, 3, 2, 2], || {
            let v = rng.uniform(-1.0, 1.0);
            if v.abs() < 0.1 { 0.1 + v.abs() } else { v }
        });
        let eval = |tt: &Tensor<f64>, ss: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let tv = tape.leaf(tt.clone(), false);
            let sv = tape.leaf(ss.clone(), false);
            let tn = normalize_pyramid(&mut tape, &FeaturePyramid { levels: vec![tv] }).unwrap();
            let sn = normalize_pyramid(&mut tape, &FeaturePyramid { levels: vec![sv] }).unwrap();
            let l = loss_generator(&mut tape, &tn, &sn).unwrap();
            tape.value(l).item()
        };
        let base = eval(&t, &s);
        prop_assert!((0.0..=2.0).contains(&base));
        let scaled = eval(&t.map(|v| v * alpha), &s.map(|v| v * beta));
        prop_assert!((scaled - base).abs() < 1e-6);
    }

    #[test]
    fn anomaly_map_range_bounds(seed in 0u64..1_000_000, c in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::from_fn(vec![c, 3, 3], || rng.uniform(-1.0, 1.0) as f32);
        let s = Tensor::<f32>::from_fn(vec![c, 3, 3], || rng.uniform(-1.0, 1.0) as f32);
        let m = anomaly_map_layer(&t, &s).unwrap();
        for &v in m.data() {
            prop_assert!((-1e-6..=2.0 + 1e-6).contains(&v));
        }
        let tp = t.map(|v| v.abs());
        let sp = s.map(|v| v.abs());
        let mp = anomaly_map_layer(&tp, &sp).unwrap();
        for &v in mp.data() {
            prop_assert!((-1e-6..=1.0 + 1e-6).contains(&v));
        }
    }

    #[test]
    fn student_total_is_linear_in_the_adversarial_term(
        lg in 0.0f64..2.0,
        ladv in 0.0f64..5.0,
        l1 in 0.0f64..1.0,
        l2 in 0.0f64..1.0,
    ) {
        let eval = |lambda: f64| -> f64 {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::scalar(lg), false);
            let b = tape.leaf(Tensor::scalar(ladv), false);
            let l = loss_student(&mut tape, a, b, lambda).unwrap();
            tape.value(l).item()
        };
        let lhs = eval(l1) + eval(l2) - 2.0 * lg;
        let rhs = (l1 + l2) * ladv;
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn seeded_streams_are_bit_reproducible(seed in 0u64..1_000_000) {
        // Dropout masks and He initialization replay exactly from a seed.
        let draw = || {
            let mut rng = Rng::seed_from_u64(seed);
            let mut set = anomaly_distill::params::ParamSet::<f32>::new();
            anomaly_distill::params::init_he_normal(&mut set, "w", vec![32], 8, seed);
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::full(vec![64], 1.0f32), false);
            let d = tape.dropout(x, 0.5, &mut rng, true).unwrap();
            (
                set.get("w").data().to_vec(),
                tape.value(d).data().to_vec(),
            )
        };
        let (w1, m1) = draw();
        let (w2, m2) = draw();
        prop_assert_eq!(
            w1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(
            m1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            m2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

/// One discriminator Adam step on a fixed batch should not increase the
/// BCE loss (re-evaluated with the same dropout mask) in at least 95 of
/// 100 random trials.
#[test]
fn discriminator_step_descends_its_loss() {
    use anomaly_distill::distill::{
        discriminator_forward, init_discriminator, loss_discriminator, DiscMode,
        DiscriminatorConfig,
    };
    use anomaly_distill::params::{collect_grads, ParamSet};
    use anomaly_distill::tensor::{Adam, AdamHyperparams};

    let cfg = DiscriminatorConfig {
        in_channels: 3,
        spatial: 4,
        width_factor: 1.0 / 32.0,
        dropout_p: 0.2,
        leaky_slope: 0.2,
    };
    let mut improved = 0usize;
    let trials = 100;
    for trial in 0..trials {
        let mut params = init_discriminator::<f32>(&cfg, 1000 + trial);
        let mut rng = Rng::seed_from_u64(trial);
        let real = Tensor::<f32>::from_fn(vec![4, 3, 4, 4], || rng.uniform(-1.0, 1.0) as f32);
        let fake = Tensor::<f32>::from_fn(vec![4, 3, 4, 4], || rng.uniform(-1.0, 1.0) as f32);
        let mask_seed = rng.next_u64();

        let eval_loss = |params: &mut ParamSet<f32>, with_grad: bool| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, with_grad);
            let mut mask_rng = Rng::seed_from_u64(mask_seed);
            let rv = tape.leaf(real.clone(), false);
            let fv = tape.leaf(fake.clone(), false);
            let d_real = discriminator_forward(
                &mut tape, params, &bound, &cfg, rv, &mut mask_rng, DiscMode::Frozen,
            )
            .unwrap();
            let d_fake = discriminator_forward(
                &mut tape, params, &bound, &cfg, fv, &mut mask_rng, DiscMode::Frozen,
            )
            .unwrap();
            let l = loss_discriminator(&mut tape, d_real, d_fake).unwrap();
            (tape.value(l).item() as f64, tape, bound, l)
        };

        let (before, mut tape, bound, l) = eval_loss(&mut params, true);
        tape.backward(l).unwrap();
        let grads = collect_grads(&tape, &bound);
        let mut adam = Adam::<f32>::new(AdamHyperparams::with_lr(1e-3));
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
        adam.step(pairs).unwrap();
        let (after, _, _, _) = eval_loss(&mut params, false);
        if after <= before {
            improved += 1;
        }
    }
    assert!(
        improved >= 95,
        "discriminator step decreased its loss in only {improved}/{trials} trials"
    );
}
