//! Anomaly localization and scoring.
//!
//! Per-level cosine-dissimilarity maps between normalized teacher and
//! student features, an optional calibrated refinement (affine + frozen
//! batch norm + ReLU per level), bilinear fusion to input resolution,
//! Gaussian smoothing, image scoring and AUROC metrics. Everything here is
//! inference-time and operates on plain tensors.

use crate::tensor::{bilinear_resize_plane, Result, Tensor, TensorError};

/// Epsilon guarding the cosine denominators of the per-level anomaly maps.
pub const COSINE_EPS: f32 = 1e-12;
/// Variance floor applied to calibrated refinement statistics.
pub const REFINE_VAR_FLOOR: f64 = 1e-12;
/// Epsilon inside the refinement batch-norm denominator.
pub const REFINE_BN_EPS: f64 = 1e-5;

/// Per-level refinement: scalar affine (the 1x1 convolution on a
/// single-channel map), batch norm with statistics frozen by calibration,
/// then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineLevel {
    pub scale: f32,
    pub bias: f32,
    pub mean: f32,
    pub var: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementParams {
    pub levels: Vec<RefineLevel>,
}

/// Inference output for one image.
#[derive(Clone, Debug)]
pub struct AnomalyResult {
    /// Raw per-level cosine dissimilarity maps at layer resolution.
    pub level_maps: Vec<Tensor<f32>>,
    /// Fused map at input resolution.
    pub fused: Tensor<f32>,
    /// Gaussian-smoothed fused map.
    pub smoothed: Tensor<f32>,
    /// Image-level anomaly score: max of the smoothed map.
    pub score: f64,
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub pixels_positive: usize,
    pub pixels_negative: usize,
}

/// Pixel-wise cosine dissimilarity between two [c, h, w] feature maps:
/// 1 - (t . s) / (max(|t|, eps) * max(|s|, eps)) at every site.
pub fn anomaly_map_layer(t: &Tensor<f32>, s: &Tensor<f32>) -> Result<Tensor<f32>> {
    if t.shape() != s.shape() || t.shape().len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "anomaly_map_layer expects matching [c, h, w], got {:?} and {:?}",
            t.shape(),
            s.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    let mut out = vec![0.0f32; hw];
    for site in 0..hw {
        let mut dot = 0.0f64;
        let mut nt = 0.0f64;
        let mut ns = 0.0f64;
        for ci in 0..c {
            let tv = t.data()[ci * hw + site] as f64;
            let sv = s.data()[ci * hw + site] as f64;
            dot += tv * sv;
            nt += tv * tv;
            ns += sv * sv;
        }
        let (nt, ns) = (nt.sqrt(), ns.sqrt());
        // Two vanished activation vectors are identical, hence aligned; a
        // plain guarded quotient would call them maximally dissimilar.
        out[site] = if nt < COSINE_EPS as f64 && ns < COSINE_EPS as f64 {
            0.0
        } else {
            let denom = nt.max(COSINE_EPS as f64) * ns.max(COSINE_EPS as f64);
            (1.0 - dot / denom) as f32
        };
    }
    Tensor::new(vec![h, w], out)
}

/// Apply one level's calibrated refinement to its [h, w] map.
pub fn refine_map(map: &Tensor<f32>, level: &RefineLevel) -> Result<Tensor<f32>> {
    if map.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "refine_map expects [h, w], got {:?}",
            map.shape()
        )));
    }
    let inv_std = 1.0 / ((level.var as f64 + REFINE_BN_EPS).sqrt());
    Ok(map.map(|v| {
        let affine = (level.scale * v + level.bias - level.mean) as f64 * inv_std;
        (affine as f32).max(0.0)
    }))
}

/// Upsample every (optionally refined) level map to the output extent and
/// sum them.
pub fn fuse_maps(
    maps: &[Tensor<f32>],
    out_extent: (usize, usize),
    refinement: Option<&RefinementParams>,
) -> Result<Tensor<f32>> {
    if maps.is_empty() {
        return Err(TensorError::InvalidArgument(
            "fuse_maps needs at least one level map".into(),
        ));
    }
    if let Some(r) = refinement {
        if r.levels.len() != maps.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "refinement has {} levels for {} maps",
                r.levels.len(),
                maps.len()
            )));
        }
    }
    let (oh, ow) = out_extent;
    if oh == 0 || ow == 0 {
        return Err(TensorError::InvalidArgument(
            "fuse_maps output extent must be positive".into(),
        ));
    }
    let mut fused = vec![0.0f32; oh * ow];
    for (i, m) in maps.iter().enumerate() {
        if m.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "fuse_maps level {i} is not [h, w]: {:?}",
                m.shape()
            )));
        }
        let refined = match refinement {
            Some(r) => refine_map(m, &r.levels[i])?,
            None => m.clone(),
        };
        let (h, w) = (refined.shape()[0], refined.shape()[1]);
        let up = bilinear_resize_plane(refined.data(), (h, w), (oh, ow));
        for (f, u) in fused.iter_mut().zip(&up) {
            *f += *u;
        }
    }
    Tensor::new(vec![oh, ow], fused)
}

/// Normalized 1-D Gaussian taps truncated at radius ceil(4 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "smoothing sigma must be positive");
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn reflect(idx: isize, len: usize) -> usize {
    // Reflection without edge repetition, folded into range for any offset.
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = idx.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian smoothing with reflect padding.
pub fn smooth_map(map: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if map.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "smooth_map expects [h, w], got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let k = gaussian_kernel(sigma);
    let radius = k.len() / 2;
    // Horizontal pass.
    let mut tmp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (i, &kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + i as isize - radius as isize, w);
                acc += kv * map.data()[y * w + sx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (i, &kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + i as isize - radius as isize, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc as f32;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Image-level anomaly score: maximum of the Gaussian-smoothed map.
pub fn score_image(fused: &Tensor<f32>, sigma: f64) -> Result<(f64, Tensor<f32>)> {
    if sigma <= 0.0 {
        return Err(TensorError::InvalidArgument(format!(
            "smoothing sigma must be positive, got {sigma}"
        )));
    }
    let smoothed = smooth_map(fused, sigma)?;
    let score = smoothed
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    Ok((score, smoothed))
}

/// Area under the ROC curve by the rank statistic: the probability that a
/// random positive outranks a random negative, ties counted half. Sort and
/// midrank, O(n log n).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "auroc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TensorError::InvalidArgument(
            "auroc needs both classes present".into(),
        ));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("auroc scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks over tie groups, then the Mann-Whitney identity.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pixel-level AUROC over the flattened concatenation of all maps, in
/// dataset order with row-major pixels. A `None` mask marks an all-normal
/// image.
pub fn pixel_auroc(maps: &[Tensor<f32>], masks: &[Option<Tensor<f32>>]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "pixel_auroc: {} maps vs {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if let Some(mask) = mask {
            if mask.shape() != map.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "pixel_auroc: map {i} extent {:?} != mask extent {:?}",
                    map.shape(),
                    mask.shape()
                )));
            }
        }
        for (j, &v) in map.data().iter().enumerate() {
            scores.push(v as f64);
            labels.push(mask.as_ref().is_some_and(|m| m.data()[j] > 0.5));
        }
    }
    auroc(&scores, &labels)
}

/// Streaming accumulator for refinement calibration: per-level mean and
/// variance over every pixel of the raw anomaly maps of normal images.
pub struct RefineCalibrator {
    sums: Vec<f64>,
    sum_sqs: Vec<f64>,
    counts: Vec<u64>,
    images: usize,
}

impl RefineCalibrator {
    pub fn new(num_levels: usize) -> Self {
        RefineCalibrator {
            sums: vec![0.0; num_levels],
            sum_sqs: vec![0.0; num_levels],
            counts: vec![0; num_levels],
            images: 0,
        }
    }

    /// Feed the raw per-level maps of one image.
    pub fn accumulate(&mut self, level_maps: &[Tensor<f32>]) -> Result<()> {
        if level_maps.len() != self.sums.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "calibration expects {} levels, got {}",
                self.sums.len(),
                level_maps.len()
            )));
        }
        for (i, m) in level_maps.iter().enumerate() {
            for &v in m.data() {
                self.sums[i] += v as f64;
                self.sum_sqs[i] += (v as f64) * (v as f64);
            }
            self.counts[i] += m.numel() as u64;
        }
        self.images += 1;
        Ok(())
    }

    /// Freeze statistics. Requires at least two calibration images; the
    /// stored variance is floored to keep the frozen norm well defined on
    /// degenerate (e.g. all-zero) map populations.
    pub fn finish(self) -> Result<RefinementParams> {
        if self.images < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "refinement calibration needs at least 2 normal images, got {}",
                self.images
            )));
        }
        let levels = self
            .sums
            .iter()
            .zip(&self.sum_sqs)
            .zip(&self.counts)
            .map(|((&s, &sq), &n)| {
                let mean = s / n as f64;
                let var = (sq / n as f64 - mean * mean).max(REFINE_VAR_FLOOR);
                RefineLevel {
                    scale: 1.0,
                    bias: 0.0,
                    mean: mean as f32,
                    var: var as f32,
                }
            })
            .collect();
        Ok(RefinementParams { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn identical_features_give_zero_map() {
        let mut rng = Rng::seed_from_u64(3);
        let f = Tensor::<f32>::from_fn(vec![4, 3, 3], || rng.uniform(0.1, 1.0) as f32);
        let m = anomaly_map_layer(&f, &f).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn orthogonal_site_scores_one() {
        let t = t3(2, 1, 1, vec![1.0, 0.0]);
        let s = t3(2, 1, 1, vec![0.0, 1.0]);
        let m = anomaly_map_layer(&t, &s).unwrap();
        assert!((m.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_map_is_scale_invariant() {
        let mut rng = Rng::seed_from_u64(9);
        let t = Tensor::<f32>::from_fn(vec![3, 2, 2], || rng.uniform(-1.0, 1.0) as f32);
        let s = t.map(|v| 2.0 * v);
        let m = anomaly_map_layer(&t, &s).unwrap();
        assert!(m.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn map_values_bounded() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = Tensor::<f32>::from_fn(vec![4, 2, 2], || rng.uniform(-1.0, 1.0) as f32);
            let s = Tensor::<f32>::from_fn(vec![4, 2, 2], || rng.uniform(-1.0, 1.0) as f32);
            let m = anomaly_map_layer(&t, &s).unwrap();
            assert!(m.data().iter().all(|&v| (-1e-6..=2.0 + 1e-6).contains(&v)));

            // Non-negative features keep the cosine in [0, 1].
            let tp = t.map(|v| v.max(0.0) + 0.01);
            let sp = s.map(|v| v.max(0.0) + 0.01);
            let mp = anomaly_map_layer(&tp, &sp).unwrap();
            assert!(mp.data().iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
        }
    }

    #[test]
    fn refine_identity_configuration_is_relu() {
        let m = Tensor::new(vec![1, 4], vec![0.5, -0.2, 0.0, 1.5]).unwrap();
        let lvl = RefineLevel {
            scale: 1.0,
            bias: 0.0,
            mean: 0.0,
            var: 1.0 - REFINE_BN_EPS as f32,
        };
        let r = refine_map(&m, &lvl).unwrap();
        for (&got, &x) in r.data().iter().zip(m.data()) {
            assert!((got - x.max(0.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn refine_zero_scale_is_constant() {
        let m = Tensor::new(vec![2, 2], vec![0.1, 0.9, 0.4, 0.7]).unwrap();
        let lvl = RefineLevel {
            scale: 0.0,
            bias: 0.3,
            mean: 0.1,
            var: 1.0,
        };
        let r = refine_map(&m, &lvl).unwrap();
        let first = r.data()[0];
        assert!(r.data().iter().all(|&v| v == first));
    }

    #[test]
    fn refine_calibrated_mean_maps_to_zero() {
        let lvl = RefineLevel {
            scale: 1.0,
            bias: 0.0,
            mean: 0.37,
            var: 0.5,
        };
        let m = Tensor::full(vec![3, 3], 0.37f32);
        let r = refine_map(&m, &lvl).unwrap();
        assert!(r.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn fuse_constant_maps() {
        let k = Tensor::full(vec![4, 4], 0.8f32);
        let fused = fuse_maps(&[k.clone()], (4, 4), None).unwrap();
        assert!(fused.data().iter().all(|&v| (v - 0.8).abs() < 1e-6));

        let maps = vec![
            Tensor::full(vec![2, 2], 0.1f32),
            Tensor::full(vec![4, 4], 0.2f32),
            Tensor::full(vec![8, 8], 0.3f32),
            Tensor::full(vec![8, 8], 0.4f32),
        ];
        let fused = fuse_maps(&maps, (16, 16), None).unwrap();
        assert!(fused.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));

        assert!(fuse_maps(&[], (4, 4), None).is_err());
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let mut rng = Rng::seed_from_u64(7);
        let maps: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::from_fn(vec![2 + i, 2 + i], || rng.uniform(0.0, 1.0) as f32))
            .collect();
        let a = fuse_maps(&maps, (8, 8), None).unwrap();
        let mut rev = maps.clone();
        rev.reverse();
        let b = fuse_maps(&rev, (8, 8), None).unwrap();
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized() {
        for sigma in [0.5, 1.0, 2.5, 4.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (4.0f64 * sigma).ceil() as usize + 1);
            let sum: f64 = k.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn smoothing_constant_map_is_fixed_point() {
        let m = Tensor::full(vec![12, 9], 0.42f32);
        let (score, smoothed) = score_image(&m, 2.0).unwrap();
        assert!((score - 0.42).abs() < 1e-6);
        assert!(smoothed.data().iter().all(|&v| (v - 0.42).abs() < 1e-6));
    }

    #[test]
    fn smoothing_preserves_bounds_and_score_below_max() {
        let mut rng = Rng::seed_from_u64(11);
        for _ in 0..20 {
            let m = Tensor::<f32>::from_fn(vec![10, 10], || rng.uniform(0.0, 3.0) as f32);
            let lo = m.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = m.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let (score, smoothed) = score_image(&m, 1.5).unwrap();
            assert!(score <= hi as f64 + 1e-6);
            for &v in smoothed.data() {
                assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn impulse_score_is_center_kernel_coefficient() {
        let sigma = 1.0;
        let mut data = vec![0.0f32; 33 * 33];
        data[16 * 33 + 16] = 1.0;
        let m = Tensor::new(vec![33, 33], data).unwrap();
        let (score, _) = score_image(&m, sigma).unwrap();
        let k = gaussian_kernel(sigma);
        let center = k[k.len() / 2];
        // Map storage is f32, so compare at f32 resolution.
        assert!(
            (score - center * center).abs() < 1e-7,
            "score {score} vs {}",
            center * center
        );
    }

    #[test]
    fn auroc_hand_example() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [false, false, true, true];
        let v = auroc(&scores, &labels).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auroc_perfect_and_degenerate() {
        let v = auroc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap();
        assert_eq!(v, 1.0);
        let ties = auroc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap();
        assert!((ties - 0.5).abs() < 1e-12);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let mut rng = Rng::seed_from_u64(13);
        for _ in 0..200 {
            let n = 3 + rng.below(20);
            // Quantized scores produce plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.below(6) as f64 / 5.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            labels[0] = true;
            labels[1] = false;
            let fast = auroc(&scores, &labels).unwrap();
            // O(n^2) pairwise comparison.
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..n {
                if !labels[i] {
                    continue;
                }
                for j in 0..n {
                    if labels[j] {
                        continue;
                    }
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
            assert!((fast - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_auroc_perfect_and_uninformative() {
        let mask = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let map = mask.clone();
        let v = pixel_auroc(&[map], &[Some(mask.clone())]).unwrap();
        assert_eq!(v, 1.0);

        let flat = Tensor::full(vec![2, 2], 0.5f32);
        let v2 = pixel_auroc(&[flat.clone(), flat.clone()], &[Some(mask), None]).unwrap();
        assert!((v2 - 0.5).abs() < 1e-12);

        // Single-class population errors.
        assert!(pixel_auroc(&[flat.clone()], &[None]).is_err());
    }

    #[test]
    fn pixel_auroc_two_map_hand_case() {
        // Hand-set 2x2 maps and masks, validated against the pairwise rule.
        let m1 = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.3]).unwrap();
        let k1 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m2 = Tensor::new(vec![2, 2], vec![0.4, 0.8, 0.1, 0.2]).unwrap();
        let k2 = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let fast = pixel_auroc(&[m1.clone(), m2.clone()], &[Some(k1.clone()), Some(k2.clone())])
            .unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (m, k) in [(m1, k1), (m2, k2)] {
            for (&s, &l) in m.data().iter().zip(k.data()) {
                scores.push(s as f64);
                labels.push(l > 0.5);
            }
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            if !labels[i] {
                continue;
            }
            for j in 0..scores.len() {
                if labels[j] {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        assert!((fast - num / den).abs() < 1e-12);
    }

    #[test]
    fn pixel_auroc_rejects_extent_mismatch() {
        let map = Tensor::full(vec![2, 2], 0.5f32);
        let mask = Tensor::full(vec![3, 3], 1.0f32);
        assert!(pixel_auroc(&[map], &[Some(mask)]).is_err());
    }

    #[test]
    fn calibration_matches_single_pass_oracle() {
        let mut rng = Rng::seed_from_u64(21);
        let imgs: Vec<Vec<Tensor<f32>>> = (0..5)
            .map(|_| {
                vec![
                    Tensor::from_fn(vec![3, 3], || rng.uniform(0.0, 1.0) as f32),
                    Tensor::from_fn(vec![2, 2], || rng.uniform(0.0, 2.0) as f32),
                ]
            })
            .collect();
        let mut cal = RefineCalibrator::new(2);
        for maps in &imgs {
            cal.accumulate(maps).unwrap();
        }
        let params = cal.finish().unwrap();
        for lvl in 0..2 {
            let all: Vec<f64> = imgs
                .iter()
                .flat_map(|maps| maps[lvl].data().iter().map(|&v| v as f64))
                .collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len() as f64;
            assert!((params.levels[lvl].mean as f64 - mean).abs() < 1e-6);
            assert!((params.levels[lvl].var as f64 - var).abs() < 1e-6);
        }
    }

    #[test]
    fn calibration_floors_variance_and_needs_two_images() {
        let zero = vec![Tensor::zeros(vec![2, 2])];
        let mut cal = RefineCalibrator::new(1);
        cal.accumulate(&zero).unwrap();
        assert!(matches!(cal.finish(), Err(_)));

        let mut cal = RefineCalibrator::new(1);
        cal.accumulate(&zero).unwrap();
        cal.accumulate(&zero).unwrap();
        let params = cal.finish().unwrap();
        assert_eq!(params.levels[0].mean, 0.0);
        assert!(params.levels[0].var > 0.0);
    }

    #[test]
    fn calibration_is_deterministic() {
        let maps = vec![
            vec![Tensor::new(vec![1, 2], vec![0.25, 0.5]).unwrap()],
            vec![Tensor::new(vec![1, 2], vec![0.75, 0.1]).unwrap()],
        ];
        let run = || {
            let mut cal = RefineCalibrator::new(1);
            for m in &maps {
                cal.accumulate(m).unwrap();
            }
            cal.finish().unwrap()
        };
        assert_eq!(run(), run());
    }
}
