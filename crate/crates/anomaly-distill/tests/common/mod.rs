//! Independent oracles shared by the test suites. These deliberately use
//! the most direct formulation available (quadratic-time scans, naive
//! loops) and never call the implementation paths they are checking.

use anomaly_distill::tensor::Tensor;

/// Naive four-loop convolution in ascending (channel, ky, kx) order,
/// skipping out-of-bounds taps.
pub fn conv_oracle(
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
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
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

/// Insert (dilation - 1) zeros between kernel taps.
pub fn zero_interleave(k: &Tensor<f32>, dilation: usize) -> Tensor<f32> {
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

/// Quadratic-time Mann-Whitney statistic: P(pos > neg) + 0.5 P(tie).
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
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
    num / den
}

pub fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
