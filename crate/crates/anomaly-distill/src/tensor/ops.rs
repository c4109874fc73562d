//! Forward operations and their reverse-mode rules.

use super::conv::{self, ConvSpec};
use super::tape::{Record, Tape, Var};
use super::{Result, Tensor, TensorError};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub use super::conv::bilinear_resize_plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// What a train-mode batch norm does to the running statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnUpdate {
    None,
    /// running = (1 - momentum) * running + momentum * batch
    Ema(f64),
}

fn same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<E: Scalar> Tape<E> {
    /// Dilated 2-D convolution without bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let (out, patches) =
            conv::conv2d_forward(self.value(input), self.value(kernel), &spec)?;
        let requires = self.requires_grad(input) || self.requires_grad(kernel);
        let out_var = self.push_result(out, requires);
        if requires {
            // Keep the patch matrix for the kernel gradient when the
            // kernel is trainable; it is rebuilt otherwise.
            let patches = if self.requires_grad(kernel) { patches } else { None };
            self.record(Record::Conv2d {
                input,
                kernel,
                out: out_var,
                spec,
                patches,
            });
        }
        Ok(out_var)
    }

    /// Per-channel batch normalization over a [b, c, h, w] tensor.
    /// `running` holds mean then variance, concatenated (length 2c).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut [E],
        mode: BnMode,
        update: BnUpdate,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm expects [b, c, h, w], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm gamma/beta must be [{c}]"
            )));
        }
        if running.len() != 2 * c {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm running stats must have length {}, got {}",
                2 * c,
                running.len()
            )));
        }
        let n = b * h * w;
        let (mean, inv_std, train) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(TensorError::InvalidArgument(
                        "train-mode batch_norm needs at least 2 values per channel".into(),
                    ));
                }
                let x = self.value(input).data();
                let mut mean = vec![E::ZERO; c];
                let mut var = vec![E::ZERO; c];
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for bi in 0..b {
                        let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for &v in plane {
                            acc += v.to_f64();
                        }
                    }
                    let m = acc / n as f64;
                    let mut vacc = 0.0f64;
                    for bi in 0..b {
                        let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for &v in plane {
                            let d = v.to_f64() - m;
                            vacc += d * d;
                        }
                    }
                    mean[ci] = E::from_f64(m);
                    var[ci] = E::from_f64(vacc / n as f64);
                }
                if let BnUpdate::Ema(momentum) = update {
                    let mom = E::from_f64(momentum);
                    let keep = E::ONE - mom;
                    for ci in 0..c {
                        running[ci] = keep * running[ci] + mom * mean[ci];
                        running[c + ci] = keep * running[c + ci] + mom * var[ci];
                    }
                }
                let inv_std: Vec<E> = var
                    .iter()
                    .map(|&v| E::ONE / (v + E::from_f64(eps)).sqrt())
                    .collect();
                (mean, inv_std, true)
            }
            BnMode::Eval => {
                let mean = running[..c].to_vec();
                let inv_std: Vec<E> = running[c..]
                    .iter()
                    .map(|&v| E::ONE / (v + E::from_f64(eps)).sqrt())
                    .collect();
                (mean, inv_std, false)
            }
        };

        let x = self.value(input).data();
        let gdat = self.value(gamma).data();
        let bdat = self.value(beta).data();
        let mut out = vec![E::ZERO; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = gdat[ci] * inv_std[ci];
                let shift = bdat[ci];
                let m = mean[ci];
                let src = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - m) * scale + shift;
                }
            }
        }
        let requires = self.requires_grad(input)
            || self.requires_grad(gamma)
            || self.requires_grad(beta);
        let out_var = self.push_result(Tensor::new(shape, out)?, requires);
        if requires {
            self.record(Record::BatchNorm {
                input,
                gamma,
                beta,
                out: out_var,
                mean,
                inv_std,
                train,
            });
        }
        Ok(out_var)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.maxs(E::ZERO));
        let requires = self.requires_grad(input);
        let out_var = self.push_result(out, requires);
        if requires {
            self.record(Record::Relu {
                input,
                out: out_var,
            });
        }
        out_var
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        if !(0.0 < slope && slope < 1.0) {
            return Err(TensorError::InvalidArgument(format!(
                "leaky_relu slope must be in (0, 1), got {slope}"
            )));
        }
        let s = E::from_f64(slope);
        let out = self
            .value(input)
            .map(|v| if v > E::ZERO { v } else { v * s });
        let requires = self.requires_grad(input);
        let out_var = self.push_result(out, requires);
        if requires {
            self.record(Record::LeakyRelu {
                input,
                out: out_var,
                slope: s,
            });
        }
        Ok(out_var)
    }

    /// Numerically stable logistic; outputs are clamped into the open
    /// interval (0, 1) so downstream logs stay finite.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(sigmoid_scalar);
        let requires = self.requires_grad(input);
        let out_var = self.push_result(out, requires);
        if requires {
            self.record(Record::Sigmoid {
                input,
                out: out_var,
            });
        }
        out_var
    }

    /// Max pooling over [b, c, h, w]. Padded cells never win the max; on
    /// ties the first element in row-major scan order takes the gradient.
    pub fn max_pool2d(
        &mut self,
        input: Var,
        window: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "max_pool2d expects [b, c, h, w], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument(
                "max_pool2d window and stride must be >= 1".into(),
            ));
        }
        if padding >= window {
            return Err(TensorError::InvalidArgument(
                "max_pool2d padding must be smaller than the window".into(),
            ));
        }
        if window > h + 2 * padding || window > w + 2 * padding {
            return Err(TensorError::InvalidArgument(format!(
                "max_pool2d window {window} exceeds padded input {h}x{w} (padding {padding})"
            )));
        }
        let oh = (h + 2 * padding - window) / stride + 1;
        let ow = (w + 2 * padding - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = vec![E::ZERO; b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        let mut o = 0usize;
        for bi in 0..b {
            for ci in 0..c {
                let plane0 = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy0 = (oy * stride) as isize - padding as isize;
                        let ix0 = (ox * stride) as isize - padding as isize;
                        let mut best = E::ZERO;
                        let mut best_idx = usize::MAX;
                        for m in 0..window {
                            let iy = iy0 + m as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for n in 0..window {
                                let ix = ix0 + n as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let idx = plane0 + iy as usize * w + ix as usize;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        debug_assert_ne!(best_idx, usize::MAX);
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                        o += 1;
                    }
                }
            }
        }
        let requires = self.requires_grad(input);
        let out_var = self.push_result(Tensor::new(vec![b, c, oh, ow], out)?, requires);
        if requires {
            self.record(Record::MaxPool2d {
                input,
                out: out_var,
                argmax,
            });
        }
        Ok(out_var)
    }

    /// Channel-wise spatial mean: [b, c, h, w] -> [b, c].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "global_avg_pool expects [b, c, h, w], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let x = self.value(input).data();
        let mut out = vec![E::ZERO; b * c];
        for (p, o) in out.iter_mut().enumerate() {
            let plane = &x[p * h * w..(p + 1) * h * w];
            let mut acc = E::ZERO;
            for &v in plane {
                acc += v;
            }
            *o = acc * inv;
        }
        let requires = self.requires_grad(input);
        let out_var = self.push_result(Tensor::new(vec![b, c], out)?, requires);
        if requires {
            self.record(Record::GlobalAvgPool {
                input,
                out: out_var,
            });
        }
        Ok(out_var)
    }

    /// Affine map x . weight^T + bias for x: [b, n], weight: [m, n].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (b, n, m) = (xs[0], xs[1], ws[0]);
        if let Some(bias) = bias {
            if self.shape(bias) != [m] {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear bias must be [{m}], got {:?}",
                    self.shape(bias)
                )));
            }
        }
        let x = self.value(input).data();
        let wdat = self.value(weight).data();
        let mut out = vec![E::ZERO; b * m];
        for bi in 0..b {
            let xrow = &x[bi * n..(bi + 1) * n];
            for mo in 0..m {
                let wrow = &wdat[mo * n..(mo + 1) * n];
                let mut acc = E::ZERO;
                for (&xv, &wv) in xrow.iter().zip(wrow) {
                    acc += xv * wv;
                }
                out[bi * m + mo] = acc;
            }
        }
        if let Some(bias) = bias {
            let bdat = self.value(bias).data();
            for bi in 0..b {
                for mo in 0..m {
                    out[bi * m + mo] += bdat[mo];
                }
            }
        }
        let mut requires = self.requires_grad(input) || self.requires_grad(weight);
        if let Some(bias) = bias {
            requires |= self.requires_grad(bias);
        }
        let out_var = self.push_result(Tensor::new(vec![b, m], out)?, requires);
        if requires {
            self.record(Record::Linear {
                input,
                weight,
                bias,
                out: out_var,
            });
        }
        Ok(out_var)
    }

    /// L2-normalize every channel vector (axis 1) of a tensor of rank >= 2.
    /// Sites whose norm falls below `eps` are divided by `eps` instead, so
    /// near-zero vectors pass through scaled rather than producing NaN.
    pub fn l2_normalize_channels(&mut self, input: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "l2_normalize_channels expects rank >= 2, got {shape:?}"
            )));
        }
        let b = shape[0];
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let x = self.value(input).data();
        let eps_e = E::from_f64(eps);
        let mut out = vec![E::ZERO; x.len()];
        let mut norms = vec![E::ZERO; b * spatial];
        for bi in 0..b {
            for s in 0..spatial {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    let v = x[(bi * c + ci) * spatial + s].to_f64();
                    acc += v * v;
                }
                let norm = E::from_f64(acc.sqrt());
                norms[bi * spatial + s] = norm;
                let denom = norm.maxs(eps_e);
                for ci in 0..c {
                    let idx = (bi * c + ci) * spatial + s;
                    out[idx] = x[idx] / denom;
                }
            }
        }
        let requires = self.requires_grad(input);
        let out_var = self.push_result(Tensor::new(shape, out)?, requires);
        if requires {
            self.record(Record::L2NormalizeChannels {
                input,
                out: out_var,
                norms,
                eps: eps_e,
            });
        }
        Ok(out_var)
    }

    /// Bilinear upsampling of [b, c, h, w] to [b, c, out_h, out_w] with the
    /// half-pixel convention and edge clamping.
    pub fn bilinear_upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "bilinear_upsample expects [b, c, h, w], got {shape:?}"
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if out_h == 0 || out_w == 0 {
            return Err(TensorError::InvalidArgument(
                "bilinear_upsample output extent must be positive".into(),
            ));
        }
        if out_h < h || out_w < w {
            return Err(TensorError::InvalidArgument(format!(
                "bilinear_upsample target {out_h}x{out_w} smaller than input {h}x{w}"
            )));
        }
        let x = self.value(input).data();
        let mut out = vec![E::ZERO; b * c * out_h * out_w];
        for p in 0..b * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = conv::bilinear_resize_plane(src, (h, w), (out_h, out_w));
            out[p * out_h * out_w..(p + 1) * out_h * out_w].copy_from_slice(&dst);
        }
        let requires = self.requires_grad(input);
        let out_var =
            self.push_result(Tensor::new(vec![b, c, out_h, out_w], out)?, requires);
        if requires {
            self.record(Record::BilinearUpsample {
                input,
                out: out_var,
            });
        }
        Ok(out_var)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors scale by 1/(1-p); otherwise identity.
    pub fn dropout(&mut self, input: Var, p: f64, rng: &mut Rng, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(input);
        }
        let scale = E::from_f64(1.0 / (1.0 - p));
        let x = self.value(input).data();
        let mut mask = vec![0u8; x.len()];
        let mut out = vec![E::ZERO; x.len()];
        for i in 0..x.len() {
            if rng.next_f64() >= p {
                mask[i] = 1;
                out[i] = x[i] * scale;
            }
        }
        let shape = self.shape(input).to_vec();
        let requires = self.requires_grad(input);
        let out_var = self.push_result(Tensor::new(shape, out)?, requires);
        if requires {
            self.record(Record::Dropout {
                input,
                out: out_var,
                mask,
                scale,
            });
        }
        Ok(out_var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.requires_grad(a) || self.requires_grad(b);
        let out_var = self.push_result(Tensor::new(shape, out)?, requires);
        if requires {
            self.record(Record::Add { a, b, out: out_var });
        }
        Ok(out_var)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let requires = self.requires_grad(a) || self.requires_grad(b);
        let out_var = self.push_result(Tensor::new(shape, out)?, requires);
        if requires {
            self.record(Record::Mul { a, b, out: out_var });
        }
        Ok(out_var)
    }

    /// Scale every channel plane of x: [b, c, ...] by s: [b, c].
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() < 2 || ss != [xs[0], xs[1]] {
            return Err(TensorError::ShapeMismatch(format!(
                "channel_scale: x {xs:?} with s {ss:?}"
            )));
        }
        let spatial: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![E::ZERO; xd.len()];
        for p in 0..xs[0] * xs[1] {
            let sv = sd[p];
            let src = &xd[p * spatial..(p + 1) * spatial];
            let dst = &mut out[p * spatial..(p + 1) * spatial];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * sv;
            }
        }
        let requires = self.requires_grad(x) || self.requires_grad(s);
        let out_var = self.push_result(Tensor::new(xs, out)?, requires);
        if requires {
            self.record(Record::ChannelScale { x, s, out: out_var });
        }
        Ok(out_var)
    }

    /// Elementwise mul * x + add.
    pub fn affine(&mut self, input: Var, mul: f64, add: f64) -> Var {
        let m = E::from_f64(mul);
        let a = E::from_f64(add);
        let out = self.value(input).map(|v| v * m + a);
        let requires = self.requires_grad(input);
        let out_var = self.push_result(out, requires);
        if requires {
            self.record(Record::Affine {
                input,
                out: out_var,
                mul: m,
            });
        }
        out_var
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        let requires = self.requires_grad(input);
        let out_var = self.push_result(Tensor::scalar(acc), requires);
        if requires {
            self.record(Record::Sum {
                input,
                out: out_var,
            });
        }
        out_var
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        let inv = E::from_f64(1.0 / n as f64);
        let mut acc = E::ZERO;
        for &v in self.value(input).data() {
            acc += v;
        }
        let requires = self.requires_grad(input);
        let out_var = self.push_result(Tensor::scalar(acc * inv), requires);
        if requires {
            self.record(Record::Mean {
                input,
                out: out_var,
            });
        }
        out_var
    }

    /// ln of the input clamped into [eps, 1 - eps]; keeps log losses finite
    /// for probabilities that saturate.
    pub fn clamp_ln(&mut self, input: Var, eps: f64) -> Var {
        let lo = E::from_f64(eps);
        let hi = E::ONE - lo;
        let out = self.value(input).map(|v| v.maxs(lo).mins(hi).ln());
        let requires = self.requires_grad(input);
        let out_var = self.push_result(out, requires);
        if requires {
            self.record(Record::ClampLn {
                input,
                out: out_var,
                eps: lo,
            });
        }
        out_var
    }

    /// Concatenate [b, c_i, h, w] tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArgument(
                "concat_channels needs at least one input".into(),
            ));
        }
        let first = self.shape(inputs[0]).to_vec();
        if first.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "concat_channels expects [b, c, h, w], got {first:?}"
            )));
        }
        let (b, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_channels: incompatible shape {s:?}, expected [{b}, _, {h}, {w}]"
                )));
            }
            c_total += s[1];
        }
        let mut out = vec![E::ZERO; b * c_total * h * w];
        for bi in 0..b {
            let mut c_off = 0usize;
            for &v in inputs {
                let ci = self.shape(v)[1];
                let src = self.value(v).data();
                let src = &src[bi * ci * h * w..(bi + 1) * ci * h * w];
                let dst_start = (bi * c_total + c_off) * h * w;
                out[dst_start..dst_start + ci * h * w].copy_from_slice(src);
                c_off += ci;
            }
        }
        let requires = inputs.iter().any(|&v| self.requires_grad(v));
        let out_var = self.push_result(Tensor::new(vec![b, c_total, h, w], out)?, requires);
        if requires {
            self.record(Record::ConcatChannels {
                inputs: inputs.to_vec(),
                out: out_var,
            });
        }
        Ok(out_var)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        let requires = self.requires_grad(input);
        let out_var = self.push_result(out, requires);
        if requires {
            self.record(Record::Reshape {
                input,
                out: out_var,
            });
        }
        Ok(out_var)
    }

    /// Mean cross-entropy of logits [b, k] against integer targets.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy_logits: logits {shape:?} vs {} targets",
                targets.len()
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "target class {t} out of range for {k} logits"
            )));
        }
        let x = self.value(logits).data();
        let mut softmax = vec![E::ZERO; b * k];
        let mut loss = 0.0f64;
        for bi in 0..b {
            let row = &x[bi * k..(bi + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxs(v);
            }
            let mut denom = 0.0f64;
            for &v in row {
                denom += (v - mx).to_f64().exp();
            }
            for (j, &v) in row.iter().enumerate() {
                softmax[bi * k + j] = E::from_f64((v - mx).to_f64().exp() / denom);
            }
            let p = softmax[bi * k + targets[bi]].to_f64().max(f64::MIN_POSITIVE);
            loss -= p.ln();
        }
        loss /= b as f64;
        let requires = self.requires_grad(logits);
        let out_var = self.push_result(Tensor::scalar(E::from_f64(loss)), requires);
        if requires {
            self.record(Record::CrossEntropyLogits {
                logits,
                out: out_var,
                targets: targets.to_vec(),
                softmax,
            });
        }
        Ok(out_var)
    }
}

pub(crate) fn sigmoid_scalar<E: Scalar>(v: E) -> E {
    let y = if v >= E::ZERO {
        E::ONE / (E::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (E::ONE + e)
    };
    y.maxs(E::TINY).mins(E::BELOW_ONE)
}

/// Apply the reverse rule of one record, accumulating into input gradients.
pub(crate) fn backward_record<E: Scalar>(tape: &mut Tape<E>, rec: &Record<E>) -> Result<()> {
    match rec {
        Record::Conv2d {
            input,
            kernel,
            out,
            spec,
            patches,
        } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let (dx, dk) = conv::conv2d_backward(
                &tape.vals[input.0],
                &tape.vals[kernel.0],
                spec,
                &g,
                patches.as_deref(),
                tape.requires[input.0],
                tape.requires[kernel.0],
            );
            if let Some(dx) = dx {
                tape.accumulate(*input, &dx);
            }
            if let Some(dk) = dk {
                tape.accumulate(*kernel, &dk);
            }
        }
        Record::BatchNorm {
            input,
            gamma,
            beta,
            out,
            mean,
            inv_std,
            train,
        } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let shape = tape.vals[input.0].shape();
            let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let n = (b * h * w) as f64;
            let x = tape.vals[input.0].data();
            let gam = tape.vals[gamma.0].data();
            let mut dgamma = vec![E::ZERO; c];
            let mut dbeta = vec![E::ZERO; c];
            let mut dx = vec![E::ZERO; x.len()];
            for ci in 0..c {
                let m = mean[ci];
                let istd = inv_std[ci];
                let mut sum_g = E::ZERO;
                let mut sum_gx = E::ZERO;
                for bi in 0..b {
                    let base = (bi * c + ci) * h * w;
                    for s in 0..h * w {
                        let gi = g[base + s];
                        let xhat = (x[base + s] - m) * istd;
                        sum_g += gi;
                        sum_gx += gi * xhat;
                    }
                }
                dbeta[ci] = sum_g;
                dgamma[ci] = sum_gx;
                let scale = gam[ci] * istd;
                if *train {
                    let inv_n = E::from_f64(1.0 / n);
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for s in 0..h * w {
                            let gi = g[base + s];
                            let xhat = (x[base + s] - m) * istd;
                            dx[base + s] =
                                scale * (gi - sum_g * inv_n - xhat * (sum_gx * inv_n));
                        }
                    }
                } else {
                    for bi in 0..b {
                        let base = (bi * c + ci) * h * w;
                        for s in 0..h * w {
                            dx[base + s] = g[base + s] * scale;
                        }
                    }
                }
            }
            if tape.requires[input.0] {
                tape.accumulate(*input, &dx);
            }
            if tape.requires[gamma.0] {
                tape.accumulate(*gamma, &dgamma);
            }
            if tape.requires[beta.0] {
                tape.accumulate(*beta, &dbeta);
            }
        }
        Record::Relu { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let x = tape.vals[input.0].data();
            let dx: Vec<E> = g
                .iter()
                .zip(x)
                .map(|(&gi, &xi)| if xi > E::ZERO { gi } else { E::ZERO })
                .collect();
            tape.accumulate(*input, &dx);
        }
        Record::LeakyRelu { input, out, slope } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let x = tape.vals[input.0].data();
            let dx: Vec<E> = g
                .iter()
                .zip(x)
                .map(|(&gi, &xi)| if xi > E::ZERO { gi } else { gi * *slope })
                .collect();
            tape.accumulate(*input, &dx);
        }
        Record::Sigmoid { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let y = tape.vals[out.0].data();
            let dx: Vec<E> = g
                .iter()
                .zip(y)
                .map(|(&gi, &yi)| gi * yi * (E::ONE - yi))
                .collect();
            tape.accumulate(*input, &dx);
        }
        Record::MaxPool2d { input, out, argmax } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let mut dx = vec![E::ZERO; tape.vals[input.0].numel()];
            for (o, &idx) in argmax.iter().enumerate() {
                dx[idx as usize] += g[o];
            }
            tape.accumulate(*input, &dx);
        }
        Record::GlobalAvgPool { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let shape = tape.vals[input.0].shape();
            let (planes, hw) = (shape[0] * shape[1], shape[2] * shape[3]);
            let inv = E::from_f64(1.0 / hw as f64);
            let mut dx = vec![E::ZERO; planes * hw];
            for p in 0..planes {
                let gv = g[p] * inv;
                for s in 0..hw {
                    dx[p * hw + s] = gv;
                }
            }
            tape.accumulate(*input, &dx);
        }
        Record::Linear {
            input,
            weight,
            bias,
            out,
        } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let (b, n) = {
                let s = tape.vals[input.0].shape();
                (s[0], s[1])
            };
            let m = tape.vals[weight.0].shape()[0];
            if tape.requires[input.0] {
                let wdat = tape.vals[weight.0].data();
                let mut dx = vec![E::ZERO; b * n];
                for bi in 0..b {
                    let drow = &mut dx[bi * n..(bi + 1) * n];
                    for mo in 0..m {
                        let gv = g[bi * m + mo];
                        let wrow = &wdat[mo * n..(mo + 1) * n];
                        for (d, &wv) in drow.iter_mut().zip(wrow) {
                            *d += gv * wv;
                        }
                    }
                }
                tape.accumulate(*input, &dx);
            }
            if tape.requires[weight.0] {
                let x = tape.vals[input.0].data();
                let mut dw = vec![E::ZERO; m * n];
                for bi in 0..b {
                    let xrow = &x[bi * n..(bi + 1) * n];
                    for mo in 0..m {
                        let gv = g[bi * m + mo];
                        let drow = &mut dw[mo * n..(mo + 1) * n];
                        for (d, &xv) in drow.iter_mut().zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
                tape.accumulate(*weight, &dw);
            }
            if let Some(bias) = bias {
                if tape.requires[bias.0] {
                    let mut db = vec![E::ZERO; m];
                    for bi in 0..b {
                        for mo in 0..m {
                            db[mo] += g[bi * m + mo];
                        }
                    }
                    tape.accumulate(*bias, &db);
                }
            }
        }
        Record::L2NormalizeChannels {
            input,
            out,
            norms,
            eps,
        } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let shape = tape.vals[input.0].shape();
            let (b, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            let y = tape.vals[out.0].data();
            let mut dx = vec![E::ZERO; b * c * spatial];
            for bi in 0..b {
                for s in 0..spatial {
                    let norm = norms[bi * spatial + s];
                    if norm >= *eps {
                        let mut dot = E::ZERO;
                        for ci in 0..c {
                            let idx = (bi * c + ci) * spatial + s;
                            dot += y[idx] * g[idx];
                        }
                        for ci in 0..c {
                            let idx = (bi * c + ci) * spatial + s;
                            dx[idx] = (g[idx] - y[idx] * dot) / norm;
                        }
                    } else {
                        for ci in 0..c {
                            let idx = (bi * c + ci) * spatial + s;
                            dx[idx] = g[idx] / *eps;
                        }
                    }
                }
            }
            tape.accumulate(*input, &dx);
        }
        Record::BilinearUpsample { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let in_shape = tape.vals[input.0].shape();
            let out_shape = tape.vals[out.0].shape();
            let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let mut dx = vec![E::ZERO; b * c * h * w];
            for p in 0..b * c {
                let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                let dp = &mut dx[p * h * w..(p + 1) * h * w];
                for dy in 0..oh {
                    for dxi in 0..ow {
                        let gv = gp[dy * ow + dxi];
                        for (y, x, wgt) in conv::bilinear_taps((h, w), (oh, ow), dy, dxi) {
                            dp[y * w + x] += gv * E::from_f64(wgt);
                        }
                    }
                }
            }
            tape.accumulate(*input, &dx);
        }
        Record::Dropout {
            input,
            out,
            mask,
            scale,
        } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let dx: Vec<E> = g
                .iter()
                .zip(mask)
                .map(|(&gi, &m)| if m == 1 { gi * *scale } else { E::ZERO })
                .collect();
            tape.accumulate(*input, &dx);
        }
        Record::Add { a, b, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            if tape.requires[a.0] {
                tape.accumulate(*a, &g);
            }
            if tape.requires[b.0] {
                tape.accumulate(*b, &g);
            }
        }
        Record::Mul { a, b, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            if tape.requires[a.0] {
                let bd = tape.vals[b.0].data();
                let da: Vec<E> = g.iter().zip(bd).map(|(&gi, &bv)| gi * bv).collect();
                tape.accumulate(*a, &da);
            }
            if tape.requires[b.0] {
                let ad = tape.vals[a.0].data();
                let db: Vec<E> = g.iter().zip(ad).map(|(&gi, &av)| gi * av).collect();
                tape.accumulate(*b, &db);
            }
        }
        Record::ChannelScale { x, s, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let shape = tape.vals[x.0].shape();
            let planes = shape[0] * shape[1];
            let spatial: usize = shape[2..].iter().product();
            if tape.requires[x.0] {
                let sd = tape.vals[s.0].data();
                let mut dx = vec![E::ZERO; planes * spatial];
                for p in 0..planes {
                    let sv = sd[p];
                    for i in 0..spatial {
                        dx[p * spatial + i] = g[p * spatial + i] * sv;
                    }
                }
                tape.accumulate(*x, &dx);
            }
            if tape.requires[s.0] {
                let xd = tape.vals[x.0].data();
                let mut ds = vec![E::ZERO; planes];
                for p in 0..planes {
                    let mut acc = E::ZERO;
                    for i in 0..spatial {
                        acc += g[p * spatial + i] * xd[p * spatial + i];
                    }
                    ds[p] = acc;
                }
                tape.accumulate(*s, &ds);
            }
        }
        Record::Affine { input, out, mul } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let dx: Vec<E> = g.iter().map(|&gi| gi * *mul).collect();
            tape.accumulate(*input, &dx);
        }
        Record::Sum { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let dx = vec![g[0]; tape.vals[input.0].numel()];
            tape.accumulate(*input, &dx);
        }
        Record::Mean { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let n = tape.vals[input.0].numel();
            let dx = vec![g[0] * E::from_f64(1.0 / n as f64); n];
            tape.accumulate(*input, &dx);
        }
        Record::ClampLn { input, out, eps } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let hi = E::ONE - *eps;
            let x = tape.vals[input.0].data();
            let dx: Vec<E> = g
                .iter()
                .zip(x)
                .map(|(&gi, &xi)| {
                    if xi > *eps && xi < hi {
                        gi / xi
                    } else {
                        E::ZERO
                    }
                })
                .collect();
            tape.accumulate(*input, &dx);
        }
        Record::ConcatChannels { inputs, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let out_shape = tape.vals[out.0].shape();
            let (b, c_total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
            let mut c_off = 0usize;
            for &v in inputs {
                let ci = tape.vals[v.0].shape()[1];
                if tape.requires[v.0] {
                    let mut dv = vec![E::ZERO; b * ci * h * w];
                    for bi in 0..b {
                        let src_start = (bi * c_total + c_off) * h * w;
                        let dst_start = bi * ci * h * w;
                        dv[dst_start..dst_start + ci * h * w]
                            .copy_from_slice(&g[src_start..src_start + ci * h * w]);
                    }
                    tape.accumulate(v, &dv);
                }
                c_off += ci;
            }
        }
        Record::Reshape { input, out } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            tape.accumulate(*input, &g);
        }
        Record::CrossEntropyLogits {
            logits,
            out,
            targets,
            softmax,
        } => {
            let Some(g) = tape.grads[out.0].clone() else {
                return Ok(());
            };
            let shape = tape.vals[logits.0].shape();
            let (b, k) = (shape[0], shape[1]);
            let inv_b = E::from_f64(1.0 / b as f64);
            let mut dx = vec![E::ZERO; b * k];
            for bi in 0..b {
                for j in 0..k {
                    let own = if targets[bi] == j { E::ONE } else { E::ZERO };
                    dx[bi * k + j] = (softmax[bi * k + j] - own) * inv_b * g[0];
                }
            }
            tape.accumulate(*logits, &dx);
        }
    }
    Ok(())
}
