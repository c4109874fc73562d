//! The computation tape: a Wengert list of recorded operations.

use super::conv::ConvSpec;
use super::{ops, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One recorded operation. Each variant carries exactly what its backward
/// rule needs beyond the arena values themselves.
#[derive(Debug)]
pub(crate) enum Record<E> {
    Conv2d {
        input: Var,
        kernel: Var,
        out: Var,
        spec: ConvSpec,
        // Forward im2col patches, kept when small enough to be worth it.
        patches: Option<Vec<E>>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        out: Var,
        // Per-channel statistics actually used for normalization.
        mean: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    Relu {
        input: Var,
        out: Var,
    },
    LeakyRelu {
        input: Var,
        out: Var,
        slope: E,
    },
    Sigmoid {
        input: Var,
        out: Var,
    },
    MaxPool2d {
        input: Var,
        out: Var,
        // Flat index into the input for each output element.
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: Var,
        out: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        out: Var,
    },
    L2NormalizeChannels {
        input: Var,
        out: Var,
        // Euclidean norm per spatial site, row-major over (batch, h, w).
        norms: Vec<E>,
        eps: E,
    },
    BilinearUpsample {
        input: Var,
        out: Var,
    },
    Dropout {
        input: Var,
        out: Var,
        mask: Vec<u8>,
        scale: E,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
        out: Var,
    },
    Affine {
        input: Var,
        out: Var,
        mul: E,
    },
    Sum {
        input: Var,
        out: Var,
    },
    Mean {
        input: Var,
        out: Var,
    },
    ClampLn {
        input: Var,
        out: Var,
        eps: E,
    },
    ConcatChannels {
        inputs: Vec<Var>,
        out: Var,
    },
    Reshape {
        input: Var,
        out: Var,
    },
    CrossEntropyLogits {
        logits: Var,
        out: Var,
        targets: Vec<usize>,
        softmax: Vec<E>,
    },
}

/// Reverse-mode tape. Values are immutable once written; gradients are
/// accumulated in fixed record order during `backward`.
pub struct Tape<E: Scalar> {
    pub(crate) vals: Vec<Tensor<E>>,
    pub(crate) requires: Vec<bool>,
    pub(crate) records: Vec<Record<E>>,
    pub(crate) grads: Vec<Option<Vec<E>>>,
    consumed: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            requires: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Register a leaf value. Operations whose inputs all have
    /// `requires_grad = false` record nothing, so constant subgraphs
    /// (e.g. a frozen teacher) cost no tape memory.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        self.requires.push(requires_grad);
        self.grads.push(None);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Gradient of the last backward pass with respect to `v`, if any
    /// reached it. `None` means the gradient is identically zero.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as an owned tensor, zeros if none flowed.
    pub fn grad_tensor(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.vals[v.0].shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape"),
            None => Tensor::zeros(self.vals[v.0].shape().to_vec()),
        }
    }

    pub(crate) fn push_result(&mut self, value: Tensor<E>, requires: bool) -> Var {
        let id = self.vals.len();
        self.vals.push(value);
        self.requires.push(requires);
        self.grads.push(None);
        Var(id)
    }

    pub(crate) fn record(&mut self, rec: Record<E>) {
        self.records.push(rec);
    }

    pub(crate) fn accumulate(&mut self, v: Var, contribution: &[E]) {
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contribution) {
                    *gi += c;
                }
            }
            None => {
                *slot = Some(contribution.to_vec());
            }
        }
    }

    /// Smallest distance of any recorded kinked-op input to its kink point
    /// (ReLU family at zero, log clamp at its bounds). The gradient checker
    /// uses this to discard instances where a finite-difference step would
    /// straddle a non-differentiable point.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for rec in &self.records {
            match rec {
                Record::Relu { input, .. } | Record::LeakyRelu { input, .. } => {
                    for &v in self.vals[input.0].data() {
                        margin = margin.min(v.to_f64().abs());
                    }
                }
                Record::ClampLn { input, eps, .. } => {
                    let e = eps.to_f64();
                    for &v in self.vals[input.0].data() {
                        let x = v.to_f64();
                        margin = margin.min((x - e).abs().min((1.0 - e - x).abs()));
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Replay the tape in reverse from a scalar loss, filling gradients
    /// for every value on a path to a `requires_grad` leaf. Each record is
    /// visited exactly once; a second backward on the same tape errors.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        self.consumed = true;
        if self.vals[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.vals[loss.0].shape().to_vec(),
            ));
        }
        self.grads[loss.0] = Some(vec![E::ONE]);
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            ops::backward_record(self, rec)?;
        }
        Ok(())
    }
}
