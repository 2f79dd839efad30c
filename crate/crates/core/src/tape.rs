//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every differentiable operation in execution order;
//! [`Tape::backward`] walks the record in exact reverse order and accumulates
//! vector-Jacobian products into per-node gradient buffers. Values are
//! immutable once produced; a tape is single-writer.

use rand::Rng;
use rayon::prelude::*;

use crate::error::TensorError;
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Probability clamp applied before logarithms in the cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-7;

/// Per-channel batch-norm running state, owned by the model between steps.
#[derive(Debug, Clone)]
pub struct BatchNormState<T: Scalar> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    PointwiseConv2d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        batch_stats: bool,
    },
    MaxPool {
        input: ValueId,
        argmax: Vec<usize>,
    },
    Linear {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    LayerNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: T,
    },
    Softmax {
        input: ValueId,
    },
    Sigmoid {
        input: ValueId,
    },
    Relu {
        input: ValueId,
    },
    Gelu {
        input: ValueId,
    },
    Dropout {
        input: ValueId,
        mask: Vec<T>,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
    },
    AddBroadcast {
        lhs: ValueId,
        rhs: ValueId,
    },
    ConcatToken {
        token: ValueId,
        tokens: ValueId,
    },
    SliceToken0 {
        input: ValueId,
    },
    Reshape {
        input: ValueId,
    },
    Permute {
        input: ValueId,
        perm: Vec<usize>,
    },
    BatchedMatmul {
        lhs: ValueId,
        rhs: ValueId,
        transpose_rhs: bool,
    },
    MulScalar {
        input: ValueId,
        factor: T,
    },
    MulElem {
        lhs: ValueId,
        rhs: ValueId,
    },
    SumAll {
        input: ValueId,
    },
    CrossEntropy {
        probs: ValueId,
        targets: Tensor<T>,
    },
    BinaryCrossEntropy {
        probs: ValueId,
        targets: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for a value, if it required one and was reachable.
    pub fn get(&self, id: ValueId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Ordered record of executed differentiable operations.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input value. Only leaves may require gradients directly.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> ValueId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> ValueId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Standard cross-correlation plus per-channel bias.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, TensorError> {
        let (in_dims, w_dims) = (
            self.value(input).dims().to_vec(),
            self.value(weight).dims().to_vec(),
        );
        if in_dims.len() != 4 || w_dims.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d".into(),
                expected: "4-d input and weight".into(),
                got: format!("{:?} / {:?}", in_dims, w_dims),
            });
        }
        let (n, c_in, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
        let (c_out, wc_in, kh, kw) = (w_dims[0], w_dims[1], w_dims[2], w_dims[3]);
        if kh != kw || !matches!(kh, 3 | 5 | 7) {
            return Err(TensorError::Config(format!(
                "conv2d kernel must be square with extent 3, 5 or 7, got {}x{}",
                kh, kw
            )));
        }
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d input channels".into(),
                expected: format!("{}", wc_in),
                got: format!("{}", c_in),
            });
        }
        if self.value(bias).numel() != c_out {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d bias".into(),
                expected: format!("{}", c_out),
                got: format!("{}", self.value(bias).numel()),
            });
        }
        let ho = kernels::conv_out_extent(h, kh, padding, stride);
        let wo = kernels::conv_out_extent(w, kw, padding, stride);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::InvalidPadding {
                    context: format!(
                        "input {}x{}, kernel {}, padding {}, stride {}",
                        h, w, kh, padding, stride
                    ),
                })
            }
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
        );
        let value = Tensor::new(&[n, c_out, ho, wo], out)?;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    /// Per-channel 3x3 convolution (padding 1, stride 1).
    pub fn depthwise_conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, TensorError> {
        let in_dims = self.value(input).dims().to_vec();
        let w_dims = self.value(weight).dims().to_vec();
        if in_dims.len() != 4 || w_dims.len() != 4 || w_dims[1] != 1 || w_dims[2] != 3 || w_dims[3] != 3
        {
            return Err(TensorError::ShapeMismatch {
                context: "depthwise_conv2d".into(),
                expected: "input [N,C,H,W], weight [C,1,3,3]".into(),
                got: format!("{:?} / {:?}", in_dims, w_dims),
            });
        }
        let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
        if w_dims[0] != c || self.value(bias).numel() != c {
            return Err(TensorError::ShapeMismatch {
                context: "depthwise_conv2d channels".into(),
                expected: format!("{}", c),
                got: format!("{} / {}", w_dims[0], self.value(bias).numel()),
            });
        }
        let out = kernels::depthwise3x3_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            c,
            h,
            w,
        );
        let value = Tensor::new(&[n, c, h, w], out)?;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::DepthwiseConv2d { input, weight, bias }))
    }

    /// 1x1 convolution: a per-pixel linear map across channels.
    pub fn pointwise_conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, TensorError> {
        let in_dims = self.value(input).dims().to_vec();
        let w_dims = self.value(weight).dims().to_vec();
        if in_dims.len() != 4 || w_dims.len() != 4 || w_dims[2] != 1 || w_dims[3] != 1 {
            return Err(TensorError::ShapeMismatch {
                context: "pointwise_conv2d".into(),
                expected: "input [N,C,H,W], weight [C_out,C_in,1,1]".into(),
                got: format!("{:?} / {:?}", in_dims, w_dims),
            });
        }
        let (n, c_in, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
        let c_out = w_dims[0];
        if w_dims[1] != c_in || self.value(bias).numel() != c_out {
            return Err(TensorError::ShapeMismatch {
                context: "pointwise_conv2d channels".into(),
                expected: format!("weight C_in {}, bias {}", c_in, c_out),
                got: format!("{} / {}", w_dims[1], self.value(bias).numel()),
            });
        }
        let out = kernels::pointwise_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            c_in,
            c_out,
            h * w,
        );
        let value = Tensor::new(&[n, c_out, h, w], out)?;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::PointwiseConv2d { input, weight, bias }))
    }

    /// Batch normalization over N,H,W per channel. Train mode uses batch
    /// statistics and updates `state`; eval mode uses the running statistics.
    pub fn batch_norm2d(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        state: &mut BatchNormState<T>,
        train: bool,
    ) -> Result<ValueId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        if dims.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                context: "batch_norm2d".into(),
                expected: "4-d input".into(),
                got: format!("{:?}", dims),
            });
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        if state.channels() != c || self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(TensorError::ShapeMismatch {
                context: "batch_norm2d channels".into(),
                expected: format!("{}", c),
                got: format!(
                    "state {}, gamma {}, beta {}",
                    state.channels(),
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            });
        }
        let m = n * h * w;
        let (mean, var) = if train {
            if m < 2 {
                return Err(TensorError::Contract(format!(
                    "batch_norm2d train mode requires N*H*W >= 2, got {}",
                    m
                )));
            }
            let x = self.value(input).data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            mean.par_iter_mut()
                .zip(var.par_iter_mut())
                .enumerate()
                .for_each(|(ci, (mu, vr))| {
                    let mut sum = T::zero();
                    let mut sum_sq = T::zero();
                    for img in 0..n {
                        let plane = &x[(img * c + ci) * h * w..(img * c + ci + 1) * h * w];
                        for &v in plane {
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let inv_m = T::from_f64(1.0 / m as f64);
                    *mu = sum * inv_m;
                    *vr = (sum_sq * inv_m - *mu * *mu).max(T::zero());
                });
            // Exponential running update with the configured momentum.
            let mom = T::from_f64(state.momentum);
            let keep = T::from_f64(1.0 - state.momentum);
            if state.initialized {
                for ci in 0..c {
                    state.running_mean[ci] = keep * state.running_mean[ci] + mom * mean[ci];
                    state.running_var[ci] = keep * state.running_var[ci] + mom * var[ci];
                }
            } else {
                state.running_mean.copy_from_slice(&mean);
                state.running_var.copy_from_slice(&var);
                state.initialized = true;
            }
            (mean, var)
        } else {
            if !state.initialized {
                return Err(TensorError::UninitializedStatistics);
            }
            (state.running_mean.clone(), state.running_var.clone())
        };

        let eps = T::from_f64(state.eps);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(h * w)
            .zip(x.par_chunks(h * w))
            .enumerate()
            .for_each(|(plane, (o, xs))| {
                let ci = plane % c;
                let rstd = T::one() / (var[ci] + eps).sqrt();
                let (gc, bc, mu) = (g[ci], b[ci], mean[ci]);
                for (ov, &xv) in o.iter_mut().zip(xs) {
                    *ov = gc * (xv - mu) * rstd + bc;
                }
            });
        let value = Tensor::new(&dims, out)?;
        let rg = self.needs_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats: train,
            },
        ))
    }

    /// 2x2 window maximum with stride 2.
    pub fn max_pool2d(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        if dims.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                context: "max_pool2d".into(),
                expected: "4-d input".into(),
                got: format!("{:?}", dims),
            });
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::UnsupportedExtent(format!(
                "max_pool2d requires even spatial extents, got {}x{}",
                h, w
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), n, c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::MaxPool { input, argmax }))
    }

    /// Affine map over the last axis.
    pub fn linear(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, TensorError> {
        let in_dims = self.value(input).dims().to_vec();
        let w_dims = self.value(weight).dims().to_vec();
        if w_dims.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                context: "linear weight".into(),
                expected: "[D_out, D_in]".into(),
                got: format!("{:?}", w_dims),
            });
        }
        let (d_out, d_in) = (w_dims[0], w_dims[1]);
        if in_dims.last().copied() != Some(d_in) {
            return Err(TensorError::ShapeMismatch {
                context: "linear trailing extent".into(),
                expected: format!("{}", d_in),
                got: format!("{:?}", in_dims),
            });
        }
        if self.value(bias).numel() != d_out {
            return Err(TensorError::ShapeMismatch {
                context: "linear bias".into(),
                expected: format!("{}", d_out),
                got: format!("{}", self.value(bias).numel()),
            });
        }
        let rows = self.value(input).numel() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        {
            let b = self.value(bias).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(b);
            }
            kernels::mm_nt_par(
                self.value(input).data(),
                self.value(weight).data(),
                &mut out,
                rows,
                d_in,
                d_out,
            );
        }
        let mut out_dims = in_dims.clone();
        *out_dims.last_mut().expect("non-empty dims") = d_out;
        let value = Tensor::new(&out_dims, out)?;
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Normalization over the last axis only.
    pub fn layer_norm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        let d = *dims.last().ok_or_else(|| TensorError::ShapeMismatch {
            context: "layer_norm".into(),
            expected: "rank >= 1".into(),
            got: "scalar".into(),
        })?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(TensorError::ShapeMismatch {
                context: "layer_norm gamma/beta".into(),
                expected: format!("{}", d),
                got: format!(
                    "{} / {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            });
        }
        let eps_t = T::from_f64(eps);
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(d).zip(x.par_chunks(d)).for_each(|(o, xs)| {
            let inv_d = T::from_f64(1.0 / d as f64);
            let mut mean = T::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::zero();
            for &v in xs {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = T::one() / (var + eps_t).sqrt();
            for ((ov, &xv), (&gv, &bv)) in o.iter_mut().zip(xs).zip(g.iter().zip(b)) {
                *ov = gv * (xv - mean) * rstd + bv;
            }
        });
        let value = Tensor::new(&dims, out)?;
        let rg = self.needs_grad(&[input, gamma, beta]);
        Ok(self.push(value, rg, Op::LayerNorm { input, gamma, beta, eps: eps_t }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        if !self.value(input).all_finite() {
            return Err(TensorError::InvalidValue(
                "softmax input contains non-finite values".into(),
            ));
        }
        let dims = self.value(input).dims().to_vec();
        let d = *dims.last().ok_or_else(|| TensorError::ShapeMismatch {
            context: "softmax".into(),
            expected: "rank >= 1".into(),
            got: "scalar".into(),
        })?;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); x.len()];
        out.par_chunks_mut(d).zip(x.par_chunks(d)).for_each(|(o, xs)| {
            let mut max = xs[0];
            for &v in &xs[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (ov, &xv) in o.iter_mut().zip(xs) {
                let e = (xv - max).exp();
                *ov = e;
                sum += e;
            }
            let inv = T::one() / sum;
            for ov in o.iter_mut() {
                *ov *= inv;
            }
        });
        let value = Tensor::new(&dims, out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::Softmax { input }))
    }

    /// Elementwise logistic function, computed without overflow.
    pub fn sigmoid(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = map_elems(self.value(input).data(), sigmoid_scalar);
        let value = Tensor::new(self.value(input).dims(), out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::Sigmoid { input }))
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = map_elems(self.value(input).data(), |v| {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        });
        let value = Tensor::new(self.value(input).dims(), out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::Relu { input }))
    }

    /// tanh-form Gaussian error linear unit.
    pub fn gelu(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = map_elems(self.value(input).data(), gelu_scalar);
        let value = Tensor::new(self.value(input).dims(), out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::Gelu { input }))
    }

    /// Inverted dropout: train mode zeroes with probability `rate` and scales
    /// survivors by 1/(1-rate); eval mode (or rate 0) is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: ValueId,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<ValueId, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                rate
            )));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = zip_elems(self.value(input).data(), &mask, |v, m| v * m);
        let value = Tensor::new(self.value(input).dims(), out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::Dropout { input, mask }))
    }

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        if self.value(lhs).dims() != self.value(rhs).dims() {
            return Err(TensorError::ShapeMismatch {
                context: "add".into(),
                expected: self.value(lhs).shape().display(),
                got: self.value(rhs).shape().display(),
            });
        }
        let out = zip_elems(self.value(lhs).data(), self.value(rhs).data(), |a, b| a + b);
        let value = Tensor::new(self.value(lhs).dims(), out)?;
        let rg = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::Add { lhs, rhs }))
    }

    /// `lhs [N, ...] + rhs [1, ...]`, broadcasting `rhs` over the batch axis.
    pub fn add_broadcast(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        let l = self.value(lhs).dims().to_vec();
        let r = self.value(rhs).dims().to_vec();
        if r.is_empty() || r[0] != 1 || l.len() != r.len() || l[1..] != r[1..] {
            return Err(TensorError::ShapeMismatch {
                context: "add_broadcast".into(),
                expected: format!("[1, ...] matching {:?}", l),
                got: format!("{:?}", r),
            });
        }
        let chunk = self.value(rhs).numel();
        let rd = self.value(rhs).storage();
        let out: Vec<T> = self
            .value(lhs)
            .data()
            .chunks(chunk)
            .flat_map(|c| c.iter().zip(rd.iter()).map(|(&a, &b)| a + b).collect::<Vec<_>>())
            .collect();
        let value = Tensor::new(&l, out)?;
        let rg = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::AddBroadcast { lhs, rhs }))
    }

    /// Prepend a learnable token `[1,1,D]` to every sequence of `[N,T,D]`.
    pub fn concat_token(&mut self, token: ValueId, tokens: ValueId) -> Result<ValueId, TensorError> {
        let td = self.value(token).dims().to_vec();
        let xd = self.value(tokens).dims().to_vec();
        if td.len() != 3 || xd.len() != 3 || td[0] != 1 || td[1] != 1 || td[2] != xd[2] {
            return Err(TensorError::ShapeMismatch {
                context: "concat_token".into(),
                expected: format!("token [1,1,{}]", xd.last().copied().unwrap_or(0)),
                got: format!("{:?}", td),
            });
        }
        let (n, t, d) = (xd[0], xd[1], xd[2]);
        let tok = self.value(token).storage();
        let xs = self.value(tokens).storage();
        let mut out = vec![T::zero(); n * (t + 1) * d];
        for img in 0..n {
            let dst = &mut out[img * (t + 1) * d..(img + 1) * (t + 1) * d];
            dst[..d].copy_from_slice(&tok);
            dst[d..].copy_from_slice(&xs[img * t * d..(img + 1) * t * d]);
        }
        let value = Tensor::new(&[n, t + 1, d], out)?;
        let rg = self.needs_grad(&[token, tokens]);
        Ok(self.push(value, rg, Op::ConcatToken { token, tokens }))
    }

    /// Extract token 0 from `[N,T,D]`, producing `[N,D]`.
    pub fn slice_token0(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        if dims.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                context: "slice_token0".into(),
                expected: "[N,T,D]".into(),
                got: format!("{:?}", dims),
            });
        }
        let (n, t, d) = (dims[0], dims[1], dims[2]);
        let xs = self.value(input).data();
        let mut out = vec![T::zero(); n * d];
        for img in 0..n {
            out[img * d..(img + 1) * d].copy_from_slice(&xs[img * t * d..img * t * d + d]);
        }
        let value = Tensor::new(&[n, d], out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::SliceToken0 { input }))
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId, TensorError> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// Reorder axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&mut self, input: ValueId, perm: &[usize]) -> Result<ValueId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        let mut seen = vec![false; dims.len()];
        let valid = perm.len() == dims.len()
            && perm.iter().all(|&p| {
                if p >= dims.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::Config(format!(
                "invalid permutation {:?} for rank {}",
                perm,
                dims.len()
            )));
        }
        let out = permute_data(self.value(input).data(), &dims, perm);
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let value = Tensor::new(&out_dims, out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            value,
            rg,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Matrix product over the two trailing axes, batched over the leading
    /// axes. With `transpose_rhs`, `rhs` is `[..., P, K]` and used transposed.
    pub fn batched_matmul(
        &mut self,
        lhs: ValueId,
        rhs: ValueId,
        transpose_rhs: bool,
    ) -> Result<ValueId, TensorError> {
        let a_dims = self.value(lhs).dims().to_vec();
        let b_dims = self.value(rhs).dims().to_vec();
        if a_dims.len() < 2 || a_dims.len() != b_dims.len() || a_dims[..a_dims.len() - 2] != b_dims[..b_dims.len() - 2]
        {
            return Err(TensorError::ShapeMismatch {
                context: "batched_matmul batch dims".into(),
                expected: format!("{:?}", a_dims),
                got: format!("{:?}", b_dims),
            });
        }
        let rank = a_dims.len();
        let (m, k) = (a_dims[rank - 2], a_dims[rank - 1]);
        let (bk, p) = if transpose_rhs {
            (b_dims[rank - 1], b_dims[rank - 2])
        } else {
            (b_dims[rank - 2], b_dims[rank - 1])
        };
        if bk != k {
            return Err(TensorError::ShapeMismatch {
                context: "batched_matmul inner extent".into(),
                expected: format!("{}", k),
                got: format!("{}", bk),
            });
        }
        let batch: usize = a_dims[..rank - 2].iter().product();
        let a = self.value(lhs).data();
        let b = self.value(rhs).data();
        let mut out = vec![T::zero(); batch * m * p];
        #[allow(clippy::if_same_then_else)] // p*k == k*p only numerically
        let b_chunk = if transpose_rhs { p * k } else { k * p };
        out.par_chunks_mut(m * p)
            .zip(a.par_chunks(m * k))
            .zip(b.par_chunks(b_chunk))
            .for_each(|((o, ab), bb)| {
                if transpose_rhs {
                    kernels::mm_nt(ab, bb, o, m, k, p);
                } else {
                    kernels::mm_nn(ab, bb, o, m, k, p);
                }
            });
        let mut out_dims = a_dims[..rank - 2].to_vec();
        out_dims.push(m);
        out_dims.push(p);
        let value = Tensor::new(&out_dims, out)?;
        let rg = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(
            value,
            rg,
            Op::BatchedMatmul {
                lhs,
                rhs,
                transpose_rhs,
            },
        ))
    }

    pub fn mul_scalar(&mut self, input: ValueId, factor: f64) -> Result<ValueId, TensorError> {
        let f = T::from_f64(factor);
        let out: Vec<T> = self.value(input).data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.value(input).dims(), out)?;
        let rg = self.needs_grad(&[input]);
        Ok(self.push(value, rg, Op::MulScalar { input, factor: f }))
    }

    pub fn mul_elem(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        if self.value(lhs).dims() != self.value(rhs).dims() {
            return Err(TensorError::ShapeMismatch {
                context: "mul_elem".into(),
                expected: self.value(lhs).shape().display(),
                got: self.value(rhs).shape().display(),
            });
        }
        let out = zip_elems(self.value(lhs).data(), self.value(rhs).data(), |a, b| a * b);
        let value = Tensor::new(self.value(lhs).dims(), out)?;
        let rg = self.needs_grad(&[lhs, rhs]);
        Ok(self.push(value, rg, Op::MulElem { lhs, rhs }))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let mut acc = T::zero();
        for &v in self.value(input).data() {
            acc += v;
        }
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Tensor::scalar(acc), rg, Op::SumAll { input }))
    }

    /// Mean over the batch of `-sum_k y log(clamp(p))`. `targets` rows must be
    /// exact one-hot vectors and `probs` rows must sum to 1 within 1e-5.
    pub fn categorical_cross_entropy(
        &mut self,
        targets: &Tensor<T>,
        probs: ValueId,
    ) -> Result<ValueId, TensorError> {
        let dims = self.value(probs).dims().to_vec();
        if dims.len() != 2 || targets.dims() != dims.as_slice() {
            return Err(TensorError::ShapeMismatch {
                context: "categorical_cross_entropy".into(),
                expected: format!("targets {:?}", dims),
                got: format!("{:?}", targets.dims()),
            });
        }
        let k = dims[1];
        for (row_idx, row) in targets.data().chunks(k).enumerate() {
            let mut ones = 0usize;
            for &v in row {
                if v == T::one() {
                    ones += 1;
                } else if v != T::zero() {
                    return Err(TensorError::Contract(format!(
                        "categorical_cross_entropy targets row {} is not one-hot",
                        row_idx
                    )));
                }
            }
            if ones != 1 {
                return Err(TensorError::Contract(format!(
                    "categorical_cross_entropy targets row {} has {} ones",
                    row_idx, ones
                )));
            }
        }
        for (row_idx, row) in self.value(probs).data().chunks(k).enumerate() {
            let sum: f64 = row.iter().map(|v| v.to_f64()).sum();
            if (sum - 1.0).abs() > 1e-5 {
                return Err(TensorError::Contract(format!(
                    "categorical_cross_entropy probability row {} sums to {}",
                    row_idx, sum
                )));
            }
        }
        let n = dims[0];
        let (lo, hi) = (T::from_f64(PROB_CLAMP), T::from_f64(1.0 - PROB_CLAMP));
        let mut acc = T::zero();
        for (&y, &p) in targets.data().iter().zip(self.value(probs).data()) {
            if y == T::one() {
                acc -= p.max(lo).min(hi).ln();
            }
        }
        let loss = acc / T::from_usize(n);
        let rg = self.needs_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                probs,
                targets: targets.clone(),
            },
        ))
    }

    /// Mean over all N*K terms of `-[y log p + (1-y) log(1-p)]` with clamping.
    pub fn binary_cross_entropy(
        &mut self,
        targets: &Tensor<T>,
        probs: ValueId,
    ) -> Result<ValueId, TensorError> {
        let dims = self.value(probs).dims().to_vec();
        if targets.dims() != dims.as_slice() {
            return Err(TensorError::ShapeMismatch {
                context: "binary_cross_entropy".into(),
                expected: format!("targets {:?}", dims),
                got: format!("{:?}", targets.dims()),
            });
        }
        for (i, &y) in targets.data().iter().enumerate() {
            if y != T::zero() && y != T::one() {
                return Err(TensorError::Contract(format!(
                    "binary_cross_entropy target element {} is {} (must be 0 or 1)",
                    i, y
                )));
            }
        }
        let total = self.value(probs).numel();
        let (lo, hi) = (T::from_f64(PROB_CLAMP), T::from_f64(1.0 - PROB_CLAMP));
        let mut acc = T::zero();
        for (&y, &p) in targets.data().iter().zip(self.value(probs).data()) {
            let pc = p.max(lo).min(hi);
            acc -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        let loss = acc / T::from_usize(total);
        let rg = self.needs_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.clone(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Visits operations in exact reverse
    /// execution order; gradients of fan-out nodes accumulate.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                op => {
                    self.propagate(idx, op, &g, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], id: ValueId, contribution: Vec<T>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(contribution) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let id = self.value(*input).dims().to_vec();
                let wd = self.value(*weight).dims().to_vec();
                let (gin, gw, gb) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    id[0],
                    id[1],
                    id[2],
                    id[3],
                    wd[0],
                    wd[2],
                    wd[3],
                    *stride,
                    *padding,
                    self.wants(*input),
                );
                if self.wants(*input) {
                    Self::accumulate(grads, *input, gin);
                }
                if self.wants(*weight) {
                    Self::accumulate(grads, *weight, gw);
                }
                if self.wants(*bias) {
                    Self::accumulate(grads, *bias, gb);
                }
            }
            Op::DepthwiseConv2d { input, weight, bias } => {
                let id = self.value(*input).dims().to_vec();
                let (gin, gw, gb) = kernels::depthwise3x3_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    id[0],
                    id[1],
                    id[2],
                    id[3],
                    self.wants(*input),
                );
                if self.wants(*input) {
                    Self::accumulate(grads, *input, gin);
                }
                if self.wants(*weight) {
                    Self::accumulate(grads, *weight, gw);
                }
                if self.wants(*bias) {
                    Self::accumulate(grads, *bias, gb);
                }
            }
            Op::PointwiseConv2d { input, weight, bias } => {
                let id = self.value(*input).dims().to_vec();
                let wd = self.value(*weight).dims().to_vec();
                let (gin, gw, gb) = kernels::pointwise_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    id[0],
                    id[1],
                    wd[0],
                    id[2] * id[3],
                    self.wants(*input),
                );
                if self.wants(*input) {
                    Self::accumulate(grads, *input, gin);
                }
                if self.wants(*weight) {
                    Self::accumulate(grads, *weight, gw);
                }
                if self.wants(*bias) {
                    Self::accumulate(grads, *bias, gb);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
                batch_stats,
            } => {
                let dims = self.value(*input).dims().to_vec();
                let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
                let m = n * h * w;
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let inv_m = T::from_f64(1.0 / m as f64);

                // Per-channel reductions in fixed (n, y, x) order.
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                sum_g
                    .par_iter_mut()
                    .zip(sum_gx.par_iter_mut())
                    .enumerate()
                    .for_each(|(ci, (sg, sgx))| {
                        let rstd = T::one() / (var[ci] + *eps).sqrt();
                        for img in 0..n {
                            let off = (img * c + ci) * h * w;
                            for i in 0..h * w {
                                let gv = g[off + i];
                                let xh = (x[off + i] - mean[ci]) * rstd;
                                *sg += gv;
                                *sgx += gv * xh;
                            }
                        }
                    });

                if self.wants(*input) {
                    let mut gin = vec![T::zero(); x.len()];
                    gin.par_chunks_mut(h * w).enumerate().for_each(|(plane, go)| {
                        let img = plane / c;
                        let ci = plane % c;
                        let off = (img * c + ci) * h * w;
                        let rstd = T::one() / (var[ci] + *eps).sqrt();
                        let gr = gam[ci] * rstd;
                        if *batch_stats {
                            let mg = sum_g[ci] * inv_m;
                            let mgx = sum_gx[ci] * inv_m;
                            for i in 0..h * w {
                                let xh = (x[off + i] - mean[ci]) * rstd;
                                go[i] = gr * (g[off + i] - mg - xh * mgx);
                            }
                        } else {
                            for i in 0..h * w {
                                go[i] = gr * g[off + i];
                            }
                        }
                    });
                    Self::accumulate(grads, *input, gin);
                }
                if self.wants(*gamma) {
                    Self::accumulate(grads, *gamma, sum_gx);
                }
                if self.wants(*beta) {
                    Self::accumulate(grads, *beta, sum_g);
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.wants(*input) {
                    let gin = kernels::maxpool2_backward(g, argmax, self.value(*input).numel());
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Linear { input, weight, bias } => {
                let wd = self.value(*weight).dims().to_vec();
                let (d_out, d_in) = (wd[0], wd[1]);
                let rows = self.value(*input).numel() / d_in;
                if self.wants(*input) {
                    let mut gin = vec![T::zero(); rows * d_in];
                    kernels::mm_nn_par(g, self.value(*weight).data(), &mut gin, rows, d_out, d_in);
                    Self::accumulate(grads, *input, gin);
                }
                if self.wants(*weight) {
                    let mut gw = vec![T::zero(); d_out * d_in];
                    kernels::mm_tn(g, self.value(*input).data(), &mut gw, rows, d_out, d_in);
                    Self::accumulate(grads, *weight, gw);
                }
                if self.wants(*bias) {
                    let mut gb = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        for (b, &v) in gb.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                    Self::accumulate(grads, *bias, gb);
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let dims = self.value(*input).dims().to_vec();
                let d = *dims.last().expect("validated rank");
                let rows = self.value(*input).numel() / d;
                let x = self.value(*input).data();
                let gam = self.value(*gamma).data();
                let inv_d = T::from_f64(1.0 / d as f64);

                let mut gin = vec![T::zero(); x.len()];
                let mut ggam = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let xs = &x[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mut mean = T::zero();
                    for &v in xs {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = T::zero();
                    for &v in xs {
                        let cdev = v - mean;
                        var += cdev * cdev;
                    }
                    var *= inv_d;
                    let rstd = T::one() / (var + *eps).sqrt();

                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for i in 0..d {
                        let xh = (xs[i] - mean) * rstd;
                        let dxh = gs[i] * gam[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                        ggam[i] += gs[i] * xh;
                        gbeta[i] += gs[i];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    let go = &mut gin[r * d..(r + 1) * d];
                    for i in 0..d {
                        let xh = (xs[i] - mean) * rstd;
                        let dxh = gs[i] * gam[i];
                        go[i] = rstd * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                if self.wants(*input) {
                    Self::accumulate(grads, *input, gin);
                }
                if self.wants(*gamma) {
                    Self::accumulate(grads, *gamma, ggam);
                }
                if self.wants(*beta) {
                    Self::accumulate(grads, *beta, gbeta);
                }
            }
            Op::Softmax { input } => {
                if self.wants(*input) {
                    let y = self.nodes[idx].value.data();
                    let dims = self.nodes[idx].value.dims();
                    let d = *dims.last().expect("validated rank");
                    let mut gin = vec![T::zero(); y.len()];
                    gin.chunks_mut(d)
                        .zip(y.chunks(d))
                        .zip(g.chunks(d))
                        .for_each(|((go, ys), gs)| {
                            let mut dot = T::zero();
                            for (&yv, &gv) in ys.iter().zip(gs) {
                                dot += yv * gv;
                            }
                            for i in 0..d {
                                go[i] = ys[i] * (gs[i] - dot);
                            }
                        });
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Sigmoid { input } => {
                if self.wants(*input) {
                    let y = self.nodes[idx].value.data();
                    let gin = zip_elems(y, g, |yv, gv| gv * yv * (T::one() - yv));
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Relu { input } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let gin = zip_elems(x, g, |xv, gv| if xv > T::zero() { gv } else { T::zero() });
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Gelu { input } => {
                if self.wants(*input) {
                    let x = self.value(*input).data();
                    let gin = zip_elems(x, g, |xv, gv| gv * gelu_grad(xv));
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Dropout { input, mask } => {
                if self.wants(*input) {
                    let gin = zip_elems(mask, g, |m, gv| m * gv);
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Add { lhs, rhs } => {
                if self.wants(*lhs) {
                    Self::accumulate(grads, *lhs, g.to_vec());
                }
                if self.wants(*rhs) {
                    Self::accumulate(grads, *rhs, g.to_vec());
                }
            }
            Op::AddBroadcast { lhs, rhs } => {
                if self.wants(*lhs) {
                    Self::accumulate(grads, *lhs, g.to_vec());
                }
                if self.wants(*rhs) {
                    let chunk = self.value(*rhs).numel();
                    let mut gr = vec![T::zero(); chunk];
                    for c in g.chunks(chunk) {
                        for (acc, &v) in gr.iter_mut().zip(c) {
                            *acc += v;
                        }
                    }
                    Self::accumulate(grads, *rhs, gr);
                }
            }
            Op::ConcatToken { token, tokens } => {
                let xd = self.value(*tokens).dims().to_vec();
                let (n, t, d) = (xd[0], xd[1], xd[2]);
                if self.wants(*token) {
                    let mut gt = vec![T::zero(); d];
                    for img in 0..n {
                        let row = &g[img * (t + 1) * d..img * (t + 1) * d + d];
                        for (acc, &v) in gt.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Self::accumulate(grads, *token, gt);
                }
                if self.wants(*tokens) {
                    let mut gx = vec![T::zero(); n * t * d];
                    for img in 0..n {
                        let src = &g[img * (t + 1) * d + d..(img + 1) * (t + 1) * d];
                        gx[img * t * d..(img + 1) * t * d].copy_from_slice(src);
                    }
                    Self::accumulate(grads, *tokens, gx);
                }
            }
            Op::SliceToken0 { input } => {
                if self.wants(*input) {
                    let dims = self.value(*input).dims().to_vec();
                    let (n, t, d) = (dims[0], dims[1], dims[2]);
                    let mut gin = vec![T::zero(); n * t * d];
                    for img in 0..n {
                        gin[img * t * d..img * t * d + d].copy_from_slice(&g[img * d..(img + 1) * d]);
                    }
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::Reshape { input } => {
                if self.wants(*input) {
                    Self::accumulate(grads, *input, g.to_vec());
                }
            }
            Op::Permute { input, perm } => {
                if self.wants(*input) {
                    let out_dims = self.nodes[idx].value.dims().to_vec();
                    let mut inverse = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let gin = permute_data(g, &out_dims, &inverse);
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::BatchedMatmul {
                lhs,
                rhs,
                transpose_rhs,
            } => {
                let a_dims = self.value(*lhs).dims().to_vec();
                let b_dims = self.value(*rhs).dims().to_vec();
                let rank = a_dims.len();
                let (m, k) = (a_dims[rank - 2], a_dims[rank - 1]);
                let p = if *transpose_rhs {
                    b_dims[rank - 2]
                } else {
                    b_dims[rank - 1]
                };
                let batch: usize = a_dims[..rank - 2].iter().product();
                let a = self.value(*lhs).data();
                let b = self.value(*rhs).data();
                #[allow(clippy::if_same_then_else)] // p*k == k*p only numerically
                let b_chunk = if *transpose_rhs { p * k } else { k * p };

                if self.wants(*lhs) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    ga.par_chunks_mut(m * k)
                        .zip(g.par_chunks(m * p))
                        .zip(b.par_chunks(b_chunk))
                        .for_each(|((gao, go), bb)| {
                            if *transpose_rhs {
                                kernels::mm_nn(go, bb, gao, m, p, k);
                            } else {
                                kernels::mm_nt(go, bb, gao, m, p, k);
                            }
                        });
                    Self::accumulate(grads, *lhs, ga);
                }
                if self.wants(*rhs) {
                    let mut gb = vec![T::zero(); batch * b_chunk];
                    gb.par_chunks_mut(b_chunk)
                        .zip(g.par_chunks(m * p))
                        .zip(a.par_chunks(m * k))
                        .for_each(|((gbo, go), ab)| {
                            if *transpose_rhs {
                                kernels::mm_tn(go, ab, gbo, m, p, k);
                            } else {
                                kernels::mm_tn(ab, go, gbo, m, k, p);
                            }
                        });
                    Self::accumulate(grads, *rhs, gb);
                }
            }
            Op::MulScalar { input, factor } => {
                if self.wants(*input) {
                    let gin: Vec<T> = g.iter().map(|&v| v * *factor).collect();
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::MulElem { lhs, rhs } => {
                if self.wants(*lhs) {
                    let gin: Vec<T> = g
                        .iter()
                        .zip(self.value(*rhs).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    Self::accumulate(grads, *lhs, gin);
                }
                if self.wants(*rhs) {
                    let gin: Vec<T> = g
                        .iter()
                        .zip(self.value(*lhs).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    Self::accumulate(grads, *rhs, gin);
                }
            }
            Op::SumAll { input } => {
                if self.wants(*input) {
                    let gin = vec![g[0]; self.value(*input).numel()];
                    Self::accumulate(grads, *input, gin);
                }
            }
            Op::CrossEntropy { probs, targets } => {
                if self.wants(*probs) {
                    let dims = self.value(*probs).dims().to_vec();
                    let n = dims[0];
                    let scale = g[0] / T::from_usize(n);
                    let (lo, hi) = (T::from_f64(PROB_CLAMP), T::from_f64(1.0 - PROB_CLAMP));
                    let gin: Vec<T> = targets
                        .data()
                        .iter()
                        .zip(self.value(*probs).data())
                        .map(|(&y, &p)| {
                            if y == T::one() && p >= lo && p <= hi {
                                -scale / p
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    Self::accumulate(grads, *probs, gin);
                }
            }
            Op::BinaryCrossEntropy { probs, targets } => {
                if self.wants(*probs) {
                    let total = self.value(*probs).numel();
                    let scale = g[0] / T::from_usize(total);
                    let (lo, hi) = (T::from_f64(PROB_CLAMP), T::from_f64(1.0 - PROB_CLAMP));
                    let gin: Vec<T> = targets
                        .data()
                        .iter()
                        .zip(self.value(*probs).data())
                        .map(|(&y, &p)| {
                            if p < lo || p > hi {
                                T::zero()
                            } else {
                                let pc = p.max(lo).min(hi);
                                -scale * (y / pc - (T::one() - y) / (T::one() - pc))
                            }
                        })
                        .collect();
                    Self::accumulate(grads, *probs, gin);
                }
            }
        }
    }
}

const PAR_ELEMWISE_THRESHOLD: usize = 1 << 16;

/// Elementwise map, parallel over chunks for large buffers. Purely
/// elementwise, so the partition cannot affect results.
fn map_elems<T: Scalar, F: Fn(T) -> T + Sync>(input: &[T], f: F) -> Vec<T> {
    if input.len() < PAR_ELEMWISE_THRESHOLD {
        return input.iter().map(|&v| f(v)).collect();
    }
    let mut out = vec![T::zero(); input.len()];
    out.par_chunks_mut(1 << 14)
        .zip(input.par_chunks(1 << 14))
        .for_each(|(o, i)| {
            for (ov, &iv) in o.iter_mut().zip(i) {
                *ov = f(iv);
            }
        });
    out
}

/// Elementwise zip-map, parallel over chunks for large buffers.
fn zip_elems<T: Scalar, F: Fn(T, T) -> T + Sync>(a: &[T], b: &[T], f: F) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() < PAR_ELEMWISE_THRESHOLD {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); a.len()];
    out.par_chunks_mut(1 << 14)
        .zip(a.par_chunks(1 << 14))
        .zip(b.par_chunks(1 << 14))
        .for_each(|((o, xs), ys)| {
            for ((ov, &xv), &yv) in o.iter_mut().zip(xs).zip(ys) {
                *ov = f(xv, yv);
            }
        });
    out
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x.powi(3));
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x.powi(3));
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}

/// Copy `data` of shape `dims` into the axis order given by `perm`.
fn permute_data<T: Scalar>(data: &[T], dims: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let out_strides_src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = dims.iter().product();
    let mut out = vec![T::zero(); numel];
    // Walk the output linearly, maintaining the source offset incrementally.
    let mut index = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for axis in (0..rank).rev() {
            index[axis] += 1;
            src += out_strides_src[axis];
            if index[axis] < out_dims[axis] {
                break;
            }
            src -= out_strides_src[axis] * out_dims[axis];
            index[axis] = 0;
        }
    }
    out
}
