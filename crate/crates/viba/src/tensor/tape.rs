//! Single-use recording tape for reverse-mode differentiation.
//!
//! Every operation validates its inputs, checks the produced values for
//! NaN/Inf (an error, never a silent state), and records what backward needs.
//! `backward` may run at most once per tape and returns gradients for every
//! leaf registered with `requires_grad`, zero-filled when the loss does not
//! depend on them.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvDims, PoolDims};
use super::{sum_f64, Tensor, TensorError};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf {
        requires_grad: bool,
    },
    Relu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    Ln {
        x: VarId,
    },
    Neg {
        x: VarId,
    },
    Square {
        x: VarId,
    },
    Scale {
        x: VarId,
        factor: f32,
    },
    AddScalar {
        x: VarId,
    },
    /// `c - x`
    ScalarSub {
        x: VarId,
    },
    ClampMax {
        x: VarId,
        limit: f32,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Sum {
        x: VarId,
    },
    Mean {
        x: VarId,
    },
    Reshape {
        x: VarId,
    },
    Dropout {
        x: VarId,
        mask: Vec<bool>,
        keep: f32,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        dims: ConvDims,
    },
    DepthwiseConv2d {
        x: VarId,
        w: VarId,
        dims: ConvDims,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<u32>,
        dims: PoolDims,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    },
    SoftmaxCrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients keyed by the leaf [`VarId`]s that requested them.
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a `requires_grad` leaf.
    pub fn wrt(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input tensor. Gradients flow into it only when
    /// `requires_grad` is set.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId, TensorError> {
        self.push(value, Op::Leaf { requires_grad }, requires_grad, "input")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<VarId, TensorError> {
        self.input(value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor,
        op: Op,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<VarId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    fn unary<F: Fn(f32) -> f32>(
        &mut self,
        x: VarId,
        f: F,
        op: Op,
        name: &'static str,
    ) -> Result<VarId, TensorError> {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(value, op, needs, name)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(x, |v| v.max(0.0), Op::Relu { x }, "relu")
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x }, "sigmoid")
    }

    pub fn ln(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(x, f32::ln, Op::Ln { x }, "ln")
    }

    pub fn neg(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(x, |v| -v, Op::Neg { x }, "neg")
    }

    pub fn square(&mut self, x: VarId) -> Result<VarId, TensorError> {
        self.unary(x, |v| v * v, Op::Square { x }, "square")
    }

    pub fn scale(&mut self, x: VarId, factor: f32) -> Result<VarId, TensorError> {
        self.unary(x, |v| v * factor, Op::Scale { x, factor }, "scale")
    }

    pub fn add_scalar(&mut self, x: VarId, c: f32) -> Result<VarId, TensorError> {
        self.unary(x, |v| v + c, Op::AddScalar { x }, "add_scalar")
    }

    /// `c - x`, elementwise.
    pub fn scalar_sub(&mut self, c: f32, x: VarId) -> Result<VarId, TensorError> {
        self.unary(x, |v| c - v, Op::ScalarSub { x }, "scalar_sub")
    }

    /// `min(x, limit)`; gradient passes where `x <= limit`.
    pub fn clamp_max(&mut self, x: VarId, limit: f32) -> Result<VarId, TensorError> {
        self.unary(x, |v| v.min(limit), Op::ClampMax { x, limit }, "clamp_max")
    }

    fn binary<F: Fn(f32, f32) -> f32>(
        &mut self,
        a: VarId,
        b: VarId,
        f: F,
        op: Op,
        name: &'static str,
    ) -> Result<VarId, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                context: name.into(),
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs, name)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, TensorError> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn sum(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let v = sum_f64(self.nodes[x.0].value.data()) as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Sum { x }, needs, "sum")
    }

    pub fn mean(&mut self, x: VarId) -> Result<VarId, TensorError> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(TensorError::InvalidArg("mean of an empty tensor".into()));
        }
        let v = (sum_f64(self.nodes[x.0].value.data()) / n as f64) as f32;
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Mean { x }, needs, "mean")
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId, TensorError> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs, "reshape")
    }

    /// Inverted dropout: training scales kept elements by `1/keep`, inference
    /// is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        x: VarId,
        keep: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<VarId, TensorError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::InvalidArg(format!(
                "dropout keep probability {keep} outside (0, 1]"
            )));
        }
        if !training {
            let value = self.nodes[x.0].value.clone();
            let needs = self.needs(x);
            return self.push(
                value,
                Op::Dropout {
                    x,
                    mask: Vec::new(),
                    keep: 1.0,
                },
                needs,
                "dropout",
            );
        }
        let src = &self.nodes[x.0].value;
        let mask: Vec<bool> = (0..src.numel()).map(|_| rng.gen::<f32>() < keep).collect();
        let data = src
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v / keep } else { 0.0 })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask, keep }, needs, "dropout")
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<VarId, TensorError> {
        let (n, c_in, h, wd) = self.nodes[x.0].value.dims4("conv2d input")?;
        let (c_out, wc_in, kh, kw) = self.nodes[w.0].value.dims4("conv2d weight")?;
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: weight input channels disagree with input".into(),
                lhs: self.nodes[x.0].value.shape().to_vec(),
                rhs: self.nodes[w.0].value.shape().to_vec(),
            });
        }
        let dims = ConvDims {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        check_window("conv2d", h, wd, kh, kw, stride, padding)?;
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &dims,
        );
        let value = Tensor::new(vec![n, c_out, dims.out_h(), dims.out_w()], out)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(value, Op::Conv2d { x, w, dims }, needs, "conv2d")
    }

    /// Depthwise convolution; weight shape `C×1×kh×kw`, one filter per input
    /// channel (groups == channels).
    pub fn depthwise_conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<VarId, TensorError> {
        let (n, c_in, h, wd) = self.nodes[x.0].value.dims4("depthwise input")?;
        let (groups, one, kh, kw) = self.nodes[w.0].value.dims4("depthwise weight")?;
        if groups != c_in || one != 1 {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "depthwise conv: weight groups {groups} must equal input channels {c_in} (second dim 1)"
                ),
                lhs: self.nodes[x.0].value.shape().to_vec(),
                rhs: self.nodes[w.0].value.shape().to_vec(),
            });
        }
        let dims = ConvDims {
            n,
            c_in,
            h,
            w: wd,
            c_out: c_in,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        check_window("depthwise_conv2d", h, wd, kh, kw, stride, padding)?;
        let out = kernels::depthwise_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            &dims,
        );
        let value = Tensor::new(vec![n, c_in, dims.out_h(), dims.out_w()], out)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(value, Op::DepthwiseConv2d { x, w, dims }, needs, "depthwise_conv2d")
    }

    /// Depthwise stage followed by a 1×1 pointwise convolution.
    pub fn separable_conv2d(
        &mut self,
        x: VarId,
        depthwise: VarId,
        pointwise: VarId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<VarId, TensorError> {
        let mid = self.depthwise_conv2d(x, depthwise, stride, padding)?;
        self.conv2d(mid, pointwise, (1, 1), (0, 0))
    }

    pub fn max_pool2d(
        &mut self,
        x: VarId,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<VarId, TensorError> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4("max_pool2d input")?;
        check_window("max_pool2d", h, w, kernel.0, kernel.1, stride, padding)?;
        let dims = PoolDims {
            n,
            c,
            h,
            w,
            kh: kernel.0,
            kw: kernel.1,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        let (out, argmax) = kernels::max_pool_forward(self.nodes[x.0].value.data(), &dims);
        let value = Tensor::new(vec![n, c, dims.out_h(), dims.out_w()], out)?;
        let needs = self.needs(x);
        self.push(value, Op::MaxPool { x, argmax, dims }, needs, "max_pool2d")
    }

    /// Affine map `x·w + b` with `x: N×D`, `w: D×K`, `b: K`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId, TensorError> {
        let (n, din) = self.nodes[x.0].value.dims2("linear input")?;
        let (wd, k) = self.nodes[w.0].value.dims2("linear weight")?;
        if wd != din {
            return Err(TensorError::ShapeMismatch {
                context: "linear: inner dimensions disagree".into(),
                lhs: self.nodes[x.0].value.shape().to_vec(),
                rhs: self.nodes[w.0].value.shape().to_vec(),
            });
        }
        if self.nodes[b.0].value.shape() != [k] {
            return Err(TensorError::ShapeMismatch {
                context: "linear: bias length must match output features".into(),
                lhs: self.nodes[b.0].value.shape().to_vec(),
                rhs: vec![k],
            });
        }
        let out = kernels::linear_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            n,
            din,
            k,
        );
        let value = Tensor::new(vec![n, k], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, needs, "linear")
    }

    /// Batch norm in inference mode, normalizing with the provided running
    /// statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f32,
    ) -> Result<VarId, TensorError> {
        let (_, c, _, _) = self.nodes[x.0].value.dims4("batch_norm input")?;
        validate_bn_params(self, x, gamma, beta, eps)?;
        for (name, t) in [("running_mean", running_mean), ("running_var", running_var)] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    context: format!("batch_norm: {name} length must equal channels"),
                    lhs: t.shape().to_vec(),
                    rhs: vec![c],
                });
            }
        }
        let mean: Vec<f32> = running_mean.data().to_vec();
        let inv_std: Vec<f32> = running_var
            .data()
            .iter()
            .map(|&v| 1.0 / (v + eps).sqrt())
            .collect();
        self.batch_norm_apply(x, gamma, beta, mean, inv_std, false)
    }

    /// Batch norm in training mode: uses batch statistics and updates the
    /// running statistics in place (`running = (1-momentum)·running +
    /// momentum·batch`, biased variance).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        eps: f32,
        momentum: f32,
    ) -> Result<VarId, TensorError> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4("batch_norm input")?;
        validate_bn_params(self, x, gamma, beta, eps)?;
        let (bmean, bvar) = kernels::channel_moments(self.nodes[x.0].value.data(), n, c, h * w);
        for ch in 0..c {
            let rm = &mut running_mean.data_mut()[ch];
            *rm = (1.0 - momentum) * *rm + momentum * bmean[ch] as f32;
            let rv = &mut running_var.data_mut()[ch];
            *rv = (1.0 - momentum) * *rv + momentum * bvar[ch] as f32;
        }
        let mean: Vec<f32> = bmean.iter().map(|&v| v as f32).collect();
        let inv_std: Vec<f32> = bvar.iter().map(|&v| 1.0 / ((v as f32) + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, inv_std, true)
    }

    fn batch_norm_apply(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    ) -> Result<VarId, TensorError> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4("batch_norm input")?;
        let hw = h * w;
        let g = self.nodes[gamma.0].value.data().to_vec();
        let bt = self.nodes[beta.0].value.data().to_vec();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; src.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = g[ch] * inv_std[ch];
                let (m, bv) = (mean[ch], bt[ch]);
                let base = (b * c + ch) * hw;
                for (o, &v) in out[base..base + hw].iter_mut().zip(&src[base..base + hw]) {
                    *o = (v - m) * scale + bv;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
            needs,
            "batch_norm2d",
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, with
    /// max-subtraction for stability. Returns a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
    ) -> Result<VarId, TensorError> {
        let (n, k) = self.nodes[logits.0].value.dims2("softmax_cross_entropy logits")?;
        if labels.len() != n {
            return Err(TensorError::InvalidArg(format!(
                "softmax_cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        let data = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0f32; n * k];
        let mut loss = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(TensorError::LabelOutOfRange {
                    row,
                    label,
                    classes: k,
                });
            }
            let rowdata = &data[row * k..][..k];
            let max = rowdata.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            for &v in rowdata {
                denom += ((v as f64) - max).exp();
            }
            for (c, &v) in rowdata.iter().enumerate() {
                probs[row * k + c] = (((v as f64) - max).exp() / denom) as f32;
            }
            loss -= ((rowdata[label] as f64) - max - denom.ln()) / n as f64;
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss as f32),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            "softmax_cross_entropy",
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape's single backward
    /// budget; a second call errors.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        self.consumed = true;

        let mut pending: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = HashMap::new();

        for id in (0..=loss.0).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        out.insert(id, grad);
                    }
                }
                op => {
                    for (src, g) in self.input_grads(op, id, &grad) {
                        if !self.nodes[src.0].needs_grad {
                            continue;
                        }
                        match &mut pending[src.0] {
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += *b;
                                }
                            }
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }

        // Leaves the loss never touched still report a gradient: zero.
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                requires_grad: true,
            } = node.op
            {
                out.entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn input_grads(&self, op: &Op, out_id: usize, grad: &Tensor) -> Vec<(VarId, Tensor)> {
        let val = |id: VarId| self.nodes[id.0].value.data();
        let shape = |id: VarId| self.nodes[id.0].value.shape();
        let map_into = |id: VarId, data: Vec<f32>| {
            (
                id,
                Tensor::new(shape(id).to_vec(), data).expect("gradient shape"),
            )
        };
        match op {
            Op::Leaf { .. } => Vec::new(),
            Op::Relu { x } => {
                let data = val(*x)
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                vec![map_into(*x, data)]
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[out_id].value.data();
                let data = y
                    .iter()
                    .zip(grad.data())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                vec![map_into(*x, data)]
            }
            Op::Ln { x } => {
                let data = val(*x)
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| g / v)
                    .collect();
                vec![map_into(*x, data)]
            }
            Op::Neg { x } => {
                let data = grad.data().iter().map(|&g| -g).collect();
                vec![map_into(*x, data)]
            }
            Op::Square { x } => {
                let data = val(*x)
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| 2.0 * v * g)
                    .collect();
                vec![map_into(*x, data)]
            }
            Op::Scale { x, factor } => {
                let data = grad.data().iter().map(|&g| g * factor).collect();
                vec![map_into(*x, data)]
            }
            Op::AddScalar { x } => vec![map_into(*x, grad.data().to_vec())],
            Op::ScalarSub { x } => {
                let data = grad.data().iter().map(|&g| -g).collect();
                vec![map_into(*x, data)]
            }
            Op::ClampMax { x, limit } => {
                let data = val(*x)
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| if v <= *limit { g } else { 0.0 })
                    .collect();
                vec![map_into(*x, data)]
            }
            Op::Add { a, b } => vec![
                map_into(*a, grad.data().to_vec()),
                map_into(*b, grad.data().to_vec()),
            ],
            Op::Sub { a, b } => {
                let nb = grad.data().iter().map(|&g| -g).collect();
                vec![map_into(*a, grad.data().to_vec()), map_into(*b, nb)]
            }
            Op::Mul { a, b } => {
                let ga = val(*b)
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| v * g)
                    .collect();
                let gb = val(*a)
                    .iter()
                    .zip(grad.data())
                    .map(|(&v, &g)| v * g)
                    .collect();
                vec![map_into(*a, ga), map_into(*b, gb)]
            }
            Op::Sum { x } => {
                let g = grad.data()[0];
                vec![map_into(*x, vec![g; self.nodes[x.0].value.numel()])]
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel();
                let g = grad.data()[0] / n as f32;
                vec![map_into(*x, vec![g; n])]
            }
            Op::Reshape { x } => {
                vec![map_into(*x, grad.data().to_vec())]
            }
            Op::Dropout { x, mask, keep } => {
                if mask.is_empty() {
                    return vec![map_into(*x, grad.data().to_vec())];
                }
                let data = grad
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { g / keep } else { 0.0 })
                    .collect();
                vec![map_into(*x, data)]
            }
            Op::Conv2d { x, w, dims } => {
                let mut grads = Vec::new();
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::conv2d_backward_input(grad.data(), val(*w), dims);
                    grads.push(map_into(*x, dx));
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::conv2d_backward_weight(val(*x), grad.data(), dims);
                    grads.push(map_into(*w, dw));
                }
                grads
            }
            Op::DepthwiseConv2d { x, w, dims } => {
                let mut grads = Vec::new();
                if self.nodes[x.0].needs_grad {
                    let dx = kernels::depthwise_backward_input(grad.data(), val(*w), dims);
                    grads.push(map_into(*x, dx));
                }
                if self.nodes[w.0].needs_grad {
                    let dw = kernels::depthwise_backward_weight(val(*x), grad.data(), dims);
                    grads.push(map_into(*w, dw));
                }
                grads
            }
            Op::MaxPool { x, argmax, dims } => {
                let dx = kernels::max_pool_backward(grad.data(), argmax, dims);
                vec![map_into(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.nodes[x.0].value.dims2("linear").expect("checked");
                let k = self.nodes[b.0].value.numel();
                let (dx, dw, db) =
                    kernels::linear_backward(val(*x), val(*w), grad.data(), n, din, k);
                vec![map_into(*x, dx), map_into(*w, dw), map_into(*b, db)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            } => self.batch_norm_grads(*x, *gamma, *beta, mean, inv_std, *training, grad),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, k) = self.nodes[logits.0].value.dims2("ce").expect("checked");
                let g = grad.data()[0] / n as f32;
                let mut dl = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    dl[row * k + label] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= g;
                }
                vec![map_into(*logits, dl)]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_grads(
        &self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: &[f32],
        inv_std: &[f32],
        training: bool,
        grad: &Tensor,
    ) -> Vec<(VarId, Tensor)> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4("batch_norm").expect("checked");
        let hw = h * w;
        let m = (n * hw) as f64;
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let dout = grad.data();

        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        let mut dx = vec![0.0f32; src.len()];

        for ch in 0..c {
            // Channel sums in f64: N*H*W can exceed 4096 terms.
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    let dy = dout[base + i] as f64;
                    let xhat = ((src[base + i] - mean[ch]) * inv_std[ch]) as f64;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            dgamma[ch] = sum_dy_xhat as f32;
            dbeta[ch] = sum_dy as f32;
            let scale = (g[ch] * inv_std[ch]) as f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    let dy = dout[base + i] as f64;
                    let grad_in = if training {
                        let xhat = ((src[base + i] - mean[ch]) * inv_std[ch]) as f64;
                        scale * (dy - sum_dy / m - xhat * sum_dy_xhat / m)
                    } else {
                        scale * dy
                    };
                    dx[base + i] = grad_in as f32;
                }
            }
        }
        vec![
            (x, Tensor::new(vec![n, c, h, w], dx).expect("shape")),
            (gamma, Tensor::new(vec![c], dgamma).expect("shape")),
            (beta, Tensor::new(vec![c], dbeta).expect("shape")),
        ]
    }
}

fn validate_bn_params(
    tape: &Tape,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    eps: f32,
) -> Result<(), TensorError> {
    if eps <= 0.0 {
        return Err(TensorError::InvalidArg(format!(
            "batch_norm eps must be positive, got {eps}"
        )));
    }
    let (_, c, _, _) = tape.nodes[x.0].value.dims4("batch_norm input")?;
    for (name, id) in [("gamma", gamma), ("beta", beta)] {
        if tape.nodes[id.0].value.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                context: format!("batch_norm: {name} length must equal channels"),
                lhs: tape.nodes[id.0].value.shape().to_vec(),
                rhs: vec![c],
            });
        }
    }
    Ok(())
}

fn check_window(
    op: &str,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(), TensorError> {
    if stride.0 == 0 || stride.1 == 0 {
        return Err(TensorError::InvalidArg(format!("{op}: stride must be >= 1")));
    }
    if kh == 0 || kw == 0 {
        return Err(TensorError::InvalidArg(format!("{op}: kernel must be >= 1")));
    }
    if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
        return Err(TensorError::InvalidArg(format!(
            "{op}: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding.0,
            w + 2 * padding.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]), true).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        // Idempotence.
        let y2 = tape.relu(y).unwrap();
        assert_eq!(tape.value(y2).data(), tape.value(y).data());
    }

    #[test]
    fn relu_all_negative_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[4], &[-1.0, -2.0, -0.5, -3.0]), true).unwrap();
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_inputs_zero() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true).unwrap();
        let unused = tape.input(t(&[3], &[5.0, 6.0, 7.0]), true).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(2.0), true).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::TapeConsumed)
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 4, 4]), false).unwrap();
        let w = tape.input(Tensor::zeros(&[1, 3, 3, 3]), false).unwrap();
        let err = tape.conv2d(x, w, (1, 1), (1, 1)).unwrap_err().to_string();
        assert!(err.contains("[1, 1, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn separable_identity() {
        // 1×1 depthwise identity plus pointwise identity matrix.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape
            .input(Tensor::rand_uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng), false)
            .unwrap();
        let dw = tape.input(t(&[2, 1, 1, 1], &[1.0, 1.0]), false).unwrap();
        let pw = tape
            .input(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]), false)
            .unwrap();
        let y = tape.separable_conv2d(x, dw, pw, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn separable_pointwise_sums_channels() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::rand_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let x = tape.input(input.clone(), false).unwrap();
        let dw = tape.input(t(&[2, 1, 1, 1], &[1.0, 1.0]), false).unwrap();
        // Single output channel summing both inputs.
        let pw = tape.input(t(&[1, 2, 1, 1], &[1.0, 1.0]), false).unwrap();
        let y = tape.separable_conv2d(x, dw, pw, (1, 1), (0, 0)).unwrap();
        let d = input.data();
        for i in 0..16 {
            let want = d[i] + d[16 + i];
            assert!((tape.value(y).data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn separable_group_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 4, 4]), false).unwrap();
        let dw = tape.input(Tensor::zeros(&[2, 1, 3, 3]), false).unwrap();
        let pw = tape.input(Tensor::zeros(&[4, 2, 1, 1]), false).unwrap();
        assert!(tape.separable_conv2d(x, dw, pw, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn separable_matches_two_stage_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::rand_uniform(&[1, 3, 6, 6], -1.0, 1.0, &mut rng);
        let dw = Tensor::rand_uniform(&[3, 1, 3, 3], -1.0, 1.0, &mut rng);
        let pw = Tensor::rand_uniform(&[4, 3, 1, 1], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let xv = tape.input(x.clone(), false).unwrap();
        let dv = tape.input(dw.clone(), false).unwrap();
        let pv = tape.input(pw.clone(), false).unwrap();
        let y = tape.separable_conv2d(xv, dv, pv, (1, 1), (1, 1)).unwrap();

        // Oracle: depthwise as three independent dense 1-channel convs, then
        // a dense 1×1 conv.
        let mut tape2 = Tape::new();
        let mut mid_chans = Vec::new();
        let chans = x.slice_leading(0).unwrap();
        for c in 0..3 {
            let xc = tape2.input(chans.slice_leading(c).unwrap().reshaped(vec![1, 1, 6, 6]).unwrap(), false).unwrap();
            let wc = tape2
                .input(dw.slice_leading(c).unwrap().reshaped(vec![1, 1, 3, 3]).unwrap(), false)
                .unwrap();
            let yc = tape2.conv2d(xc, wc, (1, 1), (1, 1)).unwrap();
            mid_chans.extend_from_slice(tape2.value(yc).data());
        }
        let mid = tape2
            .input(Tensor::new(vec![1, 3, 6, 6], mid_chans).unwrap(), false)
            .unwrap();
        let pv2 = tape2.input(pw, false).unwrap();
        let y2 = tape2.conv2d(mid, pv2, (1, 1), (0, 0)).unwrap();

        for (a, b) in tape.value(y).data().iter().zip(tape2.value(y2).data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_eval_near_identity_for_unit_stats() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::rand_uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let x = tape.input(input.clone(), false).unwrap();
        let gamma = tape.input(t(&[2], &[1.0, 1.0]), false).unwrap();
        let beta = tape.input(t(&[2], &[0.0, 0.0]), false).unwrap();
        let y = tape
            .batch_norm2d_eval(x, gamma, beta, &Tensor::zeros(&[2]), &Tensor::full(&[2], 1.0), 1e-5)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_train_constant_channel_yields_beta() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[2, 1, 2, 2], 3.5), false).unwrap();
        let gamma = tape.input(t(&[1], &[2.0]), false).unwrap();
        let beta = tape.input(t(&[1], &[0.7]), false).unwrap();
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let y = tape
            .batch_norm2d_train(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1)
            .unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.7).abs() < 1e-6);
        }
        // Running stats moved toward the batch statistics.
        assert!((rm.data()[0] - 0.35).abs() < 1e-6);
        assert!((rv.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_eval_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = Tensor::rand_uniform(&[2, 4, 3, 3], -2.0, 2.0, &mut rng);
        let gamma = Tensor::rand_uniform(&[4], 0.5, 1.5, &mut rng);
        let beta = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);
        let rm = Tensor::rand_uniform(&[4], -0.5, 0.5, &mut rng);
        let rv = Tensor::rand_uniform(&[4], 0.2, 1.5, &mut rng);
        let eps = 1e-5f32;

        let mut tape = Tape::new();
        let x = tape.input(input.clone(), false).unwrap();
        let g = tape.input(gamma.clone(), false).unwrap();
        let b = tape.input(beta.clone(), false).unwrap();
        let y = tape.batch_norm2d_eval(x, g, b, &rm, &rv, eps).unwrap();

        for n in 0..2 {
            for c in 0..4 {
                for i in 0..9 {
                    let idx = (n * 4 + c) * 9 + i;
                    let want = gamma.data()[c] as f64
                        * ((input.data()[idx] - rm.data()[c]) as f64)
                        / (((rv.data()[c] + eps) as f64).sqrt())
                        + beta.data()[c] as f64;
                    assert!((tape.value(y).data()[idx] as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batch_norm_rejects_nonpositive_eps() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 2, 2]), false).unwrap();
        let g = tape.input(t(&[1], &[1.0]), false).unwrap();
        let b = tape.input(t(&[1], &[0.0]), false).unwrap();
        let err = tape.batch_norm2d_eval(x, g, b, &Tensor::zeros(&[1]), &Tensor::full(&[1], 1.0), 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn max_pool_cases() {
        // Constant input stays constant at reduced size.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 5, 5], 2.0), false).unwrap();
        let y = tape.max_pool2d(x, (3, 3), (2, 2), (1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));

        // A single peak appears in every window containing it.
        let mut data = vec![0.0f32; 16];
        data[5] = 9.0; // (1,1)
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 4, 4], &data), false).unwrap();
        let y = tape.max_pool2d(x, (3, 3), (2, 2), (1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn max_pool_kernel_too_large_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 2, 2]), false).unwrap();
        assert!(tape.max_pool2d(x, (5, 5), (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn max_pool_matches_window_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = Tensor::rand_uniform(&[1, 2, 7, 7], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(input.clone(), false).unwrap();
        let y = tape.max_pool2d(x, (3, 3), (2, 2), (1, 1)).unwrap();
        let out = tape.value(y);
        let (oh, ow) = (4usize, 4usize);
        assert_eq!(out.shape(), &[1, 2, oh, ow]);
        for c in 0..2 {
            for a in 0..oh {
                for b in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for kh in 0..3i64 {
                        for kw in 0..3i64 {
                            let ih = a as i64 * 2 + kh - 1;
                            let iw = b as i64 * 2 + kw - 1;
                            if (0..7).contains(&ih) && (0..7).contains(&iw) {
                                best = best
                                    .max(input.data()[(c * 7 + ih as usize) * 7 + iw as usize]);
                            }
                        }
                    }
                    assert_eq!(out.data()[(c * oh + a) * ow + b], best);
                }
            }
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let w = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false).unwrap();
        let b0 = tape.input(t(&[2], &[0.0, 0.0]), false).unwrap();
        let y = tape.linear(x, w, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let wz = tape.input(Tensor::zeros(&[2, 2]), false).unwrap();
        let b1 = tape.input(t(&[2], &[0.5, -1.0]), false).unwrap();
        let y2 = tape.linear(x, wz, b1).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn linear_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3]), false).unwrap();
        let w = tape.input(Tensor::zeros(&[4, 2]), false).unwrap();
        let b = tape.input(Tensor::zeros(&[2]), false).unwrap();
        assert!(tape.linear(x, w, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_two_class_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.input(t(&[1, 2], &[0.3, 0.3]), false).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(loss).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_dominant_logit_near_zero_loss() {
        let mut tape = Tape::new();
        let logits = tape.input(t(&[1, 2], &[100.0, 0.0]), false).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_high_precision_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::rand_uniform(&[4, 3], -3.0, 3.0, &mut rng);
        let labels = [0usize, 2, 1, 1];
        let mut tape = Tape::new();
        let lv = tape.input(logits.clone(), false).unwrap();
        let loss = tape.softmax_cross_entropy(lv, &labels).unwrap();

        let mut want = 0.0f64;
        for (row, &label) in labels.iter().enumerate() {
            let r: Vec<f64> = logits.data()[row * 3..][..3].iter().map(|&v| v as f64).collect();
            let denom: f64 = r.iter().map(|v| v.exp()).sum();
            want -= (r[label].exp() / denom).ln() / 4.0;
        }
        assert!((tape.value(loss).data()[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.input(Tensor::zeros(&[1, 2]), false).unwrap();
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[2]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn nonfinite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1], &[-1.0]), false).unwrap();
        assert!(matches!(
            tape.ln(x),
            Err(TensorError::NonFinite { op: "ln" })
        ));
    }

    #[test]
    fn dropout_eval_identity_train_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = Tensor::rand_uniform(&[64], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(input.clone(), true).unwrap();
        let y = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), input.data());

        let mut tape = Tape::new();
        let x = tape.input(input.clone(), true).unwrap();
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let kept = tape
            .value(y)
            .data()
            .iter()
            .zip(input.data())
            .filter(|(o, _)| **o != 0.0)
            .all(|(o, i)| (*o - *i * 2.0).abs() < 1e-6);
        assert!(kept);
        let zeros = tape.value(y).data().iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 8 && zeros < 56, "mask should drop roughly half");
    }

    #[test]
    fn tape_replay_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let mut tape = Tape::new();
            let x = tape
                .input(Tensor::rand_uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng), true)
                .unwrap();
            let w = tape
                .input(Tensor::rand_uniform(&[4, 3, 3, 3], -0.5, 0.5, &mut rng), true)
                .unwrap();
            let c = tape.conv2d(x, w, (1, 1), (1, 1)).unwrap();
            let r = tape.relu(c).unwrap();
            let flat = tape.reshape(r, vec![2, 4 * 8 * 8]).unwrap();
            let lw = tape
                .input(Tensor::rand_uniform(&[4 * 8 * 8, 2], -0.1, 0.1, &mut rng), true)
                .unwrap();
            let lb = tape.input(Tensor::zeros(&[2]), true).unwrap();
            let logits = tape.linear(flat, lw, lb).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
            let lv = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            (lv, grads.wrt(w).unwrap().data().to_vec())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
