//! Model specifications, parameter storage, forward passes with activation
//! capture, and the two reduced-scale architectures.

mod archs;
mod train;
mod weights;

pub use archs::{toy_vgg, toy_xception, ModelKind};
pub use train::{train_model, EpochStats, TrainConfig, TrainHistory};
pub use weights::{load_weights, save_weights};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, VarId};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer `{layer}`: {reason}")]
    Spec { layer: String, reason: String },
    #[error("unknown layer id `{0}`")]
    UnknownLayer(String),
    #[error("{0}")]
    Invalid(String),
    #[error("weights file {path}: {reason}")]
    WeightsFormat { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One layer of a model, keyed by a stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    SeparableConv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

impl DataShape {
    pub fn numel(&self) -> usize {
        match *self {
            DataShape::Chw(c, h, w) => c * h * w,
            DataShape::Flat(d) => d,
        }
    }
}

/// Declarative layer sequence plus named bottleneck injection points.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// Input shape (C, H, W).
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Layer ids whose outputs are sensible bottleneck injection sites.
    pub injection_points: Vec<String>,
}

impl ModelSpec {
    /// Propagates shapes through the layer stack, checking that consecutive
    /// layers compose, ids are unique, and injection points exist. Returns
    /// the output shape after each layer.
    pub fn validate(&self) -> Result<Vec<DataShape>, ModelError> {
        let mut seen = std::collections::HashSet::new();
        let mut cur = DataShape::Chw(self.input.0, self.input.1, self.input.2);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if !seen.insert(layer.id.clone()) {
                return Err(ModelError::Spec {
                    layer: layer.id.clone(),
                    reason: "duplicate layer id".into(),
                });
            }
            cur = propagate(layer, cur)?;
            out.push(cur);
        }
        for point in &self.injection_points {
            if !self.layers.iter().any(|l| &l.id == point) {
                return Err(ModelError::UnknownLayer(point.clone()));
            }
        }
        Ok(out)
    }

    pub fn layer_index(&self, id: &str) -> Result<usize, ModelError> {
        self.layers
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| ModelError::UnknownLayer(id.to_string()))
    }
}

fn conv_out(hw: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize, String> {
    let padded = hw + 2 * padding;
    if kernel > padded {
        return Err(format!("kernel {kernel} larger than padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

fn propagate(layer: &LayerSpec, shape: DataShape) -> Result<DataShape, ModelError> {
    let err = |reason: String| ModelError::Spec {
        layer: layer.id.clone(),
        reason,
    };
    match (&layer.kind, shape) {
        (
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            },
            DataShape::Chw(_, h, w),
        )
        | (
            LayerKind::SeparableConv {
                out_channels,
                kernel,
                stride,
                padding,
            },
            DataShape::Chw(_, h, w),
        ) => {
            let oh = conv_out(h, *kernel, *stride, *padding).map_err(&err)?;
            let ow = conv_out(w, *kernel, *stride, *padding).map_err(&err)?;
            Ok(DataShape::Chw(*out_channels, oh, ow))
        }
        (LayerKind::BatchNorm, s @ DataShape::Chw(..)) | (LayerKind::Relu, s) => Ok(s),
        (
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            },
            DataShape::Chw(c, h, w),
        ) => {
            let oh = conv_out(h, *kernel, *stride, *padding).map_err(&err)?;
            let ow = conv_out(w, *kernel, *stride, *padding).map_err(&err)?;
            Ok(DataShape::Chw(c, oh, ow))
        }
        (LayerKind::Flatten, DataShape::Chw(c, h, w)) => Ok(DataShape::Flat(c * h * w)),
        (LayerKind::Linear { out_features }, DataShape::Flat(_)) => {
            Ok(DataShape::Flat(*out_features))
        }
        (kind, shape) => Err(err(format!("{kind:?} cannot follow {shape:?}"))),
    }
}

/// Named parameter tensors per layer id. Ordered maps keep serialization and
/// optimizer walks deterministic.
pub type ParameterStore = BTreeMap<String, BTreeMap<String, Tensor>>;

/// A spec plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParameterStore,
    shapes: Vec<DataShape>,
}

/// Builds a model with deterministic He-style fan-in initialization.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let shapes = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParameterStore = BTreeMap::new();
    let mut cur = DataShape::Chw(spec.input.0, spec.input.1, spec.input.2);
    for (layer, &next) in spec.layers.iter().zip(&shapes) {
        let mut tensors = BTreeMap::new();
        match (&layer.kind, cur) {
            (
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    ..
                },
                DataShape::Chw(c_in, _, _),
            ) => {
                let fan_in = (c_in * kernel * kernel) as f32;
                tensors.insert(
                    "weight".to_string(),
                    Tensor::randn(
                        &[*out_channels, c_in, *kernel, *kernel],
                        (2.0 / fan_in).sqrt(),
                        &mut rng,
                    ),
                );
            }
            (
                LayerKind::SeparableConv {
                    out_channels,
                    kernel,
                    ..
                },
                DataShape::Chw(c_in, _, _),
            ) => {
                let dw_fan = (kernel * kernel) as f32;
                tensors.insert(
                    "depthwise".to_string(),
                    Tensor::randn(&[c_in, 1, *kernel, *kernel], (2.0 / dw_fan).sqrt(), &mut rng),
                );
                tensors.insert(
                    "pointwise".to_string(),
                    Tensor::randn(
                        &[*out_channels, c_in, 1, 1],
                        (2.0 / c_in as f32).sqrt(),
                        &mut rng,
                    ),
                );
            }
            (LayerKind::BatchNorm, DataShape::Chw(c, _, _)) => {
                tensors.insert("gamma".to_string(), Tensor::full(&[c], 1.0));
                tensors.insert("beta".to_string(), Tensor::zeros(&[c]));
                tensors.insert("running_mean".to_string(), Tensor::zeros(&[c]));
                tensors.insert("running_var".to_string(), Tensor::full(&[c], 1.0));
            }
            (LayerKind::Linear { out_features }, DataShape::Flat(d)) => {
                tensors.insert(
                    "weight".to_string(),
                    Tensor::randn(&[d, *out_features], (2.0 / d as f32).sqrt(), &mut rng),
                );
                tensors.insert("bias".to_string(), Tensor::zeros(&[*out_features]));
            }
            _ => {}
        }
        if !tensors.is_empty() {
            params.insert(layer.id.clone(), tensors);
        }
        cur = next;
    }
    Ok(Model {
        spec,
        params,
        shapes,
    })
}

/// How a forward pass treats batch-norm layers and parameters.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Eval,
    Train,
}

impl Model {
    /// Output shape after the named layer.
    pub fn shape_after(&self, layer_id: &str) -> Result<DataShape, ModelError> {
        Ok(self.shapes[self.spec.layer_index(layer_id)?])
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(DataShape::numel).unwrap_or(0)
    }

    fn param(&self, layer: &str, name: &str) -> &Tensor {
        &self.params[layer][name]
    }

    fn expect_batch(&self, batch: &Tensor) -> Result<(), ModelError> {
        let want = [self.spec.input.0, self.spec.input.1, self.spec.input.2];
        if batch.shape().len() != 4 || batch.shape()[1..] != want {
            return Err(ModelError::Invalid(format!(
                "batch shape {:?} does not match model input NxCxHxW with (C,H,W)={want:?}",
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Runs layers `[from, to)` in eval mode on the given tape value.
    fn run_layers_eval(
        &self,
        tape: &mut Tape,
        mut v: VarId,
        from: usize,
        to: usize,
        mut capture: Option<(&[String], &mut BTreeMap<String, Tensor>)>,
    ) -> Result<VarId, ModelError> {
        for idx in from..to {
            let layer = &self.spec.layers[idx];
            v = match &layer.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => {
                    let w = tape.constant(self.param(&layer.id, "weight").clone())?;
                    tape.conv2d(v, w, (*stride, *stride), (*padding, *padding))?
                }
                LayerKind::SeparableConv {
                    stride, padding, ..
                } => {
                    let dw = tape.constant(self.param(&layer.id, "depthwise").clone())?;
                    let pw = tape.constant(self.param(&layer.id, "pointwise").clone())?;
                    tape.separable_conv2d(v, dw, pw, (*stride, *stride), (*padding, *padding))?
                }
                LayerKind::BatchNorm => {
                    let g = tape.constant(self.param(&layer.id, "gamma").clone())?;
                    let b = tape.constant(self.param(&layer.id, "beta").clone())?;
                    tape.batch_norm2d_eval(
                        v,
                        g,
                        b,
                        self.param(&layer.id, "running_mean"),
                        self.param(&layer.id, "running_var"),
                        BN_EPS,
                    )?
                }
                LayerKind::Relu => tape.relu(v)?,
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => tape.max_pool2d(
                    v,
                    (*kernel, *kernel),
                    (*stride, *stride),
                    (*padding, *padding),
                )?,
                LayerKind::Flatten => {
                    let n = tape.value(v).shape()[0];
                    let d = tape.value(v).numel() / n;
                    tape.reshape(v, vec![n, d])?
                }
                LayerKind::Linear { .. } => {
                    let w = tape.constant(self.param(&layer.id, "weight").clone())?;
                    let b = tape.constant(self.param(&layer.id, "bias").clone())?;
                    tape.linear(v, w, b)?
                }
            };
            if let Some((wanted, map)) = capture.as_mut() {
                if wanted.iter().any(|id| id == &layer.id) {
                    map.insert(layer.id.clone(), tape.value(v).clone());
                }
            }
        }
        Ok(v)
    }

    /// Plain inference: logits for a batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let (logits, _) = self.forward_capture(batch, &[])?;
        Ok(logits)
    }

    /// Inference that additionally returns the exact outputs of the named
    /// layers. An empty capture set behaves as a plain forward.
    pub fn forward_capture(
        &self,
        batch: &Tensor,
        capture_ids: &[String],
    ) -> Result<(Tensor, BTreeMap<String, Tensor>), ModelError> {
        self.expect_batch(batch)?;
        for id in capture_ids {
            self.spec.layer_index(id)?;
        }
        let mut tape = Tape::new();
        let mut captured = BTreeMap::new();
        let v = tape.constant(batch.clone())?;
        let out = self.run_layers_eval(
            &mut tape,
            v,
            0,
            self.spec.layers.len(),
            Some((capture_ids, &mut captured)),
        )?;
        Ok((tape.value(out).clone(), captured))
    }

    /// Resumes inference from the output of `after_layer` on an existing
    /// tape, so upstream code can differentiate through the remaining stack.
    pub fn forward_tail_on_tape(
        &self,
        tape: &mut Tape,
        after_layer: &str,
        v: VarId,
    ) -> Result<VarId, ModelError> {
        let idx = self.spec.layer_index(after_layer)?;
        self.run_layers_eval(tape, v, idx + 1, self.spec.layers.len(), None)
    }

    /// Convenience wrapper: feeds an activation through the remaining layers
    /// in eval mode and returns the logits.
    pub fn forward_tail(&self, after_layer: &str, activation: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let v = tape.constant(activation.clone())?;
        let out = self.forward_tail_on_tape(&mut tape, after_layer, v)?;
        Ok(tape.value(out).clone())
    }

    /// Training-mode forward: registers every trainable parameter as a
    /// gradient leaf and returns their tape ids keyed by `(layer, tensor)`.
    /// Batch-norm layers use batch statistics and update the running stats
    /// stored on the model.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
    ) -> Result<(VarId, Vec<(String, String, VarId)>), ModelError> {
        self.expect_batch(batch)?;
        let mut v = tape.constant(batch.clone())?;
        let mut param_vars = Vec::new();
        for idx in 0..self.spec.layers.len() {
            let layer = self.spec.layers[idx].clone();
            v = match &layer.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => {
                    let w = tape.input(self.param(&layer.id, "weight").clone(), true)?;
                    param_vars.push((layer.id.clone(), "weight".to_string(), w));
                    tape.conv2d(v, w, (*stride, *stride), (*padding, *padding))?
                }
                LayerKind::SeparableConv {
                    stride, padding, ..
                } => {
                    let dw = tape.input(self.param(&layer.id, "depthwise").clone(), true)?;
                    let pw = tape.input(self.param(&layer.id, "pointwise").clone(), true)?;
                    param_vars.push((layer.id.clone(), "depthwise".to_string(), dw));
                    param_vars.push((layer.id.clone(), "pointwise".to_string(), pw));
                    tape.separable_conv2d(v, dw, pw, (*stride, *stride), (*padding, *padding))?
                }
                LayerKind::BatchNorm => {
                    let g = tape.input(self.param(&layer.id, "gamma").clone(), true)?;
                    let b = tape.input(self.param(&layer.id, "beta").clone(), true)?;
                    param_vars.push((layer.id.clone(), "gamma".to_string(), g));
                    param_vars.push((layer.id.clone(), "beta".to_string(), b));
                    let entry = self.params.get_mut(&layer.id).expect("bn params");
                    let mut rm = entry.remove("running_mean").expect("running_mean");
                    let mut rv = entry.remove("running_var").expect("running_var");
                    let out = tape.batch_norm2d_train(v, g, b, &mut rm, &mut rv, BN_EPS, BN_MOMENTUM);
                    let entry = self.params.get_mut(&layer.id).expect("bn params");
                    entry.insert("running_mean".to_string(), rm);
                    entry.insert("running_var".to_string(), rv);
                    out?
                }
                LayerKind::Relu => tape.relu(v)?,
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => tape.max_pool2d(
                    v,
                    (*kernel, *kernel),
                    (*stride, *stride),
                    (*padding, *padding),
                )?,
                LayerKind::Flatten => {
                    let n = tape.value(v).shape()[0];
                    let d = tape.value(v).numel() / n;
                    tape.reshape(v, vec![n, d])?
                }
                LayerKind::Linear { .. } => {
                    let w = tape.input(self.param(&layer.id, "weight").clone(), true)?;
                    let b = tape.input(self.param(&layer.id, "bias").clone(), true)?;
                    param_vars.push((layer.id.clone(), "weight".to_string(), w));
                    param_vars.push((layer.id.clone(), "bias".to_string(), b));
                    tape.linear(v, w, b)?
                }
            };
        }
        Ok((v, param_vars))
    }
}

/// Row-wise softmax probabilities for a batch; rows sum to 1.
pub fn predict_proba(model: &Model, batch: &Tensor) -> Result<Tensor, ModelError> {
    let logits = model.forward(batch)?;
    Ok(softmax_rows(&logits))
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, k) = logits.dims2("softmax_rows").expect("rank-2 logits");
    let mut out = vec![0.0f32; n * k];
    for row in 0..n {
        let r = &logits.data()[row * k..][..k];
        let max = r.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for &v in r {
            denom += ((v as f64) - max).exp();
        }
        for (c, &v) in r.iter().enumerate() {
            out[row * k + c] = (((v as f64) - max).exp() / denom) as f32;
        }
    }
    Tensor::new(vec![n, k], out).expect("shape")
}

/// Index of the largest value; first index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |acc, (i, &v)| if v > row[acc] { i } else { acc })
}
