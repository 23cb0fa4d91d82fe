//! The two reduced-scale architectures.
//!
//! `toy-xception` keeps the entry-conv / separable-block / exit-conv
//! structure of its full-size counterpart at widths 8→16→24→32 on 3×64×64
//! inputs; each block is relu → separable conv → bn → relu → separable conv
//! → bn → maxpool(3, 2, 1), and the block's pooling layer carries the
//! block's id so it can serve as an injection point.
//!
//! `toy-vgg` follows the classic eleven-layer conv stack with channel widths
//! divided by 8 (3→8→16→32→32→64→64→64→64), BN after every conv,
//! max-pool(2, 2, 0) at the usual five positions, and layer ids numbered by
//! running index (`layer0`..`layer28`) so the bottleneck sweep can address
//! `layer9`, `layer12`, `layer16`.

use std::fmt;
use std::str::FromStr;

use super::{LayerKind, LayerSpec, ModelSpec};

/// The two model families the CLI knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ToyXception,
    ToyVgg,
}

impl ModelKind {
    pub fn spec(&self) -> ModelSpec {
        match self {
            ModelKind::ToyXception => toy_xception(),
            ModelKind::ToyVgg => toy_vgg(),
        }
    }

    /// Default bottleneck injection layer.
    pub fn default_injection(&self) -> &'static str {
        match self {
            ModelKind::ToyXception => "block2",
            ModelKind::ToyVgg => "layer9",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ToyXception => "toy-xception",
            ModelKind::ToyVgg => "toy-vgg",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy-xception" => Ok(ModelKind::ToyXception),
            "toy-vgg" => Ok(ModelKind::ToyVgg),
            other => Err(format!(
                "unknown model kind `{other}` (expected toy-xception or toy-vgg)"
            )),
        }
    }
}

fn conv(id: &str, out_channels: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::Conv {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        },
    }
}

fn sep(id: &str, out_channels: usize) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::SeparableConv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
    }
}

fn bn(id: &str) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::BatchNorm,
    }
}

fn relu(id: &str) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::Relu,
    }
}

fn pool(id: &str, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        },
    }
}

/// One separable block; the closing pool layer takes the block id.
fn xception_block(name: &str, out_channels: usize, layers: &mut Vec<LayerSpec>) {
    layers.push(relu(&format!("{name}_relu_a")));
    layers.push(sep(&format!("{name}_sep_a"), out_channels));
    layers.push(bn(&format!("{name}_bn_a")));
    layers.push(relu(&format!("{name}_relu_b")));
    layers.push(sep(&format!("{name}_sep_b"), out_channels));
    layers.push(bn(&format!("{name}_bn_b")));
    layers.push(pool(name, 3, 2, 1));
}

pub fn toy_xception() -> ModelSpec {
    let mut layers = vec![
        conv("conv1", 8, 2),
        bn("bn1"),
        relu("relu1"),
        conv("conv2", 16, 1),
        bn("bn2"),
        relu("relu2"),
    ];
    xception_block("block1", 24, &mut layers);
    xception_block("block2", 32, &mut layers);
    xception_block("block3", 32, &mut layers);
    layers.push(sep("conv3", 32));
    layers.push(bn("bn3"));
    layers.push(relu("post_conv3"));
    layers.push(LayerSpec {
        id: "flatten".into(),
        kind: LayerKind::Flatten,
    });
    layers.push(LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear { out_features: 2 },
    });
    ModelSpec {
        name: "toy-xception".into(),
        input: (3, 64, 64),
        layers,
        injection_points: vec![
            "block1".into(),
            "block2".into(),
            "block3".into(),
            "post_conv3".into(),
        ],
    }
}

pub fn toy_vgg() -> ModelSpec {
    // (out_channels, followed_by_pool) per conv stage.
    let stages: [(usize, bool); 8] = [
        (8, true),
        (16, true),
        (32, false),
        (32, true),
        (64, false),
        (64, true),
        (64, false),
        (64, true),
    ];
    let mut layers = Vec::new();
    let mut idx = 0usize;
    let mut id = |idx: &mut usize| {
        let s = format!("layer{idx}");
        *idx += 1;
        s
    };
    for (out_channels, pooled) in stages {
        layers.push(conv(&id(&mut idx), out_channels, 1));
        layers.push(bn(&id(&mut idx)));
        layers.push(relu(&id(&mut idx)));
        if pooled {
            layers.push(pool(&id(&mut idx), 2, 2, 0));
        }
    }
    layers.push(LayerSpec {
        id: "flatten".into(),
        kind: LayerKind::Flatten,
    });
    layers.push(LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear { out_features: 2 },
    });
    ModelSpec {
        name: "toy-vgg".into(),
        input: (3, 64, 64),
        layers,
        injection_points: vec!["layer9".into(), "layer12".into(), "layer16".into()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, DataShape};
    use crate::tensor::Tensor;

    #[test]
    fn toy_xception_emits_two_logits_on_64px_input() {
        let model = build_model(toy_xception(), 7).unwrap();
        let logits = model.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
    }

    #[test]
    fn toy_xception_shape_propagation_oracle() {
        // Hand-propagated: 64 →(s2) 32, blocks pool 32→16→8→4.
        let model = build_model(toy_xception(), 0).unwrap();
        assert_eq!(model.shape_after("conv1").unwrap(), DataShape::Chw(8, 32, 32));
        assert_eq!(model.shape_after("relu2").unwrap(), DataShape::Chw(16, 32, 32));
        assert_eq!(model.shape_after("block1").unwrap(), DataShape::Chw(24, 16, 16));
        assert_eq!(model.shape_after("block2").unwrap(), DataShape::Chw(32, 8, 8));
        assert_eq!(model.shape_after("block3").unwrap(), DataShape::Chw(32, 4, 4));
        assert_eq!(model.shape_after("post_conv3").unwrap(), DataShape::Chw(32, 4, 4));
        assert_eq!(model.shape_after("fc").unwrap(), DataShape::Flat(2));
    }

    #[test]
    fn toy_vgg_mirrors_the_layer_table() {
        let spec = toy_vgg();
        let model = build_model(spec, 0).unwrap();
        assert_eq!(model.shape_after("layer9").unwrap(), DataShape::Chw(32, 16, 16));
        assert_eq!(model.shape_after("layer12").unwrap(), DataShape::Chw(32, 16, 16));
        assert_eq!(model.shape_after("layer16").unwrap(), DataShape::Chw(64, 8, 8));
        assert_eq!(model.shape_after("layer28").unwrap(), DataShape::Chw(64, 2, 2));
        let logits = model.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
    }

    #[test]
    fn injection_points_reference_real_layers() {
        for spec in [toy_xception(), toy_vgg()] {
            let points = spec.injection_points.clone();
            spec.validate().unwrap();
            for p in points {
                assert!(spec.layers.iter().any(|l| l.id == p));
            }
        }
    }
}
