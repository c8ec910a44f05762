//! Layer stack with a flat, stable parameter ordering used by the
//! optimizer, serializer, and compression stages alike.

use crate::error::{Error, Result};
use crate::layers::{Conv3dSpec, Layer, LayerCache, LayerGrads, Mode};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    FcWeight,
    Bias,
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub class_count: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, class_count: usize) -> Self {
        Self { layers, class_count }
    }

    /// Verify adjacent layers compose for the given input shape and return
    /// the shape after every layer.
    pub fn shape_chain(&self, input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = input_shape.to_vec();
        for layer in &self.layers {
            cur = layer.infer_shape(&cur)?;
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for layer in &self.layers {
            let (next, cache) = layer.forward(&cur, mode, rng)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Backward through the whole stack; returns the gradient wrt the input
    /// and parameter gradients flattened in `params()` order.
    pub fn backward(&self, grad_out: &Tensor, caches: &[LayerCache]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut grad = grad_out.clone();
        let mut per_layer = vec![LayerGrads::None; self.layers.len()];
        for idx in (0..self.layers.len()).rev() {
            let (next, grads) = self.layers[idx].backward(&grad, &caches[idx])?;
            per_layer[idx] = grads;
            grad = next;
        }
        let mut flat = Vec::new();
        for grads in &per_layer {
            flatten_grads(grads, &mut flat);
        }
        Ok((grad, flat))
    }

    /// All parameter tensors in a fixed depth-first order (weight before
    /// bias within a layer).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            collect_params(layer, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            collect_params_mut(layer, &mut out);
        }
        out
    }

    pub fn param_meta(&self) -> Vec<ParamMeta> {
        let mut out = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            collect_meta(layer, &format!("layer{idx}"), &mut out);
        }
        out
    }
}

fn collect_params<'a>(layer: &'a Layer, out: &mut Vec<&'a Tensor>) {
    match layer {
        Layer::Conv3d { weight, bias, .. } | Layer::FullyConnected { weight, bias } => {
            out.push(weight);
            out.push(bias);
        }
        Layer::Residual { inner } => {
            for l in inner {
                collect_params(l, out);
            }
        }
        _ => {}
    }
}

fn collect_params_mut<'a>(layer: &'a mut Layer, out: &mut Vec<&'a mut Tensor>) {
    match layer {
        Layer::Conv3d { weight, bias, .. } | Layer::FullyConnected { weight, bias } => {
            out.push(weight);
            out.push(bias);
        }
        Layer::Residual { inner } => {
            for l in inner {
                collect_params_mut(l, out);
            }
        }
        _ => {}
    }
}

fn collect_meta(layer: &Layer, prefix: &str, out: &mut Vec<ParamMeta>) {
    match layer {
        Layer::Conv3d { weight, bias, .. } => {
            out.push(ParamMeta {
                name: format!("{prefix}.weight"),
                kind: ParamKind::ConvWeight,
                shape: weight.shape().to_vec(),
            });
            out.push(ParamMeta {
                name: format!("{prefix}.bias"),
                kind: ParamKind::Bias,
                shape: bias.shape().to_vec(),
            });
        }
        Layer::FullyConnected { weight, bias } => {
            out.push(ParamMeta {
                name: format!("{prefix}.weight"),
                kind: ParamKind::FcWeight,
                shape: weight.shape().to_vec(),
            });
            out.push(ParamMeta {
                name: format!("{prefix}.bias"),
                kind: ParamKind::Bias,
                shape: bias.shape().to_vec(),
            });
        }
        Layer::Residual { inner } => {
            for (idx, l) in inner.iter().enumerate() {
                collect_meta(l, &format!("{prefix}.res{idx}"), out);
            }
        }
        _ => {}
    }
}

fn flatten_grads(grads: &LayerGrads, out: &mut Vec<Tensor>) {
    match grads {
        LayerGrads::WeightBias { weight, bias } => {
            out.push(weight.clone());
            out.push(bias.clone());
        }
        LayerGrads::Residual { inner } => {
            for g in inner {
                flatten_grads(g, out);
            }
        }
        LayerGrads::None => {}
    }
}

/// The reference desk-scale network: four 3x3x3 conv layers
/// (8 -> 16 -> 32 -> 32 channels, temporal/spatial stride 2 on layers 2
/// and 4), global average pooling, dropout, and one fully-connected
/// classifier. An optional residual block can wrap the third conv.
pub fn reference_network(
    in_channels: usize,
    class_count: usize,
    dropout: f64,
    residual: bool,
    rng: &mut ChaCha8Rng,
) -> Network {
    let conv = |in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng| {
        let spec = Conv3dSpec {
            in_ch,
            out_ch,
            kernel: (3, 3, 3),
            stride: (stride, stride, stride),
            pad: (1, 1, 1),
        };
        let fan_in = (in_ch * 27) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Layer::Conv3d {
            spec,
            weight: Tensor::uniform(&spec.weight_shape(), bound, rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    };

    let mut layers = vec![
        conv(in_channels, 8, 1, rng),
        Layer::Relu,
        conv(8, 16, 2, rng),
        Layer::Relu,
    ];
    if residual {
        layers.push(Layer::Residual {
            inner: vec![conv(16, 16, 1, rng), Layer::Relu],
        });
    }
    layers.extend([conv(16, 32, 1, rng), Layer::Relu, conv(32, 32, 2, rng), Layer::Relu]);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dropout { ratio: dropout });

    let fc_bound = (6.0 / 32.0f64).sqrt();
    layers.push(Layer::FullyConnected {
        weight: Tensor::uniform(&[class_count, 32], fc_bound, rng),
        bias: Tensor::zeros(&[class_count]),
    });
    Network::new(layers, class_count)
}

/// Validation error for a network whose layer shapes do not compose.
pub fn validate_network(net: &Network, input_shape: &[usize]) -> Result<()> {
    let shapes = net.shape_chain(input_shape)?;
    match shapes.last() {
        Some(last) if last == &[net.class_count] => Ok(()),
        Some(last) => Err(Error::ShapeMismatch {
            context: "network output vs class count",
            expected: vec![net.class_count],
            got: last.clone(),
        }),
        None => Err(Error::ShapeMismatch {
            context: "empty network",
            expected: vec![net.class_count],
            got: vec![],
        }),
    }
}
