//! Forward and backward math for every layer of the 3D CNN.
//!
//! Convolutions run through an im2col gather plus a dense matmul; backward
//! passes are the exact analytic derivatives of the forward maps.

use crate::error::{Error, Result};
use crate::linalg::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    /// (kd, kh, kw)
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub pad: (usize, usize, usize),
}

impl Conv3dSpec {
    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_ch,
            self.in_ch,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        ]
    }

    /// Output spatial extents for an input of shape [in_ch, d, h, w].
    pub fn out_shape(&self, input_shape: &[usize]) -> Result<[usize; 4]> {
        if input_shape.len() != 4 || input_shape[0] != self.in_ch {
            return Err(Error::ShapeMismatch {
                context: "conv3d input channels vs kernel in-channels",
                expected: vec![
                    self.in_ch,
                    self.kernel.0,
                    self.kernel.1,
                    self.kernel.2,
                ],
                got: input_shape.to_vec(),
            });
        }
        let ext = |len: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = len + 2 * p;
            if padded < k || s == 0 {
                return Err(Error::ShapeMismatch {
                    context: "conv3d kernel exceeds padded input",
                    expected: vec![k],
                    got: vec![padded],
                });
            }
            Ok((padded - k) / s + 1)
        };
        Ok([
            self.out_ch,
            ext(input_shape[1], self.kernel.0, self.stride.0, self.pad.0)?,
            ext(input_shape[2], self.kernel.1, self.stride.1, self.pad.1)?,
            ext(input_shape[3], self.kernel.2, self.stride.2, self.pad.2)?,
        ])
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv3d {
        spec: Conv3dSpec,
        weight: Tensor,
        bias: Tensor,
    },
    FullyConnected {
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    GlobalAvgPool,
    Dropout {
        ratio: f64,
    },
    /// y = x + g(x) for an inner chain g with matching output shape.
    Residual {
        inner: Vec<Layer>,
    },
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv3d { input: Tensor },
    Fc { input: Tensor },
    Relu { input: Tensor },
    Gap { in_shape: Vec<usize> },
    Dropout { mask: Option<Vec<f64>> },
    Residual { inner: Vec<LayerCache> },
}

/// Parameter gradients, mirroring the layer tree.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    WeightBias { weight: Tensor, bias: Tensor },
    Residual { inner: Vec<LayerGrads> },
    None,
}

fn im2col(
    input: &[f64],
    in_shape: [usize; 4],
    spec: &Conv3dSpec,
    out: [usize; 4],
    cols: &mut [f64],
) {
    let [ic, d, h, w] = in_shape;
    let (kd, kh, kw) = spec.kernel;
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.pad;
    let spatial = out[1] * out[2] * out[3];
    let mut row = 0usize;
    for c in 0..ic {
        let plane = &input[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    let mut idx = 0usize;
                    for oz in 0..out[1] {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..out[2] {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            for ox in 0..out[3] {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                dst[idx] = if iz >= 0
                                    && (iz as usize) < d
                                    && iy >= 0
                                    && (iy as usize) < h
                                    && ix >= 0
                                    && (ix as usize) < w
                                {
                                    plane[(iz as usize * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im_acc(
    cols: &[f64],
    in_shape: [usize; 4],
    spec: &Conv3dSpec,
    out: [usize; 4],
    grad_in: &mut [f64],
) {
    let [ic, d, h, w] = in_shape;
    let (kd, kh, kw) = spec.kernel;
    let (sd, sh, sw) = spec.stride;
    let (pd, ph, pw) = spec.pad;
    let spatial = out[1] * out[2] * out[3];
    let mut row = 0usize;
    for c in 0..ic {
        let plane_base = c * d * h * w;
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    let mut idx = 0usize;
                    for oz in 0..out[1] {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..out[2] {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            for ox in 0..out[3] {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iz >= 0
                                    && (iz as usize) < d
                                    && iy >= 0
                                    && (iy as usize) < h
                                    && ix >= 0
                                    && (ix as usize) < w
                                {
                                    grad_in[plane_base
                                        + (iz as usize * h + iy as usize) * w
                                        + ix as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward(input: &Tensor, spec: &Conv3dSpec, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let out = spec.out_shape(input.shape())?;
    let in_shape = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let kvol = spec.in_ch * spec.kernel.0 * spec.kernel.1 * spec.kernel.2;
    let spatial = out[1] * out[2] * out[3];
    let mut cols = vec![0.0; kvol * spatial];
    im2col(input.data(), in_shape, spec, out, &mut cols);

    let mut data = vec![0.0; spec.out_ch * spatial];
    for (o, chunk) in data.chunks_mut(spatial).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    matmul_acc(weight.data(), &cols, &mut data, spec.out_ch, kvol, spatial);
    let result = Tensor::new(out.to_vec(), data)?;
    result.check_finite("conv3d_forward")?;
    Ok(result)
}

pub struct Conv3dGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv3d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    spec: &Conv3dSpec,
    weight: &Tensor,
) -> Result<Conv3dGrads> {
    let out = spec.out_shape(input.shape())?;
    if grad_out.shape() != out {
        return Err(Error::ShapeMismatch {
            context: "conv3d_backward grad_out",
            expected: out.to_vec(),
            got: grad_out.shape().to_vec(),
        });
    }
    let in_shape = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let kvol = spec.in_ch * spec.kernel.0 * spec.kernel.1 * spec.kernel.2;
    let spatial = out[1] * out[2] * out[3];

    let mut grad_bias = vec![0.0; spec.out_ch];
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb = grad_out.data()[o * spatial..(o + 1) * spatial].iter().sum();
    }

    let mut cols = vec![0.0; kvol * spatial];
    im2col(input.data(), in_shape, spec, out, &mut cols);

    let mut grad_weight = vec![0.0; spec.out_ch * kvol];
    matmul_abt_acc(grad_out.data(), &cols, &mut grad_weight, spec.out_ch, spatial, kvol);

    let mut grad_cols = vec![0.0; kvol * spatial];
    matmul_atb_acc(weight.data(), grad_out.data(), &mut grad_cols, spec.out_ch, kvol, spatial);
    let mut grad_in = vec![0.0; input.len()];
    col2im_acc(&grad_cols, in_shape, spec, out, &mut grad_in);

    Ok(Conv3dGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weight: Tensor::new(weight.shape().to_vec(), grad_weight)?,
        bias: Tensor::from_vec(grad_bias),
    })
}

pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != in_dim {
        return Err(Error::ShapeMismatch {
            context: "fully-connected inner dimension",
            expected: vec![in_dim],
            got: input.shape().to_vec(),
        });
    }
    let mut data = vec![0.0; out_dim];
    for o in 0..out_dim {
        let row = &weight.data()[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias.data()[o];
        for (&w, &x) in row.iter().zip(input.data().iter()) {
            acc += w * x;
        }
        data[o] = acc;
    }
    let result = Tensor::from_vec(data);
    result.check_finite("fc_forward")?;
    Ok(result)
}

pub struct FcGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn fc_backward(grad_out: &Tensor, input: &Tensor, weight: &Tensor) -> Result<FcGrads> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    if grad_out.len() != out_dim {
        return Err(Error::ShapeMismatch {
            context: "fc_backward grad_out",
            expected: vec![out_dim],
            got: grad_out.shape().to_vec(),
        });
    }
    let mut grad_w = vec![0.0; out_dim * in_dim];
    let mut grad_in = vec![0.0; in_dim];
    for o in 0..out_dim {
        let g = grad_out.data()[o];
        let w_row = &weight.data()[o * in_dim..(o + 1) * in_dim];
        let gw_row = &mut grad_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            gw_row[i] = g * input.data()[i];
            grad_in[i] += g * w_row[i];
        }
    }
    Ok(FcGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weight: Tensor::new(weight.shape().to_vec(), grad_w)?,
        bias: grad_out.clone(),
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Tensor {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data().iter())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Mean over every non-channel axis: [c, ...] -> [c].
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    if input.ndim() < 2 {
        return Err(Error::ShapeMismatch {
            context: "global_avg_pool needs [channels, ...]",
            expected: vec![2],
            got: input.shape().to_vec(),
        });
    }
    let channels = input.shape()[0];
    let rest: usize = input.shape()[1..].iter().product();
    let mut data = vec![0.0; channels];
    for (c, out) in data.iter_mut().enumerate() {
        let sum: f64 = input.data()[c * rest..(c + 1) * rest].iter().sum();
        *out = sum / rest as f64;
    }
    Ok(Tensor::from_vec(data))
}

pub fn global_avg_pool_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let channels = in_shape[0];
    let rest: usize = in_shape[1..].iter().product();
    let mut data = vec![0.0; channels * rest];
    for c in 0..channels {
        let g = grad_out.data()[c] / rest as f64;
        data[c * rest..(c + 1) * rest].fill(g);
    }
    Tensor::new(in_shape.to_vec(), data).expect("same shape")
}

/// Train mode zeroes each element with probability `ratio` and scales
/// survivors by 1/(1-ratio); eval mode is the identity.
pub fn dropout_forward(
    input: &Tensor,
    ratio: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Option<Vec<f64>>) {
    debug_assert!((0.0..1.0).contains(&ratio));
    if mode == Mode::Eval || ratio == 0.0 {
        return (input.clone(), None);
    }
    let keep_scale = 1.0 / (1.0 - ratio);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < ratio {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    let data = input
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&x, &m)| x * m)
        .collect();
    (
        Tensor::new(input.shape().to_vec(), data).expect("same shape"),
        Some(mask),
    )
}

pub fn dropout_backward(grad_out: &Tensor, mask: Option<&Vec<f64>>) -> Tensor {
    match mask {
        None => grad_out.clone(),
        Some(mask) => {
            let data = grad_out
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&g, &m)| g * m)
                .collect();
            Tensor::new(grad_out.shape().to_vec(), data).expect("same shape")
        }
    }
}

/// Numerically stabilized softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// grad wrt scores given grad wrt probabilities p = softmax(scores).
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs.iter()).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs.iter())
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// Cross-entropy of a one-hot label against softmax(scores).
/// Returns the loss and the gradient wrt the raw scores.
pub fn softmax_cross_entropy(scores: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = scores.len();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let max = scores.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &s in scores.data() {
        sum += (s - max).exp();
    }
    let log_z = max + sum.ln();
    let loss = log_z - scores.data()[label];
    let mut grad: Vec<f64> = scores
        .data()
        .iter()
        .map(|&s| (s - log_z).exp())
        .collect();
    grad[label] -= 1.0;
    let grad = Tensor::from_vec(grad);
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    grad.check_finite("softmax_cross_entropy grad")?;
    Ok((loss, grad))
}

impl Layer {
    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Conv3d { spec, weight, bias } => {
                let out = conv3d_forward(input, spec, weight, bias)?;
                Ok((out, LayerCache::Conv3d { input: input.clone() }))
            }
            Layer::FullyConnected { weight, bias } => {
                let out = fc_forward(input, weight, bias)?;
                Ok((out, LayerCache::Fc { input: input.clone() }))
            }
            Layer::Relu => Ok((relu_forward(input), LayerCache::Relu { input: input.clone() })),
            Layer::GlobalAvgPool => Ok((
                global_avg_pool_forward(input)?,
                LayerCache::Gap { in_shape: input.shape().to_vec() },
            )),
            Layer::Dropout { ratio } => {
                let (out, mask) = dropout_forward(input, *ratio, mode, rng);
                Ok((out, LayerCache::Dropout { mask }))
            }
            Layer::Residual { inner } => {
                let mut cur = input.clone();
                let mut caches = Vec::with_capacity(inner.len());
                for layer in inner {
                    let (next, cache) = layer.forward(&cur, mode, rng)?;
                    caches.push(cache);
                    cur = next;
                }
                if cur.shape() != input.shape() {
                    return Err(Error::ShapeMismatch {
                        context: "residual branch output",
                        expected: input.shape().to_vec(),
                        got: cur.shape().to_vec(),
                    });
                }
                cur.add_assign(input);
                Ok((cur, LayerCache::Residual { inner: caches }))
            }
        }
    }

    pub fn backward(&self, grad_out: &Tensor, cache: &LayerCache) -> Result<(Tensor, LayerGrads)> {
        match (self, cache) {
            (Layer::Conv3d { spec, weight, .. }, LayerCache::Conv3d { input }) => {
                let grads = conv3d_backward(grad_out, input, spec, weight)?;
                Ok((
                    grads.input,
                    LayerGrads::WeightBias { weight: grads.weight, bias: grads.bias },
                ))
            }
            (Layer::FullyConnected { weight, .. }, LayerCache::Fc { input }) => {
                let grads = fc_backward(grad_out, input, weight)?;
                Ok((
                    grads.input,
                    LayerGrads::WeightBias { weight: grads.weight, bias: grads.bias },
                ))
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                Ok((relu_backward(grad_out, input), LayerGrads::None))
            }
            (Layer::GlobalAvgPool, LayerCache::Gap { in_shape }) => {
                Ok((global_avg_pool_backward(grad_out, in_shape), LayerGrads::None))
            }
            (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                Ok((dropout_backward(grad_out, mask.as_ref()), LayerGrads::None))
            }
            (Layer::Residual { inner }, LayerCache::Residual { inner: caches }) => {
                let mut grad = grad_out.clone();
                let mut grads = vec![LayerGrads::None; inner.len()];
                for idx in (0..inner.len()).rev() {
                    let (next, g) = inner[idx].backward(&grad, &caches[idx])?;
                    grads[idx] = g;
                    grad = next;
                }
                grad.add_assign(grad_out);
                Ok((grad, LayerGrads::Residual { inner: grads }))
            }
            _ => Err(Error::ShapeMismatch {
                context: "layer/cache kind mismatch in backward",
                expected: vec![],
                got: vec![],
            }),
        }
    }

    /// Output shape for a declared input shape, without running the math.
    pub fn infer_shape(&self, input_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv3d { spec, .. } => Ok(spec.out_shape(input_shape)?.to_vec()),
            Layer::FullyConnected { weight, .. } => {
                let in_dim: usize = input_shape.iter().product();
                if in_dim != weight.shape()[1] {
                    return Err(Error::ShapeMismatch {
                        context: "fully-connected inner dimension",
                        expected: vec![weight.shape()[1]],
                        got: input_shape.to_vec(),
                    });
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Relu | Layer::Dropout { .. } => Ok(input_shape.to_vec()),
            Layer::GlobalAvgPool => {
                if input_shape.len() < 2 {
                    return Err(Error::ShapeMismatch {
                        context: "global_avg_pool needs [channels, ...]",
                        expected: vec![2],
                        got: input_shape.to_vec(),
                    });
                }
                Ok(vec![input_shape[0]])
            }
            Layer::Residual { inner } => {
                let mut cur = input_shape.to_vec();
                for layer in inner {
                    cur = layer.infer_shape(&cur)?;
                }
                if cur != input_shape {
                    return Err(Error::ShapeMismatch {
                        context: "residual branch output",
                        expected: input_shape.to_vec(),
                        got: cur,
                    });
                }
                Ok(cur)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn identity_conv() -> (Conv3dSpec, Tensor, Tensor) {
        let spec = Conv3dSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: (1, 1, 1),
            stride: (1, 1, 1),
            pad: (0, 0, 0),
        };
        (spec, Tensor::filled(&[1, 1, 1, 1, 1], 1.0), Tensor::from_vec(vec![0.0]))
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let (spec, w, b) = identity_conv();
        let input = Tensor::uniform(&[1, 3, 4, 5], 2.0, &mut rng());
        let out = conv3d_forward(&input, &spec, &w, &b).unwrap();
        assert_eq!(out.shape(), input.shape());
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_all_ones_sums_receptive_field() {
        let spec = Conv3dSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: (2, 2, 2),
            stride: (1, 1, 1),
            pad: (0, 0, 0),
        };
        let w = Tensor::filled(&[1, 1, 2, 2, 2], 1.0);
        let b = Tensor::from_vec(vec![0.0]);
        let input = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let out = conv3d_forward(&input, &spec, &w, &b).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[8.0]);
    }

    #[test]
    fn conv_3x3x3_pad1_preserves_8x112x112() {
        let spec = Conv3dSpec {
            in_ch: 1,
            out_ch: 1,
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            pad: (1, 1, 1),
        };
        let w = Tensor::uniform(&[1, 1, 3, 3, 3], 0.2, &mut rng());
        let b = Tensor::from_vec(vec![0.1]);
        let input = Tensor::uniform(&[1, 8, 112, 112], 1.0, &mut rng());
        let out = conv3d_forward(&input, &spec, &w, &b).unwrap();
        assert_eq!(out.shape(), &[1, 8, 112, 112]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let spec = Conv3dSpec {
            in_ch: 2,
            out_ch: 1,
            kernel: (1, 1, 1),
            stride: (1, 1, 1),
            pad: (0, 0, 0),
        };
        let w = Tensor::filled(&[1, 2, 1, 1, 1], 1.0);
        let b = Tensor::from_vec(vec![0.0]);
        let input = Tensor::filled(&[1, 2, 2, 2], 1.0);
        let err = conv3d_forward(&input, &spec, &w, &b).unwrap_err();
        match err {
            Error::ShapeMismatch { expected, got, .. } => {
                assert_eq!(expected[0], 2);
                assert_eq!(got, vec![1, 2, 2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn conv_identity_backward_passes_grad_through() {
        let (spec, w, b) = identity_conv();
        let input = Tensor::uniform(&[1, 2, 3, 3], 1.0, &mut rng());
        let _ = conv3d_forward(&input, &spec, &w, &b).unwrap();
        let grad_out = Tensor::uniform(&[1, 2, 3, 3], 1.0, &mut rng());
        let grads = conv3d_backward(&grad_out, &input, &spec, &w).unwrap();
        assert_eq!(grads.input.data(), grad_out.data());
    }

    #[test]
    fn conv_zero_grad_out_gives_zero_grads() {
        let spec = Conv3dSpec {
            in_ch: 2,
            out_ch: 3,
            kernel: (2, 2, 2),
            stride: (1, 1, 1),
            pad: (1, 1, 1),
        };
        let w = Tensor::uniform(&spec.weight_shape(), 0.5, &mut rng());
        let input = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut rng());
        let out_shape = spec.out_shape(input.shape()).unwrap();
        let grad_out = Tensor::zeros(&out_shape);
        let grads = conv3d_backward(&grad_out, &input, &spec, &w).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    // Finite-difference oracle over a scalar projection of the conv output.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = Conv3dSpec {
            in_ch: 2,
            out_ch: 3,
            kernel: (2, 3, 3),
            stride: (1, 2, 1),
            pad: (1, 1, 0),
        };
        let mut r = rng();
        let weight = Tensor::uniform(&spec.weight_shape(), 0.6, &mut r);
        let bias = Tensor::uniform(&[3], 0.4, &mut r);
        let input = Tensor::uniform(&[2, 3, 5, 4], 1.0, &mut r);
        let out_shape = spec.out_shape(input.shape()).unwrap();
        let proj = Tensor::uniform(&out_shape, 1.0, &mut r);

        let grad_out = proj.clone();
        let analytic = conv3d_backward(&grad_out, &input, &spec, &weight).unwrap();

        let loss_wrt_input = |x: &[f64]| {
            let t = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let out = conv3d_forward(&t, &spec, &weight, &bias).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd_in = central_diff(&loss_wrt_input, input.data(), 1e-5);
        assert!(rel_err(analytic.input.data(), &fd_in) < 1e-6);

        let loss_wrt_weight = |x: &[f64]| {
            let t = Tensor::new(weight.shape().to_vec(), x.to_vec()).unwrap();
            let out = conv3d_forward(&input, &spec, &t, &bias).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd_w = central_diff(&loss_wrt_weight, weight.data(), 1e-5);
        assert!(rel_err(analytic.weight.data(), &fd_w) < 1e-6);

        let loss_wrt_bias = |x: &[f64]| {
            let t = Tensor::from_vec(x.to_vec());
            let out = conv3d_forward(&input, &spec, &weight, &t).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd_b = central_diff(&loss_wrt_bias, bias.data(), 1e-5);
        assert!(rel_err(analytic.bias.data(), &fd_b) < 1e-6);
    }

    #[test]
    fn fc_identity_passes_input_through() {
        let weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.0, 0.0]);
        let input = Tensor::from_vec(vec![0.7, -1.3]);
        let out = fc_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn fc_hand_example() {
        let weight = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bias = Tensor::from_vec(vec![0.0, 0.0]);
        let input = Tensor::from_vec(vec![1.0, 1.0]);
        let out = fc_forward(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn fc_rejects_inner_dim_mismatch() {
        let weight = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let bias = Tensor::from_vec(vec![0.0, 0.0]);
        let input = Tensor::from_vec(vec![1.0, 1.0]);
        assert!(matches!(
            fc_forward(&input, &weight, &bias),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fc_backward_matches_finite_differences() {
        let mut r = rng();
        let weight = Tensor::uniform(&[3, 4], 0.8, &mut r);
        let bias = Tensor::uniform(&[3], 0.5, &mut r);
        let input = Tensor::uniform(&[4], 1.0, &mut r);
        let proj = Tensor::uniform(&[3], 1.0, &mut r);

        let analytic = fc_backward(&proj, &input, &weight).unwrap();
        let loss_wrt_input = |x: &[f64]| {
            let t = Tensor::from_vec(x.to_vec());
            let out = fc_forward(&t, &weight, &bias).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd_in = central_diff(&loss_wrt_input, input.data(), 1e-5);
        assert!(rel_err(analytic.input.data(), &fd_in) < 1e-6);

        let loss_wrt_weight = |x: &[f64]| {
            let t = Tensor::new(vec![3, 4], x.to_vec()).unwrap();
            let out = fc_forward(&input, &t, &bias).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd_w = central_diff(&loss_wrt_weight, weight.data(), 1e-5);
        assert!(rel_err(analytic.weight.data(), &fd_w) < 1e-6);
    }

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&input).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gap_of_constant_input_is_the_constant() {
        let input = Tensor::filled(&[1, 2, 2, 2], 3.0);
        let out = global_avg_pool_forward(&input).unwrap();
        assert_eq!(out.data(), &[3.0]);
    }

    #[test]
    fn gap_backward_matches_finite_differences() {
        let mut r = rng();
        let input = Tensor::uniform(&[3, 2, 2, 2], 1.0, &mut r);
        let proj = Tensor::uniform(&[3], 1.0, &mut r);
        let analytic = global_avg_pool_backward(&proj, input.shape());
        let loss = |x: &[f64]| {
            let t = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let out = global_avg_pool_forward(&t).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd = central_diff(&loss, input.data(), 1e-5);
        assert!(rel_err(analytic.data(), &fd) < 1e-7);
    }

    #[test]
    fn dropout_eval_is_identity_for_any_ratio() {
        let input = Tensor::uniform(&[64], 1.0, &mut rng());
        for ratio in [0.0, 0.3, 0.8, 0.99] {
            let (out, mask) = dropout_forward(&input, ratio, Mode::Eval, &mut rng());
            assert_eq!(out.data(), input.data());
            assert!(mask.is_none());
        }
    }

    #[test]
    fn dropout_train_zeroes_and_rescales() {
        let input = Tensor::filled(&[10_000], 1.0);
        let ratio = 0.8;
        let (out, mask) = dropout_forward(&input, ratio, Mode::Train, &mut rng());
        let mask = mask.unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        // seeded draw; the zero fraction should sit near the ratio
        assert!((zeros as f64 / 10_000.0 - ratio).abs() < 0.02);
        for (&v, &m) in out.data().iter().zip(mask.iter()) {
            assert!(v == 0.0 || (v - 5.0).abs() < 1e-12);
            assert!(m == 0.0 || (m - 5.0).abs() < 1e-12);
        }
        // same seed, same mask
        let (out2, _) = dropout_forward(&input, ratio, Mode::Train, &mut rng());
        assert_eq!(out.data(), out2.data());
    }

    #[test]
    fn dropout_backward_with_fixed_mask_matches_finite_differences() {
        let mut r = rng();
        let input = Tensor::uniform(&[32], 1.0, &mut r);
        let proj = Tensor::uniform(&[32], 1.0, &mut r);
        let (_, mask) = dropout_forward(&input, 0.5, Mode::Train, &mut rng());
        let mask = mask.unwrap();
        let analytic = dropout_backward(&proj, Some(&mask));
        let loss = |x: &[f64]| -> f64 {
            x.iter()
                .zip(mask.iter())
                .zip(proj.data())
                .map(|((&v, &m), &p)| v * m * p)
                .sum()
        };
        let fd = central_diff(&loss, input.data(), 1e-5);
        assert!(rel_err(analytic.data(), &fd) < 1e-8);
    }

    #[test]
    fn softmax_ce_uniform_scores_gives_ln_n() {
        let scores = Tensor::from_vec(vec![0.0; 4]);
        let (loss, _) = softmax_cross_entropy(&scores, 2).unwrap();
        assert!((loss - 1.3862943611).abs() < 1e-9);
    }

    #[test]
    fn softmax_ce_confident_correct_score() {
        let scores = Tensor::from_vec(vec![10.0, 0.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&scores, 0).unwrap();
        // direct evaluation: ln(1 + 2 e^-10)
        let expected = (1.0 + 2.0 * (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 9.1e-5).abs() < 1e-6);
    }

    #[test]
    fn softmax_ce_rejects_bad_label() {
        let scores = Tensor::from_vec(vec![0.0; 3]);
        assert!(matches!(
            softmax_cross_entropy(&scores, 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn softmax_ce_grad_matches_finite_differences() {
        let scores = Tensor::from_vec(vec![0.4, -1.2, 2.0, 0.1]);
        let (_, grad) = softmax_cross_entropy(&scores, 1).unwrap();
        let loss = |x: &[f64]| {
            let t = Tensor::from_vec(x.to_vec());
            softmax_cross_entropy(&t, 1).unwrap().0
        };
        let fd = central_diff(&loss, scores.data(), 1e-5);
        assert!(rel_err(grad.data(), &fd) < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = rng();
        for _ in 0..50 {
            let scores = Tensor::uniform(&[7], 40.0, &mut r);
            let p = softmax(scores.data());
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn residual_layer_adds_branch_output() {
        let (spec, w, b) = identity_conv();
        let residual = Layer::Residual {
            inner: vec![Layer::Conv3d { spec, weight: w, bias: b }],
        };
        let input = Tensor::uniform(&[1, 2, 2, 2], 1.0, &mut rng());
        let (out, _) = residual.forward(&input, Mode::Eval, &mut rng()).unwrap();
        let doubled: Vec<f64> = input.data().iter().map(|v| v * 2.0).collect();
        assert_eq!(out.data(), &doubled[..]);
    }

    #[test]
    fn residual_backward_matches_finite_differences() {
        let spec = Conv3dSpec {
            in_ch: 2,
            out_ch: 2,
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            pad: (1, 1, 1),
        };
        let mut r = rng();
        let weight = Tensor::uniform(&spec.weight_shape(), 0.3, &mut r);
        let bias = Tensor::uniform(&[2], 0.2, &mut r);
        let input = Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut r);
        let proj = Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut r);

        let layer = Layer::Residual {
            inner: vec![Layer::Conv3d { spec, weight: weight.clone(), bias: bias.clone() }],
        };
        let (_, cache) = layer.forward(&input, Mode::Eval, &mut rng()).unwrap();
        let (grad_in, grads) = layer.backward(&proj, &cache).unwrap();

        let loss = |x: &[f64]| {
            let t = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let (out, _) = layer.forward(&t, Mode::Eval, &mut rng()).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd = central_diff(&loss, input.data(), 1e-5);
        assert!(rel_err(grad_in.data(), &fd) < 1e-6);

        let LayerGrads::Residual { inner } = grads else {
            panic!("expected residual grads")
        };
        let LayerGrads::WeightBias { weight: gw, .. } = &inner[0] else {
            panic!("expected conv grads")
        };
        let loss_w = |x: &[f64]| {
            let l = Layer::Residual {
                inner: vec![Layer::Conv3d {
                    spec,
                    weight: Tensor::new(weight.shape().to_vec(), x.to_vec()).unwrap(),
                    bias: bias.clone(),
                }],
            };
            let (out, _) = l.forward(&input, Mode::Eval, &mut rng()).unwrap();
            out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
        };
        let fd_w = central_diff(&loss_w, weight.data(), 1e-5);
        assert!(rel_err(gw.data(), &fd_w) < 1e-6);
    }
}
