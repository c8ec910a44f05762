//! Forward-pass FLOP counting: multiply-add pairs times two, for conv3d
//! and fully-connected layers only.

use crate::error::Result;
use crate::layers::Layer;
use crate::network::Network;

fn layer_flops(layer: &Layer, input_shape: &[usize]) -> Result<(u64, Vec<usize>)> {
    let out_shape = layer.infer_shape(input_shape)?;
    let flops = match layer {
        Layer::Conv3d { spec, .. } => {
            let spatial: u64 = out_shape[1..].iter().product::<usize>() as u64;
            let macs_per_out = (spec.in_ch * spec.kernel.0 * spec.kernel.1 * spec.kernel.2) as u64;
            2 * spec.out_ch as u64 * spatial * macs_per_out
        }
        Layer::FullyConnected { weight, .. } => {
            2 * (weight.shape()[0] * weight.shape()[1]) as u64
        }
        Layer::Residual { inner } => {
            let mut total = 0u64;
            let mut cur = input_shape.to_vec();
            for l in inner {
                let (f, next) = layer_flops(l, &cur)?;
                total += f;
                cur = next;
            }
            total
        }
        _ => 0,
    };
    Ok((flops, out_shape))
}

/// Total forward FLOPs for one input of the given shape.
pub fn count_flops(net: &Network, input_shape: &[usize]) -> Result<u64> {
    let mut total = 0u64;
    let mut cur = input_shape.to_vec();
    for layer in &net.layers {
        let (f, next) = layer_flops(layer, &cur)?;
        total += f;
        cur = next;
    }
    Ok(total)
}
