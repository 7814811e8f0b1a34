//! Parameter and multiply-accumulate cost model.
//!
//! Counting conventions: a conv contributes `k^2 * (C_in/groups) * C_out *
//! H_out * W_out` MACs and `k^2 * (C_in/groups) * C_out (+ C_out bias)`
//! parameters; a linear layer contributes `f_in * f_out` MACs. Norms,
//! activations, pooling and upsampling count zero MACs. Batch size is one.

use serde::Serialize;

use crate::arch::{LayerDesc, LayerOp, ModelGraph, Region};
use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub region: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
    pub out_size: [usize; 2],
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionCost {
    pub region: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub variant: String,
    pub protocol: String,
    pub parts: String,
    pub input_size: [usize; 2],
    pub layers: Vec<LayerCost>,
    pub regions: Vec<RegionCost>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// Parameters of one layer, independent of input size.
pub fn layer_params(op: &LayerOp) -> u64 {
    match op {
        LayerOp::Conv { kernel, groups, c_in, c_out, bias, .. } => {
            let w = (kernel * kernel) as u64 * (c_in / groups) as u64 * *c_out as u64;
            w + if *bias { *c_out as u64 } else { 0 }
        }
        LayerOp::BatchNorm { channels } => 2 * *channels as u64,
        LayerOp::Linear { f_in, f_out, bias } => {
            (*f_in as u64) * (*f_out as u64) + if *bias { *f_out as u64 } else { 0 }
        }
        LayerOp::QueryParam { branches, dim } => (*branches as u64) * (*dim as u64),
        LayerOp::GateMatVec { .. } | LayerOp::MaxPool { .. } | LayerOp::Upsample => 0,
    }
}

/// MACs of one layer given the layer's output spatial size.
pub fn layer_macs(op: &LayerOp, out_h: usize, out_w: usize) -> u64 {
    match op {
        LayerOp::Conv { kernel, groups, c_in, c_out, .. } => {
            (kernel * kernel) as u64
                * (c_in / groups) as u64
                * *c_out as u64
                * (out_h * out_w) as u64
        }
        LayerOp::Linear { f_in, f_out, .. } => (*f_in as u64) * (*f_out as u64),
        LayerOp::GateMatVec { branches, dim } => (*branches as u64) * (*dim as u64),
        LayerOp::BatchNorm { .. }
        | LayerOp::QueryParam { .. }
        | LayerOp::MaxPool { .. }
        | LayerOp::Upsample => 0,
    }
}

fn kind_name(op: &LayerOp) -> &'static str {
    match op {
        LayerOp::Conv { groups, c_in, c_out, kernel, .. } => {
            if *groups == *c_in && *groups == *c_out && *groups > 1 {
                "conv.dw"
            } else if *kernel == 1 {
                "conv.pw"
            } else {
                "conv"
            }
        }
        LayerOp::BatchNorm { .. } => "bn",
        LayerOp::Linear { .. } => "linear",
        LayerOp::GateMatVec { .. } => "gate",
        LayerOp::QueryParam { .. } => "query",
        LayerOp::MaxPool { .. } => "maxpool",
        LayerOp::Upsample => "upsample",
    }
}

/// Cost of a pre-described layer list at the given input size.
pub fn cost_of_layers(layers: &[LayerDesc], input: (usize, usize)) -> Result<Vec<LayerCost>> {
    let (h, w) = input;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::InvalidArgument {
            op: "count_params_macs",
            detail: format!("input size must be divisible by 32, got {h}x{w}"),
        });
    }
    Ok(layers
        .iter()
        .map(|l| {
            let (oh, ow) = (h / l.out_scale, w / l.out_scale);
            LayerCost {
                name: l.name.clone(),
                region: l.region.label(),
                kind: kind_name(&l.op).to_string(),
                params: layer_params(&l.op),
                macs: layer_macs(&l.op, oh, ow),
                out_size: [oh, ow],
            }
        })
        .collect())
}

/// Exact learnable-parameter and MAC counts for a model at an input size.
pub fn count_params_macs<T: Element>(
    model: &ModelGraph<T>,
    input: (usize, usize),
) -> Result<CostReport> {
    let descs = model.layers();
    let layers = cost_of_layers(&descs, input)?;

    let mut regions: Vec<RegionCost> = Vec::new();
    let mut order: Vec<Region> = Vec::new();
    for (l, d) in layers.iter().zip(&descs) {
        let region = d.region;
        if !order.contains(&region) {
            order.push(region);
            regions.push(RegionCost { region: region.label(), params: 0, macs: 0 });
        }
        let idx = order.iter().position(|r| *r == region).unwrap();
        regions[idx].params += l.params;
        regions[idx].macs += l.macs;
    }

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        variant: model.variant.name.clone(),
        protocol: model.protocol.to_string(),
        parts: model.parts.name().to_string(),
        input_size: [input.0, input.1],
        layers,
        regions,
        total_params,
        total_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_cost_closed_forms() {
        // 3x3, 16 -> 32 channels, 10x10 output, with bias.
        let op = LayerOp::Conv { kernel: 3, stride: 1, groups: 1, c_in: 16, c_out: 32, bias: true };
        assert_eq!(layer_macs(&op, 10, 10), 460_800);
        assert_eq!(layer_params(&op), 4_640);

        // Depthwise 5x5 on 64 channels, 20x20 output.
        let dw = LayerOp::Conv { kernel: 5, stride: 2, groups: 64, c_in: 64, c_out: 64, bias: false };
        assert_eq!(layer_macs(&dw, 20, 20), 640_000);
        assert_eq!(layer_params(&dw), 1_600);
    }

    #[test]
    fn linear_and_bn_costs() {
        let lin = LayerOp::Linear { f_in: 48, f_out: 16, bias: true };
        assert_eq!(layer_macs(&lin, 1, 1), 768);
        assert_eq!(layer_params(&lin), 784);
        let bn = LayerOp::BatchNorm { channels: 32 };
        assert_eq!(layer_macs(&bn, 10, 10), 0);
        assert_eq!(layer_params(&bn), 64);
    }
}
