//! Shared test oracles: a straight-line reimplementation of the multi-scale
//! block wired from raw tensor primitives, and instrumented operation
//! counters. These deliberately avoid the library's block/cost code paths.

#![allow(dead_code)]

use msnet::blocks::{BranchOperator, GlobalQuery, GqlProjection, MsBlock};
use msnet::nn::{ConvBnAct, Mode};
use msnet::rng::Rng;
use msnet::tensor::{batch_norm_eval, batch_norm_train, concat_channels, conv2d, linear, Tensor};

/// Conv + batch-norm + SiLU, spelled out with the raw primitives.
pub fn unit_forward(unit: &ConvBnAct<f64>, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
    let c = &unit.conv;
    let y = conv2d(x, &c.weight, c.bias.as_ref(), c.stride, c.padding, c.groups).unwrap();
    let y = match mode {
        Mode::Train => batch_norm_train(&y, &unit.bn.gamma, &unit.bn.beta, unit.bn.eps).unwrap().0,
        _ => {
            let rm = unit.bn.running_mean.borrow().clone();
            let rv = unit.bn.running_var.borrow().clone();
            batch_norm_eval(&y, &unit.bn.gamma, &unit.bn.beta, &rm, &rv, unit.bn.eps).unwrap()
        }
    };
    y.silu()
}

/// The hierarchical block, re-derived from its definition: entry transform,
/// split into N groups, gate from the pooled pre-split feature, chain each
/// group through its operator with the previous branch output added (inside
/// the bottleneck for IBM, after the expansion for SIBM, which starts its
/// chain at the second group), scale by the gates, concatenate, fuse.
pub fn straight_line_block(
    block: &MsBlock<f64>,
    query: Option<&GlobalQuery<f64>>,
    z: &Tensor<f64>,
    mode: Mode,
) -> Tensor<f64> {
    let n = block.cfg.branches;
    let x = unit_forward(&block.entry, z, mode);

    let gates = match (&block.gql, query) {
        (Some(proj), Some(q)) => Some(straight_line_gates(proj, q, &x)),
        _ => None,
    };

    let groups = x.split_channels(&vec![block.cfg.width; n]).unwrap();
    let mut branches: Vec<Tensor<f64>> = vec![groups[0].clone()];
    for (i, op) in block.operators.iter().enumerate() {
        let group = &groups[i + 1];
        let prev = &branches[i];
        let out = match op {
            BranchOperator::Identity => group.add(prev).unwrap(),
            BranchOperator::Ibm { expand, dw, project } => {
                let fused = group.add(prev).unwrap();
                unit_forward(
                    project,
                    &unit_forward(dw, &unit_forward(expand, &fused, mode), mode),
                    mode,
                )
            }
            BranchOperator::Sibm { expand, dw } => {
                let expanded = unit_forward(expand, group, mode);
                let fused = if i == 0 { expanded } else { expanded.add(prev).unwrap() };
                unit_forward(dw, &fused, mode)
            }
        };
        branches.push(out);
    }

    let gated: Vec<Tensor<f64>> = match &gates {
        Some(g) => branches.iter().enumerate().map(|(i, b)| b.gate_scale(g, i).unwrap()).collect(),
        None => branches,
    };
    unit_forward(&block.exit, &concat_channels(&gated).unwrap(), mode)
}

pub fn straight_line_gates(
    proj: &GqlProjection<f64>,
    query: &GlobalQuery<f64>,
    x: &Tensor<f64>,
) -> Tensor<f64> {
    let pooled = x.global_avg_pool().unwrap();
    let key = linear(&pooled, &proj.linear.weight, proj.linear.bias.as_ref()).unwrap();
    linear(&key, &query.query, None).unwrap().sigmoid()
}

/// Shift running statistics off their initialization so eval-mode
/// comparisons exercise them.
pub fn randomize_running_stats(block: &mut MsBlock<f64>, rng: &mut Rng) {
    let touch = |unit: &ConvBnAct<f64>, rng: &mut Rng| {
        let mut rm = unit.bn.running_mean.borrow_mut();
        let mut rv = unit.bn.running_var.borrow_mut();
        for v in rm.iter_mut() {
            *v = rng.normal() * 0.3;
        }
        for v in rv.iter_mut() {
            *v = 0.5 + rng.uniform();
        }
    };
    touch(&block.entry, rng);
    for op in &block.operators {
        match op {
            BranchOperator::Identity => {}
            BranchOperator::Ibm { expand, dw, project } => {
                touch(expand, rng);
                touch(dw, rng);
                touch(project, rng);
            }
            BranchOperator::Sibm { expand, dw } => {
                touch(expand, rng);
                touch(dw, rng);
            }
        }
    }
    touch(&block.exit, rng);
}

/// Count every multiply of a naive convolution over an explicitly
/// zero-padded input (the padded positions are real multiplies).
#[allow(clippy::too_many_arguments)]
pub fn instrumented_conv_macs(
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) -> u64 {
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let ho = (hp - k) / stride + 1;
    let wo = (wp - k) / stride + 1;
    let cpg = c_in / groups;
    let opg = c_out / groups;
    let mut count = 0u64;
    for _b in 0..b {
        for _g in 0..groups {
            for _co in 0..opg {
                for _oy in 0..ho {
                    for _ox in 0..wo {
                        for _cig in 0..cpg {
                            for _ky in 0..k {
                                for _kx in 0..k {
                                    count += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    count
}
