//! Reverse-mode gradient propagation.
//!
//! [`backward`] builds a [`Tape`] — the recorded operations reachable from
//! the output, ordered so every operation appears after all producers of its
//! inputs — then walks it once in reverse, accumulating vector-Jacobian
//! products. Gradients for `requires_grad` leaves are returned in a
//! [`Gradients`] store keyed by tensor id; a leaf feeding several consumers
//! accumulates contributions by summation.

use std::collections::HashMap;

use super::ops::{shape4, sigmoid_scalar, valid_range, BackwardStep};
use super::{idx4, Element, Tensor};
use crate::error::{Error, Result};

/// Gradients produced by one backward pass, keyed by leaf tensor id.
pub struct Gradients<T: Element> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, tensor: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&tensor.id()).map(|v| v.as_slice())
    }

    pub fn contains(&self, tensor: &Tensor<T>) -> bool {
        self.grads.contains_key(&tensor.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Topologically ordered record of the operations reachable from one output.
pub struct Tape<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Tape<T> {
    /// Collect every gradient-tracking node reachable from `output`.
    /// Node ids increase monotonically at creation, so sorting by id yields
    /// a topological order: producers strictly before consumers.
    pub fn build(output: &Tensor<T>) -> Self {
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut stack = vec![output.clone()];
        while let Some(t) = stack.pop() {
            if !t.needs_grad() || seen.contains_key(&t.id()) {
                continue;
            }
            seen.insert(t.id(), ());
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Run reverse-mode differentiation from `output` with the given `seed`
/// adjoint (same shape as `output`). Returns gradients for every
/// `requires_grad` leaf that influences `output`.
pub fn backward<T: Element>(output: &Tensor<T>, seed: &Tensor<T>) -> Result<Gradients<T>> {
    if seed.shape() != output.shape() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            expected: format!("seed shape {:?}", output.shape()),
            got: format!("{:?}", seed.shape()),
        });
    }
    if !output.needs_grad() {
        return Err(Error::DetachedBackward);
    }

    let tape = Tape::build(output);
    let mut adjoints: HashMap<u64, Vec<T>> = HashMap::new();
    adjoints.insert(output.id(), seed.to_vec());
    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();

    // Reverse topological order: each node is visited exactly once, after
    // every consumer has contributed to its adjoint.
    for node in tape.nodes.iter().rev() {
        let adj = match adjoints.remove(&node.id()) {
            Some(a) => a,
            None => continue, // no path from the output through this node
        };
        if node.requires_grad() {
            accumulate(&mut grads, node.id(), &adj);
        }
        let step = match &node.inner.step {
            Some(s) => s,
            None => continue,
        };
        propagate(node, step, &adj, &mut adjoints);
    }

    Ok(Gradients { grads })
}

fn accumulate<T: Element>(map: &mut HashMap<u64, Vec<T>>, id: u64, contribution: &[T]) {
    match map.get_mut(&id) {
        Some(acc) => {
            for (a, &c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => {
            map.insert(id, contribution.to_vec());
        }
    }
}

fn add_to_parent<T: Element>(
    adjoints: &mut HashMap<u64, Vec<T>>,
    parent: &Tensor<T>,
    contribution: Vec<T>,
) {
    debug_assert_eq!(contribution.len(), parent.numel());
    match adjoints.get_mut(&parent.id()) {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => {
            adjoints.insert(parent.id(), contribution);
        }
    }
}

fn propagate<T: Element>(
    node: &Tensor<T>,
    step: &BackwardStep<T>,
    adj: &[T],
    adjoints: &mut HashMap<u64, Vec<T>>,
) {
    let parents = &node.inner.parents;
    match step {
        BackwardStep::Add => {
            for p in parents {
                if p.needs_grad() {
                    add_to_parent(adjoints, p, adj.to_vec());
                }
            }
        }
        BackwardStep::Sub => {
            if parents[0].needs_grad() {
                add_to_parent(adjoints, &parents[0], adj.to_vec());
            }
            if parents[1].needs_grad() {
                add_to_parent(adjoints, &parents[1], adj.iter().map(|&a| -a).collect());
            }
        }
        BackwardStep::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.needs_grad() {
                let g = adj.iter().zip(b.data()).map(|(&d, &bv)| d * bv).collect();
                add_to_parent(adjoints, a, g);
            }
            if b.needs_grad() {
                let g = adj.iter().zip(a.data()).map(|(&d, &av)| d * av).collect();
                add_to_parent(adjoints, b, g);
            }
        }
        BackwardStep::Scale { factor } => {
            if parents[0].needs_grad() {
                add_to_parent(adjoints, &parents[0], adj.iter().map(|&d| d * *factor).collect());
            }
        }
        BackwardStep::Silu => {
            let p = &parents[0];
            if p.needs_grad() {
                let g = adj
                    .iter()
                    .zip(p.data())
                    .map(|(&d, &x)| {
                        let s = sigmoid_scalar(x);
                        d * (s + x * s * (T::ONE - s))
                    })
                    .collect();
                add_to_parent(adjoints, p, g);
            }
        }
        BackwardStep::Sigmoid => {
            let p = &parents[0];
            if p.needs_grad() {
                let g = adj
                    .iter()
                    .zip(node.data())
                    .map(|(&d, &y)| d * y * (T::ONE - y))
                    .collect();
                add_to_parent(adjoints, p, g);
            }
        }
        BackwardStep::SumAll => {
            let p = &parents[0];
            if p.needs_grad() {
                add_to_parent(adjoints, p, vec![adj[0]; p.numel()]);
            }
        }
        BackwardStep::GlobalAvgPool => {
            let p = &parents[0];
            if p.needs_grad() {
                let (b, c, h, w) = shape4(p);
                let hw = h * w;
                let inv = T::ONE / T::from_f64(hw as f64);
                let mut g = vec![T::ZERO; p.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let d = adj[bi * c + ci] * inv;
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            g[base + i] = d;
                        }
                    }
                }
                add_to_parent(adjoints, p, g);
            }
        }
        BackwardStep::Conv2d { stride, padding, groups } => {
            conv2d_backward(node, adj, adjoints, *stride, *padding, *groups);
        }
        BackwardStep::Linear => {
            let x = &parents[0];
            let w = &parents[1];
            let (b, f_in) = (x.shape()[0], x.shape()[1]);
            let f_out = w.shape()[0];
            if x.needs_grad() {
                let wd = w.data();
                let mut g = vec![T::ZERO; b * f_in];
                for bi in 0..b {
                    for o in 0..f_out {
                        let d = adj[bi * f_out + o];
                        let wrow = o * f_in;
                        let xrow = bi * f_in;
                        for i in 0..f_in {
                            g[xrow + i] += d * wd[wrow + i];
                        }
                    }
                }
                add_to_parent(adjoints, x, g);
            }
            if w.needs_grad() {
                let xd = x.data();
                let mut g = vec![T::ZERO; f_out * f_in];
                for bi in 0..b {
                    for o in 0..f_out {
                        let d = adj[bi * f_out + o];
                        let wrow = o * f_in;
                        let xrow = bi * f_in;
                        for i in 0..f_in {
                            g[wrow + i] += d * xd[xrow + i];
                        }
                    }
                }
                add_to_parent(adjoints, w, g);
            }
            if parents.len() > 2 && parents[2].needs_grad() {
                let mut g = vec![T::ZERO; f_out];
                for bi in 0..b {
                    for o in 0..f_out {
                        g[o] += adj[bi * f_out + o];
                    }
                }
                add_to_parent(adjoints, &parents[2], g);
            }
        }
        BackwardStep::MaxPool2d { argmax } => {
            let p = &parents[0];
            if p.needs_grad() {
                let mut g = vec![T::ZERO; p.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src as usize] += adj[o];
                }
                add_to_parent(adjoints, p, g);
            }
        }
        BackwardStep::ConcatChannels { widths } => {
            let (b, c_total, h, w) = shape4(node);
            let hw = h * w;
            let mut offset = 0;
            for (part, &width) in parents.iter().zip(widths) {
                if part.needs_grad() {
                    let mut g = vec![T::ZERO; b * width * hw];
                    for bi in 0..b {
                        let src = (bi * c_total + offset) * hw;
                        let dst = bi * width * hw;
                        g[dst..dst + width * hw].copy_from_slice(&adj[src..src + width * hw]);
                    }
                    add_to_parent(adjoints, part, g);
                }
                offset += width;
            }
        }
        BackwardStep::SplitChannels { offset, width } => {
            let p = &parents[0];
            if p.needs_grad() {
                let (b, c, h, w) = shape4(p);
                let hw = h * w;
                let mut g = vec![T::ZERO; p.numel()];
                for bi in 0..b {
                    let dst = (bi * c + offset) * hw;
                    let src = bi * width * hw;
                    g[dst..dst + width * hw].copy_from_slice(&adj[src..src + width * hw]);
                }
                add_to_parent(adjoints, p, g);
            }
        }
        BackwardStep::UpsampleNearest2x => {
            let p = &parents[0];
            if p.needs_grad() {
                let (b, c, h, w) = shape4(p);
                let wo = 2 * w;
                let out_shape = [b, c, 2 * h, wo];
                let mut g = vec![T::ZERO; p.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let o = idx4(&out_shape, bi, ci, 2 * y, 2 * x);
                                g[idx4(p.shape(), bi, ci, y, x)] =
                                    adj[o] + adj[o + 1] + adj[o + wo] + adj[o + wo + 1];
                            }
                        }
                    }
                }
                add_to_parent(adjoints, p, g);
            }
        }
        BackwardStep::GateScale { col } => {
            let x = &parents[0];
            let gates = &parents[1];
            let (b, c, h, w) = shape4(x);
            let n = gates.shape()[1];
            let chw = c * h * w;
            if x.needs_grad() {
                let gd = gates.data();
                let mut g = vec![T::ZERO; x.numel()];
                for bi in 0..b {
                    let gv = gd[bi * n + col];
                    let base = bi * chw;
                    for i in 0..chw {
                        g[base + i] = adj[base + i] * gv;
                    }
                }
                add_to_parent(adjoints, x, g);
            }
            if gates.needs_grad() {
                let xd = x.data();
                let mut g = vec![T::ZERO; gates.numel()];
                for bi in 0..b {
                    let base = bi * chw;
                    let mut acc = T::ZERO;
                    for i in 0..chw {
                        acc += adj[base + i] * xd[base + i];
                    }
                    g[bi * n + col] = acc;
                }
                add_to_parent(adjoints, gates, g);
            }
        }
        BackwardStep::BatchNormTrain { mean, inv_std } => {
            bn_train_backward(node, adj, adjoints, mean, inv_std);
        }
        BackwardStep::BatchNormEval { inv_std, normalized } => {
            let x = &parents[0];
            let gamma = &parents[1];
            let beta = &parents[2];
            let (b, c, h, w) = shape4(x);
            let hw = h * w;
            if x.needs_grad() {
                let gd = gamma.data();
                let mut g = vec![T::ZERO; x.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let scale = gd[ci] * inv_std[ci];
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            g[base + i] = adj[base + i] * scale;
                        }
                    }
                }
                add_to_parent(adjoints, x, g);
            }
            if gamma.needs_grad() {
                let mut g = vec![T::ZERO; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let mut acc = T::ZERO;
                        for i in 0..hw {
                            acc += adj[base + i] * normalized[base + i];
                        }
                        g[ci] += acc;
                    }
                }
                add_to_parent(adjoints, gamma, g);
            }
            if beta.needs_grad() {
                let mut g = vec![T::ZERO; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        let mut acc = T::ZERO;
                        for i in 0..hw {
                            acc += adj[base + i];
                        }
                        g[ci] += acc;
                    }
                }
                add_to_parent(adjoints, beta, g);
            }
        }
    }
}

fn conv2d_backward<T: Element>(
    node: &Tensor<T>,
    adj: &[T],
    adjoints: &mut HashMap<u64, Vec<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) {
    let parents = &node.inner.parents;
    let input = &parents[0];
    let weight = &parents[1];
    let (b, c_in, h, w) = shape4(input);
    let (c_out, cpg, k, _) = shape4(weight);
    let (ho, wo) = (node.shape()[2], node.shape()[3]);
    let opg = c_out / groups;

    if input.needs_grad() {
        let wt = weight.data();
        let mut g = vec![T::ZERO; input.numel()];
        for bi in 0..b {
            for gi in 0..groups {
                for cog in 0..opg {
                    let co = gi * opg + cog;
                    let out_base = (bi * c_out + co) * ho * wo;
                    for cig in 0..cpg {
                        let ci = gi * cpg + cig;
                        let in_base = (bi * c_in + ci) * h * w;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wt[((co * cpg + cig) * k + ky) * k + kx];
                                let (oy_lo, oy_hi) = valid_range(ho, stride, padding, ky, h);
                                let (ox_lo, ox_hi) = valid_range(wo, stride, padding, kx, w);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let n = ox_hi - ox_lo;
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - padding;
                                    let row_in = in_base + iy * w;
                                    let row_out = out_base + oy * wo;
                                    if stride == 1 {
                                        let ix0 = row_in + ox_lo + kx - padding;
                                        let dst = &mut g[ix0..ix0 + n];
                                        let src = &adj[row_out + ox_lo..row_out + ox_lo + n];
                                        for (d, &s) in dst.iter_mut().zip(src) {
                                            *d += wv * s;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            let ix = ox * stride + kx - padding;
                                            g[row_in + ix] += wv * adj[row_out + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        add_to_parent(adjoints, input, g);
    }

    if weight.needs_grad() {
        let x = input.data();
        let mut g = vec![T::ZERO; weight.numel()];
        for bi in 0..b {
            for gi in 0..groups {
                for cog in 0..opg {
                    let co = gi * opg + cog;
                    let out_base = (bi * c_out + co) * ho * wo;
                    for cig in 0..cpg {
                        let ci = gi * cpg + cig;
                        let in_base = (bi * c_in + ci) * h * w;
                        for ky in 0..k {
                            for kx in 0..k {
                                let (oy_lo, oy_hi) = valid_range(ho, stride, padding, ky, h);
                                let (ox_lo, ox_hi) = valid_range(wo, stride, padding, kx, w);
                                let mut acc = T::ZERO;
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - padding;
                                    let row_in = in_base + iy * w;
                                    let row_out = out_base + oy * wo;
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * stride + kx - padding;
                                        acc += adj[row_out + ox] * x[row_in + ix];
                                    }
                                }
                                g[((co * cpg + cig) * k + ky) * k + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
        add_to_parent(adjoints, weight, g);
    }

    if parents.len() > 2 && parents[2].needs_grad() {
        let mut g = vec![T::ZERO; c_out];
        for bi in 0..b {
            for co in 0..c_out {
                let out_base = (bi * c_out + co) * ho * wo;
                let mut acc = T::ZERO;
                for i in 0..ho * wo {
                    acc += adj[out_base + i];
                }
                g[co] += acc;
            }
        }
        add_to_parent(adjoints, &parents[2], g);
    }
}

/// Train-mode batch-norm adjoint. With xh = (x - mean) * inv_std:
///   d_gamma = sum(dy * xh), d_beta = sum(dy)
///   d_x = gamma * inv_std / n * (n*dy - sum(dy) - xh * sum(dy * xh))
fn bn_train_backward<T: Element>(
    node: &Tensor<T>,
    adj: &[T],
    adjoints: &mut HashMap<u64, Vec<T>>,
    mean: &[T],
    inv_std: &[T],
) {
    let parents = &node.inner.parents;
    let x = &parents[0];
    let gamma = &parents[1];
    let beta = &parents[2];
    let (b, c, h, w) = shape4(x);
    let hw = h * w;
    let n = b * hw;
    let n_t = T::from_f64(n as f64);
    let xd = x.data();
    let gd = gamma.data();

    // Per-channel reductions.
    let mut sum_dy = vec![T::ZERO; c];
    let mut sum_dy_xh = vec![T::ZERO; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (m, istd) = (mean[ci], inv_std[ci]);
            let mut s = T::ZERO;
            let mut sx = T::ZERO;
            for i in 0..hw {
                let d = adj[base + i];
                s += d;
                sx += d * (xd[base + i] - m) * istd;
            }
            sum_dy[ci] += s;
            sum_dy_xh[ci] += sx;
        }
    }

    if x.needs_grad() {
        let mut g = vec![T::ZERO; x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let (m, istd) = (mean[ci], inv_std[ci]);
                let scale = gd[ci] * istd / n_t;
                for i in 0..hw {
                    let xh = (xd[base + i] - m) * istd;
                    g[base + i] =
                        scale * (n_t * adj[base + i] - sum_dy[ci] - xh * sum_dy_xh[ci]);
                }
            }
        }
        add_to_parent(adjoints, x, g);
    }
    if gamma.needs_grad() {
        add_to_parent(adjoints, gamma, sum_dy_xh.clone());
    }
    if beta.needs_grad() {
        add_to_parent(adjoints, beta, sum_dy.clone());
    }
}
