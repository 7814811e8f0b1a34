//! Forward operations and their recorded backward steps.
//!
//! Every op validates its preconditions, computes the result with a fixed
//! loop order (so results are bit-identical across runs and match the naive
//! reference implementations used in tests), and records a [`BackwardStep`]
//! when gradient tracking is active.

use super::{idx4, Element, Tensor};
use crate::error::{Error, Result};

/// Recorded operation, replayed by `backward`. Parents live on the output
/// tensor; variants carry only what the adjoint computation needs beyond
/// parent values.
pub(crate) enum BackwardStep<T: Element> {
    /// out = a + b
    Add,
    /// out = a - b
    Sub,
    /// out = a * b (elementwise)
    Mul,
    /// out = a * c
    Scale { factor: T },
    /// out = x * sigmoid(x)
    Silu,
    /// out = 1 / (1 + exp(-x))
    Sigmoid,
    /// out = sum of all elements, shape [1]
    SumAll,
    /// out[b,c] = mean over spatial positions
    GlobalAvgPool,
    /// Grouped 2-D convolution; parents are [input, weight] or [input, weight, bias].
    Conv2d { stride: usize, padding: usize, groups: usize },
    /// out = x W^T (+ bias); parents [x, w] or [x, w, bias].
    Linear,
    /// Window max; `argmax` holds the flat input index chosen per output element.
    MaxPool2d { argmax: Vec<u32> },
    /// Channel concatenation; `widths` are the channel counts of the parts.
    ConcatChannels { widths: Vec<usize> },
    /// One channel slice of a split input.
    SplitChannels { offset: usize, width: usize },
    /// Nearest-neighbour 2x upsampling.
    UpsampleNearest2x,
    /// out = x * gates[b, col], broadcast over channels and positions.
    GateScale { col: usize },
    /// Batch norm with batch statistics; saves per-channel mean and 1/sqrt(var+eps).
    BatchNormTrain { mean: Vec<T>, inv_std: Vec<T> },
    /// Batch norm with running statistics; saves (x - rm) * inv_std and inv_std.
    BatchNormEval { inv_std: Vec<T>, normalized: Vec<T> },
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data: Vec<T> =
            self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            BackwardStep::Add,
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data: Vec<T> =
            self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            BackwardStep::Sub,
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data: Vec<T> =
            self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            BackwardStep::Mul,
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&a| a * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            BackwardStep::Scale { factor },
        )
    }

    /// silu(x) = x * sigmoid(x)
    pub fn silu(&self) -> Tensor<T> {
        let data: Vec<T> =
            self.data().iter().map(|&x| x * sigmoid_scalar(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], BackwardStep::Silu)
    }

    /// sigmoid(x) = 1 / (1 + exp(-x))
    pub fn sigmoid(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], BackwardStep::Sigmoid)
    }

    /// Sum of all elements; output shape [1].
    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for &v in self.data() {
            acc += v;
        }
        Tensor::from_op(vec![1], vec![acc], vec![self.clone()], BackwardStep::SumAll)
    }

    /// Mean over all spatial positions; (B, C, H, W) -> (B, C).
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                detail: format!("expected rank-4 input, got {:?}", self.shape()),
            });
        }
        let (b, c, h, w) = shape4(self);
        let hw = h * w;
        let inv = T::ONE / T::from_f64(hw as f64);
        let x = self.data();
        let mut out = vec![T::ZERO; b * c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let mut acc = T::ZERO;
                for i in 0..hw {
                    acc += x[base + i];
                }
                out[bi * c + ci] = acc * inv;
            }
        }
        Ok(Tensor::from_op(vec![b, c], out, vec![self.clone()], BackwardStep::GlobalAvgPool))
    }

    /// Window maximum with the subgradient routed to the first maximal
    /// element in row-major scan order.
    pub fn max_pool2d(&self, k: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                detail: format!("expected rank-4 input, got {:?}", self.shape()),
            });
        }
        if k == 0 || stride == 0 {
            return Err(Error::InvalidArgument {
                op: "max_pool2d",
                detail: "window and stride must be positive".into(),
            });
        }
        let (b, c, h, w) = shape4(self);
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::InvalidArgument {
                op: "max_pool2d",
                detail: format!(
                    "window {k} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let x = self.data();
        let mut out = vec![T::ZERO; b * c * ho * wo];
        let mut argmax = vec![0u32; b * c * ho * wo];
        let out_shape = [b, c, ho, wo];
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best: Option<(T, usize)> = None;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = idx4(self.shape(), bi, ci, iy as usize, ix as usize);
                                let v = x[idx];
                                // Strict comparison keeps the first maximum.
                                match best {
                                    Some((bv, _)) if !(v > bv) => {}
                                    _ => best = Some((v, idx)),
                                }
                            }
                        }
                        let (v, idx) = best.expect("window intersects input");
                        let o = idx4(&out_shape, bi, ci, oy, ox);
                        out[o] = v;
                        argmax[o] = idx as u32;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            BackwardStep::MaxPool2d { argmax },
        ))
    }

    /// Split along the channel axis into parts of the given widths.
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "split_channels",
                detail: format!("expected rank-4 input, got {:?}", self.shape()),
            });
        }
        let (b, c, h, w) = shape4(self);
        let total: usize = widths.iter().sum();
        if total != c || widths.iter().any(|&x| x == 0) {
            return Err(Error::ShapeMismatch {
                op: "split_channels",
                expected: format!("positive widths summing to {c}"),
                got: format!("{:?}", widths),
            });
        }
        let hw = h * w;
        let x = self.data();
        let mut parts = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for &width in widths {
            let mut data = vec![T::ZERO; b * width * hw];
            for bi in 0..b {
                let src = (bi * c + offset) * hw;
                let dst = bi * width * hw;
                data[dst..dst + width * hw].copy_from_slice(&x[src..src + width * hw]);
            }
            parts.push(Tensor::from_op(
                vec![b, width, h, w],
                data,
                vec![self.clone()],
                BackwardStep::SplitChannels { offset, width },
            ));
            offset += width;
        }
        Ok(parts)
    }

    /// Nearest-neighbour upsampling by a factor of 2 on both spatial axes.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "upsample_nearest_2x",
                detail: format!("expected rank-4 input, got {:?}", self.shape()),
            });
        }
        let (b, c, h, w) = shape4(self);
        let x = self.data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; b * c * ho * wo];
        let out_shape = [b, c, ho, wo];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xw in 0..w {
                        let v = x[idx4(self.shape(), bi, ci, y, xw)];
                        let o = idx4(&out_shape, bi, ci, 2 * y, 2 * xw);
                        out[o] = v;
                        out[o + 1] = v;
                        out[o + wo] = v;
                        out[o + wo + 1] = v;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            BackwardStep::UpsampleNearest2x,
        ))
    }

    /// Scale every channel and position of `self` by `gates[b, col]`.
    /// `self` is (B, C, H, W); `gates` is (B, N) with col < N.
    pub fn gate_scale(&self, gates: &Tensor<T>, col: usize) -> Result<Tensor<T>> {
        if self.rank() != 4 || gates.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "gate_scale",
                detail: format!(
                    "expected rank-4 input and rank-2 gates, got {:?} and {:?}",
                    self.shape(),
                    gates.shape()
                ),
            });
        }
        let (b, c, h, w) = shape4(self);
        if gates.shape()[0] != b || col >= gates.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "gate_scale",
                expected: format!("gates ({b}, >{col})"),
                got: format!("{:?}", gates.shape()),
            });
        }
        let n = gates.shape()[1];
        let chw = c * h * w;
        let x = self.data();
        let g = gates.data();
        let mut out = vec![T::ZERO; b * chw];
        for bi in 0..b {
            let gv = g[bi * n + col];
            let base = bi * chw;
            for i in 0..chw {
                out[base + i] = x[base + i] * gv;
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gates.clone()],
            BackwardStep::GateScale { col },
        ))
    }
}

/// Concatenate along the channel axis. All parts must agree on batch and
/// spatial extents.
pub fn concat_channels<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "concat_channels",
            detail: "need at least one part".into(),
        });
    }
    let (b, _, h, w) = shape4(&parts[0]);
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "concat_channels",
                detail: format!("expected rank-4 parts, got {:?}", p.shape()),
            });
        }
        let (pb, pc, ph, pw) = shape4(p);
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: format!("batch/spatial ({b}, _, {h}, {w})"),
                got: format!("{:?}", p.shape()),
            });
        }
        widths.push(pc);
    }
    let c_total: usize = widths.iter().sum();
    let hw = h * w;
    let mut out = vec![T::ZERO; b * c_total * hw];
    for bi in 0..b {
        let mut offset = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = bi * pc * hw;
            let dst = (bi * c_total + offset) * hw;
            out[dst..dst + pc * hw].copy_from_slice(&p.data()[src..src + pc * hw]);
            offset += pc;
        }
    }
    Ok(Tensor::from_op(
        vec![b, c_total, h, w],
        out,
        parts.to_vec(),
        BackwardStep::ConcatChannels { widths },
    ))
}

/// Grouped 2-D convolution with square odd kernels.
///
/// `input` is (B, C_in, H, W); `weight` is (C_out, C_in/groups, k, k);
/// `bias`, when present, is (C_out,). Output spatial extent per axis is
/// `(ext + 2*padding - k) / stride + 1`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("expected rank-4 input, got {:?}", input.shape()),
        });
    }
    if weight.rank() != 4 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("expected rank-4 weight, got {:?}", weight.shape()),
        });
    }
    if stride == 0 || groups == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            detail: "stride and groups must be positive".into(),
        });
    }
    let (b, c_in, h, w) = shape4(input);
    let (c_out, c_per_group, kh, kw) = shape4(weight);
    if kh != kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("kernel must be square, got {kh}x{kw}"),
        });
    }
    let k = kh;
    if k % 2 == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            detail: format!("kernel size must be odd, got {k}"),
        });
    }
    if c_in % groups != 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("input channels divisible by groups={groups}"),
            got: format!("{c_in} input channels"),
        });
    }
    if c_out % groups != 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("output channels divisible by groups={groups}"),
            got: format!("{c_out} output channels"),
        });
    }
    if c_per_group != c_in / groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("weight dim 1 = {} (C_in/groups)", c_in / groups),
            got: format!("{c_per_group}"),
        });
    }
    if let Some(bias) = bias {
        if bias.shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: format!("bias shape [{c_out}]"),
                got: format!("{:?}", bias.shape()),
            });
        }
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!("kernel {k} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
        });
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;

    let x = input.data();
    let wt = weight.data();
    let out_shape = vec![b, c_out, ho, wo];
    let mut out = vec![T::ZERO; b * c_out * ho * wo];

    // Initialize with bias.
    if let Some(bias) = bias {
        let bd = bias.data();
        for bi in 0..b {
            for co in 0..c_out {
                let base = (bi * c_out + co) * ho * wo;
                out[base..base + ho * wo].fill(bd[co]);
            }
        }
    }

    // Accumulation order per output element is (cig, ky, kx), matching the
    // naive reference bit for bit: the loops below only vectorize across
    // output positions and fuse the kx taps per element in ascending order,
    // never reordering any single element's sum.
    let cpg = c_in / groups;
    let opg = c_out / groups;
    let same_pad_unit_stride = stride == 1 && padding == (k - 1) / 2 && k > 1;
    for bi in 0..b {
        for g in 0..groups {
            for cog in 0..opg {
                let co = g * opg + cog;
                let out_base = (bi * c_out + co) * ho * wo;
                for cig in 0..cpg {
                    let ci = g * cpg + cig;
                    let in_base = (bi * c_in + ci) * h * w;
                    let w_base = (co * cpg + cig) * k * k;
                    if same_pad_unit_stride {
                        for ky in 0..k {
                            let (oy_lo, oy_hi) = valid_range(ho, 1, padding, ky, h);
                            let wrow = &wt[w_base + ky * k..w_base + (ky + 1) * k];
                            for oy in oy_lo..oy_hi {
                                let iy = oy + ky - padding;
                                let src_row = &x[in_base + iy * w..in_base + iy * w + w];
                                let dst_row = &mut out[out_base + oy * wo..out_base + oy * wo + wo];
                                conv_row_same_pad(dst_row, src_row, wrow, padding);
                            }
                        }
                    } else {
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = wt[w_base + ky * k + kx];
                                // Valid rows: 0 <= oy*stride - padding + ky < h
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
                                        let src = &x[ix0..ix0 + n];
                                        let dst =
                                            &mut out[row_out + ox_lo..row_out + ox_lo + n];
                                        for (d, &s) in dst.iter_mut().zip(src) {
                                            *d += wv * s;
                                        }
                                    } else {
                                        for ox in ox_lo..ox_hi {
                                            let ix = ox * stride + kx - padding;
                                            out[row_out + ox] += wv * x[row_in + ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(
        out_shape,
        out,
        parents,
        BackwardStep::Conv2d { stride, padding, groups },
    ))
}

/// One output row of a stride-1, same-padding convolution tap row: every
/// element accumulates its k kernel taps in ascending kx order (the same
/// per-element order as the tap-by-tap path, so results are bit-identical).
/// Interior columns take the fused fast path; boundary columns fall back to
/// a scalar loop that skips out-of-range taps.
fn conv_row_same_pad<T: Element>(dst: &mut [T], src: &[T], wrow: &[T], padding: usize) {
    let k = wrow.len();
    let wo = dst.len();
    let lo = padding.min(wo);
    let hi = wo.saturating_sub(padding).max(lo);

    for (ox, d) in dst.iter_mut().enumerate().take(lo) {
        let mut acc = *d;
        for (kx, &wv) in wrow.iter().enumerate() {
            let ix = ox + kx;
            if ix >= padding && ix - padding < src.len() {
                acc += wv * src[ix - padding];
            }
        }
        *d = acc;
    }
    if hi > lo {
        // Element j covers src[j..j+k]; the last window ends exactly at the
        // row boundary because wo == src.len() and 2*padding == k-1.
        let interior = &mut dst[lo..hi];
        let windows = &src[..hi - lo + k - 1];
        match k {
            3 => fused_taps::<T, 3>(interior, windows, wrow),
            5 => fused_taps::<T, 5>(interior, windows, wrow),
            7 => fused_taps::<T, 7>(interior, windows, wrow),
            9 => fused_taps::<T, 9>(interior, windows, wrow),
            _ => {
                for (j, d) in interior.iter_mut().enumerate() {
                    let mut acc = *d;
                    for (kx, &wv) in wrow.iter().enumerate() {
                        acc += wv * windows[j + kx];
                    }
                    *d = acc;
                }
            }
        }
    }
    for (off, d) in dst[hi..].iter_mut().enumerate() {
        let ox = hi + off;
        let mut acc = *d;
        for (kx, &wv) in wrow.iter().enumerate() {
            let ix = ox + kx;
            if ix >= padding && ix - padding < src.len() {
                acc += wv * src[ix - padding];
            }
        }
        *d = acc;
    }
}

/// Fused K-tap row update with a compile-time tap count so the inner loop
/// unrolls and vectorizes.
fn fused_taps<T: Element, const K: usize>(dst: &mut [T], src: &[T], wrow: &[T]) {
    let w: [T; K] = std::array::from_fn(|i| wrow[i]);
    for (d, win) in dst.iter_mut().zip(src.windows(K)) {
        let mut acc = *d;
        for kx in 0..K {
            acc += w[kx] * win[kx];
        }
        *d = acc;
    }
}

/// Output index range along one axis for which `o*stride + k_off - padding`
/// lands inside `[0, extent)`.
#[inline]
pub(crate) fn valid_range(
    out_extent: usize,
    stride: usize,
    padding: usize,
    k_off: usize,
    extent: usize,
) -> (usize, usize) {
    // o >= ceil((padding - k_off) / stride), o < ceil((extent + padding - k_off) / stride)
    let lo = if k_off >= padding { 0 } else { (padding - k_off).div_ceil(stride) };
    let hi_raw = extent + padding;
    let hi = if hi_raw > k_off {
        ((hi_raw - k_off).div_ceil(stride)).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Affine map: (B, F_in) x (F_out, F_in) -> (B, F_out).
pub fn linear<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if input.rank() != 2 || weight.rank() != 2 {
        return Err(Error::InvalidShape {
            op: "linear",
            detail: format!(
                "expected rank-2 input and weight, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        });
    }
    let (b, f_in) = (input.shape()[0], input.shape()[1]);
    let (f_out, wf_in) = (weight.shape()[0], weight.shape()[1]);
    if wf_in != f_in {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected: format!("weight dim 1 = {f_in}"),
            got: format!("{wf_in}"),
        });
    }
    if let Some(bias) = bias {
        if bias.shape() != [f_out] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                expected: format!("bias shape [{f_out}]"),
                got: format!("{:?}", bias.shape()),
            });
        }
    }
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::ZERO; b * f_out];
    for bi in 0..b {
        for o in 0..f_out {
            let mut acc = match bias {
                Some(bias) => bias.data()[o],
                None => T::ZERO,
            };
            let xrow = bi * f_in;
            let wrow = o * f_in;
            for i in 0..f_in {
                acc += x[xrow + i] * wt[wrow + i];
            }
            out[bi * f_out + o] = acc;
        }
    }
    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Ok(Tensor::from_op(vec![b, f_out], out, parents, BackwardStep::Linear))
}

/// Batch normalization with batch statistics. Returns the normalized output
/// plus the per-channel batch mean and (biased) variance so the caller can
/// maintain running statistics.
pub fn batch_norm_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    check_bn_args("batch_norm", input, gamma, beta, eps)?;
    let (b, c, h, w) = shape4(input);
    let n = b * h * w;
    let inv_n = T::ONE / T::from_f64(n as f64);
    let x = input.data();
    let mut mean = vec![T::ZERO; c];
    let mut var = vec![T::ZERO; c];
    for ci in 0..c {
        let mut acc = T::ZERO;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                acc += x[base + i];
            }
        }
        mean[ci] = acc * inv_n;
    }
    for ci in 0..c {
        let m = mean[ci];
        let mut acc = T::ZERO;
        for bi in 0..b {
            let base = (bi * c + ci) * h * w;
            for i in 0..h * w {
                let d = x[base + i] - m;
                acc += d * d;
            }
        }
        var[ci] = acc * inv_n;
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let (m, istd, gv, bv) = (mean[ci], inv_std[ci], g[ci], be[ci]);
            for i in 0..h * w {
                out[base + i] = gv * (x[base + i] - m) * istd + bv;
            }
        }
    }
    let out = Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        BackwardStep::BatchNormTrain { mean: mean.clone(), inv_std },
    );
    Ok((out, mean, var))
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    check_bn_args("batch_norm", input, gamma, beta, eps)?;
    let (b, c, h, w) = shape4(input);
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            expected: format!("running statistics of length {c}"),
            got: format!("{} / {}", running_mean.len(), running_var.len()),
        });
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> =
        running_var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
    let x = input.data();
    let g = gamma.data();
    let be = beta.data();
    let mut out = vec![T::ZERO; x.len()];
    let mut normalized = vec![T::ZERO; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            let (m, istd, gv, bv) = (running_mean[ci], inv_std[ci], g[ci], be[ci]);
            for i in 0..h * w {
                let xh = (x[base + i] - m) * istd;
                normalized[base + i] = xh;
                out[base + i] = gv * xh + bv;
            }
        }
    }
    Ok(Tensor::from_op(
        input.shape().to_vec(),
        out,
        vec![input.clone(), gamma.clone(), beta.clone()],
        BackwardStep::BatchNormEval { inv_std, normalized },
    ))
}

fn check_bn_args<T: Element>(
    op: &'static str,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<()> {
    if input.rank() != 4 {
        return Err(Error::InvalidShape {
            op,
            detail: format!("expected rank-4 input, got {:?}", input.shape()),
        });
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument { op, detail: format!("eps must be positive, got {eps}") });
    }
    let c = input.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("gamma/beta shape [{c}]"),
            got: format!("{:?} / {:?}", gamma.shape(), beta.shape()),
        });
    }
    Ok(())
}

#[inline]
pub(crate) fn shape4<T: Element>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    match s.len() {
        4 => (s[0], s[1], s[2], s[3]),
        _ => panic!("expected rank-4 tensor, got {:?}", s),
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Element>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}
