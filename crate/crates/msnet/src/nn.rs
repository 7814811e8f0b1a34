//! Layer wrappers: parameter containers plus forward methods.
//!
//! Layers own their parameters as tensors and expose their state through
//! [`StateSink`] visitors, which drive serialization, parameter counting and
//! the optimizer. Running statistics of batch norm live behind `RefCell` so
//! a train-mode forward can update them through a shared reference; they are
//! buffers, not learnable parameters.

use std::cell::RefCell;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{batch_norm_eval, batch_norm_train, conv2d, linear, Element, Tensor};

/// Forward mode. `Eval` uses running statistics and detaches parameters from
/// gradient tracking; `Train` uses batch statistics, updates the running
/// ones, and tracks every parameter. `Calibrate` behaves like `Eval` except
/// that batch norm normalizes with batch statistics and assigns them to the
/// running buffers — one calibration pass makes eval-mode analysis of a
/// randomly initialized model statistically sane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Calibrate,
}

/// Read access to a module's named state.
pub trait StateSink<T: Element> {
    /// A learnable parameter.
    fn param(&mut self, name: &str, tensor: &Tensor<T>);
    /// A non-learnable buffer (running statistics).
    fn buffer(&mut self, name: &str, shape: &[usize], data: &RefCell<Vec<T>>);
}

/// Batch-norm defaults.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

// ── Conv2d ──────────────────────────────────────────────────────────────

pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming-style init: weights from N(0, sqrt(2 / fan_in)), zero bias.
    /// Padding is always `(kernel - 1) / 2` so stride-1 convs preserve size.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        seed: u64,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let padding = (kernel - 1) / 2;
        let fan_in = (in_channels / groups) * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = Rng::derive(seed, &format!("{name}.weight"));
        let wlen = out_channels * (in_channels / groups) * kernel * kernel;
        let weight = Tensor::param(
            &[out_channels, in_channels / groups, kernel, kernel],
            (0..wlen).map(|_| T::from_f64(rng.normal_scaled(std))).collect(),
        )?;
        let bias = if with_bias {
            Some(Tensor::param(&[out_channels], vec![T::ZERO; out_channels])?)
        } else {
            None
        };
        Ok(Conv2d { weight, bias, in_channels, out_channels, kernel, stride, padding, groups })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding, self.groups)
            }
            Mode::Eval | Mode::Calibrate => {
                let w = self.weight.detached();
                let b = self.bias.as_ref().map(|t| t.detached());
                conv2d(x, &w, b.as_ref(), self.stride, self.padding, self.groups)
            }
        }
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        sink.param(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            sink.param(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }
}

// ── BatchNorm2d ─────────────────────────────────────────────────────────

pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: RefCell<Vec<T>>,
    pub running_var: RefCell<Vec<T>>,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Tensor::param(&[channels], vec![T::ONE; channels])?,
            beta: Tensor::param(&[channels], vec![T::ZERO; channels])?,
            running_mean: RefCell::new(vec![T::ZERO; channels]),
            running_var: RefCell::new(vec![T::ONE; channels]),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
                // running <- (1 - momentum) * running + momentum * batch
                let m = T::from_f64(self.momentum);
                let keep = T::ONE - m;
                let mut rm = self.running_mean.borrow_mut();
                let mut rv = self.running_var.borrow_mut();
                for c in 0..self.channels {
                    rm[c] = keep * rm[c] + m * mean[c];
                    rv[c] = keep * rv[c] + m * var[c];
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                batch_norm_eval(x, &self.gamma.detached(), &self.beta.detached(), &rm, &rv, self.eps)
            }
            Mode::Calibrate => {
                let (y, mean, var) =
                    batch_norm_train(x, &self.gamma.detached(), &self.beta.detached(), self.eps)?;
                *self.running_mean.borrow_mut() = mean;
                *self.running_var.borrow_mut() = var;
                Ok(y)
            }
        }
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        sink.param(&format!("{prefix}.gamma"), &self.gamma);
        sink.param(&format!("{prefix}.beta"), &self.beta);
        sink.buffer(&format!("{prefix}.running_mean"), &[self.channels], &self.running_mean);
        sink.buffer(&format!("{prefix}.running_var"), &[self.channels], &self.running_var);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

// ── Linear ──────────────────────────────────────────────────────────────

pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Element> Linear<T> {
    pub fn new(
        name: &str,
        seed: u64,
        in_features: usize,
        out_features: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let std = (2.0 / in_features as f64).sqrt();
        let mut rng = Rng::derive(seed, &format!("{name}.weight"));
        let weight = Tensor::param(
            &[out_features, in_features],
            (0..out_features * in_features).map(|_| T::from_f64(rng.normal_scaled(std))).collect(),
        )?;
        let bias = if with_bias {
            Some(Tensor::param(&[out_features], vec![T::ZERO; out_features])?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_features, out_features })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => linear(x, &self.weight, self.bias.as_ref()),
            Mode::Eval | Mode::Calibrate => {
                let w = self.weight.detached();
                let b = self.bias.as_ref().map(|t| t.detached());
                linear(x, &w, b.as_ref())
            }
        }
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        sink.param(&format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            sink.param(&format!("{prefix}.bias"), b);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}

// ── ConvBnAct ───────────────────────────────────────────────────────────

/// Convolution followed by batch norm and SiLU — the standard unit
/// throughout the models. Convolutions carry no bias; the norm provides the
/// affine terms.
pub struct ConvBnAct<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> ConvBnAct<T> {
    pub fn new(
        name: &str,
        seed: u64,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(ConvBnAct {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                seed,
                in_channels,
                out_channels,
                kernel,
                stride,
                groups,
                false,
            )?,
            bn: BatchNorm2d::new(out_channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.bn.forward(&self.conv.forward(x, mode)?, mode)?.silu())
    }

    pub fn visit_state(&self, prefix: &str, sink: &mut dyn StateSink<T>) {
        self.conv.visit_state(&format!("{prefix}.conv"), sink);
        self.bn.visit_state(&format!("{prefix}.bn"), sink);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_params_mut(&format!("{prefix}.conv"), f);
        self.bn.visit_params_mut(&format!("{prefix}.bn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_bn_act_eval_keeps_no_history() {
        let unit = ConvBnAct::<f32>::new("u", 0, 3, 8, 3, 1, 1).unwrap();
        let mut rng = Rng::new(0);
        let x = Tensor::randn(&[1, 3, 8, 8], &mut rng).unwrap();
        let y = unit.forward(&x, Mode::Eval).unwrap();
        assert!(y.is_leaf(), "eval forward must not record history");
        assert!(y.all_finite());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let bn = BatchNorm2d::<f64>::new(2).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[4, 2, 3, 3], &mut rng).unwrap();
        let before = bn.running_mean.borrow().clone();
        bn.forward(&x, Mode::Train).unwrap();
        let after = bn.running_mean.borrow().clone();
        assert_ne!(before, after);
        // Eval mode leaves them untouched.
        bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(*bn.running_mean.borrow(), after);
    }

    #[test]
    fn depthwise_detection() {
        let dw = Conv2d::<f32>::new("d", 0, 8, 8, 3, 1, 8, false).unwrap();
        assert!(dw.is_depthwise());
        let pw = Conv2d::<f32>::new("p", 0, 8, 16, 1, 1, 1, false).unwrap();
        assert!(!pw.is_depthwise());
    }
}
