//! First-order training: SGD with momentum plus a synthetic overfit task
//! that drives the full graph (blocks, gating, kernel protocol) end to end.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::arch::{build_model, KernelProtocol, ModelGraph, ModelVariant, Parts};
use crate::blocks::BranchKind;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mode};
use crate::rng::Rng;
use crate::tensor::{backward, Element, Gradients, Tensor};

/// SGD with classical momentum: v <- mu v + g, p <- p - lr v.
pub struct Sgd<T: Element> {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    /// Update one named parameter in place. Parameters without a gradient
    /// in this episode are left untouched. NaN gradients abort with the
    /// parameter name.
    pub fn step_param(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T]) -> Result<()> {
        if grad.iter().any(|g| g.is_nan()) {
            return Err(Error::NanGradient { name: name.to_string() });
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::ZERO; param.numel()]);
        let mu = T::from_f64(self.momentum);
        for (vi, &gi) in v.iter_mut().zip(grad) {
            *vi = mu * *vi + gi;
        }
        if self.lr != 0.0 {
            let lr = T::from_f64(self.lr);
            let mut data = param.to_vec();
            for (p, &vi) in data.iter_mut().zip(v.iter()) {
                *p = *p - lr * vi;
            }
            *param = Tensor::param(param.shape(), data)?;
        }
        Ok(())
    }
}

/// Backbone plus a pooled scalar head: global average over the last stage
/// followed by a linear map to one value per image.
pub struct ToyModel<T: Element> {
    pub graph: ModelGraph<T>,
    pub head: Linear<T>,
}

impl<T: Element> ToyModel<T> {
    pub fn new(variant: &ModelVariant, protocol: KernelProtocol, seed: u64) -> Result<Self> {
        let graph = build_model(variant, protocol, Parts::Backbone, seed)?;
        let c = graph.widths.stages[3];
        Ok(ToyModel { graph, head: Linear::new("toy_head", seed, c, 1, true)? })
    }

    /// Predictions of shape (B, 1).
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let feats = self.graph.forward_features(images, mode)?;
        let pooled = feats.stages[3].global_avg_pool()?;
        self.head.forward(&pooled, mode)
    }

    /// Mean squared error against per-image scalar targets (B, 1).
    pub fn loss(&self, images: &Tensor<T>, targets: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pred = self.forward(images, mode)?;
        let diff = pred.sub(targets)?;
        let batch = images.shape()[0] as f64;
        Ok(diff.mul(&diff)?.sum_all().scale(T::from_f64(1.0 / batch)))
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.graph.visit_params_mut(f);
        self.head.visit_params_mut("toy_head", f);
    }

    /// Apply one optimizer step from an episode's gradients.
    pub fn apply_step(&mut self, sgd: &mut Sgd<T>, grads: &Gradients<T>) -> Result<()> {
        let mut failure: Option<Error> = None;
        self.visit_params_mut(&mut |name, param| {
            if failure.is_some() {
                return;
            }
            // Gradient lookup is by the tensor identity used in the episode.
            if let Some(g) = grads.get(param) {
                let g = g.to_vec();
                if let Err(e) = sgd.step_param(name, param, &g) {
                    failure = Some(e);
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// The default tiny variant for the overfit task: every width at most 16
/// channels, gated stages, heterogeneous kernels.
pub fn toy_variant(gql: bool) -> ModelVariant {
    ModelVariant {
        name: "toy".into(),
        widen: 1.0,
        base_channels: [8, 8, 16, 16, 16],
        block_kinds: [BranchKind::Sibm, BranchKind::Sibm],
        blocks_per_stage: [1, 1, 1, 1],
        expansion: 2,
        branches: 3,
        gql_stages: if gql { vec![2, 3, 4] } else { vec![] },
        query_dim: 16,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Disable to run the ungated ablation.
    pub gql: bool,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig { steps: 500, lr: 0.02, momentum: 0.9, seed: 0, gql: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverfitReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Overfit eight synthetic 64x64 images with scalar targets. Returns the
/// per-step loss curve; divergence (loss above 10x the initial value for 50
/// consecutive steps) is an error.
pub fn overfit_toy(cfg: &OverfitConfig) -> Result<OverfitReport> {
    let variant = toy_variant(cfg.gql);
    let mut model = ToyModel::<f32>::new(&variant, KernelProtocol::hks(), cfg.seed)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);

    let mut rng = Rng::derive(cfg.seed, "overfit.data");
    let images = Tensor::<f32>::randn(&[8, 3, 64, 64], &mut rng)?;
    let targets = Tensor::<f32>::randn(&[8, 1], &mut rng)?;

    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    let mut high_streak = 0usize;
    for step in 0..cfg.steps {
        let loss = model.loss(&images, &targets, Mode::Train)?;
        let value = loss.item()?.to_f64();
        let initial = *initial.get_or_insert(value);
        losses.push(value);

        if !value.is_finite() || value > 10.0 * initial {
            high_streak += 1;
            if !value.is_finite() || high_streak >= 50 {
                return Err(Error::Diverged { step, loss: value, initial });
            }
        } else {
            high_streak = 0;
        }

        let seed = Tensor::full(&[1], 1.0)?;
        let grads = backward(&loss, &seed)?;
        model.apply_step(&mut sgd, &grads)?;
    }
    let initial_loss = losses.first().copied().unwrap_or(0.0);
    let final_loss = losses.last().copied().unwrap_or(0.0);
    Ok(OverfitReport { losses, initial_loss, final_loss, steps_run: cfg.steps })
}

/// Render a loss curve as CSV (step,loss).
pub fn loss_csv(report: &OverfitReport) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.8e}\n"));
    }
    out
}
