//! Effective-receptive-field analysis.
//!
//! For a chosen stage tap F and input I, the contribution matrix is built
//! from the gradient of the channel-summed centre output position:
//! clamp negative input-gradients to zero, sum over input channels, map
//! through log10(1 + x), average over a set of noise inputs, then min-max
//! normalize to [0, 1]. The high-contribution area ratio h(theta) is the
//! fraction of entries strictly above theta, reported for theta in
//! {0.50, 0.55, ..., 0.90} together with its mean.

use serde::Serialize;

use crate::arch::ModelGraph;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::rng::Rng;
use crate::tensor::{backward, idx4, Element, Tensor};

/// Thresholds used by the area score: 0.50 to 0.90, step 0.05.
pub fn thresholds() -> Vec<f64> {
    (0..9).map(|i| 0.50 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ErfReport {
    pub stage: usize,
    pub input_size: usize,
    /// Number of noise inputs averaged per weight seed.
    pub inputs: usize,
    /// Number of weight seeds averaged.
    pub weight_seeds: usize,
    pub noise_seed: u64,
    pub thresholds: Vec<f64>,
    pub h_values: Vec<f64>,
    pub h_bar: f64,
    /// Normalized contribution matrix, row-major, values in [0, 1].
    pub matrix: Vec<f64>,
    pub matrix_size: [usize; 2],
}

/// Averaged, normalized contribution matrix for one model.
///
/// The input set is standard normal noise at the given size, drawn from
/// `noise_seed`. The model runs in eval mode; only the image requires
/// gradients.
pub fn contribution_matrix<T: Element>(
    model: &ModelGraph<T>,
    stage: usize,
    input_size: usize,
    inputs: usize,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let mut accum = mean_log_matrix(model, stage, input_size, inputs, noise_seed)?;
    normalize_unit(&mut accum);
    Ok(accum)
}

/// Mean over noise inputs of the unnormalized log contribution map.
pub fn mean_log_matrix<T: Element>(
    model: &ModelGraph<T>,
    stage: usize,
    input_size: usize,
    inputs: usize,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    if inputs == 0 {
        return Err(Error::InvalidArgument {
            op: "contribution_matrix",
            detail: "need at least one input".into(),
        });
    }
    let hw = input_size * input_size;
    let mut accum = vec![0.0f64; hw];
    for i in 0..inputs {
        let mut rng = Rng::derive(noise_seed, &format!("erf.input{i}"));
        let image = Tensor::<T>::randn(&[1, 3, input_size, input_size], &mut rng)?;
        let image = Tensor::param(image.shape(), image.to_vec())?;
        let a = single_input_matrix(model, stage, &image)?;
        for (acc, v) in accum.iter_mut().zip(a) {
            *acc += v;
        }
    }
    for v in accum.iter_mut() {
        *v /= inputs as f64;
    }
    Ok(accum)
}

/// Unnormalized log contribution map for one explicit image through a
/// model's stage tap.
pub fn single_input_matrix<T: Element>(
    model: &ModelGraph<T>,
    stage: usize,
    image: &Tensor<T>,
) -> Result<Vec<f64>> {
    let feats = model.forward_features(image, Mode::Eval)?;
    let tap = model.stage_tap(&feats, stage)?;
    contribution_of_tap(image, &tap)
}

/// Core of the analysis, usable with any graph built on `image`: seed the
/// backward with ones at the centre spatial position across every output
/// channel of `tap`, clamp negative input-gradients to zero, sum over input
/// channels, and map through log10(1 + x).
pub fn contribution_of_tap<T: Element>(image: &Tensor<T>, tap: &Tensor<T>) -> Result<Vec<f64>> {
    if !image.requires_grad() {
        return Err(Error::InvalidArgument {
            op: "contribution_matrix",
            detail: "input image must require gradients".into(),
        });
    }
    let (b, c, fh, fw) = (tap.shape()[0], tap.shape()[1], tap.shape()[2], tap.shape()[3]);
    if b != 1 {
        return Err(Error::InvalidArgument {
            op: "contribution_matrix",
            detail: "analysis expects batch size 1".into(),
        });
    }

    let mut seed = vec![T::ZERO; tap.numel()];
    for ci in 0..c {
        seed[idx4(tap.shape(), 0, ci, fh / 2, fw / 2)] = T::ONE;
    }
    let seed = Tensor::from_vec(tap.shape(), seed)?;
    let grads = backward(tap, &seed)?;
    let g = grads.get(image).ok_or(Error::DetachedBackward)?;

    let (h, w) = (image.shape()[2], image.shape()[3]);
    let mut a = vec![0.0f64; h * w];
    let in_c = image.shape()[1];
    for ci in 0..in_c {
        for y in 0..h {
            for x in 0..w {
                let v = g[(ci * h + y) * w + x].to_f64();
                if v > 0.0 {
                    a[y * w + x] += v;
                }
            }
        }
    }
    for v in a.iter_mut() {
        *v = (*v + 1.0).log10();
    }
    Ok(a)
}

/// Min-max normalization onto [0, 1]; constant maps become all zeros.
pub fn normalize_unit(a: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 {
        a.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in a.iter_mut() {
        *v = (*v - lo) / range;
    }
}

/// Area scores of a normalized matrix: h(theta) per threshold plus mean.
pub fn erf_score(a: &[f64]) -> (Vec<f64>, f64) {
    let ths = thresholds();
    let n = a.len() as f64;
    let h: Vec<f64> =
        ths.iter().map(|&t| a.iter().filter(|&&v| v > t).count() as f64 / n).collect();
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    (h, mean)
}

/// Full report: matrices averaged over `inputs` noise draws for one model.
pub fn erf_report<T: Element>(
    model: &ModelGraph<T>,
    stage: usize,
    input_size: usize,
    inputs: usize,
    noise_seed: u64,
) -> Result<ErfReport> {
    let matrix = contribution_matrix(model, stage, input_size, inputs, noise_seed)?;
    let (h_values, h_bar) = erf_score(&matrix);
    Ok(ErfReport {
        stage,
        input_size,
        inputs,
        weight_seeds: 1,
        noise_seed,
        thresholds: thresholds(),
        h_values,
        h_bar,
        matrix,
        matrix_size: [input_size, input_size],
    })
}

/// Run parameters for multi-seed analyses.
#[derive(Debug, Clone)]
pub struct SeededErfConfig {
    pub variant: crate::arch::ModelVariant,
    pub protocol: crate::arch::KernelProtocol,
    pub stage: usize,
    pub input_size: usize,
    /// Noise inputs per weight seed.
    pub inputs: usize,
    /// Independently initialized models to average over.
    pub weight_seeds: usize,
    pub base_seed: u64,
    /// Worker threads (seed-level parallelism); results are merged in seed
    /// order, so the output does not depend on this.
    pub jobs: usize,
}

/// Per-seed mean log matrices, computed on backbone-only models in 32-bit
/// precision. Each worker owns its models; merge order is by seed index.
pub fn per_seed_matrices(cfg: &SeededErfConfig) -> Result<Vec<Vec<f64>>> {
    use crate::arch::{build_model, Parts};

    if cfg.weight_seeds == 0 {
        return Err(Error::InvalidArgument {
            op: "erf",
            detail: "need at least one weight seed".into(),
        });
    }
    let run_one = |idx: usize| -> Result<Vec<f64>> {
        let model = build_model::<f32>(
            &cfg.variant,
            cfg.protocol,
            Parts::Backbone,
            cfg.base_seed + idx as u64,
        )?;
        // Random weights need calibrated normalization statistics before any
        // eval-mode gradient analysis is meaningful.
        model.calibrate_norms(cfg.input_size, 2, cfg.base_seed + idx as u64)?;
        mean_log_matrix(
            &model,
            cfg.stage,
            cfg.input_size,
            cfg.inputs,
            cfg.base_seed ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )
    };

    let jobs = cfg.jobs.max(1).min(cfg.weight_seeds);
    if jobs == 1 {
        return (0..cfg.weight_seeds).map(run_one).collect();
    }

    let mut slots: Vec<Result<Vec<f64>>> = Vec::with_capacity(cfg.weight_seeds);
    slots.resize_with(cfg.weight_seeds, || Ok(Vec::new()));
    std::thread::scope(|scope| {
        let mut chunks: Vec<&mut [Result<Vec<f64>>]> = Vec::new();
        let mut rest = slots.as_mut_slice();
        let per = cfg.weight_seeds.div_ceil(jobs);
        while !rest.is_empty() {
            let take = per.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            chunks.push(head);
            rest = tail;
        }
        let run_one = &run_one;
        let mut start = 0usize;
        for chunk in chunks {
            let base = start;
            start += chunk.len();
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    *slot = run_one(base + off);
                }
            });
        }
    });
    slots.into_iter().collect()
}

/// Mean stage score over independently seeded models: each seed's averaged
/// matrix is normalized and scored, then the scores are averaged.
pub fn seed_mean_h_bar(cfg: &SeededErfConfig) -> Result<f64> {
    let mats = per_seed_matrices(cfg)?;
    let mut total = 0.0;
    for mut m in mats {
        normalize_unit(&mut m);
        total += erf_score(&m).1;
    }
    Ok(total / cfg.weight_seeds as f64)
}

/// Report averaged over weight seeds: per-seed mean log maps are averaged,
/// then normalized and scored.
pub fn erf_report_seeded(cfg: &SeededErfConfig) -> Result<ErfReport> {
    let mats = per_seed_matrices(cfg)?;
    let hw = cfg.input_size * cfg.input_size;
    let mut matrix = vec![0.0f64; hw];
    for m in &mats {
        for (acc, v) in matrix.iter_mut().zip(m) {
            *acc += v;
        }
    }
    for v in matrix.iter_mut() {
        *v /= mats.len() as f64;
    }
    normalize_unit(&mut matrix);
    let (h_values, h_bar) = erf_score(&matrix);
    Ok(ErfReport {
        stage: cfg.stage,
        input_size: cfg.input_size,
        inputs: cfg.inputs,
        weight_seeds: cfg.weight_seeds,
        noise_seed: cfg.base_seed,
        thresholds: thresholds(),
        h_values,
        h_bar,
        matrix,
        matrix_size: [cfg.input_size, cfg.input_size],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_score_trivial_maps() {
        let ones = vec![1.0; 64];
        let (h, mean) = erf_score(&ones);
        assert!(h.iter().all(|&v| v == 1.0));
        assert_eq!(mean, 1.0);

        // Exactly one quarter at 1.0, the rest 0.
        let mut quarter = vec![0.0; 100];
        for v in quarter.iter_mut().take(25) {
            *v = 1.0;
        }
        let (h, mean) = erf_score(&quarter);
        assert!(h.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        assert!((mean - 0.25).abs() < 1e-12);
    }

    #[test]
    fn erf_score_linear_ramp_counts() {
        // 100 entries 0.00 .. 0.99: h(t) counts entries strictly above t.
        let ramp: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let (h, mean) = erf_score(&ramp);
        assert!((h[0] - 0.49).abs() < 1e-12, "h(0.50) = {}", h[0]);
        assert!((h[8] - 0.09).abs() < 1e-12, "h(0.90) = {}", h[8]);
        // Oracle: direct counting.
        let expect_mean = thresholds()
            .iter()
            .map(|&t| ramp.iter().filter(|&&v| v > t).count() as f64 / 100.0)
            .sum::<f64>()
            / 9.0;
        assert!((mean - expect_mean).abs() < 1e-12);
    }

    #[test]
    fn h_is_non_increasing_in_threshold() {
        let mut rng = crate::rng::Rng::new(3);
        let a: Vec<f64> = (0..500).map(|_| rng.uniform()).collect();
        let (h, mean) = erf_score(&a);
        for pair in h.windows(2) {
            assert!(pair[0] >= pair[1]);
        }
        assert!((0.0..=1.0).contains(&mean));
    }

    #[test]
    fn normalize_handles_constant_maps() {
        let mut a = vec![3.0; 10];
        normalize_unit(&mut a);
        assert!(a.iter().all(|&v| v == 0.0));
    }
}
