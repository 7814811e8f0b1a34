//! Micro-benchmark of depthwise + pointwise convolution pairs.
//!
//! Each cell times one forward of a depthwise k x k conv followed by a
//! pointwise 1 x 1 conv (kernel 1 means pointwise only) on a fixed-seed
//! random input, single threaded, in 32-bit precision. The statistic is the
//! median over `repeats` timed runs after `warmups` discarded ones.
//! Absolute times are hardware specific; only orderings are meaningful.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{conv2d, Tensor};

/// Input extent and channel count of one benchmark row.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BenchSpec {
    pub input: usize,
    pub channels: usize,
}

/// The four standard rows: stage-shaped inputs from 320^2/160 to 40^2/1280.
pub const STAGE_SPECS: [BenchSpec; 4] = [
    BenchSpec { input: 320, channels: 160 },
    BenchSpec { input: 160, channels: 320 },
    BenchSpec { input: 80, channels: 640 },
    BenchSpec { input: 40, channels: 1280 },
];

#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub input: usize,
    pub channels: usize,
    pub kernel: usize,
    pub median_ms: f64,
    /// Derived rate: forwards per second.
    pub rate_per_s: f64,
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

struct Cell {
    spec: BenchSpec,
    kernel: usize,
    input: Tensor<f32>,
    dw: Option<Tensor<f32>>,
    pw: Tensor<f32>,
    times_ms: Vec<f64>,
}

impl Cell {
    fn build(spec: BenchSpec, kernel: usize, seed: u64) -> Result<Self> {
        if kernel != 1 && (kernel % 2 == 0 || kernel < 3) {
            return Err(Error::InvalidArgument {
                op: "bench",
                detail: format!("kernel must be 1 or odd >= 3, got {kernel}"),
            });
        }
        let c = spec.channels;
        let mut rng = Rng::derive(seed, &format!("bench.{}.{}.{}", spec.input, c, kernel));
        Ok(Cell {
            spec,
            kernel,
            input: Tensor::<f32>::randn(&[1, c, spec.input, spec.input], &mut rng)?,
            dw: if kernel > 1 {
                Some(Tensor::<f32>::randn(&[c, 1, kernel, kernel], &mut rng)?)
            } else {
                None
            },
            pw: Tensor::<f32>::randn(&[c, c, 1, 1], &mut rng)?,
            times_ms: Vec::new(),
        })
    }

    fn run(&self) -> Result<Tensor<f32>> {
        let c = self.spec.channels;
        let mid = match &self.dw {
            Some(w) => conv2d(&self.input, w, None, 1, (self.kernel - 1) / 2, c)?,
            None => self.input.clone(),
        };
        conv2d(&mid, &self.pw, None, 1, 0, 1)
    }
}

/// Time one (spec, kernel) cell in isolation.
pub fn bench_cell(
    spec: BenchSpec,
    kernel: usize,
    repeats: usize,
    warmups: usize,
    seed: u64,
) -> Result<BenchCell> {
    Ok(bench_conv(&[spec], &[kernel], repeats, warmups, seed)?.remove(0))
}

/// Full timing table over specs x kernels.
///
/// Each spec row is measured as its own tightly interleaved block: the
/// row's cells share identical buffer footprints (only the depthwise
/// weights differ), so every timed run starts from the same cache and
/// allocator state, and slow machine drift lands on all kernels of the row
/// equally. Orderings are only meaningful within a row.
pub fn bench_conv(
    specs: &[BenchSpec],
    kernels: &[usize],
    repeats: usize,
    warmups: usize,
    seed: u64,
) -> Result<Vec<BenchCell>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument { op: "bench", detail: "repeats must be positive".into() });
    }
    let mut all = Vec::with_capacity(specs.len() * kernels.len());
    for &spec in specs {
        let mut cells = Vec::with_capacity(kernels.len());
        for &k in kernels {
            cells.push(Cell::build(spec, k, seed)?);
        }
        for _ in 0..warmups {
            for cell in &cells {
                let out = cell.run()?;
                std::hint::black_box(out.data().first().copied());
            }
        }
        for _ in 0..repeats {
            for cell in cells.iter_mut() {
                let start = Instant::now();
                let out = cell.run()?;
                std::hint::black_box(out.data().first().copied());
                cell.times_ms.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        all.extend(cells);
    }
    Ok(all
        .into_iter()
        .map(|cell| {
            let median_ms = median(cell.times_ms);
            BenchCell {
                input: cell.spec.input,
                channels: cell.spec.channels,
                kernel: cell.kernel,
                median_ms,
                rate_per_s: 1e3 / median_ms,
            }
        })
        .collect())
}

/// Render cells as a CSV table (input,channels,kernel,median_ms,rate_per_s).
pub fn to_csv(cells: &[BenchCell]) -> String {
    let mut out = String::from("input,channels,kernel,median_ms,rate_per_s\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.3}\n",
            c.input, c.channels, c.kernel, c.median_ms, c.rate_per_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn pointwise_only_beats_3x3_pair() {
        // Small spec to keep the test quick; the pointwise-only cell skips
        // the depthwise conv entirely so it must be strictly faster.
        let spec = BenchSpec { input: 64, channels: 64 };
        let k1 = bench_cell(spec, 1, 9, 2, 0).unwrap();
        let k3 = bench_cell(spec, 3, 9, 2, 0).unwrap();
        assert!(
            k1.median_ms < k3.median_ms,
            "pointwise {} ms vs 3x3 pair {} ms",
            k1.median_ms,
            k3.median_ms
        );
    }
}
