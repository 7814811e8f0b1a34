//! Micro-benchmark depthwise+pointwise conv pairs across kernel sizes.
//!
//! Times the four stage-shaped inputs with reduced repeats so the example
//! stays quick; use the `bench` subcommand for the full-length run.
//! Absolute numbers are hardware specific — only the orderings matter.
//!
//!     cargo run --release --example bench_kernels

use msnet::analysis::bench::{bench_conv, STAGE_SPECS};

fn main() -> msnet::Result<()> {
    let kernels = [3, 5, 7, 9];
    let cells = bench_conv(&STAGE_SPECS, &kernels, 5, 1, 0)?;

    println!("{:<14} {:>8} {:>10} {:>10} {:>10} {:>10}", "input", "channels", "k=3", "k=5", "k=7", "k=9");
    for spec in STAGE_SPECS {
        let row: Vec<f64> = kernels
            .iter()
            .map(|&k| {
                cells
                    .iter()
                    .find(|c| c.input == spec.input && c.kernel == k)
                    .map(|c| c.median_ms)
                    .unwrap()
            })
            .collect();
        println!(
            "{:<14} {:>8} {:>8.1}ms {:>8.1}ms {:>8.1}ms {:>8.1}ms",
            format!("{0}x{0}", spec.input),
            spec.channels,
            row[0],
            row[1],
            row[2],
            row[3]
        );
    }
    Ok(())
}
