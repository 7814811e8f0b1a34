//! Effective-receptive-field comparison between kernel protocols.
//!
//! Computes the centre-seeded gradient contribution map of the stage-4 tap
//! for two backbones that differ only in their kernel protocol, then
//! compares high-contribution area scores. Runs at a reduced size so the
//! example finishes quickly; the ordering is the same at full scale.
//!
//!     cargo run --release --example erf_analysis

use msnet::analysis::erf::{erf_report_seeded, SeededErfConfig};
use msnet::arch::{KernelProtocol, ModelVariant};
use msnet::io::image::encode_pgm16;

fn main() -> msnet::Result<()> {
    let base = SeededErfConfig {
        variant: ModelVariant::xs(),
        protocol: KernelProtocol::homogeneous(3),
        stage: 4,
        input_size: 160,
        inputs: 1,
        weight_seeds: 3,
        base_seed: 0,
        jobs: 2,
    };

    for (label, protocol) in
        [("all 3x3", KernelProtocol::homogeneous(3)), ("ascending 3/5/7/9", KernelProtocol::hks())]
    {
        let report = erf_report_seeded(&SeededErfConfig { protocol, ..base.clone() })?;
        println!(
            "{label:<18} stage-{} h(0.50)={:.4} h(0.90)={:.4} mean={:.4}",
            report.stage, report.h_values[0], report.h_values[8], report.h_bar
        );
        let pgm = encode_pgm16(&report.matrix, report.matrix_size[0], report.matrix_size[1])?;
        let path = format!("erf-{}.pgm", label.split_whitespace().next().unwrap());
        std::fs::write(&path, pgm)?;
        println!("{:<18} contribution map written to {path}", "");
    }
    Ok(())
}
